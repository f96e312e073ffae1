//! Emulated IEEE binary16 (1 sign / 5 exponent / 10 mantissa bits).
//!
//! Values stay stored in the working precision `T`; quantization snaps them
//! onto the binary16 grid with round-to-nearest-even. Out-of-range magnitudes
//! saturate to the largest finite half value instead of producing infinities,
//! and magnitudes below the subnormal range flush to zero. NaN propagates so
//! that overflow detection downstream still works.

use crate::scalar::Scalar;

/// Largest finite binary16 value, (2 - 2^-10) * 2^15.
pub const HALF_MAX: f64 = 65504.0;

/// Smallest positive normal binary16 value, 2^-14.
pub const HALF_MIN_NORMAL: f64 = 6.103515625e-5;

/// Rounds an `f64` to the nearest binary16-representable value.
pub fn quantize_half_f64(v: f64) -> f64 {
    if v.is_nan() {
        return f64::NAN;
    }
    if v == 0.0 {
        return v; // keeps the sign of zero
    }
    let a = v.abs();
    if a > HALF_MAX {
        return HALF_MAX.copysign(v); // saturate; also covers +-inf
    }
    let biased = (a.to_bits() >> 52) & 0x7ff;
    let exp = biased as i32 - 1023;
    // Normal halves have ulp 2^(e-10); subnormals share the fixed ulp 2^-24.
    let ulp_exp = if exp >= -14 { exp - 10 } else { -24 };
    let ulp = f64::from_bits(((1023 + ulp_exp) as u64) << 52);
    // a/ulp <= 65504/32 = 2047, so the scaled value is an exact integer-ranged
    // f64 and round_ties_even realizes IEEE round-to-nearest-even.
    ((a / ulp).round_ties_even() * ulp).copysign(v)
}

/// Quantizes a working-precision value onto the binary16 grid.
pub fn quantize_half<T: Scalar>(v: T) -> T {
    T::from_f64_lossy(quantize_half_f64(v.as_f64()))
}

/// Embeds a quantized value back into working precision. Binary16 values are
/// exactly representable in both f32 and f64, so this is the identity.
pub fn dequantize_half<T: Scalar>(v: T) -> T {
    v
}

/// Quantizes every element of a slice in place.
pub fn quantize_slice<T: Scalar>(values: &mut [T]) {
    for v in values {
        *v = quantize_half(*v);
    }
}
