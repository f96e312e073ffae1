//! Seed derivation so that independent subsystems (parameter init, data
//! stream, fabric interleaving) draw from disjoint deterministic streams.

/// Well-known stream ids for one run seed.
pub mod streams {
    /// Layer parameter initialization.
    pub const PARAMS: u64 = 0x01;
    /// Synthetic data generation.
    pub const DATA: u64 = 0x02;
    /// Fabric delivery interleaving.
    pub const FABRIC: u64 = 0x03;
    /// Synthetic-task teacher parameters.
    pub const TEACHER: u64 = 0x04;
}

/// SplitMix64 finalizer over (base, stream).
pub fn derived_seed(base: u64, stream: u64) -> u64 {
    let mut z = base
        .wrapping_mul(0x9e3779b97f4a7c15)
        .wrapping_add(stream.wrapping_mul(0xbf58476d1ce4e5b9))
        .wrapping_add(0x94d049bb133111eb);
    z ^= z >> 30;
    z = z.wrapping_mul(0xbf58476d1ce4e5b9);
    z ^= z >> 27;
    z = z.wrapping_mul(0x94d049bb133111eb);
    z ^= z >> 31;
    z
}
