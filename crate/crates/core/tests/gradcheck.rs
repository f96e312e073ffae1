//! Finite-difference oracle for the reverse-mode gradients.
//!
//! Central differences with step 1e-4 in double precision, compared at 1e-6
//! relative error on random instances of every shipped layer and loss.

use pipegrid::engine::serial::{backward_collect, forward_collect};
use pipegrid::matrix::Matrix;
use pipegrid::nn::{
    init_layers, loss_and_grad, Activation, DataBatch, LayerParams, LossKind, PrecisionMode,
};

fn network_loss(layers: &[LayerParams<f64>], batch: &DataBatch<f64>, kind: LossKind) -> f64 {
    let acts = forward_collect(layers, &batch.inputs, PrecisionMode::Full);
    let (loss, _) = loss_and_grad(
        acts.last().unwrap(),
        &batch.targets,
        kind,
        1,
        1.0,
        PrecisionMode::Full,
    )
    .unwrap();
    loss
}

fn analytic_grads(
    layers: &[LayerParams<f64>],
    batch: &DataBatch<f64>,
    kind: LossKind,
) -> (Vec<f64>, Matrix<f64>) {
    let acts = forward_collect(layers, &batch.inputs, PrecisionMode::Full);
    let (_, g_out) = loss_and_grad(
        acts.last().unwrap(),
        &batch.targets,
        kind,
        1,
        1.0,
        PrecisionMode::Full,
    )
    .unwrap();
    backward_collect(layers, &acts, &g_out, PrecisionMode::Full)
}

fn assert_close(analytic: f64, numeric: f64, what: &str) {
    let denom = analytic.abs().max(numeric.abs()).max(1e-6);
    let rel = (analytic - numeric).abs() / denom;
    assert!(
        rel <= 1e-6,
        "{what}: analytic {analytic} vs fd {numeric} (rel {rel:.3e})"
    );
}

/// Perturbs one flattened parameter of one layer.
fn with_param(
    layers: &[LayerParams<f64>],
    layer: usize,
    idx: usize,
    delta: f64,
) -> Vec<LayerParams<f64>> {
    let mut out = layers.to_vec();
    let l = &mut out[layer];
    let wlen = l.weights.len();
    if idx < wlen {
        l.weights.data_mut()[idx] += delta;
    } else {
        l.bias[idx - wlen] += delta;
    }
    l.refresh_quantized();
    out
}

fn check_network(dims: &[(usize, usize)], activation: Activation, kind: LossKind, seed: u64) {
    const H: f64 = 1e-4;
    let layers: Vec<LayerParams<f64>> = init_layers(dims, activation, seed);
    let samples = 3;
    let mut t = 0.17f64;
    let inputs = Matrix::from_fn(samples, dims[0].0, |_, _| {
        t = (t * 997.0).sin();
        t
    });
    let out_dim = dims.last().unwrap().1;
    let targets = match kind {
        LossKind::SquaredError => Matrix::from_fn(samples, out_dim, |_, _| {
            t = (t * 991.0).sin();
            0.5 * t
        }),
        LossKind::CrossEntropy => {
            Matrix::from_fn(
                samples,
                out_dim,
                |r, c| {
                    if c == r % out_dim {
                        1.0
                    } else {
                        0.0
                    }
                },
            )
        }
    };
    let batch = DataBatch::new(inputs, targets);

    let (grads, input_grad) = analytic_grads(&layers, &batch, kind);

    // Parameter gradients against central differences.
    let mut flat_idx = 0;
    for (l, layer) in layers.iter().enumerate() {
        for i in 0..layer.param_count() {
            let plus = network_loss(&with_param(&layers, l, i, H), &batch, kind);
            let minus = network_loss(&with_param(&layers, l, i, -H), &batch, kind);
            let fd = (plus - minus) / (2.0 * H);
            assert_close(
                grads[flat_idx],
                fd,
                &format!("layer {l} param {i} ({activation:?}/{kind:?})"),
            );
            flat_idx += 1;
        }
    }

    // Input gradients the same way.
    for s in 0..samples {
        for d in 0..dims[0].0 {
            let bump = |delta: f64| {
                let mut b = batch.clone();
                *b.inputs.at_mut(s, d) += delta;
                network_loss(&layers, &b, kind)
            };
            let fd = (bump(H) - bump(-H)) / (2.0 * H);
            assert_close(
                input_grad.at(s, d),
                fd,
                &format!("input ({s},{d}) ({activation:?}/{kind:?})"),
            );
        }
    }
}

#[test]
fn tanh_network_with_squared_error_matches_finite_differences() {
    check_network(
        &[(5, 4), (4, 4), (4, 3)],
        Activation::Tanh,
        LossKind::SquaredError,
        11,
    );
}

#[test]
fn tanh_network_with_cross_entropy_matches_finite_differences() {
    check_network(
        &[(5, 4), (4, 4), (4, 3)],
        Activation::Tanh,
        LossKind::CrossEntropy,
        12,
    );
}

#[test]
fn relu_network_matches_finite_differences() {
    check_network(
        &[(6, 5), (5, 3)],
        Activation::Relu,
        LossKind::SquaredError,
        13,
    );
}

#[test]
fn linear_network_matches_finite_differences() {
    check_network(
        &[(4, 4), (4, 2)],
        Activation::Linear,
        LossKind::SquaredError,
        14,
    );
}
