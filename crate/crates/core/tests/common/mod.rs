#![allow(dead_code)]

use bnrank::chain::Activation;
use bnrank::init::{InitKind, RngHandle};
use bnrank::network::{
    backward_loss, backward_rank_objective, loss, rank_objective, Gradients, LayerScope, MlpModel,
};
use bnrank::Matrix;

pub const FD_STEP: f64 = 1e-5;
/// Pre-activations closer than this to the ReLU kink trigger a resample.
pub const KINK_MARGIN: f64 = 1e-3;

/// Central differences of `f` with respect to every weight entry.
pub fn finite_difference(model: &MlpModel, f: impl Fn(&MlpModel) -> f64) -> Gradients {
    let mut probe = model.clone();
    let mut out = Gradients::zeros_like(model);
    for l in 0..model.weights.len() {
        for idx in 0..model.weights[l].len() {
            let orig = probe.weights[l][idx];
            probe.weights[l][idx] = orig + FD_STEP;
            let up = f(&probe);
            probe.weights[l][idx] = orig - FD_STEP;
            let down = f(&probe);
            probe.weights[l][idx] = orig;
            out.weights[l][idx] = (up - down) / (2.0 * FD_STEP);
        }
    }
    out
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)` over all layers.
pub fn relative_error(a: &Gradients, b: &Gradients) -> f64 {
    let diff: f64 = a
        .weights
        .iter()
        .zip(&b.weights)
        .map(|(x, y)| (x - y).norm_squared())
        .sum::<f64>()
        .sqrt();
    let scale = a.norm().max(b.norm());
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

/// A random small model and batch with every pre-activation at least
/// [`KINK_MARGIN`] away from zero, so the loss is smooth in a neighborhood.
pub fn smooth_random_case(rng: &mut RngHandle) -> (MlpModel, Matrix, Vec<usize>) {
    loop {
        let depth = 1 + rng.below(4);
        let width = 2 + rng.below(7);
        let input = 2 + rng.below(7);
        let classes = 2 + rng.below(3);
        let mut dims = vec![input];
        dims.extend(std::iter::repeat_n(width, depth));
        dims.push(classes);
        let activation = if rng.below(2) == 0 { Activation::Linear } else { Activation::Relu };
        let use_bn: Vec<bool> = (0..depth).map(|_| rng.below(2) == 0).collect();
        let gamma = [f64::INFINITY, 0.5, 1.0][rng.below(3)];
        let n = 4 + rng.below(5);
        let model = MlpModel::random(dims, activation, use_bn, gamma, InitKind::Gaussian, 1.0, rng)
            .unwrap()
            .with_bn_epsilon(if rng.below(2) == 0 { 0.0 } else { 1e-3 });
        let x = rng.gaussian_matrix(input, n);
        let labels: Vec<usize> = (0..n).map(|_| rng.below(classes)).collect();
        let Ok(cache) = model.forward(&x) else { continue };
        let smooth = activation == Activation::Linear
            || cache.layers.iter().all(|c| c.z.iter().all(|v| v.abs() >= KINK_MARGIN));
        let alive = cache.layers.iter().all(|c| c.a.row_iter().all(|r| r.norm() > 1e-3));
        if smooth && alive {
            return (model, x, labels);
        }
    }
}

/// Relative errors of the loss gradient and of the rank-objective gradient
/// against central differences.
pub fn gradient_errors(model: &MlpModel, x: &Matrix, labels: &[usize]) -> (f64, f64) {
    let (analytic, _) = backward_loss(model, x, labels).unwrap();
    let numeric = finite_difference(model, |m| loss(m, x, labels).unwrap());
    let loss_err = relative_error(&analytic, &numeric);

    let target = model.num_hidden();
    let (analytic, _) = backward_rank_objective(model, x, None, LayerScope::UpTo).unwrap();
    let mut numeric = finite_difference(model, |m| rank_objective(m, x, target).unwrap());
    let out = numeric.weights.len() - 1;
    numeric.weights[out].fill(0.0);
    let rank_err = relative_error(&analytic, &numeric);
    (loss_err, rank_err)
}
