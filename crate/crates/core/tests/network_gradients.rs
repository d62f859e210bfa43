mod common;

use bnrank::chain::Activation;
use bnrank::init::{InitKind, RngHandle};
use bnrank::network::{backward_rank_objective, rank_objective, LayerScope, MlpModel};

use common::{finite_difference, gradient_errors, relative_error, smooth_random_case};

#[test]
fn random_models_match_finite_differences() {
    let mut rng = RngHandle::new(11, 0);
    for case in 0..20 {
        let (model, x, labels) = smooth_random_case(&mut rng);
        let (loss_err, rank_err) = gradient_errors(&model, &x, &labels);
        assert!(loss_err < 1e-5, "case {case}: loss gradient error {loss_err:e}");
        assert!(rank_err < 1e-5, "case {case}: rank gradient error {rank_err:e}");
    }
}

#[test]
fn depth_four_relu_loss_gradient() {
    let mut rng = RngHandle::new(12, 0);
    loop {
        let model = MlpModel::random(
            vec![8, 8, 8, 8, 8, 3],
            Activation::Relu,
            vec![false; 4],
            f64::INFINITY,
            InitKind::Gaussian,
            1.0,
            &mut rng,
        )
        .unwrap();
        let x = rng.gaussian_matrix(8, 8);
        let cache = model.forward(&x).unwrap();
        if cache.layers.iter().any(|c| c.z.iter().any(|v| v.abs() < common::KINK_MARGIN)) {
            continue;
        }
        let labels = [0, 1, 2, 0, 1, 2, 0, 1];
        let (loss_err, _) = gradient_errors(&model, &x, &labels);
        assert!(loss_err < 1e-5, "{loss_err:e}");
        break;
    }
}

#[test]
fn depth_three_linear_rank_gradient() {
    let mut rng = RngHandle::new(13, 0);
    let model = MlpModel::random(
        vec![8, 8, 8, 8, 2],
        Activation::Linear,
        vec![false; 3],
        f64::INFINITY,
        InitKind::Gaussian,
        1.0,
        &mut rng,
    )
    .unwrap();
    let x = rng.gaussian_matrix(8, 12);
    let (analytic, _) = backward_rank_objective(&model, &x, None, LayerScope::UpTo).unwrap();
    let numeric = finite_difference(&model, |m| rank_objective(m, &x, 3).unwrap());
    assert!(relative_error(&analytic, &numeric) < 1e-5);
}

#[test]
fn intermediate_target_gradients() {
    let mut rng = RngHandle::new(14, 0);
    let model = MlpModel::random(
        vec![6, 6, 6, 6, 2],
        Activation::Linear,
        vec![true, false, true],
        0.5,
        InitKind::Gaussian,
        1.0,
        &mut rng,
    )
    .unwrap();
    let x = rng.gaussian_matrix(6, 10);
    let (analytic, _) = backward_rank_objective(&model, &x, Some(2), LayerScope::UpTo).unwrap();
    let numeric = finite_difference(&model, |m| rank_objective(m, &x, 2).unwrap());
    assert!(relative_error(&analytic, &numeric) < 1e-5);

    let (only, _) = backward_rank_objective(&model, &x, Some(2), LayerScope::LayerOnly).unwrap();
    assert_eq!(only.weights[1], analytic.weights[1]);
    assert_eq!(only.weights[0].norm(), 0.0);
}

#[test]
fn identity_map_is_stationary_for_rank() {
    let n = 6usize;
    let x = bnrank::Matrix::identity(n, n) * (n as f64).sqrt();
    let model = MlpModel::new(
        vec![n, n, 2],
        vec![bnrank::Matrix::identity(n, n), bnrank::Matrix::zeros(2, n)],
        Activation::Linear,
        vec![false],
        f64::INFINITY,
    )
    .unwrap();
    let numeric = finite_difference(&model, |m| rank_objective(m, &x, 1).unwrap());
    assert!(numeric.norm() < 1e-8);
    let (analytic, r) = backward_rank_objective(&model, &x, None, LayerScope::UpTo).unwrap();
    assert!((r - n as f64).abs() < 1e-12);
    assert!(analytic.norm() < 1e-12);
}
