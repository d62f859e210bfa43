use crate::chain::Activation;
use crate::{Error, Matrix, Result};

use super::{ForwardCache, MlpModel};

/// Per-layer weight gradients, shaped like [`MlpModel::weights`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub weights: Vec<Matrix>,
}

impl Gradients {
    pub fn zeros_like(model: &MlpModel) -> Self {
        Gradients {
            weights: model
                .weights
                .iter()
                .map(|w| Matrix::zeros(w.nrows(), w.ncols()))
                .collect(),
        }
    }

    /// Euclidean norm over all entries.
    pub fn norm(&self) -> f64 {
        self.weights.iter().map(|g| g.norm_squared()).sum::<f64>().sqrt()
    }
}

/// Which weights receive rank-objective gradients when the target is an
/// intermediate layer `ℓ`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LayerScope {
    /// Every hidden weight up to and including layer `ℓ`.
    #[default]
    UpTo,
    /// Only `W_ℓ`.
    LayerOnly,
}

/// Column-wise softmax with max subtraction.
pub fn softmax_columns(logits: &Matrix) -> Matrix {
    let mut p = logits.clone();
    for mut col in p.column_iter_mut() {
        let max = col.max();
        col.apply(|v| *v = (*v - max).exp());
        let total = col.sum();
        col /= total;
    }
    p
}

fn check_labels(labels: &[usize], n: usize, classes: usize) -> Result<()> {
    if labels.len() != n {
        return Err(Error::InvalidInput(format!("{} labels for {n} samples", labels.len())));
    }
    if let Some(bad) = labels.iter().find(|&&y| y >= classes) {
        return Err(Error::InvalidInput(format!("label {bad} out of range for {classes} classes")));
    }
    Ok(())
}

/// Mean softmax cross-entropy of `logits` against `labels`.
fn cross_entropy(logits: &Matrix, labels: &[usize]) -> Result<(f64, Matrix)> {
    let p = softmax_columns(logits);
    let n = labels.len() as f64;
    let mut total = 0.0;
    for (j, &y) in labels.iter().enumerate() {
        let col = logits.column(j);
        let max = col.max();
        let lse = max + col.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        total += lse - col[y];
    }
    let value = total / n;
    if !value.is_finite() {
        return Err(Error::NumericalOverflow(format!("loss is {value}")));
    }
    Ok((value, p))
}

/// Mean softmax cross-entropy of the model on `(x, labels)`.
pub fn loss(model: &MlpModel, x: &Matrix, labels: &[usize]) -> Result<f64> {
    check_labels(labels, x.ncols(), model.num_classes())?;
    let cache = model.forward(x)?;
    Ok(cross_entropy(&cache.logits, labels)?.0)
}

/// Gradient of the mean softmax cross-entropy with respect to every weight.
pub fn backward_loss(model: &MlpModel, x: &Matrix, labels: &[usize]) -> Result<(Gradients, f64)> {
    check_labels(labels, x.ncols(), model.num_classes())?;
    let cache = model.forward(x)?;
    let (value, p) = cross_entropy(&cache.logits, labels)?;
    let n = labels.len() as f64;
    let mut dlogits = p;
    for (j, &y) in labels.iter().enumerate() {
        dlogits[(y, j)] -= 1.0;
    }
    dlogits /= n;

    let mut grads = Gradients::zeros_like(model);
    let last = model.num_hidden();
    grads.weights[last] = &dlogits * cache.last_hidden().transpose();
    let dh = model.output_weight().tr_mul(&dlogits);
    backprop(model, &cache, dh, last, 1, &mut grads);
    Ok((grads, value))
}

/// `r(H) = Tr(M)²/‖M‖²_F` of hidden layer `target` (1-based).
pub fn rank_objective(model: &MlpModel, x: &Matrix, target: usize) -> Result<f64> {
    check_target(model, target)?;
    let cache = model.forward(x)?;
    Ok(rank_terms(cache.hidden(target))?.0)
}

fn check_target(model: &MlpModel, target: usize) -> Result<()> {
    if target == 0 || target > model.num_hidden() {
        return Err(Error::InvalidInput(format!(
            "target layer {target} outside 1..={}",
            model.num_hidden()
        )));
    }
    Ok(())
}

/// `r(H)` and `∂r/∂H`.
fn rank_terms(h: &Matrix) -> Result<(f64, Matrix)> {
    let n = h.ncols() as f64;
    let m = h * h.transpose() / n;
    let trace = m.trace();
    let fro_sq = m.norm_squared();
    if fro_sq == 0.0 {
        return Err(Error::DegenerateInput("hidden state is zero".into()));
    }
    let r = trace * trace / fro_sq;
    // ∂r/∂M = 2T/F·I − 2T²/F²·M, and ∂/∂H of ⟨G, HHᵀ/N⟩ is 2GH/N.
    let mut g = m * (-2.0 * trace * trace / (fro_sq * fro_sq));
    for i in 0..g.nrows() {
        g[(i, i)] += 2.0 * trace / fro_sq;
    }
    let dh = g * h * (2.0 / n);
    Ok((r, dh))
}

/// Gradient of `r(H_target)` with respect to the hidden weights (the output
/// weight gradient is zero). `target` defaults to the last hidden layer.
pub fn backward_rank_objective(
    model: &MlpModel,
    x: &Matrix,
    target: Option<usize>,
    scope: LayerScope,
) -> Result<(Gradients, f64)> {
    let target = target.unwrap_or(model.num_hidden());
    check_target(model, target)?;
    let cache = model.forward(x)?;
    let (r, dh) = rank_terms(cache.hidden(target))?;
    let mut grads = Gradients::zeros_like(model);
    let lowest = match scope {
        LayerScope::UpTo => 1,
        LayerScope::LayerOnly => target,
    };
    backprop(model, &cache, dh, target, lowest, &mut grads);
    Ok((grads, r))
}

/// Propagates `dh = ∂f/∂H_top` down to layer `lowest`, filling the hidden
/// weight gradients of layers `lowest..=top`.
fn backprop(model: &MlpModel, cache: &ForwardCache, mut dh: Matrix, top: usize, lowest: usize, grads: &mut Gradients) {
    for l in (lowest..=top).rev() {
        let layer = &cache.layers[l - 1];
        let n = layer.a.ncols() as f64;
        let mut da = dh;
        if let Some(scale) = &layer.bn_scale {
            for (i, &s) in scale.iter().enumerate() {
                let a = layer.a.row(i);
                let c = s * s * s * da.row(i).dot(&a) / n;
                for j in 0..a.len() {
                    da[(i, j)] = s * da[(i, j)] - c * a[j];
                }
            }
        }
        let mut dz = da;
        if model.activation == Activation::Relu {
            dz.zip_apply(&layer.z, |g, z| {
                if z <= 0.0 {
                    *g = 0.0;
                }
            });
        }
        let prev = cache.hidden(l - 1);
        let w = &model.weights[l - 1];
        if model.has_skip(l) {
            grads.weights[l - 1] = &dz * prev.transpose() * model.gamma;
            if l > lowest {
                dh = w.tr_mul(&dz) * model.gamma + dz;
            } else {
                break;
            }
        } else {
            grads.weights[l - 1] = &dz * prev.transpose();
            if l > lowest {
                dh = w.tr_mul(&dz);
            } else {
                break;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::init::{InitKind, RngHandle};
    use approx::assert_abs_diff_eq;

    #[test]
    fn single_layer_closed_form() {
        let mut rng = RngHandle::new(1, 0);
        let w = rng.gaussian_matrix(3, 4);
        let model = MlpModel::new(vec![4, 3], vec![w.clone()], Activation::Linear, vec![], 1.0).unwrap();
        let x = rng.gaussian_matrix(4, 1);
        let (g, _) = backward_loss(&model, &x, &[2]).unwrap();
        let mut diff = softmax_columns(&(&w * &x));
        diff[(2, 0)] -= 1.0;
        assert_abs_diff_eq!(g.weights[0], &diff * x.transpose(), epsilon = 1e-14);
    }

    #[test]
    fn output_gradient_columns_sum_to_zero() {
        let mut rng = RngHandle::new(2, 0);
        let model = MlpModel::random(
            vec![4, 5, 3],
            Activation::Relu,
            vec![false],
            f64::INFINITY,
            InitKind::Gaussian,
            1.0,
            &mut rng,
        )
        .unwrap();
        let x = rng.gaussian_matrix(4, 6);
        let (g, _) = backward_loss(&model, &x, &[0, 1, 2, 0, 1, 2]).unwrap();
        for j in 0..5 {
            assert!(g.weights[1].column(j).sum().abs() < 1e-14);
        }
    }

    #[test]
    fn uniform_logits_give_log_classes() {
        let model = MlpModel::new(vec![2, 3], vec![Matrix::zeros(3, 2)], Activation::Linear, vec![], 1.0).unwrap();
        let x = Matrix::from_element(2, 3, 1.0);
        let value = loss(&model, &x, &[0, 1, 2]).unwrap();
        assert_abs_diff_eq!(value, 3f64.ln(), epsilon = 1e-14);
    }

    #[test]
    fn label_validation() {
        let model = MlpModel::new(vec![2, 3], vec![Matrix::zeros(3, 2)], Activation::Linear, vec![], 1.0).unwrap();
        let x = Matrix::zeros(2, 2);
        assert!(backward_loss(&model, &x, &[0, 3]).is_err());
        assert!(backward_loss(&model, &x, &[0]).is_err());
    }

    #[test]
    fn rank_gradient_vanishes_at_identity_moment() {
        let n = 4.0f64;
        let x = Matrix::identity(4, 4) * n.sqrt();
        let model = MlpModel::new(
            vec![4, 4, 2],
            vec![Matrix::identity(4, 4), Matrix::zeros(2, 4)],
            Activation::Linear,
            vec![false],
            f64::INFINITY,
        )
        .unwrap();
        let (g, r) = backward_rank_objective(&model, &x, None, LayerScope::UpTo).unwrap();
        assert_abs_diff_eq!(r, 4.0, epsilon = 1e-12);
        assert!(g.norm() < 1e-12);
    }

    #[test]
    fn rank_objective_is_scale_invariant_under_bn() {
        let mut rng = RngHandle::new(3, 0);
        let model = MlpModel::random(
            vec![6, 6, 6, 2],
            Activation::Linear,
            vec![true, true],
            1.0,
            InitKind::Gaussian,
            1.0,
            &mut rng,
        )
        .unwrap();
        let x = rng.gaussian_matrix(6, 10);
        let a = rank_objective(&model, &x, 2).unwrap();
        let b = rank_objective(&model, &(&x * 13.0), 2).unwrap();
        assert_abs_diff_eq!(a, b, epsilon = 1e-12);
    }

    #[test]
    fn zero_hidden_state_is_degenerate() {
        let model = MlpModel::new(
            vec![2, 2, 2],
            vec![Matrix::zeros(2, 2), Matrix::zeros(2, 2)],
            Activation::Linear,
            vec![false],
            f64::INFINITY,
        )
        .unwrap();
        let x = Matrix::identity(2, 2);
        assert!(matches!(
            backward_rank_objective(&model, &x, None, LayerScope::UpTo),
            Err(Error::DegenerateInput(_))
        ));
    }

    #[test]
    fn layer_only_scope_leaves_lower_layers() {
        let mut rng = RngHandle::new(4, 0);
        let model = MlpModel::random(
            vec![4, 4, 4, 4, 2],
            Activation::Linear,
            vec![false; 3],
            f64::INFINITY,
            InitKind::Gaussian,
            1.0,
            &mut rng,
        )
        .unwrap();
        let x = rng.gaussian_matrix(4, 8);
        let (g, _) = backward_rank_objective(&model, &x, Some(2), LayerScope::LayerOnly).unwrap();
        assert_eq!(g.weights[0].norm(), 0.0);
        assert!(g.weights[1].norm() > 0.0);
        assert_eq!(g.weights[2].norm(), 0.0);
        assert_eq!(g.weights[3].norm(), 0.0);
        let (g, _) = backward_rank_objective(&model, &x, Some(2), LayerScope::UpTo).unwrap();
        assert!(g.weights[0].norm() > 0.0);
    }
}
