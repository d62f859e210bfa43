use crate::rank::symmetrize;
use crate::{Error, Matrix, Result};

use super::{Activation, BnChainConfig, HiddenState, ReluPlacement, SecondMoment};

/// Variance-only batch normalization with shift 0 and scale 1: row `i` is
/// divided by `√(‖row_i‖² / N + eps)`, after subtracting the row mean when
/// `centering` is set.
pub fn bn_op(h: &HiddenState, centering: bool, eps: f64) -> Result<HiddenState> {
    let mut out = h.h.clone();
    normalize_rows(&mut out, centering, eps, h.layer_index)?;
    Ok(HiddenState {
        h: out,
        layer_index: h.layer_index,
    })
}

pub(crate) fn normalize_rows(h: &mut Matrix, centering: bool, eps: f64, layer: usize) -> Result<()> {
    let n = h.ncols();
    normalize_rows_with_batch(h, n, centering, eps, layer)
}

/// Row normalization where `batch` (not the column count) is the divisor in
/// the variance; used on compressed factors of a wider batch.
pub(crate) fn normalize_rows_with_batch(
    h: &mut Matrix,
    batch: usize,
    centering: bool,
    eps: f64,
    layer: usize,
) -> Result<()> {
    let n = batch as f64;
    for i in 0..h.nrows() {
        let mut row = h.row_mut(i);
        if centering {
            let mean = row.sum() / n;
            row.add_scalar_mut(-mean);
        }
        let var = row.norm_squared() / n + eps;
        if var == 0.0 {
            return Err(Error::ZeroRow { row: i, layer });
        }
        if !var.is_finite() {
            return Err(Error::NumericalOverflow(format!("row {i} variance is {var}")));
        }
        row /= var.sqrt();
    }
    Ok(())
}

/// Elementwise `max(0, ·)`.
pub fn relu(m: &Matrix) -> Matrix {
    m.map(|v| v.max(0.0))
}

/// `H + γ W H`, or `W H` for infinite γ.
pub(crate) fn residual(h: &Matrix, w: &Matrix, gamma: f64) -> Matrix {
    if gamma.is_infinite() {
        w * h
    } else if gamma == 0.0 {
        h.clone()
    } else {
        let mut out = w * h;
        out *= gamma;
        out += h;
        out
    }
}

/// One layer of the batch-normalized chain.
pub fn bn_chain_step(h: &HiddenState, w: &Matrix, cfg: &BnChainConfig) -> Result<HiddenState> {
    if w.nrows() != h.d() || w.ncols() != h.d() {
        return Err(Error::InvalidInput(format!(
            "weight is {}x{}, state has {} rows",
            w.nrows(),
            w.ncols(),
            h.d()
        )));
    }
    let layer = h.layer_index + 1;
    let mut pre = residual(&h.h, w, cfg.gamma);
    match (cfg.activation, cfg.relu_placement) {
        (Activation::Linear, _) => normalize_rows(&mut pre, cfg.centering, cfg.bn_epsilon, layer)?,
        (Activation::Relu, ReluPlacement::PreBn) => {
            pre.apply(|v| *v = v.max(0.0));
            normalize_rows(&mut pre, cfg.centering, cfg.bn_epsilon, layer)?;
        }
        (Activation::Relu, ReluPlacement::PostBn) => {
            normalize_rows(&mut pre, cfg.centering, cfg.bn_epsilon, layer)?;
            pre.apply(|v| *v = v.max(0.0));
        }
    }
    if pre.iter().any(|v| !v.is_finite()) {
        return Err(Error::NumericalOverflow(format!("non-finite state at layer {layer}")));
    }
    Ok(HiddenState {
        h: pre,
        layer_index: layer,
    })
}

/// One linear layer of the chain written on the second moment:
/// `M_γ = A M Aᵀ` with `A = I + γW` (or `W`), then
/// `M₊ = diag(M_γ)^{-1/2} M_γ diag(M_γ)^{-1/2}`.
pub fn bn_chain_step_mspace(m: &SecondMoment, w: &Matrix, gamma: f64) -> Result<SecondMoment> {
    let d = m.dim();
    if w.nrows() != d || w.ncols() != d {
        return Err(Error::InvalidInput(format!(
            "weight is {}x{}, second moment is {d}x{d}",
            w.nrows(),
            w.ncols()
        )));
    }
    let a = if gamma.is_infinite() {
        w.clone()
    } else {
        let mut a = w * gamma;
        for i in 0..d {
            a[(i, i)] += 1.0;
        }
        a
    };
    let t = &a * m.as_matrix();
    let mut mg = &t * a.transpose();
    symmetrize(&mut mg);
    let mut scale = Vec::with_capacity(d);
    for i in 0..d {
        let v = mg[(i, i)];
        if v == 0.0 {
            return Err(Error::ZeroRow { row: i, layer: 0 });
        }
        if !v.is_finite() {
            return Err(Error::NumericalOverflow(format!("diagonal entry {i} is {v}")));
        }
        scale.push(1.0 / v.sqrt());
    }
    for j in 0..d {
        for i in 0..d {
            mg[(i, j)] *= scale[i] * scale[j];
        }
        mg[(j, j)] = 1.0;
    }
    Ok(SecondMoment::from_symmetric_unchecked(mg))
}
