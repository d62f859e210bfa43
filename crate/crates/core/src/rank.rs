//! Rank functionals of hidden representations.
//!
//! All quantities are computed either from the singular values of a hidden
//! state `H` (d×N) or from the spectrum of its second moment
//! `M = H Hᵀ / N`. The two coincide through `λᵢ(M) = σᵢ(H)² / N`.

use nalgebra::SymmetricEigen;

use crate::{Error, Matrix, Result};

/// Relative tolerance of the hard-rank rule: singular values at or below
/// `σ_max · d · HARD_RANK_REL_TOL` count as zero.
pub const HARD_RANK_REL_TOL: f64 = 1e-7;

/// A d×N matrix of hidden activations, one column per batch sample.
#[derive(Debug, Clone, PartialEq)]
pub struct HiddenState {
    pub h: Matrix,
    pub layer_index: usize,
}

impl HiddenState {
    pub fn new(h: Matrix) -> Result<Self> {
        Self::at_layer(h, 0)
    }

    pub fn at_layer(h: Matrix, layer_index: usize) -> Result<Self> {
        if h.nrows() == 0 || h.ncols() == 0 {
            return Err(Error::InvalidInput("hidden state must be non-empty".into()));
        }
        if h.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("hidden state has non-finite entries".into()));
        }
        Ok(HiddenState { h, layer_index })
    }

    pub fn d(&self) -> usize {
        self.h.nrows()
    }

    pub fn n(&self) -> usize {
        self.h.ncols()
    }
}

/// Symmetric d×d second moment `M = H Hᵀ / N`.
#[derive(Debug, Clone, PartialEq)]
pub struct SecondMoment(Matrix);

impl SecondMoment {
    /// Wraps a square symmetric matrix with finite entries.
    pub fn from_matrix(m: Matrix) -> Result<Self> {
        if !m.is_square() || m.nrows() == 0 {
            return Err(Error::InvalidInput("second moment must be square and non-empty".into()));
        }
        if m.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("second moment has non-finite entries".into()));
        }
        let d = m.nrows();
        let scale = m.amax().max(1.0);
        for i in 0..d {
            for j in (i + 1)..d {
                if (m[(i, j)] - m[(j, i)]).abs() > 1e-9 * scale {
                    return Err(Error::InvalidInput(format!(
                        "second moment not symmetric at ({i}, {j})"
                    )));
                }
            }
        }
        Ok(SecondMoment(m))
    }

    /// Wraps without validation; callers guarantee symmetry.
    pub(crate) fn from_symmetric_unchecked(m: Matrix) -> Self {
        SecondMoment(m)
    }

    pub fn identity(d: usize) -> Self {
        SecondMoment(Matrix::identity(d, d))
    }

    pub fn dim(&self) -> usize {
        self.0.nrows()
    }

    pub fn as_matrix(&self) -> &Matrix {
        &self.0
    }

    pub fn into_matrix(self) -> Matrix {
        self.0
    }

    /// Eigenvalues in descending order.
    pub fn eigenvalues(&self) -> Vec<f64> {
        let mut ev: Vec<f64> = self.0.symmetric_eigenvalues().iter().copied().collect();
        ev.sort_by(|a, b| b.total_cmp(a));
        ev
    }

    /// Eigen-decomposition `(values, vectors)` with values descending and the
    /// matching eigenvectors as columns.
    pub fn eigen(&self) -> (Vec<f64>, Matrix) {
        let eig = SymmetricEigen::new(self.0.clone());
        let mut order: Vec<usize> = (0..self.dim()).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
        let values = order.iter().map(|&k| eig.eigenvalues[k]).collect();
        let vectors = Matrix::from_fn(self.dim(), self.dim(), |i, j| eig.eigenvectors[(i, order[j])]);
        (values, vectors)
    }

    pub fn traces(&self) -> MomentTraces {
        MomentTraces::of(self)
    }
}

/// `M(H) = H Hᵀ / N`.
pub fn second_moment(h: &Matrix) -> Result<SecondMoment> {
    if h.nrows() == 0 || h.ncols() == 0 {
        return Err(Error::InvalidInput("empty matrix".into()));
    }
    if h.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("matrix has non-finite entries".into()));
    }
    let n = h.ncols() as f64;
    let mut m = h * h.transpose();
    m /= n;
    symmetrize(&mut m);
    Ok(SecondMoment(m))
}

pub(crate) fn symmetrize(m: &mut Matrix) {
    let d = m.nrows();
    for i in 0..d {
        for j in (i + 1)..d {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

/// Singular values of a d×N matrix, descending, together with the shape
/// information the rank rules need.
#[derive(Debug, Clone, PartialEq)]
pub struct SingularSpectrum {
    values: Vec<f64>,
    d: usize,
    n: usize,
}

impl SingularSpectrum {
    pub fn new(mut values: Vec<f64>, d: usize, n: usize) -> Result<Self> {
        if values.len() != d.min(n) {
            return Err(Error::InvalidInput(format!(
                "expected {} singular values, got {}",
                d.min(n),
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::InvalidInput("singular values must be finite and non-negative".into()));
        }
        values.sort_by(|a, b| b.total_cmp(a));
        Ok(SingularSpectrum { values, d, n })
    }

    /// Singular values of `h` via SVD.
    pub fn of_matrix(h: &Matrix) -> Self {
        let mut values: Vec<f64> = h.singular_values().iter().map(|v| v.max(0.0)).collect();
        values.sort_by(|a, b| b.total_cmp(a));
        values.truncate(h.nrows().min(h.ncols()));
        SingularSpectrum {
            values,
            d: h.nrows(),
            n: h.ncols(),
        }
    }

    /// Singular values of any `H` with `M(H) = m` and `n` columns, recovered
    /// from the eigenvalues of `m` as `σ = √(N λ)`.
    pub fn from_second_moment(m: &SecondMoment, n: usize) -> Self {
        Self::from_eigenvalues(&m.eigenvalues(), n)
    }

    /// As [`Self::from_second_moment`] with precomputed eigenvalues (any order).
    pub fn from_eigenvalues(eigenvalues: &[f64], n: usize) -> Self {
        let d = eigenvalues.len();
        let mut values: Vec<f64> = eigenvalues
            .iter()
            .map(|&l| (n as f64 * l.max(0.0)).sqrt())
            .collect();
        values.sort_by(|a, b| b.total_cmp(a));
        values.truncate(d.min(n));
        SingularSpectrum { values, d, n }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn max(&self) -> f64 {
        self.values.first().copied().unwrap_or(0.0)
    }
}

/// Number of singular values strictly above `σ_max · d · 1e-7`.
pub fn hard_rank(spec: &SingularSpectrum) -> usize {
    hard_rank_with_tolerance(spec, HARD_RANK_REL_TOL)
}

/// Hard rank with a custom relative tolerance in place of `1e-7`.
pub fn hard_rank_with_tolerance(spec: &SingularSpectrum, rel_tol: f64) -> usize {
    let smax = spec.max();
    if smax == 0.0 {
        return 0;
    }
    let threshold = smax * spec.d as f64 * rel_tol;
    spec.values.iter().filter(|&&s| s > threshold).count()
}

/// Soft rank: the number of singular values with `σ² / N ≥ τ`.
pub fn soft_rank(spec: &SingularSpectrum, tau: f64) -> usize {
    let n = spec.n as f64;
    spec.values.iter().filter(|&&s| s * s / n >= tau).count()
}

/// `Tr(M)² / ‖M‖²_F`, a differentiable lower bound on the rank.
pub fn r_lower_bound(m: &SecondMoment) -> Result<f64> {
    let fro_sq = m.0.norm_squared();
    if fro_sq == 0.0 {
        return Err(Error::DegenerateInput("r(H) undefined for a zero second moment".into()));
    }
    let tr = m.0.trace();
    Ok(tr * tr / fro_sq)
}

/// First-order (in γ²) expected drift of `‖M‖²_F` per BN chain step:
/// `2d² − 2‖M‖²_F − 8 Tr(M³) + 8 Tr(diag(M²)²)`.
pub fn delta_f_poly(m: &SecondMoment) -> f64 {
    let t = MomentTraces::of(m);
    let d = m.dim() as f64;
    2.0 * d * d - 2.0 * t.fro_sq - 8.0 * t.tr_m3 + 8.0 * t.tr_diag_m2_sq
}

/// The drift polynomial written in the eigenvalues of a second moment whose
/// rows share a common norm: `2d² − 2‖λ‖²₂ − 8‖λ‖³₃ + 8‖λ‖⁴₂ / d`.
pub fn spectral_delta_f(lambda: &[f64]) -> Result<f64> {
    if lambda.is_empty() {
        return Err(Error::InvalidInput("empty eigenvalue list".into()));
    }
    if lambda.iter().any(|l| !l.is_finite() || *l < 0.0) {
        return Err(Error::InvalidInput("eigenvalues must be finite and non-negative".into()));
    }
    let d = lambda.len() as f64;
    let sum: f64 = lambda.iter().sum();
    if (sum - d).abs() > 1e-8 {
        return Err(Error::InvalidInput(format!(
            "eigenvalues must sum to d = {d}, got {sum}"
        )));
    }
    let l2: f64 = lambda.iter().map(|l| l * l).sum();
    let l3: f64 = lambda.iter().map(|l| l * l * l).sum();
    Ok(2.0 * d * d - 2.0 * l2 - 8.0 * l3 + 8.0 * l2 * l2 / d)
}

/// Trace functionals of a second moment tracked along chains.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MomentTraces {
    pub trace: f64,
    /// ‖M‖²_F
    pub fro_sq: f64,
    /// Tr(M³)
    pub tr_m3: f64,
    /// Tr(diag(M²)²) = Σᵢ (Σⱼ M_ij²)²
    pub tr_diag_m2_sq: f64,
}

impl MomentTraces {
    pub fn of(m: &SecondMoment) -> Self {
        let m = &m.0;
        let m2 = m * m;
        let tr_m3 = m2.component_mul(m).sum();
        Self::assemble(m, tr_m3)
    }

    /// Uses `Tr(M³) = Σ λᵢ³` from an already computed spectrum, saving a
    /// matrix product.
    pub fn with_eigenvalues(m: &SecondMoment, eigenvalues: &[f64]) -> Self {
        let tr_m3 = eigenvalues.iter().map(|l| l * l * l).sum();
        Self::assemble(&m.0, tr_m3)
    }

    fn assemble(m: &Matrix, tr_m3: f64) -> Self {
        let mut fro_sq = 0.0;
        let mut tr_diag_m2_sq = 0.0;
        for i in 0..m.nrows() {
            let row_sq: f64 = m.row(i).iter().map(|v| v * v).sum();
            fro_sq += row_sq;
            tr_diag_m2_sq += row_sq * row_sq;
        }
        MomentTraces {
            trace: m.trace(),
            fro_sq,
            tr_m3,
            tr_diag_m2_sq,
        }
    }
}

/// All rank functionals of one hidden state.
#[derive(Debug, Clone, PartialEq)]
pub struct RankReport {
    pub hard_rank: usize,
    pub soft_rank: usize,
    pub r_lower: f64,
    pub tau: f64,
    pub frobenius_m_sq: f64,
    pub trace_m: f64,
}

/// Rank report of a d×N hidden state, using the SVD of `h`.
pub fn rank_report(h: &Matrix, tau: f64) -> Result<RankReport> {
    let m = second_moment(h)?;
    let spec = SingularSpectrum::of_matrix(h);
    Ok(RankReport {
        hard_rank: hard_rank(&spec),
        soft_rank: soft_rank(&spec, tau),
        r_lower: r_lower_bound(&m)?,
        tau,
        frobenius_m_sq: m.0.norm_squared(),
        trace_m: m.0.trace(),
    })
}
