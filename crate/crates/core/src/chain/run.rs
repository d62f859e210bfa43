use crate::init::{sample_weight, RngHandle};
use crate::rank::{hard_rank, second_moment, soft_rank, MomentTraces, SingularSpectrum};
use crate::{Error, Matrix, Result};

use super::bn::{bn_chain_step, bn_op, normalize_rows_with_batch, residual};
use super::stats::ErgodicStats;
use super::{BnChainConfig, HiddenState, SecondMoment};

const PAIR_SALT: u64 = 0x7061_6972;
const DATA_SALT: u64 = 0x6461_7461;

/// Tolerances on the BN state invariants checked during a run.
const UNIT_DIAGONAL_TOL: f64 = 1e-10;
const OFFDIAG_TOL: f64 = 1e-10;

/// Functionals of one recorded layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerRecord {
    pub layer: usize,
    pub hard_rank: usize,
    pub soft_rank: usize,
    pub r_lower: f64,
    pub fro_m_sq: f64,
    pub tr_m3: f64,
    pub tr_diag_m2_sq: f64,
    /// Leading eigenvalues of M (equal to σᵢ²/N), when requested.
    pub top_eigs: Vec<f64>,
}

/// Result of a chain run.
#[derive(Debug, Clone)]
pub struct ChainRun {
    /// Sums over layers 1..=depth; the input state is excluded.
    pub stats: ErgodicStats,
    /// Layer 0 (the normalized input) and every `record_every`-th layer.
    pub records: Vec<LayerRecord>,
    pub final_moment: SecondMoment,
}

fn record(layer: usize, m: &SecondMoment, ev: &[f64], n: usize, cfg: &BnChainConfig) -> (LayerRecord, SingularSpectrum, MomentTraces) {
    let spectrum = SingularSpectrum::from_eigenvalues(ev, n);
    let traces = MomentTraces::with_eigenvalues(m, ev);
    let rec = LayerRecord {
        layer,
        hard_rank: hard_rank(&spectrum),
        soft_rank: soft_rank(&spectrum, cfg.tau),
        r_lower: traces.trace * traces.trace / traces.fro_sq,
        fro_m_sq: traces.fro_sq,
        tr_m3: traces.tr_m3,
        tr_diag_m2_sq: traces.tr_diag_m2_sq,
        top_eigs: ev.iter().take(cfg.top_k).copied().collect(),
    };
    (rec, spectrum, traces)
}

fn check_state(m: &SecondMoment, layer: usize, cfg: &BnChainConfig) -> Result<()> {
    let mm = m.as_matrix();
    let d = m.dim();
    for i in 0..d {
        if cfg.unit_diagonal_expected() && (mm[(i, i)] - 1.0).abs() > UNIT_DIAGONAL_TOL {
            return Err(Error::InvariantViolation(format!(
                "layer {layer}: M[{i},{i}] = {} is not 1",
                mm[(i, i)]
            )));
        }
        for j in (i + 1)..d {
            if mm[(i, j)].abs() > 1.0 + OFFDIAG_TOL {
                return Err(Error::InvariantViolation(format!(
                    "layer {layer}: |M[{i},{j}]| = {} exceeds 1",
                    mm[(i, j)].abs()
                )));
            }
        }
    }
    Ok(())
}

/// Evolves the BN chain from `x` for `cfg.depth` layers.
///
/// The input passes through one normalization first so that the row-norm
/// convention holds from layer 0. Linear chains run on M, everything else on
/// H. Weights are drawn from `rng` in layer order.
pub fn run_bn_chain(cfg: &BnChainConfig, x: &HiddenState, rng: &mut RngHandle) -> Result<ChainRun> {
    cfg.validate()?;
    if x.d() != cfg.d || x.n() != cfg.n {
        return Err(Error::InvalidInput(format!(
            "input is {}x{}, config expects {}x{}",
            x.d(),
            x.n(),
            cfg.d,
            cfg.n
        )));
    }
    if cfg.require_full_rank {
        let rank = hard_rank(&SingularSpectrum::of_matrix(&x.h));
        if rank != cfg.d {
            return Err(Error::Precondition(format!(
                "input rank {rank} < d = {}",
                cfg.d
            )));
        }
    }

    let mut stats = ErgodicStats::for_width(cfg.d, cfg.tau, &mut rng.substream(PAIR_SALT));
    let every = cfg.effective_record_every();
    let mut records = Vec::with_capacity(cfg.depth / every + 1);

    let h0 = bn_op(&HiddenState::at_layer(x.h.clone(), 0)?, cfg.centering, cfg.bn_epsilon)?;
    let mut m = second_moment(&h0.h)?;
    if cfg.check_invariants {
        check_state(&m, 0, cfg)?;
    }
    let ev = m.eigenvalues();
    records.push(record(0, &m, &ev, cfg.n, cfg).0);

    let mspace = cfg.uses_mspace();
    // Linear chains only depend on M, so a d×rank(X) factor F with
    // F Fᵀ = H Hᵀ carries the whole state. Normalizing the rows of F keeps
    // |M_ij| ≤ 1 exact, which iterating on M itself does not near rank one.
    let mut h = if mspace { compress(&h0) } else { h0 };
    let n = cfg.n as f64;
    for layer in 1..=cfg.depth {
        let w = sample_weight(&cfg.init, cfg.d, cfg.d, rng);
        if mspace {
            let mut f = residual(&h.h, &w, cfg.gamma);
            normalize_rows_with_batch(&mut f, cfg.n, false, 0.0, layer)?;
            let mut mm = &f * f.transpose();
            mm /= n;
            crate::rank::symmetrize(&mut mm);
            m = SecondMoment::from_symmetric_unchecked(mm);
            h = HiddenState { h: f, layer_index: layer };
        } else {
            h = bn_chain_step(&h, &w, cfg)?;
            m = second_moment(&h.h)?;
        }
        if cfg.check_invariants {
            check_state(&m, layer, cfg)?;
        }
        let ev = m.eigenvalues();
        let (rec, spectrum, traces) = record(layer, &m, &ev, cfg.n, cfg);
        stats.observe(&m, &spectrum, &traces);
        if layer % every == 0 {
            records.push(rec);
        }
    }
    if !stats.sums_finite() {
        return Err(Error::NumericalOverflow("non-finite ergodic sums".into()));
    }
    Ok(ChainRun {
        stats,
        records,
        final_moment: m,
    })
}

/// `U_r Σ_r` from the SVD of `h`, truncated to its numerical rank `r`. A
/// linear chain cannot raise the rank, so the truncated factor spans every
/// later state exactly.
fn compress(h: &HiddenState) -> HiddenState {
    let svd = h.h.clone().svd(true, false);
    let u = svd.u.expect("left singular vectors requested");
    let spectrum = SingularSpectrum::of_matrix(&h.h);
    let r = hard_rank(&spectrum).max(1);
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    let f = Matrix::from_fn(h.d(), r, |i, j| u[(i, order[j])] * svd.singular_values[order[j]]);
    HiddenState {
        h: f,
        layer_index: h.layer_index,
    }
}

/// A normalized, nearly rank-one input: `BN(u vᵀ + ε G)` with unit Gaussian
/// directions `u ∈ ℝ^d`, `v ∈ ℝ^N` and standard Gaussian noise `G`.
pub fn near_collinear_state(d: usize, n: usize, epsilon: f64, rng: &mut RngHandle) -> Result<HiddenState> {
    if !(0.0..=1.0).contains(&epsilon) {
        return Err(Error::InvalidInput(format!("epsilon {epsilon} outside [0, 1]")));
    }
    let u = unit_gaussian(d, rng);
    let v = unit_gaussian(n, rng);
    let g = rng.gaussian_matrix(d, n);
    let raw = Matrix::from_fn(d, n, |i, j| u[i] * v[j] + epsilon * g[(i, j)]);
    bn_op(&HiddenState::new(raw)?, false, 0.0)
}

fn unit_gaussian(len: usize, rng: &mut RngHandle) -> Vec<f64> {
    let v: Vec<f64> = (0..len).map(|_| rng.standard_normal()).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / norm).collect()
}

/// Runs the BN chain from a nearly collinear input and keeps the top ten
/// eigenvalues of M (σᵢ²/N) per recorded layer.
pub fn collinear_amplification(cfg: &BnChainConfig, epsilon: f64, rng: &mut RngHandle) -> Result<ChainRun> {
    let mut cfg = cfg.clone();
    cfg.top_k = cfg.top_k.max(10);
    let x = near_collinear_state(cfg.d, cfg.n, epsilon, &mut rng.substream(DATA_SALT))?;
    run_bn_chain(&cfg, &x, rng)
}
