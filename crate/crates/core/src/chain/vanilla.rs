use nalgebra::DVector;

use crate::init::{sample_weight, RngHandle};
use crate::rank::{hard_rank, second_moment, soft_rank, MomentTraces, SingularSpectrum};
use crate::{Error, Matrix, Result};

use super::bn::residual;
use super::run::LayerRecord;
use super::{Activation, BnChainConfig, HiddenState};

const POWER_ITERATIONS: usize = 50;
const POWER_TOL: f64 = 1e-10;
const DEFAULT_TOP_K: usize = 10;

pub type VanillaRecord = LayerRecord;

/// Trajectory of the unnormalized chain.
#[derive(Debug, Clone)]
pub struct VanillaRun {
    pub records: Vec<VanillaRecord>,
}

impl VanillaRun {
    /// First recorded layer at which the hard rank reaches 1.
    pub fn collapse_layer(&self) -> Option<usize> {
        self.records.iter().find(|r| r.hard_rank <= 1).map(|r| r.layer)
    }
}

/// Largest singular value of `h` by power iteration on `hᵀh`, warm-started
/// from `v` (updated in place to the converged right singular vector).
pub fn spectral_norm(h: &Matrix, v: &mut DVector<f64>) -> f64 {
    if v.len() != h.ncols() || v.norm() == 0.0 {
        *v = DVector::from_element(h.ncols(), 1.0 / (h.ncols() as f64).sqrt());
    }
    let mut sigma = 0.0;
    for _ in 0..POWER_ITERATIONS {
        let hv = h * &*v;
        let next = h.tr_mul(&hv);
        let norm = next.norm();
        if norm == 0.0 || !norm.is_finite() {
            return hv.norm();
        }
        let s = norm.sqrt();
        *v = next / norm;
        let converged = (s - sigma).abs() <= POWER_TOL * s;
        sigma = s;
        if converged {
            break;
        }
    }
    (h * &*v).norm()
}

fn vanilla_record(layer: usize, h: &Matrix, cfg: &BnChainConfig, top_k: usize) -> Result<LayerRecord> {
    let spectrum = SingularSpectrum::of_matrix(h);
    let m = second_moment(h)?;
    let traces = MomentTraces::of(&m);
    let n = h.ncols() as f64;
    Ok(LayerRecord {
        layer,
        hard_rank: hard_rank(&spectrum),
        soft_rank: soft_rank(&spectrum, cfg.tau),
        r_lower: if traces.fro_sq > 0.0 {
            traces.trace * traces.trace / traces.fro_sq
        } else {
            0.0
        },
        fro_m_sq: traces.fro_sq,
        tr_m3: traces.tr_m3,
        tr_diag_m2_sq: traces.tr_diag_m2_sq,
        top_eigs: spectrum.values().iter().take(top_k).map(|s| s * s / n).collect(),
    })
}

/// Evolves `H̃_ℓ = B_ℓ X / ‖B_ℓ X‖₂` with `B_ℓ = ∏ (I + γ W_k)` (or `∏ W_k`
/// for infinite γ), rescaling to unit spectral norm after every layer. With a
/// ReLU activation each layer applies `max(0, ·)` to the product before the
/// rescaling. A ReLU layer that zeroes every entry ends the chain in the
/// zero state, recorded with rank 0 for all remaining layers.
pub fn run_vanilla_chain(cfg: &BnChainConfig, x: &HiddenState, rng: &mut RngHandle) -> Result<VanillaRun> {
    cfg.validate()?;
    if x.d() != cfg.d {
        return Err(Error::InvalidInput(format!(
            "input has {} rows, config expects d = {}",
            x.d(),
            cfg.d
        )));
    }
    let top_k = if cfg.top_k == 0 { DEFAULT_TOP_K } else { cfg.top_k };
    let every = cfg.effective_record_every();
    let mut v = DVector::zeros(0);

    let mut h = x.h.clone();
    let s0 = spectral_norm(&h, &mut v);
    if s0 == 0.0 {
        return Err(Error::DegenerateInput("zero input".into()));
    }
    h /= s0;
    let mut records = vec![vanilla_record(0, &h, cfg, top_k)?];

    for layer in 1..=cfg.depth {
        let w = sample_weight(&cfg.init, cfg.d, cfg.d, rng);
        h = residual(&h, &w, cfg.gamma);
        if cfg.activation == Activation::Relu {
            h.apply(|e| *e = e.max(0.0));
        }
        let s = spectral_norm(&h, &mut v);
        if !s.is_finite() || h.iter().any(|e| !e.is_finite()) {
            return Err(Error::NumericalOverflow(format!("vanilla chain overflow at layer {layer}")));
        }
        if s == 0.0 {
            h.fill(0.0);
            let zero = vanilla_record(layer, &h, cfg, top_k)?;
            records.extend(
                (layer..=cfg.depth)
                    .filter(|l| l % every == 0)
                    .map(|l| LayerRecord { layer: l, ..zero.clone() }),
            );
            break;
        }
        h /= s;
        if layer % every == 0 {
            records.push(vanilla_record(layer, &h, cfg, top_k)?);
        }
    }
    Ok(VanillaRun { records })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::init::InitSpec;

    fn input(d: usize, n: usize, seed: u64) -> HiddenState {
        HiddenState::new(RngHandle::new(seed, 7).gaussian_matrix(d, n)).unwrap()
    }

    #[test]
    fn dead_relu_chain_stays_at_rank_zero() {
        let mut cfg = BnChainConfig::new(2, 4, f64::INFINITY, 200).with_activation(Activation::Relu);
        cfg.init = InitSpec::gaussian();
        let run = run_vanilla_chain(&cfg, &input(2, 4, 3), &mut RngHandle::new(3, 0)).unwrap();
        assert_eq!(run.records.len(), 201);
        let death = run.records.iter().position(|r| r.hard_rank == 0).expect("a 2-unit ReLU chain dies");
        assert!(run.records[death..].iter().all(|r| r.hard_rank == 0 && r.fro_m_sq == 0.0));
        assert_eq!(run.records.last().unwrap().layer, 200);
    }

    #[test]
    fn power_iteration_matches_svd() {
        let h = RngHandle::new(1, 0).gaussian_matrix(12, 9);
        let mut v = DVector::zeros(0);
        let s = spectral_norm(&h, &mut v);
        let top = SingularSpectrum::of_matrix(&h).max();
        assert!((s - top).abs() < 1e-6 * top, "{s} vs {top}");
    }

    #[test]
    fn gamma_zero_keeps_normalized_input() {
        let x = input(6, 6, 2);
        let cfg = BnChainConfig::new(6, 6, 0.0, 20);
        let run = run_vanilla_chain(&cfg, &x, &mut RngHandle::new(2, 0)).unwrap();
        let r0 = run.records[0].hard_rank;
        assert_eq!(r0, 6);
        assert!(run.records.iter().all(|r| r.hard_rank == r0));
        // power iteration underestimates σ₁, so the rescaled top value is >= 1
        assert!(run.records.iter().all(|r| (1.0 - 1e-12..1.01).contains(&(r.top_eigs[0] * 6.0))));
    }

    #[test]
    fn linear_rank_is_non_increasing() {
        let x = input(8, 8, 3);
        let cfg = BnChainConfig::new(8, 8, f64::INFINITY, 400);
        let run = run_vanilla_chain(&cfg, &x, &mut RngHandle::new(3, 0)).unwrap();
        // The thresholded rank can flicker by one while a singular value
        // ratio crosses σ_max·d·1e-7; it never climbs above that.
        let mut floor = usize::MAX;
        for r in &run.records {
            assert!(r.hard_rank <= floor.saturating_add(1));
            floor = floor.min(r.hard_rank);
        }
        assert_eq!(run.records.last().unwrap().hard_rank, 1);
        assert!(run.collapse_layer().is_some());
    }

    #[test]
    fn uniform_residual_products_collapse() {
        let x = input(8, 8, 4);
        let cfg = BnChainConfig::new(8, 8, 0.5, 3000).with_init(InitSpec::uniform_symmetric());
        let run = run_vanilla_chain(&cfg, &x, &mut RngHandle::new(4, 0)).unwrap();
        assert_eq!(run.records.last().unwrap().hard_rank, 1);
    }
}
