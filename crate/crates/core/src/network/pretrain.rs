use rand::seq::index::sample;

use crate::init::RngHandle;
use crate::{Error, Matrix, Result};

use super::backward::{backward_rank_objective, rank_objective, Gradients, LayerScope};
use super::MlpModel;

/// Consecutive decreases of the traced objective that count as divergence.
const DIVERGENCE_RUN: usize = 10;
/// Relative drop of an already-trained layer's `r` that raises a guard flag.
const GUARD_DROP: f64 = 0.1;

/// Which objective each ascent step targets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PretrainMode {
    /// Maximize `r(H_L)` with respect to every hidden weight.
    EndToEnd,
    /// Sweep `ℓ = 1..L`, maximizing `r(H_ℓ)` at each stage.
    #[default]
    LayerWise,
}

/// Settings of the rank-maximizing pretraining loop.
#[derive(Debug, Clone, PartialEq)]
pub struct PretrainConfig {
    pub minibatch_size: usize,
    pub num_minibatches: usize,
    /// Ascent steps per minibatch (per layer in layer-wise mode).
    pub steps_per_minibatch: usize,
    /// Initial step of the backtracking search.
    pub step_size: f64,
    pub mode: PretrainMode,
    pub scope: LayerScope,
    /// Maximum number of halvings before a step is abandoned.
    pub max_halvings: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            minibatch_size: 64,
            num_minibatches: 1,
            steps_per_minibatch: 75,
            step_size: 0.1,
            mode: PretrainMode::LayerWise,
            scope: LayerScope::UpTo,
            max_halvings: 30,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.minibatch_size == 0 || self.num_minibatches == 0 {
            return Err(Error::InvalidInput("minibatch size and count must be positive".into()));
        }
        if !(self.step_size > 0.0) || !self.step_size.is_finite() {
            return Err(Error::InvalidInput("step size must be positive".into()));
        }
        Ok(())
    }
}

/// An already-trained layer whose `r` fell by more than 10% while a later
/// layer was being trained.
#[derive(Debug, Clone, PartialEq)]
pub struct GuardFlag {
    /// Layer being trained when the drop happened.
    pub stage: usize,
    /// Layer whose objective dropped.
    pub layer: usize,
    pub before: f64,
    pub after: f64,
}

/// Outcome of [`pretrain`].
#[derive(Debug, Clone, PartialEq)]
pub struct PretrainReport {
    /// `r(H_L)` on the probe batch before any step.
    pub initial_r: f64,
    /// `r(H_L)` on the probe batch after training.
    pub final_r: f64,
    /// `(target layer, r(H_target) after the step)` for every ascent step.
    pub trace: Vec<(usize, f64)>,
    pub guard_flags: Vec<GuardFlag>,
}

fn columns(data: &Matrix, idx: &[usize]) -> Matrix {
    Matrix::from_fn(data.nrows(), idx.len(), |i, j| data[(i, idx[j])])
}

fn draw_batch(data: &Matrix, size: usize, rng: &mut RngHandle) -> Matrix {
    if size >= data.ncols() {
        return data.clone();
    }
    let mut idx = sample(rng.rng(), data.ncols(), size).into_vec();
    idx.sort_unstable();
    columns(data, &idx)
}

fn apply_step(model: &MlpModel, grads: &Gradients, eta: f64) -> MlpModel {
    let mut next = model.clone();
    for (w, g) in next.weights.iter_mut().zip(&grads.weights) {
        w.zip_apply(g, |a, b| *a += eta * b);
    }
    next
}

/// One backtracking ascent step on `r(H_target)(batch)`: the step starts
/// at `step_size` and halves until the objective increases. Returns the
/// objective after the step (unchanged when no halving helped).
fn ascent_step(
    model: &mut MlpModel,
    batch: &Matrix,
    target: usize,
    scope: LayerScope,
    cfg: &PretrainConfig,
) -> Result<f64> {
    let (grads, r0) = backward_rank_objective(model, batch, Some(target), scope)?;
    if grads.norm() == 0.0 {
        return Ok(r0);
    }
    let mut eta = cfg.step_size;
    for _ in 0..=cfg.max_halvings {
        let trial = apply_step(model, &grads, eta);
        if trial.weights.iter().all(|w| w.iter().all(|v| v.is_finite())) {
            if let Ok(r1) = rank_objective(&trial, batch, target) {
                if r1 > r0 {
                    *model = trial;
                    return Ok(r1);
                }
            }
        }
        eta *= 0.5;
    }
    Ok(r0)
}

fn probe_values(model: &MlpModel, probe: &Matrix, upto: usize) -> Result<Vec<f64>> {
    (1..=upto).map(|l| rank_objective(model, probe, l)).collect()
}

/// Algorithm-1 pretraining: gradient ascent on the rank lower bound `r`
/// over minibatches drawn from the columns of `data`.
///
/// The probe batch (the first minibatch drawn) measures the initial and
/// final objective and the layer-wise guard. Ten consecutive decreases of
/// the traced objective abort with [`Error::StepSize`].
pub fn pretrain(
    model: &mut MlpModel,
    data: &Matrix,
    cfg: &PretrainConfig,
    rng: &mut RngHandle,
) -> Result<PretrainReport> {
    cfg.validate()?;
    if model.use_bn.iter().any(|&b| b) {
        return Err(Error::Precondition("pretraining targets networks without BN".into()));
    }
    let depth = model.num_hidden();
    if depth == 0 {
        return Err(Error::InvalidInput("model has no hidden layers".into()));
    }
    let probe = draw_batch(data, cfg.minibatch_size, rng);
    let initial_r = rank_objective(model, &probe, depth)?;
    let stages: Vec<usize> = match cfg.mode {
        PretrainMode::EndToEnd => vec![depth],
        PretrainMode::LayerWise => (1..=depth).collect(),
    };

    let mut trace = Vec::new();
    let mut guard_flags = Vec::new();
    let mut decreases = 0usize;
    let mut last = f64::NAN;
    for &target in &stages {
        let scope = match cfg.mode {
            PretrainMode::EndToEnd => LayerScope::UpTo,
            PretrainMode::LayerWise => cfg.scope,
        };
        let guarded = cfg.mode == PretrainMode::LayerWise && target > 1;
        let before = if guarded {
            probe_values(model, &probe, target - 1)?
        } else {
            Vec::new()
        };
        for k in 0..cfg.num_minibatches {
            let batch = if k == 0 {
                probe.clone()
            } else {
                draw_batch(data, cfg.minibatch_size, rng)
            };
            for _ in 0..cfg.steps_per_minibatch {
                let r = ascent_step(model, &batch, target, scope, cfg)?;
                if trace.last().is_some_and(|&(t, _)| t == target) && r < last {
                    decreases += 1;
                    if decreases >= DIVERGENCE_RUN {
                        return Err(Error::StepSize(format!(
                            "r(H_{target}) decreased for {DIVERGENCE_RUN} consecutive steps"
                        )));
                    }
                } else {
                    decreases = 0;
                }
                last = r;
                trace.push((target, r));
            }
        }
        if guarded {
            let after = probe_values(model, &probe, target - 1)?;
            for (j, (&b, &a)) in before.iter().zip(&after).enumerate() {
                if a < (1.0 - GUARD_DROP) * b {
                    guard_flags.push(GuardFlag {
                        stage: target,
                        layer: j + 1,
                        before: b,
                        after: a,
                    });
                }
            }
        }
    }
    let final_r = rank_objective(model, &probe, depth)?;
    Ok(PretrainReport {
        initial_r,
        final_r,
        trace,
        guard_flags,
    })
}
