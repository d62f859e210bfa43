use crate::init::RngHandle;
use crate::rank::{hard_rank, soft_rank, MomentTraces, SecondMoment, SingularSpectrum};
use crate::{Error, Result};

/// Widths up to this value track every off-diagonal pair of M.
pub const FULL_PAIR_LIMIT: usize = 64;
/// Number of off-diagonal pairs tracked above [`FULL_PAIR_LIMIT`].
pub const PAIR_SUBSAMPLE: usize = 1024;

/// Streaming sums of chain functionals over depth.
///
/// Ergodic averages are plain means of these sums; the regularity constant is
/// the ratio of two of them.
#[derive(Debug, Clone, PartialEq)]
pub struct ErgodicStats {
    tau: f64,
    count: u64,
    sum_soft_rank: f64,
    sum_hard_rank: f64,
    sum_r_lower: f64,
    sum_fro_m_sq: f64,
    sum_tr_m3: f64,
    sum_tr_diag_m2_sq: f64,
    pairs: Vec<(usize, usize)>,
    pair_sums: Vec<f64>,
}

impl ErgodicStats {
    pub fn new(tau: f64, pairs: Vec<(usize, usize)>) -> Self {
        let pair_sums = vec![0.0; pairs.len()];
        ErgodicStats {
            tau,
            count: 0,
            sum_soft_rank: 0.0,
            sum_hard_rank: 0.0,
            sum_r_lower: 0.0,
            sum_fro_m_sq: 0.0,
            sum_tr_m3: 0.0,
            sum_tr_diag_m2_sq: 0.0,
            pairs,
            pair_sums,
        }
    }

    /// Stats for width `d` with the default pair selection: every `i < j`
    /// up to [`FULL_PAIR_LIMIT`], otherwise [`PAIR_SUBSAMPLE`] distinct
    /// pairs drawn from `rng`.
    pub fn for_width(d: usize, tau: f64, rng: &mut RngHandle) -> Self {
        Self::new(tau, default_pairs(d, rng))
    }

    /// Adds one chain state.
    pub fn observe(&mut self, m: &SecondMoment, spectrum: &SingularSpectrum, traces: &MomentTraces) {
        self.count += 1;
        self.sum_soft_rank += soft_rank(spectrum, self.tau) as f64;
        self.sum_hard_rank += hard_rank(spectrum) as f64;
        self.sum_r_lower += traces.trace * traces.trace / traces.fro_sq;
        self.sum_fro_m_sq += traces.fro_sq;
        self.sum_tr_m3 += traces.tr_m3;
        self.sum_tr_diag_m2_sq += traces.tr_diag_m2_sq;
        let mm = m.as_matrix();
        for (sum, &(i, j)) in self.pair_sums.iter_mut().zip(&self.pairs) {
            *sum += mm[(i, j)];
        }
    }

    /// Convenience for tests and fixtures: computes spectrum and traces of
    /// `m` for a batch of `n` columns.
    pub fn observe_moment(&mut self, m: &SecondMoment, n: usize) {
        let ev = m.eigenvalues();
        let spectrum = SingularSpectrum::from_eigenvalues(&ev, n);
        let traces = MomentTraces::with_eigenvalues(m, &ev);
        self.observe(m, &spectrum, &traces);
    }

    /// Combines per-replicate accumulators. Pair selections must agree.
    pub fn merge(&mut self, other: &ErgodicStats) -> Result<()> {
        if self.pairs != other.pairs || self.tau != other.tau {
            return Err(Error::InvalidInput("cannot merge stats with different tracking".into()));
        }
        self.count += other.count;
        self.sum_soft_rank += other.sum_soft_rank;
        self.sum_hard_rank += other.sum_hard_rank;
        self.sum_r_lower += other.sum_r_lower;
        self.sum_fro_m_sq += other.sum_fro_m_sq;
        self.sum_tr_m3 += other.sum_tr_m3;
        self.sum_tr_diag_m2_sq += other.sum_tr_diag_m2_sq;
        for (a, b) in self.pair_sums.iter_mut().zip(&other.pair_sums) {
            *a += b;
        }
        Ok(())
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn pairs(&self) -> &[(usize, usize)] {
        &self.pairs
    }

    fn mean(&self, sum: f64) -> f64 {
        if self.count == 0 {
            f64::NAN
        } else {
            sum / self.count as f64
        }
    }

    pub fn mean_soft_rank(&self) -> f64 {
        self.mean(self.sum_soft_rank)
    }

    pub fn mean_hard_rank(&self) -> f64 {
        self.mean(self.sum_hard_rank)
    }

    pub fn mean_r_lower(&self) -> f64 {
        self.mean(self.sum_r_lower)
    }

    pub fn mean_fro_m_sq(&self) -> f64 {
        self.mean(self.sum_fro_m_sq)
    }

    pub fn mean_tr_m3(&self) -> f64 {
        self.mean(self.sum_tr_m3)
    }

    pub fn mean_tr_diag_m2_sq(&self) -> f64 {
        self.mean(self.sum_tr_diag_m2_sq)
    }

    pub(crate) fn sums_finite(&self) -> bool {
        [
            self.sum_soft_rank,
            self.sum_hard_rank,
            self.sum_r_lower,
            self.sum_fro_m_sq,
            self.sum_tr_m3,
            self.sum_tr_diag_m2_sq,
        ]
        .iter()
        .chain(&self.pair_sums)
        .all(|v| v.is_finite())
    }
}

fn default_pairs(d: usize, rng: &mut RngHandle) -> Vec<(usize, usize)> {
    let total = d * (d - 1) / 2;
    if d <= FULL_PAIR_LIMIT || total <= PAIR_SUBSAMPLE {
        return (0..d)
            .flat_map(|i| ((i + 1)..d).map(move |j| (i, j)))
            .collect();
    }
    let mut chosen = std::collections::BTreeSet::new();
    while chosen.len() < PAIR_SUBSAMPLE {
        let i = rng.below(d);
        let j = rng.below(d);
        if i != j {
            chosen.insert((i.min(j), i.max(j)));
        }
    }
    chosen.into_iter().collect()
}

/// Empirical regularity constant: accumulated `Tr(diag(M²)²)` over
/// accumulated `Tr(M³)`. Needs at least 10³ samples.
pub fn estimate_regularity(stats: &ErgodicStats) -> Result<f64> {
    if stats.count < 1000 {
        return Err(Error::Precondition(format!(
            "regularity estimate needs >= 1000 samples, have {}",
            stats.count
        )));
    }
    if stats.sum_tr_m3 == 0.0 {
        return Err(Error::DegenerateStats("accumulated Tr(M³) is zero".into()));
    }
    Ok(stats.sum_tr_diag_m2_sq / stats.sum_tr_m3)
}

/// Mean of the tracked off-diagonal entries of M over all recorded layers.
pub fn offdiag_mean_track(stats: &ErgodicStats) -> f64 {
    if stats.pairs.is_empty() || stats.count == 0 {
        return 0.0;
    }
    stats.pair_sums.iter().sum::<f64>() / (stats.pairs.len() as f64 * stats.count as f64)
}
