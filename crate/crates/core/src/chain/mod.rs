//! Markov chains of hidden representations.
//!
//! The batch-normalized chain evolves `H₊ = BN(H + γ W H)` with fresh random
//! `W` per layer. For linear activations it is simulated on the second moment
//! `M = H Hᵀ / N` directly, which costs O(d³) per layer independent of the
//! batch size. The vanilla chain is the unnormalized product `∏ (I + γ W)`
//! applied to the input and rescaled to unit spectral norm.

mod bn;
mod run;
mod stats;
mod vanilla;

use std::fmt;
use std::str::FromStr;

use crate::init::InitSpec;
use crate::{Error, Result};

pub use crate::rank::{HiddenState, SecondMoment};
pub use bn::{bn_chain_step, bn_chain_step_mspace, bn_op, relu};
pub use run::{collinear_amplification, near_collinear_state, run_bn_chain, ChainRun, LayerRecord};
pub use stats::{estimate_regularity, offdiag_mean_track, ErgodicStats, FULL_PAIR_LIMIT, PAIR_SUBSAMPLE};
pub use vanilla::{run_vanilla_chain, spectral_norm, VanillaRecord, VanillaRun};

/// Pointwise nonlinearity of a layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Linear,
    Relu,
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Activation::Linear => "linear",
            Activation::Relu => "relu",
        })
    }
}

impl FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(Activation::Linear),
            "relu" => Ok(Activation::Relu),
            other => Err(Error::Config(format!("unknown activation `{other}`"))),
        }
    }
}

/// Where the ReLU sits relative to the normalization.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ReluPlacement {
    /// `BN(φ(H + γWH))`
    #[default]
    PreBn,
    /// `φ(BN(H + γWH))`
    PostBn,
}

impl FromStr for ReluPlacement {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pre_bn" => Ok(ReluPlacement::PreBn),
            "post_bn" => Ok(ReluPlacement::PostBn),
            other => Err(Error::Config(format!("unknown relu placement `{other}`"))),
        }
    }
}

/// Parses a skip strength; `inf` drops the identity branch.
pub fn parse_gamma(s: &str) -> Result<f64> {
    let t = s.trim();
    if t.eq_ignore_ascii_case("inf") || t.eq_ignore_ascii_case("infinity") {
        return Ok(f64::INFINITY);
    }
    let g: f64 = t
        .parse()
        .map_err(|_| Error::Config(format!("invalid gamma `{s}`")))?;
    if g.is_nan() || g < 0.0 {
        return Err(Error::Config(format!("gamma must be >= 0, got `{s}`")));
    }
    Ok(g)
}

pub fn format_gamma(g: f64) -> String {
    if g.is_infinite() {
        "inf".to_string()
    } else {
        format!("{g}")
    }
}

/// Parameters of one chain run.
#[derive(Debug, Clone, PartialEq)]
pub struct BnChainConfig {
    pub d: usize,
    pub n: usize,
    /// Skip strength; `f64::INFINITY` means `H₊ = BN(W H)`.
    pub gamma: f64,
    pub depth: usize,
    pub init: InitSpec,
    pub activation: Activation,
    pub relu_placement: ReluPlacement,
    pub centering: bool,
    pub bn_epsilon: f64,
    /// Trajectory sampling stride; 0 selects the default for `depth`.
    pub record_every: usize,
    /// Soft-rank threshold.
    pub tau: f64,
    /// Number of leading eigenvalues of M kept in each record.
    pub top_k: usize,
    /// Fail with `Precondition` unless the input has rank d.
    pub require_full_rank: bool,
    /// Check unit diagonal and bounded off-diagonals of every M.
    pub check_invariants: bool,
    /// Simulate linear chains in H-space even though M-space suffices.
    pub force_hspace: bool,
}

impl BnChainConfig {
    pub fn new(d: usize, n: usize, gamma: f64, depth: usize) -> Self {
        BnChainConfig {
            d,
            n,
            gamma,
            depth,
            init: InitSpec::gaussian(),
            activation: Activation::Linear,
            relu_placement: ReluPlacement::PreBn,
            centering: false,
            bn_epsilon: 0.0,
            record_every: 0,
            tau: 0.5,
            top_k: 0,
            require_full_rank: false,
            check_invariants: true,
            force_hspace: false,
        }
    }

    pub fn with_activation(mut self, activation: Activation) -> Self {
        self.activation = activation;
        self
    }

    pub fn with_init(mut self, init: InitSpec) -> Self {
        self.init = init;
        self
    }

    pub fn with_record_every(mut self, every: usize) -> Self {
        self.record_every = every;
        self
    }

    /// Recording stride: the configured value, or 1 up to 10⁴ layers and
    /// `depth / 10⁴` beyond.
    pub fn effective_record_every(&self) -> usize {
        if self.record_every > 0 {
            self.record_every
        } else if self.depth <= 10_000 {
            1
        } else {
            self.depth.div_ceil(10_000)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d < 2 {
            return Err(Error::InvalidInput("chain width d must be >= 2".into()));
        }
        if self.n < 1 || self.depth < 1 {
            return Err(Error::InvalidInput("batch size and depth must be >= 1".into()));
        }
        if self.gamma.is_nan() || self.gamma < 0.0 {
            return Err(Error::InvalidInput("gamma must be >= 0".into()));
        }
        if self.bn_epsilon < 0.0 || !self.bn_epsilon.is_finite() {
            return Err(Error::InvalidInput("bn_epsilon must be finite and >= 0".into()));
        }
        if !(self.tau >= 0.0) {
            return Err(Error::InvalidInput("tau must be >= 0".into()));
        }
        Ok(())
    }

    /// Whether the M-space recursion reproduces this chain.
    pub fn uses_mspace(&self) -> bool {
        self.activation == Activation::Linear
            && !self.centering
            && self.bn_epsilon == 0.0
            && !self.force_hspace
    }

    /// Whether every state should carry the unit-diagonal invariant.
    pub(crate) fn unit_diagonal_expected(&self) -> bool {
        self.bn_epsilon == 0.0
            && !(self.activation == Activation::Relu && self.relu_placement == ReluPlacement::PostBn)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gamma_parsing() {
        assert_eq!(parse_gamma("inf").unwrap(), f64::INFINITY);
        assert_eq!(parse_gamma("0.5").unwrap(), 0.5);
        assert!(parse_gamma("-1").is_err());
        assert!(parse_gamma("abc").is_err());
        assert_eq!(format_gamma(f64::INFINITY), "inf");
        assert_eq!(format_gamma(0.1), "0.1");
    }

    #[test]
    fn record_every_defaults() {
        assert_eq!(BnChainConfig::new(4, 4, 1.0, 10_000).effective_record_every(), 1);
        assert_eq!(BnChainConfig::new(4, 4, 1.0, 100_000).effective_record_every(), 10);
        assert_eq!(
            BnChainConfig::new(4, 4, 1.0, 100_000).with_record_every(3).effective_record_every(),
            3
        );
    }

    #[test]
    fn validation() {
        assert!(BnChainConfig::new(1, 4, 1.0, 10).validate().is_err());
        assert!(BnChainConfig::new(4, 4, -1.0, 10).validate().is_err());
        assert!(BnChainConfig::new(4, 4, f64::INFINITY, 10).validate().is_ok());
    }
}
