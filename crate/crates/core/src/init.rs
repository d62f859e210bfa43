//! Weight sampling and reproducible random streams.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};

use crate::{Error, Matrix, Result};

/// Distribution family of weight entries.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InitKind {
    /// N(0, scale²).
    Gaussian,
    /// U[−√3·scale, √3·scale]: zero mean, variance scale².
    UniformSymmetric,
    /// U[0, 2·scale/√d_l] with d_l the fan-in. Not zero-mean: breaks the
    /// sign symmetry batch normalization relies on.
    UniformAsymmetric,
}

impl InitKind {
    pub fn is_symmetric(self) -> bool {
        !matches!(self, InitKind::UniformAsymmetric)
    }
}

impl fmt::Display for InitKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            InitKind::Gaussian => "gaussian",
            InitKind::UniformSymmetric => "uniform_symmetric",
            InitKind::UniformAsymmetric => "uniform_asymmetric",
        })
    }
}

impl FromStr for InitKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gaussian" => Ok(InitKind::Gaussian),
            "uniform_symmetric" | "uniform" => Ok(InitKind::UniformSymmetric),
            "uniform_asymmetric" | "asymmetric" => Ok(InitKind::UniformAsymmetric),
            other => Err(Error::Config(format!("unknown init kind `{other}`"))),
        }
    }
}

/// Weight-matrix distribution descriptor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InitSpec {
    pub kind: InitKind,
    /// Entry standard deviation for the symmetric kinds; a multiplier on the
    /// support for the asymmetric kind.
    pub scale: f64,
}

impl InitSpec {
    pub fn new(kind: InitKind) -> Self {
        InitSpec { kind, scale: 1.0 }
    }

    pub fn gaussian() -> Self {
        Self::new(InitKind::Gaussian)
    }

    pub fn uniform_symmetric() -> Self {
        Self::new(InitKind::UniformSymmetric)
    }

    pub fn uniform_asymmetric() -> Self {
        Self::new(InitKind::UniformAsymmetric)
    }

    pub fn with_scale(mut self, scale: f64) -> Self {
        self.scale = scale;
        self
    }

    /// Exact support `[lo, hi]` of an entry for a matrix with `fan_in`
    /// columns, or `None` for the unbounded Gaussian.
    pub fn support_bound(&self, fan_in: usize) -> Option<(f64, f64)> {
        match self.kind {
            InitKind::Gaussian => None,
            InitKind::UniformSymmetric => {
                let b = 3f64.sqrt() * self.scale;
                Some((-b, b))
            }
            InitKind::UniformAsymmetric => Some((0.0, 2.0 * self.scale / (fan_in as f64).sqrt())),
        }
    }
}

impl Default for InitSpec {
    fn default() -> Self {
        Self::gaussian()
    }
}

/// A seeded random stream. Each `(seed, stream_id)` pair addresses an
/// independent ChaCha keystream, so replicates can draw from one master seed
/// without coordination and reproduce bit-exactly.
#[derive(Debug, Clone)]
pub struct RngHandle {
    seed: u64,
    stream_id: u64,
    rng: ChaCha8Rng,
}

impl RngHandle {
    pub fn new(seed: u64, stream_id: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream_id);
        RngHandle {
            seed,
            stream_id,
            rng,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream_id(&self) -> u64 {
        self.stream_id
    }

    /// A fresh handle on a different stream of the same seed. `salt`
    /// separates sub-streams (weights, data, pair selection) of one replicate.
    pub fn substream(&self, salt: u64) -> Self {
        RngHandle::new(self.seed, mix(self.stream_id, salt))
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    pub fn standard_normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.rng)
    }

    pub fn gaussian_matrix(&mut self, rows: usize, cols: usize) -> Matrix {
        let data: Vec<f64> = (0..rows * cols).map(|_| self.standard_normal()).collect();
        Matrix::from_row_slice(rows, cols, &data)
    }

    pub fn below(&mut self, n: usize) -> usize {
        self.rng.random_range(0..n)
    }
}

// splitmix64 finalizer
fn mix(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Draws a `rows × cols` matrix with i.i.d. entries from `spec`, filled in
/// row-major order.
pub fn sample_weight(spec: &InitSpec, rows: usize, cols: usize, rng: &mut RngHandle) -> Matrix {
    let count = rows * cols;
    let data: Vec<f64> = match spec.kind {
        InitKind::Gaussian => {
            let s = spec.scale;
            (0..count).map(|_| s * rng.standard_normal()).collect()
        }
        InitKind::UniformSymmetric | InitKind::UniformAsymmetric => {
            let (lo, hi) = spec.support_bound(cols).expect("uniform kinds are bounded");
            let dist = Uniform::new_inclusive(lo, hi).expect("valid uniform bounds");
            (0..count).map(|_| dist.sample(rng.rng())).collect()
        }
    };
    Matrix::from_row_slice(rows, cols, &data)
}

/// `S W S` with `S = diag(signs)`: entry `(i, j)` is multiplied by
/// `signs[i] · signs[j]`.
pub fn sign_flip_conjugate(w: &Matrix, signs: &[f64]) -> Result<Matrix> {
    if !w.is_square() || signs.len() != w.nrows() {
        return Err(Error::InvalidInput(format!(
            "sign vector of length {} does not match a {}x{} matrix",
            signs.len(),
            w.nrows(),
            w.ncols()
        )));
    }
    if signs.iter().any(|s| *s != 1.0 && *s != -1.0) {
        return Err(Error::InvalidInput("signs must be ±1".into()));
    }
    Ok(Matrix::from_fn(w.nrows(), w.ncols(), |i, j| {
        signs[i] * signs[j] * w[(i, j)]
    }))
}
