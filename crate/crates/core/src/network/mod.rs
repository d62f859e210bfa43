//! A small bias-free MLP engine.
//!
//! Hidden layer `l` maps `H_{l-1}` to
//!
//! ```text
//! Z_l = H_{l-1} + γ W_l H_{l-1}     (widths match and γ finite)
//! Z_l = W_l H_{l-1}                 (otherwise)
//! H_l = BN(φ(Z_l))  or  φ(Z_l)
//! ```
//!
//! and the output layer is `logits = W_out H_L`. Samples are columns.
//! Gradients are computed by hand ([`backward_loss`],
//! [`backward_rank_objective`]); [`pretrain`] runs gradient ascent on the
//! rank lower bound `r(H)` and [`sgd_train`] is plain minibatch SGD on
//! softmax cross-entropy.
//!
//! # Checkpoint format
//!
//! [`MlpModel::write_checkpoint`] emits UTF-8 text with LF line endings:
//!
//! ```text
//! bnrank-mlp v1
//! layer_dims <d0> <d1> ... <d_out>
//! activation <linear|relu>
//! gamma <real|inf>
//! bn_epsilon <real>
//! use_bn <0|1> ... (one flag per hidden layer)
//! weight <index> <rows> <cols>
//! <row 0 entries, space separated>
//! ...
//! ```
//!
//! with one `weight` block per layer in order (hidden layers, then the
//! output layer). Entries are written with 17 significant digits, which
//! round-trips every `f64` exactly.

mod backward;
mod pretrain;
mod train;

use std::fmt::Write as _;
use std::io::{BufRead, Write};

use crate::chain::{format_gamma, parse_gamma, Activation};
use crate::init::{sample_weight, InitKind, InitSpec, RngHandle};
use crate::{Error, Matrix, Result};

pub use backward::{
    backward_loss, backward_rank_objective, loss, rank_objective, softmax_columns, Gradients, LayerScope,
};
pub use pretrain::{pretrain, GuardFlag, PretrainConfig, PretrainMode, PretrainReport};
pub use train::{
    accuracy, alignment_of_features, gradient_alignment, sgd_train, AlignmentReport, EpochRecord, NeuronAlignment,
    TrainTrace,
};

const CHECKPOINT_MAGIC: &str = "bnrank-mlp v1";

/// Network parameters and architecture flags.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpModel {
    /// `[d_0, d_1, …, d_L, d_out]`.
    pub layer_dims: Vec<usize>,
    /// `L` hidden weights (`d_l × d_{l-1}`) followed by the output weight.
    pub weights: Vec<Matrix>,
    pub activation: Activation,
    /// One flag per hidden layer.
    pub use_bn: Vec<bool>,
    /// Skip strength; `f64::INFINITY` drops the identity branch.
    pub gamma: f64,
    pub bn_epsilon: f64,
}

/// Cached intermediates of one hidden layer.
#[derive(Debug, Clone)]
pub struct LayerCache {
    /// Residual sum before the activation.
    pub z: Matrix,
    /// `φ(Z)`.
    pub a: Matrix,
    /// Per-row `1/√(‖a_i‖²/N + eps)` when the layer normalizes.
    pub bn_scale: Option<Vec<f64>>,
    /// Layer output `H_l`.
    pub h: Matrix,
}

/// Every intermediate of a forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    pub input: Matrix,
    pub layers: Vec<LayerCache>,
    pub logits: Matrix,
}

impl ForwardCache {
    /// `H_l` for `l = 0..=L`, with `H_0` the input.
    pub fn hidden(&self, l: usize) -> &Matrix {
        if l == 0 {
            &self.input
        } else {
            &self.layers[l - 1].h
        }
    }

    pub fn last_hidden(&self) -> &Matrix {
        self.hidden(self.layers.len())
    }
}

impl MlpModel {
    /// Model with the given weights, validated against `layer_dims`.
    pub fn new(
        layer_dims: Vec<usize>,
        weights: Vec<Matrix>,
        activation: Activation,
        use_bn: Vec<bool>,
        gamma: f64,
    ) -> Result<Self> {
        let model = MlpModel {
            layer_dims,
            weights,
            activation,
            use_bn,
            gamma,
            bn_epsilon: 0.0,
        };
        model.validate()?;
        Ok(model)
    }

    /// Randomly initialized model. Symmetric kinds draw entries with
    /// standard deviation `gain/√fan_in`; the asymmetric kind draws from
    /// `U[0, 2·gain/√fan_in]`.
    pub fn random(
        layer_dims: Vec<usize>,
        activation: Activation,
        use_bn: Vec<bool>,
        gamma: f64,
        kind: InitKind,
        gain: f64,
        rng: &mut RngHandle,
    ) -> Result<Self> {
        if layer_dims.len() < 2 {
            return Err(Error::InvalidInput("need at least input and output dims".into()));
        }
        let weights = layer_dims
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let scale = if kind.is_symmetric() {
                    gain / (fan_in as f64).sqrt()
                } else {
                    gain
                };
                sample_weight(&InitSpec::new(kind).with_scale(scale), fan_out, fan_in, rng)
            })
            .collect();
        Self::new(layer_dims, weights, activation, use_bn, gamma)
    }

    pub fn with_bn_epsilon(mut self, eps: f64) -> Self {
        self.bn_epsilon = eps;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let dims = &self.layer_dims;
        if dims.len() < 2 || dims.contains(&0) {
            return Err(Error::InvalidInput(format!("invalid layer dims {dims:?}")));
        }
        if self.weights.len() != dims.len() - 1 {
            return Err(Error::InvalidInput(format!(
                "{} weights for {} layers",
                self.weights.len(),
                dims.len() - 1
            )));
        }
        for (l, w) in self.weights.iter().enumerate() {
            if w.nrows() != dims[l + 1] || w.ncols() != dims[l] {
                return Err(Error::InvalidInput(format!(
                    "weight {l} is {}x{}, expected {}x{}",
                    w.nrows(),
                    w.ncols(),
                    dims[l + 1],
                    dims[l]
                )));
            }
            if w.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidInput(format!("weight {l} has non-finite entries")));
            }
        }
        if self.use_bn.len() != self.num_hidden() {
            return Err(Error::InvalidInput(format!(
                "{} BN flags for {} hidden layers",
                self.use_bn.len(),
                self.num_hidden()
            )));
        }
        if self.gamma.is_nan() || self.gamma < 0.0 {
            return Err(Error::InvalidInput("gamma must be >= 0".into()));
        }
        if !(self.bn_epsilon >= 0.0) || !self.bn_epsilon.is_finite() {
            return Err(Error::InvalidInput("bn_epsilon must be finite and >= 0".into()));
        }
        Ok(())
    }

    /// Number of hidden layers `L`.
    pub fn num_hidden(&self) -> usize {
        self.layer_dims.len() - 2
    }

    pub fn input_dim(&self) -> usize {
        self.layer_dims[0]
    }

    pub fn num_classes(&self) -> usize {
        *self.layer_dims.last().expect("validated dims")
    }

    /// Whether hidden layer `l` (1-based) carries the identity branch.
    pub fn has_skip(&self, l: usize) -> bool {
        self.gamma.is_finite() && self.layer_dims[l] == self.layer_dims[l - 1]
    }

    pub fn output_weight(&self) -> &Matrix {
        self.weights.last().expect("validated weights")
    }

    pub fn forward(&self, x: &Matrix) -> Result<ForwardCache> {
        if x.nrows() != self.input_dim() {
            return Err(Error::InvalidInput(format!(
                "input has {} rows, model expects {}",
                x.nrows(),
                self.input_dim()
            )));
        }
        if x.ncols() == 0 {
            return Err(Error::InvalidInput("empty batch".into()));
        }
        let mut layers: Vec<LayerCache> = Vec::with_capacity(self.num_hidden());
        for l in 1..=self.num_hidden() {
            let prev = layers.last().map_or(x, |c| &c.h);
            layers.push(self.layer_forward(l, prev)?);
        }
        let last = layers.last().map_or(x, |c| &c.h);
        let logits = self.output_weight() * last;
        Ok(ForwardCache {
            input: x.clone(),
            layers,
            logits,
        })
    }

    /// Hidden states `H_1, …, H_L` only.
    pub fn hidden_states(&self, x: &Matrix) -> Result<Vec<Matrix>> {
        Ok(self.forward(x)?.layers.into_iter().map(|c| c.h).collect())
    }

    fn layer_forward(&self, l: usize, h: &Matrix) -> Result<LayerCache> {
        let w = &self.weights[l - 1];
        let mut z = w * h;
        if self.has_skip(l) {
            z *= self.gamma;
            z += h;
        }
        let a = match self.activation {
            Activation::Linear => z.clone(),
            Activation::Relu => z.map(|v| v.max(0.0)),
        };
        let (out, bn_scale) = if self.use_bn[l - 1] {
            let n = a.ncols() as f64;
            let mut out = a.clone();
            let mut scale = Vec::with_capacity(a.nrows());
            for i in 0..a.nrows() {
                let var = a.row(i).norm_squared() / n + self.bn_epsilon;
                if var == 0.0 {
                    return Err(Error::ZeroRow { row: i, layer: l });
                }
                let s = 1.0 / var.sqrt();
                out.row_mut(i).scale_mut(s);
                scale.push(s);
            }
            (out, Some(scale))
        } else {
            (a.clone(), None)
        };
        if out.iter().any(|v| !v.is_finite()) {
            return Err(Error::NumericalOverflow(format!("non-finite activations at layer {l}")));
        }
        Ok(LayerCache {
            z,
            a,
            bn_scale,
            h: out,
        })
    }

    /// Serializes the model in the text checkpoint format.
    pub fn write_checkpoint<W: Write>(&self, mut out: W) -> Result<()> {
        let mut s = String::new();
        let join = |v: &mut dyn Iterator<Item = String>| v.collect::<Vec<_>>().join(" ");
        writeln!(s, "{CHECKPOINT_MAGIC}").unwrap();
        writeln!(s, "layer_dims {}", join(&mut self.layer_dims.iter().map(|d| d.to_string()))).unwrap();
        writeln!(s, "activation {}", self.activation).unwrap();
        writeln!(s, "gamma {}", format_gamma(self.gamma)).unwrap();
        writeln!(s, "bn_epsilon {:.16e}", self.bn_epsilon).unwrap();
        writeln!(
            s,
            "use_bn {}",
            join(&mut self.use_bn.iter().map(|b| if *b { "1" } else { "0" }.to_string()))
        )
        .unwrap();
        for (l, w) in self.weights.iter().enumerate() {
            writeln!(s, "weight {l} {} {}", w.nrows(), w.ncols()).unwrap();
            for i in 0..w.nrows() {
                writeln!(s, "{}", join(&mut w.row(i).iter().map(|v| format!("{v:.16e}")))).unwrap();
            }
        }
        out.write_all(s.as_bytes())?;
        Ok(())
    }

    /// Parses a checkpoint written by [`MlpModel::write_checkpoint`].
    pub fn read_checkpoint<R: BufRead>(input: R) -> Result<Self> {
        let mut cursor = LineCursor {
            lines: input.lines(),
            line_no: 0,
        };
        let (ln, header) = cursor.next("header")?;
        if header.trim_end() != CHECKPOINT_MAGIC {
            return Err(checkpoint_error(ln, format!("expected `{CHECKPOINT_MAGIC}`")));
        }
        let (ln, dims) = cursor.field("layer_dims")?;
        let layer_dims = dims
            .iter()
            .map(|t| {
                t.parse::<usize>()
                    .map_err(|_| checkpoint_error(ln, format!("bad dimension `{t}`")))
            })
            .collect::<Result<Vec<_>>>()?;
        let (_, act) = cursor.field("activation")?;
        let activation: Activation = act.first().map(String::as_str).unwrap_or("").parse()?;
        let (_, g) = cursor.field("gamma")?;
        let gamma = parse_gamma(g.first().map(String::as_str).unwrap_or(""))?;
        let (ln, e) = cursor.field("bn_epsilon")?;
        let bn_epsilon = e
            .first()
            .and_then(|t| t.parse::<f64>().ok())
            .ok_or_else(|| checkpoint_error(ln, "bad bn_epsilon".into()))?;
        let (ln, flags) = cursor.field("use_bn")?;
        let use_bn = flags
            .iter()
            .map(|t| match t.as_str() {
                "0" => Ok(false),
                "1" => Ok(true),
                other => Err(checkpoint_error(ln, format!("bad BN flag `{other}`"))),
            })
            .collect::<Result<Vec<_>>>()?;

        let mut weights = Vec::new();
        for l in 0..layer_dims.len().saturating_sub(1) {
            let (ln, shape) = cursor.field("weight")?;
            let nums: Vec<usize> = shape.iter().filter_map(|t| t.parse().ok()).collect();
            if nums.len() != 3 || nums[0] != l {
                return Err(checkpoint_error(ln, format!("bad weight block header for layer {l}")));
            }
            let (rows, cols) = (nums[1], nums[2]);
            let mut data = Vec::with_capacity(rows * cols);
            for _ in 0..rows {
                let (ln, row) = cursor.next("weight row")?;
                let before = data.len();
                for t in row.split_whitespace() {
                    data.push(
                        t.parse::<f64>()
                            .map_err(|_| checkpoint_error(ln, format!("bad entry `{t}`")))?,
                    );
                }
                if data.len() - before != cols {
                    return Err(checkpoint_error(ln, format!("expected {cols} entries")));
                }
            }
            weights.push(Matrix::from_row_slice(rows, cols, &data));
        }
        let model = MlpModel {
            layer_dims,
            weights,
            activation,
            use_bn,
            gamma,
            bn_epsilon,
        };
        model.validate()?;
        Ok(model)
    }
}

fn checkpoint_error(line: usize, message: String) -> Error {
    Error::Config(format!("checkpoint line {line}: {message}"))
}

struct LineCursor<R> {
    lines: std::io::Lines<R>,
    line_no: usize,
}

impl<R: BufRead> LineCursor<R> {
    fn next(&mut self, what: &str) -> Result<(usize, String)> {
        self.line_no += 1;
        match self.lines.next() {
            Some(line) => Ok((self.line_no, line?)),
            None => Err(Error::Config(format!("checkpoint ends before {what}"))),
        }
    }

    /// A `key value...` line; returns the values.
    fn field(&mut self, key: &str) -> Result<(usize, Vec<String>)> {
        let (ln, line) = self.next(key)?;
        let mut parts = line.split_whitespace();
        if parts.next() != Some(key) {
            return Err(checkpoint_error(ln, format!("expected `{key}`")));
        }
        Ok((ln, parts.map(str::to_string).collect()))
    }
}
