use rand::seq::SliceRandom;

use crate::init::RngHandle;
use crate::rank::{hard_rank, SingularSpectrum};
use crate::{Error, Matrix, Result};

use super::backward::{backward_loss, softmax_columns};
use super::MlpModel;

/// Training metrics on the full dataset after an epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    /// 0 is the untrained model.
    pub epoch: usize,
    pub loss: f64,
    pub accuracy: f64,
    /// Hard rank of the last hidden layer on the full dataset.
    pub hard_rank: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainTrace {
    pub epochs: Vec<EpochRecord>,
}

impl TrainTrace {
    pub fn final_accuracy(&self) -> f64 {
        self.epochs.last().map_or(f64::NAN, |e| e.accuracy)
    }

    pub fn best_accuracy(&self) -> f64 {
        self.epochs.iter().map(|e| e.accuracy).fold(f64::NAN, f64::max)
    }
}

/// Fraction of columns whose arg-max logit equals the label.
pub fn accuracy(logits: &Matrix, labels: &[usize]) -> f64 {
    let hits = labels
        .iter()
        .enumerate()
        .filter(|&(j, &y)| logits.column(j).argmax().0 == y)
        .count();
    hits as f64 / labels.len() as f64
}

fn evaluate(model: &MlpModel, x: &Matrix, labels: &[usize], epoch: usize) -> Result<EpochRecord> {
    let cache = model.forward(x)?;
    let loss = super::backward::loss(model, x, labels)?;
    Ok(EpochRecord {
        epoch,
        loss,
        accuracy: accuracy(&cache.logits, labels),
        hard_rank: hard_rank(&SingularSpectrum::of_matrix(cache.last_hidden())),
    })
}

/// Minibatch SGD on mean softmax cross-entropy over the columns of `x`.
/// Each epoch visits a fresh permutation of the samples; a trailing partial
/// batch is used as is.
pub fn sgd_train(
    model: &mut MlpModel,
    x: &Matrix,
    labels: &[usize],
    epochs: usize,
    batch_size: usize,
    lr: f64,
    rng: &mut RngHandle,
) -> Result<TrainTrace> {
    if batch_size == 0 {
        return Err(Error::InvalidInput("batch size must be positive".into()));
    }
    if labels.len() != x.ncols() {
        return Err(Error::InvalidInput(format!("{} labels for {} samples", labels.len(), x.ncols())));
    }
    let mut records = vec![evaluate(model, x, labels, 0)?];
    let mut order: Vec<usize> = (0..x.ncols()).collect();
    for epoch in 1..=epochs {
        order.shuffle(rng.rng());
        for chunk in order.chunks(batch_size) {
            let xb = Matrix::from_fn(x.nrows(), chunk.len(), |i, j| x[(i, chunk[j])]);
            let yb: Vec<usize> = chunk.iter().map(|&j| labels[j]).collect();
            let (grads, _) = backward_loss(model, &xb, &yb)?;
            for (w, g) in model.weights.iter_mut().zip(&grads.weights) {
                w.zip_apply(g, |a, b| *a -= lr * b);
            }
            if model.weights.iter().any(|w| w.iter().any(|v| !v.is_finite())) {
                return Err(Error::NumericalOverflow(format!("weights diverged in epoch {epoch}")));
            }
        }
        records.push(evaluate(model, x, labels, epoch)?);
    }
    Ok(TrainTrace { epochs: records })
}

/// Pairwise alignment of one output neuron's per-sample gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct NeuronAlignment {
    pub neuron: usize,
    pub mean_abs_cos: f64,
    pub min_abs_cos: f64,
    pub pairs: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AlignmentReport {
    pub neurons: Vec<NeuronAlignment>,
    /// Mean of |cos| over every pair of every neuron.
    pub mean_abs_cos: f64,
    pub min_abs_cos: f64,
    /// `(neuron, sample)` gradients left out because they are zero.
    pub excluded: usize,
}

/// Alignment of the per-sample gradients `∇_{W_out,k} L_i = (p_ik − y_ik)·h_i`
/// for last-layer features `h` (columns are samples) and output weight
/// `w_out`.
pub fn alignment_of_features(h: &Matrix, w_out: &Matrix, labels: &[usize]) -> Result<AlignmentReport> {
    if labels.len() != h.ncols() || w_out.ncols() != h.nrows() {
        return Err(Error::InvalidInput("feature, weight and label shapes disagree".into()));
    }
    let p = softmax_columns(&(w_out * h));
    let norms: Vec<f64> = h.column_iter().map(|c| c.norm()).collect();
    let mut neurons = Vec::with_capacity(w_out.nrows());
    let mut excluded = 0;
    let (mut total, mut count, mut global_min) = (0.0, 0usize, f64::INFINITY);
    for k in 0..w_out.nrows() {
        let coef: Vec<f64> = (0..h.ncols())
            .map(|i| p[(k, i)] - if labels[i] == k { 1.0 } else { 0.0 })
            .collect();
        let live: Vec<usize> = (0..h.ncols())
            .filter(|&i| coef[i] != 0.0 && norms[i] > 0.0 && norms[i].is_finite())
            .collect();
        excluded += h.ncols() - live.len();
        let (mut sum, mut min, mut pairs) = (0.0, f64::INFINITY, 0usize);
        for (a, &i) in live.iter().enumerate() {
            for &j in &live[a + 1..] {
                // |cos| of (c_i h_i, c_j h_j) equals |cos(h_i, h_j)|.
                let c = (h.column(i).dot(&h.column(j)) / (norms[i] * norms[j])).abs().min(1.0);
                sum += c;
                min = min.min(c);
                pairs += 1;
            }
        }
        if pairs > 0 {
            total += sum;
            count += pairs;
            global_min = global_min.min(min);
            neurons.push(NeuronAlignment {
                neuron: k,
                mean_abs_cos: sum / pairs as f64,
                min_abs_cos: min,
                pairs,
            });
        }
    }
    if count == 0 {
        return Err(Error::DegenerateInput(
            "fewer than two samples with nonzero gradients for every neuron".into(),
        ));
    }
    Ok(AlignmentReport {
        neurons,
        mean_abs_cos: total / count as f64,
        min_abs_cos: global_min,
        excluded,
    })
}

/// Alignment of the output-layer per-sample gradients of `model` on
/// `(x, labels)`.
pub fn gradient_alignment(model: &MlpModel, x: &Matrix, labels: &[usize]) -> Result<AlignmentReport> {
    let cache = model.forward(x)?;
    alignment_of_features(cache.last_hidden(), model.output_weight(), labels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chain::Activation;
    use crate::init::InitKind;

    #[test]
    fn rank_one_features_are_aligned() {
        let mut rng = RngHandle::new(1, 0);
        let u = rng.gaussian_matrix(6, 1);
        let c = rng.gaussian_matrix(1, 10);
        let h = &u * &c;
        let w = rng.gaussian_matrix(3, 6);
        let labels: Vec<usize> = (0..10).map(|i| i % 3).collect();
        let report = alignment_of_features(&h, &w, &labels).unwrap();
        assert!(report.min_abs_cos >= 1.0 - 1e-12);
        assert_eq!(report.excluded, 0);
    }

    #[test]
    fn orthogonal_features_are_unaligned() {
        let h = Matrix::identity(4, 4);
        let w = Matrix::from_element(2, 4, 0.1);
        let report = alignment_of_features(&h, &w, &[0, 1, 0, 1]).unwrap();
        assert_eq!(report.mean_abs_cos, 0.0);
    }

    #[test]
    fn zero_feature_samples_excluded() {
        let mut h = Matrix::identity(3, 3);
        h[(0, 1)] = 1.0;
        h.column_mut(2).fill(0.0);
        let w = Matrix::zeros(2, 3);
        let report = alignment_of_features(&h, &w, &[0, 1, 1]).unwrap();
        assert_eq!(report.excluded, 2);
        assert_eq!(report.neurons.len(), 2);
    }

    #[test]
    fn zero_learning_rate_keeps_model() {
        let mut rng = RngHandle::new(2, 0);
        let mut model = MlpModel::random(
            vec![4, 6, 2],
            Activation::Relu,
            vec![false],
            f64::INFINITY,
            InitKind::Gaussian,
            1.0,
            &mut rng,
        )
        .unwrap();
        let before = model.clone();
        let x = rng.gaussian_matrix(4, 20);
        let labels: Vec<usize> = (0..20).map(|i| i % 2).collect();
        let trace = sgd_train(&mut model, &x, &labels, 3, 5, 0.0, &mut rng).unwrap();
        assert_eq!(model, before);
        assert!(trace.epochs.windows(2).all(|w| w[0].accuracy == w[1].accuracy));
    }

    #[test]
    fn accuracy_counts_argmax() {
        let logits = Matrix::from_row_slice(2, 3, &[1.0, 0.0, 2.0, 0.0, 1.0, 3.0]);
        assert_eq!(accuracy(&logits, &[0, 1, 0]), 2.0 / 3.0);
    }
}
