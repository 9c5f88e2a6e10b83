//! Supervised training loops for the classifier and the autoencoder.
//!
//! Both loops are plain mini-batch descent with a deterministic seeded
//! shuffle per epoch: given the same dataset, recipe, and seed they
//! reproduce bit-identical weights. The classifier minimizes softmax
//! cross-entropy under SGD; the autoencoder minimizes mean squared
//! reconstruction error under Adam.

use std::fmt;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::LabeledDataset;
use crate::models::{
    install_grads, AutoencoderModel, ClassifierModel, Parameterized,
};
use crate::rng::substream;
use crate::tensor::{Adam, Sgd, Tape, Tensor, TensorError};

/// Recipe for one supervised training run.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f32,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 5,
            batch_size: 64,
            learning_rate: 0.1,
        }
    }
}

/// Errors from a training run.
#[derive(Debug)]
pub enum TrainError {
    /// The training set has no samples.
    EmptyDataset,
    /// The batch size is zero.
    ZeroBatch,
    /// A forward/backward/update step failed (typically a non-finite
    /// loss); carries where it happened.
    Step {
        epoch: usize,
        batch: usize,
        source: TensorError,
    },
}

impl fmt::Display for TrainError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TrainError::EmptyDataset => write!(f, "cannot train on an empty dataset"),
            TrainError::ZeroBatch => write!(f, "batch size must be at least 1"),
            TrainError::Step {
                epoch,
                batch,
                source,
            } => write!(f, "training step failed at epoch {epoch}, batch {batch}: {source}"),
        }
    }
}

impl std::error::Error for TrainError {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            TrainError::Step { source, .. } => Some(source),
            _ => None,
        }
    }
}

/// Train a fresh classifier on `dataset`. Returns the model and the mean
/// cross-entropy per epoch (empty when `epochs` is 0).
pub fn train_classifier(
    dataset: &LabeledDataset,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<(ClassifierModel, Vec<f64>), TrainError> {
    if dataset.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    if cfg.batch_size == 0 {
        return Err(TrainError::ZeroBatch);
    }

    let mut model = ClassifierModel::new(dataset.num_classes(), substream_seed(seed, "init"));
    let mut optimizer = Sgd::new(cfg.learning_rate);
    let mut shuffle_rng = substream(seed, "train-shuffle");
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);

    let mut order: Vec<usize> = (0..dataset.len()).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut loss_sum = 0.0f64;
        let mut batches = 0usize;
        for (batch_no, batch_idx) in order.chunks(cfg.batch_size).enumerate() {
            let step = |model: &mut ClassifierModel,
                        optimizer: &mut Sgd|
             -> Result<f64, TensorError> {
                let (x, labels) = gather_batch(dataset, batch_idx);
                let labels: Vec<u32> = labels.iter().map(|&l| l as u32).collect();
                let mut tape = Tape::new();
                let xid = tape.input(&x);
                let binding = model.bind(&mut tape, true);
                let out = binding.forward(&mut tape, xid)?;
                let loss = tape.softmax_cross_entropy(out.logits, &labels)?;
                let loss_value = tape.value_scalar(loss) as f64;
                tape.backward(loss)?;
                install_grads(model, &tape, binding.param_ids())?;
                optimizer.step(&mut model.params_mut())?;
                Ok(loss_value)
            };
            let loss_value = step(&mut model, &mut optimizer).map_err(|source| {
                TrainError::Step {
                    epoch,
                    batch: batch_no,
                    source,
                }
            })?;
            loss_sum += loss_value;
            batches += 1;
        }
        epoch_losses.push(loss_sum / batches as f64);
    }
    Ok((model, epoch_losses))
}

/// Train a fresh autoencoder on the images of `dataset` (labels unused).
/// Returns the model and the mean per-pixel squared reconstruction error
/// per epoch.
pub fn train_autoencoder(
    dataset: &LabeledDataset,
    bottleneck: usize,
    epochs: usize,
    batch_size: usize,
    learning_rate: f32,
    seed: u64,
) -> Result<(AutoencoderModel, Vec<f64>), TrainError> {
    if dataset.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    if batch_size == 0 {
        return Err(TrainError::ZeroBatch);
    }

    let mut model = AutoencoderModel::new(bottleneck, substream_seed(seed, "ae-init"));
    let mut optimizer = Adam::new(learning_rate, 0.9, 0.999);
    let mut shuffle_rng = substream(seed, "ae-shuffle");
    let mut epoch_losses = Vec::with_capacity(epochs);

    let mut order: Vec<usize> = (0..dataset.len()).collect();
    for epoch in 0..epochs {
        order.shuffle(&mut shuffle_rng);
        let mut loss_sum = 0.0f64;
        let mut batches = 0usize;
        for (batch_no, batch_idx) in order.chunks(batch_size).enumerate() {
            let step = |model: &mut AutoencoderModel,
                        optimizer: &mut Adam|
             -> Result<f64, TensorError> {
                let (x, _) = gather_batch(dataset, batch_idx);
                let numel = x.numel() as f32;
                let mut tape = Tape::new();
                let xid = tape.input(&x);
                let binding = model.bind(&mut tape, true);
                let recon = binding.forward(&mut tape, xid)?;
                let sq = tape.l2_loss(recon, xid)?;
                let loss = tape.scale(sq, 1.0 / numel)?;
                let loss_value = tape.value_scalar(loss) as f64;
                tape.backward(loss)?;
                install_grads(model, &tape, binding.param_ids())?;
                optimizer.step(&mut model.params_mut())?;
                Ok(loss_value)
            };
            let loss_value = step(&mut model, &mut optimizer).map_err(|source| {
                TrainError::Step {
                    epoch,
                    batch: batch_no,
                    source,
                }
            })?;
            loss_sum += loss_value;
            batches += 1;
        }
        epoch_losses.push(loss_sum / batches as f64);
    }
    Ok((model, epoch_losses))
}

/// Derive the u64 seed of a named substream (see `rng::substream`).
fn substream_seed(seed: u64, label: &str) -> u64 {
    crate::rng::substream_seed(seed, label)
}

/// Stack the given dataset rows into one batch tensor plus labels.
fn gather_batch(dataset: &LabeledDataset, indices: &[usize]) -> (Tensor, Vec<usize>) {
    let per = dataset.image_numel();
    let mut values = Vec::with_capacity(indices.len() * per);
    let mut labels = Vec::with_capacity(indices.len());
    for &i in indices {
        values.extend_from_slice(dataset.image(i));
        labels.push(dataset.label(i));
    }
    let mut shape = dataset.images().shape().to_vec();
    shape[0] = indices.len();
    let x = Tensor::new(&shape, values).expect("batch rows are valid by dataset invariant");
    (x, labels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::predict_labels;
    use rand::Rng;

    /// Two visually distinct synthetic digit classes: class 0 lights the
    /// top rows, class 1 the bottom rows, plus mild noise.
    fn synthetic_dataset(n: usize, seed: u64) -> LabeledDataset {
        let mut rng = substream(seed, "synthetic");
        let mut values = Vec::with_capacity(n * 784);
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let class = i % 2;
            for y in 0..28 {
                for _x in 0..28 {
                    let lit = if class == 0 { y < 14 } else { y >= 14 };
                    let base: f32 = if lit { 0.85 } else { 0.1 };
                    let noise: f32 = rng.gen_range(-0.05..0.05);
                    values.push((base + noise).clamp(0.0, 1.0));
                }
            }
            labels.push(class);
        }
        let images = Tensor::new(&[n, 1, 28, 28], values).unwrap();
        LabeledDataset::new("synthetic", images, labels, 10).unwrap()
    }

    #[test]
    fn classifier_learns_separable_classes() {
        let ds = synthetic_dataset(60, 1);
        let cfg = TrainConfig {
            epochs: 3,
            batch_size: 16,
            learning_rate: 0.03,
        };
        let (model, losses) = train_classifier(&ds, &cfg, 7).unwrap();
        assert_eq!(losses.len(), 3);
        assert!(
            losses.last().unwrap() < losses.first().unwrap(),
            "loss failed to decrease: {losses:?}"
        );
        let preds = predict_labels(&model, ds.images()).unwrap();
        let correct = preds
            .iter()
            .zip(ds.labels())
            .filter(|(p, l)| p == l)
            .count();
        assert!(
            correct as f64 / ds.len() as f64 >= 0.9,
            "train accuracy only {correct}/{}",
            ds.len()
        );
    }

    #[test]
    fn training_is_bitwise_deterministic_in_the_seed() {
        let ds = synthetic_dataset(24, 2);
        let cfg = TrainConfig {
            epochs: 1,
            batch_size: 8,
            learning_rate: 0.05,
        };
        let (a, _) = train_classifier(&ds, &cfg, 42).unwrap();
        let (b, _) = train_classifier(&ds, &cfg, 42).unwrap();
        let (c, _) = train_classifier(&ds, &cfg, 43).unwrap();
        for ((_, ta), (_, tb)) in a.params().iter().zip(b.params()) {
            let bits_a: Vec<u32> = ta.values().iter().map(|v| v.to_bits()).collect();
            let bits_b: Vec<u32> = tb.values().iter().map(|v| v.to_bits()).collect();
            assert_eq!(bits_a, bits_b);
        }
        let differs = a
            .params()
            .iter()
            .zip(c.params())
            .any(|((_, ta), (_, tc))| ta.values() != tc.values());
        assert!(differs, "different seeds produced identical weights");
    }

    #[test]
    fn zero_epochs_returns_untouched_init() {
        let ds = synthetic_dataset(8, 3);
        let cfg = TrainConfig {
            epochs: 0,
            batch_size: 4,
            learning_rate: 0.1,
        };
        let (model, losses) = train_classifier(&ds, &cfg, 11).unwrap();
        assert!(losses.is_empty());
        let fresh = ClassifierModel::new(10, substream_seed(11, "init"));
        for ((_, a), (_, b)) in model.params().iter().zip(fresh.params()) {
            assert_eq!(a.values(), b.values());
        }
    }

    #[test]
    fn empty_dataset_and_zero_batch_are_rejected() {
        let ds = synthetic_dataset(8, 4);
        let empty = ds.subset(&[]).unwrap();
        assert!(matches!(
            train_classifier(&empty, &TrainConfig::default(), 1),
            Err(TrainError::EmptyDataset)
        ));
        let cfg = TrainConfig {
            batch_size: 0,
            ..TrainConfig::default()
        };
        assert!(matches!(
            train_classifier(&ds, &cfg, 1),
            Err(TrainError::ZeroBatch)
        ));
    }

    #[test]
    fn autoencoder_reconstruction_error_decreases() {
        let ds = synthetic_dataset(32, 5);
        let (_, losses) = train_autoencoder(&ds, 16, 3, 8, 1e-3, 9).unwrap();
        assert_eq!(losses.len(), 3);
        assert!(
            losses.last().unwrap() < losses.first().unwrap(),
            "reconstruction error failed to decrease: {losses:?}"
        );
    }
}
