//! The four network roles of the laboratory: a digit classifier whose
//! penultimate dense layer doubles as the frozen feature extractor, a
//! perturbation generator, a realness discriminator, and a convolutional
//! autoencoder used by the reconstruction defense.
//!
//! Each model owns its weight tensors. To run or train one, `bind` it onto
//! a `Tape` — trainably (weights become tracked variables) or frozen
//! (weights become plain inputs, so no gradient ever reaches them) — then
//! call `forward` on the binding. `install_grads` copies the tape's leaf
//! gradients back into the owning model for an optimizer step, pairing ids
//! with parameters in declaration order.

use std::fmt;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::rng::substream;
use crate::tensor::{Tape, Tensor, TensorError, TensorId};

/// Discriminator outputs are squashed into this open sub-interval of (0,1)
/// so that log(D) and log(1-D) stay finite for any input.
const SCORE_MARGIN: f32 = 1e-6;

/// Batch rows per tape during no-gradient inference; keeps activation
/// memory bounded while leaving per-sample values bit-identical.
const INFERENCE_CHUNK: usize = 512;

/// Errors raised by model construction, binding, and weight loading.
#[derive(Debug)]
pub enum ModelError {
    /// An underlying tensor operation failed.
    Tensor(TensorError),
    /// Image-conditioned generation needs a base image, but none was given.
    MissingConditioning,
    /// A base image was supplied to a noise-only generator.
    UnexpectedConditioning,
    /// A checkpoint record is absent for this parameter.
    MissingParam { name: String },
    /// A checkpoint record has the wrong shape for this parameter.
    ParamShape {
        name: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    /// A checkpoint carries a parameter this model does not have.
    UnknownParam { name: String },
}

impl fmt::Display for ModelError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ModelError::Tensor(e) => write!(f, "model tensor error: {e}"),
            ModelError::MissingConditioning => {
                write!(f, "image-conditioned generator called without a base image")
            }
            ModelError::UnexpectedConditioning => {
                write!(f, "noise-only generator called with a base image")
            }
            ModelError::MissingParam { name } => {
                write!(f, "checkpoint is missing parameter {name}")
            }
            ModelError::ParamShape {
                name,
                expected,
                got,
            } => write!(
                f,
                "parameter {name} expects shape {expected:?}, checkpoint has {got:?}"
            ),
            ModelError::UnknownParam { name } => {
                write!(f, "checkpoint parameter {name} does not exist in this model")
            }
        }
    }
}

impl std::error::Error for ModelError {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            ModelError::Tensor(e) => Some(e),
            _ => None,
        }
    }
}

impl From<TensorError> for ModelError {
    fn from(e: TensorError) -> Self {
        ModelError::Tensor(e)
    }
}

/// Anything with an ordered list of named weight tensors.
pub trait Parameterized {
    /// Parameters in a fixed declaration order.
    fn params(&self) -> Vec<(&'static str, &Tensor)>;
    /// The same parameters, mutably, in the same order.
    fn params_mut(&mut self) -> Vec<(&'static str, &mut Tensor)>;

    /// Total scalar parameter count.
    fn param_count(&self) -> usize {
        self.params().iter().map(|(_, t)| t.numel()).sum()
    }

    /// Replace weights from `(name, tensor)` records, e.g. a loaded
    /// checkpoint. Every model parameter must be present with a matching
    /// shape; unknown record names are rejected.
    fn load_records(&mut self, records: &[(String, Tensor)]) -> Result<(), ModelError> {
        let known: Vec<&'static str> = self.params().iter().map(|(n, _)| *n).collect();
        for (name, _) in records {
            if !known.contains(&name.as_str()) {
                return Err(ModelError::UnknownParam { name: name.clone() });
            }
        }
        for (name, param) in self.params_mut() {
            let record = records
                .iter()
                .find(|(n, _)| n == name)
                .ok_or_else(|| ModelError::MissingParam {
                    name: name.to_string(),
                })?;
            if record.1.shape() != param.shape() {
                return Err(ModelError::ParamShape {
                    name: name.to_string(),
                    expected: param.shape().to_vec(),
                    got: record.1.shape().to_vec(),
                });
            }
            *param = record.1.clone().with_grad();
        }
        Ok(())
    }
}

/// Copy the tape's gradients for `ids` into the model's parameters, in
/// declaration order, ready for an optimizer step.
pub fn install_grads<M: Parameterized>(
    model: &mut M,
    tape: &Tape,
    ids: &[TensorId],
) -> Result<(), TensorError> {
    let mut params = model.params_mut();
    debug_assert_eq!(params.len(), ids.len());
    for ((name, param), &id) in params.iter_mut().zip(ids.iter()) {
        let grad = tape.grad(id).ok_or(TensorError::MissingGrad {
            param: name.to_string(),
        })?;
        param.set_grad(grad.to_vec());
    }
    Ok(())
}

/// Architecture descriptions for checkpoint sidecar files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelSpec {
    Classifier {
        num_classes: usize,
        feature_dim: usize,
    },
    Generator {
        noise_dim: usize,
        conditioning: ConditioningMode,
        epsilon: f32,
    },
    Discriminator {},
    Autoencoder {
        bottleneck: usize,
    },
}

// ---- initialization helpers ----

fn glorot(shape: &[usize], fan_in: usize, fan_out: usize, seed: u64, name: &str) -> Tensor {
    let mut rng = substream(seed, name);
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt() as f32;
    let numel: usize = shape.iter().product();
    let values: Vec<f32> = (0..numel).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor::new(shape, values)
        .expect("glorot init values are finite by construction")
        .with_grad()
}

fn dense_init(d_in: usize, d_out: usize, seed: u64, name: &str) -> Tensor {
    glorot(&[d_in, d_out], d_in, d_out, seed, name)
}

fn conv_init(co: usize, ci: usize, k: usize, seed: u64, name: &str) -> Tensor {
    glorot(&[co, ci, k, k], ci * k * k, co * k * k, seed, name)
}

fn deconv_init(ci: usize, co: usize, k: usize, seed: u64, name: &str) -> Tensor {
    glorot(&[ci, co, k, k], ci * k * k, co * k * k, seed, name)
}

fn zeros_param(len: usize) -> Tensor {
    Tensor::zeros(&[len]).with_grad()
}

/// Draw an `[n, dim]` standard-normal noise tensor from the given stream.
pub fn sample_noise<R: Rng>(rng: &mut R, n: usize, dim: usize) -> Tensor {
    let values: Vec<f32> = (0..n * dim).map(|_| rng.sample::<f32, _>(StandardNormal)).collect();
    Tensor::new(&[n, dim], values).expect("normal samples are finite")
}

// ---- classifier ----

/// Digit classifier: conv 6@5×5 (pad 2) → pool 2 → conv 16@5×5 → pool 2 →
/// flatten 400 → dense 120 → dense 84 → dense `num_classes`. The 84-wide
/// penultimate activation is the feature vector other components consume.
#[derive(Debug, Clone)]
pub struct ClassifierModel {
    pub num_classes: usize,
    conv1w: Tensor,
    conv1b: Tensor,
    conv2w: Tensor,
    conv2b: Tensor,
    fc1w: Tensor,
    fc1b: Tensor,
    fc2w: Tensor,
    fc2b: Tensor,
    fc3w: Tensor,
    fc3b: Tensor,
}

/// Width of the classifier's penultimate activation.
pub const FEATURE_DIM: usize = 84;

/// Tape handles for one bound classifier.
pub struct ClassifierBinding {
    ids: Vec<TensorId>,
}

/// Forward products of the classifier: the penultimate feature activation
/// and the class logits.
pub struct ClassifierOutputs {
    pub features: TensorId,
    pub logits: TensorId,
}

impl ClassifierModel {
    pub fn new(num_classes: usize, seed: u64) -> Self {
        ClassifierModel {
            num_classes,
            conv1w: conv_init(6, 1, 5, seed, "classifier.conv1.weight"),
            conv1b: zeros_param(6),
            conv2w: conv_init(16, 6, 5, seed, "classifier.conv2.weight"),
            conv2b: zeros_param(16),
            fc1w: dense_init(400, 120, seed, "classifier.fc1.weight"),
            fc1b: zeros_param(120),
            fc2w: dense_init(120, FEATURE_DIM, seed, "classifier.fc2.weight"),
            fc2b: zeros_param(FEATURE_DIM),
            fc3w: dense_init(FEATURE_DIM, num_classes, seed, "classifier.fc3.weight"),
            fc3b: zeros_param(num_classes),
        }
    }

    pub fn spec(&self) -> ModelSpec {
        ModelSpec::Classifier {
            num_classes: self.num_classes,
            feature_dim: FEATURE_DIM,
        }
    }

    /// Put the weights on a tape; `trainable` decides whether gradients
    /// will be tracked for them.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> ClassifierBinding {
        let ids = self
            .params()
            .into_iter()
            .map(|(_, t)| {
                if trainable {
                    tape.variable(t)
                } else {
                    tape.input(t)
                }
            })
            .collect();
        ClassifierBinding { ids }
    }
}

impl Parameterized for ClassifierModel {
    fn params(&self) -> Vec<(&'static str, &Tensor)> {
        vec![
            ("classifier.conv1.weight", &self.conv1w),
            ("classifier.conv1.bias", &self.conv1b),
            ("classifier.conv2.weight", &self.conv2w),
            ("classifier.conv2.bias", &self.conv2b),
            ("classifier.fc1.weight", &self.fc1w),
            ("classifier.fc1.bias", &self.fc1b),
            ("classifier.fc2.weight", &self.fc2w),
            ("classifier.fc2.bias", &self.fc2b),
            ("classifier.fc3.weight", &self.fc3w),
            ("classifier.fc3.bias", &self.fc3b),
        ]
    }

    fn params_mut(&mut self) -> Vec<(&'static str, &mut Tensor)> {
        vec![
            ("classifier.conv1.weight", &mut self.conv1w),
            ("classifier.conv1.bias", &mut self.conv1b),
            ("classifier.conv2.weight", &mut self.conv2w),
            ("classifier.conv2.bias", &mut self.conv2b),
            ("classifier.fc1.weight", &mut self.fc1w),
            ("classifier.fc1.bias", &mut self.fc1b),
            ("classifier.fc2.weight", &mut self.fc2w),
            ("classifier.fc2.bias", &mut self.fc2b),
            ("classifier.fc3.weight", &mut self.fc3w),
            ("classifier.fc3.bias", &mut self.fc3b),
        ]
    }
}

impl ClassifierBinding {
    pub fn param_ids(&self) -> &[TensorId] {
        &self.ids
    }

    /// Full forward pass on `x` of shape `[n, 1, 28, 28]`.
    pub fn forward(&self, t: &mut Tape, x: TensorId) -> Result<ClassifierOutputs, TensorError> {
        let [c1w, c1b, c2w, c2b, f1w, f1b, f2w, f2b, f3w, f3b] = self.ids[..] else {
            unreachable!("classifier binding always holds 10 ids");
        };
        let h = t.conv2d(x, c1w, c1b, 1, 2)?;
        let h = t.relu(h)?;
        let h = t.maxpool2d(h, 2)?;
        let h = t.conv2d(h, c2w, c2b, 1, 0)?;
        let h = t.relu(h)?;
        let h = t.maxpool2d(h, 2)?;
        let h = t.flatten(h)?;
        let h = t.linear(h, f1w, f1b)?;
        let h = t.relu(h)?;
        let h = t.linear(h, f2w, f2b)?;
        let features = t.relu(h)?;
        let logits = t.linear(features, f3w, f3b)?;
        Ok(ClassifierOutputs { features, logits })
    }
}

/// Class logits for a whole image tensor, without gradients, chunked to
/// bound memory. Chunking never changes per-sample values.
pub fn classifier_logits(model: &ClassifierModel, images: &Tensor) -> Result<Tensor, ModelError> {
    run_chunked(images, model.num_classes, |tape, x| {
        let binding = model.bind(tape, false);
        Ok(binding.forward(tape, x)?.logits)
    })
}

/// Penultimate-layer activations for a whole image tensor, frozen weights.
pub fn extract_features(model: &ClassifierModel, images: &Tensor) -> Result<Tensor, ModelError> {
    run_chunked(images, FEATURE_DIM, |tape, x| {
        let binding = model.bind(tape, false);
        Ok(binding.forward(tape, x)?.features)
    })
}

/// Predicted labels (argmax of logits, first maximum on ties).
pub fn predict_labels(model: &ClassifierModel, images: &Tensor) -> Result<Vec<usize>, ModelError> {
    let logits = classifier_logits(model, images)?;
    Ok(argmax_rows(&logits))
}

/// Row-wise argmax with the first maximum winning ties.
pub fn argmax_rows(matrix: &Tensor) -> Vec<usize> {
    let cols = matrix.shape()[1];
    matrix
        .values()
        .chunks(cols)
        .map(|row| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// Numerically stable row-wise softmax with f64 accumulation.
pub fn softmax_rows(logits: &Tensor) -> Tensor {
    let cols = logits.shape()[1];
    let mut out = Vec::with_capacity(logits.numel());
    for row in logits.values().chunks(cols) {
        let max = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max) as f64;
        let exps: Vec<f64> = row.iter().map(|&v| ((v as f64) - max).exp()).collect();
        let sum: f64 = exps.iter().sum();
        out.extend(exps.iter().map(|&e| (e / sum) as f32));
    }
    Tensor::new(logits.shape(), out).expect("softmax outputs are finite")
}

/// Run a forward pass over `images` in fixed-size chunks, collecting rows
/// of width `out_cols` into one output tensor.
fn run_chunked<F>(images: &Tensor, out_cols: usize, mut forward: F) -> Result<Tensor, ModelError>
where
    F: FnMut(&mut Tape, TensorId) -> Result<TensorId, ModelError>,
{
    let n = images.shape()[0];
    let per = images.numel() / n.max(1);
    let mut out = Vec::with_capacity(n * out_cols);
    let mut start = 0;
    while start < n {
        let end = (start + INFERENCE_CHUNK).min(n);
        let mut shape = images.shape().to_vec();
        shape[0] = end - start;
        let chunk = Tensor::new(&shape, images.values()[start * per..end * per].to_vec())
            .map_err(ModelError::Tensor)?;
        let mut tape = Tape::new();
        let x = tape.input(&chunk);
        let y = forward(&mut tape, x)?;
        out.extend_from_slice(tape.value(y));
        start = end;
    }
    Tensor::new(&[n, out_cols], out).map_err(ModelError::Tensor)
}

// ---- generator ----

/// Whether the generator sees the base image it is perturbing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConditioningMode {
    /// Perturbation depends on the noise vector alone.
    NoiseOnly,
    /// The base image joins as an extra channel before the output head
    /// (default), so the perturbation can adapt to the image it rides on.
    ImageConditioned,
}

/// Perturbation generator: dense(noise → 32@7×7) → two stride-2
/// deconvolutions up to 8@28×28 → optional base-image channel → 3×3 conv
/// head → ε·tanh. Output is a perturbation δ with |δ| ≤ ε elementwise.
#[derive(Debug, Clone)]
pub struct GeneratorModel {
    pub noise_dim: usize,
    pub conditioning: ConditioningMode,
    pub epsilon: f32,
    fcw: Tensor,
    fcb: Tensor,
    up1w: Tensor,
    up1b: Tensor,
    up2w: Tensor,
    up2b: Tensor,
    headw: Tensor,
    headb: Tensor,
}

pub struct GeneratorBinding {
    ids: Vec<TensorId>,
    conditioning: ConditioningMode,
    epsilon: f32,
}

impl GeneratorModel {
    pub fn new(noise_dim: usize, conditioning: ConditioningMode, epsilon: f32, seed: u64) -> Self {
        let head_in = match conditioning {
            ConditioningMode::NoiseOnly => 8,
            ConditioningMode::ImageConditioned => 9,
        };
        GeneratorModel {
            noise_dim,
            conditioning,
            epsilon,
            fcw: dense_init(noise_dim, 32 * 7 * 7, seed, "generator.fc.weight"),
            fcb: zeros_param(32 * 7 * 7),
            up1w: deconv_init(32, 16, 4, seed, "generator.up1.weight"),
            up1b: zeros_param(16),
            up2w: deconv_init(16, 8, 4, seed, "generator.up2.weight"),
            up2b: zeros_param(8),
            headw: glorot(
                &[1, head_in, 3, 3],
                head_in * 9,
                9,
                seed,
                "generator.head.weight",
            ),
            headb: zeros_param(1),
        }
    }

    pub fn spec(&self) -> ModelSpec {
        ModelSpec::Generator {
            noise_dim: self.noise_dim,
            conditioning: self.conditioning,
            epsilon: self.epsilon,
        }
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> GeneratorBinding {
        let ids = self
            .params()
            .into_iter()
            .map(|(_, t)| {
                if trainable {
                    tape.variable(t)
                } else {
                    tape.input(t)
                }
            })
            .collect();
        GeneratorBinding {
            ids,
            conditioning: self.conditioning,
            epsilon: self.epsilon,
        }
    }
}

impl Parameterized for GeneratorModel {
    fn params(&self) -> Vec<(&'static str, &Tensor)> {
        vec![
            ("generator.fc.weight", &self.fcw),
            ("generator.fc.bias", &self.fcb),
            ("generator.up1.weight", &self.up1w),
            ("generator.up1.bias", &self.up1b),
            ("generator.up2.weight", &self.up2w),
            ("generator.up2.bias", &self.up2b),
            ("generator.head.weight", &self.headw),
            ("generator.head.bias", &self.headb),
        ]
    }

    fn params_mut(&mut self) -> Vec<(&'static str, &mut Tensor)> {
        vec![
            ("generator.fc.weight", &mut self.fcw),
            ("generator.fc.bias", &mut self.fcb),
            ("generator.up1.weight", &mut self.up1w),
            ("generator.up1.bias", &mut self.up1b),
            ("generator.up2.weight", &mut self.up2w),
            ("generator.up2.bias", &mut self.up2b),
            ("generator.head.weight", &mut self.headw),
            ("generator.head.bias", &mut self.headb),
        ]
    }
}

impl GeneratorBinding {
    pub fn param_ids(&self) -> &[TensorId] {
        &self.ids
    }

    /// Produce a perturbation for noise `z` of shape `[n, noise_dim]`.
    /// `base` (shape `[n, 1, 28, 28]`) is required exactly when the model
    /// is image-conditioned.
    pub fn forward(
        &self,
        t: &mut Tape,
        z: TensorId,
        base: Option<TensorId>,
    ) -> Result<TensorId, ModelError> {
        let [fcw, fcb, up1w, up1b, up2w, up2b, headw, headb] = self.ids[..] else {
            unreachable!("generator binding always holds 8 ids");
        };
        let h = t.linear(z, fcw, fcb)?;
        let h = t.relu(h)?;
        let n = t.shape(h)[0];
        let h = t.reshape(h, &[n, 32, 7, 7])?;
        let h = t.conv_transpose2d(h, up1w, up1b, 2, 1)?;
        let h = t.relu(h)?;
        let h = t.conv_transpose2d(h, up2w, up2b, 2, 1)?;
        let h = t.relu(h)?;
        let h = match (self.conditioning, base) {
            (ConditioningMode::ImageConditioned, Some(b)) => t.concat_channels(h, b)?,
            (ConditioningMode::ImageConditioned, None) => {
                return Err(ModelError::MissingConditioning)
            }
            (ConditioningMode::NoiseOnly, None) => h,
            (ConditioningMode::NoiseOnly, Some(_)) => {
                return Err(ModelError::UnexpectedConditioning)
            }
        };
        let h = t.conv2d(h, headw, headb, 1, 1)?;
        let h = t.tanh(h)?;
        Ok(t.scale(h, self.epsilon)?)
    }
}

// ---- discriminator ----

/// Realness scorer: two stride-2 convolutions (8 then 16 channels) and a
/// dense sigmoid head. Scores are squashed away from exact 0 and 1 so the
/// adversarial log terms stay finite.
#[derive(Debug, Clone)]
pub struct DiscriminatorModel {
    conv1w: Tensor,
    conv1b: Tensor,
    conv2w: Tensor,
    conv2b: Tensor,
    fcw: Tensor,
    fcb: Tensor,
}

pub struct DiscriminatorBinding {
    ids: Vec<TensorId>,
}

impl DiscriminatorModel {
    pub fn new(seed: u64) -> Self {
        DiscriminatorModel {
            conv1w: conv_init(8, 1, 4, seed, "discriminator.conv1.weight"),
            conv1b: zeros_param(8),
            conv2w: conv_init(16, 8, 4, seed, "discriminator.conv2.weight"),
            conv2b: zeros_param(16),
            fcw: dense_init(16 * 7 * 7, 1, seed, "discriminator.fc.weight"),
            fcb: zeros_param(1),
        }
    }

    pub fn spec(&self) -> ModelSpec {
        ModelSpec::Discriminator {}
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> DiscriminatorBinding {
        let ids = self
            .params()
            .into_iter()
            .map(|(_, t)| {
                if trainable {
                    tape.variable(t)
                } else {
                    tape.input(t)
                }
            })
            .collect();
        DiscriminatorBinding { ids }
    }
}

impl Parameterized for DiscriminatorModel {
    fn params(&self) -> Vec<(&'static str, &Tensor)> {
        vec![
            ("discriminator.conv1.weight", &self.conv1w),
            ("discriminator.conv1.bias", &self.conv1b),
            ("discriminator.conv2.weight", &self.conv2w),
            ("discriminator.conv2.bias", &self.conv2b),
            ("discriminator.fc.weight", &self.fcw),
            ("discriminator.fc.bias", &self.fcb),
        ]
    }

    fn params_mut(&mut self) -> Vec<(&'static str, &mut Tensor)> {
        vec![
            ("discriminator.conv1.weight", &mut self.conv1w),
            ("discriminator.conv1.bias", &mut self.conv1b),
            ("discriminator.conv2.weight", &mut self.conv2w),
            ("discriminator.conv2.bias", &mut self.conv2b),
            ("discriminator.fc.weight", &mut self.fcw),
            ("discriminator.fc.bias", &mut self.fcb),
        ]
    }
}

impl DiscriminatorBinding {
    pub fn param_ids(&self) -> &[TensorId] {
        &self.ids
    }

    /// Realness scores in the open interval (0,1), one per image row.
    pub fn forward(&self, t: &mut Tape, x: TensorId) -> Result<TensorId, TensorError> {
        let [c1w, c1b, c2w, c2b, fcw, fcb] = self.ids[..] else {
            unreachable!("discriminator binding always holds 6 ids");
        };
        let h = t.conv2d(x, c1w, c1b, 2, 1)?;
        let h = t.relu(h)?;
        let h = t.conv2d(h, c2w, c2b, 2, 1)?;
        let h = t.relu(h)?;
        let h = t.flatten(h)?;
        let h = t.linear(h, fcw, fcb)?;
        let h = t.sigmoid(h)?;
        t.affine(h, 1.0 - 2.0 * SCORE_MARGIN, SCORE_MARGIN)
    }
}

/// Discriminator scores for a whole image tensor, without gradients.
pub fn discriminator_scores(
    model: &DiscriminatorModel,
    images: &Tensor,
) -> Result<Tensor, ModelError> {
    run_chunked(images, 1, |tape, x| {
        let binding = model.bind(tape, false);
        Ok(binding.forward(tape, x)?)
    })
}

// ---- autoencoder ----

/// Convolutional autoencoder: two stride-2 convolutions down to a dense
/// bottleneck, then a mirrored deconvolution stack back to a sigmoid
/// image. Scores anomalies by reconstruction error.
#[derive(Debug, Clone)]
pub struct AutoencoderModel {
    pub bottleneck: usize,
    enc1w: Tensor,
    enc1b: Tensor,
    enc2w: Tensor,
    enc2b: Tensor,
    fc_encw: Tensor,
    fc_encb: Tensor,
    fc_decw: Tensor,
    fc_decb: Tensor,
    dec1w: Tensor,
    dec1b: Tensor,
    dec2w: Tensor,
    dec2b: Tensor,
}

pub struct AutoencoderBinding {
    ids: Vec<TensorId>,
}

impl AutoencoderModel {
    pub fn new(bottleneck: usize, seed: u64) -> Self {
        AutoencoderModel {
            bottleneck,
            enc1w: conv_init(8, 1, 3, seed, "autoencoder.enc1.weight"),
            enc1b: zeros_param(8),
            enc2w: conv_init(16, 8, 3, seed, "autoencoder.enc2.weight"),
            enc2b: zeros_param(16),
            fc_encw: dense_init(16 * 7 * 7, bottleneck, seed, "autoencoder.fc_enc.weight"),
            fc_encb: zeros_param(bottleneck),
            fc_decw: dense_init(bottleneck, 16 * 7 * 7, seed, "autoencoder.fc_dec.weight"),
            fc_decb: zeros_param(16 * 7 * 7),
            dec1w: deconv_init(16, 8, 4, seed, "autoencoder.dec1.weight"),
            dec1b: zeros_param(8),
            dec2w: deconv_init(8, 1, 4, seed, "autoencoder.dec2.weight"),
            dec2b: zeros_param(1),
        }
    }

    pub fn spec(&self) -> ModelSpec {
        ModelSpec::Autoencoder {
            bottleneck: self.bottleneck,
        }
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> AutoencoderBinding {
        let ids = self
            .params()
            .into_iter()
            .map(|(_, t)| {
                if trainable {
                    tape.variable(t)
                } else {
                    tape.input(t)
                }
            })
            .collect();
        AutoencoderBinding { ids }
    }
}

impl Parameterized for AutoencoderModel {
    fn params(&self) -> Vec<(&'static str, &Tensor)> {
        vec![
            ("autoencoder.enc1.weight", &self.enc1w),
            ("autoencoder.enc1.bias", &self.enc1b),
            ("autoencoder.enc2.weight", &self.enc2w),
            ("autoencoder.enc2.bias", &self.enc2b),
            ("autoencoder.fc_enc.weight", &self.fc_encw),
            ("autoencoder.fc_enc.bias", &self.fc_encb),
            ("autoencoder.fc_dec.weight", &self.fc_decw),
            ("autoencoder.fc_dec.bias", &self.fc_decb),
            ("autoencoder.dec1.weight", &self.dec1w),
            ("autoencoder.dec1.bias", &self.dec1b),
            ("autoencoder.dec2.weight", &self.dec2w),
            ("autoencoder.dec2.bias", &self.dec2b),
        ]
    }

    fn params_mut(&mut self) -> Vec<(&'static str, &mut Tensor)> {
        vec![
            ("autoencoder.enc1.weight", &mut self.enc1w),
            ("autoencoder.enc1.bias", &mut self.enc1b),
            ("autoencoder.enc2.weight", &mut self.enc2w),
            ("autoencoder.enc2.bias", &mut self.enc2b),
            ("autoencoder.fc_enc.weight", &mut self.fc_encw),
            ("autoencoder.fc_enc.bias", &mut self.fc_encb),
            ("autoencoder.fc_dec.weight", &mut self.fc_decw),
            ("autoencoder.fc_dec.bias", &mut self.fc_decb),
            ("autoencoder.dec1.weight", &mut self.dec1w),
            ("autoencoder.dec1.bias", &mut self.dec1b),
            ("autoencoder.dec2.weight", &mut self.dec2w),
            ("autoencoder.dec2.bias", &mut self.dec2b),
        ]
    }
}

impl AutoencoderBinding {
    pub fn param_ids(&self) -> &[TensorId] {
        &self.ids
    }

    /// Reconstruct `x` of shape `[n, 1, 28, 28]`; outputs are in [0,1].
    pub fn forward(&self, t: &mut Tape, x: TensorId) -> Result<TensorId, TensorError> {
        let [e1w, e1b, e2w, e2b, few, feb, fdw, fdb, d1w, d1b, d2w, d2b] = self.ids[..] else {
            unreachable!("autoencoder binding always holds 12 ids");
        };
        let h = t.conv2d(x, e1w, e1b, 2, 1)?;
        let h = t.relu(h)?;
        let h = t.conv2d(h, e2w, e2b, 2, 1)?;
        let h = t.relu(h)?;
        let h = t.flatten(h)?;
        let h = t.linear(h, few, feb)?;
        let h = t.relu(h)?;
        let h = t.linear(h, fdw, fdb)?;
        let h = t.relu(h)?;
        let n = t.shape(h)[0];
        let h = t.reshape(h, &[n, 16, 7, 7])?;
        let h = t.conv_transpose2d(h, d1w, d1b, 2, 1)?;
        let h = t.relu(h)?;
        let h = t.conv_transpose2d(h, d2w, d2b, 2, 1)?;
        t.sigmoid(h)
    }
}

/// Reconstructions for a whole image tensor, without gradients. Returns a
/// tensor shaped like `images`.
pub fn reconstruct(model: &AutoencoderModel, images: &Tensor) -> Result<Tensor, ModelError> {
    let per = images.numel() / images.shape()[0].max(1);
    let flat = run_chunked(images, per, |tape, x| {
        let binding = model.bind(tape, false);
        Ok(binding.forward(tape, x)?)
    })?;
    Ok(flat
        .reshaped(images.shape())
        .expect("reconstruction numel matches input"))
}
