//! Poison-crafting attacks.
//!
//! Every attack here is clean-label: it perturbs images drawn from the
//! class being poisoned and leaves their labels untouched.  Two fixed
//!-trigger baselines stamp a patch or blend a watermark into the image;
//! feature collision runs gradient descent directly on the pixels; and
//! the headline attack trains a perturbation generator against a
//! discriminator and a frozen feature extractor so the crafted images
//! look benign while their hidden features drift toward a donor class.

use crate::models::{
    extract_features, install_grads, sample_noise, ClassifierModel, ConditioningMode,
    DiscriminatorModel, GeneratorModel, ModelError, Parameterized,
};
use crate::rng::{substream, substream_seed};
use crate::tensor::{Adam, Tape, Tensor, TensorError};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::fmt;

/// Absolute slack allowed on the perturbation budget when validating
/// crafted images (covers f32 rounding in `clamp(base ± ε)`).
pub const BUDGET_SLACK: f32 = 1e-6;

// ---- errors ----

#[derive(Debug)]
pub enum AttackError {
    Tensor(TensorError),
    Model(ModelError),
    /// A hyperparameter failed validation.
    Config { detail: String },
    /// The patch footprint does not fit inside the image.
    PatchOutOfBounds {
        top: usize,
        left: usize,
        height: usize,
        width: usize,
        image_height: usize,
        image_width: usize,
    },
    /// Images must arrive as `[n, 1, h, w]`.
    BadImageShape { detail: String },
    /// A base or donor pool arrived empty.
    EmptyPool { which: &'static str },
    /// A requested row is outside the pool.
    RowOutOfRange { row: usize, len: usize },
    /// Pixel-space optimization produced a non-finite image.
    NonFiniteImage { step: usize },
    /// Generator training failed; the run so far is preserved for
    /// inspection.
    Diverged(Box<DivergedRun>),
}

/// Everything salvaged from an aborted generator training run.
#[derive(Debug)]
pub struct DivergedRun {
    pub reason: String,
    pub generator: GeneratorModel,
    pub discriminator: DiscriminatorModel,
    pub loss_history: Vec<LossBreakdown>,
}

impl fmt::Display for AttackError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AttackError::Tensor(e) => write!(f, "tensor error: {e}"),
            AttackError::Model(e) => write!(f, "model error: {e}"),
            AttackError::Config { detail } => write!(f, "invalid attack config: {detail}"),
            AttackError::PatchOutOfBounds { top, left, height, width, image_height, image_width } => {
                write!(
                    f,
                    "{height}x{width} patch at ({top}, {left}) does not fit a \
                     {image_height}x{image_width} image"
                )
            }
            AttackError::BadImageShape { detail } => {
                write!(f, "expected images shaped [n, 1, h, w]: {detail}")
            }
            AttackError::EmptyPool { which } => write!(f, "{which} pool is empty"),
            AttackError::RowOutOfRange { row, len } => {
                write!(f, "row {row} out of range for pool of {len}")
            }
            AttackError::NonFiniteImage { step } => {
                write!(f, "pixel optimization produced a non-finite image at step {step}")
            }
            AttackError::Diverged(run) => write!(
                f,
                "generator training diverged after {} steps: {}",
                run.loss_history.len(),
                run.reason
            ),
        }
    }
}

impl std::error::Error for AttackError {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            AttackError::Tensor(e) => Some(e),
            AttackError::Model(e) => Some(e),
            _ => None,
        }
    }
}

impl From<TensorError> for AttackError {
    fn from(e: TensorError) -> Self {
        AttackError::Tensor(e)
    }
}

impl From<ModelError> for AttackError {
    fn from(e: ModelError) -> Self {
        AttackError::Model(e)
    }
}

// ---- attack kinds and trigger specs ----

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackKind {
    DeepPoison,
    Patch,
    Blend,
    FeatureCollision,
}

impl fmt::Display for AttackKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            AttackKind::DeepPoison => "deep_poison",
            AttackKind::Patch => "patch",
            AttackKind::Blend => "blend",
            AttackKind::FeatureCollision => "feature_collision",
        };
        f.write_str(s)
    }
}

/// How crafted images are matched with donor-class images whose features
/// they should imitate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pairing {
    /// Fresh uniform draw from the donor pool for every base, each epoch.
    Random,
    /// Fixed assignment to the donor whose features are closest.
    NearestFeature,
}

/// Which adversarial term the generator minimizes.  Both use the same
/// discriminator; they differ only in gradient strength early in
/// training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GeneratorObjective {
    /// Minimize −log D(x_p): strong gradients while D wins (default).
    NonSaturating,
    /// Minimize log(1 − D(x_p)) exactly as logged.
    LiteralLogOneMinus,
}

/// A fixed pixel stamp replacing part of the image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchSpec {
    pixels: Vec<f32>,
    height: usize,
    width: usize,
    /// Row of the top-left corner of the footprint.
    pub top: usize,
    /// Column of the top-left corner of the footprint.
    pub left: usize,
}

impl PatchSpec {
    /// `pixels` is `height × width`, row-major, values in `[0, 1]`.
    pub fn new(
        pixels: Vec<f32>,
        height: usize,
        width: usize,
        top: usize,
        left: usize,
    ) -> Result<Self, AttackError> {
        if pixels.len() != height * width {
            return Err(AttackError::Config {
                detail: format!(
                    "patch bitmap has {} values for a {height}x{width} footprint",
                    pixels.len()
                ),
            });
        }
        if let Some(&bad) = pixels.iter().find(|v| !v.is_finite() || **v < 0.0 || **v > 1.0) {
            return Err(AttackError::Config {
                detail: format!("patch pixel {bad} outside [0, 1]"),
            });
        }
        Ok(PatchSpec { pixels, height, width, top, left })
    }

    /// Solid white 2×4 stamp one pixel in from the bottom-right corner of
    /// a 28×28 image — eight pixels, about 1% of the area.
    pub fn white_corner() -> Self {
        PatchSpec::new(vec![1.0; 8], 2, 4, 25, 23).expect("constant bitmap is valid")
    }

    /// Solid white 7×3 bar over the upper-middle region, a larger and
    /// more central stamp than [`PatchSpec::white_corner`].
    pub fn center_bar() -> Self {
        PatchSpec::new(vec![1.0; 21], 7, 3, 8, 10).expect("constant bitmap is valid")
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }
}

/// A translucent image mixed into the center of each base image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WatermarkSpec {
    pixels: Vec<f32>,
    height: usize,
    width: usize,
    /// Mixing weight of the watermark, in `[0, 1]`.
    pub opacity: f32,
}

impl WatermarkSpec {
    /// `pixels` is `height × width`, row-major, values in `[0, 1]`.
    pub fn new(
        pixels: Vec<f32>,
        height: usize,
        width: usize,
        opacity: f32,
    ) -> Result<Self, AttackError> {
        if pixels.len() != height * width {
            return Err(AttackError::Config {
                detail: format!(
                    "watermark has {} values for a {height}x{width} footprint",
                    pixels.len()
                ),
            });
        }
        if let Some(&bad) = pixels.iter().find(|v| !v.is_finite() || **v < 0.0 || **v > 1.0) {
            return Err(AttackError::Config {
                detail: format!("watermark pixel {bad} outside [0, 1]"),
            });
        }
        if !opacity.is_finite() || !(0.0..=1.0).contains(&opacity) {
            return Err(AttackError::Config {
                detail: format!("opacity {opacity} outside [0, 1]"),
            });
        }
        Ok(WatermarkSpec { pixels, height, width, opacity })
    }

    /// Diagonal stripe pattern, 11×16, blended at 30% opacity.
    pub fn stripes() -> Self {
        let (h, w) = (11, 16);
        let pixels = (0..h * w)
            .map(|i| if (i / w + i % w) % 4 < 2 { 1.0 } else { 0.0 })
            .collect();
        WatermarkSpec::new(pixels, h, w, 0.3).expect("constant pattern is valid")
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }
}

// ---- configuration ----

/// Hyperparameters for every attack family.  Fixed-trigger attacks read
/// only their trigger spec; pixel-space collision reads the
/// `collision_*` knobs; generator training reads the rest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AttackConfig {
    pub kind: AttackKind,
    /// Weight of the feature-imitation term in the generator objective.
    pub alpha: f32,
    /// Weight of the perturbation-size term in the generator objective.
    pub beta: f32,
    /// Elementwise perturbation budget; crafted pixels stay within
    /// `base ± epsilon` (and `[0, 1]`).
    pub epsilon: f32,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_generator: f32,
    pub lr_discriminator: f32,
    pub pairing: Pairing,
    pub objective: GeneratorObjective,
    pub noise_dim: usize,
    pub conditioning: ConditioningMode,
    /// Abort generator training after this many consecutive epochs with
    /// the epoch-mean feature loss stuck well above its best value.
    pub patience: usize,
    pub patch: Option<PatchSpec>,
    pub watermark: Option<WatermarkSpec>,
    pub collision_steps: usize,
    pub collision_step_size: f32,
    pub collision_lambda: f32,
    pub seed: u64,
}

impl Default for AttackConfig {
    fn default() -> Self {
        AttackConfig {
            kind: AttackKind::DeepPoison,
            alpha: 5.0,
            beta: 1.0,
            epsilon: 0.25,
            epochs: 30,
            batch_size: 64,
            lr_generator: 2e-4,
            lr_discriminator: 2e-4,
            pairing: Pairing::Random,
            objective: GeneratorObjective::NonSaturating,
            noise_dim: 100,
            conditioning: ConditioningMode::ImageConditioned,
            patience: 10,
            patch: None,
            watermark: None,
            collision_steps: 200,
            collision_step_size: 0.02,
            collision_lambda: 0.01,
            seed: 0,
        }
    }
}

impl AttackConfig {
    pub fn deep_poison(seed: u64) -> Self {
        AttackConfig { seed, ..AttackConfig::default() }
    }

    /// Fixed white stamp near the bottom-right corner.
    pub fn patch_corner(seed: u64) -> Self {
        AttackConfig {
            kind: AttackKind::Patch,
            patch: Some(PatchSpec::white_corner()),
            seed,
            ..AttackConfig::default()
        }
    }

    /// Larger white bar over the upper-middle region.
    pub fn patch_bar(seed: u64) -> Self {
        AttackConfig {
            kind: AttackKind::Patch,
            patch: Some(PatchSpec::center_bar()),
            seed,
            ..AttackConfig::default()
        }
    }

    /// Centered stripe watermark at 30% opacity.
    pub fn blend_stripes(seed: u64) -> Self {
        AttackConfig {
            kind: AttackKind::Blend,
            watermark: Some(WatermarkSpec::stripes()),
            seed,
            ..AttackConfig::default()
        }
    }

    pub fn feature_collision(seed: u64) -> Self {
        AttackConfig { kind: AttackKind::FeatureCollision, seed, ..AttackConfig::default() }
    }

    pub fn validate(&self) -> Result<(), AttackError> {
        fn check(ok: bool, detail: String) -> Result<(), AttackError> {
            if ok {
                Ok(())
            } else {
                Err(AttackError::Config { detail })
            }
        }
        check(
            self.alpha.is_finite() && self.alpha >= 0.0,
            format!("alpha {} must be finite and >= 0", self.alpha),
        )?;
        check(
            self.beta.is_finite() && self.beta >= 0.0,
            format!("beta {} must be finite and >= 0", self.beta),
        )?;
        check(
            self.epsilon.is_finite() && self.epsilon > 0.0,
            format!("epsilon {} must be finite and > 0", self.epsilon),
        )?;
        check(self.batch_size >= 1, "batch_size must be at least 1".to_string())?;
        check(
            self.lr_generator.is_finite() && self.lr_generator > 0.0,
            format!("lr_generator {} must be finite and > 0", self.lr_generator),
        )?;
        check(
            self.lr_discriminator.is_finite() && self.lr_discriminator > 0.0,
            format!("lr_discriminator {} must be finite and > 0", self.lr_discriminator),
        )?;
        check(self.noise_dim >= 1, "noise_dim must be at least 1".to_string())?;
        check(self.patience >= 1, "patience must be at least 1".to_string())?;
        check(
            self.collision_step_size.is_finite() && self.collision_step_size > 0.0,
            format!("collision_step_size {} must be finite and > 0", self.collision_step_size),
        )?;
        check(
            self.collision_lambda.is_finite() && self.collision_lambda >= 0.0,
            format!("collision_lambda {} must be finite and >= 0", self.collision_lambda),
        )?;
        match self.kind {
            AttackKind::Patch => {
                check(self.patch.is_some(), "patch attack needs a patch spec".to_string())
            }
            AttackKind::Blend => {
                check(self.watermark.is_some(), "blend attack needs a watermark".to_string())
            }
            AttackKind::DeepPoison | AttackKind::FeatureCollision => Ok(()),
        }
    }
}

// ---- crafting results ----

/// Per-step generator loss terms.  `total` is always
/// `l_gan + alpha·l_fe + beta·l_pert` with the logged `l_gan`, whatever
/// adversarial form the optimizer used.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub step: usize,
    /// Mean `ln(1 − D(x_p))` over the batch.
    pub l_gan: f64,
    /// Mean squared feature difference to the paired donors, per
    /// feature element.
    pub l_fe: f64,
    /// Mean absolute pixel perturbation.
    pub l_pert: f64,
    pub total: f64,
}

/// Crafted poison images together with where they came from.  Row `i` of
/// `crafted_images` perturbs row `source_indices[i]` of the base pool;
/// `donor_indices[i]` (when present) is the donor-pool row whose
/// features it imitates.
#[derive(Debug, Clone)]
pub struct CraftResult {
    pub crafted_images: Tensor,
    pub source_indices: Vec<usize>,
    pub donor_indices: Vec<usize>,
    pub loss_history: Vec<LossBreakdown>,
}

/// The two trained adversarial models.
#[derive(Debug, Clone)]
pub struct DeepPoisonModels {
    pub generator: GeneratorModel,
    pub discriminator: DiscriminatorModel,
}

// ---- shared helpers ----

fn image_dims(images: &Tensor) -> Result<(usize, usize, usize), AttackError> {
    match images.shape() {
        &[n, 1, h, w] => Ok((n, h, w)),
        other => Err(AttackError::BadImageShape { detail: format!("got {other:?}") }),
    }
}

fn gather_rows(images: &Tensor, rows: &[usize]) -> Result<Tensor, AttackError> {
    let n = images.shape()[0];
    let stride: usize = images.shape()[1..].iter().product();
    let mut values = Vec::with_capacity(rows.len() * stride);
    for &row in rows {
        if row >= n {
            return Err(AttackError::RowOutOfRange { row, len: n });
        }
        values.extend_from_slice(&images.values()[row * stride..(row + 1) * stride]);
    }
    let mut shape = images.shape().to_vec();
    shape[0] = rows.len();
    Ok(Tensor::new(&shape, values)?)
}

/// For each row of `from`, the row of `to` with the smallest Euclidean
/// feature distance (first match on ties).
fn nearest_rows(from: &Tensor, to: &Tensor) -> Vec<usize> {
    let dim = from.shape()[1];
    debug_assert_eq!(dim, to.shape()[1]);
    from.values()
        .chunks(dim)
        .map(|f| {
            let mut best = (0usize, f64::INFINITY);
            for (j, t) in to.values().chunks(dim).enumerate() {
                let d: f64 = f
                    .iter()
                    .zip(t.iter())
                    .map(|(&a, &b)| {
                        let d = a as f64 - b as f64;
                        d * d
                    })
                    .sum();
                if d < best.1 {
                    best = (j, d);
                }
            }
            best.0
        })
        .collect()
}

/// Relative margin above the best value that counts as regression
/// rather than plateau noise.
const REGRESSION_TOL: f64 = 0.05;

/// Flags a run whose tracked value has been regressing — sitting more
/// than [`REGRESSION_TOL`] above its best — for `patience` consecutive
/// observations.  A converged run that merely plateaus near its best
/// never fires; only sustained deterioration does.
struct DivergenceMonitor {
    patience: usize,
    best: f64,
    regressing: usize,
}

impl DivergenceMonitor {
    fn new(patience: usize) -> Self {
        DivergenceMonitor { patience, best: f64::INFINITY, regressing: 0 }
    }

    /// Feed one epoch-mean value; returns true when the run should stop.
    fn observe(&mut self, value: f64) -> bool {
        if value < self.best {
            self.best = value;
        }
        if value > self.best * (1.0 + REGRESSION_TOL) + 1e-9 {
            self.regressing += 1;
        } else {
            self.regressing = 0;
        }
        self.regressing >= self.patience
    }
}

// ---- fixed-trigger attacks ----

/// Stamp the patch into every image, replacing the pixels under its
/// footprint.  A zero-area patch returns the images unchanged.
pub fn craft_patch(images: &Tensor, patch: &PatchSpec) -> Result<Tensor, AttackError> {
    let (n, h, w) = image_dims(images)?;
    if patch.height == 0 || patch.width == 0 {
        return Ok(images.clone());
    }
    if patch.top + patch.height > h || patch.left + patch.width > w {
        return Err(AttackError::PatchOutOfBounds {
            top: patch.top,
            left: patch.left,
            height: patch.height,
            width: patch.width,
            image_height: h,
            image_width: w,
        });
    }
    let mut values = images.values().to_vec();
    for i in 0..n {
        let base = i * h * w;
        for r in 0..patch.height {
            for c in 0..patch.width {
                values[base + (patch.top + r) * w + (patch.left + c)] =
                    patch.pixels[r * patch.width + c];
            }
        }
    }
    Ok(Tensor::new(images.shape(), values)?)
}

/// Mix the watermark into the center of every image:
/// `(1 − opacity)·base + opacity·mark` under the footprint, clamped to
/// `[0, 1]`.
pub fn craft_blend(images: &Tensor, mark: &WatermarkSpec) -> Result<Tensor, AttackError> {
    let (n, h, w) = image_dims(images)?;
    if mark.height > h || mark.width > w {
        return Err(AttackError::PatchOutOfBounds {
            top: 0,
            left: 0,
            height: mark.height,
            width: mark.width,
            image_height: h,
            image_width: w,
        });
    }
    let top = (h - mark.height) / 2;
    let left = (w - mark.width) / 2;
    let mut values = images.values().to_vec();
    for i in 0..n {
        let base = i * h * w;
        for r in 0..mark.height {
            for c in 0..mark.width {
                let idx = base + (top + r) * w + (left + c);
                let mixed = (1.0 - mark.opacity) * values[idx]
                    + mark.opacity * mark.pixels[r * mark.width + c];
                values[idx] = mixed.clamp(0.0, 1.0);
            }
        }
    }
    Ok(Tensor::new(images.shape(), values)?)
}

// ---- pixel-space feature collision ----

/// Gradient descent on the pixels of each base image, pulling its
/// hidden features toward `target_features` while an L1 proximity term
/// (weight `lambda`) and projection onto `base ± epsilon` ∩ `[0, 1]`
/// keep it close to the original.  Rows are optimized independently, so
/// results do not depend on batch composition.
pub fn craft_feature_collision(
    feature_extractor: &ClassifierModel,
    bases: &Tensor,
    target_features: &[f32],
    steps: usize,
    step_size: f32,
    lambda: f32,
    epsilon: f32,
) -> Result<Tensor, AttackError> {
    let (n, h, w) = image_dims(bases)?;
    if n == 0 {
        return Err(AttackError::EmptyPool { which: "base" });
    }
    if !step_size.is_finite() || step_size <= 0.0 {
        return Err(AttackError::Config {
            detail: format!("step size {step_size} must be finite and > 0"),
        });
    }
    if !lambda.is_finite() || lambda < 0.0 {
        return Err(AttackError::Config {
            detail: format!("lambda {lambda} must be finite and >= 0"),
        });
    }
    if !epsilon.is_finite() || epsilon <= 0.0 {
        return Err(AttackError::Config {
            detail: format!("epsilon {epsilon} must be finite and > 0"),
        });
    }

    const CHUNK: usize = 256;
    let stride = h * w;
    let mut out = Vec::with_capacity(n * stride);
    for start in (0..n).step_by(CHUNK) {
        let m = CHUNK.min(n - start);
        let base_vals = &bases.values()[start * stride..(start + m) * stride];
        let base = Tensor::new(&[m, 1, h, w], base_vals.to_vec())?;
        let target_tile: Vec<f32> = target_features
            .iter()
            .cycle()
            .take(m * target_features.len())
            .copied()
            .collect();
        let target = Tensor::new(&[m, target_features.len()], target_tile)?;

        let mut current = base.clone();
        for step in 0..steps {
            let mut t = Tape::new();
            let x = t.variable(&current);
            let base_id = t.input(&base);
            let target_id = t.input(&target);
            let binding = feature_extractor.bind(&mut t, false);
            let feats = binding.forward(&mut t, x)?.features;
            let pull = t.l2_loss(feats, target_id)?;
            let prox = t.l1_loss(x, base_id)?;
            let prox = t.scale(prox, lambda)?;
            let loss = t.add(pull, prox)?;
            t.backward(loss)?;
            let grad = t.grad(x).expect("pixel variable always receives a gradient");

            let values = current.values_mut();
            for ((v, &g), &b) in values.iter_mut().zip(grad.iter()).zip(base.values().iter()) {
                let moved = *v - step_size * g;
                *v = moved.clamp(b - epsilon, b + epsilon).clamp(0.0, 1.0);
            }
            if values.iter().any(|v| !v.is_finite()) {
                return Err(AttackError::NonFiniteImage { step });
            }
        }
        out.extend_from_slice(current.values());
    }
    Ok(Tensor::new(bases.shape(), out)?)
}

// ---- generator training ----

/// One adversarial round on a single batch: a discriminator update on
/// real-vs-crafted, then a generator update on its three-term
/// objective.  Returns the generator-side loss breakdown.
#[allow(clippy::too_many_arguments)]
fn adversarial_round(
    cfg: &AttackConfig,
    feature_extractor: &ClassifierModel,
    generator: &mut GeneratorModel,
    discriminator: &mut DiscriminatorModel,
    adam_g: &mut Adam,
    adam_d: &mut Adam,
    batch: &Tensor,
    donor_features: &Tensor,
    noise: &Tensor,
    step: usize,
) -> Result<LossBreakdown, AttackError> {
    let n = batch.shape()[0];
    let pixels: usize = batch.shape()[1..].iter().product();
    let feature_elems: usize = donor_features.numel();
    let conditioned = matches!(cfg.conditioning, ConditioningMode::ImageConditioned);

    // Discriminator step: push D(base) toward 1 and D(crafted) toward 0.
    {
        let mut t = Tape::new();
        let g = generator.bind(&mut t, false);
        let d = discriminator.bind(&mut t, true);
        let x = t.input(batch);
        let z = t.input(noise);
        let delta = g.forward(&mut t, z, conditioned.then_some(x))?;
        let sum = t.add(x, delta)?;
        let crafted = t.clamp01(sum)?;
        let score_real = d.forward(&mut t, x)?;
        let score_fake = d.forward(&mut t, crafted)?;
        let real_term = t.bce_loss(score_real, 1.0)?;
        let fake_term = t.bce_loss(score_fake, 0.0)?;
        let loss = t.add(real_term, fake_term)?;
        t.backward(loss)?;
        install_grads(discriminator, &t, d.param_ids())?;
        adam_d.step(&mut discriminator.params_mut())?;
    }

    // Generator step against the updated discriminator.
    let mut t = Tape::new();
    let g = generator.bind(&mut t, true);
    let d = discriminator.bind(&mut t, false);
    let fe = feature_extractor.bind(&mut t, false);
    let x = t.input(batch);
    let z = t.input(noise);
    let donors = t.input(donor_features);
    let delta = g.forward(&mut t, z, conditioned.then_some(x))?;
    let sum = t.add(x, delta)?;
    let crafted = t.clamp01(sum)?;
    let score_fake = d.forward(&mut t, crafted)?;

    // bce(p, 0) is −mean ln(1−p), so the logged adversarial value is its
    // negation and the literal objective is its negated node.
    let fooled = t.bce_loss(score_fake, 0.0)?;
    let l_gan = -(t.value_scalar(fooled) as f64);
    let gan_term = match cfg.objective {
        GeneratorObjective::NonSaturating => t.bce_loss(score_fake, 1.0)?,
        GeneratorObjective::LiteralLogOneMinus => t.scale(fooled, -1.0)?,
    };

    let feats = fe.forward(&mut t, crafted)?.features;
    let pull = t.l2_loss(feats, donors)?;
    let fe_term = t.scale(pull, 1.0 / feature_elems as f32)?;
    let l_fe = t.value_scalar(fe_term) as f64;

    let drift = t.l1_loss(crafted, x)?;
    let pert_term = t.scale(drift, 1.0 / (n * pixels) as f32)?;
    let l_pert = t.value_scalar(pert_term) as f64;

    let weighted_fe = t.scale(fe_term, cfg.alpha)?;
    let weighted_pert = t.scale(pert_term, cfg.beta)?;
    let partial = t.add(gan_term, weighted_fe)?;
    let objective = t.add(partial, weighted_pert)?;
    t.backward(objective)?;
    install_grads(generator, &t, g.param_ids())?;
    adam_g.step(&mut generator.params_mut())?;

    let total = l_gan + cfg.alpha as f64 * l_fe + cfg.beta as f64 * l_pert;
    Ok(LossBreakdown { step, l_gan, l_fe, l_pert, total })
}

/// Train the perturbation generator and discriminator against a frozen
/// feature extractor.
///
/// Each epoch shuffles the base pool and alternates one discriminator
/// update with one generator update per batch.  The discriminator
/// separates base images from crafted ones; the generator fools it
/// while pulling crafted features toward the paired donors and keeping
/// the perturbation small.  Training aborts — preserving the models and
/// history in the error — if a step fails, the loss goes non-finite, or
/// the epoch-mean feature loss regresses from its best for `patience`
/// consecutive epochs.
pub fn train_deep_poison_models(
    cfg: &AttackConfig,
    feature_extractor: &ClassifierModel,
    base_pool: &Tensor,
    donor_pool: &Tensor,
) -> Result<(DeepPoisonModels, Vec<LossBreakdown>), AttackError> {
    cfg.validate()?;
    let (n_base, _, _) = image_dims(base_pool)?;
    let (n_donor, _, _) = image_dims(donor_pool)?;
    if n_base == 0 {
        return Err(AttackError::EmptyPool { which: "base" });
    }
    if n_donor == 0 {
        return Err(AttackError::EmptyPool { which: "donor" });
    }

    let mut generator = GeneratorModel::new(
        cfg.noise_dim,
        cfg.conditioning,
        cfg.epsilon,
        substream_seed(cfg.seed, "generator-init"),
    );
    let mut discriminator =
        DiscriminatorModel::new(substream_seed(cfg.seed, "discriminator-init"));
    let mut adam_g = Adam::new(cfg.lr_generator, 0.5, 0.999);
    let mut adam_d = Adam::new(cfg.lr_discriminator, 0.5, 0.999);

    // The feature extractor is frozen, so donor features never change.
    let donor_features = extract_features(feature_extractor, donor_pool)?;
    let fixed_pairing = match cfg.pairing {
        Pairing::NearestFeature => {
            let base_features = extract_features(feature_extractor, base_pool)?;
            Some(nearest_rows(&base_features, &donor_features))
        }
        Pairing::Random => None,
    };

    let mut shuffle_rng = substream(cfg.seed, "gan-shuffle");
    let mut pairing_rng = substream(cfg.seed, "gan-pairing");
    let mut noise_rng = substream(cfg.seed, "gan-noise");
    let mut order: Vec<usize> = (0..n_base).collect();
    let mut history: Vec<LossBreakdown> = Vec::new();
    let mut monitor = DivergenceMonitor::new(cfg.patience);
    let mut step = 0usize;

    let diverged = |reason: String,
                    generator: GeneratorModel,
                    discriminator: DiscriminatorModel,
                    loss_history: Vec<LossBreakdown>| {
        AttackError::Diverged(Box::new(DivergedRun {
            reason,
            generator,
            discriminator,
            loss_history,
        }))
    };

    for epoch in 0..cfg.epochs {
        use rand::seq::SliceRandom;
        order.shuffle(&mut shuffle_rng);
        let epoch_start = history.len();
        for rows in order.chunks(cfg.batch_size) {
            let batch = gather_rows(base_pool, rows)?;
            let donor_rows: Vec<usize> = match &fixed_pairing {
                Some(map) => rows.iter().map(|&r| map[r]).collect(),
                None => rows.iter().map(|_| pairing_rng.gen_range(0..n_donor)).collect(),
            };
            let donors = gather_rows(&donor_features, &donor_rows)?;
            let noise = sample_noise(&mut noise_rng, rows.len(), cfg.noise_dim);
            step += 1;
            match adversarial_round(
                cfg,
                feature_extractor,
                &mut generator,
                &mut discriminator,
                &mut adam_g,
                &mut adam_d,
                &batch,
                &donors,
                &noise,
                step,
            ) {
                Ok(lb) if lb.total.is_finite() => history.push(lb),
                Ok(lb) => {
                    history.push(lb);
                    return Err(diverged(
                        format!("non-finite loss at step {step}"),
                        generator,
                        discriminator,
                        history,
                    ));
                }
                Err(e) => {
                    return Err(diverged(
                        format!("step {step} failed: {e}"),
                        generator,
                        discriminator,
                        history,
                    ));
                }
            }
        }
        let epoch_losses = &history[epoch_start..];
        let mean_fe = epoch_losses.iter().map(|l| l.l_fe).sum::<f64>()
            / epoch_losses.len().max(1) as f64;
        // With alpha = 0 the feature term is not optimized, so its value
        // is noise and says nothing about the health of the run.
        if cfg.alpha > 0.0 && monitor.observe(mean_fe) {
            return Err(diverged(
                format!(
                    "feature loss regressed from its best for {} epochs (epoch {epoch}, mean {mean_fe:.6})",
                    cfg.patience
                ),
                generator,
                discriminator,
                history,
            ));
        }
    }

    Ok((DeepPoisonModels { generator, discriminator }, history))
}

/// Craft one poisoned image per base row with fresh noise: the trained
/// generator's perturbation is added to the base and clamped to
/// `[0, 1]`.  Noise is drawn up front, so results do not depend on
/// internal chunking.
pub fn craft_with_generator(
    generator: &GeneratorModel,
    bases: &Tensor,
    noise_seed: u64,
    noise_label: &str,
) -> Result<Tensor, AttackError> {
    let (n, h, w) = image_dims(bases)?;
    let mut rng = substream(noise_seed, noise_label);
    let noise = sample_noise(&mut rng, n, generator.noise_dim);
    let conditioned = matches!(generator.conditioning, ConditioningMode::ImageConditioned);

    const CHUNK: usize = 256;
    let stride = h * w;
    let noise_stride = generator.noise_dim;
    let mut out = Vec::with_capacity(n * stride);
    for start in (0..n).step_by(CHUNK) {
        let m = CHUNK.min(n - start);
        let base = Tensor::new(
            &[m, 1, h, w],
            bases.values()[start * stride..(start + m) * stride].to_vec(),
        )?;
        let z = Tensor::new(
            &[m, noise_stride],
            noise.values()[start * noise_stride..(start + m) * noise_stride].to_vec(),
        )?;
        let mut t = Tape::new();
        let g = generator.bind(&mut t, false);
        let x = t.input(&base);
        let z_id = t.input(&z);
        let delta = g.forward(&mut t, z_id, conditioned.then_some(x))?;
        let sum = t.add(x, delta)?;
        let crafted = t.clamp01(sum)?;
        out.extend_from_slice(t.value(crafted));
    }
    Ok(Tensor::new(bases.shape(), out)?)
}

/// Match each base image with a donor row per the configured pairing:
/// either fresh uniform draws from the crafting stream or the donor with
/// the nearest features. The result indexes into `donor_pool`.
pub fn assign_donors(
    cfg: &AttackConfig,
    feature_extractor: &ClassifierModel,
    bases: &Tensor,
    donor_pool: &Tensor,
) -> Result<Vec<usize>, AttackError> {
    let n = bases.shape()[0];
    let n_donor = donor_pool.shape()[0];
    if n_donor == 0 {
        return Err(AttackError::EmptyPool { which: "donor" });
    }
    match cfg.pairing {
        Pairing::Random => {
            let mut rng = substream(cfg.seed, "craft-pairing");
            Ok((0..n).map(|_| rng.gen_range(0..n_donor)).collect())
        }
        Pairing::NearestFeature => {
            let base_features = extract_features(feature_extractor, bases)?;
            let donor_features = extract_features(feature_extractor, donor_pool)?;
            Ok(nearest_rows(&base_features, &donor_features))
        }
    }
}

/// Full generator-based crafting run: train the adversarial pair on the
/// whole base pool, then craft a poisoned image for each row in
/// `craft_rows` using fresh noise.  `donor_indices` records which donor
/// each crafted image is matched with (by the configured pairing) for
/// feature-drift reporting.
pub fn train_deep_poison(
    cfg: &AttackConfig,
    feature_extractor: &ClassifierModel,
    base_pool: &Tensor,
    donor_pool: &Tensor,
    craft_rows: &[usize],
) -> Result<(DeepPoisonModels, CraftResult), AttackError> {
    let (models, loss_history) =
        train_deep_poison_models(cfg, feature_extractor, base_pool, donor_pool)?;
    let bases = gather_rows(base_pool, craft_rows)?;
    let crafted_images =
        craft_with_generator(&models.generator, &bases, cfg.seed, "craft-noise")?;
    let donor_indices = assign_donors(cfg, feature_extractor, &bases, donor_pool)?;

    debug_assert!(crafted_images
        .values()
        .iter()
        .zip(bases.values().iter())
        .all(|(&c, &b)| (c - b).abs() <= cfg.epsilon + BUDGET_SLACK));

    Ok((
        models,
        CraftResult {
            crafted_images,
            source_indices: craft_rows.to_vec(),
            donor_indices,
            loss_history,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::FEATURE_DIM;

    fn image_batch(n: usize, seed: u64) -> Tensor {
        let mut rng = substream(seed, "test-images");
        let values: Vec<f32> = (0..n * 28 * 28).map(|_| rng.gen_range(0.0..1.0)).collect();
        Tensor::new(&[n, 1, 28, 28], values).unwrap()
    }

    fn tiny_config(seed: u64) -> AttackConfig {
        AttackConfig {
            epochs: 2,
            batch_size: 4,
            noise_dim: 8,
            ..AttackConfig::deep_poison(seed)
        }
    }

    // ---- patch ----

    #[test]
    fn corner_patch_stamps_exactly_eight_pixels() {
        let images = Tensor::zeros(&[2, 1, 28, 28]);
        let patched = craft_patch(&images, &PatchSpec::white_corner()).unwrap();
        for i in 0..2 {
            let img = &patched.values()[i * 784..(i + 1) * 784];
            let lit: Vec<usize> = (0..784).filter(|&p| img[p] == 1.0).collect();
            assert_eq!(lit.len(), 8);
            for r in 25..27 {
                for c in 23..27 {
                    assert!(lit.contains(&(r * 28 + c)), "pixel ({r}, {c}) should be stamped");
                }
            }
        }
    }

    #[test]
    fn bar_patch_covers_its_footprint() {
        let images = Tensor::zeros(&[1, 1, 28, 28]);
        let patched = craft_patch(&images, &PatchSpec::center_bar()).unwrap();
        let lit = patched.values().iter().filter(|&&v| v == 1.0).count();
        assert_eq!(lit, 21);
        assert_eq!(patched.values()[8 * 28 + 10], 1.0);
        assert_eq!(patched.values()[14 * 28 + 12], 1.0);
        assert_eq!(patched.values()[7 * 28 + 10], 0.0);
    }

    #[test]
    fn patch_leaves_pixels_outside_the_footprint_untouched() {
        let images = image_batch(3, 7);
        let patched = craft_patch(&images, &PatchSpec::white_corner()).unwrap();
        let mut changed = 0;
        for (i, (&a, &b)) in images.values().iter().zip(patched.values().iter()).enumerate() {
            let (r, c) = ((i % 784) / 28, i % 28);
            let inside = (25..27).contains(&r) && (23..27).contains(&c);
            if a != b {
                changed += 1;
                assert!(inside, "pixel ({r}, {c}) changed outside the footprint");
            }
        }
        assert!(changed > 0);
    }

    #[test]
    fn oversized_patch_is_rejected() {
        let patch = PatchSpec::new(vec![1.0; 8], 2, 4, 27, 23).unwrap();
        let err = craft_patch(&Tensor::zeros(&[1, 1, 28, 28]), &patch).unwrap_err();
        assert!(matches!(err, AttackError::PatchOutOfBounds { .. }));
    }

    #[test]
    fn zero_area_patch_is_identity() {
        let images = image_batch(2, 11);
        let patch = PatchSpec::new(vec![], 0, 3, 5, 5).unwrap();
        let patched = craft_patch(&images, &patch).unwrap();
        assert_eq!(patched.values(), images.values());
    }

    #[test]
    fn patch_bitmap_values_outside_unit_range_are_rejected() {
        assert!(matches!(
            PatchSpec::new(vec![1.5], 1, 1, 0, 0),
            Err(AttackError::Config { .. })
        ));
        assert!(matches!(
            PatchSpec::new(vec![f32::NAN], 1, 1, 0, 0),
            Err(AttackError::Config { .. })
        ));
    }

    // ---- blend ----

    #[test]
    fn watermark_is_centered_and_mixed_at_its_opacity() {
        let images = Tensor::zeros(&[1, 1, 28, 28]);
        let mark = WatermarkSpec::stripes();
        let blended = craft_blend(&images, &mark).unwrap();
        // 28−11 = 17 → top 8; 28−16 = 12 → left 6.
        let (top, left) = (8, 6);
        for r in 0..11 {
            for c in 0..16 {
                let expected = 0.3 * mark.pixels()[r * 16 + c];
                let got = blended.values()[(top + r) * 28 + (left + c)];
                assert!((got - expected).abs() < 1e-6, "({r}, {c}): {got} vs {expected}");
            }
        }
        // Everything outside the footprint stays zero.
        let lit = blended.values().iter().filter(|&&v| v != 0.0).count();
        let stripe_pixels = mark.pixels().iter().filter(|&&v| v != 0.0).count();
        assert_eq!(lit, stripe_pixels);
    }

    #[test]
    fn zero_opacity_blend_is_identity() {
        let images = image_batch(2, 13);
        let mark = WatermarkSpec::new(vec![1.0; 4], 2, 2, 0.0).unwrap();
        let blended = craft_blend(&images, &mark).unwrap();
        assert_eq!(blended.values(), images.values());
    }

    #[test]
    fn blend_never_leaves_unit_range() {
        let images = Tensor::new(&[1, 1, 28, 28], vec![1.0; 784]).unwrap();
        let mark = WatermarkSpec::new(vec![1.0; 9], 3, 3, 0.9).unwrap();
        let blended = craft_blend(&images, &mark).unwrap();
        assert!(blended.values().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn opacity_outside_unit_range_is_rejected() {
        assert!(matches!(
            WatermarkSpec::new(vec![0.5], 1, 1, 1.5),
            Err(AttackError::Config { .. })
        ));
    }

    #[test]
    fn oversized_watermark_is_rejected() {
        let images = Tensor::zeros(&[1, 1, 28, 28]);
        let mark = WatermarkSpec::new(vec![0.0; 29 * 2], 2, 29, 0.5).unwrap();
        assert!(matches!(
            craft_blend(&images, &mark),
            Err(AttackError::PatchOutOfBounds { .. })
        ));
    }

    // ---- feature collision ----

    #[test]
    fn zero_steps_returns_the_bases_unchanged() {
        let fe = ClassifierModel::new(10, 1);
        let bases = image_batch(3, 17);
        let target = vec![0.5; FEATURE_DIM];
        let out = craft_feature_collision(&fe, &bases, &target, 0, 0.05, 0.01, 0.25).unwrap();
        assert_eq!(out.values(), bases.values());
    }

    #[test]
    fn huge_proximity_weight_pins_images_to_their_bases() {
        let fe = ClassifierModel::new(10, 2);
        let bases = image_batch(2, 19);
        let target = vec![1.0; FEATURE_DIM];
        let out =
            craft_feature_collision(&fe, &bases, &target, 100, 1e-10, 1e6, 0.25).unwrap();
        let max_drift = out
            .values()
            .iter()
            .zip(bases.values().iter())
            .map(|(&a, &b)| (a - b).abs())
            .fold(0.0f32, f32::max);
        assert!(max_drift < 1e-3, "max drift {max_drift}");
    }

    #[test]
    fn collision_respects_the_perturbation_budget() {
        let fe = ClassifierModel::new(10, 3);
        let bases = image_batch(4, 23);
        let target = vec![2.0; FEATURE_DIM];
        let eps = 0.1;
        let out = craft_feature_collision(&fe, &bases, &target, 25, 0.05, 0.01, eps).unwrap();
        for (&c, &b) in out.values().iter().zip(bases.values().iter()) {
            assert!((c - b).abs() <= eps + BUDGET_SLACK);
            assert!((0.0..=1.0).contains(&c));
        }
    }

    #[test]
    fn collision_moves_features_toward_the_target() {
        let fe = ClassifierModel::new(10, 4);
        let bases = image_batch(6, 29);
        let reference = image_batch(6, 31);
        let ref_feats = extract_features(&fe, &reference).unwrap();
        let target: Vec<f32> = (0..FEATURE_DIM)
            .map(|j| {
                (0..6).map(|i| ref_feats.values()[i * FEATURE_DIM + j]).sum::<f32>() / 6.0
            })
            .collect();

        let dist = |images: &Tensor| -> f64 {
            let feats = extract_features(&fe, images).unwrap();
            feats
                .values()
                .chunks(FEATURE_DIM)
                .map(|row| {
                    row.iter()
                        .zip(target.iter())
                        .map(|(&a, &b)| {
                            let d = a as f64 - b as f64;
                            d * d
                        })
                        .sum::<f64>()
                        .sqrt()
                })
                .sum::<f64>()
        };

        let before = dist(&bases);
        let out = craft_feature_collision(&fe, &bases, &target, 60, 0.05, 0.0, 0.25).unwrap();
        let after = dist(&out);
        assert!(after < before, "feature distance {before} -> {after}");
    }

    #[test]
    fn collision_is_deterministic() {
        let fe = ClassifierModel::new(10, 5);
        let bases = image_batch(2, 37);
        let target = vec![0.3; FEATURE_DIM];
        let a = craft_feature_collision(&fe, &bases, &target, 10, 0.05, 0.01, 0.25).unwrap();
        let b = craft_feature_collision(&fe, &bases, &target, 10, 0.05, 0.01, 0.25).unwrap();
        assert_eq!(a.values(), b.values());
    }

    #[test]
    fn collision_rejects_bad_step_size() {
        let fe = ClassifierModel::new(10, 6);
        let bases = image_batch(1, 41);
        let target = vec![0.0; FEATURE_DIM];
        assert!(matches!(
            craft_feature_collision(&fe, &bases, &target, 5, -0.1, 0.01, 0.25),
            Err(AttackError::Config { .. })
        ));
    }

    // ---- config ----

    #[test]
    fn config_validation_catches_bad_hyperparameters() {
        let mut cfg = AttackConfig::deep_poison(0);
        cfg.alpha = -1.0;
        assert!(cfg.validate().is_err());

        let mut cfg = AttackConfig::deep_poison(0);
        cfg.epsilon = 0.0;
        assert!(cfg.validate().is_err());

        let mut cfg = AttackConfig::deep_poison(0);
        cfg.batch_size = 0;
        assert!(cfg.validate().is_err());

        let mut cfg = AttackConfig::deep_poison(0);
        cfg.lr_generator = f32::NAN;
        assert!(cfg.validate().is_err());

        let mut cfg = AttackConfig::deep_poison(0);
        cfg.kind = AttackKind::Patch;
        assert!(cfg.validate().is_err(), "patch kind without a patch spec");

        assert!(AttackConfig::patch_corner(0).validate().is_ok());
        assert!(AttackConfig::blend_stripes(0).validate().is_ok());
        assert!(AttackConfig::deep_poison(0).validate().is_ok());
    }

    #[test]
    fn config_serializes_with_snake_case_kinds() {
        let cfg = AttackConfig::feature_collision(9);
        let json = serde_json::to_string(&cfg).unwrap();
        assert!(json.contains("\"feature_collision\""));
        let back: AttackConfig = serde_json::from_str(&json).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn partial_config_json_fills_defaults() {
        let cfg: AttackConfig =
            serde_json::from_str(r#"{"kind": "patch", "seed": 5}"#).unwrap();
        assert_eq!(cfg.kind, AttackKind::Patch);
        assert_eq!(cfg.seed, 5);
        assert_eq!(cfg.alpha, AttackConfig::default().alpha);
    }

    // ---- divergence monitor ----

    #[test]
    fn divergence_monitor_fires_on_sustained_regression_only() {
        // Rising well above the best for `patience` epochs aborts.
        let mut m = DivergenceMonitor::new(2);
        assert!(!m.observe(1.0));
        assert!(!m.observe(1.4));
        assert!(m.observe(1.4), "two regressing epochs hit patience 2");

        // A dip back toward the best resets the count.
        let mut m = DivergenceMonitor::new(2);
        assert!(!m.observe(1.0));
        assert!(!m.observe(1.4));
        assert!(!m.observe(0.99));
        assert!(!m.observe(1.3));
    }

    #[test]
    fn divergence_monitor_tolerates_plateaus_indefinitely() {
        // A converged run sitting at its best value never aborts, nor
        // does noise within the regression tolerance.
        let mut m = DivergenceMonitor::new(1);
        assert!(!m.observe(0.5));
        for _ in 0..50 {
            assert!(!m.observe(0.5));
            assert!(!m.observe(0.51));
        }
    }

    // ---- nearest-feature pairing ----

    #[test]
    fn nearest_rows_picks_the_closest_feature_vector() {
        let from = Tensor::new(&[2, 2], vec![0.0, 0.0, 5.0, 5.0]).unwrap();
        let to = Tensor::new(&[3, 2], vec![4.0, 4.0, 0.1, 0.1, 9.0, 9.0]).unwrap();
        assert_eq!(nearest_rows(&from, &to), vec![1, 0]);
    }

    // ---- generator training ----

    #[test]
    fn generator_training_is_deterministic() {
        let fe = ClassifierModel::new(10, 100);
        let bases = image_batch(8, 43);
        let donors = image_batch(8, 47);
        let cfg = tiny_config(77);
        let rows = [0, 3, 5];
        let (_, a) = train_deep_poison(&cfg, &fe, &bases, &donors, &rows).unwrap();
        let (_, b) = train_deep_poison(&cfg, &fe, &bases, &donors, &rows).unwrap();
        assert_eq!(a.crafted_images.values(), b.crafted_images.values());
        assert_eq!(a.donor_indices, b.donor_indices);
        assert_eq!(a.loss_history.len(), b.loss_history.len());
        for (x, y) in a.loss_history.iter().zip(b.loss_history.iter()) {
            assert_eq!(x.total, y.total);
        }
    }

    #[test]
    fn crafted_images_respect_budget_range_and_bookkeeping() {
        let fe = ClassifierModel::new(10, 101);
        let bases = image_batch(10, 53);
        let donors = image_batch(6, 59);
        let cfg = tiny_config(78);
        let rows = [9, 0, 4];
        let (_, result) = train_deep_poison(&cfg, &fe, &bases, &donors, &rows).unwrap();

        assert_eq!(result.crafted_images.shape(), &[3, 1, 28, 28]);
        assert_eq!(result.source_indices, rows);
        assert_eq!(result.donor_indices.len(), 3);
        assert!(result.donor_indices.iter().all(|&d| d < 6));

        let originals = gather_rows(&bases, &rows).unwrap();
        for (&c, &b) in result.crafted_images.values().iter().zip(originals.values().iter()) {
            assert!((c - b).abs() <= cfg.epsilon + BUDGET_SLACK);
            assert!((0.0..=1.0).contains(&c));
        }
        // Two epochs over 10 bases in batches of 4 → 3 rounds per epoch.
        assert_eq!(result.loss_history.len(), 6);
    }

    #[test]
    fn loss_breakdown_identity_holds_at_every_step() {
        let fe = ClassifierModel::new(10, 102);
        let bases = image_batch(8, 61);
        let donors = image_batch(8, 67);
        let mut cfg = tiny_config(79);
        cfg.alpha = 3.0;
        cfg.beta = 2.0;
        let (_, history) = train_deep_poison_models(&cfg, &fe, &bases, &donors).unwrap();
        assert!(!history.is_empty());
        for (i, lb) in history.iter().enumerate() {
            assert_eq!(lb.step, i + 1);
            let expected = lb.l_gan + cfg.alpha as f64 * lb.l_fe + cfg.beta as f64 * lb.l_pert;
            assert!(
                (lb.total - expected).abs() < 1e-6,
                "step {}: total {} vs {}",
                lb.step,
                lb.total,
                expected
            );
            assert!(lb.l_fe >= 0.0 && lb.l_pert >= 0.0);
            assert!(lb.l_gan < 0.0, "log of a probability below 1 is negative");
        }
    }

    #[test]
    fn feature_extractor_stays_frozen_through_training() {
        let fe = ClassifierModel::new(10, 103);
        let before: Vec<Vec<f32>> =
            fe.params().iter().map(|(_, t)| t.values().to_vec()).collect();
        let bases = image_batch(6, 71);
        let donors = image_batch(6, 73);
        train_deep_poison_models(&tiny_config(80), &fe, &bases, &donors).unwrap();
        for ((_, t), old) in fe.params().iter().zip(before.iter()) {
            assert_eq!(t.values(), old.as_slice());
        }
    }

    #[test]
    fn literal_objective_and_nearest_pairing_also_train() {
        let fe = ClassifierModel::new(10, 104);
        let bases = image_batch(6, 79);
        let donors = image_batch(5, 83);
        let mut cfg = tiny_config(81);
        cfg.objective = GeneratorObjective::LiteralLogOneMinus;
        cfg.pairing = Pairing::NearestFeature;
        let rows = [0, 2];
        let (_, result) = train_deep_poison(&cfg, &fe, &bases, &donors, &rows).unwrap();
        assert_eq!(result.crafted_images.shape()[0], 2);
        // Nearest-feature pairing is a deterministic function of the
        // frozen extractor, so recomputing it must agree.
        let base_feats = extract_features(&fe, &gather_rows(&bases, &rows).unwrap()).unwrap();
        let donor_feats = extract_features(&fe, &donors).unwrap();
        assert_eq!(result.donor_indices, nearest_rows(&base_feats, &donor_feats));
    }

    #[test]
    fn heavy_perturbation_penalty_drives_the_perturbation_down() {
        let fe = ClassifierModel::new(10, 105);
        let bases = image_batch(24, 89);
        let donors = image_batch(8, 97);
        let mut cfg = tiny_config(82);
        cfg.alpha = 0.0;
        cfg.beta = 1e4;
        // Adam steps are roughly lr-sized, and the output head's initial
        // weights are ~0.25, so give the run enough steps to reach zero.
        cfg.epochs = 30;
        cfg.batch_size = 8;
        cfg.lr_generator = 5e-3;
        let rows: Vec<usize> = (0..24).collect();
        let (_, result) = train_deep_poison(&cfg, &fe, &bases, &donors, &rows).unwrap();
        let originals = gather_rows(&bases, &rows).unwrap();
        let mean_drift: f64 = result
            .crafted_images
            .values()
            .iter()
            .zip(originals.values().iter())
            .map(|(&c, &b)| (c - b).abs() as f64)
            .sum::<f64>()
            / originals.numel() as f64;
        assert!(mean_drift < 0.01, "mean perturbation {mean_drift}");
    }

    #[test]
    fn exploding_learning_rate_reports_divergence_with_the_run_attached() {
        let fe = ClassifierModel::new(10, 106);
        let bases = image_batch(8, 101);
        let donors = image_batch(8, 103);
        let mut cfg = tiny_config(83);
        cfg.epochs = 30;
        cfg.lr_generator = 1e8;
        let err = train_deep_poison_models(&cfg, &fe, &bases, &donors).unwrap_err();
        match err {
            AttackError::Diverged(run) => {
                assert!(!run.reason.is_empty());
                assert!(
                    run.generator.param_count() > 0,
                    "aborted run keeps its models for inspection"
                );
            }
            other => panic!("expected divergence, got {other}"),
        }
    }

    #[test]
    fn empty_pools_are_rejected() {
        let fe = ClassifierModel::new(10, 107);
        let empty = Tensor::new(&[0, 1, 28, 28], vec![]).unwrap();
        let images = image_batch(4, 107);
        assert!(matches!(
            train_deep_poison_models(&tiny_config(84), &fe, &empty, &images),
            Err(AttackError::EmptyPool { which: "base" })
        ));
        assert!(matches!(
            train_deep_poison_models(&tiny_config(84), &fe, &images, &empty),
            Err(AttackError::EmptyPool { which: "donor" })
        ));
    }

    #[test]
    fn craft_rows_outside_the_pool_are_rejected() {
        let fe = ClassifierModel::new(10, 108);
        let bases = image_batch(4, 109);
        let donors = image_batch(4, 113);
        let err =
            train_deep_poison(&tiny_config(85), &fe, &bases, &donors, &[0, 4]).unwrap_err();
        assert!(matches!(err, AttackError::RowOutOfRange { row: 4, len: 4 }));
    }
}
