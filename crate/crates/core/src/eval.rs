//! Evaluation machinery: accuracy and attack-success metrics, perceptual
//! class-similarity hashing, Welch's t-test, and rank correlation.
//!
//! Attack success is always measured against a clean reference model:
//! the denominator counts trigger images that model recognizes
//! correctly, so the ratio isolates the attack's effect from base
//! misrecognition.

use crate::attacks::AttackKind;
use crate::data::{DataError, LabeledDataset};
use crate::models::{predict_labels, ClassifierModel, ModelError};
use crate::pipeline::{run_pipeline_cached, PipelineConfig, RunCache};
use serde::{Deserialize, Serialize};
use std::fmt;

// ---- errors ----

#[derive(Debug)]
pub enum EvalError {
    Model(ModelError),
    Data(DataError),
    EmptyDataset,
    /// The clean reference model recognized none of the trigger images,
    /// leaving the success ratio undefined.
    NoRecognizedTriggers,
    ClassOutOfRange { class: usize, num_classes: usize },
    EmptyClass { class: usize },
    /// Statistical inputs must hold at least this many values.
    SampleTooSmall { len: usize, min: usize },
    LengthMismatch { a: usize, b: usize },
    NonFiniteInput,
    /// Neither sample varies, so no test statistic exists.
    ZeroVariance,
    /// A sweep or study was asked for with inconsistent inputs.
    Protocol { detail: String },
    /// A study's end-to-end run failed.
    Pipeline(Box<crate::pipeline::PipelineError>),
}

impl fmt::Display for EvalError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EvalError::Model(e) => write!(f, "model error: {e}"),
            EvalError::Data(e) => write!(f, "data error: {e}"),
            EvalError::EmptyDataset => write!(f, "cannot evaluate an empty dataset"),
            EvalError::NoRecognizedTriggers => {
                write!(f, "clean reference model recognized no trigger images")
            }
            EvalError::ClassOutOfRange { class, num_classes } => {
                write!(f, "class {class} out of range for {num_classes} classes")
            }
            EvalError::EmptyClass { class } => {
                write!(f, "dataset holds no samples of class {class}")
            }
            EvalError::SampleTooSmall { len, min } => {
                write!(f, "sample of {len} values, need at least {min}")
            }
            EvalError::LengthMismatch { a, b } => {
                write!(f, "paired inputs of length {a} and {b}")
            }
            EvalError::NonFiniteInput => write!(f, "statistical input holds non-finite values"),
            EvalError::ZeroVariance => {
                write!(f, "both samples are constant; no test statistic exists")
            }
            EvalError::Protocol { detail } => write!(f, "bad evaluation protocol: {detail}"),
            EvalError::Pipeline(e) => write!(f, "evaluation run failed: {e}"),
        }
    }
}

impl std::error::Error for EvalError {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            EvalError::Model(e) => Some(e),
            EvalError::Data(e) => Some(e),
            EvalError::Pipeline(e) => Some(e.as_ref()),
            _ => None,
        }
    }
}

impl From<crate::pipeline::PipelineError> for EvalError {
    fn from(e: crate::pipeline::PipelineError) -> Self {
        EvalError::Pipeline(Box::new(e))
    }
}

impl From<ModelError> for EvalError {
    fn from(e: ModelError) -> Self {
        EvalError::Model(e)
    }
}

impl From<DataError> for EvalError {
    fn from(e: DataError) -> Self {
        EvalError::Data(e)
    }
}

// ---- metrics ----

/// Which model a report describes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelContext {
    CleanModel,
    PoisonedModel,
}

/// A metrics measurement carrying its raw counts, so every ratio can be
/// re-derived: `acc = n_correct / n_total` and, when attack success is
/// measured, `asr = n_att / n_correct`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub context: ModelContext,
    /// Human-readable description of the evaluated samples.
    pub trigger: String,
    pub n_total: usize,
    pub n_correct: usize,
    pub n_att: usize,
    pub acc: f64,
    pub asr: f64,
}

/// Fraction of the dataset the model labels correctly.
pub fn compute_acc(
    model: &ClassifierModel,
    dataset: &LabeledDataset,
) -> Result<MetricsReport, EvalError> {
    if dataset.is_empty() {
        return Err(EvalError::EmptyDataset);
    }
    let predictions = predict_labels(model, dataset.images())?;
    let n_correct = predictions
        .iter()
        .zip(dataset.labels().iter())
        .filter(|(p, l)| p == l)
        .count();
    Ok(MetricsReport {
        context: ModelContext::CleanModel,
        trigger: dataset.name().to_string(),
        n_total: dataset.len(),
        n_correct,
        n_att: 0,
        acc: n_correct as f64 / dataset.len() as f64,
        asr: 0.0,
    })
}

/// Attack success rate on a trigger set.
///
/// The clean reference model first filters the triggers down to those it
/// classifies as their true label (`n_correct`); the result is the
/// fraction of those the poisoned model sends to `target_class`
/// (`n_att / n_correct`).  Errors when the reference model recognizes
/// no triggers at all.
pub fn compute_asr(
    poisoned_model: &ClassifierModel,
    clean_reference: &ClassifierModel,
    trigger_set: &LabeledDataset,
    target_class: usize,
) -> Result<MetricsReport, EvalError> {
    if trigger_set.is_empty() {
        return Err(EvalError::EmptyDataset);
    }
    if target_class >= trigger_set.num_classes() {
        return Err(EvalError::ClassOutOfRange {
            class: target_class,
            num_classes: trigger_set.num_classes(),
        });
    }
    let clean_predictions = predict_labels(clean_reference, trigger_set.images())?;
    let poisoned_predictions = predict_labels(poisoned_model, trigger_set.images())?;
    let mut n_correct = 0usize;
    let mut n_att = 0usize;
    for ((clean, poisoned), label) in clean_predictions
        .iter()
        .zip(poisoned_predictions.iter())
        .zip(trigger_set.labels().iter())
    {
        if clean == label {
            n_correct += 1;
            if *poisoned == target_class {
                n_att += 1;
            }
        }
    }
    if n_correct == 0 {
        return Err(EvalError::NoRecognizedTriggers);
    }
    Ok(MetricsReport {
        context: ModelContext::PoisonedModel,
        trigger: format!("{} -> class {target_class}", trigger_set.name()),
        n_total: trigger_set.len(),
        n_correct,
        n_att,
        acc: n_correct as f64 / trigger_set.len() as f64,
        asr: n_att as f64 / n_correct as f64,
    })
}

// ---- perceptual hashing ----

const HASH_ROWS: usize = 8;
const HASH_COLS: usize = 9;

/// 64-bit difference hash of a grayscale image.
///
/// Pixels quantize to 8-bit grayscale and box-average down to an 8×9
/// grid; bit `r·8 + c` is set iff cell `(r, c)` is strictly darker than
/// its right neighbor.  All arithmetic is exact: cell boundaries sit at
/// multiples of `h/8` and `w/9`, so scaling the row overlaps by 8 and
/// the column overlaps by 9 gives integer weights, and every cell has
/// the same scaled area `h·w`.  A uniform brightness shift adds the
/// same exact amount to every cell sum, leaving all comparisons — and
/// the hash — unchanged.
pub fn dhash64(pixels: &[f32], height: usize, width: usize) -> u64 {
    debug_assert_eq!(pixels.len(), height * width);
    if height == 0 || width == 0 {
        return 0;
    }
    let quantized: Vec<u64> = pixels
        .iter()
        .map(|&v| (v.max(0.0) * 255.0).round().min(255.0) as u64)
        .collect();
    // cell_sum[r][c] accumulates pixel values weighted by the overlap of
    // the pixel with the cell rectangle, in units of 1/(8·9) of a pixel.
    let mut cells = [[0u64; HASH_COLS]; HASH_ROWS];
    for (r, row) in cells.iter_mut().enumerate() {
        // Row r spans [r·h, (r+1)·h) in eighths of a pixel.
        let (y0, y1) = (r as u64 * height as u64, (r + 1) as u64 * height as u64);
        for (c, cell) in row.iter_mut().enumerate() {
            let (x0, x1) = (c as u64 * width as u64, (c + 1) as u64 * width as u64);
            let mut acc = 0u64;
            for py in 0..height as u64 {
                let wy = (y1.min((py + 1) * HASH_ROWS as u64))
                    .saturating_sub(y0.max(py * HASH_ROWS as u64));
                if wy == 0 {
                    continue;
                }
                for px in 0..width as u64 {
                    let wx = (x1.min((px + 1) * HASH_COLS as u64))
                        .saturating_sub(x0.max(px * HASH_COLS as u64));
                    if wx == 0 {
                        continue;
                    }
                    acc += wy * wx * quantized[(py * width as u64 + px) as usize];
                }
            }
            *cell = acc;
        }
    }
    let mut hash = 0u64;
    for r in 0..HASH_ROWS {
        for c in 0..HASH_COLS - 1 {
            if cells[r][c] < cells[r][c + 1] {
                hash |= 1u64 << (r * (HASH_COLS - 1) + c);
            }
        }
    }
    hash
}

/// Number of differing bits between two hashes.
pub fn hamming(a: u64, b: u64) -> u32 {
    (a ^ b).count_ones()
}

/// Pixel-mean image over every sample of one class.
pub fn mean_class_image(dataset: &LabeledDataset, class: usize) -> Result<Vec<f32>, EvalError> {
    if class >= dataset.num_classes() {
        return Err(EvalError::ClassOutOfRange { class, num_classes: dataset.num_classes() });
    }
    let rows = dataset.indices_of_class(class);
    if rows.is_empty() {
        return Err(EvalError::EmptyClass { class });
    }
    let numel = dataset.image_numel();
    let mut acc = vec![0.0f64; numel];
    for &row in &rows {
        for (a, &v) in acc.iter_mut().zip(dataset.image(row).iter()) {
            *a += v as f64;
        }
    }
    Ok(acc.iter().map(|&a| (a / rows.len() as f64) as f32).collect())
}

/// Perceptual similarity of two classes: one minus the normalized
/// Hamming distance between the difference hashes of their mean images.
/// The same-class case is fixed to 0 by convention, marking it
/// "excluded" rather than "maximally similar".
pub fn class_similarity(
    dataset: &LabeledDataset,
    class_a: usize,
    class_b: usize,
) -> Result<f64, EvalError> {
    if class_a == class_b {
        if class_a >= dataset.num_classes() {
            return Err(EvalError::ClassOutOfRange {
                class: class_a,
                num_classes: dataset.num_classes(),
            });
        }
        return Ok(0.0);
    }
    let shape = dataset.images().shape();
    let (h, w) = (shape[2], shape[3]);
    let mean_a = mean_class_image(dataset, class_a)?;
    let mean_b = mean_class_image(dataset, class_b)?;
    let d = hamming(dhash64(&mean_a, h, w), dhash64(&mean_b, h, w));
    Ok(1.0 - d as f64 / 64.0)
}

/// Symmetric matrix of pairwise class similarities with a zero
/// diagonal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityMatrix {
    num_classes: usize,
    values: Vec<f64>,
}

impl SimilarityMatrix {
    /// Compute every pairwise similarity over the dataset's classes.
    /// Every class must have at least one sample.
    pub fn compute(dataset: &LabeledDataset) -> Result<Self, EvalError> {
        let n = dataset.num_classes();
        let mut values = vec![0.0f64; n * n];
        for a in 0..n {
            for b in (a + 1)..n {
                let s = class_similarity(dataset, a, b)?;
                values[a * n + b] = s;
                values[b * n + a] = s;
            }
        }
        Ok(SimilarityMatrix { num_classes: n, values })
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn get(&self, a: usize, b: usize) -> f64 {
        self.values[a * self.num_classes + b]
    }
}

// ---- Welch's t-test ----

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sidedness {
    TwoSided,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TTestResult {
    pub t_statistic: f64,
    pub degrees_of_freedom: f64,
    pub p_value: f64,
    pub sidedness: Sidedness,
    pub n_a: usize,
    pub n_b: usize,
}

fn mean_and_variance(sample: &[f64]) -> (f64, f64) {
    let n = sample.len() as f64;
    let mean = sample.iter().sum::<f64>() / n;
    let variance = sample.iter().map(|&x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, variance)
}

/// Welch's unequal-variance two-sample t-test, two-sided.
///
/// Both samples need at least two finite values; when neither sample
/// varies at all there is no statistic and the call errors.
pub fn ttest_two_sample(a: &[f64], b: &[f64]) -> Result<TTestResult, EvalError> {
    for sample in [a, b] {
        if sample.len() < 2 {
            return Err(EvalError::SampleTooSmall { len: sample.len(), min: 2 });
        }
        if sample.iter().any(|v| !v.is_finite()) {
            return Err(EvalError::NonFiniteInput);
        }
    }
    let (mean_a, var_a) = mean_and_variance(a);
    let (mean_b, var_b) = mean_and_variance(b);
    if var_a == 0.0 && var_b == 0.0 {
        return Err(EvalError::ZeroVariance);
    }
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let sa = var_a / na;
    let sb = var_b / nb;
    let se = (sa + sb).sqrt();
    let t = (mean_a - mean_b) / se;
    let df = (sa + sb) * (sa + sb)
        / (sa * sa / (na - 1.0) + sb * sb / (nb - 1.0));
    // Two-sided p from the t CDF via the regularized incomplete beta
    // identity P(|T| > t) = I_{df/(df+t²)}(df/2, 1/2).
    let p_value = regularized_incomplete_beta(df / (df + t * t), df / 2.0, 0.5);
    Ok(TTestResult {
        t_statistic: t,
        degrees_of_freedom: df,
        p_value,
        sidedness: Sidedness::TwoSided,
        n_a: a.len(),
        n_b: b.len(),
    })
}

/// Natural log of the gamma function (Lanczos approximation, g = 7).
fn ln_gamma(x: f64) -> f64 {
    const COEFFS: [f64; 8] = [
        676.5203681218851,
        -1259.1392167224028,
        771.32342877765313,
        -176.61502916214059,
        12.507343278686905,
        -0.13857109526572012,
        9.9843695780195716e-6,
        1.5056327351493116e-7,
    ];
    if x < 0.5 {
        // Reflection formula keeps the approximation in its stable range.
        return std::f64::consts::PI.ln()
            - (std::f64::consts::PI * x).sin().ln()
            - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut acc = 0.99999999999980993;
    for (i, &c) in COEFFS.iter().enumerate() {
        acc += c / (x + i as f64 + 1.0);
    }
    let t = x + 7.5;
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + acc.ln()
}

/// Continued-fraction expansion for the incomplete beta function
/// (modified Lentz's method).
fn beta_continued_fraction(x: f64, a: f64, b: f64) -> f64 {
    const MAX_ITER: usize = 300;
    const EPS: f64 = 1e-15;
    const FPMIN: f64 = 1e-300;

    let qab = a + b;
    let qap = a + 1.0;
    let qam = a - 1.0;
    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if d.abs() < FPMIN {
        d = FPMIN;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..=MAX_ITER {
        let m = m as f64;
        let m2 = 2.0 * m;
        let aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if d.abs() < FPMIN {
            d = FPMIN;
        }
        c = 1.0 + aa / c;
        if c.abs() < FPMIN {
            c = FPMIN;
        }
        d = 1.0 / d;
        h *= d * c;
        let aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if d.abs() < FPMIN {
            d = FPMIN;
        }
        c = 1.0 + aa / c;
        if c.abs() < FPMIN {
            c = FPMIN;
        }
        d = 1.0 / d;
        let delta = d * c;
        h *= delta;
        if (delta - 1.0).abs() < EPS {
            break;
        }
    }
    h
}

/// Regularized incomplete beta function I_x(a, b).
fn regularized_incomplete_beta(x: f64, a: f64, b: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x >= 1.0 {
        return 1.0;
    }
    let ln_front = ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + a * x.ln() + b * (1.0 - x).ln();
    let front = ln_front.exp();
    if x < (a + 1.0) / (a + b + 2.0) {
        front * beta_continued_fraction(x, a, b) / a
    } else {
        1.0 - front * beta_continued_fraction(1.0 - x, b, a) / b
    }
}

// ---- rank correlation ----

/// Ranks with ties assigned their average rank (1-based).
fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&i, &j| values[i].total_cmp(&values[j]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for k in i..=j {
            ranks[order[k]] = avg;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation with average-rank tie handling.  Errors
/// when either input is constant (correlation undefined).
pub fn spearman(a: &[f64], b: &[f64]) -> Result<f64, EvalError> {
    if a.len() != b.len() {
        return Err(EvalError::LengthMismatch { a: a.len(), b: b.len() });
    }
    if a.len() < 2 {
        return Err(EvalError::SampleTooSmall { len: a.len(), min: 2 });
    }
    if a.iter().chain(b.iter()).any(|v| !v.is_finite()) {
        return Err(EvalError::NonFiniteInput);
    }
    let ra = average_ranks(a);
    let rb = average_ranks(b);
    let n = ra.len() as f64;
    let mean = (n + 1.0) / 2.0;
    let mut cov = 0.0;
    let mut var_a = 0.0;
    let mut var_b = 0.0;
    for (&x, &y) in ra.iter().zip(rb.iter()) {
        cov += (x - mean) * (y - mean);
        var_a += (x - mean) * (x - mean);
        var_b += (y - mean) * (y - mean);
    }
    if var_a == 0.0 || var_b == 0.0 {
        return Err(EvalError::ZeroVariance);
    }
    Ok(cov / (var_a * var_b).sqrt())
}

// ---- logit populations for the significance test ----

/// Pull the target-class logit of up to `cap` rows from each dataset, as
/// the two populations a significance test compares. Rows are taken in
/// dataset order, so the subsample is deterministic.
pub fn target_logit_populations(
    model: &ClassifierModel,
    set_a: &LabeledDataset,
    set_b: &LabeledDataset,
    target_class: usize,
    cap: usize,
) -> Result<(Vec<f64>, Vec<f64>), EvalError> {
    let mut pops = Vec::with_capacity(2);
    for set in [set_a, set_b] {
        if set.is_empty() {
            return Err(EvalError::EmptyDataset);
        }
        let take = cap.min(set.len());
        let rows: Vec<usize> = (0..take).collect();
        let subset = set.subset(&rows)?;
        let logits = crate::models::classifier_logits(model, subset.images())?;
        let classes = logits.shape()[1];
        if target_class >= classes {
            return Err(EvalError::ClassOutOfRange {
                class: target_class,
                num_classes: classes,
            });
        }
        pops.push(
            (0..take)
                .map(|r| logits.values()[r * classes + target_class] as f64)
                .collect::<Vec<f64>>(),
        );
    }
    let b = pops.pop().expect("two populations were built");
    let a = pops.pop().expect("two populations were built");
    Ok((a, b))
}

// ---- poison-ratio sweep ----

/// One (ratio, seed) pipeline run inside a sweep. When the run failed,
/// `error` carries the reason and the metric fields are NaN.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepCell {
    pub attack: AttackKind,
    pub ratio: f64,
    pub seed: u64,
    pub acc_clean: f64,
    pub acc_poisoned: f64,
    pub asr: f64,
    pub wall_seconds: f64,
    pub error: Option<String>,
}

/// Mean metrics over the successful cells of one ratio.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepSummaryRow {
    pub ratio: f64,
    pub mean_acc_poisoned: f64,
    pub mean_asr: f64,
    /// Successful cells behind the means.
    pub cells: usize,
}

/// Full sweep output: every cell plus per-ratio means.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepTable {
    pub attack: AttackKind,
    pub cells: Vec<SweepCell>,
    pub summary: Vec<SweepSummaryRow>,
}

/// Run one sweep cell: the pipeline at (`ratio`, `seed`) on top of
/// `base`.  Failures fold into the cell as an error string with NaN
/// metrics, so a broken cell never aborts its sweep.
pub fn sweep_cell(
    train_set: &LabeledDataset,
    test_set: &LabeledDataset,
    base: &PipelineConfig,
    ratio: f64,
    seed: u64,
    cache: &mut RunCache,
) -> SweepCell {
    let cfg = PipelineConfig {
        poison_ratio: ratio,
        seed,
        ..base.clone()
    };
    let started = std::time::Instant::now();
    let outcome = run_pipeline_cached(train_set, test_set, &cfg, cache);
    let wall_seconds = started.elapsed().as_secs_f64();
    match outcome {
        Ok(run) => SweepCell {
            attack: base.attack.kind,
            ratio,
            seed,
            acc_clean: run.acc_clean.acc,
            acc_poisoned: run.acc_poisoned.acc,
            asr: run.asr.asr,
            wall_seconds,
            error: None,
        },
        Err(e) => SweepCell {
            attack: base.attack.kind,
            ratio,
            seed,
            acc_clean: f64::NAN,
            acc_poisoned: f64::NAN,
            asr: f64::NAN,
            wall_seconds,
            error: Some(e.to_string()),
        },
    }
}

fn check_sweep_protocol(ratios: &[f64], seeds: &[u64]) -> Result<(), EvalError> {
    if ratios.is_empty() || seeds.is_empty() {
        return Err(EvalError::Protocol {
            detail: "sweep needs at least one ratio and one seed".to_string(),
        });
    }
    if ratios.windows(2).any(|w| w[0] > w[1]) {
        return Err(EvalError::Protocol {
            detail: "sweep ratios must be sorted ascending".to_string(),
        });
    }
    Ok(())
}

fn summarize_sweep(ratios: &[f64], seeds: &[u64], cells: &[SweepCell]) -> Vec<SweepSummaryRow> {
    ratios
        .iter()
        .zip(cells.chunks(seeds.len()))
        .map(|(&ratio, chunk)| {
            let ok: Vec<&SweepCell> = chunk.iter().filter(|c| c.error.is_none()).collect();
            let mean = |f: fn(&SweepCell) -> f64| {
                if ok.is_empty() {
                    f64::NAN
                } else {
                    ok.iter().map(|c| f(c)).sum::<f64>() / ok.len() as f64
                }
            };
            SweepSummaryRow {
                ratio,
                mean_acc_poisoned: mean(|c| c.acc_poisoned),
                mean_asr: mean(|c| c.asr),
                cells: ok.len(),
            }
        })
        .collect()
}

/// Run the full pipeline once per (ratio, seed) pair and aggregate per
/// ratio. Ratios must arrive sorted ascending; duplicates are kept and
/// produce duplicate rows. A failed cell is recorded with its error and
/// the sweep continues. Expensive stages that do not depend on the ratio
/// (the clean model, the adversarial generator) are computed once per
/// seed; cached cells are bit-identical to standalone runs.
pub fn run_sweep(
    train_set: &LabeledDataset,
    test_set: &LabeledDataset,
    base: &PipelineConfig,
    ratios: &[f64],
    seeds: &[u64],
) -> Result<SweepTable, EvalError> {
    check_sweep_protocol(ratios, seeds)?;
    let mut cache = RunCache::new();
    let mut cells = Vec::with_capacity(ratios.len() * seeds.len());
    for &ratio in ratios {
        for &seed in seeds {
            cells.push(sweep_cell(train_set, test_set, base, ratio, seed, &mut cache));
        }
    }
    let summary = summarize_sweep(ratios, seeds, &cells);
    Ok(SweepTable {
        attack: base.attack.kind,
        cells,
        summary,
    })
}

/// [`run_sweep`] with cells executed concurrently on `threads` worker
/// threads.  Cells are fully isolated — no cross-cell reuse — so every
/// metric matches the serial sweep exactly (stage reuse is bit-identical
/// to a standalone run); only the wall-clock timings differ.
pub fn run_sweep_parallel(
    train_set: &LabeledDataset,
    test_set: &LabeledDataset,
    base: &PipelineConfig,
    ratios: &[f64],
    seeds: &[u64],
    threads: usize,
) -> Result<SweepTable, EvalError> {
    use rayon::prelude::*;
    check_sweep_protocol(ratios, seeds)?;
    if threads == 0 {
        return Err(EvalError::Protocol {
            detail: "sweep needs at least one worker thread".to_string(),
        });
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| EvalError::Protocol {
            detail: format!("could not build the sweep thread pool: {e}"),
        })?;
    let pairs: Vec<(f64, u64)> = ratios
        .iter()
        .flat_map(|&r| seeds.iter().map(move |&s| (r, s)))
        .collect();
    let cells: Vec<SweepCell> = pool.install(|| {
        pairs
            .par_iter()
            .map(|&(ratio, seed)| {
                sweep_cell(train_set, test_set, base, ratio, seed, &mut RunCache::new())
            })
            .collect()
    });
    let summary = summarize_sweep(ratios, seeds, &cells);
    Ok(SweepTable {
        attack: base.attack.kind,
        cells,
        summary,
    })
}

/// Sweep cells as CSV with a header row; failed cells print NaN metrics.
pub fn sweep_csv(table: &SweepTable) -> String {
    let mut out = String::from("attack,ratio,seed,acc_clean,acc_poisoned,asr,wall_seconds\n");
    for cell in &table.cells {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            cell.attack,
            cell.ratio,
            cell.seed,
            cell.acc_clean,
            cell.acc_poisoned,
            cell.asr,
            cell.wall_seconds
        ));
    }
    out
}

// ---- inter-class similarity study ----

/// One donor class's row in the similarity study.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StudyRow {
    pub donor_class: usize,
    pub similarity: f64,
    pub asr: f64,
}

/// Full study output, one row per donor class in input order.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StudyTable {
    pub target_class: usize,
    pub rows: Vec<StudyRow>,
}

/// For each donor class: measure its perceptual similarity to the target
/// class on the training split, run the full attack pipeline against it,
/// and record the attack success rate. The target class itself is not a
/// valid donor (its similarity slot is reserved by the same-class zero
/// convention), and at least three donors are required for the resulting
/// trend to mean anything.
pub fn interclass_study(
    train_set: &LabeledDataset,
    test_set: &LabeledDataset,
    base: &PipelineConfig,
    donor_classes: &[usize],
) -> Result<StudyTable, EvalError> {
    if donor_classes.len() < 3 {
        return Err(EvalError::Protocol {
            detail: format!(
                "study needs at least 3 donor classes, got {}",
                donor_classes.len()
            ),
        });
    }
    if donor_classes.contains(&base.target_class) {
        return Err(EvalError::Protocol {
            detail: format!(
                "target class {} cannot be its own donor",
                base.target_class
            ),
        });
    }

    let mut cache = RunCache::new();
    let mut rows = Vec::with_capacity(donor_classes.len());
    for &donor in donor_classes {
        let similarity = class_similarity(train_set, base.target_class, donor)?;
        let cfg = PipelineConfig {
            donor_class: donor,
            ..base.clone()
        };
        let run = run_pipeline_cached(train_set, test_set, &cfg, &mut cache)?;
        rows.push(StudyRow {
            donor_class: donor,
            similarity,
            asr: run.asr.asr,
        });
    }
    Ok(StudyTable {
        target_class: base.target_class,
        rows,
    })
}

/// Study rows as CSV with a header row.
pub fn study_csv(table: &StudyTable) -> String {
    let mut out = String::from("donor_class,similarity,asr\n");
    for row in &table.rows {
        out.push_str(&format!(
            "{},{},{}\n",
            row.donor_class, row.similarity, row.asr
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{predict_labels, Parameterized};
    use crate::rng::substream;
    use crate::tensor::Tensor;
    use rand::Rng;

    fn toy_images(n: usize, seed: u64) -> Tensor {
        let mut rng = substream(seed, "eval-test-images");
        let values: Vec<f32> = (0..n * 28 * 28)
            .map(|_| (rng.gen_range(0u8..=255) as f32) / 255.0)
            .collect();
        Tensor::new(&[n, 1, 28, 28], values).unwrap()
    }

    fn dataset_with_labels(images: Tensor, labels: Vec<usize>) -> LabeledDataset {
        LabeledDataset::new("toy", images, labels, 10).unwrap()
    }

    /// Doctor a model so its final-layer bias forces a constant output.
    fn constant_class_model(class: usize, seed: u64) -> ClassifierModel {
        let mut model = ClassifierModel::new(10, seed);
        for (name, tensor) in model.params_mut() {
            if name == "classifier.fc3.bias" {
                tensor.values_mut()[class] = 1e6;
            }
        }
        model
    }

    // ---- accuracy ----

    #[test]
    fn labels_matching_predictions_give_perfect_accuracy() {
        let model = ClassifierModel::new(10, 1);
        let images = toy_images(20, 1);
        let labels = predict_labels(&model, &images).unwrap();
        let ds = dataset_with_labels(images, labels);
        let report = compute_acc(&model, &ds).unwrap();
        assert_eq!(report.n_total, 20);
        assert_eq!(report.n_correct, 20);
        assert_eq!(report.acc, 1.0);
    }

    #[test]
    fn half_correct_labels_give_half_accuracy() {
        let model = ClassifierModel::new(10, 2);
        let images = toy_images(10, 2);
        let mut labels = predict_labels(&model, &images).unwrap();
        for l in labels.iter_mut().take(5) {
            *l = (*l + 1) % 10;
        }
        let ds = dataset_with_labels(images, labels);
        let report = compute_acc(&model, &ds).unwrap();
        assert_eq!(report.n_correct, 5);
        assert_eq!(report.acc, 0.5);
    }

    #[test]
    fn empty_dataset_cannot_be_scored() {
        let model = ClassifierModel::new(10, 3);
        let ds = dataset_with_labels(Tensor::new(&[0, 1, 28, 28], vec![]).unwrap(), vec![]);
        assert!(matches!(compute_acc(&model, &ds), Err(EvalError::EmptyDataset)));
    }

    // ---- attack success ----

    #[test]
    fn constant_target_model_scores_full_success() {
        let clean = ClassifierModel::new(10, 4);
        let images = toy_images(12, 4);
        let labels = predict_labels(&clean, &images).unwrap();
        let target = (labels[0] + 5) % 10;
        let triggers = dataset_with_labels(images, labels);
        let poisoned = constant_class_model(target, 4);
        let report = compute_asr(&poisoned, &clean, &triggers, target).unwrap();
        assert_eq!(report.n_correct, 12);
        assert_eq!(report.n_att, 12);
        assert_eq!(report.asr, 1.0);
    }

    #[test]
    fn unpoisoned_model_scores_the_confusion_baseline() {
        let clean = ClassifierModel::new(10, 5);
        let images = toy_images(15, 5);
        let labels = predict_labels(&clean, &images).unwrap();
        // Pick a target none of the correct predictions can hit: each
        // correct prediction equals its label, so any target differing
        // from every label gives zero success.
        let target = (0..10).find(|t| !labels.contains(t)).unwrap_or(0);
        let triggers = dataset_with_labels(images, labels.clone());
        let report = compute_asr(&clean, &clean, &triggers, target).unwrap();
        if !labels.contains(&target) {
            assert_eq!(report.asr, 0.0);
        }
        assert_eq!(report.n_correct, 15, "self-consistent labels are all recognized");
    }

    #[test]
    fn unrecognizable_triggers_are_a_zero_denominator_error() {
        let clean = ClassifierModel::new(10, 6);
        let images = toy_images(8, 6);
        let labels: Vec<usize> = predict_labels(&clean, &images)
            .unwrap()
            .iter()
            .map(|&p| (p + 1) % 10)
            .collect();
        let triggers = dataset_with_labels(images, labels);
        assert!(matches!(
            compute_asr(&clean, &clean, &triggers, 0),
            Err(EvalError::NoRecognizedTriggers)
        ));
    }

    #[test]
    fn asr_report_carries_re_derivable_counts() {
        let clean = ClassifierModel::new(10, 7);
        let images = toy_images(9, 7);
        let labels = predict_labels(&clean, &images).unwrap();
        let target = (labels[0] + 3) % 10;
        let triggers = dataset_with_labels(images, labels);
        let poisoned = constant_class_model(target, 7);
        let r = compute_asr(&poisoned, &clean, &triggers, target).unwrap();
        assert_eq!(r.acc, r.n_correct as f64 / r.n_total as f64);
        assert_eq!(r.asr, r.n_att as f64 / r.n_correct as f64);
        assert!((0.0..=1.0).contains(&r.acc) && (0.0..=1.0).contains(&r.asr));
    }

    // ---- difference hash ----

    #[test]
    fn constant_image_hashes_to_zero() {
        let image = vec![0.5f32; 28 * 28];
        assert_eq!(dhash64(&image, 28, 28), 0);
    }

    #[test]
    fn increasing_columns_hash_to_all_ones() {
        let image: Vec<f32> = (0..28 * 28).map(|i| (i % 28) as f32 / 27.0).collect();
        let hash = dhash64(&image, 28, 28);
        assert_eq!(hash, u64::MAX);
        assert_eq!(hamming(hash, 0), 64);
    }

    #[test]
    fn hamming_of_identical_hashes_is_zero() {
        assert_eq!(hamming(0xDEAD_BEEF, 0xDEAD_BEEF), 0);
        assert_eq!(hamming(u64::MAX, 0), 64);
    }

    #[test]
    fn hash_ignores_uniform_brightness_shifts() {
        // A shift of a whole grayscale step brightens every quantized
        // pixel by the same amount, which the hash must ignore.
        for seed in 0..20u64 {
            let mut rng = substream(seed, "brightness");
            let image: Vec<f32> =
                (0..28 * 28).map(|_| (rng.gen_range(0u8..=229) as f32) / 255.0).collect();
            let shifted: Vec<f32> = image.iter().map(|&v| v + 26.0 / 255.0).collect();
            assert_eq!(dhash64(&image, 28, 28), dhash64(&shifted, 28, 28));
        }
    }

    #[test]
    fn non_square_images_hash_without_panicking() {
        let image: Vec<f32> = (0..9 * 8).map(|i| i as f32 / 71.0).collect();
        // 8 rows × 9 columns maps one pixel per cell; each row increases.
        assert_eq!(dhash64(&image, 8, 9), u64::MAX);
    }

    // ---- class similarity ----

    fn two_class_dataset() -> LabeledDataset {
        // Class 0: left-bright images; class 1: right-bright images.
        let mut values = Vec::new();
        let mut labels = Vec::new();
        for i in 0..6 {
            let left = i < 3;
            for p in 0..784 {
                let col = p % 28;
                let bright = if left { col < 14 } else { col >= 14 };
                values.push(if bright { 0.9 } else { 0.1 });
            }
            labels.push(usize::from(!left));
        }
        LabeledDataset::new(
            "halves",
            Tensor::new(&[6, 1, 28, 28], values).unwrap(),
            labels,
            2,
        )
        .unwrap()
    }

    #[test]
    fn same_class_similarity_is_fixed_to_zero() {
        let ds = two_class_dataset();
        assert_eq!(class_similarity(&ds, 0, 0).unwrap(), 0.0);
        assert_eq!(class_similarity(&ds, 1, 1).unwrap(), 0.0);
    }

    #[test]
    fn similarity_is_symmetric_and_bounded() {
        let ds = two_class_dataset();
        let ab = class_similarity(&ds, 0, 1).unwrap();
        let ba = class_similarity(&ds, 1, 0).unwrap();
        assert_eq!(ab, ba);
        assert!((0.0..=1.0).contains(&ab));
    }

    #[test]
    fn empty_class_is_reported() {
        let images = toy_images(4, 8);
        let ds = dataset_with_labels(images, vec![0, 0, 1, 1]);
        assert!(matches!(
            class_similarity(&ds, 0, 9),
            Err(EvalError::EmptyClass { class: 9 })
        ));
    }

    #[test]
    fn similarity_matrix_is_symmetric_with_zero_diagonal() {
        let ds = two_class_dataset();
        let m = SimilarityMatrix::compute(&ds).unwrap();
        assert_eq!(m.num_classes(), 2);
        assert_eq!(m.get(0, 0), 0.0);
        assert_eq!(m.get(1, 1), 0.0);
        assert_eq!(m.get(0, 1), m.get(1, 0));
    }

    // ---- t-test ----

    #[test]
    fn shifted_unit_sequences_match_the_textbook_values() {
        let a = [1.0, 2.0, 3.0, 4.0, 5.0];
        let b = [2.0, 3.0, 4.0, 5.0, 6.0];
        let r = ttest_two_sample(&a, &b).unwrap();
        assert!((r.t_statistic + 1.0).abs() < 1e-12, "t = {}", r.t_statistic);
        assert!((r.degrees_of_freedom - 8.0).abs() < 1e-12);
        assert!((r.p_value - 0.3466).abs() < 1e-3, "p = {}", r.p_value);
        assert_eq!((r.n_a, r.n_b), (5, 5));
    }

    #[test]
    fn identical_samples_give_zero_t_and_unit_p() {
        let a = [1.0, 2.0, 3.0];
        let r = ttest_two_sample(&a, &a).unwrap();
        assert_eq!(r.t_statistic, 0.0);
        assert!((r.p_value - 1.0).abs() < 1e-12);
    }

    #[test]
    fn widely_separated_means_give_vanishing_p() {
        let a = [0.0, 0.1, -0.1, 0.05, -0.05, 0.02, -0.02, 0.07];
        let b: Vec<f64> = a.iter().map(|&x| x + 1000.0).collect();
        let r = ttest_two_sample(&a, &b).unwrap();
        assert!(r.p_value < 1e-6, "p = {}", r.p_value);
    }

    #[test]
    fn swapping_samples_negates_t_and_preserves_p() {
        let a = [3.1, 4.1, 5.9, 2.6, 5.3];
        let b = [2.7, 1.8, 2.8, 1.8, 2.8, 4.5];
        let ab = ttest_two_sample(&a, &b).unwrap();
        let ba = ttest_two_sample(&b, &a).unwrap();
        assert!((ab.t_statistic + ba.t_statistic).abs() < 1e-12);
        assert!((ab.p_value - ba.p_value).abs() < 1e-12);
    }

    #[test]
    fn degenerate_samples_are_rejected() {
        assert!(matches!(
            ttest_two_sample(&[1.0], &[1.0, 2.0]),
            Err(EvalError::SampleTooSmall { .. })
        ));
        assert!(matches!(
            ttest_two_sample(&[2.0, 2.0], &[5.0, 5.0]),
            Err(EvalError::ZeroVariance)
        ));
        assert!(matches!(
            ttest_two_sample(&[1.0, f64::NAN], &[1.0, 2.0]),
            Err(EvalError::NonFiniteInput)
        ));
        // One constant sample still admits a statistic.
        let r = ttest_two_sample(&[2.0, 2.0, 2.0], &[1.0, 2.0, 3.0]).unwrap();
        assert!(r.t_statistic.is_finite() && r.p_value.is_finite());
    }

    #[test]
    fn p_values_agree_with_a_reference_implementation() {
        use statrs::distribution::{ContinuousCDF, StudentsT};
        let mut rng = substream(99, "ttest-oracle");
        for case in 0..12 {
            let na = rng.gen_range(3..40);
            let nb = rng.gen_range(3..40);
            let shift = rng.gen_range(-2.0..2.0);
            let scale = rng.gen_range(0.5..3.0);
            let a: Vec<f64> = (0..na).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let b: Vec<f64> = (0..nb).map(|_| rng.gen_range(-1.0..1.0) * scale + shift).collect();
            let r = ttest_two_sample(&a, &b).unwrap();
            let dist = StudentsT::new(0.0, 1.0, r.degrees_of_freedom).unwrap();
            let expected = 2.0 * dist.cdf(-r.t_statistic.abs());
            assert!(
                (r.p_value - expected).abs() < 1e-6,
                "case {case}: p {} vs reference {expected}",
                r.p_value
            );
        }
    }

    // ---- rank correlation ----

    #[test]
    fn monotone_sequences_have_unit_rank_correlation() {
        let a = [1.0, 2.0, 5.0, 9.0];
        let b = [0.1, 0.4, 0.5, 3.0];
        assert!((spearman(&a, &b).unwrap() - 1.0).abs() < 1e-12);
        let rev: Vec<f64> = b.iter().rev().copied().collect();
        assert!((spearman(&a, &rev).unwrap() + 1.0).abs() < 1e-12);
    }

    #[test]
    fn tied_values_share_average_ranks() {
        // a = [1, 2, 2, 3] → ranks [1, 2.5, 2.5, 4]; b matches the same
        // pattern, so the correlation is exactly 1.
        let a = [1.0, 2.0, 2.0, 3.0];
        let b = [10.0, 20.0, 20.0, 40.0];
        assert!((spearman(&a, &b).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn hand_computed_three_point_case() {
        // ranks a = [1,2,3], b = [3,1,2]: covariance −1, variances 2 → −0.5.
        let a = [1.0, 2.0, 3.0];
        let b = [30.0, 10.0, 20.0];
        assert!((spearman(&a, &b).unwrap() + 0.5).abs() < 1e-12);
    }

    #[test]
    fn degenerate_rank_inputs_are_rejected() {
        assert!(matches!(
            spearman(&[1.0, 2.0], &[1.0]),
            Err(EvalError::LengthMismatch { .. })
        ));
        assert!(matches!(
            spearman(&[2.0, 2.0], &[1.0, 3.0]),
            Err(EvalError::ZeroVariance)
        ));
    }

    // ---- sweep and study ----

    use crate::attacks::AttackConfig;
    use crate::training::TrainConfig;

    /// Separable toy split: each class is a bright block in its own corner.
    fn toy_classification_split(
        classes: usize,
        train_per_class: usize,
        test_per_class: usize,
        seed: u64,
    ) -> (LabeledDataset, LabeledDataset) {
        const CORNERS: [(usize, usize); 4] = [(2, 2), (2, 16), (16, 2), (16, 16)];
        assert!(classes <= CORNERS.len());
        let mut rng = substream(seed, "sweep-toy");
        let mut make = |per: usize, name: &str| {
            let n = per * classes;
            let mut values = Vec::with_capacity(n * 28 * 28);
            let mut labels = Vec::with_capacity(n);
            for i in 0..n {
                let class = i % classes;
                let (top, left) = CORNERS[class];
                for r in 0..28 {
                    for c in 0..28 {
                        let inside =
                            (top..top + 10).contains(&r) && (left..left + 10).contains(&c);
                        let base: f32 = if inside { 0.9 } else { 0.1 };
                        values.push((base + rng.gen_range(-0.05..0.05)).clamp(0.0, 1.0));
                    }
                }
                labels.push(class);
            }
            let images = Tensor::new(&[n, 1, 28, 28], values).unwrap();
            LabeledDataset::new(name, images, labels, classes).unwrap()
        };
        (
            make(train_per_class, "sweep-train"),
            make(test_per_class, "sweep-test"),
        )
    }

    fn toy_patch_pipeline(seed: u64) -> PipelineConfig {
        PipelineConfig {
            attack: AttackConfig::patch_corner(0),
            target_class: 0,
            donor_class: 1,
            poison_ratio: 0.0,
            train: TrainConfig {
                epochs: 1,
                batch_size: 8,
                learning_rate: 0.05,
            },
            seed,
            ..PipelineConfig::default()
        }
    }

    #[test]
    fn sweep_produces_one_cell_per_ratio_seed_pair() {
        let (train, test) = toy_classification_split(2, 16, 8, 1);
        let base = toy_patch_pipeline(0);
        let table = run_sweep(&train, &test, &base, &[0.0, 0.5], &[1, 2]).unwrap();
        assert_eq!(table.cells.len(), 4);
        assert_eq!(table.summary.len(), 2);
        assert!(table.cells.iter().all(|c| c.error.is_none()));
        assert!(table.summary.iter().all(|s| s.cells == 2));
        // Means really are the means of the matching cells.
        let ratio_cells: Vec<&SweepCell> =
            table.cells.iter().filter(|c| c.ratio == 0.5).collect();
        let mean = (ratio_cells[0].asr + ratio_cells[1].asr) / 2.0;
        assert!((table.summary[1].mean_asr - mean).abs() < 1e-12);
    }

    #[test]
    fn sweep_keeps_duplicate_ratios_and_rejects_unsorted_ones() {
        let (train, test) = toy_classification_split(2, 12, 6, 2);
        let base = toy_patch_pipeline(0);
        let table = run_sweep(&train, &test, &base, &[0.25, 0.25], &[1]).unwrap();
        assert_eq!(table.cells.len(), 2);
        assert_eq!(table.summary.len(), 2);
        assert_eq!(table.cells[0].asr, table.cells[1].asr);

        assert!(matches!(
            run_sweep(&train, &test, &base, &[0.5, 0.25], &[1]),
            Err(EvalError::Protocol { .. })
        ));
        assert!(matches!(
            run_sweep(&train, &test, &base, &[], &[1]),
            Err(EvalError::Protocol { .. })
        ));
    }

    #[test]
    fn sweep_marks_failed_cells_and_continues() {
        let (train, test) = toy_classification_split(2, 12, 6, 3);
        let mut base = toy_patch_pipeline(0);
        // A patch that cannot fit a 28x28 image: every cell fails at the
        // craft or trigger stage, but the sweep still returns a table.
        base.attack.patch = Some(
            crate::attacks::PatchSpec::new(vec![1.0; 28 * 28], 28, 28, 5, 5).unwrap(),
        );
        let table = run_sweep(&train, &test, &base, &[0.0, 0.5], &[1]).unwrap();
        assert_eq!(table.cells.len(), 2);
        for cell in &table.cells {
            assert!(cell.error.is_some());
            assert!(cell.asr.is_nan());
        }
        assert!(table.summary.iter().all(|s| s.cells == 0));
        assert!(table.summary.iter().all(|s| s.mean_asr.is_nan()));
    }

    #[test]
    fn parallel_sweep_metrics_match_the_serial_sweep() {
        let (train, test) = toy_classification_split(2, 12, 6, 7);
        let base = toy_patch_pipeline(0);
        let serial = run_sweep(&train, &test, &base, &[0.0, 0.5], &[1, 2]).unwrap();
        let parallel =
            run_sweep_parallel(&train, &test, &base, &[0.0, 0.5], &[1, 2], 2).unwrap();
        assert_eq!(serial.cells.len(), parallel.cells.len());
        for (s, p) in serial.cells.iter().zip(&parallel.cells) {
            assert_eq!(s.ratio, p.ratio);
            assert_eq!(s.seed, p.seed);
            assert_eq!(s.acc_clean, p.acc_clean);
            assert_eq!(s.acc_poisoned, p.acc_poisoned);
            assert_eq!(s.asr, p.asr);
            assert_eq!(s.error, p.error);
        }
        for (s, p) in serial.summary.iter().zip(&parallel.summary) {
            assert_eq!(s.mean_asr, p.mean_asr);
            assert_eq!(s.mean_acc_poisoned, p.mean_acc_poisoned);
            assert_eq!(s.cells, p.cells);
        }
        assert!(matches!(
            run_sweep_parallel(&train, &test, &base, &[0.5], &[1], 0),
            Err(EvalError::Protocol { .. })
        ));
    }

    #[test]
    fn sweep_zero_ratio_rows_report_the_clean_baseline() {
        let (train, test) = toy_classification_split(2, 16, 8, 4);
        let base = toy_patch_pipeline(0);
        let table = run_sweep(&train, &test, &base, &[0.0], &[5]).unwrap();
        let cell = &table.cells[0];
        assert_eq!(cell.acc_poisoned, cell.acc_clean);
        assert!(cell.error.is_none());
    }

    #[test]
    fn sweep_csv_has_the_documented_columns() {
        let table = SweepTable {
            attack: AttackKind::Patch,
            cells: vec![SweepCell {
                attack: AttackKind::Patch,
                ratio: 0.1,
                seed: 3,
                acc_clean: 0.5,
                acc_poisoned: 0.25,
                asr: 1.0,
                wall_seconds: 2.5,
                error: None,
            }],
            summary: vec![],
        };
        let csv = sweep_csv(&table);
        let mut lines = csv.lines();
        assert_eq!(
            lines.next().unwrap(),
            "attack,ratio,seed,acc_clean,acc_poisoned,asr,wall_seconds"
        );
        assert_eq!(lines.next().unwrap(), "patch,0.1,3,0.5,0.25,1,2.5");
    }

    #[test]
    fn study_emits_one_row_per_donor_in_order() {
        let (train, test) = toy_classification_split(4, 24, 8, 5);
        let base = PipelineConfig {
            poison_ratio: 0.3,
            train: TrainConfig {
                epochs: 3,
                batch_size: 8,
                learning_rate: 0.05,
            },
            ..toy_patch_pipeline(9)
        };
        let table = interclass_study(&train, &test, &base, &[1, 2, 3]).unwrap();
        assert_eq!(table.target_class, 0);
        assert_eq!(table.rows.len(), 3);
        for (row, &donor) in table.rows.iter().zip(&[1usize, 2, 3]) {
            assert_eq!(row.donor_class, donor);
            assert!((0.0..=1.0).contains(&row.similarity));
            assert!((0.0..=1.0).contains(&row.asr));
        }

        let csv = study_csv(&table);
        assert!(csv.starts_with("donor_class,similarity,asr\n"));
        assert_eq!(csv.lines().count(), 4);
    }

    #[test]
    fn study_rejects_degenerate_donor_sets() {
        let (train, test) = toy_classification_split(4, 8, 4, 6);
        let base = toy_patch_pipeline(1);
        assert!(matches!(
            interclass_study(&train, &test, &base, &[1, 2]),
            Err(EvalError::Protocol { .. })
        ));
        assert!(matches!(
            interclass_study(&train, &test, &base, &[0, 1, 2]),
            Err(EvalError::Protocol { .. })
        ));
    }

    #[test]
    fn logit_populations_match_direct_logit_reads() {
        let images = toy_images(6, 31);
        let a = dataset_with_labels(images, vec![4; 6]);
        let images = toy_images(5, 32);
        let b = dataset_with_labels(images, vec![4; 5]);
        let model = ClassifierModel::new(10, 3);

        let (pa, pb) = target_logit_populations(&model, &a, &b, 4, 4).unwrap();
        assert_eq!(pa.len(), 4);
        assert_eq!(pb.len(), 4);

        let logits = crate::models::classifier_logits(&model, a.images()).unwrap();
        assert_eq!(pa[2], logits.values()[2 * 10 + 4] as f64);

        assert!(matches!(
            target_logit_populations(&model, &a, &b, 10, 4),
            Err(EvalError::ClassOutOfRange { .. })
        ));
    }
}
