//! Anomaly-detection defenses over a suspect training set, plus the
//! filter → retrain → remeasure loop that scores a defense end to end.
//!
//! Two detectors are provided. The autoencoder scan trains a small
//! convolutional autoencoder on the suspect set itself and scores each
//! sample by reconstruction error; samples the model cannot compress
//! well are flagged. The cluster scan extracts hidden-layer features
//! with a classifier trained on the same suspect set, density-clusters
//! each class separately, and flags noise points and undersized
//! clusters. Both emit an [`AnomalyReport`], which
//! [`filter_retrain_evaluate`] turns into before/after metrics by
//! dropping the flagged rows and retraining from scratch with the same
//! recipe and seed.

use std::cmp::Ordering;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::data::{DataError, LabeledDataset, PoisonedDataset};
use crate::eval::{compute_acc, compute_asr, EvalError};
use crate::models::{extract_features, reconstruct, ClassifierModel, ModelError};
use crate::training::{train_autoencoder, train_classifier, TrainConfig, TrainError};

/// Bottleneck width of the scan autoencoder.
pub const AE_BOTTLENECK: usize = 16;
/// Batch size used when training the scan autoencoder.
pub const AE_BATCH: usize = 128;
/// Learning rate used when training the scan autoencoder.
pub const AE_LEARNING_RATE: f32 = 1e-3;
/// Default fraction flagged by the quantile threshold rule.
pub const DEFAULT_QUANTILE_FRACTION: f64 = 0.05;
/// Default sigma multiplier for the mean-plus-sigma threshold rule.
pub const DEFAULT_SIGMA_K: f64 = 2.0;
/// Default DBSCAN neighborhood size.
pub const DEFAULT_MIN_PTS: usize = 4;
/// Default fraction of a class below which a cluster counts as undersized.
pub const DEFAULT_MIN_CLUSTER_FRACTION: f64 = 0.15;
/// Smallest eps the k-distance heuristic will emit. A floor keeps a class
/// of exactly repeated feature vectors (k-distances all zero) clustered
/// as one dense group instead of tripping the eps > 0 precondition.
const EPS_FLOOR: f64 = 1e-12;

/// Errors from the defense pipeline.
#[derive(Debug)]
pub enum DefenseError {
    /// An underlying training run failed.
    Train(TrainError),
    /// A model forward pass failed.
    Model(ModelError),
    /// Dataset surgery (subsetting) failed.
    Data(DataError),
    /// A metric computation failed.
    Eval(EvalError),
    /// A parameter is out of its valid range.
    Config { detail: String },
    /// The report does not cover the dataset row for row.
    MisalignedReport { expected: usize, got: usize },
    /// An anomaly score came out non-finite.
    NonFiniteScore { index: usize },
    /// The filter removed every training sample; nothing left to retrain on.
    AllSamplesRemoved { total: usize },
}

impl fmt::Display for DefenseError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DefenseError::Train(e) => write!(f, "defense training failed: {e}"),
            DefenseError::Model(e) => write!(f, "defense model evaluation failed: {e}"),
            DefenseError::Data(e) => write!(f, "defense dataset handling failed: {e}"),
            DefenseError::Eval(e) => write!(f, "defense metric computation failed: {e}"),
            DefenseError::Config { detail } => write!(f, "bad defense parameter: {detail}"),
            DefenseError::MisalignedReport { expected, got } => write!(
                f,
                "anomaly report covers {got} samples but the dataset has {expected}"
            ),
            DefenseError::NonFiniteScore { index } => {
                write!(f, "anomaly score for sample {index} is not finite")
            }
            DefenseError::AllSamplesRemoved { total } => {
                write!(f, "all {total} training samples were flagged; cannot retrain")
            }
        }
    }
}

impl std::error::Error for DefenseError {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            DefenseError::Train(e) => Some(e),
            DefenseError::Model(e) => Some(e),
            DefenseError::Data(e) => Some(e),
            DefenseError::Eval(e) => Some(e),
            _ => None,
        }
    }
}

impl From<TrainError> for DefenseError {
    fn from(e: TrainError) -> Self {
        DefenseError::Train(e)
    }
}

impl From<ModelError> for DefenseError {
    fn from(e: ModelError) -> Self {
        DefenseError::Model(e)
    }
}

impl From<DataError> for DefenseError {
    fn from(e: DataError) -> Self {
        DefenseError::Data(e)
    }
}

impl From<EvalError> for DefenseError {
    fn from(e: EvalError) -> Self {
        DefenseError::Eval(e)
    }
}

/// Which detector produced an [`AnomalyReport`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DetectionMethod {
    Autoencoder,
    Dbscan,
}

impl fmt::Display for DetectionMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DetectionMethod::Autoencoder => write!(f, "autoencoder"),
            DetectionMethod::Dbscan => write!(f, "dbscan"),
        }
    }
}

/// How to turn a vector of anomaly scores into a flag per sample.
///
/// `Quantile` flags exactly `round(fraction * n)` samples: the highest
/// scorers under a stable descending sort, so when scores tie at the
/// cutoff the earlier rows win and the flagged volume stays predictable.
/// The reported threshold is the largest unflagged score; whenever the
/// cutoff falls between two distinct scores, `flagged[i]` is exactly
/// `scores[i] > threshold`.
///
/// `MeanSigma` flags every score at or above `mean + k * sigma`, with
/// `sigma` the population standard deviation. The comparison is `>=`, so
/// a sample sitting exactly on the boundary counts as anomalous.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case")]
pub enum ThresholdRule {
    Quantile { fraction: f64 },
    MeanSigma { k: f64 },
}

impl Default for ThresholdRule {
    fn default() -> Self {
        ThresholdRule::Quantile {
            fraction: DEFAULT_QUANTILE_FRACTION,
        }
    }
}

impl ThresholdRule {
    /// Apply the rule to finite scores, yielding the reported threshold
    /// and the per-sample flags.
    fn apply(&self, scores: &[f64]) -> Result<(f64, Vec<bool>), DefenseError> {
        if scores.is_empty() {
            return Err(DefenseError::Config {
                detail: "cannot threshold an empty score vector".to_string(),
            });
        }
        match *self {
            ThresholdRule::Quantile { fraction } => {
                if !fraction.is_finite() || !(0.0..=1.0).contains(&fraction) {
                    return Err(DefenseError::Config {
                        detail: format!("quantile fraction must lie in [0, 1], got {fraction}"),
                    });
                }
                let n = scores.len();
                let k = ((fraction * n as f64).round() as usize).min(n);
                let mut order: Vec<usize> = (0..n).collect();
                order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
                let mut flagged = vec![false; n];
                for &i in &order[..k] {
                    flagged[i] = true;
                }
                let threshold = if k == n {
                    // Everything is flagged; report a boundary strictly
                    // below the smallest score.
                    scores[order[n - 1]] - 1.0
                } else {
                    // The largest unflagged score.
                    scores[order[k]]
                };
                Ok((threshold, flagged))
            }
            ThresholdRule::MeanSigma { k } => {
                if !k.is_finite() || k < 0.0 {
                    return Err(DefenseError::Config {
                        detail: format!("sigma multiplier must be finite and >= 0, got {k}"),
                    });
                }
                let n = scores.len() as f64;
                let mean = scores.iter().sum::<f64>() / n;
                let var = scores.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>() / n;
                let threshold = mean + k * var.sqrt();
                let flagged = scores.iter().map(|&s| s >= threshold).collect();
                Ok((threshold, flagged))
            }
        }
    }
}

/// Outcome of one detector run over a suspect training set.
///
/// `scores`, `flagged`, and the dataset are aligned row for row. For the
/// autoencoder detector the score is the per-sample mean squared
/// reconstruction error and `flagged` follows the [`ThresholdRule`]
/// conventions. For the cluster detector the flag is structural (noise
/// point or undersized cluster); the score is recorded as the 0/1
/// indicator of that flag with a fixed threshold of 0.5, so the
/// `flagged[i] == (scores[i] > threshold)` reading holds there too.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AnomalyReport {
    pub method: DetectionMethod,
    pub scores: Vec<f64>,
    pub threshold: f64,
    pub flagged: Vec<bool>,
}

impl AnomalyReport {
    /// Number of flagged samples.
    pub fn flagged_count(&self) -> usize {
        self.flagged.iter().filter(|&&f| f).count()
    }
}

/// Train an autoencoder on the suspect set itself and score every sample
/// by mean squared reconstruction error.
///
/// The training pass is a pure function of the sample *multiset*: rows
/// are fed to the trainer in a canonical content order (sorted bytewise),
/// so shuffling the dataset permutes the scores and changes nothing
/// else. Scores are reported in the dataset's own row order.
pub fn autoencoder_scan(
    train_set: &PoisonedDataset,
    ae_epochs: usize,
    rule: &ThresholdRule,
    seed: u64,
) -> Result<AnomalyReport, DefenseError> {
    let dataset = &train_set.data;
    let mut canonical: Vec<usize> = (0..dataset.len()).collect();
    canonical.sort_by(|&a, &b| compare_images(dataset.image(a), dataset.image(b)));
    let reordered = dataset.subset(&canonical)?;
    let (model, _) = train_autoencoder(
        &reordered,
        AE_BOTTLENECK,
        ae_epochs,
        AE_BATCH,
        AE_LEARNING_RATE,
        seed,
    )?;

    let recon = reconstruct(&model, dataset.images())?;
    let per = dataset.image_numel();
    let mut scores = Vec::with_capacity(dataset.len());
    for i in 0..dataset.len() {
        let x = dataset.image(i);
        let r = &recon.values()[i * per..(i + 1) * per];
        let mse = x
            .iter()
            .zip(r)
            .map(|(&a, &b)| {
                let d = a as f64 - b as f64;
                d * d
            })
            .sum::<f64>()
            / per as f64;
        if !mse.is_finite() {
            return Err(DefenseError::NonFiniteScore { index: i });
        }
        scores.push(mse);
    }

    let (threshold, flagged) = rule.apply(&scores)?;
    Ok(AnomalyReport {
        method: DetectionMethod::Autoencoder,
        scores,
        threshold,
        flagged,
    })
}

/// Lexicographic order over raw pixel values.
fn compare_images(a: &[f32], b: &[f32]) -> Ordering {
    for (x, y) in a.iter().zip(b) {
        match x.total_cmp(y) {
            Ordering::Equal => continue,
            other => return other,
        }
    }
    a.len().cmp(&b.len())
}

/// Per-point cluster assignment from density clustering; `None` is noise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterLabels {
    pub assignments: Vec<Option<usize>>,
    pub eps: f64,
    pub min_pts: usize,
}

impl ClusterLabels {
    /// Number of distinct clusters.
    pub fn num_clusters(&self) -> usize {
        self.assignments
            .iter()
            .filter_map(|a| *a)
            .max()
            .map_or(0, |m| m + 1)
    }

    /// Number of noise points.
    pub fn noise_count(&self) -> usize {
        self.assignments.iter().filter(|a| a.is_none()).count()
    }
}

/// Standard density clustering over feature vectors.
///
/// A point is a core point when at least `min_pts` points (itself
/// included) lie within Euclidean distance `eps` of it. Clusters are the
/// connected components of the core points under the eps-neighborhood
/// relation; a non-core point within eps of a core point joins the
/// cluster of its lowest-index core neighbor; everything else is noise.
/// Cluster ids are canonical: clusters are numbered by their smallest
/// member index, so the output is independent of visit order.
pub fn dbscan_cluster(
    points: &[Vec<f32>],
    eps: f64,
    min_pts: usize,
) -> Result<ClusterLabels, DefenseError> {
    if !eps.is_finite() || eps <= 0.0 {
        return Err(DefenseError::Config {
            detail: format!("eps must be finite and positive, got {eps}"),
        });
    }
    if min_pts == 0 {
        return Err(DefenseError::Config {
            detail: "min_pts must be at least 1".to_string(),
        });
    }
    let n = points.len();
    if n == 0 {
        return Ok(ClusterLabels {
            assignments: Vec::new(),
            eps,
            min_pts,
        });
    }
    let dim = points[0].len();
    for (i, p) in points.iter().enumerate() {
        if p.len() != dim {
            return Err(DefenseError::Config {
                detail: format!(
                    "point {i} has dimension {} but point 0 has {dim}",
                    p.len()
                ),
            });
        }
        if p.iter().any(|v| !v.is_finite()) {
            return Err(DefenseError::Config {
                detail: format!("point {i} has a non-finite coordinate"),
            });
        }
    }

    let eps2 = eps * eps;
    let neighbors: Vec<Vec<usize>> = (0..n)
        .map(|i| {
            (0..n)
                .filter(|&j| squared_distance(&points[i], &points[j]) <= eps2)
                .collect()
        })
        .collect();
    let core: Vec<bool> = neighbors.iter().map(|ns| ns.len() >= min_pts).collect();

    let mut dsu = Dsu::new(n);
    for i in 0..n {
        if !core[i] {
            continue;
        }
        for &j in &neighbors[i] {
            if core[j] {
                dsu.union(i, j);
            }
        }
    }

    // Root of each point's cluster, or None for noise. Borders attach to
    // the component of their lowest-index core neighbor.
    let mut roots: Vec<Option<usize>> = vec![None; n];
    for i in 0..n {
        if core[i] {
            roots[i] = Some(dsu.find(i));
        } else if let Some(&c) = neighbors[i].iter().find(|&&j| core[j]) {
            roots[i] = Some(dsu.find(c));
        }
    }

    // Renumber components by smallest member index.
    let mut first_member: Vec<(usize, usize)> = Vec::new(); // (min member, root)
    for i in 0..n {
        if let Some(r) = roots[i] {
            if !first_member.iter().any(|&(_, root)| root == r) {
                first_member.push((i, r));
            }
        }
    }
    first_member.sort_by_key(|&(min_member, _)| min_member);
    let assignments = roots
        .iter()
        .map(|r| {
            r.map(|root| {
                first_member
                    .iter()
                    .position(|&(_, rt)| rt == root)
                    .expect("every assigned root was recorded")
            })
        })
        .collect();

    Ok(ClusterLabels {
        assignments,
        eps,
        min_pts,
    })
}

/// Squared Euclidean distance accumulated in f64.
fn squared_distance(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum()
}

/// Disjoint-set forest with path halving.
struct Dsu {
    parent: Vec<usize>,
}

impl Dsu {
    fn new(n: usize) -> Self {
        Dsu {
            parent: (0..n).collect(),
        }
    }

    fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    fn union(&mut self, a: usize, b: usize) {
        let ra = self.find(a);
        let rb = self.find(b);
        if ra != rb {
            // Attach the larger root under the smaller so the root stays
            // the component's smallest core index.
            let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
            self.parent[hi] = lo;
        }
    }
}

/// How the cluster scan picks eps for each class.
///
/// `KDistanceQuantile` is the k-distance heuristic: for every point take
/// the distance to its `min_pts`-th nearest neighbor (itself included),
/// then use the given quantile of those distances (nearest-rank) as eps.
/// `Fixed` uses the same eps for every class.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case")]
pub enum EpsRule {
    KDistanceQuantile { quantile: f64 },
    Fixed { value: f64 },
}

impl Default for EpsRule {
    fn default() -> Self {
        EpsRule::KDistanceQuantile { quantile: 0.90 }
    }
}

/// Cluster each class's hidden-layer features and flag noise points and
/// undersized clusters.
///
/// `classifier` should be the model trained on the suspect set itself —
/// the defender has no clean model to borrow. A cluster is undersized
/// when its size is strictly below `min_cluster_fraction` of its class.
/// The report's scores are the 0/1 indicators of the flags.
pub fn cluster_scan(
    train_set: &PoisonedDataset,
    classifier: &ClassifierModel,
    eps_rule: &EpsRule,
    min_pts: usize,
    min_cluster_fraction: f64,
) -> Result<AnomalyReport, DefenseError> {
    if min_pts == 0 {
        return Err(DefenseError::Config {
            detail: "min_pts must be at least 1".to_string(),
        });
    }
    if !min_cluster_fraction.is_finite() || !(0.0..=1.0).contains(&min_cluster_fraction) {
        return Err(DefenseError::Config {
            detail: format!(
                "min_cluster_fraction must lie in [0, 1], got {min_cluster_fraction}"
            ),
        });
    }
    if let EpsRule::KDistanceQuantile { quantile } = *eps_rule {
        if !quantile.is_finite() || !(0.0..=1.0).contains(&quantile) {
            return Err(DefenseError::Config {
                detail: format!("k-distance quantile must lie in [0, 1], got {quantile}"),
            });
        }
    }

    let dataset = &train_set.data;
    let features = extract_features(classifier, dataset.images())?;
    let dim = if dataset.is_empty() {
        0
    } else {
        features.numel() / dataset.len()
    };

    let mut flagged = vec![false; dataset.len()];
    for class in 0..dataset.num_classes() {
        let rows: Vec<usize> = (0..dataset.len())
            .filter(|&i| dataset.labels()[i] == class)
            .collect();
        if rows.is_empty() {
            continue;
        }
        let points: Vec<Vec<f32>> = rows
            .iter()
            .map(|&i| features.values()[i * dim..(i + 1) * dim].to_vec())
            .collect();
        let eps = match *eps_rule {
            EpsRule::Fixed { value } => {
                if !value.is_finite() || value <= 0.0 {
                    return Err(DefenseError::Config {
                        detail: format!("fixed eps must be finite and positive, got {value}"),
                    });
                }
                value
            }
            EpsRule::KDistanceQuantile { quantile } => {
                k_distance_eps(&points, min_pts, quantile)
            }
        };
        let labels = dbscan_cluster(&points, eps, min_pts)?;

        let num_clusters = labels.num_clusters();
        let mut sizes = vec![0usize; num_clusters];
        for a in labels.assignments.iter().flatten() {
            sizes[*a] += 1;
        }
        let min_size = min_cluster_fraction * rows.len() as f64;
        for (&row, assignment) in rows.iter().zip(&labels.assignments) {
            flagged[row] = match assignment {
                None => true,
                Some(c) => (sizes[*c] as f64) < min_size,
            };
        }
    }

    let scores: Vec<f64> = flagged.iter().map(|&f| if f { 1.0 } else { 0.0 }).collect();
    Ok(AnomalyReport {
        method: DetectionMethod::Dbscan,
        scores,
        threshold: 0.5,
        flagged,
    })
}

/// eps from the k-distance heuristic: the given nearest-rank quantile of
/// every point's distance to its `min_pts`-th nearest neighbor (itself
/// included), floored at a tiny positive value so exact-duplicate
/// classes still cluster.
fn k_distance_eps(points: &[Vec<f32>], min_pts: usize, quantile: f64) -> f64 {
    let n = points.len();
    let mut k_dists: Vec<f64> = (0..n)
        .map(|i| {
            let mut dists: Vec<f64> = (0..n)
                .map(|j| squared_distance(&points[i], &points[j]).sqrt())
                .collect();
            dists.sort_by(f64::total_cmp);
            dists[min_pts.min(n) - 1]
        })
        .collect();
    k_dists.sort_by(f64::total_cmp);
    let idx = ((n - 1) as f64 * quantile).round() as usize;
    k_dists[idx.min(n - 1)].max(EPS_FLOOR)
}

/// Everything needed to measure a defense's effect: the models and data
/// the before/after metrics are computed against, and the exact recipe
/// for the retraining run.
pub struct EvalBundle<'a> {
    /// Model trained on the full suspect set (the undefended baseline).
    pub poisoned_model: &'a ClassifierModel,
    /// Clean reference model that decides which triggers count.
    pub clean_reference: &'a ClassifierModel,
    /// Held-out set for accuracy.
    pub test_set: &'a LabeledDataset,
    /// Trigger set for attack success.
    pub trigger_set: &'a LabeledDataset,
    /// Class the attack redirects triggers to.
    pub target_class: usize,
    /// Recipe for the post-filter retraining run.
    pub train_config: &'a TrainConfig,
    /// Seed for the post-filter retraining run.
    pub train_seed: u64,
}

/// Before/after picture of one defense run.
///
/// Precision and recall are measured against the ground-truth poison
/// mask. Degenerate cases follow the usual conventions: with nothing
/// flagged precision is 1 (no false accusations), and with nothing
/// poisoned recall is 1 (nothing was missed).
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct DefenseOutcome {
    pub asr_before: f64,
    pub asr_after: f64,
    pub acc_before: f64,
    pub acc_after: f64,
    pub detection_precision: f64,
    pub detection_recall: f64,
    pub removed_count: usize,
}

/// Drop the flagged rows, retrain from scratch with the bundle's recipe
/// and seed, and measure accuracy and attack success before and after.
///
/// With an empty flag vector the retraining run sees the identical
/// dataset, recipe, and seed, so the after metrics equal the before
/// metrics exactly.
pub fn filter_retrain_evaluate(
    train_set: &PoisonedDataset,
    report: &AnomalyReport,
    bundle: &EvalBundle<'_>,
) -> Result<DefenseOutcome, DefenseError> {
    let n = train_set.data.len();
    if report.flagged.len() != n {
        return Err(DefenseError::MisalignedReport {
            expected: n,
            got: report.flagged.len(),
        });
    }

    let acc_before = compute_acc(bundle.poisoned_model, bundle.test_set)?.acc;
    let asr_before = compute_asr(
        bundle.poisoned_model,
        bundle.clean_reference,
        bundle.trigger_set,
        bundle.target_class,
    )?
    .asr;

    let kept: Vec<usize> = (0..n).filter(|&i| !report.flagged[i]).collect();
    if kept.is_empty() {
        return Err(DefenseError::AllSamplesRemoved { total: n });
    }
    let filtered = train_set.data.subset(&kept)?;
    let (retrained, _) = train_classifier(&filtered, bundle.train_config, bundle.train_seed)?;

    let acc_after = compute_acc(&retrained, bundle.test_set)?.acc;
    let asr_after = compute_asr(
        &retrained,
        bundle.clean_reference,
        bundle.trigger_set,
        bundle.target_class,
    )?
    .asr;

    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut fnn = 0usize;
    for (&f, &poisoned) in report.flagged.iter().zip(&train_set.poison_mask) {
        match (f, poisoned) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fnn += 1,
            (false, false) => {}
        }
    }
    let detection_precision = if tp + fp == 0 {
        1.0
    } else {
        tp as f64 / (tp + fp) as f64
    };
    let detection_recall = if tp + fnn == 0 {
        1.0
    } else {
        tp as f64 / (tp + fnn) as f64
    };

    Ok(DefenseOutcome {
        asr_before,
        asr_after,
        acc_before,
        acc_after,
        detection_precision,
        detection_recall,
        removed_count: tp + fp,
    })
}
