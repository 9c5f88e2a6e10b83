//! Experiment runner: JSON-configured commands binding data loading,
//! poison crafting, training, filtering defenses, and evaluation into
//! reproducible runs.
//!
//! Every command resolves one [`ExperimentConfig`], derives all
//! randomness from its root seed through named substreams, writes its
//! artifacts under `<out_dir>/<command>/`, and finishes with a
//! `manifest.json` ([`RunManifest`]) listing every file it emitted.
//! Identical configs produce identical metrics, checkpoints, and tables;
//! only wall-clock timings differ between repeats.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attacks::{AttackConfig, AttackKind, PatchSpec};
use crate::checkpoint::{load_json, save_json, save_params, CheckpointError};
use crate::data::{load_idx, DataError, DatasetManifest, LabeledDataset, RatioBasis};
use crate::defenses::{AnomalyReport, DefenseOutcome};
use crate::eval::{
    compute_acc, interclass_study, run_sweep, run_sweep_parallel, spearman, study_csv,
    sweep_csv, target_logit_populations, ttest_two_sample, EvalError, MetricsReport, StudyTable,
    SweepTable,
};
use crate::models::{ModelError, Parameterized};
use crate::pipeline::{
    run_pipeline, DefenseSpec, PipelineConfig, PipelineError, PipelineRun,
};
use crate::report::{
    comparison_grid, image_grid, save_png, save_text, svg_line_chart, ChartSeries, ReportError,
};
use crate::rng::substream_seed;
use crate::tensor::Tensor;
use crate::training::{train_classifier, TrainConfig, TrainError};

/// Environment variable naming the dataset root directory.
pub const DATA_ENV: &str = "POISONFORGE_DATA";

/// Checkpoint container tag written by the parameter store.
const CHECKPOINT_FORMAT: &str = "PFW1";
/// Version of the config schema a manifest was written against.
const CONFIG_SCHEMA: u32 = 1;

// ---- errors ----

#[derive(Debug)]
pub enum RunnerError {
    Io {
        path: String,
        source: std::io::Error,
    },
    /// A JSON file failed to parse.
    Json {
        path: String,
        detail: String,
    },
    Config {
        detail: String,
    },
    Data(DataError),
    Train(TrainError),
    Model(ModelError),
    Pipeline(PipelineError),
    Eval(EvalError),
    Checkpoint(CheckpointError),
    Report(ReportError),
}

impl fmt::Display for RunnerError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RunnerError::Io { path, source } => write!(f, "io error on {path}: {source}"),
            RunnerError::Json { path, detail } => write!(f, "bad json in {path}: {detail}"),
            RunnerError::Config { detail } => write!(f, "bad config: {detail}"),
            RunnerError::Data(e) => write!(f, "data error: {e}"),
            RunnerError::Train(e) => write!(f, "training error: {e}"),
            RunnerError::Model(e) => write!(f, "model error: {e}"),
            RunnerError::Pipeline(e) => write!(f, "run failed: {e}"),
            RunnerError::Eval(e) => write!(f, "evaluation error: {e}"),
            RunnerError::Checkpoint(e) => write!(f, "checkpoint error: {e}"),
            RunnerError::Report(e) => write!(f, "report error: {e}"),
        }
    }
}

impl std::error::Error for RunnerError {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            RunnerError::Io { source, .. } => Some(source),
            RunnerError::Data(e) => Some(e),
            RunnerError::Train(e) => Some(e),
            RunnerError::Model(e) => Some(e),
            RunnerError::Pipeline(e) => Some(e),
            RunnerError::Eval(e) => Some(e),
            RunnerError::Checkpoint(e) => Some(e),
            RunnerError::Report(e) => Some(e),
            _ => None,
        }
    }
}

macro_rules! from_error {
    ($variant:ident, $source:ty) => {
        impl From<$source> for RunnerError {
            fn from(e: $source) -> Self {
                RunnerError::$variant(e)
            }
        }
    };
}

from_error!(Data, DataError);
from_error!(Train, TrainError);
from_error!(Model, ModelError);
from_error!(Pipeline, PipelineError);
from_error!(Eval, EvalError);
from_error!(Checkpoint, CheckpointError);
from_error!(Report, ReportError);

// ---- configuration ----

/// Where the IDX dataset files live and how much of them to use.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    /// Dataset root; when absent, the `POISONFORGE_DATA` environment
    /// variable applies, then `data/mnist`.
    pub root: Option<String>,
    pub train_images: String,
    pub train_labels: String,
    pub test_images: String,
    pub test_labels: String,
    /// Keep only the first N training rows (the full set when absent);
    /// the rows used are recorded in the dataset manifest counts.
    pub train_cap: Option<usize>,
    pub test_cap: Option<usize>,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            root: None,
            train_images: "train-images-idx3-ubyte".to_string(),
            train_labels: "train-labels-idx1-ubyte".to_string(),
            test_images: "t10k-images-idx3-ubyte".to_string(),
            test_labels: "t10k-labels-idx1-ubyte".to_string(),
            train_cap: None,
            test_cap: None,
        }
    }
}

/// Resolve the dataset root: explicit config beats the environment,
/// which beats the `data/mnist` default.
pub fn resolve_data_root(data: &DataConfig) -> PathBuf {
    if let Some(root) = &data.root {
        return PathBuf::from(root);
    }
    match std::env::var(DATA_ENV) {
        Ok(v) if !v.is_empty() => PathBuf::from(v),
        _ => PathBuf::from("data/mnist"),
    }
}

/// The full, serializable description of one experiment.  The SHA-256 of
/// its canonical JSON serialization identifies the run.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub data: DataConfig,
    pub train: TrainConfig,
    pub attack: AttackConfig,
    /// Label the attack teaches the model to emit (t).
    pub target_class: usize,
    /// Class whose features the poisons carry (s).
    pub donor_class: usize,
    pub poison_ratio: f64,
    pub ratio_basis: RatioBasis,
    /// Filtering defense for `defend`; `null` runs no defense.
    pub defense: Option<DefenseSpec>,
    pub sweep_ratios: Vec<f64>,
    pub sweep_seeds: Vec<u64>,
    pub study_donors: Vec<usize>,
    pub trigger_cap: usize,
    pub gan_pool_cap: usize,
    /// Per-population cap for the logit t-test in `report`.
    pub logit_cap: usize,
    pub seed: u64,
    pub out_dir: String,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            data: DataConfig::default(),
            train: TrainConfig::default(),
            attack: AttackConfig::default(),
            target_class: 4,
            donor_class: 9,
            poison_ratio: 0.07,
            ratio_basis: RatioBasis::TargetClassSubset,
            defense: None,
            sweep_ratios: vec![0.01, 0.03, 0.05, 0.07, 0.10],
            sweep_seeds: vec![0, 1, 2],
            study_donors: vec![0, 1, 5, 7, 9],
            trigger_cap: 1000,
            gan_pool_cap: 1024,
            logit_cap: 256,
            seed: 0,
            out_dir: "runs".to_string(),
        }
    }
}

impl ExperimentConfig {
    /// SHA-256 of the canonical JSON serialization.
    pub fn config_hash(&self) -> String {
        let canonical = serde_json::to_string(self).expect("config serializes");
        let mut hasher = Sha256::new();
        hasher.update(canonical.as_bytes());
        format!("{:x}", hasher.finalize())
    }

    /// The pipeline stage parameters embedded in this config.
    pub fn pipeline(&self) -> PipelineConfig {
        PipelineConfig {
            attack: self.attack.clone(),
            target_class: self.target_class,
            donor_class: self.donor_class,
            poison_ratio: self.poison_ratio,
            ratio_basis: self.ratio_basis,
            train: self.train.clone(),
            trigger_cap: self.trigger_cap,
            gan_pool_cap: self.gan_pool_cap,
            seed: self.seed,
        }
    }

    fn command_dir(&self, command: &str) -> PathBuf {
        PathBuf::from(&self.out_dir).join(command)
    }
}

/// Read a config file, or produce the default config when no path is
/// given.
pub fn load_config(path: Option<&Path>) -> Result<ExperimentConfig, RunnerError> {
    match path {
        None => Ok(ExperimentConfig::default()),
        Some(p) => load_json(p).map_err(|e| RunnerError::Json {
            path: p.display().to_string(),
            detail: e.to_string(),
        }),
    }
}

/// Command-line overrides applied on top of a loaded config.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<String>,
    pub attack: Option<AttackKind>,
    pub ratio: Option<f64>,
}

/// Parse an attack kind name as it appears in configs (snake_case, with
/// kebab-case accepted for convenience).
pub fn parse_attack_kind(name: &str) -> Result<AttackKind, RunnerError> {
    match name.replace('-', "_").as_str() {
        "patch" => Ok(AttackKind::Patch),
        "blend" => Ok(AttackKind::Blend),
        "feature_collision" => Ok(AttackKind::FeatureCollision),
        "deep_poison" => Ok(AttackKind::DeepPoison),
        other => Err(RunnerError::Config {
            detail: format!(
                "unknown attack kind {other:?} (expected patch, blend, \
                 feature_collision, or deep_poison)"
            ),
        }),
    }
}

/// Apply flag overrides.  Switching to an attack kind whose stamp spec
/// is missing fills in the standard stamp so `--attack patch` works
/// without a config file.
pub fn apply_overrides(cfg: &mut ExperimentConfig, overrides: &Overrides) {
    if let Some(seed) = overrides.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &overrides.out {
        cfg.out_dir = out.clone();
    }
    if let Some(ratio) = overrides.ratio {
        cfg.poison_ratio = ratio;
    }
    if let Some(kind) = overrides.attack {
        cfg.attack.kind = kind;
        if kind == AttackKind::Patch && cfg.attack.patch.is_none() {
            cfg.attack.patch = Some(PatchSpec::white_corner());
        }
        if kind == AttackKind::Blend && cfg.attack.watermark.is_none() {
            cfg.attack.watermark = AttackConfig::blend_stripes(cfg.attack.seed).watermark;
        }
    }
}

// ---- manifest ----

/// Format versions of the artifacts a run writes.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ArtifactVersions {
    pub checkpoint_format: String,
    pub config_schema: u32,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StageTime {
    pub stage: String,
    pub seconds: f64,
}

/// What one command run produced: the run identity, how long each stage
/// took, every file written (the manifest itself included), and the
/// final metrics.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config_hash: String,
    pub seed: u64,
    pub artifact_versions: ArtifactVersions,
    pub stages: Vec<StageTime>,
    pub files: Vec<String>,
    pub metrics: Vec<MetricsReport>,
}

/// Collects written files and stage timings for one command run.
struct Emitter {
    dir: PathBuf,
    files: Vec<String>,
    stages: Vec<StageTime>,
}

impl Emitter {
    fn create(dir: &Path) -> Result<Emitter, RunnerError> {
        fs::create_dir_all(dir).map_err(|source| RunnerError::Io {
            path: dir.display().to_string(),
            source,
        })?;
        Ok(Emitter {
            dir: dir.to_path_buf(),
            files: Vec::new(),
            stages: Vec::new(),
        })
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn record(&mut self, path: &Path) {
        self.files.push(path.display().to_string());
    }

    /// Run a timed stage.
    fn stage<T>(
        &mut self,
        name: &str,
        f: impl FnOnce() -> Result<T, RunnerError>,
    ) -> Result<T, RunnerError> {
        let started = Instant::now();
        let value = f()?;
        self.stages.push(StageTime {
            stage: name.to_string(),
            seconds: started.elapsed().as_secs_f64(),
        });
        Ok(value)
    }

    fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<(), RunnerError> {
        let path = self.path(name);
        save_json(&path, value)?;
        self.record(&path);
        Ok(())
    }

    fn write_text(&mut self, name: &str, content: &str) -> Result<(), RunnerError> {
        let path = self.path(name);
        save_text(&path, content)?;
        self.record(&path);
        Ok(())
    }

    fn write_params(
        &mut self,
        name: &str,
        params: &[(&str, &Tensor)],
    ) -> Result<(), RunnerError> {
        let path = self.path(name);
        save_params(&path, params)?;
        self.record(&path);
        Ok(())
    }

    fn write_png(&mut self, name: &str, image: &image::GrayImage) -> Result<(), RunnerError> {
        let path = self.path(name);
        save_png(&path, image)?;
        self.record(&path);
        Ok(())
    }

    /// Write `manifest.json` (listing itself) and hand it back.
    fn finish(
        mut self,
        command: &str,
        config_hash: String,
        seed: u64,
        metrics: Vec<MetricsReport>,
    ) -> Result<RunManifest, RunnerError> {
        let path = self.path("manifest.json");
        self.files.push(path.display().to_string());
        let manifest = RunManifest {
            command: command.to_string(),
            config_hash,
            seed,
            artifact_versions: ArtifactVersions {
                checkpoint_format: CHECKPOINT_FORMAT.to_string(),
                config_schema: CONFIG_SCHEMA,
            },
            stages: self.stages,
            files: self.files,
            metrics,
        };
        save_json(&path, &manifest)?;
        Ok(manifest)
    }
}

// ---- data loading ----

struct LoadedData {
    train: LabeledDataset,
    test: LabeledDataset,
    manifests: Vec<DatasetManifest>,
}

fn capped(set: LabeledDataset, cap: Option<usize>) -> Result<LabeledDataset, DataError> {
    match cap {
        Some(cap) if cap < set.len() => {
            let rows: Vec<usize> = (0..cap).collect();
            set.subset(&rows)
        }
        _ => Ok(set),
    }
}

fn load_split(cfg: &ExperimentConfig) -> Result<LoadedData, RunnerError> {
    let root = resolve_data_root(&cfg.data);
    let train_images = root.join(&cfg.data.train_images);
    let train_labels = root.join(&cfg.data.train_labels);
    let test_images = root.join(&cfg.data.test_images);
    let test_labels = root.join(&cfg.data.test_labels);

    let train = capped(
        load_idx(&train_images, &train_labels, "train")?,
        cfg.data.train_cap,
    )?;
    let test = capped(load_idx(&test_images, &test_labels, "test")?, cfg.data.test_cap)?;

    let manifests = vec![
        DatasetManifest::for_pair("train", &train_images, &train_labels, train.len())?,
        DatasetManifest::for_pair("test", &test_images, &test_labels, test.len())?,
    ];
    Ok(LoadedData {
        train,
        test,
        manifests,
    })
}

// ---- shared artifact helpers ----

/// The three headline measurements of an attack run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttackMetrics {
    pub acc_clean: MetricsReport,
    pub acc_poisoned: MetricsReport,
    pub asr: MetricsReport,
}

/// Provenance of a persisted crafted set: which attack produced it,
/// under which config, from which rows.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CraftManifest {
    pub attack: AttackKind,
    pub config_hash: String,
    pub source_indices: Vec<usize>,
    pub donor_indices: Vec<usize>,
    pub seed: u64,
}

/// The `{t, df, p, n_a, n_b}` JSON shape of an emitted t-test.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TTestArtifact {
    pub t: f64,
    pub df: f64,
    pub p: f64,
    pub n_a: usize,
    pub n_b: usize,
}

/// Perturbation echo of a crafted set: how far the poisons moved from
/// their bases, against the configured budget when one applies.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PerturbationReport {
    pub attack: AttackKind,
    pub crafted: usize,
    pub mean_abs_delta: Option<f64>,
    pub max_abs_delta: Option<f64>,
    /// The elementwise budget, for the budgeted attack kinds.
    pub epsilon: Option<f64>,
    pub within_budget: Option<bool>,
}

fn loss_history_csv(history: &[crate::attacks::LossBreakdown]) -> String {
    let mut out = String::from("step,l_gan,l_fe,l_pert,total\n");
    for row in history {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            row.step, row.l_gan, row.l_fe, row.l_pert, row.total
        ));
    }
    out
}

fn loss_history_chart(history: &[crate::attacks::LossBreakdown]) -> Result<String, ReportError> {
    type Getter = fn(&crate::attacks::LossBreakdown) -> f64;
    let columns: [(&str, Getter); 4] = [
        ("l_gan", |r| r.l_gan),
        ("l_fe", |r| r.l_fe),
        ("l_pert", |r| r.l_pert),
        ("total", |r| r.total),
    ];
    let series: Vec<ChartSeries> = columns
        .into_iter()
        .map(|(name, get)| ChartSeries {
            name: name.to_string(),
            points: history
                .iter()
                .map(|r| (r.step as f64, get(r)))
                .collect(),
        })
        .collect();
    svg_line_chart("crafting losses", "step", "loss", &series)
}

/// First `k` rows of an image batch as their own tensor.
fn head_rows(images: &Tensor, k: usize) -> Tensor {
    let shape = images.shape();
    let n = shape[0].min(k);
    let numel: usize = shape[1..].iter().product();
    let mut head_shape = shape.to_vec();
    head_shape[0] = n;
    Tensor::new(&head_shape, images.values()[..n * numel].to_vec())
        .expect("head slice keeps the batch layout")
}

/// Mean and max `|crafted − base|` over all crafted pixels.
fn perturbation_stats(bases: &Tensor, crafted: &Tensor) -> (f64, f64) {
    let mut sum = 0.0f64;
    let mut max = 0.0f64;
    for (&b, &c) in bases.values().iter().zip(crafted.values()) {
        let d = (c as f64 - b as f64).abs();
        sum += d;
        max = max.max(d);
    }
    let count = crafted.values().len().max(1);
    (sum / count as f64, max)
}

// ---- commands ----

/// Train the clean classifier and write its checkpoint and test report.
pub fn cmd_train_clean(cfg: &ExperimentConfig) -> Result<RunManifest, RunnerError> {
    let hash = cfg.config_hash();
    let mut em = Emitter::create(&cfg.command_dir("train-clean"))?;
    em.write_json("config.json", cfg)?;
    let data = em.stage("load-data", || load_split(cfg))?;
    em.write_json("datasets.json", &data.manifests)?;

    let train_seed = substream_seed(cfg.seed, "train");
    let (model, losses) = em.stage("train", || {
        train_classifier(&data.train, &cfg.train, train_seed).map_err(Into::into)
    })?;
    let metrics = em.stage("evaluate", || {
        compute_acc(&model, &data.test).map_err(Into::into)
    })?;

    em.write_params("clean-model.pfw", &model.params())?;
    em.write_json("metrics.json", &metrics)?;
    let mut csv = String::from("epoch,loss\n");
    for (epoch, loss) in losses.iter().enumerate() {
        csv.push_str(&format!("{epoch},{loss}\n"));
    }
    em.write_text("train-loss.csv", &csv)?;
    let series = [ChartSeries {
        name: "loss".to_string(),
        points: losses
            .iter()
            .enumerate()
            .map(|(e, &l)| (e as f64, l))
            .collect(),
    }];
    if let Ok(svg) = svg_line_chart("training loss", "epoch", "mean batch loss", &series) {
        em.write_text("train-loss.svg", &svg)?;
    }
    em.finish("train-clean", hash, cfg.seed, vec![metrics])
}

fn run_attack_pipeline(
    em: &mut Emitter,
    cfg: &ExperimentConfig,
) -> Result<(LoadedData, PipelineRun), RunnerError> {
    let data = em.stage("load-data", || load_split(cfg))?;
    em.write_json("datasets.json", &data.manifests)?;
    let run = em.stage("pipeline", || {
        run_pipeline(&data.train, &data.test, &cfg.pipeline()).map_err(Into::into)
    })?;
    Ok((data, run))
}

/// Craft poisons, train the poisoned model, and measure accuracy and
/// attack success; persists the crafted set, both model checkpoints,
/// and (for the generative attack) the crafting models and loss curve.
pub fn cmd_attack(cfg: &ExperimentConfig) -> Result<RunManifest, RunnerError> {
    let hash = cfg.config_hash();
    let mut em = Emitter::create(&cfg.command_dir("attack"))?;
    em.write_json("config.json", cfg)?;
    let (_, run) = run_attack_pipeline(&mut em, cfg)?;

    em.write_params(
        "crafted.pfw",
        &[("crafted_images", &run.craft.crafted_images)],
    )?;
    em.write_json(
        "crafted.json",
        &CraftManifest {
            attack: cfg.attack.kind,
            config_hash: hash.clone(),
            source_indices: run.craft.source_rows.clone(),
            donor_indices: run.craft.donor_rows.clone(),
            seed: cfg.seed,
        },
    )?;
    em.write_params("clean-model.pfw", &run.clean_model.params())?;
    em.write_params("poisoned-model.pfw", &run.poisoned_model.params())?;
    if let Some(models) = &run.craft.models {
        em.write_params("generator.pfw", &models.generator.params())?;
        em.write_params("discriminator.pfw", &models.discriminator.params())?;
    }
    em.write_json(
        "metrics.json",
        &AttackMetrics {
            acc_clean: run.acc_clean.clone(),
            acc_poisoned: run.acc_poisoned.clone(),
            asr: run.asr.clone(),
        },
    )?;
    if !run.craft.loss_history.is_empty() {
        em.write_text("craft-loss.csv", &loss_history_csv(&run.craft.loss_history))?;
        if let Ok(svg) = loss_history_chart(&run.craft.loss_history) {
            em.write_text("craft-loss.svg", &svg)?;
        }
    }
    em.finish(
        "attack",
        hash,
        cfg.seed,
        vec![run.acc_clean, run.acc_poisoned, run.asr],
    )
}

fn before_after_csv(outcome: &DefenseOutcome) -> String {
    format!(
        "metric,before,after\nasr,{},{}\nacc,{},{}\n",
        outcome.asr_before, outcome.asr_after, outcome.acc_before, outcome.acc_after
    )
}

/// Re-derive the attack run, scan and filter its training set with the
/// configured defense, retrain, and report before/after metrics.  With
/// no defense configured this is the identity: nothing is removed and
/// the after metrics equal the before metrics.
pub fn cmd_defend(cfg: &ExperimentConfig) -> Result<RunManifest, RunnerError> {
    let hash = cfg.config_hash();
    let mut em = Emitter::create(&cfg.command_dir("defend"))?;
    em.write_json("config.json", cfg)?;
    let (data, run) = run_attack_pipeline(&mut em, cfg)?;

    let outcome = match &cfg.defense {
        None => {
            let poisons = run
                .poisoned_set
                .poison_mask
                .iter()
                .filter(|&&flag| flag)
                .count();
            DefenseOutcome {
                asr_before: run.asr.asr,
                asr_after: run.asr.asr,
                acc_before: run.acc_poisoned.acc,
                acc_after: run.acc_poisoned.acc,
                // Nothing flagged: precision is vacuous, recall catches
                // nothing unless there was nothing to catch.
                detection_precision: 1.0,
                detection_recall: if poisons == 0 { 1.0 } else { 0.0 },
                removed_count: 0,
            }
        }
        Some(spec) => {
            let (report, outcome) = em.stage("defense", || {
                crate::pipeline::run_defense(&run, &data.test, spec).map_err(Into::into)
            })?;
            em.write_json("anomaly-report.json", &report)?;
            write_flagged_grid(&mut em, &run, &report)?;
            outcome
        }
    };
    em.write_json("defense-outcome.json", &outcome)?;
    em.write_text("before-after.csv", &before_after_csv(&outcome))?;
    em.finish(
        "defend",
        hash,
        cfg.seed,
        vec![run.acc_clean, run.acc_poisoned, run.asr],
    )
}

fn write_flagged_grid(
    em: &mut Emitter,
    run: &PipelineRun,
    report: &AnomalyReport,
) -> Result<(), RunnerError> {
    let flagged_rows: Vec<usize> = report
        .flagged
        .iter()
        .enumerate()
        .filter_map(|(i, &f)| f.then_some(i))
        .take(64)
        .collect();
    if flagged_rows.is_empty() {
        return Ok(());
    }
    let flagged = run.poisoned_set.data.subset(&flagged_rows)?;
    let grid = image_grid(flagged.images(), 8)?;
    em.write_png("flagged-grid.png", &grid)
}

/// Sweep the poison ratio over the configured grid and seeds.  An empty
/// grid is vacuous and still writes the (header-only) table.
pub fn cmd_sweep(cfg: &ExperimentConfig, threads: usize) -> Result<RunManifest, RunnerError> {
    let hash = cfg.config_hash();
    let mut em = Emitter::create(&cfg.command_dir("sweep"))?;
    em.write_json("config.json", cfg)?;

    if cfg.sweep_ratios.is_empty() || cfg.sweep_seeds.is_empty() {
        let empty = SweepTable {
            attack: cfg.attack.kind,
            cells: Vec::new(),
            summary: Vec::new(),
        };
        em.write_text("sweep.csv", &sweep_csv(&empty))?;
        em.write_json("sweep-summary.json", &empty)?;
        return em.finish("sweep", hash, cfg.seed, Vec::new());
    }

    let data = em.stage("load-data", || load_split(cfg))?;
    em.write_json("datasets.json", &data.manifests)?;
    let base = cfg.pipeline();
    let table = em.stage("sweep", || {
        if threads <= 1 {
            run_sweep(
                &data.train,
                &data.test,
                &base,
                &cfg.sweep_ratios,
                &cfg.sweep_seeds,
            )
            .map_err(Into::into)
        } else {
            run_sweep_parallel(
                &data.train,
                &data.test,
                &base,
                &cfg.sweep_ratios,
                &cfg.sweep_seeds,
                threads,
            )
            .map_err(Into::into)
        }
    })?;

    em.write_text("sweep.csv", &sweep_csv(&table))?;
    em.write_json("sweep-summary.json", &table)?;
    let series = [
        ChartSeries {
            name: "mean asr".to_string(),
            points: table
                .summary
                .iter()
                .map(|r| (r.ratio, r.mean_asr))
                .collect(),
        },
        ChartSeries {
            name: "mean acc".to_string(),
            points: table
                .summary
                .iter()
                .map(|r| (r.ratio, r.mean_acc_poisoned))
                .collect(),
        },
    ];
    if let Ok(svg) = svg_line_chart("poison ratio sweep", "poison ratio", "rate", &series) {
        em.write_text("sweep.svg", &svg)?;
    }
    em.write_json("sweep-trend.json", &trend_json(&table))?;
    em.finish("sweep", hash, cfg.seed, Vec::new())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrendArtifact {
    /// Rank correlation of ratio against mean attack success, when
    /// defined.
    pub spearman_rho: Option<f64>,
}

fn trend_json(table: &SweepTable) -> TrendArtifact {
    let points: Vec<(f64, f64)> = table
        .summary
        .iter()
        .filter(|r| r.mean_asr.is_finite())
        .map(|r| (r.ratio, r.mean_asr))
        .collect();
    let ratios: Vec<f64> = points.iter().map(|p| p.0).collect();
    let asrs: Vec<f64> = points.iter().map(|p| p.1).collect();
    TrendArtifact {
        spearman_rho: spearman(&ratios, &asrs).ok(),
    }
}

/// Run the attack once per configured donor class and relate donor
/// similarity to attack success.
pub fn cmd_study(cfg: &ExperimentConfig) -> Result<RunManifest, RunnerError> {
    let hash = cfg.config_hash();
    let mut em = Emitter::create(&cfg.command_dir("study"))?;
    em.write_json("config.json", cfg)?;
    let data = em.stage("load-data", || load_split(cfg))?;
    em.write_json("datasets.json", &data.manifests)?;

    let base = cfg.pipeline();
    let table = em.stage("study", || {
        interclass_study(&data.train, &data.test, &base, &cfg.study_donors).map_err(Into::into)
    })?;

    em.write_text("study.csv", &study_csv(&table))?;
    em.write_json("study-summary.json", &table)?;
    em.write_json("study-trend.json", &study_trend(&table))?;
    let mut points: Vec<(f64, f64)> = table.rows.iter().map(|r| (r.similarity, r.asr)).collect();
    points.sort_by(|a, b| a.0.total_cmp(&b.0));
    let series = [ChartSeries {
        name: "asr".to_string(),
        points,
    }];
    if let Ok(svg) = svg_line_chart(
        "donor similarity vs attack success",
        "donor similarity",
        "asr",
        &series,
    ) {
        em.write_text("study.svg", &svg)?;
    }
    em.finish("study", hash, cfg.seed, Vec::new())
}

fn study_trend(table: &StudyTable) -> TrendArtifact {
    let sims: Vec<f64> = table.rows.iter().map(|r| r.similarity).collect();
    let asrs: Vec<f64> = table.rows.iter().map(|r| r.asr).collect();
    TrendArtifact {
        spearman_rho: spearman(&sims, &asrs).ok(),
    }
}

/// Render the visual and statistical report of an attack run: the
/// benign/poisoned/trigger sample grid, the perturbation echo, the
/// target-logit t-test, and the crafting loss curve when one exists.
pub fn cmd_report(cfg: &ExperimentConfig) -> Result<RunManifest, RunnerError> {
    let hash = cfg.config_hash();
    let mut em = Emitter::create(&cfg.command_dir("report"))?;
    em.write_json("config.json", cfg)?;
    let (data, run) = run_attack_pipeline(&mut em, cfg)?;

    const GRID_COLS: usize = 8;
    let base_rows: Vec<usize> = run
        .craft
        .source_rows
        .iter()
        .copied()
        .take(GRID_COLS)
        .collect();
    let bases = data.train.subset(&base_rows)?;
    let crafted_head = head_rows(&run.craft.crafted_images, GRID_COLS);
    let trigger_head = head_rows(run.trigger_set.images(), GRID_COLS);
    let grid = comparison_grid(
        &[bases.images(), &crafted_head, &trigger_head],
        GRID_COLS,
    )?;
    em.write_png("samples-grid.png", &grid)?;

    let all_bases = data.train.subset(&run.craft.source_rows)?;
    let crafted = run.craft.source_rows.len();
    let (mean_abs_delta, max_abs_delta) = if crafted == 0 {
        (None, None)
    } else {
        let (mean, max) = perturbation_stats(all_bases.images(), &run.craft.crafted_images);
        (Some(mean), Some(max))
    };
    let budgeted = matches!(
        cfg.attack.kind,
        AttackKind::DeepPoison | AttackKind::FeatureCollision
    );
    let epsilon = budgeted.then_some(cfg.attack.epsilon as f64);
    let within_budget = match (epsilon, max_abs_delta) {
        (Some(eps), Some(max)) => Some(max <= eps),
        _ => None,
    };
    let perturbation = PerturbationReport {
        attack: cfg.attack.kind,
        crafted,
        mean_abs_delta,
        max_abs_delta,
        epsilon,
        within_budget,
    };
    if let (Some(mean), Some(max)) = (mean_abs_delta, max_abs_delta) {
        match epsilon {
            Some(eps) => println!(
                "crafted perturbation: mean |delta| = {mean:.6}, max = {max:.6}, budget = {eps}"
            ),
            None => println!("crafted perturbation: mean |delta| = {mean:.6}, max = {max:.6}"),
        }
    }
    em.write_json("report.json", &perturbation)?;

    match target_logit_populations(
        &run.poisoned_model,
        &run.trigger_set,
        &data.test,
        cfg.target_class,
        cfg.logit_cap,
    )
    .and_then(|(a, b)| ttest_two_sample(&a, &b))
    {
        Ok(t) => em.write_json(
            "ttest.json",
            &TTestArtifact {
                t: t.t_statistic,
                df: t.degrees_of_freedom,
                p: t.p_value,
                n_a: t.n_a,
                n_b: t.n_b,
            },
        )?,
        Err(e) => eprintln!("skipping target-logit t-test: {e}"),
    }

    if !run.craft.loss_history.is_empty() {
        em.write_text("craft-loss.csv", &loss_history_csv(&run.craft.loss_history))?;
        if let Ok(svg) = loss_history_chart(&run.craft.loss_history) {
            em.write_text("craft-loss.svg", &svg)?;
        }
    }
    em.finish(
        "report",
        hash,
        cfg.seed,
        vec![run.acc_clean, run.acc_poisoned, run.asr],
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;
    use rand::Rng;

    const IDX_IMAGE_MAGIC: u32 = 0x0000_0803;
    const IDX_LABEL_MAGIC: u32 = 0x0000_0801;

    fn write_idx_pair(
        dir: &Path,
        images_name: &str,
        labels_name: &str,
        images: &[Vec<u8>],
        labels: &[u8],
        side: usize,
    ) {
        let mut image_bytes = Vec::new();
        image_bytes.extend_from_slice(&IDX_IMAGE_MAGIC.to_be_bytes());
        image_bytes.extend_from_slice(&(images.len() as u32).to_be_bytes());
        image_bytes.extend_from_slice(&(side as u32).to_be_bytes());
        image_bytes.extend_from_slice(&(side as u32).to_be_bytes());
        for img in images {
            image_bytes.extend_from_slice(img);
        }
        fs::write(dir.join(images_name), image_bytes).unwrap();

        let mut label_bytes = Vec::new();
        label_bytes.extend_from_slice(&IDX_LABEL_MAGIC.to_be_bytes());
        label_bytes.extend_from_slice(&(labels.len() as u32).to_be_bytes());
        label_bytes.extend_from_slice(labels);
        fs::write(dir.join(labels_name), label_bytes).unwrap();
    }

    /// Stage a small IDX dataset: each class is a bright block in its
    /// own corner of a dark 28x28 image.
    fn stage_fixture(dir: &Path, classes: usize, train_per: usize, test_per: usize) {
        const CORNERS: [(usize, usize); 4] = [(2, 2), (2, 16), (16, 2), (16, 16)];
        let mut rng = substream(11, "runner-fixture");
        let mut make = |per: usize| {
            let n = per * classes;
            let mut images = Vec::with_capacity(n);
            let mut labels = Vec::with_capacity(n);
            for i in 0..n {
                let class = i % classes;
                let (top, left) = CORNERS[class];
                let mut img = vec![0u8; 28 * 28];
                for r in 0..28 {
                    for c in 0..28 {
                        let inside =
                            (top..top + 10).contains(&r) && (left..left + 10).contains(&c);
                        let base: i32 = if inside { 230 } else { 26 };
                        img[r * 28 + c] = (base + rng.gen_range(-12..=12)) as u8;
                    }
                }
                images.push(img);
                labels.push(class as u8);
            }
            (images, labels)
        };
        let (train_images, train_labels) = make(train_per);
        write_idx_pair(
            dir,
            "train-images-idx3-ubyte",
            "train-labels-idx1-ubyte",
            &train_images,
            &train_labels,
            28,
        );
        let (test_images, test_labels) = make(test_per);
        write_idx_pair(
            dir,
            "t10k-images-idx3-ubyte",
            "t10k-labels-idx1-ubyte",
            &test_images,
            &test_labels,
            28,
        );
    }

    fn toy_config(data_dir: &Path, out_dir: &Path) -> ExperimentConfig {
        ExperimentConfig {
            data: DataConfig {
                root: Some(data_dir.display().to_string()),
                ..DataConfig::default()
            },
            train: TrainConfig {
                epochs: 1,
                batch_size: 8,
                learning_rate: 0.05,
            },
            attack: AttackConfig::patch_corner(0),
            target_class: 0,
            donor_class: 1,
            poison_ratio: 0.25,
            gan_pool_cap: 16,
            seed: 7,
            out_dir: out_dir.display().to_string(),
            ..ExperimentConfig::default()
        }
    }

    fn assert_manifest_files_exist(manifest: &RunManifest) {
        for file in &manifest.files {
            assert!(Path::new(file).exists(), "missing listed file: {file}");
        }
    }

    #[test]
    fn train_clean_writes_checkpoint_metrics_and_manifest() {
        let dir = tempfile::tempdir().unwrap();
        stage_fixture(dir.path(), 2, 16, 8);
        let cfg = toy_config(dir.path(), &dir.path().join("out"));

        let manifest = cmd_train_clean(&cfg).unwrap();
        assert_eq!(manifest.command, "train-clean");
        assert_eq!(manifest.config_hash, cfg.config_hash());
        assert_manifest_files_exist(&manifest);
        let stage_names: Vec<&str> = manifest.stages.iter().map(|s| s.stage.as_str()).collect();
        assert_eq!(stage_names, ["load-data", "train", "evaluate"]);

        let out = cfg.command_dir("train-clean");
        let records = crate::checkpoint::load_params(&out.join("clean-model.pfw")).unwrap();
        assert!(!records.is_empty());
        let metrics: MetricsReport = load_json(&out.join("metrics.json")).unwrap();
        assert_eq!(manifest.metrics.len(), 1);
        assert_eq!(metrics, manifest.metrics[0]);
    }

    #[test]
    fn train_clean_with_zero_epochs_still_writes_the_checkpoint() {
        let dir = tempfile::tempdir().unwrap();
        stage_fixture(dir.path(), 2, 8, 4);
        let mut cfg = toy_config(dir.path(), &dir.path().join("out"));
        cfg.train.epochs = 0;

        let manifest = cmd_train_clean(&cfg).unwrap();
        assert_manifest_files_exist(&manifest);
        let out = cfg.command_dir("train-clean");
        assert!(out.join("clean-model.pfw").exists());
        let csv = fs::read_to_string(out.join("train-loss.csv")).unwrap();
        assert_eq!(csv, "epoch,loss\n");
        // No finite points — the chart is skipped and never listed.
        assert!(!out.join("train-loss.svg").exists());
        assert!(manifest.metrics[0].acc.is_finite());
    }

    #[test]
    fn repeated_runs_reproduce_metrics_and_checkpoints_exactly() {
        let dir = tempfile::tempdir().unwrap();
        stage_fixture(dir.path(), 2, 16, 8);
        let cfg_a = toy_config(dir.path(), &dir.path().join("out-a"));
        let cfg_b = toy_config(dir.path(), &dir.path().join("out-b"));

        let a = cmd_train_clean(&cfg_a).unwrap();
        let b = cmd_train_clean(&cfg_b).unwrap();
        assert_eq!(a.metrics[0], b.metrics[0]);
        let bytes_a =
            fs::read(cfg_a.command_dir("train-clean").join("clean-model.pfw")).unwrap();
        let bytes_b =
            fs::read(cfg_b.command_dir("train-clean").join("clean-model.pfw")).unwrap();
        assert_eq!(bytes_a, bytes_b);
    }

    #[test]
    fn attack_persists_the_crafted_set_with_its_provenance() {
        let dir = tempfile::tempdir().unwrap();
        stage_fixture(dir.path(), 2, 16, 8);
        let cfg = toy_config(dir.path(), &dir.path().join("out"));

        let manifest = cmd_attack(&cfg).unwrap();
        assert_manifest_files_exist(&manifest);
        assert_eq!(manifest.metrics.len(), 3);

        let out = cfg.command_dir("attack");
        let craft: CraftManifest = load_json(&out.join("crafted.json")).unwrap();
        assert_eq!(craft.attack, AttackKind::Patch);
        assert_eq!(craft.config_hash, cfg.config_hash());
        assert_eq!(craft.seed, 7);
        assert!(!craft.source_indices.is_empty());

        let records = crate::checkpoint::load_params(&out.join("crafted.pfw")).unwrap();
        assert_eq!(records.len(), 1);
        assert_eq!(records[0].0, "crafted_images");
        assert_eq!(records[0].1.shape()[0], craft.source_indices.len());

        let metrics: AttackMetrics = load_json(&out.join("metrics.json")).unwrap();
        assert!(metrics.asr.asr >= 0.0 && metrics.asr.asr <= 1.0);
    }

    #[test]
    fn defend_without_a_defense_is_the_identity() {
        let dir = tempfile::tempdir().unwrap();
        stage_fixture(dir.path(), 2, 16, 8);
        let mut cfg = toy_config(dir.path(), &dir.path().join("out"));
        cfg.defense = None;

        let manifest = cmd_defend(&cfg).unwrap();
        assert_manifest_files_exist(&manifest);
        let out = cfg.command_dir("defend");
        let outcome: DefenseOutcome = load_json(&out.join("defense-outcome.json")).unwrap();
        assert_eq!(outcome.asr_before, outcome.asr_after);
        assert_eq!(outcome.acc_before, outcome.acc_after);
        assert_eq!(outcome.removed_count, 0);
        assert_eq!(outcome.detection_recall, 0.0);
        assert!(!out.join("anomaly-report.json").exists());
    }

    #[test]
    fn defend_with_the_autoencoder_scan_writes_its_artifacts() {
        let dir = tempfile::tempdir().unwrap();
        stage_fixture(dir.path(), 2, 16, 8);
        let mut cfg = toy_config(dir.path(), &dir.path().join("out"));
        cfg.defense = Some(DefenseSpec::Autoencoder {
            epochs: 1,
            rule: Default::default(),
        });

        let manifest = cmd_defend(&cfg).unwrap();
        assert_manifest_files_exist(&manifest);
        let out = cfg.command_dir("defend");
        let report: AnomalyReport = load_json(&out.join("anomaly-report.json")).unwrap();
        assert_eq!(report.flagged.len(), 32);
        let outcome: DefenseOutcome = load_json(&out.join("defense-outcome.json")).unwrap();
        assert!((0.0..=1.0).contains(&outcome.detection_precision));
        assert!((0.0..=1.0).contains(&outcome.detection_recall));
        let csv = fs::read_to_string(out.join("before-after.csv")).unwrap();
        assert!(csv.starts_with("metric,before,after\nasr,"));
    }

    #[test]
    fn vacuous_sweep_writes_a_header_only_table() {
        let dir = tempfile::tempdir().unwrap();
        stage_fixture(dir.path(), 2, 8, 4);
        let mut cfg = toy_config(dir.path(), &dir.path().join("out"));
        cfg.sweep_ratios = Vec::new();

        let manifest = cmd_sweep(&cfg, 1).unwrap();
        assert_manifest_files_exist(&manifest);
        let csv =
            fs::read_to_string(cfg.command_dir("sweep").join("sweep.csv")).unwrap();
        assert_eq!(csv, "attack,ratio,seed,acc_clean,acc_poisoned,asr,wall_seconds\n");
    }

    #[test]
    fn sweep_emits_table_summary_and_trend() {
        let dir = tempfile::tempdir().unwrap();
        stage_fixture(dir.path(), 2, 16, 8);
        let mut cfg = toy_config(dir.path(), &dir.path().join("out"));
        cfg.sweep_ratios = vec![0.0, 0.5];
        cfg.sweep_seeds = vec![1, 2];

        let manifest = cmd_sweep(&cfg, 1).unwrap();
        assert_manifest_files_exist(&manifest);
        let out = cfg.command_dir("sweep");
        let csv = fs::read_to_string(out.join("sweep.csv")).unwrap();
        assert_eq!(csv.lines().count(), 5);
        let table: SweepTable = load_json(&out.join("sweep-summary.json")).unwrap();
        assert_eq!(table.cells.len(), 4);
        assert!(out.join("sweep.svg").exists());
        let trend: TrendArtifact = load_json(&out.join("sweep-trend.json")).unwrap();
        if let Some(rho) = trend.spearman_rho {
            assert!((-1.0..=1.0).contains(&rho));
        }

        // The parallel path reports the same metrics.
        let mut cfg_par = cfg.clone();
        cfg_par.out_dir = dir.path().join("out-par").display().to_string();
        cmd_sweep(&cfg_par, 2).unwrap();
        let par: SweepTable =
            load_json(&cfg_par.command_dir("sweep").join("sweep-summary.json")).unwrap();
        for (s, p) in table.cells.iter().zip(&par.cells) {
            assert_eq!(s.acc_poisoned, p.acc_poisoned);
            assert_eq!(s.asr, p.asr);
            assert_eq!(s.error, p.error);
        }
    }

    #[test]
    fn study_relates_similarity_to_attack_success() {
        let dir = tempfile::tempdir().unwrap();
        stage_fixture(dir.path(), 4, 24, 8);
        let mut cfg = toy_config(dir.path(), &dir.path().join("out"));
        cfg.train.epochs = 3;
        cfg.study_donors = vec![1, 2, 3];

        let manifest = cmd_study(&cfg).unwrap();
        assert_manifest_files_exist(&manifest);
        let out = cfg.command_dir("study");
        let csv = fs::read_to_string(out.join("study.csv")).unwrap();
        assert_eq!(csv.lines().count(), 4);
        let table: StudyTable = load_json(&out.join("study-summary.json")).unwrap();
        assert_eq!(table.rows.len(), 3);
        assert!(out.join("study.svg").exists());
    }

    #[test]
    fn report_grid_shows_the_patch_in_poisoned_and_trigger_rows() {
        let dir = tempfile::tempdir().unwrap();
        stage_fixture(dir.path(), 2, 16, 8);
        let cfg = toy_config(dir.path(), &dir.path().join("out"));

        let manifest = cmd_report(&cfg).unwrap();
        assert_manifest_files_exist(&manifest);
        let out = cfg.command_dir("report");
        let grid = image::open(out.join("samples-grid.png")).unwrap().to_luma8();
        // Grid rows: bases, poisoned, triggers; 28px cells with a 2px
        // gap.  The stamp covers rows 25..27, columns 23..27 of a cell.
        for grid_row in [1u32, 2] {
            let y0 = grid_row * 30;
            for (dy, dx) in [(25, 23), (25, 26), (26, 24)] {
                let v = grid.get_pixel(dx, y0 + dy).0[0];
                assert!(v >= 250, "expected a white stamp pixel, got {v}");
            }
        }

        let perturbation: PerturbationReport = load_json(&out.join("report.json")).unwrap();
        assert_eq!(perturbation.attack, AttackKind::Patch);
        assert!(perturbation.crafted > 0);
        assert!(perturbation.epsilon.is_none());
        assert!(perturbation.max_abs_delta.unwrap() > 0.5);
    }

    #[test]
    fn report_echoes_the_generative_budget() {
        let dir = tempfile::tempdir().unwrap();
        stage_fixture(dir.path(), 2, 16, 8);
        let mut cfg = toy_config(dir.path(), &dir.path().join("out"));
        cfg.attack = AttackConfig {
            epochs: 1,
            batch_size: 8,
            noise_dim: 8,
            ..AttackConfig::deep_poison(0)
        };

        let manifest = cmd_report(&cfg).unwrap();
        assert_manifest_files_exist(&manifest);
        let out = cfg.command_dir("report");
        let perturbation: PerturbationReport = load_json(&out.join("report.json")).unwrap();
        assert_eq!(perturbation.epsilon, Some(0.25));
        assert_eq!(perturbation.within_budget, Some(true));
        assert!(perturbation.max_abs_delta.unwrap() <= 0.25);
        assert!(out.join("craft-loss.csv").exists());
    }

    #[test]
    fn config_hash_tracks_content_not_identity() {
        let cfg = ExperimentConfig::default();
        assert_eq!(cfg.config_hash(), cfg.config_hash());
        assert_eq!(cfg.config_hash().len(), 64);
        let mut changed = cfg.clone();
        changed.seed = 1;
        assert_ne!(cfg.config_hash(), changed.config_hash());
    }

    #[test]
    fn overrides_replace_fields_and_fill_stamp_specs() {
        let mut cfg = ExperimentConfig::default();
        assert!(cfg.attack.patch.is_none());
        apply_overrides(
            &mut cfg,
            &Overrides {
                seed: Some(3),
                out: Some("elsewhere".to_string()),
                attack: Some(AttackKind::Patch),
                ratio: Some(0.5),
            },
        );
        assert_eq!(cfg.seed, 3);
        assert_eq!(cfg.out_dir, "elsewhere");
        assert_eq!(cfg.poison_ratio, 0.5);
        assert_eq!(cfg.attack.kind, AttackKind::Patch);
        assert!(cfg.attack.patch.is_some());

        assert!(matches!(parse_attack_kind("deep-poison"), Ok(AttackKind::DeepPoison)));
        assert!(matches!(parse_attack_kind("patch"), Ok(AttackKind::Patch)));
        assert!(parse_attack_kind("gradient_matching").is_err());
    }

    #[test]
    fn config_round_trips_through_its_json_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("config.json");
        let mut cfg = ExperimentConfig::default();
        cfg.seed = 42;
        cfg.sweep_ratios = vec![0.1];
        save_json(&path, &cfg).unwrap();
        let loaded = load_config(Some(&path)).unwrap();
        assert_eq!(loaded.config_hash(), cfg.config_hash());

        assert_eq!(load_config(None).unwrap().seed, 0);
        fs::write(&path, "{not json").unwrap();
        assert!(matches!(
            load_config(Some(&path)),
            Err(RunnerError::Json { .. })
        ));
    }

    #[test]
    fn data_root_resolution_prefers_config_over_environment() {
        let explicit = DataConfig {
            root: Some("/tmp/somewhere".to_string()),
            ..DataConfig::default()
        };
        assert_eq!(resolve_data_root(&explicit), PathBuf::from("/tmp/somewhere"));

        std::env::remove_var(DATA_ENV);
        assert_eq!(
            resolve_data_root(&DataConfig::default()),
            PathBuf::from("data/mnist")
        );
        std::env::set_var(DATA_ENV, "/tmp/idx-root");
        assert_eq!(
            resolve_data_root(&DataConfig::default()),
            PathBuf::from("/tmp/idx-root")
        );
        std::env::remove_var(DATA_ENV);
    }
}
