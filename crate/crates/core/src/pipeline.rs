//! End-to-end poisoning experiments: plan → craft → poison → train →
//! measure, with every stage seeded from one master seed.
//!
//! A run trains the clean reference model first (it doubles as the
//! frozen feature extractor for the feature-space attacks), crafts the
//! planned poison rows with the configured attack, splices them into the
//! training set, retrains with the *same* recipe and seed, and reports
//! clean accuracy, poisoned accuracy, and attack success. A zero ratio
//! therefore reproduces the clean model bit for bit, and the measured
//! "attack success" collapses to the clean confusion baseline.
//!
//! Stage seeds come from fixed substream labels ("data-split", "craft",
//! "train", "defense"), so runs are reproducible end to end and any
//! stage can be re-derived in isolation.

use std::fmt;

use serde::{Deserialize, Serialize};

use std::collections::HashMap;

use crate::attacks::{
    assign_donors, craft_blend, craft_feature_collision, craft_patch, craft_with_generator,
    train_deep_poison_models, AttackConfig, AttackError, AttackKind, DeepPoisonModels,
    LossBreakdown,
};
use crate::data::{
    apply_poison, make_poison_plan, DataError, LabeledDataset, PoisonPlan, PoisonedDataset,
    RatioBasis,
};
use crate::defenses::{
    autoencoder_scan, cluster_scan, filter_retrain_evaluate, AnomalyReport, DefenseError,
    DefenseOutcome, EpsRule, EvalBundle, ThresholdRule, DEFAULT_MIN_CLUSTER_FRACTION,
    DEFAULT_MIN_PTS,
};
use crate::eval::{compute_acc, compute_asr, EvalError, MetricsReport};
use crate::models::{extract_features, ClassifierModel, ModelError};
use crate::rng::substream_seed;
use crate::tensor::Tensor;
use crate::training::{train_classifier, TrainConfig, TrainError};

/// Default cap on the number of trigger images evaluated.
pub const DEFAULT_TRIGGER_CAP: usize = 1000;
/// Default cap on the generator/discriminator training pools.
pub const DEFAULT_GAN_POOL_CAP: usize = 1024;

/// One full experiment: which attack, against which class pair, how much
/// poison, and the victim's training recipe.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub attack: AttackConfig,
    /// Class whose training rows are replaced (the label the attacker
    /// wants triggers to receive).
    pub target_class: usize,
    /// Class whose test images act as triggers.
    pub donor_class: usize,
    pub poison_ratio: f64,
    pub ratio_basis: RatioBasis,
    pub train: TrainConfig,
    /// At most this many trigger images are evaluated.
    pub trigger_cap: usize,
    /// At most this many rows feed the adversarial training pools.
    pub gan_pool_cap: usize,
    /// Master seed; every stage derives its own substream from it.
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            attack: AttackConfig::default(),
            target_class: 4,
            donor_class: 9,
            poison_ratio: 0.07,
            ratio_basis: RatioBasis::TargetClassSubset,
            train: TrainConfig::default(),
            trigger_cap: DEFAULT_TRIGGER_CAP,
            gan_pool_cap: DEFAULT_GAN_POOL_CAP,
            seed: 0,
        }
    }
}

/// Errors from an end-to-end run.
#[derive(Debug)]
pub enum PipelineError {
    Data(DataError),
    Attack(AttackError),
    Train(TrainError),
    Model(ModelError),
    Eval(EvalError),
    Defense(DefenseError),
    Config { detail: String },
}

impl fmt::Display for PipelineError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PipelineError::Data(e) => write!(f, "pipeline data stage failed: {e}"),
            PipelineError::Attack(e) => write!(f, "pipeline craft stage failed: {e}"),
            PipelineError::Train(e) => write!(f, "pipeline training stage failed: {e}"),
            PipelineError::Model(e) => write!(f, "pipeline model evaluation failed: {e}"),
            PipelineError::Eval(e) => write!(f, "pipeline metric stage failed: {e}"),
            PipelineError::Defense(e) => write!(f, "pipeline defense stage failed: {e}"),
            PipelineError::Config { detail } => write!(f, "bad pipeline configuration: {detail}"),
        }
    }
}

impl std::error::Error for PipelineError {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            PipelineError::Data(e) => Some(e),
            PipelineError::Attack(e) => Some(e),
            PipelineError::Train(e) => Some(e),
            PipelineError::Model(e) => Some(e),
            PipelineError::Eval(e) => Some(e),
            PipelineError::Defense(e) => Some(e),
            PipelineError::Config { .. } => None,
        }
    }
}

impl From<DataError> for PipelineError {
    fn from(e: DataError) -> Self {
        PipelineError::Data(e)
    }
}

impl From<AttackError> for PipelineError {
    fn from(e: AttackError) -> Self {
        PipelineError::Attack(e)
    }
}

impl From<TrainError> for PipelineError {
    fn from(e: TrainError) -> Self {
        PipelineError::Train(e)
    }
}

impl From<ModelError> for PipelineError {
    fn from(e: ModelError) -> Self {
        PipelineError::Model(e)
    }
}

impl From<EvalError> for PipelineError {
    fn from(e: EvalError) -> Self {
        PipelineError::Eval(e)
    }
}

impl From<DefenseError> for PipelineError {
    fn from(e: DefenseError) -> Self {
        PipelineError::Defense(e)
    }
}

/// What the craft stage produced, kept around for feature-drift checks
/// and persistence.
#[derive(Debug, Clone)]
pub struct CraftArtifacts {
    /// Crafted poison rows, aligned with `source_rows`.
    pub crafted_images: Tensor,
    /// Training-set rows the crafted images replace.
    pub source_rows: Vec<usize>,
    /// Training-set rows of the donors each crafted image imitates;
    /// empty when the attack pairs against a class-level target instead
    /// of individual donors.
    pub donor_rows: Vec<usize>,
    /// Adversarial loss trace (empty for the baseline attacks).
    pub loss_history: Vec<LossBreakdown>,
    /// Trained generator/discriminator, when the attack has them.
    pub models: Option<DeepPoisonModels>,
}

/// Everything a finished run exposes for measurement and persistence.
#[derive(Debug)]
pub struct PipelineRun {
    pub plan: PoisonPlan,
    pub poisoned_set: PoisonedDataset,
    pub clean_model: ClassifierModel,
    pub poisoned_model: ClassifierModel,
    pub trigger_set: LabeledDataset,
    pub acc_clean: MetricsReport,
    pub acc_poisoned: MetricsReport,
    pub asr: MetricsReport,
    pub craft: CraftArtifacts,
    /// Recipe both models were trained with; defenses retrain with it.
    pub train_config: TrainConfig,
    /// Seed of the shared training substream (clean and poisoned runs).
    pub train_seed: u64,
    /// Seed reserved for defense stages layered on this run.
    pub defense_seed: u64,
}

/// Deterministic reuse of expensive stage outputs across runs that share
/// a training split and recipe: the clean model depends only on its seed,
/// and the adversarial pair depends only on its seed and the class pair
/// (the training pools never depend on the poison ratio). A cache hit
/// returns bit-identical models to a fresh run, so sweeps stay
/// reproducible cell by cell. Callers must not reuse one cache across
/// different splits or recipes.
#[derive(Default)]
pub struct RunCache {
    clean_models: HashMap<u64, ClassifierModel>,
    gan_models: HashMap<(u64, usize, usize), (DeepPoisonModels, Vec<LossBreakdown>)>,
}

impl RunCache {
    pub fn new() -> Self {
        RunCache::default()
    }
}

/// Run one full experiment on the given train/test split.
pub fn run_pipeline(
    train_set: &LabeledDataset,
    test_set: &LabeledDataset,
    cfg: &PipelineConfig,
) -> Result<PipelineRun, PipelineError> {
    run_pipeline_cached(train_set, test_set, cfg, &mut RunCache::new())
}

/// [`run_pipeline`] with stage reuse; see [`RunCache`].
pub fn run_pipeline_cached(
    train_set: &LabeledDataset,
    test_set: &LabeledDataset,
    cfg: &PipelineConfig,
    cache: &mut RunCache,
) -> Result<PipelineRun, PipelineError> {
    if cfg.trigger_cap == 0 {
        return Err(PipelineError::Config {
            detail: "trigger_cap must be at least 1".to_string(),
        });
    }
    if cfg.gan_pool_cap == 0 {
        return Err(PipelineError::Config {
            detail: "gan_pool_cap must be at least 1".to_string(),
        });
    }

    let split_seed = substream_seed(cfg.seed, "data-split");
    let craft_seed = substream_seed(cfg.seed, "craft");
    let train_seed = substream_seed(cfg.seed, "train");
    let defense_seed = substream_seed(cfg.seed, "defense");

    let plan = make_poison_plan(
        train_set,
        cfg.target_class,
        cfg.donor_class,
        cfg.poison_ratio,
        cfg.ratio_basis,
        split_seed,
    )?;

    // The clean model doubles as the frozen feature extractor and as the
    // reference that decides which triggers count toward the ASR
    // denominator.
    let clean_model = match cache.clean_models.get(&train_seed) {
        Some(m) => m.clone(),
        None => {
            let (m, _) = train_classifier(train_set, &cfg.train, train_seed)?;
            cache.clean_models.insert(train_seed, m.clone());
            m
        }
    };

    let craft = craft_poison(train_set, &clean_model, &plan, cfg, craft_seed, cache)?;

    let poisoned_set = apply_poison(train_set, &plan, &craft.crafted_images)?;
    let (poisoned_model, _) = train_classifier(&poisoned_set.data, &cfg.train, train_seed)?;

    let trigger_set = build_trigger_set(test_set, cfg)?;

    let acc_clean = compute_acc(&clean_model, test_set)?;
    let acc_poisoned = compute_acc(&poisoned_model, test_set)?;
    let asr = compute_asr(
        &poisoned_model,
        &clean_model,
        &trigger_set,
        cfg.target_class,
    )?;

    Ok(PipelineRun {
        plan,
        poisoned_set,
        clean_model,
        poisoned_model,
        trigger_set,
        acc_clean,
        acc_poisoned,
        asr,
        craft,
        train_config: cfg.train.clone(),
        train_seed,
        defense_seed,
    })
}

/// Craft the poison rows for the plan under the configured attack.
fn craft_poison(
    train_set: &LabeledDataset,
    feature_extractor: &ClassifierModel,
    plan: &PoisonPlan,
    cfg: &PipelineConfig,
    craft_seed: u64,
    cache: &mut RunCache,
) -> Result<CraftArtifacts, PipelineError> {
    let source_rows = plan.selected_indices.clone();
    if source_rows.is_empty() {
        let mut shape = train_set.images().shape().to_vec();
        shape[0] = 0;
        let crafted_images = Tensor::new(&shape, Vec::new()).map_err(|e| {
            PipelineError::Config {
                detail: format!("could not build an empty crafted batch: {e}"),
            }
        })?;
        return Ok(CraftArtifacts {
            crafted_images,
            source_rows,
            donor_rows: Vec::new(),
            loss_history: Vec::new(),
            models: None,
        });
    }

    let bases = gather_images(train_set, &source_rows)?;
    match cfg.attack.kind {
        AttackKind::Patch => {
            let spec = cfg.attack.patch.as_ref().ok_or_else(|| PipelineError::Config {
                detail: "patch attack selected but no patch configured".to_string(),
            })?;
            let crafted_images = craft_patch(&bases, spec)?;
            Ok(CraftArtifacts {
                crafted_images,
                source_rows,
                donor_rows: Vec::new(),
                loss_history: Vec::new(),
                models: None,
            })
        }
        AttackKind::Blend => {
            let spec = cfg
                .attack
                .watermark
                .as_ref()
                .ok_or_else(|| PipelineError::Config {
                    detail: "blend attack selected but no watermark configured".to_string(),
                })?;
            let crafted_images = craft_blend(&bases, spec)?;
            Ok(CraftArtifacts {
                crafted_images,
                source_rows,
                donor_rows: Vec::new(),
                loss_history: Vec::new(),
                models: None,
            })
        }
        AttackKind::FeatureCollision => {
            // The collision target is the donor class's mean feature
            // vector over the whole training split.
            let donor_rows_all = train_set.indices_of_class(plan.donor_class);
            if donor_rows_all.is_empty() {
                return Err(PipelineError::Config {
                    detail: format!("donor class {} has no training rows", plan.donor_class),
                });
            }
            let donor_images = gather_images(train_set, &donor_rows_all)?;
            let donor_features = extract_features(feature_extractor, &donor_images)?;
            let dim = donor_features.numel() / donor_rows_all.len();
            let mut target = vec![0.0f32; dim];
            for row in 0..donor_rows_all.len() {
                for (t, &v) in target
                    .iter_mut()
                    .zip(&donor_features.values()[row * dim..(row + 1) * dim])
                {
                    *t += v / donor_rows_all.len() as f32;
                }
            }
            let crafted_images = craft_feature_collision(
                feature_extractor,
                &bases,
                &target,
                cfg.attack.collision_steps,
                cfg.attack.collision_step_size,
                cfg.attack.collision_lambda,
                cfg.attack.epsilon,
            )?;
            Ok(CraftArtifacts {
                crafted_images,
                source_rows,
                donor_rows: Vec::new(),
                loss_history: Vec::new(),
                models: None,
            })
        }
        AttackKind::DeepPoison => {
            // Adversarial training pools are the first rows of each
            // class, capped — independent of which rows the plan picked,
            // so one trained pair serves every ratio at a given seed.
            let base_pool_rows: Vec<usize> = train_set
                .indices_of_class(plan.target_class)
                .into_iter()
                .take(cfg.gan_pool_cap)
                .collect();
            let donor_pool_rows: Vec<usize> = train_set
                .indices_of_class(plan.donor_class)
                .into_iter()
                .take(cfg.gan_pool_cap)
                .collect();
            if donor_pool_rows.is_empty() {
                return Err(PipelineError::Config {
                    detail: format!("donor class {} has no training rows", plan.donor_class),
                });
            }
            let base_pool = gather_images(train_set, &base_pool_rows)?;
            let donor_pool = gather_images(train_set, &donor_pool_rows)?;

            let mut attack = cfg.attack.clone();
            attack.seed = craft_seed;
            let key = (craft_seed, plan.target_class, plan.donor_class);
            let (models, loss_history) = match cache.gan_models.get(&key) {
                Some((m, h)) => (m.clone(), h.clone()),
                None => {
                    let trained = train_deep_poison_models(
                        &attack,
                        feature_extractor,
                        &base_pool,
                        &donor_pool,
                    )?;
                    cache.gan_models.insert(key, trained.clone());
                    trained
                }
            };

            let crafted_images =
                craft_with_generator(&models.generator, &bases, attack.seed, "craft-noise")?;
            let donor_pool_indices =
                assign_donors(&attack, feature_extractor, &bases, &donor_pool)?;
            let donor_rows = donor_pool_indices
                .iter()
                .map(|&i| donor_pool_rows[i])
                .collect();
            Ok(CraftArtifacts {
                crafted_images,
                source_rows,
                donor_rows,
                loss_history,
                models: Some(models),
            })
        }
    }
}

/// Assemble the trigger set: donor-class test images, patched or blended
/// for the overt attacks, untouched for the feature-space attacks.
pub fn build_trigger_set(
    test_set: &LabeledDataset,
    cfg: &PipelineConfig,
) -> Result<LabeledDataset, PipelineError> {
    let rows: Vec<usize> = test_set
        .indices_of_class(cfg.donor_class)
        .into_iter()
        .take(cfg.trigger_cap)
        .collect();
    if rows.is_empty() {
        return Err(PipelineError::Config {
            detail: format!("no test images of donor class {}", cfg.donor_class),
        });
    }
    let subset = test_set.subset(&rows)?;
    let (images, name) = match cfg.attack.kind {
        AttackKind::Patch => {
            let spec = cfg.attack.patch.as_ref().ok_or_else(|| PipelineError::Config {
                detail: "patch attack selected but no patch configured".to_string(),
            })?;
            (
                craft_patch(subset.images(), spec)?,
                format!("class{}-test-patched", cfg.donor_class),
            )
        }
        AttackKind::Blend => {
            let spec = cfg
                .attack
                .watermark
                .as_ref()
                .ok_or_else(|| PipelineError::Config {
                    detail: "blend attack selected but no watermark configured".to_string(),
                })?;
            (
                craft_blend(subset.images(), spec)?,
                format!("class{}-test-blended", cfg.donor_class),
            )
        }
        AttackKind::DeepPoison | AttackKind::FeatureCollision => (
            subset.images().clone(),
            format!("class{}-test-benign", cfg.donor_class),
        ),
    };
    LabeledDataset::new(name, images, subset.labels().to_vec(), test_set.num_classes())
        .map_err(PipelineError::from)
}

/// Stack the given dataset rows into one image tensor.
fn gather_images(dataset: &LabeledDataset, rows: &[usize]) -> Result<Tensor, DataError> {
    Ok(dataset.subset(rows)?.images().clone())
}

/// Which detector to layer on a finished run.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case")]
pub enum DefenseSpec {
    Autoencoder {
        epochs: usize,
        rule: ThresholdRule,
    },
    Dbscan {
        eps_rule: EpsRule,
        min_pts: usize,
        min_cluster_fraction: f64,
    },
}

impl Default for DefenseSpec {
    fn default() -> Self {
        DefenseSpec::Autoencoder {
            epochs: 10,
            rule: ThresholdRule::default(),
        }
    }
}

impl DefenseSpec {
    /// The dbscan defense at its default parameters.
    pub fn dbscan() -> Self {
        DefenseSpec::Dbscan {
            eps_rule: EpsRule::default(),
            min_pts: DEFAULT_MIN_PTS,
            min_cluster_fraction: DEFAULT_MIN_CLUSTER_FRACTION,
        }
    }
}

/// Scan the run's suspect training set, filter, retrain, and remeasure.
pub fn run_defense(
    run: &PipelineRun,
    test_set: &LabeledDataset,
    spec: &DefenseSpec,
) -> Result<(AnomalyReport, DefenseOutcome), PipelineError> {
    let report = match spec {
        DefenseSpec::Autoencoder { epochs, rule } => {
            autoencoder_scan(&run.poisoned_set, *epochs, rule, run.defense_seed)?
        }
        DefenseSpec::Dbscan {
            eps_rule,
            min_pts,
            min_cluster_fraction,
        } => cluster_scan(
            &run.poisoned_set,
            &run.poisoned_model,
            eps_rule,
            *min_pts,
            *min_cluster_fraction,
        )?,
    };
    let bundle = EvalBundle {
        poisoned_model: &run.poisoned_model,
        clean_reference: &run.clean_model,
        test_set,
        trigger_set: &run.trigger_set,
        target_class: run.plan.target_class,
        train_config: &run.train_config,
        train_seed: run.train_seed,
    };
    let outcome = filter_retrain_evaluate(&run.poisoned_set, &report, &bundle)?;
    Ok((report, outcome))
}
