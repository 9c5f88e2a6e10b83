//! Dataset ingestion, normalization, subsetting, and poison injection.
//!
//! Images load from the IDX binary format (big-endian magics 0x00000803 for
//! image files and 0x00000801 for label files) into `[N, 1, H, W]` tensors
//! with pixels scaled to `[0,1]` by division by 255. A `PoisonPlan` names
//! which training rows an attacker replaces; `apply_poison` performs the
//! replacement positionally while leaving every label untouched, and records
//! the ground-truth mask so defenses can be scored later.

use std::fmt;
use std::fs;
use std::io;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::tensor::Tensor;

/// Number of label classes in the digit datasets this crate targets.
pub const NUM_CLASSES: usize = 10;

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Errors from dataset loading, validation, and poison planning.
#[derive(Debug)]
pub enum DataError {
    /// Underlying filesystem failure.
    Io(io::Error),
    /// An IDX file does not start with the expected magic number.
    BadMagic { expected: u32, found: u32 },
    /// An IDX file ended before its declared payload.
    Truncated { field: &'static str },
    /// Image and label files disagree on the sample count.
    CountMismatch { images: usize, labels: usize },
    /// A label value is outside `[0, num_classes)`.
    LabelOutOfRange { label: usize, num_classes: usize },
    /// A pixel value fell outside `[0,1]`.
    PixelOutOfRange { index: usize, value: f32 },
    /// Image tensor shape is not `[N, C, H, W]` or disagrees with labels.
    BadShape { detail: String },
    /// A subset or class index refers past the dataset end.
    IndexOutOfRange { index: usize, len: usize },
    /// Poison ratio outside `[0,1]` or non-finite.
    RatioOutOfRange { ratio: f64 },
    /// Target and donor class are equal.
    SameClass { class: usize },
    /// The ratio basis population is empty.
    EmptyBasis,
    /// The plan needs more rows than the selectable pool holds.
    PlanTooLarge { requested: usize, available: usize },
    /// Crafted image count does not match the plan.
    CraftedCountMismatch { expected: usize, got: usize },
}

impl fmt::Display for DataError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DataError::Io(e) => write!(f, "dataset i/o error: {e}"),
            DataError::BadMagic { expected, found } => {
                write!(f, "bad IDX magic {found:#010x}, expected {expected:#010x}")
            }
            DataError::Truncated { field } => write!(f, "IDX file truncated in {field}"),
            DataError::CountMismatch { images, labels } => {
                write!(f, "{images} images but {labels} labels")
            }
            DataError::LabelOutOfRange { label, num_classes } => {
                write!(f, "label {label} outside [0, {num_classes})")
            }
            DataError::PixelOutOfRange { index, value } => {
                write!(f, "pixel {index} has value {value} outside [0, 1]")
            }
            DataError::BadShape { detail } => write!(f, "bad dataset shape: {detail}"),
            DataError::IndexOutOfRange { index, len } => {
                write!(f, "index {index} out of range for {len} samples")
            }
            DataError::RatioOutOfRange { ratio } => {
                write!(f, "poison ratio {ratio} outside [0, 1]")
            }
            DataError::SameClass { class } => {
                write!(f, "target and donor class are both {class}")
            }
            DataError::EmptyBasis => write!(f, "ratio basis population is empty"),
            DataError::PlanTooLarge {
                requested,
                available,
            } => write!(
                f,
                "plan wants {requested} rows but only {available} are selectable"
            ),
            DataError::CraftedCountMismatch { expected, got } => {
                write!(f, "plan selects {expected} rows but {got} crafted images given")
            }
        }
    }
}

impl std::error::Error for DataError {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            DataError::Io(e) => Some(e),
            _ => None,
        }
    }
}

impl From<io::Error> for DataError {
    fn from(e: io::Error) -> Self {
        DataError::Io(e)
    }
}

/// An immutable labeled image set: `[N, C, H, W]` pixels in `[0,1]` plus
/// one class id per row.
#[derive(Debug, Clone)]
pub struct LabeledDataset {
    name: String,
    images: Tensor,
    labels: Vec<usize>,
    num_classes: usize,
}

impl LabeledDataset {
    /// Validate and assemble a dataset. The image tensor must be rank 4 with
    /// its leading dimension equal to the label count, every pixel must lie
    /// in `[0,1]`, and every label must be below `num_classes`.
    pub fn new(
        name: impl Into<String>,
        images: Tensor,
        labels: Vec<usize>,
        num_classes: usize,
    ) -> Result<Self, DataError> {
        if images.shape().len() != 4 {
            return Err(DataError::BadShape {
                detail: format!("expected rank-4 images, got {:?}", images.shape()),
            });
        }
        if images.shape()[0] != labels.len() {
            return Err(DataError::CountMismatch {
                images: images.shape()[0],
                labels: labels.len(),
            });
        }
        for (i, &v) in images.values().iter().enumerate() {
            if !(0.0..=1.0).contains(&v) {
                return Err(DataError::PixelOutOfRange { index: i, value: v });
            }
        }
        for &label in &labels {
            if label >= num_classes {
                return Err(DataError::LabelOutOfRange { label, num_classes });
            }
        }
        Ok(LabeledDataset {
            name: name.into(),
            images,
            labels,
            num_classes,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn images(&self) -> &Tensor {
        &self.images
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    /// Number of samples.
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Elements per image (`C*H*W`).
    pub fn image_numel(&self) -> usize {
        let s = self.images.shape();
        s[1] * s[2] * s[3]
    }

    /// Pixel slice of one image.
    pub fn image(&self, index: usize) -> &[f32] {
        let n = self.image_numel();
        &self.images.values()[index * n..(index + 1) * n]
    }

    /// Label of one image.
    pub fn label(&self, index: usize) -> usize {
        self.labels[index]
    }

    /// Row indices whose label equals `class`, in ascending order.
    pub fn indices_of_class(&self, class: usize) -> Vec<usize> {
        self.labels
            .iter()
            .enumerate()
            .filter(|(_, &l)| l == class)
            .map(|(i, _)| i)
            .collect()
    }

    /// A new dataset holding the given rows, in the order given.
    pub fn subset(&self, indices: &[usize]) -> Result<LabeledDataset, DataError> {
        let per = self.image_numel();
        let mut values = Vec::with_capacity(indices.len() * per);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(DataError::IndexOutOfRange {
                    index: i,
                    len: self.len(),
                });
            }
            values.extend_from_slice(self.image(i));
            labels.push(self.labels[i]);
        }
        let mut shape = self.images.shape().to_vec();
        shape[0] = indices.len();
        let images = Tensor::new(&shape, values).map_err(|e| DataError::BadShape {
            detail: e.to_string(),
        })?;
        LabeledDataset::new(self.name.clone(), images, labels, self.num_classes)
    }

    /// A deterministic uniformly-random subset of `count` rows without
    /// replacement, in ascending row order.
    pub fn random_subset(&self, count: usize, seed: u64) -> Result<LabeledDataset, DataError> {
        if count > self.len() {
            return Err(DataError::PlanTooLarge {
                requested: count,
                available: self.len(),
            });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut pool: Vec<usize> = (0..self.len()).collect();
        let (picked, _) = pool.partial_shuffle(&mut rng, count);
        let mut indices = picked.to_vec();
        indices.sort_unstable();
        self.subset(&indices)
    }
}

/// Which population the poison ratio is measured against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RatioBasis {
    /// Ratio of the target-class training subset (default).
    TargetClassSubset,
    /// Ratio of the whole training set; rows are still drawn from the
    /// target class, only the denominator changes.
    WholeSet,
}

impl fmt::Display for RatioBasis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RatioBasis::TargetClassSubset => write!(f, "target_class_subset"),
            RatioBasis::WholeSet => write!(f, "whole_set"),
        }
    }
}

/// Which training rows get replaced by crafted images, and the attack's
/// class geometry: triggers of class `donor_class` should be predicted as
/// `target_class` by the victim model.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PoisonPlan {
    pub target_class: usize,
    pub donor_class: usize,
    pub poison_ratio: f64,
    pub ratio_basis: RatioBasis,
    /// Ascending row indices into the training set; always target-class rows.
    pub selected_indices: Vec<usize>,
}

/// Uniformly sample which target-class rows to replace.
///
/// The selection count is `round(ratio × basis population)`: the basis
/// population is the target-class subset by default, or the whole set when
/// `basis` is `WholeSet` (selection still draws from the target class).
/// Fixed inputs produce an identical plan on every call.
pub fn make_poison_plan(
    dataset: &LabeledDataset,
    target_class: usize,
    donor_class: usize,
    ratio: f64,
    basis: RatioBasis,
    seed: u64,
) -> Result<PoisonPlan, DataError> {
    if target_class >= dataset.num_classes() {
        return Err(DataError::LabelOutOfRange {
            label: target_class,
            num_classes: dataset.num_classes(),
        });
    }
    if donor_class >= dataset.num_classes() {
        return Err(DataError::LabelOutOfRange {
            label: donor_class,
            num_classes: dataset.num_classes(),
        });
    }
    if target_class == donor_class {
        return Err(DataError::SameClass {
            class: target_class,
        });
    }
    if !ratio.is_finite() || !(0.0..=1.0).contains(&ratio) {
        return Err(DataError::RatioOutOfRange { ratio });
    }

    let pool = dataset.indices_of_class(target_class);
    let basis_population = match basis {
        RatioBasis::TargetClassSubset => pool.len(),
        RatioBasis::WholeSet => dataset.len(),
    };
    if basis_population == 0 || pool.is_empty() {
        return Err(DataError::EmptyBasis);
    }
    let count = (ratio * basis_population as f64).round() as usize;
    if count > pool.len() {
        return Err(DataError::PlanTooLarge {
            requested: count,
            available: pool.len(),
        });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut shuffled = pool;
    let (picked, _) = shuffled.partial_shuffle(&mut rng, count);
    let mut selected_indices = picked.to_vec();
    selected_indices.sort_unstable();

    Ok(PoisonPlan {
        target_class,
        donor_class,
        poison_ratio: ratio,
        ratio_basis: basis,
        selected_indices,
    })
}

/// A training set with planned rows replaced by crafted images, plus the
/// ground-truth mask of which rows were replaced. Labels never change.
#[derive(Debug, Clone)]
pub struct PoisonedDataset {
    pub data: LabeledDataset,
    pub poison_mask: Vec<bool>,
}

/// Replace the plan's rows with `crafted` images, positionally: crafted row
/// `k` lands at `plan.selected_indices[k]`. Labels are untouched.
pub fn apply_poison(
    dataset: &LabeledDataset,
    plan: &PoisonPlan,
    crafted: &Tensor,
) -> Result<PoisonedDataset, DataError> {
    let k = plan.selected_indices.len();
    if crafted.shape().len() != 4 || crafted.shape()[0] != k {
        return Err(DataError::CraftedCountMismatch {
            expected: k,
            got: if crafted.shape().is_empty() {
                0
            } else {
                crafted.shape()[0]
            },
        });
    }
    let per = dataset.image_numel();
    if k > 0 && crafted.numel() / k != per {
        return Err(DataError::BadShape {
            detail: format!(
                "crafted image numel {} != dataset image numel {per}",
                crafted.numel() / k
            ),
        });
    }

    let mut values = dataset.images().values().to_vec();
    let mut mask = vec![false; dataset.len()];
    for (row, &dest) in plan.selected_indices.iter().enumerate() {
        if dest >= dataset.len() {
            return Err(DataError::IndexOutOfRange {
                index: dest,
                len: dataset.len(),
            });
        }
        let src = &crafted.values()[row * per..(row + 1) * per];
        values[dest * per..(dest + 1) * per].copy_from_slice(src);
        mask[dest] = true;
    }

    let images = Tensor::new(dataset.images().shape(), values).map_err(|e| DataError::BadShape {
        detail: e.to_string(),
    })?;
    let data = LabeledDataset::new(
        dataset.name().to_string(),
        images,
        dataset.labels().to_vec(),
        dataset.num_classes(),
    )?;
    Ok(PoisonedDataset {
        data,
        poison_mask: mask,
    })
}

/// Load an image/label IDX file pair into a dataset named `name`.
pub fn load_idx(
    images_path: &Path,
    labels_path: &Path,
    name: impl Into<String>,
) -> Result<LabeledDataset, DataError> {
    let image_bytes = fs::read(images_path)?;
    let label_bytes = fs::read(labels_path)?;

    let magic = read_be_u32(&image_bytes, 0, "image magic")?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(DataError::BadMagic {
            expected: IDX_IMAGES_MAGIC,
            found: magic,
        });
    }
    let n = read_be_u32(&image_bytes, 4, "image count")? as usize;
    let rows = read_be_u32(&image_bytes, 8, "row count")? as usize;
    let cols = read_be_u32(&image_bytes, 12, "column count")? as usize;
    let pixel_count = n * rows * cols;
    let pixels = image_bytes
        .get(16..16 + pixel_count)
        .ok_or(DataError::Truncated {
            field: "image pixels",
        })?;

    let magic = read_be_u32(&label_bytes, 0, "label magic")?;
    if magic != IDX_LABELS_MAGIC {
        return Err(DataError::BadMagic {
            expected: IDX_LABELS_MAGIC,
            found: magic,
        });
    }
    let n_labels = read_be_u32(&label_bytes, 4, "label count")? as usize;
    let raw_labels = label_bytes.get(8..8 + n_labels).ok_or(DataError::Truncated {
        field: "label bytes",
    })?;
    if n != n_labels {
        return Err(DataError::CountMismatch {
            images: n,
            labels: n_labels,
        });
    }

    let values: Vec<f32> = pixels.iter().map(|&b| b as f32 / 255.0).collect();
    let images = Tensor::new(&[n, 1, rows, cols], values).map_err(|e| DataError::BadShape {
        detail: e.to_string(),
    })?;
    let labels: Vec<usize> = raw_labels.iter().map(|&b| b as usize).collect();
    LabeledDataset::new(name, images, labels, NUM_CLASSES)
}

fn read_be_u32(bytes: &[u8], offset: usize, field: &'static str) -> Result<u32, DataError> {
    let slice = bytes
        .get(offset..offset + 4)
        .ok_or(DataError::Truncated { field })?;
    Ok(u32::from_be_bytes([slice[0], slice[1], slice[2], slice[3]]))
}

/// Provenance record for a loaded file pair: name, file paths, content
/// digests, and sample counts, serialized to JSON next to run outputs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub name: String,
    pub paths: Vec<String>,
    pub sha256: Vec<String>,
    pub counts: Vec<usize>,
}

impl DatasetManifest {
    /// Hash the image/label pair and record the given sample count for each.
    pub fn for_pair(
        name: impl Into<String>,
        images_path: &Path,
        labels_path: &Path,
        count: usize,
    ) -> Result<DatasetManifest, DataError> {
        let mut paths = Vec::new();
        let mut digests = Vec::new();
        for path in [images_path, labels_path] {
            let bytes = fs::read(path)?;
            let mut hasher = Sha256::new();
            hasher.update(&bytes);
            digests.push(format!("{:x}", hasher.finalize()));
            paths.push(path.display().to_string());
        }
        Ok(DatasetManifest {
            name: name.into(),
            paths,
            sha256: digests,
            counts: vec![count, count],
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::path::PathBuf;

    fn tiny_dataset(labels: Vec<usize>) -> LabeledDataset {
        let n = labels.len();
        let values: Vec<f32> = (0..n * 4).map(|i| (i % 7) as f32 / 10.0).collect();
        let images = Tensor::new(&[n, 1, 2, 2], values).unwrap();
        LabeledDataset::new("tiny", images, labels, NUM_CLASSES).unwrap()
    }

    fn write_idx_pair(dir: &Path, pixels: &[u8], n: u32, labels: &[u8]) -> (PathBuf, PathBuf) {
        let ip = dir.join("imgs.idx");
        let lp = dir.join("lbls.idx");
        let mut ib = Vec::new();
        ib.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
        ib.extend_from_slice(&n.to_be_bytes());
        ib.extend_from_slice(&2u32.to_be_bytes());
        ib.extend_from_slice(&2u32.to_be_bytes());
        ib.extend_from_slice(pixels);
        fs::write(&ip, ib).unwrap();
        let mut lb = Vec::new();
        lb.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
        lb.extend_from_slice(&(labels.len() as u32).to_be_bytes());
        lb.extend_from_slice(labels);
        fs::write(&lp, lb).unwrap();
        (ip, lp)
    }

    #[test]
    fn idx_fixture_loads_exact_values() {
        let dir = tempfile::tempdir().unwrap();
        let pixels = [0u8, 255, 128, 64, 10, 20, 30, 40];
        let (ip, lp) = write_idx_pair(dir.path(), &pixels, 2, &[3, 9]);
        let ds = load_idx(&ip, &lp, "fixture").unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.images().shape(), &[2, 1, 2, 2]);
        assert_eq!(ds.labels(), &[3, 9]);
        let want: Vec<f32> = pixels.iter().map(|&b| b as f32 / 255.0).collect();
        assert_eq!(ds.images().values(), &want[..]);
        assert_eq!(ds.image(1), &want[4..]);
    }

    #[test]
    fn idx_bad_magic_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = write_idx_pair(dir.path(), &[0; 8], 2, &[0, 1]);
        let mut bytes = fs::read(&ip).unwrap();
        bytes[3] = 0x02;
        fs::write(&ip, bytes).unwrap();
        assert!(matches!(
            load_idx(&ip, &lp, "x"),
            Err(DataError::BadMagic {
                expected: IDX_IMAGES_MAGIC,
                ..
            })
        ));
    }

    #[test]
    fn idx_truncation_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = write_idx_pair(dir.path(), &[0; 8], 2, &[0, 1]);
        let bytes = fs::read(&ip).unwrap();
        fs::write(&ip, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(
            load_idx(&ip, &lp, "x"),
            Err(DataError::Truncated {
                field: "image pixels"
            })
        ));
    }

    #[test]
    fn idx_count_mismatch_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = write_idx_pair(dir.path(), &[0; 8], 2, &[0, 1, 2]);
        assert!(matches!(
            load_idx(&ip, &lp, "x"),
            Err(DataError::CountMismatch {
                images: 2,
                labels: 3
            })
        ));
    }

    #[test]
    fn out_of_range_label_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = write_idx_pair(dir.path(), &[0; 8], 2, &[0, 10]);
        assert!(matches!(
            load_idx(&ip, &lp, "x"),
            Err(DataError::LabelOutOfRange {
                label: 10,
                num_classes: NUM_CLASSES
            })
        ));
    }

    #[test]
    fn plan_counts_selects_and_sorts_within_target_class() {
        let ds = tiny_dataset(vec![4, 4, 4, 4, 9, 9, 0, 1, 2, 3]);
        let plan = make_poison_plan(&ds, 4, 9, 0.5, RatioBasis::TargetClassSubset, 7).unwrap();
        assert_eq!(plan.selected_indices.len(), 2); // round(0.5 * 4)
        assert!(plan.selected_indices.windows(2).all(|w| w[0] < w[1]));
        for &i in &plan.selected_indices {
            assert_eq!(ds.label(i), 4);
        }
        let again = make_poison_plan(&ds, 4, 9, 0.5, RatioBasis::TargetClassSubset, 7).unwrap();
        assert_eq!(again.selected_indices, plan.selected_indices);
    }

    #[test]
    fn whole_set_basis_changes_only_the_denominator() {
        let ds = tiny_dataset(vec![4, 4, 4, 4, 9, 9, 0, 1, 2, 3]);
        let plan = make_poison_plan(&ds, 4, 9, 0.2, RatioBasis::WholeSet, 7).unwrap();
        assert_eq!(plan.selected_indices.len(), 2); // round(0.2 * 10)
        for &i in &plan.selected_indices {
            assert_eq!(ds.label(i), 4);
        }
        // 0.9 of the whole set would need 9 rows, but only 4 are class 4.
        assert!(matches!(
            make_poison_plan(&ds, 4, 9, 0.9, RatioBasis::WholeSet, 7),
            Err(DataError::PlanTooLarge {
                requested: 9,
                available: 4
            })
        ));
    }

    #[test]
    fn plan_rejects_bad_inputs() {
        let ds = tiny_dataset(vec![4, 4, 9, 0]);
        assert!(matches!(
            make_poison_plan(&ds, 4, 4, 0.1, RatioBasis::TargetClassSubset, 1),
            Err(DataError::SameClass { class: 4 })
        ));
        assert!(matches!(
            make_poison_plan(&ds, 4, 9, 1.2, RatioBasis::TargetClassSubset, 1),
            Err(DataError::RatioOutOfRange { .. })
        ));
        assert!(matches!(
            make_poison_plan(&ds, 4, 9, f64::NAN, RatioBasis::TargetClassSubset, 1),
            Err(DataError::RatioOutOfRange { .. })
        ));
        // No class-7 rows at all: the basis is empty.
        assert!(matches!(
            make_poison_plan(&ds, 7, 9, 0.5, RatioBasis::TargetClassSubset, 1),
            Err(DataError::EmptyBasis)
        ));
    }

    #[test]
    fn zero_ratio_yields_empty_plan() {
        let ds = tiny_dataset(vec![4, 4, 9, 0]);
        let plan = make_poison_plan(&ds, 4, 9, 0.0, RatioBasis::TargetClassSubset, 1).unwrap();
        assert!(plan.selected_indices.is_empty());
    }

    #[test]
    fn apply_poison_replaces_positionally_and_preserves_labels() {
        let ds = tiny_dataset(vec![4, 4, 9, 0]);
        let plan = PoisonPlan {
            target_class: 4,
            donor_class: 9,
            poison_ratio: 0.5,
            ratio_basis: RatioBasis::TargetClassSubset,
            selected_indices: vec![1],
        };
        let crafted = Tensor::new(&[1, 1, 2, 2], vec![0.9, 0.8, 0.7, 0.6]).unwrap();
        let out = apply_poison(&ds, &plan, &crafted).unwrap();
        assert_eq!(out.data.labels(), ds.labels());
        assert_eq!(out.poison_mask, vec![false, true, false, false]);
        assert_eq!(out.data.image(1), &[0.9, 0.8, 0.7, 0.6]);
        assert_eq!(out.data.image(0), ds.image(0));
        assert_eq!(out.data.image(2), ds.image(2));
    }

    #[test]
    fn apply_poison_empty_plan_is_identity() {
        let ds = tiny_dataset(vec![4, 9]);
        let plan = PoisonPlan {
            target_class: 4,
            donor_class: 9,
            poison_ratio: 0.0,
            ratio_basis: RatioBasis::TargetClassSubset,
            selected_indices: vec![],
        };
        let crafted = Tensor::new(&[0, 1, 2, 2], vec![]).unwrap();
        let out = apply_poison(&ds, &plan, &crafted).unwrap();
        assert_eq!(out.data.images().values(), ds.images().values());
        assert!(out.poison_mask.iter().all(|&m| !m));
    }

    #[test]
    fn apply_poison_count_mismatch_is_rejected() {
        let ds = tiny_dataset(vec![4, 9]);
        let plan = PoisonPlan {
            target_class: 4,
            donor_class: 9,
            poison_ratio: 0.5,
            ratio_basis: RatioBasis::TargetClassSubset,
            selected_indices: vec![0],
        };
        let crafted = Tensor::new(&[2, 1, 2, 2], vec![0.0; 8]).unwrap();
        assert!(matches!(
            apply_poison(&ds, &plan, &crafted),
            Err(DataError::CraftedCountMismatch {
                expected: 1,
                got: 2
            })
        ));
    }

    #[test]
    fn subset_and_random_subset_are_deterministic() {
        let ds = tiny_dataset(vec![0, 1, 2, 3, 4, 5, 6, 7, 8, 9]);
        let sub = ds.subset(&[3, 1]).unwrap();
        assert_eq!(sub.labels(), &[3, 1]);
        assert_eq!(sub.image(0), ds.image(3));
        let a = ds.random_subset(4, 99).unwrap();
        let b = ds.random_subset(4, 99).unwrap();
        assert_eq!(a.labels(), b.labels());
        assert!(a.labels().windows(2).all(|w| w[0] < w[1]) || a.len() < 2);
    }

    #[test]
    fn real_digit_files_load_with_expected_counts() {
        let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist");
        if !root.exists() {
            panic!("expected committed digit data at {}", root.display());
        }
        let train = load_idx(
            &root.join("train-images-idx3-ubyte"),
            &root.join("train-labels-idx1-ubyte"),
            "train",
        )
        .unwrap();
        let test = load_idx(
            &root.join("t10k-images-idx3-ubyte"),
            &root.join("t10k-labels-idx1-ubyte"),
            "test",
        )
        .unwrap();
        assert_eq!(train.len(), 60000);
        assert_eq!(test.len(), 10000);
        assert_eq!(train.images().shape(), &[60000, 1, 28, 28]);
        assert_eq!(train.indices_of_class(4).len(), 5842);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn plan_size_matches_rounding_rule(
            labels in proptest::collection::vec(0usize..NUM_CLASSES, 1..40),
            ratio in 0.0f64..=1.0,
            seed in 0u64..1000,
        ) {
            let ds = tiny_dataset(labels.clone());
            let pool = ds.indices_of_class(4).len();
            let result = make_poison_plan(&ds, 4, 9, ratio, RatioBasis::TargetClassSubset, seed);
            if pool == 0 {
                prop_assert!(matches!(result, Err(DataError::EmptyBasis)));
            } else {
                let plan = result.unwrap();
                let want = (ratio * pool as f64).round() as usize;
                prop_assert_eq!(plan.selected_indices.len(), want);
                prop_assert!(plan.selected_indices.windows(2).all(|w| w[0] < w[1]));
                prop_assert!(plan.selected_indices.iter().all(|&i| ds.label(i) == 4));
            }
        }

        #[test]
        fn poisoned_labels_always_match_base(
            labels in proptest::collection::vec(0usize..NUM_CLASSES, 1..20),
            ratio in 0.0f64..=1.0,
            seed in 0u64..1000,
        ) {
            let ds = tiny_dataset(labels);
            if ds.indices_of_class(4).is_empty() {
                return Ok(());
            }
            let plan = make_poison_plan(&ds, 4, 9, ratio, RatioBasis::TargetClassSubset, seed).unwrap();
            let k = plan.selected_indices.len();
            let crafted = Tensor::new(&[k, 1, 2, 2], vec![0.5; k * 4]).unwrap();
            let out = apply_poison(&ds, &plan, &crafted).unwrap();
            prop_assert_eq!(out.data.labels(), ds.labels());
            for (i, &flag) in out.poison_mask.iter().enumerate() {
                prop_assert_eq!(flag, plan.selected_indices.contains(&i));
            }
        }
    }
}
