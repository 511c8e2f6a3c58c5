//! Dataset container, IDX ingestion, synthetic data generation, and the
//! balanced IID partitioner.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::seed::mix;
use crate::tensor::Tensor2D;

/// IDX magic number for unsigned-byte image stacks (dtype 0x08, 3 dims).
const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
/// IDX magic number for unsigned-byte label vectors (dtype 0x08, 1 dim).
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Low and high intensities of the synthetic class-mean patterns.
const SYNTH_LO: f64 = 0.2;
const SYNTH_HI: f64 = 0.8;

/// Labeled image examples with features flattened row-major and scaled to
/// `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: Tensor2D,
    labels: Vec<usize>,
    image_height: usize,
    image_width: usize,
    class_count: usize,
}

impl Dataset {
    /// Validates and assembles a dataset: at least one example, one label
    /// per row, every label below `class_count`, feature width equal to
    /// `image_height * image_width`, and every feature within `[0, 1]`.
    pub fn new(
        features: Tensor2D,
        labels: Vec<usize>,
        image_height: usize,
        image_width: usize,
        class_count: usize,
    ) -> Result<Dataset> {
        if features.rows() == 0 {
            return Err(Error::InvalidInput("dataset has no examples".to_string()));
        }
        if labels.len() != features.rows() {
            return Err(Error::ShapeMismatch(format!(
                "{} feature rows vs {} labels",
                features.rows(),
                labels.len()
            )));
        }
        if features.cols() != image_height * image_width {
            return Err(Error::ShapeMismatch(format!(
                "feature width {} does not match {image_height}x{image_width} images",
                features.cols()
            )));
        }
        if class_count == 0 {
            return Err(Error::InvalidInput("class_count must be positive".to_string()));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= class_count) {
            return Err(Error::InvalidInput(format!(
                "label {bad} exceeds class_count {class_count}"
            )));
        }
        if !features.data().iter().all(|&v| (0.0..=1.0).contains(&v)) {
            return Err(Error::InvalidInput(
                "feature values must lie in [0, 1]".to_string(),
            ));
        }
        Ok(Dataset {
            features,
            labels,
            image_height,
            image_width,
            class_count,
        })
    }

    pub fn features(&self) -> &Tensor2D {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// Number of examples.
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_height(&self) -> usize {
        self.image_height
    }

    pub fn image_width(&self) -> usize {
        self.image_width
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    /// Feature dimension per example.
    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    /// Gathers the given rows into a new dataset with the same geometry.
    pub fn select(&self, indices: &[usize]) -> Result<Dataset> {
        if let Some(&bad) = indices.iter().find(|&&i| i >= self.len()) {
            return Err(Error::InvalidInput(format!(
                "row index {bad} out of range for {} examples",
                self.len()
            )));
        }
        let dim = self.dim();
        let mut data = Vec::with_capacity(indices.len() * dim);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            data.extend_from_slice(self.features.row(i));
            labels.push(self.labels[i]);
        }
        Dataset::new(
            Tensor2D::new(indices.len(), dim, data)?,
            labels,
            self.image_height,
            self.image_width,
            self.class_count,
        )
    }

    /// Per-class example counts, indexed by class.
    pub fn class_histogram(&self) -> Vec<usize> {
        let mut counts = vec![0usize; self.class_count];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    /// Replaces the label of one example; the new label must be in range.
    pub(crate) fn set_label(&mut self, row: usize, label: usize) {
        debug_assert!(row < self.len() && label < self.class_count);
        self.labels[row] = label;
    }

    /// Mutable access to one example's features for in-place edits.
    pub(crate) fn row_mut(&mut self, row: usize) -> &mut [f64] {
        let dim = self.dim();
        &mut self.features.data_mut()[row * dim..(row + 1) * dim]
    }
}

/// Parses big-endian IDX image and label streams into a dataset.
///
/// Pixel bytes are scaled to `[0, 1]` by dividing by 255; the class count is
/// one past the largest label present.
pub fn load_idx(images: &[u8], labels: &[u8]) -> Result<Dataset> {
    let images_magic = read_be_u32(images, 0, "images")?;
    if images_magic != IDX_IMAGES_MAGIC {
        return Err(Error::IdxMagic {
            stream: "images",
            found: images_magic,
            expected: IDX_IMAGES_MAGIC,
        });
    }
    let labels_magic = read_be_u32(labels, 0, "labels")?;
    if labels_magic != IDX_LABELS_MAGIC {
        return Err(Error::IdxMagic {
            stream: "labels",
            found: labels_magic,
            expected: IDX_LABELS_MAGIC,
        });
    }

    let image_count = read_be_u32(images, 4, "images")? as usize;
    let height = read_be_u32(images, 8, "images")? as usize;
    let width = read_be_u32(images, 12, "images")? as usize;
    let label_count = read_be_u32(labels, 4, "labels")? as usize;
    if image_count != label_count {
        return Err(Error::IdxCountMismatch {
            images: image_count,
            labels: label_count,
        });
    }

    let pixel_bytes = image_count * height * width;
    if images.len() < 16 + pixel_bytes {
        return Err(Error::IdxTruncated {
            stream: "images",
            needed: 16 + pixel_bytes,
            found: images.len(),
        });
    }
    if labels.len() < 8 + label_count {
        return Err(Error::IdxTruncated {
            stream: "labels",
            needed: 8 + label_count,
            found: labels.len(),
        });
    }

    let features: Vec<f64> = images[16..16 + pixel_bytes]
        .iter()
        .map(|&b| f64::from(b) / 255.0)
        .collect();
    let label_values: Vec<usize> = labels[8..8 + label_count]
        .iter()
        .map(|&b| b as usize)
        .collect();
    let class_count = match label_values.iter().max() {
        Some(&max) => max + 1,
        None => return Err(Error::InvalidInput("IDX streams hold no examples".to_string())),
    };
    Dataset::new(
        Tensor2D::new(image_count, height * width, features)?,
        label_values,
        height,
        width,
        class_count,
    )
}

fn read_be_u32(bytes: &[u8], offset: usize, stream: &'static str) -> Result<u32> {
    match bytes.get(offset..offset + 4) {
        Some(chunk) => Ok(u32::from_be_bytes(chunk.try_into().expect("4-byte slice"))),
        None => Err(Error::IdxTruncated {
            stream,
            needed: offset + 4,
            found: bytes.len(),
        }),
    }
}

/// Generates a synthetic classification dataset of square images.
///
/// Class `c` has a mean pattern that is high (0.8) at coordinates `j` with
/// `j % class_count == c` and low (0.2) elsewhere; each example adds
/// `noise * N(0, 1)` per coordinate and clamps to `[0, 1]`. Examples are
/// laid out class by class, so the labels come out grouped
/// (`0, ..., 0, 1, ..., 1, ...`). The draw order is fixed (class, example,
/// coordinate), making the output a pure function of the arguments.
pub fn synth_generate(
    seed: u64,
    per_class: usize,
    class_count: usize,
    dim: usize,
    noise: f64,
) -> Result<Dataset> {
    if per_class == 0 {
        return Err(Error::InvalidInput("per_class must be at least 1".to_string()));
    }
    if class_count < 2 {
        return Err(Error::InvalidInput(
            "class_count must be at least 2".to_string(),
        ));
    }
    let side = (dim as f64).sqrt().round() as usize;
    if side * side != dim {
        return Err(Error::InvalidInput(format!(
            "dim {dim} is not a perfect square"
        )));
    }
    if dim < class_count {
        return Err(Error::InvalidInput(format!(
            "dim {dim} is smaller than class_count {class_count}"
        )));
    }
    if !(noise.is_finite() && noise >= 0.0) {
        return Err(Error::InvalidInput(format!(
            "noise must be finite and non-negative, got {noise}"
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = StandardNormal;
    let n = per_class * class_count;
    let mut data = Vec::with_capacity(n * dim);
    let mut labels = Vec::with_capacity(n);
    for c in 0..class_count {
        for _ in 0..per_class {
            for j in 0..dim {
                let mean = if j % class_count == c { SYNTH_HI } else { SYNTH_LO };
                let z: f64 = normal.sample(&mut rng);
                data.push((mean + noise * z).clamp(0.0, 1.0));
            }
            labels.push(c);
        }
    }
    Dataset::new(Tensor2D::new(n, dim, data)?, labels, side, side, class_count)
}

/// How to split a dataset into disjoint subsets.
#[derive(Debug, Clone)]
pub struct PartitionPlan {
    /// Number of subsets; must be at least 2 (one server subset plus
    /// clients).
    pub subset_count: usize,
    pub seed: u64,
}

/// Splits a dataset into `subset_count` class-balanced, disjoint subsets.
///
/// Within each class the examples are shuffled (seeded by the plan seed and
/// the class index) and dealt round-robin, so per-class counts across
/// subsets differ by at most one. Subset rows keep the original dataset's
/// relative order.
pub fn partition_iid(data: &Dataset, plan: &PartitionPlan) -> Result<Vec<Dataset>> {
    if plan.subset_count < 2 {
        return Err(Error::InvalidInput(
            "subset_count must be at least 2".to_string(),
        ));
    }
    if data.len() < plan.subset_count {
        return Err(Error::InvalidInput(format!(
            "cannot split {} examples into {} subsets",
            data.len(),
            plan.subset_count
        )));
    }
    let mut buckets: Vec<Vec<usize>> = vec![Vec::new(); plan.subset_count];
    for c in 0..data.class_count() {
        let mut members: Vec<usize> = (0..data.len())
            .filter(|&i| data.labels()[i] == c)
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(mix(&[plan.seed, c as u64]));
        seeded_shuffle(&mut members, &mut rng);
        for (i, idx) in members.into_iter().enumerate() {
            buckets[i % plan.subset_count].push(idx);
        }
    }
    buckets
        .into_iter()
        .map(|mut indices| {
            indices.sort_unstable();
            data.select(&indices)
        })
        .collect()
}

/// Draws a class-balanced sample of `total` examples without replacement.
///
/// Each class contributes `total / class_count` examples, with the remainder
/// spread over the lowest class indices; sampling within a class is a seeded
/// shuffle. Used to cut a large training set down to desk scale before
/// partitioning.
pub fn subsample_balanced(data: &Dataset, total: usize, seed: u64) -> Result<Dataset> {
    if total == 0 || total > data.len() {
        return Err(Error::InvalidInput(format!(
            "cannot sample {total} examples from {}",
            data.len()
        )));
    }
    let classes = data.class_count();
    let histogram = data.class_histogram();
    let mut picked = Vec::with_capacity(total);
    for c in 0..classes {
        let quota = total / classes + usize::from(c < total % classes);
        if quota > histogram[c] {
            return Err(Error::InvalidInput(format!(
                "class {c} has {} examples, need {quota} for a balanced sample",
                histogram[c]
            )));
        }
        let mut members: Vec<usize> = (0..data.len())
            .filter(|&i| data.labels()[i] == c)
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(mix(&[seed, c as u64]));
        seeded_shuffle(&mut members, &mut rng);
        picked.extend_from_slice(&members[..quota]);
    }
    picked.sort_unstable();
    data.select(&picked)
}

/// Fisher-Yates shuffle shared by the partitioner and samplers.
pub(crate) fn seeded_shuffle(items: &mut [usize], rng: &mut ChaCha8Rng) {
    use rand::Rng;
    for i in (1..items.len()).rev() {
        let j = rng.random_range(0..=i);
        items.swap(i, j);
    }
}
