//! Data poisoning and report inflation used by malicious clients, plus the
//! triggered test set that measures backdoor success.
//!
//! Every poisoning function is pure: it samples victim rows with a generator
//! seeded only by the attack spec, edits a copy of the dataset, and leaves
//! the input untouched, so a fixed `(data, spec)` pair always produces the
//! same poisoned output.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::aggregate::ClientUpdate;
use crate::data::{seeded_shuffle, Dataset};
use crate::error::{Error, Result};

/// Pixel coordinates stamped onto an image, all set to one value.
#[derive(Debug, Clone, PartialEq)]
pub struct TriggerPattern {
    /// `(row, col)` pairs within the image grid.
    pub pixel_coords: Vec<(usize, usize)>,
    /// Intensity written at each coordinate; must lie in `[0, 1]`.
    pub value: f64,
}

impl TriggerPattern {
    /// A small plus sign in the upper-left region of an `height x width`
    /// image.
    ///
    /// On the 28x28 reference grid the sign is centred at `(3, 3)` with arms
    /// two pixels long (rows 1..=5 of column 3 and columns 1..=5 of row 3);
    /// other grids scale the centre and arm length proportionally, keeping
    /// at least a one-pixel arm.
    pub fn cross(height: usize, width: usize) -> Result<TriggerPattern> {
        if height < 3 || width < 3 {
            return Err(Error::InvalidInput(format!(
                "image {height}x{width} is too small for a cross trigger"
            )));
        }
        let scale = |reference: usize, extent: usize| -> usize {
            let v = (reference * extent) as f64 / 28.0;
            (v.round() as usize).max(1)
        };
        let centre_r = scale(3, height).min(height - 2);
        let centre_c = scale(3, width).min(width - 2);
        let arm_r = scale(2, height).min(centre_r);
        let arm_c = scale(2, width).min(centre_c);
        let mut pixel_coords = Vec::new();
        for r in centre_r - arm_r..=(centre_r + arm_r).min(height - 1) {
            pixel_coords.push((r, centre_c));
        }
        for c in centre_c - arm_c..=(centre_c + arm_c).min(width - 1) {
            if c != centre_c {
                pixel_coords.push((centre_r, c));
            }
        }
        pixel_coords.sort_unstable();
        Ok(TriggerPattern {
            pixel_coords,
            value: 1.0,
        })
    }

    fn validate(&self, data: &Dataset) -> Result<()> {
        if self.pixel_coords.is_empty() {
            return Err(Error::InvalidInput("trigger has no pixels".to_string()));
        }
        if !(0.0..=1.0).contains(&self.value) {
            return Err(Error::InvalidInput(format!(
                "trigger value {} outside [0, 1]",
                self.value
            )));
        }
        for &(r, c) in &self.pixel_coords {
            if r >= data.image_height() || c >= data.image_width() {
                return Err(Error::InvalidInput(format!(
                    "trigger pixel ({r}, {c}) outside {}x{} images",
                    data.image_height(),
                    data.image_width()
                )));
            }
        }
        Ok(())
    }

    fn stamp(&self, row: &mut [f64], width: usize) {
        for &(r, c) in &self.pixel_coords {
            row[r * width + c] = self.value;
        }
    }
}

/// Kind of client-side misbehaviour.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackKind {
    None,
    Backdoor,
    LabelFlip,
}

/// Full description of one client's attack.
#[derive(Debug, Clone, PartialEq)]
pub struct AttackSpec {
    pub kind: AttackKind,
    /// Fraction of the client's examples to poison, in `[0, 1]`.
    pub fraction: f64,
    /// Class the attack steers predictions toward.
    pub target_label: usize,
    /// Trigger stamped by backdoor attacks; unused otherwise.
    pub trigger: Option<TriggerPattern>,
    /// Factor applied to the reported example count (1 = honest).
    pub weight_multiplier: f64,
    /// Seed for victim-row sampling.
    pub seed: u64,
}

impl AttackSpec {
    /// Spec for a well-behaved client: nothing poisoned, honest report.
    pub fn benign() -> AttackSpec {
        AttackSpec {
            kind: AttackKind::None,
            fraction: 0.0,
            target_label: 0,
            trigger: None,
            weight_multiplier: 1.0,
            seed: 0,
        }
    }

    fn validate_common(&self, data: &Dataset) -> Result<()> {
        if !(self.fraction.is_finite() && (0.0..=1.0).contains(&self.fraction)) {
            return Err(Error::InvalidInput(format!(
                "attack fraction {} outside [0, 1]",
                self.fraction
            )));
        }
        if self.target_label >= data.class_count() {
            return Err(Error::InvalidInput(format!(
                "target label {} exceeds class count {}",
                self.target_label,
                data.class_count()
            )));
        }
        Ok(())
    }
}

/// Stamps the trigger onto a sampled fraction of a copy of `data` and
/// relabels those rows to the target class. Unsampled rows stay bitwise
/// identical.
pub fn apply_backdoor(data: &Dataset, spec: &AttackSpec) -> Result<Dataset> {
    if spec.kind != AttackKind::Backdoor {
        return Err(Error::InvalidInput(format!(
            "apply_backdoor called with {:?} attack",
            spec.kind
        )));
    }
    let trigger = spec
        .trigger
        .as_ref()
        .ok_or_else(|| Error::InvalidInput("backdoor attack needs a trigger".to_string()))?;
    spec.validate_common(data)?;
    trigger.validate(data)?;
    let victims = sample_rows(data.len(), spec.fraction, spec.seed);
    let width = data.image_width();
    let mut poisoned = data.clone();
    for &row in &victims {
        trigger.stamp(poisoned.row_mut(row), width);
        poisoned.set_label(row, spec.target_label);
    }
    Ok(poisoned)
}

/// Stamps the trigger onto a sampled fraction of the test set while keeping
/// every original label, for measuring what a backdoored model does on
/// triggered inputs.
pub fn poison_test_set(data: &Dataset, spec: &AttackSpec) -> Result<Dataset> {
    Ok(build_triggered_test(data, spec)?.data)
}

/// Relabels a sampled fraction of a copy of `data` to the target class,
/// drawing victims only from rows whose label differs from the target.
/// Features are never touched.
pub fn apply_label_flip(data: &Dataset, spec: &AttackSpec) -> Result<Dataset> {
    if spec.kind != AttackKind::LabelFlip {
        return Err(Error::InvalidInput(format!(
            "apply_label_flip called with {:?} attack",
            spec.kind
        )));
    }
    spec.validate_common(data)?;
    let victim_count = round_count(spec.fraction, data.len());
    let mut eligible: Vec<usize> = (0..data.len())
        .filter(|&i| data.labels()[i] != spec.target_label)
        .collect();
    if eligible.len() < victim_count {
        return Err(Error::InvalidInput(format!(
            "cannot flip {victim_count} labels: only {} examples differ from the target",
            eligible.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    seeded_shuffle(&mut eligible, &mut rng);
    let mut poisoned = data.clone();
    for &row in &eligible[..victim_count] {
        poisoned.set_label(row, spec.target_label);
    }
    Ok(poisoned)
}

/// Multiplies an update's reported example count, rounding half away from
/// zero. A multiplier of 1 leaves the update unchanged.
pub fn inflate_report(update: ClientUpdate, multiplier: f64) -> Result<ClientUpdate> {
    if !(multiplier.is_finite() && multiplier > 0.0) {
        return Err(Error::InvalidInput(format!(
            "weight multiplier must be finite and positive, got {multiplier}"
        )));
    }
    let reported = (multiplier * update.reported_examples as f64).round() as usize;
    Ok(ClientUpdate {
        reported_examples: reported,
        ..update
    })
}

/// A test set with the trigger stamped onto a known subset of rows.
///
/// Labels are the original ones, so accuracy on this set mixes clean and
/// triggered behaviour; the mask records which rows carry the trigger.
#[derive(Debug, Clone)]
pub struct TriggeredTestSet {
    pub data: Dataset,
    /// `triggered[i]` is true when row `i` carries the trigger.
    pub triggered: Vec<bool>,
    /// Class the trigger is meant to force.
    pub target_label: usize,
}

/// Builds a [`TriggeredTestSet`] by stamping the attack's trigger onto a
/// sampled fraction of the rows, keeping all labels.
pub fn build_triggered_test(data: &Dataset, spec: &AttackSpec) -> Result<TriggeredTestSet> {
    if spec.kind != AttackKind::Backdoor {
        return Err(Error::InvalidInput(format!(
            "triggered test set needs a backdoor spec, got {:?}",
            spec.kind
        )));
    }
    let trigger = spec
        .trigger
        .as_ref()
        .ok_or_else(|| Error::InvalidInput("backdoor attack needs a trigger".to_string()))?;
    spec.validate_common(data)?;
    trigger.validate(data)?;
    let victims = sample_rows(data.len(), spec.fraction, spec.seed);
    let width = data.image_width();
    let mut poisoned = data.clone();
    let mut triggered = vec![false; data.len()];
    for &row in &victims {
        trigger.stamp(poisoned.row_mut(row), width);
        triggered[row] = true;
    }
    Ok(TriggeredTestSet {
        data: poisoned,
        triggered,
        target_label: spec.target_label,
    })
}

/// Number of rows a fraction selects: `fraction * n` rounded half away from
/// zero.
fn round_count(fraction: f64, n: usize) -> usize {
    (fraction * n as f64).round() as usize
}

/// The first `round_count(fraction, n)` positions of a seeded shuffle of
/// `0..n`.
fn sample_rows(n: usize, fraction: f64, seed: u64) -> Vec<usize> {
    let mut rows: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    seeded_shuffle(&mut rows, &mut rng);
    rows.truncate(round_count(fraction, n));
    rows
}
