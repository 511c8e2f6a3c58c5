//! Experiment config files: a flat INI-style format with one section per
//! experiment.
//!
//! ```text
//! # lines starting with # are comments
//! [demo]
//! strategy = fedbayes
//! rounds = 20
//! data = synthetic
//! synth.noise = 0.3
//! attack.0.kind = backdoor
//! attack.0.fraction = 0.7
//! attack.0.target_label = 2
//! attack.0.trigger = cross
//! ```
//!
//! Every omitted key takes a documented default, every unknown key is
//! rejected, and the parsed [`ExperimentConfig`] carries the effective
//! values (defaults applied, seeds derived), so serialising it reproduces
//! the run exactly.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use serde::Serialize;

use crate::aggregate::{ServerOptHyper, Strategy};
use crate::attack::{AttackKind, AttackSpec, TriggerPattern};
use crate::error::{Error, Result};
use crate::federation::FederationConfig;
use crate::nn::TrainConfig;
use crate::seed::{mix, STREAM_ATTACK};

pub const DEFAULT_ROUNDS: usize = 100;
pub const DEFAULT_LOCAL_EPOCHS: usize = 5;
pub const DEFAULT_CLIENT_COUNT: usize = 8;
pub const DEFAULT_MASTER_SEED: u64 = 42;
pub const DEFAULT_LEARNING_RATE: f64 = 0.02;
pub const DEFAULT_BATCH_SIZE: usize = 32;
pub const DEFAULT_HIDDEN_UNITS: usize = 64;
pub const DEFAULT_PRETRAIN_EPOCHS: usize = 30;
pub const DEFAULT_TEST_TRIGGER_FRACTION: f64 = 0.5;
pub const DEFAULT_OUTPUT_DIR: &str = "runs";
pub const DEFAULT_SYNTH_PER_CLASS: usize = 200;
pub const DEFAULT_SYNTH_CLASSES: usize = 10;
pub const DEFAULT_SYNTH_DIM: usize = 64;
pub const DEFAULT_SYNTH_NOISE: f64 = 0.30;
pub const DEFAULT_SYNTH_TEST_PER_CLASS: usize = 100;
pub const DEFAULT_IDX_PER_CLIENT_BUDGET: usize = 2000;

/// Where a run's data comes from, with the effective parameters.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "source", rename_all = "lowercase")]
pub enum DataConfig {
    /// Synthetic square images with per-class mean patterns.
    Synthetic {
        per_class: usize,
        classes: usize,
        dim: usize,
        noise: f64,
        test_per_class: usize,
    },
    /// IDX image and label files; relative paths resolve against the
    /// `FEDBAYES_DATA_DIR` environment variable when it is set.
    Idx {
        train_images: String,
        train_labels: String,
        test_images: String,
        test_labels: String,
        /// Training examples kept per subset before partitioning
        /// (class-balanced); 0 keeps the full training set.
        per_client_budget: usize,
    },
}

/// One client's attack as configured, with defaults and the derived
/// sampling seed filled in.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AttackConfig {
    pub kind: AttackKind,
    pub fraction: f64,
    pub target_label: usize,
    /// Trigger shape name; `cross` is the only shape. Required for
    /// backdoor attacks, rejected otherwise.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub trigger: Option<String>,
    pub trigger_value: f64,
    pub weight_multiplier: f64,
    pub seed: u64,
}

/// One experiment section with every effective value resolved.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentConfig {
    pub name: String,
    pub strategy: Strategy,
    pub rounds: usize,
    pub local_epochs: usize,
    pub client_count: usize,
    pub master_seed: u64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub hidden_units: usize,
    pub pretrain_epochs: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pretrain_target_accuracy: Option<f64>,
    /// Fraction of the clean test set that receives the trigger when a
    /// backdoor attack is configured.
    pub test_trigger_fraction: f64,
    pub output_dir: String,
    pub data: DataConfig,
    pub server: ServerOptHyper,
    pub attacks: BTreeMap<usize, AttackConfig>,
}

/// A parsed config file: experiments in file order.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentFile {
    pub experiments: Vec<ExperimentConfig>,
}

/// Command-line values that take precedence over the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    /// Replaces every experiment's master seed (and therefore all derived
    /// seeds).
    pub master_seed: Option<u64>,
    /// Replaces every experiment's output directory.
    pub output_dir: Option<String>,
}

/// Reads and parses a config file.
pub fn parse_config(path: &Path) -> Result<ExperimentFile> {
    parse_config_with(path, &Overrides::default())
}

/// Reads and parses a config file, applying command-line overrides before
/// seeds are derived.
pub fn parse_config_with(path: &Path, overrides: &Overrides) -> Result<ExperimentFile> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config_str(&text, overrides)
}

/// Parses config text; see the module docs for the format.
pub fn parse_config_str(text: &str, overrides: &Overrides) -> Result<ExperimentFile> {
    let sections = split_sections(text)?;
    let mut experiments = Vec::with_capacity(sections.len());
    for (name, pairs) in sections {
        experiments.push(build_experiment(&name, pairs, overrides)?);
    }
    Ok(ExperimentFile { experiments })
}

/// Raw `key = value` pairs per section, in file order.
fn split_sections(text: &str) -> Result<Vec<(String, Vec<(String, String)>)>> {
    let mut sections: Vec<(String, Vec<(String, String)>)> = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = raw.trim();
        let lineno = idx + 1;
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if let Some(rest) = line.strip_prefix('[') {
            let name = rest.strip_suffix(']').ok_or_else(|| Error::Config {
                key: format!("line {lineno}"),
                message: format!("malformed section header `{line}`"),
            })?;
            if name.is_empty()
                || !name
                    .chars()
                    .all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-')
            {
                return Err(Error::Config {
                    key: format!("line {lineno}"),
                    message: format!(
                        "experiment name `{name}` may only contain letters, digits, `_`, and `-`"
                    ),
                });
            }
            if sections.iter().any(|(n, _)| n == name) {
                return Err(Error::Config {
                    key: format!("line {lineno}"),
                    message: format!("duplicate experiment `{name}`"),
                });
            }
            sections.push((name.to_string(), Vec::new()));
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| Error::Config {
            key: format!("line {lineno}"),
            message: format!("expected `key = value`, got `{line}`"),
        })?;
        let (key, value) = (key.trim().to_string(), value.trim().to_string());
        let section = sections.last_mut().ok_or_else(|| Error::Config {
            key: key.clone(),
            message: "key appears before any [experiment] section".to_string(),
        })?;
        if section.1.iter().any(|(k, _)| *k == key) {
            return Err(Error::Config {
                key,
                message: format!("duplicate key in experiment `{}`", section.0),
            });
        }
        section.1.push((key, value));
    }
    Ok(sections)
}

/// Key-value pairs of one section with take-and-track-consumption access.
struct Pairs {
    entries: Vec<(String, String, bool)>,
}

impl Pairs {
    fn new(pairs: Vec<(String, String)>) -> Pairs {
        Pairs {
            entries: pairs.into_iter().map(|(k, v)| (k, v, false)).collect(),
        }
    }

    fn take(&mut self, key: &str) -> Option<String> {
        self.entries.iter_mut().find(|(k, _, used)| k == key && !used).map(
            |(_, v, used)| {
                *used = true;
                v.clone()
            },
        )
    }

    /// Unconsumed keys with a given prefix, in file order.
    fn take_prefixed(&mut self, prefix: &str) -> Vec<(String, String)> {
        let mut out = Vec::new();
        for (k, v, used) in self.entries.iter_mut() {
            if !*used && k.starts_with(prefix) {
                *used = true;
                out.push((k.clone(), v.clone()));
            }
        }
        out
    }

    fn first_unused(&self) -> Option<&str> {
        self.entries
            .iter()
            .find(|(_, _, used)| !used)
            .map(|(k, _, _)| k.as_str())
    }
}

fn build_experiment(
    name: &str,
    pairs: Vec<(String, String)>,
    overrides: &Overrides,
) -> Result<ExperimentConfig> {
    let mut pairs = Pairs::new(pairs);

    let strategy_text = pairs.take("strategy").ok_or_else(|| Error::Config {
        key: "strategy".to_string(),
        message: format!("missing in experiment `{name}`"),
    })?;
    let strategy = Strategy::from_str(&strategy_text).map_err(|e| Error::Config {
        key: "strategy".to_string(),
        message: e.to_string(),
    })?;

    let rounds = take_usize(&mut pairs, "rounds", DEFAULT_ROUNDS, 1)?;
    let local_epochs = take_usize(&mut pairs, "local_epochs", DEFAULT_LOCAL_EPOCHS, 1)?;
    let client_count = take_usize(&mut pairs, "client_count", DEFAULT_CLIENT_COUNT, 1)?;
    let mut master_seed = take_u64(&mut pairs, "master_seed", DEFAULT_MASTER_SEED)?;
    if let Some(seed) = overrides.master_seed {
        master_seed = seed;
    }
    let learning_rate = take_f64(&mut pairs, "learning_rate", DEFAULT_LEARNING_RATE)?;
    if !(learning_rate.is_finite() && learning_rate >= 0.0) {
        return Err(Error::Config {
            key: "learning_rate".to_string(),
            message: format!("must be finite and non-negative, got {learning_rate}"),
        });
    }
    let batch_size = take_usize(&mut pairs, "batch_size", DEFAULT_BATCH_SIZE, 1)?;
    let hidden_units = take_usize(&mut pairs, "hidden_units", DEFAULT_HIDDEN_UNITS, 1)?;
    let pretrain_epochs = take_usize(&mut pairs, "pretrain_epochs", DEFAULT_PRETRAIN_EPOCHS, 0)?;
    let pretrain_target_accuracy = match pairs.take("pretrain_target_accuracy") {
        Some(v) => Some(parse_fraction("pretrain_target_accuracy", &v)?),
        None => None,
    };
    let test_trigger_fraction = match pairs.take("test_trigger_fraction") {
        Some(v) => parse_fraction("test_trigger_fraction", &v)?,
        None => DEFAULT_TEST_TRIGGER_FRACTION,
    };
    let mut output_dir = pairs
        .take("output_dir")
        .unwrap_or_else(|| DEFAULT_OUTPUT_DIR.to_string());
    if let Some(dir) = &overrides.output_dir {
        output_dir = dir.clone();
    }

    let data = build_data(&mut pairs)?;
    let server = build_server(&mut pairs)?;
    let attacks = build_attacks(&mut pairs, client_count, master_seed)?;

    if let Some(key) = pairs.first_unused() {
        return Err(Error::Config {
            key: key.to_string(),
            message: format!("unknown key in experiment `{name}`"),
        });
    }

    Ok(ExperimentConfig {
        name: name.to_string(),
        strategy,
        rounds,
        local_epochs,
        client_count,
        master_seed,
        learning_rate,
        batch_size,
        hidden_units,
        pretrain_epochs,
        pretrain_target_accuracy,
        test_trigger_fraction,
        output_dir,
        data,
        server,
        attacks,
    })
}

fn build_data(pairs: &mut Pairs) -> Result<DataConfig> {
    let source = pairs.take("data").unwrap_or_else(|| "synthetic".to_string());
    match source.as_str() {
        "synthetic" => {
            reject_prefixed(pairs, "idx.", "only valid when data = idx")?;
            Ok(DataConfig::Synthetic {
                per_class: take_usize(pairs, "synth.per_class", DEFAULT_SYNTH_PER_CLASS, 1)?,
                classes: take_usize(pairs, "synth.classes", DEFAULT_SYNTH_CLASSES, 2)?,
                dim: take_usize(pairs, "synth.dim", DEFAULT_SYNTH_DIM, 1)?,
                noise: {
                    let noise = take_f64(pairs, "synth.noise", DEFAULT_SYNTH_NOISE)?;
                    if !(noise.is_finite() && noise >= 0.0) {
                        return Err(Error::Config {
                            key: "synth.noise".to_string(),
                            message: format!("must be finite and non-negative, got {noise}"),
                        });
                    }
                    noise
                },
                test_per_class: take_usize(
                    pairs,
                    "synth.test_per_class",
                    DEFAULT_SYNTH_TEST_PER_CLASS,
                    1,
                )?,
            })
        }
        "idx" => {
            reject_prefixed(pairs, "synth.", "only valid when data = synthetic")?;
            let mut path = |key: &str| {
                pairs.take(key).ok_or_else(|| Error::Config {
                    key: key.to_string(),
                    message: "missing (required when data = idx)".to_string(),
                })
            };
            Ok(DataConfig::Idx {
                train_images: path("idx.train_images")?,
                train_labels: path("idx.train_labels")?,
                test_images: path("idx.test_images")?,
                test_labels: path("idx.test_labels")?,
                per_client_budget: take_usize(
                    pairs,
                    "idx.per_client_budget",
                    DEFAULT_IDX_PER_CLIENT_BUDGET,
                    0,
                )?,
            })
        }
        other => Err(Error::Config {
            key: "data".to_string(),
            message: format!("unknown source `{other}`; valid: synthetic, idx"),
        }),
    }
}

fn reject_prefixed(pairs: &mut Pairs, prefix: &str, message: &str) -> Result<()> {
    if let Some((key, _)) = pairs.take_prefixed(prefix).into_iter().next() {
        return Err(Error::Config {
            key,
            message: message.to_string(),
        });
    }
    Ok(())
}

fn build_server(pairs: &mut Pairs) -> Result<ServerOptHyper> {
    let defaults = ServerOptHyper::default();
    let hyper = ServerOptHyper {
        eta: take_f64(pairs, "server.eta", defaults.eta)?,
        beta1: take_f64(pairs, "server.beta1", defaults.beta1)?,
        beta2: take_f64(pairs, "server.beta2", defaults.beta2)?,
        tau: take_f64(pairs, "server.tau", defaults.tau)?,
    };
    for (key, value, lo_open, hi) in [
        ("server.eta", hyper.eta, true, f64::INFINITY),
        ("server.beta1", hyper.beta1, false, 1.0),
        ("server.beta2", hyper.beta2, false, 1.0),
        ("server.tau", hyper.tau, true, f64::INFINITY),
    ] {
        let lo_ok = if lo_open { value > 0.0 } else { value >= 0.0 };
        if !(value.is_finite() && lo_ok && value < hi) {
            return Err(Error::Config {
                key: key.to_string(),
                message: format!("value {value} out of range"),
            });
        }
    }
    Ok(hyper)
}

fn build_attacks(
    pairs: &mut Pairs,
    client_count: usize,
    master_seed: u64,
) -> Result<BTreeMap<usize, AttackConfig>> {
    let mut grouped: BTreeMap<usize, Vec<(String, String, String)>> = BTreeMap::new();
    for (key, value) in pairs.take_prefixed("attack.") {
        let rest = &key["attack.".len()..];
        let (idx_text, field) = rest.split_once('.').ok_or_else(|| Error::Config {
            key: key.clone(),
            message: "expected attack.<client>.<field>".to_string(),
        })?;
        let idx: usize = idx_text.parse().map_err(|_| Error::Config {
            key: key.clone(),
            message: format!("`{idx_text}` is not a client index"),
        })?;
        if idx >= client_count {
            return Err(Error::Config {
                key: key.clone(),
                message: format!("client {idx} out of range: client_count is {client_count}"),
            });
        }
        let field = field.to_string();
        grouped.entry(idx).or_default().push((key, field, value));
    }

    let mut attacks = BTreeMap::new();
    for (idx, fields) in grouped {
        attacks.insert(idx, build_one_attack(idx, fields, master_seed)?);
    }
    Ok(attacks)
}

fn build_one_attack(
    idx: usize,
    fields: Vec<(String, String, String)>,
    master_seed: u64,
) -> Result<AttackConfig> {
    let mut kind = None;
    let mut fraction = 0.0;
    let mut target_label = 0usize;
    let mut trigger = None;
    let mut trigger_value = 1.0;
    let mut weight_multiplier = 1.0;
    let mut seed = None;
    for (key, field, value) in fields {
        match field.as_str() {
            "kind" => {
                kind = Some(match value.as_str() {
                    "none" => AttackKind::None,
                    "backdoor" => AttackKind::Backdoor,
                    "label_flip" => AttackKind::LabelFlip,
                    other => {
                        return Err(Error::Config {
                            key,
                            message: format!(
                                "unknown kind `{other}`; valid: none, backdoor, label_flip"
                            ),
                        })
                    }
                });
            }
            "fraction" => fraction = parse_fraction(&key, &value)?,
            "target_label" => {
                target_label = value.parse().map_err(|_| Error::Config {
                    key: key.clone(),
                    message: format!("expected a class index, got `{value}`"),
                })?;
            }
            "trigger" => {
                if value != "cross" {
                    return Err(Error::Config {
                        key,
                        message: format!("unknown trigger `{value}`; valid: cross"),
                    });
                }
                trigger = Some(value);
            }
            "trigger_value" => {
                trigger_value = parse_fraction(&key, &value)?;
            }
            "weight_multiplier" => {
                weight_multiplier = parse_f64_value(&key, &value)?;
                if !(weight_multiplier.is_finite() && weight_multiplier >= 1.0) {
                    return Err(Error::Config {
                        key,
                        message: format!("must be at least 1, got {weight_multiplier}"),
                    });
                }
            }
            "seed" => {
                seed = Some(value.parse().map_err(|_| Error::Config {
                    key: key.clone(),
                    message: format!("expected an unsigned integer, got `{value}`"),
                })?);
            }
            _ => {
                return Err(Error::Config {
                    key,
                    message: "unknown attack field".to_string(),
                })
            }
        }
    }
    let kind = kind.ok_or_else(|| Error::Config {
        key: format!("attack.{idx}.kind"),
        message: "missing".to_string(),
    })?;
    if kind == AttackKind::Backdoor && trigger.is_none() {
        return Err(Error::Config {
            key: format!("attack.{idx}.trigger"),
            message: "missing (backdoor attacks need a trigger)".to_string(),
        });
    }
    if kind != AttackKind::Backdoor && trigger.is_some() {
        return Err(Error::Config {
            key: format!("attack.{idx}.trigger"),
            message: "only used by backdoor attacks".to_string(),
        });
    }
    Ok(AttackConfig {
        kind,
        fraction,
        target_label,
        trigger,
        trigger_value,
        weight_multiplier,
        seed: seed.unwrap_or_else(|| mix(&[master_seed, STREAM_ATTACK, idx as u64])),
    })
}

fn take_usize(pairs: &mut Pairs, key: &str, default: usize, min: usize) -> Result<usize> {
    let Some(value) = pairs.take(key) else {
        return Ok(default);
    };
    let parsed: usize = value.parse().map_err(|_| Error::Config {
        key: key.to_string(),
        message: format!("expected an unsigned integer, got `{value}`"),
    })?;
    if parsed < min {
        return Err(Error::Config {
            key: key.to_string(),
            message: format!("must be at least {min}, got {parsed}"),
        });
    }
    Ok(parsed)
}

fn take_u64(pairs: &mut Pairs, key: &str, default: u64) -> Result<u64> {
    let Some(value) = pairs.take(key) else {
        return Ok(default);
    };
    value.parse().map_err(|_| Error::Config {
        key: key.to_string(),
        message: format!("expected an unsigned integer, got `{value}`"),
    })
}

fn take_f64(pairs: &mut Pairs, key: &str, default: f64) -> Result<f64> {
    let Some(value) = pairs.take(key) else {
        return Ok(default);
    };
    parse_f64_value(key, &value)
}

fn parse_f64_value(key: &str, value: &str) -> Result<f64> {
    value.parse().map_err(|_| Error::Config {
        key: key.to_string(),
        message: format!("expected a number, got `{value}`"),
    })
}

fn parse_fraction(key: &str, value: &str) -> Result<f64> {
    let parsed = parse_f64_value(key, value)?;
    if !(parsed.is_finite() && (0.0..=1.0).contains(&parsed)) {
        return Err(Error::Config {
            key: key.to_string(),
            message: format!("value {value} outside [0, 1]"),
        });
    }
    Ok(parsed)
}

impl ExperimentConfig {
    /// True when any client runs a backdoor attack.
    pub fn any_backdoor(&self) -> bool {
        self.attacks
            .values()
            .any(|a| a.kind == AttackKind::Backdoor)
    }

    /// The first backdoor attack in client order, if any; its trigger and
    /// target define the triggered test set.
    pub fn first_backdoor(&self) -> Option<&AttackConfig> {
        self.attacks
            .values()
            .find(|a| a.kind == AttackKind::Backdoor)
    }

    /// Materialises one attack config into a runnable spec for images of
    /// the given size.
    pub fn attack_spec(
        &self,
        attack: &AttackConfig,
        image_height: usize,
        image_width: usize,
    ) -> Result<AttackSpec> {
        let trigger = match (&attack.trigger, attack.kind) {
            (Some(_), AttackKind::Backdoor) => {
                let mut pattern = TriggerPattern::cross(image_height, image_width)?;
                pattern.value = attack.trigger_value;
                Some(pattern)
            }
            _ => None,
        };
        Ok(AttackSpec {
            kind: attack.kind,
            fraction: attack.fraction,
            target_label: attack.target_label,
            trigger,
            weight_multiplier: attack.weight_multiplier,
            seed: attack.seed,
        })
    }

    /// Builds the federation config for images of the given size.
    pub fn federation_config(
        &self,
        image_height: usize,
        image_width: usize,
    ) -> Result<FederationConfig> {
        let mut attack_assignments = BTreeMap::new();
        for (&client, attack) in &self.attacks {
            if attack.kind == AttackKind::None {
                continue;
            }
            attack_assignments.insert(
                client,
                self.attack_spec(attack, image_height, image_width)?,
            );
        }
        Ok(FederationConfig {
            strategy: self.strategy,
            rounds: self.rounds,
            local_epochs: self.local_epochs,
            client_count: self.client_count,
            master_seed: self.master_seed,
            train_cfg: TrainConfig {
                epochs: self.local_epochs,
                batch_size: self.batch_size,
                learning_rate: self.learning_rate,
                seed: self.master_seed,
            },
            pretrain_epochs: self.pretrain_epochs,
            pretrain_target_accuracy: self.pretrain_target_accuracy,
            hidden_units: self.hidden_units,
            server_opt: self.server,
            attack_assignments,
        })
    }
}
