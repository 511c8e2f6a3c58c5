//! Run outputs: the per-round metrics CSV, the JSON run summary, the run
//! log, and the runner that takes a parsed experiment from dataset to
//! written files.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use serde::Serialize;

use crate::attack::{build_triggered_test, AttackKind, AttackSpec, TriggerPattern, TriggeredTestSet};
use crate::config::{DataConfig, ExperimentConfig};
use crate::data::{
    load_idx, partition_iid, subsample_balanced, synth_generate, Dataset, PartitionPlan,
};
use crate::error::{Error, Result};
use crate::federation::{run_experiment, ExperimentOutcome, MetricsRecord, PretrainReport};
use crate::seed::{
    mix, STREAM_PARTITION, STREAM_SUBSAMPLE, STREAM_SYNTH_TEST, STREAM_SYNTH_TRAIN,
    STREAM_TRIGGER_TEST,
};

/// Environment variable against which relative IDX paths are resolved.
pub const DATA_DIR_ENV: &str = "FEDBAYES_DATA_DIR";

/// Formats a metric with nine significant digits.
///
/// Values whose magnitude sits in `[1e-4, 1e13)` use plain decimal
/// notation; anything else uses scientific notation. Zero prints as
/// `0.00000000`.
pub fn format_float(value: f64) -> String {
    if value == 0.0 {
        return "0.00000000".to_string();
    }
    if !value.is_finite() {
        return format!("{value}");
    }
    let exponent = value.abs().log10().floor() as i32;
    if !(-4..13).contains(&exponent) {
        return format!("{value:.8e}");
    }
    let decimals = (8 - exponent).max(0) as usize;
    format!("{value:.decimals$}")
}

/// Header of the metrics CSV for a given client count.
pub fn csv_header(client_count: usize) -> String {
    let mut header = String::from(
        "round,strategy,clean_accuracy,clean_loss,triggered_accuracy,attack_success_rate",
    );
    for i in 0..client_count {
        header.push_str(&format!(",client_{i}_acc"));
    }
    header
}

fn csv_line(record: &MetricsRecord, strategy: &str) -> String {
    let optional = |v: Option<f64>| v.map(format_float).unwrap_or_default();
    let mut line = format!(
        "{},{},{},{},{},{}",
        record.round,
        strategy,
        format_float(record.clean_accuracy),
        format_float(record.clean_loss),
        optional(record.triggered_accuracy),
        optional(record.attack_success_rate),
    );
    for &acc in &record.per_client_accuracy {
        line.push(',');
        line.push_str(&format_float(acc));
    }
    line
}

/// Writes the per-round metrics CSV: one row per record, one
/// `client_{i}_acc` column per client.
pub fn write_csv(path: &Path, strategy: &str, records: &[MetricsRecord]) -> Result<()> {
    let client_count = records.first().map_or(0, |r| r.per_client_accuracy.len());
    let mut text = csv_header(client_count);
    text.push('\n');
    for record in records {
        text.push_str(&csv_line(record, strategy));
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// End-of-run summary serialised to JSON next to the CSV.
#[derive(Debug, Clone, Serialize)]
pub struct RunSummary {
    pub experiment: String,
    pub version: String,
    pub strategy: String,
    pub rounds_completed: usize,
    pub pretrain_epochs_run: usize,
    pub pretrain_accuracy: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pretrain_reached_target: Option<bool>,
    pub final_clean_accuracy: f64,
    pub final_clean_loss: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub final_triggered_accuracy: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub final_attack_success_rate: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub peak_attack_success_rate: Option<f64>,
    /// The full effective configuration, defaults and derived seeds
    /// included, so the run can be reproduced from the summary alone.
    pub config: ExperimentConfig,
}

/// Builds the summary from an experiment's outcome.
pub fn build_summary(cfg: &ExperimentConfig, outcome: &ExperimentOutcome) -> RunSummary {
    let last = outcome.records.last().expect("a run has at least round 0");
    let peak = outcome
        .records
        .iter()
        .filter_map(|r| r.attack_success_rate)
        .fold(None, |acc: Option<f64>, v| Some(acc.map_or(v, |a| a.max(v))));
    RunSummary {
        experiment: cfg.name.clone(),
        version: env!("CARGO_PKG_VERSION").to_string(),
        strategy: cfg.strategy.name().to_string(),
        rounds_completed: last.round,
        pretrain_epochs_run: outcome.pretrain.epochs_run,
        pretrain_accuracy: outcome.pretrain.achieved_accuracy,
        pretrain_reached_target: outcome.pretrain.reached_target,
        final_clean_accuracy: last.clean_accuracy,
        final_clean_loss: last.clean_loss,
        final_triggered_accuracy: last.triggered_accuracy,
        final_attack_success_rate: last.attack_success_rate,
        peak_attack_success_rate: peak,
        config: cfg.clone(),
    }
}

/// Writes the summary as pretty-printed JSON.
pub fn write_summary(path: &Path, summary: &RunSummary) -> Result<()> {
    let mut text =
        serde_json::to_string_pretty(summary).expect("summary serialisation cannot fail");
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Append-mode log of one `run.log` file, stamping each line with seconds
/// elapsed since the log was opened.
pub struct RunLog {
    file: fs::File,
    started: Instant,
}

impl RunLog {
    /// Opens (or creates) `run.log` inside `dir` for appending.
    pub fn open(dir: &Path) -> Result<RunLog> {
        let path = dir.join("run.log");
        let file = fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        Ok(RunLog {
            file,
            started: Instant::now(),
        })
    }

    /// Appends one stamped line; logging failures are not worth failing a
    /// run over, so they are swallowed.
    pub fn line(&mut self, message: &str) {
        let elapsed = self.started.elapsed().as_secs_f64();
        let _ = writeln!(self.file, "[{elapsed:9.3}s] {message}");
    }
}

/// Paths, headline numbers, and the full round series of one finished
/// experiment.
#[derive(Debug, Clone)]
pub struct ExperimentArtifacts {
    pub name: String,
    pub strategy: String,
    pub csv_path: PathBuf,
    pub summary_path: PathBuf,
    pub pretrain: PretrainReport,
    pub final_record: MetricsRecord,
    pub records: Vec<MetricsRecord>,
}

/// Loads the experiment's datasets, honouring the desk-scale budget for
/// IDX sources.
fn load_data(cfg: &ExperimentConfig, log: &mut RunLog) -> Result<(Dataset, Dataset)> {
    match &cfg.data {
        DataConfig::Synthetic {
            per_class,
            classes,
            dim,
            noise,
            test_per_class,
        } => {
            let train = synth_generate(
                mix(&[cfg.master_seed, STREAM_SYNTH_TRAIN]),
                *per_class,
                *classes,
                *dim,
                *noise,
            )?;
            let test = synth_generate(
                mix(&[cfg.master_seed, STREAM_SYNTH_TEST]),
                *test_per_class,
                *classes,
                *dim,
                *noise,
            )?;
            log.line(&format!(
                "synthetic data: {} train / {} test examples, {} classes, dim {}",
                train.len(),
                test.len(),
                classes,
                dim
            ));
            Ok((train, test))
        }
        DataConfig::Idx {
            train_images,
            train_labels,
            test_images,
            test_labels,
            per_client_budget,
        } => {
            let read = |p: &str| -> Result<Vec<u8>> {
                let path = resolve_data_path(p);
                fs::read(&path).map_err(|e| Error::io(&path, e))
            };
            let mut train = load_idx(&read(train_images)?, &read(train_labels)?)?;
            let test = load_idx(&read(test_images)?, &read(test_labels)?)?;
            log.line(&format!(
                "IDX data: {} train / {} test examples, {}x{} images",
                train.len(),
                test.len(),
                train.image_height(),
                train.image_width()
            ));
            if *per_client_budget > 0 {
                let total = per_client_budget * (cfg.client_count + 1);
                if total < train.len() {
                    train = subsample_balanced(
                        &train,
                        total,
                        mix(&[cfg.master_seed, STREAM_SUBSAMPLE]),
                    )?;
                    log.line(&format!("subsampled training set to {} examples", total));
                }
            }
            Ok((train, test))
        }
    }
}

/// Resolves an IDX path: relative paths are joined onto `FEDBAYES_DATA_DIR`
/// when that variable is set.
fn resolve_data_path(path: &str) -> PathBuf {
    let p = PathBuf::from(path);
    if p.is_relative() {
        if let Ok(base) = std::env::var(DATA_DIR_ENV) {
            return PathBuf::from(base).join(p);
        }
    }
    p
}

/// Builds the triggered test set mandated by the experiment's first
/// backdoor attack, if it has one.
fn build_test_trigger(
    cfg: &ExperimentConfig,
    test: &Dataset,
) -> Result<Option<TriggeredTestSet>> {
    let Some(attack) = cfg.first_backdoor() else {
        return Ok(None);
    };
    let mut trigger = TriggerPattern::cross(test.image_height(), test.image_width())?;
    trigger.value = attack.trigger_value;
    let spec = AttackSpec {
        kind: AttackKind::Backdoor,
        fraction: cfg.test_trigger_fraction,
        target_label: attack.target_label,
        trigger: Some(trigger),
        weight_multiplier: 1.0,
        seed: mix(&[cfg.master_seed, STREAM_TRIGGER_TEST]),
    };
    Ok(Some(build_triggered_test(test, &spec)?))
}

/// Runs one experiment end to end and writes `<name>.csv`, `<name>.json`,
/// and `run.log` into its output directory.
pub fn run_one(cfg: &ExperimentConfig) -> Result<ExperimentArtifacts> {
    let out_dir = PathBuf::from(&cfg.output_dir);
    fs::create_dir_all(&out_dir).map_err(|e| Error::io(&out_dir, e))?;
    let mut log = RunLog::open(&out_dir)?;
    let unix = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    log.line(&format!(
        "=== experiment `{}` (strategy {}, seed {}, started at unix {unix}) ===",
        cfg.name, cfg.strategy, cfg.master_seed
    ));

    let (train, test) = load_data(cfg, &mut log)?;
    let partitions = partition_iid(
        &train,
        &PartitionPlan {
            subset_count: cfg.client_count + 1,
            seed: mix(&[cfg.master_seed, STREAM_PARTITION]),
        },
    )?;
    log.line(&format!(
        "partitioned into {} subsets of ~{} examples",
        partitions.len(),
        partitions[0].len()
    ));

    let fed_cfg = cfg.federation_config(train.image_height(), train.image_width())?;
    let triggered = build_test_trigger(cfg, &test)?;
    if let Some(t) = &triggered {
        log.line(&format!(
            "triggered test set: {} of {} examples stamped, target class {}",
            t.triggered.iter().filter(|&&b| b).count(),
            t.data.len(),
            t.target_label
        ));
    }

    let outcome = run_experiment(&fed_cfg, &partitions, &test, triggered.as_ref())?;

    let pre = &outcome.pretrain;
    log.line(&format!(
        "pretraining: accuracy {} after {} epochs",
        format_float(pre.achieved_accuracy),
        pre.epochs_run
    ));
    if pre.reached_target == Some(false) {
        log.line(&format!(
            "warning: pretraining missed the target accuracy {}; continuing with the best model",
            format_float(cfg.pretrain_target_accuracy.unwrap_or(f64::NAN))
        ));
    }
    for record in &outcome.records {
        let asr = record
            .attack_success_rate
            .map(|v| format!(", asr {}", format_float(v)))
            .unwrap_or_default();
        log.line(&format!(
            "round {:>4}: clean accuracy {}, loss {}{}",
            record.round,
            format_float(record.clean_accuracy),
            format_float(record.clean_loss),
            asr
        ));
    }

    let csv_path = out_dir.join(format!("{}.csv", cfg.name));
    write_csv(&csv_path, cfg.strategy.name(), &outcome.records)?;
    let summary_path = out_dir.join(format!("{}.json", cfg.name));
    write_summary(&summary_path, &build_summary(cfg, &outcome))?;
    log.line(&format!(
        "wrote {} and {}",
        csv_path.display(),
        summary_path.display()
    ));

    Ok(ExperimentArtifacts {
        name: cfg.name.clone(),
        strategy: cfg.strategy.name().to_string(),
        csv_path,
        summary_path,
        pretrain: outcome.pretrain.clone(),
        final_record: outcome.records.last().expect("round 0 always present").clone(),
        records: outcome.records,
    })
}
