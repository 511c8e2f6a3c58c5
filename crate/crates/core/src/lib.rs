//! Deterministic federated-learning simulator with probability-weighted
//! robust aggregation.
//!
//! The crate trains a dense softmax classifier across simulated clients,
//! merges their updates with one of five server strategies, and measures
//! how data-poisoning and report-inflation attacks fare against each. Runs
//! are bitwise reproducible: every random choice derives from a master seed
//! through tagged streams, so results do not depend on thread count or
//! execution order.
//!
//! Modules:
//! - [`tensor`], [`nn`]: dense `f64` matrices and the classifier.
//! - [`data`]: IDX ingestion, synthetic data, IID partitioning.
//! - [`attack`]: backdoor, label-flip, and report-inflation attacks.
//! - [`aggregate`]: the robust rule, example-weighted averaging, adaptive
//!   server optimizers.
//! - [`federation`]: pretraining, rounds, experiments, metrics.
//! - [`config`], [`output`]: experiment files, CSV/JSON/log writing, the
//!   runner.

pub mod aggregate;
pub mod attack;
pub mod config;
pub mod data;
pub mod error;
pub mod federation;
pub mod nn;
pub mod output;
pub mod seed;
pub mod tensor;

pub use aggregate::{
    fedavg_aggregate, fedbayes_aggregate, normal_cdf, server_opt_step, ClientUpdate, Strategy,
};
pub use attack::{apply_backdoor, apply_label_flip, inflate_report, AttackKind, AttackSpec};
pub use data::{load_idx, partition_iid, synth_generate, Dataset, PartitionPlan};
pub use error::{Error, Result};
pub use federation::{pretrain, run_experiment, run_round, FederationConfig, MetricsRecord};
pub use nn::{evaluate, forward, gradient_check, train_local, ModelParams, TrainConfig};
