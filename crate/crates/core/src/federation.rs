//! Federated training orchestration: server pretraining, per-round local
//! training and aggregation, and full experiment runs with metrics.

use std::collections::BTreeMap;

use rayon::prelude::*;

use crate::aggregate::{
    fedavg_aggregate, fedbayes_aggregate, server_opt_step, ClientUpdate, ServerOptHyper,
    ServerOptState, Strategy,
};
use crate::attack::{
    apply_backdoor, apply_label_flip, inflate_report, AttackKind, AttackSpec, TriggeredTestSet,
};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::nn::{evaluate, predict, train_local, ModelParams, TrainConfig};
use crate::seed::{mix, STREAM_CLIENT, STREAM_INIT, STREAM_PRETRAIN};

/// Everything a federated run needs besides the data.
#[derive(Debug, Clone)]
pub struct FederationConfig {
    pub strategy: Strategy,
    /// Federated rounds after pretraining.
    pub rounds: usize,
    /// Local epochs per client per round.
    pub local_epochs: usize,
    pub client_count: usize,
    /// Root of every derived seed in the run.
    pub master_seed: u64,
    /// Batch size and learning rate for all local training; the epoch count
    /// and seed in here are ignored, since rounds use `local_epochs` and a
    /// seed derived per client and round.
    pub train_cfg: TrainConfig,
    /// Epoch budget for server pretraining.
    pub pretrain_epochs: usize,
    /// Early-stop threshold for pretraining; `None` runs the full budget.
    pub pretrain_target_accuracy: Option<f64>,
    /// Width of the single hidden layer.
    pub hidden_units: usize,
    /// Hyperparameters for the adaptive server strategies.
    pub server_opt: ServerOptHyper,
    /// Attack per client index; missing indices are benign.
    pub attack_assignments: BTreeMap<usize, AttackSpec>,
}

/// Metrics captured after each round; round 0 describes the pretrained
/// model before any federated training.
#[derive(Debug, Clone)]
pub struct MetricsRecord {
    pub round: usize,
    pub clean_accuracy: f64,
    pub clean_loss: f64,
    /// Accuracy on the half-triggered test set, when one was provided.
    pub triggered_accuracy: Option<f64>,
    /// Fraction of triggered non-target examples classified as the target,
    /// when a triggered test set was provided.
    pub attack_success_rate: Option<f64>,
    /// Clean-test accuracy of each client's freshly trained local model,
    /// measured before aggregation. Round 0 repeats the pretrained global
    /// model's accuracy.
    pub per_client_accuracy: Vec<f64>,
}

/// What pretraining achieved.
#[derive(Debug, Clone)]
pub struct PretrainReport {
    /// Training epochs actually run.
    pub epochs_run: usize,
    /// Clean-test accuracy of the returned model.
    pub achieved_accuracy: f64,
    /// `Some(true)` when the target was reached, `Some(false)` when the
    /// budget ran out first, `None` when no target was set.
    pub reached_target: Option<bool>,
}

/// Result of one federated round.
#[derive(Debug, Clone)]
pub struct RoundOutput {
    pub global: ModelParams,
    pub state: ServerOptState,
    /// The (possibly inflated) updates that were aggregated, in client
    /// order.
    pub updates: Vec<ClientUpdate>,
}

/// A full run's records plus the pretraining report.
#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub records: Vec<MetricsRecord>,
    pub pretrain: PretrainReport,
}

/// Trains the initial global model on the server's own subset.
///
/// The model is evaluated on the clean test set before every epoch (so a
/// target of zero returns immediately) and once more after the last one.
/// With a target set, training stops as soon as test accuracy reaches it;
/// if the budget runs out first, the best model seen is returned and the
/// report says so. Without a target, exactly `pretrain_epochs` epochs run.
pub fn pretrain(
    server_data: &Dataset,
    test: &Dataset,
    cfg: &FederationConfig,
) -> Result<(ModelParams, PretrainReport)> {
    let arch = [
        server_data.dim(),
        cfg.hidden_units,
        server_data.class_count(),
    ];
    let mut params = ModelParams::init(&arch, mix(&[cfg.master_seed, STREAM_INIT]))?;
    let mut best = params.clone();
    let mut best_accuracy = f64::NEG_INFINITY;
    for epoch in 0..=cfg.pretrain_epochs {
        let (accuracy, _) = evaluate(&params, test)?;
        if accuracy > best_accuracy {
            best = params.clone();
            best_accuracy = accuracy;
        }
        if let Some(target) = cfg.pretrain_target_accuracy {
            if accuracy >= target {
                return Ok((
                    params,
                    PretrainReport {
                        epochs_run: epoch,
                        achieved_accuracy: accuracy,
                        reached_target: Some(true),
                    },
                ));
            }
        }
        if epoch == cfg.pretrain_epochs {
            break;
        }
        let train_cfg = TrainConfig {
            epochs: 1,
            seed: mix(&[cfg.master_seed, STREAM_PRETRAIN, epoch as u64]),
            ..cfg.train_cfg.clone()
        };
        params = train_local(&params, server_data, &train_cfg)?;
    }
    let reached_target = cfg.pretrain_target_accuracy.map(|_| false);
    Ok((
        best,
        PretrainReport {
            epochs_run: cfg.pretrain_epochs,
            achieved_accuracy: best_accuracy,
            reached_target,
        },
    ))
}

/// Runs one federated round: every client trains the broadcast global model
/// on its own (already poisoned) data, reports are inflated per the attack
/// specs, and the round's strategy merges the updates.
///
/// Client training seeds derive from the master seed, the client index, and
/// the round index, so results are bitwise reproducible for any thread
/// count.
pub fn run_round(
    global: &ModelParams,
    clients: &[(Dataset, AttackSpec)],
    state: &ServerOptState,
    cfg: &FederationConfig,
    round_idx: usize,
) -> Result<RoundOutput> {
    if clients.is_empty() {
        return Err(Error::InvalidInput("round has no clients".to_string()));
    }
    let updates = clients
        .par_iter()
        .enumerate()
        .map(|(client_id, (data, spec))| {
            let train_cfg = TrainConfig {
                epochs: cfg.local_epochs,
                seed: mix(&[
                    cfg.master_seed,
                    STREAM_CLIENT,
                    client_id as u64,
                    round_idx as u64,
                ]),
                ..cfg.train_cfg.clone()
            };
            let params = train_local(global, data, &train_cfg)?;
            let update = ClientUpdate {
                client_id,
                params,
                reported_examples: data.len(),
            };
            inflate_report(update, spec.weight_multiplier)
        })
        .collect::<Result<Vec<_>>>()?;

    let (next_global, next_state) = match cfg.strategy {
        Strategy::FedBayes => (fedbayes_aggregate(global, &updates)?, state.clone()),
        Strategy::FedAvg => (fedavg_aggregate(&updates)?, state.clone()),
        Strategy::FedAdagrad | Strategy::FedAdam | Strategy::FedYogi => {
            server_opt_step(state, global, &updates)?
        }
    };
    Ok(RoundOutput {
        global: next_global,
        state: next_state,
        updates,
    })
}

/// Runs a complete experiment: pretraining on subset 0, then `cfg.rounds`
/// federated rounds over subsets 1..=client_count, applying each client's
/// attack to its data once up front.
///
/// `partitions` must hold exactly `client_count + 1` subsets. A triggered
/// test set is required whenever a backdoor attack is assigned; triggered
/// accuracy and attack success rate are reported whenever one is given.
pub fn run_experiment(
    cfg: &FederationConfig,
    partitions: &[Dataset],
    clean_test: &Dataset,
    triggered: Option<&TriggeredTestSet>,
) -> Result<ExperimentOutcome> {
    if cfg.client_count == 0 {
        return Err(Error::InvalidInput("client_count must be at least 1".to_string()));
    }
    if partitions.len() != cfg.client_count + 1 {
        return Err(Error::InvalidInput(format!(
            "{} clients need {} partitions (server subset plus one per client), got {}",
            cfg.client_count,
            cfg.client_count + 1,
            partitions.len()
        )));
    }
    for (i, part) in partitions.iter().enumerate() {
        if part.dim() != clean_test.dim() || part.class_count() != clean_test.class_count() {
            return Err(Error::InvalidInput(format!(
                "partition {i} geometry does not match the test set"
            )));
        }
    }
    if let Some(&bad) = cfg
        .attack_assignments
        .keys()
        .find(|&&id| id >= cfg.client_count)
    {
        return Err(Error::InvalidInput(format!(
            "attack assigned to client {bad}, but only {} clients exist",
            cfg.client_count
        )));
    }
    let any_backdoor = cfg
        .attack_assignments
        .values()
        .any(|spec| spec.kind == AttackKind::Backdoor);
    if any_backdoor && triggered.is_none() {
        return Err(Error::InvalidInput(
            "a backdoor attack is assigned but no triggered test set was provided".to_string(),
        ));
    }

    let (mut global, pretrain_report) = pretrain(&partitions[0], clean_test, cfg)?;

    let clients: Vec<(Dataset, AttackSpec)> = (0..cfg.client_count)
        .map(|client_id| {
            let spec = cfg
                .attack_assignments
                .get(&client_id)
                .cloned()
                .unwrap_or_else(AttackSpec::benign);
            let data = &partitions[client_id + 1];
            let poisoned = match spec.kind {
                AttackKind::None => data.clone(),
                AttackKind::Backdoor => apply_backdoor(data, &spec)?,
                AttackKind::LabelFlip => apply_label_flip(data, &spec)?,
            };
            Ok((poisoned, spec))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut state = ServerOptState::new(cfg.strategy, &global, cfg.server_opt)?;
    let mut records = Vec::with_capacity(cfg.rounds + 1);
    let (clean_accuracy, clean_loss) = evaluate(&global, clean_test)?;
    records.push(MetricsRecord {
        round: 0,
        clean_accuracy,
        clean_loss,
        triggered_accuracy: triggered_accuracy(&global, triggered)?,
        attack_success_rate: success_rate(&global, triggered)?,
        per_client_accuracy: vec![clean_accuracy; cfg.client_count],
    });

    for round_idx in 1..=cfg.rounds {
        let output = run_round(&global, &clients, &state, cfg, round_idx)?;
        global = output.global;
        state = output.state;
        let per_client_accuracy = output
            .updates
            .par_iter()
            .map(|u| Ok(evaluate(&u.params, clean_test)?.0))
            .collect::<Result<Vec<_>>>()?;
        let (clean_accuracy, clean_loss) = evaluate(&global, clean_test)?;
        records.push(MetricsRecord {
            round: round_idx,
            clean_accuracy,
            clean_loss,
            triggered_accuracy: triggered_accuracy(&global, triggered)?,
            attack_success_rate: success_rate(&global, triggered)?,
            per_client_accuracy,
        });
    }
    Ok(ExperimentOutcome {
        records,
        pretrain: pretrain_report,
    })
}

fn triggered_accuracy(
    params: &ModelParams,
    triggered: Option<&TriggeredTestSet>,
) -> Result<Option<f64>> {
    match triggered {
        Some(t) => Ok(Some(evaluate(params, &t.data)?.0)),
        None => Ok(None),
    }
}

fn success_rate(params: &ModelParams, triggered: Option<&TriggeredTestSet>) -> Result<Option<f64>> {
    match triggered {
        Some(t) => Ok(Some(attack_success_rate(params, t)?)),
        None => Ok(None),
    }
}

/// Fraction of triggered test examples that the model classifies as the
/// attack's target class.
///
/// Examples whose true label already equals the target are excluded: a
/// clean model classifies those correctly anyway, which would report a
/// baseline success of roughly one over the class count for a model that
/// was never backdoored. Returns 0 when no triggered example qualifies.
pub fn attack_success_rate(params: &ModelParams, triggered: &TriggeredTestSet) -> Result<f64> {
    let predictions = predict(params, triggered.data.features())?;
    let mut hits = 0usize;
    let mut total = 0usize;
    for (i, &is_triggered) in triggered.triggered.iter().enumerate() {
        if !is_triggered || triggered.data.labels()[i] == triggered.target_label {
            continue;
        }
        total += 1;
        if predictions[i] == triggered.target_label {
            hits += 1;
        }
    }
    if total == 0 {
        return Ok(0.0);
    }
    Ok(hits as f64 / total as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attack::{build_triggered_test, TriggerPattern};
    use crate::data::{partition_iid, synth_generate, PartitionPlan};

    fn small_config(strategy: Strategy, rounds: usize) -> FederationConfig {
        FederationConfig {
            strategy,
            rounds,
            local_epochs: 1,
            client_count: 2,
            master_seed: 42,
            train_cfg: TrainConfig {
                epochs: 1,
                batch_size: 8,
                learning_rate: 0.05,
                seed: 0,
            },
            pretrain_epochs: 2,
            pretrain_target_accuracy: None,
            hidden_units: 6,
            server_opt: ServerOptHyper::default(),
            attack_assignments: BTreeMap::new(),
        }
    }

    fn small_data() -> (Vec<Dataset>, Dataset) {
        let train = synth_generate(5, 30, 3, 9, 0.25).unwrap();
        let test = synth_generate(6, 12, 3, 9, 0.25).unwrap();
        let parts = partition_iid(&train, &PartitionPlan { subset_count: 3, seed: 1 }).unwrap();
        (parts, test)
    }

    fn backdoor_spec(seed: u64) -> AttackSpec {
        AttackSpec {
            kind: AttackKind::Backdoor,
            fraction: 0.7,
            target_label: 2,
            trigger: Some(TriggerPattern::cross(3, 3).unwrap()),
            weight_multiplier: 2.0,
            seed,
        }
    }

    #[test]
    fn pretrain_returns_immediately_for_zero_target() {
        let (parts, test) = small_data();
        let cfg = FederationConfig {
            pretrain_target_accuracy: Some(0.0),
            ..small_config(Strategy::FedAvg, 1)
        };
        let (_, report) = pretrain(&parts[0], &test, &cfg).unwrap();
        assert_eq!(report.epochs_run, 0);
        assert_eq!(report.reached_target, Some(true));
    }

    #[test]
    fn pretrain_without_target_runs_full_budget() {
        let (parts, test) = small_data();
        let cfg = small_config(Strategy::FedAvg, 1);
        let (params, report) = pretrain(&parts[0], &test, &cfg).unwrap();
        assert_eq!(report.epochs_run, 2);
        assert_eq!(report.reached_target, None);
        assert!(params.is_all_finite());
    }

    #[test]
    fn pretrain_missing_target_returns_best_model() {
        let (parts, test) = small_data();
        let cfg = FederationConfig {
            pretrain_target_accuracy: Some(1.01),
            ..small_config(Strategy::FedAvg, 1)
        };
        let (params, report) = pretrain(&parts[0], &test, &cfg).unwrap();
        assert_eq!(report.reached_target, Some(false));
        let (accuracy, _) = evaluate(&params, &test).unwrap();
        assert_eq!(accuracy, report.achieved_accuracy);
    }

    #[test]
    fn run_round_is_deterministic() {
        let (parts, test) = small_data();
        let cfg = small_config(Strategy::FedBayes, 1);
        let (global, _) = pretrain(&parts[0], &test, &cfg).unwrap();
        let clients: Vec<(Dataset, AttackSpec)> = parts[1..]
            .iter()
            .map(|d| (d.clone(), AttackSpec::benign()))
            .collect();
        let state = ServerOptState::new(cfg.strategy, &global, cfg.server_opt).unwrap();
        let a = run_round(&global, &clients, &state, &cfg, 1).unwrap();
        let b = run_round(&global, &clients, &state, &cfg, 1).unwrap();
        assert_eq!(a.global, b.global);
        assert_eq!(a.updates.len(), 2);
        let c = run_round(&global, &clients, &state, &cfg, 2).unwrap();
        assert_ne!(a.global, c.global, "round index must vary the seeds");
    }

    #[test]
    fn report_inflation_moves_fedavg_but_not_fedbayes() {
        let (parts, test) = small_data();
        let honest: Vec<(Dataset, AttackSpec)> = parts[1..]
            .iter()
            .map(|d| (d.clone(), AttackSpec::benign()))
            .collect();
        let mut inflated = honest.clone();
        inflated[1].1.weight_multiplier = 3.0;

        for (strategy, expect_equal) in [(Strategy::FedBayes, true), (Strategy::FedAvg, false)] {
            let cfg = small_config(strategy, 1);
            let (global, _) = pretrain(&parts[0], &test, &cfg).unwrap();
            let state = ServerOptState::new(strategy, &global, cfg.server_opt).unwrap();
            let a = run_round(&global, &honest, &state, &cfg, 1).unwrap();
            let b = run_round(&global, &inflated, &state, &cfg, 1).unwrap();
            assert_eq!(
                a.global == b.global,
                expect_equal,
                "strategy {strategy} inflation sensitivity"
            );
            assert_eq!(b.updates[1].reported_examples, 3 * honest[1].0.len());
        }
    }

    #[test]
    fn experiment_emits_one_record_per_round_plus_pretrain() {
        let (parts, test) = small_data();
        let cfg = small_config(Strategy::FedBayes, 3);
        let outcome = run_experiment(&cfg, &parts, &test, None).unwrap();
        assert_eq!(outcome.records.len(), 4);
        for (i, record) in outcome.records.iter().enumerate() {
            assert_eq!(record.round, i);
            assert_eq!(record.per_client_accuracy.len(), 2);
            assert!(record.triggered_accuracy.is_none());
            assert!(record.attack_success_rate.is_none());
        }
        let first = &outcome.records[0];
        assert!(first
            .per_client_accuracy
            .iter()
            .all(|&a| a == first.clean_accuracy));
    }

    #[test]
    fn experiment_reports_attack_metrics_for_backdoor_runs() {
        let (parts, test) = small_data();
        let mut cfg = small_config(Strategy::FedAvg, 2);
        cfg.attack_assignments.insert(0, backdoor_spec(9));
        let test_spec = AttackSpec {
            fraction: 0.5,
            ..backdoor_spec(77)
        };
        let triggered = build_triggered_test(&test, &test_spec).unwrap();
        let outcome = run_experiment(&cfg, &parts, &test, Some(&triggered)).unwrap();
        for record in &outcome.records {
            let asr = record.attack_success_rate.expect("backdoor run reports a rate");
            assert!((0.0..=1.0).contains(&asr));
            assert!(record.triggered_accuracy.is_some());
        }
    }

    #[test]
    fn experiment_is_deterministic_end_to_end() {
        let (parts, test) = small_data();
        let mut cfg = small_config(Strategy::FedYogi, 2);
        cfg.attack_assignments.insert(1, AttackSpec {
            kind: AttackKind::LabelFlip,
            fraction: 0.5,
            target_label: 0,
            trigger: None,
            weight_multiplier: 2.0,
            seed: 4,
        });
        let a = run_experiment(&cfg, &parts, &test, None).unwrap();
        let b = run_experiment(&cfg, &parts, &test, None).unwrap();
        assert_eq!(a.records.len(), b.records.len());
        for (x, y) in a.records.iter().zip(&b.records) {
            assert_eq!(x.clean_accuracy.to_bits(), y.clean_accuracy.to_bits());
            assert_eq!(x.clean_loss.to_bits(), y.clean_loss.to_bits());
            assert_eq!(x.per_client_accuracy, y.per_client_accuracy);
        }
    }

    #[test]
    fn experiment_validates_shape_and_attack_requirements() {
        let (parts, test) = small_data();
        let cfg = small_config(Strategy::FedAvg, 1);
        assert!(run_experiment(&cfg, &parts[..2], &test, None).is_err());

        let mut backdoored = small_config(Strategy::FedAvg, 1);
        backdoored.attack_assignments.insert(0, backdoor_spec(3));
        assert!(matches!(
            run_experiment(&backdoored, &parts, &test, None),
            Err(Error::InvalidInput(_))
        ));

        let mut out_of_range = small_config(Strategy::FedAvg, 1);
        out_of_range.attack_assignments.insert(7, backdoor_spec(3));
        let test_spec = AttackSpec { fraction: 0.5, ..backdoor_spec(1) };
        let triggered = build_triggered_test(&test, &test_spec).unwrap();
        assert!(run_experiment(&out_of_range, &parts, &test, Some(&triggered)).is_err());
    }

    #[test]
    fn success_rate_excludes_true_target_examples() {
        // A model that always answers the target class has success rate 1,
        // but only non-target examples count toward the denominator.
        let test = synth_generate(8, 10, 3, 9, 0.2).unwrap();
        let spec = AttackSpec { fraction: 1.0, ..backdoor_spec(5) };
        let triggered = build_triggered_test(&test, &spec).unwrap();
        // Bias the output layer hard toward class 2 so every prediction is
        // the target.
        let mut layers = ModelParams::zeros(&[9, 3]).unwrap().layers().to_vec();
        layers[1].1.set(0, 2, 50.0);
        let model = ModelParams::from_layers(vec![9, 3], layers).unwrap();
        let rate = attack_success_rate(&model, &triggered).unwrap();
        assert_eq!(rate, 1.0);

        // A model that never answers the target scores 0 even though it
        // gets the true target-class rows right.
        let mut layers = ModelParams::zeros(&[9, 3]).unwrap().layers().to_vec();
        layers[1].1.set(0, 0, 50.0);
        let model = ModelParams::from_layers(vec![9, 3], layers).unwrap();
        assert_eq!(attack_success_rate(&model, &triggered).unwrap(), 0.0);
    }
}
