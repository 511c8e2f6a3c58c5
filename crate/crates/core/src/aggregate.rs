//! Server-side aggregation rules: probability-weighted robust averaging,
//! example-weighted averaging, and adaptive server optimizers.
//!
//! The robust rule scores each client layer by how far its values sit from
//! the prior global layer under that layer's own normal value distribution.
//! Per layer, the prior's elementwise mean and population standard deviation
//! define a normal CDF; a client's raw gap is the mean absolute CDF
//! difference between its elements and the prior's. Gaps are penalized a
//! hundredfold and clamped into `[0, 1]`, and the surviving weights blend
//! the client layers. Reported example counts play no part, which is what
//! makes report inflation harmless here.

use std::fmt;
use std::str::FromStr;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::nn::ModelParams;
use crate::tensor::Tensor2D;

/// Multiplier applied to the raw CDF gap before clamping.
pub const PENALTY_FACTOR: f64 = 100.0;

/// Lower bound substituted for a layer's standard deviation so constant
/// layers still define a usable CDF.
pub const STDDEV_FLOOR: f64 = 1e-6;

/// When the penalized weights of a layer sum below this, every client is
/// considered suppressed and the prior layer is kept unchanged.
pub const SUPPRESSED_LAYER_EPSILON: f64 = 1e-12;

/// One client's contribution to a round.
#[derive(Debug, Clone)]
pub struct ClientUpdate {
    pub client_id: usize,
    pub params: ModelParams,
    /// Example count the client claims to have trained on; honest clients
    /// report their true dataset size.
    pub reported_examples: usize,
}

/// Elementwise mean and population standard deviation of one layer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LayerStats {
    pub mean: f64,
    pub stddev: f64,
}

/// A client layer's distance from the prior and the weight it earns.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdjustedProbability {
    /// Mean absolute CDF difference between client and prior elements,
    /// in `[0, 1]`.
    pub raw_cdf_gap: f64,
    /// `clamp(1 - PENALTY_FACTOR * raw_cdf_gap, 0, 1)`.
    pub penalized: f64,
}

/// Normal CDF evaluated at `x` for the given mean and standard deviation.
///
/// Uses Hart's rational approximation in West's double-precision
/// arrangement: a polynomial ratio below `|z| = 7.07`, a continued fraction
/// beyond it, zero past `|z| = 37`. Absolute error is below 1e-15 across
/// the central range.
pub fn normal_cdf(x: f64, mean: f64, stddev: f64) -> Result<f64> {
    if !(stddev.is_finite() && stddev > 0.0) {
        return Err(Error::InvalidInput(format!(
            "stddev must be finite and positive, got {stddev}"
        )));
    }
    if !x.is_finite() || !mean.is_finite() {
        return Err(Error::InvalidInput(format!(
            "normal_cdf needs finite arguments, got x={x}, mean={mean}"
        )));
    }
    Ok(standard_normal_cdf((x - mean) / stddev))
}

/// Standard normal CDF at `z`.
fn standard_normal_cdf(z: f64) -> f64 {
    let zabs = z.abs();
    let tail = if zabs > 37.0 {
        0.0
    } else {
        let exponential = (-zabs * zabs / 2.0).exp();
        if zabs < 7.071_067_811_865_47 {
            let mut num = 3.526_249_659_989_11e-2 * zabs + 0.700_383_064_443_688;
            num = num * zabs + 6.373_962_203_531_65;
            num = num * zabs + 33.912_866_078_383;
            num = num * zabs + 112.079_291_497_871;
            num = num * zabs + 221.213_596_169_931;
            num = num * zabs + 220.206_867_912_376;
            let mut den = 8.838_834_764_831_84e-2 * zabs + 1.755_667_163_182_64;
            den = den * zabs + 16.064_177_579_207;
            den = den * zabs + 86.780_732_202_946_1;
            den = den * zabs + 296.564_248_779_674;
            den = den * zabs + 637.333_633_378_831;
            den = den * zabs + 793.826_512_519_948;
            den = den * zabs + 440.413_735_824_752;
            exponential * num / den
        } else {
            let mut frac = zabs + 0.65;
            frac = zabs + 4.0 / frac;
            frac = zabs + 3.0 / frac;
            frac = zabs + 2.0 / frac;
            frac = zabs + 1.0 / frac;
            exponential / frac / 2.506_628_274_631
        }
    };
    if z > 0.0 {
        1.0 - tail
    } else {
        tail
    }
}

/// Elementwise mean and population standard deviation of a layer.
pub fn layer_stats(layer: &Tensor2D) -> Result<LayerStats> {
    if layer.is_empty() {
        return Err(Error::InvalidInput(
            "layer_stats needs a nonempty layer".to_string(),
        ));
    }
    let n = layer.len() as f64;
    let mean = layer.data().iter().sum::<f64>() / n;
    let variance = layer
        .data()
        .iter()
        .map(|&v| (v - mean) * (v - mean))
        .sum::<f64>()
        / n;
    Ok(LayerStats {
        mean,
        stddev: variance.sqrt(),
    })
}

/// Penalty applied to a raw CDF gap: `1 - PENALTY_FACTOR * gap`, clamped
/// into `[0, 1]`.
pub fn penalize_gap(raw_cdf_gap: f64) -> f64 {
    (1.0 - PENALTY_FACTOR * raw_cdf_gap).clamp(0.0, 1.0)
}

/// Scores one client layer against the prior layer under the prior's value
/// distribution.
pub fn client_layer_probability(
    client_layer: &Tensor2D,
    prior_layer: &Tensor2D,
    stats: &LayerStats,
) -> Result<AdjustedProbability> {
    if client_layer.shape() != prior_layer.shape() {
        return Err(Error::ShapeMismatch(format!(
            "client layer {:?} vs prior layer {:?}",
            client_layer.shape(),
            prior_layer.shape()
        )));
    }
    let mut gap_sum = 0.0;
    for (&c, &g) in client_layer.data().iter().zip(prior_layer.data()) {
        let c_cdf = normal_cdf(c, stats.mean, stats.stddev)?;
        let g_cdf = normal_cdf(g, stats.mean, stats.stddev)?;
        gap_sum += (g_cdf - c_cdf).abs();
    }
    let raw_cdf_gap = gap_sum / client_layer.len() as f64;
    Ok(AdjustedProbability {
        raw_cdf_gap,
        penalized: penalize_gap(raw_cdf_gap),
    })
}

/// Probability-weighted robust aggregation.
///
/// Layer by layer: score every update with [`client_layer_probability`]
/// against the prior (standard deviation floored at [`STDDEV_FLOOR`]), then
/// blend the client layers with the penalized weights. When the weights of
/// a layer sum below [`SUPPRESSED_LAYER_EPSILON`], the prior layer is kept.
/// Reported example counts are ignored entirely.
pub fn fedbayes_aggregate(prior: &ModelParams, updates: &[ClientUpdate]) -> Result<ModelParams> {
    check_updates(updates)?;
    for u in updates {
        if !u.params.same_shape(prior) {
            return Err(Error::ShapeMismatch(format!(
                "client {} architecture {:?} does not match prior {:?}",
                u.client_id,
                u.params.arch(),
                prior.arch()
            )));
        }
    }
    let mut layers = Vec::with_capacity(prior.layers().len());
    for (li, (name, prior_layer)) in prior.layers().iter().enumerate() {
        let mut stats = layer_stats(prior_layer)?;
        stats.stddev = stats.stddev.max(STDDEV_FLOOR);
        let mut weights = Vec::with_capacity(updates.len());
        for u in updates {
            let prob = client_layer_probability(&u.params.layers()[li].1, prior_layer, &stats)?;
            weights.push(prob.penalized);
        }
        let weight_sum: f64 = weights.iter().sum();
        let blended = if weight_sum < SUPPRESSED_LAYER_EPSILON {
            prior_layer.clone()
        } else {
            let mut acc = Tensor2D::zeros(prior_layer.rows(), prior_layer.cols());
            for (u, &w) in updates.iter().zip(&weights) {
                acc.add_assign_scaled(&u.params.layers()[li].1, w)?;
            }
            acc.map(|v| v / weight_sum)
        };
        layers.push((name.clone(), blended));
    }
    ModelParams::from_layers(prior.arch().to_vec(), layers)
}

/// Classic example-weighted averaging: each update contributes in
/// proportion to its reported example count, so inflated reports buy
/// influence.
pub fn fedavg_aggregate(updates: &[ClientUpdate]) -> Result<ModelParams> {
    check_updates(updates)?;
    let first = &updates[0].params;
    for u in updates {
        if !u.params.same_shape(first) {
            return Err(Error::ShapeMismatch(format!(
                "client {} architecture {:?} does not match client {}",
                u.client_id,
                u.params.arch(),
                updates[0].client_id
            )));
        }
        if u.reported_examples == 0 {
            return Err(Error::InvalidInput(format!(
                "client {} reports zero examples",
                u.client_id
            )));
        }
    }
    let total: f64 = updates.iter().map(|u| u.reported_examples as f64).sum();
    let mut acc = first.map(|_| 0.0);
    for u in updates {
        let weight = u.reported_examples as f64 / total;
        acc = acc.zip_map(&u.params, move |a, p| a + weight * p)?;
    }
    Ok(acc)
}

fn check_updates(updates: &[ClientUpdate]) -> Result<()> {
    if updates.is_empty() {
        return Err(Error::InvalidInput(
            "aggregation needs at least one update".to_string(),
        ));
    }
    Ok(())
}

/// Aggregation rule selected for a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    FedAvg,
    FedBayes,
    FedAdagrad,
    FedAdam,
    FedYogi,
}

impl Strategy {
    pub const ALL: [Strategy; 5] = [
        Strategy::FedAvg,
        Strategy::FedBayes,
        Strategy::FedAdagrad,
        Strategy::FedAdam,
        Strategy::FedYogi,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Strategy::FedAvg => "fedavg",
            Strategy::FedBayes => "fedbayes",
            Strategy::FedAdagrad => "fedadagrad",
            Strategy::FedAdam => "fedadam",
            Strategy::FedYogi => "fedyogi",
        }
    }

    /// True for the strategies that keep momentum state on the server.
    pub fn is_adaptive(&self) -> bool {
        matches!(
            self,
            Strategy::FedAdagrad | Strategy::FedAdam | Strategy::FedYogi
        )
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Strategy> {
        Strategy::ALL
            .iter()
            .find(|st| st.name() == s)
            .copied()
            .ok_or_else(|| {
                Error::InvalidInput(format!(
                    "unknown strategy `{s}`; valid: fedavg, fedbayes, fedadagrad, fedadam, fedyogi"
                ))
            })
    }
}

/// Hyperparameters of the adaptive server optimizers.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ServerOptHyper {
    /// Server learning rate.
    pub eta: f64,
    /// Momentum decay.
    pub beta1: f64,
    /// Second-moment decay.
    pub beta2: f64,
    /// Denominator offset keeping steps finite when the second moment
    /// vanishes.
    pub tau: f64,
}

impl Default for ServerOptHyper {
    fn default() -> Self {
        ServerOptHyper {
            eta: 0.1,
            beta1: 0.9,
            beta2: 0.99,
            tau: 1e-3,
        }
    }
}

/// Momentum and second-moment accumulators carried across rounds.
#[derive(Debug, Clone)]
pub struct ServerOptState {
    pub strategy: Strategy,
    /// First moment, zero-initialised.
    pub m: ModelParams,
    /// Second moment, zero-initialised; stays elementwise non-negative.
    pub v: ModelParams,
    pub hyper: ServerOptHyper,
}

impl ServerOptState {
    /// Fresh state shaped like `template` with zeroed accumulators.
    pub fn new(strategy: Strategy, template: &ModelParams, hyper: ServerOptHyper) -> Result<Self> {
        validate_hyper(&hyper)?;
        Ok(ServerOptState {
            strategy,
            m: template.map(|_| 0.0),
            v: template.map(|_| 0.0),
            hyper,
        })
    }
}

fn validate_hyper(hyper: &ServerOptHyper) -> Result<()> {
    if !(hyper.eta.is_finite() && hyper.eta > 0.0) {
        return Err(Error::InvalidInput(format!(
            "server eta must be finite and positive, got {}",
            hyper.eta
        )));
    }
    for (name, value) in [("beta1", hyper.beta1), ("beta2", hyper.beta2)] {
        if !(value.is_finite() && (0.0..1.0).contains(&value)) {
            return Err(Error::InvalidInput(format!(
                "server {name} must lie in [0, 1), got {value}"
            )));
        }
    }
    if !(hyper.tau.is_finite() && hyper.tau > 0.0) {
        return Err(Error::InvalidInput(format!(
            "server tau must be finite and positive, got {}",
            hyper.tau
        )));
    }
    Ok(())
}

/// Sign with a true zero branch, so an exact tie never perturbs the second
/// moment.
pub(crate) fn sign0(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// One adaptive server step.
///
/// The pseudo-gradient is the example-weighted average of the updates minus
/// the current global model. With decay rates `beta1` and `beta2`:
/// momentum `m <- beta1 m + (1 - beta1) delta`; second moment per strategy
/// (`v + delta^2` for FedAdagrad, `beta2 v + (1 - beta2) delta^2` for
/// FedAdam, `v - (1 - beta2) delta^2 sign(v - delta^2)` for FedYogi); then
/// `global <- global + eta * m / (sqrt(v) + tau)`. No bias correction is
/// applied. Returns the stepped model and the advanced state.
pub fn server_opt_step(
    state: &ServerOptState,
    global: &ModelParams,
    updates: &[ClientUpdate],
) -> Result<(ModelParams, ServerOptState)> {
    if !state.strategy.is_adaptive() {
        return Err(Error::InvalidInput(format!(
            "server_opt_step does not apply to strategy {}",
            state.strategy
        )));
    }
    if !state.m.same_shape(global) {
        return Err(Error::ShapeMismatch(
            "optimizer state does not match the global model".to_string(),
        ));
    }
    let hyper = &state.hyper;
    let average = fedavg_aggregate(updates)?;
    let delta = average.zip_map(global, |avg, g| avg - g)?;
    let m = state
        .m
        .zip_map(&delta, |m, d| hyper.beta1 * m + (1.0 - hyper.beta1) * d)?;
    let v = match state.strategy {
        Strategy::FedAdagrad => state.v.zip_map(&delta, |v, d| v + d * d)?,
        Strategy::FedAdam => state
            .v
            .zip_map(&delta, |v, d| hyper.beta2 * v + (1.0 - hyper.beta2) * d * d)?,
        Strategy::FedYogi => state.v.zip_map(&delta, |v, d| {
            v - (1.0 - hyper.beta2) * d * d * sign0(v - d * d)
        })?,
        Strategy::FedAvg | Strategy::FedBayes => unreachable!("guarded above"),
    };
    let step = m.zip_map(&v, |m, v| m / (v.sqrt() + hyper.tau))?;
    let stepped = global.zip_map(&step, |g, s| g + hyper.eta * s)?;
    let next = ServerOptState {
        strategy: state.strategy,
        m,
        v,
        hyper: state.hyper,
    };
    Ok((stepped, next))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn update(id: usize, params: ModelParams, reported: usize) -> ClientUpdate {
        ClientUpdate {
            client_id: id,
            params,
            reported_examples: reported,
        }
    }

    fn model_1x1(w: f64, b: f64) -> ModelParams {
        let layers = vec![
            ("w1".to_string(), Tensor2D::new(1, 1, vec![w]).unwrap()),
            ("b1".to_string(), Tensor2D::new(1, 1, vec![b]).unwrap()),
        ];
        ModelParams::from_layers(vec![1, 1], layers).unwrap()
    }

    #[test]
    fn cdf_reference_points() {
        // Constants computed with the complementary error function.
        assert_eq!(normal_cdf(0.0, 0.0, 1.0).unwrap(), 0.5);
        let phi1 = normal_cdf(1.0, 0.0, 1.0).unwrap();
        assert!((phi1 - 0.841_344_746_068_542_9).abs() < 1e-12);
        let phi25 = normal_cdf(2.5, 0.0, 1.0).unwrap();
        assert!((phi25 - 0.993_790_334_674_223_8).abs() < 1e-12);
        let tail = normal_cdf(-8.0, 0.0, 1.0).unwrap();
        assert!((tail - 6.220_960_574_271_819e-16).abs() < 1e-22);
        assert_eq!(normal_cdf(-40.0, 0.0, 1.0).unwrap(), 0.0);
        assert_eq!(normal_cdf(40.0, 0.0, 1.0).unwrap(), 1.0);
    }

    #[test]
    fn cdf_is_symmetric_and_monotonic() {
        for i in 0..200 {
            let z = -5.0 + i as f64 * 0.05;
            let lo = normal_cdf(z, 0.0, 1.0).unwrap();
            let hi = normal_cdf(z + 0.05, 0.0, 1.0).unwrap();
            assert!(hi >= lo, "not monotone at {z}");
            let mirrored = normal_cdf(-z, 0.0, 1.0).unwrap();
            assert!((lo + mirrored - 1.0).abs() < 1e-15, "asymmetric at {z}");
        }
    }

    #[test]
    fn cdf_standardises_mean_and_stddev() {
        let a = normal_cdf(3.0, 1.0, 2.0).unwrap();
        let b = normal_cdf(1.0, 0.0, 1.0).unwrap();
        assert_eq!(a, b);
        assert!(normal_cdf(0.0, 0.0, 0.0).is_err());
        assert!(normal_cdf(0.0, 0.0, -1.0).is_err());
        assert!(normal_cdf(f64::NAN, 0.0, 1.0).is_err());
    }

    #[test]
    fn layer_stats_population_moments() {
        let layer = Tensor2D::new(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let stats = layer_stats(&layer).unwrap();
        assert!((stats.mean - 2.5).abs() < 1e-15);
        assert!((stats.stddev - 1.118_033_988_749_895).abs() < 1e-15);
        let constant = Tensor2D::new(1, 3, vec![7.0, 7.0, 7.0]).unwrap();
        assert_eq!(layer_stats(&constant).unwrap().stddev, 0.0);
        assert!(layer_stats(&Tensor2D::zeros(0, 5)).is_err());
    }

    #[test]
    fn penalty_arithmetic() {
        assert!((penalize_gap(0.003) - 0.7).abs() < 1e-12);
        assert_eq!(penalize_gap(0.0), 1.0);
        assert_eq!(penalize_gap(0.01), 0.0);
        assert_eq!(penalize_gap(0.5), 0.0);
    }

    #[test]
    fn probability_matches_frozen_cdf_gap() {
        // Prior elements at the mean, client elements one thousandth of a
        // standard deviation away on both sides: each gap is
        // phi(0.001) - 0.5 = 3.9894221391101325e-4.
        let prior = Tensor2D::new(1, 2, vec![0.0, 0.0]).unwrap();
        let client = Tensor2D::new(1, 2, vec![0.001, -0.001]).unwrap();
        let stats = LayerStats { mean: 0.0, stddev: 1.0 };
        let prob = client_layer_probability(&client, &prior, &stats).unwrap();
        assert!((prob.raw_cdf_gap - 3.989_422_139_110_132_5e-4).abs() < 1e-15);
        assert!((prob.penalized - 0.960_105_778_608_898_7).abs() < 1e-12);
    }

    #[test]
    fn probability_of_identical_layer_is_one() {
        let prior = Tensor2D::new(1, 3, vec![0.3, -0.2, 0.9]).unwrap();
        let stats = layer_stats(&prior).unwrap();
        let prob = client_layer_probability(&prior, &prior, &stats).unwrap();
        assert_eq!(prob.raw_cdf_gap, 0.0);
        assert_eq!(prob.penalized, 1.0);
    }

    #[test]
    fn probability_rejects_shape_mismatch() {
        let stats = LayerStats { mean: 0.0, stddev: 1.0 };
        let a = Tensor2D::zeros(1, 2);
        let b = Tensor2D::zeros(2, 1);
        assert!(client_layer_probability(&a, &b, &stats).is_err());
    }

    #[test]
    fn fedbayes_fixpoint_when_clients_echo_the_prior() {
        let prior = model_1x1(0.4, -0.2);
        let updates = vec![
            update(0, prior.clone(), 10),
            update(1, prior.clone(), 999),
            update(2, prior.clone(), 1),
        ];
        let out = fedbayes_aggregate(&prior, &updates).unwrap();
        for ((_, got), (_, want)) in out.layers().iter().zip(prior.layers()) {
            for (g, w) in got.data().iter().zip(want.data()) {
                assert!((g - w).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn fedbayes_ignores_reported_examples() {
        let prior = model_1x1(0.1, 0.2);
        let a = model_1x1(0.12, 0.19);
        let b = model_1x1(0.09, 0.22);
        let base = vec![update(0, a.clone(), 100), update(1, b.clone(), 100)];
        let inflated = vec![update(0, a, 100), update(1, b, 100_000)];
        let x = fedbayes_aggregate(&prior, &base).unwrap();
        let y = fedbayes_aggregate(&prior, &inflated).unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn fedbayes_keeps_prior_when_all_suppressed() {
        // Constant prior layers get the floored stddev of 1e-6, so clients
        // sitting far away earn a weight of exactly zero.
        let prior = model_1x1(0.0, 0.0);
        let far = model_1x1(1.0, -1.0);
        let updates = vec![update(0, far.clone(), 5), update(1, far, 5)];
        let out = fedbayes_aggregate(&prior, &updates).unwrap();
        assert_eq!(out, prior);
    }

    #[test]
    fn fedbayes_drops_outlier_keeps_consensus() {
        let prior = model_1x1(0.5, -0.5);
        let near = model_1x1(0.5, -0.5);
        let far = model_1x1(50.0, 50.0);
        let updates = vec![update(0, near.clone(), 1), update(1, far, 1_000_000)];
        let out = fedbayes_aggregate(&prior, &updates).unwrap();
        for ((_, got), (_, want)) in out.layers().iter().zip(near.layers()) {
            for (g, w) in got.data().iter().zip(want.data()) {
                assert!((g - w).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn fedbayes_validates_inputs() {
        let prior = model_1x1(0.0, 0.0);
        assert!(fedbayes_aggregate(&prior, &[]).is_err());
        let wrong = ModelParams::zeros(&[2, 1]).unwrap();
        assert!(fedbayes_aggregate(&prior, &[update(0, wrong, 1)]).is_err());
    }

    #[test]
    fn fedavg_weights_by_reported_examples() {
        let a = model_1x1(0.0, 4.0);
        let b = model_1x1(1.0, 0.0);
        let out = fedavg_aggregate(&[update(0, a, 1), update(1, b, 3)]).unwrap();
        assert_eq!(out.layers()[0].1.data()[0], 0.75);
        assert_eq!(out.layers()[1].1.data()[0], 1.0);
    }

    #[test]
    fn fedavg_is_invariant_to_proportional_scaling() {
        let a = model_1x1(0.3, -0.1);
        let b = model_1x1(-0.2, 0.4);
        let base = fedavg_aggregate(&[update(0, a.clone(), 200), update(1, b.clone(), 600)]).unwrap();
        let scaled = fedavg_aggregate(&[update(0, a, 2), update(1, b, 6)]).unwrap();
        for ((_, x), (_, y)) in base.layers().iter().zip(scaled.layers()) {
            for (p, q) in x.data().iter().zip(y.data()) {
                assert!((p - q).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn fedavg_validates_inputs() {
        assert!(fedavg_aggregate(&[]).is_err());
        let a = model_1x1(0.0, 0.0);
        assert!(fedavg_aggregate(&[update(0, a.clone(), 0)]).is_err());
        let wrong = ModelParams::zeros(&[3, 1]).unwrap();
        assert!(fedavg_aggregate(&[update(0, a, 1), update(1, wrong, 1)]).is_err());
    }

    #[test]
    fn strategy_round_trips_through_names() {
        for s in Strategy::ALL {
            assert_eq!(s.name().parse::<Strategy>().unwrap(), s);
        }
        assert!("fedmedian".parse::<Strategy>().is_err());
    }

    #[test]
    fn adagrad_step_matches_scalar_recurrence() {
        let global = model_1x1(0.0, 0.0);
        let client = model_1x1(1.0, 0.0);
        let state = ServerOptState::new(
            Strategy::FedAdagrad,
            &global,
            ServerOptHyper::default(),
        )
        .unwrap();
        let (next, state) = server_opt_step(&state, &global, &[update(0, client, 10)]).unwrap();
        // delta_w = 1: m = 0.1, v = 1, step = 0.1 * 0.1 / (1 + 1e-3).
        let w = next.layers()[0].1.data()[0];
        assert!((w - 0.01 / 1.001).abs() < 1e-15);
        // delta_b = 0: v stays 0 and the bias must not move.
        assert_eq!(next.layers()[1].1.data()[0], 0.0);
        assert!((state.m.layers()[0].1.data()[0] - 0.1).abs() < 1e-15);
        assert_eq!(state.v.layers()[0].1.data()[0], 1.0);
    }

    #[test]
    fn adam_and_yogi_agree_from_zero_then_diverge() {
        let global = model_1x1(0.0, 0.0);
        let client = model_1x1(1.0, 0.0);
        let hyper = ServerOptHyper::default();
        let adam = ServerOptState::new(Strategy::FedAdam, &global, hyper).unwrap();
        let yogi = ServerOptState::new(Strategy::FedYogi, &global, hyper).unwrap();
        let upd = vec![update(0, client, 10)];
        let (adam_1, adam_state) = server_opt_step(&adam, &global, &upd).unwrap();
        let (yogi_1, yogi_state) = server_opt_step(&yogi, &global, &upd).unwrap();
        // From v = 0 with delta^2 > 0 both rules add (1 - beta2) delta^2.
        assert_eq!(
            adam_1.layers()[0].1.data()[0],
            yogi_1.layers()[0].1.data()[0]
        );
        let w = adam_1.layers()[0].1.data()[0];
        assert!((w - 0.1 * 0.1 / (0.01f64.sqrt() + 1e-3)).abs() < 1e-15);

        // A smaller second delta makes yogi's v shrink while adam's decays
        // toward the new delta^2; the states must now differ.
        let small = model_1x1(0.01, 0.0);
        let upd2 = vec![update(0, small, 10)];
        let (_, adam_state) = server_opt_step(&adam_state, &adam_1, &upd2).unwrap();
        let (_, yogi_state) = server_opt_step(&yogi_state, &yogi_1, &upd2).unwrap();
        assert_ne!(
            adam_state.v.layers()[0].1.data()[0],
            yogi_state.v.layers()[0].1.data()[0]
        );
        assert!(yogi_state.v.layers()[0].1.data()[0] >= 0.0);
    }

    #[test]
    fn yogi_second_moment_stays_non_negative() {
        let global = model_1x1(0.0, 0.0);
        let hyper = ServerOptHyper::default();
        let mut state = ServerOptState::new(Strategy::FedYogi, &global, hyper).unwrap();
        let mut g = global.clone();
        for i in 0..50 {
            let delta = if i % 2 == 0 { 1.0 } else { 1e-8 };
            let client = g.map(move |x| x + delta);
            let (next, next_state) = server_opt_step(&state, &g, &[update(0, client, 1)]).unwrap();
            for (_, t) in next_state.v.layers() {
                assert!(t.data().iter().all(|&v| v >= 0.0));
            }
            g = next;
            state = next_state;
        }
    }

    #[test]
    fn sign0_has_a_zero_branch() {
        assert_eq!(sign0(3.5), 1.0);
        assert_eq!(sign0(-3.5), -1.0);
        assert_eq!(sign0(0.0), 0.0);
        assert_eq!(sign0(-0.0), 0.0);
    }

    #[test]
    fn server_opt_rejects_non_adaptive_strategies() {
        let global = model_1x1(0.0, 0.0);
        for strategy in [Strategy::FedAvg, Strategy::FedBayes] {
            let state =
                ServerOptState::new(strategy, &global, ServerOptHyper::default()).unwrap();
            let client = model_1x1(1.0, 1.0);
            assert!(server_opt_step(&state, &global, &[update(0, client, 1)]).is_err());
        }
    }

    #[test]
    fn hyper_validation_rejects_bad_values() {
        let global = model_1x1(0.0, 0.0);
        let bad = [
            ServerOptHyper { eta: 0.0, ..Default::default() },
            ServerOptHyper { beta1: 1.0, ..Default::default() },
            ServerOptHyper { beta2: -0.1, ..Default::default() },
            ServerOptHyper { tau: 0.0, ..Default::default() },
        ];
        for hyper in bad {
            assert!(ServerOptState::new(Strategy::FedAdam, &global, hyper).is_err());
        }
    }
}
