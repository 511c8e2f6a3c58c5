//! Fully connected classifier: parameter container, mini-batch SGD training,
//! evaluation, and a finite-difference gradient check.
//!
//! The network is a stack of dense layers with ReLU between them and linear
//! output; the loss is softmax cross-entropy. All arithmetic is `f64` and
//! every operation is deterministic, so two calls with equal inputs return
//! bitwise-identical results regardless of thread count or call order.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::tensor::Tensor2D;

/// Evaluation batch size; chunking only bounds memory, results do not depend
/// on it because every row is computed independently and sums accumulate in
/// row order.
const EVAL_BATCH: usize = 256;

/// Named parameter tensors of a dense network.
///
/// `arch` lists layer widths from input to output, e.g. `[784, 64, 10]`.
/// `layers` holds, per dense layer `k` (1-based), the pair `w{k}` of shape
/// `(fan_in, fan_out)` followed by `b{k}` of shape `(1, fan_out)`, in order.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    arch: Vec<usize>,
    layers: Vec<(String, Tensor2D)>,
}

impl ModelParams {
    /// Glorot-uniform initialisation: weights drawn from
    /// `U(-s, s)` with `s = sqrt(6 / (fan_in + fan_out))`, biases zero.
    /// The draw order (layers in order, weights row-major) is fixed, so one
    /// seed always yields the same model.
    pub fn init(arch: &[usize], seed: u64) -> Result<Self> {
        Self::validate_arch(arch)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers = Vec::with_capacity(2 * (arch.len() - 1));
        for k in 1..arch.len() {
            let (fan_in, fan_out) = (arch[k - 1], arch[k]);
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let weights: Vec<f64> = (0..fan_in * fan_out)
                .map(|_| rng.random_range(-limit..limit))
                .collect();
            layers.push((format!("w{k}"), Tensor2D::new(fan_in, fan_out, weights)?));
            layers.push((format!("b{k}"), Tensor2D::zeros(1, fan_out)));
        }
        Ok(ModelParams {
            arch: arch.to_vec(),
            layers,
        })
    }

    /// All-zero parameters with the given architecture.
    pub fn zeros(arch: &[usize]) -> Result<Self> {
        Self::validate_arch(arch)?;
        let mut layers = Vec::with_capacity(2 * (arch.len() - 1));
        for k in 1..arch.len() {
            layers.push((format!("w{k}"), Tensor2D::zeros(arch[k - 1], arch[k])));
            layers.push((format!("b{k}"), Tensor2D::zeros(1, arch[k])));
        }
        Ok(ModelParams {
            arch: arch.to_vec(),
            layers,
        })
    }

    /// Rebuilds a model from named tensors, checking names and shapes
    /// against the architecture.
    pub fn from_layers(arch: Vec<usize>, layers: Vec<(String, Tensor2D)>) -> Result<Self> {
        Self::validate_arch(&arch)?;
        let expected = ModelParams::zeros(&arch)?;
        if layers.len() != expected.layers.len() {
            return Err(Error::ShapeMismatch(format!(
                "expected {} parameter tensors, got {}",
                expected.layers.len(),
                layers.len()
            )));
        }
        for ((name, tensor), (want_name, want_tensor)) in layers.iter().zip(&expected.layers) {
            if name != want_name || tensor.shape() != want_tensor.shape() {
                return Err(Error::ShapeMismatch(format!(
                    "layer `{name}` of shape {:?} does not match `{want_name}` of shape {:?}",
                    tensor.shape(),
                    want_tensor.shape()
                )));
            }
        }
        Ok(ModelParams { arch, layers })
    }

    pub fn arch(&self) -> &[usize] {
        &self.arch
    }

    /// Named parameter tensors in fixed order: `w1, b1, w2, b2, ...`.
    pub fn layers(&self) -> &[(String, Tensor2D)] {
        &self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.arch[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.arch.last().expect("arch validated nonempty")
    }

    /// Number of dense layers.
    pub fn dense_layers(&self) -> usize {
        self.arch.len() - 1
    }

    fn weight(&self, k: usize) -> &Tensor2D {
        &self.layers[2 * k].1
    }

    fn bias(&self, k: usize) -> &Tensor2D {
        &self.layers[2 * k + 1].1
    }

    /// True when both models have identical layer names and shapes.
    pub fn same_shape(&self, other: &ModelParams) -> bool {
        self.arch == other.arch
    }

    /// Elementwise map over every parameter tensor.
    pub fn map(&self, f: impl Fn(f64) -> f64 + Copy) -> ModelParams {
        ModelParams {
            arch: self.arch.clone(),
            layers: self
                .layers
                .iter()
                .map(|(name, t)| (name.clone(), t.map(f)))
                .collect(),
        }
    }

    /// Elementwise combination of two same-shape models.
    pub fn zip_map(
        &self,
        other: &ModelParams,
        f: impl Fn(f64, f64) -> f64 + Copy,
    ) -> Result<ModelParams> {
        if !self.same_shape(other) {
            return Err(Error::ShapeMismatch(format!(
                "cannot combine models with architectures {:?} and {:?}",
                self.arch, other.arch
            )));
        }
        let layers = self
            .layers
            .iter()
            .zip(&other.layers)
            .map(|((name, a), (_, b))| Ok((name.clone(), a.zip_map(b, f)?)))
            .collect::<Result<Vec<_>>>()?;
        Ok(ModelParams {
            arch: self.arch.clone(),
            layers,
        })
    }

    /// True when every parameter is finite.
    pub fn is_all_finite(&self) -> bool {
        self.layers.iter().all(|(_, t)| t.is_all_finite())
    }

    fn validate_arch(arch: &[usize]) -> Result<()> {
        if arch.len() < 2 {
            return Err(Error::InvalidInput(format!(
                "architecture needs at least input and output widths, got {arch:?}"
            )));
        }
        if arch.iter().any(|&w| w == 0) {
            return Err(Error::InvalidInput(format!(
                "architecture widths must be nonzero, got {arch:?}"
            )));
        }
        Ok(())
    }
}

/// Hyperparameters for one local training call.
///
/// Each epoch visits every example once in a freshly shuffled order; the
/// shuffle for epoch `e` is seeded with `seed + e`, so a fixed config always
/// produces the same batch sequence. A `learning_rate` of zero is allowed
/// and leaves the parameters bitwise unchanged.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl TrainConfig {
    fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::InvalidInput("epochs must be at least 1".to_string()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidInput(
                "batch_size must be at least 1".to_string(),
            ));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(Error::InvalidInput(format!(
                "learning_rate must be finite and non-negative, got {}",
                self.learning_rate
            )));
        }
        Ok(())
    }
}

/// Runs the network on a batch of rows and returns the logits.
pub fn forward(params: &ModelParams, batch: &Tensor2D) -> Result<Tensor2D> {
    if batch.cols() != params.input_dim() {
        return Err(Error::ShapeMismatch(format!(
            "batch has {} columns, model expects {}",
            batch.cols(),
            params.input_dim()
        )));
    }
    let mut hidden = None;
    let last = params.dense_layers() - 1;
    for k in 0..=last {
        let input = hidden.as_ref().unwrap_or(batch);
        let mut z = input.matmul(params.weight(k))?;
        add_bias_rows(&mut z, params.bias(k));
        hidden = Some(if k < last { z.map(relu) } else { z });
    }
    let logits = hidden.expect("at least one dense layer");
    if !logits.is_all_finite() {
        return Err(Error::InvalidInput(
            "forward pass produced non-finite logits".to_string(),
        ));
    }
    Ok(logits)
}

/// Predicted class per row: the argmax of the logits, with ties resolved
/// toward the lowest class index.
pub fn predict(params: &ModelParams, batch: &Tensor2D) -> Result<Vec<usize>> {
    let logits = forward(params, batch)?;
    Ok((0..logits.rows())
        .map(|r| argmax_row(logits.row(r)))
        .collect())
}

/// Trains a copy of `params` on `data` and returns it; the inputs are never
/// mutated, so callers may train many clients from one global model in
/// parallel.
pub fn train_local(params: &ModelParams, data: &Dataset, cfg: &TrainConfig) -> Result<ModelParams> {
    cfg.validate()?;
    check_model_data(params, data)?;
    let features = data.features();
    let labels = data.labels();
    let n = data.len();
    let dim = features.cols();

    let mut model = params.clone();
    let mut order: Vec<usize> = (0..n).collect();
    for epoch in 0..cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(epoch as u64));
        shuffle(&mut order, &mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let mut batch = Tensor2D::zeros(chunk.len(), dim);
            let mut batch_labels = Vec::with_capacity(chunk.len());
            for (i, &idx) in chunk.iter().enumerate() {
                batch.data_mut()[i * dim..(i + 1) * dim].copy_from_slice(features.row(idx));
                batch_labels.push(labels[idx]);
            }
            let (_, grads) = loss_and_grads(&model, &batch, &batch_labels)?;
            for (k, grad) in grads.iter().enumerate() {
                model.layers[k].1.add_assign_scaled(grad, -cfg.learning_rate)?;
            }
        }
        if !model.is_all_finite() {
            return Err(Error::InvalidInput(format!(
                "training diverged to non-finite parameters in epoch {epoch}"
            )));
        }
    }
    Ok(model)
}

/// Accuracy and mean cross-entropy loss of `params` on `data`.
pub fn evaluate(params: &ModelParams, data: &Dataset) -> Result<(f64, f64)> {
    check_model_data(params, data)?;
    let features = data.features();
    let labels = data.labels();
    let dim = features.cols();
    let mut correct = 0usize;
    let mut loss_sum = 0.0;
    let mut start = 0;
    while start < data.len() {
        let end = (start + EVAL_BATCH).min(data.len());
        let rows = end - start;
        let mut batch = Tensor2D::zeros(rows, dim);
        batch
            .data_mut()
            .copy_from_slice(&features.data()[start * dim..end * dim]);
        let logits = forward(params, &batch)?;
        for r in 0..rows {
            let row = logits.row(r);
            let label = labels[start + r];
            loss_sum += cross_entropy_row(row, label);
            if argmax_row(row) == label {
                correct += 1;
            }
        }
        start = end;
    }
    let n = data.len() as f64;
    Ok((correct as f64 / n, loss_sum / n))
}

/// Compares backpropagated gradients against central finite differences on
/// the full dataset and returns the worst relative error.
///
/// Per parameter, with backprop gradient `b` and finite difference `f`, the
/// relative error is `0` when `|b - f| < 1e-9` and `|b - f| / max(|b|, |f|)`
/// otherwise, so near-zero gradients do not blow up the ratio.
pub fn gradient_check(params: &ModelParams, data: &Dataset, epsilon: f64) -> Result<f64> {
    if !(epsilon.is_finite() && epsilon > 0.0) {
        return Err(Error::InvalidInput(format!(
            "epsilon must be finite and positive, got {epsilon}"
        )));
    }
    check_model_data(params, data)?;
    let batch = data.features().clone();
    let labels = data.labels().to_vec();
    let (_, grads) = loss_and_grads(params, &batch, &labels)?;

    let mut worst = 0.0f64;
    let mut probe = params.clone();
    for k in 0..probe.layers.len() {
        for i in 0..probe.layers[k].1.len() {
            let original = probe.layers[k].1.data()[i];
            probe.layers[k].1.data_mut()[i] = original + epsilon;
            let loss_plus = mean_loss(&probe, &batch, &labels)?;
            probe.layers[k].1.data_mut()[i] = original - epsilon;
            let loss_minus = mean_loss(&probe, &batch, &labels)?;
            probe.layers[k].1.data_mut()[i] = original;

            let fd = (loss_plus - loss_minus) / (2.0 * epsilon);
            let bp = grads[k].data()[i];
            let diff = (bp - fd).abs();
            let rel = if diff < 1e-9 {
                0.0
            } else {
                diff / bp.abs().max(fd.abs())
            };
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}

/// Mean softmax cross-entropy of the model on a prepared batch.
fn mean_loss(params: &ModelParams, batch: &Tensor2D, labels: &[usize]) -> Result<f64> {
    let logits = forward(params, batch)?;
    let mut sum = 0.0;
    for r in 0..logits.rows() {
        sum += cross_entropy_row(logits.row(r), labels[r]);
    }
    Ok(sum / logits.rows() as f64)
}

/// Mean loss and gradients for one mini-batch, one tensor per parameter in
/// the model's layer order.
fn loss_and_grads(
    params: &ModelParams,
    batch: &Tensor2D,
    labels: &[usize],
) -> Result<(f64, Vec<Tensor2D>)> {
    let rows = batch.rows();
    let last = params.dense_layers() - 1;

    let mut activations: Vec<Tensor2D> = Vec::with_capacity(last + 2);
    activations.push(batch.clone());
    let mut pre_relu: Vec<Tensor2D> = Vec::with_capacity(last);
    for k in 0..=last {
        let mut z = activations[k].matmul(params.weight(k))?;
        add_bias_rows(&mut z, params.bias(k));
        if k < last {
            pre_relu.push(z.clone());
            activations.push(z.map(relu));
        } else {
            activations.push(z);
        }
    }
    let logits = activations.last().expect("forward output present");

    let mut loss = 0.0;
    let mut delta = Tensor2D::zeros(rows, params.output_dim());
    for r in 0..rows {
        let row = logits.row(r);
        loss += cross_entropy_row(row, labels[r]);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let denom: f64 = row.iter().map(|&v| (v - max).exp()).sum();
        for (c, &v) in row.iter().enumerate() {
            let prob = (v - max).exp() / denom;
            let target = if c == labels[r] { 1.0 } else { 0.0 };
            delta.set(r, c, (prob - target) / rows as f64);
        }
    }
    loss /= rows as f64;

    let mut grads = vec![Tensor2D::zeros(0, 0); 2 * (last + 1)];
    for k in (0..=last).rev() {
        grads[2 * k] = activations[k].transpose().matmul(&delta)?;
        grads[2 * k + 1] = column_sums(&delta);
        if k > 0 {
            let back = delta.matmul(&params.weight(k).transpose())?;
            delta = back.zip_map(&pre_relu[k - 1], |d, z| if z > 0.0 { d } else { 0.0 })?;
        }
    }
    Ok((loss, grads))
}

/// Cross-entropy of one logit row via a max-shifted log-sum-exp.
fn cross_entropy_row(row: &[f64], label: usize) -> f64 {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = row.iter().map(|&v| (v - max).exp()).sum();
    max + sum.ln() - row[label]
}

fn argmax_row(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn relu(v: f64) -> f64 {
    if v > 0.0 {
        v
    } else {
        0.0
    }
}

fn add_bias_rows(z: &mut Tensor2D, bias: &Tensor2D) {
    let cols = z.cols();
    debug_assert_eq!(cols, bias.cols());
    for r in 0..z.rows() {
        let row = &mut z.data_mut()[r * cols..(r + 1) * cols];
        for (v, &b) in row.iter_mut().zip(bias.data()) {
            *v += b;
        }
    }
}

/// Fisher-Yates shuffle driven by the supplied generator.
fn shuffle(order: &mut [usize], rng: &mut ChaCha8Rng) {
    for i in (1..order.len()).rev() {
        let j = rng.random_range(0..=i);
        order.swap(i, j);
    }
}

fn column_sums(t: &Tensor2D) -> Tensor2D {
    let mut out = Tensor2D::zeros(1, t.cols());
    for r in 0..t.rows() {
        for (sum, &v) in out.data_mut().iter_mut().zip(t.row(r)) {
            *sum += v;
        }
    }
    out
}

fn check_model_data(params: &ModelParams, data: &Dataset) -> Result<()> {
    if data.features().cols() != params.input_dim() {
        return Err(Error::ShapeMismatch(format!(
            "dataset dimension {} does not match model input {}",
            data.features().cols(),
            params.input_dim()
        )));
    }
    if data.class_count() != params.output_dim() {
        return Err(Error::ShapeMismatch(format!(
            "dataset has {} classes, model outputs {}",
            data.class_count(),
            params.output_dim()
        )));
    }
    Ok(())
}
