//! Small dense ReLU classifier trained with masked SGD.
//!
//! Weights are stored input-major: `W[i][j]` connects input feature `i` to
//! output neuron `j`, which is also how weights are laid out on the systolic
//! array. Hidden layers use ReLU, the output layer softmax with mean
//! cross-entropy loss. Everything runs in `f64` and is deterministic for a
//! fixed seed.

use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dataio::Dataset;
use crate::faultsim::MaskSet;
use crate::{seed, Error, Result};

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::DimensionMismatch(format!(
                "{} values for a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::DimensionMismatch("ragged rows".into()));
        }
        Ok(Matrix {
            rows: rows.len(),
            cols,
            data: rows.concat(),
        })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Matrix { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        (0..self.rows).map(|i| self.row(i).to_vec()).collect()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Relu,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSpec {
    pub layer_dims: Vec<usize>,
    #[serde(default)]
    pub activation: Activation,
}

impl NetworkSpec {
    pub fn new(layer_dims: Vec<usize>) -> Result<Self> {
        let spec = NetworkSpec {
            layer_dims,
            activation: Activation::Relu,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_dims.len() < 2 {
            return Err(Error::InvalidConfig(
                "a network needs at least an input and an output dimension".into(),
            ));
        }
        if self.layer_dims.contains(&0) {
            return Err(Error::InvalidConfig("layer dimensions must be >= 1".into()));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.layer_dims[0]
    }

    pub fn num_classes(&self) -> usize {
        *self.layer_dims.last().unwrap()
    }

    pub fn num_layers(&self) -> usize {
        self.layer_dims.len() - 1
    }

    /// `(input_dim, output_dim)` of every weight matrix.
    pub fn layer_shapes(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.layer_dims.windows(2).map(|w| (w[0], w[1]))
    }

    /// Short stable fingerprint used to tie tables and reports to a network.
    pub fn fingerprint(&self) -> String {
        let dims: Vec<String> = self.layer_dims.iter().map(usize::to_string).collect();
        let text = format!("{:?}:{}", self.activation, dims.join(","));
        format!("{:016x}", seed::fnv1a(text.as_bytes()))
    }
}

/// Weights and biases of every layer.
///
/// Also used as the gradient container, since gradients share the shape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ParamsRepr", into = "ParamsRepr")]
pub struct NetworkParams {
    spec: NetworkSpec,
    pub weights: Vec<Matrix>,
    pub biases: Vec<Vec<f64>>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ParamsRepr {
    layer_dims: Vec<usize>,
    weights: Vec<Vec<Vec<f64>>>,
    biases: Vec<Vec<f64>>,
}

impl TryFrom<ParamsRepr> for NetworkParams {
    type Error = Error;

    fn try_from(repr: ParamsRepr) -> Result<Self> {
        let spec = NetworkSpec::new(repr.layer_dims)?;
        let weights = repr
            .weights
            .iter()
            .map(|rows| Matrix::from_rows(rows))
            .collect::<Result<Vec<_>>>()?;
        let params = NetworkParams {
            spec,
            weights,
            biases: repr.biases,
        };
        params.validate()?;
        Ok(params)
    }
}

impl From<NetworkParams> for ParamsRepr {
    fn from(p: NetworkParams) -> Self {
        ParamsRepr {
            layer_dims: p.spec.layer_dims,
            weights: p.weights.iter().map(Matrix::to_rows).collect(),
            biases: p.biases,
        }
    }
}

impl NetworkParams {
    pub fn zeros(spec: &NetworkSpec) -> Self {
        NetworkParams {
            spec: spec.clone(),
            weights: spec
                .layer_shapes()
                .map(|(i, j)| Matrix::zeros(i, j))
                .collect(),
            biases: spec.layer_shapes().map(|(_, j)| vec![0.0; j]).collect(),
        }
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn validate(&self) -> Result<()> {
        self.spec.validate()?;
        let n = self.spec.num_layers();
        if self.weights.len() != n || self.biases.len() != n {
            return Err(Error::DimensionMismatch(format!(
                "expected {n} layers, got {} weight matrices and {} bias vectors",
                self.weights.len(),
                self.biases.len()
            )));
        }
        for (l, (i, j)) in self.spec.layer_shapes().enumerate() {
            if self.weights[l].shape() != (i, j) || self.biases[l].len() != j {
                return Err(Error::DimensionMismatch(format!(
                    "layer {l}: expected {i}x{j} weights and {j} biases"
                )));
            }
        }
        let finite = self
            .weights
            .iter()
            .flat_map(|w| w.as_slice())
            .chain(self.biases.iter().flatten())
            .all(|v| v.is_finite());
        if !finite {
            return Err(Error::InvalidConfig(
                "parameters contain non-finite values".into(),
            ));
        }
        Ok(())
    }

    fn check_masks(&self, masks: &MaskSet) -> Result<()> {
        let shapes_match = masks.layers.len() == self.weights.len()
            && masks
                .layers
                .iter()
                .zip(&self.weights)
                .all(|(m, w)| m.shape() == w.shape());
        if !shapes_match {
            return Err(Error::DimensionMismatch(
                "mask set does not match the network's weight shapes".into(),
            ));
        }
        Ok(())
    }

    fn fill_zero(&mut self) {
        for w in &mut self.weights {
            w.as_mut_slice().fill(0.0);
        }
        for b in &mut self.biases {
            b.fill(0.0);
        }
    }

    fn scale(&mut self, k: f64) {
        for v in self
            .weights
            .iter_mut()
            .flat_map(|w| w.as_mut_slice())
            .chain(self.biases.iter_mut().flatten())
        {
            *v *= k;
        }
    }
}

pub type Gradients = NetworkParams;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl TrainConfig {
    pub fn validate(&self, train_size: usize) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidConfig("learning_rate must be > 0".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidConfig("momentum must be in [0, 1)".into()));
        }
        if self.batch_size == 0 || self.batch_size > train_size {
            return Err(Error::InvalidConfig(format!(
                "batch_size must be in [1, {train_size}], got {}",
                self.batch_size
            )));
        }
        Ok(())
    }
}

/// Test accuracy after each epoch; entry 0 is before any training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochTrace {
    pub accuracies: Vec<f64>,
}

impl EpochTrace {
    pub fn epochs(&self) -> usize {
        self.accuracies.len().saturating_sub(1)
    }

    pub fn last(&self) -> f64 {
        *self
            .accuracies
            .last()
            .expect("trace always holds the initial accuracy")
    }
}

/// Gaussian weights scaled by `1/sqrt(fan_in)`, zero biases.
pub fn init_params(spec: &NetworkSpec, seed: u64) -> NetworkParams {
    let mut rng = seed::rng(seed);
    let mut params = NetworkParams::zeros(spec);
    for w in &mut params.weights {
        let scale = 1.0 / (w.rows() as f64).sqrt();
        for v in w.as_mut_slice() {
            let z: f64 = StandardNormal.sample(&mut rng);
            *v = z * scale;
        }
    }
    params
}

/// Per-sample scratch buffers for forward and backward passes.
struct Workspace {
    /// Post-activation outputs of every layer; `acts[0]` is the input.
    acts: Vec<Vec<f64>>,
    deltas: Vec<Vec<f64>>,
}

impl Workspace {
    fn new(spec: &NetworkSpec) -> Self {
        Workspace {
            acts: spec.layer_dims.iter().map(|&d| vec![0.0; d]).collect(),
            deltas: spec.layer_dims[1..].iter().map(|&d| vec![0.0; d]).collect(),
        }
    }

    /// Leaves output logits in the last activation slot.
    fn forward(&mut self, params: &NetworkParams, x: &[f64]) {
        self.acts[0].copy_from_slice(x);
        let last = params.weights.len() - 1;
        for (l, (w, b)) in params.weights.iter().zip(&params.biases).enumerate() {
            let (head, tail) = self.acts.split_at_mut(l + 1);
            let input = &head[l];
            let out = &mut tail[0];
            out.copy_from_slice(b);
            for (i, &xi) in input.iter().enumerate() {
                if xi == 0.0 {
                    continue;
                }
                for (o, &wij) in out.iter_mut().zip(w.row(i)) {
                    *o += xi * wij;
                }
            }
            if l != last {
                for o in out.iter_mut() {
                    *o = o.max(0.0);
                }
            }
        }
    }

    fn logits(&self) -> &[f64] {
        self.acts.last().unwrap()
    }

    /// Accumulates gradients of `-ln softmax(z)[label]` into `grads` and
    /// returns the sample loss.
    fn backward(&mut self, params: &NetworkParams, label: usize, grads: &mut Gradients) -> f64 {
        let n = params.weights.len();
        let logits = self.acts[n].as_slice();
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum_exp: f64 = logits.iter().map(|z| (z - max).exp()).sum();
        let log_norm = max + sum_exp.ln();
        let loss = log_norm - logits[label];

        let top = &mut self.deltas[n - 1];
        for (d, &z) in top.iter_mut().zip(logits) {
            *d = (z - log_norm).exp();
        }
        top[label] -= 1.0;

        for l in (0..n).rev() {
            let input = &self.acts[l];
            let delta = &self.deltas[l];
            let gw = &mut grads.weights[l];
            for (i, &xi) in input.iter().enumerate() {
                if xi == 0.0 {
                    continue;
                }
                let row = &mut gw.as_mut_slice()[i * delta.len()..(i + 1) * delta.len()];
                for (g, &d) in row.iter_mut().zip(delta) {
                    *g += xi * d;
                }
            }
            for (g, &d) in grads.biases[l].iter_mut().zip(delta) {
                *g += d;
            }
            if l > 0 {
                let (lower, upper) = self.deltas.split_at_mut(l);
                let below = &mut lower[l - 1];
                let delta = &upper[0];
                let w = &params.weights[l];
                for (i, b) in below.iter_mut().enumerate() {
                    // ReLU derivative, taken as 0 at the kink
                    *b = if input[i] > 0.0 {
                        w.row(i).iter().zip(delta).map(|(a, d)| a * d).sum()
                    } else {
                        0.0
                    };
                }
            }
        }
        loss
    }
}

fn argmax(values: &[f64]) -> usize {
    // first maximum wins, so ties go to the lowest class index
    let mut best = 0;
    for (k, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = k;
        }
    }
    best
}

fn check_inputs(params: &NetworkParams, inputs: &Matrix) -> Result<()> {
    if inputs.cols() != params.spec.input_dim() {
        return Err(Error::DimensionMismatch(format!(
            "inputs have {} features, network expects {}",
            inputs.cols(),
            params.spec.input_dim()
        )));
    }
    Ok(())
}

fn check_labels(labels: &[usize], num_classes: usize) -> Result<()> {
    match labels.iter().find(|&&y| y >= num_classes) {
        Some(&label) => Err(Error::LabelOutOfRange { label, num_classes }),
        None => Ok(()),
    }
}

/// Class probabilities, one row per input row.
pub fn forward(params: &NetworkParams, inputs: &Matrix) -> Result<Matrix> {
    check_inputs(params, inputs)?;
    let classes = params.spec.num_classes();
    let mut ws = Workspace::new(&params.spec);
    let mut out = Matrix::zeros(inputs.rows(), classes);
    for r in 0..inputs.rows() {
        ws.forward(params, inputs.row(r));
        let logits = ws.logits();
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let row = &mut out.as_mut_slice()[r * classes..(r + 1) * classes];
        for (p, &z) in row.iter_mut().zip(logits) {
            *p = (z - max).exp();
        }
        let sum: f64 = row.iter().sum();
        for p in row.iter_mut() {
            *p /= sum;
        }
    }
    Ok(out)
}

fn batch_grads(
    params: &NetworkParams,
    ws: &mut Workspace,
    inputs: &Matrix,
    labels: &[usize],
    batch: &[usize],
    grads: &mut Gradients,
) -> f64 {
    grads.fill_zero();
    let mut loss = 0.0;
    for &s in batch {
        ws.forward(params, inputs.row(s));
        loss += ws.backward(params, labels[s], grads);
    }
    let inv = 1.0 / batch.len() as f64;
    grads.scale(inv);
    loss * inv
}

/// Mean cross-entropy over the batch and its gradient.
pub fn loss_and_grads(
    params: &NetworkParams,
    inputs: &Matrix,
    labels: &[usize],
) -> Result<(f64, Gradients)> {
    check_inputs(params, inputs)?;
    if inputs.rows() != labels.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} input rows but {} labels",
            inputs.rows(),
            labels.len()
        )));
    }
    if labels.is_empty() {
        return Err(Error::DimensionMismatch("empty batch".into()));
    }
    check_labels(labels, params.spec.num_classes())?;
    let mut ws = Workspace::new(&params.spec);
    let mut grads = NetworkParams::zeros(&params.spec);
    let batch: Vec<usize> = (0..labels.len()).collect();
    let loss = batch_grads(params, &mut ws, inputs, labels, &batch, &mut grads);
    Ok((loss, grads))
}

/// Fraction of correctly classified samples; argmax ties go to the lowest
/// class index.
pub fn evaluate(params: &NetworkParams, data: &Dataset) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::EmptyTestSet);
    }
    check_inputs(params, &data.inputs)?;
    let mut ws = Workspace::new(&params.spec);
    let correct = data
        .labels
        .iter()
        .enumerate()
        .filter(|&(s, &y)| {
            ws.forward(params, data.inputs.row(s));
            argmax(ws.logits()) == y
        })
        .count();
    Ok(correct as f64 / data.len() as f64)
}

fn project(params: &mut NetworkParams, masks: &MaskSet) {
    for (w, m) in params.weights.iter_mut().zip(&masks.layers) {
        for (v, &keep) in w.as_mut_slice().iter_mut().zip(m.as_slice()) {
            if !keep {
                *v = 0.0;
            }
        }
    }
}

/// Zero every weight whose mask entry is 0. Biases are never masked.
pub fn apply_mask(params: &NetworkParams, masks: &MaskSet) -> Result<NetworkParams> {
    params.check_masks(masks)?;
    let mut out = params.clone();
    project(&mut out, masks);
    Ok(out)
}

/// Plain SGD with momentum, no pruning.
pub fn train(
    params: &NetworkParams,
    train_data: &Dataset,
    test_data: &Dataset,
    epochs: usize,
    cfg: &TrainConfig,
) -> Result<(NetworkParams, EpochTrace)> {
    run_sgd(params, None, train_data, test_data, epochs, None, cfg)
}

/// Fault-aware retraining: SGD with momentum where masked weights are held at
/// exactly zero, both initially and after every optimizer step.
///
/// The training set is reshuffled every epoch from a stream derived from
/// `(cfg.seed, epoch)`. With `epochs == 0` the masked input is returned.
pub fn train_masked(
    params: &NetworkParams,
    masks: &MaskSet,
    train_data: &Dataset,
    test_data: &Dataset,
    epochs: usize,
    cfg: &TrainConfig,
) -> Result<(NetworkParams, EpochTrace)> {
    params.check_masks(masks)?;
    run_sgd(
        params,
        Some(masks),
        train_data,
        test_data,
        epochs,
        None,
        cfg,
    )
}

/// [`train_masked`] that stops after the first epoch whose accuracy reaches
/// `target`. The trace is a prefix of the one `train_masked` would produce.
pub fn train_masked_until(
    params: &NetworkParams,
    masks: &MaskSet,
    train_data: &Dataset,
    test_data: &Dataset,
    max_epochs: usize,
    target: f64,
    cfg: &TrainConfig,
) -> Result<(NetworkParams, EpochTrace)> {
    params.check_masks(masks)?;
    run_sgd(
        params,
        Some(masks),
        train_data,
        test_data,
        max_epochs,
        Some(target),
        cfg,
    )
}

fn run_sgd(
    params: &NetworkParams,
    masks: Option<&MaskSet>,
    train_data: &Dataset,
    test_data: &Dataset,
    epochs: usize,
    stop_at: Option<f64>,
    cfg: &TrainConfig,
) -> Result<(NetworkParams, EpochTrace)> {
    check_inputs(params, &train_data.inputs)?;
    check_labels(&train_data.labels, params.spec.num_classes())?;
    if epochs > 0 {
        cfg.validate(train_data.len())?;
    }

    let mut params = params.clone();
    if let Some(m) = masks {
        project(&mut params, m);
    }
    let mut accuracies = Vec::with_capacity(epochs + 1);
    accuracies.push(evaluate(&params, test_data)?);

    let mut velocity = NetworkParams::zeros(&params.spec);
    let mut grads = NetworkParams::zeros(&params.spec);
    let mut ws = Workspace::new(&params.spec);
    let mut order: Vec<usize> = (0..train_data.len()).collect();

    for epoch in 0..epochs {
        if stop_at.is_some_and(|t| accuracies.last().is_some_and(|&a| a >= t)) {
            break;
        }
        order.sort_unstable();
        order.shuffle(&mut seed::rng(seed::derive(cfg.seed, &[epoch as u64])));
        for batch in order.chunks(cfg.batch_size) {
            batch_grads(
                &params,
                &mut ws,
                &train_data.inputs,
                &train_data.labels,
                batch,
                &mut grads,
            );
            sgd_step(&mut params, &mut velocity, &grads, cfg);
            if let Some(m) = masks {
                project(&mut params, m);
                project(&mut velocity, m);
            }
        }
        accuracies.push(evaluate(&params, test_data)?);
    }
    Ok((params, EpochTrace { accuracies }))
}

fn sgd_step(
    params: &mut NetworkParams,
    velocity: &mut NetworkParams,
    grads: &Gradients,
    cfg: &TrainConfig,
) {
    let update = |p: &mut [f64], v: &mut [f64], g: &[f64]| {
        for ((p, v), g) in p.iter_mut().zip(v.iter_mut()).zip(g) {
            *v = cfg.momentum * *v - cfg.learning_rate * g;
            *p += *v;
        }
    };
    for l in 0..params.weights.len() {
        update(
            params.weights[l].as_mut_slice(),
            velocity.weights[l].as_mut_slice(),
            grads.weights[l].as_slice(),
        );
        update(
            &mut params.biases[l],
            &mut velocity.biases[l],
            &grads.biases[l],
        );
    }
}
