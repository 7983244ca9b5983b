//! Dense autoencoder (input → 8 → bottleneck → 8 → input) trained with Adam
//! on mean squared reconstruction error.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::matrix::Matrix;
use crate::quantile::quantile;

#[derive(Debug, Error, PartialEq)]
pub enum AutoencoderError {
    #[error("need at least 10 rows to split train/validation, got {0}")]
    TooFewRows(usize),
    #[error("validation fraction {0} outside (0, 0.5)")]
    ValidationFraction(f64),
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },
    #[error("non-finite input value")]
    NonFiniteInput,
    #[error("expected {expected} columns, got {got}")]
    Dimension { expected: usize, got: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Tanh,
    Relu,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => z.tanh(),
            Activation::Relu => z.max(0.0),
        }
    }

    /// Derivative expressed through the activation output `a`.
    fn derivative(self, a: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - a * a,
            Activation::Relu => {
                if a > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub inputs: usize,
    pub outputs: usize,
    /// Row-major `outputs × inputs`.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Layer {
    fn zeros(inputs: usize, outputs: usize) -> Self {
        Self { inputs, outputs, weights: vec![0.0; inputs * outputs], bias: vec![0.0; outputs] }
    }

    fn forward(&self, x: &[f64], out: &mut [f64]) {
        for (o, (w, b)) in out.iter_mut().zip(self.weights.chunks_exact(self.inputs).zip(&self.bias)) {
            *o = b + w.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpParams {
    pub layers: Vec<Layer>,
    pub activation: Activation,
}

impl MlpParams {
    pub fn dims(input: usize, hidden: usize, bottleneck: usize) -> Vec<usize> {
        vec![input, hidden, bottleneck, hidden, input]
    }

    pub fn zeros(dims: &[usize], activation: Activation) -> Self {
        Self { layers: dims.windows(2).map(|w| Layer::zeros(w[0], w[1])).collect(), activation }
    }

    /// Xavier-uniform weights, one RNG stream per layer; zero biases.
    pub fn xavier(dims: &[usize], activation: Activation, seed: u64) -> Self {
        let mut params = Self::zeros(dims, activation);
        for (idx, layer) in params.layers.iter_mut().enumerate() {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(idx as u64);
            let limit = (6.0 / (layer.inputs + layer.outputs) as f64).sqrt();
            for w in &mut layer.weights {
                *w = rng.random_range(-limit..limit);
            }
        }
        params
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].inputs
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    /// Activations of every layer, input first; the last entry is the output.
    fn forward_trace(&self, x: &[f64]) -> Vec<Vec<f64>> {
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        acts.push(x.to_vec());
        let last = self.layers.len() - 1;
        for (idx, layer) in self.layers.iter().enumerate() {
            let mut out = vec![0.0; layer.outputs];
            layer.forward(acts.last().expect("input pushed"), &mut out);
            if idx < last {
                out.iter_mut().for_each(|v| *v = self.activation.apply(*v));
            }
            acts.push(out);
        }
        acts
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        self.forward_trace(x).pop().expect("non-empty trace")
    }

    /// Mean squared error over every element of `batch`, and its gradient.
    pub fn loss_and_gradient(&self, batch: &[&[f64]]) -> (f64, MlpParams) {
        let dims: Vec<usize> =
            std::iter::once(self.input_dim()).chain(self.layers.iter().map(|l| l.outputs)).collect();
        let mut grad = MlpParams::zeros(&dims, self.activation);
        let scale = 1.0 / (batch.len() * self.input_dim()) as f64;
        let last = self.layers.len() - 1;
        let mut loss = 0.0;
        for x in batch {
            let acts = self.forward_trace(x);
            let out = &acts[acts.len() - 1];
            let mut delta: Vec<f64> = out.iter().zip(x.iter()).map(|(y, t)| 2.0 * (y - t) * scale).collect();
            loss += out.iter().zip(x.iter()).map(|(y, t)| (y - t) * (y - t)).sum::<f64>() * scale;
            for idx in (0..=last).rev() {
                let layer = &self.layers[idx];
                let input = &acts[idx];
                let g = &mut grad.layers[idx];
                for (o, d) in delta.iter().enumerate() {
                    g.bias[o] += d;
                    for (gw, a) in g.weights[o * layer.inputs..(o + 1) * layer.inputs].iter_mut().zip(input) {
                        *gw += d * a;
                    }
                }
                if idx == 0 {
                    break;
                }
                let mut prev = vec![0.0; layer.inputs];
                for (o, d) in delta.iter().enumerate() {
                    for (p, w) in prev.iter_mut().zip(&layer.weights[o * layer.inputs..(o + 1) * layer.inputs]) {
                        *p += d * w;
                    }
                }
                for (p, a) in prev.iter_mut().zip(input) {
                    *p *= self.activation.derivative(*a);
                }
                delta = prev;
            }
        }
        (loss, grad)
    }

    fn values(&self) -> impl Iterator<Item = &f64> {
        self.layers.iter().flat_map(|l| l.weights.iter().chain(&l.bias))
    }

    fn values_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.layers.iter_mut().flat_map(|l| l.weights.iter_mut().chain(l.bias.iter_mut()))
    }

    /// Flattened parameters (per layer: weights then bias).
    pub fn to_flat(&self) -> Vec<f64> {
        self.values().copied().collect()
    }

    pub fn set_flat(&mut self, flat: &[f64]) {
        for (p, v) in self.values_mut().zip(flat) {
            *p = *v;
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub max_epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub validation_fraction: f64,
    pub patience: usize,
    pub lr_factor: f64,
    pub lr_patience: usize,
    pub lr_floor: f64,
    pub hidden: usize,
    pub bottleneck: usize,
    pub activation: Activation,
    pub threshold_quantile: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            max_epochs: 100,
            batch_size: 256,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            validation_fraction: 0.1,
            patience: 10,
            lr_factor: 0.5,
            lr_patience: 5,
            lr_floor: 1e-5,
            hidden: 8,
            bottleneck: 4,
            activation: Activation::Tanh,
            threshold_quantile: 0.99,
            seed: 42,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub learning_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub stopped_epoch: usize,
}

impl TrainHistory {
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "epoch,train_loss,val_loss,learning_rate")?;
        for e in &self.epochs {
            writeln!(w, "{},{},{},{}", e.epoch, e.train_loss, e.val_loss, e.learning_rate)?;
        }
        Ok(())
    }

    pub fn best_val_loss(&self) -> f64 {
        self.epochs.iter().map(|e| e.val_loss).fold(f64::INFINITY, f64::min)
    }
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    fn new(n: usize) -> Self {
        Self { m: vec![0.0; n], v: vec![0.0; n], t: 0 }
    }

    fn step(&mut self, params: &mut MlpParams, grad: &MlpParams, lr: f64, cfg: &TrainConfig) {
        self.t += 1;
        let c1 = 1.0 - cfg.beta1.powi(self.t);
        let c2 = 1.0 - cfg.beta2.powi(self.t);
        for (((p, g), m), v) in params.values_mut().zip(grad.values()).zip(&mut self.m).zip(&mut self.v) {
            *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
            *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
            *p -= lr * (*m / c1) / ((*v / c2).sqrt() + cfg.epsilon);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AutoencoderModel {
    pub params: MlpParams,
    pub threshold: f64,
    pub config: TrainConfig,
    /// Identifies the standardization the inputs were scaled with.
    pub standardization_ref: Option<String>,
}

fn mean_loss(params: &MlpParams, data: &Matrix, rows: &[usize]) -> f64 {
    rows.iter().map(|&r| row_error(params, data.row(r))).sum::<f64>() / rows.len() as f64
}

fn row_error(params: &MlpParams, x: &[f64]) -> f64 {
    let y = params.forward(x);
    y.iter().zip(x).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / x.len() as f64
}

impl AutoencoderModel {
    pub fn train(data: &Matrix, config: &TrainConfig) -> Result<(Self, TrainHistory), AutoencoderError> {
        let n = data.rows();
        if n < 10 {
            return Err(AutoencoderError::TooFewRows(n));
        }
        if !(config.validation_fraction > 0.0 && config.validation_fraction < 0.5) {
            return Err(AutoencoderError::ValidationFraction(config.validation_fraction));
        }
        if config.batch_size == 0 || config.hidden == 0 || config.bottleneck == 0 {
            return Err(AutoencoderError::Config("batch size and layer widths must be positive".into()));
        }
        if !(config.learning_rate > 0.0 && config.lr_floor > 0.0) {
            return Err(AutoencoderError::Config("learning rates must be positive".into()));
        }
        if data.as_slice().iter().any(|v| !v.is_finite()) {
            return Err(AutoencoderError::NonFiniteInput);
        }

        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(u64::MAX);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        let n_val = ((config.validation_fraction * n as f64).ceil() as usize).clamp(1, n - 1);
        let (train_rows, val_rows) = order.split_at(n - n_val);
        let mut train_rows = train_rows.to_vec();
        let val_rows = val_rows.to_vec();

        let dims = MlpParams::dims(data.cols(), config.hidden, config.bottleneck);
        let mut params = MlpParams::xavier(&dims, config.activation, config.seed);
        let mut adam = Adam::new(params.param_count());
        let mut lr = config.learning_rate;
        let mut best = (f64::INFINITY, params.clone(), 0usize);
        let mut stagnant = 0;
        let mut lr_stagnant = 0;
        let mut history = TrainHistory::default();

        for epoch in 1..=config.max_epochs {
            train_rows.shuffle(&mut rng);
            for (batch_idx, chunk) in train_rows.chunks(config.batch_size).enumerate() {
                let batch: Vec<&[f64]> = chunk.iter().map(|&r| data.row(r)).collect();
                let (loss, grad) = params.loss_and_gradient(&batch);
                if !loss.is_finite() {
                    return Err(AutoencoderError::NonFiniteLoss { epoch, batch: batch_idx });
                }
                adam.step(&mut params, &grad, lr, config);
            }
            let train_loss = mean_loss(&params, data, &train_rows);
            let val_loss = mean_loss(&params, data, &val_rows);
            if !(train_loss.is_finite() && val_loss.is_finite()) {
                return Err(AutoencoderError::NonFiniteLoss { epoch, batch: usize::MAX });
            }
            history.epochs.push(EpochRecord { epoch, train_loss, val_loss, learning_rate: lr });
            history.stopped_epoch = epoch;

            if val_loss < best.0 {
                best = (val_loss, params.clone(), epoch);
                stagnant = 0;
                lr_stagnant = 0;
            } else {
                stagnant += 1;
                lr_stagnant += 1;
                if stagnant >= config.patience {
                    break;
                }
                if lr_stagnant >= config.lr_patience {
                    lr = (lr * config.lr_factor).max(config.lr_floor);
                    lr_stagnant = 0;
                }
            }
        }
        history.best_epoch = best.2;
        let params = best.1;

        let errors: Vec<f64> = data.iter_rows().map(|r| row_error(&params, r)).collect();
        let threshold = quantile(&errors, config.threshold_quantile).expect("n >= 10");
        let model = Self { params, threshold, config: config.clone(), standardization_ref: None };
        Ok((model, history))
    }

    pub fn reconstruction_error(&self, x: &[f64]) -> Result<f64, AutoencoderError> {
        let expected = self.params.input_dim();
        if x.len() != expected {
            return Err(AutoencoderError::Dimension { expected, got: x.len() });
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(AutoencoderError::NonFiniteInput);
        }
        Ok(row_error(&self.params, x))
    }

    pub fn reconstruction_errors(&self, data: &Matrix) -> Result<Vec<f64>, AutoencoderError> {
        data.iter_rows().map(|r| self.reconstruction_error(r)).collect()
    }

    pub fn flag(&self, errors: &[f64]) -> Vec<bool> {
        flag_above(errors, self.threshold)
    }
}

pub fn flag_above(errors: &[f64], threshold: f64) -> Vec<bool> {
    errors.iter().map(|&e| e > threshold).collect()
}
