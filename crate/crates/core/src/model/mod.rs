//! Deep-LSTM one-step-ahead flow regressor.
//!
//! Architecture: stacked LSTM layers over a sliding window of six input
//! features, PReLU on the last hidden state, a sigmoid dense layer and a
//! single sigmoid output unit. The output unit's scalar bias (`W_bias`) is
//! the parameter the ensemble filter estimates online; inference accepts a
//! per-row substitute for it so ensemble members never mutate shared weights.

mod activation;
mod gradcheck;
mod mc;
mod net;
mod train;

use std::path::Path;

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_distr::{StandardNormal, Uniform};
use serde::{Deserialize, Serialize};

use crate::data::Window;
use crate::error::{Error, Result};

pub use gradcheck::{check_gradients, gradient_check, GradCheckReport};
pub use mc::predict_mc;
pub use net::{loss_and_gradients, InputBatch, FEATURES};
pub use train::{train, EpochLosses, TrainReport};

pub const WEIGHTS_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub lstm_layers: usize,
    pub lstm_units: usize,
    pub input_noise_sigma: f64,
    pub dense_units: usize,
    pub window: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Use every `stride`-th training window.
    pub stride: usize,
    pub grad_clip: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            lstm_layers: 2,
            lstm_units: 64,
            input_noise_sigma: 0.1,
            dense_units: 32,
            window: crate::data::WINDOW,
            learning_rate: 1e-3,
            epochs: 20,
            batch_size: 64,
            stride: 1,
            grad_clip: 1.0,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("lstm_layers", self.lstm_layers),
            ("lstm_units", self.lstm_units),
            ("dense_units", self.dense_units),
            ("window", self.window),
            ("batch_size", self.batch_size),
            ("stride", self.stride),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be >= 1")));
            }
        }
        if !(self.input_noise_sigma >= 0.0 && self.input_noise_sigma.is_finite()) {
            return Err(Error::Config("input_noise_sigma must be >= 0".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning_rate must be > 0".into()));
        }
        if !(self.grad_clip > 0.0) {
            return Err(Error::Config("grad_clip must be > 0".into()));
        }
        Ok(())
    }
}

/// One LSTM layer; gate blocks are ordered input, forget, cell, output.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmLayer {
    /// inputs x 4H
    pub kernel: Array2<f64>,
    /// H x 4H
    pub recurrent: Array2<f64>,
    /// 4H
    pub bias: Array1<f64>,
}

/// Every trainable parameter of the regressor. The same layout doubles as the
/// gradient and optimizer-moment container.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelWeights {
    pub config: ModelConfig,
    pub lstm: Vec<LstmLayer>,
    /// Per-unit negative slopes of the PReLU, length H.
    pub prelu_alpha: Array1<f64>,
    /// H x D
    pub dense_kernel: Array2<f64>,
    pub dense_bias: Array1<f64>,
    /// D
    pub out_kernel: Array1<f64>,
    out_bias: f64,
}

impl ModelWeights {
    /// All-zero parameters with the shapes implied by `config`.
    pub fn zeros(config: &ModelConfig) -> ModelWeights {
        let h = config.lstm_units;
        let lstm = (0..config.lstm_layers)
            .map(|l| {
                let inputs = if l == 0 { FEATURES } else { h };
                LstmLayer {
                    kernel: Array2::zeros((inputs, 4 * h)),
                    recurrent: Array2::zeros((h, 4 * h)),
                    bias: Array1::zeros(4 * h),
                }
            })
            .collect();
        ModelWeights {
            config: config.clone(),
            lstm,
            prelu_alpha: Array1::zeros(h),
            dense_kernel: Array2::zeros((h, config.dense_units)),
            dense_bias: Array1::zeros(config.dense_units),
            out_kernel: Array1::zeros(config.dense_units),
            out_bias: 0.0,
        }
    }

    /// The output unit's bias.
    pub fn bias(&self) -> f64 {
        self.out_bias
    }

    pub fn set_bias(&mut self, value: f64) {
        self.out_bias = value;
    }

    pub fn window(&self) -> usize {
        self.config.window
    }

    /// Named flat views of every tensor, in serialization order.
    pub fn tensors(&self) -> Vec<(String, Vec<usize>, &[f64])> {
        let mut out = Vec::new();
        for (l, layer) in self.lstm.iter().enumerate() {
            out.push((
                format!("lstm_{l}/kernel"),
                layer.kernel.shape().to_vec(),
                layer.kernel.as_slice().expect("standard layout"),
            ));
            out.push((
                format!("lstm_{l}/recurrent"),
                layer.recurrent.shape().to_vec(),
                layer.recurrent.as_slice().expect("standard layout"),
            ));
            out.push((
                format!("lstm_{l}/bias"),
                layer.bias.shape().to_vec(),
                layer.bias.as_slice().expect("standard layout"),
            ));
        }
        out.push((
            "prelu/alpha".into(),
            self.prelu_alpha.shape().to_vec(),
            self.prelu_alpha.as_slice().expect("standard layout"),
        ));
        out.push((
            "dense/kernel".into(),
            self.dense_kernel.shape().to_vec(),
            self.dense_kernel.as_slice().expect("standard layout"),
        ));
        out.push((
            "dense/bias".into(),
            self.dense_bias.shape().to_vec(),
            self.dense_bias.as_slice().expect("standard layout"),
        ));
        out.push((
            "output/kernel".into(),
            self.out_kernel.shape().to_vec(),
            self.out_kernel.as_slice().expect("standard layout"),
        ));
        out.push((
            "output/bias".into(),
            vec![1],
            std::slice::from_ref(&self.out_bias),
        ));
        out
    }

    /// Mutable flat views, same order as [`ModelWeights::tensors`].
    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::new();
        for layer in &mut self.lstm {
            out.push(layer.kernel.as_slice_mut().expect("standard layout"));
            out.push(layer.recurrent.as_slice_mut().expect("standard layout"));
            out.push(layer.bias.as_slice_mut().expect("standard layout"));
        }
        out.push(self.prelu_alpha.as_slice_mut().expect("standard layout"));
        out.push(self.dense_kernel.as_slice_mut().expect("standard layout"));
        out.push(self.dense_bias.as_slice_mut().expect("standard layout"));
        out.push(self.out_kernel.as_slice_mut().expect("standard layout"));
        out.push(std::slice::from_mut(&mut self.out_bias));
        out
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|t| t.2.len()).sum()
    }

    /// Parameter at flat index `idx` across all tensors.
    pub fn param(&self, idx: usize) -> f64 {
        let mut i = idx;
        for (_, _, data) in self.tensors() {
            if i < data.len() {
                return data[i];
            }
            i -= data.len();
        }
        panic!("parameter index {idx} out of range");
    }

    pub fn set_param(&mut self, idx: usize, value: f64) {
        let mut i = idx;
        for data in self.tensors_mut() {
            if i < data.len() {
                data[i] = value;
                return;
            }
            i -= data.len();
        }
        panic!("parameter index {idx} out of range");
    }

    pub fn to_container(&self) -> WeightsContainer {
        WeightsContainer {
            schema_version: WEIGHTS_SCHEMA_VERSION,
            config: self.config.clone(),
            tensors: self
                .tensors()
                .into_iter()
                .map(|(name, shape, data)| TensorRecord {
                    name,
                    shape,
                    data: data.to_vec(),
                })
                .collect(),
        }
    }

    pub fn from_container(container: WeightsContainer) -> Result<ModelWeights> {
        if container.schema_version != WEIGHTS_SCHEMA_VERSION {
            return Err(Error::Schema(format!(
                "unsupported weights schema version {}",
                container.schema_version
            )));
        }
        container.config.validate()?;
        let mut weights = ModelWeights::zeros(&container.config);
        let expected: Vec<(String, Vec<usize>)> = weights
            .tensors()
            .into_iter()
            .map(|(n, s, _)| (n, s))
            .collect();
        if expected.len() != container.tensors.len() {
            return Err(Error::Schema(format!(
                "expected {} tensors, found {}",
                expected.len(),
                container.tensors.len()
            )));
        }
        for ((name, shape), record) in expected.iter().zip(&container.tensors) {
            if *name != record.name || *shape != record.shape {
                return Err(Error::Schema(format!(
                    "tensor `{}` {:?} does not match expected `{name}` {shape:?}",
                    record.name, record.shape
                )));
            }
            if record.data.len() != shape.iter().product::<usize>() {
                return Err(Error::Schema(format!(
                    "tensor `{name}` has {} values for shape {shape:?}",
                    record.data.len()
                )));
            }
            if record.data.iter().any(|v| !v.is_finite()) {
                return Err(Error::Schema(format!("tensor `{name}` has non-finite values")));
            }
        }
        for (dst, record) in weights.tensors_mut().into_iter().zip(&container.tensors) {
            dst.copy_from_slice(&record.data);
        }
        Ok(weights)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<ModelWeights> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let container: WeightsContainer = serde_json::from_str(&text)
            .map_err(|e| Error::json(path.display().to_string(), e))?;
        ModelWeights::from_container(container)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string(&self.to_container())
            .map_err(|e| Error::json("weights", e))?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }
}

/// Versioned on-disk form of [`ModelWeights`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightsContainer {
    pub schema_version: u32,
    pub config: ModelConfig,
    pub tensors: Vec<TensorRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorRecord {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// Initializes a network for `config`.
///
/// Input and dense kernels are uniform in `±sqrt(3 / fan_in)`, recurrent
/// kernels are orthogonal, biases are zero except the forget gate (1.0), and
/// the PReLU slopes start at 0.25.
pub fn build_model<R: Rng + ?Sized>(config: &ModelConfig, rng: &mut R) -> Result<ModelWeights> {
    config.validate()?;
    let h = config.lstm_units;
    let mut weights = ModelWeights::zeros(config);
    for layer in &mut weights.lstm {
        let fan_in = layer.kernel.nrows();
        fill_fan_in_uniform(&mut layer.kernel, fan_in, rng);
        for gate in 0..4 {
            let block = orthogonal(h, rng);
            layer
                .recurrent
                .slice_mut(ndarray::s![.., gate * h..(gate + 1) * h])
                .assign(&block);
        }
        layer
            .bias
            .slice_mut(ndarray::s![h..2 * h])
            .fill(1.0);
    }
    weights.prelu_alpha.fill(0.25);
    fill_fan_in_uniform(&mut weights.dense_kernel, h, rng);
    let limit = (3.0 / config.dense_units as f64).sqrt();
    let dist = Uniform::new_inclusive(-limit, limit).expect("finite limits");
    weights.out_kernel.mapv_inplace(|_| rng.sample(dist));
    Ok(weights)
}

fn fill_fan_in_uniform<R: Rng + ?Sized>(a: &mut Array2<f64>, fan_in: usize, rng: &mut R) {
    let limit = (3.0 / fan_in as f64).sqrt();
    let dist = Uniform::new_inclusive(-limit, limit).expect("finite limits");
    a.mapv_inplace(|_| rng.sample(dist));
}

/// Random `n x n` orthogonal matrix via modified Gram-Schmidt on a Gaussian
/// matrix.
fn orthogonal<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Array2<f64> {
    let mut m = Array2::<f64>::zeros((n, n));
    m.mapv_inplace(|_| rng.sample(StandardNormal));
    for j in 0..n {
        for k in 0..j {
            let dot = m.column(j).dot(&m.column(k));
            let ck = m.column(k).to_owned();
            m.column_mut(j).scaled_add(-dot, &ck);
        }
        let norm = m.column(j).dot(&m.column(j)).sqrt();
        m.column_mut(j).mapv_inplace(|v| v / norm);
    }
    m
}

/// Deterministic one-step-ahead prediction in normalized flow units.
pub fn forward(window: &Window, weights: &ModelWeights) -> Result<f64> {
    window.check()?;
    if window.width() != weights.window() {
        return Err(Error::Shape(format!(
            "window width {} does not match model window {}",
            window.width(),
            weights.window()
        )));
    }
    let batch = InputBatch::from_windows(std::slice::from_ref(window))?;
    Ok(net::predict(weights, &batch, None)?[0])
}

/// Batched inference. `bias` optionally replaces the output bias row by row.
pub fn forward_batch(weights: &ModelWeights, inputs: &InputBatch, bias: Option<&[f64]>) -> Result<Vec<f64>> {
    net::predict(weights, inputs, bias)
}

/// Pre-sigmoid output activation for a single window.
pub fn forward_logit(window: &Window, weights: &ModelWeights) -> Result<f64> {
    let y = forward(window, weights)?;
    Ok((y / (1.0 - y)).ln())
}
