use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;

use super::net::{loss_and_gradients, predict, InputBatch};
use super::{ModelConfig, ModelWeights};
use crate::data::{Window, WindowBatch};
use crate::error::{Error, Result};
use crate::rng::{substream, Stream};

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;
const EVAL_CHUNK: usize = 512;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLosses {
    pub epoch: usize,
    /// Mean minibatch MSE over the epoch, with input noise applied.
    pub train_loss: f64,
    /// Noise-free MSE on the validation windows after the epoch.
    pub val_loss: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainReport {
    pub epochs: Vec<EpochLosses>,
}

impl TrainReport {
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(writer);
        wtr.write_record(["epoch", "train_loss", "val_loss"])?;
        for e in &self.epochs {
            wtr.write_record([
                e.epoch.to_string(),
                e.train_loss.to_string(),
                e.val_loss.to_string(),
            ])?;
        }
        wtr.flush().map_err(|e| Error::io("<csv writer>", e))?;
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv(std::io::BufWriter::new(file))
    }
}

fn gather(batch: &WindowBatch<'_>, idx: &[usize]) -> (Vec<Window>, Vec<f64>) {
    let windows: Vec<Window> = idx.iter().map(|&i| batch.get(i)).collect();
    let targets = windows.iter().map(|w| w.target).collect();
    (windows, targets)
}

/// Noise-free mean squared error over every window of `data`.
pub(crate) fn evaluate_mse(weights: &ModelWeights, data: &WindowBatch<'_>) -> Result<f64> {
    let all: Vec<usize> = (0..data.len()).collect();
    let mut sse = 0.0;
    for chunk in all.chunks(EVAL_CHUNK) {
        let (windows, targets) = gather(data, chunk);
        let inputs = InputBatch::from_windows(&windows)?;
        let y = predict(weights, &inputs, None)?;
        sse += y
            .iter()
            .zip(&targets)
            .map(|(y, t)| (y - t) * (y - t))
            .sum::<f64>();
    }
    Ok(sse / data.len() as f64)
}

/// Minibatch Adam on the MSE loss with Gaussian input noise on the flow and
/// theta features. Returns the last-epoch weights.
pub fn train(
    model: &ModelWeights,
    data: &WindowBatch<'_>,
    val: &WindowBatch<'_>,
    config: &ModelConfig,
) -> Result<(ModelWeights, TrainReport)> {
    config.validate()?;
    if data.is_empty() || val.is_empty() {
        return Err(Error::Empty("training or validation windows".into()));
    }
    if data.width() != model.window() || val.width() != model.window() {
        return Err(Error::Shape(format!(
            "window width {} / {} does not match model window {}",
            data.width(),
            val.width(),
            model.window()
        )));
    }
    let mut weights = model.clone();
    let mut report = TrainReport::default();
    if config.epochs == 0 {
        return Ok((weights, report));
    }

    let mut rng = substream(config.seed, Stream::Training);
    let mut m = ModelWeights::zeros(&model.config);
    let mut v = ModelWeights::zeros(&model.config);
    let mut step = 0i32;
    let mut order: Vec<usize> = (0..data.len()).step_by(config.stride).collect();

    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut seen = 0usize;
        for idx in order.chunks(config.batch_size) {
            let (windows, targets) = gather(data, idx);
            let mut inputs = InputBatch::from_windows(&windows)?;
            inputs.add_input_noise(config.input_noise_sigma, &mut rng);
            let (loss, mut grad) = loss_and_gradients(&weights, &inputs, &targets)?;
            if !loss.is_finite() {
                return Err(Error::Divergence { epoch, loss });
            }
            loss_sum += loss * idx.len() as f64;
            seen += idx.len();

            let norm = grad
                .tensors()
                .iter()
                .flat_map(|t| t.2.iter())
                .map(|g| g * g)
                .sum::<f64>()
                .sqrt();
            if norm > config.grad_clip {
                let scale = config.grad_clip / norm;
                for t in grad.tensors_mut() {
                    t.iter_mut().for_each(|g| *g *= scale);
                }
            }

            step += 1;
            let lr_t = config.learning_rate * (1.0 - BETA2.powi(step)).sqrt() / (1.0 - BETA1.powi(step));
            let params = weights.tensors_mut();
            let grads = grad.tensors();
            let ms = m.tensors_mut();
            let vs = v.tensors_mut();
            for (((p, (_, _, g)), mt), vt) in params.into_iter().zip(grads).zip(ms).zip(vs) {
                for (((p, g), mi), vi) in p.iter_mut().zip(g).zip(mt.iter_mut()).zip(vt.iter_mut()) {
                    *mi = BETA1 * *mi + (1.0 - BETA1) * g;
                    *vi = BETA2 * *vi + (1.0 - BETA2) * g * g;
                    *p -= lr_t * *mi / (vi.sqrt() + ADAM_EPS);
                }
            }
        }
        let train_loss = loss_sum / seen as f64;
        let val_loss = evaluate_mse(&weights, val)?;
        if !val_loss.is_finite() {
            return Err(Error::Divergence {
                epoch,
                loss: val_loss,
            });
        }
        report.epochs.push(EpochLosses {
            epoch,
            train_loss,
            val_loss,
        });
    }
    Ok((weights, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{make_windows, RawSeries, STEP_MINUTES};
    use crate::model::build_model;
    use chrono::NaiveDate;

    fn series(len: usize, flow: impl Fn(usize) -> f64) -> RawSeries {
        let t0 = NaiveDate::from_ymd_opt(2010, 1, 1)
            .unwrap()
            .and_hms_opt(0, 0, 0)
            .unwrap();
        let ts = (0..len)
            .map(|i| t0 + chrono::Duration::minutes(STEP_MINUTES * i as i64))
            .collect();
        let cols = std::array::from_fn(|c| {
            (0..len)
                .map(|i| match c {
                    0 => flow(i),
                    5 => 0.5 + 0.4 * ((i as f64) * 0.05).sin(),
                    _ => 0.5 + 0.3 * ((i as f64) * 0.02 + c as f64).cos(),
                })
                .collect()
        });
        RawSeries::new(ts, cols).unwrap()
    }

    fn tiny() -> ModelConfig {
        ModelConfig {
            lstm_layers: 1,
            lstm_units: 8,
            dense_units: 4,
            window: 12,
            learning_rate: 1e-2,
            batch_size: 16,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn zero_epochs_returns_input() {
        let cfg = ModelConfig { epochs: 0, ..tiny() };
        let s = series(60, |i| 0.3 + 0.001 * i as f64);
        let w = build_model(&cfg, &mut substream(1, Stream::Init)).unwrap();
        let d = make_windows(&s, cfg.window).unwrap();
        let (out, report) = train(&w, &d, &d, &cfg).unwrap();
        assert_eq!(out, w);
        assert!(report.epochs.is_empty());
    }

    #[test]
    fn constant_target_fits() {
        let cfg = ModelConfig { epochs: 200, ..tiny() };
        let s = series(80, |_| 0.3);
        let w = build_model(&cfg, &mut substream(2, Stream::Init)).unwrap();
        let d = make_windows(&s, cfg.window).unwrap();
        let (_, report) = train(&w, &d, &d, &cfg).unwrap();
        assert_eq!(report.epochs.len(), 200);
        let last = report.epochs.last().unwrap();
        assert!(last.train_loss < 1e-3, "{last:?}");
        assert!(last.val_loss < 1e-3, "{last:?}");
    }

    #[test]
    fn training_reproducible_and_descends() {
        let cfg = ModelConfig { epochs: 15, ..tiny() };
        let s = series(300, |i| 0.4 + 0.2 * ((i as f64) * 0.03).sin());
        let w = build_model(&cfg, &mut substream(3, Stream::Init)).unwrap();
        let d = make_windows(&s, cfg.window).unwrap();
        let (a, ra) = train(&w, &d, &d, &cfg).unwrap();
        let (b, rb) = train(&w, &d, &d, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(ra, rb);
        assert!(ra.epochs.last().unwrap().train_loss <= ra.epochs[0].train_loss);
        assert!(ra.epochs.iter().all(|e| e.train_loss.is_finite() && e.val_loss.is_finite()));
    }

    #[test]
    fn report_csv_layout() {
        let report = TrainReport {
            epochs: vec![EpochLosses {
                epoch: 0,
                train_loss: 0.5,
                val_loss: 0.25,
            }],
        };
        let mut out = Vec::new();
        report.write_csv(&mut out).unwrap();
        assert_eq!(String::from_utf8(out).unwrap(), "epoch,train_loss,val_loss\n0,0.5,0.25\n");
    }
}
