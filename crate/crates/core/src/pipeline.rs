//! Glue shared by the command-line tool and the end-to-end tests: training
//! from a raw record, baseline Monte Carlo traces, assimilation with per-step
//! normality screening, and trace evaluation.

use std::io::{Read, Write};
use std::path::Path;
use std::time::Instant;

use chrono::NaiveDateTime;
use serde::{Deserialize, Serialize};

use crate::data::{fit_normalizer, format_timestamp, make_windows, parse_timestamp, window_at, Channel, Normalizer, RawSeries};
use crate::enkf::{run_filter_observed, FilterConfig, FilterTrace, TraceRecord};
use crate::error::{Error, Result};
use crate::model::{build_model, predict_mc, train, ModelConfig, ModelWeights, TrainReport};
use crate::rng::{substream, Stream};
use crate::stats::{divergence_trace, mean, median_j, GaussianSummary, ShapiroWilk, SwResult};

pub const DEFAULT_VAL_FRACTION: f64 = 0.2;
pub const DEFAULT_SW_ALPHA: f64 = 0.05;

/// Splits `series` into a leading training part and a trailing validation
/// part holding `val_fraction` of the rows. Both parts must hold at least one
/// full window plus target.
pub fn chronological_split(series: &RawSeries, val_fraction: f64, width: usize) -> Result<(RawSeries, RawSeries)> {
    if !(val_fraction > 0.0 && val_fraction < 1.0) {
        return Err(Error::Config(format!(
            "validation fraction must lie in (0, 1), got {val_fraction}"
        )));
    }
    let n = series.len();
    let n_val = (n as f64 * val_fraction).round() as usize;
    let n_train = n - n_val;
    for (part, rows) in [("validation", n_val), ("training", n_train)] {
        if rows < width + 1 {
            return Err(Error::Config(format!(
                "{part} split has {rows} rows, at least {} required",
                width + 1
            )));
        }
    }
    Ok((series.slice(0..n_train)?, series.slice(n_train..n)?))
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub initial: ModelWeights,
    pub weights: ModelWeights,
    pub normalizer: Normalizer,
    pub report: TrainReport,
}

/// Fits the normalizer on the training part, initialises from
/// `config.seed` and trains.
pub fn train_from_series(raw: &RawSeries, config: &ModelConfig, val_fraction: f64) -> Result<TrainOutcome> {
    config.validate()?;
    let (train_raw, val_raw) = chronological_split(raw, val_fraction, config.window)?;
    let normalizer = fit_normalizer(&train_raw)?;
    let train_norm = normalizer.normalize(&train_raw)?;
    let val_norm = normalizer.normalize(&val_raw)?;
    let initial = build_model(config, &mut substream(config.seed, Stream::Init))?;
    let (weights, report) = train(
        &initial,
        &make_windows(&train_norm, config.window)?,
        &make_windows(&val_norm, config.window)?,
        config,
    )?;
    Ok(TrainOutcome {
        initial,
        weights,
        normalizer,
        report,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SwRecord {
    pub timestamp: NaiveDateTime,
    /// `NaN` when the step's samples were degenerate (all identical).
    pub w_statistic: f64,
    pub p_value: f64,
}

pub const SW_HEADER: [&str; 3] = ["timestamp", "w_statistic", "p_value"];

pub fn write_sw_csv<W: Write>(records: &[SwRecord], writer: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    wtr.write_record(SW_HEADER)?;
    for r in records {
        wtr.write_record([
            format_timestamp(&r.timestamp),
            r.w_statistic.to_string(),
            r.p_value.to_string(),
        ])?;
    }
    wtr.flush().map_err(|e| Error::io("<csv writer>", e))?;
    Ok(())
}

pub fn read_sw_csv<R: Read>(reader: R) -> Result<Vec<SwRecord>> {
    let mut rdr = csv::Reader::from_reader(reader);
    if rdr.headers()?.iter().ne(SW_HEADER) {
        return Err(Error::Schema(format!("normality CSV header must be {}", SW_HEADER.join(","))));
    }
    let mut out = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let row = i + 2;
        let parse = |k: usize| -> Result<f64> {
            rec[k].parse::<f64>().map_err(|e| Error::Parse {
                row,
                message: format!("{}: {e}", SW_HEADER[k]),
            })
        };
        out.push(SwRecord {
            timestamp: parse_timestamp(&rec[0]).map_err(|message| Error::Parse { row, message })?,
            w_statistic: parse(1)?,
            p_value: parse(2)?,
        });
    }
    Ok(out)
}

pub fn save_sw_csv(records: &[SwRecord], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_sw_csv(records, std::io::BufWriter::new(file))
}

pub fn load_sw_csv(path: impl AsRef<Path>) -> Result<Vec<SwRecord>> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_sw_csv(file)
}

struct SwScreen {
    test: Option<ShapiroWilk>,
    records: Vec<SwRecord>,
}

impl SwScreen {
    fn new() -> Self {
        SwScreen {
            test: None,
            records: Vec::new(),
        }
    }

    fn push(&mut self, timestamp: NaiveDateTime, samples: &[f64]) -> Result<()> {
        if self.test.as_ref().map(|t| t.n()) != Some(samples.len()) {
            self.test = Some(ShapiroWilk::new(samples.len())?);
        }
        let res = match self.test.as_ref().expect("initialised above").test(samples) {
            Ok(r) => r,
            Err(Error::Degenerate(_)) => SwResult {
                w: f64::NAN,
                p_value: f64::NAN,
            },
            Err(e) => return Err(e),
        };
        self.records.push(SwRecord {
            timestamp,
            w_statistic: res.w,
            p_value: res.p_value,
        });
        Ok(())
    }
}

fn sample_summary(samples: &[f64]) -> (f64, f64) {
    let n = samples.len() as f64;
    let origin = samples[0];
    let (mut sum, mut sq) = (0.0, 0.0);
    for v in samples {
        let d = v - origin;
        sum += d;
        sq += d * d;
    }
    let var = ((sq - sum * sum / n) / (n - 1.0)).max(0.0);
    (origin + sum / n, var.sqrt())
}

/// Monte Carlo baseline over every one-step-ahead window of a normalized
/// series. The trace uses the filter's layout with posterior equal to prior,
/// the trained bias and zero gain.
pub fn run_baseline(
    series: &RawSeries,
    weights: &ModelWeights,
    norm: &Normalizer,
    n_samples: usize,
    seed: u64,
) -> Result<(FilterTrace, Vec<SwRecord>)> {
    if !series.is_normalized() {
        return Err(Error::Schema("baseline expects a normalized series".into()));
    }
    let width = weights.window();
    if series.len() < width {
        return Err(Error::TooShort {
            required: width + 1,
            actual: series.len(),
        });
    }
    let mut rng = substream(seed, Stream::Baseline);
    let mut trace = FilterTrace::default();
    let mut sw = SwScreen::new();
    let flow = series.column(Channel::FlowRate);
    for (step, n) in (width - 1..series.len().saturating_sub(1)).enumerate() {
        let started = Instant::now();
        let wrap = |e: Error| Error::Step {
            step,
            source: Box::new(e),
        };
        let window = window_at(series, n, width);
        let samples = predict_mc(&window, weights, norm, n_samples, &mut rng).map_err(wrap)?;
        let (mu, sigma) = sample_summary(&samples);
        let timestamp = series.timestamps()[n + 1];
        sw.push(timestamp, &samples).map_err(wrap)?;
        trace.records.push(TraceRecord {
            timestamp,
            prior_mean: mu,
            prior_sigma: sigma,
            post_mean: mu,
            post_sigma: sigma,
            wbias_mean: weights.bias(),
            wbias_sigma: 0.0,
            gain_q: 0.0,
            measurement: flow[n + 1],
            step_seconds: started.elapsed().as_secs_f64(),
        });
    }
    Ok((trace, sw.records))
}

/// Runs the filter and screens each prior ensemble for normality.
pub fn run_assimilation(
    series: &RawSeries,
    weights: &ModelWeights,
    norm: &Normalizer,
    config: &FilterConfig,
) -> Result<(FilterTrace, Vec<SwRecord>)> {
    let width = weights.window();
    let mut sw = SwScreen::new();
    let mut failure = None;
    let trace = run_filter_observed(series, weights, config, norm, |step, prior| {
        if failure.is_some() {
            return;
        }
        let timestamp = series.timestamps()[width + step];
        if let Err(e) = sw.push(timestamp, &prior.q_values()) {
            failure = Some(Error::Step {
                step,
                source: Box::new(e),
            });
        }
    })?;
    match failure {
        Some(e) => Err(e),
        None => Ok((trace, sw.records)),
    }
}

/// Per-step J between each prior and the measurement distribution
/// `N(z, meas_sigma)`, after checking the trace against `data` (normalized).
pub fn j_trace(trace: &FilterTrace, data: &RawSeries, meas_sigma: f64) -> Result<Vec<f64>> {
    if trace.is_empty() {
        return Err(Error::Empty("trace".into()));
    }
    if !data.is_normalized() {
        return Err(Error::Schema("evaluation expects normalized data".into()));
    }
    let ts = data.timestamps();
    let flow = data.column(Channel::FlowRate);
    let mut pred = Vec::with_capacity(trace.len());
    let mut meas = Vec::with_capacity(trace.len());
    for rec in &trace.records {
        let row = ts
            .binary_search(&rec.timestamp)
            .map_err(|_| Error::Schema(format!("trace timestamp {} not found in data", format_timestamp(&rec.timestamp))))?;
        if (flow[row] - rec.measurement).abs() > 1e-9 * flow[row].abs().max(1.0) {
            return Err(Error::Schema(format!(
                "trace measurement {} at {} disagrees with data value {}",
                rec.measurement,
                format_timestamp(&rec.timestamp),
                flow[row]
            )));
        }
        pred.push(GaussianSummary::new(rec.prior_mean, rec.prior_sigma));
        meas.push(GaussianSummary::new(flow[row], meas_sigma));
    }
    divergence_trace(&pred, &meas)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceSummary {
    pub run_id: String,
    pub median_j: f64,
    pub mean_j: f64,
    pub n_steps: usize,
    pub sw_rejections: Option<usize>,
    pub sw_alpha: f64,
    pub wallclock_p50_step_s: f64,
    pub wallclock_max_step_s: f64,
}

/// Rejections at `alpha`; degenerate steps count as non-rejections.
pub fn sw_rejections(records: &[SwRecord], alpha: f64) -> usize {
    records.iter().filter(|r| r.p_value < alpha).count()
}

pub fn summarize(run_id: &str, trace: &FilterTrace, j: &[f64], sw: Option<&[SwRecord]>, alpha: f64) -> Result<TraceSummary> {
    if j.len() != trace.len() {
        return Err(Error::LengthMismatch {
            left: j.len(),
            right: trace.len(),
        });
    }
    if let Some(sw) = sw {
        if sw.len() != trace.len() {
            return Err(Error::LengthMismatch {
                left: sw.len(),
                right: trace.len(),
            });
        }
    }
    let secs = trace.step_seconds();
    Ok(TraceSummary {
        run_id: run_id.to_string(),
        median_j: median_j(j)?,
        mean_j: mean(j)?,
        n_steps: trace.len(),
        sw_rejections: sw.map(|s| sw_rejections(s, alpha)),
        sw_alpha: alpha,
        wallclock_p50_step_s: median_j(&secs)?,
        wallclock_max_step_s: secs.iter().copied().fold(0.0, f64::max),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub runs: Vec<TraceSummary>,
    /// `run_id` with the lowest median J, or `None` when tied.
    pub winner: Option<String>,
}

pub fn compare(runs: Vec<TraceSummary>) -> Comparison {
    let best = runs
        .iter()
        .map(|r| r.median_j)
        .min_by(|a, b| a.total_cmp(b));
    let winner = best.and_then(|b| {
        let mut at_best = runs.iter().filter(|r| r.median_j == b);
        let first = at_best.next()?;
        at_best.next().is_none().then(|| first.run_id.clone())
    });
    Comparison { runs, winner }
}

/// Writes per-step J values (`timestamp,j`) for plotting.
pub fn write_j_csv<W: Write>(trace: &FilterTrace, j: &[f64], writer: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    wtr.write_record(["timestamp", "j"])?;
    for (rec, v) in trace.records.iter().zip(j) {
        wtr.write_record([format_timestamp(&rec.timestamp), v.to_string()])?;
    }
    wtr.flush().map_err(|e| Error::io("<csv writer>", e))?;
    Ok(())
}
