//! Stochastic ensemble Kalman filter over the augmented state
//! `x = [q, w_bias]`: normalized flow plus the regressor's output bias.
//!
//! Each step propagates every member through the forward model with its own
//! bias substituted into the output unit, estimates the 2x2 prior covariance
//! from the ensemble, and assimilates the measured flow with perturbed
//! observations. Every member keeps its own flow history, fed by its own
//! posterior flow; the pressure/temperature/choke histories are the measured
//! ones.

use std::io::{Read, Write};
use std::path::Path;
use std::time::Instant;

use chrono::NaiveDateTime;
use ndarray::Array2;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::{format_timestamp, parse_timestamp, window_at, Channel, Normalizer, RawSeries, Window};
use crate::error::{Error, Result};
use crate::model::{forward_batch, InputBatch, ModelWeights};
use crate::rng::{substream, Stream, StreamRng};

/// 2x2 covariance matrix, row major.
pub type Cov2 = [[f64; 2]; 2];

/// Forward model as seen by the filter.
pub trait FlowModel {
    fn window(&self) -> usize;

    /// Bias the regressor was trained with; centre of the ensemble prior.
    fn trained_bias(&self) -> f64;

    /// One-step-ahead flow per member. `q_hists` is `members x window` with
    /// column 0 the most recent value; `biases` replaces the output bias per
    /// member.
    fn predict_members(
        &self,
        q_hists: &Array2<f64>,
        theta_hist: &[[f64; 4]],
        u_hist: &[f64],
        biases: &[f64],
    ) -> Result<Vec<f64>>;
}

impl FlowModel for ModelWeights {
    fn window(&self) -> usize {
        self.config.window
    }

    fn trained_bias(&self) -> f64 {
        self.bias()
    }

    fn predict_members(
        &self,
        q_hists: &Array2<f64>,
        theta_hist: &[[f64; 4]],
        u_hist: &[f64],
        biases: &[f64],
    ) -> Result<Vec<f64>> {
        let inputs = InputBatch::from_shared(q_hists, theta_hist, u_hist)?;
        forward_batch(self, &inputs, Some(biases))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentedState {
    pub q: f64,
    pub w_bias: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FilterConfig {
    pub n_members: usize,
    /// Standard deviation of the initial bias spread around the trained value.
    pub w_bias_prior_sigma: f64,
    /// Diagonal of the additive model-error covariance, `[q, w_bias]`.
    pub model_error_cov: [f64; 2],
    /// Measurement variance; defaults to the squared flow sensor sigma.
    pub meas_var: Option<f64>,
    pub obs_operator: [f64; 2],
    /// Multiplicative spread inflation applied to prior deviations.
    pub inflation: f64,
    pub seed: u64,
}

impl Default for FilterConfig {
    fn default() -> Self {
        FilterConfig {
            n_members: 1000,
            w_bias_prior_sigma: 0.2f64.sqrt(),
            model_error_cov: [1e-6, 1e-6],
            meas_var: None,
            obs_operator: [1.0, 0.0],
            inflation: 1.0,
            seed: 0,
        }
    }
}

impl FilterConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_members < 2 {
            return Err(Error::Config("n_members must be >= 2".into()));
        }
        let nonneg = |v: f64| v.is_finite() && v >= 0.0;
        if !nonneg(self.w_bias_prior_sigma) {
            return Err(Error::Config("w_bias_prior_sigma must be >= 0".into()));
        }
        if !self.model_error_cov.iter().all(|&v| nonneg(v)) {
            return Err(Error::Config("model_error_cov entries must be >= 0".into()));
        }
        if let Some(r) = self.meas_var {
            if !nonneg(r) {
                return Err(Error::Config("meas_var must be >= 0".into()));
            }
        }
        if !self.obs_operator.iter().all(|v| v.is_finite()) {
            return Err(Error::Config("obs_operator must be finite".into()));
        }
        if !(self.inflation.is_finite() && self.inflation > 0.0) {
            return Err(Error::Config("inflation must be > 0".into()));
        }
        Ok(())
    }

    /// Measurement variance in normalized units.
    pub fn measurement_variance(&self, norm: &Normalizer) -> f64 {
        self.meas_var
            .unwrap_or_else(|| norm.sigma(Channel::FlowRate).powi(2))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Ensemble {
    pub members: Vec<AugmentedState>,
    /// `members x window` flow histories, column 0 most recent.
    pub q_hist: Array2<f64>,
}

impl Ensemble {
    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn q_values(&self) -> Vec<f64> {
        self.members.iter().map(|m| m.q).collect()
    }

    pub fn w_bias_values(&self) -> Vec<f64> {
        self.members.iter().map(|m| m.w_bias).collect()
    }

    pub fn mean(&self) -> AugmentedState {
        let n = self.members.len() as f64;
        let (q, w) = self
            .members
            .iter()
            .fold((0.0, 0.0), |(q, w), m| (q + m.q, w + m.w_bias));
        AugmentedState {
            q: q / n,
            w_bias: w / n,
        }
    }

    /// Sample covariance with the `N - 1` denominator, accumulated on
    /// deviations from the first member (exactly zero for identical members).
    pub fn covariance(&self) -> Cov2 {
        let origin = self.members[0];
        let n = self.members.len() as f64;
        let mut sum = [0.0; 2];
        let mut cross = [[0.0; 2]; 2];
        for m in &self.members {
            let d = [m.q - origin.q, m.w_bias - origin.w_bias];
            for i in 0..2 {
                sum[i] += d[i];
                for j in 0..2 {
                    cross[i][j] += d[i] * d[j];
                }
            }
        }
        let mut p = [[0.0; 2]; 2];
        for i in 0..2 {
            for j in 0..2 {
                p[i][j] = (cross[i][j] - sum[i] * sum[j] / n) / (n - 1.0);
            }
        }
        p
    }

    /// Shifts every member's flow history by one step, inserting its current q.
    pub fn push_history(&mut self) {
        let width = self.q_hist.ncols();
        for (mut row, m) in self.q_hist.rows_mut().into_iter().zip(&self.members) {
            for k in (1..width).rev() {
                row[k] = row[k - 1];
            }
            row[0] = m.q;
        }
    }
}

/// Draws the initial ensemble: biases around `trained_bias`, flows and flow
/// histories around the measured window with the flow sensor noise.
pub fn init_ensemble<R: Rng + ?Sized>(
    trained_bias: f64,
    config: &FilterConfig,
    window0: &Window,
    norm: &Normalizer,
    rng: &mut R,
) -> Result<Ensemble> {
    config.validate()?;
    window0.check()?;
    let n = config.n_members;
    let width = window0.width();
    let sigma_q = norm.sigma(Channel::FlowRate);
    let mut members = Vec::with_capacity(n);
    let mut q_hist = Array2::zeros((n, width));
    for (i, mut row) in q_hist.rows_mut().into_iter().enumerate() {
        let zw: f64 = rng.sample(StandardNormal);
        let w_bias = trained_bias + config.w_bias_prior_sigma * zw;
        for k in 0..width {
            let z: f64 = rng.sample(StandardNormal);
            row[k] = window0.q_hist[k] + sigma_q * z;
        }
        let q = row[0];
        if !(q.is_finite() && w_bias.is_finite()) {
            return Err(Error::NonFiniteMember { member: i });
        }
        members.push(AugmentedState { q, w_bias });
    }
    Ok(Ensemble { members, q_hist })
}

/// Forecast step: each member's flow goes through the forward model with its
/// own bias, the bias follows a random walk, and both receive additive model
/// noise. Returns the prior ensemble and its sample covariance.
pub fn predict_step<M: FlowModel + ?Sized, R: Rng + ?Sized>(
    ens: Ensemble,
    theta_hist: &[[f64; 4]],
    u_hist: &[f64],
    model: &M,
    config: &FilterConfig,
    rng: &mut R,
) -> Result<(Ensemble, Cov2)> {
    let mut ens = ens;
    let biases = ens.w_bias_values();
    let forecast = model.predict_members(&ens.q_hist, theta_hist, u_hist, &biases)?;
    if forecast.len() != ens.len() {
        return Err(Error::Shape(format!(
            "model returned {} forecasts for {} members",
            forecast.len(),
            ens.len()
        )));
    }
    let sq = config.model_error_cov[0].sqrt();
    let sw = config.model_error_cov[1].sqrt();
    for (m, f) in ens.members.iter_mut().zip(forecast) {
        let zq: f64 = rng.sample(StandardNormal);
        let zw: f64 = rng.sample(StandardNormal);
        m.q = f + sq * zq;
        m.w_bias += sw * zw;
    }
    if config.inflation != 1.0 {
        let mean = ens.mean();
        for m in &mut ens.members {
            m.q = mean.q + config.inflation * (m.q - mean.q);
            m.w_bias = mean.w_bias + config.inflation * (m.w_bias - mean.w_bias);
        }
    }
    if let Some(i) = ens
        .members
        .iter()
        .position(|m| !(m.q.is_finite() && m.w_bias.is_finite()))
    {
        return Err(Error::NonFiniteMember { member: i });
    }
    let p = ens.covariance();
    Ok((ens, p))
}

/// `K = P M^T (M P M^T + R)^-1` for a scalar observation.
pub fn kalman_gain(p: &Cov2, m: &[f64; 2], r: f64) -> Result<[f64; 2]> {
    let pm = [
        p[0][0] * m[0] + p[0][1] * m[1],
        p[1][0] * m[0] + p[1][1] * m[1],
    ];
    let s = m[0] * pm[0] + m[1] * pm[1] + r;
    if !(s > 0.0 && s.is_finite()) {
        return Err(Error::SingularInnovation(s));
    }
    Ok([pm[0] / s, pm[1] / s])
}

/// Analysis step with perturbed observations: member `i` assimilates
/// `z + eta_i`, `eta_i ~ N(0, r)`.
pub fn correct_step<R: Rng + ?Sized>(
    prior: Ensemble,
    z: f64,
    k: &[f64; 2],
    m: &[f64; 2],
    r: f64,
    rng: &mut R,
) -> Ensemble {
    let mut ens = prior;
    let sr = r.sqrt();
    for member in &mut ens.members {
        let eta: f64 = rng.sample(StandardNormal);
        let innovation = z + sr * eta - (m[0] * member.q + m[1] * member.w_bias);
        member.q += k[0] * innovation;
        member.w_bias += k[1] * innovation;
    }
    ens
}

/// Per-step filter record, normalized units.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRecord {
    pub timestamp: NaiveDateTime,
    pub prior_mean: f64,
    pub prior_sigma: f64,
    pub post_mean: f64,
    pub post_sigma: f64,
    pub wbias_mean: f64,
    pub wbias_sigma: f64,
    pub gain_q: f64,
    pub measurement: f64,
    pub step_seconds: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct FilterTrace {
    pub records: Vec<TraceRecord>,
}

pub const TRACE_HEADER: [&str; 10] = [
    "timestamp",
    "prior_mean",
    "prior_sigma",
    "post_mean",
    "post_sigma",
    "wbias_mean",
    "wbias_sigma",
    "gain_q",
    "measurement",
    "step_seconds",
];

impl FilterTrace {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn step_seconds(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.step_seconds).collect()
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(writer);
        wtr.write_record(TRACE_HEADER)?;
        for r in &self.records {
            wtr.write_record([
                format_timestamp(&r.timestamp),
                r.prior_mean.to_string(),
                r.prior_sigma.to_string(),
                r.post_mean.to_string(),
                r.post_sigma.to_string(),
                r.wbias_mean.to_string(),
                r.wbias_sigma.to_string(),
                r.gain_q.to_string(),
                r.measurement.to_string(),
                r.step_seconds.to_string(),
            ])?;
        }
        wtr.flush().map_err(|e| Error::io("<csv writer>", e))?;
        Ok(())
    }

    pub fn from_reader<R: Read>(reader: R) -> Result<FilterTrace> {
        let mut rdr = csv::Reader::from_reader(reader);
        let headers = rdr.headers()?.clone();
        if headers.iter().collect::<Vec<_>>() != TRACE_HEADER {
            return Err(Error::Schema("unexpected filter trace header".into()));
        }
        let mut records = Vec::new();
        for (i, rec) in rdr.records().enumerate() {
            let row = i + 2;
            let rec = rec.map_err(|e| Error::Parse {
                row,
                message: e.to_string(),
            })?;
            let num = |j: usize| -> Result<f64> {
                rec.get(j)
                    .and_then(|s| s.parse().ok())
                    .ok_or_else(|| Error::Parse {
                        row,
                        message: format!("bad `{}` value", TRACE_HEADER[j]),
                    })
            };
            records.push(TraceRecord {
                timestamp: parse_timestamp(rec.get(0).unwrap_or(""))
                    .map_err(|message| Error::Parse { row, message })?,
                prior_mean: num(1)?,
                prior_sigma: num(2)?,
                post_mean: num(3)?,
                post_sigma: num(4)?,
                wbias_mean: num(5)?,
                wbias_sigma: num(6)?,
                gain_q: num(7)?,
                measurement: num(8)?,
                step_seconds: num(9)?,
            });
        }
        Ok(FilterTrace { records })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv(std::io::BufWriter::new(file))
    }
}

fn sd(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = values.clone().count() as f64;
    let mean = values.clone().sum::<f64>() / n;
    let var = values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Runs the filter over every step after the initial window.
pub fn run_filter<M: FlowModel + ?Sized>(
    series: &RawSeries,
    model: &M,
    config: &FilterConfig,
    norm: &Normalizer,
) -> Result<FilterTrace> {
    run_filter_observed(series, model, config, norm, |_, _| {})
}

/// [`run_filter`] with a callback receiving each step's prior ensemble.
pub fn run_filter_observed<M, F>(
    series: &RawSeries,
    model: &M,
    config: &FilterConfig,
    norm: &Normalizer,
    mut on_prior: F,
) -> Result<FilterTrace>
where
    M: FlowModel + ?Sized,
    F: FnMut(usize, &Ensemble),
{
    config.validate()?;
    if !series.is_normalized() {
        return Err(Error::Schema("filter expects a normalized series".into()));
    }
    let width = model.window();
    if series.len() < width {
        return Err(Error::TooShort {
            required: width + 1,
            actual: series.len(),
        });
    }
    let mut trace = FilterTrace::default();
    if series.len() == width {
        return Ok(trace);
    }

    let mut init_rng: StreamRng = substream(config.seed, Stream::Init);
    let mut model_rng: StreamRng = substream(config.seed, Stream::Ensemble);
    let mut obs_rng: StreamRng = substream(config.seed, Stream::ObservationPerturbation);
    let r = config.measurement_variance(norm);
    let m = config.obs_operator;
    let flow = series.column(Channel::FlowRate);

    let window0 = window_at(series, width - 1, width);
    let mut ens = Some(init_ensemble(
        model.trained_bias(),
        config,
        &window0,
        norm,
        &mut init_rng,
    )?);

    for (step, n) in (width - 1..series.len() - 1).enumerate() {
        let started = Instant::now();
        let window = window_at(series, n, width);
        let wrap = |e: Error| Error::Step {
            step,
            source: Box::new(e),
        };
        let current = ens.take().expect("ensemble present between steps");
        let (prior, p) = predict_step(
            current,
            &window.theta_hist,
            &window.u_hist,
            model,
            config,
            &mut model_rng,
        )
        .map_err(wrap)?;
        on_prior(step, &prior);
        let (prior_mean, prior_sigma) = sd(prior.members.iter().map(|m| m.q));
        let k = kalman_gain(&p, &m, r).map_err(wrap)?;
        let z = flow[n + 1];
        let mut post = correct_step(prior, z, &k, &m, r, &mut obs_rng);
        if let Some(i) = post
            .members
            .iter()
            .position(|m| !(m.q.is_finite() && m.w_bias.is_finite()))
        {
            return Err(wrap(Error::NonFiniteMember { member: i }));
        }
        let (post_mean, post_sigma) = sd(post.members.iter().map(|m| m.q));
        let (wbias_mean, wbias_sigma) = sd(post.members.iter().map(|m| m.w_bias));
        post.push_history();
        ens = Some(post);
        trace.records.push(TraceRecord {
            timestamp: series.timestamps()[n + 1],
            prior_mean,
            prior_sigma,
            post_mean,
            post_sigma,
            wbias_mean,
            wbias_sigma,
            gain_q: k[0],
            measurement: z,
            step_seconds: started.elapsed().as_secs_f64(),
        });
    }
    Ok(trace)
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::data::DEFAULT_SIGMA_SCALED;
    use crate::rng::substream;

    /// `q' = a q + w_bias`, ignoring the auxiliary inputs.
    pub(crate) struct LinearModel {
        pub a: f64,
        pub window: usize,
        pub bias: f64,
    }

    impl FlowModel for LinearModel {
        fn window(&self) -> usize {
            self.window
        }
        fn trained_bias(&self) -> f64 {
            self.bias
        }
        fn predict_members(
            &self,
            q_hists: &Array2<f64>,
            _theta: &[[f64; 4]],
            _u: &[f64],
            biases: &[f64],
        ) -> Result<Vec<f64>> {
            Ok(q_hists
                .column(0)
                .iter()
                .zip(biases)
                .map(|(q, b)| self.a * q + b)
                .collect())
        }
    }

    fn flat_window(width: usize, q: f64) -> Window {
        Window {
            q_hist: vec![q; width],
            theta_hist: vec![[0.5; 4]; width],
            u_hist: vec![0.5; width],
            target: q,
        }
    }

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn gain_fixtures() {
        let eye = [[1.0, 0.0], [0.0, 1.0]];
        assert_eq!(kalman_gain(&eye, &[1.0, 0.0], 0.0).unwrap(), [1.0, 0.0]);
        assert_eq!(kalman_gain(&eye, &[1.0, 0.0], 1.0).unwrap(), [0.5, 0.0]);
        let p = [[1.0, 0.5], [0.5, 1.0]];
        assert_eq!(kalman_gain(&p, &[1.0, 0.0], 1.0).unwrap(), [0.5, 0.25]);
        let zero = [[0.0; 2]; 2];
        assert!(matches!(
            kalman_gain(&zero, &[1.0, 0.0], 0.0),
            Err(Error::SingularInnovation(_))
        ));
        let k = kalman_gain(&eye, &[1.0, 0.0], 1e12).unwrap();
        assert!(k[0].abs() < 1e-11 && k[1] == 0.0);
    }

    #[test]
    fn init_degenerate_and_sampling() {
        let norm = Normalizer::identity(DEFAULT_SIGMA_SCALED);
        let win = flat_window(36, 0.4);
        let cfg = FilterConfig {
            w_bias_prior_sigma: 0.0,
            ..FilterConfig::default()
        };
        let ens = init_ensemble(1.25, &cfg, &win, &norm, &mut substream(1, Stream::Init)).unwrap();
        assert_eq!(ens.len(), 1000);
        assert!(ens.members.iter().all(|m| m.w_bias == 1.25));
        for (m, row) in ens.members.iter().zip(ens.q_hist.rows()) {
            assert_eq!(m.q, row[0]);
        }

        let cfg = FilterConfig::default();
        let ens = init_ensemble(1.25, &cfg, &win, &norm, &mut substream(2, Stream::Init)).unwrap();
        let mean_w = ens.mean().w_bias;
        let tol = 4.0 * cfg.w_bias_prior_sigma / (1000f64).sqrt();
        assert!(close(mean_w, 1.25, tol), "{mean_w}");
        assert!(close(ens.mean().q, 0.4, 4.0 * 0.003 / (1000f64).sqrt()));
    }

    #[test]
    fn degenerate_prediction() {
        let norm = Normalizer::identity([0.0; 6]);
        let win = flat_window(4, 0.3);
        let cfg = FilterConfig {
            n_members: 20,
            w_bias_prior_sigma: 0.0,
            model_error_cov: [0.0, 0.0],
            ..FilterConfig::default()
        };
        let ens = init_ensemble(0.1, &cfg, &win, &norm, &mut substream(1, Stream::Init)).unwrap();
        let model = LinearModel {
            a: 0.9,
            window: 4,
            bias: 0.1,
        };
        let (prior, p) = predict_step(
            ens,
            &win.theta_hist,
            &win.u_hist,
            &model,
            &cfg,
            &mut substream(1, Stream::Ensemble),
        )
        .unwrap();
        let first = prior.members[0];
        assert!(prior.members.iter().all(|m| *m == first));
        assert_eq!(p, [[0.0; 2]; 2]);
        assert!(close(first.q, 0.9 * 0.3 + 0.1, 1e-15));
    }

    #[test]
    fn bias_column_unchanged_without_walk() {
        let norm = Normalizer::identity(DEFAULT_SIGMA_SCALED);
        let win = flat_window(4, 0.3);
        let cfg = FilterConfig {
            n_members: 50,
            model_error_cov: [1e-4, 0.0],
            ..FilterConfig::default()
        };
        let ens = init_ensemble(0.0, &cfg, &win, &norm, &mut substream(3, Stream::Init)).unwrap();
        let before = ens.w_bias_values();
        let model = LinearModel {
            a: 0.5,
            window: 4,
            bias: 0.0,
        };
        let (prior, _) = predict_step(
            ens,
            &win.theta_hist,
            &win.u_hist,
            &model,
            &cfg,
            &mut substream(3, Stream::Ensemble),
        )
        .unwrap();
        assert_eq!(prior.w_bias_values(), before);
    }

    #[test]
    fn sample_covariance_is_symmetric_psd() {
        for seed in 0..100u64 {
            let mut rng = substream(seed, Stream::Ensemble);
            let n = 2 + (seed as usize % 30);
            let members = (0..n)
                .map(|_| AugmentedState {
                    q: rng.sample(StandardNormal),
                    w_bias: 0.3 * rng.sample::<f64, _>(StandardNormal) + rng.random::<f64>(),
                })
                .collect();
            let ens = Ensemble {
                members,
                q_hist: Array2::zeros((n, 1)),
            };
            let p = ens.covariance();
            assert_eq!(p[0][1], p[1][0]);
            let det = p[0][0] * p[1][1] - p[0][1] * p[1][0];
            assert!(p[0][0] >= 0.0 && p[1][1] >= 0.0 && det >= -1e-12);
        }
    }

    fn gaussian_ensemble(n: usize, rng: &mut StreamRng) -> Ensemble {
        let members = (0..n)
            .map(|_| {
                let a: f64 = rng.sample(StandardNormal);
                let b: f64 = rng.sample(StandardNormal);
                AugmentedState {
                    q: 0.5 + 0.1 * a,
                    w_bias: 0.2 * (0.6 * a + 0.8 * b),
                }
            })
            .collect();
        Ensemble {
            members,
            q_hist: Array2::zeros((n, 1)),
        }
    }

    #[test]
    fn zero_gain_identity_and_perfect_observation() {
        let mut rng = substream(4, Stream::Ensemble);
        let prior = gaussian_ensemble(30, &mut rng);
        let post = correct_step(prior.clone(), 0.7, &[0.0, 0.0], &[1.0, 0.0], 1e-4, &mut rng);
        assert_eq!(post, prior);

        let p = prior.covariance();
        let k = kalman_gain(&p, &[1.0, 0.0], 0.0).unwrap();
        let post = correct_step(prior.clone(), 0.7, &k, &[1.0, 0.0], 0.0, &mut rng);
        assert!(post.members.iter().all(|m| close(m.q, 0.7, 1e-12)));

        let k = kalman_gain(&p, &[1.0, 0.0], 1e12).unwrap();
        let post = correct_step(prior.clone(), 0.7, &k, &[1.0, 0.0], 1e12, &mut rng);
        for (a, b) in post.members.iter().zip(&prior.members) {
            assert!(close(a.q, b.q, 1e-6) && close(a.w_bias, b.w_bias, 1e-6));
        }
    }

    #[test]
    fn correction_shrinks_variance_on_average() {
        let trials = 200;
        let (mut prior_var, mut post_var) = (0.0, 0.0);
        for seed in 0..trials {
            let mut rng = substream(seed, Stream::Ensemble);
            let prior = gaussian_ensemble(50, &mut rng);
            let p = prior.covariance();
            let r = 0.01;
            let k = kalman_gain(&p, &[1.0, 0.0], r).unwrap();
            let post = correct_step(prior, 0.55, &k, &[1.0, 0.0], r, &mut rng);
            prior_var += p[0][0];
            post_var += post.covariance()[0][0];
        }
        assert!(post_var / (trials as f64) < prior_var / (trials as f64));
    }

    fn linear_series(len: usize, q: impl Fn(usize) -> f64) -> RawSeries {
        let t0 = chrono::NaiveDate::from_ymd_opt(2012, 7, 13)
            .unwrap()
            .and_hms_opt(0, 0, 0)
            .unwrap();
        let ts = (0..len)
            .map(|i| t0 + chrono::Duration::minutes(10 * i as i64))
            .collect();
        let cols = std::array::from_fn(|c| {
            (0..len)
                .map(|i| if c == 0 { q(i) } else { 0.1 + 0.8 * ((i + c) % 7) as f64 / 7.0 })
                .collect()
        });
        let raw = RawSeries::new(ts, cols).unwrap();
        Normalizer::identity([0.0; 6]).normalize(&raw).unwrap()
    }

    #[test]
    fn run_filter_shapes_and_reproducibility() {
        let series = linear_series(60, |i| 0.3 + 0.001 * i as f64);
        let model = LinearModel {
            a: 1.0,
            window: 8,
            bias: 0.0,
        };
        let norm = Normalizer::identity(DEFAULT_SIGMA_SCALED);
        let cfg = FilterConfig {
            n_members: 64,
            seed: 9,
            ..FilterConfig::default()
        };
        let a = run_filter(&series, &model, &cfg, &norm).unwrap();
        let b = run_filter(&series, &model, &cfg, &norm).unwrap();
        assert_eq!(a.len(), 60 - 8);
        for (x, y) in a.records.iter().zip(&b.records) {
            let mut y = *y;
            y.step_seconds = x.step_seconds;
            assert_eq!(*x, y);
            assert!(x.prior_sigma >= 0.0 && x.post_sigma >= 0.0 && x.wbias_sigma >= 0.0);
        }
        assert_eq!(a.records[0].timestamp, series.timestamps()[8]);
        assert_eq!(a.records[0].measurement, series.value(Channel::FlowRate, 8));

        let short = linear_series(8, |_| 0.3);
        assert!(run_filter(&short, &model, &cfg, &norm).unwrap().is_empty());
        let too_short = linear_series(5, |_| 0.3);
        assert!(run_filter(&too_short, &model, &cfg, &norm).is_err());
    }

    #[test]
    fn trace_csv_roundtrip() {
        let series = linear_series(20, |i| 0.5 + 0.01 * (i as f64).sin());
        let model = LinearModel {
            a: 1.0,
            window: 4,
            bias: 0.0,
        };
        let norm = Normalizer::identity(DEFAULT_SIGMA_SCALED);
        let cfg = FilterConfig {
            n_members: 16,
            ..FilterConfig::default()
        };
        let trace = run_filter(&series, &model, &cfg, &norm).unwrap();
        let mut buf = Vec::new();
        trace.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with(
            "timestamp,prior_mean,prior_sigma,post_mean,post_sigma,wbias_mean,wbias_sigma,gain_q,measurement,step_seconds\n"
        ));
        assert_eq!(FilterTrace::from_reader(buf.as_slice()).unwrap(), trace);
    }
}
