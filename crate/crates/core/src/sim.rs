//! Synthetic gas-well generator.
//!
//! A deliberately simple surrogate: exponential reservoir depletion, a
//! deliverability law `q = C * choke * sqrt(p_res^2 - p_t^2) / (1 + r)` with a
//! choke-dependent tubing pressure `p_t`, salt resistance `r` that grows while
//! producing and is partly washed out at every shut-in, and a short flush
//! transient after each restart. The wellhead gauges read the line pressure
//! plus the drop across the choke, `(q / (Cv * choke))^2`, and the full shut-in
//! pressure while closed. Sensors add Gaussian noise.
//!
//! A sibling well shares the schedules and the pressure/temperature response of
//! its reference; only the produced flow is offset.

use std::path::Path;

use chrono::NaiveDateTime;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::{parse_timestamp, Channel, RawSeries, STEP_MINUTES};
use crate::error::{Error, Result};
use crate::rng::{substream, Stream};

const STEPS_PER_DAY: f64 = 24.0 * 60.0 / STEP_MINUTES as f64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShutIn {
    pub start: usize,
    pub length: usize,
}

/// Choke opening from `start` onwards (until the next setting).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChokeSetting {
    pub start: usize,
    pub opening: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WellScenario {
    #[serde(default = "default_start")]
    pub start: String,
    /// Number of 10-minute steps.
    pub duration: usize,
    pub reservoir_pressure0: f64,
    /// Per day.
    pub decline_rate: f64,
    /// Resistance growth per producing day at full choke.
    pub salt_growth_rate: f64,
    pub wash_reset_fraction: f64,
    #[serde(default)]
    pub shutin_schedule: Vec<ShutIn>,
    pub choke_schedule: Vec<ChokeSetting>,
    /// Additive production offset in units of the reference flow range.
    #[serde(default)]
    pub bias_offset: f64,
    /// Raw flow scale for `bias_offset`; defaults to this well's own peak
    /// latent flow.
    #[serde(default)]
    pub flow_reference: Option<f64>,
    /// Per-channel sensor sigma in raw units: flow, thp_1..3, temperature, choke.
    pub noise: [f64; 6],
    pub seed: u64,
    #[serde(default = "default_productivity")]
    pub productivity: f64,
    #[serde(default = "default_line_pressure")]
    pub line_pressure: f64,
    #[serde(default = "default_choke_coefficient")]
    pub choke_coefficient: f64,
    #[serde(default = "default_restart_boost")]
    pub restart_boost: f64,
    #[serde(default = "default_restart_decay_steps")]
    pub restart_decay_steps: f64,
    #[serde(default = "default_ambient_temperature")]
    pub ambient_temperature: f64,
    #[serde(default = "default_flowing_temperature")]
    pub flowing_temperature: f64,
    #[serde(default = "default_temperature_lag_steps")]
    pub temperature_lag_steps: f64,
    /// Fixed calibration offsets of the three THP gauges.
    #[serde(default)]
    pub thp_gauge_offsets: [f64; 3],
}

fn default_start() -> String {
    "2009-01-01T00:00:00".into()
}
fn default_productivity() -> f64 {
    0.01
}
fn default_line_pressure() -> f64 {
    40.0
}
fn default_choke_coefficient() -> f64 {
    0.25
}
fn default_restart_boost() -> f64 {
    0.08
}
fn default_restart_decay_steps() -> f64 {
    18.0
}
fn default_ambient_temperature() -> f64 {
    15.0
}
fn default_flowing_temperature() -> f64 {
    70.0
}
fn default_temperature_lag_steps() -> f64 {
    6.0
}

impl WellScenario {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Scenario(m));
        if self.duration == 0 {
            return bad("duration must be >= 1".into());
        }
        parse_timestamp(&self.start).map_err(Error::Scenario)?;
        for (name, v) in [
            ("decline_rate", self.decline_rate),
            ("salt_growth_rate", self.salt_growth_rate),
            ("productivity", self.productivity),
            ("restart_boost", self.restart_boost),
            ("restart_decay_steps", self.restart_decay_steps),
            ("temperature_lag_steps", self.temperature_lag_steps),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return bad(format!("{name} must be finite and >= 0, got {v}"));
            }
        }
        if !(self.choke_coefficient.is_finite() && self.choke_coefficient > 0.0) {
            return bad(format!("choke_coefficient must be > 0, got {}", self.choke_coefficient));
        }
        if !(self.reservoir_pressure0 > self.line_pressure && self.line_pressure >= 0.0) {
            return bad("reservoir_pressure0 must exceed line_pressure >= 0".into());
        }
        if !(0.0..=1.0).contains(&self.wash_reset_fraction) {
            return bad("wash_reset_fraction must lie in [0, 1]".into());
        }
        if !self.noise.iter().all(|s| s.is_finite() && *s >= 0.0) {
            return bad("noise sigmas must be finite and >= 0".into());
        }
        if !self.bias_offset.is_finite() {
            return bad("bias_offset must be finite".into());
        }
        if let Some(r) = self.flow_reference {
            if !(r.is_finite() && r > 0.0) {
                return bad("flow_reference must be > 0".into());
            }
        }
        for s in &self.shutin_schedule {
            if s.length == 0 || s.start + s.length > self.duration {
                return bad(format!(
                    "shut-in at {} (length {}) outside duration {}",
                    s.start, s.length, self.duration
                ));
            }
        }
        if self.choke_schedule.first().map(|c| c.start) != Some(0) {
            return bad("choke_schedule must start at step 0".into());
        }
        for pair in self.choke_schedule.windows(2) {
            if pair[1].start <= pair[0].start {
                return bad("choke_schedule starts must be strictly increasing".into());
            }
        }
        for c in &self.choke_schedule {
            if c.start >= self.duration || !(0.0..=1.0).contains(&c.opening) {
                return bad(format!("choke setting {c:?} invalid"));
            }
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<WellScenario> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let scenario: WellScenario = serde_json::from_str(&text)
            .map_err(|e| Error::json(path.display().to_string(), e))?;
        scenario.validate()?;
        Ok(scenario)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::json("scenario", e))?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    /// Reference well: roughly 3.3 years of data with shut-in/wash cycles
    /// every two to five weeks and occasional choke moves.
    pub fn reference(seed: u64) -> WellScenario {
        let duration = (3.0 * 365.0 + 200.0) as usize * STEPS_PER_DAY as usize;
        Self::cyclic(duration, seed)
    }

    /// Short scenario (`days` long) with the same regimes, for quick runs.
    pub fn short(days: usize, seed: u64) -> WellScenario {
        Self::cyclic(days * STEPS_PER_DAY as usize, seed)
    }

    fn cyclic(duration: usize, seed: u64) -> WellScenario {
        let mut rng = substream(seed, Stream::Init);
        let day = STEPS_PER_DAY as usize;
        let mut shutins = Vec::new();
        let mut chokes = vec![ChokeSetting {
            start: 0,
            opening: 0.7,
        }];
        let mut t = 3 * day + rng.random_range(0..2 * day);
        while t < duration {
            // choke moves between washes
            let move_at = t - rng.random_range(day / 2..2 * day);
            if move_at > chokes.last().map_or(0, |c| c.start) {
                let opening = ((0.45 + 0.5 * rng.random::<f64>()) * 100.0).round() / 100.0;
                chokes.push(ChokeSetting {
                    start: move_at,
                    opening: opening.min(1.0),
                });
            }
            let length = rng.random_range(day / 4..2 * day);
            if t + length >= duration {
                break;
            }
            shutins.push(ShutIn { start: t, length });
            t += length + rng.random_range(6 * day..30 * day);
        }
        WellScenario {
            start: default_start(),
            duration,
            reservoir_pressure0: 250.0,
            decline_rate: 2.5e-4,
            salt_growth_rate: 0.02,
            wash_reset_fraction: 0.85,
            shutin_schedule: shutins,
            choke_schedule: chokes,
            bias_offset: 0.0,
            flow_reference: None,
            noise: [0.006, 0.4, 0.4, 0.4, 1.0, 0.0],
            seed,
            productivity: default_productivity(),
            line_pressure: default_line_pressure(),
            choke_coefficient: default_choke_coefficient(),
            restart_boost: default_restart_boost(),
            restart_decay_steps: default_restart_decay_steps(),
            ambient_temperature: default_ambient_temperature(),
            flowing_temperature: default_flowing_temperature(),
            temperature_lag_steps: default_temperature_lag_steps(),
            thp_gauge_offsets: [0.0, 0.3, -0.2],
        }
    }
}

/// Generated series plus the noise-free latent trajectories.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticTruth {
    pub scenario: WellScenario,
    pub series: RawSeries,
    /// Noise-free channel values, same layout as the series.
    pub latent: [Vec<f64>; 6],
    pub resistance: Vec<f64>,
    /// Steps belonging to a scheduled shut-in.
    pub shut_in: Vec<bool>,
}

impl SyntheticTruth {
    pub fn latent_flow(&self) -> &[f64] {
        &self.latent[Channel::FlowRate.index()]
    }

    /// Writes the latent trajectories as CSV.
    pub fn write_latent_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut wtr = csv::Writer::from_writer(std::io::BufWriter::new(file));
        wtr.write_record([
            "timestamp",
            "latent_flow",
            "latent_thp",
            "latent_temperature",
            "choke",
            "salt_resistance",
            "shut_in",
        ])?;
        for i in 0..self.series.len() {
            wtr.write_record([
                crate::data::format_timestamp(&self.series.timestamps()[i]),
                self.latent[0][i].to_string(),
                self.latent[1][i].to_string(),
                self.latent[4][i].to_string(),
                self.latent[5][i].to_string(),
                self.resistance[i].to_string(),
                (self.shut_in[i] as u8).to_string(),
            ])?;
        }
        wtr.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }
}

fn choke_at(schedule: &[ChokeSetting], step: usize) -> f64 {
    let idx = schedule.partition_point(|c| c.start <= step);
    schedule[idx - 1].opening
}

struct Latent {
    flow: Vec<f64>,
    thp: Vec<f64>,
    temperature: Vec<f64>,
    choke: Vec<f64>,
    resistance: Vec<f64>,
    shut: Vec<bool>,
}

fn latent_trajectories(s: &WellScenario) -> Latent {
    let n = s.duration;
    let mut shut = vec![false; n];
    let mut wash = vec![false; n];
    for si in &s.shutin_schedule {
        wash[si.start] = true;
        shut[si.start..si.start + si.length].fill(true);
    }
    let mut out = Latent {
        flow: Vec::with_capacity(n),
        thp: Vec::with_capacity(n),
        temperature: Vec::with_capacity(n),
        choke: Vec::with_capacity(n),
        resistance: Vec::with_capacity(n),
        shut,
    };
    let mut r = 0.0f64;
    let mut boost = 0.0f64;
    let mut temp: Option<f64> = None;
    let temp_alpha = 1.0 / (1.0 + s.temperature_lag_steps);
    let flow_half = 0.3 * s.productivity * s.reservoir_pressure0;
    for k in 0..n {
        let days = k as f64 / STEPS_PER_DAY;
        let p_res = s.reservoir_pressure0 * (-s.decline_rate * days).exp();
        if wash[k] {
            r *= 1.0 - s.wash_reset_fraction;
        }
        let choke = if out.shut[k] { 0.0 } else { choke_at(&s.choke_schedule, k) };
        if k > 0 && out.shut[k - 1] && !out.shut[k] {
            boost = s.restart_boost;
        }
        let (thp, flow) = if choke > 0.0 {
            let p_eff = p_res * (1.0 + boost);
            let p_t = s.line_pressure + (0.9 * p_res - s.line_pressure) * (1.0 - choke).powf(1.5);
            let flow = s.productivity * choke * (p_eff * p_eff - p_t * p_t).sqrt() / (1.0 + r);
            let drop = flow / (s.choke_coefficient * choke);
            (s.line_pressure + drop * drop, flow)
        } else {
            (0.9 * p_res, 0.0)
        };
        if choke > 0.0 {
            r += s.salt_growth_rate * choke / STEPS_PER_DAY;
        }
        boost *= (-1.0 / s.restart_decay_steps.max(1e-9)).exp();
        let target_temp = s.ambient_temperature
            + (s.flowing_temperature - s.ambient_temperature) * flow / (flow + flow_half);
        let t = match temp {
            None => target_temp,
            Some(prev) => prev + temp_alpha * (target_temp - prev),
        };
        temp = Some(t);
        out.flow.push(flow);
        out.thp.push(thp);
        out.temperature.push(t);
        out.choke.push(choke);
        out.resistance.push(r);
    }
    out
}

/// Deterministic (given the scenario seed) synthetic well record.
pub fn simulate_well(scenario: &WellScenario) -> Result<SyntheticTruth> {
    scenario.validate()?;
    let mut lat = latent_trajectories(scenario);
    let reference = scenario
        .flow_reference
        .unwrap_or_else(|| lat.flow.iter().copied().fold(0.0, f64::max));
    let shift = scenario.bias_offset * reference;
    for (f, &shut) in lat.flow.iter_mut().zip(&lat.shut) {
        if !shut && *f > 0.0 {
            *f = (*f + shift).max(0.0);
        }
    }

    let start = parse_timestamp(&scenario.start).map_err(Error::Scenario)?;
    let timestamps: Vec<NaiveDateTime> = (0..scenario.duration)
        .map(|k| start + chrono::Duration::minutes(STEP_MINUTES * k as i64))
        .collect();

    let latent: [Vec<f64>; 6] = [
        lat.flow.clone(),
        lat.thp.clone(),
        lat.thp.clone(),
        lat.thp.clone(),
        lat.temperature.clone(),
        lat.choke.clone(),
    ];
    let mut rng = substream(scenario.seed, Stream::DataNoise);
    let mut columns: [Vec<f64>; 6] = Default::default();
    for k in 0..scenario.duration {
        for ch in Channel::ALL {
            let c = ch.index();
            let z: f64 = rng.sample(StandardNormal);
            let clean = latent[c][k];
            let v = match ch {
                Channel::FlowRate if clean == 0.0 => 0.0,
                Channel::FlowRate => (clean + scenario.noise[c] * z).max(0.0),
                Channel::Choke => (clean + scenario.noise[c] * z).clamp(0.0, 1.0),
                Channel::Thp1 | Channel::Thp2 | Channel::Thp3 => {
                    clean + scenario.thp_gauge_offsets[c - 1] + scenario.noise[c] * z
                }
                Channel::Temperature => clean + scenario.noise[c] * z,
            };
            columns[c].push(v);
        }
    }
    let series = RawSeries::new(timestamps, columns)?;
    Ok(SyntheticTruth {
        scenario: scenario.clone(),
        series,
        latent,
        resistance: lat.resistance,
        shut_in: lat.shut,
    })
}

/// Re-simulates `truth`'s schedules as a second well whose production is
/// offset by `bias_offset` (in units of `truth`'s flow range), with fresh
/// sensor noise from `seed`.
pub fn derive_sibling(truth: &SyntheticTruth, bias_offset: f64, seed: u64) -> Result<SyntheticTruth> {
    let mut scenario = truth.scenario.clone();
    let reference = truth
        .scenario
        .flow_reference
        .unwrap_or_else(|| truth.latent_flow().iter().copied().fold(0.0, f64::max));
    scenario.flow_reference = Some(reference);
    scenario.bias_offset = bias_offset;
    scenario.seed = seed;
    simulate_well(&scenario)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::fit_normalizer;

    fn quiet(duration: usize) -> WellScenario {
        WellScenario {
            decline_rate: 0.0,
            salt_growth_rate: 0.0,
            shutin_schedule: vec![],
            choke_schedule: vec![ChokeSetting {
                start: 0,
                opening: 0.6,
            }],
            noise: [0.0; 6],
            ..WellScenario::short(duration / 144 + 1, 1)
        }
        .with_duration(duration)
    }

    impl WellScenario {
        fn with_duration(mut self, d: usize) -> Self {
            self.duration = d;
            self.shutin_schedule.retain(|s| s.start + s.length <= d);
            self.choke_schedule.retain(|c| c.start < d);
            self
        }
    }

    #[test]
    fn closed_valve_means_no_flow() {
        let mut s = quiet(500);
        s.choke_schedule = vec![ChokeSetting {
            start: 0,
            opening: 0.0,
        }];
        let t = simulate_well(&s).unwrap();
        assert!(t.latent_flow().iter().all(|&f| f == 0.0));
    }

    #[test]
    fn stationary_fixed_point() {
        let t = simulate_well(&quiet(400)).unwrap();
        let f0 = t.latent_flow()[0];
        assert!(f0 > 0.0);
        assert!(t.latent_flow().iter().all(|&f| f == f0));
        assert!(t.series.column(Channel::FlowRate).iter().all(|&f| f == f0));
    }

    #[test]
    fn degradation_between_washes() {
        let mut s = WellScenario::short(120, 4);
        s.noise = [0.0; 6];
        s.decline_rate = 0.0;
        s.choke_schedule.truncate(1);
        let t = simulate_well(&s).unwrap();
        let flow = t.latent_flow();
        let sched = &s.shutin_schedule;
        assert!(sched.len() >= 3);
        for pair in sched.windows(2) {
            let first_producing = pair[0].start + pair[0].length;
            let before_next = pair[1].start - 1;
            assert!(flow[before_next] < flow[first_producing]);
        }
        // resistance: nondecreasing while producing, reset at washes
        for k in 1..s.duration {
            let wash = sched.iter().any(|w| w.start == k);
            if wash {
                let expected = t.resistance[k - 1] * (1.0 - s.wash_reset_fraction);
                assert!((t.resistance[k] - expected).abs() < 1e-12);
            } else {
                assert!(t.resistance[k] >= t.resistance[k - 1]);
            }
        }
    }

    #[test]
    fn shutins_are_zero_and_producing_positive() {
        let t = simulate_well(&WellScenario::short(60, 2)).unwrap();
        for (k, &shut) in t.shut_in.iter().enumerate() {
            let f = t.latent_flow()[k];
            if shut {
                assert_eq!(f, 0.0);
                assert_eq!(t.series.value(Channel::FlowRate, k), 0.0);
                assert_eq!(t.series.value(Channel::Choke, k), 0.0);
            } else {
                assert!(f > 0.0);
            }
        }
    }

    #[test]
    fn reproducible_and_noise_zero_mean() {
        let s = WellScenario::short(30, 3);
        let a = simulate_well(&s).unwrap();
        let b = simulate_well(&s).unwrap();
        assert_eq!(a, b);
        let n = s.duration as f64;
        for ch in [Channel::Thp2, Channel::Temperature] {
            let c = ch.index();
            let offset = if c >= 1 && c <= 3 { s.thp_gauge_offsets[c - 1] } else { 0.0 };
            let mean = a
                .series
                .column(ch)
                .iter()
                .zip(&a.latent[c])
                .map(|(x, l)| x - l - offset)
                .sum::<f64>()
                / n;
            assert!(mean.abs() < 5.0 * s.noise[c] / n.sqrt(), "{ch:?} {mean}");
        }
    }

    #[test]
    fn sibling_offsets() {
        let truth = simulate_well(&WellScenario::short(40, 5)).unwrap();
        let same = derive_sibling(&truth, 0.0, truth.scenario.seed).unwrap();
        assert_eq!(same.series, truth.series);

        let sib = derive_sibling(&truth, 0.05, 77).unwrap();
        let norm = fit_normalizer(&truth.series).unwrap();
        let mut gap = 0.0;
        let mut count = 0;
        for k in 0..truth.series.len() {
            if truth.shut_in[k] {
                assert_eq!(sib.latent_flow()[k], 0.0);
                assert_eq!(sib.series.value(Channel::FlowRate, k), 0.0);
                continue;
            }
            gap += norm.normalize_value(Channel::FlowRate, sib.latent_flow()[k])
                - norm.normalize_value(Channel::FlowRate, truth.latent_flow()[k]);
            count += 1;
        }
        let gap = gap / count as f64;
        assert!((0.03..=0.07).contains(&gap), "{gap}");
    }

    #[test]
    fn invalid_schedules_rejected() {
        let mut s = WellScenario::short(10, 1);
        s.shutin_schedule.push(ShutIn {
            start: s.duration - 1,
            length: 5,
        });
        assert!(matches!(simulate_well(&s), Err(Error::Scenario(_))));
        let mut s = WellScenario::short(10, 1);
        s.choke_schedule[0].opening = 1.5;
        assert!(simulate_well(&s).is_err());
        let mut s = WellScenario::short(10, 1);
        s.decline_rate = -1.0;
        assert!(simulate_well(&s).is_err());
    }

    #[test]
    fn csv_round_trip_through_loader() {
        let t = simulate_well(&WellScenario::short(5, 9)).unwrap();
        let mut buf = Vec::new();
        t.series.write_csv(&mut buf).unwrap();
        let back = RawSeries::from_reader(buf.as_slice()).unwrap();
        assert_eq!(back, t.series);
    }
}
