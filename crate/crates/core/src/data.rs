//! Well time series: CSV ingestion, min/range normalization, sliding windows
//! and sensor-noise perturbation.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{Read, Write};
use std::ops::Range;
use std::path::Path;

use chrono::{DateTime, NaiveDateTime};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Sampling interval of every series.
pub const STEP_MINUTES: i64 = 10;

/// Default sliding-window width.
pub const WINDOW: usize = 36;

pub const TIMESTAMP_FORMAT: &str = "%Y-%m-%dT%H:%M:%S";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Channel {
    FlowRate,
    Thp1,
    Thp2,
    Thp3,
    Temperature,
    Choke,
}

impl Channel {
    pub const ALL: [Channel; 6] = [
        Channel::FlowRate,
        Channel::Thp1,
        Channel::Thp2,
        Channel::Thp3,
        Channel::Temperature,
        Channel::Choke,
    ];

    /// The auxiliary measured inputs (three tubing head pressures and temperature).
    pub const THETA: [Channel; 4] = [
        Channel::Thp1,
        Channel::Thp2,
        Channel::Thp3,
        Channel::Temperature,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Channel::FlowRate => "flow_rate",
            Channel::Thp1 => "thp_1",
            Channel::Thp2 => "thp_2",
            Channel::Thp3 => "thp_3",
            Channel::Temperature => "temperature",
            Channel::Choke => "choke",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_name(name: &str) -> Option<Channel> {
        Channel::ALL.into_iter().find(|c| c.name() == name)
    }
}

/// Timestamped six-channel sensor record on a fixed 10-minute grid.
///
/// Raw series enforce the physical bounds (`flow_rate >= 0`, `choke` in
/// [0, 1]); normalized series only require finite values, since wells other
/// than the reference may fall outside [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct RawSeries {
    timestamps: Vec<NaiveDateTime>,
    columns: [Vec<f64>; 6],
    normalized: bool,
}

impl RawSeries {
    pub fn new(timestamps: Vec<NaiveDateTime>, columns: [Vec<f64>; 6]) -> Result<Self> {
        let series = RawSeries {
            timestamps,
            columns,
            normalized: false,
        };
        series.validate()?;
        Ok(series)
    }

    fn validate(&self) -> Result<()> {
        let n = self.timestamps.len();
        for ch in Channel::ALL {
            if self.columns[ch.index()].len() != n {
                return Err(Error::Shape(format!(
                    "channel {} has {} values for {} timestamps",
                    ch.name(),
                    self.columns[ch.index()].len(),
                    n
                )));
            }
        }
        for (i, pair) in self.timestamps.windows(2).enumerate() {
            let spacing = (pair[1] - pair[0]).num_minutes();
            let exact = (pair[1] - pair[0]).num_seconds() == STEP_MINUTES * 60;
            if pair[1] <= pair[0] {
                return Err(Error::NonMonotone {
                    timestamp: format_timestamp(&self.timestamps[i + 1]),
                });
            }
            if !exact {
                return Err(Error::Gap {
                    timestamp: format_timestamp(&self.timestamps[i + 1]),
                    spacing_minutes: spacing,
                });
            }
        }
        for ch in Channel::ALL {
            for (row, &v) in self.columns[ch.index()].iter().enumerate() {
                if !v.is_finite() {
                    return Err(Error::InvalidValue {
                        row,
                        channel: ch.name(),
                        message: format!("non-finite value {v}"),
                    });
                }
                if self.normalized {
                    continue;
                }
                match ch {
                    Channel::FlowRate if v < 0.0 => {
                        return Err(Error::InvalidValue {
                            row,
                            channel: ch.name(),
                            message: format!("negative flow rate {v}"),
                        })
                    }
                    Channel::Choke if !(0.0..=1.0).contains(&v) => {
                        return Err(Error::InvalidValue {
                            row,
                            channel: ch.name(),
                            message: format!("choke {v} outside [0, 1]"),
                        })
                    }
                    _ => {}
                }
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.timestamps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.timestamps.is_empty()
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn timestamps(&self) -> &[NaiveDateTime] {
        &self.timestamps
    }

    pub fn column(&self, channel: Channel) -> &[f64] {
        &self.columns[channel.index()]
    }

    pub fn value(&self, channel: Channel, row: usize) -> f64 {
        self.columns[channel.index()][row]
    }

    /// Contiguous sub-range of rows.
    pub fn slice(&self, rows: Range<usize>) -> Result<RawSeries> {
        if rows.end > self.len() || rows.start > rows.end {
            return Err(Error::Shape(format!(
                "row range {rows:?} outside series of length {}",
                self.len()
            )));
        }
        Ok(RawSeries {
            timestamps: self.timestamps[rows.clone()].to_vec(),
            columns: std::array::from_fn(|c| self.columns[c][rows.clone()].to_vec()),
            normalized: self.normalized,
        })
    }

    pub fn from_reader<R: Read>(reader: R) -> Result<RawSeries> {
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(true)
            .trim(csv::Trim::All)
            .from_reader(reader);
        let headers = rdr.headers()?.clone();
        let find = |name: &str| {
            headers
                .iter()
                .position(|h| h == name)
                .ok_or_else(|| Error::Schema(format!("missing column `{name}`")))
        };
        let ts_col = find("timestamp")?;
        let mut cols = [0usize; 6];
        for ch in Channel::ALL {
            cols[ch.index()] = find(ch.name())?;
        }

        let mut timestamps = Vec::new();
        let mut columns: [Vec<f64>; 6] = Default::default();
        for (i, record) in rdr.records().enumerate() {
            // header is line 1
            let row = i + 2;
            let record = record.map_err(|e| Error::Parse {
                row,
                message: e.to_string(),
            })?;
            let field = |idx: usize| {
                record.get(idx).ok_or_else(|| Error::Parse {
                    row,
                    message: format!("missing field {idx}"),
                })
            };
            timestamps.push(parse_timestamp(field(ts_col)?).map_err(|message| {
                Error::Parse { row, message }
            })?);
            for ch in Channel::ALL {
                let raw = field(cols[ch.index()])?;
                if raw.is_empty() {
                    return Err(Error::Parse {
                        row,
                        message: format!("missing value for {}", ch.name()),
                    });
                }
                let v: f64 = raw.parse().map_err(|_| Error::Parse {
                    row,
                    message: format!("cannot parse {} value `{raw}`", ch.name()),
                })?;
                columns[ch.index()].push(v);
            }
        }
        RawSeries::new(timestamps, columns)
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(writer);
        let mut header = vec!["timestamp"];
        header.extend(Channel::ALL.iter().map(|c| c.name()));
        wtr.write_record(&header)?;
        for i in 0..self.len() {
            let mut rec = Vec::with_capacity(7);
            rec.push(format_timestamp(&self.timestamps[i]));
            for ch in Channel::ALL {
                rec.push(self.value(ch, i).to_string());
            }
            wtr.write_record(&rec)?;
        }
        wtr.flush().map_err(|e| Error::io("<csv writer>", e))?;
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv(std::io::BufWriter::new(file))
    }
}

pub fn parse_timestamp(s: &str) -> std::result::Result<NaiveDateTime, String> {
    NaiveDateTime::parse_from_str(s, TIMESTAMP_FORMAT)
        .or_else(|_| NaiveDateTime::parse_from_str(s, "%Y-%m-%d %H:%M:%S"))
        .or_else(|_| DateTime::parse_from_rfc3339(s).map(|d| d.naive_utc()))
        .map_err(|_| format!("invalid ISO-8601 timestamp `{s}`"))
}

pub fn format_timestamp(t: &NaiveDateTime) -> String {
    t.format(TIMESTAMP_FORMAT).to_string()
}

/// Reads and validates a well CSV file.
pub fn load_series(path: impl AsRef<Path>) -> Result<RawSeries> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    RawSeries::from_reader(std::io::BufReader::new(file))
}

/// Scaled standard deviations used when none are derived from sensor
/// accuracies: flow, three THP sensors, temperature, choke (exact).
pub const DEFAULT_SIGMA_SCALED: [f64; 6] = [0.003, 0.01, 0.01, 0.01, 0.04, 0.0];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChannelScale {
    pub offset: f64,
    pub range: f64,
    pub sigma_scaled: f64,
}

/// Per-channel affine map `x -> (x - offset) / range` plus the measurement
/// noise level in normalized units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(
    try_from = "BTreeMap<String, ChannelScale>",
    into = "BTreeMap<String, ChannelScale>"
)]
pub struct Normalizer {
    scales: [ChannelScale; 6],
}

impl TryFrom<BTreeMap<String, ChannelScale>> for Normalizer {
    type Error = Error;

    fn try_from(map: BTreeMap<String, ChannelScale>) -> Result<Self> {
        for key in map.keys() {
            if Channel::from_name(key).is_none() {
                return Err(Error::Schema(format!("unknown channel `{key}`")));
            }
        }
        let mut scales = [ChannelScale {
            offset: 0.0,
            range: 1.0,
            sigma_scaled: 0.0,
        }; 6];
        for ch in Channel::ALL {
            scales[ch.index()] = *map
                .get(ch.name())
                .ok_or_else(|| Error::Schema(format!("normalizer missing channel `{}`", ch.name())))?;
        }
        Normalizer::from_scales(scales)
    }
}

impl From<Normalizer> for BTreeMap<String, ChannelScale> {
    fn from(n: Normalizer) -> Self {
        Channel::ALL
            .iter()
            .map(|c| (c.name().to_string(), n.scales[c.index()]))
            .collect()
    }
}

impl Normalizer {
    pub fn from_scales(scales: [ChannelScale; 6]) -> Result<Self> {
        for ch in Channel::ALL {
            let s = scales[ch.index()];
            if !(s.range > 0.0 && s.range.is_finite()) {
                return Err(Error::ConstantChannel(ch.name()));
            }
            if !(s.offset.is_finite() && s.sigma_scaled.is_finite() && s.sigma_scaled >= 0.0) {
                return Err(Error::Config(format!(
                    "invalid scale for channel {}",
                    ch.name()
                )));
            }
        }
        Ok(Normalizer { scales })
    }

    /// Identity map with the given noise levels; handy for tests and for
    /// data that is already normalized.
    pub fn identity(sigma_scaled: [f64; 6]) -> Self {
        Normalizer {
            scales: std::array::from_fn(|i| ChannelScale {
                offset: 0.0,
                range: 1.0,
                sigma_scaled: sigma_scaled[i],
            }),
        }
    }

    pub fn scale(&self, channel: Channel) -> ChannelScale {
        self.scales[channel.index()]
    }

    pub fn sigma(&self, channel: Channel) -> f64 {
        self.scales[channel.index()].sigma_scaled
    }

    pub fn sigmas(&self) -> [f64; 6] {
        std::array::from_fn(|i| self.scales[i].sigma_scaled)
    }

    /// Copy with all noise levels multiplied by `factor`.
    pub fn with_sigma_factor(&self, factor: f64) -> Normalizer {
        let mut out = self.clone();
        for s in &mut out.scales {
            s.sigma_scaled *= factor;
        }
        out
    }

    pub fn with_sigmas(&self, sigma_scaled: [f64; 6]) -> Normalizer {
        let mut out = self.clone();
        for (s, sigma) in out.scales.iter_mut().zip(sigma_scaled) {
            s.sigma_scaled = sigma;
        }
        out
    }

    pub fn normalize_value(&self, channel: Channel, x: f64) -> f64 {
        let s = self.scales[channel.index()];
        (x - s.offset) / s.range
    }

    pub fn denormalize_value(&self, channel: Channel, x: f64) -> f64 {
        let s = self.scales[channel.index()];
        x * s.range + s.offset
    }

    pub fn normalize(&self, series: &RawSeries) -> Result<RawSeries> {
        if series.normalized {
            return Err(Error::Schema("series is already normalized".into()));
        }
        Ok(RawSeries {
            timestamps: series.timestamps.clone(),
            columns: std::array::from_fn(|c| {
                let ch = Channel::ALL[c];
                series.columns[c]
                    .iter()
                    .map(|&x| self.normalize_value(ch, x))
                    .collect()
            }),
            normalized: true,
        })
    }

    pub fn denormalize(&self, series: &RawSeries) -> Result<RawSeries> {
        if !series.normalized {
            return Err(Error::Schema("series is not normalized".into()));
        }
        Ok(RawSeries {
            timestamps: series.timestamps.clone(),
            columns: std::array::from_fn(|c| {
                let ch = Channel::ALL[c];
                series.columns[c]
                    .iter()
                    .map(|&x| self.denormalize_value(ch, x))
                    .collect()
            }),
            normalized: false,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Normalizer> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::json(path.display().to_string(), e))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self)
            .map_err(|e| Error::json("normalizer", e))?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }
}

fn channel_extents(reference: &RawSeries) -> Result<[(f64, f64); 6]> {
    if reference.is_empty() {
        return Err(Error::Empty("reference series".into()));
    }
    let mut out = [(0.0, 0.0); 6];
    for ch in Channel::ALL {
        let col = reference.column(ch);
        let min = col.iter().copied().fold(f64::INFINITY, f64::min);
        let max = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if max - min <= 0.0 {
            return Err(Error::ConstantChannel(ch.name()));
        }
        out[ch.index()] = (min, max - min);
    }
    Ok(out)
}

/// Fits offset = minimum and range = max - min per channel, with the default
/// scaled noise levels.
pub fn fit_normalizer(reference: &RawSeries) -> Result<Normalizer> {
    let ext = channel_extents(reference)?;
    Normalizer::from_scales(std::array::from_fn(|i| ChannelScale {
        offset: ext[i].0,
        range: ext[i].1,
        sigma_scaled: DEFAULT_SIGMA_SCALED[i],
    }))
}

/// Like [`fit_normalizer`], but derives the noise levels from raw sensor
/// accuracies quoted as 95% intervals: sigma = accuracy / 2, scaled by 1/range.
pub fn fit_normalizer_with_accuracy(reference: &RawSeries, accuracy: [f64; 6]) -> Result<Normalizer> {
    let ext = channel_extents(reference)?;
    if accuracy.iter().any(|a| !(a.is_finite() && *a >= 0.0)) {
        return Err(Error::Config("sensor accuracies must be finite and >= 0".into()));
    }
    Normalizer::from_scales(std::array::from_fn(|i| ChannelScale {
        offset: ext[i].0,
        range: ext[i].1,
        sigma_scaled: accuracy[i] / 2.0 / ext[i].1,
    }))
}

/// One model input window. Index 0 is the most recent entry: `q_hist[k]` and
/// `theta_hist[k]` hold step `n - k`, `u_hist[k]` holds the choke at step
/// `n + 1 - k`.
#[derive(Debug, Clone, PartialEq)]
pub struct Window {
    pub q_hist: Vec<f64>,
    pub theta_hist: Vec<[f64; 4]>,
    pub u_hist: Vec<f64>,
    pub target: f64,
}

impl Window {
    pub fn width(&self) -> usize {
        self.q_hist.len()
    }

    pub fn check(&self) -> Result<()> {
        let w = self.q_hist.len();
        if w == 0 || self.theta_hist.len() != w || self.u_hist.len() != w {
            return Err(Error::Shape(format!(
                "window histories have lengths {}/{}/{}",
                self.q_hist.len(),
                self.theta_hist.len(),
                self.u_hist.len()
            )));
        }
        Ok(())
    }
}

/// Lazy view of every sliding window of a normalized series.
#[derive(Debug, Clone, Copy)]
pub struct WindowBatch<'a> {
    series: &'a RawSeries,
    width: usize,
}

/// Builds the sliding windows over `series`: one window per target index
/// `n + 1` for `n` in `width - 1 ..= len - 2`.
pub fn make_windows(series: &RawSeries, width: usize) -> Result<WindowBatch<'_>> {
    if width == 0 {
        return Err(Error::Config("window width must be >= 1".into()));
    }
    if series.len() < width + 1 {
        return Err(Error::TooShort {
            required: width + 1,
            actual: series.len(),
        });
    }
    Ok(WindowBatch { series, width })
}

impl<'a> WindowBatch<'a> {
    pub fn len(&self) -> usize {
        self.series.len() - self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn series(&self) -> &'a RawSeries {
        self.series
    }

    /// Row index `n` of the newest flow/theta entry of window `i`.
    pub fn anchor(&self, i: usize) -> usize {
        self.width - 1 + i
    }

    /// Row index of the one-step-ahead target of window `i`.
    pub fn target_row(&self, i: usize) -> usize {
        self.anchor(i) + 1
    }

    pub fn get(&self, i: usize) -> Window {
        assert!(i < self.len(), "window index {i} out of range");
        window_at(self.series, self.anchor(i), self.width)
    }

    pub fn iter(&self) -> impl Iterator<Item = Window> + '_ {
        (0..self.len()).map(move |i| self.get(i))
    }
}

/// Window whose newest flow/theta entry is row `n`; the target is row `n + 1`.
pub(crate) fn window_at(series: &RawSeries, n: usize, width: usize) -> Window {
    let q = series.column(Channel::FlowRate);
    let u = series.column(Channel::Choke);
    let theta: [&[f64]; 4] = Channel::THETA.map(|c| series.column(c));
    Window {
        q_hist: (0..width).map(|k| q[n - k]).collect(),
        theta_hist: (0..width)
            .map(|k| std::array::from_fn(|j| theta[j][n - k]))
            .collect(),
        u_hist: (0..width).map(|k| u[n + 1 - k]).collect(),
        target: q[n + 1],
    }
}

/// Adds independent Gaussian sensor noise to the flow and theta histories.
/// The choke history and the target are left exact.
pub fn perturb_window<R: Rng + ?Sized>(window: &Window, norm: &Normalizer, rng: &mut R) -> Window {
    let mut out = window.clone();
    perturb_in_place(&mut out, norm, rng);
    out
}

pub(crate) fn perturb_in_place<R: Rng + ?Sized>(window: &mut Window, norm: &Normalizer, rng: &mut R) {
    let sigma_q = norm.sigma(Channel::FlowRate);
    let sigma_theta = Channel::THETA.map(|c| norm.sigma(c));
    for (q, theta) in window.q_hist.iter_mut().zip(window.theta_hist.iter_mut()) {
        let z: f64 = rng.sample(StandardNormal);
        *q += sigma_q * z;
        for (v, s) in theta.iter_mut().zip(sigma_theta) {
            let z: f64 = rng.sample(StandardNormal);
            *v += s * z;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{substream, Stream};
    use chrono::NaiveDate;

    fn t0() -> NaiveDateTime {
        NaiveDate::from_ymd_opt(2012, 7, 13)
            .unwrap()
            .and_hms_opt(0, 0, 0)
            .unwrap()
    }

    pub(crate) fn ramp_series(len: usize) -> RawSeries {
        let ts = (0..len)
            .map(|i| t0() + chrono::Duration::minutes(STEP_MINUTES * i as i64))
            .collect();
        let cols = std::array::from_fn(|c| {
            (0..len)
                .map(|i| {
                    if c == Channel::Choke.index() {
                        ((i * 7 + c) % 11) as f64 / 10.0
                    } else {
                        10.0 * (c + 1) as f64 + ((i * 13 + c * 5) % 17) as f64
                    }
                })
                .collect()
        });
        RawSeries::new(ts, cols).unwrap()
    }

    const HEADER: &str = "timestamp,flow_rate,thp_1,thp_2,thp_3,temperature,choke\n";

    #[test]
    fn loads_three_rows() {
        let csv = format!(
            "{HEADER}2012-07-13T00:00:00,1,2,3,4,5,0.5\n2012-07-13T00:10:00,1,2,3,4,5,0.5\n2012-07-13T00:20:00,0,2,3,4,5,0\n"
        );
        let s = RawSeries::from_reader(csv.as_bytes()).unwrap();
        assert_eq!(s.len(), 3);
        assert_eq!(s.value(Channel::Choke, 0), 0.5);
        // shut-in reading of exactly zero is valid
        assert_eq!(s.value(Channel::FlowRate, 2), 0.0);
    }

    #[test]
    fn rejects_choke_above_one() {
        let csv = format!("{HEADER}2012-07-13T00:00:00,1,2,3,4,5,1.3\n");
        let err = RawSeries::from_reader(csv.as_bytes()).unwrap_err();
        assert!(matches!(err, Error::InvalidValue { channel: "choke", .. }), "{err}");
    }

    #[test]
    fn gap_error_names_timestamp() {
        let csv = format!(
            "{HEADER}2012-07-13T00:00:00,1,2,3,4,5,0.5\n2012-07-13T00:20:00,1,2,3,4,5,0.5\n"
        );
        match RawSeries::from_reader(csv.as_bytes()).unwrap_err() {
            Error::Gap {
                timestamp,
                spacing_minutes,
            } => {
                assert_eq!(timestamp, "2012-07-13T00:20:00");
                assert_eq!(spacing_minutes, 20);
            }
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn rejects_non_monotone_and_missing() {
        let csv = format!(
            "{HEADER}2012-07-13T00:10:00,1,2,3,4,5,0.5\n2012-07-13T00:00:00,1,2,3,4,5,0.5\n"
        );
        assert!(matches!(
            RawSeries::from_reader(csv.as_bytes()),
            Err(Error::NonMonotone { .. })
        ));
        let csv = format!("{HEADER}2012-07-13T00:00:00,1,,3,4,5,0.5\n");
        assert!(matches!(
            RawSeries::from_reader(csv.as_bytes()),
            Err(Error::Parse { row: 2, .. })
        ));
        let csv = "timestamp,flow_rate,thp_1,thp_2,thp_3,choke\n";
        assert!(matches!(
            RawSeries::from_reader(csv.as_bytes()),
            Err(Error::Schema(_))
        ));
    }

    #[test]
    fn min_range_arithmetic() {
        let ts = (0..3)
            .map(|i| t0() + chrono::Duration::minutes(10 * i))
            .collect();
        let mut cols: [Vec<f64>; 6] = std::array::from_fn(|c| vec![c as f64, c as f64 + 1.0, c as f64 + 2.0]);
        cols[0] = vec![10.0, 20.0, 30.0];
        cols[5] = vec![0.0, 0.5, 1.0];
        let s = RawSeries::new(ts, cols).unwrap();
        let norm = fit_normalizer(&s).unwrap();
        let scale = norm.scale(Channel::FlowRate);
        assert_eq!(scale.offset, 10.0);
        assert_eq!(scale.range, 20.0);
        assert_eq!(norm.normalize_value(Channel::FlowRate, 20.0), 0.5);
        assert_eq!(norm.normalize_value(Channel::FlowRate, 10.0), 0.0);
        assert_eq!(norm.normalize_value(Channel::FlowRate, 30.0), 1.0);
        assert_eq!(norm.sigma(Channel::FlowRate), 0.003);
        assert_eq!(norm.sigma(Channel::Thp2), 0.01);
        assert_eq!(norm.sigma(Channel::Temperature), 0.04);
        assert_eq!(norm.sigma(Channel::Choke), 0.0);
    }

    #[test]
    fn accuracy_conversion_halves_then_scales() {
        let s = ramp_series(50);
        let norm = fit_normalizer_with_accuracy(&s, [2.0, 1.0, 1.0, 1.0, 4.0, 0.0]).unwrap();
        let r = norm.scale(Channel::FlowRate).range;
        assert!((norm.sigma(Channel::FlowRate) - 1.0 / r).abs() < 1e-15);
    }

    #[test]
    fn constant_channel_rejected() {
        let ts = (0..3)
            .map(|i| t0() + chrono::Duration::minutes(10 * i))
            .collect();
        let cols: [Vec<f64>; 6] = std::array::from_fn(|c| {
            if c == 2 {
                vec![5.0; 3]
            } else {
                vec![0.0, 0.5, 1.0]
            }
        });
        let s = RawSeries::new(ts, cols).unwrap();
        assert!(matches!(fit_normalizer(&s), Err(Error::ConstantChannel("thp_2"))));
    }

    #[test]
    fn normalized_reference_in_unit_interval_and_roundtrip() {
        let s = ramp_series(200);
        let norm = fit_normalizer(&s).unwrap();
        let n = norm.normalize(&s).unwrap();
        for ch in Channel::ALL {
            assert!(n.column(ch).iter().all(|v| (0.0..=1.0).contains(v)));
        }
        let back = norm.denormalize(&n).unwrap();
        for ch in Channel::ALL {
            for (a, b) in s.column(ch).iter().zip(back.column(ch)) {
                assert!((a - b).abs() <= 1e-12 * a.abs().max(1e-300));
            }
        }
        assert!(norm.normalize(&n).is_err());
        assert!(norm.denormalize(&s).is_err());
    }

    #[test]
    fn normalizer_json_shape() {
        let norm = fit_normalizer(&ramp_series(40)).unwrap();
        let v: serde_json::Value = serde_json::to_value(&norm).unwrap();
        assert!(v["flow_rate"]["offset"].is_number());
        assert!(v["choke"]["sigma_scaled"].is_number());
        let back: Normalizer = serde_json::from_value(v.clone()).unwrap();
        assert_eq!(back, norm);
        let mut broken = v;
        broken.as_object_mut().unwrap().remove("thp_3");
        assert!(serde_json::from_value::<Normalizer>(broken).is_err());
    }

    #[test]
    fn window_counts_and_alignment() {
        let s = ramp_series(37);
        let w = make_windows(&s, 36).unwrap();
        assert_eq!(w.len(), 1);
        let s36 = ramp_series(36);
        assert!(matches!(make_windows(&s36, 36), Err(Error::TooShort { .. })));

        let s = ramp_series(100);
        let batch = make_windows(&s, 36).unwrap();
        assert_eq!(batch.len(), 64);
        let win = batch.get(10);
        let n = batch.anchor(10);
        assert_eq!(win.u_hist[0], s.value(Channel::Choke, n + 1));
        assert_eq!(win.u_hist[35], s.value(Channel::Choke, n - 34));
        assert_eq!(win.q_hist[0], s.value(Channel::FlowRate, n));
        assert_eq!(win.q_hist[35], s.value(Channel::FlowRate, n - 35));
        assert_eq!(win.theta_hist[3][1], s.value(Channel::Thp2, n - 3));
        assert_eq!(win.target, s.value(Channel::FlowRate, n + 1));
    }

    #[test]
    fn perturbation_properties() {
        let s = ramp_series(60);
        let norm = fit_normalizer(&s).unwrap();
        let ns = norm.normalize(&s).unwrap();
        let win = make_windows(&ns, 36).unwrap().get(3);

        let zero = norm.with_sigmas([0.0; 6]);
        let mut rng = substream(1, Stream::DataNoise);
        assert_eq!(perturb_window(&win, &zero, &mut rng), win);

        let mut rng = substream(1, Stream::DataNoise);
        let p = perturb_window(&win, &norm, &mut rng);
        assert_eq!(p.u_hist, win.u_hist);
        assert_eq!(p.target, win.target);
        assert_ne!(p.q_hist, win.q_hist);

        let mut rng2 = substream(1, Stream::DataNoise);
        assert_eq!(perturb_window(&win, &norm, &mut rng2), p);
    }

    #[test]
    fn perturbation_mean_converges() {
        // constant window, 1e5 draws; mean within 5 sigma / sqrt(1e5)
        let w = 36;
        let win = Window {
            q_hist: vec![0.4; w],
            theta_hist: vec![[0.2, 0.3, 0.5, 0.7]; w],
            u_hist: vec![0.6; w],
            target: 0.4,
        };
        let norm = Normalizer::identity(DEFAULT_SIGMA_SCALED);
        let mut rng = substream(99, Stream::DataNoise);
        let draws = 100_000;
        let mut sum_q = 0.0;
        let mut sum_t = 0.0;
        for _ in 0..draws {
            let p = perturb_window(&win, &norm, &mut rng);
            sum_q += p.q_hist[17];
            sum_t += p.theta_hist[5][3];
        }
        let tol_q = 5.0 * 0.003 / (draws as f64).sqrt();
        let tol_t = 5.0 * 0.04 / (draws as f64).sqrt();
        assert!((sum_q / draws as f64 - 0.4).abs() < tol_q);
        assert!((sum_t / draws as f64 - 0.7).abs() < tol_t);
    }
}
