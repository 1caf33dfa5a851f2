//! Gaussian divergences, the Shapiro-Wilk normality test and trace summaries.

use std::collections::HashMap;
use std::f64::consts::PI;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GaussianSummary {
    pub mu: f64,
    pub sigma: f64,
}

impl GaussianSummary {
    pub fn new(mu: f64, sigma: f64) -> Self {
        GaussianSummary { mu, sigma }
    }
}

/// Sample mean and standard deviation (n - 1 denominator).
pub fn fit_gaussian(samples: &[f64]) -> Result<GaussianSummary> {
    let (mu, sigma) = mean_sd(samples)?;
    if !(sigma > 0.0) {
        return Err(Error::Degenerate("zero sample variance".into()));
    }
    Ok(GaussianSummary { mu, sigma })
}

/// Mean and (n - 1) standard deviation, allowing zero spread.
pub fn mean_sd(samples: &[f64]) -> Result<(f64, f64)> {
    if samples.len() < 2 {
        return Err(Error::Degenerate(format!(
            "{} samples, need at least 2",
            samples.len()
        )));
    }
    if samples.iter().any(|v| !v.is_finite()) {
        return Err(Error::Degenerate("non-finite sample".into()));
    }
    let n = samples.len() as f64;
    let mu = samples.iter().sum::<f64>() / n;
    let ss = samples.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>();
    Ok((mu, (ss / (n - 1.0)).sqrt()))
}

fn check_sigma(s: f64) -> Result<()> {
    if s.is_finite() && s >= 0.0 {
        Ok(())
    } else {
        Err(Error::NonPositiveSigma(s))
    }
}

fn check_pair(p: &GaussianSummary, q: &GaussianSummary) -> Result<()> {
    check_sigma(p.sigma)?;
    check_sigma(q.sigma)?;
    if !(p.mu.is_finite() && q.mu.is_finite()) {
        return Err(Error::Degenerate("non-finite mean".into()));
    }
    Ok(())
}

/// Closed-form `KL(P || Q)` between univariate Gaussians:
/// `ln(sq / sp) + (sp^2 + (mp - mq)^2) / (2 sq^2) - 1/2`.
///
/// A zero sigma on either side gives `+inf` unless the two distributions are
/// identical.
pub fn gaussian_kl(p: &GaussianSummary, q: &GaussianSummary) -> Result<f64> {
    check_pair(p, q)?;
    if p.sigma == 0.0 || q.sigma == 0.0 {
        return Ok(if p == q { 0.0 } else { f64::INFINITY });
    }
    let d = p.mu - q.mu;
    Ok((q.sigma / p.sigma).ln() + (p.sigma * p.sigma + d * d) / (2.0 * q.sigma * q.sigma) - 0.5)
}

/// Jeffreys' J-divergence, `KL(P || Q) + KL(Q || P)`.
///
/// The log terms of the two directions cancel, leaving
/// `(sp/sq - sq/sp)^2 / 2 + (mp - mq)^2 (1/sp^2 + 1/sq^2) / 2`, which is
/// evaluated directly; every operation is symmetric in `p` and `q`.
pub fn jeffreys_j(p: &GaussianSummary, q: &GaussianSummary) -> Result<f64> {
    check_pair(p, q)?;
    if p.sigma == 0.0 || q.sigma == 0.0 {
        return Ok(gaussian_kl(p, q)? + gaussian_kl(q, p)?);
    }
    let ratio = p.sigma / q.sigma - q.sigma / p.sigma;
    let d = p.mu - q.mu;
    let precision = 1.0 / (p.sigma * p.sigma) + 1.0 / (q.sigma * q.sigma);
    Ok(0.5 * (ratio * ratio) + 0.5 * (d * d) * precision)
}

/// Element-wise J-divergence of predictive distributions against measurement
/// distributions.
pub fn divergence_trace(pred: &[GaussianSummary], meas: &[GaussianSummary]) -> Result<Vec<f64>> {
    if pred.len() != meas.len() {
        return Err(Error::LengthMismatch {
            left: pred.len(),
            right: meas.len(),
        });
    }
    pred.iter().zip(meas).map(|(p, m)| jeffreys_j(p, m)).collect()
}

/// Median; the mean of the two central order statistics for even counts.
pub fn median_j(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::Empty("divergence trace".into()));
    }
    if values.iter().any(|v| v.is_nan()) {
        return Err(Error::Degenerate("NaN in divergence trace".into()));
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Ok(if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    })
}

pub fn mean(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::Empty("values".into()));
    }
    Ok(values.iter().sum::<f64>() / values.len() as f64)
}

// Royston (1992/1995) approximation coefficients for the Shapiro-Wilk test,
// as in algorithm AS R94. Polynomials are evaluated lowest order first.
const C1: [f64; 6] = [0.0, 0.221157, -0.147981, -2.071190, 4.434685, -2.706056];
const C2: [f64; 6] = [0.0, 0.042981, -0.293762, -1.752461, 5.682633, -3.582633];
const G: [f64; 2] = [-2.273, 0.459];
const C3: [f64; 4] = [0.5440, -0.39978, 0.025054, -6.714e-4];
const C4: [f64; 4] = [1.3822, -0.77857, 0.062767, -0.0020322];
const C5: [f64; 4] = [-1.5861, -0.31082, -0.083751, 0.0038915];
const C6: [f64; 3] = [-0.4803, -0.082676, 0.0030302];

fn poly(c: &[f64], x: f64) -> f64 {
    c.iter().rev().fold(0.0, |acc, &k| acc * x + k)
}

pub const SW_MIN_N: usize = 3;
pub const SW_MAX_N: usize = 5000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SwResult {
    pub w: f64,
    pub p_value: f64,
}

/// Shapiro-Wilk coefficients for one sample size.
#[derive(Debug, Clone)]
pub struct ShapiroWilk {
    /// Antisymmetric weights for the ordered sample, upper half positive.
    a: Vec<f64>,
}

impl ShapiroWilk {
    pub fn new(n: usize) -> Result<ShapiroWilk> {
        if !(SW_MIN_N..=SW_MAX_N).contains(&n) {
            return Err(Error::SampleSize(n));
        }
        let mut a = vec![0.0; n];
        let half = n / 2;
        if n == 3 {
            a[2] = 0.5f64.sqrt();
            a[0] = -a[2];
            return Ok(ShapiroWilk { a });
        }
        let std_normal = Normal::standard();
        let nf = n as f64;
        // expected normal order statistics, upper half
        let m: Vec<f64> = (0..n)
            .map(|i| std_normal.inverse_cdf((i as f64 + 1.0 - 0.375) / (nf + 0.25)))
            .collect();
        let summ2: f64 = m.iter().map(|v| v * v).sum();
        let ssumm2 = summ2.sqrt();
        let u = 1.0 / nf.sqrt();
        let an = m[n - 1] / ssumm2 + poly(&C1, u);
        let (first, eps) = if n > 5 {
            let an1 = m[n - 2] / ssumm2 + poly(&C2, u);
            a[n - 2] = an1;
            let eps = (summ2 - 2.0 * m[n - 1].powi(2) - 2.0 * m[n - 2].powi(2))
                / (1.0 - 2.0 * an * an - 2.0 * an1 * an1);
            (2, eps)
        } else {
            let eps = (summ2 - 2.0 * m[n - 1].powi(2)) / (1.0 - 2.0 * an * an);
            (1, eps)
        };
        a[n - 1] = an;
        let fac = eps.sqrt();
        for i in half..n - first {
            a[i] = m[i] / fac;
        }
        for i in 0..half {
            a[i] = -a[n - 1 - i];
        }
        if n % 2 == 1 {
            a[half] = 0.0;
        }
        Ok(ShapiroWilk { a })
    }

    pub fn n(&self) -> usize {
        self.a.len()
    }

    pub fn test(&self, samples: &[f64]) -> Result<SwResult> {
        let n = self.a.len();
        if samples.len() != n {
            return Err(Error::LengthMismatch {
                left: samples.len(),
                right: n,
            });
        }
        if samples.iter().any(|v| !v.is_finite()) {
            return Err(Error::Degenerate("non-finite sample".into()));
        }
        let mut x = samples.to_vec();
        x.sort_by(f64::total_cmp);
        if x[n - 1] - x[0] <= 0.0 {
            return Err(Error::Degenerate("all samples identical".into()));
        }
        let mean = x.iter().sum::<f64>() / n as f64;
        let ss: f64 = x.iter().map(|v| (v - mean) * (v - mean)).sum();
        let num: f64 = self.a.iter().zip(&x).map(|(a, v)| a * (v - mean)).sum();
        let w = (num * num / ss).min(1.0);
        Ok(SwResult {
            w,
            p_value: sw_p_value(w, n),
        })
    }
}

fn sw_p_value(w: f64, n: usize) -> f64 {
    if n == 3 {
        let p = 6.0 / PI * (w.sqrt().asin() - (0.75f64).sqrt().asin());
        return p.clamp(0.0, 1.0);
    }
    let nf = n as f64;
    let mut y = (1.0 - w).ln();
    let (m, s) = if n <= 11 {
        let gamma = poly(&G, nf);
        if y >= gamma {
            return 1e-99;
        }
        y = -(gamma - y).ln();
        (poly(&C3, nf), poly(&C4, nf).exp())
    } else {
        let ln_n = nf.ln();
        (poly(&C5, ln_n), poly(&C6, ln_n).exp())
    };
    if w >= 1.0 {
        return 1.0;
    }
    Normal::standard().sf((y - m) / s).clamp(0.0, 1.0)
}

/// Shapiro-Wilk W statistic and its p-value.
pub fn shapiro_wilk(samples: &[f64]) -> Result<SwResult> {
    ShapiroWilk::new(samples.len())?.test(samples)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalityReport {
    pub steps: Vec<SwResult>,
    pub alpha: f64,
    pub rejections: usize,
}

impl NormalityReport {
    /// Rebuilds the rejection count at another level.
    pub fn from_results(steps: Vec<SwResult>, alpha: f64) -> NormalityReport {
        let rejections = steps.iter().filter(|r| r.p_value < alpha).count();
        NormalityReport {
            steps,
            alpha,
            rejections,
        }
    }
}

/// Shapiro-Wilk test per step; counts steps with `p < alpha`.
pub fn normality_scan<S: AsRef<[f64]>>(per_step: &[S], alpha: f64) -> Result<NormalityReport> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Config(format!("alpha {alpha} outside [0, 1]")));
    }
    let mut cache: HashMap<usize, ShapiroWilk> = HashMap::new();
    let mut steps = Vec::with_capacity(per_step.len());
    for samples in per_step {
        let samples = samples.as_ref();
        let n = samples.len();
        let sw = match cache.get(&n) {
            Some(sw) => sw,
            None => {
                let sw = ShapiroWilk::new(n)?;
                cache.entry(n).or_insert(sw)
            }
        };
        steps.push(sw.test(samples)?);
    }
    Ok(NormalityReport::from_results(steps, alpha))
}
