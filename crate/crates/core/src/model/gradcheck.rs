use rand::seq::index::sample;
use rand::Rng;

use super::net::{loss_and_gradients, predict, InputBatch};
use super::ModelWeights;
use crate::data::Window;
use crate::error::{Error, Result};

/// Central-difference step.
pub const FD_STEP: f64 = 1e-5;

/// Denominator floor for the relative error, so parameters whose gradient has
/// vanished are compared on an absolute scale.
pub const REL_ERROR_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_error: f64,
    /// Flat parameter index of the worst mismatch.
    pub worst_param: usize,
    pub tolerance: f64,
    pub passed: bool,
}

fn window_loss(weights: &ModelWeights, batch: &InputBatch, target: f64) -> Result<f64> {
    let y = predict(weights, batch, None)?[0];
    Ok((y - target) * (y - target))
}

/// Compares the BPTT gradient of the squared error on `window` against
/// central finite differences on `samples` randomly chosen parameters.
pub fn gradient_check<R: Rng + ?Sized>(
    weights: &ModelWeights,
    window: &Window,
    tolerance: f64,
    samples: usize,
    rng: &mut R,
) -> Result<GradCheckReport> {
    let batch = InputBatch::from_windows(std::slice::from_ref(window))?;
    let (_, analytic) = loss_and_gradients(weights, &batch, &[window.target])?;
    check_gradients(weights, window, &analytic, tolerance, samples, rng)
}

/// Finite-difference comparison against a caller-supplied gradient.
pub fn check_gradients<R: Rng + ?Sized>(
    weights: &ModelWeights,
    window: &Window,
    analytic: &ModelWeights,
    tolerance: f64,
    samples: usize,
    rng: &mut R,
) -> Result<GradCheckReport> {
    let batch = InputBatch::from_windows(std::slice::from_ref(window))?;
    let total = weights.param_count();
    if analytic.param_count() != total {
        return Err(Error::Shape("gradient layout differs from weights".into()));
    }
    let picks = sample(rng, total, samples.min(total));
    let mut probe = weights.clone();
    let mut worst = (0.0f64, 0usize);
    for idx in picks.iter() {
        let base = weights.param(idx);
        probe.set_param(idx, base + FD_STEP);
        let up = window_loss(&probe, &batch, window.target)?;
        probe.set_param(idx, base - FD_STEP);
        let down = window_loss(&probe, &batch, window.target)?;
        probe.set_param(idx, base);
        let numeric = (up - down) / (2.0 * FD_STEP);
        let exact = analytic.param(idx);
        let denom = exact.abs().max(numeric.abs()).max(REL_ERROR_FLOOR);
        let rel = (exact - numeric).abs() / denom;
        if rel > worst.0 || !rel.is_finite() {
            worst = (rel, idx);
        }
    }
    Ok(GradCheckReport {
        checked: picks.len(),
        max_rel_error: worst.0,
        worst_param: worst.1,
        tolerance,
        passed: worst.0 < tolerance,
    })
}

#[cfg(test)]
mod tests {
    use super::super::tests::{random_window, small_config};
    use super::*;
    use crate::model::build_model;
    use crate::rng::{substream, Stream};

    #[test]
    fn analytic_gradients_match_finite_differences() {
        let cfg = small_config();
        let w = build_model(&cfg, &mut substream(21, Stream::Init)).unwrap();
        let mut rng = substream(21, Stream::DataNoise);
        for _ in 0..3 {
            let win = random_window(cfg.window, &mut rng);
            let report = gradient_check(&w, &win, 1e-4, 150, &mut rng).unwrap();
            assert_eq!(report.checked, 150);
            assert!(report.passed, "{report:?}");
        }
    }

    #[test]
    fn corrupted_gradient_is_flagged() {
        let cfg = small_config();
        let w = build_model(&cfg, &mut substream(22, Stream::Init)).unwrap();
        let mut rng = substream(22, Stream::DataNoise);
        let win = random_window(cfg.window, &mut rng);
        let batch = InputBatch::from_windows(std::slice::from_ref(&win)).unwrap();
        let (_, mut grad) = loss_and_gradients(&w, &batch, &[win.target]).unwrap();
        for t in grad.tensors_mut() {
            t.iter_mut().for_each(|g| *g *= 1.1);
        }
        let report = check_gradients(&w, &win, &grad, 1e-4, 120, &mut rng).unwrap();
        assert!(!report.passed);
        assert!(report.max_rel_error > 1e-2, "{report:?}");
    }
}
