use rand::Rng;

use super::net::{predict, InputBatch};
use super::ModelWeights;
use crate::data::{perturb_in_place, Normalizer, Window};
use crate::error::{Error, Result};

/// Monte Carlo predictive samples: `n` forward passes over independently
/// perturbed copies of `window`.
pub fn predict_mc<R: Rng + ?Sized>(
    window: &Window,
    weights: &ModelWeights,
    norm: &Normalizer,
    n: usize,
    rng: &mut R,
) -> Result<Vec<f64>> {
    if n < 2 {
        return Err(Error::Config(format!("Monte Carlo sample count {n} < 2")));
    }
    window.check()?;
    let copies: Vec<Window> = (0..n)
        .map(|_| {
            let mut w = window.clone();
            perturb_in_place(&mut w, norm, rng);
            w
        })
        .collect();
    let inputs = InputBatch::from_windows(&copies)?;
    predict(weights, &inputs, None)
}
