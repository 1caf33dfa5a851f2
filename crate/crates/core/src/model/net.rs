//! Batched forward pass and backpropagation through time.

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array1, Array2, Axis};
use rand::Rng;
use rand_distr::StandardNormal;

use super::{activation, LstmLayer, ModelWeights};
use crate::data::Window;
use crate::error::{Error, Result};

/// Features per time step: flow, three THPs, temperature, choke.
pub const FEATURES: usize = 6;
const CHOKE_FEATURE: usize = 5;

/// Time-major model inputs: `steps[t]` is a `batch x FEATURES` matrix, oldest
/// step first.
#[derive(Debug, Clone, PartialEq)]
pub struct InputBatch {
    steps: Vec<Array2<f64>>,
}

impl InputBatch {
    pub fn from_windows(windows: &[Window]) -> Result<InputBatch> {
        let first = windows
            .first()
            .ok_or_else(|| Error::Empty("window batch".into()))?;
        let width = first.width();
        let mut steps = vec![Array2::zeros((windows.len(), FEATURES)); width];
        for (r, w) in windows.iter().enumerate() {
            w.check()?;
            if w.width() != width {
                return Err(Error::Shape("windows of differing widths".into()));
            }
            for (t, step) in steps.iter_mut().enumerate() {
                let k = width - 1 - t;
                let mut row = step.row_mut(r);
                row[0] = w.q_hist[k];
                for j in 0..4 {
                    row[1 + j] = w.theta_hist[k][j];
                }
                row[CHOKE_FEATURE] = w.u_hist[k];
            }
        }
        Ok(InputBatch { steps })
    }

    /// Ensemble layout: per-row flow histories (`batch x width`, column 0 most
    /// recent) sharing one measured theta and choke history.
    pub fn from_shared(q_hists: &Array2<f64>, theta_hist: &[[f64; 4]], u_hist: &[f64]) -> Result<InputBatch> {
        let (batch, width) = q_hists.dim();
        if theta_hist.len() != width || u_hist.len() != width {
            return Err(Error::Shape(format!(
                "history lengths {}/{} do not match flow width {width}",
                theta_hist.len(),
                u_hist.len()
            )));
        }
        let steps = (0..width)
            .map(|t| {
                let k = width - 1 - t;
                let mut step = Array2::zeros((batch, FEATURES));
                for (r, mut row) in step.rows_mut().into_iter().enumerate() {
                    row[0] = q_hists[[r, k]];
                    for j in 0..4 {
                        row[1 + j] = theta_hist[k][j];
                    }
                    row[CHOKE_FEATURE] = u_hist[k];
                }
                step
            })
            .collect();
        Ok(InputBatch { steps })
    }

    pub fn batch_size(&self) -> usize {
        self.steps.first().map_or(0, |s| s.nrows())
    }

    pub fn width(&self) -> usize {
        self.steps.len()
    }

    /// Adds `N(0, sigma)` to the flow and theta features; choke stays exact.
    pub fn add_input_noise<R: Rng + ?Sized>(&mut self, sigma: f64, rng: &mut R) {
        if sigma == 0.0 {
            return;
        }
        for step in &mut self.steps {
            for mut row in step.rows_mut() {
                for v in row.iter_mut().take(CHOKE_FEATURE) {
                    let z: f64 = rng.sample(StandardNormal);
                    *v += sigma * z;
                }
            }
        }
    }
}

fn check_inputs(weights: &ModelWeights, inputs: &InputBatch) -> Result<()> {
    if inputs.width() != weights.window() {
        return Err(Error::Shape(format!(
            "input width {} does not match model window {}",
            inputs.width(),
            weights.window()
        )));
    }
    if inputs.batch_size() == 0 {
        return Err(Error::Empty("input batch".into()));
    }
    Ok(())
}

/// Applies gate nonlinearities to `z` in place (pre-activations without bias
/// on entry, activated gates on exit) and advances `c` and `h`.
fn cell_update(z: &mut Array2<f64>, bias: &Array1<f64>, c: &mut Array2<f64>, h: &mut Array2<f64>) {
    let hd = c.ncols();
    let b = bias.as_slice().expect("standard layout");
    for ((mut zr, mut cr), mut hr) in z.rows_mut().into_iter().zip(c.rows_mut()).zip(h.rows_mut()) {
        let zr = zr.as_slice_mut().expect("standard layout");
        let cr = cr.as_slice_mut().expect("standard layout");
        let hr = hr.as_slice_mut().expect("standard layout");
        for (v, b) in zr.iter_mut().zip(b) {
            *v += b;
        }
        let (ifg, o) = zr.split_at_mut(3 * hd);
        let (if_, g) = ifg.split_at_mut(2 * hd);
        activation::sigmoid_in_place(if_);
        activation::tanh_in_place(g);
        activation::sigmoid_in_place(o);
        let (i, f) = if_.split_at(hd);
        for j in 0..hd {
            let cn = f[j] * cr[j] + i[j] * g[j];
            cr[j] = cn;
            hr[j] = cn;
        }
        activation::tanh_in_place(hr);
        for (hv, ov) in hr.iter_mut().zip(o.iter()) {
            *hv *= ov;
        }
    }
}

/// Input and recurrent kernels stacked row-wise, so a single product of
/// `[x | h]` gives the gate pre-activations.
struct StackedLayer<'a> {
    kernel: Array2<f64>,
    bias: &'a Array1<f64>,
    xh: Array2<f64>,
}

impl<'a> StackedLayer<'a> {
    fn new(layer: &'a LstmLayer, batch: usize) -> Self {
        let kernel = ndarray::concatenate(Axis(0), &[layer.kernel.view(), layer.recurrent.view()])
            .expect("kernel and recurrent share the gate dimension");
        let xh = Array2::zeros((batch, kernel.nrows()));
        StackedLayer {
            kernel,
            bias: &layer.bias,
            xh,
        }
    }

    fn step(&mut self, x: &Array2<f64>, z: &mut Array2<f64>, c: &mut Array2<f64>, h: &mut Array2<f64>) {
        let nx = x.ncols();
        self.xh.slice_mut(s![.., ..nx]).assign(x);
        self.xh.slice_mut(s![.., nx..]).assign(h);
        general_mat_mul(1.0, &self.xh, &self.kernel, 0.0, z);
        cell_update(z, self.bias, c, h);
    }
}

struct HeadTrace {
    h: Array2<f64>,
    p: Array2<f64>,
    s: Array2<f64>,
    y: Array1<f64>,
}

fn head_forward(weights: &ModelWeights, h: Array2<f64>, bias: Option<&[f64]>) -> HeadTrace {
    let alpha = &weights.prelu_alpha;
    let mut p = h.clone();
    for mut row in p.rows_mut() {
        for (v, a) in row.iter_mut().zip(alpha.iter()) {
            if *v <= 0.0 {
                *v *= a;
            }
        }
    }
    let mut s = p.dot(&weights.dense_kernel);
    s += &weights.dense_bias;
    s.mapv_inplace(activation::sigmoid);
    let logits = s.dot(&weights.out_kernel);
    let y = match bias {
        Some(b) => Array1::from_iter(logits.iter().zip(b).map(|(z, b)| activation::sigmoid(z + b))),
        None => logits.mapv(|z| activation::sigmoid(z + weights.bias())),
    };
    HeadTrace { h, p, s, y }
}

/// Inference without caches.
pub(crate) fn predict(weights: &ModelWeights, inputs: &InputBatch, bias: Option<&[f64]>) -> Result<Vec<f64>> {
    check_inputs(weights, inputs)?;
    let batch = inputs.batch_size();
    if let Some(b) = bias {
        if b.len() != batch {
            return Err(Error::Shape(format!(
                "{} bias overrides for batch of {batch}",
                b.len()
            )));
        }
    }
    let hd = weights.config.lstm_units;
    let layers = weights.lstm.len();
    let mut hs = vec![Array2::<f64>::zeros((batch, hd)); layers];
    let mut cs = vec![Array2::<f64>::zeros((batch, hd)); layers];
    let mut stacked: Vec<_> = weights.lstm.iter().map(|l| StackedLayer::new(l, batch)).collect();
    let mut z = Array2::<f64>::zeros((batch, 4 * hd));
    for x0 in &inputs.steps {
        for (l, layer) in stacked.iter_mut().enumerate() {
            let (below, rest) = hs.split_at_mut(l);
            let x = if l == 0 { x0 } else { &below[l - 1] };
            layer.step(x, &mut z, &mut cs[l], &mut rest[0]);
        }
    }
    let top = hs.pop().expect("at least one layer");
    Ok(head_forward(weights, top, bias).y.to_vec())
}

struct LayerTrace {
    gates: Vec<Array2<f64>>,
    c: Vec<Array2<f64>>,
    h: Vec<Array2<f64>>,
}

fn forward_traced(weights: &ModelWeights, inputs: &InputBatch) -> (Vec<LayerTrace>, HeadTrace) {
    let batch = inputs.batch_size();
    let hd = weights.config.lstm_units;
    let width = inputs.width();
    let mut traces: Vec<LayerTrace> = Vec::with_capacity(weights.lstm.len());
    for (l, layer) in weights.lstm.iter().enumerate() {
        let mut trace = LayerTrace {
            gates: Vec::with_capacity(width),
            c: Vec::with_capacity(width),
            h: Vec::with_capacity(width),
        };
        let mut stacked = StackedLayer::new(layer, batch);
        let mut c = Array2::<f64>::zeros((batch, hd));
        let mut h = Array2::<f64>::zeros((batch, hd));
        for t in 0..width {
            let x = if l == 0 {
                &inputs.steps[t]
            } else {
                &traces[l - 1].h[t]
            };
            let mut z = Array2::<f64>::zeros((batch, 4 * hd));
            stacked.step(x, &mut z, &mut c, &mut h);
            trace.gates.push(z);
            trace.c.push(c.clone());
            trace.h.push(h.clone());
        }
        traces.push(trace);
    }
    let top = traces.last().expect("at least one layer").h[width - 1].clone();
    let head = head_forward(weights, top, None);
    (traces, head)
}

/// Mean-squared-error loss over the batch and its gradient with respect to
/// every parameter.
pub fn loss_and_gradients(weights: &ModelWeights, inputs: &InputBatch, targets: &[f64]) -> Result<(f64, ModelWeights)> {
    check_inputs(weights, inputs)?;
    let batch = inputs.batch_size();
    if targets.len() != batch {
        return Err(Error::LengthMismatch {
            left: targets.len(),
            right: batch,
        });
    }
    let (traces, head) = forward_traced(weights, inputs);
    let mut grad = ModelWeights::zeros(&weights.config);
    let n = batch as f64;
    let loss = head
        .y
        .iter()
        .zip(targets)
        .map(|(y, t)| (y - t) * (y - t))
        .sum::<f64>()
        / n;

    // output unit
    let dlogit = Array1::from_iter(
        head.y
            .iter()
            .zip(targets)
            .map(|(y, t)| 2.0 * (y - t) / n * y * (1.0 - y)),
    );
    grad.out_bias = dlogit.sum();
    grad.out_kernel = head.s.t().dot(&dlogit);

    // sigmoid dense layer
    let mut da = Array2::<f64>::zeros(head.s.dim());
    for ((mut row, s_row), d) in da.rows_mut().into_iter().zip(head.s.rows()).zip(dlogit.iter()) {
        for ((v, s), w) in row.iter_mut().zip(s_row.iter()).zip(weights.out_kernel.iter()) {
            *v = d * w * s * (1.0 - s);
        }
    }
    grad.dense_kernel = head.p.t().dot(&da);
    grad.dense_bias = da.sum_axis(Axis(0));

    // PReLU
    let mut dh_top = da.dot(&weights.dense_kernel.t());
    for (mut dp_row, h_row) in dh_top.rows_mut().into_iter().zip(head.h.rows()) {
        for (j, (dp, h)) in dp_row.iter_mut().zip(h_row.iter()).enumerate() {
            if *h <= 0.0 {
                grad.prelu_alpha[j] += *dp * h;
                *dp *= weights.prelu_alpha[j];
            }
        }
    }

    let width = inputs.width();
    let layers = weights.lstm.len();
    let hd = weights.config.lstm_units;
    let mut dh_in: Vec<Option<Array2<f64>>> = vec![None; width];
    dh_in[width - 1] = Some(dh_top);

    for l in (0..layers).rev() {
        let layer = &weights.lstm[l];
        let trace = &traces[l];
        let g = &mut grad.lstm[l];
        let want_dx = l > 0;
        let mut dx_seq: Vec<Option<Array2<f64>>> = vec![None; width];
        let mut dh_rec = Array2::<f64>::zeros((batch, hd));
        let mut dc_rec = Array2::<f64>::zeros((batch, hd));
        let mut dz = Array2::<f64>::zeros((batch, 4 * hd));
        for t in (0..width).rev() {
            let gates = &trace.gates[t];
            let c = &trace.c[t];
            for r in 0..batch {
                for j in 0..hd {
                    let dh = dh_rec[[r, j]] + dh_in[t].as_ref().map_or(0.0, |d| d[[r, j]]);
                    let i = gates[[r, j]];
                    let f = gates[[r, hd + j]];
                    let gg = gates[[r, 2 * hd + j]];
                    let o = gates[[r, 3 * hd + j]];
                    let ct = c[[r, j]];
                    let c_prev = if t > 0 { trace.c[t - 1][[r, j]] } else { 0.0 };
                    let tc = activation::tanh(ct);
                    let dc = dc_rec[[r, j]] + dh * o * (1.0 - tc * tc);
                    dz[[r, j]] = dc * gg * i * (1.0 - i);
                    dz[[r, hd + j]] = dc * c_prev * f * (1.0 - f);
                    dz[[r, 2 * hd + j]] = dc * i * (1.0 - gg * gg);
                    dz[[r, 3 * hd + j]] = dh * tc * o * (1.0 - o);
                    dc_rec[[r, j]] = dc * f;
                }
            }
            let x = if l == 0 {
                &inputs.steps[t]
            } else {
                &traces[l - 1].h[t]
            };
            general_mat_mul(1.0, &x.t(), &dz, 1.0, &mut g.kernel);
            if t > 0 {
                general_mat_mul(1.0, &trace.h[t - 1].t(), &dz, 1.0, &mut g.recurrent);
            }
            g.bias += &dz.sum_axis(Axis(0));
            if want_dx {
                dx_seq[t] = Some(dz.dot(&layer.kernel.t()));
            }
            general_mat_mul(1.0, &dz, &layer.recurrent.t(), 0.0, &mut dh_rec);
        }
        dh_in = dx_seq;
    }
    Ok((loss, grad))
}
