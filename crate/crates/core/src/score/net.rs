//! Fully connected score network with a sinusoidal time embedding and
//! hand-written backpropagation.
//!
//! Input is `(x, sin(π k τ), cos(π k τ))` for `k = 1..=8` with
//! `τ = B(t)/B(T)`. Hidden layers use SiLU. With output scaling enabled the
//! raw output is divided by `√(1 - e^{-B(t)})`, the standard deviation of the
//! unit-metric kernel. Parameters live in one flat vector; each layer stores
//! its weight matrix column-major followed by its bias.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DMatrixView};
use rand::Rng;

use crate::error::{check_dim, Error, Result};
use crate::rng::normal;
use crate::sde::TimeSchedule;

use super::ScoreFunction;

pub const TIME_FREQUENCIES: usize = 8;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScoreNetArch {
    pub dim: usize,
    pub hidden: Vec<usize>,
    pub output_scaling: bool,
}

impl ScoreNetArch {
    pub fn new(dim: usize, hidden: Vec<usize>, output_scaling: bool) -> Result<Self> {
        if dim == 0 || hidden.contains(&0) {
            return Err(Error::Invalid("network widths must be positive".into()));
        }
        Ok(Self {
            dim,
            hidden,
            output_scaling,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.dim + 2 * TIME_FREQUENCIES
    }

    /// `(fan_out, fan_in)` per layer.
    pub fn layer_shapes(&self) -> Vec<(usize, usize)> {
        let mut shapes = Vec::with_capacity(self.hidden.len() + 1);
        let mut fan_in = self.input_dim();
        for &h in &self.hidden {
            shapes.push((h, fan_in));
            fan_in = h;
        }
        shapes.push((self.dim, fan_in));
        shapes
    }

    pub fn n_params(&self) -> usize {
        self.layer_shapes().iter().map(|(o, i)| o * i + o).sum()
    }
}

#[inline]
fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

#[inline]
fn silu(z: f64) -> f64 {
    z * sigmoid(z)
}

#[inline]
fn silu_prime(z: f64) -> f64 {
    let s = sigmoid(z);
    s * (1.0 + z * (1.0 - s))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreNet {
    arch: ScoreNetArch,
    schedule: TimeSchedule,
    params: Vec<f64>,
}

struct Tape {
    /// Input to each layer.
    inputs: Vec<DMatrix<f64>>,
    /// Pre-activations of the hidden layers.
    pre: Vec<DMatrix<f64>>,
    scales: Vec<f64>,
}

impl ScoreNet {
    /// He-normal weights, zero biases.
    pub fn new<R: Rng + ?Sized>(arch: ScoreNetArch, schedule: TimeSchedule, rng: &mut R) -> Self {
        let mut params = Vec::with_capacity(arch.n_params());
        for (o, i) in arch.layer_shapes() {
            let std = (2.0 / i as f64).sqrt();
            params.extend((0..o * i).map(|_| std * normal(rng)));
            params.extend(std::iter::repeat_n(0.0, o));
        }
        Self { arch, schedule, params }
    }

    pub fn zeros(arch: ScoreNetArch, schedule: TimeSchedule) -> Self {
        let n = arch.n_params();
        Self {
            arch,
            schedule,
            params: vec![0.0; n],
        }
    }

    pub fn from_params(arch: ScoreNetArch, schedule: TimeSchedule, params: Vec<f64>) -> Result<Self> {
        check_dim("score network parameters", arch.n_params(), params.len())?;
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::NonFinite("score network parameters"));
        }
        Ok(Self { arch, schedule, params })
    }

    pub fn arch(&self) -> &ScoreNetArch {
        &self.arch
    }

    pub fn schedule(&self) -> &TimeSchedule {
        &self.schedule
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn output_scale(&self, t: f64) -> f64 {
        if self.arch.output_scaling {
            let b = self.schedule.integral_unchecked(t.max(0.0));
            1.0 / (-(-b).exp_m1()).sqrt()
        } else {
            1.0
        }
    }

    fn embed_into(&self, x: &[f64], t: f64, col: &mut [f64]) {
        let d = self.arch.dim;
        col[..d].copy_from_slice(x);
        let h = self.schedule.horizon;
        let tau = self.schedule.integral_unchecked(t.clamp(0.0, h)) / self.schedule.integral_unchecked(h);
        for k in 0..TIME_FREQUENCIES {
            let (s, c) = (PI * (k + 1) as f64 * tau).sin_cos();
            col[d + 2 * k] = s;
            col[d + 2 * k + 1] = c;
        }
    }

    /// Returns outputs as a `dim × n` matrix (column per example).
    fn forward(&self, xs: &[f64], ts: &[f64], record: bool) -> (DMatrix<f64>, Option<Tape>) {
        let d = self.arch.dim;
        let n = ts.len();
        let mut a = DMatrix::zeros(self.arch.input_dim(), n);
        for (j, mut col) in a.column_iter_mut().enumerate() {
            self.embed_into(&xs[j * d..(j + 1) * d], ts[j], col.as_mut_slice());
        }
        let shapes = self.arch.layer_shapes();
        let last = shapes.len() - 1;
        let mut tape = record.then(|| Tape {
            inputs: Vec::with_capacity(shapes.len()),
            pre: Vec::with_capacity(last),
            scales: Vec::new(),
        });
        let mut off = 0;
        for (l, &(o, i)) in shapes.iter().enumerate() {
            let w = DMatrixView::from_slice(&self.params[off..off + o * i], o, i);
            let b = &self.params[off + o * i..off + o * i + o];
            off += o * i + o;
            let mut z = w * &a;
            for mut col in z.column_iter_mut() {
                for (v, bi) in col.iter_mut().zip(b) {
                    *v += bi;
                }
            }
            if l == last {
                if let Some(tp) = tape.as_mut() {
                    tp.inputs.push(a);
                }
                a = z;
            } else {
                let act = z.map(silu);
                if let Some(tp) = tape.as_mut() {
                    tp.inputs.push(std::mem::replace(&mut a, act));
                    tp.pre.push(z);
                } else {
                    a = act;
                }
            }
        }
        let scales: Vec<f64> = ts.iter().map(|t| self.output_scale(*t)).collect();
        for (mut col, c) in a.column_iter_mut().zip(&scales) {
            col *= *c;
        }
        if let Some(tp) = tape.as_mut() {
            tp.scales = scales;
        }
        (a, tape)
    }

    /// Scores for `n` examples with individual times; `xs` and `out` are
    /// row-major `n × dim`.
    pub fn eval_batch(&self, xs: &[f64], ts: &[f64], out: &mut [f64]) -> Result<()> {
        let d = self.arch.dim;
        check_dim("score network batch", ts.len() * d, xs.len())?;
        check_dim("score network output", xs.len(), out.len())?;
        let (s, _) = self.forward(xs, ts, false);
        out.copy_from_slice(s.as_slice());
        Ok(())
    }

    fn check_batch(&self, xs: &[f64], ts: &[f64], targets: &[f64], weights: &[f64]) -> Result<()> {
        let d = self.arch.dim;
        if ts.is_empty() {
            return Err(Error::Invalid("empty training batch".into()));
        }
        check_dim("batch inputs", ts.len() * d, xs.len())?;
        check_dim("batch targets", ts.len() * d, targets.len())?;
        check_dim("batch weights", ts.len(), weights.len())
    }

    /// `(1/n) Σ w_b ‖s(x_b, t_b) - y_b‖²`.
    pub fn loss(&self, xs: &[f64], ts: &[f64], targets: &[f64], weights: &[f64]) -> Result<f64> {
        self.check_batch(xs, ts, targets, weights)?;
        let (s, _) = self.forward(xs, ts, false);
        Ok(weighted_sq_error(s.as_slice(), targets, weights, self.arch.dim))
    }

    /// Loss and its exact gradient with respect to the flat parameters.
    pub fn loss_and_grad(&self, xs: &[f64], ts: &[f64], targets: &[f64], weights: &[f64]) -> Result<(f64, Vec<f64>)> {
        self.check_batch(xs, ts, targets, weights)?;
        let d = self.arch.dim;
        let n = ts.len();
        let (s, tape) = self.forward(xs, ts, true);
        let tape = tape.expect("tape recorded");
        let loss = weighted_sq_error(s.as_slice(), targets, weights, d);

        let mut g = DMatrix::zeros(d, n);
        for j in 0..n {
            let c = 2.0 * weights[j] * tape.scales[j] / n as f64;
            for i in 0..d {
                g[(i, j)] = c * (s[(i, j)] - targets[j * d + i]);
            }
        }

        let shapes = self.arch.layer_shapes();
        let mut offsets = Vec::with_capacity(shapes.len());
        let mut off = 0;
        for &(o, i) in &shapes {
            offsets.push(off);
            off += o * i + o;
        }
        let mut grad = vec![0.0; off];
        for l in (0..shapes.len()).rev() {
            let (o, i) = shapes[l];
            let off = offsets[l];
            let dw = &g * tape.inputs[l].transpose();
            grad[off..off + o * i].copy_from_slice(dw.as_slice());
            for (r, gb) in grad[off + o * i..off + o * i + o].iter_mut().enumerate() {
                *gb = g.row(r).sum();
            }
            if l > 0 {
                let w = DMatrixView::from_slice(&self.params[off..off + o * i], o, i);
                let mut da = w.transpose() * &g;
                da.zip_apply(&tape.pre[l - 1], |v, z| *v *= silu_prime(z));
                g = da;
            }
        }
        Ok((loss, grad))
    }
}

fn weighted_sq_error(s: &[f64], targets: &[f64], weights: &[f64], d: usize) -> f64 {
    let n = weights.len();
    let mut total = 0.0;
    for j in 0..n {
        let e: f64 = (0..d).map(|i| (s[j * d + i] - targets[j * d + i]).powi(2)).sum();
        total += weights[j] * e;
    }
    total / n as f64
}

impl ScoreFunction for ScoreNet {
    fn dim(&self) -> usize {
        self.arch.dim
    }

    fn score_into(&self, x: &[f64], t: f64, out: &mut [f64]) {
        let (s, _) = self.forward(x, &[t], false);
        out.copy_from_slice(s.as_slice());
    }

    fn score_batch(&self, xs: &[f64], t: f64, out: &mut [f64]) {
        let ts = vec![t; xs.len() / self.arch.dim];
        let (s, _) = self.forward(xs, &ts, false);
        out.copy_from_slice(s.as_slice());
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradientCheck {
    pub checked: usize,
    pub max_rel_error: f64,
}

/// Compares the analytic gradient against central differences of step `h`
/// on the given parameter coordinates. Relative error is
/// `|a - b| / max(|a|, |b|, 1e-6)`.
pub fn gradient_check(
    net: &ScoreNet,
    xs: &[f64],
    ts: &[f64],
    targets: &[f64],
    weights: &[f64],
    coords: &[usize],
    h: f64,
) -> Result<GradientCheck> {
    let (_, grad) = net.loss_and_grad(xs, ts, targets, weights)?;
    let mut probe = net.clone();
    let mut max_rel = 0.0f64;
    for &k in coords {
        if k >= grad.len() {
            return Err(Error::Invalid(format!("parameter index {k} out of range")));
        }
        let orig = probe.params[k];
        probe.params[k] = orig + h;
        let plus = probe.loss(xs, ts, targets, weights)?;
        probe.params[k] = orig - h;
        let minus = probe.loss(xs, ts, targets, weights)?;
        probe.params[k] = orig;
        let fd = (plus - minus) / (2.0 * h);
        let a = grad[k];
        let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-6);
        max_rel = max_rel.max(rel);
    }
    Ok(GradientCheck {
        checked: coords.len(),
        max_rel_error: max_rel,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn batch(rng: &mut ChaCha8Rng, n: usize, d: usize) -> (Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>) {
        let xs = (0..n * d).map(|_| normal(rng)).collect();
        let ts = (0..n).map(|_| rng.random_range(0.05..1.0)).collect();
        let ys = (0..n * d).map(|_| normal(rng)).collect();
        let ws = (0..n).map(|_| rng.random_range(0.5..1.5)).collect();
        (xs, ts, ys, ws)
    }

    #[test]
    fn zero_weights_give_zero_output() {
        let net = ScoreNet::zeros(ScoreNetArch::new(2, vec![8, 8], true).unwrap(), TimeSchedule::default());
        let mut out = [1.0; 2];
        net.score_into(&[0.3, 0.4], 0.5, &mut out);
        assert_eq!(out, [0.0, 0.0]);
    }

    #[test]
    fn layout_size() {
        let a = ScoreNetArch::new(2, vec![4], false).unwrap();
        assert_eq!(a.n_params(), 4 * 18 + 4 + 2 * 4 + 2);
    }

    #[test]
    fn backprop_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for (hidden, scaling) in [(vec![6], false), (vec![8, 5], true), (vec![7, 4, 6], true)] {
            let arch = ScoreNetArch::new(2, hidden, scaling).unwrap();
            let net = ScoreNet::new(arch, TimeSchedule::default(), &mut rng);
            let (xs, ts, ys, ws) = batch(&mut rng, 5, 2);
            let coords: Vec<usize> = (0..net.params().len()).collect();
            let chk = gradient_check(&net, &xs, &ts, &ys, &ws, &coords, 1e-5).unwrap();
            assert!(chk.max_rel_error < 1e-5, "{chk:?}");
        }
    }

    #[test]
    fn gradient_linear_in_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let net = ScoreNet::new(
            ScoreNetArch::new(3, vec![5], true).unwrap(),
            TimeSchedule::default(),
            &mut rng,
        );
        let (xs, ts, ys, ws) = batch(&mut rng, 4, 3);
        let (_, g1) = net.loss_and_grad(&xs, &ts, &ys, &ws).unwrap();
        let ws2: Vec<f64> = ws.iter().map(|w| 2.0 * w).collect();
        let (_, g2) = net.loss_and_grad(&xs, &ts, &ys, &ws2).unwrap();
        for (a, b) in g1.iter().zip(&g2) {
            assert_eq!(2.0 * a, *b);
        }
        let mut out = vec![0.0; 12];
        net.eval_batch(&xs, &ts, &mut out).unwrap();
        let (l, g0) = net.loss_and_grad(&xs, &ts, &out, &ws).unwrap();
        assert_eq!(l, 0.0);
        assert!(g0.iter().all(|v| *v == 0.0));
    }
}
