//! Euler–Maruyama for the forward and reverse-time SDEs, RK4 for the
//! probability-flow ODE.
//!
//! Batch samplers advance paths in lockstep chunks so that score networks
//! can be evaluated on whole chunks. Every path owns its own generator
//! (`RngSpec::path(i)`), which makes results independent of chunking and of
//! the execution mode.

use std::io::{self, Write};

use nalgebra::DVector;

use crate::error::{check_dim, Error, Result};
use crate::par::{map_chunks, map_collect, Execution};
use crate::rng::{fill_normal, RngSpec, StreamRng};
use crate::score::ScoreFunction;
use crate::sde::{ForwardModel, T_EPS};

/// Default number of discretization steps.
pub const DEFAULT_STEPS: usize = 1000;
/// Central-difference step for flow divergences.
pub const FLOW_DIVERGENCE_STEP: f64 = 1e-5;
/// Largest dimension for which exact divergences are computed.
pub const MAX_LOGDET_DIM: usize = 16;

const CHUNK: usize = 256;

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    times: Vec<f64>,
    dim: usize,
    states: Vec<f64>,
    logdet: Option<Vec<f64>>,
}

impl Trajectory {
    pub fn new(times: Vec<f64>, dim: usize, states: Vec<f64>, logdet: Option<Vec<f64>>) -> Result<Self> {
        check_dim("trajectory states", times.len() * dim, states.len())?;
        if let Some(l) = &logdet {
            check_dim("trajectory logdet", times.len(), l.len())?;
        }
        if times.windows(2).any(|w| w[1].is_nan() || w[0].is_nan() || w[1] <= w[0]) {
            return Err(Error::Invalid("trajectory times must be strictly increasing".into()));
        }
        if states.iter().chain(logdet.iter().flatten()).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("trajectory"));
        }
        Ok(Self {
            times,
            dim,
            states,
            logdet,
        })
    }

    /// Reverses the row order so that times ascend.
    fn from_descending(
        mut times: Vec<f64>,
        dim: usize,
        states: Vec<f64>,
        mut logdet: Option<Vec<f64>>,
    ) -> Result<Self> {
        times.reverse();
        let states = states.chunks_exact(dim).rev().flatten().copied().collect();
        if let Some(l) = logdet.as_mut() {
            l.reverse();
        }
        Self::new(times, dim, states, logdet)
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn state(&self, k: usize) -> &[f64] {
        &self.states[k * self.dim..(k + 1) * self.dim]
    }

    /// Row-major `len × dim` states.
    pub fn states(&self) -> &[f64] {
        &self.states
    }

    pub fn logdet(&self) -> Option<&[f64]> {
        self.logdet.as_deref()
    }

    pub fn csv_header(&self) -> String {
        let mut h = String::from("t");
        for i in 0..self.dim {
            h.push_str(&format!(",x{i}"));
        }
        if self.logdet.is_some() {
            h.push_str(",logdet");
        }
        h
    }

    /// One row per time point, floats with 17 significant digits.
    pub fn write_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "{}", self.csv_header())?;
        for k in 0..self.len() {
            write!(w, "{:.16e}", self.times[k])?;
            for v in self.state(k) {
                write!(w, ",{v:.16e}")?;
            }
            if let Some(l) = &self.logdet {
                write!(w, ",{:.16e}", l[k])?;
            }
            writeln!(w)?;
        }
        Ok(())
    }
}

/// Uniform time grid `t_k = start + k (end - start) / n`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeGrid {
    pub start: f64,
    pub end: f64,
    pub n_steps: usize,
}

impl TimeGrid {
    pub fn new(start: f64, end: f64, n_steps: usize) -> Result<Self> {
        if n_steps == 0 {
            return Err(Error::Invalid("n_steps must be at least 1".into()));
        }
        if !(start.is_finite() && end.is_finite()) || start == end {
            return Err(Error::Invalid(format!("degenerate time grid [{start}, {end}]")));
        }
        Ok(Self { start, end, n_steps })
    }

    /// `0 → T`.
    pub fn forward(model: &ForwardModel, n_steps: usize) -> Result<Self> {
        Self::new(0.0, model.horizon(), n_steps)
    }

    /// `T → t_eps`.
    pub fn reverse(model: &ForwardModel, n_steps: usize) -> Result<Self> {
        Self::new(model.horizon(), T_EPS, n_steps)
    }

    pub fn step(&self) -> f64 {
        (self.end - self.start) / self.n_steps as f64
    }

    pub fn time(&self, k: usize) -> f64 {
        if k == self.n_steps {
            self.end
        } else {
            self.start + k as f64 * self.step()
        }
    }

    fn check_within(&self, model: &ForwardModel) -> Result<()> {
        let h = model.horizon();
        for t in [self.start, self.end] {
            if !(0.0..=h).contains(&t) {
                return Err(Error::Domain { t, horizon: h });
            }
        }
        Ok(())
    }
}

/// Lockstep Euler–Maruyama on a chunk of paths.
struct Stepper<'a> {
    model: &'a ForwardModel,
    score: Option<&'a dyn ScoreFunction>,
    dim: usize,
    drift: Vec<f64>,
    noise: Vec<f64>,
    gnoise: Vec<f64>,
    scores: Vec<f64>,
    tmp: Vec<f64>,
}

impl<'a> Stepper<'a> {
    fn new(model: &'a ForwardModel, score: Option<&'a dyn ScoreFunction>, n: usize) -> Self {
        let d = model.dim();
        Self {
            model,
            score,
            dim: d,
            drift: vec![0.0; d],
            noise: vec![0.0; d],
            gnoise: vec![0.0; d],
            scores: vec![0.0; if score.is_some() { n * d } else { 0 }],
            tmp: vec![0.0; d],
        }
    }

    /// Advances every row of `xs` from `t` by `dt` (negative for reverse).
    fn step(&mut self, xs: &mut [f64], t: f64, dt: f64, rngs: &mut [StreamRng]) {
        let d = self.dim;
        let h = dt.abs();
        let sqrt_h = h.sqrt();
        if let Some(s) = self.score {
            let n = xs.len() / d;
            s.score_batch(xs, t, &mut self.scores[..n * d]);
        }
        for (p, (x, rng)) in xs.chunks_exact_mut(d).zip(rngs.iter_mut()).enumerate() {
            self.model.drift_into(x, t, &mut self.drift);
            if self.score.is_some() {
                // Reverse drift f - ∇·D - D s, integrated backwards in time.
                let s = &self.scores[p * d..(p + 1) * d];
                self.model.diffusion_tensor_apply_into(x, t, s, &mut self.tmp);
                for i in 0..d {
                    self.drift[i] -= self.tmp[i];
                }
                if !self.model.metric().is_constant() {
                    self.model.diffusion_tensor_divergence_into(x, t, &mut self.tmp);
                    for i in 0..d {
                        self.drift[i] -= self.tmp[i];
                    }
                }
            }
            fill_normal(rng, &mut self.noise);
            self.model.diffusion_apply_into(x, t, &self.noise, &mut self.gnoise);
            for i in 0..d {
                x[i] += self.drift[i] * dt + self.gnoise[i] * sqrt_h;
            }
        }
    }
}

fn check_finite(xs: &[f64], step: usize, t: f64) -> Result<()> {
    if xs.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Diverged { step, t })
    }
}

fn run_path(
    model: &ForwardModel,
    score: Option<&dyn ScoreFunction>,
    x0: &DVector<f64>,
    grid: TimeGrid,
    rng: RngSpec,
) -> Result<(Vec<f64>, Vec<f64>)> {
    check_dim("initial state", model.dim(), x0.len())?;
    check_finite(x0.as_slice(), 0, grid.start)?;
    grid.check_within(model)?;
    let d = model.dim();
    let mut stepper = Stepper::new(model, score, 1);
    let mut rngs = [rng.rng()];
    let mut x = x0.as_slice().to_vec();
    let mut times = Vec::with_capacity(grid.n_steps + 1);
    let mut states = Vec::with_capacity((grid.n_steps + 1) * d);
    times.push(grid.start);
    states.extend_from_slice(&x);
    let dt = grid.step();
    for k in 0..grid.n_steps {
        let t = grid.time(k);
        stepper.step(&mut x, t, dt, &mut rngs);
        check_finite(&x, k + 1, grid.time(k + 1))?;
        times.push(grid.time(k + 1));
        states.extend_from_slice(&x);
    }
    Ok((times, states))
}

/// `x_{k+1} = x_k + f Δt + g √Δt ξ_k` on a uniform grid over `[0, T]`.
pub fn euler_maruyama_forward(
    model: &ForwardModel,
    x0: &DVector<f64>,
    n_steps: usize,
    rng: RngSpec,
) -> Result<Trajectory> {
    let grid = TimeGrid::forward(model, n_steps)?;
    let (times, states) = run_path(model, None, x0, grid, rng)?;
    Trajectory::new(times, model.dim(), states, None)
}

/// Reverse-time SDE from `T` down to `t_eps`, drift `f - ∇·D - D s` with
/// `D = g gᵀ`. The returned trajectory is in ascending time order.
pub fn euler_maruyama_reverse(
    model: &ForwardModel,
    score: &dyn ScoreFunction,
    x_t: &DVector<f64>,
    n_steps: usize,
    rng: RngSpec,
) -> Result<Trajectory> {
    check_dim("score function", model.dim(), score.dim())?;
    let grid = TimeGrid::reverse(model, n_steps)?;
    let (times, states) = run_path(model, Some(score), x_t, grid, rng)?;
    Trajectory::from_descending(times, model.dim(), states, None)
}

/// Initial state of path `index`, drawn from that path's own generator.
pub trait InitialState: Sync {
    fn fill(&self, index: usize, rng: &mut StreamRng, out: &mut [f64]);
}

impl<F: Fn(usize, &mut StreamRng, &mut [f64]) + Sync> InitialState for F {
    fn fill(&self, index: usize, rng: &mut StreamRng, out: &mut [f64]) {
        self(index, rng, out)
    }
}

/// Every path starts at `x0`.
pub struct FixedStart(pub Vec<f64>);

impl InitialState for FixedStart {
    fn fill(&self, _index: usize, _rng: &mut StreamRng, out: &mut [f64]) {
        out.copy_from_slice(&self.0);
    }
}

/// Standard normal start, `N(0, I/m)` after scaling by `1/√m`.
pub struct GaussianStart {
    pub std: f64,
}

impl InitialState for GaussianStart {
    fn fill(&self, _index: usize, rng: &mut StreamRng, out: &mut [f64]) {
        fill_normal(rng, out);
        out.iter_mut().for_each(|v| *v *= self.std);
    }
}

/// Many independent paths; returns one row-major `n_paths × dim` block per
/// requested snapshot step (`0..=n_steps`).
#[allow(clippy::too_many_arguments)]
pub fn simulate_batch(
    model: &ForwardModel,
    score: Option<&dyn ScoreFunction>,
    init: &dyn InitialState,
    n_paths: usize,
    grid: TimeGrid,
    snapshots: &[usize],
    rng: RngSpec,
    exec: Execution,
) -> Result<Vec<Vec<f64>>> {
    grid.check_within(model)?;
    if let Some(s) = score {
        check_dim("score function", model.dim(), s.dim())?;
    }
    if let Some(k) = snapshots.iter().find(|k| **k > grid.n_steps) {
        return Err(Error::Invalid(format!(
            "snapshot step {k} beyond n_steps {}",
            grid.n_steps
        )));
    }
    let d = model.dim();
    let chunks: Vec<Result<Vec<Vec<f64>>>> = map_chunks(exec, n_paths, CHUNK, |range| {
        let n = range.len();
        let mut rngs: Vec<StreamRng> = range.clone().map(|i| rng.path(i as u64)).collect();
        let mut xs = vec![0.0; n * d];
        for (p, (x, r)) in xs.chunks_exact_mut(d).zip(rngs.iter_mut()).enumerate() {
            init.fill(range.start + p, r, x);
        }
        let mut out = vec![Vec::new(); snapshots.len()];
        let record = |out: &mut Vec<Vec<f64>>, k: usize, xs: &[f64]| {
            for (slot, &s) in out.iter_mut().zip(snapshots) {
                if s == k {
                    slot.extend_from_slice(xs);
                }
            }
        };
        let result = (|| {
            check_finite(&xs, 0, grid.start)?;
            record(&mut out, 0, &xs);
            let mut stepper = Stepper::new(model, score, n);
            let dt = grid.step();
            for k in 0..grid.n_steps {
                stepper.step(&mut xs, grid.time(k), dt, &mut rngs);
                check_finite(&xs, k + 1, grid.time(k + 1))?;
                record(&mut out, k + 1, &xs);
            }
            Ok(out)
        })();
        vec![result]
    });
    let mut merged = vec![Vec::with_capacity(n_paths * d); snapshots.len()];
    for c in chunks {
        for (m, part) in merged.iter_mut().zip(c?) {
            m.extend(part);
        }
    }
    Ok(merged)
}

/// Terminal samples of the reverse SDE started from `init` at `T`.
pub fn sample_reverse(
    model: &ForwardModel,
    score: &dyn ScoreFunction,
    init: &dyn InitialState,
    n_paths: usize,
    n_steps: usize,
    rng: RngSpec,
    exec: Execution,
) -> Result<Vec<f64>> {
    let grid = TimeGrid::reverse(model, n_steps)?;
    let mut snaps = simulate_batch(model, Some(score), init, n_paths, grid, &[n_steps], rng, exec)?;
    Ok(snaps.pop().unwrap_or_default())
}

/// A time-dependent vector field `v(x, t)`.
pub trait VectorField: Sync {
    fn dim(&self) -> usize;
    fn eval_into(&self, x: &[f64], t: f64, out: &mut [f64]);
}

/// Adapter turning a closure into a [`VectorField`].
pub struct FnField<F> {
    pub dim: usize,
    pub f: F,
}

impl<F: Fn(&[f64], f64, &mut [f64]) + Sync> VectorField for FnField<F> {
    fn dim(&self) -> usize {
        self.dim
    }

    fn eval_into(&self, x: &[f64], t: f64, out: &mut [f64]) {
        (self.f)(x, t, out)
    }
}

/// `v = f - ½ ∇·D - ½ D s` with `D = g gᵀ`.
pub struct ProbabilityFlow<'a> {
    model: &'a ForwardModel,
    score: &'a dyn ScoreFunction,
}

impl<'a> ProbabilityFlow<'a> {
    pub fn new(model: &'a ForwardModel, score: &'a dyn ScoreFunction) -> Result<Self> {
        check_dim("score function", model.dim(), score.dim())?;
        Ok(Self { model, score })
    }
}

impl VectorField for ProbabilityFlow<'_> {
    fn dim(&self) -> usize {
        self.model.dim()
    }

    fn eval_into(&self, x: &[f64], t: f64, out: &mut [f64]) {
        let d = self.model.dim();
        let mut s = vec![0.0; d];
        let mut tmp = vec![0.0; d];
        self.score.score_into(x, t, &mut s);
        self.model.drift_into(x, t, out);
        self.model.diffusion_tensor_apply_into(x, t, &s, &mut tmp);
        for i in 0..d {
            out[i] -= 0.5 * tmp[i];
        }
        if !self.model.metric().is_constant() {
            self.model.diffusion_tensor_divergence_into(x, t, &mut tmp);
            for i in 0..d {
                out[i] -= 0.5 * tmp[i];
            }
        }
    }
}

pub fn probability_flow_field(
    model: &ForwardModel,
    score: &dyn ScoreFunction,
    x: &DVector<f64>,
    t: f64,
) -> Result<DVector<f64>> {
    check_dim("flow point", model.dim(), x.len())?;
    model.schedule().rate(t)?;
    let flow = ProbabilityFlow::new(model, score)?;
    let mut out = DVector::zeros(x.len());
    flow.eval_into(x.as_slice(), t, out.as_mut_slice());
    Ok(out)
}

/// `∇·v(x, t)` by central differences.
pub fn flow_divergence(field: &dyn VectorField, x: &[f64], t: f64) -> f64 {
    let d = field.dim();
    let h = FLOW_DIVERGENCE_STEP;
    let mut y = x.to_vec();
    let mut vp = vec![0.0; d];
    let mut vm = vec![0.0; d];
    let mut div = 0.0;
    for i in 0..d {
        y[i] = x[i] + h;
        field.eval_into(&y, t, &mut vp);
        y[i] = x[i] - h;
        field.eval_into(&y, t, &mut vm);
        y[i] = x[i];
        div += (vp[i] - vm[i]) / (2.0 * h);
    }
    div
}

/// Classical RK4 from `t_start` to `t_end`. With `with_logdet`, the
/// integral `∫ ∇·v dt` from `t_start` is integrated alongside the state.
/// Rows are returned in ascending time order.
pub fn integrate_flow(
    field: &dyn VectorField,
    x_start: &DVector<f64>,
    t_start: f64,
    t_end: f64,
    n_steps: usize,
    with_logdet: bool,
) -> Result<Trajectory> {
    let d = field.dim();
    check_dim("flow start", d, x_start.len())?;
    if with_logdet && d > MAX_LOGDET_DIM {
        return Err(Error::Unsupported(format!(
            "exact divergence limited to dim <= {MAX_LOGDET_DIM}, got {d}"
        )));
    }
    let grid = TimeGrid::new(t_start, t_end, n_steps)?;
    let h = grid.step();
    let mut x = x_start.as_slice().to_vec();
    check_finite(&x, 0, t_start)?;
    let mut times = vec![t_start];
    let mut states = x.clone();
    let mut logdet = with_logdet.then(|| vec![0.0]);
    let mut acc = 0.0;
    let mut k = [vec![0.0; d], vec![0.0; d], vec![0.0; d], vec![0.0; d]];
    let mut y = vec![0.0; d];
    for step in 0..n_steps {
        let t = grid.time(step);
        let stages = [0.0, 0.5, 0.5, 1.0];
        let mut divs = [0.0; 4];
        for s in 0..4 {
            for i in 0..d {
                y[i] = if s == 0 {
                    x[i]
                } else {
                    x[i] + stages[s] * h * k[s - 1][i]
                };
            }
            let ts = t + stages[s] * h;
            field.eval_into(&y, ts, &mut k[s]);
            if with_logdet {
                divs[s] = flow_divergence(field, &y, ts);
            }
        }
        for i in 0..d {
            x[i] += h / 6.0 * (k[0][i] + 2.0 * k[1][i] + 2.0 * k[2][i] + k[3][i]);
        }
        let t_next = grid.time(step + 1);
        check_finite(&x, step + 1, t_next)?;
        times.push(t_next);
        states.extend_from_slice(&x);
        if let Some(l) = logdet.as_mut() {
            acc += h / 6.0 * (divs[0] + 2.0 * divs[1] + 2.0 * divs[2] + divs[3]);
            if !acc.is_finite() {
                return Err(Error::Diverged {
                    step: step + 1,
                    t: t_next,
                });
            }
            l.push(acc);
        }
    }
    if t_end < t_start {
        Trajectory::from_descending(times, d, states, logdet)
    } else {
        Trajectory::new(times, d, states, logdet)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FlowDirection {
    /// `t_eps → T`
    Forward,
    /// `T → t_eps`
    Reverse,
}

pub fn integrate_probability_flow(
    model: &ForwardModel,
    score: &dyn ScoreFunction,
    x_start: &DVector<f64>,
    direction: FlowDirection,
    n_steps: usize,
    with_logdet: bool,
) -> Result<Trajectory> {
    let flow = ProbabilityFlow::new(model, score)?;
    let (a, b) = match direction {
        FlowDirection::Forward => (T_EPS, model.horizon()),
        FlowDirection::Reverse => (model.horizon(), T_EPS),
    };
    integrate_flow(&flow, x_start, a, b, n_steps, with_logdet)
}

/// Endpoints and accumulated divergence of the probability flow for many
/// starting points (row-major); returns `(end states, logdets)`.
pub fn integrate_flow_batch(
    field: &dyn VectorField,
    starts: &[f64],
    t_start: f64,
    t_end: f64,
    n_steps: usize,
    exec: Execution,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let d = field.dim();
    if !starts.len().is_multiple_of(d) {
        return Err(Error::Dimension {
            context: "flow batch",
            expected: d,
            got: starts.len() % d,
        });
    }
    let n = starts.len() / d;
    let runs = map_collect(exec, n, |i| {
        let x = DVector::from_column_slice(&starts[i * d..(i + 1) * d]);
        integrate_flow(field, &x, t_start, t_end, n_steps, true).map(|tr| {
            let k = if t_end < t_start { 0 } else { tr.len() - 1 };
            (tr.state(k).to_vec(), tr.logdet().expect("logdet requested")[k])
        })
    });
    let mut ends = Vec::with_capacity(n * d);
    let mut logdets = Vec::with_capacity(n);
    for r in runs {
        let (e, l) = r?;
        ends.extend(e);
        logdets.push(l);
    }
    Ok((ends, logdets))
}
