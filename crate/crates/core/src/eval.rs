//! Distances, likelihoods and the geometric diagnostics used by the
//! experiments.

use std::f64::consts::{LN_2, PI};

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::data::{Dataset, PlaneGaussian};
use crate::error::{check_dim, Error, Result};
use crate::matrix_param::{max_abs, SpdParam, SYMMETRY_TOL};
use crate::par::{map_collect, Execution};
use crate::rng::{fill_normal, normal, RngSpec, StreamRng};
use crate::score::{ScoreFunction, ScoreNet, ScoreNetArch};
use crate::sde::{ForwardModel, TimeSchedule, T_EPS};
use crate::simulate::{integrate_flow_batch, ProbabilityFlow, TimeGrid, VectorField, MAX_LOGDET_DIM};
use crate::train::{fit, StageMode, TrainConfig, TrainState, DEFAULT_BATCH, DEFAULT_LAMBDA};

/// Squared 2-Wasserstein distance from `N(0, I)` to `N(μ, Σ)`:
/// `‖μ‖² + tr(I + Σ - 2Σ^{1/2})`. Positive semi-definite `Σ` is accepted.
pub fn w2_gaussian(mu: &DVector<f64>, sigma: &DMatrix<f64>) -> Result<f64> {
    check_dim("w2 covariance", mu.len(), sigma.nrows())?;
    check_dim("w2 covariance (square)", mu.len(), sigma.ncols())?;
    if mu.iter().chain(sigma.iter()).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("w2_gaussian input"));
    }
    let defect = max_abs(&(sigma - sigma.transpose()));
    if defect > SYMMETRY_TOL * max_abs(sigma).max(1.0) {
        return Err(Error::NotSymmetric(defect));
    }
    let eig = SymmetricEigen::new(sigma.clone()).eigenvalues;
    let floor = -1e-12 * max_abs(sigma).max(1.0);
    let min = eig.min();
    if min < floor {
        return Err(Error::NotPositiveDefinite { min_eigenvalue: min });
    }
    let trace: f64 = eig.iter().map(|l| (1.0 - l.max(0.0).sqrt()).powi(2)).sum();
    Ok(mu.norm_squared() + trace)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MomentReport {
    pub n: usize,
    pub mean: DVector<f64>,
    /// Unbiased (`n - 1`) covariance.
    pub cov: DMatrix<f64>,
    /// Standard error of each mean entry.
    pub mean_se: DVector<f64>,
    /// Standard error of each covariance entry, from fourth moments.
    pub cov_se: DMatrix<f64>,
    /// `max |mean|` (deviation from the zero mean of `N(0, I)`).
    pub max_mean_dev: f64,
    /// `max |cov - I|`.
    pub max_cov_dev: f64,
}

/// Sample moments of row-major `n × dim` samples.
pub fn empirical_moments(samples: &[f64], dim: usize) -> Result<MomentReport> {
    if dim == 0 || !samples.len().is_multiple_of(dim) {
        return Err(Error::Invalid("samples are not a whole number of rows".into()));
    }
    let n = samples.len() / dim;
    if n < 2 {
        return Err(Error::Invalid(format!("need at least 2 samples, got {n}")));
    }
    let mut mean = DVector::<f64>::zeros(dim);
    for row in samples.chunks_exact(dim) {
        for i in 0..dim {
            mean[i] += row[i];
        }
    }
    mean /= n as f64;
    let mut cov = DMatrix::<f64>::zeros(dim, dim);
    let mut m4 = DMatrix::<f64>::zeros(dim, dim);
    for row in samples.chunks_exact(dim) {
        for i in 0..dim {
            let a = row[i] - mean[i];
            for j in 0..dim {
                let p = a * (row[j] - mean[j]);
                cov[(i, j)] += p;
                m4[(i, j)] += p * p;
            }
        }
    }
    let biased = &cov / n as f64;
    cov /= (n - 1) as f64;
    let mean_se = DVector::from_fn(dim, |i, _| (cov[(i, i)] / n as f64).sqrt());
    let cov_se = DMatrix::from_fn(dim, dim, |i, j| {
        ((m4[(i, j)] / n as f64 - biased[(i, j)].powi(2)).max(0.0) / n as f64).sqrt()
    });
    let max_mean_dev: f64 = mean.amax();
    let max_cov_dev = (&cov - DMatrix::<f64>::identity(dim, dim)).amax();
    Ok(MomentReport {
        n,
        mean,
        cov,
        mean_se,
        cov_se,
        max_mean_dev,
        max_cov_dev,
    })
}

/// Exact 1D W2 between two empirical distributions given sorted values,
/// integrating the squared difference of their quantile functions.
fn w2_1d_sorted(a: &[f64], b: &[f64]) -> f64 {
    let (n, m) = (a.len(), b.len());
    let (mut i, mut j) = (0, 0);
    let mut u = 0.0;
    let mut acc = 0.0;
    while i < n && j < m {
        let next_a = (i + 1) as f64 / n as f64;
        let next_b = (j + 1) as f64 / m as f64;
        let next = next_a.min(next_b);
        acc += (next - u) * (a[i] - b[j]).powi(2);
        u = next;
        if next_a <= next {
            i += 1;
        }
        if next_b <= next {
            j += 1;
        }
    }
    acc.max(0.0).sqrt()
}

/// Mean over `n_projections` random unit directions of the 1D W2 distance
/// between the projected sample sets (row-major).
pub fn sliced_w2(a: &[f64], b: &[f64], dim: usize, n_projections: usize, rng: RngSpec) -> Result<f64> {
    if dim == 0 || !a.len().is_multiple_of(dim) || !b.len().is_multiple_of(dim) {
        return Err(Error::Dimension {
            context: "sliced_w2 samples",
            expected: dim,
            got: if !a.len().is_multiple_of(dim.max(1)) {
                a.len()
            } else {
                b.len()
            },
        });
    }
    if a.is_empty() || b.is_empty() || n_projections == 0 {
        return Err(Error::Invalid("sliced_w2 needs samples and projections".into()));
    }
    let mut r = rng.rng();
    let mut total = 0.0;
    let mut dir = vec![0.0; dim];
    let project = |s: &[f64], dir: &[f64]| {
        let mut p: Vec<f64> = s
            .chunks_exact(dim)
            .map(|row| row.iter().zip(dir).map(|(x, u)| x * u).sum())
            .collect();
        p.sort_by(f64::total_cmp);
        p
    };
    for _ in 0..n_projections {
        let norm = loop {
            fill_normal(&mut r, &mut dir);
            let nn = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
            if nn > 1e-12 {
                break nn;
            }
        };
        dir.iter_mut().for_each(|v| *v /= norm);
        total += w2_1d_sorted(&project(a, &dir), &project(b, &dir));
    }
    Ok(total / n_projections as f64)
}

fn log_std_normal(z: &[f64], scale: f64) -> f64 {
    let d = z.len() as f64;
    let sq: f64 = z.iter().map(|v| v * v).sum();
    0.5 * d * (scale / (2.0 * PI)).ln() - 0.5 * scale * sq
}

#[derive(Debug, Clone, PartialEq)]
pub struct NllReport {
    /// Mean bits per dimension.
    pub bits_per_dim: f64,
    pub std_error: f64,
    pub per_point: Vec<f64>,
}

/// Probability-flow negative log-likelihood in bits per dimension, with
/// prior `N(0, I/m)` at `T` (the stationary law).
pub fn nll_bits_per_dim(
    model: &ForwardModel,
    score: &dyn ScoreFunction,
    data: &[f64],
    n_steps: usize,
    exec: Execution,
) -> Result<NllReport> {
    let d = model.dim();
    if d > MAX_LOGDET_DIM {
        return Err(Error::Unsupported(format!(
            "exact NLL limited to dim <= {MAX_LOGDET_DIM}"
        )));
    }
    let flow = ProbabilityFlow::new(model, score)?;
    let (ends, logdets) = integrate_flow_batch(&flow, data, T_EPS, model.horizon(), n_steps, exec)?;
    let per_point: Vec<f64> = ends
        .chunks_exact(d)
        .zip(&logdets)
        .map(|(z, l)| -(log_std_normal(z, model.scale()) + l) / (d as f64 * LN_2))
        .collect();
    let (bits_per_dim, std_error) = mean_and_se(&per_point);
    Ok(NllReport {
        bits_per_dim,
        std_error,
        per_point,
    })
}

fn mean_and_se(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, f64::NAN);
    }
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ElboEstimate {
    pub value: f64,
    pub std_error: f64,
    pub n_mc: usize,
}

/// `h(x, s) = ½ sᵀ D s + ∇·(D s - f)` for every row of `xs`.
fn elbo_integrand(model: &ForwardModel, score: &dyn ScoreFunction, xs: &[f64], t: f64, out: &mut [f64]) {
    let d = model.dim();
    let n = xs.len() / d;
    let ts = t.max(T_EPS);
    let h = crate::simulate::FLOW_DIVERGENCE_STEP;
    let mut s = vec![0.0; xs.len()];
    score.score_batch(xs, ts, &mut s);
    let mut ds = vec![0.0; d];
    for (p, o) in out.iter_mut().enumerate().take(n) {
        let x = &xs[p * d..(p + 1) * d];
        model.diffusion_tensor_apply_into(x, t, &s[p * d..(p + 1) * d], &mut ds);
        *o = 0.5 * ds.iter().zip(&s[p * d..(p + 1) * d]).map(|(a, b)| a * b).sum::<f64>();
    }
    // Divergence of D s - f by central differences, one coordinate at a time
    // for the whole batch.
    let mut shifted = xs.to_vec();
    let mut sp = vec![0.0; xs.len()];
    let mut sm = vec![0.0; xs.len()];
    let mut f = vec![0.0; d];
    for i in 0..d {
        for p in 0..n {
            shifted[p * d + i] = xs[p * d + i] + h;
        }
        score.score_batch(&shifted, ts, &mut sp);
        for p in 0..n {
            shifted[p * d + i] = xs[p * d + i] - h;
        }
        score.score_batch(&shifted, ts, &mut sm);
        for (p, o) in out.iter_mut().enumerate().take(n) {
            let mut comp = |sign: f64, svec: &[f64]| {
                let mut y = xs[p * d..(p + 1) * d].to_vec();
                y[i] += sign * h;
                model.diffusion_tensor_apply_into(&y, t, &svec[p * d..(p + 1) * d], &mut ds);
                model.drift_into(&y, t, &mut f);
                ds[i] - f[i]
            };
            let plus = comp(1.0, &sp);
            let minus = comp(-1.0, &sm);
            *o += (plus - minus) / (2.0 * h);
        }
        for p in 0..n {
            shifted[p * d + i] = xs[p * d + i];
        }
    }
}

/// Path-space evidence lower bound
/// `E[log p_T(X_T) | X_0 = x] - ∫ E[½‖s‖²_{ggᵀ} + ∇·(ggᵀ s - f)] dt`,
/// estimated from `n_mc` Euler–Maruyama paths with the trapezoid rule on
/// the simulation grid. The prior is `N(0, I/m)`.
pub fn elbo_path(
    model: &ForwardModel,
    score: &dyn ScoreFunction,
    x: &DVector<f64>,
    n_mc: usize,
    n_steps: usize,
    rng: RngSpec,
) -> Result<ElboEstimate> {
    let d = model.dim();
    check_dim("elbo point", d, x.len())?;
    check_dim("score function", d, score.dim())?;
    if d > MAX_LOGDET_DIM {
        return Err(Error::Unsupported(format!(
            "ELBO divergence limited to dim <= {MAX_LOGDET_DIM}"
        )));
    }
    if n_mc < 2 {
        return Err(Error::Invalid("elbo_path needs n_mc >= 2".into()));
    }
    let grid = TimeGrid::forward(model, n_steps)?;
    let dt = grid.step();
    let mut rngs: Vec<StreamRng> = (0..n_mc as u64).map(|i| rng.path(i)).collect();
    let mut xs: Vec<f64> = (0..n_mc).flat_map(|_| x.iter().copied()).collect();
    let mut integral = vec![0.0; n_mc];
    let mut h_prev = vec![0.0; n_mc];
    let mut h_next = vec![0.0; n_mc];
    elbo_integrand(model, score, &xs, grid.time(0), &mut h_prev);
    let (mut drift, mut noise, mut gnoise) = (vec![0.0; d], vec![0.0; d], vec![0.0; d]);
    for k in 0..n_steps {
        let t = grid.time(k);
        for (row, r) in xs.chunks_exact_mut(d).zip(rngs.iter_mut()) {
            model.drift_into(row, t, &mut drift);
            fill_normal(r, &mut noise);
            model.diffusion_apply_into(row, t, &noise, &mut gnoise);
            for i in 0..d {
                row[i] += drift[i] * dt + gnoise[i] * dt.sqrt();
            }
        }
        if xs.iter().any(|v| !v.is_finite()) {
            return Err(Error::Diverged {
                step: k + 1,
                t: grid.time(k + 1),
            });
        }
        elbo_integrand(model, score, &xs, grid.time(k + 1), &mut h_next);
        for p in 0..n_mc {
            integral[p] += 0.5 * dt * (h_prev[p] + h_next[p]);
        }
        std::mem::swap(&mut h_prev, &mut h_next);
    }
    let values: Vec<f64> = xs
        .chunks_exact(d)
        .zip(&integral)
        .map(|(z, i)| log_std_normal(z, model.scale()) - i)
        .collect();
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("elbo estimate"));
    }
    let (value, std_error) = mean_and_se(&values);
    Ok(ElboEstimate { value, std_error, n_mc })
}

/// Rectangular grid in the `x`–`z` plane at fixed `y`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridSpec {
    pub x_range: (f64, f64),
    pub nx: usize,
    pub y: f64,
    pub z_range: (f64, f64),
    pub nz: usize,
}

impl GridSpec {
    /// `[-2, 2] × [plane_z - 2, plane_z + 2]`; the even `nz` keeps grid
    /// points off the plane.
    pub fn around_plane(plane_z: f64) -> Self {
        Self {
            x_range: (-2.0, 2.0),
            nx: 9,
            y: 0.0,
            z_range: (plane_z - 2.0, plane_z + 2.0),
            nz: 10,
        }
    }

    pub fn points(&self) -> Vec<[f64; 3]> {
        let lin = |(a, b): (f64, f64), n: usize, k: usize| {
            if n == 1 {
                0.5 * (a + b)
            } else {
                a + (b - a) * k as f64 / (n - 1) as f64
            }
        };
        let mut pts = Vec::with_capacity(self.nx * self.nz);
        for iz in 0..self.nz {
            for ix in 0..self.nx {
                pts.push([lin(self.x_range, self.nx, ix), self.y, lin(self.z_range, self.nz, iz)]);
            }
        }
        pts
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AlignmentReport {
    pub grid: GridSpec,
    pub mean: f64,
    /// Cosine per evaluated point, in grid order (excluded points omitted).
    pub cosines: Vec<f64>,
    /// Points with a vanishing field or lying on the plane.
    pub excluded: usize,
}

/// Cosine between `field(·, t)` and the projection field pointing towards
/// the plane, `(0, 0, -1)` above it and `(0, 0, 1)` below, averaged over the
/// grid.
pub fn alignment_metric(field: &dyn VectorField, t: f64, plane_z: f64, grid: GridSpec) -> Result<AlignmentReport> {
    check_dim("alignment field", 3, field.dim())?;
    let mut cosines = Vec::new();
    let mut excluded = 0;
    let mut v = [0.0; 3];
    for p in grid.points() {
        field.eval_into(&p, t, &mut v);
        let norm = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        if !norm.is_finite() {
            return Err(Error::NonFinite("alignment field"));
        }
        if norm < 1e-12 || p[2] == plane_z {
            excluded += 1;
            continue;
        }
        let side = if p[2] > plane_z { -1.0 } else { 1.0 };
        cosines.push(side * v[2] / norm);
    }
    if cosines.is_empty() {
        return Err(Error::Invalid("no grid point has a usable field value".into()));
    }
    let mean = cosines.iter().sum::<f64>() / cosines.len() as f64;
    Ok(AlignmentReport {
        grid,
        mean,
        cosines,
        excluded,
    })
}

/// The generative direction of a probability flow, `-v(x, t)`.
pub struct GenerativeField<'a>(pub ProbabilityFlow<'a>);

impl VectorField for GenerativeField<'_> {
    fn dim(&self) -> usize {
        self.0.dim()
    }

    fn eval_into(&self, x: &[f64], t: f64, out: &mut [f64]) {
        self.0.eval_into(x, t, out);
        out.iter_mut().for_each(|v| *v = -*v);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MixingConfig {
    pub data: PlaneGaussian,
    pub threshold: f64,
    pub n_samples: usize,
    pub n_projections: usize,
    /// Integrated times `B` at which the marginal is tested, ascending.
    pub b_grid: Vec<f64>,
}

impl MixingConfig {
    pub fn new(data: PlaneGaussian, b_max: f64) -> Self {
        let n = 200;
        Self {
            data,
            threshold: 0.1,
            n_samples: 5000,
            n_projections: 64,
            b_grid: (1..=n).map(|k| b_max * k as f64 / n as f64).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MixingTime {
    /// First `B(t)` with sliced W2 below the threshold, or the largest
    /// tested `B` when censored.
    pub b: f64,
    pub censored: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MixingReport {
    pub iso: MixingTime,
    pub aniso: MixingTime,
}

const MIXING_BLOCK: usize = 8;

fn mixing_time(model: &ForwardModel, cfg: &MixingConfig, rng: RngSpec, exec: Execution) -> Result<MixingTime> {
    let d = model.dim();
    check_dim("mixing model", 3, d)?;
    let n = cfg.n_samples;
    let mut r = rng.child("data").rng();
    let mut x0 = vec![0.0; n * d];
    for row in x0.chunks_exact_mut(d) {
        cfg.data.sample_into(&mut r, row);
    }
    let mut r = rng.child("noise").rng();
    let xi: Vec<f64> = (0..n * d).map(|_| normal(&mut r)).collect();
    let mut r = rng.child("reference").rng();
    let std = 1.0 / model.scale().sqrt();
    let reference: Vec<f64> = (0..n * d).map(|_| std * normal(&mut r)).collect();
    let proj = rng.child("projections");
    let b_end = model.schedule().integral(model.horizon())?;
    let tested: Vec<f64> = cfg
        .b_grid
        .iter()
        .copied()
        .filter(|b| *b <= b_end * (1.0 + 1e-12))
        .collect();
    if tested.is_empty() {
        return Err(Error::Invalid("no tested B lies inside the horizon".into()));
    }
    let distance = |b: f64| -> Result<f64> {
        let t = model
            .schedule()
            .time_for_integral(b)
            .unwrap_or(model.horizon())
            .min(model.horizon());
        let kern = model.transition_kernel(t)?;
        let s = kern.cov_sqrt();
        let mut xt = vec![0.0; n * d];
        for p in 0..n {
            let a = DVector::from_column_slice(&x0[p * d..(p + 1) * d]);
            let e = DVector::from_column_slice(&xi[p * d..(p + 1) * d]);
            let v = &kern.mean_map * a + &s * e;
            xt[p * d..(p + 1) * d].copy_from_slice(v.as_slice());
        }
        sliced_w2(&xt, &reference, d, cfg.n_projections, proj)
    };
    // Scan in blocks so the search stops soon after the first crossing.
    for block in tested.chunks(MIXING_BLOCK) {
        let dists = map_collect(exec, block.len(), |k| distance(block[k]));
        for (&b, dist) in block.iter().zip(dists) {
            if dist? < cfg.threshold {
                return Ok(MixingTime { b, censored: false });
            }
        }
    }
    Ok(MixingTime {
        b: *tested.last().expect("nonempty"),
        censored: true,
    })
}

/// First integrated time at which each model's marginal of plane data comes
/// within `threshold` sliced-W2 of its stationary law. Both models see the
/// same data, noise, reference samples and projections.
pub fn mixing_rate_compare(
    iso: &ForwardModel,
    aniso: &ForwardModel,
    cfg: &MixingConfig,
    rng: RngSpec,
    exec: Execution,
) -> Result<MixingReport> {
    let tr = |m: &ForwardModel| m.metric().evaluate(&[0.0; 3]).trace();
    let (a, b) = (tr(iso), tr(aniso));
    if (a - b).abs() > 1e-9 {
        return Err(Error::Invalid(format!("metric traces differ: {a} vs {b}")));
    }
    Ok(MixingReport {
        iso: mixing_time(iso, cfg, rng, exec)?,
        aniso: mixing_time(aniso, cfg, rng, exec)?,
    })
}

/// One of the three forward processes compared on plane data.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Toy3dScenario {
    FixedVp,
    Fp,
    FpRegularized,
}

impl Toy3dScenario {
    pub const ALL: [Toy3dScenario; 3] = [Toy3dScenario::FixedVp, Toy3dScenario::Fp, Toy3dScenario::FpRegularized];

    pub fn as_str(&self) -> &'static str {
        match self {
            Toy3dScenario::FixedVp => "vp",
            Toy3dScenario::Fp => "fp",
            Toy3dScenario::FpRegularized => "fp_reg",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Toy3dConfig {
    pub plane: PlaneGaussian,
    pub hidden: Vec<usize>,
    pub iterations: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub forward_lr: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    /// Hold `tr R⁻¹` at the VP value so the FP models cannot win by
    /// noising faster overall.
    pub trace_normalized: bool,
    /// Times at which the learned field is compared to the projection
    /// field; the reported score is the mean over them.
    pub eval_times: Vec<f64>,
    pub grid: GridSpec,
    pub seed: u64,
}

impl Toy3dConfig {
    pub fn new(seed: u64) -> Self {
        let plane = PlaneGaussian::default();
        Self {
            plane,
            hidden: vec![64, 64],
            iterations: 4000,
            batch_size: DEFAULT_BATCH,
            lr: 1e-3,
            forward_lr: 1e-2,
            lambda1: DEFAULT_LAMBDA,
            lambda2: DEFAULT_LAMBDA,
            trace_normalized: true,
            eval_times: vec![0.1, 0.25, 0.5],
            grid: GridSpec::around_plane(plane.plane_z),
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Toy3dRun {
    pub scenario: Toy3dScenario,
    /// Mean alignment over `eval_times`.
    pub alignment: f64,
    pub reports: Vec<AlignmentReport>,
    pub state: TrainState,
}

/// Trains the fixed VP, unregularized FP-Noise and regularized FP-Noise
/// models on the same data stream and network initialization, then scores
/// the generative field `-v` of each against the projection field.
pub fn run_toy3d(cfg: &Toy3dConfig, exec: Execution) -> Result<Vec<Toy3dRun>> {
    let schedule = TimeSchedule::default();
    let arch = ScoreNetArch::new(3, cfg.hidden.clone(), true)?;
    let net = ScoreNet::new(arch, schedule, &mut RngSpec::for_purpose(cfg.seed, "toy3d/init").rng());
    let runs = map_collect(exec, Toy3dScenario::ALL.len(), |k| -> Result<Toy3dRun> {
        let scenario = Toy3dScenario::ALL[k];
        let (model, mode, lambda) = match scenario {
            Toy3dScenario::FixedVp => (ForwardModel::vp(3, schedule)?, StageMode::ScoreOnly, (0.0, 0.0)),
            Toy3dScenario::Fp => (
                ForwardModel::fp_noise_with(SpdParam::identity(3), cfg.trace_normalized, schedule)?,
                StageMode::Joint,
                (0.0, 0.0),
            ),
            Toy3dScenario::FpRegularized => (
                ForwardModel::fp_noise_with(SpdParam::identity(3), cfg.trace_normalized, schedule)?,
                StageMode::Joint,
                (cfg.lambda1, cfg.lambda2),
            ),
        };
        let mut tc = TrainConfig::new(Dataset::Plane(cfg.plane), cfg.seed);
        tc.iterations = cfg.iterations;
        tc.batch_size = cfg.batch_size;
        tc.lr = cfg.lr;
        tc.forward_lr = cfg.forward_lr;
        tc.mode = mode;
        (tc.lambda1, tc.lambda2) = lambda;
        let state = fit(&tc, model, net.clone())?;
        let flow = ProbabilityFlow::new(&state.model, &state.net)?;
        let field = GenerativeField(flow);
        let reports = cfg
            .eval_times
            .iter()
            .map(|&t| alignment_metric(&field, t, cfg.plane.plane_z, cfg.grid))
            .collect::<Result<Vec<_>>>()?;
        let alignment = reports.iter().map(|r| r.mean).sum::<f64>() / reports.len() as f64;
        Ok(Toy3dRun {
            scenario,
            alignment,
            reports,
            state,
        })
    });
    runs.into_iter().collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn w2_examples() {
        let id = DMatrix::<f64>::identity(2, 2);
        assert_eq!(w2_gaussian(&DVector::zeros(2), &id).unwrap(), 0.0);
        assert_eq!(w2_gaussian(&DVector::from_vec(vec![3.0, 4.0]), &id).unwrap(), 25.0);
        let v = w2_gaussian(&DVector::zeros(1), &DMatrix::from_element(1, 1, 4.0)).unwrap();
        assert!((v - 1.0).abs() < 1e-15);
        assert!(w2_gaussian(&DVector::zeros(1), &DMatrix::from_element(1, 1, -1.0)).is_err());
    }

    #[test]
    fn moment_examples() {
        let r = empirical_moments(&[0.0; 6], 3).unwrap();
        assert_eq!(r.mean.amax(), 0.0);
        assert_eq!(r.cov.amax(), 0.0);
        let r = empirical_moments(&[-1.0, 1.0], 1).unwrap();
        assert_eq!(r.mean[0], 0.0);
        assert_eq!(r.cov[(0, 0)], 2.0);
        assert!(empirical_moments(&[1.0], 1).is_err());
    }

    #[test]
    fn one_dimensional_w2() {
        assert_eq!(w2_1d_sorted(&[0.0, 1.0], &[0.0, 1.0]), 0.0);
        assert!((w2_1d_sorted(&[0.0, 1.0], &[2.0, 3.0]) - 2.0).abs() < 1e-15);
        // Unequal sizes: {0} vs {-1, 1} gives W2² = ½·1 + ½·1.
        assert!((w2_1d_sorted(&[0.0], &[-1.0, 1.0]) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn vertical_and_horizontal_fields() {
        use crate::simulate::FnField;
        let vertical = FnField {
            dim: 3,
            f: |x: &[f64], _t: f64, out: &mut [f64]| {
                out[0] = 0.0;
                out[1] = 0.0;
                out[2] = 2.0 - x[2];
            },
        };
        let grid = GridSpec::around_plane(2.0);
        let r = alignment_metric(&vertical, 0.5, 2.0, grid).unwrap();
        assert!((r.mean - 1.0).abs() < 1e-15);
        assert_eq!(r.excluded, 0);
        let horizontal = FnField {
            dim: 3,
            f: |_x: &[f64], _t: f64, out: &mut [f64]| {
                out.copy_from_slice(&[1.0, 0.5, 0.0]);
            },
        };
        assert_eq!(alignment_metric(&horizontal, 0.5, 2.0, grid).unwrap().mean, 0.0);
    }
}
