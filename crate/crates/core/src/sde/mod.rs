//! Forward SDE family, closed-form transition kernels and stationarity
//! residuals.
//!
//! Every model is an instance of
//!
//! ```text
//! dX = m·(β'(t)/2)·[-R⁻¹(X)X - 2ωX + ∇·R⁻¹(X)] dt + √(β'(t) R⁻¹(X)) dW
//! ```
//!
//! with `R⁻¹` symmetric positive (semi-)definite, `ω` antisymmetric and scale
//! `m > 0`. The standard Gaussian `N(0, I/m)` is stationary for all of them;
//! VP is the special case `R⁻¹ = I`, `ω = 0`, `m = 1`. VE is carried along as
//! the one kind outside the family.

mod fpk;
mod kernel;
mod metric;
mod schedule;

pub use fpk::{
    completeness_probe, fpk_residual, probe_grid, CompletenessReport, FiniteDifferenceLogDensity, GaussianLogDensity,
    LinearDynamics, LogDensity, LogJet, StationaryDynamics, COMPLETENESS_DEFECT_TOL, COMPLETENESS_RESIDUAL_TOL,
    DENSITY_FD_STEP,
};
pub use kernel::GaussianKernel;
pub use metric::{divergence_term, divergence_term_fd, DiagonalEntry, MetricField, DIVERGENCE_FD_STEP};
pub use schedule::{TimeSchedule, VeSigma, T_EPS};

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{check_dim, Error, Result};
use crate::matrix_param::{
    assemble_damped, max_abs, psd_sqrt, realize_antisym, realize_spd, spd_sqrt, symmetrize, AntisymParam, DampedBlocks,
    SpdParam, SYMMETRY_TOL,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ModelKind {
    Vp,
    Ve,
    FpDrift,
    FpNoise,
    FpLinear,
    FpGeneral,
    FpDamped,
}

impl ModelKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            ModelKind::Vp => "VP",
            ModelKind::Ve => "VE",
            ModelKind::FpDrift => "FP_DRIFT",
            ModelKind::FpNoise => "FP_NOISE",
            ModelKind::FpLinear => "FP_LINEAR",
            ModelKind::FpGeneral => "FP_GENERAL",
            ModelKind::FpDamped => "FP_DAMPED",
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "VP" => ModelKind::Vp,
            "VE" => ModelKind::Ve,
            "FP_DRIFT" => ModelKind::FpDrift,
            "FP_NOISE" => ModelKind::FpNoise,
            "FP_LINEAR" => ModelKind::FpLinear,
            "FP_GENERAL" => ModelKind::FpGeneral,
            "FP_DAMPED" => ModelKind::FpDamped,
            other => return Err(Error::Invalid(format!("unknown model kind {other:?}"))),
        })
    }
}

/// The learnable structure behind a model's matrices.
#[derive(Debug, Clone, PartialEq)]
pub enum ForwardParams {
    Fixed,
    Drift(AntisymParam),
    /// With `trace_normalized`, the realized metric is rescaled to trace
    /// `dim`, the noise budget of VP.
    Noise {
        metric: SpdParam,
        trace_normalized: bool,
    },
    General {
        metric: SpdParam,
        omega: AntisymParam,
    },
    Damped(DampedBlocks),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardModel {
    kind: ModelKind,
    dim: usize,
    schedule: TimeSchedule,
    scale: f64,
    params: ForwardParams,
    metric: MetricField,
    omega: DMatrix<f64>,
    ve: Option<VeSigma>,
    // Cached for constant metrics.
    metric_sqrt: Option<DMatrix<f64>>,
    linear: Option<DMatrix<f64>>,
    metric_eigen: Option<(DVector<f64>, DMatrix<f64>)>,
}

fn validate_antisym(omega: &DMatrix<f64>) -> Result<()> {
    check_dim("omega (square)", omega.nrows(), omega.ncols())?;
    let defect = max_abs(&(omega + omega.transpose()));
    if defect > SYMMETRY_TOL * max_abs(omega).max(1.0) {
        return Err(Error::Invalid(format!(
            "omega is not antisymmetric (defect {defect:e})"
        )));
    }
    Ok(())
}

impl ForwardModel {
    fn build(
        kind: ModelKind,
        schedule: TimeSchedule,
        params: ForwardParams,
        metric: MetricField,
        omega: DMatrix<f64>,
        ve: Option<VeSigma>,
    ) -> Result<Self> {
        let dim = metric.dim();
        check_dim("omega", dim, omega.nrows())?;
        validate_antisym(&omega)?;
        let mut model = Self {
            kind,
            dim,
            schedule,
            scale: 1.0,
            params,
            metric,
            omega,
            ve,
            metric_sqrt: None,
            linear: None,
            metric_eigen: None,
        };
        model.refresh_cache()?;
        Ok(model)
    }

    fn refresh_cache(&mut self) -> Result<()> {
        if let MetricField::Constant(r) = &self.metric {
            let sqrt = if self.kind == ModelKind::FpDamped {
                psd_sqrt(r)?
            } else {
                spd_sqrt(r)?
            };
            self.metric_sqrt = Some(sqrt);
            self.linear = Some((r * -0.5 - &self.omega) * self.scale);
            let eig = SymmetricEigen::new(r.clone());
            self.metric_eigen = Some((eig.eigenvalues, eig.eigenvectors));
        }
        Ok(())
    }

    pub fn vp(dim: usize, schedule: TimeSchedule) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Invalid("dim must be positive".into()));
        }
        Self::build(
            ModelKind::Vp,
            schedule,
            ForwardParams::Fixed,
            MetricField::Constant(DMatrix::identity(dim, dim)),
            DMatrix::zeros(dim, dim),
            None,
        )
    }

    /// Variance-exploding process `dX = √(dσ²/dt) dW`; only the horizon of
    /// `schedule` is used by the dynamics.
    pub fn ve(dim: usize, sigma: VeSigma, schedule: TimeSchedule) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Invalid("dim must be positive".into()));
        }
        Self::build(
            ModelKind::Ve,
            schedule,
            ForwardParams::Fixed,
            MetricField::Constant(DMatrix::identity(dim, dim)),
            DMatrix::zeros(dim, dim),
            Some(sigma),
        )
    }

    /// Identity metric, learnable symplectic drift.
    pub fn fp_drift(omega: AntisymParam, schedule: TimeSchedule) -> Result<Self> {
        let dim = omega.dim();
        let w = realize_antisym(&omega)?;
        Self::build(
            ModelKind::FpDrift,
            schedule,
            ForwardParams::Drift(omega),
            MetricField::Constant(DMatrix::identity(dim, dim)),
            w,
            None,
        )
    }

    /// Learnable SPD metric, no symplectic drift.
    pub fn fp_noise(metric: SpdParam, schedule: TimeSchedule) -> Result<Self> {
        Self::fp_noise_with(metric, false, schedule)
    }

    /// [`ForwardModel::fp_noise`] with the metric optionally rescaled so that
    /// `tr R⁻¹ = dim`.
    pub fn fp_noise_with(metric: SpdParam, trace_normalized: bool, schedule: TimeSchedule) -> Result<Self> {
        let dim = metric.dim();
        let mut r = realize_spd(&metric)?;
        if trace_normalized {
            r *= dim as f64 / r.trace();
        }
        Self::build(
            ModelKind::FpNoise,
            schedule,
            ForwardParams::Noise {
                metric,
                trace_normalized,
            },
            MetricField::Constant(r),
            DMatrix::zeros(dim, dim),
            None,
        )
    }

    /// Constant matrices given directly.
    pub fn fp_linear(r_inv: DMatrix<f64>, omega: DMatrix<f64>, schedule: TimeSchedule) -> Result<Self> {
        check_dim("r_inv (square)", r_inv.nrows(), r_inv.ncols())?;
        spd_sqrt(&r_inv)?;
        Self::build(
            ModelKind::FpLinear,
            schedule,
            ForwardParams::Fixed,
            MetricField::Constant(symmetrize(&r_inv)),
            omega,
            None,
        )
    }

    pub fn fp_general(metric: MetricField, omega: DMatrix<f64>, schedule: TimeSchedule) -> Result<Self> {
        let metric = match metric {
            MetricField::Constant(r) => {
                spd_sqrt(&r)?;
                MetricField::Constant(symmetrize(&r))
            }
            MetricField::Diagonal(entries) => MetricField::diagonal(entries)?,
        };
        Self::build(
            ModelKind::FpGeneral,
            schedule,
            ForwardParams::Fixed,
            metric,
            omega,
            None,
        )
    }

    pub fn fp_general_param(metric: SpdParam, omega: AntisymParam, schedule: TimeSchedule) -> Result<Self> {
        check_dim("FP_GENERAL omega parameter", metric.dim(), omega.dim())?;
        let r = realize_spd(&metric)?;
        let w = realize_antisym(&omega)?;
        Self::build(
            ModelKind::FpGeneral,
            schedule,
            ForwardParams::General { metric, omega },
            MetricField::Constant(r),
            w,
            None,
        )
    }

    /// Phase-space model with a degenerate metric.
    pub fn fp_damped(blocks: DampedBlocks, schedule: TimeSchedule) -> Result<Self> {
        let (w, r) = assemble_damped(&blocks)?;
        Self::build(
            ModelKind::FpDamped,
            schedule,
            ForwardParams::Damped(blocks),
            MetricField::Constant(r),
            w,
            None,
        )
    }

    /// Scales the drift by `m`, making `N(0, I/m)` stationary.
    pub fn with_scale(mut self, scale: f64) -> Result<Self> {
        if !(scale.is_finite() && scale > 0.0) {
            return Err(Error::Invalid(format!("scale must be positive, got {scale}")));
        }
        self.scale = scale;
        self.refresh_cache()?;
        Ok(self)
    }

    pub fn kind(&self) -> ModelKind {
        self.kind
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn schedule(&self) -> &TimeSchedule {
        &self.schedule
    }

    pub fn horizon(&self) -> f64 {
        self.schedule.horizon
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn params(&self) -> &ForwardParams {
        &self.params
    }

    pub fn metric(&self) -> &MetricField {
        &self.metric
    }

    pub fn omega(&self) -> &DMatrix<f64> {
        &self.omega
    }

    pub fn ve_sigma(&self) -> Option<VeSigma> {
        self.ve
    }

    /// Learnable parameters as one flat vector (empty for fixed models).
    pub fn flat_params(&self) -> Vec<f64> {
        match &self.params {
            ForwardParams::Fixed => Vec::new(),
            ForwardParams::Drift(w) => w.to_flat(),
            ForwardParams::Noise { metric, .. } => metric.to_flat(),
            ForwardParams::General { metric, omega } => {
                let mut v = metric.to_flat();
                v.extend(omega.to_flat());
                v
            }
            ForwardParams::Damped(b) => {
                let mut v = b.a_eigs.clone();
                v.extend_from_slice(&b.b_eigs);
                v
            }
        }
    }

    /// Same model with its learnable parameters replaced.
    pub fn with_flat_params(&self, flat: &[f64]) -> Result<Self> {
        let n = self.dim;
        let rebuilt = match &self.params {
            ForwardParams::Fixed => {
                check_dim("forward parameters", 0, flat.len())?;
                return Ok(self.clone());
            }
            ForwardParams::Drift(_) => Self::fp_drift(AntisymParam::from_flat(n, flat)?, self.schedule)?,
            ForwardParams::Noise { trace_normalized, .. } => {
                Self::fp_noise_with(SpdParam::from_flat(n, flat)?, *trace_normalized, self.schedule)?
            }
            ForwardParams::General { metric, .. } => {
                let k = metric.to_flat().len();
                check_dim(
                    "forward parameters",
                    k + crate::matrix_param::generator_len(n) + n / 2,
                    flat.len(),
                )?;
                Self::fp_general_param(
                    SpdParam::from_flat(n, &flat[..k])?,
                    AntisymParam::from_flat(n, &flat[k..])?,
                    self.schedule,
                )?
            }
            ForwardParams::Damped(b) => {
                let d = b.half_dim();
                check_dim("forward parameters", 2 * d, flat.len())?;
                Self::fp_damped(
                    DampedBlocks::new(flat[..d].to_vec(), flat[d..].to_vec())?,
                    self.schedule,
                )?
            }
        };
        rebuilt.with_scale(self.scale)
    }

    /// `β'(t)`, or `dσ²/dt` for VE.
    #[inline]
    fn rate(&self, t: f64) -> f64 {
        match self.ve {
            Some(ve) => ve.sigma_sq_rate(t, self.schedule.horizon),
            None => self.schedule.rate_unchecked(t),
        }
    }

    /// Drift without argument checks; `x` and `out` must have length `dim`.
    #[inline]
    pub fn drift_into(&self, x: &[f64], t: f64, out: &mut [f64]) {
        if self.ve.is_some() {
            out.iter_mut().for_each(|o| *o = 0.0);
            return;
        }
        let rate = self.schedule.rate_unchecked(t);
        match (&self.metric, &self.linear) {
            (MetricField::Constant(_), Some(l)) => {
                let n = self.dim;
                for (i, o) in out.iter_mut().enumerate() {
                    let mut acc = 0.0;
                    for j in 0..n {
                        acc += l[(i, j)] * x[j];
                    }
                    *o = rate * acc;
                }
            }
            (MetricField::Diagonal(entries), _) => {
                let n = self.dim;
                let c = self.scale * rate * 0.5;
                for i in 0..n {
                    let (r, dr, _) = entries[i].jet(x[i]);
                    let mut wx = 0.0;
                    for j in 0..n {
                        wx += self.omega[(i, j)] * x[j];
                    }
                    out[i] = c * (-r * x[i] - 2.0 * wx + dr);
                }
            }
            (MetricField::Constant(_), None) => unreachable!("constant metric without cache"),
        }
    }

    /// `g(x, t)·ξ` without argument checks.
    #[inline]
    pub fn diffusion_apply_into(&self, x: &[f64], t: f64, xi: &[f64], out: &mut [f64]) {
        let rate = self.rate(t);
        match (&self.metric, &self.metric_sqrt) {
            (MetricField::Constant(_), Some(s)) => {
                let sr = rate.sqrt();
                let n = self.dim;
                for (i, o) in out.iter_mut().enumerate() {
                    let mut acc = 0.0;
                    for j in 0..n {
                        acc += s[(i, j)] * xi[j];
                    }
                    *o = sr * acc;
                }
            }
            (MetricField::Diagonal(entries), _) => {
                for i in 0..self.dim {
                    out[i] = (rate * entries[i].value(x[i])).sqrt() * xi[i];
                }
            }
            (MetricField::Constant(_), None) => unreachable!("constant metric without cache"),
        }
    }

    /// `D(x, t)·v` with `D = g gᵀ = β'(t) R⁻¹(x)`.
    #[inline]
    pub fn diffusion_tensor_apply_into(&self, x: &[f64], t: f64, v: &[f64], out: &mut [f64]) {
        let rate = self.rate(t);
        match &self.metric {
            MetricField::Constant(r) => {
                let n = self.dim;
                for (i, o) in out.iter_mut().enumerate() {
                    let mut acc = 0.0;
                    for j in 0..n {
                        acc += r[(i, j)] * v[j];
                    }
                    *o = rate * acc;
                }
            }
            MetricField::Diagonal(entries) => {
                for i in 0..self.dim {
                    out[i] = rate * entries[i].value(x[i]) * v[i];
                }
            }
        }
    }

    /// Row divergence `Σⱼ ∂ⱼ Dᵢⱼ(x, t)` of the diffusion tensor.
    #[inline]
    pub fn diffusion_tensor_divergence_into(&self, x: &[f64], t: f64, out: &mut [f64]) {
        self.metric.divergence_into(x, out);
        if !self.metric.is_constant() {
            let rate = self.rate(t);
            out.iter_mut().for_each(|o| *o *= rate);
        }
    }

    fn check_point(&self, x: &DVector<f64>, t: f64) -> Result<()> {
        check_dim("state vector", self.dim, x.len())?;
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("state vector"));
        }
        self.schedule.rate(t).map(|_| ())
    }

    pub fn drift(&self, x: &DVector<f64>, t: f64) -> Result<DVector<f64>> {
        self.check_point(x, t)?;
        let mut out = DVector::zeros(self.dim);
        self.drift_into(x.as_slice(), t, out.as_mut_slice());
        Ok(out)
    }

    /// The matrix `g(x, t) = √(β'(t) R⁻¹(x))`.
    pub fn diffusion_coeff(&self, x: &DVector<f64>, t: f64) -> Result<DMatrix<f64>> {
        self.check_point(x, t)?;
        let rate = self.rate(t);
        Ok(match (&self.metric, &self.metric_sqrt) {
            (MetricField::Constant(_), Some(s)) => s * rate.sqrt(),
            _ => {
                let r = self.metric.evaluate(x.as_slice()) * rate;
                psd_sqrt(&r)?
            }
        })
    }

    /// Time-frozen dynamics with unit rate, for stationarity checks.
    pub fn frozen(&self) -> FrozenModel<'_> {
        FrozenModel { model: self }
    }

    /// Closed-form law of `X_t | X_0`.
    ///
    /// Available for constant metrics when either `ω = 0` or `R⁻¹ = I`;
    /// the covariance formula is only established in those two cases.
    pub fn transition_kernel(&self, t: f64) -> Result<GaussianKernel> {
        let b = self.schedule.integral(t)?;
        if let Some(ve) = self.ve {
            let h = self.schedule.horizon;
            let var = ve.sigma(t, h).powi(2) - ve.sigma(0.0, h).powi(2);
            let n = self.dim;
            return Ok(GaussianKernel::from_eigen(
                t,
                DMatrix::identity(n, n),
                DVector::from_element(n, var),
                DMatrix::identity(n, n),
            ));
        }
        match self.kind {
            ModelKind::FpDamped => {
                return Err(Error::Unsupported(
                    "no closed-form kernel for degenerate (FP_DAMPED) models".into(),
                ))
            }
            ModelKind::Ve => unreachable!(),
            _ => {}
        }
        let (Some(l), Some((vals, vecs))) = (&self.linear, &self.metric_eigen) else {
            return Err(Error::Unsupported(
                "closed-form kernel needs a spatially constant metric".into(),
            ));
        };
        let MetricField::Constant(r) = &self.metric else {
            unreachable!()
        };
        let n = self.dim;
        let omega_zero = max_abs(&self.omega) == 0.0;
        let metric_identity = max_abs(&(r - DMatrix::<f64>::identity(n, n))) < 1e-14;
        if !omega_zero && !metric_identity {
            return Err(Error::Unsupported(
                "closed-form covariance is established only for omega = 0 or R^-1 = I".into(),
            ));
        }
        let mean_map = crate::matrix_param::matrix_exp(&(l * b))?;
        let m = self.scale;
        // (1/m)(I - exp(-m B R⁻¹)) in the eigenbasis of R⁻¹, via expm1.
        let cov_eigs = vals.map(|lam| -(-m * b * lam).exp_m1() / m);
        Ok(GaussianKernel::from_eigen(t, mean_map, cov_eigs, vecs.clone()))
    }
}

/// A model with `β' ≡ 1`, exposing the derivatives needed by the
/// Fokker–Planck operator.
pub struct FrozenModel<'a> {
    model: &'a ForwardModel,
}

impl StationaryDynamics for FrozenModel<'_> {
    fn dim(&self) -> usize {
        self.model.dim
    }

    fn drift_into(&self, x: &[f64], out: &mut [f64]) {
        let m = self.model;
        if m.ve.is_some() {
            out.iter_mut().for_each(|o| *o = 0.0);
            return;
        }
        match (&m.metric, &m.linear) {
            (_, Some(l)) => {
                for (i, o) in out.iter_mut().enumerate() {
                    *o = (0..m.dim).map(|j| l[(i, j)] * x[j]).sum();
                }
            }
            (MetricField::Diagonal(entries), None) => {
                for i in 0..m.dim {
                    let (r, dr, _) = entries[i].jet(x[i]);
                    let wx: f64 = (0..m.dim).map(|j| m.omega[(i, j)] * x[j]).sum();
                    out[i] = 0.5 * m.scale * (-r * x[i] - 2.0 * wx + dr);
                }
            }
            (MetricField::Constant(_), None) => unreachable!(),
        }
    }

    fn drift_divergence(&self, x: &[f64]) -> f64 {
        let m = self.model;
        if m.ve.is_some() {
            return 0.0;
        }
        match (&m.metric, &m.linear) {
            (_, Some(l)) => l.trace(),
            (MetricField::Diagonal(entries), None) => entries
                .iter()
                .zip(x)
                .map(|(e, xi)| {
                    let (r, dr, ddr) = e.jet(*xi);
                    0.5 * m.scale * (-dr * xi - r + ddr)
                })
                .sum(),
            (MetricField::Constant(_), None) => unreachable!(),
        }
    }

    fn diffusion(&self, x: &[f64]) -> DMatrix<f64> {
        self.model.metric.evaluate(x)
    }

    fn diffusion_row_divergence_into(&self, x: &[f64], out: &mut [f64]) {
        self.model.metric.divergence_into(x, out);
    }

    fn diffusion_double_divergence(&self, x: &[f64]) -> f64 {
        self.model.metric.double_divergence(x)
    }
}
