use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};

use crate::error::{check_dim, Error, Result};
use crate::matrix_param::{max_abs, SYMMETRY_TOL};

pub const DENSITY_FD_STEP: f64 = 1e-4;
pub const COMPLETENESS_DEFECT_TOL: f64 = 1e-8;
pub const COMPLETENESS_RESIDUAL_TOL: f64 = 1e-6;

/// Autonomous dynamics `dX = f(X) dt + g(X) dW` with `D = g gᵀ`.
pub trait StationaryDynamics {
    fn dim(&self) -> usize;
    fn drift_into(&self, x: &[f64], out: &mut [f64]);
    fn drift_divergence(&self, x: &[f64]) -> f64;
    fn diffusion(&self, x: &[f64]) -> DMatrix<f64>;
    /// `Σⱼ ∂ⱼ Dᵢⱼ`
    fn diffusion_row_divergence_into(&self, x: &[f64], out: &mut [f64]);
    /// `Σᵢⱼ ∂ᵢ∂ⱼ Dᵢⱼ`
    fn diffusion_double_divergence(&self, x: &[f64]) -> f64;
}

/// `f(x) = A x` with constant `D`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearDynamics {
    pub drift: DMatrix<f64>,
    pub diffusion: DMatrix<f64>,
}

impl LinearDynamics {
    pub fn new(drift: DMatrix<f64>, diffusion: DMatrix<f64>) -> Result<Self> {
        check_dim("linear drift (square)", drift.nrows(), drift.ncols())?;
        check_dim("diffusion rows", drift.nrows(), diffusion.nrows())?;
        check_dim("diffusion cols", drift.nrows(), diffusion.ncols())?;
        let defect = max_abs(&(&diffusion - diffusion.transpose()));
        if defect > SYMMETRY_TOL * max_abs(&diffusion).max(1.0) {
            return Err(Error::NotSymmetric(defect));
        }
        Ok(Self { drift, diffusion })
    }
}

impl StationaryDynamics for LinearDynamics {
    fn dim(&self) -> usize {
        self.drift.nrows()
    }

    fn drift_into(&self, x: &[f64], out: &mut [f64]) {
        let n = self.dim();
        for (i, o) in out.iter_mut().enumerate() {
            *o = (0..n).map(|j| self.drift[(i, j)] * x[j]).sum();
        }
    }

    fn drift_divergence(&self, _x: &[f64]) -> f64 {
        self.drift.trace()
    }

    fn diffusion(&self, _x: &[f64]) -> DMatrix<f64> {
        self.diffusion.clone()
    }

    fn diffusion_row_divergence_into(&self, _x: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|o| *o = 0.0);
    }

    fn diffusion_double_divergence(&self, _x: &[f64]) -> f64 {
        0.0
    }
}

/// `log p`, its gradient and Hessian at a point.
#[derive(Debug, Clone, PartialEq)]
pub struct LogJet {
    pub value: f64,
    pub grad: DVector<f64>,
    pub hess: DMatrix<f64>,
}

pub trait LogDensity {
    fn dim(&self) -> usize;
    fn log_jet(&self, x: &DVector<f64>) -> LogJet;
}

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianLogDensity {
    mean: DVector<f64>,
    precision: DMatrix<f64>,
    log_norm: f64,
}

impl GaussianLogDensity {
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        check_dim("gaussian covariance", mean.len(), cov.nrows())?;
        let chol = cov.clone().cholesky().ok_or(Error::NotPositiveDefinite {
            min_eigenvalue: f64::NAN,
        })?;
        let log_det: f64 = chol.l().diagonal().iter().map(|v| 2.0 * v.ln()).sum();
        let n = mean.len() as f64;
        Ok(Self {
            mean,
            precision: chol.inverse(),
            log_norm: -0.5 * (n * (2.0 * PI).ln() + log_det),
        })
    }

    /// `N(0, I/m)`.
    pub fn isotropic(dim: usize, scale: f64) -> Result<Self> {
        Self::new(DVector::zeros(dim), DMatrix::identity(dim, dim) / scale)
    }
}

impl LogDensity for GaussianLogDensity {
    fn dim(&self) -> usize {
        self.mean.len()
    }

    fn log_jet(&self, x: &DVector<f64>) -> LogJet {
        let r = x - &self.mean;
        let grad = -(&self.precision * &r);
        LogJet {
            value: self.log_norm + 0.5 * r.dot(&grad),
            grad,
            hess: -self.precision.clone(),
        }
    }
}

/// Derivatives of an arbitrary log-density by central differences.
pub struct FiniteDifferenceLogDensity<F> {
    dim: usize,
    log_p: F,
    step: f64,
}

impl<F: Fn(&[f64]) -> f64> FiniteDifferenceLogDensity<F> {
    pub fn new(dim: usize, log_p: F) -> Self {
        Self {
            dim,
            log_p,
            step: DENSITY_FD_STEP,
        }
    }
}

impl<F: Fn(&[f64]) -> f64> LogDensity for FiniteDifferenceLogDensity<F> {
    fn dim(&self) -> usize {
        self.dim
    }

    fn log_jet(&self, x: &DVector<f64>) -> LogJet {
        let n = self.dim;
        let h = self.step;
        let f = &self.log_p;
        let mut y = x.as_slice().to_vec();
        let f0 = f(&y);
        let mut grad = DVector::zeros(n);
        let mut hess = DMatrix::zeros(n, n);
        for i in 0..n {
            y[i] = x[i] + h;
            let fp = f(&y);
            y[i] = x[i] - h;
            let fm = f(&y);
            y[i] = x[i];
            grad[i] = (fp - fm) / (2.0 * h);
            hess[(i, i)] = (fp - 2.0 * f0 + fm) / (h * h);
            for j in 0..i {
                let mut corner = |si: f64, sj: f64| {
                    y[i] = x[i] + si * h;
                    y[j] = x[j] + sj * h;
                    let v = f(&y);
                    y[i] = x[i];
                    y[j] = x[j];
                    v
                };
                let v = (corner(1.0, 1.0) - corner(1.0, -1.0) - corner(-1.0, 1.0) + corner(-1.0, -1.0)) / (4.0 * h * h);
                hess[(i, j)] = v;
                hess[(j, i)] = v;
            }
        }
        LogJet { value: f0, grad, hess }
    }
}

/// `(L* p)(x) / p(x)` for the stationary Fokker–Planck operator
/// `L* p = -∇·(f p) + ½ Σᵢⱼ ∂ᵢ∂ⱼ(Dᵢⱼ p)`.
pub fn fpk_residual(dynamics: &dyn StationaryDynamics, density: &dyn LogDensity, x: &DVector<f64>) -> Result<f64> {
    let n = dynamics.dim();
    check_dim("fpk_residual density", n, density.dim())?;
    check_dim("fpk_residual point", n, x.len())?;
    let jet = density.log_jet(x);
    let xs = x.as_slice();
    let mut f = vec![0.0; n];
    dynamics.drift_into(xs, &mut f);
    let mut rowdiv = vec![0.0; n];
    dynamics.diffusion_row_divergence_into(xs, &mut rowdiv);
    let d = dynamics.diffusion(xs);
    let g = &jet.grad;

    let transport = dynamics.drift_divergence(xs) + f.iter().zip(g.iter()).map(|(a, b)| a * b).sum::<f64>();
    let mut diffusive = dynamics.diffusion_double_divergence(xs);
    diffusive += 2.0 * rowdiv.iter().zip(g.iter()).map(|(a, b)| a * b).sum::<f64>();
    for i in 0..n {
        for j in 0..n {
            diffusive += d[(i, j)] * (jet.hess[(i, j)] + g[i] * g[j]);
        }
    }
    let res = -transport + 0.5 * diffusive;
    if !res.is_finite() {
        return Err(Error::NonFinite("fpk residual"));
    }
    Ok(res)
}

/// Origin, `±c·eᵢ` and `c·(eᵢ ± eⱼ)` for `i < j`.
pub fn probe_grid(dim: usize, c: f64) -> Vec<DVector<f64>> {
    let mut pts = vec![DVector::zeros(dim)];
    for i in 0..dim {
        for s in [1.0, -1.0] {
            let mut p = DVector::zeros(dim);
            p[i] = s * c;
            pts.push(p);
        }
    }
    for i in 0..dim {
        for j in i + 1..dim {
            for s in [1.0, -1.0] {
                let mut p = DVector::zeros(dim);
                p[i] = c;
                p[j] = s * c;
                pts.push(p);
            }
        }
    }
    pts
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CompletenessReport {
    pub is_stationary_gaussian: bool,
    pub symmetric_defect: f64,
    pub max_residual: f64,
}

const PROBE_RADIUS: f64 = 1.5;

/// Decides whether `dX = A X dt + √R dW` leaves `N(0, I)` invariant.
///
/// The criterion is `A + Aᵀ + R = 0`; the Fokker–Planck residual on a probe
/// grid is reported alongside.
pub fn completeness_probe(a: &DMatrix<f64>, r: &DMatrix<f64>) -> Result<CompletenessReport> {
    if a.iter().chain(r.iter()).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("completeness_probe input"));
    }
    let dynamics = LinearDynamics::new(a.clone(), r.clone())?;
    let n = a.nrows();
    let density = GaussianLogDensity::isotropic(n, 1.0)?;
    let symmetric_defect = max_abs(&(a + a.transpose() + r));
    let mut max_residual = 0.0f64;
    for p in probe_grid(n, PROBE_RADIUS) {
        max_residual = max_residual.max(fpk_residual(&dynamics, &density, &p)?.abs());
    }
    Ok(CompletenessReport {
        is_stationary_gaussian: symmetric_defect < COMPLETENESS_DEFECT_TOL && max_residual < COMPLETENESS_RESIDUAL_TOL,
        symmetric_defect,
        max_residual,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mat(n: usize, v: &[f64]) -> DMatrix<f64> {
        DMatrix::from_row_slice(n, n, v)
    }

    #[test]
    fn probe_examples() {
        let w = mat(2, &[0.0, 1.0, -1.0, 0.0]);
        let id = DMatrix::<f64>::identity(2, 2);
        let rep = completeness_probe(&(-&w - &id * 0.5), &id).unwrap();
        assert!(rep.is_stationary_gaussian);
        assert!(rep.symmetric_defect < 1e-12);

        let rep = completeness_probe(&mat(2, &[-0.4, 0.0, 0.0, -0.5]), &id).unwrap();
        assert!(!rep.is_stationary_gaussian);
        assert!((rep.symmetric_defect - 0.2).abs() < 1e-15);
        assert!(rep.max_residual > 1e-3);

        let rep = completeness_probe(&w, &id).unwrap();
        assert!(!rep.is_stationary_gaussian);
    }

    #[test]
    fn residual_closed_form() {
        // ½(xᵀSx - tr S) with S = A + Aᵀ + R.
        let a = mat(2, &[-0.2, 0.7, -0.1, -0.9]);
        let r = mat(2, &[1.0, 0.2, 0.2, 0.5]);
        let dyn_ = LinearDynamics::new(a.clone(), r.clone()).unwrap();
        let dens = GaussianLogDensity::isotropic(2, 1.0).unwrap();
        let s = &a + a.transpose() + &r;
        for x in [[0.0, 0.0], [1.0, -2.0], [0.3, 0.4]] {
            let x = DVector::from_row_slice(&x);
            let want = 0.5 * ((x.transpose() * &s * &x)[0] - s.trace());
            let got = fpk_residual(&dyn_, &dens, &x).unwrap();
            assert!((got - want).abs() < 1e-13);
        }
    }

    #[test]
    fn finite_difference_density_matches_analytic() {
        let cov = mat(2, &[1.5, 0.3, 0.3, 0.7]);
        let g = GaussianLogDensity::new(DVector::from_vec(vec![0.2, -0.1]), cov).unwrap();
        let fd = FiniteDifferenceLogDensity::new(2, |y: &[f64]| g.log_jet(&DVector::from_row_slice(y)).value);
        let x = DVector::from_vec(vec![0.5, 1.0]);
        let a = g.log_jet(&x);
        let b = fd.log_jet(&x);
        assert!((a.grad - b.grad).amax() < 1e-7);
        assert!((a.hess - b.hess).amax() < 1e-5);
    }

    #[test]
    fn grid_size() {
        assert_eq!(probe_grid(3, 1.0).len(), 1 + 6 + 6);
    }
}
