use nalgebra::{DMatrix, DVector};

use crate::error::{check_dim, Error, Result};
use crate::sde::GaussianKernel;

use super::ScoreFunction;

/// `-Σ⁻¹(x - μ)`.
pub fn gaussian_score(mean: &DVector<f64>, cov: &DMatrix<f64>, x: &DVector<f64>) -> Result<DVector<f64>> {
    check_dim("gaussian_score covariance", mean.len(), cov.nrows())?;
    check_dim("gaussian_score point", mean.len(), x.len())?;
    let chol = cov.clone().cholesky().ok_or(Error::NotPositiveDefinite {
        min_eigenvalue: cov.symmetric_eigenvalues().min(),
    })?;
    Ok(-chol.solve(&(x - mean)))
}

/// `∇ log p(x_t | x_0)` for a Gaussian transition kernel.
pub fn conditional_score(kernel: &GaussianKernel, x0: &DVector<f64>, xt: &DVector<f64>) -> Result<DVector<f64>> {
    check_dim("conditional_score x_t", kernel.dim(), xt.len())?;
    let precision = kernel.precision()?;
    Ok(-(precision * (xt - kernel.mean(x0)?)))
}

/// Score of the stationary law `N(0, I/m)`: `-m x` at every time.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StationaryScore {
    pub dim: usize,
    pub scale: f64,
}

impl StationaryScore {
    pub fn new(dim: usize, scale: f64) -> Self {
        Self { dim, scale }
    }
}

impl ScoreFunction for StationaryScore {
    fn dim(&self) -> usize {
        self.dim
    }

    fn score_into(&self, x: &[f64], _t: f64, out: &mut [f64]) {
        for (o, v) in out.iter_mut().zip(x) {
            *o = -self.scale * v;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ZeroScore {
    pub dim: usize,
}

impl ScoreFunction for ZeroScore {
    fn dim(&self) -> usize {
        self.dim
    }

    fn score_into(&self, _x: &[f64], _t: f64, out: &mut [f64]) {
        out.iter_mut().for_each(|o| *o = 0.0);
    }
}
