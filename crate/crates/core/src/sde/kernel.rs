use nalgebra::{DMatrix, DVector};

use crate::error::{check_dim, Error, Result};

use super::schedule::T_EPS;

/// `X_t | X_0 = x₀ ~ N(M x₀, Σ)`, with `Σ` held in eigen-form.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianKernel {
    pub t: f64,
    pub mean_map: DMatrix<f64>,
    pub cov: DMatrix<f64>,
    cov_eigenvalues: DVector<f64>,
    cov_eigenvectors: DMatrix<f64>,
}

impl GaussianKernel {
    pub(crate) fn from_eigen(
        t: f64,
        mean_map: DMatrix<f64>,
        cov_eigenvalues: DVector<f64>,
        cov_eigenvectors: DMatrix<f64>,
    ) -> Self {
        let cov = Self::compose(&cov_eigenvectors, &cov_eigenvalues, |v| v);
        Self {
            t,
            mean_map,
            cov,
            cov_eigenvalues,
            cov_eigenvectors,
        }
    }

    fn compose(v: &DMatrix<f64>, eigs: &DVector<f64>, f: impl Fn(f64) -> f64) -> DMatrix<f64> {
        let mut scaled = v.clone();
        for (j, mut col) in scaled.column_iter_mut().enumerate() {
            col *= f(eigs[j]);
        }
        let m = scaled * v.transpose();
        (&m + m.transpose()) * 0.5
    }

    pub fn dim(&self) -> usize {
        self.mean_map.nrows()
    }

    pub fn cov_eigenvalues(&self) -> &DVector<f64> {
        &self.cov_eigenvalues
    }

    pub fn mean(&self, x0: &DVector<f64>) -> Result<DVector<f64>> {
        check_dim("kernel mean", self.dim(), x0.len())?;
        Ok(&self.mean_map * x0)
    }

    pub fn cov_sqrt(&self) -> DMatrix<f64> {
        Self::compose(&self.cov_eigenvectors, &self.cov_eigenvalues, |v| v.max(0.0).sqrt())
    }

    fn check_invertible(&self) -> Result<()> {
        if self.cov_eigenvalues.iter().any(|v| v.is_nan() || *v <= 0.0) {
            return Err(Error::SingularCovariance {
                t: self.t,
                t_eps: T_EPS,
            });
        }
        Ok(())
    }

    pub fn precision(&self) -> Result<DMatrix<f64>> {
        self.check_invertible()?;
        Ok(Self::compose(&self.cov_eigenvectors, &self.cov_eigenvalues, |v| {
            1.0 / v
        }))
    }

    pub fn cov_inv_sqrt(&self) -> Result<DMatrix<f64>> {
        self.check_invertible()?;
        Ok(Self::compose(&self.cov_eigenvectors, &self.cov_eigenvalues, |v| {
            1.0 / v.sqrt()
        }))
    }

    /// `M x₀ + Σ^{1/2} ξ`.
    pub fn sample(&self, x0: &DVector<f64>, xi: &DVector<f64>) -> Result<DVector<f64>> {
        check_dim("kernel noise", self.dim(), xi.len())?;
        Ok(self.mean(x0)? + self.cov_sqrt() * xi)
    }
}
