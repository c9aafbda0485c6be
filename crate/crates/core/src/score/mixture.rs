use std::f64::consts::PI;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::Rng;

use crate::error::{check_dim, Error, Result};
use crate::rng::fill_normal;
use crate::sde::ForwardModel;

use super::ScoreFunction;

/// Finite Gaussian mixture `Σ wᵢ N(μᵢ, Σᵢ)`.
#[derive(Debug, Clone)]
pub struct MixtureSpec {
    weights: Vec<f64>,
    means: Vec<DVector<f64>>,
    covs: Vec<DMatrix<f64>>,
    factors: Vec<DMatrix<f64>>,
}

impl PartialEq for MixtureSpec {
    fn eq(&self, other: &Self) -> bool {
        self.weights == other.weights && self.means == other.means && self.covs == other.covs
    }
}

impl MixtureSpec {
    pub fn new(weights: Vec<f64>, means: Vec<DVector<f64>>, covs: Vec<DMatrix<f64>>) -> Result<Self> {
        if weights.is_empty() {
            return Err(Error::Invalid("mixture needs at least one component".into()));
        }
        check_dim("mixture means", weights.len(), means.len())?;
        check_dim("mixture covariances", weights.len(), covs.len())?;
        if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::Invalid("mixture weights must be nonnegative".into()));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::Invalid(format!("mixture weights sum to {total}, expected 1")));
        }
        let dim = means[0].len();
        let mut factors = Vec::with_capacity(covs.len());
        for (m, c) in means.iter().zip(&covs) {
            check_dim("mixture mean", dim, m.len())?;
            check_dim("mixture covariance", dim, c.nrows())?;
            check_dim("mixture covariance (square)", dim, c.ncols())?;
            let chol = c.clone().cholesky().ok_or(Error::NotPositiveDefinite {
                min_eigenvalue: c.symmetric_eigenvalues().min(),
            })?;
            factors.push(chol.l());
        }
        Ok(Self {
            weights,
            means,
            covs,
            factors,
        })
    }

    /// Single Gaussian.
    pub fn gaussian(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        Self::new(vec![1.0], vec![mean], vec![cov])
    }

    /// Equal-weight components sharing the isotropic variance `var`.
    pub fn isotropic(means: Vec<DVector<f64>>, var: f64) -> Result<Self> {
        let k = means.len();
        let d = means.first().map_or(0, |m| m.len());
        Self::new(vec![1.0 / k as f64; k], means, vec![DMatrix::identity(d, d) * var; k])
    }

    pub fn dim(&self) -> usize {
        self.means[0].len()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn means(&self) -> &[DVector<f64>] {
        &self.means
    }

    pub fn covs(&self) -> &[DMatrix<f64>] {
        &self.covs
    }

    pub fn sample_into<R: Rng + ?Sized>(&self, rng: &mut R, out: &mut [f64]) {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut k = self.weights.len() - 1;
        for (i, w) in self.weights.iter().enumerate() {
            acc += w;
            if u < acc {
                k = i;
                break;
            }
        }
        let d = self.dim();
        let mut xi = vec![0.0; d];
        fill_normal(rng, &mut xi);
        let l = &self.factors[k];
        for i in 0..d {
            out[i] = self.means[k][i] + (0..=i).map(|j| l[(i, j)] * xi[j]).sum::<f64>();
        }
    }

    /// `n` samples, row-major.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R, n: usize) -> Vec<f64> {
        let d = self.dim();
        let mut out = vec![0.0; n * d];
        for row in out.chunks_exact_mut(d) {
            self.sample_into(rng, row);
        }
        out
    }

    pub fn log_density(&self, x: &DVector<f64>) -> Result<f64> {
        check_dim("mixture point", self.dim(), x.len())?;
        let comps = Pushed::identity(self)?;
        Ok(comps.log_density(x.as_slice()))
    }
}

struct Component {
    log_weight: f64,
    mean: DVector<f64>,
    chol: Cholesky<f64, Dyn>,
    log_norm: f64,
}

/// Mixture pushed through a Gaussian transition kernel.
struct Pushed {
    comps: Vec<Component>,
}

impl Pushed {
    fn build(mix: &MixtureSpec, mean_map: &DMatrix<f64>, extra_cov: Option<&DMatrix<f64>>) -> Result<Self> {
        let d = mix.dim() as f64;
        let mut comps = Vec::with_capacity(mix.weights.len());
        for ((w, m), c) in mix.weights.iter().zip(&mix.means).zip(&mix.covs) {
            if *w == 0.0 {
                continue;
            }
            let mut cov = mean_map * c * mean_map.transpose();
            if let Some(e) = extra_cov {
                cov += e;
            }
            let cov = (&cov + cov.transpose()) * 0.5;
            let chol = cov.clone().cholesky().ok_or(Error::NotPositiveDefinite {
                min_eigenvalue: cov.symmetric_eigenvalues().min(),
            })?;
            let log_det: f64 = chol.l_dirty().diagonal().iter().map(|v| 2.0 * v.ln()).sum();
            comps.push(Component {
                log_weight: w.ln(),
                mean: mean_map * m,
                chol,
                log_norm: -0.5 * (d * (2.0 * PI).ln() + log_det),
            });
        }
        Ok(Self { comps })
    }

    fn identity(mix: &MixtureSpec) -> Result<Self> {
        let n = mix.dim();
        Self::build(mix, &DMatrix::identity(n, n), None)
    }

    fn at_time(mix: &MixtureSpec, model: &ForwardModel, t: f64) -> Result<Self> {
        check_dim("mixture vs model", model.dim(), mix.dim())?;
        let k = model.transition_kernel(t)?;
        Self::build(mix, &k.mean_map, Some(&k.cov))
    }

    /// Per-component log joint terms and the precision-weighted residuals.
    fn terms(&self, x: &[f64]) -> (Vec<f64>, Vec<DVector<f64>>) {
        let x = DVector::from_column_slice(x);
        let mut logs = Vec::with_capacity(self.comps.len());
        let mut grads = Vec::with_capacity(self.comps.len());
        for c in &self.comps {
            let r = &x - &c.mean;
            let p_r = c.chol.solve(&r);
            logs.push(c.log_weight + c.log_norm - 0.5 * r.dot(&p_r));
            grads.push(-p_r);
        }
        (logs, grads)
    }

    fn log_density(&self, x: &[f64]) -> f64 {
        let (logs, _) = self.terms(x);
        log_sum_exp(&logs)
    }

    fn score_into(&self, x: &[f64], out: &mut [f64]) {
        let (logs, grads) = self.terms(x);
        let lse = log_sum_exp(&logs);
        out.iter_mut().for_each(|o| *o = 0.0);
        for (l, g) in logs.iter().zip(&grads) {
            let r = (l - lse).exp();
            for (o, gi) in out.iter_mut().zip(g.iter()) {
                *o += r * gi;
            }
        }
    }
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Exact score of the time-`t` marginal of mixture data under a model with
/// a closed-form kernel.
pub fn mixture_score_at_time(
    mix: &MixtureSpec,
    model: &ForwardModel,
    x: &DVector<f64>,
    t: f64,
) -> Result<DVector<f64>> {
    check_dim("mixture score point", mix.dim(), x.len())?;
    let p = Pushed::at_time(mix, model, t)?;
    let mut out = DVector::zeros(x.len());
    p.score_into(x.as_slice(), out.as_mut_slice());
    Ok(out)
}

/// [`mixture_score_at_time`] as a [`ScoreFunction`].
#[derive(Debug, Clone)]
pub struct MixtureScore {
    mix: MixtureSpec,
    model: ForwardModel,
}

impl MixtureScore {
    pub fn new(mix: MixtureSpec, model: ForwardModel) -> Result<Self> {
        Pushed::at_time(&mix, &model, model.horizon())?;
        Ok(Self { mix, model })
    }

    pub fn log_density(&self, x: &DVector<f64>, t: f64) -> Result<f64> {
        check_dim("mixture point", self.mix.dim(), x.len())?;
        Ok(Pushed::at_time(&self.mix, &self.model, t)?.log_density(x.as_slice()))
    }

    fn pushed(&self, t: f64) -> Option<Pushed> {
        Pushed::at_time(&self.mix, &self.model, t.clamp(0.0, self.model.horizon())).ok()
    }
}

impl ScoreFunction for MixtureScore {
    fn dim(&self) -> usize {
        self.mix.dim()
    }

    fn score_into(&self, x: &[f64], t: f64, out: &mut [f64]) {
        match self.pushed(t) {
            Some(p) => p.score_into(x, out),
            None => out.iter_mut().for_each(|o| *o = f64::NAN),
        }
    }

    fn score_batch(&self, xs: &[f64], t: f64, out: &mut [f64]) {
        let d = self.dim();
        match self.pushed(t) {
            Some(p) => {
                for (x, o) in xs.chunks_exact(d).zip(out.chunks_exact_mut(d)) {
                    p.score_into(x, o);
                }
            }
            None => out.iter_mut().for_each(|o| *o = f64::NAN),
        }
    }
}
