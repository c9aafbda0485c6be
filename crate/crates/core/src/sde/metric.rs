use nalgebra::{DMatrix, DVector};

use crate::error::{check_dim, Error, Result};

/// Central-difference step used when a metric has no analytic derivative.
pub const DIVERGENCE_FD_STEP: f64 = 1e-5;

/// Smooth positive scalar function of a single coordinate, with analytic
/// first and second derivatives.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DiagonalEntry {
    Constant(f64),
    /// `base + curvature · x²`
    Quadratic {
        base: f64,
        curvature: f64,
    },
    /// `low + (high - low) · sigmoid(slope · x)`
    Logistic {
        low: f64,
        high: f64,
        slope: f64,
    },
}

impl DiagonalEntry {
    fn validate(&self) -> Result<()> {
        let ok = match *self {
            DiagonalEntry::Constant(c) => c > 0.0,
            DiagonalEntry::Quadratic { base, curvature } => base > 0.0 && curvature >= 0.0,
            DiagonalEntry::Logistic { low, high, slope } => low > 0.0 && high > 0.0 && slope.is_finite(),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Invalid(format!(
                "diagonal metric entry {self:?} is not positive"
            )))
        }
    }

    /// Value, first and second derivative at `x`.
    #[inline]
    pub fn jet(&self, x: f64) -> (f64, f64, f64) {
        match *self {
            DiagonalEntry::Constant(c) => (c, 0.0, 0.0),
            DiagonalEntry::Quadratic { base, curvature } => {
                (base + curvature * x * x, 2.0 * curvature * x, 2.0 * curvature)
            }
            DiagonalEntry::Logistic { low, high, slope } => {
                let s = 1.0 / (1.0 + (-slope * x).exp());
                let ds = s * (1.0 - s);
                let span = high - low;
                (
                    low + span * s,
                    span * slope * ds,
                    span * slope * slope * ds * (1.0 - 2.0 * s),
                )
            }
        }
    }

    #[inline]
    pub fn value(&self, x: f64) -> f64 {
        self.jet(x).0
    }
}

/// The inverse metric `R⁻¹(x)`.
#[derive(Debug, Clone, PartialEq)]
pub enum MetricField {
    Constant(DMatrix<f64>),
    /// `R⁻¹(x) = diag(r₁(x₁), …, rₙ(xₙ))`.
    Diagonal(Vec<DiagonalEntry>),
}

impl MetricField {
    pub fn diagonal(entries: Vec<DiagonalEntry>) -> Result<Self> {
        for e in &entries {
            e.validate()?;
        }
        Ok(MetricField::Diagonal(entries))
    }

    pub fn dim(&self) -> usize {
        match self {
            MetricField::Constant(m) => m.nrows(),
            MetricField::Diagonal(e) => e.len(),
        }
    }

    pub fn is_constant(&self) -> bool {
        matches!(self, MetricField::Constant(_))
    }

    pub fn evaluate(&self, x: &[f64]) -> DMatrix<f64> {
        match self {
            MetricField::Constant(m) => m.clone(),
            MetricField::Diagonal(entries) => DMatrix::from_diagonal(&DVector::from_iterator(
                entries.len(),
                entries.iter().zip(x).map(|(e, xi)| e.value(*xi)),
            )),
        }
    }

    /// Analytic row divergence `Σⱼ ∂ⱼ R⁻¹ᵢⱼ(x)`.
    pub fn divergence_into(&self, x: &[f64], out: &mut [f64]) {
        match self {
            MetricField::Constant(_) => out.iter_mut().for_each(|o| *o = 0.0),
            MetricField::Diagonal(entries) => {
                for ((o, e), xi) in out.iter_mut().zip(entries).zip(x) {
                    *o = e.jet(*xi).1;
                }
            }
        }
    }

    /// `Σᵢⱼ ∂ᵢ∂ⱼ R⁻¹ᵢⱼ(x)`.
    pub fn double_divergence(&self, x: &[f64]) -> f64 {
        match self {
            MetricField::Constant(_) => 0.0,
            MetricField::Diagonal(entries) => entries.iter().zip(x).map(|(e, xi)| e.jet(*xi).2).sum(),
        }
    }
}

/// Row divergence of the metric at `x`, analytic.
pub fn divergence_term(field: &MetricField, x: &DVector<f64>) -> Result<DVector<f64>> {
    check_dim("divergence_term", field.dim(), x.len())?;
    let mut out = DVector::zeros(x.len());
    field.divergence_into(x.as_slice(), out.as_mut_slice());
    Ok(out)
}

/// Row divergence by central differences on the evaluated matrix entries.
pub fn divergence_term_fd(field: &MetricField, x: &DVector<f64>, h: f64) -> Result<DVector<f64>> {
    let n = field.dim();
    check_dim("divergence_term_fd", n, x.len())?;
    let mut out = DVector::zeros(n);
    let mut xp = x.clone();
    for j in 0..n {
        xp[j] = x[j] + h;
        let plus = field.evaluate(xp.as_slice());
        xp[j] = x[j] - h;
        let minus = field.evaluate(xp.as_slice());
        xp[j] = x[j];
        for i in 0..n {
            out[i] += (plus[(i, j)] - minus[(i, j)]) / (2.0 * h);
        }
    }
    Ok(out)
}
