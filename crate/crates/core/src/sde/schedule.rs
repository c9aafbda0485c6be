use crate::error::{Error, Result};

/// Lower end of the time interval used for training and sampling; the
/// transition covariance vanishes at `t = 0`.
pub const T_EPS: f64 = 1e-5;

/// Linear rate `β'(t) = β_min + t (β_max - β_min) / T` and its integral
/// `B(t) = β_min t + t² (β_max - β_min) / (2T)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeSchedule {
    pub beta_min: f64,
    pub beta_max: f64,
    pub horizon: f64,
}

impl Default for TimeSchedule {
    fn default() -> Self {
        Self {
            beta_min: 0.1,
            beta_max: 20.0,
            horizon: 1.0,
        }
    }
}

impl TimeSchedule {
    pub fn new(beta_min: f64, beta_max: f64, horizon: f64) -> Result<Self> {
        if !(beta_min.is_finite() && beta_max.is_finite() && horizon.is_finite()) {
            return Err(Error::NonFinite("time schedule"));
        }
        if !(beta_min > 0.0 && beta_max > beta_min && horizon > 0.0) {
            return Err(Error::Invalid(format!(
                "schedule needs beta_max > beta_min > 0 and T > 0, got ({beta_min}, {beta_max}, {horizon})"
            )));
        }
        Ok(Self {
            beta_min,
            beta_max,
            horizon,
        })
    }

    fn check(&self, t: f64) -> Result<()> {
        let slack = 1e-12 * self.horizon;
        if t.is_finite() && t >= -slack && t <= self.horizon + slack {
            Ok(())
        } else {
            Err(Error::Domain {
                t,
                horizon: self.horizon,
            })
        }
    }

    pub fn rate(&self, t: f64) -> Result<f64> {
        self.check(t)?;
        Ok(self.rate_unchecked(t))
    }

    pub fn integral(&self, t: f64) -> Result<f64> {
        self.check(t)?;
        Ok(self.integral_unchecked(t))
    }

    #[inline]
    pub fn rate_unchecked(&self, t: f64) -> f64 {
        self.beta_min + t * (self.beta_max - self.beta_min) / self.horizon
    }

    #[inline]
    pub fn integral_unchecked(&self, t: f64) -> f64 {
        self.beta_min * t + t * t * (self.beta_max - self.beta_min) / (2.0 * self.horizon)
    }

    /// First time at which `B(t)` reaches `target`, if within the horizon.
    pub fn time_for_integral(&self, target: f64) -> Option<f64> {
        if target < 0.0 || target > self.integral_unchecked(self.horizon) {
            return None;
        }
        // Root of (Δ/2T) t² + β_min t - target with Δ = β_max - β_min.
        let a = (self.beta_max - self.beta_min) / (2.0 * self.horizon);
        let b = self.beta_min;
        let disc = b * b + 4.0 * a * target;
        Some(2.0 * target / (b + disc.sqrt()))
    }
}

/// Geometric noise levels of the variance-exploding process,
/// `σ(t) = σ_min (σ_max / σ_min)^{t/T}`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VeSigma {
    pub sigma_min: f64,
    pub sigma_max: f64,
}

impl VeSigma {
    pub fn new(sigma_min: f64, sigma_max: f64) -> Result<Self> {
        if !(sigma_min > 0.0 && sigma_max > sigma_min && sigma_max.is_finite()) {
            return Err(Error::Invalid(format!(
                "VE needs sigma_max > sigma_min > 0, got ({sigma_min}, {sigma_max})"
            )));
        }
        Ok(Self { sigma_min, sigma_max })
    }

    pub fn sigma(&self, t: f64, horizon: f64) -> f64 {
        self.sigma_min * (self.sigma_max / self.sigma_min).powf(t / horizon)
    }

    /// `d σ²/dt`, the squared diffusion coefficient.
    pub fn sigma_sq_rate(&self, t: f64, horizon: f64) -> f64 {
        let s = self.sigma(t, horizon);
        2.0 * s * s * (self.sigma_max / self.sigma_min).ln() / horizon
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rate_examples() {
        let s = TimeSchedule::new(0.1, 20.0, 1.0).unwrap();
        assert_eq!(s.rate(0.0).unwrap(), 0.1);
        assert_eq!(s.rate(1.0).unwrap(), 20.0);
        assert!((s.rate(0.5).unwrap() - 10.05).abs() < 1e-14);
        assert!(matches!(s.rate(1.5), Err(Error::Domain { .. })));
        assert!(matches!(s.rate(-0.1), Err(Error::Domain { .. })));
    }

    #[test]
    fn integral_examples() {
        let s = TimeSchedule::new(0.1, 20.0, 1.0).unwrap();
        assert_eq!(s.integral(0.0).unwrap(), 0.0);
        assert!((s.integral(1.0).unwrap() - 10.05).abs() < 1e-13);
        assert!((s.integral(0.5).unwrap() - 2.5375).abs() < 1e-13);
    }

    #[test]
    fn integral_matches_quadrature() {
        let s = TimeSchedule::new(0.3, 7.0, 2.5).unwrap();
        let n = 10_000;
        let t = 1.7;
        let h = t / n as f64;
        // Simpson's rule is exact for the linear rate.
        let mut acc = s.rate_unchecked(0.0) + s.rate_unchecked(t);
        for k in 1..n {
            let w = if k % 2 == 1 { 4.0 } else { 2.0 };
            acc += w * s.rate_unchecked(k as f64 * h);
        }
        let simpson = acc * h / 3.0;
        assert!((simpson - s.integral(t).unwrap()).abs() < 1e-11);
    }

    #[test]
    fn invalid_schedules() {
        assert!(TimeSchedule::new(0.0, 1.0, 1.0).is_err());
        assert!(TimeSchedule::new(2.0, 1.0, 1.0).is_err());
        assert!(TimeSchedule::new(0.1, 1.0, 0.0).is_err());
    }

    #[test]
    fn inverse_integral() {
        let s = TimeSchedule::default();
        for t in [0.0, 0.1, 0.5, 0.99, 1.0] {
            let b = s.integral_unchecked(t);
            assert!((s.time_for_integral(b).unwrap() - t).abs() < 1e-12);
        }
        assert!(s.time_for_integral(11.0).is_none());
    }
}
