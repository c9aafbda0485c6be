//! Synthetic datasets.

use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::normal;
use crate::score::MixtureSpec;

/// Gaussian supported on the plane `z = plane_z` in ℝ³, isotropic with
/// standard deviation `in_plane_std` inside the plane.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlaneGaussian {
    pub plane_z: f64,
    pub in_plane_std: f64,
}

impl Default for PlaneGaussian {
    fn default() -> Self {
        Self {
            plane_z: 2.0,
            in_plane_std: 0.5,
        }
    }
}

impl PlaneGaussian {
    pub fn new(plane_z: f64, in_plane_std: f64) -> Result<Self> {
        if !(plane_z.is_finite() && in_plane_std > 0.0 && in_plane_std.is_finite()) {
            return Err(Error::Invalid(format!(
                "plane dataset needs finite plane_z and positive std, got ({plane_z}, {in_plane_std})"
            )));
        }
        Ok(Self { plane_z, in_plane_std })
    }

    pub fn sample_into<R: Rng + ?Sized>(&self, rng: &mut R, out: &mut [f64]) {
        out[0] = self.in_plane_std * normal(rng);
        out[1] = self.in_plane_std * normal(rng);
        out[2] = self.plane_z;
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Dataset {
    Mixture(MixtureSpec),
    Plane(PlaneGaussian),
}

impl Dataset {
    pub fn dim(&self) -> usize {
        match self {
            Dataset::Mixture(m) => m.dim(),
            Dataset::Plane(_) => 3,
        }
    }

    pub fn sample_into<R: Rng + ?Sized>(&self, rng: &mut R, out: &mut [f64]) {
        match self {
            Dataset::Mixture(m) => m.sample_into(rng, out),
            Dataset::Plane(p) => p.sample_into(rng, out),
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
}
