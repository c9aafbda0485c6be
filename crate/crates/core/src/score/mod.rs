//! Score functions: analytic oracles and a trainable network.

mod analytic;
mod mixture;
mod net;

pub use analytic::{conditional_score, gaussian_score, StationaryScore, ZeroScore};
pub use mixture::{mixture_score_at_time, MixtureScore, MixtureSpec};
pub use net::{gradient_check, GradientCheck, ScoreNet, ScoreNetArch, TIME_FREQUENCIES};

use nalgebra::DVector;

/// `∇ log p_t(x)`, or an approximation of it.
///
/// Batch arguments are row-major `n × dim` slices.
pub trait ScoreFunction: Sync {
    fn dim(&self) -> usize;

    fn score_into(&self, x: &[f64], t: f64, out: &mut [f64]);

    fn score_batch(&self, xs: &[f64], t: f64, out: &mut [f64]) {
        let d = self.dim();
        for (x, o) in xs.chunks_exact(d).zip(out.chunks_exact_mut(d)) {
            self.score_into(x, t, o);
        }
    }

    fn score(&self, x: &DVector<f64>, t: f64) -> DVector<f64> {
        let mut out = DVector::zeros(self.dim());
        self.score_into(x.as_slice(), t, out.as_mut_slice());
        out
    }
}
