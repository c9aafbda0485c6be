#![allow(dead_code)]

use fpdiff::matrix_param::{generator_len, AntisymParam, OrthogonalParam, SpdParam};
use fpdiff::rng::StreamRng;
use nalgebra::DMatrix;
use rand::Rng;

pub fn random_orth(rng: &mut StreamRng, dim: usize) -> OrthogonalParam {
    let g = (0..generator_len(dim)).map(|_| rng.random_range(-1.5..1.5)).collect();
    OrthogonalParam::new(dim, g).unwrap()
}

/// Metric with eigenvalues `exp(U(lo, hi))`.
pub fn random_spd(rng: &mut StreamRng, dim: usize, lo: f64, hi: f64) -> SpdParam {
    let orth = random_orth(rng, dim);
    let eigs = (0..dim).map(|_| rng.random_range(lo..hi)).collect();
    SpdParam::new(orth, eigs).unwrap()
}

pub fn random_antisym(rng: &mut StreamRng, dim: usize) -> AntisymParam {
    let orth = random_orth(rng, dim);
    let blocks = (0..dim / 2).map(|_| rng.random_range(0.2..2.0)).collect();
    AntisymParam::new(orth, blocks).unwrap()
}

pub fn random_symmetric(rng: &mut StreamRng, dim: usize, scale: f64) -> DMatrix<f64> {
    let m = DMatrix::from_fn(dim, dim, |_, _| rng.random_range(-scale..scale));
    (&m + m.transpose()) * 0.5
}

pub fn normal_points(rng: &mut StreamRng, dim: usize, n: usize, std: f64) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| (0..dim).map(|_| std * fpdiff::rng::normal(rng)).collect())
        .collect()
}
