//! Core objects assembled from configuration sections.

use anyhow::{bail, ensure, Context, Result};
use fpdiff::data::{Dataset, PlaneGaussian};
use fpdiff::matrix_param::{generator_len, AntisymParam, DampedBlocks, OrthogonalParam, SpdParam};
use fpdiff::par::Execution;
use fpdiff::score::{MixtureSpec, ScoreNetArch};
use fpdiff::sde::{ForwardModel, ModelKind, TimeSchedule, VeSigma};
use nalgebra::{DMatrix, DVector};

use crate::config::Config;

pub fn execution(cfg: &Config) -> Result<Execution> {
    Ok(if cfg.bool("run.parallel")? {
        Execution::Parallel
    } else {
        Execution::Sequential
    })
}

pub fn schedule(cfg: &Config) -> Result<TimeSchedule> {
    Ok(TimeSchedule::new(
        cfg.get("schedule.beta_min")?,
        cfg.get("schedule.beta_max")?,
        cfg.get("schedule.horizon")?,
    )?)
}

/// Square matrix from a row-major list.
pub fn square(key: &str, values: Vec<f64>) -> Result<DMatrix<f64>> {
    let n = (values.len() as f64).sqrt().round() as usize;
    ensure!(
        n > 0 && n * n == values.len(),
        "{key}: {} entries is not a square matrix",
        values.len()
    );
    Ok(DMatrix::from_row_slice(n, n, &values))
}

fn list_or(cfg: &Config, key: &str, len: usize) -> Result<Vec<f64>> {
    let v = cfg.opt_list(key)?.unwrap_or_else(|| vec![0.0; len]);
    ensure!(v.len() == len, "{key}: expected {len} entries, got {}", v.len());
    Ok(v)
}

fn spd(cfg: &Config, dim: usize) -> Result<SpdParam> {
    let orth = OrthogonalParam::new(dim, list_or(cfg, "model.metric_generator", generator_len(dim))?)?;
    Ok(SpdParam::new(orth, list_or(cfg, "model.metric_log_eigs", dim)?)?)
}

fn antisym(cfg: &Config, dim: usize) -> Result<AntisymParam> {
    let orth = OrthogonalParam::new(dim, list_or(cfg, "model.omega_generator", generator_len(dim))?)?;
    Ok(AntisymParam::new(orth, list_or(cfg, "model.omega_blocks", dim / 2)?)?)
}

pub fn model(cfg: &Config) -> Result<ForwardModel> {
    let kind: ModelKind = cfg.str("model.kind")?.parse()?;
    let dim: usize = cfg.get("model.dim")?;
    let sched = schedule(cfg)?;
    let m = match kind {
        ModelKind::Vp => ForwardModel::vp(dim, sched)?,
        ModelKind::Ve => ForwardModel::ve(
            dim,
            VeSigma::new(cfg.get("model.sigma_min")?, cfg.get("model.sigma_max")?)?,
            sched,
        )?,
        ModelKind::FpDrift => ForwardModel::fp_drift(antisym(cfg, dim)?, sched)?,
        ModelKind::FpNoise => ForwardModel::fp_noise_with(spd(cfg, dim)?, cfg.bool("model.trace_normalized")?, sched)?,
        ModelKind::FpGeneral => ForwardModel::fp_general_param(spd(cfg, dim)?, antisym(cfg, dim)?, sched)?,
        ModelKind::FpLinear => {
            let r = square(
                "model.r_inv",
                cfg.list("model.r_inv").context("FP_LINEAR needs model.r_inv")?,
            )?;
            let w = match cfg.opt_list("model.omega")? {
                Some(v) => square("model.omega", v)?,
                None => DMatrix::zeros(r.nrows(), r.nrows()),
            };
            ensure!(
                r.nrows() == dim,
                "model.r_inv is {0}x{0} but model.dim = {dim}",
                r.nrows()
            );
            ForwardModel::fp_linear(r, w, sched)?
        }
        ModelKind::FpDamped => {
            let a = cfg.list("model.damped_a").context("FP_DAMPED needs model.damped_a")?;
            let b = cfg.list("model.damped_b").context("FP_DAMPED needs model.damped_b")?;
            ensure!(
                2 * a.len() == dim,
                "FP_DAMPED phase dimension {} but model.dim = {dim}",
                2 * a.len()
            );
            ForwardModel::fp_damped(DampedBlocks::new(a, b)?, sched)?
        }
    };
    Ok(m.with_scale(cfg.get("model.scale")?)?)
}

/// Gaussian or Gaussian-mixture data with an exact score available.
pub fn mixture(cfg: &Config, dim: usize) -> Result<MixtureSpec> {
    match cfg.str("data.kind")? {
        "gaussian" => {
            let mean = DVector::from_vec(list_or(cfg, "data.mean", dim)?);
            let cov = match cfg.opt_list("data.cov")? {
                Some(v) => square("data.cov", v)?,
                None => DMatrix::identity(dim, dim),
            };
            ensure!(cov.nrows() == dim, "data.cov must be {dim}x{dim}");
            Ok(MixtureSpec::gaussian(mean, cov)?)
        }
        "ring" => {
            ensure!(dim >= 2, "ring data needs dim >= 2");
            let k: usize = cfg.get("data.components")?;
            let radius: f64 = cfg.get("data.radius")?;
            ensure!(k > 0, "data.components must be positive");
            let means = (0..k)
                .map(|i| {
                    let a = 2.0 * std::f64::consts::PI * i as f64 / k as f64;
                    let mut v = DVector::zeros(dim);
                    v[0] = radius * a.cos();
                    v[1] = radius * a.sin();
                    v
                })
                .collect();
            Ok(MixtureSpec::isotropic(means, cfg.get("data.var")?)?)
        }
        other => bail!("data.kind {other:?} has no closed-form score (use gaussian or ring)"),
    }
}

pub fn plane(cfg: &Config) -> Result<PlaneGaussian> {
    Ok(PlaneGaussian::new(cfg.get("data.plane_z")?, cfg.get("data.std")?)?)
}

pub fn dataset(cfg: &Config, dim: usize) -> Result<Dataset> {
    match cfg.str("data.kind")? {
        "plane" => {
            ensure!(dim == 3, "plane data is 3-dimensional but the model has dim {dim}");
            Ok(Dataset::Plane(plane(cfg)?))
        }
        _ => Ok(Dataset::Mixture(mixture(cfg, dim)?)),
    }
}

pub fn arch(cfg: &Config, dim: usize) -> Result<ScoreNetArch> {
    Ok(ScoreNetArch::new(
        dim,
        cfg.list("net.hidden")?,
        cfg.bool("net.output_scaling")?,
    )?)
}
