//! `check-stationary`: Fokker–Planck residuals and long-run moments.

use std::path::Path;

use anyhow::{ensure, Result};
use fpdiff::eval::empirical_moments;
use fpdiff::matrix_param::{generator_len, AntisymParam, OrthogonalParam, SpdParam};
use fpdiff::rng::{normal, RngSpec, StreamRng};
use fpdiff::sde::{completeness_probe, fpk_residual, ForwardModel, GaussianLogDensity, LinearDynamics};
use fpdiff::simulate::{simulate_batch, FixedStart, TimeGrid};
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::Serialize;
use serde_json::json;

use super::{load_config, Outcome};
use crate::build;
use crate::config::{Config, Schema, COMMON, MODEL};
use crate::output::OutputDir;

pub const SCHEMA: Schema = &[
    ("check.source", Some("model")),
    ("check.n_models", Some("20")),
    ("check.points", Some("100")),
    ("check.residual_tol", Some("1e-8")),
    ("check.paths", Some("10000")),
    ("check.steps", Some("1000")),
    ("check.moment_tol", Some("0.05")),
    ("check.drift", None),
    ("check.diffusion", None),
];

#[derive(Debug, Clone, Serialize)]
struct CheckRecord {
    subject: String,
    check: &'static str,
    value: f64,
    tolerance: f64,
    passed: bool,
}

fn random_general(rng: &mut StreamRng, dim: usize, cfg: &Config) -> Result<ForwardModel> {
    let mut orth = || {
        OrthogonalParam::new(
            dim,
            (0..generator_len(dim)).map(|_| rng.random_range(-1.5..1.5)).collect(),
        )
    };
    let (o1, o2) = (orth()?, orth()?);
    let metric = SpdParam::new(o1, (0..dim).map(|_| rng.random_range(-0.5..0.5)).collect())?;
    let omega = AntisymParam::new(o2, (0..dim / 2).map(|_| rng.random_range(0.1..0.5)).collect())?;
    Ok(ForwardModel::fp_general_param(metric, omega, build::schedule(cfg)?)?.with_scale(cfg.get("model.scale")?)?)
}

fn check_model(
    name: String,
    model: &ForwardModel,
    cfg: &Config,
    spec: RngSpec,
    out: &mut Vec<CheckRecord>,
) -> Result<()> {
    let d = model.dim();
    let m = model.scale();
    let tol: f64 = cfg.get("check.residual_tol")?;
    let density = GaussianLogDensity::isotropic(d, m)?;
    let mut rng = spec.child("points").rng();
    let spread = 1.5 / m.sqrt();
    let mut worst = 0.0f64;
    for _ in 0..cfg.get::<usize>("check.points")? {
        let x = DVector::from_fn(d, |_, _| spread * normal(&mut rng));
        worst = worst.max(fpk_residual(&model.frozen(), &density, &x)?.abs());
    }
    out.push(CheckRecord {
        subject: name.clone(),
        check: "fpk_residual",
        value: worst,
        tolerance: tol,
        passed: worst < tol,
    });

    let paths: usize = cfg.get("check.paths")?;
    let steps: usize = cfg.get("check.steps")?;
    let mtol: f64 = cfg.get("check.moment_tol")?;
    let snaps = simulate_batch(
        model,
        None,
        &FixedStart(vec![1.0; d]),
        paths,
        TimeGrid::forward(model, steps)?,
        &[steps],
        spec.child("simulate"),
        build::execution(cfg)?,
    )?;
    let rep = empirical_moments(&snaps[0], d)?;
    let mean_dev = rep.mean.amax();
    let cov_dev = (&rep.cov - DMatrix::identity(d, d) / m).amax();
    out.push(CheckRecord {
        subject: name.clone(),
        check: "terminal_mean",
        value: mean_dev,
        tolerance: mtol,
        passed: mean_dev < mtol,
    });
    out.push(CheckRecord {
        subject: name,
        check: "terminal_covariance",
        value: cov_dev,
        tolerance: mtol,
        passed: cov_dev < mtol,
    });
    Ok(())
}

pub fn run(config: &Path, outdir: &Path, seed: Option<u64>) -> Result<Outcome> {
    let cfg = load_config(config, &[COMMON, MODEL, SCHEMA], seed)?;
    let mut out = OutputDir::create(outdir, "check-stationary", &cfg)?;
    let base = RngSpec::for_purpose(cfg.seed(), "check");
    let mut records = Vec::new();
    match cfg.str("check.source")? {
        "model" => {
            let model = build::model(&cfg)?;
            check_model(model.kind().to_string(), &model, &cfg, base, &mut records)?;
        }
        "random" => {
            let mut rng = base.child("models").rng();
            for k in 0..cfg.get::<usize>("check.n_models")? {
                let dim = 2 + k % 5;
                let model = random_general(&mut rng, dim, &cfg)?;
                check_model(
                    format!("FP_GENERAL#{k} (dim {dim})"),
                    &model,
                    &cfg,
                    base.path_spec(k as u64),
                    &mut records,
                )?;
            }
        }
        "linear" => {
            ensure!(
                cfg.has("check.drift") && cfg.has("check.diffusion"),
                "check.source = linear needs check.drift and check.diffusion"
            );
            let a = build::square("check.drift", cfg.list("check.drift")?)?;
            let r = build::square("check.diffusion", cfg.list("check.diffusion")?)?;
            ensure!(a.nrows() == r.nrows(), "check.drift and check.diffusion differ in size");
            let probe = completeness_probe(&a, &r)?;
            let tol: f64 = cfg.get("check.residual_tol")?;
            let dynamics = LinearDynamics::new(a.clone(), r.clone())?;
            let density = GaussianLogDensity::isotropic(a.nrows(), 1.0)?;
            let mut rng = base.child("points").rng();
            let mut worst = probe.max_residual;
            for _ in 0..cfg.get::<usize>("check.points")? {
                let x = DVector::from_fn(a.nrows(), |_, _| 1.5 * normal(&mut rng));
                worst = worst.max(fpk_residual(&dynamics, &density, &x)?.abs());
            }
            records.push(CheckRecord {
                subject: "linear".into(),
                check: "fpk_residual",
                value: worst,
                tolerance: tol,
                passed: worst < tol,
            });
            records.push(CheckRecord {
                subject: "linear".into(),
                check: "symmetric_defect",
                value: probe.symmetric_defect,
                tolerance: tol,
                passed: probe.symmetric_defect < tol,
            });
        }
        other => anyhow::bail!("check.source must be model, random or linear, got {other:?}"),
    }
    let failures: Vec<String> = records
        .iter()
        .filter(|r| !r.passed)
        .map(|r| format!("{}: {} = {:e} exceeds {:e}", r.subject, r.check, r.value, r.tolerance))
        .collect();
    let passed = failures.is_empty();
    out.json(
        "check_report.json",
        &json!({
            "passed": passed,
            "seed": out.seed(),
            "config_hash": out.config_hash(),
            "checks": records,
        }),
    )?;
    out.finish(json!({ "passed": passed, "checks": records.len() }))?;
    Ok(if passed { Outcome::Pass } else { Outcome::Fail(failures) })
}
