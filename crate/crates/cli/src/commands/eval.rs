//! `eval`: likelihood, sample-quality and mixing metrics.

use std::path::Path;

use anyhow::{bail, ensure, Result};
use fpdiff::eval::{
    elbo_path, empirical_moments, mixing_rate_compare, nll_bits_per_dim, sliced_w2, w2_gaussian, MixingConfig,
};
use fpdiff::rng::RngSpec;
use fpdiff::score::{MixtureScore, ScoreFunction, StationaryScore};
use fpdiff::sde::ForwardModel;
use fpdiff::simulate::{sample_reverse, GaussianStart};
use nalgebra::{DMatrix, DVector};
use serde_json::json;

use super::{load_config, Outcome};
use crate::build;
use crate::checkpoint::Checkpoint;
use crate::config::{Config, Schema, COMMON, DATA, MODEL};
use crate::output::{samples_csv, MetricRecord, OutputDir};

pub const SCHEMA: Schema = &[
    ("eval.metrics", Some("nll")),
    ("eval.score", Some("exact")),
    ("eval.checkpoint", None),
    ("eval.samples", Some("1000")),
    ("eval.steps", Some("100")),
    ("eval.projections", Some("64")),
    ("eval.points", Some("10")),
    ("eval.n_mc", Some("64")),
    ("eval.w2_mean", None),
    ("eval.w2_cov", None),
    ("eval.mixing_aniso", Some("0.75,0.75,1.5")),
];

const METRICS: [&str; 5] = ["nll", "w2", "sliced_w2", "elbo", "mixing"];

type Scored = (ForwardModel, Box<dyn ScoreFunction>);

/// The outer error aborts the run; the inner one is an unusable checkpoint.
fn score_for(cfg: &Config, kind: &str) -> Result<std::result::Result<Scored, String>> {
    Ok(Ok(match kind {
        "checkpoint" => {
            let Some(path) = cfg.raw("eval.checkpoint") else {
                bail!("eval.score = checkpoint needs eval.checkpoint");
            };
            match Checkpoint::load(Path::new(path)) {
                Ok(ck) => (ck.state.model, Box::new(ck.state.net) as Box<dyn ScoreFunction>),
                Err(e) => return Ok(Err(format!("checkpoint {path}: {e}"))),
            }
        }
        "exact" => {
            let model = build::model(cfg)?;
            let mix = build::mixture(cfg, model.dim())?;
            let score = MixtureScore::new(mix, model.clone())?;
            (model, Box::new(score))
        }
        "stationary" => {
            let model = build::model(cfg)?;
            let s = StationaryScore::new(model.dim(), model.scale());
            (model, Box::new(s))
        }
        other => bail!("eval.score must be checkpoint, exact or stationary, got {other:?}"),
    }))
}

/// Squared W2 between the Gaussian fit of the whitened samples and
/// `N(0, I)`, whitening by the target `N(w2_mean, w2_cov)`.
fn whitened_w2(cfg: &Config, samples: &[f64], d: usize) -> Result<f64> {
    let mean = DVector::from_vec(cfg.opt_list("eval.w2_mean")?.unwrap_or_else(|| vec![0.0; d]));
    ensure!(mean.len() == d, "eval.w2_mean must have {d} entries");
    let cov = match cfg.opt_list("eval.w2_cov")? {
        Some(v) => build::square("eval.w2_cov", v)?,
        None => DMatrix::identity(d, d),
    };
    ensure!(cov.nrows() == d, "eval.w2_cov must be {d}x{d}");
    let Some(chol) = cov.cholesky() else {
        bail!("eval.w2_cov is not positive definite");
    };
    let l = chol.l();
    let mut white = Vec::with_capacity(samples.len());
    for row in samples.chunks_exact(d) {
        let x = DVector::from_column_slice(row) - &mean;
        let y = l.solve_lower_triangular(&x).expect("nonsingular Cholesky factor");
        white.extend(y.iter());
    }
    let rep = empirical_moments(&white, d)?;
    Ok(w2_gaussian(&rep.mean, &rep.cov)?)
}

pub fn run(config: &Path, outdir: &Path, seed: Option<u64>) -> Result<Outcome> {
    let cfg = load_config(config, &[COMMON, MODEL, DATA, SCHEMA], seed)?;
    let metrics: Vec<String> = cfg.list("eval.metrics")?;
    for m in &metrics {
        ensure!(
            METRICS.contains(&m.as_str()),
            "unknown metric {m:?} (expected one of {METRICS:?})"
        );
    }
    let mut out = OutputDir::create(outdir, "eval", &cfg)?;
    let (model, score) = match score_for(&cfg, cfg.str("eval.score")?)? {
        Ok(pair) => pair,
        Err(msg) => {
            out.finish(json!({ "error": msg }))?;
            return Ok(Outcome::Fail(vec![msg]));
        }
    };
    let score = score.as_ref();
    let d = model.dim();
    let exec = build::execution(&cfg)?;
    let base = RngSpec::for_purpose(cfg.seed(), "eval");
    let n: usize = cfg.get("eval.samples")?;
    let steps: usize = cfg.get("eval.steps")?;
    let needs = |m: &str| metrics.iter().any(|x| x == m);

    let data = if needs("nll") || needs("sliced_w2") || needs("elbo") {
        Some(build::dataset(&cfg, d)?.sample(&mut base.child("data").rng(), n))
    } else {
        None
    };
    let generated = if needs("w2") || needs("sliced_w2") {
        let std = 1.0 / model.scale().sqrt();
        let g = sample_reverse(
            &model,
            score,
            &GaussianStart { std },
            n,
            steps,
            base.child("reverse"),
            exec,
        )?;
        out.write_with("samples.csv", |w| samples_csv(w, &g, d))?;
        Some(g)
    } else {
        None
    };

    let mut records: Vec<MetricRecord> = Vec::new();
    for m in &metrics {
        match m.as_str() {
            "nll" => {
                let rep = nll_bits_per_dim(&model, score, data.as_deref().expect("data drawn"), steps, exec)?;
                records.push(out.metric("nll", rep.bits_per_dim, n));
            }
            "w2" => {
                let v = whitened_w2(&cfg, generated.as_deref().expect("samples drawn"), d)?;
                records.push(out.metric("w2", v, n));
            }
            "sliced_w2" => {
                let v = sliced_w2(
                    generated.as_deref().expect("samples drawn"),
                    data.as_deref().expect("data drawn"),
                    d,
                    cfg.get("eval.projections")?,
                    base.child("projections"),
                )?;
                records.push(out.metric("sliced_w2", v, n));
            }
            "elbo" => {
                let points: usize = cfg.get("eval.points")?;
                let n_mc: usize = cfg.get("eval.n_mc")?;
                ensure!(points > 0 && points <= n, "eval.points must be in 1..={n}");
                let data = data.as_deref().expect("data drawn");
                let spec = base.child("elbo");
                let mut total = 0.0;
                for i in 0..points {
                    let x = DVector::from_column_slice(&data[i * d..(i + 1) * d]);
                    total += elbo_path(&model, score, &x, n_mc, steps, spec.path_spec(i as u64))?.value;
                }
                records.push(out.metric("elbo", total / points as f64, points * n_mc));
            }
            "mixing" => {
                ensure!(d == 3, "mixing needs a 3-dimensional model, got dim {d}");
                let schedule = *model.schedule();
                let eigs = cfg.list::<f64>("eval.mixing_aniso")?;
                ensure!(eigs.len() == 3, "eval.mixing_aniso needs 3 entries");
                let iso = ForwardModel::fp_linear(DMatrix::identity(3, 3), DMatrix::zeros(3, 3), schedule)?;
                let aniso = ForwardModel::fp_linear(
                    DMatrix::from_diagonal(&DVector::from_vec(eigs)),
                    DMatrix::zeros(3, 3),
                    schedule,
                )?;
                let mut mc = MixingConfig::new(build::plane(&cfg)?, schedule.integral(model.horizon())?);
                mc.n_samples = n;
                mc.n_projections = cfg.get("eval.projections")?;
                let rep = mixing_rate_compare(&iso, &aniso, &mc, base.child("mixing"), exec)?;
                records.push(out.metric("mixing_iso", rep.iso.b, n));
                records.push(out.metric("mixing_aniso", rep.aniso.b, n));
            }
            _ => unreachable!("metric names validated above"),
        }
    }
    for r in &records {
        out.json(&format!("{}.json", r.metric), r)?;
    }
    out.json("metrics.json", &records)?;
    let failures: Vec<String> = records
        .iter()
        .filter(|r| !r.value.is_finite())
        .map(|r| format!("{} is not finite", r.metric))
        .collect();
    out.finish(json!({ "metrics": metrics, "model": model.kind().as_str(), "dim": d }))?;
    Ok(if failures.is_empty() {
        Outcome::Pass
    } else {
        Outcome::Fail(failures)
    })
}
