//! `simulate`: forward SDE, reverse SDE or probability-flow trajectories.

use std::path::Path;

use anyhow::{bail, ensure, Context, Result};
use fpdiff::par::map_collect;
use fpdiff::rng::{fill_normal, RngSpec};
use fpdiff::score::{ScoreFunction, StationaryScore};
use fpdiff::sde::ForwardModel;
use fpdiff::simulate::{
    euler_maruyama_forward, euler_maruyama_reverse, integrate_probability_flow, FlowDirection, Trajectory,
};
use nalgebra::DVector;
use serde_json::json;

use super::{load_config, Outcome};
use crate::build;
use crate::checkpoint::Checkpoint;
use crate::config::{Config, Schema, COMMON, MODEL};
use crate::output::{samples_csv, OutputDir};

pub const SCHEMA: Schema = &[
    ("simulate.direction", Some("forward")),
    ("simulate.paths", Some("4")),
    ("simulate.steps", Some("1000")),
    ("simulate.x0", None),
    ("simulate.start_std", None),
    ("simulate.score", Some("stationary")),
    ("simulate.checkpoint", None),
    ("simulate.flow", Some("forward")),
    ("simulate.logdet", Some("true")),
];

/// The model and score to simulate with: from a checkpoint, or the
/// configured model with its exact stationary score.
pub(crate) fn model_and_score(
    cfg: &Config,
    score_key: &str,
    ckpt_key: &str,
) -> Result<(ForwardModel, Box<dyn ScoreFunction>)> {
    match cfg.str(score_key)? {
        "checkpoint" => {
            let path = cfg
                .str(ckpt_key)
                .with_context(|| format!("{score_key} = checkpoint needs {ckpt_key}"))?;
            let ck = Checkpoint::load(Path::new(path)).with_context(|| format!("loading checkpoint {path}"))?;
            Ok((ck.state.model, Box::new(ck.state.net)))
        }
        "stationary" => {
            let model = build::model(cfg)?;
            let s = StationaryScore::new(model.dim(), model.scale());
            Ok((model, Box::new(s)))
        }
        other => bail!("{score_key} must be stationary or checkpoint, got {other:?}"),
    }
}

fn start(cfg: &Config, model: &ForwardModel, spec: RngSpec, i: usize) -> Result<DVector<f64>> {
    let d = model.dim();
    if let Some(std) = cfg.opt::<f64>("simulate.start_std")? {
        let mut v = vec![0.0; d];
        fill_normal(&mut spec.path(i as u64), &mut v);
        return Ok(DVector::from_vec(v) * std);
    }
    let x0 = cfg.opt_list::<f64>("simulate.x0")?.unwrap_or_else(|| vec![0.0; d]);
    ensure!(
        x0.len() == d,
        "simulate.x0 has {} entries but the model has dim {d}",
        x0.len()
    );
    Ok(DVector::from_vec(x0))
}

fn prior_sample(model: &ForwardModel, spec: RngSpec, i: usize) -> DVector<f64> {
    let mut v = vec![0.0; model.dim()];
    fill_normal(&mut spec.path(i as u64), &mut v);
    DVector::from_vec(v) / model.scale().sqrt()
}

pub fn run(config: &Path, outdir: &Path, seed: Option<u64>) -> Result<Outcome> {
    let cfg = load_config(config, &[COMMON, MODEL, SCHEMA], seed)?;
    let mut out = OutputDir::create(outdir, "simulate", &cfg)?;
    let (model, score) = model_and_score(&cfg, "simulate.score", "simulate.checkpoint")?;
    let paths: usize = cfg.get("simulate.paths")?;
    let steps: usize = cfg.get("simulate.steps")?;
    ensure!(paths > 0, "simulate.paths must be positive");
    let exec = build::execution(&cfg)?;
    let base = RngSpec::for_purpose(cfg.seed(), "simulate");
    let starts = base.child("start");
    let noise = base.child("noise");
    let direction = cfg.str("simulate.direction")?.to_string();
    let logdet = cfg.bool("simulate.logdet")?;
    let flow_dir = match cfg.str("simulate.flow")? {
        "forward" => FlowDirection::Forward,
        "reverse" => FlowDirection::Reverse,
        other => bail!("simulate.flow must be forward or reverse, got {other:?}"),
    };
    let score = score.as_ref();
    let run_one = |i: usize| -> Result<(Trajectory, Vec<f64>)> {
        let (tr, end) = match direction.as_str() {
            "forward" => {
                let tr = euler_maruyama_forward(
                    &model,
                    &start(&cfg, &model, starts, i)?,
                    steps,
                    noise.path_spec(i as u64),
                )?;
                let k = tr.len() - 1;
                (tr, k)
            }
            "reverse" => {
                let x_t = prior_sample(&model, starts, i);
                (
                    euler_maruyama_reverse(&model, score, &x_t, steps, noise.path_spec(i as u64))?,
                    0,
                )
            }
            "flow" => {
                let (x, k_end) = match flow_dir {
                    FlowDirection::Forward => (start(&cfg, &model, starts, i)?, steps),
                    FlowDirection::Reverse => (prior_sample(&model, starts, i), 0),
                };
                (
                    integrate_probability_flow(&model, score, &x, flow_dir, steps, logdet)?,
                    k_end,
                )
            }
            other => bail!("simulate.direction must be forward, reverse or flow, got {other:?}"),
        };
        let end_state = tr.state(end).to_vec();
        Ok((tr, end_state))
    };
    let results = map_collect(exec, paths, run_one);
    let mut ends = Vec::with_capacity(paths * model.dim());
    for (i, r) in results.into_iter().enumerate() {
        let (tr, end) = r?;
        out.write_with(&format!("path_{i:04}.csv"), |w| tr.write_csv(w))?;
        ends.extend(end);
    }
    out.write_with("samples.csv", |w| samples_csv(w, &ends, model.dim()))?;
    out.finish(json!({
        "direction": direction,
        "paths": paths,
        "steps": steps,
        "model": model.kind().as_str(),
        "dim": model.dim(),
    }))?;
    Ok(Outcome::Pass)
}
