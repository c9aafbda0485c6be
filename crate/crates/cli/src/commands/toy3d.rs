//! `toy3d`: VP vs FP-Noise vs regularized FP-Noise on plane data.

use std::io::Write;
use std::path::Path;

use anyhow::Result;
use fpdiff::data::PlaneGaussian;
use fpdiff::eval::{run_toy3d, GenerativeField, GridSpec, Toy3dConfig};
use fpdiff::simulate::{ProbabilityFlow, VectorField};
use serde_json::json;

use super::{load_config, Outcome};
use crate::build;
use crate::checkpoint::Checkpoint;
use crate::config::{Config, Schema, COMMON};
use crate::output::OutputDir;

pub const SCHEMA: Schema = &[
    ("toy3d.plane_z", Some("2")),
    ("toy3d.std", Some("0.5")),
    ("toy3d.hidden", Some("64,64")),
    ("toy3d.iterations", Some("4000")),
    ("toy3d.batch_size", Some("96")),
    ("toy3d.lr", Some("1e-3")),
    ("toy3d.forward_lr", Some("1e-2")),
    ("toy3d.lambda1", Some("0.01")),
    ("toy3d.lambda2", Some("0.01")),
    ("toy3d.trace_normalized", Some("true")),
    ("toy3d.eval_times", Some("0.1,0.25,0.5")),
    ("toy3d.grid_nx", Some("9")),
    ("toy3d.grid_nz", Some("10")),
];

fn toy_config(cfg: &Config) -> Result<Toy3dConfig> {
    let plane = PlaneGaussian::new(cfg.get("toy3d.plane_z")?, cfg.get("toy3d.std")?)?;
    let mut grid = GridSpec::around_plane(plane.plane_z);
    grid.nx = cfg.get("toy3d.grid_nx")?;
    grid.nz = cfg.get("toy3d.grid_nz")?;
    Ok(Toy3dConfig {
        plane,
        hidden: cfg.list("toy3d.hidden")?,
        iterations: cfg.get("toy3d.iterations")?,
        batch_size: cfg.get("toy3d.batch_size")?,
        lr: cfg.get("toy3d.lr")?,
        forward_lr: cfg.get("toy3d.forward_lr")?,
        lambda1: cfg.get("toy3d.lambda1")?,
        lambda2: cfg.get("toy3d.lambda2")?,
        trace_normalized: cfg.bool("toy3d.trace_normalized")?,
        eval_times: cfg.list("toy3d.eval_times")?,
        grid,
        seed: cfg.seed(),
    })
}

/// Generative field on the grid, projected to the `x`–`z` plane.
fn grid_csv(w: &mut impl Write, field: &dyn VectorField, t: f64, grid: &GridSpec) -> std::io::Result<()> {
    writeln!(w, "x,z,vx,vz")?;
    let mut v = [0.0; 3];
    for p in grid.points() {
        field.eval_into(&p, t, &mut v);
        writeln!(w, "{:.16e},{:.16e},{:.16e},{:.16e}", p[0], p[2], v[0], v[2])?;
    }
    Ok(())
}

pub fn run(config: &Path, outdir: &Path, seed: Option<u64>) -> Result<Outcome> {
    let cfg = load_config(config, &[COMMON, SCHEMA], seed)?;
    let mut out = OutputDir::create(outdir, "toy3d", &cfg)?;
    let tc = toy_config(&cfg)?;
    let runs = run_toy3d(&tc, build::execution(&cfg)?)?;
    let mut summary = Vec::new();
    for run in &runs {
        let name = run.scenario.as_str();
        let field = GenerativeField(ProbabilityFlow::new(&run.state.model, &run.state.net)?);
        for (k, &t) in tc.eval_times.iter().enumerate() {
            out.write_with(&format!("grid_{name}_t{k}.csv"), |w| grid_csv(w, &field, t, &tc.grid))?;
        }
        out.checkpoint(
            &format!("ckpt_{name}"),
            &Checkpoint {
                config_hash: out.config_hash().to_string(),
                state: run.state.clone(),
            },
        )?;
        let per_time: Vec<_> = tc
            .eval_times
            .iter()
            .zip(&run.reports)
            .map(|(t, r)| json!({ "t": t, "mean": r.mean, "points": r.cosines.len(), "excluded": r.excluded }))
            .collect();
        let n = run.reports.iter().map(|r| r.cosines.len()).sum();
        summary.push(json!({
            "scenario": name,
            "record": out.metric(&format!("alignment_{name}"), run.alignment, n),
            "per_time": per_time,
        }));
    }
    let score = |i: usize| runs[i].alignment;
    let ordered = score(2) >= score(1) && score(1) >= score(0);
    out.json(
        "alignment.json",
        &json!({ "scenarios": summary, "ordering_reg_fp_vp": ordered }),
    )?;
    out.finish(json!({ "ordering_reg_fp_vp": ordered }))?;
    Ok(Outcome::Pass)
}
