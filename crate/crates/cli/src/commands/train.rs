//! `train`: score matching, optionally with a learnable forward process.

use std::io::Write;
use std::path::Path;

use anyhow::{bail, ensure, Result};
use fpdiff::rng::RngSpec;
use fpdiff::score::ScoreNet;
use fpdiff::train::{fit_with, LossRecord, StageMode, TrainConfig, TrainObserver, TrainState};
use serde_json::json;

use super::{load_config, Outcome};
use crate::build;
use crate::checkpoint::Checkpoint;
use crate::config::{Config, Schema, COMMON, DATA, MODEL};
use crate::output::OutputDir;

pub const NET: Schema = &[("net.hidden", Some("64,64")), ("net.output_scaling", Some("true"))];

pub const SCHEMA: Schema = &[
    ("train.mode", Some("SCORE_ONLY")),
    ("train.iterations", Some("2000")),
    ("train.lr", Some("2e-4")),
    ("train.forward_lr", Some("2e-4")),
    ("train.batch_size", Some("96")),
    ("train.lambda1", Some("0")),
    ("train.lambda2", Some("0")),
    ("train.weighting", Some("KERNEL_VARIANCE")),
    ("train.log_every", Some("100")),
    ("train.checkpoint_every", Some("0")),
    ("train.inject_nan_at", None),
];

fn train_config(cfg: &Config, dim: usize) -> Result<TrainConfig> {
    let mut tc = TrainConfig::new(build::dataset(cfg, dim)?, cfg.seed());
    tc.mode = cfg.str("train.mode")?.parse()?;
    tc.iterations = cfg.get("train.iterations")?;
    tc.lr = cfg.get("train.lr")?;
    tc.forward_lr = cfg.get("train.forward_lr")?;
    tc.batch_size = cfg.get("train.batch_size")?;
    tc.lambda1 = cfg.get("train.lambda1")?;
    tc.lambda2 = cfg.get("train.lambda2")?;
    tc.weighting = cfg.str("train.weighting")?.parse()?;
    tc.log_every = cfg.get("train.log_every")?;
    tc.checkpoint_every = cfg.get("train.checkpoint_every")?;
    Ok(tc)
}

struct Writer<'a> {
    out: &'a mut OutputDir,
}

impl Writer<'_> {
    fn save(&mut self, name: &str, state: &TrainState) -> fpdiff::Result<()> {
        let ck = Checkpoint {
            config_hash: self.out.config_hash().to_string(),
            state: state.clone(),
        };
        self.out
            .checkpoint(name, &ck)
            .map_err(|e| fpdiff::Error::Invalid(format!("writing {name}: {e:#}")))
    }
}

impl TrainObserver for Writer<'_> {
    fn on_checkpoint(&mut self, state: &TrainState) -> fpdiff::Result<()> {
        self.save(&format!("ckpt_step_{:06}", state.step), state)
    }

    fn on_stage_end(&mut self, stage: usize, state: &TrainState) -> fpdiff::Result<()> {
        self.save(&format!("ckpt_stage{stage}"), state)
    }
}

pub fn loss_csv(w: &mut impl Write, history: &[LossRecord]) -> std::io::Result<()> {
    writeln!(w, "step,loss,reg_penalty")?;
    for r in history {
        writeln!(w, "{},{:.16e},{:.16e}", r.step, r.loss, r.reg_penalty)?;
    }
    Ok(())
}

pub fn run(config: &Path, outdir: &Path, seed: Option<u64>) -> Result<Outcome> {
    let cfg = load_config(config, &[COMMON, MODEL, DATA, NET, SCHEMA], seed)?;
    let mut out = OutputDir::create(outdir, "train", &cfg)?;
    let model = build::model(&cfg)?;
    let tc = train_config(&cfg, model.dim())?;
    let arch = build::arch(&cfg, model.dim())?;
    let net = ScoreNet::new(
        arch,
        *model.schedule(),
        &mut RngSpec::for_purpose(cfg.seed(), "train/init").rng(),
    );
    let mut state = TrainState::new(model, net)?;
    let mut writer = Writer { out: &mut out };
    if let Some(k) = cfg.opt::<usize>("train.inject_nan_at")? {
        // Fault injection: train k steps, poison one weight, continue. The
        // divergence guard must abort at step k.
        if tc.mode == StageMode::Mix {
            bail!("train.inject_nan_at is only supported for single-stage modes");
        }
        ensure!(k < tc.iterations, "train.inject_nan_at must be below train.iterations");
        let head = TrainConfig {
            iterations: k,
            ..tc.clone()
        };
        if k > 0 {
            state = fit_with(&head, state, &mut fpdiff::train::NoObserver)?;
        }
        state.net.params_mut()[0] = f64::NAN;
        let tail = TrainConfig {
            iterations: tc.iterations - k,
            ..tc.clone()
        };
        state = fit_with(&tail, state, &mut writer)?;
    } else {
        state = fit_with(&tc, state, &mut writer)?;
    }
    out.write_with("loss.csv", |w| loss_csv(w, &state.history))?;
    let ck = Checkpoint {
        config_hash: out.config_hash().to_string(),
        state,
    };
    out.checkpoint("ckpt_final", &ck)?;
    let last = ck.state.history.last().copied();
    let record = out.metric("final_loss", last.map_or(f64::NAN, |r| r.loss), ck.state.step);
    out.json("metrics.json", &vec![record])?;
    out.finish(json!({
        "mode": tc.mode.as_str(),
        "steps": ck.state.step,
        "model": ck.state.model.kind().as_str(),
    }))?;
    Ok(Outcome::Pass)
}
