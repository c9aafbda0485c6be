use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use fpdiff_cli::checkpoint::{Checkpoint, CheckpointError};
use serde_json::Value;
use tempfile::TempDir;

struct Run {
    dir: TempDir,
    out: PathBuf,
    output: Output,
}

impl Run {
    fn code(&self) -> i32 {
        self.output.status.code().expect("exit code")
    }

    fn stderr(&self) -> String {
        String::from_utf8_lossy(&self.output.stderr).into_owned()
    }

    fn read(&self, name: &str) -> String {
        fs::read_to_string(self.out.join(name)).unwrap_or_else(|e| panic!("{name}: {e}"))
    }

    fn json(&self, name: &str) -> Value {
        serde_json::from_str(&self.read(name)).unwrap()
    }
}

fn fpdiff(command: &str, config: &str, extra: &[&str]) -> Run {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    fs::write(&cfg, config).unwrap();
    let out = dir.path().join("out");
    let output = Command::new(env!("CARGO_BIN_EXE_fpdiff"))
        .arg(command)
        .arg("--config")
        .arg(&cfg)
        .arg("--out")
        .arg(&out)
        .args(extra)
        .output()
        .unwrap();
    Run { dir, out, output }
}

fn files(dir: &Path) -> Vec<String> {
    let mut v: Vec<String> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    v.sort();
    v
}

#[test]
fn unknown_key_aborts_before_any_output() {
    let r = fpdiff("simulate", "run.seed = 1\nsimulate.pathz = 4\n", &[]);
    assert_eq!(r.code(), 2, "{}", r.stderr());
    assert!(r.stderr().contains("simulate.pathz"));
    assert!(!r.out.exists());
}

#[test]
fn missing_seed_aborts_even_with_override() {
    let r = fpdiff("check-stationary", "model.kind = VP\n", &["--seed", "3"]);
    assert_eq!(r.code(), 2);
    assert!(r.stderr().contains("run.seed"));
    assert!(!r.out.exists());
}

#[test]
fn malformed_line_aborts() {
    let r = fpdiff("train", "run.seed = 1\nthis is not a setting\n", &[]);
    assert_eq!(r.code(), 2);
}

#[test]
fn vp_is_stationary() {
    let r = fpdiff(
        "check-stationary",
        "run.seed = 1\nmodel.kind = VP\nmodel.dim = 3\ncheck.paths = 2000\ncheck.steps = 400\ncheck.moment_tol = 0.1\n",
        &[],
    );
    assert_eq!(r.code(), 0, "{}", r.stderr());
    let report = r.json("check_report.json");
    assert_eq!(report["passed"], true);
    assert_eq!(report["checks"].as_array().unwrap().len(), 3);
    assert!(r.read("config.echo").contains("model.kind = VP"));
}

#[test]
fn random_general_models_are_stationary() {
    let r = fpdiff(
        "check-stationary",
        "run.seed = 9\nmodel.scale = 2\ncheck.source = random\ncheck.n_models = 3\ncheck.paths = 2000\ncheck.steps = 400\ncheck.moment_tol = 0.1\n",
        &[],
    );
    assert_eq!(r.code(), 0, "{}", r.stderr());
    let report = r.json("check_report.json");
    let residuals: Vec<f64> = report["checks"]
        .as_array()
        .unwrap()
        .iter()
        .filter(|c| c["check"] == "fpk_residual")
        .map(|c| c["value"].as_f64().unwrap())
        .collect();
    assert_eq!(residuals.len(), 3);
    assert!(residuals.iter().all(|v| *v < 1e-8));
}

#[test]
fn symmetric_drift_defect_fails_check() {
    let r = fpdiff(
        "check-stationary",
        "run.seed = 1\ncheck.source = linear\ncheck.drift = -1,0.5,0,-1\ncheck.diffusion = 2,0,0,2\n",
        &[],
    );
    assert_eq!(r.code(), 1);
    assert!(r.stderr().contains("symmetric_defect"));
    assert_eq!(r.json("check_report.json")["passed"], false);
}

#[test]
fn complete_linear_sde_passes_check() {
    // A + Aᵀ + R = 0 with an antisymmetric part in A.
    let r = fpdiff(
        "check-stationary",
        "run.seed = 1\ncheck.source = linear\ncheck.drift = -1,-0.3,0.3,-1\ncheck.diffusion = 2,0,0,2\n",
        &[],
    );
    assert_eq!(r.code(), 0, "{}", r.stderr());
}

const SIMULATE: &str = "run.seed = 7\nmodel.kind = FP_GENERAL\nmodel.dim = 2\nmodel.metric_log_eigs = 0.3,-0.3\nmodel.omega_blocks = 0.4\nsimulate.paths = 4\nsimulate.steps = 100\nsimulate.x0 = 1,-1\n";

#[test]
fn simulate_writes_one_csv_per_path_and_is_reproducible() {
    let a = fpdiff("simulate", SIMULATE, &[]);
    assert_eq!(a.code(), 0, "{}", a.stderr());
    let names = files(&a.out);
    for i in 0..4 {
        assert!(names.contains(&format!("path_{i:04}.csv")));
    }
    assert!(!names.contains(&"path_0004.csv".to_string()));
    let csv = a.read("path_0000.csv");
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("t,x0,x1"));
    let first: Vec<&str> = lines.next().unwrap().split(',').collect();
    assert_eq!(first[1].parse::<f64>().unwrap(), 1.0);
    // 17 significant digits.
    assert_eq!(first[1].split('e').next().unwrap().replace('.', "").len(), 17);
    assert_eq!(csv.lines().count(), 102);

    let b = fpdiff("simulate", SIMULATE, &[]);
    for name in ["path_0000.csv", "path_0003.csv", "samples.csv"] {
        assert_eq!(a.read(name), b.read(name), "{name}");
    }
    let manifest = a.json("manifest.json");
    assert_eq!(manifest["command"], "simulate");
    assert_eq!(manifest["seed"], 7);
    let listed: Vec<&str> = manifest["files"]
        .as_array()
        .unwrap()
        .iter()
        .map(|f| f["name"].as_str().unwrap())
        .collect();
    assert!(listed.contains(&"path_0002.csv") && listed.contains(&"config.echo"));

    let c = fpdiff("simulate", SIMULATE, &["--seed", "8"]);
    assert_ne!(a.read("path_0000.csv"), c.read("path_0000.csv"));
    assert!(c.read("config.echo").contains("run.seed = 8"));
    assert_eq!(c.json("manifest.json")["seed"], 8);
}

#[test]
fn sequential_and_parallel_runs_agree() {
    let a = fpdiff("simulate", SIMULATE, &[]);
    let b = fpdiff("simulate", &format!("{SIMULATE}run.parallel = false\n"), &[]);
    assert_eq!(a.read("samples.csv"), b.read("samples.csv"));
}

#[test]
fn flow_trajectories_carry_logdet() {
    let r = fpdiff(
        "simulate",
        "run.seed = 2\nsimulate.direction = flow\nsimulate.paths = 2\nsimulate.steps = 40\nsimulate.start_std = 1\n",
        &[],
    );
    assert_eq!(r.code(), 0, "{}", r.stderr());
    let csv = r.read("path_0001.csv");
    assert_eq!(csv.lines().next(), Some("t,x0,x1,logdet"));
    let last: Vec<f64> = csv
        .lines()
        .last()
        .unwrap()
        .split(',')
        .map(|v| v.parse().unwrap())
        .collect();
    assert!(last[3].is_finite());
}

const TRAIN: &str = "run.seed = 5\nmodel.kind = FP_NOISE\nmodel.dim = 2\ndata.kind = ring\nnet.hidden = 16,16\ntrain.iterations = 40\ntrain.lr = 1e-3\ntrain.forward_lr = 1e-2\ntrain.log_every = 10\n";

#[test]
fn mix_training_writes_stage_checkpoints_and_loss_log() {
    let r = fpdiff("train", &format!("{TRAIN}train.mode = MIX\n"), &[]);
    assert_eq!(r.code(), 0, "{}", r.stderr());
    let names = files(&r.out);
    for f in [
        "ckpt_stage1",
        "ckpt_stage2",
        "ckpt_final",
        "loss.csv",
        "metrics.json",
        "manifest.json",
        "config.echo",
    ] {
        assert!(names.contains(&f.to_string()), "{f} missing from {names:?}");
    }
    let loss = r.read("loss.csv");
    assert_eq!(loss.lines().next(), Some("step,loss,reg_penalty"));
    assert!(loss.lines().count() > 2);
    let stage1 = Checkpoint::load(&r.out.join("ckpt_stage1")).unwrap();
    let stage2 = Checkpoint::load(&r.out.join("ckpt_stage2")).unwrap();
    // Stage 2 trains the score only.
    assert_eq!(stage1.state.model, stage2.state.model);
    assert_ne!(stage1.state.net, stage2.state.net);

    let metrics = r.json("metrics.json");
    let rec = &metrics[0];
    for key in ["metric", "value", "n", "seed", "config_hash"] {
        assert!(rec.get(key).is_some(), "{key}");
    }
    assert_eq!(rec["config_hash"], r.json("manifest.json")["config_hash"]);
}

#[test]
fn periodic_checkpoints_follow_the_interval() {
    let r = fpdiff(
        "train",
        &format!("{TRAIN}train.mode = JOINT\ntrain.checkpoint_every = 20\n"),
        &[],
    );
    assert_eq!(r.code(), 0, "{}", r.stderr());
    let names = files(&r.out);
    assert!(names.contains(&"ckpt_step_000020".to_string()), "{names:?}");
    assert!(names.contains(&"ckpt_step_000040".to_string()), "{names:?}");
}

#[test]
fn checkpoint_round_trip_is_byte_identical() {
    let r = fpdiff("train", &format!("{TRAIN}train.mode = JOINT\n"), &[]);
    assert_eq!(r.code(), 0, "{}", r.stderr());
    let text = r.read("ckpt_final");
    let ck = Checkpoint::from_text(&text).unwrap();
    assert_eq!(ck.to_text().unwrap(), text);
    let copy = r.dir.path().join("copy");
    ck.save(&copy).unwrap();
    assert_eq!(fs::read_to_string(&copy).unwrap(), text);

    let bumped = text.replacen("fpdiff-checkpoint 1", "fpdiff-checkpoint 2", 1);
    assert!(matches!(
        Checkpoint::from_text(&bumped),
        Err(CheckpointError::Version { .. })
    ));
}

#[test]
fn trained_checkpoint_drives_reverse_simulation_and_eval() {
    let t = fpdiff("train", &format!("{TRAIN}train.mode = JOINT\n"), &[]);
    assert_eq!(t.code(), 0, "{}", t.stderr());
    let ckpt = t.out.join("ckpt_final");
    let s = fpdiff(
        "simulate",
        &format!(
            "run.seed = 1\nsimulate.direction = reverse\nsimulate.score = checkpoint\nsimulate.checkpoint = {}\nsimulate.paths = 3\nsimulate.steps = 50\n",
            ckpt.display()
        ),
        &[],
    );
    assert_eq!(s.code(), 0, "{}", s.stderr());
    assert_eq!(s.read("samples.csv").lines().count(), 4);
    let e = fpdiff(
        "eval",
        &format!(
            "run.seed = 1\nmodel.dim = 2\ndata.kind = ring\neval.score = checkpoint\neval.checkpoint = {}\neval.metrics = sliced_w2\neval.samples = 200\neval.steps = 50\n",
            ckpt.display()
        ),
        &[],
    );
    assert_eq!(e.code(), 0, "{}", e.stderr());
    assert!(e.json("sliced_w2.json")["value"].as_f64().unwrap() > 0.0);
}

#[test]
fn poisoned_weights_abort_training() {
    let r = fpdiff("train", &format!("{TRAIN}train.inject_nan_at = 10\n"), &[]);
    assert_eq!(r.code(), 2);
    assert!(r.stderr().contains("diverged at step 10"), "{}", r.stderr());
}

#[test]
fn exact_score_nll_matches_gaussian_entropy() {
    let r = fpdiff(
        "eval",
        "run.seed = 2\nmodel.kind = VP\nmodel.dim = 2\neval.score = exact\neval.metrics = nll,w2\neval.samples = 500\n",
        &[],
    );
    assert_eq!(r.code(), 0, "{}", r.stderr());
    // 0.5 log2(2πe) bits per dimension; standard error is about 0.03.
    let nll = r.json("nll.json")["value"].as_f64().unwrap();
    assert!((nll - 2.0471).abs() < 0.15, "nll {nll}");
    let w2 = r.json("w2.json");
    assert!(w2["value"].as_f64().unwrap() < 0.05, "{w2}");
    assert_eq!(w2["n"], 500);
    assert_eq!(w2["seed"], 2);
    assert_eq!(r.json("metrics.json").as_array().unwrap().len(), 2);
}

#[test]
fn w2_whitens_by_the_target() {
    let r = fpdiff(
        "eval",
        "run.seed = 4\nmodel.kind = VP\nmodel.dim = 2\ndata.mean = 1,-2\ndata.cov = 0.25,0,0,4\neval.score = exact\neval.metrics = w2\neval.samples = 800\neval.w2_mean = 1,-2\neval.w2_cov = 0.25,0,0,4\n",
        &[],
    );
    assert_eq!(r.code(), 0, "{}", r.stderr());
    assert!(r.json("w2.json")["value"].as_f64().unwrap() < 0.05);
}

#[test]
fn eval_without_checkpoint_fails() {
    let r = fpdiff(
        "eval",
        "run.seed = 1\neval.score = checkpoint\neval.checkpoint = /nonexistent/ckpt_final\n",
        &[],
    );
    assert_eq!(r.code(), 1);
    assert!(r.stderr().contains("/nonexistent/ckpt_final"));
    assert!(r.out.join("config.echo").exists());
}

#[test]
fn toy3d_writes_grids_and_alignment() {
    let r = fpdiff(
        "toy3d",
        "run.seed = 0\ntoy3d.iterations = 10\ntoy3d.hidden = 8\ntoy3d.grid_nx = 3\ntoy3d.grid_nz = 4\ntoy3d.eval_times = 0.2\n",
        &[],
    );
    assert_eq!(r.code(), 0, "{}", r.stderr());
    for name in ["vp", "fp", "fp_reg"] {
        let grid = r.read(&format!("grid_{name}_t0.csv"));
        assert_eq!(grid.lines().next(), Some("x,z,vx,vz"));
        assert_eq!(grid.lines().count(), 13);
        assert!(Checkpoint::load(&r.out.join(format!("ckpt_{name}"))).is_ok());
    }
    let a = r.json("alignment.json");
    assert_eq!(a["scenarios"].as_array().unwrap().len(), 3);
    let v = a["scenarios"][0]["record"]["value"].as_f64().unwrap();
    assert!((-1.0..=1.0).contains(&v));
}
