//! Versioned plain-text checkpoints.
//!
//! One named field per line, floats with 17 significant digits, so that
//! save → load → save reproduces the file byte for byte.

use std::fmt::Write as _;
use std::path::Path;

use fpdiff::matrix_param::{AntisymParam, DampedBlocks, SpdParam};
use fpdiff::score::{ScoreNet, ScoreNetArch};
use fpdiff::sde::{ForwardModel, ForwardParams, MetricField, ModelKind, TimeSchedule, VeSigma};
use fpdiff::train::{Adam, TrainState};
use nalgebra::DMatrix;
use thiserror::Error;

pub const MAGIC: &str = "fpdiff-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint (missing {MAGIC} header)")]
    NotACheckpoint,
    #[error("checkpoint version {found} is not supported (expected {VERSION})")]
    Version { found: String },
    #[error("line {line}: expected field {expected:?}, found {found:?}")]
    Field {
        line: usize,
        expected: &'static str,
        found: String,
    },
    #[error("line {line}: {msg}")]
    Value { line: usize, msg: String },
    #[error("checkpoint ends early (expected field {0:?})")]
    Truncated(&'static str),
    #[error("unexpected content after end marker")]
    Trailing,
    #[error("model cannot be serialized: {0}")]
    Unsupported(String),
    #[error(transparent)]
    Core(#[from] fpdiff::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

type Result<T> = std::result::Result<T, CheckpointError>;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config_hash: String,
    pub state: TrainState,
}

fn push_floats(out: &mut String, name: &str, v: &[f64]) {
    write!(out, "{name} {}", v.len()).unwrap();
    for x in v {
        write!(out, " {x:.16e}").unwrap();
    }
    out.push('\n');
}

fn push(out: &mut String, name: &str, value: impl std::fmt::Display) {
    writeln!(out, "{name} {value}").unwrap();
}

fn row_major(m: &DMatrix<f64>) -> Vec<f64> {
    (0..m.nrows())
        .flat_map(|i| (0..m.ncols()).map(move |j| m[(i, j)]))
        .collect()
}

fn form(params: &ForwardParams) -> &'static str {
    match params {
        ForwardParams::Fixed => "FIXED",
        ForwardParams::Drift(_) => "DRIFT",
        ForwardParams::Noise { .. } => "NOISE",
        ForwardParams::General { .. } => "GENERAL",
        ForwardParams::Damped(_) => "DAMPED",
    }
}

fn write_model(out: &mut String, m: &ForwardModel) -> Result<()> {
    let s = m.schedule();
    push(out, "model.kind", m.kind());
    push(out, "model.dim", m.dim());
    push(out, "model.scale", format!("{:.16e}", m.scale()));
    push_floats(out, "model.schedule", &[s.beta_min, s.beta_max, s.horizon]);
    push(out, "model.form", form(m.params()));
    match m.params() {
        ForwardParams::Fixed => match m.kind() {
            ModelKind::Vp => {}
            ModelKind::Ve => {
                let ve = m.ve_sigma().expect("VE model carries its noise levels");
                push_floats(out, "model.ve", &[ve.sigma_min, ve.sigma_max]);
            }
            _ => {
                let MetricField::Constant(r) = m.metric() else {
                    return Err(CheckpointError::Unsupported("position-dependent metric".into()));
                };
                push_floats(out, "model.r_inv", &row_major(r));
                push_floats(out, "model.omega", &row_major(m.omega()));
            }
        },
        ForwardParams::Noise { trace_normalized, .. } => {
            push(out, "model.trace_normalized", trace_normalized);
            push_floats(out, "model.params", &m.flat_params());
        }
        _ => push_floats(out, "model.params", &m.flat_params()),
    }
    Ok(())
}

fn write_adam(out: &mut String, name: &str, a: &Adam) {
    push(out, &format!("opt.{name}.t"), a.t);
    push_floats(out, &format!("opt.{name}.m"), &a.m);
    push_floats(out, &format!("opt.{name}.v"), &a.v);
}

impl Checkpoint {
    pub fn to_text(&self) -> Result<String> {
        let mut out = String::new();
        push(&mut out, MAGIC, VERSION);
        push(&mut out, "config_hash", &self.config_hash);
        push(&mut out, "step", self.state.step);
        write_model(&mut out, &self.state.model)?;
        let arch = self.state.net.arch();
        push(&mut out, "net.dim", arch.dim);
        let hidden: Vec<String> = arch.hidden.iter().map(|h| h.to_string()).collect();
        push(
            &mut out,
            "net.hidden",
            format!("{} {}", hidden.len(), hidden.join(" ")).trim_end(),
        );
        push(&mut out, "net.output_scaling", arch.output_scaling);
        push_floats(&mut out, "net.params", self.state.net.params());
        write_adam(&mut out, "score", &self.state.score_opt);
        write_adam(&mut out, "forward", &self.state.forward_opt);
        out.push_str("end\n");
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        Ok(std::fs::write(path, self.to_text()?)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut r = Reader {
            lines: text.lines().enumerate(),
            line: 0,
        };
        match r.lines.next() {
            Some((_, l)) => match l.split_once(' ') {
                Some((MAGIC, v)) if v == VERSION.to_string() => {}
                Some((MAGIC, v)) => return Err(CheckpointError::Version { found: v.to_string() }),
                _ => return Err(CheckpointError::NotACheckpoint),
            },
            None => return Err(CheckpointError::NotACheckpoint),
        }
        let config_hash = r.field("config_hash")?.to_string();
        let step = r.parse("step")?;
        let model = r.model()?;
        let dim: usize = r.parse("net.dim")?;
        let hidden = r.usizes("net.hidden")?;
        let output_scaling = r.bool("net.output_scaling")?;
        let arch = ScoreNetArch::new(dim, hidden, output_scaling)?;
        let net = ScoreNet::from_params(arch, *model.schedule(), r.floats("net.params")?)?;
        let score_opt = r.adam("score")?;
        let forward_opt = r.adam("forward")?;
        if !r.field("end")?.is_empty() {
            return Err(CheckpointError::Trailing);
        }
        if r.lines.any(|(_, l)| !l.trim().is_empty()) {
            return Err(CheckpointError::Trailing);
        }
        let mut state = TrainState::new(model, net)?;
        if score_opt.len() != state.net.params().len() || forward_opt.len() != state.model.flat_params().len() {
            return Err(CheckpointError::Value {
                line: r.line,
                msg: "optimizer state does not match parameter counts".into(),
            });
        }
        state.score_opt = score_opt;
        state.forward_opt = forward_opt;
        state.step = step;
        Ok(Self { config_hash, state })
    }
}

struct Reader<'a, I: Iterator<Item = (usize, &'a str)>> {
    lines: I,
    line: usize,
}

impl<'a, I: Iterator<Item = (usize, &'a str)>> Reader<'a, I> {
    fn field(&mut self, name: &'static str) -> Result<&'a str> {
        let (i, l) = self.lines.next().ok_or(CheckpointError::Truncated(name))?;
        self.line = i + 1;
        let (k, v) = l.split_once(' ').unwrap_or((l, ""));
        if k != name {
            return Err(CheckpointError::Field {
                line: self.line,
                expected: name,
                found: k.to_string(),
            });
        }
        Ok(v)
    }

    fn err(&self, msg: impl Into<String>) -> CheckpointError {
        CheckpointError::Value {
            line: self.line,
            msg: msg.into(),
        }
    }

    fn parse<T: std::str::FromStr>(&mut self, name: &'static str) -> Result<T> {
        let v = self.field(name)?;
        v.parse().map_err(|_| self.err(format!("bad value {v:?} for {name}")))
    }

    fn bool(&mut self, name: &'static str) -> Result<bool> {
        match self.field(name)? {
            "true" => Ok(true),
            "false" => Ok(false),
            v => Err(self.err(format!("bad boolean {v:?}"))),
        }
    }

    fn counted<T: std::str::FromStr>(&mut self, name: &'static str) -> Result<Vec<T>> {
        let v = self.field(name)?;
        let mut it = v.split(' ').filter(|s| !s.is_empty());
        let n: usize = it
            .next()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| self.err(format!("{name} needs a length")))?;
        let vals: Vec<T> = it
            .map(|s| s.parse().map_err(|_| self.err(format!("bad number {s:?} in {name}"))))
            .collect::<Result<_>>()?;
        if vals.len() != n {
            return Err(self.err(format!("{name} declares {n} values but has {}", vals.len())));
        }
        Ok(vals)
    }

    fn floats(&mut self, name: &'static str) -> Result<Vec<f64>> {
        let v: Vec<f64> = self.counted(name)?;
        if v.iter().any(|x| !x.is_finite()) {
            return Err(self.err(format!("non-finite value in {name}")));
        }
        Ok(v)
    }

    fn usizes(&mut self, name: &'static str) -> Result<Vec<usize>> {
        self.counted(name)
    }

    fn adam(&mut self, name: &'static str) -> Result<Adam> {
        let (t, m, v) = match name {
            "score" => ("opt.score.t", "opt.score.m", "opt.score.v"),
            _ => ("opt.forward.t", "opt.forward.m", "opt.forward.v"),
        };
        let t = self.parse(t)?;
        let m = self.floats(m)?;
        let v = self.floats(v)?;
        if m.len() != v.len() {
            return Err(self.err("optimizer moments differ in length"));
        }
        Ok(Adam { m, v, t })
    }

    fn model(&mut self) -> Result<ForwardModel> {
        let kind: ModelKind = self.field("model.kind")?.parse()?;
        let dim: usize = self.parse("model.dim")?;
        let scale: f64 = self.parse("model.scale")?;
        let s = self.floats("model.schedule")?;
        if s.len() != 3 {
            return Err(self.err("model.schedule needs 3 values"));
        }
        let sched = TimeSchedule::new(s[0], s[1], s[2])?;
        let form = self.field("model.form")?;
        let model = match (form, kind) {
            ("FIXED", ModelKind::Vp) => ForwardModel::vp(dim, sched)?,
            ("FIXED", ModelKind::Ve) => {
                let v = self.floats("model.ve")?;
                if v.len() != 2 {
                    return Err(self.err("model.ve needs 2 values"));
                }
                ForwardModel::ve(dim, VeSigma::new(v[0], v[1])?, sched)?
            }
            ("FIXED", _) => {
                let r = self.matrix("model.r_inv", dim)?;
                let w = self.matrix("model.omega", dim)?;
                match kind {
                    ModelKind::FpLinear => ForwardModel::fp_linear(r, w, sched)?,
                    ModelKind::FpGeneral => ForwardModel::fp_general(MetricField::Constant(r), w, sched)?,
                    other => return Err(self.err(format!("{other} cannot have fixed matrices"))),
                }
            }
            ("DRIFT", ModelKind::FpDrift) => {
                ForwardModel::fp_drift(AntisymParam::from_flat(dim, &self.floats("model.params")?)?, sched)?
            }
            ("NOISE", ModelKind::FpNoise) => {
                let tn = self.bool("model.trace_normalized")?;
                ForwardModel::fp_noise_with(SpdParam::from_flat(dim, &self.floats("model.params")?)?, tn, sched)?
            }
            ("GENERAL", ModelKind::FpGeneral) => {
                let p = self.floats("model.params")?;
                let k = dim + fpdiff::matrix_param::generator_len(dim);
                if p.len() < k {
                    return Err(self.err("model.params too short"));
                }
                ForwardModel::fp_general_param(
                    SpdParam::from_flat(dim, &p[..k])?,
                    AntisymParam::from_flat(dim, &p[k..])?,
                    sched,
                )?
            }
            ("DAMPED", ModelKind::FpDamped) => {
                let p = self.floats("model.params")?;
                let h = p.len() / 2;
                ForwardModel::fp_damped(DampedBlocks::new(p[..h].to_vec(), p[h..].to_vec())?, sched)?
            }
            (f, k) => return Err(self.err(format!("parameter form {f} does not fit model kind {k}"))),
        };
        if model.dim() != dim {
            return Err(self.err(format!("model.dim {dim} but parameters give {}", model.dim())));
        }
        Ok(model.with_scale(scale)?)
    }

    fn matrix(&mut self, name: &'static str, dim: usize) -> Result<DMatrix<f64>> {
        let v = self.floats(name)?;
        if v.len() != dim * dim {
            return Err(self.err(format!("{name} needs {} values", dim * dim)));
        }
        Ok(DMatrix::from_row_slice(dim, dim, &v))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use fpdiff::matrix_param::OrthogonalParam;
    use fpdiff::rng::RngSpec;

    fn state(model: ForwardModel) -> TrainState {
        let arch = ScoreNetArch::new(model.dim(), vec![5, 3], true).unwrap();
        let net = ScoreNet::new(arch, *model.schedule(), &mut RngSpec::for_purpose(1, "ckpt-test").rng());
        let mut s = TrainState::new(model, net).unwrap();
        s.step = 17;
        s.score_opt.t = 3;
        s.score_opt
            .m
            .iter_mut()
            .enumerate()
            .for_each(|(i, v)| *v = (i as f64).sin() / 3.0);
        s.score_opt
            .v
            .iter_mut()
            .enumerate()
            .for_each(|(i, v)| *v = (i as f64 * 0.1).exp() * 1e-7);
        s
    }

    fn models() -> Vec<ForwardModel> {
        let sched = TimeSchedule::new(0.1, 20.0, 1.0).unwrap();
        let orth = OrthogonalParam::new(3, vec![0.3, -0.2, 0.9]).unwrap();
        let spd = SpdParam::new(orth.clone(), vec![0.1, -0.4, 1.0 / 3.0]).unwrap();
        let anti = AntisymParam::new(orth, vec![0.7]).unwrap();
        vec![
            ForwardModel::vp(3, sched).unwrap(),
            ForwardModel::ve(2, VeSigma::new(0.01, 50.0).unwrap(), sched).unwrap(),
            ForwardModel::fp_drift(anti.clone(), sched).unwrap(),
            ForwardModel::fp_noise_with(spd.clone(), true, sched)
                .unwrap()
                .with_scale(2.5)
                .unwrap(),
            ForwardModel::fp_general_param(spd, anti, sched).unwrap(),
            ForwardModel::fp_linear(
                DMatrix::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 1.0]),
                DMatrix::from_row_slice(2, 2, &[0.0, 0.5, -0.5, 0.0]),
                sched,
            )
            .unwrap(),
            ForwardModel::fp_damped(DampedBlocks::new(vec![1.0], vec![4.0]).unwrap(), sched).unwrap(),
        ]
    }

    #[test]
    fn round_trip_is_byte_identical() {
        for m in models() {
            let ck = Checkpoint {
                config_hash: "ab".repeat(32),
                state: state(m),
            };
            let text = ck.to_text().unwrap();
            let back = Checkpoint::from_text(&text).unwrap();
            assert_eq!(back.to_text().unwrap(), text);
            assert_eq!(back.state.net, ck.state.net);
            assert_eq!(back.state.model.flat_params(), ck.state.model.flat_params());
            assert_eq!(back.state.step, 17);
        }
    }

    #[test]
    fn version_and_corruption_are_rejected() {
        let ck = Checkpoint {
            config_hash: "00".into(),
            state: state(models().remove(0)),
        };
        let text = ck.to_text().unwrap();
        let bumped = text.replacen("fpdiff-checkpoint 1", "fpdiff-checkpoint 2", 1);
        assert!(matches!(
            Checkpoint::from_text(&bumped),
            Err(CheckpointError::Version { .. })
        ));
        assert!(matches!(
            Checkpoint::from_text("hello"),
            Err(CheckpointError::NotACheckpoint)
        ));
        let cut: String = text.lines().take(8).map(|l| format!("{l}\n")).collect();
        assert!(matches!(
            Checkpoint::from_text(&cut),
            Err(CheckpointError::Truncated(_))
        ));
        let swapped = text.replacen("step 17", "steps 17", 1);
        assert!(matches!(
            Checkpoint::from_text(&swapped),
            Err(CheckpointError::Field { .. })
        ));
        let extra = format!("{text}step 3\n");
        assert!(matches!(Checkpoint::from_text(&extra), Err(CheckpointError::Trailing)));
    }
}
