//! Denoising score matching with optional learning of the forward process.
//!
//! Noisy inputs are drawn by reparameterization, `x_t = M x₀ + C^{1/2} ξ`,
//! whose conditional score is `-C^{-1/2} ξ`. Score-network gradients come
//! from backpropagation; forward-process gradients are central differences
//! of the full objective (DSM plus flow regularizer) with `t`, `ξ` and `ε`
//! held fixed.

use std::fmt;
use std::str::FromStr;

use nalgebra::DVector;
use rand::Rng;

use crate::data::Dataset;
use crate::error::{check_dim, Error, Result};
use crate::rng::{fill_normal, RngSpec, StreamRng};
use crate::score::ScoreNet;
use crate::sde::{ForwardModel, T_EPS};

pub const DEFAULT_LR: f64 = 2e-4;
pub const DEFAULT_BATCH: usize = 96;
pub const DEFAULT_LAMBDA: f64 = 0.01;
pub const LOG_EVERY: usize = 100;
pub const FORWARD_FD_STEP: f64 = 1e-5;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StageMode {
    Joint,
    Mix,
    ScoreOnly,
}

impl StageMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            StageMode::Joint => "JOINT",
            StageMode::Mix => "MIX",
            StageMode::ScoreOnly => "SCORE_ONLY",
        }
    }

    /// Whether the forward process is trained in each stage.
    pub fn stages(&self) -> &'static [bool] {
        match self {
            StageMode::Joint => &[true],
            StageMode::Mix => &[true, false],
            StageMode::ScoreOnly => &[false],
        }
    }
}

impl fmt::Display for StageMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for StageMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "JOINT" => Ok(StageMode::Joint),
            "MIX" => Ok(StageMode::Mix),
            "SCORE_ONLY" => Ok(StageMode::ScoreOnly),
            other => Err(Error::Invalid(format!("unknown stage mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossWeighting {
    /// `w(t) = 1 - e^{-B(t)}`
    KernelVariance,
    Unit,
}

impl LossWeighting {
    pub fn as_str(&self) -> &'static str {
        match self {
            LossWeighting::KernelVariance => "KERNEL_VARIANCE",
            LossWeighting::Unit => "UNIT",
        }
    }

    fn weight(&self, model: &ForwardModel, t: f64) -> f64 {
        match self {
            LossWeighting::KernelVariance => -(-model.schedule().integral_unchecked(t)).exp_m1(),
            LossWeighting::Unit => 1.0,
        }
    }
}

impl fmt::Display for LossWeighting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for LossWeighting {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "KERNEL_VARIANCE" => Ok(LossWeighting::KernelVariance),
            "UNIT" => Ok(LossWeighting::Unit),
            other => Err(Error::Invalid(format!("unknown loss weighting {other:?}"))),
        }
    }
}

/// Adaptive-moment optimizer state for one parameter group.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl Adam {
    pub fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m.is_empty()
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64) -> Result<()> {
        check_dim("optimizer parameters", self.m.len(), params.len())?;
        check_dim("optimizer gradients", self.m.len(), grads.len())?;
        self.t += 1;
        let c1 = 1.0 - ADAM_BETA1.powi(self.t as i32);
        let c2 = 1.0 - ADAM_BETA2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = ADAM_BETA1 * self.m[i] + (1.0 - ADAM_BETA1) * g;
            self.v[i] = ADAM_BETA2 * self.v[i] + (1.0 - ADAM_BETA2) * g * g;
            let m_hat = self.m[i] / c1;
            let v_hat = self.v[i] / c2;
            params[i] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub dataset: Dataset,
    pub lr: f64,
    pub forward_lr: f64,
    pub batch_size: usize,
    /// Steps per stage.
    pub iterations: usize,
    pub mode: StageMode,
    pub lambda1: f64,
    pub lambda2: f64,
    pub weighting: LossWeighting,
    pub seed: u64,
    pub log_every: usize,
    /// 0 disables periodic checkpoints.
    pub checkpoint_every: usize,
}

impl TrainConfig {
    pub fn new(dataset: Dataset, seed: u64) -> Self {
        Self {
            dataset,
            lr: DEFAULT_LR,
            forward_lr: DEFAULT_LR,
            batch_size: DEFAULT_BATCH,
            iterations: 1000,
            mode: StageMode::ScoreOnly,
            lambda1: 0.0,
            lambda2: 0.0,
            weighting: LossWeighting::KernelVariance,
            seed,
            log_every: LOG_EVERY,
            checkpoint_every: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Invalid(m.to_string()));
        if !(self.lr > 0.0 && self.lr.is_finite()) || !(self.forward_lr > 0.0 && self.forward_lr.is_finite()) {
            return bad("learning rates must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch size must be at least 1");
        }
        if self.log_every == 0 {
            return bad("log interval must be at least 1");
        }
        if !(self.lambda1 >= 0.0 && self.lambda2 >= 0.0) {
            return bad("regularization weights must be nonnegative");
        }
        Ok(())
    }
}

/// One minibatch: data points, times, kernel noise `ξ` and regularizer
/// probes `ε`, all row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub x0: Vec<f64>,
    pub ts: Vec<f64>,
    pub xi: Vec<f64>,
    pub eps: Vec<f64>,
}

impl Batch {
    pub fn draw(dataset: &Dataset, horizon: f64, n: usize, rng: &mut StreamRng) -> Self {
        let d = dataset.dim();
        let x0 = dataset.sample(rng, n);
        let ts = (0..n)
            .map(|_| T_EPS + (horizon - T_EPS) * rng.random::<f64>())
            .collect();
        let mut xi = vec![0.0; n * d];
        fill_normal(rng, &mut xi);
        let mut eps = vec![0.0; n * d];
        fill_normal(rng, &mut eps);
        Self { x0, ts, xi, eps }
    }

    pub fn len(&self) -> usize {
        self.ts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ts.is_empty()
    }
}

/// Noisy inputs, regression targets and weights for a batch.
struct Perturbed {
    xs: Vec<f64>,
    targets: Vec<f64>,
    weights: Vec<f64>,
}

fn perturb(model: &ForwardModel, batch: &Batch, weighting: LossWeighting) -> Result<Perturbed> {
    let d = model.dim();
    let n = batch.len();
    check_dim("batch data", n * d, batch.x0.len())?;
    check_dim("batch noise", n * d, batch.xi.len())?;
    let mut xs = vec![0.0; n * d];
    let mut targets = vec![0.0; n * d];
    let mut weights = vec![0.0; n];
    for b in 0..n {
        let t = batch.ts[b];
        let k = model.transition_kernel(t)?;
        let x0 = DVector::from_column_slice(&batch.x0[b * d..(b + 1) * d]);
        let xi = DVector::from_column_slice(&batch.xi[b * d..(b + 1) * d]);
        let xt = &k.mean_map * x0 + k.cov_sqrt() * &xi;
        let target = -(k.cov_inv_sqrt()? * xi);
        xs[b * d..(b + 1) * d].copy_from_slice(xt.as_slice());
        targets[b * d..(b + 1) * d].copy_from_slice(target.as_slice());
        weights[b] = weighting.weight(model, t);
    }
    Ok(Perturbed { xs, targets, weights })
}

/// `(T - t_eps)·[λ₁ mean ‖v‖² + λ₂ mean (εᵀv)²]` for flow vectors `v`.
fn reg_from_outputs(
    model: &ForwardModel,
    xs: &[f64],
    scores: &[f64],
    batch: &Batch,
    lambda1: f64,
    lambda2: f64,
) -> f64 {
    if lambda1 == 0.0 && lambda2 == 0.0 {
        return 0.0;
    }
    let d = model.dim();
    let n = batch.len();
    let mut f = vec![0.0; d];
    let mut tmp = vec![0.0; d];
    let (mut sq, mut proj) = (0.0, 0.0);
    for b in 0..n {
        let x = &xs[b * d..(b + 1) * d];
        let t = batch.ts[b];
        model.drift_into(x, t, &mut f);
        model.diffusion_tensor_apply_into(x, t, &scores[b * d..(b + 1) * d], &mut tmp);
        for i in 0..d {
            f[i] -= 0.5 * tmp[i];
        }
        if !model.metric().is_constant() {
            model.diffusion_tensor_divergence_into(x, t, &mut tmp);
            for i in 0..d {
                f[i] -= 0.5 * tmp[i];
            }
        }
        sq += f.iter().map(|v| v * v).sum::<f64>();
        let e: f64 = f.iter().zip(&batch.eps[b * d..(b + 1) * d]).map(|(v, e)| v * e).sum();
        proj += e * e;
    }
    (model.horizon() - T_EPS) * (lambda1 * sq + lambda2 * proj) / n as f64
}

/// DSM loss and its gradient with respect to the score network.
pub fn dsm_loss(
    net: &ScoreNet,
    model: &ForwardModel,
    batch: &Batch,
    weighting: LossWeighting,
) -> Result<(f64, Vec<f64>)> {
    let p = perturb(model, batch, weighting)?;
    net.loss_and_grad(&p.xs, &batch.ts, &p.targets, &p.weights)
}

/// Flow regularizer evaluated at the batch's noisy inputs.
pub fn reg_penalty(net: &ScoreNet, model: &ForwardModel, batch: &Batch, lambda1: f64, lambda2: f64) -> Result<f64> {
    check_dim("batch probes", batch.x0.len(), batch.eps.len())?;
    if lambda1 == 0.0 && lambda2 == 0.0 {
        return Ok(0.0);
    }
    let p = perturb(model, batch, LossWeighting::Unit)?;
    let mut s = vec![0.0; p.xs.len()];
    net.eval_batch(&p.xs, &batch.ts, &mut s)?;
    Ok(reg_from_outputs(model, &p.xs, &s, batch, lambda1, lambda2))
}

/// `(DSM loss, regularizer)` without gradients.
pub fn objective(
    net: &ScoreNet,
    model: &ForwardModel,
    batch: &Batch,
    weighting: LossWeighting,
    lambda1: f64,
    lambda2: f64,
) -> Result<(f64, f64)> {
    let p = perturb(model, batch, weighting)?;
    let mut s = vec![0.0; p.xs.len()];
    net.eval_batch(&p.xs, &batch.ts, &mut s)?;
    let d = model.dim();
    let mut dsm = 0.0;
    for b in 0..batch.len() {
        let e: f64 = (0..d).map(|i| (s[b * d + i] - p.targets[b * d + i]).powi(2)).sum();
        dsm += p.weights[b] * e;
    }
    dsm /= batch.len() as f64;
    Ok((dsm, reg_from_outputs(model, &p.xs, &s, batch, lambda1, lambda2)))
}

/// Central differences of `DSM + regularizer` in the forward parameters.
pub fn forward_gradient(
    net: &ScoreNet,
    model: &ForwardModel,
    batch: &Batch,
    weighting: LossWeighting,
    lambda1: f64,
    lambda2: f64,
    h: f64,
) -> Result<Vec<f64>> {
    let flat = model.flat_params();
    let mut grad = vec![0.0; flat.len()];
    let mut probe = flat.clone();
    for k in 0..flat.len() {
        probe[k] = flat[k] + h;
        let (a, ra) = objective(
            net,
            &model.with_flat_params(&probe)?,
            batch,
            weighting,
            lambda1,
            lambda2,
        )?;
        probe[k] = flat[k] - h;
        let (b, rb) = objective(
            net,
            &model.with_flat_params(&probe)?,
            batch,
            weighting,
            lambda1,
            lambda2,
        )?;
        probe[k] = flat[k];
        grad[k] = ((a + ra) - (b + rb)) / (2.0 * h);
    }
    Ok(grad)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossRecord {
    pub step: usize,
    /// Mean DSM loss over the logging window.
    pub loss: f64,
    /// Mean regularizer over the logging window.
    pub reg_penalty: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub net: ScoreNet,
    pub model: ForwardModel,
    pub score_opt: Adam,
    pub forward_opt: Adam,
    pub step: usize,
    pub history: Vec<LossRecord>,
}

impl TrainState {
    pub fn new(model: ForwardModel, net: ScoreNet) -> Result<Self> {
        check_dim("network vs model", model.dim(), net.arch().dim)?;
        Ok(Self {
            score_opt: Adam::new(net.params().len()),
            forward_opt: Adam::new(model.flat_params().len()),
            net,
            model,
            step: 0,
            history: Vec::new(),
        })
    }

    fn norms(&self) -> (f64, f64) {
        let l2 = |v: &[f64]| v.iter().fold(0.0, |s, x| s + x * x).sqrt();
        (l2(self.net.params()), l2(&self.model.flat_params()))
    }
}

/// Hooks called by [`fit_with`].
pub trait TrainObserver {
    fn on_log(&mut self, _record: &LossRecord) {}

    fn on_checkpoint(&mut self, _state: &TrainState) -> Result<()> {
        Ok(())
    }

    /// `stage` counts from 1.
    fn on_stage_end(&mut self, _stage: usize, _state: &TrainState) -> Result<()> {
        Ok(())
    }
}

pub struct NoObserver;

impl TrainObserver for NoObserver {}

pub fn fit(config: &TrainConfig, model: ForwardModel, net: ScoreNet) -> Result<TrainState> {
    fit_with(config, TrainState::new(model, net)?, &mut NoObserver)
}

/// Runs every stage of `config.mode` for `config.iterations` steps each.
/// Batches come from stream `train/batch`, one child stream per global step.
pub fn fit_with(config: &TrainConfig, mut state: TrainState, observer: &mut dyn TrainObserver) -> Result<TrainState> {
    config.validate()?;
    check_dim("dataset vs model", state.model.dim(), config.dataset.dim())?;
    let batches = RngSpec::for_purpose(config.seed, "train/batch");
    let horizon = state.model.horizon();
    for (stage, &forward_live) in config.mode.stages().iter().enumerate() {
        let forward_live = forward_live && !state.model.flat_params().is_empty();
        let (mut sum_loss, mut sum_reg, mut window) = (0.0, 0.0, 0usize);
        for _ in 0..config.iterations {
            let batch = Batch::draw(
                &config.dataset,
                horizon,
                config.batch_size,
                &mut batches.path(state.step as u64),
            );
            let (loss, grad) = dsm_loss(&state.net, &state.model, &batch, config.weighting)?;
            let reg = reg_penalty(&state.net, &state.model, &batch, config.lambda1, config.lambda2)?;
            let fgrad = if forward_live {
                Some(forward_gradient(
                    &state.net,
                    &state.model,
                    &batch,
                    config.weighting,
                    config.lambda1,
                    config.lambda2,
                    FORWARD_FD_STEP,
                )?)
            } else {
                None
            };
            let finite = loss.is_finite()
                && reg.is_finite()
                && grad.iter().all(|g| g.is_finite())
                && fgrad.iter().flatten().all(|g| g.is_finite());
            if !finite {
                let (score_norm, forward_norm) = state.norms();
                return Err(Error::TrainingDiverged {
                    step: state.step,
                    loss: loss + reg,
                    score_norm,
                    forward_norm,
                });
            }
            state.score_opt.step(state.net.params_mut(), &grad, config.lr)?;
            if let Some(fg) = fgrad {
                let mut flat = state.model.flat_params();
                state.forward_opt.step(&mut flat, &fg, config.forward_lr)?;
                state.model = state.model.with_flat_params(&flat)?;
            }
            if state.net.params().iter().any(|p| !p.is_finite()) {
                let (score_norm, forward_norm) = state.norms();
                return Err(Error::TrainingDiverged {
                    step: state.step,
                    loss,
                    score_norm,
                    forward_norm,
                });
            }
            state.step += 1;
            sum_loss += loss;
            sum_reg += reg;
            window += 1;
            if window == config.log_every {
                push_record(&mut state, observer, &mut sum_loss, &mut sum_reg, &mut window);
            }
            if config.checkpoint_every > 0 && state.step.is_multiple_of(config.checkpoint_every) {
                observer.on_checkpoint(&state)?;
            }
        }
        if window > 0 {
            push_record(&mut state, observer, &mut sum_loss, &mut sum_reg, &mut window);
        }
        observer.on_stage_end(stage + 1, &state)?;
    }
    Ok(state)
}

fn push_record(
    state: &mut TrainState,
    observer: &mut dyn TrainObserver,
    sum_loss: &mut f64,
    sum_reg: &mut f64,
    window: &mut usize,
) {
    let rec = LossRecord {
        step: state.step,
        loss: *sum_loss / *window as f64,
        reg_penalty: *sum_reg / *window as f64,
    };
    observer.on_log(&rec);
    state.history.push(rec);
    *sum_loss = 0.0;
    *sum_reg = 0.0;
    *window = 0;
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_zero_gradient() {
        let mut a = Adam::new(2);
        a.m = vec![1.0, -1.0];
        a.v = vec![0.0, 0.0];
        let mut p = vec![0.5, 0.5];
        let mut b = a.clone();
        b.m = vec![0.0, 0.0];
        b.step(&mut p, &[0.0, 0.0], 0.1).unwrap();
        assert_eq!(p, vec![0.5, 0.5]);
        a.step(&mut p, &[0.0, 0.0], 0.1).unwrap();
        assert_eq!(a.m, vec![0.9, -0.9]);
    }

    #[test]
    fn adam_quadratic() {
        let mut a = Adam::new(1);
        let mut p = vec![3.0];
        for _ in 0..5000 {
            let g = vec![2.0 * (p[0] - 1.25)];
            a.step(&mut p, &g, 0.01).unwrap();
        }
        assert!((p[0] - 1.25).abs() < 1e-4, "{}", p[0]);
    }

    #[test]
    fn mode_names() {
        for m in [StageMode::Joint, StageMode::Mix, StageMode::ScoreOnly] {
            assert_eq!(m.as_str().parse::<StageMode>().unwrap(), m);
        }
        for w in [LossWeighting::KernelVariance, LossWeighting::Unit] {
            assert_eq!(w.as_str().parse::<LossWeighting>().unwrap(), w);
        }
    }
}
