//! Optimization loop: Adam with bias correction, linear-warmup polynomial
//! learning-rate decay, EMA shadow parameters, and checkpointing.
//!
//! Every random draw in a run is derived from `(seed, step)` through split
//! streams, so a `(seed, config)` pair fully determines the checkpoint and
//! a resumed run is bit-identical to an uninterrupted one. Non-finite
//! losses or gradients abort with a checkpoint of the failing state.

use crate::flow::{make_flow_batch, FlowError, InterpolantConfig, TimeSamplerConfig};
use crate::losses::{rmflow_loss, GuidanceInputs, JointInputs, LossConfig, LossReport};
use crate::nets::{EncoderConfig, GuidanceEncoder, NetConfig, VelocityNet};
use crate::rng::Rng;
use crate::tasks::{PreparedTask, TaskSpec};
use crate::tensor::Tensor;
use alloc::boxed::Box;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

/// Training hyperparameters.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct TrainConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub ema_decay: f64,
    pub warmup_iters: usize,
    /// Polynomial decay exponent; 1 is linear.
    pub poly_power: f64,
    pub seed: u64,
    /// Keep an intermediate checkpoint every this many steps.
    pub snapshot_every: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            iterations: 100_000,
            batch_size: 256,
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.95,
            adam_eps: 1e-8,
            ema_decay: 0.9995,
            warmup_iters: 0,
            poly_power: 1.0,
            seed: 0,
            snapshot_every: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), FlowError> {
        if self.iterations == 0 || self.batch_size == 0 {
            return Err(FlowError::BadConfig("iterations and batch size must be positive"));
        }
        if self.lr <= 0.0 {
            return Err(FlowError::BadConfig("learning rate must be positive"));
        }
        for b in [self.beta1, self.beta2] {
            if !(0.0..1.0).contains(&b) {
                return Err(FlowError::BadConfig("Adam betas must lie in (0, 1)"));
            }
        }
        if !(0.0..=1.0).contains(&self.ema_decay) {
            return Err(FlowError::BadConfig("EMA decay must lie in [0, 1]"));
        }
        if self.warmup_iters >= self.iterations {
            return Err(FlowError::BadConfig("warmup must be shorter than the run"));
        }
        Ok(())
    }
}

/// Which objective the run optimizes: plain mean-flow training is the joint
/// objective with both extra terms switched off.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum ModelKind {
    MeanFlow,
    RmFlow,
}

impl ModelKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            ModelKind::MeanFlow => "meanflow",
            ModelKind::RmFlow => "rmflow",
        }
    }

    /// Effective loss weights for this model kind.
    pub fn effective_loss(&self, cfg: &LossConfig) -> LossConfig {
        match self {
            ModelKind::MeanFlow => LossConfig { lambda1: 0.0, lambda2: 0.0, rl_weight: 0.0, ..cfg.clone() },
            ModelKind::RmFlow => cfg.clone(),
        }
    }
}

/// Complete description of one training run.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct RunSpec {
    pub task: TaskSpec,
    pub model_kind: ModelKind,
    pub train: TrainConfig,
    pub loss: LossConfig,
    pub interp: InterpolantConfig,
    pub times: TimeSamplerConfig,
    /// Velocity-net width/depth/embedding; input size comes from the task.
    pub net_width: usize,
    pub net_depth: usize,
    pub net_emb_dim: usize,
    /// Hidden widths of the guidance encoder (guided tasks only).
    pub enc_hidden: Vec<usize>,
}

impl RunSpec {
    pub fn new(task: TaskSpec, model_kind: ModelKind) -> Self {
        RunSpec {
            task,
            model_kind,
            train: TrainConfig::default(),
            loss: LossConfig::default(),
            interp: InterpolantConfig::default(),
            times: TimeSamplerConfig::default(),
            net_width: 256,
            net_depth: 6,
            net_emb_dim: 64,
            enc_hidden: vec![128],
        }
    }

    pub fn net_config(&self) -> NetConfig {
        NetConfig {
            in_dim: self.task.data_dim(),
            width: self.net_width,
            depth: self.net_depth,
            emb_dim: self.net_emb_dim,
        }
    }

    pub fn encoder_config(&self) -> Option<EncoderConfig> {
        self.task.ctx_dim().map(|ctx_dim| EncoderConfig {
            ctx_dim,
            out_dim: self.task.data_dim(),
            hidden: self.enc_hidden.clone(),
        })
    }

    pub fn validate(&self) -> Result<(), FlowError> {
        self.task.validate()?;
        self.train.validate()?;
        self.loss.validate()?;
        self.interp.validate()?;
        self.times.validate()?;
        if self.net_width == 0 || self.net_depth == 0 || self.net_emb_dim == 0 || self.net_emb_dim % 2 != 0 {
            return Err(FlowError::BadConfig("net width/depth must be positive, emb dim even"));
        }
        Ok(())
    }
}

/// Serializable training state: parameters (raw and EMA), optimizer moments,
/// RNG state, and the config snapshot. Round-trips bit-exactly.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Checkpoint {
    pub version: u32,
    pub step: usize,
    pub spec: RunSpec,
    /// `net.`- and `enc.`-prefixed names aligned with the tensors.
    pub param_names: Vec<String>,
    pub params: Vec<Tensor>,
    pub ema: Vec<Tensor>,
    pub adam_m: Vec<Tensor>,
    pub adam_v: Vec<Tensor>,
    pub rng_state: (u64, u64),
    /// Per-coordinate normalization stats for trajectory tasks.
    pub norm: Option<(Vec<f64>, Vec<f64>)>,
}

pub const CHECKPOINT_VERSION: u32 = 1;

/// One metrics-log row.
#[derive(Debug, Clone, Copy)]
pub struct MetricsRow {
    pub step: usize,
    pub report: LossReport,
    pub lr: f64,
}

#[derive(Debug)]
pub enum TrainError {
    Flow(FlowError),
    /// Loss or gradient went non-finite; the failing state is attached.
    Diverged { step: usize, what: String, checkpoint: Box<Checkpoint> },
}

impl fmt::Display for TrainError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TrainError::Flow(e) => write!(f, "{e}"),
            TrainError::Diverged { step, what, .. } => write!(f, "diverged at step {step}: {what}"),
        }
    }
}

#[cfg(feature = "std")]
impl std::error::Error for TrainError {}

impl From<FlowError> for TrainError {
    fn from(e: FlowError) -> Self {
        TrainError::Flow(e)
    }
}

/// Linear warmup to `lr` over `warmup_iters`, then polynomial decay to zero
/// at `iterations`.
pub fn lr_at(step: usize, cfg: &TrainConfig) -> f64 {
    if cfg.warmup_iters > 0 && step < cfg.warmup_iters {
        return cfg.lr * step as f64 / cfg.warmup_iters as f64;
    }
    let total = (cfg.iterations - cfg.warmup_iters) as f64;
    let done = (step - cfg.warmup_iters) as f64;
    let frac = (1.0 - done / total).max(0.0);
    cfg.lr * crate::mathx::powf(frac, cfg.poly_power)
}

/// Standard Adam with bias correction; `step` is 1-based. Rejects
/// non-finite gradients so divergence surfaces instead of propagating.
pub fn adam_step(
    params: &mut [Tensor],
    grads: &[Tensor],
    m: &mut [Tensor],
    v: &mut [Tensor],
    lr_t: f64,
    cfg: &TrainConfig,
    step: usize,
) -> Result<(), String> {
    assert_eq!(params.len(), grads.len());
    let bc1 = 1.0 - crate::mathx::powf(cfg.beta1, step as f64);
    let bc2 = 1.0 - crate::mathx::powf(cfg.beta2, step as f64);
    for i in 0..params.len() {
        if grads[i].check_finite("gradient").is_err() {
            return Err(format!("non-finite gradient in parameter {i}"));
        }
        let mi = m[i].data_mut();
        let vi = v[i].data_mut();
        let pi = params[i].data_mut();
        let gi = grads[i].data();
        for j in 0..pi.len() {
            let g = gi[j];
            mi[j] = cfg.beta1 * mi[j] + (1.0 - cfg.beta1) * g;
            vi[j] = cfg.beta2 * vi[j] + (1.0 - cfg.beta2) * g * g;
            let mhat = mi[j] / bc1;
            let vhat = vi[j] / bc2;
            pi[j] -= lr_t * mhat / (crate::mathx::sqrt(vhat) + cfg.adam_eps);
        }
    }
    Ok(())
}

/// `shadow <- decay*shadow + (1-decay)*params`.
pub fn ema_update(shadow: &mut [Tensor], params: &[Tensor], decay: f64) {
    for (s, p) in shadow.iter_mut().zip(params) {
        let sd = s.data_mut();
        for (a, &b) in sd.iter_mut().zip(p.data()) {
            *a = decay * *a + (1.0 - decay) * b;
        }
    }
}

/// Everything produced by a run.
pub struct TrainOutput {
    pub checkpoint: Checkpoint,
    pub metrics: Vec<MetricsRow>,
    pub snapshots: Vec<Checkpoint>,
    pub task: PreparedTask,
}

/// Live training state, extracted so runs can resume from checkpoints.
struct TrainState {
    net: VelocityNet,
    enc: Option<GuidanceEncoder>,
    ema: Vec<Tensor>,
    adam_m: Vec<Tensor>,
    adam_v: Vec<Tensor>,
}

impl TrainState {
    fn fresh(spec: &RunSpec, root: &Rng) -> Self {
        let mut net_rng = root.split(STREAM_NET_INIT);
        let net = VelocityNet::new(spec.net_config(), &mut net_rng);
        let enc = spec.encoder_config().map(|cfg| {
            let mut enc_rng = root.split(STREAM_ENC_INIT);
            GuidanceEncoder::new(cfg, &mut enc_rng)
        });
        let all: Vec<Tensor> = net
            .params()
            .iter()
            .chain(enc.iter().flat_map(|e| e.params().iter()))
            .cloned()
            .collect();
        let zeros: Vec<Tensor> = all.iter().map(|p| Tensor::zeros(p.shape())).collect();
        TrainState { net, enc, ema: all, adam_m: zeros.clone(), adam_v: zeros }
    }

    fn from_checkpoint(spec: &RunSpec, ckpt: &Checkpoint) -> Self {
        let n_net = {
            let mut rng = Rng::new(0);
            VelocityNet::new(spec.net_config(), &mut rng).params().len()
        };
        let net = VelocityNet::from_params(spec.net_config(), ckpt.params[..n_net].to_vec());
        let enc = spec
            .encoder_config()
            .map(|cfg| GuidanceEncoder::from_params(cfg, ckpt.params[n_net..].to_vec()));
        TrainState {
            net,
            enc,
            ema: ckpt.ema.clone(),
            adam_m: ckpt.adam_m.clone(),
            adam_v: ckpt.adam_v.clone(),
        }
    }

    fn all_params(&self) -> Vec<Tensor> {
        self.net
            .params()
            .iter()
            .chain(self.enc.iter().flat_map(|e| e.params().iter()))
            .cloned()
            .collect()
    }

    fn set_all_params(&mut self, params: Vec<Tensor>) {
        let n_net = self.net.params().len();
        self.net.set_params(params[..n_net].to_vec());
        if let Some(enc) = &mut self.enc {
            enc.set_params(params[n_net..].to_vec());
        }
    }

    fn param_names(&self) -> Vec<String> {
        let mut names: Vec<String> = self.net.param_names().iter().map(|n| format!("net.{n}")).collect();
        if let Some(enc) = &self.enc {
            names.extend(enc.param_names().iter().map(|n| format!("enc.{n}")));
        }
        names
    }

    fn checkpoint(&self, spec: &RunSpec, step: usize, rng_state: (u64, u64), norm: Option<(Vec<f64>, Vec<f64>)>) -> Checkpoint {
        Checkpoint {
            version: CHECKPOINT_VERSION,
            step,
            spec: spec.clone(),
            param_names: self.param_names(),
            params: self.all_params(),
            ema: self.ema.clone(),
            adam_m: self.adam_m.clone(),
            adam_v: self.adam_v.clone(),
            rng_state,
            norm,
        }
    }
}

// Substream tags for the per-run random sources.
const STREAM_TASK: u64 = 0;
const STREAM_NET_INIT: u64 = 1;
const STREAM_ENC_INIT: u64 = 2;
const STREAM_STEP: u64 = 3;

/// Trains from scratch. See [`resume_run`] for continuing a checkpoint.
pub fn train_run(spec: &RunSpec) -> Result<TrainOutput, TrainError> {
    train_loop(spec, None, None)
}

/// Variant with a caller-supplied reward for the policy-gradient term.
pub fn train_run_with_reward(
    spec: &RunSpec,
    reward_fn: Option<&dyn Fn(&[f64]) -> f64>,
) -> Result<TrainOutput, TrainError> {
    train_loop(spec, None, reward_fn)
}

/// Continues a checkpointed run to `spec.train.iterations`; bit-identical to
/// never having stopped.
pub fn resume_run(spec: &RunSpec, from: &Checkpoint) -> Result<TrainOutput, TrainError> {
    train_loop(spec, Some(from), None)
}

fn train_loop(
    spec: &RunSpec,
    from: Option<&Checkpoint>,
    reward_fn: Option<&dyn Fn(&[f64]) -> f64>,
) -> Result<TrainOutput, TrainError> {
    spec.validate()?;
    let root = Rng::new(spec.train.seed);
    let mut task_rng = root.split(STREAM_TASK);
    let task = spec.task.prepare(&mut task_rng)?;
    let norm = task.norm();

    let loss_cfg = spec.model_kind.effective_loss(&spec.loss);
    let mut state = match from {
        Some(ckpt) => TrainState::from_checkpoint(spec, ckpt),
        None => TrainState::fresh(spec, &root),
    };
    let start_step = from.map(|c| c.step).unwrap_or(0);

    let mut metrics = Vec::new();
    let mut snapshots = Vec::new();

    for step in start_step..spec.train.iterations {
        let mut step_rng = root.split(STREAM_STEP).split(step as u64);
        let (x_data, contexts) = task.draw(&mut step_rng, spec.train.batch_size);

        // Coupling endpoints: the transport target is the data plus the
        // intermediate noise, the prior is Gaussian (or encoder-centered).
        let eps1 = step_rng.randn(x_data.shape());
        let x1 = x_data.add_scaled(&eps1, spec.interp.sigma);
        let x0 = match (&state.enc, &contexts) {
            (Some(enc), Some(c)) => {
                let phi = enc.forward_values(c);
                phi.add_scaled(&step_rng.randn(phi.shape()), spec.interp.sigma_c)
            }
            _ => step_rng.randn(x_data.shape()),
        };
        let batch = make_flow_batch(&mut step_rng, &spec.interp, spec.times, x0, x1)?;

        let mut tape = crate::autodiff::Tape::new();
        let net_vars = state.net.bind(&mut tape);
        let enc_vars: Vec<crate::autodiff::Var> = match &state.enc {
            Some(enc) => enc.bind(&mut tape),
            None => Vec::new(),
        };
        let guidance = match (&state.enc, &contexts) {
            (Some(enc), Some(c)) => Some(GuidanceInputs { enc, enc_vars: &enc_vars, contexts: c }),
            _ => None,
        };
        let inputs = JointInputs { batch: &batch, x_data: &x_data, guidance, reward_fn };
        let (total, mut report) =
            rmflow_loss(&mut tape, &state.net, &net_vars, &inputs, &mut step_rng, &loss_cfg, &spec.interp);

        if !report.total.is_finite() {
            let ckpt = state.checkpoint(spec, step, step_rng.state(), norm.clone());
            return Err(TrainError::Diverged {
                step,
                what: format!("loss = {}", report.total),
                checkpoint: Box::new(ckpt),
            });
        }

        let mut all_vars = net_vars.clone();
        all_vars.extend(enc_vars.iter().copied());
        let grads = tape.grad(total, &all_vars);
        report.grad_norm = crate::mathx::sqrt(grads.iter().map(|g| g.sq_norm()).sum());

        let lr_t = lr_at(step, &spec.train);
        let mut params = state.all_params();
        if let Err(what) = adam_step(
            &mut params,
            &grads,
            &mut state.adam_m,
            &mut state.adam_v,
            lr_t,
            &spec.train,
            step + 1,
        ) {
            let ckpt = state.checkpoint(spec, step, step_rng.state(), norm.clone());
            return Err(TrainError::Diverged { step, what, checkpoint: Box::new(ckpt) });
        }
        ema_update(&mut state.ema, &params, spec.train.ema_decay);
        state.set_all_params(params);

        metrics.push(MetricsRow { step, report, lr: lr_t });
        if let Some(every) = spec.train.snapshot_every {
            if (step + 1) % every == 0 && step + 1 < spec.train.iterations {
                snapshots.push(state.checkpoint(spec, step + 1, step_rng.state(), norm.clone()));
            }
        }
    }

    let final_rng = root.split(STREAM_STEP).split(spec.train.iterations as u64 - 1);
    let checkpoint = state.checkpoint(spec, spec.train.iterations, final_rng.state(), norm);
    Ok(TrainOutput { checkpoint, metrics, snapshots, task })
}

/// Rebuilds the (net, encoder) pair from a checkpoint, optionally using the
/// EMA weights (the evaluation default).
pub fn models_from_checkpoint(ckpt: &Checkpoint, use_ema: bool) -> (VelocityNet, Option<GuidanceEncoder>) {
    let source = if use_ema { &ckpt.ema } else { &ckpt.params };
    let net_cfg = ckpt.spec.net_config();
    let n_net = {
        let mut rng = Rng::new(0);
        VelocityNet::new(net_cfg.clone(), &mut rng).params().len()
    };
    let net = VelocityNet::from_params(net_cfg, source[..n_net].to_vec());
    let enc = ckpt
        .spec
        .encoder_config()
        .map(|cfg| GuidanceEncoder::from_params(cfg, source[n_net..].to_vec()));
    (net, enc)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tasks::GmmSpec;

    fn tiny_spec(iterations: usize, kind: ModelKind) -> RunSpec {
        let mut spec = RunSpec::new(TaskSpec::Gmm(GmmSpec::default()), kind);
        spec.train = TrainConfig {
            iterations,
            batch_size: 16,
            seed: 7,
            ..TrainConfig::default()
        };
        spec.net_width = 8;
        spec.net_depth = 1;
        spec.net_emb_dim = 8;
        spec
    }

    #[test]
    fn adam_zero_gradient_keeps_params_decays_moments() {
        let cfg = TrainConfig::default();
        let mut params = vec![Tensor::from_vec(vec![2], vec![1.0, -2.0])];
        let before = params[0].clone();
        let grads = vec![Tensor::zeros(&[2])];
        let mut m = vec![Tensor::from_vec(vec![2], vec![0.5, 0.5])];
        let mut v = vec![Tensor::from_vec(vec![2], vec![0.25, 0.25])];
        adam_step(&mut params, &grads, &mut m, &mut v, 0.1, &cfg, 3).unwrap();
        assert_eq!(params[0].data(), before.data());
        assert_eq!(m[0].data(), &[0.45, 0.45]);
        assert_eq!(v[0].data(), &[0.2375, 0.2375]);
    }

    #[test]
    fn adam_first_step_is_signed_lr() {
        let cfg = TrainConfig::default();
        let mut params = vec![Tensor::from_vec(vec![2], vec![0.0, 0.0])];
        let grads = vec![Tensor::from_vec(vec![2], vec![3.0, -0.04])];
        let mut m = vec![Tensor::zeros(&[2])];
        let mut v = vec![Tensor::zeros(&[2])];
        adam_step(&mut params, &grads, &mut m, &mut v, 0.01, &cfg, 1).unwrap();
        // First bias-corrected step is -lr * g / (|g| + eps) ~ -lr * sign(g).
        assert!((params[0].data()[0] + 0.01).abs() < 1e-8);
        assert!((params[0].data()[1] - 0.01).abs() < 1e-6);
    }

    #[test]
    fn adam_converges_on_quadratic() {
        let cfg = TrainConfig { lr: 0.1, ..TrainConfig::default() };
        let mut params = vec![Tensor::from_vec(vec![1], vec![1.0])];
        let mut m = vec![Tensor::zeros(&[1])];
        let mut v = vec![Tensor::zeros(&[1])];
        for step in 1..=500 {
            let g = vec![Tensor::from_vec(vec![1], vec![2.0 * params[0].data()[0]])];
            adam_step(&mut params, &g, &mut m, &mut v, 0.1, &cfg, step).unwrap();
        }
        assert!(params[0].data()[0].abs() < 1e-3, "theta {}", params[0].data()[0]);
    }

    #[test]
    fn adam_rejects_nan_gradient() {
        let cfg = TrainConfig::default();
        let mut params = vec![Tensor::zeros(&[1])];
        let grads = vec![Tensor::from_vec(vec![1], vec![f64::NAN])];
        let mut m = vec![Tensor::zeros(&[1])];
        let mut v = vec![Tensor::zeros(&[1])];
        assert!(adam_step(&mut params, &grads, &mut m, &mut v, 0.1, &cfg, 1).is_err());
    }

    #[test]
    fn ema_extremes_and_geometric_rate() {
        let params = vec![Tensor::from_vec(vec![1], vec![2.0])];
        let mut shadow = vec![Tensor::from_vec(vec![1], vec![10.0])];
        ema_update(&mut shadow, &params, 0.0);
        assert_eq!(shadow[0].data(), params[0].data());

        let mut frozen = vec![Tensor::from_vec(vec![1], vec![10.0])];
        ema_update(&mut frozen, &params, 1.0);
        assert_eq!(frozen[0].data(), &[10.0]);

        // After k steps with constant params p: shadow - p = d^k (s0 - p).
        let d = 0.9;
        let mut s = vec![Tensor::from_vec(vec![1], vec![10.0])];
        for _ in 0..20 {
            ema_update(&mut s, &params, d);
        }
        let expect = 2.0 + crate::mathx::powf(d, 20.0) * 8.0;
        assert!((s[0].data()[0] - expect).abs() < 1e-12);
    }

    #[test]
    fn ema_matches_closed_form_on_scripted_sequence() {
        // shadow_n = d^n s0 + (1-d) sum_k d^(n-1-k) p_k, written out directly.
        let d = 0.95;
        let s0 = 4.0;
        let ps: Vec<f64> = (0..12).map(|k| (k as f64) * 0.5 - 2.0).collect();
        let mut shadow = vec![Tensor::from_vec(vec![1], vec![s0])];
        for &p in &ps {
            ema_update(&mut shadow, &[Tensor::from_vec(vec![1], vec![p])], d);
        }
        let n = ps.len();
        let mut closed = crate::mathx::powf(d, n as f64) * s0;
        for (k, &p) in ps.iter().enumerate() {
            closed += (1.0 - d) * crate::mathx::powf(d, (n - 1 - k) as f64) * p;
        }
        assert!((shadow[0].data()[0] - closed).abs() < 1e-12);
    }

    #[test]
    fn lr_schedule_endpoints() {
        let cfg = TrainConfig { iterations: 1000, warmup_iters: 100, lr: 1e-3, ..TrainConfig::default() };
        assert_eq!(lr_at(0, &cfg), 0.0);
        assert_eq!(lr_at(100, &cfg), 1e-3);
        assert_eq!(lr_at(1000, &cfg), 0.0);
        // No warmup: starts at lr.
        let cfg = TrainConfig { iterations: 1000, warmup_iters: 0, lr: 1e-3, ..TrainConfig::default() };
        assert_eq!(lr_at(0, &cfg), 1e-3);
        assert!(lr_at(500, &cfg) < 1e-3);
    }

    #[test]
    fn training_is_deterministic_and_meanflow_equals_zeroed_rmflow() {
        let spec = tiny_spec(12, ModelKind::MeanFlow);
        let a = train_run(&spec).unwrap();
        let b = train_run(&spec).unwrap();
        assert_eq!(a.checkpoint.params, b.checkpoint.params);
        assert_eq!(a.checkpoint.ema, b.checkpoint.ema);

        // RmFlow with zeroed weights consumes the same random draws and
        // produces the identical checkpoint.
        let mut zeroed = tiny_spec(12, ModelKind::RmFlow);
        zeroed.loss = LossConfig { lambda1: 0.0, lambda2: 0.0, ..LossConfig::default() };
        let c = train_run(&zeroed).unwrap();
        assert_eq!(a.checkpoint.params, c.checkpoint.params);
    }

    #[test]
    fn smoke_run_improves_loss_and_logs_metrics() {
        let mut spec = tiny_spec(300, ModelKind::RmFlow);
        spec.train.batch_size = 32;
        let out = train_run(&spec).unwrap();
        assert_eq!(out.metrics.len(), 300);
        let first: f64 = out.metrics[..20].iter().map(|m| m.report.cmfm).sum::<f64>() / 20.0;
        let last: f64 = out.metrics[280..].iter().map(|m| m.report.cmfm).sum::<f64>() / 20.0;
        assert!(last < first, "no improvement: first {first} last {last}");
        assert!(out.metrics.iter().all(|m| m.report.total.is_finite()));
    }

    #[test]
    fn resume_matches_uninterrupted_run_bitwise() {
        let spec = tiny_spec(20, ModelKind::MeanFlow);
        let full = train_run(&spec).unwrap();

        let mut half_spec = spec.clone();
        half_spec.train.iterations = 10;
        let half = train_run(&half_spec).unwrap();
        let resumed = resume_run(&spec, &half.checkpoint).unwrap();
        assert_eq!(full.checkpoint.params, resumed.checkpoint.params);
        assert_eq!(full.checkpoint.ema, resumed.checkpoint.ema);
        assert_eq!(full.checkpoint.adam_m, resumed.checkpoint.adam_m);
    }

    #[test]
    fn snapshots_are_taken_on_schedule() {
        let mut spec = tiny_spec(30, ModelKind::MeanFlow);
        spec.train.snapshot_every = Some(10);
        let out = train_run(&spec).unwrap();
        assert_eq!(out.snapshots.len(), 2); // steps 10 and 20; 30 is the final
        assert_eq!(out.snapshots[0].step, 10);
        assert_eq!(out.snapshots[1].step, 20);
    }

    #[test]
    fn models_rebuild_from_checkpoint() {
        let spec = tiny_spec(5, ModelKind::MeanFlow);
        let out = train_run(&spec).unwrap();
        let (net, enc) = models_from_checkpoint(&out.checkpoint, true);
        assert!(enc.is_none());
        let x = Tensor::zeros(&[2, 1]);
        let t = Tensor::full(&[2], 1.0);
        let r = Tensor::zeros(&[2]);
        let y = net.forward_values(&x, &t, &r);
        y.assert_finite("rebuilt net output");
    }
}
