//! Training objectives.
//!
//! The flow-matching term regresses the network onto a bootstrapped target
//! built from the conditional velocity and the network's own
//! Jacobian-vector product along `(v, 1, 0)` over `(x, t, r)`; the target
//! and the per-sample adaptive weight are both held behind stop-gradient,
//! so one reverse sweep sees a plain weighted regression. The likelihood
//! term supervises the full-span generation query directly, the guidance
//! regularizer shrinks encoder embeddings, and the joint objective is their
//! weighted sum on a single tape (one backward pass for all parameters).

use crate::autodiff::{Tape, Var};
use crate::flow::{FlowBatch, FlowError, InterpolantConfig};
use crate::nets::{GuidanceEncoder, VelocityNet};
use crate::rng::Rng;
use crate::tensor::Tensor;
use alloc::vec;
use alloc::vec::Vec;

/// Weights of the joint objective.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct LossConfig {
    /// Weight of the likelihood term.
    pub lambda1: f64,
    /// Weight of the guidance regularizer.
    pub lambda2: f64,
    /// Adaptive-weight exponent in `w = (dsq + eps_w)^-m`.
    pub m: f64,
    /// Stabilizer inside the adaptive weight.
    pub eps_w: f64,
    /// Weight of the optional policy-gradient term; 0 disables it.
    pub rl_weight: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig { lambda1: 0.1, lambda2: 0.0, m: 0.5, eps_w: 1e-3, rl_weight: 0.0 }
    }
}

impl LossConfig {
    /// Plain mean-flow training: likelihood and guidance terms off.
    pub fn meanflow() -> Self {
        LossConfig { lambda1: 0.0, lambda2: 0.0, ..LossConfig::default() }
    }

    pub fn validate(&self) -> Result<(), FlowError> {
        if self.lambda1 < 0.0 || self.lambda2 < 0.0 || self.rl_weight < 0.0 {
            return Err(FlowError::BadConfig("loss weights must be nonnegative"));
        }
        if !(0.0..1.0).contains(&self.m) {
            return Err(FlowError::BadConfig("need 0 <= m < 1"));
        }
        if self.eps_w <= 0.0 {
            return Err(FlowError::BadConfig("eps_w must be positive"));
        }
        Ok(())
    }
}

/// Scalar summary of one loss evaluation. `total` always equals
/// `cmfm + lambda1*nll + lambda2*guidance_reg + rl_weight*rl`.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct LossReport {
    pub total: f64,
    pub cmfm: f64,
    pub nll: f64,
    pub guidance_reg: f64,
    pub rl: f64,
    pub grad_norm: f64,
}

/// Per-sample adaptive weight `w_i = (|delta_i|^2 + eps_w)^-m`, treated as a
/// constant by the reverse sweep.
pub fn adaptive_weight(delta_sq_norms: &Tensor, cfg: &LossConfig) -> Tensor {
    delta_sq_norms.map(|dsq| crate::mathx::powf(dsq + cfg.eps_w, -cfg.m))
}

/// Value-level regression target and weight for the flow-matching term,
/// computed with frozen parameters. Test oracle plumbing: the training path
/// computes the same quantities from its own forward pass.
pub struct CmfmTarget {
    pub u_tgt: Tensor,
    pub weight: Tensor,
}

pub fn cmfm_target(net: &VelocityNet, batch: &FlowBatch, cfg: &LossConfig) -> CmfmTarget {
    let mut tape = Tape::new();
    let vars = net.bind_frozen(&mut tape);
    let ones = Tensor::full(&[batch.t.len()], 1.0);
    let zeros = Tensor::zeros(&[batch.r.len()]);
    let x = tape.leaf_with_tangent(batch.xt.clone(), batch.v_cond.clone());
    let t = tape.leaf_with_tangent(batch.t.clone(), ones);
    let r = tape.leaf_with_tangent(batch.r.clone(), zeros);
    let u_hat = net.forward_on_tape(&mut tape, &vars, x, t, r);
    let value = tape.value(u_hat).clone();
    let jvp = tape.tangent(u_hat).cloned().unwrap_or_else(|| Tensor::zeros(value.shape()));
    finish_cmfm_target(batch, cfg, &value, &jvp)
}

fn finish_cmfm_target(batch: &FlowBatch, cfg: &LossConfig, u_hat: &Tensor, jvp: &Tensor) -> CmfmTarget {
    let span = batch.r.sub(&batch.t); // r - t, nonpositive
    let u_tgt = batch.v_cond.add(&jvp.scale_rows(&span));
    let delta = u_hat.sub(&u_tgt);
    let weight = adaptive_weight(&delta.sq_norm_rows(), cfg);
    CmfmTarget { u_tgt, weight }
}

/// Flow-matching term on the tape: builds the network with dual inputs, reads
/// the directional derivative off the output node, freezes target and weight,
/// and returns the weighted regression node.
pub fn cmfm_loss(
    tape: &mut Tape,
    net: &VelocityNet,
    vars: &[Var],
    batch: &FlowBatch,
    cfg: &LossConfig,
) -> Var {
    let b = batch.t.len();
    let ones = Tensor::full(&[b], 1.0);
    let zeros = Tensor::zeros(&[b]);
    let x = tape.leaf_with_tangent(batch.xt.clone(), batch.v_cond.clone());
    let t = tape.leaf_with_tangent(batch.t.clone(), ones);
    let r = tape.leaf_with_tangent(batch.r.clone(), zeros);
    let u_hat = net.forward_on_tape(tape, vars, x, t, r);

    let value = tape.value(u_hat).clone();
    let jvp = tape.tangent(u_hat).cloned().unwrap_or_else(|| Tensor::zeros(value.shape()));
    let CmfmTarget { u_tgt, weight } = finish_cmfm_target(batch, cfg, &value, &jvp);

    let tgt = tape.leaf(u_tgt);
    let w = tape.leaf(weight);
    let d = tape.sub(u_hat, tgt);
    let sq = tape.mul(d, d);
    let per_sample = tape.sum_last(sq);
    let weighted = tape.mul(per_sample, w);
    tape.mean_all(weighted)
}

/// Full-span generation query `(t, r) = (1, 0)` on the tape: returns the
/// node `x0 + u(x0)`.
pub fn generation_node(tape: &mut Tape, net: &VelocityNet, vars: &[Var], x0: Var) -> Var {
    let b = tape.value(x0).rows();
    let ones = tape.leaf(Tensor::full(&[b], 1.0));
    let zeros = tape.leaf(Tensor::zeros(&[b]));
    let u = net.forward_on_tape(tape, vars, x0, ones, zeros);
    tape.add(x0, u)
}

/// Likelihood term: squared distance between the smoothed data target
/// `x_data + sigma_min*eps` and the one-step generation from `x0`. The prior
/// node may depend on encoder parameters (guided mode), which is how the
/// encoder receives its training signal.
pub fn nll_loss(
    tape: &mut Tape,
    net: &VelocityNet,
    vars: &[Var],
    x0: Var,
    x_data: &Tensor,
    rng: &mut Rng,
    icfg: &InterpolantConfig,
) -> Var {
    let eps = rng.randn(x_data.shape());
    let target = x_data.add_scaled(&eps, icfg.sigma_min);
    let gen = generation_node(tape, net, vars, x0);
    let tgt = tape.leaf(target);
    let d = tape.sub(tgt, gen);
    let sq = tape.mul(d, d);
    let per_sample = tape.sum_last(sq);
    tape.mean_all(per_sample)
}

/// Mean squared embedding norm over a batch of contexts (already encoded as
/// a tape node so the forward pass is shared with the prior construction).
pub fn guidance_reg(tape: &mut Tape, phi: Var) -> Var {
    let sq = tape.mul(phi, phi);
    let per_sample = tape.sum_last(sq);
    tape.mean_all(per_sample)
}

/// Coefficients of the per-sample log-likelihood: `logp = -a*dist_sq + c`
/// with `a = 1/(2(sigma_min^2 - sigma^2))` and
/// `c = -(d/2) ln(2 pi (sigma_min^2 - sigma^2))`.
pub fn log_lik_coeffs(icfg: &InterpolantConfig, dim: usize) -> (f64, f64) {
    let s2 = icfg.sigma_min * icfg.sigma_min - icfg.sigma * icfg.sigma;
    let a = 1.0 / (2.0 * s2);
    let c = -(dim as f64 / 2.0) * crate::mathx::ln(2.0 * core::f64::consts::PI * s2);
    (a, c)
}

/// Per-sample conditional log-likelihood of `x_tgt` given prior `x0` under
/// the one-step generator with injected-noise variance `sigma_min^2 - sigma^2`.
pub fn log_likelihood(
    net: &VelocityNet,
    x_tgt: &Tensor,
    x0: &Tensor,
    icfg: &InterpolantConfig,
) -> Result<Tensor, FlowError> {
    if icfg.sigma >= icfg.sigma_min {
        return Err(FlowError::BadConfig("log-likelihood needs sigma < sigma_min"));
    }
    let b = x0.rows();
    let ones = Tensor::full(&[b], 1.0);
    let zeros = Tensor::zeros(&[b]);
    let gen = x0.add(&net.forward_values(x0, &ones, &zeros));
    let dist_sq = x_tgt.sub(&gen).sq_norm_rows();
    let (a, c) = log_lik_coeffs(icfg, x0.row_len());
    Ok(dist_sq.map(|ds| -a * ds + c))
}

/// Policy-gradient term `-mean[log p(x_hat | x0) * reward(x_hat)]` with the
/// sampled `x_hat` and the rewards both constants to the sweep.
pub fn rl_loss(
    tape: &mut Tape,
    net: &VelocityNet,
    vars: &[Var],
    x0: Var,
    x_hat_sampled: &Tensor,
    rewards: &Tensor,
    icfg: &InterpolantConfig,
) -> Var {
    let b = tape.value(x0).rows();
    assert_eq!(rewards.len(), b, "one reward per sample");
    let dim = tape.value(x0).row_len();
    let (a, c) = log_lik_coeffs(icfg, dim);
    let gen = generation_node(tape, net, vars, x0);
    let xh = tape.leaf(x_hat_sampled.clone());
    let d = tape.sub(xh, gen);
    let sq = tape.mul(d, d);
    let dist_sq = tape.sum_last(sq);
    let scaled = tape.scale(dist_sq, -a);
    let cc = tape.leaf(Tensor::full(&[b], c));
    let logp = tape.add(scaled, cc);
    let rw = tape.leaf(rewards.clone());
    let weighted = tape.mul(logp, rw);
    let mean = tape.mean_all(weighted);
    tape.neg(mean)
}

/// Guidance-side inputs for the joint objective.
pub struct GuidanceInputs<'a> {
    pub enc: &'a GuidanceEncoder,
    pub enc_vars: &'a [Var],
    pub contexts: &'a Tensor,
}

/// Everything the joint objective consumes besides the network itself.
pub struct JointInputs<'a> {
    pub batch: &'a FlowBatch,
    /// Clean data batch for the likelihood target (noise added inside).
    pub x_data: &'a Tensor,
    pub guidance: Option<GuidanceInputs<'a>>,
    /// Caller-supplied reward on generated rows; required iff `rl_weight > 0`.
    pub reward_fn: Option<&'a dyn Fn(&[f64]) -> f64>,
}

/// Joint objective `cmfm + lambda1*nll + lambda2*reg + rl_weight*rl` built on
/// one tape. With `lambda1 = lambda2 = rl_weight = 0` the returned node *is*
/// the flow-matching node, so the degeneration is exact. The report's
/// `grad_norm` is filled by the caller after the backward pass.
pub fn rmflow_loss(
    tape: &mut Tape,
    net: &VelocityNet,
    vars: &[Var],
    inputs: &JointInputs<'_>,
    rng: &mut Rng,
    cfg: &LossConfig,
    icfg: &InterpolantConfig,
) -> (Var, LossReport) {
    let cmfm = cmfm_loss(tape, net, vars, inputs.batch, cfg);
    let mut total = cmfm;
    let mut report = LossReport {
        total: 0.0,
        cmfm: tape.value(cmfm).to_scalar(),
        nll: 0.0,
        guidance_reg: 0.0,
        rl: 0.0,
        grad_norm: 0.0,
    };

    // Guided prior x0 = phi(c) + sigma_c * eps is built in-graph so the
    // encoder trains through the likelihood term; the phi node is shared
    // with the regularizer when both are active.
    let mut phi_node: Option<Var> = None;

    if cfg.lambda1 > 0.0 {
        let x0 = match &inputs.guidance {
            Some(g) => {
                let (x0, phi) = guided_prior_node(tape, g, rng, icfg.sigma_c);
                phi_node = Some(phi);
                x0
            }
            None => tape.leaf(rng.randn(inputs.x_data.shape())),
        };
        let nll = nll_loss(tape, net, vars, x0, inputs.x_data, rng, icfg);
        report.nll = tape.value(nll).to_scalar();
        let scaled = tape.scale(nll, cfg.lambda1);
        total = tape.add(total, scaled);
    }

    if cfg.lambda2 > 0.0 {
        if let Some(g) = &inputs.guidance {
            let phi = match phi_node {
                Some(p) => p,
                None => {
                    let c = tape.leaf(g.contexts.clone());
                    g.enc.forward_on_tape(tape, g.enc_vars, c)
                }
            };
            let reg = guidance_reg(tape, phi);
            report.guidance_reg = tape.value(reg).to_scalar();
            let scaled = tape.scale(reg, cfg.lambda2);
            total = tape.add(total, scaled);
        }
    }

    if cfg.rl_weight > 0.0 {
        let reward_fn = inputs.reward_fn.expect("rl_weight > 0 requires a reward function");
        let x0 = match &inputs.guidance {
            Some(g) => guided_prior_node(tape, g, rng, icfg.sigma_c).0,
            None => tape.leaf(rng.randn(inputs.x_data.shape())),
        };
        // Draw the one-step sample with injected noise; both it and the
        // rewards are constants to the sweep.
        let x0_val = tape.value(x0).clone();
        let b = x0_val.rows();
        let ones = Tensor::full(&[b], 1.0);
        let zeros = Tensor::zeros(&[b]);
        let gen = x0_val.add(&net.forward_values(&x0_val, &ones, &zeros));
        let x_hat = gen.add_scaled(&rng.randn(gen.shape()), icfg.injection_std());
        let rewards = Tensor::from_vec(
            vec![b],
            (0..b).map(|i| reward_fn(x_hat.row(i))).collect(),
        );
        let rl = rl_loss(tape, net, vars, x0, &x_hat, &rewards, icfg);
        report.rl = tape.value(rl).to_scalar();
        let scaled = tape.scale(rl, cfg.rl_weight);
        total = tape.add(total, scaled);
    }

    report.total = tape.value(total).to_scalar();
    (total, report)
}

/// In-graph guided prior `phi(c) + sigma_c * eps`; returns the prior node and
/// the shared embedding node.
fn guided_prior_node(
    tape: &mut Tape,
    g: &GuidanceInputs<'_>,
    rng: &mut Rng,
    sigma_c: f64,
) -> (Var, Var) {
    let c = tape.leaf(g.contexts.clone());
    let phi = g.enc.forward_on_tape(tape, g.enc_vars, c);
    let noise = rng.randn(tape.value(phi).shape()).scale(sigma_c);
    let n = tape.leaf(noise);
    (tape.add(phi, n), phi)
}
