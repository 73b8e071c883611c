//! The parametric average-velocity field and the guidance encoder.
//!
//! The velocity field is a residual MLP: the input is projected to the
//! hidden width, each block adds `W2 silu(W1 [h | emb(t) | emb(t - r)] + b1) + b2`,
//! and a final affine maps back to data space. Conditioning is always the
//! pair `(t, t - r)`; the network never sees `r` directly. Both modules can
//! run on the autodiff tape (training) or as plain tensor math (sampling);
//! the two paths execute identical kernels in identical order, so their
//! outputs agree bitwise.

use crate::autodiff::{Tape, Var};
use crate::rng::Rng;
use crate::tensor::Tensor;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::cell::Cell;

/// Shape of the velocity net; parameter counts follow from these alone.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct NetConfig {
    pub in_dim: usize,
    pub width: usize,
    pub depth: usize,
    /// Sinusoidal embedding size per conditioning scalar (sin and cos halves).
    pub emb_dim: usize,
}

impl NetConfig {
    pub fn synthetic(in_dim: usize) -> Self {
        NetConfig { in_dim, width: 256, depth: 6, emb_dim: 64 }
    }

    /// Total parameter count:
    /// `d*w + w + depth*((w + 2e)*w + w + w*w + w) + w*d + d`.
    pub fn param_count(&self) -> usize {
        let (d, w, e) = (self.in_dim, self.width, self.emb_dim);
        d * w + w + self.depth * ((w + 2 * e) * w + w + w * w + w) + w * d + d
    }
}

/// Frequencies `2^k * pi` for the sinusoidal embedding.
fn embed_freqs(emb_dim: usize) -> Vec<f64> {
    assert!(emb_dim % 2 == 0, "embedding dim must be even, got {emb_dim}");
    (0..emb_dim / 2)
        .map(|k| (1u64 << k) as f64 * core::f64::consts::PI)
        .collect()
}

fn embed_values(s: &Tensor, freqs: &[f64]) -> Tensor {
    let b = s.len();
    let k = freqs.len();
    let mut phases = Vec::with_capacity(b * k);
    for &x in s.data() {
        for &f in freqs {
            phases.push(x * f);
        }
    }
    let phases = Tensor::from_vec(vec![b, k], phases);
    let sin = phases.map(crate::mathx::sin);
    let cos = phases.map(crate::mathx::cos);
    Tensor::concat_last(&[&sin, &cos])
}

fn embed_on_tape(tape: &mut Tape, s: Var, freqs: &[f64]) -> Var {
    let phases = tape.outer_scale(s, freqs.to_vec());
    let sin = tape.sin(phases);
    let cos = tape.cos(phases);
    tape.concat_last(&[sin, cos])
}

fn uniform_init(rng: &mut Rng, rows: usize, cols: usize) -> Tensor {
    let bound = 1.0 / crate::mathx::sqrt(rows as f64);
    let data = (0..rows * cols).map(|_| rng.uniform_in(-bound, bound)).collect();
    Tensor::from_vec(vec![rows, cols], data)
}

/// Average-velocity field `u(x; t, t-r)` with sinusoidal time conditioning.
///
/// Weights are `uniform(-1/sqrt(fan_in), +1/sqrt(fan_in))`, biases zero, and
/// the output layer starts at zero so the field is identically zero before
/// training.
#[derive(Debug, Clone)]
pub struct VelocityNet {
    pub cfg: NetConfig,
    params: Vec<Tensor>,
    freqs: Vec<f64>,
    evals: Cell<u64>,
}

impl VelocityNet {
    pub fn new(cfg: NetConfig, rng: &mut Rng) -> Self {
        let (d, w, e) = (cfg.in_dim, cfg.width, cfg.emb_dim);
        let mut params = Vec::new();
        params.push(uniform_init(rng, d, w));
        params.push(Tensor::zeros(&[w]));
        for _ in 0..cfg.depth {
            params.push(uniform_init(rng, w + 2 * e, w));
            params.push(Tensor::zeros(&[w]));
            params.push(uniform_init(rng, w, w));
            params.push(Tensor::zeros(&[w]));
        }
        params.push(Tensor::zeros(&[w, d]));
        params.push(Tensor::zeros(&[d]));
        let freqs = embed_freqs(e);
        VelocityNet { cfg, params, freqs, evals: Cell::new(0) }
    }

    /// Rebuild from flat parameter tensors (checkpoint loading). Shapes are
    /// validated against the config.
    pub fn from_params(cfg: NetConfig, params: Vec<Tensor>) -> Self {
        let freqs = embed_freqs(cfg.emb_dim);
        let template = {
            let mut rng = Rng::new(0);
            VelocityNet::new(cfg.clone(), &mut rng)
        };
        assert_eq!(params.len(), template.params.len(), "parameter list length mismatch");
        for (p, t) in params.iter().zip(&template.params) {
            assert_eq!(p.shape(), t.shape(), "parameter shape mismatch");
        }
        VelocityNet { cfg, params, freqs, evals: Cell::new(0) }
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn set_params(&mut self, params: Vec<Tensor>) {
        assert_eq!(params.len(), self.params.len());
        self.params = params;
    }

    /// Stable parameter names, index-aligned with [`Self::params`].
    pub fn param_names(&self) -> Vec<String> {
        let mut names = vec![String::from("pre.w"), String::from("pre.b")];
        for k in 0..self.cfg.depth {
            names.push(format!("block{k}.w1"));
            names.push(format!("block{k}.b1"));
            names.push(format!("block{k}.w2"));
            names.push(format!("block{k}.b2"));
        }
        names.push(String::from("out.w"));
        names.push(String::from("out.b"));
        names
    }

    /// Network evaluations since construction; one batched forward counts once.
    pub fn eval_count(&self) -> u64 {
        self.evals.get()
    }

    pub fn reset_eval_count(&self) {
        self.evals.set(0);
    }

    /// Registers all parameters on a tape as trainable nodes.
    pub fn bind(&self, tape: &mut Tape) -> Vec<Var> {
        self.params.iter().map(|p| tape.param(p.clone())).collect()
    }

    /// Registers all parameters as constants (forward/JVP only).
    pub fn bind_frozen(&self, tape: &mut Tape) -> Vec<Var> {
        self.params.iter().map(|p| tape.leaf(p.clone())).collect()
    }

    /// Tape forward pass. `vars` must come from [`Self::bind`] or
    /// [`Self::bind_frozen`]; `x` is `[b,d]`, `t` and `r` are `[b]` with
    /// `0 <= r <= t <= 1` elementwise.
    pub fn forward_on_tape(&self, tape: &mut Tape, vars: &[Var], x: Var, t: Var, r: Var) -> Var {
        self.evals.set(self.evals.get() + 1);
        let span = tape.sub(t, r);
        let e_t = embed_on_tape(tape, t, &self.freqs);
        let e_s = embed_on_tape(tape, span, &self.freqs);
        let mut h = tape.affine(x, vars[0], vars[1]);
        for k in 0..self.cfg.depth {
            let base = 2 + 4 * k;
            let inp = tape.concat_last(&[h, e_t, e_s]);
            let z = tape.affine(inp, vars[base], vars[base + 1]);
            let z = tape.silu(z);
            let delta = tape.affine(z, vars[base + 2], vars[base + 3]);
            h = tape.add(h, delta);
        }
        let base = 2 + 4 * self.cfg.depth;
        tape.affine(h, vars[base], vars[base + 1])
    }

    /// Plain tensor forward pass, bit-identical to the tape path.
    pub fn forward_values(&self, x: &Tensor, t: &Tensor, r: &Tensor) -> Tensor {
        self.evals.set(self.evals.get() + 1);
        let span = t.sub(r);
        let e_t = embed_values(t, &self.freqs);
        let e_s = embed_values(&span, &self.freqs);
        let mut h = x.matmul(&self.params[0]).add_bias(&self.params[1]);
        for k in 0..self.cfg.depth {
            let base = 2 + 4 * k;
            let inp = Tensor::concat_last(&[&h, &e_t, &e_s]);
            let z = inp.matmul(&self.params[base]).add_bias(&self.params[base + 1]).silu();
            let delta = z.matmul(&self.params[base + 2]).add_bias(&self.params[base + 3]);
            h = h.add(&delta);
        }
        let base = 2 + 4 * self.cfg.depth;
        h.matmul(&self.params[base]).add_bias(&self.params[base + 1])
    }
}

/// Encoder config: context dimensionality, output (data-space) dimensionality,
/// and hidden widths. Empty `hidden` gives a single affine map.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct EncoderConfig {
    pub ctx_dim: usize,
    pub out_dim: usize,
    pub hidden: Vec<usize>,
}

/// MLP mapping a context vector into data space, the mean of the guided prior.
#[derive(Debug, Clone)]
pub struct GuidanceEncoder {
    pub cfg: EncoderConfig,
    params: Vec<Tensor>,
}

impl GuidanceEncoder {
    pub fn new(cfg: EncoderConfig, rng: &mut Rng) -> Self {
        let mut dims = vec![cfg.ctx_dim];
        dims.extend(cfg.hidden.iter().copied());
        dims.push(cfg.out_dim);
        let mut params = Vec::new();
        let layers = dims.len() - 1;
        for l in 0..layers {
            if l + 1 == layers {
                // Output layer starts at zero: the untrained guided prior is
                // pure sigma_c-scale noise.
                params.push(Tensor::zeros(&[dims[l], dims[l + 1]]));
            } else {
                params.push(uniform_init(rng, dims[l], dims[l + 1]));
            }
            params.push(Tensor::zeros(&[dims[l + 1]]));
        }
        GuidanceEncoder { cfg, params }
    }

    pub fn from_params(cfg: EncoderConfig, params: Vec<Tensor>) -> Self {
        let template = {
            let mut rng = Rng::new(0);
            GuidanceEncoder::new(cfg.clone(), &mut rng)
        };
        assert_eq!(params.len(), template.params.len(), "encoder parameter list length mismatch");
        for (p, t) in params.iter().zip(&template.params) {
            assert_eq!(p.shape(), t.shape(), "encoder parameter shape mismatch");
        }
        GuidanceEncoder { cfg, params }
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn set_params(&mut self, params: Vec<Tensor>) {
        assert_eq!(params.len(), self.params.len());
        self.params = params;
    }

    pub fn param_names(&self) -> Vec<String> {
        (0..self.params.len() / 2)
            .flat_map(|l| [format!("l{l}.w"), format!("l{l}.b")])
            .collect()
    }

    pub fn bind(&self, tape: &mut Tape) -> Vec<Var> {
        self.params.iter().map(|p| tape.param(p.clone())).collect()
    }

    pub fn forward_on_tape(&self, tape: &mut Tape, vars: &[Var], c: Var) -> Var {
        let layers = self.params.len() / 2;
        let mut h = c;
        for l in 0..layers {
            h = tape.affine(h, vars[2 * l], vars[2 * l + 1]);
            if l + 1 < layers {
                h = tape.silu(h);
            }
        }
        h
    }

    pub fn forward_values(&self, c: &Tensor) -> Tensor {
        assert_eq!(c.row_len(), self.cfg.ctx_dim, "context dim {} vs {}", c.row_len(), self.cfg.ctx_dim);
        let layers = self.params.len() / 2;
        let mut h = c.clone();
        for l in 0..layers {
            h = h.matmul(&self.params[2 * l]).add_bias(&self.params[2 * l + 1]);
            if l + 1 < layers {
                h = h.silu();
            }
        }
        h
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> NetConfig {
        NetConfig { in_dim: 2, width: 16, depth: 2, emb_dim: 8 }
    }

    #[test]
    fn zero_output_layer_means_zero_field() {
        let mut rng = Rng::new(1);
        let net = VelocityNet::new(small_cfg(), &mut rng);
        let x = rng.randn(&[4, 2]);
        let t = Tensor::from_vec(vec![4], vec![0.1, 0.5, 0.9, 1.0]);
        let r = Tensor::from_vec(vec![4], vec![0.0, 0.5, 0.3, 0.0]);
        let y = net.forward_values(&x, &t, &r);
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn param_count_matches_formula() {
        let cfg = small_cfg();
        let mut rng = Rng::new(2);
        let net = VelocityNet::new(cfg.clone(), &mut rng);
        let total: usize = net.params().iter().map(|p| p.len()).sum();
        assert_eq!(total, cfg.param_count());

        let synth = NetConfig::synthetic(1);
        let mut rng = Rng::new(3);
        let net = VelocityNet::new(synth.clone(), &mut rng);
        let total: usize = net.params().iter().map(|p| p.len()).sum();
        assert_eq!(total, synth.param_count());
    }

    #[test]
    fn batch_of_two_equals_two_batches_of_one() {
        let mut rng = Rng::new(4);
        let mut net = VelocityNet::new(small_cfg(), &mut rng);
        // Randomize the output layer so the test sees nonzero values.
        let n = net.params().len();
        net.params_mut()[n - 2] = rng.randn(&[16, 2]);
        net.params_mut()[n - 1] = rng.randn(&[2]);

        let x = rng.randn(&[2, 2]);
        let t = Tensor::from_vec(vec![2], vec![0.7, 0.4]);
        let r = Tensor::from_vec(vec![2], vec![0.2, 0.4]);
        let both = net.forward_values(&x, &t, &r);
        let first = net.forward_values(
            &x.slice_rows(0, 1),
            &t.slice_rows(0, 1),
            &r.slice_rows(0, 1),
        );
        let second = net.forward_values(
            &x.slice_rows(1, 2),
            &t.slice_rows(1, 2),
            &r.slice_rows(1, 2),
        );
        assert_eq!(both.row(0), first.data());
        assert_eq!(both.row(1), second.data());
    }

    #[test]
    fn tape_and_value_paths_agree_bitwise() {
        let mut rng = Rng::new(5);
        let mut net = VelocityNet::new(small_cfg(), &mut rng);
        let n = net.params().len();
        net.params_mut()[n - 2] = rng.randn(&[16, 2]);
        let x = rng.randn(&[3, 2]);
        let t = Tensor::from_vec(vec![3], vec![0.9, 0.6, 1.0]);
        let r = Tensor::from_vec(vec![3], vec![0.1, 0.6, 0.0]);

        let by_values = net.forward_values(&x, &t, &r);
        let mut tape = Tape::new();
        let vars = net.bind(&mut tape);
        let xv = tape.leaf(x.clone());
        let tv = tape.leaf(t.clone());
        let rv = tape.leaf(r.clone());
        let out = net.forward_on_tape(&mut tape, &vars, xv, tv, rv);
        assert_eq!(tape.value(out).data(), by_values.data());
    }

    #[test]
    fn conditioning_uses_span_not_r() {
        // (t, r) = (t, t) and (t, t - 0) with t == t give identical inputs by
        // construction; also (t=0.8, r=0.3) must equal any (t', r') with the
        // same (t, t - r) pair, i.e. only via t and span.
        let mut rng = Rng::new(6);
        let mut net = VelocityNet::new(small_cfg(), &mut rng);
        let n = net.params().len();
        net.params_mut()[n - 2] = rng.randn(&[16, 2]);
        let x = rng.randn(&[1, 2]);
        let t = Tensor::from_vec(vec![1], vec![0.8]);
        let r = Tensor::from_vec(vec![1], vec![0.8]);
        let r0 = Tensor::from_vec(vec![1], vec![0.8]);
        assert_eq!(net.forward_values(&x, &t, &r).data(), net.forward_values(&x, &t, &r0).data());
    }

    #[test]
    fn time_embedding_injective_on_grid() {
        // No two grid points of [0,1] at 1e-3 spacing may collide within 1e-9.
        let freqs = embed_freqs(64);
        let n = 1001;
        let ts: Vec<f64> = (0..n).map(|i| i as f64 * 1e-3).collect();
        let emb = embed_values(&Tensor::from_vec(vec![n], ts), &freqs);
        let k = emb.row_len();
        for i in 0..n {
            for j in (i + 1)..n {
                let a = emb.row(i);
                let b = emb.row(j);
                let dist: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
                assert!(dist.sqrt() > 1e-9, "collision between {i} and {j} ({k} dims)");
            }
        }
    }

    #[test]
    fn eval_counter_counts_batched_calls() {
        let mut rng = Rng::new(7);
        let net = VelocityNet::new(small_cfg(), &mut rng);
        let x = rng.randn(&[5, 2]);
        let t = Tensor::full(&[5], 1.0);
        let r = Tensor::zeros(&[5]);
        assert_eq!(net.eval_count(), 0);
        let _ = net.forward_values(&x, &t, &r);
        let _ = net.forward_values(&x, &t, &r);
        assert_eq!(net.eval_count(), 2);
        net.reset_eval_count();
        assert_eq!(net.eval_count(), 0);
    }

    #[test]
    fn encoder_zero_weights_zero_embedding_and_affine_linearity() {
        let mut rng = Rng::new(8);
        let enc = GuidanceEncoder::new(
            EncoderConfig { ctx_dim: 3, out_dim: 2, hidden: vec![] },
            &mut rng,
        );
        let c = rng.randn(&[4, 3]);
        // Output layer is zero-initialized.
        assert!(enc.forward_values(&c).data().iter().all(|&v| v == 0.0));

        // Purely affine encoder with zero bias is homogeneous: phi(2c) = 2 phi(c).
        let mut enc = enc;
        enc.params_mut()[0] = rng.randn(&[3, 2]);
        let one = enc.forward_values(&c);
        let two = enc.forward_values(&c.scale(2.0));
        for (a, b) in two.data().iter().zip(one.data()) {
            assert!((a - 2.0 * b).abs() < 1e-12);
        }
    }
}
