//! Reverse-mode gradients and forward-mode directional derivatives on one tape.
//!
//! Nodes are appended in construction order, which is already a topological
//! order, so the reverse sweep is a single backwards pass. Each node carries
//! an optional forward-mode tangent (dual) next to its value: tangents are
//! propagated eagerly while the graph is built, so a Jacobian-vector product
//! costs one forward pass and its result can be read off any node without
//! touching the reverse machinery. Stop-gradient nodes pass value and
//! tangent through but are constants to the reverse sweep.

use crate::tensor::Tensor;
use alloc::vec;
use alloc::vec::Vec;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    StopGradient,
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Neg { x: Var },
    Scale { x: Var, c: f64 },
    /// `x [b,in] * w [in,out] + bias [out]`.
    Affine { x: Var, w: Var, bias: Var },
    Silu { x: Var },
    Sin { x: Var },
    Cos { x: Var },
    /// `[b] -> [b,K]`, entry `(i,k) = x_i * freqs_k`.
    OuterScale { x: Var, freqs: Vec<f64> },
    ConcatLast { parts: Vec<Var>, widths: Vec<usize> },
    SumLast { x: Var },
    MeanAll { x: Var },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    tangent: Option<Tensor>,
    op: Op,
    /// True when a gradient can reach parameters through this node.
    requires_grad: bool,
}

/// Computation record supporting one reverse sweep and eager dual numbers.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, tangent: Option<Tensor>, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, tangent, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Forward-mode dual of a node; `None` when no tangent reaches it.
    pub fn tangent(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].tangent.as_ref()
    }

    /// Constant input: no gradient, no tangent.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, None, Op::Leaf, false)
    }

    /// Input seeded with a forward-mode tangent of identical shape.
    pub fn leaf_with_tangent(&mut self, value: Tensor, tangent: Tensor) -> Var {
        assert_eq!(
            value.shape(),
            tangent.shape(),
            "tangent shape {:?} vs value {:?}",
            tangent.shape(),
            value.shape()
        );
        self.push(value, Some(tangent), Op::Leaf, false)
    }

    /// Trainable input: participates in the reverse sweep.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, None, Op::Leaf, true)
    }

    /// Value and tangent pass through; the reverse sweep sees a constant.
    pub fn stop_gradient(&mut self, x: Var) -> Var {
        let value = self.nodes[x.0].value.clone();
        let tangent = self.nodes[x.0].tangent.clone();
        self.push(value, tangent, Op::StopGradient, false)
    }

    fn req(&self, vs: &[Var]) -> bool {
        vs.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.nodes[a.0].value.add(&self.nodes[b.0].value);
        let tangent = match (&self.nodes[a.0].tangent, &self.nodes[b.0].tangent) {
            (Some(ta), Some(tb)) => Some(ta.add(tb)),
            (Some(ta), None) => Some(ta.clone()),
            (None, Some(tb)) => Some(tb.clone()),
            (None, None) => None,
        };
        let rq = self.req(&[a, b]);
        self.push(value, tangent, Op::Add { a, b }, rq)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.nodes[a.0].value.sub(&self.nodes[b.0].value);
        let tangent = match (&self.nodes[a.0].tangent, &self.nodes[b.0].tangent) {
            (Some(ta), Some(tb)) => Some(ta.sub(tb)),
            (Some(ta), None) => Some(ta.clone()),
            (None, Some(tb)) => Some(tb.scale(-1.0)),
            (None, None) => None,
        };
        let rq = self.req(&[a, b]);
        self.push(value, tangent, Op::Sub { a, b }, rq)
    }

    /// Elementwise product of same-shape tensors.
    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let va = &self.nodes[a.0].value;
        let vb = &self.nodes[b.0].value;
        let value = va.mul(vb);
        let tangent = match (&self.nodes[a.0].tangent, &self.nodes[b.0].tangent) {
            (Some(ta), Some(tb)) => Some(ta.mul(vb).add(&va.mul(tb))),
            (Some(ta), None) => Some(ta.mul(vb)),
            (None, Some(tb)) => Some(va.mul(tb)),
            (None, None) => None,
        };
        let rq = self.req(&[a, b]);
        self.push(value, tangent, Op::Mul { a, b }, rq)
    }

    pub fn neg(&mut self, x: Var) -> Var {
        let value = self.nodes[x.0].value.scale(-1.0);
        let tangent = self.nodes[x.0].tangent.as_ref().map(|t| t.scale(-1.0));
        let rq = self.req(&[x]);
        self.push(value, tangent, Op::Neg { x }, rq)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let value = self.nodes[x.0].value.scale(c);
        let tangent = self.nodes[x.0].tangent.as_ref().map(|t| t.scale(c));
        let rq = self.req(&[x]);
        self.push(value, tangent, Op::Scale { x, c }, rq)
    }

    /// `x * w + bias` with `x [b,in]`, `w [in,out]`, `bias [out]`.
    pub fn affine(&mut self, x: Var, w: Var, bias: Var) -> Var {
        let value = self.nodes[x.0].value.matmul(&self.nodes[w.0].value).add_bias(&self.nodes[bias.0].value);
        let mut tangent: Option<Tensor> = None;
        if let Some(tx) = &self.nodes[x.0].tangent {
            tangent = Some(tx.matmul(&self.nodes[w.0].value));
        }
        if let Some(tw) = &self.nodes[w.0].tangent {
            let term = self.nodes[x.0].value.matmul(tw);
            tangent = Some(match tangent {
                Some(t) => t.add(&term),
                None => term,
            });
        }
        if let Some(tb) = &self.nodes[bias.0].tangent {
            let term = Tensor::zeros(value.shape()).add_bias(tb);
            tangent = Some(match tangent {
                Some(t) => t.add(&term),
                None => term,
            });
        }
        let rq = self.req(&[x, w, bias]);
        self.push(value, tangent, Op::Affine { x, w, bias }, rq)
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let vx = &self.nodes[x.0].value;
        let value = vx.silu();
        let tangent = self.nodes[x.0].tangent.as_ref().map(|t| vx.silu_grad().mul(t));
        let rq = self.req(&[x]);
        self.push(value, tangent, Op::Silu { x }, rq)
    }

    pub fn sin(&mut self, x: Var) -> Var {
        let vx = &self.nodes[x.0].value;
        let value = vx.map(crate::mathx::sin);
        let tangent = self.nodes[x.0].tangent.as_ref().map(|t| vx.map(crate::mathx::cos).mul(t));
        let rq = self.req(&[x]);
        self.push(value, tangent, Op::Sin { x }, rq)
    }

    pub fn cos(&mut self, x: Var) -> Var {
        let vx = &self.nodes[x.0].value;
        let value = vx.map(crate::mathx::cos);
        let tangent = self
            .nodes[x.0]
            .tangent
            .as_ref()
            .map(|t| vx.map(|v| -crate::mathx::sin(v)).mul(t));
        let rq = self.req(&[x]);
        self.push(value, tangent, Op::Cos { x }, rq)
    }

    /// `[b] -> [b,K]` outer product with a fixed frequency vector.
    pub fn outer_scale(&mut self, x: Var, freqs: Vec<f64>) -> Var {
        let vx = &self.nodes[x.0].value;
        let value = outer(vx, &freqs);
        let tangent = self.nodes[x.0].tangent.as_ref().map(|t| outer(t, &freqs));
        let rq = self.req(&[x]);
        self.push(value, tangent, Op::OuterScale { x, freqs }, rq)
    }

    pub fn concat_last(&mut self, parts: &[Var]) -> Var {
        let values: Vec<&Tensor> = parts.iter().map(|v| &self.nodes[v.0].value).collect();
        let value = Tensor::concat_last(&values);
        let widths: Vec<usize> = values.iter().map(|t| t.row_len()).collect();
        let any_tangent = parts.iter().any(|v| self.nodes[v.0].tangent.is_some());
        let tangent = if any_tangent {
            let tans: Vec<Tensor> = parts
                .iter()
                .map(|v| match &self.nodes[v.0].tangent {
                    Some(t) => t.clone(),
                    None => Tensor::zeros(self.nodes[v.0].value.shape()),
                })
                .collect();
            Some(Tensor::concat_last(&tans.iter().collect::<Vec<_>>()))
        } else {
            None
        };
        let rq = self.req(parts);
        self.push(value, tangent, Op::ConcatLast { parts: parts.to_vec(), widths }, rq)
    }

    /// Per-row sum `[b,d] -> [b]`.
    pub fn sum_last(&mut self, x: Var) -> Var {
        let value = self.nodes[x.0].value.sum_last();
        let tangent = self.nodes[x.0].tangent.as_ref().map(|t| t.sum_last());
        let rq = self.req(&[x]);
        self.push(value, tangent, Op::SumLast { x }, rq)
    }

    /// Mean over all entries, producing a scalar node.
    pub fn mean_all(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.nodes[x.0].value.mean());
        let tangent = self.nodes[x.0].tangent.as_ref().map(|t| Tensor::scalar(t.mean()));
        let rq = self.req(&[x]);
        self.push(value, tangent, Op::MeanAll { x }, rq)
    }

    /// Reverse sweep from a scalar loss; returns one gradient per requested
    /// parameter, in order. Contributions through stop-gradient nodes are
    /// zero, and parameters unreachable from the loss get zero gradients.
    pub fn grad(&self, loss: Var, params: &[Var]) -> Vec<Tensor> {
        assert!(
            self.nodes[loss.0].value.is_scalar(),
            "loss must be scalar, got shape {:?}",
            self.nodes[loss.0].value.shape()
        );
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(Tensor::scalar(1.0));
        }

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                // Leaves keep their gradient readable; stop-gradient nodes
                // never receive one (requires_grad is false).
                Op::Leaf | Op::StopGradient => {
                    grads[idx] = Some(g);
                }
                Op::Add { a, b } => {
                    self.accum(&mut grads, *a, &g);
                    self.accum(&mut grads, *b, &g);
                }
                Op::Sub { a, b } => {
                    self.accum(&mut grads, *a, &g);
                    let neg = g.scale(-1.0);
                    self.accum(&mut grads, *b, &neg);
                }
                Op::Mul { a, b } => {
                    if self.nodes[a.0].requires_grad {
                        let ga = g.mul(&self.nodes[b.0].value);
                        self.accum(&mut grads, *a, &ga);
                    }
                    if self.nodes[b.0].requires_grad {
                        let gb = g.mul(&self.nodes[a.0].value);
                        self.accum(&mut grads, *b, &gb);
                    }
                }
                Op::Neg { x } => {
                    let gx = g.scale(-1.0);
                    self.accum(&mut grads, *x, &gx);
                }
                Op::Scale { x, c } => {
                    let gx = g.scale(*c);
                    self.accum(&mut grads, *x, &gx);
                }
                Op::Affine { x, w, bias } => {
                    if self.nodes[x.0].requires_grad {
                        let gx = g.matmul(&self.nodes[w.0].value.transpose());
                        self.accum(&mut grads, *x, &gx);
                    }
                    if self.nodes[w.0].requires_grad {
                        let gw = self.nodes[x.0].value.transpose().matmul(&g);
                        self.accum(&mut grads, *w, &gw);
                    }
                    if self.nodes[bias.0].requires_grad {
                        let gb = col_sums(&g);
                        self.accum(&mut grads, *bias, &gb);
                    }
                }
                Op::Silu { x } => {
                    let gx = g.mul(&self.nodes[x.0].value.silu_grad());
                    self.accum(&mut grads, *x, &gx);
                }
                Op::Sin { x } => {
                    let gx = g.mul(&self.nodes[x.0].value.map(crate::mathx::cos));
                    self.accum(&mut grads, *x, &gx);
                }
                Op::Cos { x } => {
                    let gx = g.mul(&self.nodes[x.0].value.map(|v| -crate::mathx::sin(v)));
                    self.accum(&mut grads, *x, &gx);
                }
                Op::OuterScale { x, freqs } => {
                    let b = self.nodes[x.0].value.len();
                    let k = freqs.len();
                    let mut gx = vec![0.0; b];
                    for (i, gi) in gx.iter_mut().enumerate() {
                        let row = &g.data()[i * k..(i + 1) * k];
                        *gi = row.iter().zip(freqs).map(|(gv, f)| gv * f).sum();
                    }
                    let gx = Tensor::from_vec(vec![b], gx);
                    self.accum(&mut grads, *x, &gx);
                }
                Op::ConcatLast { parts, widths } => {
                    let mut off = 0;
                    for (part, &w) in parts.iter().zip(widths) {
                        if self.nodes[part.0].requires_grad {
                            let gp = g.slice_cols(off, off + w);
                            self.accum(&mut grads, *part, &gp);
                        }
                        off += w;
                    }
                }
                Op::SumLast { x } => {
                    let shape = self.nodes[x.0].value.shape();
                    let d = self.nodes[x.0].value.row_len();
                    let mut gx = Tensor::zeros(shape);
                    for i in 0..g.len() {
                        let gi = g.data()[i];
                        for v in &mut gx.data_mut()[i * d..(i + 1) * d] {
                            *v = gi;
                        }
                    }
                    self.accum(&mut grads, *x, &gx);
                }
                Op::MeanAll { x } => {
                    let n = self.nodes[x.0].value.len();
                    let gx = Tensor::full(self.nodes[x.0].value.shape(), g.to_scalar() / n as f64);
                    self.accum(&mut grads, *x, &gx);
                }
            }
        }

        params
            .iter()
            .map(|p| {
                grads[p.0]
                    .take()
                    .unwrap_or_else(|| Tensor::zeros(self.nodes[p.0].value.shape()))
            })
            .collect()
    }

    fn accum(&self, grads: &mut [Option<Tensor>], v: Var, g: &Tensor) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        grads[v.0] = Some(match grads[v.0].take() {
            Some(existing) => existing.add(g),
            None => g.clone(),
        });
    }
}

fn outer(x: &Tensor, freqs: &[f64]) -> Tensor {
    let b = x.len();
    let k = freqs.len();
    let mut data = Vec::with_capacity(b * k);
    for &xi in x.data() {
        for &f in freqs {
            data.push(xi * f);
        }
    }
    Tensor::from_vec(vec![b, k], data)
}

fn col_sums(g: &Tensor) -> Tensor {
    let b = g.rows();
    let d = g.row_len();
    let mut out = vec![0.0; d];
    for i in 0..b {
        for (o, &v) in out.iter_mut().zip(&g.data()[i * d..(i + 1) * d]) {
            *o += v;
        }
    }
    Tensor::from_vec(vec![d], out)
}

/// Evaluates `f` with dual inputs and returns `(f(inputs), J_f(inputs) . tangents)`
/// from a single forward pass.
pub fn jvp(
    f: impl FnOnce(&mut Tape, &[Var]) -> Var,
    inputs: &[Tensor],
    tangents: &[Tensor],
) -> (Tensor, Tensor) {
    assert_eq!(inputs.len(), tangents.len(), "{} inputs vs {} tangents", inputs.len(), tangents.len());
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .zip(tangents)
        .map(|(x, t)| tape.leaf_with_tangent(x.clone(), t.clone()))
        .collect();
    let out = f(&mut tape, &vars);
    let value = tape.value(out).clone();
    let tangent = tape
        .tangent(out)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(value.shape()));
    (value, tangent)
}
