use std::sync::Arc;

use super::{dims2, dims3, ensure_finite, gemm, MatRef, Scalar, Tensor};
use crate::error::{dim_err, Error, Result};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Precomputed rotary tables: `cos`/`sin` are `[tokens, head_dim / 2]`.
#[derive(Clone, Debug)]
pub struct RopeTable<S> {
    pub tokens: usize,
    pub half: usize,
    pub cos: Vec<S>,
    pub sin: Vec<S>,
}

enum Op<S> {
    Leaf,
    MatMul(Var, Var),
    Linear {
        x: Var,
        w: Var,
        bias: Option<Var>,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, S),
    Offset(Var),
    Silu(Var),
    Gelu(Var),
    LayerNorm {
        x: Var,
        inv_std: Vec<S>,
    },
    Softmax {
        x: Var,
        scale: S,
    },
    Narrow {
        x: Var,
        axis: usize,
        start: usize,
    },
    Cat {
        parts: Vec<Var>,
        axis: usize,
    },
    Reshape(Var),
    SwapAxes01(Var),
    Rope {
        x: Var,
        table: Arc<RopeTable<S>>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        scale: S,
        probs: Vec<S>,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    Sum(Var),
    Mean(Var),
}

struct Node<S> {
    value: Tensor<S>,
    op: Op<S>,
    tracked: bool,
}

/// Tape of recorded primitives. Nodes are appended in evaluation order, so
/// the node index is already a topological order and `backward` is a single
/// reverse sweep.
///
/// A graph is single-writer: one forward/backward pass owns it.
pub struct Graph<S> {
    nodes: Vec<Node<S>>,
    leaf_grads: Vec<Option<Vec<S>>>,
    record: bool,
}

impl<S: Scalar> Default for Graph<S> {
    fn default() -> Self {
        Self::new()
    }
}

fn outer_mid_inner(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn sigmoid<S: Scalar>(x: S) -> S {
    S::one() / (S::one() + (-x).exp())
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

impl<S: Scalar> Graph<S> {
    /// A graph that records derivatives for tracked leaves.
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            leaf_grads: Vec::new(),
            record: true,
        }
    }

    /// A graph that never tracks gradients (inference).
    pub fn inference() -> Self {
        Graph {
            record: false,
            ..Self::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn is_tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    /// Constant input; never receives a gradient.
    pub fn input(&mut self, value: Tensor<S>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            tracked: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Differentiable leaf (unless this is an inference graph).
    pub fn param(&mut self, value: Tensor<S>) -> Var {
        let tracked = self.record;
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            tracked,
        });
        Var(self.nodes.len() - 1)
    }

    /// Accumulated gradient of a tracked leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&[S]> {
        self.leaf_grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn grad_tensor(&self, v: Var) -> Option<Tensor<S>> {
        self.grad(v).map(|g| {
            Tensor::new(self.shape(v).to_vec(), g.to_vec()).expect("grad shape matches value")
        })
    }

    pub fn zero_grad(&mut self) {
        self.leaf_grads.clear();
    }

    /// Softmax probabilities saved by an [`Graph::attention`] node,
    /// laid out `[heads, queries, keys]`.
    pub fn attention_probs(&self, v: Var) -> Option<&[S]> {
        match &self.nodes[v.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>, parents: &[Var], what: &str) -> Result<Var> {
        ensure_finite(what, value.data())?;
        let tracked = self.record && parents.iter().any(|p| self.nodes[p.0].tracked);
        self.nodes.push(Node { value, op, tracked });
        Ok(Var(self.nodes.len() - 1))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(dim_err!(
                "{what}: shapes {:?} and {:?} differ",
                self.shape(a),
                self.shape(b)
            ));
        }
        Ok(())
    }

    // ---- primitives -----------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = dims2(self.value(a))?;
        let (k2, n) = dims2(self.value(b))?;
        if k != k2 {
            return Err(dim_err!("matmul: [{m}x{k}] x [{k2}x{n}]"));
        }
        let mut out = vec![S::zero(); m * n];
        gemm(
            S::one(),
            MatRef::new(self.value(a).data(), m, k),
            MatRef::new(self.value(b).data(), k, n),
            S::zero(),
            &mut out,
        );
        self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), &[a, b], "matmul")
    }

    /// `x * w^T (+ bias)` with `x: [n, in]`, `w: [out, in]`, `bias: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, bias: Option<Var>) -> Result<Var> {
        let (n, din) = dims2(self.value(x))?;
        let (dout, win) = dims2(self.value(w))?;
        if din != win {
            return Err(dim_err!("linear: input width {din} vs weight [{dout}x{win}]"));
        }
        let mut out = vec![S::zero(); n * dout];
        if let Some(b) = bias {
            let bv = self.value(b).data();
            if bv.len() != dout {
                return Err(dim_err!("linear: bias of {} for {dout} outputs", bv.len()));
            }
            for row in out.chunks_mut(dout) {
                row.copy_from_slice(bv);
            }
        }
        gemm(
            S::one(),
            MatRef::new(self.value(x).data(), n, din),
            MatRef::new(self.value(w).data(), dout, din).t(),
            S::one(),
            &mut out,
        );
        let mut parents = vec![x, w];
        parents.extend(bias);
        self.push(
            Tensor::new(vec![n, dout], out)?,
            Op::Linear { x, w, bias },
            &parents,
            "linear",
        )
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op<S>, what: &str, f: impl Fn(S, S) -> S) -> Result<Var> {
        self.same_shape(a, b, what)?;
        let va = self.value(a);
        let data = va
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let t = Tensor::new(va.shape().to_vec(), data)?;
        self.push(t, op, &[a, b], what)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Add(a, b), "add", |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Sub(a, b), "sub", |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Mul(a, b), "mul", |x, y| x * y)
    }

    fn row_broadcast(&mut self, x: Var, row: Var, mul: bool) -> Result<Var> {
        let d = *self.shape(x).last().expect("non-empty shape");
        if self.value(row).numel() != d {
            return Err(dim_err!(
                "row broadcast: row of {} against last dim {d}",
                self.value(row).numel()
            ));
        }
        let r = self.value(row).data();
        let xv = self.value(x);
        let mut data = xv.data().to_vec();
        for chunk in data.chunks_mut(d) {
            for (v, &rv) in chunk.iter_mut().zip(r) {
                if mul {
                    *v *= rv;
                } else {
                    *v += rv;
                }
            }
        }
        let t = Tensor::new(xv.shape().to_vec(), data)?;
        if mul {
            self.push(t, Op::MulRow(x, row), &[x, row], "mul_row")
        } else {
            self.push(t, Op::AddRow(x, row), &[x, row], "add_row")
        }
    }

    /// `x + row` broadcast over every leading index.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        self.row_broadcast(x, row, false)
    }

    /// `x * row` broadcast over every leading index.
    pub fn mul_row(&mut self, x: Var, row: Var) -> Result<Var> {
        self.row_broadcast(x, row, true)
    }

    fn map(&mut self, x: Var, op: Op<S>, what: &str, f: impl Fn(S) -> S) -> Result<Var> {
        let xv = self.value(x);
        let t = Tensor::new(xv.shape().to_vec(), xv.data().iter().map(|&v| f(v)).collect())?;
        self.push(t, op, &[x], what)
    }

    pub fn scale(&mut self, x: Var, c: S) -> Result<Var> {
        self.map(x, Op::Scale(x, c), "scale", |v| v * c)
    }

    pub fn offset(&mut self, x: Var, c: S) -> Result<Var> {
        self.map(x, Op::Offset(x), "offset", |v| v + c)
    }

    pub fn silu(&mut self, x: Var) -> Result<Var> {
        self.map(x, Op::Silu(x), "silu", |v| v * sigmoid(v))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let c = S::lit(GELU_C);
        let k = S::lit(GELU_K);
        let half = S::lit(0.5);
        self.map(x, Op::Gelu(x), "gelu", |v| {
            half * v * (S::one() + (c * (v + k * v * v * v)).tanh())
        })
    }

    /// Normalizes each row (last axis) to zero mean, unit variance. No affine.
    pub fn layer_norm(&mut self, x: Var, eps: f64) -> Result<Var> {
        let xv = self.value(x);
        let d = *xv.shape().last().expect("non-empty shape");
        let eps = S::lit(eps);
        let dn = S::lit(d as f64);
        let mut data = xv.data().to_vec();
        let mut inv_std = Vec::with_capacity(data.len() / d);
        for row in data.chunks_mut(d) {
            let mean = row.iter().copied().sum::<S>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() / dn;
            let is = S::one() / (var + eps).sqrt();
            for v in row.iter_mut() {
                *v = (*v - mean) * is;
            }
            inv_std.push(is);
        }
        let t = Tensor::new(xv.shape().to_vec(), data)?;
        self.push(t, Op::LayerNorm { x, inv_std }, &[x], "layer_norm")
    }

    /// Row softmax of `scale * x` over the last axis, stabilized by
    /// subtracting each row's maximum.
    pub fn softmax_scaled(&mut self, x: Var, scale: S) -> Result<Var> {
        if scale <= S::zero() {
            return Err(Error::Contract("softmax scale must be positive".into()));
        }
        let xv = self.value(x);
        let c = *xv.shape().last().expect("non-empty shape");
        let mut data = xv.data().to_vec();
        for row in data.chunks_mut(c) {
            softmax_row(row, scale);
        }
        let t = Tensor::new(xv.shape().to_vec(), data)?;
        self.push(t, Op::Softmax { x, scale }, &[x], "softmax")
    }

    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(dim_err!(
                "narrow axis {axis} [{start}, {}) of shape {shape:?}",
                start + len
            ));
        }
        let (outer, mid, inner) = outer_mid_inner(&shape, axis);
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * mid * inner + start * inner;
            data.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        self.push(
            Tensor::new(out_shape, data)?,
            Op::Narrow { x, axis, start },
            &[x],
            "narrow",
        )
    }

    pub fn cat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| dim_err!("cat of zero tensors"))?;
        let shape0 = self.shape(*first).to_vec();
        if axis >= shape0.len() {
            return Err(dim_err!("cat axis {axis} for rank {}", shape0.len()));
        }
        let mut total = 0;
        for p in parts {
            let s = self.shape(*p);
            let compatible = s.len() == shape0.len()
                && s.iter()
                    .zip(&shape0)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(dim_err!("cat: shape {s:?} incompatible with {shape0:?} on axis {axis}"));
            }
            total += s[axis];
        }
        let (outer, _, inner) = outer_mid_inner(&shape0, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for p in parts {
                let len = self.shape(*p)[axis] * inner;
                data.extend_from_slice(&self.value(*p).data()[o * len..(o + 1) * len]);
            }
        }
        let mut out_shape = shape0;
        out_shape[axis] = total;
        self.push(
            Tensor::new(out_shape, data)?,
            Op::Cat {
                parts: parts.to_vec(),
                axis,
            },
            parts,
            "cat",
        )
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        self.push(t, Op::Reshape(x), &[x], "reshape")
    }

    /// `[a, b, c] -> [b, a, c]`.
    pub fn swap_axes01(&mut self, x: Var) -> Result<Var> {
        let (a, b, c) = dims3(self.value(x))?;
        let data = swap01(self.value(x).data(), a, b, c);
        self.push(Tensor::new(vec![b, a, c], data)?, Op::SwapAxes01(x), &[x], "swap_axes")
    }

    /// Rotates consecutive pairs of the last axis of `x: [heads, tokens, dim]`
    /// by per-token angles from `table`.
    pub fn rope(&mut self, x: Var, table: Arc<RopeTable<S>>) -> Result<Var> {
        let (h, n, d) = dims3(self.value(x))?;
        if table.tokens != n || table.half * 2 != d {
            return Err(dim_err!(
                "rope table [{}x{}] for input [{h}x{n}x{d}]",
                table.tokens,
                table.half
            ));
        }
        let mut data = self.value(x).data().to_vec();
        rotate(&mut data, &table, false);
        self.push(Tensor::new(vec![h, n, d], data)?, Op::Rope { x, table }, &[x], "rope")
    }

    /// Multi-head scaled dot-product attention without masking:
    /// `softmax(scale * q k^T) v` per head, `q: [h, nq, d]`, `k, v: [h, nk, d]`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, scale: S) -> Result<Var> {
        let (h, nq, d) = dims3(self.value(q))?;
        let (hk, nk, dk) = dims3(self.value(k))?;
        let (hv, nv, dv) = dims3(self.value(v))?;
        if h != hk || h != hv || d != dk || nk != nv {
            return Err(dim_err!(
                "attention q[{h}x{nq}x{d}] k[{hk}x{nk}x{dk}] v[{hv}x{nv}x{dv}]"
            ));
        }
        if scale <= S::zero() {
            return Err(Error::Contract("attention scale must be positive".into()));
        }
        let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut probs = vec![S::zero(); h * nq * nk];
        let mut out = vec![S::zero(); h * nq * dv];
        for head in 0..h {
            let p = &mut probs[head * nq * nk..(head + 1) * nq * nk];
            gemm(
                S::one(),
                MatRef::new(&qd[head * nq * d..(head + 1) * nq * d], nq, d),
                MatRef::new(&kd[head * nk * d..(head + 1) * nk * d], nk, d).t(),
                S::zero(),
                p,
            );
            for row in p.chunks_mut(nk) {
                softmax_row(row, scale);
            }
            gemm(
                S::one(),
                MatRef::new(p, nq, nk),
                MatRef::new(&vd[head * nk * dv..(head + 1) * nk * dv], nk, dv),
                S::zero(),
                &mut out[head * nq * dv..(head + 1) * nq * dv],
            );
        }
        ensure_finite("attention scores", &probs)?;
        self.push(
            Tensor::new(vec![h, nq, dv], out)?,
            Op::Attention {
                q,
                k,
                v,
                scale,
                probs,
            },
            &[q, k, v],
            "attention",
        )
    }

    /// Gathers rows of `table: [vocab, d]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (vocab, d) = dims2(self.value(table))?;
        if ids.is_empty() {
            return Err(dim_err!("embedding lookup with no ids"));
        }
        if let Some(bad) = ids.iter().find(|&&i| i >= vocab) {
            return Err(Error::Contract(format!(
                "token id {bad} outside vocabulary of {vocab}"
            )));
        }
        let src = self.value(table).data();
        let mut data = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            data.extend_from_slice(&src[i * d..(i + 1) * d]);
        }
        self.push(
            Tensor::new(vec![ids.len(), d], data)?,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            &[table],
            "embedding",
        )
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().copied().sum::<S>();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x], "sum")
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let s = xv.data().iter().copied().sum::<S>() / S::lit(xv.numel() as f64);
        self.push(Tensor::scalar(s), Op::Mean(x), &[x], "mean")
    }

    // ---- reverse sweep --------------------------------------------------

    /// Reverse-mode accumulation from a scalar `loss`. Leaf gradients are
    /// added to whatever previous calls left behind; use [`Graph::zero_grad`]
    /// to reset.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward seed must be a scalar, got shape {:?}",
                self.shape(loss)
            )));
        }
        if !self.nodes[loss.0].tracked {
            return Ok(());
        }
        let nodes = &self.nodes;
        let mut grads: Vec<Option<Vec<S>>> = Vec::new();
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![S::one()]);
        if self.leaf_grads.len() < nodes.len() {
            self.leaf_grads.resize_with(nodes.len(), || None);
        }

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &nodes[i];
            if !node.tracked {
                continue;
            }
            let mut acc = Accum {
                nodes,
                grads: &mut grads,
            };
            match &node.op {
                Op::Leaf => {
                    let slot = self.leaf_grads[i].get_or_insert_with(|| vec![S::zero(); g.len()]);
                    for (s, v) in slot.iter_mut().zip(&g) {
                        *s += *v;
                    }
                }
                Op::MatMul(a, b) => {
                    let (m, k) = dims2(&nodes[a.0].value)?;
                    let n = nodes[b.0].value.shape()[1];
                    let (ad, bd) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                    acc.with(*a, |ga| {
                        gemm(S::one(), MatRef::new(&g, m, n), MatRef::new(bd, k, n).t(), S::one(), ga)
                    });
                    acc.with(*b, |gb| {
                        gemm(S::one(), MatRef::new(ad, m, k).t(), MatRef::new(&g, m, n), S::one(), gb)
                    });
                }
                Op::Linear { x, w, bias } => {
                    let (n, din) = dims2(&nodes[x.0].value)?;
                    let dout = nodes[w.0].value.shape()[0];
                    let (xd, wd) = (nodes[x.0].value.data(), nodes[w.0].value.data());
                    acc.with(*x, |gx| {
                        gemm(S::one(), MatRef::new(&g, n, dout), MatRef::new(wd, dout, din), S::one(), gx)
                    });
                    acc.with(*w, |gw| {
                        gemm(S::one(), MatRef::new(&g, n, dout).t(), MatRef::new(xd, n, din), S::one(), gw)
                    });
                    if let Some(b) = bias {
                        acc.with(*b, |gb| {
                            for row in g.chunks(dout) {
                                for (s, v) in gb.iter_mut().zip(row) {
                                    *s += *v;
                                }
                            }
                        });
                    }
                }
                Op::Add(a, b) => {
                    acc.add(*a, &g);
                    acc.add(*b, &g);
                }
                Op::Sub(a, b) => {
                    acc.add(*a, &g);
                    acc.with(*b, |gb| {
                        for (s, v) in gb.iter_mut().zip(&g) {
                            *s -= *v;
                        }
                    });
                }
                Op::Mul(a, b) => {
                    let (ad, bd) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                    acc.with(*a, |ga| {
                        for ((s, v), y) in ga.iter_mut().zip(&g).zip(bd) {
                            *s += *v * *y;
                        }
                    });
                    acc.with(*b, |gb| {
                        for ((s, v), x) in gb.iter_mut().zip(&g).zip(ad) {
                            *s += *v * *x;
                        }
                    });
                }
                Op::AddRow(x, row) => {
                    let d = nodes[row.0].value.numel();
                    acc.add(*x, &g);
                    acc.with(*row, |gr| {
                        for chunk in g.chunks(d) {
                            for (s, v) in gr.iter_mut().zip(chunk) {
                                *s += *v;
                            }
                        }
                    });
                }
                Op::MulRow(x, row) => {
                    let d = nodes[row.0].value.numel();
                    let (xd, rd) = (nodes[x.0].value.data(), nodes[row.0].value.data());
                    acc.with(*x, |gx| {
                        for (gchunk, schunk) in g.chunks(d).zip(gx.chunks_mut(d)) {
                            for ((s, v), r) in schunk.iter_mut().zip(gchunk).zip(rd) {
                                *s += *v * *r;
                            }
                        }
                    });
                    acc.with(*row, |gr| {
                        for (gchunk, xchunk) in g.chunks(d).zip(xd.chunks(d)) {
                            for ((s, v), xv) in gr.iter_mut().zip(gchunk).zip(xchunk) {
                                *s += *v * *xv;
                            }
                        }
                    });
                }
                Op::Scale(x, c) => acc.with(*x, |gx| {
                    for (s, v) in gx.iter_mut().zip(&g) {
                        *s += *v * *c;
                    }
                }),
                Op::Offset(x) | Op::Reshape(x) => acc.add(*x, &g),
                Op::Silu(x) => {
                    let xd = nodes[x.0].value.data();
                    acc.with(*x, |gx| {
                        for ((s, v), xv) in gx.iter_mut().zip(&g).zip(xd) {
                            let sg = sigmoid(*xv);
                            *s += *v * sg * (S::one() + *xv * (S::one() - sg));
                        }
                    });
                }
                Op::Gelu(x) => {
                    let xd = nodes[x.0].value.data();
                    let (c, k, half) = (S::lit(GELU_C), S::lit(GELU_K), S::lit(0.5));
                    let three = S::lit(3.0);
                    acc.with(*x, |gx| {
                        for ((s, v), xv) in gx.iter_mut().zip(&g).zip(xd) {
                            let x = *xv;
                            let th = (c * (x + k * x * x * x)).tanh();
                            let dudx = c * (S::one() + three * k * x * x);
                            let d = half * (S::one() + th) + half * x * (S::one() - th * th) * dudx;
                            *s += *v * d;
                        }
                    });
                }
                Op::LayerNorm { x, inv_std } => {
                    let y = node.value.data();
                    let d = *node.value.shape().last().expect("rank >= 1");
                    let dn = S::lit(d as f64);
                    acc.with(*x, |gx| {
                        for (r, ((gy, yr), gxr)) in g
                            .chunks(d)
                            .zip(y.chunks(d))
                            .zip(gx.chunks_mut(d))
                            .enumerate()
                        {
                            let mg = gy.iter().copied().sum::<S>() / dn;
                            let mgy = gy.iter().zip(yr).map(|(a, b)| *a * *b).sum::<S>() / dn;
                            for ((s, gv), yv) in gxr.iter_mut().zip(gy).zip(yr) {
                                *s += inv_std[r] * (*gv - mg - *yv * mgy);
                            }
                        }
                    });
                }
                Op::Softmax { x, scale } => {
                    let y = node.value.data();
                    let c = *node.value.shape().last().expect("rank >= 1");
                    acc.with(*x, |gx| {
                        for ((gy, yr), gxr) in g.chunks(c).zip(y.chunks(c)).zip(gx.chunks_mut(c)) {
                            let dot = gy.iter().zip(yr).map(|(a, b)| *a * *b).sum::<S>();
                            for ((s, gv), yv) in gxr.iter_mut().zip(gy).zip(yr) {
                                *s += *scale * *yv * (*gv - dot);
                            }
                        }
                    });
                }
                Op::Narrow { x, axis, start } => {
                    let shape = nodes[x.0].value.shape();
                    let (outer, mid, inner) = outer_mid_inner(shape, *axis);
                    let len = node.value.shape()[*axis];
                    acc.with(*x, |gx| {
                        for o in 0..outer {
                            let base = o * mid * inner + start * inner;
                            let src = &g[o * len * inner..(o + 1) * len * inner];
                            for (s, v) in gx[base..base + len * inner].iter_mut().zip(src) {
                                *s += *v;
                            }
                        }
                    });
                }
                Op::Cat { parts, axis } => {
                    let (outer, total, inner) = outer_mid_inner(node.value.shape(), *axis);
                    let mut offset = 0;
                    for p in parts {
                        let len = nodes[p.0].value.shape()[*axis];
                        acc.with(*p, |gp| {
                            for o in 0..outer {
                                let src = o * total * inner + offset * inner;
                                let dst = o * len * inner;
                                for (s, v) in gp[dst..dst + len * inner]
                                    .iter_mut()
                                    .zip(&g[src..src + len * inner])
                                {
                                    *s += *v;
                                }
                            }
                        });
                        offset += len;
                    }
                }
                Op::SwapAxes01(x) => {
                    let (a, b, c) = dims3(&nodes[x.0].value)?;
                    let back = swap01(&g, b, a, c);
                    acc.add(*x, &back);
                }
                Op::Rope { x, table } => {
                    let mut back = g.clone();
                    rotate(&mut back, table, true);
                    acc.add(*x, &back);
                }
                Op::Attention {
                    q,
                    k,
                    v,
                    scale,
                    probs,
                } => {
                    let (h, nq, d) = dims3(&nodes[q.0].value)?;
                    let nk = nodes[k.0].value.shape()[1];
                    let dv = nodes[v.0].value.shape()[2];
                    let (qd, kd, vd) = (
                        nodes[q.0].value.data(),
                        nodes[k.0].value.data(),
                        nodes[v.0].value.data(),
                    );
                    let mut dscore = vec![S::zero(); nq * nk];
                    for head in 0..h {
                        let p = &probs[head * nq * nk..(head + 1) * nq * nk];
                        let go = &g[head * nq * dv..(head + 1) * nq * dv];
                        let vh = &vd[head * nk * dv..(head + 1) * nk * dv];
                        acc.with(*v, |gv| {
                            gemm(
                                S::one(),
                                MatRef::new(p, nq, nk).t(),
                                MatRef::new(go, nq, dv),
                                S::one(),
                                &mut gv[head * nk * dv..(head + 1) * nk * dv],
                            )
                        });
                        if !(acc.tracked(*q) || acc.tracked(*k)) {
                            continue;
                        }
                        // dP = dO V^T, then the softmax Jacobian row by row.
                        gemm(
                            S::one(),
                            MatRef::new(go, nq, dv),
                            MatRef::new(vh, nk, dv).t(),
                            S::zero(),
                            &mut dscore,
                        );
                        for (dr, pr) in dscore.chunks_mut(nk).zip(p.chunks(nk)) {
                            let dot = dr.iter().zip(pr).map(|(a, b)| *a * *b).sum::<S>();
                            for (dv, pv) in dr.iter_mut().zip(pr) {
                                *dv = *scale * *pv * (*dv - dot);
                            }
                        }
                        acc.with(*q, |gq| {
                            gemm(
                                S::one(),
                                MatRef::new(&dscore, nq, nk),
                                MatRef::new(&kd[head * nk * d..(head + 1) * nk * d], nk, d),
                                S::one(),
                                &mut gq[head * nq * d..(head + 1) * nq * d],
                            )
                        });
                        acc.with(*k, |gk| {
                            gemm(
                                S::one(),
                                MatRef::new(&dscore, nq, nk).t(),
                                MatRef::new(&qd[head * nq * d..(head + 1) * nq * d], nq, d),
                                S::one(),
                                &mut gk[head * nk * d..(head + 1) * nk * d],
                            )
                        });
                    }
                }
                Op::Embedding { table, ids } => {
                    let d = nodes[table.0].value.shape()[1];
                    acc.with(*table, |gt| {
                        for (r, &id) in ids.iter().enumerate() {
                            for (s, v) in gt[id * d..(id + 1) * d].iter_mut().zip(&g[r * d..(r + 1) * d]) {
                                *s += *v;
                            }
                        }
                    });
                }
                Op::Sum(x) => {
                    let g0 = g[0];
                    acc.with(*x, |gx| gx.iter_mut().for_each(|s| *s += g0));
                }
                Op::Mean(x) => {
                    let g0 = g[0] / S::lit(nodes[x.0].value.numel() as f64);
                    acc.with(*x, |gx| gx.iter_mut().for_each(|s| *s += g0));
                }
            }
        }
        Ok(())
    }
}

struct Accum<'a, S> {
    nodes: &'a [Node<S>],
    grads: &'a mut Vec<Option<Vec<S>>>,
}

impl<S: Scalar> Accum<'_, S> {
    fn tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    fn with(&mut self, v: Var, f: impl FnOnce(&mut [S])) {
        if !self.nodes[v.0].tracked {
            return;
        }
        let n = self.nodes[v.0].value.numel();
        let slot = self.grads[v.0].get_or_insert_with(|| vec![S::zero(); n]);
        f(slot);
    }

    fn add(&mut self, v: Var, g: &[S]) {
        self.with(v, |slot| {
            for (s, x) in slot.iter_mut().zip(g) {
                *s += *x;
            }
        });
    }
}

fn softmax_row<S: Scalar>(row: &mut [S], scale: S) {
    let max = row
        .iter()
        .fold(S::neg_infinity(), |m, &v| if v > m { v } else { m });
    let mut total = S::zero();
    for v in row.iter_mut() {
        *v = ((*v - max) * scale).exp();
        total += *v;
    }
    let inv = S::one() / total;
    for v in row.iter_mut() {
        *v *= inv;
    }
}

fn swap01<S: Copy>(src: &[S], a: usize, b: usize, c: usize) -> Vec<S> {
    let mut out = Vec::with_capacity(src.len());
    for j in 0..b {
        for i in 0..a {
            let base = (i * b + j) * c;
            out.extend_from_slice(&src[base..base + c]);
        }
    }
    out
}

fn rotate<S: Scalar>(data: &mut [S], table: &RopeTable<S>, inverse: bool) {
    let (n, half) = (table.tokens, table.half);
    let d = half * 2;
    for (idx, tok) in data.chunks_mut(d).enumerate() {
        let t = idx % n;
        let cos = &table.cos[t * half..(t + 1) * half];
        let sin = &table.sin[t * half..(t + 1) * half];
        for j in 0..half {
            let (a, b) = (tok[2 * j], tok[2 * j + 1]);
            let s = if inverse { -sin[j] } else { sin[j] };
            tok[2 * j] = a * cos[j] - b * s;
            tok[2 * j + 1] = a * s + b * cos[j];
        }
    }
}
