//! Define-by-run reverse-mode differentiation.
//!
//! A [`Tape`] records every operation applied during one forward pass.
//! Parameters are read in place from a borrowed [`ParamStore`]; gradients for
//! them come back in [`Gradients`] and are folded into the store once the tape
//! is gone.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{shape_err, EngineError, Result};
use crate::params::{ParamId, ParamStore};
use crate::scalar::{matmul, Scalar};
use crate::tensor::Tensor;

pub const SELU_ALPHA: f64 = 1.673_263_242_354_377_3;
pub const SELU_LAMBDA: f64 = 1.050_700_987_355_480_5;
pub const NORM_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

/// Projection weights of one attention block; each `w*` is `[D, D]`.
#[derive(Debug, Clone, Copy)]
pub struct AttentionWeights {
    pub wq: Var,
    pub bq: Option<Var>,
    pub wk: Var,
    pub bk: Option<Var>,
    pub wv: Var,
    pub bv: Option<Var>,
    pub wo: Var,
    pub bo: Option<Var>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Param(ParamId),
    Affine {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Add(Var, Var),
    Relu(Var),
    Selu(Var),
    Gelu(Var),
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
        train: bool,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: Vec<T>,
    },
    SoftmaxCrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<T>,
    },
    Reshape(Var),
    PrependToken {
        x: Var,
        token: Var,
    },
    SelectToken {
        x: Var,
        index: usize,
    },
    Stack(Vec<Var>),
    Lookup {
        table: Var,
        ids: Vec<usize>,
    },
    MeanTokens(Var),
    Dropout {
        x: Var,
        mask: Vec<T>,
    },
    WeightedSum {
        x: Var,
        weights: Vec<T>,
    },
}

struct Node<T> {
    value: Option<Tensor<T>>,
    op: Op<T>,
    requires_grad: bool,
}

pub struct Tape<'s, T: Scalar> {
    store: &'s ParamStore<T>,
    nodes: Vec<Node<T>>,
    param_vars: HashMap<ParamId, Var>,
    mode: Mode,
    rng: ChaCha8Rng,
    buffer_updates: Vec<(ParamId, Vec<T>)>,
}

/// Pending writes of batch norm running statistics produced in train mode.
#[derive(Debug, Default)]
pub struct BufferUpdates<T>(Vec<(ParamId, Vec<T>)>);

impl<T: Scalar> BufferUpdates<T> {
    pub fn apply(self, store: &mut ParamStore<T>) {
        for (id, data) in self.0 {
            store.set_buffer(id, data);
        }
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Gradients of a scalar loss with respect to every leaf of a tape.
pub struct Gradients<T> {
    node_grads: Vec<Option<Vec<T>>>,
    params: Vec<(ParamId, Var)>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient for a leaf created with [`Tape::input`] or a parameter var.
    pub fn wrt(&self, var: Var) -> Option<&[T]> {
        self.node_grads.get(var.0)?.as_deref()
    }

    pub fn accumulate_into(&self, store: &mut ParamStore<T>) {
        for &(id, var) in &self.params {
            if let Some(g) = &self.node_grads[var.0] {
                store.accumulate_grad(id, g);
            }
        }
    }
}

impl<'s, T: Scalar> Tape<'s, T> {
    pub fn new(store: &'s ParamStore<T>, mode: Mode, seed: u64) -> Self {
        Self {
            store,
            nodes: Vec::new(),
            param_vars: HashMap::new(),
            mode,
            rng: ChaCha8Rng::seed_from_u64(seed),
            buffer_updates: Vec::new(),
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn store(&self) -> &'s ParamStore<T> {
        self.store
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn take_buffer_updates(&mut self) -> BufferUpdates<T> {
        BufferUpdates(std::mem::take(&mut self.buffer_updates))
    }

    pub fn value(&self, var: Var) -> &Tensor<T> {
        let node = &self.nodes[var.0];
        match (&node.value, &node.op) {
            (Some(v), _) => v,
            (None, Op::Param(id)) => &self.store.get(*id).value,
            _ => unreachable!("non-param node without value"),
        }
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        self.value(var).shape()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, parents: &[Var]) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value: Some(value),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf whose gradient is tracked.
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value: Some(value),
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value: Some(value),
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, name: &str) -> Result<Var> {
        let id = self.store.id(name)?;
        Ok(self.param_by_id(id))
    }

    pub fn param_by_id(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        self.nodes.push(Node {
            value: None,
            op: Op::Param(id),
            requires_grad: self.store.get(id).requires_grad(),
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars.insert(id, v);
        v
    }

    // ---------------------------------------------------------------- ops

    /// `x @ w + b` over the last axis of `x`; leading axes are batch axes.
    pub fn affine(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if ws.len() != 2 || xs.is_empty() || *xs.last().unwrap() != ws[0] {
            return Err(shape_err("affine", format!("x {xs:?} @ w {ws:?}")));
        }
        let (inp, out) = (ws[0], ws[1]);
        if let Some(b) = b {
            if self.shape(b) != [out] {
                return Err(shape_err(
                    "affine",
                    format!("bias {:?} for {out} outputs", self.shape(b)),
                ));
            }
        }
        let rows = self.value(x).numel() / inp.max(1);
        let mut y = vec![T::zero(); rows * out];
        if let Some(b) = b {
            let bias = self.value(b).data();
            for row in y.chunks_exact_mut(out) {
                row.copy_from_slice(bias);
            }
        }
        matmul(
            self.value(x).data(),
            false,
            self.value(w).data(),
            false,
            rows,
            inp,
            out,
            &mut y,
            b.is_some(),
        );
        let mut shape = xs;
        *shape.last_mut().unwrap() = out;
        let parents: Vec<Var> = [Some(x), Some(w), b].into_iter().flatten().collect();
        Ok(self.push(Tensor::new(shape, y)?, Op::Affine { x, w, b }, &parents))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(
                "add",
                format!("{:?} + {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&p, &q)| p + q)
            .collect();
        let t = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push(t, Op::Add(a, b), &[a, b]))
    }

    fn map(&mut self, x: Var, f: impl Fn(T) -> T) -> Tensor<T> {
        let v = self.value(x);
        Tensor::new(v.shape().to_vec(), v.data().iter().map(|&e| f(e)).collect())
            .expect("same shape")
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let t = self.map(x, |e| if e > T::zero() { e } else { T::zero() });
        self.push(t, Op::Relu(x), &[x])
    }

    pub fn selu(&mut self, x: Var) -> Var {
        let t = self.map(x, selu);
        self.push(t, Op::Selu(x), &[x])
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let t = self.map(x, gelu);
        self.push(t, Op::Gelu(x), &[x])
    }

    /// Batch normalisation of `[B, F]`. Train mode uses batch statistics and
    /// records a running-statistics update; eval mode uses the running
    /// statistics stored under `running_mean` / `running_var`.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: ParamId,
        running_var: ParamId,
    ) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 2 {
            return Err(shape_err("batch_norm", format!("expected [B, F], got {xs:?}")));
        }
        let (rows, feats) = (xs[0], xs[1]);
        for p in [gamma, beta] {
            if self.shape(p) != [feats] {
                return Err(shape_err(
                    "batch_norm",
                    format!("affine {:?} for {feats} features", self.shape(p)),
                ));
            }
        }
        let xd = self.value(x).data();
        let train = self.mode == Mode::Train;
        let (mean, var) = if train {
            if rows < 2 {
                return Err(EngineError::BatchTooSmall(rows));
            }
            // batch statistics in f64: with few rows the f32 sums lose the
            // digits the backward pass relies on
            let n = rows as f64;
            let mut mean = vec![0.0f64; feats];
            for row in xd.chunks_exact(feats) {
                for (m, &e) in mean.iter_mut().zip(row) {
                    *m += e.as_f64();
                }
            }
            mean.iter_mut().for_each(|m| *m /= n);
            let mut var = vec![0.0f64; feats];
            for row in xd.chunks_exact(feats) {
                for f in 0..feats {
                    let d = row[f].as_f64() - mean[f];
                    var[f] += d * d;
                }
            }
            var.iter_mut().for_each(|v| *v /= n);
            (mean, var)
        } else {
            let stat = |id| self.store.get(id).value.data().iter().map(|v: &T| v.as_f64()).collect::<Vec<_>>();
            (stat(running_mean), stat(running_var))
        };
        let rstd64: Vec<f64> = var.iter().map(|&v| 1.0 / (v + NORM_EPS).sqrt()).collect();
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let mut xhat = vec![T::zero(); rows * feats];
        let mut y = vec![T::zero(); rows * feats];
        for r in 0..rows {
            for f in 0..feats {
                let i = r * feats + f;
                let h = (xd[i].as_f64() - mean[f]) * rstd64[f];
                xhat[i] = T::lit(h);
                y[i] = T::lit(g[f].as_f64() * h + bt[f].as_f64());
            }
        }
        if train {
            let mom = T::lit(BN_MOMENTUM);
            let keep = T::one() - mom;
            let unbias = T::lit(rows as f64 / (rows as f64 - 1.0));
            let rm = self.store.get(running_mean).value.data();
            let rv = self.store.get(running_var).value.data();
            let new_mean = (0..feats).map(|f| keep * rm[f] + mom * T::lit(mean[f])).collect();
            let new_var = (0..feats)
                .map(|f| keep * rv[f] + mom * T::lit(var[f]) * unbias)
                .collect();
            self.buffer_updates.push((running_mean, new_mean));
            self.buffer_updates.push((running_var, new_var));
        }
        let rstd = rstd64.iter().map(|&r| T::lit(r)).collect();
        let op = Op::BatchNorm {
            x,
            gamma,
            beta,
            xhat,
            rstd,
            train,
        };
        Ok(self.push(Tensor::new(xs, y)?, op, &[x, gamma, beta]))
    }

    /// Normalisation over the last axis with a learned affine.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let d = *xs.last().ok_or_else(|| shape_err("layer_norm", "scalar input"))?;
        for p in [gamma, beta] {
            if self.shape(p) != [d] {
                return Err(shape_err(
                    "layer_norm",
                    format!("affine {:?} for width {d}", self.shape(p)),
                ));
            }
        }
        let eps = T::lit(NORM_EPS);
        let n = T::lit(d as f64);
        let xd = self.value(x).data();
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let rows = xd.len() / d;
        let mut xhat = vec![T::zero(); xd.len()];
        let mut y = vec![T::zero(); xd.len()];
        let mut rstd = vec![T::zero(); rows];
        for r in 0..rows {
            let row = &xd[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&e| (e - mean) * (e - mean)).sum::<T>() / n;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for c in 0..d {
                let h = (row[c] - mean) * rs;
                xhat[r * d + c] = h;
                y[r * d + c] = g[c] * h + bt[c];
            }
        }
        let op = Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat,
            rstd,
        };
        Ok(self.push(Tensor::new(xs, y)?, op, &[x, gamma, beta]))
    }

    /// Unmasked scaled dot-product attention over `[B, T, D]` inputs split
    /// into `heads` contiguous slices of width `D / heads`. Heads are written
    /// back concatenated; the output projection is a separate [`Tape::affine`].
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
        let qs = self.shape(q).to_vec();
        if qs.len() != 3 || self.shape(k) != qs.as_slice() || self.shape(v) != qs.as_slice() {
            return Err(shape_err(
                "attention",
                format!("q {qs:?}, k {:?}, v {:?}", self.shape(k), self.shape(v)),
            ));
        }
        let (bsz, t, d) = (qs[0], qs[1], qs[2]);
        if heads == 0 || d % heads != 0 {
            return Err(EngineError::Config(format!(
                "width {d} is not divisible by {heads} heads"
            )));
        }
        let dh = d / heads;
        let scale = T::one() / T::lit(dh as f64).sqrt();
        let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut probs = vec![T::zero(); bsz * heads * t * t];
        let mut out = vec![T::zero(); bsz * t * d];
        for b in 0..bsz {
            let base = b * t * d;
            for h in 0..heads {
                let off = h * dh;
                let p = &mut probs[(b * heads + h) * t * t..(b * heads + h + 1) * t * t];
                for i in 0..t {
                    let qi = &qd[base + i * d + off..base + i * d + off + dh];
                    let row = &mut p[i * t..(i + 1) * t];
                    for j in 0..t {
                        let kj = &kd[base + j * d + off..base + j * d + off + dh];
                        row[j] = dot(qi, kj) * scale;
                    }
                    softmax_in_place(row);
                    let oi = &mut out[base + i * d + off..base + i * d + off + dh];
                    for j in 0..t {
                        let w = row[j];
                        let vj = &vd[base + j * d + off..base + j * d + off + dh];
                        for (o, &e) in oi.iter_mut().zip(vj) {
                            *o += w * e;
                        }
                    }
                }
            }
        }
        let op = Op::Attention {
            q,
            k,
            v,
            heads,
            probs,
        };
        Ok(self.push(Tensor::new(qs, out)?, op, &[q, k, v]))
    }

    /// Projections, per-head attention, concatenation and output projection.
    /// Returns the output and the attention-core node (for inspecting weights).
    pub fn multi_head_attention(
        &mut self,
        x: Var,
        weights: &AttentionWeights,
        heads: usize,
    ) -> Result<(Var, Var)> {
        let d = self.value(x).last_dim();
        if heads == 0 || d % heads != 0 {
            return Err(EngineError::Config(format!(
                "width {d} is not divisible by {heads} heads"
            )));
        }
        let q = self.affine(x, weights.wq, weights.bq)?;
        let k = self.affine(x, weights.wk, weights.bk)?;
        let v = self.affine(x, weights.wv, weights.bv)?;
        let core = self.attention(q, k, v, heads)?;
        let out = self.affine(core, weights.wo, weights.bo)?;
        Ok((out, core))
    }

    /// Attention probabilities recorded by an [`Tape::attention`] node,
    /// laid out `[B, heads, T, T]`.
    pub fn attention_weights(&self, var: Var) -> Option<&[T]> {
        match &self.nodes[var.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    /// Mean softmax cross-entropy of `[B, C]` logits.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let ls = self.shape(logits).to_vec();
        if ls.len() != 2 || ls[0] != labels.len() || ls[0] == 0 {
            return Err(shape_err(
                "softmax_cross_entropy",
                format!("logits {ls:?} with {} labels", labels.len()),
            ));
        }
        let c = ls[1];
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(shape_err(
                "softmax_cross_entropy",
                format!("label {bad} with {c} classes"),
            ));
        }
        let mut probs = self.value(logits).data().to_vec();
        let mut total = T::zero();
        for (row, &label) in probs.chunks_exact_mut(c).zip(labels) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = max + row.iter().map(|&z| (z - max).exp()).sum::<T>().ln();
            total += lse - row[label];
            for z in row.iter_mut() {
                *z = (*z - lse).exp();
            }
        }
        let loss = total / T::lit(labels.len() as f64);
        let op = Op::SoftmaxCrossEntropy {
            logits,
            labels: labels.to_vec(),
            probs,
        };
        Ok(self.push(Tensor::scalar(loss), op, &[logits]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape.to_vec())?;
        Ok(self.push(t, Op::Reshape(x), &[x]))
    }

    /// `[B, T, D]` with a learned `[D]` token inserted at position 0.
    pub fn prepend_token(&mut self, x: Var, token: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 3 || self.shape(token) != [xs[2]] {
            return Err(shape_err(
                "prepend_token",
                format!("x {xs:?}, token {:?}", self.shape(token)),
            ));
        }
        let (bsz, t, d) = (xs[0], xs[1], xs[2]);
        let xd = self.value(x).data();
        let tok = self.value(token).data();
        let mut out = Vec::with_capacity(bsz * (t + 1) * d);
        for b in 0..bsz {
            out.extend_from_slice(tok);
            out.extend_from_slice(&xd[b * t * d..(b + 1) * t * d]);
        }
        let t = Tensor::new([bsz, t + 1, d], out)?;
        Ok(self.push(t, Op::PrependToken { x, token }, &[x, token]))
    }

    /// `[B, T, D] -> [B, D]` at sequence position `index`.
    pub fn select_token(&mut self, x: Var, index: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 3 || index >= xs[1] {
            return Err(shape_err("select_token", format!("position {index} of {xs:?}")));
        }
        let (bsz, t, d) = (xs[0], xs[1], xs[2]);
        let xd = self.value(x).data();
        let mut out = Vec::with_capacity(bsz * d);
        for b in 0..bsz {
            let s = (b * t + index) * d;
            out.extend_from_slice(&xd[s..s + d]);
        }
        let t = Tensor::new([bsz, d], out)?;
        Ok(self.push(t, Op::SelectToken { x, index }, &[x]))
    }

    /// Stack `M` tensors of shape `[B, D]` into `[B, M, D]`.
    pub fn stack_tokens(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| shape_err("stack_tokens", "no inputs"))?;
        let ps = self.shape(*first).to_vec();
        if ps.len() != 2 || parts.iter().any(|p| self.shape(*p) != ps.as_slice()) {
            return Err(shape_err("stack_tokens", "inputs must share a [B, D] shape"));
        }
        let (bsz, d, m) = (ps[0], ps[1], parts.len());
        let mut out = vec![T::zero(); bsz * m * d];
        for (j, p) in parts.iter().enumerate() {
            let pd = self.value(*p).data();
            for b in 0..bsz {
                out[(b * m + j) * d..(b * m + j + 1) * d].copy_from_slice(&pd[b * d..(b + 1) * d]);
            }
        }
        let t = Tensor::new([bsz, m, d], out)?;
        Ok(self.push(t, Op::Stack(parts.to_vec()), parts))
    }

    /// Rows of a `[K, D]` table.
    pub fn lookup(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let ts = self.shape(table).to_vec();
        if ts.len() != 2 {
            return Err(shape_err("lookup", format!("table {ts:?}")));
        }
        let out = self.value(table).gather_rows(ids)?;
        Ok(self.push(
            out,
            Op::Lookup {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        ))
    }

    /// `[B, T, D] -> [B, D]` mean over the token axis.
    pub fn mean_tokens(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 3 || xs[1] == 0 {
            return Err(shape_err("mean_tokens", format!("{xs:?}")));
        }
        let (bsz, t, d) = (xs[0], xs[1], xs[2]);
        let inv = T::one() / T::lit(t as f64);
        let xd = self.value(x).data();
        let mut out = vec![T::zero(); bsz * d];
        for b in 0..bsz {
            for j in 0..t {
                let row = &xd[(b * t + j) * d..(b * t + j + 1) * d];
                for (o, &e) in out[b * d..(b + 1) * d].iter_mut().zip(row) {
                    *o += e * inv;
                }
            }
        }
        let t = Tensor::new([bsz, d], out)?;
        Ok(self.push(t, Op::MeanTokens(x), &[x]))
    }

    /// Inverted dropout; identity in eval mode or when `rate` is 0.
    pub fn dropout(&mut self, x: Var, rate: f64) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(EngineError::Config(format!("dropout rate {rate} outside [0, 1)")));
        }
        if self.mode == Mode::Eval || rate == 0.0 {
            return Ok(x);
        }
        let keep = T::lit(1.0 / (1.0 - rate));
        let n = self.value(x).numel();
        let mask: Vec<T> = (0..n)
            .map(|_| {
                if self.rng.random::<f64>() < rate {
                    T::zero()
                } else {
                    keep
                }
            })
            .collect();
        let v = self.value(x);
        let data = v.data().iter().zip(&mask).map(|(&e, &m)| e * m).collect();
        let t = Tensor::new(v.shape().to_vec(), data)?;
        Ok(self.push(t, Op::Dropout { x, mask }, &[x]))
    }

    /// `sum(x * weights)`, used to reduce an arbitrary output to a scalar.
    pub fn weighted_sum(&mut self, x: Var, weights: Vec<T>) -> Result<Var> {
        if weights.len() != self.value(x).numel() {
            return Err(shape_err(
                "weighted_sum",
                format!("{} weights for {} elements", weights.len(), self.value(x).numel()),
            ));
        }
        let s = dot(self.value(x).data(), &weights);
        Ok(self.push(Tensor::scalar(s), Op::WeightedSum { x, weights }, &[x]))
    }

    // ----------------------------------------------------------- backward

    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let shape = self.shape(loss);
        if self.value(loss).numel() != 1 {
            return Err(EngineError::NonScalarLoss(shape.to_vec()));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            match &node.op {
                Op::Leaf | Op::Param(_) => grads[i] = Some(g),
                op => self.backward_op(Var(i), op, &g, &mut grads)?,
            }
        }
        let mut params: Vec<(ParamId, Var)> = self.param_vars.iter().map(|(&p, &v)| (p, v)).collect();
        params.sort();
        Ok(Gradients {
            node_grads: grads,
            params,
        })
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn slot<'g>(&self, grads: &'g mut [Option<Vec<T>>], v: Var) -> &'g mut [T] {
        let n = self.value(v).numel();
        grads[v.0].get_or_insert_with(|| vec![T::zero(); n])
    }

    fn backward_op(
        &self,
        out: Var,
        op: &Op<T>,
        g: &[T],
        grads: &mut [Option<Vec<T>>],
    ) -> Result<()> {
        match op {
            Op::Leaf | Op::Param(_) => {}
            Op::Affine { x, w, b } => {
                let (inp, outd) = {
                    let ws = self.shape(*w);
                    (ws[0], ws[1])
                };
                let rows = g.len() / outd.max(1);
                if self.needs(*x) {
                    let wd = self.value(*w).data();
                    let dx = self.slot(grads, *x);
                    matmul(g, false, wd, true, rows, outd, inp, dx, true);
                }
                if self.needs(*w) {
                    let xd = self.value(*x).data();
                    let dw = self.slot(grads, *w);
                    matmul(xd, true, g, false, inp, rows, outd, dw, true);
                }
                if let Some(b) = b {
                    if self.needs(*b) {
                        let db = self.slot(grads, *b);
                        for row in g.chunks_exact(outd) {
                            for (a, &e) in db.iter_mut().zip(row) {
                                *a += e;
                            }
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if self.needs(v) {
                        add_assign(self.slot(grads, v), g);
                    }
                }
            }
            Op::Relu(x) | Op::Selu(x) | Op::Gelu(x) => {
                if self.needs(*x) {
                    let deriv: fn(T) -> T = match op {
                        Op::Relu(_) => |e| if e > T::zero() { T::one() } else { T::zero() },
                        Op::Selu(_) => selu_grad,
                        _ => gelu_grad,
                    };
                    let xd = self.value(*x).data();
                    let dx = self.slot(grads, *x);
                    for ((a, &e), &gi) in dx.iter_mut().zip(xd).zip(g) {
                        *a += gi * deriv(e);
                    }
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
                train,
            } => {
                let feats = rstd.len();
                let rows = g.len() / feats;
                let mut dgamma = vec![0.0f64; feats];
                let mut dbeta = vec![0.0f64; feats];
                for r in 0..rows {
                    for f in 0..feats {
                        let i = r * feats + f;
                        dgamma[f] += g[i].as_f64() * xhat[i].as_f64();
                        dbeta[f] += g[i].as_f64();
                    }
                }
                if self.needs(*x) {
                    let gm = self.value(*gamma).data();
                    let dx = self.slot(grads, *x);
                    if *train {
                        // dx = gamma*rstd/n * (n*dy - dbeta - xhat*dgamma); its
                        // column sums vanish exactly, so re-centre after rounding
                        let n = rows as f64;
                        let mut col = vec![0.0f64; rows];
                        for f in 0..feats {
                            let scale = gm[f].as_f64() * rstd[f].as_f64() / n;
                            for (r, c) in col.iter_mut().enumerate() {
                                let i = r * feats + f;
                                *c = scale * (n * g[i].as_f64() - dbeta[f] - xhat[i].as_f64() * dgamma[f]);
                            }
                            let shift = col.iter().sum::<f64>() / n;
                            for (r, c) in col.iter().enumerate() {
                                let i = r * feats + f;
                                dx[i] += T::lit(c - shift);
                            }
                        }
                    } else {
                        for r in 0..rows {
                            for f in 0..feats {
                                let i = r * feats + f;
                                dx[i] += g[i] * gm[f] * rstd[f];
                            }
                        }
                    }
                }
                let dgamma: Vec<T> = dgamma.into_iter().map(T::lit).collect();
                let dbeta: Vec<T> = dbeta.into_iter().map(T::lit).collect();
                if self.needs(*gamma) {
                    add_assign(self.slot(grads, *gamma), &dgamma);
                }
                if self.needs(*beta) {
                    add_assign(self.slot(grads, *beta), &dbeta);
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let d = self.shape(*gamma)[0];
                let rows = rstd.len();
                if self.needs(*x) {
                    let gm = self.value(*gamma).data();
                    let n = T::lit(d as f64);
                    let dx = self.slot(grads, *x);
                    let mut dxhat = vec![T::zero(); d];
                    for r in 0..rows {
                        let s = r * d;
                        let mut sum = T::zero();
                        let mut sum_h = T::zero();
                        for c in 0..d {
                            dxhat[c] = g[s + c] * gm[c];
                            sum += dxhat[c];
                            sum_h += dxhat[c] * xhat[s + c];
                        }
                        for c in 0..d {
                            dx[s + c] += rstd[r] / n * (n * dxhat[c] - sum - xhat[s + c] * sum_h);
                        }
                    }
                }
                if self.needs(*gamma) {
                    let dg = self.slot(grads, *gamma);
                    for (row_g, row_h) in g.chunks_exact(d).zip(xhat.chunks_exact(d)) {
                        for c in 0..d {
                            dg[c] += row_g[c] * row_h[c];
                        }
                    }
                }
                if self.needs(*beta) {
                    let db = self.slot(grads, *beta);
                    for row in g.chunks_exact(d) {
                        add_assign(db, row);
                    }
                }
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            } => self.attention_backward(*q, *k, *v, *heads, probs, g, grads),
            Op::SoftmaxCrossEntropy {
                logits,
                labels,
                probs,
            } => {
                if self.needs(*logits) {
                    let c = self.shape(*logits)[1];
                    let scale = g[0] / T::lit(labels.len() as f64);
                    let dl = self.slot(grads, *logits);
                    for (r, &label) in labels.iter().enumerate() {
                        for j in 0..c {
                            let onehot = if j == label { T::one() } else { T::zero() };
                            dl[r * c + j] += (probs[r * c + j] - onehot) * scale;
                        }
                    }
                }
            }
            Op::Reshape(x) => {
                if self.needs(*x) {
                    add_assign(self.slot(grads, *x), g);
                }
            }
            Op::PrependToken { x, token } => {
                let s = self.shape(out);
                let (bsz, t1, d) = (s[0], s[1], s[2]);
                if self.needs(*token) {
                    let dt = self.slot(grads, *token);
                    for b in 0..bsz {
                        add_assign(dt, &g[b * t1 * d..b * t1 * d + d]);
                    }
                }
                if self.needs(*x) {
                    let dx = self.slot(grads, *x);
                    let t = t1 - 1;
                    for b in 0..bsz {
                        add_assign(
                            &mut dx[b * t * d..(b + 1) * t * d],
                            &g[b * t1 * d + d..(b + 1) * t1 * d],
                        );
                    }
                }
            }
            Op::SelectToken { x, index } => {
                if self.needs(*x) {
                    let s = self.shape(*x);
                    let (bsz, t, d) = (s[0], s[1], s[2]);
                    let dx = self.slot(grads, *x);
                    for b in 0..bsz {
                        let o = (b * t + index) * d;
                        add_assign(&mut dx[o..o + d], &g[b * d..(b + 1) * d]);
                    }
                }
            }
            Op::Stack(parts) => {
                let s = self.shape(out);
                let (bsz, m, d) = (s[0], s[1], s[2]);
                for (j, p) in parts.iter().enumerate() {
                    if self.needs(*p) {
                        let dp = self.slot(grads, *p);
                        for b in 0..bsz {
                            add_assign(
                                &mut dp[b * d..(b + 1) * d],
                                &g[(b * m + j) * d..(b * m + j + 1) * d],
                            );
                        }
                    }
                }
            }
            Op::Lookup { table, ids } => {
                if self.needs(*table) {
                    let d = self.shape(*table)[1];
                    let dt = self.slot(grads, *table);
                    for (r, &id) in ids.iter().enumerate() {
                        add_assign(&mut dt[id * d..(id + 1) * d], &g[r * d..(r + 1) * d]);
                    }
                }
            }
            Op::MeanTokens(x) => {
                if self.needs(*x) {
                    let s = self.shape(*x);
                    let (bsz, t, d) = (s[0], s[1], s[2]);
                    let inv = T::one() / T::lit(t as f64);
                    let dx = self.slot(grads, *x);
                    for b in 0..bsz {
                        for j in 0..t {
                            let o = (b * t + j) * d;
                            for c in 0..d {
                                dx[o + c] += g[b * d + c] * inv;
                            }
                        }
                    }
                }
            }
            Op::Dropout { x, mask } => {
                if self.needs(*x) {
                    let dx = self.slot(grads, *x);
                    for ((a, &gi), &m) in dx.iter_mut().zip(g).zip(mask) {
                        *a += gi * m;
                    }
                }
            }
            Op::WeightedSum { x, weights } => {
                if self.needs(*x) {
                    let dx = self.slot(grads, *x);
                    for (a, &w) in dx.iter_mut().zip(weights) {
                        *a += g[0] * w;
                    }
                }
            }
        }
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: &[T],
        g: &[T],
        grads: &mut [Option<Vec<T>>],
    ) {
        let s = self.shape(q);
        let (bsz, t, d) = (s[0], s[1], s[2]);
        let dh = d / heads;
        let scale = T::one() / T::lit(dh as f64).sqrt();
        let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut dq = vec![T::zero(); qd.len()];
        let mut dk = vec![T::zero(); kd.len()];
        let mut dv = vec![T::zero(); vd.len()];
        let mut dp = vec![T::zero(); t];
        for b in 0..bsz {
            let base = b * t * d;
            for h in 0..heads {
                let off = h * dh;
                let p = &probs[(b * heads + h) * t * t..(b * heads + h + 1) * t * t];
                let at = |i: usize| base + i * d + off;
                for i in 0..t {
                    let gi = &g[at(i)..at(i) + dh];
                    let pi = &p[i * t..(i + 1) * t];
                    for j in 0..t {
                        dp[j] = dot(gi, &vd[at(j)..at(j) + dh]);
                        let w = pi[j];
                        for (a, &e) in dv[at(j)..at(j) + dh].iter_mut().zip(gi) {
                            *a += w * e;
                        }
                    }
                    let inner = dot(pi, &dp);
                    for j in 0..t {
                        let ds = pi[j] * (dp[j] - inner) * scale;
                        for c in 0..dh {
                            dq[at(i) + c] += ds * kd[at(j) + c];
                            dk[at(j) + c] += ds * qd[at(i) + c];
                        }
                    }
                }
            }
        }
        for (var, contrib) in [(q, dq), (k, dk), (v, dv)] {
            if self.needs(var) {
                add_assign(self.slot(grads, var), &contrib);
            }
        }
    }
}

fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

fn add_assign<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (a, &b) in dst.iter_mut().zip(src) {
        *a += b;
    }
}

/// Max-subtracted softmax of one row.
pub fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for z in row.iter_mut() {
        *z = (*z - max).exp();
        sum += *z;
    }
    for z in row.iter_mut() {
        *z = *z / sum;
    }
}

pub fn selu<T: Scalar>(x: T) -> T {
    let lambda = T::lit(SELU_LAMBDA);
    if x > T::zero() {
        lambda * x
    } else {
        lambda * T::lit(SELU_ALPHA) * x.exp_m1()
    }
}

fn selu_grad<T: Scalar>(x: T) -> T {
    let lambda = T::lit(SELU_LAMBDA);
    if x > T::zero() {
        lambda
    } else {
        lambda * T::lit(SELU_ALPHA) * x.exp()
    }
}

/// Exact (erf-based) GELU.
pub fn gelu<T: Scalar>(x: T) -> T {
    let xf = x.as_f64();
    T::lit(0.5 * xf * (1.0 + libm::erf(xf * std::f64::consts::FRAC_1_SQRT_2)))
}

fn gelu_grad<T: Scalar>(x: T) -> T {
    let xf = x.as_f64();
    let cdf = 0.5 * (1.0 + libm::erf(xf * std::f64::consts::FRAC_1_SQRT_2));
    let pdf = (-0.5 * xf * xf).exp() / (2.0 * std::f64::consts::PI).sqrt();
    T::lit(cdf + xf * pdf)
}
