use std::collections::HashMap;
use std::f64::consts::PI;
use std::sync::Arc;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use super::kernels::{self, gemm, MatRef};
use super::{Gradients, ParamStore, Tensor};
use crate::error::{Error, Result};

const LAYER_NORM_EPS: f64 = 1e-5;
const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

/// Handle to a value recorded in a [`Trace`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Gelu,
    Softplus,
}

/// Boolean attention mask of shape `[queries, keys]`; `true` means attendable.
pub type Mask = Arc<Vec<bool>>;

enum Op {
    Leaf,
    Param,
    Affine {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    BatchMatMul {
        a: Var,
        b: Var,
        trans_b: bool,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        scale: f64,
        probs: Vec<f64>,
    },
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Concat(Vec<Var>, usize),
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Softmax(Var),
    Activation(Var, Activation),
    Sum(Var),
    MixtureNll {
        mean: Var,
        std: Var,
        logits: Var,
        targets: Vec<f64>,
        resp: Vec<f64>,
        weights: Vec<f64>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Define-by-run record of a forward computation, replayed in reverse by
/// [`Trace::backward`].
#[derive(Default)]
pub struct Trace {
    nodes: Vec<Node>,
    params: HashMap<usize, Var>,
}

impl Trace {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    fn shape(&self, var: Var) -> &[usize] {
        self.nodes[var.0].value.shape()
    }

    fn needs(&self, var: Var) -> bool {
        self.nodes[var.0].needs_grad
    }

    fn push(&mut self, name: &'static str, value: Tensor, op: Op, needs_grad: bool) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite(name.to_string()));
        }
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Records a constant (no gradient flows into it).
    pub fn input(&mut self, value: Tensor) -> Result<Var> {
        self.push("input", value, Op::Leaf, false)
    }

    /// Records a trainable parameter; repeated requests share one node.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        let index = store
            .index_of(name)
            .ok_or_else(|| Error::Invalid(format!("unknown parameter `{name}`")))?;
        if let Some(&var) = self.params.get(&index) {
            return Ok(var);
        }
        let value = store.get_index(index).expect("index from store").1.clone();
        let var = self.push("param", value, Op::Param, true)?;
        self.params.insert(index, var);
        Ok(var)
    }

    /// `x · w + b` over the last axis of `x`.
    pub fn affine(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if ws.len() != 2 || xs.is_empty() || xs[xs.len() - 1] != ws[0] {
            return Err(Error::shape("affine", &xs, &ws));
        }
        let (din, dout) = (ws[0], ws[1]);
        if let Some(b) = b {
            if self.shape(b) != [dout] {
                return Err(Error::shape("affine bias", &ws, self.shape(b)));
            }
        }
        let rows = self.value(x).len() / din.max(1);
        let mut out = vec![0.0; rows * dout];
        if let Some(b) = b {
            let bias = self.value(b).data();
            for row in out.chunks_mut(dout) {
                row.copy_from_slice(bias);
            }
        }
        gemm(
            rows,
            din,
            dout,
            MatRef::row_major(self.value(x).data(), 0, din),
            MatRef::row_major(self.value(w).data(), 0, dout),
            &mut out,
            0,
            dout,
            true,
        );
        let mut shape = xs;
        *shape.last_mut().unwrap() = dout;
        let needs = self.needs(x) || self.needs(w) || b.is_some_and(|b| self.needs(b));
        self.push("affine", Tensor::new(shape, out)?, Op::Affine { x, w, b }, needs)
    }

    /// Batched matrix product of `[B, M, K]` with `[B, K, N]` (or `[B, N, K]` when `trans_b`).
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(Error::shape("bmm", &sa, &sb));
        }
        let (batch, m, k) = (sa[0], sa[1], sa[2]);
        let (kb, n) = if trans_b { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        if kb != k {
            return Err(Error::shape("bmm", &sa, &sb));
        }
        let mut out = vec![0.0; batch * m * n];
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        for bi in 0..batch {
            let bref = if trans_b {
                MatRef::row_major(bv, bi * n * k, k).t()
            } else {
                MatRef::row_major(bv, bi * k * n, n)
            };
            gemm(m, k, n, MatRef::row_major(av, bi * m * k, k), bref, &mut out, bi * m * n, n, false);
        }
        let needs = self.needs(a) || self.needs(b);
        self.push(
            "bmm",
            Tensor::new(vec![batch, m, n], out)?,
            Op::BatchMatMul { a, b, trans_b },
            needs,
        )
    }

    /// Fused multi-head scaled dot-product attention.
    ///
    /// `q` is `[B, Nq, d]`, `k` and `v` are `[B, Nk, d]`; heads split the last axis.
    /// A mask of shape `[Nq, Nk]` removes key positions from every query's softmax.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, mask: Option<&Mask>) -> Result<Var> {
        let (sq, sk, sv) = (self.shape(q).to_vec(), self.shape(k).to_vec(), self.shape(v).to_vec());
        if sq.len() != 3 || sk != sv || sk.len() != 3 || sq[0] != sk[0] || sq[2] != sk[2] {
            return Err(Error::shape("attention", &sq, &sk));
        }
        let (batch, nq, dm) = (sq[0], sq[1], sq[2]);
        let nk = sk[1];
        if heads == 0 || dm % heads != 0 {
            return Err(Error::Config(format!("model width {dm} not divisible by {heads} heads")));
        }
        if let Some(mask) = mask {
            if mask.len() != nq * nk {
                return Err(Error::shape("attention mask", &[nq, nk], &[mask.len()]));
            }
        }
        if nk == 0 {
            return Err(Error::Invalid("attention over an empty key set".into()));
        }
        let dh = dm / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut probs = vec![0.0; batch * heads * nq * nk];
        let mut out = vec![0.0; batch * nq * dm];
        let (qv, kv, vv) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        for b in 0..batch {
            for h in 0..heads {
                let p_off = (b * heads + h) * nq * nk;
                let q_ref = MatRef::row_major(qv, b * nq * dm + h * dh, dm);
                let k_ref = MatRef::row_major(kv, b * nk * dm + h * dh, dm);
                gemm(nq, dh, nk, q_ref, k_ref.t(), &mut probs, p_off, nk, false);
                for (r, row) in probs[p_off..p_off + nq * nk].chunks_mut(nk).enumerate() {
                    row.iter_mut().for_each(|s| *s *= scale);
                    let row_mask = mask.map(|m| &m[r * nk..(r + 1) * nk]);
                    if !kernels::softmax_slice(row, row_mask) {
                        return Err(Error::Invalid(format!("attention query {r} has no attendable keys")));
                    }
                }
                let v_ref = MatRef::row_major(vv, b * nk * dm + h * dh, dm);
                gemm(
                    nq,
                    nk,
                    dh,
                    MatRef::row_major(&probs, p_off, nk),
                    v_ref,
                    &mut out,
                    b * nq * dm + h * dh,
                    dm,
                    false,
                );
            }
        }
        let needs = self.needs(q) || self.needs(k) || self.needs(v);
        self.push(
            "attention",
            Tensor::new(vec![batch, nq, dm], out)?,
            Op::Attention {
                q,
                k,
                v,
                heads,
                scale,
                probs,
            },
            needs,
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape("add", self.shape(a), self.shape(b)));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        let needs = self.needs(a) || self.needs(b);
        self.push("add", value, Op::Add(a, b), needs)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape("mul", self.shape(a), self.shape(b)));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        let needs = self.needs(a) || self.needs(b);
        self.push("mul", value, Op::Mul(a, b), needs)
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let data = self.value(a).data().iter().map(|x| x * factor).collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        let needs = self.needs(a);
        self.push("scale", value, Op::Scale(a, factor), needs)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).clone().reshaped(shape)?;
        let needs = self.needs(a);
        self.push("reshape", value, Op::Reshape(a), needs)
    }

    /// Axis permutation: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::shape("permute", &shape, perm));
        }
        let (out_shape, data) = permute_data(self.value(a).data(), &shape, perm);
        let needs = self.needs(a);
        self.push("permute", Tensor::new(out_shape, data)?, Op::Permute(a, perm.to_vec()), needs)
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Invalid("concat of zero tensors".into()))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::shape("concat axis", &base, &[axis]));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != base.len() || s.iter().zip(&base).enumerate().any(|(i, (x, y))| i != axis && x != y) {
                return Err(Error::shape("concat", &base, s));
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let len = self.shape(p)[axis] * inner;
                data.extend_from_slice(&self.value(p).data()[o * len..(o + 1) * len]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let needs = parts.iter().any(|&p| self.needs(p));
        self.push("concat", Tensor::new(shape, data)?, Op::Concat(parts.to_vec(), axis), needs)
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(Error::shape("slice", &shape, &[axis, start, len]));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let begin = (o * shape[axis] + start) * inner;
            data.extend_from_slice(&src[begin..begin + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let needs = self.needs(x);
        self.push("slice", Tensor::new(out_shape, data)?, Op::Slice { x, axis, start }, needs)
    }

    /// Normalizes every last-axis slice to zero mean and unit variance, then applies gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let n = *shape.last().ok_or_else(|| Error::shape("layer_norm", &shape, &[]))?;
        if self.shape(gain) != [n] || self.shape(bias) != [n] {
            return Err(Error::shape("layer_norm", &shape, self.shape(gain)));
        }
        let rows = self.value(x).len() / n.max(1);
        let mut xhat = vec![0.0; rows * n];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; rows * n];
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        for (r, row) in self.value(x).data().chunks(n).enumerate() {
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            rstd[r] = inv;
            for c in 0..n {
                let h = (row[c] - mean) * inv;
                xhat[r * n + c] = h;
                out[r * n + c] = h * g[c] + b[c];
            }
        }
        let needs = self.needs(x) || self.needs(gain) || self.needs(bias);
        self.push(
            "layer_norm",
            Tensor::new(shape, out)?,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            needs,
        )
    }

    /// Softmax over the last axis; an optional mask (matching the last two axes)
    /// zeroes disallowed entries.
    pub fn softmax_lastdim(&mut self, x: Var, mask: Option<&Mask>) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let n = *shape.last().unwrap_or(&0);
        if n == 0 {
            return Err(Error::Invalid("softmax over an empty last dimension".into()));
        }
        let rows_per_mask = match mask {
            Some(m) => {
                if m.len() % n != 0 || shape.len() < 2 || m.len() != n * shape[shape.len() - 2] {
                    return Err(Error::shape("softmax mask", &shape, &[m.len()]));
                }
                m.len() / n
            }
            None => 1,
        };
        let mut data = self.value(x).data().to_vec();
        for (r, row) in data.chunks_mut(n).enumerate() {
            let row_mask = mask.map(|m| {
                let mr = r % rows_per_mask;
                &m[mr * n..(mr + 1) * n]
            });
            if !kernels::softmax_slice(row, row_mask) {
                return Err(Error::Invalid(format!("softmax row {r} is fully masked")));
            }
        }
        let needs = self.needs(x);
        self.push("softmax", Tensor::new(shape, data)?, Op::Softmax(x), needs)
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Result<Var> {
        let f = match kind {
            Activation::Gelu => kernels::gelu,
            Activation::Softplus => kernels::softplus,
        };
        let data = self.value(x).data().iter().map(|&v| f(v)).collect();
        let value = Tensor::new(self.shape(x).to_vec(), data)?;
        let needs = self.needs(x);
        self.push("activation", value, Op::Activation(x, kind), needs)
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        self.activation(x, Activation::Gelu)
    }

    pub fn softplus(&mut self, x: Var) -> Result<Var> {
        self.activation(x, Activation::Softplus)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let total = self.value(x).data().iter().sum();
        let needs = self.needs(x);
        self.push("sum", Tensor::scalar(total), Op::Sum(x), needs)
    }

    /// Negative log-likelihood of `targets` under per-row Gaussian mixtures,
    /// summed over rows. All parameter tensors are `[N, K]`; `logits` are the
    /// unnormalized log-weights.
    pub fn mixture_nll(&mut self, mean: Var, std: Var, logits: Var, targets: &[f64]) -> Result<Var> {
        let shape = self.shape(mean).to_vec();
        if shape.len() != 2 || self.shape(std) != shape.as_slice() || self.shape(logits) != shape.as_slice() {
            return Err(Error::shape("mixture_nll", &shape, self.shape(std)));
        }
        let (n, k) = (shape[0], shape[1]);
        if targets.len() != n {
            return Err(Error::shape("mixture_nll targets", &shape, &[targets.len()]));
        }
        let (mu, sd, lg) = (self.value(mean).data(), self.value(std).data(), self.value(logits).data());
        let mut resp = vec![0.0; n * k];
        let mut weights = vec![0.0; n * k];
        let mut total = 0.0;
        let mut terms = vec![0.0; k];
        for row in 0..n {
            let o = row * k;
            let lse_w = kernels::log_sum_exp(&lg[o..o + k]);
            let y = targets[row];
            for c in 0..k {
                let s = sd[o + c];
                if !(s > 0.0) || !y.is_finite() {
                    return Err(Error::NonFinite(format!("mixture_nll at query {row}")));
                }
                let z = (y - mu[o + c]) / s;
                let logw = lg[o + c] - lse_w;
                weights[o + c] = logw.exp();
                terms[c] = logw - HALF_LN_2PI - s.ln() - 0.5 * z * z;
            }
            let lse = kernels::log_sum_exp(&terms);
            if !lse.is_finite() {
                return Err(Error::NonFinite(format!("mixture_nll at query {row}")));
            }
            for c in 0..k {
                resp[o + c] = (terms[c] - lse).exp();
            }
            total -= lse;
        }
        let needs = self.needs(mean) || self.needs(std) || self.needs(logits);
        self.push(
            "mixture_nll",
            Tensor::scalar(total),
            Op::MixtureNll {
                mean,
                std,
                logits,
                targets: targets.to_vec(),
                resp,
                weights,
            },
            needs,
        )
    }

    /// Reverse sweep from a scalar `loss`; returns gradients for every entry of
    /// `store` (zeros for parameters not on the path).
    pub fn backward(&self, loss: Var, store: &ParamStore) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::Invalid(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            match &node.op {
                Op::Leaf => {}
                Op::Param => {
                    grads[idx] = Some(g);
                }
                Op::Affine { x, w, b } => {
                    let (ws, xv, wv) = (self.shape(*w), self.value(*x).data(), self.value(*w).data());
                    let (din, dout) = (ws[0], ws[1]);
                    let rows = xv.len() / din.max(1);
                    if self.needs(*x) {
                        let mut dx = vec![0.0; rows * din];
                        gemm(
                            rows,
                            dout,
                            din,
                            MatRef::row_major(&g, 0, dout),
                            MatRef::row_major(wv, 0, dout).t(),
                            &mut dx,
                            0,
                            din,
                            false,
                        );
                        accumulate(&mut grads, *x, &dx);
                    }
                    if self.needs(*w) {
                        let mut dw = vec![0.0; din * dout];
                        gemm(
                            din,
                            rows,
                            dout,
                            MatRef::row_major(xv, 0, din).t(),
                            MatRef::row_major(&g, 0, dout),
                            &mut dw,
                            0,
                            dout,
                            false,
                        );
                        accumulate(&mut grads, *w, &dw);
                    }
                    if let Some(b) = b.filter(|b| self.needs(*b)) {
                        let mut db = vec![0.0; dout];
                        for row in g.chunks(dout) {
                            db.iter_mut().zip(row).for_each(|(d, v)| *d += v);
                        }
                        accumulate(&mut grads, b, &db);
                    }
                }
                Op::BatchMatMul { a, b, trans_b } => {
                    let (sa, sb) = (self.shape(*a), self.shape(*b));
                    let (batch, m, k) = (sa[0], sa[1], sa[2]);
                    let n = if *trans_b { sb[1] } else { sb[2] };
                    let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                    if self.needs(*a) {
                        let mut da = vec![0.0; batch * m * k];
                        for bi in 0..batch {
                            // da = g · bᵀ  (or g · b when b is stored transposed)
                            let bref = if *trans_b {
                                MatRef::row_major(bv, bi * n * k, k)
                            } else {
                                MatRef::row_major(bv, bi * k * n, n).t()
                            };
                            gemm(m, n, k, MatRef::row_major(&g, bi * m * n, n), bref, &mut da, bi * m * k, k, false);
                        }
                        accumulate(&mut grads, *a, &da);
                    }
                    if self.needs(*b) {
                        let mut db = vec![0.0; batch * k * n];
                        for bi in 0..batch {
                            let aref = MatRef::row_major(av, bi * m * k, k);
                            let gref = MatRef::row_major(&g, bi * m * n, n);
                            if *trans_b {
                                // b is [n, k]: db = gᵀ · a
                                gemm(n, m, k, gref.t(), aref, &mut db, bi * n * k, k, false);
                            } else {
                                gemm(k, m, n, aref.t(), gref, &mut db, bi * k * n, n, false);
                            }
                        }
                        accumulate(&mut grads, *b, &db);
                    }
                }
                Op::Attention {
                    q,
                    k,
                    v,
                    heads,
                    scale,
                    probs,
                } => {
                    let (sq, sk) = (self.shape(*q), self.shape(*k));
                    let (batch, nq, dm) = (sq[0], sq[1], sq[2]);
                    let nk = sk[1];
                    let dh = dm / heads;
                    let (qv, kv, vv) = (self.value(*q).data(), self.value(*k).data(), self.value(*v).data());
                    let mut dq = vec![0.0; qv.len()];
                    let mut dk = vec![0.0; kv.len()];
                    let mut dv = vec![0.0; vv.len()];
                    let mut dp = vec![0.0; nq * nk];
                    for b in 0..batch {
                        for h in 0..*heads {
                            let p_off = (b * heads + h) * nq * nk;
                            let p_ref = MatRef::row_major(probs, p_off, nk);
                            let g_ref = MatRef::row_major(&g, b * nq * dm + h * dh, dm);
                            let q_ref = MatRef::row_major(qv, b * nq * dm + h * dh, dm);
                            let k_ref = MatRef::row_major(kv, b * nk * dm + h * dh, dm);
                            let v_ref = MatRef::row_major(vv, b * nk * dm + h * dh, dm);
                            gemm(nk, nq, dh, p_ref.t(), g_ref, &mut dv, b * nk * dm + h * dh, dm, false);
                            gemm(nq, dh, nk, g_ref, v_ref.t(), &mut dp, 0, nk, false);
                            let p = &probs[p_off..p_off + nq * nk];
                            for (prow, dprow) in p.chunks(nk).zip(dp.chunks_mut(nk)) {
                                let dot: f64 = prow.iter().zip(dprow.iter()).map(|(a, b)| a * b).sum();
                                for (d, &pv) in dprow.iter_mut().zip(prow) {
                                    *d = pv * (*d - dot) * scale;
                                }
                            }
                            let ds = MatRef::row_major(&dp, 0, nk);
                            gemm(nq, nk, dh, ds, k_ref, &mut dq, b * nq * dm + h * dh, dm, false);
                            gemm(nk, nq, dh, ds.t(), q_ref, &mut dk, b * nk * dm + h * dh, dm, false);
                        }
                    }
                    if self.needs(*q) {
                        accumulate(&mut grads, *q, &dq);
                    }
                    if self.needs(*k) {
                        accumulate(&mut grads, *k, &dk);
                    }
                    if self.needs(*v) {
                        accumulate(&mut grads, *v, &dv);
                    }
                }
                Op::Add(a, b) => {
                    if self.needs(*a) {
                        accumulate(&mut grads, *a, &g);
                    }
                    if self.needs(*b) {
                        accumulate(&mut grads, *b, &g);
                    }
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                    if self.needs(*a) {
                        let da: Vec<f64> = g.iter().zip(bv).map(|(x, y)| x * y).collect();
                        accumulate(&mut grads, *a, &da);
                    }
                    if self.needs(*b) {
                        let db: Vec<f64> = g.iter().zip(av).map(|(x, y)| x * y).collect();
                        accumulate(&mut grads, *b, &db);
                    }
                }
                Op::Scale(a, factor) => {
                    let da: Vec<f64> = g.iter().map(|x| x * factor).collect();
                    accumulate(&mut grads, *a, &da);
                }
                Op::Reshape(a) => accumulate(&mut grads, *a, &g),
                Op::Permute(a, perm) => {
                    let mut inverse = vec![0; perm.len()];
                    for (i, &p) in perm.iter().enumerate() {
                        inverse[p] = i;
                    }
                    let (_, da) = permute_data(&g, node.value.shape(), &inverse);
                    accumulate(&mut grads, *a, &da);
                }
                Op::Concat(parts, axis) => {
                    let shape = node.value.shape();
                    let outer: usize = shape[..*axis].iter().product();
                    let inner: usize = shape[axis + 1..].iter().product();
                    let mut offset = 0;
                    for &p in parts {
                        let len = self.shape(p)[*axis];
                        if self.needs(p) {
                            let mut dp = Vec::with_capacity(outer * len * inner);
                            for o in 0..outer {
                                let begin = (o * shape[*axis] + offset) * inner;
                                dp.extend_from_slice(&g[begin..begin + len * inner]);
                            }
                            accumulate(&mut grads, p, &dp);
                        }
                        offset += len;
                    }
                }
                Op::Slice { x, axis, start } => {
                    let shape = self.shape(*x);
                    let outer: usize = shape[..*axis].iter().product();
                    let inner: usize = shape[axis + 1..].iter().product();
                    let len = node.value.shape()[*axis];
                    let mut dx = vec![0.0; self.value(*x).len()];
                    for o in 0..outer {
                        let dst = (o * shape[*axis] + start) * inner;
                        let src = o * len * inner;
                        dx[dst..dst + len * inner].copy_from_slice(&g[src..src + len * inner]);
                    }
                    accumulate(&mut grads, *x, &dx);
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    xhat,
                    rstd,
                } => {
                    let n = *self.shape(*x).last().unwrap();
                    let gv = self.value(*gain).data();
                    let mut dx = vec![0.0; g.len()];
                    let mut dgain = vec![0.0; n];
                    let mut dbias = vec![0.0; n];
                    let mut dxhat = vec![0.0; n];
                    for (r, grow) in g.chunks(n).enumerate() {
                        let hrow = &xhat[r * n..(r + 1) * n];
                        for c in 0..n {
                            dgain[c] += grow[c] * hrow[c];
                            dbias[c] += grow[c];
                            dxhat[c] = grow[c] * gv[c];
                        }
                        let mean_d = dxhat.iter().sum::<f64>() / n as f64;
                        let mean_dh = dxhat.iter().zip(hrow).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                        for c in 0..n {
                            dx[r * n + c] = rstd[r] * (dxhat[c] - mean_d - hrow[c] * mean_dh);
                        }
                    }
                    if self.needs(*x) {
                        accumulate(&mut grads, *x, &dx);
                    }
                    if self.needs(*gain) {
                        accumulate(&mut grads, *gain, &dgain);
                    }
                    if self.needs(*bias) {
                        accumulate(&mut grads, *bias, &dbias);
                    }
                }
                Op::Softmax(x) => {
                    let n = *node.value.shape().last().unwrap();
                    let p = node.value.data();
                    let mut dx = vec![0.0; g.len()];
                    for ((prow, grow), drow) in p.chunks(n).zip(g.chunks(n)).zip(dx.chunks_mut(n)) {
                        let dot: f64 = prow.iter().zip(grow).map(|(a, b)| a * b).sum();
                        for c in 0..n {
                            drow[c] = prow[c] * (grow[c] - dot);
                        }
                    }
                    accumulate(&mut grads, *x, &dx);
                }
                Op::Activation(x, kind) => {
                    let xv = self.value(*x).data();
                    let dfun = match kind {
                        Activation::Gelu => kernels::gelu_grad,
                        Activation::Softplus => kernels::sigmoid,
                    };
                    let dx: Vec<f64> = g.iter().zip(xv).map(|(gi, &xi)| gi * dfun(xi)).collect();
                    accumulate(&mut grads, *x, &dx);
                }
                Op::Sum(x) => {
                    let dx = vec![g[0]; self.value(*x).len()];
                    accumulate(&mut grads, *x, &dx);
                }
                Op::MixtureNll {
                    mean,
                    std,
                    logits,
                    targets,
                    resp,
                    weights,
                } => {
                    let k = self.shape(*mean)[1];
                    let (mu, sd) = (self.value(*mean).data(), self.value(*std).data());
                    let up = g[0];
                    let len = mu.len();
                    let mut dmu = vec![0.0; len];
                    let mut dsd = vec![0.0; len];
                    let mut dlg = vec![0.0; len];
                    for idx in 0..len {
                        let y = targets[idx / k];
                        let s = sd[idx];
                        let diff = y - mu[idx];
                        let r = resp[idx];
                        dmu[idx] = -up * r * diff / (s * s);
                        dsd[idx] = -up * r * (diff * diff / (s * s * s) - 1.0 / s);
                        dlg[idx] = up * (weights[idx] - r);
                    }
                    if self.needs(*mean) {
                        accumulate(&mut grads, *mean, &dmu);
                    }
                    if self.needs(*std) {
                        accumulate(&mut grads, *std, &dsd);
                    }
                    if self.needs(*logits) {
                        accumulate(&mut grads, *logits, &dlg);
                    }
                }
            }
        }

        let mut out = IndexMap::with_capacity(store.len());
        for (index, (name, tensor)) in store.iter().enumerate() {
            let grad = self
                .params
                .get(&index)
                .and_then(|var| grads[var.0].take())
                .map(|g| Tensor::new(tensor.shape().to_vec(), g))
                .transpose()?
                .unwrap_or_else(|| Tensor::zeros(tensor.shape()));
            out.insert(name.to_string(), grad);
        }
        Ok(Gradients::from_map(out))
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], var: Var, delta: &[f64]) {
    match &mut grads[var.0] {
        Some(existing) => existing.iter_mut().zip(delta).for_each(|(a, b)| *a += b),
        slot @ None => *slot = Some(delta.to_vec()),
    }
}

fn permute_data(src: &[f64], shape: &[usize], perm: &[usize]) -> (Vec<usize>, Vec<f64>) {
    let rank = shape.len();
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let total = src.len();
    let mut in_strides = vec![1; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = Vec::with_capacity(total);
    if total == 0 {
        return (out_shape, out);
    }
    // Copy contiguous runs when the innermost axis stays innermost.
    let (run, outer_rank) = if rank > 0 && perm[rank - 1] == rank - 1 {
        (shape[rank - 1], rank - 1)
    } else {
        (1, rank)
    };
    let mut idx = vec![0usize; outer_rank];
    loop {
        let base: usize = idx.iter().zip(&strides).map(|(i, s)| i * s).sum();
        if run > 1 || outer_rank < rank {
            out.extend_from_slice(&src[base..base + run]);
        } else {
            out.push(src[base]);
        }
        let mut axis = outer_rank;
        loop {
            if axis == 0 {
                return (out_shape, out);
            }
            axis -= 1;
            idx[axis] += 1;
            if idx[axis] < out_shape[axis] {
                break;
            }
            idx[axis] = 0;
        }
    }
}

/// Log-density of a Gaussian mixture at `y` (weights given as probabilities).
pub fn mixture_log_density(mean: &[f64], std: &[f64], weights: &[f64], y: f64) -> f64 {
    let terms: Vec<f64> = mean
        .iter()
        .zip(std)
        .zip(weights)
        .map(|((&m, &s), &w)| {
            let z = (y - m) / s;
            w.ln() - 0.5 * (2.0 * PI).ln() - s.ln() - 0.5 * z * z
        })
        .collect();
    kernels::log_sum_exp(&terms)
}
