//! Tape-based reverse-mode differentiation over dense arrays.
//!
//! Every operation appends one node holding its output value and enough
//! cached state to run its adjoint. Nodes are created after their inputs, so
//! walking the tape backwards is a reverse topological order; gradients are
//! accumulated additively at fan-out in that fixed order, which makes two
//! identical forward passes produce bitwise-identical gradients.

use super::kernels::{gemm_nn, gemm_nt, gemm_tn, sigmoid};
use super::{Array, Scalar};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    Detach,
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Affine {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Silu(Var),
    Abs(Var),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        mask: Vec<bool>,
        probs: Vec<T>,
        count: usize,
    },
    CosineRows {
        a: Var,
        b: Var,
        norms_a: Vec<T>,
        norms_b: Vec<T>,
    },
    Sum(Var),
    Mean(Var),
    MeanRows(Var),
    GatherRows {
        table: Var,
        idx: Vec<usize>,
    },
    ConcatRows(Vec<Var>),
    SliceRows {
        x: Var,
        start: usize,
    },
    MaxPoolGroups {
        x: Var,
        argmax: Vec<usize>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        causal: bool,
        probs: Vec<T>,
    },
}

struct Node<T> {
    value: Array<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Recorded computation. Single-threaded by contract; independent tapes may
/// live on different threads.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    fault: Option<&'static str>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Tape::backward`], indexed by node.
pub struct Grads<T> {
    grads: Vec<Option<Array<T>>>,
}

impl<T: Scalar> Grads<T> {
    pub fn get(&self, v: Var) -> Option<&Array<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Array<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn same_shape<T: Scalar>(op: &'static str, a: &Array<T>, b: &Array<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, a.shape(), b.shape()));
    }
    Ok(())
}

fn matrix<T: Scalar>(op: &'static str, a: &Array<T>) -> Result<(usize, usize)> {
    if a.rank() != 2 {
        return Err(Error::shape(op, a.shape(), &[]));
    }
    Ok((a.rows(), a.cols()))
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            fault: None,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// First operation that produced a non-finite value, if any.
    pub fn fault(&self) -> Option<&'static str> {
        self.fault
    }

    pub fn check_finite(&self) -> Result<()> {
        match self.fault {
            Some(op) => Err(Error::NonFinite { op }),
            None => Ok(()),
        }
    }

    pub fn value(&self, v: Var) -> &Array<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// True for detach outputs and for leaves that do not require gradients.
    pub fn is_detached(&self, v: Var) -> bool {
        let n = &self.nodes[v.0];
        match n.op {
            Op::Detach => true,
            Op::Leaf => !n.requires_grad,
            _ => false,
        }
    }

    fn push(&mut self, name: &'static str, value: Array<T>, op: Op<T>, requires_grad: bool) -> Var {
        if self.fault.is_none() && !value.is_finite() {
            self.fault = Some(name);
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn leaf(&mut self, value: Array<T>, requires_grad: bool) -> Var {
        self.push("leaf", value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Array<T>) -> Var {
        self.leaf(value, false)
    }

    /// Value copy that blocks gradient flow to `x`'s producers.
    pub fn detach(&mut self, x: Var) -> Var {
        let value = self.value(x).clone();
        self.push("detach", value, Op::Detach, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = matrix("matmul", self.value(a))?;
        let (k2, n) = matrix("matmul", self.value(b))?;
        if k != k2 {
            return Err(Error::shape("matmul", self.value(a).shape(), self.value(b).shape()));
        }
        let mut c = vec![T::zero(); m * n];
        gemm_nn(m, k, n, self.value(a).data(), self.value(b).data(), &mut c);
        let rg = self.rg(&[a, b]);
        Ok(self.push("matmul", Array::new(&[m, n], c)?, Op::MatMul(a, b), rg))
    }

    /// `a · bᵀ` with `a: m×k`, `b: n×k`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = matrix("matmul_nt", self.value(a))?;
        let (n, k2) = matrix("matmul_nt", self.value(b))?;
        if k != k2 {
            return Err(Error::shape("matmul_nt", self.value(a).shape(), self.value(b).shape()));
        }
        let mut c = vec![T::zero(); m * n];
        gemm_nt(m, k, n, self.value(a).data(), self.value(b).data(), &mut c);
        let rg = self.rg(&[a, b]);
        Ok(self.push("matmul_nt", Array::new(&[m, n], c)?, Op::MatMulNT(a, b), rg))
    }

    /// Rowwise `y = W·x + b` for `x: R×C_in` (or a single `C_in` vector),
    /// `W: C_out×C_in`, `b: C_out`.
    pub fn affine(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xv = self.value(x);
        let wv = self.value(w);
        let (c_out, c_in) = matrix("affine", wv)?;
        if xv.rank() == 0 || xv.cols() != c_in {
            return Err(Error::shape("affine", xv.shape(), wv.shape()));
        }
        if let Some(b) = b {
            let bv = self.value(b);
            if bv.rank() != 1 || bv.len() != c_out {
                return Err(Error::shape("affine bias", bv.shape(), &[c_out]));
            }
        }
        let r = xv.rows();
        let mut y = vec![T::zero(); r * c_out];
        if let Some(b) = b {
            let bv = self.value(b).data();
            for row in y.chunks_mut(c_out) {
                row.copy_from_slice(bv);
            }
        }
        gemm_nt(r, c_in, c_out, xv.data(), wv.data(), &mut y);
        let shape: Vec<usize> = if xv.rank() == 1 { vec![c_out] } else { vec![r, c_out] };
        let mut inputs = vec![x, w];
        inputs.extend(b);
        let rg = self.rg(&inputs);
        Ok(self.push("affine", Array::new(&shape, y)?, Op::Affine { x, w, b }, rg))
    }

    fn zip_with(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
        op: Op<T>,
    ) -> Result<Var> {
        same_shape(name, self.value(a), self.value(b))?;
        let av = self.value(a);
        let data = av
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let out = Array::new(av.shape(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(name, out, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let out = self.value(x).map(|v| v * c);
        let rg = self.rg(&[x]);
        self.push("scale", out, Op::Scale(x, c), rg)
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v * sigmoid(v));
        let rg = self.rg(&[x]);
        self.push("silu", out, Op::Silu(x), rg)
    }

    pub fn abs(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.abs());
        let rg = self.rg(&[x]);
        self.push("abs", out, Op::Abs(x), rg)
    }

    /// Softmax along the trailing axis, max-subtracted.
    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let c = xv.cols();
        let mut out = xv.clone();
        for row in out.data_mut().chunks_mut(c) {
            softmax_in_place(row);
        }
        let rg = self.rg(&[x]);
        self.push("softmax_rows", out, Op::SoftmaxRows(x), rg)
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        if eps <= 0.0 {
            return Err(Error::Invalid(format!("layer_norm eps must be positive, got {eps}")));
        }
        let xv = self.value(x);
        let c = xv.cols();
        for p in [gamma, beta] {
            let pv = self.value(p);
            if pv.rank() != 1 || pv.len() != c {
                return Err(Error::shape("layer_norm", xv.shape(), pv.shape()));
            }
        }
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let n = T::of(c as f64);
        let eps = T::of(eps);
        let rows = xv.len() / c;
        let mut xhat = vec![T::zero(); xv.len()];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); xv.len()];
        for r in 0..rows {
            let row = &xv.data()[r * c..(r + 1) * c];
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..c {
                let h = (row[j] - mean) * rs;
                xhat[r * c + j] = h;
                out[r * c + j] = h * g[j] + b[j];
            }
        }
        let out = Array::new(xv.shape(), out)?;
        let rg = self.rg(&[x, gamma, beta]);
        Ok(self.push(
            "layer_norm",
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    /// Mean over masked positions of `-log softmax(logits)[target]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], mask: &[bool]) -> Result<Var> {
        let lv = self.value(logits);
        let (t_len, vocab) = matrix("cross_entropy", lv)?;
        if targets.len() != t_len || mask.len() != t_len {
            return Err(Error::shape("cross_entropy", lv.shape(), &[targets.len(), mask.len()]));
        }
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(Error::EmptyMask);
        }
        let mut probs = lv.data().to_vec();
        let mut loss = T::zero();
        for t in 0..t_len {
            let row = &mut probs[t * vocab..(t + 1) * vocab];
            if !mask[t] {
                continue;
            }
            let tgt = targets[t];
            if tgt >= vocab {
                return Err(Error::Invalid(format!("target id {tgt} outside vocabulary of {vocab}")));
            }
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = row.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
            loss += lse - row[tgt];
            softmax_in_place(row);
        }
        let loss = loss / T::of(count as f64);
        let rg = self.rg(&[logits]);
        Ok(self.push(
            "cross_entropy",
            Array::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                mask: mask.to_vec(),
                probs,
                count,
            },
            rg,
        ))
    }

    /// Per-row cosine similarity. Zero-norm rows are an error.
    pub fn cosine_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("cosine_rows", self.value(a), self.value(b))?;
        let av = self.value(a);
        let bv = self.value(b);
        let (rows, c) = (av.rows(), av.cols());
        let mut norms_a = Vec::with_capacity(rows);
        let mut norms_b = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(rows);
        for r in 0..rows {
            let (x, y) = (av.row(r), bv.row(r));
            let na = x.iter().map(|&v| v * v).sum::<T>().sqrt();
            let nb = y.iter().map(|&v| v * v).sum::<T>().sqrt();
            if na == T::zero() || nb == T::zero() {
                return Err(Error::ZeroNorm { row: r });
            }
            let dot = x.iter().zip(y).map(|(&p, &q)| p * q).sum::<T>();
            norms_a.push(na);
            norms_b.push(nb);
            out.push(dot / (na * nb));
        }
        debug_assert!(c > 0);
        let rg = self.rg(&[a, b]);
        Ok(self.push(
            "cosine_rows",
            Array::vector(out),
            Op::CosineRows {
                a,
                b,
                norms_a,
                norms_b,
            },
            rg,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum::<T>();
        let rg = self.rg(&[x]);
        self.push("sum", Array::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let s = xv.data().iter().copied().sum::<T>() / T::of(xv.len() as f64);
        let rg = self.rg(&[x]);
        self.push("mean", Array::scalar(s), Op::Mean(x), rg)
    }

    /// Column means of a matrix, giving a vector of its trailing extent.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let (r, c) = matrix("mean_rows", self.value(x))?;
        let xv = self.value(x);
        let mut out = vec![T::zero(); c];
        for i in 0..r {
            for (o, &v) in out.iter_mut().zip(xv.row(i)) {
                *o += v;
            }
        }
        let inv = T::one() / T::of(r as f64);
        for o in &mut out {
            *o *= inv;
        }
        let rg = self.rg(&[x]);
        Ok(self.push("mean_rows", Array::vector(out), Op::MeanRows(x), rg))
    }

    pub fn gather_rows(&mut self, table: Var, idx: &[usize]) -> Result<Var> {
        let (n, c) = matrix("gather_rows", self.value(table))?;
        let tv = self.value(table);
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            if i >= n {
                return Err(Error::Invalid(format!("row index {i} out of range for {n} rows")));
            }
            out.extend_from_slice(tv.row(i));
        }
        let rg = self.rg(&[table]);
        Ok(self.push(
            "gather_rows",
            Array::new(&[idx.len(), c], out)?,
            Op::GatherRows {
                table,
                idx: idx.to_vec(),
            },
            rg,
        ))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Invalid("concat_rows of nothing".into()))?;
        let c = self.value(*first).cols();
        let mut out = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let pv = self.value(p);
            if pv.rank() != 2 || pv.cols() != c {
                return Err(Error::shape("concat_rows", self.value(*first).shape(), pv.shape()));
            }
            rows += pv.rows();
            out.extend_from_slice(pv.data());
        }
        let rg = self.rg(parts);
        Ok(self.push(
            "concat_rows",
            Array::new(&[rows, c], out)?,
            Op::ConcatRows(parts.to_vec()),
            rg,
        ))
    }

    /// Rows `[start, end)` of a matrix.
    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (r, c) = matrix("slice_rows", self.value(x))?;
        if start > end || end > r {
            return Err(Error::Invalid(format!(
                "row slice [{start}, {end}) outside {r} rows"
            )));
        }
        let data = self.value(x).data()[start * c..end * c].to_vec();
        let rg = self.rg(&[x]);
        Ok(self.push(
            "slice_rows",
            Array::new(&[end - start, c], data)?,
            Op::SliceRows { x, start },
            rg,
        ))
    }

    /// Max over consecutive groups of `group` rows; ties go to the lowest row.
    pub fn max_pool_groups(&mut self, x: Var, group: usize) -> Result<Var> {
        let (r, c) = matrix("max_pool_groups", self.value(x))?;
        if group == 0 || r % group != 0 {
            return Err(Error::Invalid(format!("{r} rows not divisible into groups of {group}")));
        }
        let xv = self.value(x);
        let groups = r / group;
        let mut out = vec![T::zero(); groups * c];
        let mut argmax = vec![0usize; groups * c];
        for g in 0..groups {
            for j in 0..c {
                let mut best = g * group;
                for i in g * group + 1..(g + 1) * group {
                    if xv.at(i, j) > xv.at(best, j) {
                        best = i;
                    }
                }
                out[g * c + j] = xv.at(best, j);
                argmax[g * c + j] = best;
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(
            "max_pool_groups",
            Array::new(&[groups, c], out)?,
            Op::MaxPoolGroups { x, argmax },
            rg,
        ))
    }

    /// Multi-head scaled dot-product attention of `q: T×C` over
    /// `k, v: S×C`. With `causal`, position `t` attends to `s ≤ t` only.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, causal: bool) -> Result<Var> {
        let (t_len, c) = matrix("attention", self.value(q))?;
        let (s_len, ck) = matrix("attention", self.value(k))?;
        if ck != c || self.value(v).shape() != self.value(k).shape() {
            return Err(Error::shape("attention", self.value(q).shape(), self.value(k).shape()));
        }
        if heads == 0 || c % heads != 0 {
            return Err(Error::Invalid(format!("{heads} heads do not divide width {c}")));
        }
        if causal && s_len != t_len {
            return Err(Error::shape("causal attention", &[t_len], &[s_len]));
        }
        let dh = c / heads;
        let scale = T::of(1.0 / (dh as f64).sqrt());
        let (qd, kd, vd) = (
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
        );
        let mut probs = vec![T::zero(); heads * t_len * s_len];
        let mut out = vec![T::zero(); t_len * c];
        for h in 0..heads {
            let off = h * dh;
            for t in 0..t_len {
                let span = if causal { t + 1 } else { s_len };
                let p = &mut probs[(h * t_len + t) * s_len..(h * t_len + t + 1) * s_len];
                let qrow = &qd[t * c + off..t * c + off + dh];
                for s in 0..span {
                    let krow = &kd[s * c + off..s * c + off + dh];
                    p[s] = qrow.iter().zip(krow).map(|(&a, &b)| a * b).sum::<T>() * scale;
                }
                softmax_in_place(&mut p[..span]);
                let orow = &mut out[t * c + off..t * c + off + dh];
                for s in 0..span {
                    let w = p[s];
                    let vrow = &vd[s * c + off..s * c + off + dh];
                    for (o, &x) in orow.iter_mut().zip(vrow) {
                        *o += w * x;
                    }
                }
            }
        }
        let rg = self.rg(&[q, k, v]);
        Ok(self.push(
            "attention",
            Array::new(&[t_len, c], out)?,
            Op::Attention {
                q,
                k,
                v,
                heads,
                causal,
                probs,
            },
            rg,
        ))
    }

    /// Attention weights recorded by an [`Tape::attention`] node, laid out
    /// `heads × T × S`.
    pub fn attention_probs(&self, v: Var) -> Option<&[T]> {
        match &self.nodes[v.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    /// Reverse pass from a scalar.
    pub fn backward(&self, loss: Var) -> Result<Grads<T>> {
        self.backward_seeded(loss, T::one())
    }

    /// Reverse pass with `d loss = seed`.
    pub fn backward_seeded(&self, loss: Var, seed: T) -> Result<Grads<T>> {
        let lv = self.value(loss);
        if lv.len() != 1 || lv.rank() > 1 {
            return Err(Error::NotScalar(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Array<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[loss.0].requires_grad {
            return Ok(Grads { grads });
        }
        grads[loss.0] = Some(Array::filled(lv.shape(), seed));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.adjoint(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Grads { grads })
    }

    fn slot<'g>(&self, grads: &'g mut [Option<Array<T>>], v: Var) -> Option<&'g mut [T]> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let shape = self.nodes[v.0].value.shape();
        Some(
            grads[v.0]
                .get_or_insert_with(|| Array::zeros(shape))
                .data_mut(),
        )
    }

    fn adjoint(&self, i: usize, g: &Array<T>, grads: &mut [Option<Array<T>>]) {
        let gd = g.data();
        let out = &self.nodes[i].value;
        match &self.nodes[i].op {
            Op::Leaf | Op::Detach => {}
            Op::MatMul(a, b) => {
                let (m, k) = (self.value(*a).rows(), self.value(*a).cols());
                let n = self.value(*b).cols();
                if let Some(da) = self.slot(grads, *a) {
                    gemm_nt(m, n, k, gd, self.value(*b).data(), da);
                }
                if let Some(db) = self.slot(grads, *b) {
                    gemm_tn(k, m, n, self.value(*a).data(), gd, db);
                }
            }
            Op::MatMulNT(a, b) => {
                let (m, k) = (self.value(*a).rows(), self.value(*a).cols());
                let n = self.value(*b).rows();
                if let Some(da) = self.slot(grads, *a) {
                    gemm_nn(m, n, k, gd, self.value(*b).data(), da);
                }
                if let Some(db) = self.slot(grads, *b) {
                    gemm_tn(n, m, k, gd, self.value(*a).data(), db);
                }
            }
            Op::Affine { x, w, b } => {
                let xv = self.value(*x);
                let (c_out, c_in) = (self.value(*w).rows(), self.value(*w).cols());
                let r = xv.rows();
                if let Some(dx) = self.slot(grads, *x) {
                    gemm_nn(r, c_out, c_in, gd, self.value(*w).data(), dx);
                }
                if let Some(dw) = self.slot(grads, *w) {
                    gemm_tn(c_out, r, c_in, gd, xv.data(), dw);
                }
                if let Some(b) = b {
                    if let Some(db) = self.slot(grads, *b) {
                        for row in gd.chunks(c_out) {
                            for (d, &v) in db.iter_mut().zip(row) {
                                *d += v;
                            }
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(d) = self.slot(grads, v) {
                        for (d, &x) in d.iter_mut().zip(gd) {
                            *d += x;
                        }
                    }
                }
            }
            Op::Sub(a, b) => {
                if let Some(d) = self.slot(grads, *a) {
                    for (d, &x) in d.iter_mut().zip(gd) {
                        *d += x;
                    }
                }
                if let Some(d) = self.slot(grads, *b) {
                    for (d, &x) in d.iter_mut().zip(gd) {
                        *d -= x;
                    }
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if let Some(d) = self.slot(grads, *a) {
                    for ((d, &x), &y) in d.iter_mut().zip(gd).zip(bv) {
                        *d += x * y;
                    }
                }
                if let Some(d) = self.slot(grads, *b) {
                    for ((d, &x), &y) in d.iter_mut().zip(gd).zip(av) {
                        *d += x * y;
                    }
                }
            }
            Op::Scale(x, c) => {
                if let Some(d) = self.slot(grads, *x) {
                    for (d, &v) in d.iter_mut().zip(gd) {
                        *d += v * *c;
                    }
                }
            }
            Op::Silu(x) => {
                let xv = self.value(*x).data();
                if let Some(d) = self.slot(grads, *x) {
                    for ((d, &v), &xi) in d.iter_mut().zip(gd).zip(xv) {
                        let s = sigmoid(xi);
                        *d += v * (s + xi * s * (T::one() - s));
                    }
                }
            }
            Op::Abs(x) => {
                let xv = self.value(*x).data();
                if let Some(d) = self.slot(grads, *x) {
                    for ((d, &v), &xi) in d.iter_mut().zip(gd).zip(xv) {
                        if xi > T::zero() {
                            *d += v;
                        } else if xi < T::zero() {
                            *d -= v;
                        }
                    }
                }
            }
            Op::SoftmaxRows(x) => {
                let c = out.cols();
                if let Some(d) = self.slot(grads, *x) {
                    for ((drow, grow), yrow) in d
                        .chunks_mut(c)
                        .zip(gd.chunks(c))
                        .zip(out.data().chunks(c))
                    {
                        let dot = grow.iter().zip(yrow).map(|(&a, &b)| a * b).sum::<T>();
                        for ((dd, &gg), &yy) in drow.iter_mut().zip(grow).zip(yrow) {
                            *dd += yy * (gg - dot);
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let c = out.cols();
                let gam = self.value(*gamma).data();
                if let Some(dg) = self.slot(grads, *gamma) {
                    for (grow, hrow) in gd.chunks(c).zip(xhat.chunks(c)) {
                        for ((d, &gg), &hh) in dg.iter_mut().zip(grow).zip(hrow) {
                            *d += gg * hh;
                        }
                    }
                }
                if let Some(db) = self.slot(grads, *beta) {
                    for grow in gd.chunks(c) {
                        for (d, &gg) in db.iter_mut().zip(grow) {
                            *d += gg;
                        }
                    }
                }
                if let Some(dx) = self.slot(grads, *x) {
                    let n = T::of(c as f64);
                    for (r, ((dxrow, grow), hrow)) in dx
                        .chunks_mut(c)
                        .zip(gd.chunks(c))
                        .zip(xhat.chunks(c))
                        .enumerate()
                    {
                        let mut mean_dh = T::zero();
                        let mut mean_dh_h = T::zero();
                        for j in 0..c {
                            let dh = grow[j] * gam[j];
                            mean_dh += dh;
                            mean_dh_h += dh * hrow[j];
                        }
                        mean_dh = mean_dh / n;
                        mean_dh_h = mean_dh_h / n;
                        for j in 0..c {
                            let dh = grow[j] * gam[j];
                            dxrow[j] += rstd[r] * (dh - mean_dh - hrow[j] * mean_dh_h);
                        }
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                mask,
                probs,
                count,
            } => {
                let vocab = self.value(*logits).cols();
                let scale = gd[0] / T::of(*count as f64);
                if let Some(d) = self.slot(grads, *logits) {
                    for (t, &m) in mask.iter().enumerate() {
                        if !m {
                            continue;
                        }
                        let drow = &mut d[t * vocab..(t + 1) * vocab];
                        for (dd, &p) in drow.iter_mut().zip(&probs[t * vocab..(t + 1) * vocab]) {
                            *dd += p * scale;
                        }
                        drow[targets[t]] -= scale;
                    }
                }
            }
            Op::CosineRows {
                a,
                b,
                norms_a,
                norms_b,
            } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let c = av.cols();
                let cos = out.data();
                if let Some(da) = self.slot(grads, *a) {
                    for r in 0..av.rows() {
                        let (na, nb) = (norms_a[r], norms_b[r]);
                        let drow = &mut da[r * c..(r + 1) * c];
                        for j in 0..c {
                            drow[j] += gd[r] * (bv.at(r, j) / (na * nb) - cos[r] * av.at(r, j) / (na * na));
                        }
                    }
                }
                if let Some(db) = self.slot(grads, *b) {
                    for r in 0..bv.rows() {
                        let (na, nb) = (norms_a[r], norms_b[r]);
                        let drow = &mut db[r * c..(r + 1) * c];
                        for j in 0..c {
                            drow[j] += gd[r] * (av.at(r, j) / (na * nb) - cos[r] * bv.at(r, j) / (nb * nb));
                        }
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(d) = self.slot(grads, *x) {
                    for dd in d.iter_mut() {
                        *dd += gd[0];
                    }
                }
            }
            Op::Mean(x) => {
                let n = T::of(self.value(*x).len() as f64);
                if let Some(d) = self.slot(grads, *x) {
                    for dd in d.iter_mut() {
                        *dd += gd[0] / n;
                    }
                }
            }
            Op::MeanRows(x) => {
                let (r, c) = (self.value(*x).rows(), self.value(*x).cols());
                let inv = T::one() / T::of(r as f64);
                if let Some(d) = self.slot(grads, *x) {
                    for row in d.chunks_mut(c) {
                        for (dd, &v) in row.iter_mut().zip(gd) {
                            *dd += v * inv;
                        }
                    }
                }
            }
            Op::GatherRows { table, idx } => {
                let c = out.cols();
                if let Some(d) = self.slot(grads, *table) {
                    for (k, &i) in idx.iter().enumerate() {
                        for (dd, &v) in d[i * c..(i + 1) * c].iter_mut().zip(&gd[k * c..(k + 1) * c]) {
                            *dd += v;
                        }
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    if let Some(d) = self.slot(grads, p) {
                        for (dd, &v) in d.iter_mut().zip(&gd[off..off + n]) {
                            *dd += v;
                        }
                    }
                    off += n;
                }
            }
            Op::SliceRows { x, start } => {
                let c = out.cols();
                if let Some(d) = self.slot(grads, *x) {
                    for (dd, &v) in d[start * c..start * c + gd.len()].iter_mut().zip(gd) {
                        *dd += v;
                    }
                }
            }
            Op::MaxPoolGroups { x, argmax, .. } => {
                let c = out.cols();
                if let Some(d) = self.slot(grads, *x) {
                    for (k, (&src, &v)) in argmax.iter().zip(gd).enumerate() {
                        d[src * c + k % c] += v;
                    }
                }
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                causal,
                probs,
            } => self.attention_adjoint(gd, *q, *k, *v, *heads, *causal, probs, grads),
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_adjoint(
        &self,
        gd: &[T],
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        causal: bool,
        probs: &[T],
        grads: &mut [Option<Array<T>>],
    ) {
        let (t_len, c) = (self.value(q).rows(), self.value(q).cols());
        let s_len = self.value(k).rows();
        let dh = c / heads;
        let scale = T::of(1.0 / (dh as f64).sqrt());
        let (qd, kd, vd) = (
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
        );
        let mut dq = vec![T::zero(); t_len * c];
        let mut dk = vec![T::zero(); s_len * c];
        let mut dv = vec![T::zero(); s_len * c];
        let mut ds = vec![T::zero(); s_len];
        for h in 0..heads {
            let off = h * dh;
            for t in 0..t_len {
                let span = if causal { t + 1 } else { s_len };
                let p = &probs[(h * t_len + t) * s_len..(h * t_len + t) * s_len + span];
                let grow = &gd[t * c + off..t * c + off + dh];
                let mut dot = T::zero();
                for s in 0..span {
                    let vrow = &vd[s * c + off..s * c + off + dh];
                    let dp = grow.iter().zip(vrow).map(|(&a, &b)| a * b).sum::<T>();
                    ds[s] = dp;
                    dot += dp * p[s];
                    let dvrow = &mut dv[s * c + off..s * c + off + dh];
                    for (d, &g) in dvrow.iter_mut().zip(grow) {
                        *d += p[s] * g;
                    }
                }
                for s in 0..span {
                    let dscore = p[s] * (ds[s] - dot) * scale;
                    if dscore == T::zero() {
                        continue;
                    }
                    let (qrow, krow) = (
                        &qd[t * c + off..t * c + off + dh],
                        &kd[s * c + off..s * c + off + dh],
                    );
                    for (d, &x) in dq[t * c + off..t * c + off + dh].iter_mut().zip(krow) {
                        *d += dscore * x;
                    }
                    for (d, &x) in dk[s * c + off..s * c + off + dh].iter_mut().zip(qrow) {
                        *d += dscore * x;
                    }
                }
            }
        }
        for (var, buf) in [(q, dq), (k, dk), (v, dv)] {
            if let Some(d) = self.slot(grads, var) {
                for (dd, x) in d.iter_mut().zip(buf) {
                    *dd += x;
                }
            }
        }
    }
}

pub(crate) fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v = *v / sum;
    }
}
