//! Reverse-mode differentiation over a recorded graph of tensor operations.
//!
//! Nodes are appended in evaluation order, so the node list is already a
//! topological order and backward is a single reverse sweep. Leaves are
//! either trainable (gradients reported) or frozen (never touched by
//! backward). Interior nodes carry a gradient only when some ancestor is
//! trainable.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::factorization::{compose_backward_raw, compose_raw};
use crate::tensor::{dot, mm, mm_nt, mm_tn, Scalar, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Role {
    Trainable,
    Frozen,
    Interior,
}

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, T),
    Softmax(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, rstd: Vec<T> },
    Gelu(Var),
    Relu(Var),
    Gather { table: Var, ids: Vec<usize> },
    ConcatRows(Var, Var),
    Slice { x: Var, start: usize },
    Sum(Var),
    Mean(Var),
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<T> },
    Mse { pred: Var, target: Vec<T> },
    Compose { codebook: Var, weights: Var },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    role: Role,
    needs_grad: bool,
}

/// Gradients of a scalar loss with respect to the trainable leaves.
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    grads: BTreeMap<Var, Tensor<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, var: Var) -> Option<&Tensor<T>> {
        self.grads.get(&var)
    }

    pub fn contains(&self, var: Var) -> bool {
        self.grads.contains_key(&var)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor<T>> {
        self.grads.remove(&var)
    }
}

/// A computation graph recorded during the forward pass.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Adds a leaf whose gradient is reported by [`Graph::backward`].
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push_leaf(value, Role::Trainable)
    }

    /// Adds a frozen leaf; it never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push_leaf(value, Role::Frozen)
    }

    fn push_leaf(&mut self, value: Tensor<T>, role: Role) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, needs_grad: role == Role::Trainable, role });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, var: Var) -> &Tensor<T> {
        &self.nodes[var.0].value
    }

    pub fn is_trainable(&self, var: Var) -> bool {
        self.nodes[var.0].role == Role::Trainable
    }

    fn needs(&self, var: Var) -> bool {
        self.nodes[var.0].needs_grad
    }

    fn push(&mut self, name: &str, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite(name.to_string()));
        }
        let needs_grad = inputs.iter().any(|&v| self.needs(v));
        self.nodes.push(Node { value, op, role: Role::Interior, needs_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    fn mat(&self, v: Var) -> Result<(usize, usize)> {
        self.value(v).dims2()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (p, q) = self.mat(a)?;
        let (q2, s) = self.mat(b)?;
        if q != q2 {
            return Err(Error::shape("matmul", self.value(a).shape(), self.value(b).shape()));
        }
        let out = mm(self.value(a).data(), self.value(b).data(), p, q, s);
        self.push("matmul", Tensor::new(&[p, s], out)?, Op::MatMul(a, b), &[a, b])
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (p, q) = self.mat(a)?;
        let (s, q2) = self.mat(b)?;
        if q != q2 {
            return Err(Error::shape("matmul_nt", self.value(a).shape(), self.value(b).shape()));
        }
        let out = mm_nt(self.value(a).data(), self.value(b).data(), p, q, s);
        self.push("matmul_nt", Tensor::new(&[p, s], out)?, Op::MatMulNT(a, b), &[a, b])
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::shape(op, self.value(a).shape(), self.value(b).shape()));
        }
        Ok(())
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        let av = self.value(a);
        let data = av.data().iter().zip(self.value(b).data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(av.shape(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.zip_with(a, b, |x, y| x + y)?;
        self.push("add", out, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.zip_with(a, b, |x, y| x - y)?;
        self.push("sub", out, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.zip_with(a, b, |x, y| x * y)?;
        self.push("mul", out, Op::Mul(a, b), &[a, b])
    }

    /// Adds a bias vector of length `c` to every row of an `n×c` matrix.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (n, c) = self.mat(x)?;
        if self.value(bias).shape() != [c] {
            return Err(Error::shape("add_row", self.value(x).shape(), self.value(bias).shape()));
        }
        let b = self.value(bias).data();
        let data = self.value(x).data().chunks(c).flat_map(|row| row.iter().zip(b).map(|(&v, &bv)| v + bv)).collect();
        self.push("add_row", Tensor::new(&[n, c], data)?, Op::AddRow(x, bias), &[x, bias])
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        let f = T::from_f64_lossy(factor);
        let xv = self.value(x);
        let out = Tensor::new(xv.shape(), xv.data().iter().map(|&v| v * f).collect())?;
        self.push("scale", out, Op::Scale(x, f), &[x])
    }

    /// Softmax along the last axis of a matrix.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let (n, c) = self.mat(x)?;
        let mut data = Vec::with_capacity(n * c);
        for row in self.value(x).data().chunks(c) {
            let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
            let exps: Vec<T> = row.iter().map(|&v| (v - max).exp()).collect();
            let total = exps.iter().fold(T::zero(), |s, &v| s + v);
            data.extend(exps.into_iter().map(|e| e / total));
        }
        let shape = self.value(x).shape().to_vec();
        self.push("softmax", Tensor::new(&shape, data)?, Op::Softmax(x), &[x])
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (n, c) = self.mat(x)?;
        if self.value(gamma).shape() != [c] || self.value(beta).shape() != [c] {
            return Err(Error::shape("layer_norm", self.value(x).shape(), self.value(gamma).shape()));
        }
        let eps = T::from_f64_lossy(eps);
        let cn = T::from_usize(c).unwrap();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = Vec::with_capacity(n * c);
        let mut rstd = Vec::with_capacity(n);
        let mut out = Vec::with_capacity(n * c);
        for row in self.value(x).data().chunks(c) {
            let mean = row.iter().fold(T::zero(), |s, &v| s + v) / cn;
            let var = row.iter().fold(T::zero(), |s, &v| s + (v - mean) * (v - mean)) / cn;
            let rs = T::one() / (var + eps).sqrt();
            rstd.push(rs);
            for (j, &v) in row.iter().enumerate() {
                let h = (v - mean) * rs;
                xhat.push(h);
                out.push(h * g[j] + b[j]);
            }
        }
        let shape = self.value(x).shape().to_vec();
        self.push(
            "layer_norm",
            Tensor::new(&shape, out)?,
            Op::LayerNorm { x, gamma, beta, xhat, rstd },
            &[x, gamma, beta],
        )
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let c = T::from_f64_lossy(GELU_C);
        let a = T::from_f64_lossy(GELU_A);
        let half = T::from_f64_lossy(0.5);
        let xv = self.value(x);
        let data = xv.data().iter().map(|&v| half * v * (T::one() + (c * (v + a * v * v * v)).tanh())).collect();
        let out = Tensor::new(xv.shape(), data)?;
        self.push("gelu", out, Op::Gelu(x), &[x])
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let out = Tensor::new(xv.shape(), xv.data().iter().map(|&v| v.max(T::zero())).collect())?;
        self.push("relu", out, Op::Relu(x), &[x])
    }

    /// Gathers rows of `table` by index.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (vocab, c) = self.mat(table)?;
        let mut data = Vec::with_capacity(ids.len() * c);
        for &id in ids {
            if id >= vocab {
                return Err(Error::Vocab { id, vocab });
            }
            data.extend_from_slice(self.value(table).row(id));
        }
        self.push("gather", Tensor::new(&[ids.len(), c], data)?, Op::Gather { table, ids: ids.to_vec() }, &[table])
    }

    /// Stacks `a` on top of `b`.
    pub fn concat_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let (na, ca) = self.mat(a)?;
        let (nb, cb) = self.mat(b)?;
        if ca != cb {
            return Err(Error::shape("concat_rows", self.value(a).shape(), self.value(b).shape()));
        }
        let mut data = self.value(a).data().to_vec();
        data.extend_from_slice(self.value(b).data());
        self.push("concat_rows", Tensor::new(&[na + nb, ca], data)?, Op::ConcatRows(a, b), &[a, b])
    }

    /// A contiguous flat range `[start, start+len)` of `x`, as a `1×len` matrix.
    pub fn slice(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let n = self.value(x).numel();
        if start + len > n {
            return Err(Error::Contract(format!("slice {start}..{} of {n} values", start + len)));
        }
        let data = self.value(x).data()[start..start + len].to_vec();
        self.push("slice", Tensor::new(&[1, len], data)?, Op::Slice { x, start }, &[x])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().fold(T::zero(), |a, &v| a + v);
        self.push("sum", Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let n = T::from_usize(xv.numel().max(1)).unwrap();
        let s = xv.data().iter().fold(T::zero(), |a, &v| a + v) / n;
        self.push("mean", Tensor::scalar(s), Op::Mean(x), &[x])
    }

    /// Mean softmax cross-entropy of `n×c` logits against class targets.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (n, c) = self.mat(logits)?;
        if targets.len() != n {
            return Err(Error::shape("cross_entropy", self.value(logits).shape(), &[targets.len()]));
        }
        let mut probs = Vec::with_capacity(n * c);
        let mut total = T::zero();
        for (row, &y) in self.value(logits).data().chunks(c).zip(targets) {
            if y >= c {
                return Err(Error::Contract(format!("target class {y} with {c} logits")));
            }
            let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
            let z = row.iter().fold(T::zero(), |s, &v| s + (v - max).exp());
            let lse = max + z.ln();
            total = total + (lse - row[y]);
            probs.extend(row.iter().map(|&v| (v - max).exp() / z));
        }
        let loss = total / T::from_usize(n.max(1)).unwrap();
        self.push(
            "cross_entropy",
            Tensor::scalar(loss),
            Op::CrossEntropy { logits, targets: targets.to_vec(), probs },
            &[logits],
        )
    }

    /// Mean squared error against a constant target of the same size.
    pub fn mse(&mut self, pred: Var, target: &[T]) -> Result<Var> {
        let pv = self.value(pred);
        if pv.numel() != target.len() {
            return Err(Error::shape("mse", pv.shape(), &[target.len()]));
        }
        let n = T::from_usize(target.len().max(1)).unwrap();
        let s = pv.data().iter().zip(target).fold(T::zero(), |a, (&p, &t)| a + (p - t) * (p - t));
        self.push("mse", Tensor::scalar(s / n), Op::Mse { pred, target: target.to_vec() }, &[pred])
    }

    /// Codebook composition: `codebook` is `[K, r, t]`, `weights` is
    /// `[positions, K, r]`; the result is `positions × (K·t)`.
    pub fn compose(&mut self, codebook: Var, weights: Var) -> Result<Var> {
        let (k, r, t) = match self.value(codebook).shape() {
            &[k, r, t] => (k, r, t),
            s => return Err(Error::Contract(format!("codebook must be [K, r, t], got {s:?}"))),
        };
        let positions = match self.value(weights).shape() {
            &[p, k2, r2] if k2 == k && r2 == r => p,
            s => return Err(Error::Contract(format!("weights {s:?} do not match codebook K={k}, r={r}"))),
        };
        let out = compose_raw(self.value(codebook).data(), self.value(weights).data(), positions, k, r, t);
        self.push(
            "compose",
            Tensor::new(&[positions, k * t], out)?,
            Op::Compose { codebook, weights },
            &[codebook, weights],
        )
    }

    /// Propagates `d loss` back through the graph. The loss must hold a
    /// single value. Only trainable leaves appear in the result.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        let mut out = BTreeMap::new();

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            match &node.op {
                Op::Leaf => {
                    if node.role == Role::Trainable {
                        out.insert(Var(idx), Tensor::new(node.value.shape(), g)?);
                    }
                }
                op => self.backprop(op, &node.value, &g, &mut grads)?,
            }
        }
        Ok(Gradients { grads: out })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<T>>], v: Var, delta: Vec<T>) {
        if !self.needs(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => {
                for (a, d) in acc.iter_mut().zip(delta) {
                    *a = *a + d;
                }
            }
            slot @ None => *slot = Some(delta),
        }
    }

    fn backprop(&self, op: &Op<T>, out: &Tensor<T>, g: &[T], grads: &mut [Option<Vec<T>>]) -> Result<()> {
        match op {
            Op::Leaf => {}
            &Op::MatMul(a, b) => {
                let (p, q) = self.mat(a)?;
                let (_, s) = self.mat(b)?;
                if self.needs(a) {
                    let da = mm_nt(g, self.value(b).data(), p, s, q);
                    self.accumulate(grads, a, da);
                }
                if self.needs(b) {
                    let db = mm_tn(self.value(a).data(), g, p, q, s);
                    self.accumulate(grads, b, db);
                }
            }
            &Op::MatMulNT(a, b) => {
                let (p, q) = self.mat(a)?;
                let (s, _) = self.mat(b)?;
                if self.needs(a) {
                    let da = mm(g, self.value(b).data(), p, s, q);
                    self.accumulate(grads, a, da);
                }
                if self.needs(b) {
                    let db = mm_tn(g, self.value(a).data(), p, s, q);
                    self.accumulate(grads, b, db);
                }
            }
            &Op::Add(a, b) => {
                self.accumulate(grads, a, g.to_vec());
                self.accumulate(grads, b, g.to_vec());
            }
            &Op::Sub(a, b) => {
                self.accumulate(grads, a, g.to_vec());
                self.accumulate(grads, b, g.iter().map(|&v| -v).collect());
            }
            &Op::Mul(a, b) => {
                let av = self.value(a).data();
                let bv = self.value(b).data();
                if self.needs(a) {
                    self.accumulate(grads, a, g.iter().zip(bv).map(|(&gi, &y)| gi * y).collect());
                }
                if self.needs(b) {
                    self.accumulate(grads, b, g.iter().zip(av).map(|(&gi, &x)| gi * x).collect());
                }
            }
            &Op::AddRow(x, bias) => {
                self.accumulate(grads, x, g.to_vec());
                if self.needs(bias) {
                    let c = self.value(bias).numel();
                    let mut db = vec![T::zero(); c];
                    for row in g.chunks(c) {
                        for (d, &v) in db.iter_mut().zip(row) {
                            *d = *d + v;
                        }
                    }
                    self.accumulate(grads, bias, db);
                }
            }
            &Op::Scale(x, f) => {
                self.accumulate(grads, x, g.iter().map(|&v| v * f).collect());
            }
            &Op::Softmax(x) => {
                let (_, c) = self.mat(x)?;
                let mut dx = Vec::with_capacity(g.len());
                for (y, gr) in out.data().chunks(c).zip(g.chunks(c)) {
                    let s = dot(y, gr);
                    dx.extend(y.iter().zip(gr).map(|(&yi, &gi)| yi * (gi - s)));
                }
                self.accumulate(grads, x, dx);
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let (_, c) = self.mat(*x)?;
                let gam = self.value(*gamma).data();
                if self.needs(*gamma) {
                    let mut dg = vec![T::zero(); c];
                    for (h, gr) in xhat.chunks(c).zip(g.chunks(c)) {
                        for j in 0..c {
                            dg[j] = dg[j] + gr[j] * h[j];
                        }
                    }
                    self.accumulate(grads, *gamma, dg);
                }
                if self.needs(*beta) {
                    let mut db = vec![T::zero(); c];
                    for gr in g.chunks(c) {
                        for j in 0..c {
                            db[j] = db[j] + gr[j];
                        }
                    }
                    self.accumulate(grads, *beta, db);
                }
                if self.needs(*x) {
                    let cn = T::from_usize(c).unwrap();
                    let mut dx = Vec::with_capacity(g.len());
                    for ((h, gr), &rs) in xhat.chunks(c).zip(g.chunks(c)).zip(rstd) {
                        let dh: Vec<T> = gr.iter().zip(gam).map(|(&a, &b)| a * b).collect();
                        let sum_dh = dh.iter().fold(T::zero(), |s, &v| s + v);
                        let sum_dh_h = dot(&dh, h);
                        dx.extend(dh.iter().zip(h).map(|(&d, &hh)| rs / cn * (cn * d - sum_dh - hh * sum_dh_h)));
                    }
                    self.accumulate(grads, *x, dx);
                }
            }
            &Op::Gelu(x) => {
                let c = T::from_f64_lossy(GELU_C);
                let a = T::from_f64_lossy(GELU_A);
                let three_a = T::from_f64_lossy(3.0 * GELU_A);
                let half = T::from_f64_lossy(0.5);
                let dx = self
                    .value(x)
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(&v, &gi)| {
                        let th = (c * (v + a * v * v * v)).tanh();
                        let d =
                            half * (T::one() + th) + half * v * (T::one() - th * th) * c * (T::one() + three_a * v * v);
                        gi * d
                    })
                    .collect();
                self.accumulate(grads, x, dx);
            }
            &Op::Relu(x) => {
                let dx = self
                    .value(x)
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(&v, &gi)| if v > T::zero() { gi } else { T::zero() })
                    .collect();
                self.accumulate(grads, x, dx);
            }
            Op::Gather { table, ids } => {
                if self.needs(*table) {
                    let tv = self.value(*table);
                    let (_, c) = tv.dims2()?;
                    let mut dt = vec![T::zero(); tv.numel()];
                    for (row, &id) in g.chunks(c).zip(ids) {
                        for (d, &v) in dt[id * c..(id + 1) * c].iter_mut().zip(row) {
                            *d = *d + v;
                        }
                    }
                    self.accumulate(grads, *table, dt);
                }
            }
            &Op::ConcatRows(a, b) => {
                let na = self.value(a).numel();
                self.accumulate(grads, a, g[..na].to_vec());
                self.accumulate(grads, b, g[na..].to_vec());
            }
            &Op::Slice { x, start } => {
                if self.needs(x) {
                    let mut dx = vec![T::zero(); self.value(x).numel()];
                    dx[start..start + g.len()].copy_from_slice(g);
                    self.accumulate(grads, x, dx);
                }
            }
            &Op::Sum(x) => {
                self.accumulate(grads, x, vec![g[0]; self.value(x).numel()]);
            }
            &Op::Mean(x) => {
                let n = self.value(x).numel();
                let v = g[0] / T::from_usize(n.max(1)).unwrap();
                self.accumulate(grads, x, vec![v; n]);
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let (n, c) = self.mat(*logits)?;
                let scale = g[0] / T::from_usize(n.max(1)).unwrap();
                let mut dl: Vec<T> = probs.iter().map(|&p| p * scale).collect();
                for (i, &y) in targets.iter().enumerate() {
                    dl[i * c + y] = dl[i * c + y] - scale;
                }
                self.accumulate(grads, *logits, dl);
            }
            Op::Mse { pred, target } => {
                let n = T::from_usize(target.len().max(1)).unwrap();
                let two = T::from_f64_lossy(2.0);
                let dp = self.value(*pred).data().iter().zip(target).map(|(&p, &t)| two * (p - t) / n * g[0]).collect();
                self.accumulate(grads, *pred, dp);
            }
            &Op::Compose { codebook, weights } => {
                let (k, r, t) = match self.value(codebook).shape() {
                    &[k, r, t] => (k, r, t),
                    _ => unreachable!("checked at construction"),
                };
                let positions = self.value(weights).shape()[0];
                let (dc, dw) = compose_backward_raw(
                    self.value(codebook).data(),
                    self.value(weights).data(),
                    g,
                    positions,
                    k,
                    r,
                    t,
                );
                self.accumulate(grads, codebook, dc);
                self.accumulate(grads, weights, dw);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gives_all_ones() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::from_f64(&[3], &[1.0, -2.0, 5.0]).unwrap());
        let s = g.sum(x).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn sum_of_squares_gives_twice_x() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::from_f64(&[3], &[1.0, 2.0, 3.0]).unwrap());
        let sq = g.mul(x, x).unwrap();
        let s = g.sum(sq).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn frozen_leaf_absent_from_gradients() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::from_f64(&[2], &[1.0, 2.0]).unwrap());
        let w = g.param(Tensor::from_f64(&[2], &[3.0, 4.0]).unwrap());
        let p = g.mul(x, w).unwrap();
        let s = g.sum(p).unwrap();
        let grads = g.backward(s).unwrap();
        assert!(!grads.contains(x));
        assert_eq!(grads.get(w).unwrap().data(), &[1.0, 2.0]);
        assert_eq!(grads.len(), 1);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::zeros(&[2, 2]));
        assert!(matches!(g.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn non_finite_forward_is_an_error() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::from_f64(&[1], &[f64::MAX]).unwrap());
        let err = g.scale(x, 10.0).unwrap_err();
        assert!(matches!(err, Error::NonFinite(_)));
    }

    #[test]
    fn gather_rejects_out_of_vocab() {
        let mut g = Graph::<f64>::new();
        let t = g.constant(Tensor::zeros(&[4, 2]));
        assert!(matches!(g.gather(t, &[4]), Err(Error::Vocab { id: 4, vocab: 4 })));
    }

    #[test]
    fn matmul_shape_error() {
        let mut g = Graph::<f64>::new();
        let a = g.param(Tensor::zeros(&[2, 3]));
        let b = g.param(Tensor::zeros(&[2, 3]));
        assert!(matches!(g.matmul(a, b), Err(Error::Shape { .. })));
    }

    #[test]
    fn add_row_rejects_other_broadcasts() {
        let mut g = Graph::<f64>::new();
        let a = g.param(Tensor::zeros(&[2, 3]));
        let b = g.param(Tensor::zeros(&[2]));
        assert!(g.add_row(a, b).is_err());
    }

    #[test]
    fn cross_entropy_of_uniform_logits_is_log_c() {
        let mut g = Graph::<f64>::new();
        let l = g.param(Tensor::zeros(&[1, 4]));
        let loss = g.cross_entropy(l, &[2]).unwrap();
        assert!((g.value(loss).data()[0] - 4f64.ln()).abs() < 1e-15);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(l).unwrap().data(), &[0.25, 0.25, -0.75, 0.25]);
    }
}
