//! Reverse-mode differentiation over a linear tape of coarse operations.
//!
//! Leaves are either trainable parameters (registered by name) or
//! constants. Constants never receive a gradient, which is how the frozen
//! encoder stays frozen: its weights enter the tape as borrowed constants.

use std::borrow::Cow;
use std::collections::BTreeMap;

use super::tensor::{matmul_at_into, matmul_bt_into, matmul_into};
use super::{loss, Scalar, Tensor};
use crate::error::{contract, Error, Result};

pub type ParamName = &'static str;

/// Accumulated gradient per trainable parameter.
pub type GradMap<S> = BTreeMap<ParamName, Tensor<S>>;

/// Named parameter storage the optimizer and gradient checker can walk.
pub trait ParamAccess<S> {
    fn param_names(&self) -> Vec<ParamName>;
    fn param(&self, name: ParamName) -> Option<&Tensor<S>>;
    fn param_mut(&mut self, name: ParamName) -> Option<&mut Tensor<S>>;
}

impl<S> ParamAccess<S> for BTreeMap<ParamName, Tensor<S>> {
    fn param_names(&self) -> Vec<ParamName> {
        self.keys().copied().collect()
    }

    fn param(&self, name: ParamName) -> Option<&Tensor<S>> {
        self.get(name)
    }

    fn param_mut(&mut self, name: ParamName) -> Option<&mut Tensor<S>> {
        self.get_mut(name)
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Op<S> {
    Leaf,
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, S),
    AddScalar(Var),
    Sum(Var),
    Mean(Var),
    Tanh(Var),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<S>,
        rstd: Vec<S>,
    },
    Attention {
        qkv: Var,
        heads: usize,
        probs: Vec<S>,
    },
    ConcatRows(Var, Var),
    SliceRows {
        x: Var,
        start: usize,
    },
    GatherPairs {
        x: Var,
        pairs: Vec<(usize, usize)>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<S>,
    },
    SoftCrossEntropy {
        logits: Var,
        teacher: Vec<S>,
        width: usize,
        temperature: S,
        probs: Vec<S>,
    },
    CosineRows(Var, Var),
}

struct Node<'a, S: Scalar> {
    value: Cow<'a, Tensor<S>>,
    op: Op<S>,
    needs_grad: bool,
    param: Option<ParamName>,
}

/// Single-threaded recording of one forward pass.
pub struct Tape<'a, S: Scalar> {
    nodes: Vec<Node<'a, S>>,
}

impl<S: Scalar> Default for Tape<'_, S> {
    fn default() -> Self {
        Self::new()
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;
const LN_EPS: f64 = 1e-5;

impl<'a, S: Scalar> Tape<'a, S> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
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

    /// Scalar value of a one-element node.
    pub fn scalar(&self, v: Var) -> S {
        self.value(v).data()[0]
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Cow<'a, Tensor<S>>, op: Op<S>, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_owned(&mut self, value: Tensor<S>, op: Op<S>, inputs: &[Var]) -> Var {
        self.push(Cow::Owned(value), op, inputs)
    }

    /// Trainable leaf; its gradient is reported under `name`.
    pub fn param(&mut self, name: ParamName, value: &'a Tensor<S>) -> Var {
        self.nodes.push(Node {
            value: Cow::Borrowed(value),
            op: Op::Leaf,
            needs_grad: true,
            param: Some(name),
        });
        Var(self.nodes.len() - 1)
    }

    /// Non-trainable leaf borrowed from the caller.
    pub fn constant(&mut self, value: &'a Tensor<S>) -> Var {
        self.push(Cow::Borrowed(value), Op::Leaf, &[])
    }

    pub fn constant_owned(&mut self, value: Tensor<S>) -> Var {
        self.push_owned(value, Op::Leaf, &[])
    }

    fn dims(&self, v: Var) -> (usize, usize) {
        let t = self.value(v);
        (t.rows(), t.cols())
    }

    fn check_same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(contract!(
                "{what}: shapes {:?} and {:?} differ",
                self.value(a).shape(),
                self.value(b).shape()
            ));
        }
        Ok(())
    }

    /// `a (n×k) · b (k×m)`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, k) = self.dims(a);
        let (k2, m) = self.dims(b);
        if k != k2 {
            return Err(contract!("matmul inner dims {k} vs {k2}"));
        }
        let mut out = vec![S::zero(); n * m];
        matmul_into(self.value(a).data(), self.value(b).data(), &mut out, n, k, m);
        let t = Tensor::matrix(n, m, out)?;
        Ok(self.push_owned(t, Op::MatMul(a, b), &[a, b]))
    }

    /// `a (n×k) · bᵀ` with `b` of shape `m×k`.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, k) = self.dims(a);
        let (m, k2) = self.dims(b);
        if k != k2 {
            return Err(contract!("matmul_bt inner dims {k} vs {k2}"));
        }
        let mut out = vec![S::zero(); n * m];
        matmul_bt_into(self.value(a).data(), self.value(b).data(), &mut out, n, k, m);
        let t = Tensor::matrix(n, m, out)?;
        Ok(self.push_owned(t, Op::MatMulBt(a, b), &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same_shape(a, b, "add")?;
        let mut t = self.value(a).clone();
        t.add_assign(self.value(b))?;
        Ok(self.push_owned(t, Op::Add(a, b), &[a, b]))
    }

    /// Adds the vector `b` to every row of `a`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let (_, c) = self.dims(a);
        if self.value(b).len() != c {
            return Err(contract!(
                "row broadcast of length {} onto {c} columns",
                self.value(b).len()
            ));
        }
        let mut t = self.value(a).clone();
        let bias = self.value(b).data();
        for row in t.data_mut().chunks_mut(c) {
            for (x, &bv) in row.iter_mut().zip(bias) {
                *x = *x + bv;
            }
        }
        Ok(self.push_owned(t, Op::AddRow(a, b), &[a, b]))
    }

    /// `x · w + b` for a weight matrix `w` and bias vector `b`.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add_row(y, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same_shape(a, b, "mul")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x * y)
            .collect();
        let t = Tensor::new(self.value(a).shape().to_vec(), data)?;
        Ok(self.push_owned(t, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, factor: S) -> Var {
        let t = self.value(a).map(|v| v * factor);
        self.push_owned(t, Op::Scale(a, factor), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, c: S) -> Var {
        let t = self.value(a).map(|v| v + c);
        self.push_owned(t, Op::AddScalar(a), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s: S = self.value(a).data().iter().copied().sum();
        self.push_owned(Tensor::scalar(s), Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = S::lit(self.value(a).len() as f64);
        let s: S = self.value(a).data().iter().copied().sum();
        self.push_owned(Tensor::scalar(s / n), Op::Mean(a), &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let t = self.value(a).map(S::tanh);
        self.push_owned(t, Op::Tanh(a), &[a])
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let (c, k, half) = (S::lit(GELU_C), S::lit(GELU_K), S::lit(0.5));
        let t = self
            .value(a)
            .map(|x| half * x * (S::one() + (c * (x + k * x * x * x)).tanh()));
        self.push_owned(t, Op::Gelu(a), &[a])
    }

    /// Row-wise layer normalisation with affine gain and bias.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (n, c) = self.dims(x);
        if self.value(gamma).len() != c || self.value(beta).len() != c {
            return Err(contract!("layer norm parameters must have length {c}"));
        }
        let eps = S::lit(LN_EPS);
        let cs = S::lit(c as f64);
        let mut xhat = Vec::with_capacity(n * c);
        let mut rstd = Vec::with_capacity(n);
        let mut out = Vec::with_capacity(n * c);
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        for row in self.value(x).data().chunks(c) {
            let mean = row.iter().copied().sum::<S>() / cs;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() / cs;
            let r = S::one() / (var + eps).sqrt();
            rstd.push(r);
            for (j, &v) in row.iter().enumerate() {
                let h = (v - mean) * r;
                xhat.push(h);
                out.push(h * g[j] + b[j]);
            }
        }
        let t = Tensor::matrix(n, c, out)?;
        Ok(self.push_owned(
            t,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            &[x, gamma, beta],
        ))
    }

    /// Multi-head bidirectional self-attention over packed `[q | k | v]` rows.
    pub fn attention(&mut self, qkv: Var, heads: usize) -> Result<Var> {
        let (n, w) = self.dims(qkv);
        if heads == 0 || w % (3 * heads) != 0 {
            return Err(contract!("attention width {w} not divisible into {heads} heads"));
        }
        let e = w / 3;
        let dh = e / heads;
        let scale = S::one() / S::lit(dh as f64).sqrt();
        let src = self.value(qkv).data();
        let mut probs = vec![S::zero(); heads * n * n];
        let mut out = vec![S::zero(); n * e];
        for h in 0..heads {
            let (qo, ko, vo) = (h * dh, e + h * dh, 2 * e + h * dh);
            let p = &mut probs[h * n * n..(h + 1) * n * n];
            for i in 0..n {
                let q = &src[i * w + qo..i * w + qo + dh];
                let row = &mut p[i * n..(i + 1) * n];
                for (j, s) in row.iter_mut().enumerate() {
                    let k = &src[j * w + ko..j * w + ko + dh];
                    *s = q.iter().zip(k).map(|(&a, &b)| a * b).sum::<S>() * scale;
                }
                let soft = loss::softmax(row);
                row.copy_from_slice(&soft);
                let o = &mut out[i * e + h * dh..i * e + (h + 1) * dh];
                for (j, &pj) in row.iter().enumerate() {
                    let v = &src[j * w + vo..j * w + vo + dh];
                    for (ov, &vv) in o.iter_mut().zip(v) {
                        *ov = *ov + pj * vv;
                    }
                }
            }
        }
        let t = Tensor::matrix(n, e, out)?;
        Ok(self.push_owned(t, Op::Attention { qkv, heads, probs }, &[qkv]))
    }

    pub fn concat_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let (na, ca) = self.dims(a);
        let (nb, cb) = self.dims(b);
        if ca != cb {
            return Err(contract!("concat rows with widths {ca} and {cb}"));
        }
        let mut data = self.value(a).data().to_vec();
        data.extend_from_slice(self.value(b).data());
        let t = Tensor::matrix(na + nb, ca, data)?;
        Ok(self.push_owned(t, Op::ConcatRows(a, b), &[a, b]))
    }

    /// Rows `start..end` of a matrix.
    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (n, c) = self.dims(x);
        if start > end || end > n {
            return Err(contract!("row slice {start}..{end} of {n} rows"));
        }
        let data = self.value(x).data()[start * c..end * c].to_vec();
        let t = Tensor::matrix(end - start, c, data)?;
        Ok(self.push_owned(t, Op::SliceRows { x, start }, &[x]))
    }

    /// Row `r` of the result is `[x[i_r]; x[j_r]]`.
    pub fn gather_pairs(&mut self, x: Var, pairs: &[(usize, usize)]) -> Result<Var> {
        let (n, c) = self.dims(x);
        let mut data = Vec::with_capacity(pairs.len() * 2 * c);
        for &(i, j) in pairs {
            if i >= n || j >= n {
                return Err(Error::Index(format!("pair ({i}, {j}) outside {n} rows")));
            }
            data.extend_from_slice(self.value(x).row(i));
            data.extend_from_slice(self.value(x).row(j));
        }
        let t = Tensor::matrix(pairs.len(), 2 * c, data)?;
        Ok(self.push_owned(
            t,
            Op::GatherPairs {
                x,
                pairs: pairs.to_vec(),
            },
            &[x],
        ))
    }

    /// Mean over rows of `-log softmax(row)[target]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (n, k) = self.dims(logits);
        if targets.len() != n || n == 0 {
            return Err(contract!("{} targets for {n} logit rows", targets.len()));
        }
        let mut probs = Vec::with_capacity(n * k);
        let mut total = S::zero();
        for (row, &t) in self.value(logits).data().chunks(k).zip(targets) {
            total = total + loss::cross_entropy(row, t)?;
            probs.extend(loss::softmax(row));
        }
        let value = Tensor::scalar(total / S::lit(n as f64));
        Ok(self.push_owned(
            value,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            &[logits],
        ))
    }

    /// Mean over rows of the soft cross-entropy `-Σ_k q_k log p_k`, where
    /// `q = softmax(teacher_row / T)` and `p = softmax(student_row[..K'] / T)`
    /// with `K'` the teacher width.
    pub fn soft_cross_entropy(
        &mut self,
        student: Var,
        teacher_logits: &Tensor<S>,
        temperature: S,
    ) -> Result<Var> {
        let (n, k) = self.dims(student);
        let (tn, width) = (teacher_logits.rows(), teacher_logits.cols());
        if tn != n || width > k || n == 0 {
            return Err(contract!(
                "teacher logits {:?} incompatible with student {:?}",
                teacher_logits.shape(),
                self.value(student).shape()
            ));
        }
        let mut teacher = Vec::with_capacity(n * width);
        let mut probs = Vec::with_capacity(n * width);
        let mut total = S::zero();
        for r in 0..n {
            let q = loss::softmax_temperature(teacher_logits.row(r), temperature)?;
            let srow = &self.value(student).row(r)[..width];
            let scaled: Vec<S> = srow.iter().map(|&v| v / temperature).collect();
            let logp = loss::log_softmax(&scaled);
            total = total - q.iter().zip(&logp).map(|(&a, &b)| a * b).sum::<S>();
            probs.extend(logp.iter().map(|v| v.exp()));
            teacher.extend(q);
        }
        let value = Tensor::scalar(total / S::lit(n as f64));
        Ok(self.push_owned(
            value,
            Op::SoftCrossEntropy {
                logits: student,
                teacher,
                width,
                temperature,
                probs,
            },
            &[student],
        ))
    }

    /// Cosine similarity of corresponding rows; output has one entry per row.
    pub fn cosine_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same_shape(a, b, "cosine_rows")?;
        let (n, c) = self.dims(a);
        let mut out = Vec::with_capacity(n);
        for r in 0..n {
            let ra = &self.value(a).data()[r * c..(r + 1) * c];
            let rb = &self.value(b).data()[r * c..(r + 1) * c];
            out.push(loss::cosine_similarity(ra, rb)?);
        }
        Ok(self.push_owned(Tensor::vector(out), Op::CosineRows(a, b), &[a, b]))
    }

    /// Reverse sweep from a scalar `loss`; returns gradients for every
    /// trainable leaf the loss depends on.
    pub fn backward(&self, loss: Var) -> Result<GradMap<S>> {
        if self.value(loss).len() != 1 {
            return Err(contract!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            ));
        }
        if !self.value(loss).is_finite() {
            return Err(Error::Numerical("non-finite loss".into()));
        }
        let mut grads: Vec<Option<Vec<S>>> = Vec::with_capacity(loss.0 + 1);
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![S::one()]);
        let mut out = GradMap::new();
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            if let Some(name) = node.param {
                let t = Tensor::new(node.value.shape().to_vec(), g)?;
                match out.get_mut(name) {
                    Some(acc) => acc.add_assign(&t)?,
                    None => {
                        out.insert(name, t);
                    }
                }
                continue;
            }
            self.backprop_node(idx, &g, &mut grads);
        }
        Ok(out)
    }

    fn grad_buf<'g>(&self, grads: &'g mut [Option<Vec<S>>], v: Var) -> Option<&'g mut Vec<S>> {
        if !self.nodes[v.0].needs_grad {
            return None;
        }
        let len = self.nodes[v.0].value.len();
        Some(grads[v.0].get_or_insert_with(|| vec![S::zero(); len]))
    }

    fn backprop_node(&self, idx: usize, g: &[S], grads: &mut [Option<Vec<S>>]) {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (n, k) = self.dims(*a);
                let m = self.dims(*b).1;
                if let Some(ga) = self.grad_buf(grads, *a) {
                    matmul_bt_into(g, self.value(*b).data(), ga, n, m, k);
                }
                if let Some(gb) = self.grad_buf(grads, *b) {
                    matmul_at_into(self.value(*a).data(), g, gb, n, k, m);
                }
            }
            Op::MatMulBt(a, b) => {
                let (n, k) = self.dims(*a);
                let m = self.dims(*b).0;
                if let Some(ga) = self.grad_buf(grads, *a) {
                    matmul_into(g, self.value(*b).data(), ga, n, m, k);
                }
                if let Some(gb) = self.grad_buf(grads, *b) {
                    matmul_at_into(g, self.value(*a).data(), gb, n, m, k);
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(gv) = self.grad_buf(grads, v) {
                        add_into(gv, g);
                    }
                }
            }
            Op::AddRow(a, b) => {
                if let Some(ga) = self.grad_buf(grads, *a) {
                    add_into(ga, g);
                }
                let c = self.dims(*a).1;
                if let Some(gb) = self.grad_buf(grads, *b) {
                    for row in g.chunks(c) {
                        add_into(gb, row);
                    }
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if let Some(ga) = self.grad_buf(grads, *a) {
                    for ((x, &gy), &y) in ga.iter_mut().zip(g).zip(bv) {
                        *x = *x + gy * y;
                    }
                }
                if let Some(gb) = self.grad_buf(grads, *b) {
                    for ((x, &gy), &y) in gb.iter_mut().zip(g).zip(av) {
                        *x = *x + gy * y;
                    }
                }
            }
            Op::Scale(a, f) => {
                if let Some(ga) = self.grad_buf(grads, *a) {
                    for (x, &gy) in ga.iter_mut().zip(g) {
                        *x = *x + gy * *f;
                    }
                }
            }
            Op::AddScalar(a) => {
                if let Some(ga) = self.grad_buf(grads, *a) {
                    add_into(ga, g);
                }
            }
            Op::Sum(a) => {
                if let Some(ga) = self.grad_buf(grads, *a) {
                    for x in ga.iter_mut() {
                        *x = *x + g[0];
                    }
                }
            }
            Op::Mean(a) => {
                let n = S::lit(self.value(*a).len() as f64);
                if let Some(ga) = self.grad_buf(grads, *a) {
                    for x in ga.iter_mut() {
                        *x = *x + g[0] / n;
                    }
                }
            }
            Op::Tanh(a) => {
                let y = node.value.data();
                if let Some(ga) = self.grad_buf(grads, *a) {
                    for ((x, &gy), &yv) in ga.iter_mut().zip(g).zip(y) {
                        *x = *x + gy * (S::one() - yv * yv);
                    }
                }
            }
            Op::Gelu(a) => {
                let (c, k, half) = (S::lit(GELU_C), S::lit(GELU_K), S::lit(0.5));
                let three = S::lit(3.0);
                let xs = self.value(*a).data();
                if let Some(ga) = self.grad_buf(grads, *a) {
                    for ((acc, &gy), &x) in ga.iter_mut().zip(g).zip(xs) {
                        let t = (c * (x + k * x * x * x)).tanh();
                        let d = half * (S::one() + t)
                            + half * x * (S::one() - t * t) * c * (S::one() + three * k * x * x);
                        *acc = *acc + gy * d;
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
                let c = self.dims(*x).1;
                let cs = S::lit(c as f64);
                let gam = self.value(*gamma).data();
                if let Some(gx) = self.grad_buf(grads, *x) {
                    for (r, rs) in rstd.iter().enumerate() {
                        let gy = &g[r * c..(r + 1) * c];
                        let xh = &xhat[r * c..(r + 1) * c];
                        let mut mean_d = S::zero();
                        let mut mean_dx = S::zero();
                        for j in 0..c {
                            let d = gy[j] * gam[j];
                            mean_d = mean_d + d;
                            mean_dx = mean_dx + d * xh[j];
                        }
                        mean_d = mean_d / cs;
                        mean_dx = mean_dx / cs;
                        let out = &mut gx[r * c..(r + 1) * c];
                        for j in 0..c {
                            let d = gy[j] * gam[j];
                            out[j] = out[j] + *rs * (d - mean_d - xh[j] * mean_dx);
                        }
                    }
                }
                if let Some(gg) = self.grad_buf(grads, *gamma) {
                    for (gy, xh) in g.chunks(c).zip(xhat.chunks(c)) {
                        for j in 0..c {
                            gg[j] = gg[j] + gy[j] * xh[j];
                        }
                    }
                }
                if let Some(gb) = self.grad_buf(grads, *beta) {
                    for gy in g.chunks(c) {
                        add_into(gb, gy);
                    }
                }
            }
            Op::Attention { qkv, heads, probs } => {
                let (n, w) = self.dims(*qkv);
                let e = w / 3;
                let dh = e / heads;
                let scale = S::one() / S::lit(dh as f64).sqrt();
                let src = self.value(*qkv).data();
                let Some(gq) = self.grad_buf(grads, *qkv) else { return };
                let mut dp = vec![S::zero(); n];
                for h in 0..*heads {
                    let (qo, ko, vo) = (h * dh, e + h * dh, 2 * e + h * dh);
                    let p = &probs[h * n * n..(h + 1) * n * n];
                    for i in 0..n {
                        let go = &g[i * e + h * dh..i * e + (h + 1) * dh];
                        let prow = &p[i * n..(i + 1) * n];
                        // dV and dP
                        for j in 0..n {
                            let v = &src[j * w + vo..j * w + vo + dh];
                            dp[j] = go.iter().zip(v).map(|(&a, &b)| a * b).sum();
                            let gv = &mut gq[j * w + vo..j * w + vo + dh];
                            for (x, &gov) in gv.iter_mut().zip(go) {
                                *x = *x + prow[j] * gov;
                            }
                        }
                        let dot: S = dp.iter().zip(prow).map(|(&a, &b)| a * b).sum();
                        for j in 0..n {
                            let ds = prow[j] * (dp[j] - dot) * scale;
                            if ds == S::zero() {
                                continue;
                            }
                            for t in 0..dh {
                                let kv = src[j * w + ko + t];
                                let qv = src[i * w + qo + t];
                                gq[i * w + qo + t] = gq[i * w + qo + t] + ds * kv;
                                gq[j * w + ko + t] = gq[j * w + ko + t] + ds * qv;
                            }
                        }
                    }
                }
            }
            Op::ConcatRows(a, b) => {
                let split = self.value(*a).len();
                if let Some(ga) = self.grad_buf(grads, *a) {
                    add_into(ga, &g[..split]);
                }
                if let Some(gb) = self.grad_buf(grads, *b) {
                    add_into(gb, &g[split..]);
                }
            }
            Op::SliceRows { x, start } => {
                let c = self.dims(*x).1;
                if let Some(gx) = self.grad_buf(grads, *x) {
                    add_into(&mut gx[start * c..start * c + g.len()], g);
                }
            }
            Op::GatherPairs { x, pairs } => {
                let c = self.dims(*x).1;
                if let Some(gx) = self.grad_buf(grads, *x) {
                    for (r, &(i, j)) in pairs.iter().enumerate() {
                        let row = &g[r * 2 * c..(r + 1) * 2 * c];
                        add_into(&mut gx[i * c..(i + 1) * c], &row[..c]);
                        add_into(&mut gx[j * c..(j + 1) * c], &row[c..]);
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let (n, k) = self.dims(*logits);
                let w = g[0] / S::lit(n as f64);
                if let Some(gl) = self.grad_buf(grads, *logits) {
                    for (r, &t) in targets.iter().enumerate() {
                        for j in 0..k {
                            let mut d = probs[r * k + j];
                            if j == t {
                                d = d - S::one();
                            }
                            gl[r * k + j] = gl[r * k + j] + w * d;
                        }
                    }
                }
            }
            Op::SoftCrossEntropy {
                logits,
                teacher,
                width,
                temperature,
                probs,
            } => {
                let (n, k) = self.dims(*logits);
                let w = g[0] / (S::lit(n as f64) * *temperature);
                if let Some(gl) = self.grad_buf(grads, *logits) {
                    for r in 0..n {
                        let q = &teacher[r * width..(r + 1) * width];
                        let p = &probs[r * width..(r + 1) * width];
                        let mass: S = q.iter().copied().sum();
                        for j in 0..*width {
                            gl[r * k + j] = gl[r * k + j] + w * (mass * p[j] - q[j]);
                        }
                    }
                }
            }
            Op::CosineRows(a, b) => {
                let c = self.dims(*a).1;
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                let cosines = node.value.data();
                for (target, other, own) in [(*a, bv, av), (*b, av, bv)] {
                    if let Some(gt) = self.grad_buf(grads, target) {
                        for (r, &gy) in g.iter().enumerate() {
                            let x = &own[r * c..(r + 1) * c];
                            let y = &other[r * c..(r + 1) * c];
                            let nx = x.iter().map(|&v| v * v).sum::<S>().sqrt();
                            let ny = y.iter().map(|&v| v * v).sum::<S>().sqrt();
                            let cos = cosines[r];
                            for j in 0..c {
                                let d = y[j] / (nx * ny) - cos * x[j] / (nx * nx);
                                gt[r * c + j] = gt[r * c + j] + gy * d;
                            }
                        }
                    }
                }
            }
        }
    }
}

fn add_into<S: Scalar>(acc: &mut [S], g: &[S]) {
    for (a, &b) in acc.iter_mut().zip(g) {
        *a = *a + b;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn constants_receive_no_gradient() {
        let w = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let frozen = t(&[2, 2], &[0.5, -1.0, 0.25, 2.0]);
        let mut tape = Tape::new();
        let wv = tape.param("w", &w);
        let fv = tape.constant(&frozen);
        let y = tape.matmul(wv, fv).unwrap();
        let s = tape.sum(y);
        let grads = tape.backward(s).unwrap();
        assert_eq!(grads.keys().copied().collect::<Vec<_>>(), vec!["w"]);
        assert_eq!(grads["w"].shape(), &[2, 2]);
    }

    #[test]
    fn backward_requires_scalar() {
        let w = t(&[2], &[1.0, 2.0]);
        let mut tape = Tape::new();
        let v = tape.param("w", &w);
        assert!(tape.backward(v).is_err());
    }

    #[test]
    fn shared_parameter_accumulates() {
        let w = t(&[1], &[3.0]);
        let mut tape = Tape::new();
        let a = tape.param("w", &w);
        let b = tape.param("w", &w);
        let y = tape.mul(a, b).unwrap();
        let grads = tape.backward(y).unwrap();
        assert_eq!(grads["w"].data(), &[6.0]);
    }

    #[test]
    fn cross_entropy_gradient_is_softmax_minus_onehot() {
        let z = t(&[1, 3], &[1.0, 2.0, 0.5]);
        let mut tape = Tape::new();
        let v = tape.param("z", &z);
        let l = tape.cross_entropy(v, &[1]).unwrap();
        let g = tape.backward(l).unwrap();
        let p = loss::softmax(z.data());
        assert!((g["z"].data()[1] - (p[1] - 1.0)).abs() < 1e-15);
        assert!((g["z"].data()[0] - p[0]).abs() < 1e-15);
    }
}
