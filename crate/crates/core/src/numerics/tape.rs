//! Reverse-mode differentiation over dense arrays.
//!
//! A [`Tape`] records every primitive as it executes. Node indices grow
//! monotonically, so walking the node list backwards is a valid reverse
//! topological order; gradients are accumulated in that fixed order, which
//! makes a backward pass bitwise reproducible.
//!
//! Parameters enter the tape by reference ([`Tape::param`]) so a forward pass
//! never copies weights.

use std::borrow::Cow;
use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::numerics::scalar::{gemm, Scalar, Strided};
use crate::numerics::tensor::Tensor;

/// Index into a parameter store.
pub type ParamId = usize;

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Gather index that produces an exact zero instead of reading the source.
pub const ZERO_SLOT: usize = usize::MAX;

/// Bucket for the multiply-add counter.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum FlopScope {
    Transformer,
    Shuffle,
    Head,
    Other,
}

impl FlopScope {
    const COUNT: usize = 4;

    fn slot(self) -> usize {
        self as usize
    }
}

enum Op<T> {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddRow(Var, Var),
    Gelu(Var),
    RmsNorm { x: Var, gain: Var, inv_rms: Vec<T> },
    SoftmaxRows(Var),
    LogSumExpRows(Var),
    Gather { src: Var, index: Vec<usize> },
    Reshape(Var),
    Concat(Vec<Var>),
    Attention(Box<AttentionSaved<T>>),
    Rope { x: Var, heads: usize, cos: Vec<T>, sin: Vec<T> },
    Sum(Var),
    Dot(Var, Vec<T>),
}

struct AttentionSaved<T> {
    q: Var,
    k: Var,
    v: Var,
    heads: usize,
    /// `[heads, T, S]` attention probabilities.
    probs: Vec<T>,
}

struct Node<'p, T: Scalar> {
    value: Cow<'p, Tensor<T>>,
    op: Op<T>,
}

/// Gradients of registered parameters after one backward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<T> {
    map: BTreeMap<ParamId, Tensor<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.map.get(&id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor<T>)> {
        self.map.iter().map(|(&k, v)| (k, v))
    }

    pub fn into_map(self) -> BTreeMap<ParamId, Tensor<T>> {
        self.map
    }
}

/// Record of executed primitives.
pub struct Tape<'p, T: Scalar> {
    nodes: Vec<Node<'p, T>>,
    flops: [u64; FlopScope::COUNT],
    scope: FlopScope,
}

impl<T: Scalar> Default for Tape<'_, T> {
    fn default() -> Self {
        Self::new()
    }
}

fn dim_err(op: &'static str, a: &Tensor<impl Scalar>, b: &Tensor<impl Scalar>) -> Error {
    Error::Dimension {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

fn gelu_scalar<T: Scalar>(x: T) -> (T, T) {
    let c = T::lit((2.0 / std::f64::consts::PI).sqrt());
    let a = T::lit(0.044715);
    let half = T::lit(0.5);
    let u = c * (x + a * x * x * x);
    let t = u.tanh();
    let y = half * x * (T::one() + t);
    let dy = half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + T::lit(3.0) * a * x * x);
    (y, dy)
}

impl<'p, T: Scalar> Tape<'p, T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            flops: [0; FlopScope::COUNT],
            scope: FlopScope::Other,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Sets the bucket that subsequent multiply-adds are charged to and
    /// returns the previous one.
    pub fn set_scope(&mut self, scope: FlopScope) -> FlopScope {
        std::mem::replace(&mut self.scope, scope)
    }

    /// Forward FLOPs (2 per multiply-add) recorded in `scope`.
    pub fn flops(&self, scope: FlopScope) -> u64 {
        self.flops[scope.slot()]
    }

    fn charge(&mut self, multiply_adds: usize) {
        self.flops[self.scope.slot()] += 2 * multiply_adds as u64;
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn constant_ref(&mut self, value: &'p Tensor<T>) -> Var {
        self.nodes.push(Node {
            value: Cow::Borrowed(value),
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    /// Registers a parameter; it will receive a gradient on backward.
    pub fn param(&mut self, id: ParamId, value: &'p Tensor<T>) -> Var {
        self.nodes.push(Node {
            value: Cow::Borrowed(value),
            op: Op::Param(id),
        });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape().len() != 2 || bv.shape().len() != 2 || av.shape()[1] != bv.shape()[0] {
            return Err(dim_err("matmul", av, bv));
        }
        let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
        let out = av.matmul(bv)?;
        self.charge(m * k * n);
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    fn zip_same(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(T, T) -> T, op: Op<T>) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(dim_err(name, av, bv));
        }
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::new(av.shape().to_vec(), data)?;
        Ok(self.push(out, op))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let out = self.value(a).map(|x| x * c);
        self.push(out, Op::Scale(a, c))
    }

    /// `x[m,n] + bias[n]` broadcast over rows.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(bias));
        if bv.len() != xv.cols() {
            return Err(dim_err("add_row", xv, bv));
        }
        let mut out = xv.clone();
        let n = bv.len();
        for (i, o) in out.data_mut().iter_mut().enumerate() {
            *o += bv.data()[i % n];
        }
        Ok(self.push(out, Op::AddRow(x, bias)))
    }

    /// Tanh-approximation GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| gelu_scalar(v).0);
        self.push(out, Op::Gelu(x))
    }

    /// `x / sqrt(mean(x²) + eps) * gain` along the last axis.
    pub fn rms_norm(&mut self, x: Var, gain: Var, eps: T) -> Result<Var> {
        let (xv, gv) = (self.value(x), self.value(gain));
        let d = xv.cols();
        if gv.len() != d {
            return Err(dim_err("rms_norm", xv, gv));
        }
        let mut out = xv.clone();
        let mut inv_rms = Vec::with_capacity(xv.rows());
        let dn = T::lit(d as f64);
        for r in 0..xv.rows() {
            let row = xv.row(r);
            let ms = row.iter().fold(T::zero(), |a, &v| a + v * v) / dn;
            let inv = T::one() / (ms + eps).sqrt();
            inv_rms.push(inv);
            for (o, (&v, &g)) in out.row_mut(r).iter_mut().zip(row.iter().zip(gv.data())) {
                *o = v * inv * g;
            }
        }
        Ok(self.push(out, Op::RmsNorm { x, gain, inv_rms }))
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        for r in 0..out.rows() {
            softmax_in_place(out.row_mut(r));
        }
        self.push(out, Op::SoftmaxRows(x))
    }

    /// Row-wise `log Σ exp`, shape `[rows]`.
    pub fn logsumexp_rows(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let data = (0..xv.rows()).map(|r| logsumexp(xv.row(r))).collect();
        let out = Tensor::new(vec![xv.rows()], data).expect("rows > 0");
        self.push(out, Op::LogSumExpRows(x))
    }

    /// `out.flat[i] = src.flat[index[i]]`, or exactly zero for [`ZERO_SLOT`].
    pub fn gather(&mut self, src: Var, index: Vec<usize>, shape: &[usize]) -> Result<Var> {
        let sv = self.value(src);
        if shape.iter().product::<usize>() != index.len() {
            return Err(Error::Dimension {
                op: "gather",
                lhs: shape.to_vec(),
                rhs: vec![index.len()],
            });
        }
        let n = sv.len();
        if let Some(bad) = index.iter().find(|&&i| i != ZERO_SLOT && i >= n) {
            return Err(Error::Contract(format!("gather index {bad} out of range for {n} elements")));
        }
        let data = index
            .iter()
            .map(|&i| if i == ZERO_SLOT { T::zero() } else { sv.data()[i] })
            .collect();
        let out = Tensor::new(shape.to_vec(), data)?;
        Ok(self.push(out, Op::Gather { src, index }))
    }

    /// Selects whole rows of a matrix; rows may repeat.
    pub fn gather_rows(&mut self, src: Var, rows: &[usize]) -> Result<Var> {
        let sv = self.value(src);
        let (nr, c) = (sv.rows(), sv.cols());
        if let Some(bad) = rows.iter().find(|&&r| r >= nr) {
            return Err(Error::Contract(format!("row {bad} out of range for {nr} rows")));
        }
        let index = rows.iter().flat_map(|&r| r * c..(r + 1) * c).collect();
        self.gather(src, index, &[rows.len(), c])
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let rows: Vec<usize> = (start..end).collect();
        self.gather_rows(x, &rows)
    }

    /// Picks one element per row: `out[r] = x[r, cols[r]]`.
    pub fn pick(&mut self, x: Var, cols: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        let c = xv.cols();
        if cols.len() != xv.rows() {
            return Err(Error::Dimension {
                op: "pick",
                lhs: xv.shape().to_vec(),
                rhs: vec![cols.len()],
            });
        }
        if let Some(bad) = cols.iter().find(|&&j| j >= c) {
            return Err(Error::Contract(format!("pick column {bad} out of range for {c} columns")));
        }
        let index = cols.iter().enumerate().map(|(r, &j)| r * c + j).collect();
        self.gather(x, index, &[cols.len()])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        Ok(self.push(out, Op::Reshape(x)))
    }

    /// Stacks matrices with equal column counts.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let values: Vec<&Tensor<T>> = parts.iter().map(|&p| self.value(p)).collect();
        let out = Tensor::concat_rows(&values)?;
        Ok(self.push(out, Op::Concat(parts.to_vec())))
    }

    /// Multi-head causal attention.
    ///
    /// `q` is `[T, d]`; `k` and `v` are `[past + T, d]`. Query row `i` sits at
    /// absolute position `past + i` and attends to keys `0..=past + i`.
    pub fn causal_attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let (t, d) = (qv.rows(), qv.cols());
        let s = kv.rows();
        if kv.cols() != d || vv.shape() != kv.shape() || s < t || d % heads != 0 {
            return Err(dim_err("causal_attention", qv, kv));
        }
        let past = s - t;
        let hd = d / heads;
        let scale = T::one() / T::lit(hd as f64).sqrt();
        let mut probs = vec![T::zero(); heads * t * s];
        let mut out = Tensor::zeros(&[t, d]);
        for h in 0..heads {
            let p = &mut probs[h * t * s..(h + 1) * t * s];
            gemm(
                t,
                hd,
                s,
                scale,
                qv.data(),
                Strided::row_major(d).at(h * hd),
                kv.data(),
                Strided::transposed(d).at(h * hd),
                T::zero(),
                p,
                Strided::row_major(s),
            );
            for i in 0..t {
                let row = &mut p[i * s..(i + 1) * s];
                let visible = past + i + 1;
                softmax_in_place(&mut row[..visible]);
                row[visible..].iter_mut().for_each(|x| *x = T::zero());
            }
            gemm(
                t,
                s,
                hd,
                T::one(),
                p,
                Strided::row_major(s),
                vv.data(),
                Strided::row_major(d).at(h * hd),
                T::zero(),
                out.data_mut(),
                Strided::row_major(d).at(h * hd),
            );
        }
        self.charge(2 * t * s * d);
        let saved = AttentionSaved { q, k, v, heads, probs };
        Ok(self.push(out, Op::Attention(Box::new(saved))))
    }

    /// Rotary embedding on interleaved pairs within each head; row `r` is
    /// rotated by `positions[r]`.
    pub fn rope(&mut self, x: Var, heads: usize, positions: &[usize], base: T) -> Result<Var> {
        let xv = self.value(x);
        let (t, d) = (xv.rows(), xv.cols());
        if positions.len() != t || d % heads != 0 || !(d / heads).is_multiple_of(2) {
            return Err(Error::Dimension {
                op: "rope",
                lhs: xv.shape().to_vec(),
                rhs: vec![positions.len(), heads],
            });
        }
        let hd = d / heads;
        let half = hd / 2;
        let mut cos = Vec::with_capacity(t * half);
        let mut sin = Vec::with_capacity(t * half);
        for &p in positions {
            for i in 0..half {
                let freq = base.powf(-T::lit((2 * i) as f64) / T::lit(hd as f64));
                let theta = T::lit(p as f64) * freq;
                cos.push(theta.cos());
                sin.push(theta.sin());
            }
        }
        let mut out = xv.clone();
        for r in 0..t {
            let row = out.row_mut(r);
            for h in 0..heads {
                for i in 0..half {
                    let (c, s) = (cos[r * half + i], sin[r * half + i]);
                    let j = h * hd + 2 * i;
                    let (x0, x1) = (row[j], row[j + 1]);
                    row[j] = x0 * c - x1 * s;
                    row[j + 1] = x0 * s + x1 * c;
                }
            }
        }
        Ok(self.push(out, Op::Rope { x, heads, cos, sin }))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        self.push(out, Op::Sum(x))
    }

    /// `Σ w_i x_i` against constant weights.
    pub fn dot(&mut self, x: Var, weights: Vec<T>) -> Result<Var> {
        let xv = self.value(x);
        if weights.len() != xv.len() {
            return Err(Error::Dimension {
                op: "dot",
                lhs: xv.shape().to_vec(),
                rhs: vec![weights.len()],
            });
        }
        let s = xv.data().iter().zip(&weights).fold(T::zero(), |a, (&x, &w)| a + x * w);
        Ok(self.push(Tensor::scalar(s), Op::Dot(x, weights)))
    }

    /// Propagates d(loss)/d(node) back to every registered parameter.
    /// Parameters the loss does not depend on get an all-zero gradient.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::ones(lv.shape()));
        let mut map: BTreeMap<ParamId, Tensor<T>> = BTreeMap::new();
        for node in &self.nodes {
            if let Op::Param(id) = node.op {
                map.entry(id).or_insert_with(|| Tensor::zeros(node.value.shape()));
            }
        }
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, g, &mut grads, &mut map);
        }
        Ok(Gradients { map })
    }

    fn backprop_node(
        &self,
        i: usize,
        g: Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
        params: &mut BTreeMap<ParamId, Tensor<T>>,
    ) {
        let node = &self.nodes[i];
        let out = &*node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Param(id) => {
                params.get_mut(id).expect("registered").add_assign(&g);
            }
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                let mut da = Tensor::zeros(&[m, k]);
                gemm(
                    m,
                    n,
                    k,
                    T::one(),
                    g.data(),
                    Strided::row_major(n),
                    bv.data(),
                    Strided::transposed(n),
                    T::zero(),
                    da.data_mut(),
                    Strided::row_major(k),
                );
                let mut db = Tensor::zeros(&[k, n]);
                gemm(
                    k,
                    m,
                    n,
                    T::one(),
                    av.data(),
                    Strided::transposed(k),
                    g.data(),
                    Strided::row_major(n),
                    T::zero(),
                    db.data_mut(),
                    Strided::row_major(n),
                );
                accumulate(grads, *a, da);
                accumulate(grads, *b, db);
            }
            Op::Add(a, b) => {
                accumulate(grads, *a, g.clone());
                accumulate(grads, *b, g);
            }
            Op::Sub(a, b) => {
                accumulate(grads, *b, g.map(|x| -x));
                accumulate(grads, *a, g);
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let da = zip_map(&g, bv, |x, y| x * y);
                let db = zip_map(&g, av, |x, y| x * y);
                accumulate(grads, *a, da);
                accumulate(grads, *b, db);
            }
            Op::Scale(a, c) => {
                let c = *c;
                accumulate(grads, *a, g.map(|x| x * c));
            }
            Op::AddRow(x, bias) => {
                let n = g.cols();
                let mut db = Tensor::zeros(self.shape(*bias));
                for r in 0..g.rows() {
                    for (d, &v) in db.data_mut().iter_mut().zip(g.row(r)) {
                        *d += v;
                    }
                }
                debug_assert_eq!(db.len(), n);
                accumulate(grads, *bias, db);
                accumulate(grads, *x, g);
            }
            Op::Gelu(x) => {
                let xv = self.value(*x);
                let dx = zip_map(&g, xv, |gv, v| gv * gelu_scalar(v).1);
                accumulate(grads, *x, dx);
            }
            Op::RmsNorm { x, gain, inv_rms } => {
                let (xv, gv) = (self.value(*x), self.value(*gain));
                let d = xv.cols();
                let dn = T::lit(d as f64);
                let mut dx = Tensor::zeros(xv.shape());
                let mut dg = Tensor::zeros(gv.shape());
                for r in 0..xv.rows() {
                    let (xr, gr) = (xv.row(r), g.row(r));
                    let inv = inv_rms[r];
                    let mut proj = T::zero();
                    for j in 0..d {
                        proj += gv.data()[j] * gr[j] * xr[j];
                        dg.data_mut()[j] += gr[j] * xr[j] * inv;
                    }
                    let coef = proj * inv * inv * inv / dn;
                    for (j, o) in dx.row_mut(r).iter_mut().enumerate() {
                        *o = inv * gv.data()[j] * gr[j] - xr[j] * coef;
                    }
                }
                accumulate(grads, *x, dx);
                accumulate(grads, *gain, dg);
            }
            Op::SoftmaxRows(x) => {
                let mut dx = g;
                for r in 0..out.rows() {
                    let y = out.row(r);
                    let row = dx.row_mut(r);
                    let s = row.iter().zip(y).fold(T::zero(), |a, (&gv, &yv)| a + gv * yv);
                    for (o, &yv) in row.iter_mut().zip(y) {
                        *o = yv * (*o - s);
                    }
                }
                accumulate(grads, *x, dx);
            }
            Op::LogSumExpRows(x) => {
                let xv = self.value(*x);
                let mut dx = Tensor::zeros(xv.shape());
                for r in 0..xv.rows() {
                    let (gr, lse) = (g.data()[r], out.data()[r]);
                    for (o, &v) in dx.row_mut(r).iter_mut().zip(xv.row(r)) {
                        *o = gr * (v - lse).exp();
                    }
                }
                accumulate(grads, *x, dx);
            }
            Op::Gather { src, index } => {
                let mut ds = Tensor::zeros(self.shape(*src));
                let dsd = ds.data_mut();
                for (&j, &gv) in index.iter().zip(g.data()) {
                    if j != ZERO_SLOT {
                        dsd[j] += gv;
                    }
                }
                accumulate(grads, *src, ds);
            }
            Op::Reshape(x) => {
                let shape = self.shape(*x).to_vec();
                accumulate(grads, *x, g.reshape(&shape).expect("same size"));
            }
            Op::Concat(parts) => {
                let mut start = 0;
                for p in parts {
                    let rows = self.value(*p).rows();
                    let piece = g.slice_rows(start, start + rows);
                    let piece = piece.reshape(self.shape(*p)).expect("same size");
                    accumulate(grads, *p, piece);
                    start += rows;
                }
            }
            Op::Attention(saved) => {
                let (dq, dk, dv) = self.attention_backward(saved, &g);
                accumulate(grads, saved.q, dq);
                accumulate(grads, saved.k, dk);
                accumulate(grads, saved.v, dv);
            }
            Op::Rope { x, heads, cos, sin } => {
                let d = g.cols();
                let hd = d / heads;
                let half = hd / 2;
                let mut dx = g;
                for r in 0..dx.rows() {
                    let row = dx.row_mut(r);
                    for h in 0..*heads {
                        for i in 0..half {
                            let (c, s) = (cos[r * half + i], sin[r * half + i]);
                            let j = h * hd + 2 * i;
                            let (g0, g1) = (row[j], row[j + 1]);
                            row[j] = g0 * c + g1 * s;
                            row[j + 1] = g1 * c - g0 * s;
                        }
                    }
                }
                accumulate(grads, *x, dx);
            }
            Op::Sum(x) => {
                let gv = g.data()[0];
                accumulate(grads, *x, Tensor::full(self.shape(*x), gv));
            }
            Op::Dot(x, w) => {
                let gv = g.data()[0];
                let shape = self.shape(*x).to_vec();
                let dx = Tensor::new(shape, w.iter().map(|&wi| wi * gv).collect()).expect("same size");
                accumulate(grads, *x, dx);
            }
        }
    }

    fn attention_backward(&self, saved: &AttentionSaved<T>, g: &Tensor<T>) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
        let (qv, kv, vv) = (self.value(saved.q), self.value(saved.k), self.value(saved.v));
        let (t, d, s) = (qv.rows(), qv.cols(), kv.rows());
        let heads = saved.heads;
        let hd = d / heads;
        let scale = T::one() / T::lit(hd as f64).sqrt();
        let mut dq = Tensor::zeros(qv.shape());
        let mut dk = Tensor::zeros(kv.shape());
        let mut dv = Tensor::zeros(vv.shape());
        let mut ds = vec![T::zero(); t * s];
        for h in 0..heads {
            let p = &saved.probs[h * t * s..(h + 1) * t * s];
            // dP = g_h · V_hᵀ
            gemm(
                t,
                hd,
                s,
                T::one(),
                g.data(),
                Strided::row_major(d).at(h * hd),
                vv.data(),
                Strided::transposed(d).at(h * hd),
                T::zero(),
                &mut ds,
                Strided::row_major(s),
            );
            // dV_h = Pᵀ · g_h
            gemm(
                s,
                t,
                hd,
                T::one(),
                p,
                Strided::transposed(s),
                g.data(),
                Strided::row_major(d).at(h * hd),
                T::zero(),
                dv.data_mut(),
                Strided::row_major(d).at(h * hd),
            );
            for i in 0..t {
                let pr = &p[i * s..(i + 1) * s];
                let dr = &mut ds[i * s..(i + 1) * s];
                let dot = pr.iter().zip(dr.iter()).fold(T::zero(), |a, (&x, &y)| a + x * y);
                for (o, &pv) in dr.iter_mut().zip(pr) {
                    *o = pv * (*o - dot);
                }
            }
            gemm(
                t,
                s,
                hd,
                scale,
                &ds,
                Strided::row_major(s),
                kv.data(),
                Strided::row_major(d).at(h * hd),
                T::zero(),
                dq.data_mut(),
                Strided::row_major(d).at(h * hd),
            );
            gemm(
                s,
                t,
                hd,
                scale,
                &ds,
                Strided::transposed(s),
                qv.data(),
                Strided::row_major(d).at(h * hd),
                T::zero(),
                dk.data_mut(),
                Strided::row_major(d).at(h * hd),
            );
        }
        (dq, dk, dv)
    }
}

fn accumulate<T: Scalar>(grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
    match &mut grads[v.0] {
        Some(acc) => acc.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn zip_map<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), data).expect("same shape")
}

/// Numerically stable softmax of one row, in place.
pub fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
    let mut total = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

/// Numerically stable `log Σ exp` of one row.
pub fn logsumexp<T: Scalar>(row: &[T]) -> T {
    let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
    if max == T::neg_infinity() {
        return max;
    }
    let total = row.iter().fold(T::zero(), |a, &v| a + (v - max).exp());
    max + total.ln()
}
