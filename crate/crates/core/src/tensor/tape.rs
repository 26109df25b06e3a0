use std::collections::HashMap;
use std::rc::Rc;

use serde::{Deserialize, Serialize};

use super::gemm::{gemm, gemm_view, View};
use super::{ParamId, ParamStore, Tensor};
use crate::error::{shape_err, Error, Result};

/// Boundary handling for the lattice convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Padding {
    /// Toroidal wrap-around.
    Circular,
    /// Out-of-range neighbours contribute nothing.
    Zero,
}

/// A value produced on a [`Tape`].
///
/// Vars without an id are constants: nothing upstream of them requires a
/// gradient (or the tape runs with gradients disabled).
#[derive(Clone, Debug)]
pub struct Var {
    id: Option<usize>,
    value: Rc<Tensor>,
}

impl Var {
    pub fn value(&self) -> &Tensor {
        &self.value
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn data(&self) -> &[f64] {
        self.value.data()
    }

    pub fn id(&self) -> Option<usize> {
        self.id
    }

    pub fn requires_grad(&self) -> bool {
        self.id.is_some()
    }

    pub fn to_tensor(&self) -> Tensor {
        let mut t = (*self.value).clone();
        t.requires_grad = false;
        t
    }
}

enum Op {
    Leaf,
    Param(ParamId),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    MatMul(Var, Var),
    Bmm(Var, Var),
    Permute(Var, Vec<usize>),
    Reshape(Var),
    SumAll(Var),
    MeanAll(Var),
    SumLast(Var),
    DotLast(Var, Var),
    MulLast(Var, Var),
    Normalize(Var, f64),
    NormLast(Var, f64),
    Softmax(Var, usize),
    Relu(Var),
    Softplus(Var),
    Embedding(Var, Vec<usize>),
    CrossEntropy(Var, Vec<usize>),
    BlockMatVec(Var, Var),
    Conv(Var, Var, Padding),
    GroupNorm(Var, usize, f64),
    /// q, k, v, heads, saved probabilities `[B, H, L, L]`.
    Attention(Var, Var, Var, usize, Vec<f64>),
}

impl Op {
    fn inputs(&self) -> Vec<&Var> {
        use Op::*;
        match self {
            Leaf | Param(_) => vec![],
            Attention(q, k, v, _, _) => vec![q, k, v],
            Add(a, b) | Sub(a, b) | Mul(a, b) | MatMul(a, b) | Bmm(a, b) | DotLast(a, b)
            | MulLast(a, b) | BlockMatVec(a, b) | Conv(a, b, _) => vec![a, b],
            Scale(a, _) | Permute(a, _) | Reshape(a) | SumAll(a) | MeanAll(a) | SumLast(a)
            | Normalize(a, _) | NormLast(a, _) | Softmax(a, _) | Relu(a) | Softplus(a)
            | Embedding(a, _) | CrossEntropy(a, _) | GroupNorm(a, _, _) => vec![a],
        }
    }
}

struct Node {
    op: Op,
    value: Rc<Tensor>,
}

/// Gradients returned by [`Tape::backward`].
#[derive(Debug, Default)]
pub struct Gradients {
    leaves: HashMap<usize, Tensor>,
    params: Vec<(ParamId, Tensor)>,
}

impl Gradients {
    /// Gradient with respect to a leaf created by [`Tape::leaf`] or [`Tape::input`].
    pub fn wrt(&self, var: &Var) -> Option<&Tensor> {
        var.id.and_then(|id| self.leaves.get(&id))
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params.iter().find(|(p, _)| *p == id).map(|(_, g)| g)
    }

    /// Parameter gradients, in first-use order.
    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.params.iter().map(|(id, g)| (*id, g))
    }

    /// Add every parameter gradient into the store's gradient buffers.
    pub fn accumulate_into(&self, store: &mut ParamStore) {
        for (id, g) in &self.params {
            store.accumulate_grad(*id, g.data());
        }
    }
}

/// Append-only record of differentiable operations.
pub struct Tape {
    nodes: Vec<Node>,
    grad_enabled: bool,
    param_cache: HashMap<ParamId, Var>,
    backward_done: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

fn broadcasts(a: &[usize], b: &[usize]) -> bool {
    a.ends_with(b) || b.iter().product::<usize>() == 1
}

fn reduce_to(g: &[f64], inner: usize) -> Vec<f64> {
    let mut out = vec![0.0; inner];
    for chunk in g.chunks(inner) {
        for (o, v) in out.iter_mut().zip(chunk) {
            *o += v;
        }
    }
    out
}

fn last_dim(shape: &[usize]) -> usize {
    shape.last().copied().unwrap_or(1)
}

fn permute_data(data: &[f64], shape: &[usize], axes: &[usize]) -> (Vec<f64>, Vec<usize>) {
    let rank = shape.len();
    let mut in_strides = vec![1usize; rank];
    for d in (0..rank.saturating_sub(1)).rev() {
        in_strides[d] = in_strides[d + 1] * shape[d + 1];
    }
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let n = data.len();
    let mut out = Vec::with_capacity(n);
    if n == 0 {
        return (out, out_shape);
    }
    // Keep the innermost axis contiguous when possible.
    let (outer_rank, run) = if rank > 0 && axes[rank - 1] == rank - 1 {
        (rank - 1, shape[rank - 1])
    } else {
        (rank, 1)
    };
    let mut idx = vec![0usize; outer_rank];
    let mut off = 0usize;
    for _ in 0..n / run {
        out.extend_from_slice(&data[off..off + run]);
        for d in (0..outer_rank).rev() {
            idx[d] += 1;
            off += strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            off -= strides[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    (out, out_shape)
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Split a shape around `axis` into (outer, axis length, inner).
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

struct ConvDims {
    b: usize,
    cin: usize,
    cout: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    n: usize,
}

impl ConvDims {
    fn source(&self, pos: usize, off: usize, radius: usize, len: usize, pad: Padding) -> Option<usize> {
        let s = pos as isize + off as isize - radius as isize;
        match pad {
            Padding::Circular => Some(s.rem_euclid(len as isize) as usize),
            Padding::Zero => (s >= 0 && (s as usize) < len).then_some(s as usize),
        }
    }

    /// Calls `f(x_offset, k_offset, y_offset)` for every (input cell, kernel
    /// block, output cell) triple that contributes to the convolution.
    fn for_each(&self, pad: Padding, mut f: impl FnMut(usize, usize, usize)) {
        let n = self.n;
        let (ry, rx) = (self.kh / 2, self.kw / 2);
        for bi in 0..self.b {
            for c in 0..self.cout {
                for d in 0..self.cin {
                    for u in 0..self.kh {
                        for v in 0..self.kw {
                            let k_off = (((c * self.cin + d) * self.kh + u) * self.kw + v) * n * n;
                            for hh in 0..self.h {
                                let Some(sh) = self.source(hh, u, ry, self.h, pad) else {
                                    continue;
                                };
                                for ww in 0..self.w {
                                    let Some(sw) = self.source(ww, v, rx, self.w, pad) else {
                                        continue;
                                    };
                                    let x_off = (((bi * self.cin + d) * self.h + sh) * self.w + sw) * n;
                                    let y_off = (((bi * self.cout + c) * self.h + hh) * self.w + ww) * n;
                                    f(x_off, k_off, y_off);
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

fn conv_dims(x: &[usize], k: &[usize]) -> Result<ConvDims> {
    if x.len() != 5 || k.len() != 6 || k[1] != x[1] || k[4] != x[4] || k[5] != x[4] {
        return shape_err("conv2d", x, k);
    }
    if k[2].is_multiple_of(2) || k[3].is_multiple_of(2) {
        return Err(Error::Param(format!(
            "convolution kernel size must be odd, got {}x{}",
            k[2], k[3]
        )));
    }
    Ok(ConvDims {
        b: x[0],
        cin: x[1],
        h: x[2],
        w: x[3],
        n: x[4],
        cout: k[0],
        kh: k[2],
        kw: k[3],
    })
}

impl Tape {
    /// A tape that records operations for a later backward pass.
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grad_enabled: true,
            param_cache: HashMap::new(),
            backward_done: false,
        }
    }

    /// A tape that records nothing; every produced [`Var`] is a constant.
    pub fn no_grad() -> Self {
        Self {
            grad_enabled: false,
            ..Self::new()
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        Var {
            id: None,
            value: Rc::new(t),
        }
    }

    /// A differentiable leaf (a constant when gradients are disabled).
    pub fn leaf(&mut self, t: Tensor) -> Var {
        if !self.grad_enabled {
            return self.constant(t);
        }
        self.push_node(Op::Leaf, Rc::new(t))
    }

    /// Leaf or constant depending on the tensor's `requires_grad` flag.
    pub fn input(&mut self, t: Tensor) -> Var {
        if t.requires_grad() {
            self.leaf(t)
        } else {
            self.constant(t)
        }
    }

    /// The value of a stored parameter. Repeated calls return the same Var.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(v) = self.param_cache.get(&id) {
            return v.clone();
        }
        let value = Rc::new(store.get(id).clone());
        let var = if self.grad_enabled {
            self.push_node(Op::Param(id), value)
        } else {
            Var { id: None, value }
        };
        self.param_cache.insert(id, var.clone());
        var
    }

    fn push_node(&mut self, op: Op, value: Rc<Tensor>) -> Var {
        let id = self.nodes.len();
        self.nodes.push(Node {
            op,
            value: value.clone(),
        });
        Var {
            id: Some(id),
            value,
        }
    }

    fn record(&mut self, op: Op, value: Tensor) -> Var {
        let needs = self.grad_enabled && op.inputs().iter().any(|v| v.id.is_some());
        if needs {
            self.push_node(op, Rc::new(value))
        } else {
            Var {
                id: None,
                value: Rc::new(value),
            }
        }
    }

    // ----- elementwise --------------------------------------------------

    fn binary(
        &mut self,
        name: &'static str,
        a: &Var,
        b: &Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        if !broadcasts(a.shape(), b.shape()) {
            return shape_err(name, a.shape(), b.shape());
        }
        let inner = b.value.numel().max(1);
        let bd = b.data();
        let data = a
            .data()
            .iter()
            .enumerate()
            .map(|(k, &x)| f(x, bd[k % inner]))
            .collect();
        Ok(Tensor::from_parts(a.shape().to_vec(), data))
    }

    /// `a + b`, where `b`'s shape is a suffix of `a`'s (or `b` has one element).
    pub fn add(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let v = self.binary("add", a, b, |x, y| x + y)?;
        Ok(self.record(Op::Add(a.clone(), b.clone()), v))
    }

    pub fn sub(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let v = self.binary("sub", a, b, |x, y| x - y)?;
        Ok(self.record(Op::Sub(a.clone(), b.clone()), v))
    }

    /// Elementwise product with the same broadcasting rule as [`Tape::add`].
    pub fn mul(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let v = self.binary("mul", a, b, |x, y| x * y)?;
        Ok(self.record(Op::Mul(a.clone(), b.clone()), v))
    }

    pub fn scale(&mut self, a: &Var, s: f64) -> Var {
        let v = a.value.map(|x| x * s);
        self.record(Op::Scale(a.clone(), s), v)
    }

    pub fn relu(&mut self, a: &Var) -> Var {
        let v = a.value.map(|x| x.max(0.0));
        self.record(Op::Relu(a.clone()), v)
    }

    pub fn softplus(&mut self, a: &Var) -> Var {
        let v = a.value.map(softplus);
        self.record(Op::Softplus(a.clone()), v)
    }

    // ----- linear algebra -----------------------------------------------

    /// `a [.., k] · b [k, n] -> [.., n]`; leading axes of `a` are flattened.
    pub fn matmul(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let (ash, bsh) = (a.shape(), b.shape());
        if ash.is_empty() || bsh.len() != 2 || last_dim(ash) != bsh[0] {
            return shape_err("matmul", ash, bsh);
        }
        let (k, n) = (bsh[0], bsh[1]);
        let m = if k == 0 { ash[..ash.len() - 1].iter().product() } else { a.value.numel() / k };
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, a.data(), false, b.data(), false, &mut out, false);
        let mut shape = ash[..ash.len() - 1].to_vec();
        shape.push(n);
        Ok(self.record(Op::MatMul(a.clone(), b.clone()), Tensor::from_parts(shape, out)))
    }

    /// Batched product `[.., m, k] · [.., k, n] -> [.., m, n]` with equal leading axes.
    pub fn bmm(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let (ash, bsh) = (a.shape(), b.shape());
        let r = ash.len();
        if r < 3 || bsh.len() != r || ash[..r - 2] != bsh[..r - 2] || ash[r - 1] != bsh[r - 2] {
            return shape_err("bmm", ash, bsh);
        }
        let (m, k, n) = (ash[r - 2], ash[r - 1], bsh[r - 1]);
        let batch: usize = ash[..r - 2].iter().product();
        let mut out = vec![0.0; batch * m * n];
        for i in 0..batch {
            gemm(
                m,
                k,
                n,
                &a.data()[i * m * k..(i + 1) * m * k],
                false,
                &b.data()[i * k * n..(i + 1) * k * n],
                false,
                &mut out[i * m * n..(i + 1) * m * n],
                false,
            );
        }
        let mut shape = ash[..r - 1].to_vec();
        shape.push(n);
        Ok(self.record(Op::Bmm(a.clone(), b.clone()), Tensor::from_parts(shape, out)))
    }

    /// Multi-head scaled dot-product attention over `[B, L, D]` inputs.
    ///
    /// Head `h` uses features `h·D/heads .. (h+1)·D/heads`; logits are scaled
    /// by `1/√(D/heads)` and softmaxed over keys.
    pub fn attention(&mut self, q: &Var, k: &Var, v: &Var, heads: usize) -> Result<Var> {
        let sh = q.shape();
        if sh.len() != 3 || k.shape() != sh || v.shape() != sh || heads == 0 || !sh[2].is_multiple_of(heads) {
            return shape_err("attention", sh, k.shape());
        }
        let (b, l, d) = (sh[0], sh[1], sh[2]);
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut probs = vec![0.0; b * heads * l * l];
        let mut out = vec![0.0; b * l * d];
        // Per-head operands are strided views of the [B, L, D] buffers, no copies.
        for bi in 0..b {
            for h in 0..heads {
                let off = bi * l * d + h * dh;
                let p = &mut probs[(bi * heads + h) * l * l..][..l * l];
                let qv = View { data: q.data(), off, rs: d, cs: 1 };
                let kt = View { data: k.data(), off, rs: 1, cs: d };
                gemm_view(l, dh, l, qv, kt, p, 0, l, false);
                for row in p.chunks_mut(l) {
                    let mx = row.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x));
                    let mut total = 0.0;
                    for x in row.iter_mut() {
                        *x = ((*x - mx) * scale).exp();
                        total += *x;
                    }
                    let inv = 1.0 / total;
                    row.iter_mut().for_each(|x| *x *= inv);
                }
                let pv = View { data: p, off: 0, rs: l, cs: 1 };
                let vv = View { data: v.data(), off, rs: d, cs: 1 };
                gemm_view(l, l, dh, pv, vv, &mut out, off, d, false);
            }
        }
        let value = Tensor::from_parts(sh.to_vec(), out);
        Ok(self.record(Op::Attention(q.clone(), k.clone(), v.clone(), heads, probs), value))
    }

    pub fn permute(&mut self, a: &Var, axes: &[usize]) -> Result<Var> {
        let rank = a.shape().len();
        let mut seen = vec![false; rank];
        if axes.len() != rank || axes.iter().any(|&x| x >= rank || std::mem::replace(&mut seen[x], true)) {
            return shape_err("permute", a.shape(), axes);
        }
        let (data, shape) = permute_data(a.data(), a.shape(), axes);
        Ok(self.record(Op::Permute(a.clone(), axes.to_vec()), Tensor::from_parts(shape, data)))
    }

    /// Swap the last two axes.
    pub fn transpose(&mut self, a: &Var) -> Result<Var> {
        let r = a.shape().len();
        if r < 2 {
            return shape_err("transpose", a.shape(), &[]);
        }
        let mut axes: Vec<usize> = (0..r).collect();
        axes.swap(r - 2, r - 1);
        self.permute(a, &axes)
    }

    pub fn reshape(&mut self, a: &Var, shape: &[usize]) -> Result<Var> {
        let v = (*a.value).clone().reshape(shape.to_vec())?;
        Ok(self.record(Op::Reshape(a.clone()), v))
    }

    // ----- reductions ---------------------------------------------------

    pub fn sum(&mut self, a: &Var) -> Var {
        let v = Tensor::scalar(a.data().iter().sum());
        self.record(Op::SumAll(a.clone()), v)
    }

    pub fn mean(&mut self, a: &Var) -> Var {
        let n = a.value.numel().max(1) as f64;
        let v = Tensor::scalar(a.data().iter().sum::<f64>() / n);
        self.record(Op::MeanAll(a.clone()), v)
    }

    /// Sum over the last axis.
    pub fn sum_last(&mut self, a: &Var) -> Result<Var> {
        let sh = a.shape();
        if sh.is_empty() {
            return shape_err("sum_last", sh, &[]);
        }
        let data = a.value.rows().map(|r| r.iter().sum()).collect();
        let v = Tensor::from_parts(sh[..sh.len() - 1].to_vec(), data);
        Ok(self.record(Op::SumLast(a.clone()), v))
    }

    /// Inner product over the last axis.
    pub fn dot_last(&mut self, a: &Var, b: &Var) -> Result<Var> {
        if a.shape() != b.shape() || a.shape().is_empty() {
            return shape_err("dot_last", a.shape(), b.shape());
        }
        let data = a
            .value
            .rows()
            .zip(b.value.rows())
            .map(|(x, y)| super::dot(x, y))
            .collect();
        let sh = a.shape();
        let v = Tensor::from_parts(sh[..sh.len() - 1].to_vec(), data);
        Ok(self.record(Op::DotLast(a.clone(), b.clone()), v))
    }

    /// Scale each last-axis row of `a [.., n]` by the matching entry of `s [..]`.
    pub fn mul_last(&mut self, a: &Var, s: &Var) -> Result<Var> {
        let sh = a.shape();
        if sh.is_empty() || s.shape() != &sh[..sh.len() - 1] {
            return shape_err("mul_last", sh, s.shape());
        }
        let mut v = (*a.value).clone();
        for (row, &k) in v.rows_mut().zip(s.data()) {
            row.iter_mut().for_each(|x| *x *= k);
        }
        v.requires_grad = false;
        Ok(self.record(Op::MulLast(a.clone(), s.clone()), v))
    }

    /// Divide each last-axis row by `max(‖row‖₂, eps)`.
    pub fn normalize(&mut self, a: &Var, eps: f64) -> Var {
        let mut v = (*a.value).clone();
        v.requires_grad = false;
        for row in v.rows_mut() {
            let n = super::norm(row).max(eps);
            // Rows already on the sphere are left bit-identical.
            if (n - 1.0).abs() > 4.0 * f64::EPSILON {
                row.iter_mut().for_each(|x| *x /= n);
            }
        }
        self.record(Op::Normalize(a.clone(), eps), v)
    }

    /// Euclidean norm of each last-axis row.
    pub fn norm_last(&mut self, a: &Var, eps: f64) -> Result<Var> {
        let sh = a.shape();
        if sh.is_empty() {
            return shape_err("norm_last", sh, &[]);
        }
        let data = a.value.rows().map(super::norm).collect();
        let v = Tensor::from_parts(sh[..sh.len() - 1].to_vec(), data);
        Ok(self.record(Op::NormLast(a.clone(), eps), v))
    }

    /// Softmax along `axis`, stabilised by max subtraction.
    pub fn softmax(&mut self, a: &Var, axis: usize) -> Result<Var> {
        let sh = a.shape();
        if axis >= sh.len() {
            return shape_err("softmax", sh, &[axis]);
        }
        let (outer, len, inner) = axis_split(sh, axis);
        let src = a.data();
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * len + j) * inner + i;
                let mx = (0..len).map(|j| src[at(j)]).fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for j in 0..len {
                    let e = (src[at(j)] - mx).exp();
                    out[at(j)] = e;
                    total += e;
                }
                for j in 0..len {
                    out[at(j)] /= total;
                }
            }
        }
        let v = Tensor::from_parts(sh.to_vec(), out);
        Ok(self.record(Op::Softmax(a.clone(), axis), v))
    }

    /// Rows of `table [V, D]` selected by `indices`, giving `[len, D]`.
    pub fn embedding(&mut self, table: &Var, indices: &[usize]) -> Result<Var> {
        let sh = table.shape();
        if sh.len() != 2 {
            return shape_err("embedding", sh, &[]);
        }
        let (rows, d) = (sh[0], sh[1]);
        if let Some(&bad) = indices.iter().find(|&&i| i >= rows) {
            return Err(Error::Param(format!("embedding index {bad} out of range 0..{rows}")));
        }
        let mut data = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            data.extend_from_slice(&table.data()[i * d..(i + 1) * d]);
        }
        let v = Tensor::from_parts(vec![indices.len(), d], data);
        Ok(self.record(Op::Embedding(table.clone(), indices.to_vec()), v))
    }

    /// Mean softmax cross-entropy of `logits [n, c]` against class indices.
    pub fn cross_entropy(&mut self, logits: &Var, targets: &[usize]) -> Result<Var> {
        let sh = logits.shape();
        if sh.len() != 2 || sh[0] != targets.len() {
            return shape_err("cross_entropy", sh, &[targets.len()]);
        }
        let c = sh[1];
        if let Some(&bad) = targets.iter().find(|&&t| t >= c) {
            return Err(Error::Param(format!("target class {bad} out of range 0..{c}")));
        }
        let mut total = 0.0;
        for (row, &t) in logits.value.rows().zip(targets) {
            let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + row.iter().map(|x| (x - mx).exp()).sum::<f64>().ln();
            total += lse - row[t];
        }
        let v = Tensor::scalar(total / targets.len().max(1) as f64);
        Ok(self.record(Op::CrossEntropy(logits.clone(), targets.to_vec()), v))
    }

    /// Per-channel matrix-vector product: `y[.., c, :] = m[c] · x[.., c, :]`.
    ///
    /// `m` is `[C, N, N]`, or `[N, N]` shared across channels.
    pub fn block_matvec(&mut self, x: &Var, m: &Var) -> Result<Var> {
        let (xs, ms) = (x.shape(), m.shape());
        let ok = match ms.len() {
            2 => !xs.is_empty() && ms[0] == ms[1] && last_dim(xs) == ms[0],
            3 => xs.len() >= 2 && ms[1] == ms[2] && last_dim(xs) == ms[1] && xs[xs.len() - 2] == ms[0],
            _ => false,
        };
        if !ok {
            return shape_err("block_matvec", xs, ms);
        }
        let n = last_dim(xs);
        let channels = if ms.len() == 3 { ms[0] } else { 1 };
        let md = m.data();
        let mut out = vec![0.0; x.value.numel()];
        for (r, (xr, yr)) in x.value.rows().zip(out.chunks_mut(n)).enumerate() {
            let blk = &md[(r % channels) * n * n..][..n * n];
            for p in 0..n {
                yr[p] = super::dot(&blk[p * n..(p + 1) * n], xr);
            }
        }
        let v = Tensor::from_parts(xs.to_vec(), out);
        Ok(self.record(Op::BlockMatVec(x.clone(), m.clone()), v))
    }

    /// Lattice convolution with `N×N` block mixing.
    ///
    /// `x [B, Cin, H, W, N]`, `k [Cout, Cin, KH, KW, N, N]` (odd KH, KW),
    /// kernel centred on the output cell.
    pub fn conv2d(&mut self, x: &Var, k: &Var, padding: Padding) -> Result<Var> {
        let d = conv_dims(x.shape(), k.shape())?;
        let n = d.n;
        let (xd, kd) = (x.data(), k.data());
        let mut out = vec![0.0; d.b * d.cout * d.h * d.w * n];
        d.for_each(padding, |xo, ko, yo| {
            let blk = &kd[ko..ko + n * n];
            let xs = &xd[xo..xo + n];
            for p in 0..n {
                out[yo + p] += super::dot(&blk[p * n..(p + 1) * n], xs);
            }
        });
        let v = Tensor::from_parts(vec![d.b, d.cout, d.h, d.w, n], out);
        Ok(self.record(Op::Conv(x.clone(), k.clone(), padding), v))
    }

    /// Group normalisation of each last-axis row split into `groups` groups
    /// (no affine parameters).
    pub fn group_norm(&mut self, a: &Var, groups: usize, eps: f64) -> Result<Var> {
        let d = last_dim(a.shape());
        if a.shape().is_empty() || groups == 0 || !d.is_multiple_of(groups) {
            return shape_err("group_norm", a.shape(), &[groups]);
        }
        let gs = d / groups;
        let mut out = a.data().to_vec();
        for chunk in out.chunks_mut(gs) {
            let mu = chunk.iter().sum::<f64>() / gs as f64;
            let var = chunk.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / gs as f64;
            let inv = 1.0 / (var + eps).sqrt();
            chunk.iter_mut().for_each(|x| *x = (*x - mu) * inv);
        }
        let v = Tensor::from_parts(a.shape().to_vec(), out);
        Ok(self.record(Op::GroupNorm(a.clone(), groups, eps), v))
    }

    // ----- backward -----------------------------------------------------

    /// Reverse-mode sweep from a scalar `loss`.
    ///
    /// May be called once per tape; call [`Tape::zero_grad`] to allow another sweep.
    pub fn backward(&mut self, loss: &Var) -> Result<Gradients> {
        if self.backward_done {
            return Err(Error::Contract(
                "backward already ran on this tape; call zero_grad first".into(),
            ));
        }
        if loss.value.numel() != 1 {
            return Err(Error::Contract(format!(
                "loss must be a scalar, got shape {:?}",
                loss.shape()
            )));
        }
        let root = loss.id.ok_or_else(|| {
            Error::Contract("loss does not depend on any differentiable leaf".into())
        })?;
        self.backward_done = true;

        let mut grads: Vec<Option<Vec<f64>>> = vec![None; root + 1];
        grads[root] = Some(vec![1.0]);
        let mut out = Gradients::default();
        for i in (0..=root).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf => {
                    let t = Tensor::from_parts(node.value.shape().to_vec(), g);
                    out.leaves.insert(i, t);
                }
                Op::Param(pid) => {
                    let t = Tensor::from_parts(node.value.shape().to_vec(), g);
                    out.params.push((*pid, t));
                }
                op => backprop(op, &node.value, &g, &mut grads),
            }
        }
        out.params.sort_by_key(|(p, _)| *p);
        Ok(out)
    }

    /// Re-arm the tape so that [`Tape::backward`] may run again.
    pub fn zero_grad(&mut self) {
        self.backward_done = false;
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], v: &Var, contrib: Vec<f64>) {
    let Some(j) = v.id else { return };
    match &mut grads[j] {
        Some(g) => g.iter_mut().zip(&contrib).for_each(|(a, b)| *a += b),
        slot @ None => *slot = Some(contrib),
    }
}

fn backprop(op: &Op, out: &Tensor, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    use Op::*;
    match op {
        Leaf | Param(_) => unreachable!(),
        Add(a, b) | Sub(a, b) => {
            if a.requires_grad() {
                accumulate(grads, a, g.to_vec());
            }
            if b.requires_grad() {
                let mut r = reduce_to(g, b.value.numel().max(1));
                if matches!(op, Sub(..)) {
                    r.iter_mut().for_each(|x| *x = -*x);
                }
                accumulate(grads, b, r);
            }
        }
        Mul(a, b) => {
            let inner = b.value.numel().max(1);
            if a.requires_grad() {
                let bd = b.data();
                let da = g.iter().enumerate().map(|(k, gk)| gk * bd[k % inner]).collect();
                accumulate(grads, a, da);
            }
            if b.requires_grad() {
                let ga: Vec<f64> = g.iter().zip(a.data()).map(|(x, y)| x * y).collect();
                accumulate(grads, b, reduce_to(&ga, inner));
            }
        }
        Scale(a, s) => accumulate(grads, a, g.iter().map(|x| x * s).collect()),
        Relu(a) => {
            let da = g.iter().zip(a.data()).map(|(gk, &x)| if x > 0.0 { *gk } else { 0.0 }).collect();
            accumulate(grads, a, da);
        }
        Softplus(a) => {
            let da = g.iter().zip(a.data()).map(|(gk, &x)| gk * sigmoid(x)).collect();
            accumulate(grads, a, da);
        }
        MatMul(a, b) => {
            let (k, n) = (b.shape()[0], b.shape()[1]);
            let m = g.len() / n.max(1);
            if a.requires_grad() {
                let mut da = vec![0.0; m * k];
                gemm(m, n, k, g, false, b.data(), true, &mut da, false);
                accumulate(grads, a, da);
            }
            if b.requires_grad() {
                let mut db = vec![0.0; k * n];
                gemm(k, m, n, a.data(), true, g, false, &mut db, false);
                accumulate(grads, b, db);
            }
        }
        Attention(q, k, v, heads, probs) => {
            let sh = q.shape();
            let (b, l, d) = (sh[0], sh[1], sh[2]);
            let dh = d / heads;
            let scale = 1.0 / (dh as f64).sqrt();
            let (mut dq, mut dk, mut dv) = (vec![0.0; g.len()], vec![0.0; g.len()], vec![0.0; g.len()]);
            let mut ds = vec![0.0; l * l];
            for bi in 0..b {
                for h in 0..*heads {
                    let off = bi * l * d + h * dh;
                    let p = &probs[(bi * heads + h) * l * l..][..l * l];
                    let gv = View { data: g, off, rs: d, cs: 1 };
                    let vt = View { data: v.data(), off, rs: 1, cs: d };
                    gemm_view(l, dh, l, gv, vt, &mut ds, 0, l, false);
                    for (drow, prow) in ds.chunks_mut(l).zip(p.chunks(l)) {
                        let dot: f64 = drow.iter().zip(prow).map(|(x, y)| x * y).sum();
                        for (x, y) in drow.iter_mut().zip(prow) {
                            *x = y * (*x - dot) * scale;
                        }
                    }
                    let dsv = View { data: &ds, off: 0, rs: l, cs: 1 };
                    let dst = View { data: &ds, off: 0, rs: 1, cs: l };
                    let kv = View { data: k.data(), off, rs: d, cs: 1 };
                    let qv = View { data: q.data(), off, rs: d, cs: 1 };
                    let pt = View { data: p, off: 0, rs: 1, cs: l };
                    gemm_view(l, l, dh, dsv, kv, &mut dq, off, d, false);
                    gemm_view(l, l, dh, dst, qv, &mut dk, off, d, false);
                    gemm_view(l, l, dh, pt, gv, &mut dv, off, d, false);
                }
            }
            for (x, dx) in [(q, dq), (k, dk), (v, dv)] {
                if x.requires_grad() {
                    accumulate(grads, x, dx);
                }
            }
        }
        Bmm(a, b) => {
            let (ash, bsh) = (a.shape(), b.shape());
            let r = ash.len();
            let (m, k, n) = (ash[r - 2], ash[r - 1], bsh[r - 1]);
            let batch: usize = ash[..r - 2].iter().product();
            if a.requires_grad() {
                let mut da = vec![0.0; batch * m * k];
                for i in 0..batch {
                    gemm(
                        m,
                        n,
                        k,
                        &g[i * m * n..(i + 1) * m * n],
                        false,
                        &b.data()[i * k * n..(i + 1) * k * n],
                        true,
                        &mut da[i * m * k..(i + 1) * m * k],
                        false,
                    );
                }
                accumulate(grads, a, da);
            }
            if b.requires_grad() {
                let mut db = vec![0.0; batch * k * n];
                for i in 0..batch {
                    gemm(
                        k,
                        m,
                        n,
                        &a.data()[i * m * k..(i + 1) * m * k],
                        true,
                        &g[i * m * n..(i + 1) * m * n],
                        false,
                        &mut db[i * k * n..(i + 1) * k * n],
                        false,
                    );
                }
                accumulate(grads, b, db);
            }
        }
        Permute(a, axes) => {
            let mut inv = vec![0; axes.len()];
            for (i, &ax) in axes.iter().enumerate() {
                inv[ax] = i;
            }
            let (da, _) = permute_data(g, out.shape(), &inv);
            accumulate(grads, a, da);
        }
        Reshape(a) => accumulate(grads, a, g.to_vec()),
        SumAll(a) => accumulate(grads, a, vec![g[0]; a.value.numel()]),
        MeanAll(a) => {
            let n = a.value.numel().max(1) as f64;
            accumulate(grads, a, vec![g[0] / n; a.value.numel()]);
        }
        SumLast(a) => {
            let n = last_dim(a.shape());
            let da = g.iter().flat_map(|&gk| std::iter::repeat_n(gk, n)).collect();
            accumulate(grads, a, da);
        }
        DotLast(a, b) => {
            let n = last_dim(a.shape());
            let spread = |other: &Var| -> Vec<f64> {
                other
                    .value
                    .rows()
                    .zip(g)
                    .flat_map(|(row, &gk)| row.iter().map(move |x| x * gk))
                    .collect()
            };
            debug_assert_eq!(g.len() * n, a.value.numel());
            if a.requires_grad() {
                accumulate(grads, a, spread(b));
            }
            if b.requires_grad() {
                accumulate(grads, b, spread(a));
            }
        }
        MulLast(a, s) => {
            let n = last_dim(a.shape());
            if a.requires_grad() {
                let da = g
                    .chunks(n)
                    .zip(s.data())
                    .flat_map(|(row, &k)| row.iter().map(move |x| x * k))
                    .collect();
                accumulate(grads, a, da);
            }
            if s.requires_grad() {
                let ds = g.chunks(n).zip(a.value.rows()).map(|(gr, ar)| super::dot(gr, ar)).collect();
                accumulate(grads, s, ds);
            }
        }
        Normalize(a, eps) => {
            let n = last_dim(a.shape());
            let mut da = vec![0.0; g.len()];
            for ((dr, gr), (ar, yr)) in da
                .chunks_mut(n)
                .zip(g.chunks(n))
                .zip(a.value.rows().zip(out.rows()))
            {
                let nv = super::norm(ar);
                if nv > *eps {
                    let gy = super::dot(gr, yr);
                    for p in 0..n {
                        dr[p] = (gr[p] - yr[p] * gy) / nv;
                    }
                } else {
                    for p in 0..n {
                        dr[p] = gr[p] / eps;
                    }
                }
            }
            accumulate(grads, a, da);
        }
        NormLast(a, eps) => {
            let da = a
                .value
                .rows()
                .zip(out.data())
                .zip(g)
                .flat_map(|((row, &nv), &gk)| {
                    let d = nv.max(*eps);
                    row.iter().map(move |x| gk * x / d)
                })
                .collect();
            accumulate(grads, a, da);
        }
        Softmax(a, axis) => {
            let (outer, len, inner) = axis_split(out.shape(), *axis);
            let y = out.data();
            let mut da = vec![0.0; g.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let at = |j: usize| (o * len + j) * inner + i;
                    let s: f64 = (0..len).map(|j| g[at(j)] * y[at(j)]).sum();
                    for j in 0..len {
                        da[at(j)] = y[at(j)] * (g[at(j)] - s);
                    }
                }
            }
            accumulate(grads, a, da);
        }
        Embedding(table, indices) => {
            let d = table.shape()[1];
            let mut dt = vec![0.0; table.value.numel()];
            for (r, &i) in indices.iter().enumerate() {
                for (acc, gk) in dt[i * d..(i + 1) * d].iter_mut().zip(&g[r * d..(r + 1) * d]) {
                    *acc += gk;
                }
            }
            accumulate(grads, table, dt);
        }
        CrossEntropy(logits, targets) => {
            let scale = g[0] / targets.len().max(1) as f64;
            let mut dl = Vec::with_capacity(logits.value.numel());
            for (row, &t) in logits.value.rows().zip(targets) {
                let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let total: f64 = row.iter().map(|x| (x - mx).exp()).sum();
                for (j, x) in row.iter().enumerate() {
                    let p = (x - mx).exp() / total;
                    dl.push(scale * (p - if j == t { 1.0 } else { 0.0 }));
                }
            }
            accumulate(grads, logits, dl);
        }
        BlockMatVec(x, m) => {
            let n = last_dim(x.shape());
            let channels = if m.shape().len() == 3 { m.shape()[0] } else { 1 };
            let md = m.data();
            if x.requires_grad() {
                let mut dx = vec![0.0; g.len()];
                for (r, (dr, gr)) in dx.chunks_mut(n).zip(g.chunks(n)).enumerate() {
                    let blk = &md[(r % channels) * n * n..][..n * n];
                    for p in 0..n {
                        for q in 0..n {
                            dr[q] += blk[p * n + q] * gr[p];
                        }
                    }
                }
                accumulate(grads, x, dx);
            }
            if m.requires_grad() {
                let mut dm = vec![0.0; m.value.numel()];
                for (r, (gr, xr)) in g.chunks(n).zip(x.value.rows()).enumerate() {
                    let blk = &mut dm[(r % channels) * n * n..][..n * n];
                    for p in 0..n {
                        for q in 0..n {
                            blk[p * n + q] += gr[p] * xr[q];
                        }
                    }
                }
                accumulate(grads, m, dm);
            }
        }
        Conv(x, k, padding) => {
            let d = conv_dims(x.shape(), k.shape()).expect("shapes validated in forward");
            let n = d.n;
            let (xd, kd) = (x.data(), k.data());
            if x.requires_grad() {
                let mut dx = vec![0.0; xd.len()];
                d.for_each(*padding, |xo, ko, yo| {
                    for p in 0..n {
                        let gp = g[yo + p];
                        for q in 0..n {
                            dx[xo + q] += kd[ko + p * n + q] * gp;
                        }
                    }
                });
                accumulate(grads, x, dx);
            }
            if k.requires_grad() {
                let mut dk = vec![0.0; kd.len()];
                d.for_each(*padding, |xo, ko, yo| {
                    for p in 0..n {
                        let gp = g[yo + p];
                        for q in 0..n {
                            dk[ko + p * n + q] += gp * xd[xo + q];
                        }
                    }
                });
                accumulate(grads, k, dk);
            }
        }
        GroupNorm(a, groups, eps) => {
            let gs = last_dim(a.shape()) / groups;
            let mut da = vec![0.0; g.len()];
            for ((dr, gr), (ar, yr)) in da
                .chunks_mut(gs)
                .zip(g.chunks(gs))
                .zip(a.data().chunks(gs).zip(out.data().chunks(gs)))
            {
                let mu = ar.iter().sum::<f64>() / gs as f64;
                let var = ar.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / gs as f64;
                let inv = 1.0 / (var + eps).sqrt();
                let mg = gr.iter().sum::<f64>() / gs as f64;
                let mgy = super::dot(gr, yr) / gs as f64;
                for p in 0..gs {
                    dr[p] = inv * (gr[p] - mg - yr[p] * mgy);
                }
            }
            accumulate(grads, a, da);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_and_orthogonal_rows() {
        let mut tape = Tape::new();
        let eye = tape.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let m = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let y = tape.matmul(&eye, &m).unwrap();
        assert_eq!(y.data(), &[1.0, 2.0, 3.0, 4.0]);

        let a = tape.constant(t(&[1, 2], &[1.0, 0.0]));
        let b = tape.constant(t(&[2, 1], &[0.0, 5.0]));
        assert_eq!(tape.matmul(&a, &b).unwrap().data(), &[0.0]);
    }

    #[test]
    fn matmul_rejects_inner_mismatch() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros([2, 3]));
        let b = tape.constant(Tensor::zeros([2, 2]));
        assert!(matches!(tape.matmul(&a, &b), Err(Error::Shape { .. })));
    }

    #[test]
    fn normalize_examples() {
        let mut tape = Tape::new();
        let v = tape.constant(t(&[2], &[3.0, 4.0]));
        let y = tape.normalize(&v, 1e-12);
        assert!((y.data()[0] - 0.6).abs() < 1e-15 && (y.data()[1] - 0.8).abs() < 1e-15);
        let z = tape.constant(t(&[2], &[0.0, 0.0]));
        assert_eq!(tape.normalize(&z, 1e-12).data(), &[0.0, 0.0]);
    }

    #[test]
    fn softmax_examples() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[2], &[0.0, 0.0]));
        assert_eq!(tape.softmax(&a, 0).unwrap().data(), &[0.5, 0.5]);
        let b = tape.constant(t(&[2], &[1000.0, 0.0]));
        let y = tape.softmax(&b, 0).unwrap();
        assert!((y.data()[0] - 1.0).abs() < 1e-12 && y.data()[1].abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_uniform_is_ln3() {
        let mut tape = Tape::new();
        let l = tape.constant(t(&[1, 3], &[0.0, 0.0, 0.0]));
        let ce = tape.cross_entropy(&l, &[1]).unwrap();
        assert!((ce.value().item().unwrap() - 3f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn gather_returns_row() {
        let mut tape = Tape::new();
        let e = tape.constant(Tensor::from_fn([4, 3], |i| i as f64));
        let r = tape.embedding(&e, &[2]).unwrap();
        assert_eq!(r.data(), &[6.0, 7.0, 8.0]);
        assert!(tape.embedding(&e, &[4]).is_err());
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[3], &[1.0, -2.0, 0.5]));
        let s = tape.sum(&x);
        let g = tape.backward(&s).unwrap();
        assert_eq!(g.wrt(&x).unwrap().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn norm_of_normalized_has_zero_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[4], &[0.3, -1.2, 2.0, 0.7]));
        let y = tape.normalize(&x, 1e-12);
        let sq = tape.dot_last(&y, &y).unwrap();
        let g = tape.backward(&sq).unwrap();
        assert!(g.wrt(&x).unwrap().data().iter().all(|v| v.abs() < 1e-10));
    }

    #[test]
    fn backward_twice_is_an_error_until_reset() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2], &[1.0, 2.0]));
        let s = tape.sum(&x);
        tape.backward(&s).unwrap();
        assert!(matches!(tape.backward(&s), Err(Error::Contract(_))));
        tape.zero_grad();
        assert!(tape.backward(&s).is_ok());
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2], &[1.0, 2.0]));
        let y = tape.scale(&x, 2.0);
        assert!(matches!(tape.backward(&y), Err(Error::Contract(_))));
    }

    #[test]
    fn no_grad_tape_records_nothing() {
        let mut tape = Tape::no_grad();
        let x = tape.leaf(t(&[2], &[1.0, 2.0]));
        let y = tape.scale(&x, 2.0);
        assert!(!y.requires_grad());
        assert!(tape.is_empty());
    }

    #[test]
    fn params_are_memoised() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::ones([2]));
        let mut tape = Tape::new();
        let a = tape.param(&store, id);
        let b = tape.param(&store, id);
        assert_eq!(a.id(), b.id());
        let s = tape.add(&a, &b).unwrap();
        let s = tape.sum(&s);
        let g = tape.backward(&s).unwrap();
        g.accumulate_into(&mut store);
        assert_eq!(store.grad(id).data(), &[2.0, 2.0]);
    }

    #[test]
    fn permute_roundtrip() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_fn([2, 3, 4], |i| i as f64));
        let y = tape.permute(&x, &[2, 0, 1]).unwrap();
        assert_eq!(y.shape(), &[4, 2, 3]);
        assert_eq!(y.value().at(&[3, 1, 2]), x.value().at(&[1, 2, 3]));
        let z = tape.permute(&y, &[1, 2, 0]).unwrap();
        assert_eq!(z.value(), x.value());
        assert!(tape.permute(&x, &[0, 0, 1]).is_err());
    }

    #[test]
    fn even_kernel_rejected() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros([1, 1, 4, 4, 2]));
        let k = tape.constant(Tensor::zeros([1, 1, 2, 2, 2, 2]));
        assert!(matches!(tape.conv2d(&x, &k, Padding::Zero), Err(Error::Param(_))));
    }
}
