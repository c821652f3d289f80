use std::collections::HashMap;
use std::rc::Rc;

use super::{dot, matmul_into, matmul_nt_into, matmul_tn_into, Tensor};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A sparse linear map between row sets: `out[o] += w * in[i]` for every
/// `(o, i, w)` entry. Row widths are the trailing dimension of the input.
///
/// RoIAlign, the box splat and the RoI detection head are all expressed as
/// row mixes over the token matrix, so they share one backward rule.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RowMix {
    pub out_rows: usize,
    pub entries: Vec<(usize, usize, f64)>,
}

impl RowMix {
    pub fn new(out_rows: usize) -> Self {
        RowMix { out_rows, entries: Vec::new() }
    }

    pub fn push(&mut self, out_row: usize, in_row: usize, weight: f64) {
        if weight != 0.0 {
            self.entries.push((out_row, in_row, weight));
        }
    }

    /// Applies the map to a plain tensor of shape `[rows, d]`.
    pub fn apply(&self, input: &Tensor) -> Tensor {
        let d = input.last_dim();
        let mut out = Tensor::zeros(&[self.out_rows, d]);
        for &(o, i, w) in &self.entries {
            let src = input.row(i);
            for (dst, s) in out.row_mut(o).iter_mut().zip(src) {
                *dst += w * s;
            }
        }
        out
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param,
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    MulConst(Var, Rc<Tensor>),
    MulCol(Var, Var),
    Scale(Var, f64),
    Transpose(Var),
    Reshape(Var),
    Softmax(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    Gelu(Var),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    GatherRows(Var, Rc<Vec<usize>>),
    RowMix(Var, Rc<RowMix>),
    GroupMax(Var, Vec<usize>),
    RowSum(Var),
    SumAll(Var),
    CrossEntropy(Var, usize, Vec<f64>),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records a forward computation for reverse-mode differentiation.
///
/// Node ids grow monotonically, so the record order is a topological order
/// and the backward pass is a single reverse sweep.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    bound: HashMap<ParamId, Var>,
}

/// Gradient buffers produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: Vec<(ParamId, Var)>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradients for every bound parameter, in the parameter store's order.
    pub fn param_grads(&self) -> Vec<(ParamId, &Tensor)> {
        let mut out: Vec<_> = self
            .params
            .iter()
            .filter_map(|(id, v)| self.get(*v).map(|g| (*id, g)))
            .collect();
        out.sort_by_key(|(id, _)| *id);
        out
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Binds a stored parameter as a differentiable leaf. Repeated binds of
    /// the same parameter return the same node, so a tape must only ever
    /// see one store.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(v) = self.bound.get(&id) {
            return *v;
        }
        let v = self.push(store.get(id).clone(), Op::Param, true);
        self.bound.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::MatMul(a, b), rg))
    }

    /// `a · bᵀ` without materializing the transpose.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).dims2()?;
        let (n, k2) = self.value(b).dims2()?;
        if k != k2 {
            return Err(Error::shape(format!(
                "matmul_nt inner dims disagree: {:?} x {:?}ᵀ",
                self.shape(a),
                self.shape(b)
            )));
        }
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let arow = &ad[i * k..(i + 1) * k];
            for j in 0..n {
                out[i * n + j] = dot(arow, &bd[j * k..(j + 1) * k]);
            }
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMulNT(a, b), rg))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(format!(
                "{what}: shapes {:?} and {:?} differ",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let mut value = self.value(a).clone();
        value.add_assign(self.value(b));
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    /// Adds a `[d]` vector to every trailing-dim slice of `x`.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let d = self.value(x).last_dim();
        if self.value(b).len() != d {
            return Err(Error::shape(format!(
                "add_row: bias {:?} does not match trailing dim of {:?}",
                self.shape(b),
                self.shape(x)
            )));
        }
        let mut value = self.value(x).clone();
        let bias = self.value(b).data().to_vec();
        for r in 0..value.rows() {
            for (v, bb) in value.row_mut(r).iter_mut().zip(&bias) {
                *v += bb;
            }
        }
        let rg = self.rg(&[x, b]);
        Ok(self.push(value, Op::AddRow(x, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Mul(a, b), rg))
    }

    /// Elementwise product with a constant tensor (masks, dropout).
    pub fn mul_const(&mut self, a: Var, c: Tensor) -> Result<Var> {
        if self.value(a).len() != c.len() {
            return Err(Error::shape(format!(
                "mul_const: {:?} vs constant {:?}",
                self.shape(a),
                c.shape()
            )));
        }
        let data = self.value(a).data().iter().zip(c.data()).map(|(x, y)| x * y).collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::MulConst(a, Rc::new(c)), rg))
    }

    /// Scales each row of `x: [R, d]` by the matching entry of `c: [R, 1]`.
    pub fn mul_col(&mut self, x: Var, c: Var) -> Result<Var> {
        let rows = self.value(x).rows();
        if self.value(c).len() != rows {
            return Err(Error::shape(format!(
                "mul_col: column {:?} does not match rows of {:?}",
                self.shape(c),
                self.shape(x)
            )));
        }
        let mut value = self.value(x).clone();
        let col = self.value(c).data().to_vec();
        for (r, s) in col.iter().enumerate() {
            for v in value.row_mut(r) {
                *v *= s;
            }
        }
        let rg = self.rg(&[x, c]);
        Ok(self.push(value, Op::MulCol(x, c), rg))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let mut value = self.value(a).clone();
        value.scale_inplace(s);
        let rg = self.rg(&[a]);
        self.push(value, Op::Scale(a, s), rg)
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).transpose2()?;
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::Transpose(a), rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).clone().reshape(shape)?;
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::Reshape(a), rg))
    }

    /// Softmax over the trailing dimension, max-subtracted.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let input = self.value(x);
        if input.has_non_finite() {
            return Err(Error::numeric("softmax input contains NaN or infinity"));
        }
        let mut value = input.clone();
        for r in 0..value.rows() {
            softmax_inplace(value.row_mut(r));
        }
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::Softmax(x), rg))
    }

    /// LayerNorm over the trailing dimension with biased variance.
    pub fn layernorm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let d = self.value(x).last_dim();
        if self.value(gamma).len() != d || self.value(beta).len() != d {
            return Err(Error::shape(format!(
                "layernorm: affine params {:?}/{:?} vs input {:?}",
                self.shape(gamma),
                self.shape(beta),
                self.shape(x)
            )));
        }
        let input = self.value(x);
        let rows = input.rows();
        let mut xhat = vec![0.0; input.len()];
        let mut rstd = vec![0.0; rows];
        for r in 0..rows {
            let row = input.row(r);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let s = 1.0 / (var + eps).sqrt();
            rstd[r] = s;
            for (j, v) in row.iter().enumerate() {
                xhat[r * d + j] = (v - mean) * s;
            }
        }
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut out = vec![0.0; xhat.len()];
        for (i, o) in out.iter_mut().enumerate() {
            let j = i % d;
            *o = xhat[i] * g[j] + b[j];
        }
        let value = Tensor::new(input.shape().to_vec(), out)?;
        let rg = self.rg(&[x, gamma, beta]);
        Ok(self.push(value, Op::LayerNorm { x, gamma, beta, xhat, rstd }, rg))
    }

    /// GELU, tanh approximation: `0.5·x·(1 + tanh(√(2/π)·(x + 0.044715·x³)))`.
    pub fn gelu(&mut self, x: Var) -> Var {
        let data = self.value(x).data().iter().map(|&v| gelu(v)).collect();
        let value = Tensor::new(self.shape(x).to_vec(), data).expect("same shape");
        let rg = self.rg(&[x]);
        self.push(value, Op::Gelu(x), rg)
    }

    /// Stacks `[r_i, d]` inputs into `[Σr_i, d]`.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let d = match parts.first() {
            Some(p) => self.value(*p).last_dim(),
            None => return Err(Error::shape("concat_rows of nothing")),
        };
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            let t = self.value(*p);
            if t.last_dim() != d {
                return Err(Error::shape(format!("concat_rows: width {} vs {}", t.last_dim(), d)));
            }
            rows += t.rows();
            data.extend_from_slice(t.data());
        }
        let rg = self.rg(parts);
        Ok(self.push(Tensor::new(vec![rows, d], data)?, Op::ConcatRows(parts.to_vec()), rg))
    }

    /// Joins `[R, c_i]` inputs side by side into `[R, Σc_i]`.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = match parts.first() {
            Some(p) => self.value(*p).rows(),
            None => return Err(Error::shape("concat_cols of nothing")),
        };
        let widths: Vec<usize> = parts.iter().map(|p| self.value(*p).last_dim()).collect();
        let total: usize = widths.iter().sum();
        let mut data = vec![0.0; rows * total];
        let mut off = 0;
        for (p, w) in parts.iter().zip(&widths) {
            let t = self.value(*p);
            if t.rows() != rows {
                return Err(Error::shape(format!("concat_cols: {} rows vs {}", t.rows(), rows)));
            }
            for r in 0..rows {
                data[r * total + off..r * total + off + w].copy_from_slice(t.row(r));
            }
            off += w;
        }
        let rg = self.rg(parts);
        Ok(self.push(Tensor::new(vec![rows, total], data)?, Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(x);
        let d = t.last_dim();
        if start + len > t.rows() {
            return Err(Error::shape(format!("slice_rows {start}+{len} out of {}", t.rows())));
        }
        let data = t.data()[start * d..(start + len) * d].to_vec();
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(vec![len, d], data)?, Op::SliceRows(x, start), rg))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(x);
        let d = t.last_dim();
        if start + len > d {
            return Err(Error::shape(format!("slice_cols {start}+{len} out of {d}")));
        }
        let rows = t.rows();
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&t.row(r)[start..start + len]);
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(vec![rows, len], data)?, Op::SliceCols(x, start), rg))
    }

    /// `out[i] = x[idx[i]]`; rows may repeat.
    pub fn gather_rows(&mut self, x: Var, idx: Rc<Vec<usize>>) -> Result<Var> {
        let t = self.value(x);
        let d = t.last_dim();
        let mut data = Vec::with_capacity(idx.len() * d);
        for &i in idx.iter() {
            if i >= t.rows() {
                return Err(Error::shape(format!("gather_rows index {i} out of {}", t.rows())));
            }
            data.extend_from_slice(t.row(i));
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(vec![idx.len(), d], data)?, Op::GatherRows(x, idx), rg))
    }

    pub fn row_mix(&mut self, x: Var, mix: Rc<RowMix>) -> Result<Var> {
        let t = self.value(x);
        if let Some(&(o, i, _)) = mix.entries.iter().find(|(o, i, _)| *o >= mix.out_rows || *i >= t.rows()) {
            return Err(Error::shape(format!(
                "row_mix entry ({o}, {i}) outside {}x{} map",
                mix.out_rows,
                t.rows()
            )));
        }
        let value = mix.apply(t);
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::RowMix(x, mix), rg))
    }

    /// Columnwise max over consecutive groups of `group` rows.
    pub fn group_max(&mut self, x: Var, group: usize) -> Result<Var> {
        let t = self.value(x);
        let (rows, d) = (t.rows(), t.last_dim());
        if group == 0 || rows % group != 0 {
            return Err(Error::shape(format!("group_max: {rows} rows not divisible by {group}")));
        }
        let groups = rows / group;
        let mut out = vec![f64::NEG_INFINITY; groups * d];
        let mut arg = vec![0usize; groups * d];
        for g in 0..groups {
            for r in g * group..(g + 1) * group {
                for (j, &v) in t.row(r).iter().enumerate() {
                    if v > out[g * d + j] {
                        out[g * d + j] = v;
                        arg[g * d + j] = r;
                    }
                }
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(vec![groups, d], out)?, Op::GroupMax(x, arg), rg))
    }

    /// Sums each row: `[R, d] -> [R, 1]`.
    pub fn row_sum(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let data: Vec<f64> = (0..t.rows()).map(|r| t.row(r).iter().sum()).collect();
        let n = data.len();
        let rg = self.rg(&[x]);
        self.push(Tensor::new(vec![n, 1], data).expect("shape"), Op::RowSum(x), rg)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::SumAll(x), rg)
    }

    /// Softmax cross-entropy of a single logit vector against a class index.
    pub fn cross_entropy(&mut self, logits: Var, target: usize) -> Result<Var> {
        let t = self.value(logits);
        if target >= t.len() {
            return Err(Error::shape(format!("target class {target} out of {} logits", t.len())));
        }
        if t.has_non_finite() {
            return Err(Error::numeric("non-finite logits"));
        }
        let mut p = t.data().to_vec();
        softmax_inplace(&mut p);
        let loss = -p[target].max(f64::MIN_POSITIVE).ln();
        let rg = self.rg(&[logits]);
        Ok(self.push(Tensor::scalar(loss), Op::CrossEntropy(logits, target, p), rg))
    }

    /// Linear layer: `x · w + b` with `w: [in, out]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => self.add_row(y, b),
            None => Ok(y),
        }
    }

    /// Reverse sweep from a scalar loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let n = loss.0 + 1;
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.shape(loss), 1.0));

        for i in (0..n).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            self.backprop_node(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        let params = self.bound.iter().map(|(id, v)| (*id, *v)).collect();
        Ok(Gradients { grads, params })
    }

    fn backprop_node(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let gd = g.data();
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.value(*a).dims2().expect("rank 2");
                let n = self.value(*b).last_dim();
                if let Some(da) = self.grad_buf(*a, grads) {
                    matmul_nt_into(gd, self.value(*b).data(), da, m, k, n);
                }
                if let Some(db) = self.grad_buf(*b, grads) {
                    matmul_tn_into(self.value(*a).data(), gd, db, m, k, n);
                }
            }
            Op::MatMulNT(a, b) => {
                let (m, k) = self.value(*a).dims2().expect("rank 2");
                let n = self.value(*b).rows();
                if let Some(da) = self.grad_buf(*a, grads) {
                    matmul_into(gd, self.value(*b).data(), da, m, n, k);
                }
                if let Some(db) = self.grad_buf(*b, grads) {
                    matmul_tn_into(gd, self.value(*a).data(), db, m, n, k);
                }
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    if let Some(dv) = self.grad_buf(*v, grads) {
                        axpy(dv, 1.0, gd);
                    }
                }
            }
            Op::AddRow(x, b) => {
                if let Some(dx) = self.grad_buf(*x, grads) {
                    axpy(dx, 1.0, gd);
                }
                if let Some(db) = self.grad_buf(*b, grads) {
                    let d = db.len();
                    for row in gd.chunks(d) {
                        axpy(db, 1.0, row);
                    }
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if let Some(da) = self.grad_buf(*a, grads) {
                    for ((d, gg), y) in da.iter_mut().zip(gd).zip(bv) {
                        *d += gg * y;
                    }
                }
                if let Some(db) = self.grad_buf(*b, grads) {
                    for ((d, gg), x) in db.iter_mut().zip(gd).zip(av) {
                        *d += gg * x;
                    }
                }
            }
            Op::MulConst(a, c) => {
                if let Some(da) = self.grad_buf(*a, grads) {
                    for ((d, gg), cv) in da.iter_mut().zip(gd).zip(c.data()) {
                        *d += gg * cv;
                    }
                }
            }
            Op::MulCol(x, c) => {
                let xv = self.value(*x);
                let d = xv.last_dim();
                let cv = self.value(*c).data();
                if let Some(dx) = self.grad_buf(*x, grads) {
                    for (r, s) in cv.iter().enumerate() {
                        axpy(&mut dx[r * d..(r + 1) * d], *s, &gd[r * d..(r + 1) * d]);
                    }
                }
                if let Some(dc) = self.grad_buf(*c, grads) {
                    for (r, dcr) in dc.iter_mut().enumerate() {
                        *dcr += dot(&gd[r * d..(r + 1) * d], xv.row(r));
                    }
                }
            }
            Op::Scale(a, s) => {
                if let Some(da) = self.grad_buf(*a, grads) {
                    axpy(da, *s, gd);
                }
            }
            Op::Transpose(a) => {
                if let Some(da) = self.grad_buf(*a, grads) {
                    let (r, c) = g.dims2().expect("rank 2");
                    for i in 0..r {
                        for j in 0..c {
                            da[j * r + i] += gd[i * c + j];
                        }
                    }
                }
            }
            Op::Reshape(a) => {
                if let Some(da) = self.grad_buf(*a, grads) {
                    axpy(da, 1.0, gd);
                }
            }
            Op::Softmax(x) => {
                if let Some(dx) = self.grad_buf(*x, grads) {
                    let y = &node.value;
                    let d = y.last_dim();
                    for r in 0..y.rows() {
                        let yr = y.row(r);
                        let gr = &gd[r * d..(r + 1) * d];
                        let s = dot(gr, yr);
                        for j in 0..d {
                            dx[r * d + j] += yr[j] * (gr[j] - s);
                        }
                    }
                }
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let d = node.value.last_dim();
                let gam = self.value(*gamma).data().to_vec();
                if let Some(dg) = self.grad_buf(*gamma, grads) {
                    for (i, gg) in gd.iter().enumerate() {
                        dg[i % d] += gg * xhat[i];
                    }
                }
                if let Some(db) = self.grad_buf(*beta, grads) {
                    for row in gd.chunks(d) {
                        axpy(db, 1.0, row);
                    }
                }
                if let Some(dx) = self.grad_buf(*x, grads) {
                    for (r, s) in rstd.iter().enumerate() {
                        let gr = &gd[r * d..(r + 1) * d];
                        let xh = &xhat[r * d..(r + 1) * d];
                        let mut m1 = 0.0;
                        let mut m2 = 0.0;
                        for j in 0..d {
                            let dxh = gr[j] * gam[j];
                            m1 += dxh;
                            m2 += dxh * xh[j];
                        }
                        m1 /= d as f64;
                        m2 /= d as f64;
                        for j in 0..d {
                            dx[r * d + j] += s * (gr[j] * gam[j] - m1 - xh[j] * m2);
                        }
                    }
                }
            }
            Op::Gelu(x) => {
                if let Some(dx) = self.grad_buf(*x, grads) {
                    for ((d, gg), v) in dx.iter_mut().zip(gd).zip(self.value(*x).data()) {
                        *d += gg * gelu_grad(*v);
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for p in parts {
                    let len = self.value(*p).len();
                    if let Some(dp) = self.grad_buf(*p, grads) {
                        axpy(dp, 1.0, &gd[off..off + len]);
                    }
                    off += len;
                }
            }
            Op::ConcatCols(parts) => {
                let total = node.value.last_dim();
                let mut off = 0;
                for p in parts {
                    let w = self.value(*p).last_dim();
                    if let Some(dp) = self.grad_buf(*p, grads) {
                        for (r, row) in dp.chunks_mut(w).enumerate() {
                            axpy(row, 1.0, &gd[r * total + off..r * total + off + w]);
                        }
                    }
                    off += w;
                }
            }
            Op::SliceRows(x, start) => {
                let d = node.value.last_dim();
                if let Some(dx) = self.grad_buf(*x, grads) {
                    axpy(&mut dx[start * d..start * d + gd.len()], 1.0, gd);
                }
            }
            Op::SliceCols(x, start) => {
                let full = self.value(*x).last_dim();
                let w = node.value.last_dim();
                if let Some(dx) = self.grad_buf(*x, grads) {
                    for (r, row) in gd.chunks(w).enumerate() {
                        axpy(&mut dx[r * full + start..r * full + start + w], 1.0, row);
                    }
                }
            }
            Op::GatherRows(x, idx) => {
                let d = node.value.last_dim();
                if let Some(dx) = self.grad_buf(*x, grads) {
                    for (o, &i) in idx.iter().enumerate() {
                        axpy(&mut dx[i * d..(i + 1) * d], 1.0, &gd[o * d..(o + 1) * d]);
                    }
                }
            }
            Op::RowMix(x, mix) => {
                let d = node.value.last_dim();
                if let Some(dx) = self.grad_buf(*x, grads) {
                    for &(o, i, w) in &mix.entries {
                        axpy(&mut dx[i * d..(i + 1) * d], w, &gd[o * d..(o + 1) * d]);
                    }
                }
            }
            Op::GroupMax(x, arg) => {
                let d = node.value.last_dim();
                if let Some(dx) = self.grad_buf(*x, grads) {
                    for (k, &r) in arg.iter().enumerate() {
                        dx[r * d + k % d] += gd[k];
                    }
                }
            }
            Op::RowSum(x) => {
                let d = self.value(*x).last_dim();
                if let Some(dx) = self.grad_buf(*x, grads) {
                    for (r, gg) in gd.iter().enumerate() {
                        for v in &mut dx[r * d..(r + 1) * d] {
                            *v += gg;
                        }
                    }
                }
            }
            Op::SumAll(x) => {
                if let Some(dx) = self.grad_buf(*x, grads) {
                    for v in dx.iter_mut() {
                        *v += gd[0];
                    }
                }
            }
            Op::CrossEntropy(x, target, p) => {
                if let Some(dx) = self.grad_buf(*x, grads) {
                    for (j, (d, pj)) in dx.iter_mut().zip(p).enumerate() {
                        let onehot = if j == *target { 1.0 } else { 0.0 };
                        *d += gd[0] * (pj - onehot);
                    }
                }
            }
        }
    }

    fn grad_buf<'g>(&self, v: Var, grads: &'g mut [Option<Tensor>]) -> Option<&'g mut [f64]> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let slot = &mut grads[v.0];
        if slot.is_none() {
            *slot = Some(Tensor::zeros(self.shape(v)));
        }
        slot.as_mut().map(Tensor::data_mut)
    }
}

#[inline]
fn axpy(dst: &mut [f64], a: f64, src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += a * s;
    }
}

pub(crate) fn softmax_inplace(row: &mut [f64]) {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        z += *v;
    }
    for v in row.iter_mut() {
        *v /= z;
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn softmax_uniform_and_stable() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[3], &[0.0, 0.0, 0.0]));
        let y = tape.softmax(x).unwrap();
        for v in tape.value(y).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let x = tape.constant(t(&[2], &[1000.0, 0.0]));
        let y = tape.softmax(x).unwrap();
        assert!((tape.value(y).data()[0] - 1.0).abs() < 1e-12);
        assert!(tape.value(y).data()[1].abs() < 1e-12);
    }

    #[test]
    fn softmax_nan_is_numeric_error() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[2], &[f64::NAN, 0.0]));
        assert!(matches!(tape.softmax(x), Err(Error::Numeric(_))));
    }

    #[test]
    fn layernorm_cases() {
        let mut tape = Tape::new();
        let g = tape.constant(Tensor::full(&[3], 1.0));
        let b = tape.constant(Tensor::zeros(&[3]));
        let x = tape.constant(Tensor::full(&[1, 3], 4.2));
        let y = tape.layernorm(x, g, b, 1e-5).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0, 0.0, 0.0]);

        let g = tape.constant(Tensor::full(&[2], 1.0));
        let b = tape.constant(Tensor::zeros(&[2]));
        let x = tape.constant(t(&[1, 2], &[1.0, 3.0]));
        let y = tape.layernorm(x, g, b, 1e-300).unwrap();
        let v = tape.value(y).data();
        assert!((v[0] + 1.0).abs() < 1e-12 && (v[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn gelu_values() {
        assert_eq!(gelu(0.0), 0.0);
        assert!((gelu(20.0) - 20.0).abs() < 1e-12);
        assert!(gelu(-20.0).abs() < 1e-12);
    }

    #[test]
    fn backward_sum_and_square() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2], &[1.0, 2.0]), true);
        let s = tape.sum(x);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[1.0, 1.0]);

        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2], &[1.0, 2.0]), true);
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum(sq);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2], &[1.0, 2.0]), true);
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2], &[1.0, 2.0]), true);
        let c = tape.constant(t(&[2], &[3.0, 4.0]));
        let y = tape.mul(x, c).unwrap();
        let s = tape.sum(y);
        let g = tape.backward(s).unwrap();
        assert!(g.get(c).is_none());
        assert_eq!(g.get(x).unwrap().data(), &[3.0, 4.0]);
    }

    #[test]
    fn group_max_routes_gradient_to_argmax() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[4, 2], &[1.0, 5.0, 3.0, 2.0, 0.0, -1.0, -2.0, 7.0]), true);
        let y = tape.group_max(x, 2).unwrap();
        assert_eq!(tape.value(y).data(), &[3.0, 5.0, 0.0, 7.0]);
        let s = tape.sum(y);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[0.0, 1.0, 1.0, 0.0, 1.0, 0.0, 0.0, 1.0]);
    }
}
