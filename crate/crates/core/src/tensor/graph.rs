//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation as a node holding its forward value.
//! Nodes are appended in evaluation order, so the tape is already a
//! topological order and [`Graph::backward`] is a single reverse sweep.

use super::kernels::{self, check_suffix};
use super::{numel, ParamId, ParamStore, Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<F: Real> {
    Leaf,
    Param(ParamId),
    MatMul { a: Var, b: Var, trans_b: bool },
    Bmm { a: Var, b: Var, trans_b: bool },
    Add(Var, Var),
    AddBcast(Var, Var),
    Mul(Var, Var),
    MulBcast(Var, Var),
    Scale(Var, F),
    Reshape(Var),
    Permute(Var, Vec<usize>),
    SumLast(Var),
    MeanAxis(Var, usize),
    Softmax { x: Var, tau: F },
    LogSoftmax { x: Var, tau: F },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<F>, rstd: Vec<F> },
    Gelu(Var),
    Sigmoid(Var),
    L2Normalize { x: Var, norms: Vec<F> },
    Concat(Vec<Var>),
    Stack { parts: Vec<Var>, axis: usize },
    FillRows { kept: Option<Var>, idx: Vec<usize>, fill: Var },
    Im2Col { x: Var, h: usize, w: usize },
    Upsample { x: Var, h: usize, w: usize },
    BceLogits { x: Var, target: Tensor<F> },
    DotConst { x: Var, c: Tensor<F> },
    SumAll(Var),
    MeanAll(Var),
}

#[derive(Debug)]
struct Node<F: Real> {
    value: Tensor<F>,
    op: Op<F>,
    needs_grad: bool,
}

/// Recording of a forward computation.
#[derive(Debug)]
pub struct Graph<F: Real = f32> {
    nodes: Vec<Node<F>>,
    check_finite: bool,
}

impl<F: Real> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of a scalar with respect to leaves and parameters.
#[derive(Debug)]
pub struct Gradients<F: Real> {
    grads: Vec<Option<Tensor<F>>>,
}

impl<F: Real> Gradients<F> {
    pub fn wrt(&self, v: Var) -> Option<&Tensor<F>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

impl<F: Real> Graph<F> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            check_finite: false,
        }
    }

    /// Fail any op whose output contains NaN or infinity.
    pub fn with_finite_checks(mut self) -> Self {
        self.check_finite = true;
        self
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, needs_grad: bool) -> Result<Var> {
        if self.check_finite && !value.all_finite() {
            return Err(Error::Numeric(format!("non-finite output from {}", op_name(&op))));
        }
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Constant input; no gradient is tracked.
    pub fn input(&mut self, t: Tensor<F>) -> Var {
        self.leaf(t, false)
    }

    pub fn leaf(&mut self, t: Tensor<F>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            needs_grad: requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Parameter node; frozen parameters do not receive gradients.
    pub fn param(&mut self, store: &ParamStore<F>, id: ParamId) -> Var {
        let p = store.get(id);
        self.nodes.push(Node {
            value: p.value.clone(),
            op: Op::Param(id),
            needs_grad: !p.frozen,
        });
        Var(self.nodes.len() - 1)
    }

    /// `x @ w` over the trailing axis of `x`.
    pub fn matmul(&mut self, x: Var, w: Var) -> Result<Var> {
        let y = kernels::matmul(self.value(x), self.value(w), false)?;
        let ng = self.ng(x) || self.ng(w);
        self.push(y, Op::MatMul { a: x, b: w, trans_b: false }, ng)
    }

    /// `x @ w^T` over the trailing axis of `x`.
    pub fn matmul_t(&mut self, x: Var, w: Var) -> Result<Var> {
        let y = kernels::matmul(self.value(x), self.value(w), true)?;
        let ng = self.ng(x) || self.ng(w);
        self.push(y, Op::MatMul { a: x, b: w, trans_b: true }, ng)
    }

    /// `x @ w + b`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => self.add_bcast(y, b),
            None => Ok(y),
        }
    }

    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = kernels::bmm(self.value(a), self.value(b), false)?;
        let ng = self.ng(a) || self.ng(b);
        self.push(y, Op::Bmm { a, b, trans_b: false }, ng)
    }

    pub fn bmm_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = kernels::bmm(self.value(a), self.value(b), true)?;
        let ng = self.ng(a) || self.ng(b);
        self.push(y, Op::Bmm { a, b, trans_b: true }, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::shape("add", va.shape(), vb.shape()));
        }
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x + y).collect();
        let y = Tensor::new(va.shape().to_vec(), data)?;
        let ng = self.ng(a) || self.ng(b);
        self.push(y, Op::Add(a, b), ng)
    }

    /// `a + b` where `b`'s shape is a suffix of `a`'s.
    pub fn add_bcast(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        let inner = check_suffix("add_bcast", va.shape(), vb.shape())?;
        let mut data = va.data().to_vec();
        if inner > 0 {
            for chunk in data.chunks_mut(inner) {
                for (x, &y) in chunk.iter_mut().zip(vb.data()) {
                    *x += y;
                }
            }
        }
        let y = Tensor::new(va.shape().to_vec(), data)?;
        let ng = self.ng(a) || self.ng(b);
        self.push(y, Op::AddBcast(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::shape("mul", va.shape(), vb.shape()));
        }
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x * y).collect();
        let y = Tensor::new(va.shape().to_vec(), data)?;
        let ng = self.ng(a) || self.ng(b);
        self.push(y, Op::Mul(a, b), ng)
    }

    /// `a * b` where `b`'s shape is a suffix of `a`'s.
    pub fn mul_bcast(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        let inner = check_suffix("mul_bcast", va.shape(), vb.shape())?;
        let mut data = va.data().to_vec();
        if inner > 0 {
            for chunk in data.chunks_mut(inner) {
                for (x, &y) in chunk.iter_mut().zip(vb.data()) {
                    *x *= y;
                }
            }
        }
        let y = Tensor::new(va.shape().to_vec(), data)?;
        let ng = self.ng(a) || self.ng(b);
        self.push(y, Op::MulBcast(a, b), ng)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let c = F::of(c);
        let y = self.value(x).map(|v| v * c);
        let ng = self.ng(x);
        self.push(y, Op::Scale(x, c), ng)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let y = self.value(x).clone().reshape(shape.to_vec())?;
        let ng = self.ng(x);
        self.push(y, Op::Reshape(x), ng)
    }

    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let y = kernels::permute(self.value(x), axes)?;
        let ng = self.ng(x);
        self.push(y, Op::Permute(x, axes.to_vec()), ng)
    }

    /// Sum over the trailing axis, dropping it.
    pub fn sum_last(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        if v.rank() == 0 {
            return Err(Error::Usage("sum_last on a scalar".into()));
        }
        let n = v.last_dim();
        let data: Vec<F> = if n == 0 {
            vec![F::zero(); v.numel()]
        } else {
            v.data().chunks(n).map(|c| c.iter().copied().sum()).collect()
        };
        let shape = v.shape()[..v.rank() - 1].to_vec();
        let y = Tensor::new(shape, data)?;
        let ng = self.ng(x);
        self.push(y, Op::SumLast(x), ng)
    }

    /// Mean over `axis`, dropping it.
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let v = self.value(x);
        if axis >= v.rank() || v.shape()[axis] == 0 {
            return Err(Error::shape("mean_axis", v.shape(), &[axis]));
        }
        let (outer, mid, inner) = split_axis(v.shape(), axis);
        let inv = F::one() / F::of(mid as f64);
        let mut data = vec![F::zero(); outer * inner];
        for o in 0..outer {
            for m in 0..mid {
                let src = &v.data()[(o * mid + m) * inner..(o * mid + m + 1) * inner];
                for (d, &s) in data[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        for d in &mut data {
            *d *= inv;
        }
        let mut shape = v.shape().to_vec();
        shape.remove(axis);
        let y = Tensor::new(shape, data)?;
        let ng = self.ng(x);
        self.push(y, Op::MeanAxis(x, axis), ng)
    }

    /// Softmax over the trailing axis at temperature `tau`.
    pub fn softmax(&mut self, x: Var, tau: f64) -> Result<Var> {
        if !(tau > 0.0) {
            return Err(Error::Param(format!("softmax temperature must be > 0, got {tau}")));
        }
        let tau = F::of(tau);
        let y = kernels::softmax_last(self.value(x), tau);
        let ng = self.ng(x);
        self.push(y, Op::Softmax { x, tau }, ng)
    }

    pub fn log_softmax(&mut self, x: Var, tau: f64) -> Result<Var> {
        if !(tau > 0.0) {
            return Err(Error::Param(format!("softmax temperature must be > 0, got {tau}")));
        }
        let tau = F::of(tau);
        let y = kernels::log_softmax_last(self.value(x), tau);
        let ng = self.ng(x);
        self.push(y, Op::LogSoftmax { x, tau }, ng)
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (vx, vg, vb) = (self.value(x), self.value(gamma), self.value(beta));
        let d = vx.last_dim();
        if d == 0 || vg.shape() != [d] || vb.shape() != [d] {
            return Err(Error::shape("layer_norm", vx.shape(), vg.shape()));
        }
        let rows = vx.numel() / d;
        let eps = F::of(eps);
        let inv_d = F::one() / F::of(d as f64);
        let mut xhat = vec![F::zero(); vx.numel()];
        let mut rstd = vec![F::zero(); rows];
        let mut out = vec![F::zero(); vx.numel()];
        for r in 0..rows {
            let row = &vx.data()[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<F>() * inv_d;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() * inv_d;
            let rs = F::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for i in 0..d {
                let h = (row[i] - mean) * rs;
                xhat[r * d + i] = h;
                out[r * d + i] = h * vg.data()[i] + vb.data()[i];
            }
        }
        let y = Tensor::new(vx.shape().to_vec(), out)?;
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        self.push(
            y,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            ng,
        )
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let y = self.value(x).map(kernels::gelu);
        let ng = self.ng(x);
        self.push(y, Op::Gelu(x), ng)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let y = self.value(x).map(kernels::sigmoid);
        let ng = self.ng(x);
        self.push(y, Op::Sigmoid(x), ng)
    }

    /// Divide each trailing-axis vector by its L2 norm. A zero vector maps
    /// to the uniform unit vector and passes no gradient.
    pub fn l2_normalize(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let d = v.last_dim();
        if d == 0 {
            return Err(Error::Usage("l2_normalize over empty axis".into()));
        }
        let mut norms = Vec::with_capacity(v.numel() / d);
        let mut out = v.data().to_vec();
        let uniform = F::one() / F::of(d as f64).sqrt();
        for row in out.chunks_mut(d) {
            let n = row.iter().map(|&a| a * a).sum::<F>().sqrt();
            norms.push(n);
            if n > F::zero() && n.is_finite() {
                for a in row.iter_mut() {
                    *a /= n;
                }
            } else {
                row.iter_mut().for_each(|a| *a = uniform);
            }
        }
        let y = Tensor::new(v.shape().to_vec(), out)?;
        let ng = self.ng(x);
        self.push(y, Op::L2Normalize { x, norms }, ng)
    }

    /// Concatenate along the trailing axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Usage("concat of zero tensors".into()))?;
        let lead = self.shape(*first)[..self.shape(*first).len() - 1].to_vec();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s.len() != lead.len() + 1 || s[..lead.len()] != lead[..] {
                return Err(Error::shape("concat", self.shape(*first), s));
            }
            widths.push(*s.last().unwrap());
        }
        let rows = numel(&lead);
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead;
        shape.push(total);
        let y = Tensor::new(shape, out)?;
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(y, Op::Concat(parts.to_vec()), ng)
    }

    /// Stack equally-shaped tensors along a new axis at position `axis`.
    pub fn stack(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Usage("stack of zero tensors".into()))?;
        let shape0 = self.shape(*first).to_vec();
        if axis > shape0.len() {
            return Err(Error::shape("stack", &shape0, &[axis]));
        }
        for &p in parts {
            if self.shape(p) != shape0.as_slice() {
                return Err(Error::shape("stack", &shape0, self.shape(p)));
            }
        }
        let outer: usize = shape0[..axis].iter().product();
        let inner: usize = shape0[axis..].iter().product();
        let mut out = Vec::with_capacity(outer * inner * parts.len());
        for o in 0..outer {
            for &p in parts {
                out.extend_from_slice(&self.value(p).data()[o * inner..(o + 1) * inner]);
            }
        }
        let mut shape = shape0;
        shape.insert(axis, parts.len());
        let y = Tensor::new(shape, out)?;
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(y, Op::Stack { parts: parts.to_vec(), axis }, ng)
    }

    /// Build an `(n, row_shape...)` tensor whose rows `idx[i]` come from
    /// `kept[i]`; every other row is `fill` broadcast over `row_shape`.
    /// `fill`'s shape must be a suffix of `row_shape`. Rows not listed in
    /// `idx` never read from `kept`.
    pub fn fill_rows(
        &mut self,
        kept: Option<Var>,
        idx: &[usize],
        fill: Var,
        n: usize,
        row_shape: &[usize],
    ) -> Result<Var> {
        let row = numel(row_shape);
        let fill_len = check_suffix("fill_rows", row_shape, self.shape(fill))?;
        match kept {
            Some(k) => {
                let ks = self.shape(k);
                if ks.len() != row_shape.len() + 1 || ks[0] != idx.len() || ks[1..] != *row_shape {
                    return Err(Error::shape("fill_rows", ks, row_shape));
                }
            }
            None if !idx.is_empty() => {
                return Err(Error::Usage("fill_rows: indices given without kept rows".into()))
            }
            None => {}
        }
        if idx.windows(2).any(|w| w[0] >= w[1]) || idx.last().is_some_and(|&i| i >= n) {
            return Err(Error::Usage("fill_rows: indices must be sorted, unique and < n".into()));
        }
        let mut out = Vec::with_capacity(n * row);
        let fv = self.value(fill).data();
        let mut next = 0;
        for r in 0..n {
            if next < idx.len() && idx[next] == r {
                let kv = self.value(kept.unwrap()).data();
                out.extend_from_slice(&kv[next * row..(next + 1) * row]);
                next += 1;
            } else if fill_len > 0 {
                for _ in 0..row / fill_len {
                    out.extend_from_slice(fv);
                }
            }
        }
        let mut shape = vec![n];
        shape.extend_from_slice(row_shape);
        let y = Tensor::new(shape, out)?;
        let ng = self.ng(fill) || kept.is_some_and(|k| self.ng(k));
        self.push(
            y,
            Op::FillRows {
                kept,
                idx: idx.to_vec(),
                fill,
            },
            ng,
        )
    }

    /// 3×3 zero-padded patch extraction on a channel-last `(b, h·w, c)` grid.
    pub fn im2col3x3(&mut self, x: Var, h: usize, w: usize) -> Result<Var> {
        let y = kernels::im2col3x3(self.value(x), h, w)?;
        let ng = self.ng(x);
        self.push(y, Op::Im2Col { x, h, w }, ng)
    }

    /// Nearest-neighbour ×2 upsampling of a channel-last `(b, h·w, c)` grid.
    pub fn upsample2x(&mut self, x: Var, h: usize, w: usize) -> Result<Var> {
        let y = kernels::upsample2x(self.value(x), h, w)?;
        let ng = self.ng(x);
        self.push(y, Op::Upsample { x, h, w }, ng)
    }

    /// Mean binary cross-entropy of `sigmoid(x)` against `target`.
    pub fn bce_with_logits(&mut self, x: Var, target: Tensor<F>) -> Result<Var> {
        let v = self.value(x);
        if v.shape() != target.shape() {
            return Err(Error::shape("bce_with_logits", v.shape(), target.shape()));
        }
        let n = F::of(v.numel().max(1) as f64);
        let total: F = v
            .data()
            .iter()
            .zip(target.data())
            .map(|(&z, &t)| z.max(F::zero()) - z * t + (F::one() + (-z.abs()).exp()).ln())
            .sum();
        let y = Tensor::scalar(total / n);
        let ng = self.ng(x);
        self.push(y, Op::BceLogits { x, target }, ng)
    }

    /// Scalar `Σ x ⊙ c` for a constant `c`.
    pub fn dot_const(&mut self, x: Var, c: Tensor<F>) -> Result<Var> {
        let v = self.value(x);
        if v.shape() != c.shape() {
            return Err(Error::shape("dot_const", v.shape(), c.shape()));
        }
        let s: F = v.data().iter().zip(c.data()).map(|(&a, &b)| a * b).sum();
        let ng = self.ng(x);
        self.push(Tensor::scalar(s), Op::DotConst { x, c }, ng)
    }

    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).sum();
        let ng = self.ng(x);
        self.push(Tensor::scalar(s), Op::SumAll(x), ng)
    }

    pub fn mean_all(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let s = v.sum() / F::of(v.numel().max(1) as f64);
        let ng = self.ng(x);
        self.push(Tensor::scalar(s), Op::MeanAll(x), ng)
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<F>> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(lv.shape().to_vec(), F::one()));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                grads[i] = None;
                continue;
            }
            if matches!(node.op, Op::Leaf | Op::Param(_)) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(node, &g, &mut grads)?;
        }
        Ok(Gradients { grads })
    }

    /// Backward sweep whose parameter gradients are accumulated into
    /// `store`. Parameters the loss does not depend on get zero gradients.
    pub fn backward_into(&self, loss: Var, store: &mut ParamStore<F>) -> Result<()> {
        let grads = self.backward(loss)?;
        for (i, node) in self.nodes.iter().enumerate() {
            if let (Op::Param(id), Some(g)) = (&node.op, &grads.grads[i]) {
                store.accumulate_grad(*id, g)?;
            }
        }
        store.fill_missing_grads();
        Ok(())
    }

    fn backprop_node(
        &self,
        node: &Node<F>,
        g: &Tensor<F>,
        grads: &mut [Option<Tensor<F>>],
    ) -> Result<()> {
        let mut acc = |v: Var, t: Tensor<F>| -> Result<()> {
            if !self.nodes[v.0].needs_grad {
                return Ok(());
            }
            match &mut grads[v.0] {
                Some(a) => a.add_assign(&t),
                slot @ None => {
                    *slot = Some(t);
                    Ok(())
                }
            }
        };
        let y = &node.value;
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::MatMul { a, b, trans_b } => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let k = va.last_dim();
                let m = va.numel() / k.max(1);
                let n = y.last_dim();
                if self.ng(*a) {
                    let mut da = vec![F::zero(); m * k];
                    // dy (m,n) · b^T (n,k)
                    let (rsb, csb) = if *trans_b { (k as isize, 1) } else { (1, n as isize) };
                    kernels::gemm_auto(m, n, k, g.data(), n as isize, 1, vb.data(), rsb, csb, &mut da, k as isize, 1);
                    acc(*a, Tensor::new(va.shape().to_vec(), da)?)?;
                }
                if self.ng(*b) {
                    let mut db = vec![F::zero(); k * n];
                    if *trans_b {
                        // (n,k) = dy^T (n,m) · a (m,k)
                        kernels::gemm_auto(n, m, k, g.data(), 1, n as isize, va.data(), k as isize, 1, &mut db, k as isize, 1);
                    } else {
                        // (k,n) = a^T (k,m) · dy (m,n)
                        kernels::gemm_auto(k, m, n, va.data(), 1, k as isize, g.data(), n as isize, 1, &mut db, n as isize, 1);
                    }
                    acc(*b, Tensor::new(vb.shape().to_vec(), db)?)?;
                }
            }
            Op::Bmm { a, b, trans_b } => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (bs, m, k) = (va.shape()[0], va.shape()[1], va.shape()[2]);
                let n = y.shape()[2];
                if self.ng(*a) {
                    let mut da = vec![F::zero(); bs * m * k];
                    let (rsb, csb) = if *trans_b { (k as isize, 1) } else { (1, n as isize) };
                    for gi in 0..bs {
                        kernels::gemm_auto(
                            m, n, k,
                            &g.data()[gi * m * n..(gi + 1) * m * n], n as isize, 1,
                            &vb.data()[gi * k * n..(gi + 1) * k * n], rsb, csb,
                            &mut da[gi * m * k..(gi + 1) * m * k], k as isize, 1,
                        );
                    }
                    acc(*a, Tensor::new(va.shape().to_vec(), da)?)?;
                }
                if self.ng(*b) {
                    let mut db = vec![F::zero(); bs * k * n];
                    for gi in 0..bs {
                        let gs = &g.data()[gi * m * n..(gi + 1) * m * n];
                        let as_ = &va.data()[gi * m * k..(gi + 1) * m * k];
                        let out = &mut db[gi * k * n..(gi + 1) * k * n];
                        if *trans_b {
                            kernels::gemm_auto(n, m, k, gs, 1, n as isize, as_, k as isize, 1, out, k as isize, 1);
                        } else {
                            kernels::gemm_auto(k, m, n, as_, 1, k as isize, gs, n as isize, 1, out, n as isize, 1);
                        }
                    }
                    acc(*b, Tensor::new(vb.shape().to_vec(), db)?)?;
                }
            }
            Op::Add(a, b) => {
                acc(*a, g.clone())?;
                acc(*b, g.clone())?;
            }
            Op::AddBcast(a, b) => {
                acc(*a, g.clone())?;
                if self.ng(*b) {
                    let vb = self.value(*b);
                    acc(*b, reduce_leading(g, vb.shape()))?;
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if self.ng(*a) {
                    let d = g.data().iter().zip(vb.data()).map(|(&x, &y)| x * y).collect();
                    acc(*a, Tensor::new(va.shape().to_vec(), d)?)?;
                }
                if self.ng(*b) {
                    let d = g.data().iter().zip(va.data()).map(|(&x, &y)| x * y).collect();
                    acc(*b, Tensor::new(vb.shape().to_vec(), d)?)?;
                }
            }
            Op::MulBcast(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let inner = vb.numel();
                if self.ng(*a) {
                    let mut d = g.data().to_vec();
                    if inner > 0 {
                        for chunk in d.chunks_mut(inner) {
                            for (x, &w) in chunk.iter_mut().zip(vb.data()) {
                                *x *= w;
                            }
                        }
                    }
                    acc(*a, Tensor::new(va.shape().to_vec(), d)?)?;
                }
                if self.ng(*b) {
                    let mut d = vec![F::zero(); inner];
                    if inner > 0 {
                        for (gc, ac) in g.data().chunks(inner).zip(va.data().chunks(inner)) {
                            for i in 0..inner {
                                d[i] += gc[i] * ac[i];
                            }
                        }
                    }
                    acc(*b, Tensor::new(vb.shape().to_vec(), d)?)?;
                }
            }
            Op::Scale(x, c) => acc(*x, g.map(|v| v * *c))?,
            Op::Reshape(x) => acc(*x, g.clone().reshape(self.shape(*x).to_vec())?)?,
            Op::Permute(x, axes) => {
                let mut inv = vec![0; axes.len()];
                for (i, &a) in axes.iter().enumerate() {
                    inv[a] = i;
                }
                acc(*x, kernels::permute(g, &inv)?)?;
            }
            Op::SumLast(x) => {
                let vx = self.value(*x);
                let n = vx.last_dim();
                let mut d = Vec::with_capacity(vx.numel());
                for &gv in g.data() {
                    d.extend(std::iter::repeat_n(gv, n));
                }
                acc(*x, Tensor::new(vx.shape().to_vec(), d)?)?;
            }
            Op::MeanAxis(x, axis) => {
                let vx = self.value(*x);
                let (outer, mid, inner) = split_axis(vx.shape(), *axis);
                let inv = F::one() / F::of(mid as f64);
                let mut d = vec![F::zero(); vx.numel()];
                for o in 0..outer {
                    let src = &g.data()[o * inner..(o + 1) * inner];
                    for m in 0..mid {
                        let dst = &mut d[(o * mid + m) * inner..(o * mid + m + 1) * inner];
                        for (dv, &sv) in dst.iter_mut().zip(src) {
                            *dv = sv * inv;
                        }
                    }
                }
                acc(*x, Tensor::new(vx.shape().to_vec(), d)?)?;
            }
            Op::Softmax { x, tau } => {
                let n = y.last_dim();
                let mut d = vec![F::zero(); y.numel()];
                for ((dr, yr), gr) in d.chunks_mut(n).zip(y.data().chunks(n)).zip(g.data().chunks(n)) {
                    let dot: F = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    for i in 0..n {
                        dr[i] = yr[i] * (gr[i] - dot) / *tau;
                    }
                }
                acc(*x, Tensor::new(y.shape().to_vec(), d)?)?;
            }
            Op::LogSoftmax { x, tau } => {
                let n = y.last_dim();
                let mut d = vec![F::zero(); y.numel()];
                for ((dr, yr), gr) in d.chunks_mut(n).zip(y.data().chunks(n)).zip(g.data().chunks(n)) {
                    let gs: F = gr.iter().copied().sum();
                    for i in 0..n {
                        dr[i] = (gr[i] - yr[i].exp() * gs) / *tau;
                    }
                }
                acc(*x, Tensor::new(y.shape().to_vec(), d)?)?;
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let vg = self.value(*gamma);
                let d = vg.numel();
                let rows = rstd.len();
                if self.ng(*gamma) {
                    let mut dg = vec![F::zero(); d];
                    for r in 0..rows {
                        for i in 0..d {
                            dg[i] += g.data()[r * d + i] * xhat[r * d + i];
                        }
                    }
                    acc(*gamma, Tensor::new(vec![d], dg)?)?;
                }
                if self.ng(*beta) {
                    let mut db = vec![F::zero(); d];
                    for r in 0..rows {
                        for i in 0..d {
                            db[i] += g.data()[r * d + i];
                        }
                    }
                    acc(*beta, Tensor::new(vec![d], db)?)?;
                }
                if self.ng(*x) {
                    let inv_d = F::one() / F::of(d as f64);
                    let mut dx = vec![F::zero(); rows * d];
                    for r in 0..rows {
                        let gr = &g.data()[r * d..(r + 1) * d];
                        let hr = &xhat[r * d..(r + 1) * d];
                        let mut m1 = F::zero();
                        let mut m2 = F::zero();
                        for i in 0..d {
                            let dh = gr[i] * vg.data()[i];
                            m1 += dh;
                            m2 += dh * hr[i];
                        }
                        m1 *= inv_d;
                        m2 *= inv_d;
                        for i in 0..d {
                            let dh = gr[i] * vg.data()[i];
                            dx[r * d + i] = rstd[r] * (dh - m1 - hr[i] * m2);
                        }
                    }
                    acc(*x, Tensor::new(y.shape().to_vec(), dx)?)?;
                }
            }
            Op::Gelu(x) => {
                let vx = self.value(*x);
                let d = g
                    .data()
                    .iter()
                    .zip(vx.data())
                    .map(|(&gv, &xv)| gv * kernels::gelu_grad(xv))
                    .collect();
                acc(*x, Tensor::new(vx.shape().to_vec(), d)?)?;
            }
            Op::Sigmoid(x) => {
                let d = g
                    .data()
                    .iter()
                    .zip(y.data())
                    .map(|(&gv, &yv)| gv * yv * (F::one() - yv))
                    .collect();
                acc(*x, Tensor::new(y.shape().to_vec(), d)?)?;
            }
            Op::L2Normalize { x, norms } => {
                let n = y.last_dim();
                let mut d = vec![F::zero(); y.numel()];
                for (r, &nr) in norms.iter().enumerate() {
                    if !(nr > F::zero() && nr.is_finite()) {
                        continue;
                    }
                    let yr = &y.data()[r * n..(r + 1) * n];
                    let gr = &g.data()[r * n..(r + 1) * n];
                    let dot: F = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    for i in 0..n {
                        d[r * n + i] = (gr[i] - yr[i] * dot) / nr;
                    }
                }
                acc(*x, Tensor::new(y.shape().to_vec(), d)?)?;
            }
            Op::Concat(parts) => {
                let total = y.last_dim();
                let rows = y.numel() / total.max(1);
                let mut off = 0;
                for &p in parts {
                    let w = self.value(p).last_dim();
                    if self.ng(p) {
                        let mut d = Vec::with_capacity(rows * w);
                        for r in 0..rows {
                            d.extend_from_slice(&g.data()[r * total + off..r * total + off + w]);
                        }
                        acc(p, Tensor::new(self.shape(p).to_vec(), d)?)?;
                    }
                    off += w;
                }
            }
            Op::Stack { parts, axis } => {
                let shape0 = self.shape(parts[0]).to_vec();
                let outer: usize = shape0[..*axis].iter().product();
                let inner: usize = shape0[*axis..].iter().product();
                let np = parts.len();
                for (pi, &p) in parts.iter().enumerate() {
                    if !self.ng(p) {
                        continue;
                    }
                    let mut d = Vec::with_capacity(outer * inner);
                    for o in 0..outer {
                        let s = (o * np + pi) * inner;
                        d.extend_from_slice(&g.data()[s..s + inner]);
                    }
                    acc(p, Tensor::new(shape0.clone(), d)?)?;
                }
            }
            Op::FillRows { kept, idx, fill } => {
                let n = y.shape()[0];
                let row = y.numel() / n.max(1);
                let fshape = self.shape(*fill).to_vec();
                let fl = numel(&fshape);
                let mut dfill = vec![F::zero(); fl];
                let mut dkept = Vec::with_capacity(idx.len() * row);
                let mut next = 0;
                for r in 0..n {
                    let gr = &g.data()[r * row..(r + 1) * row];
                    if next < idx.len() && idx[next] == r {
                        dkept.extend_from_slice(gr);
                        next += 1;
                    } else if fl > 0 {
                        for c in gr.chunks(fl) {
                            for (a, &b) in dfill.iter_mut().zip(c) {
                                *a += b;
                            }
                        }
                    }
                }
                acc(*fill, Tensor::new(fshape, dfill)?)?;
                if let Some(k) = kept {
                    acc(*k, Tensor::new(self.shape(*k).to_vec(), dkept)?)?;
                }
            }
            Op::Im2Col { x, h, w } => {
                let vx = self.value(*x);
                let (b, c) = (vx.shape()[0], vx.shape()[2]);
                let (h, w) = (*h, *w);
                let mut d = vec![F::zero(); vx.numel()];
                for bi in 0..b {
                    for yy in 0..h {
                        for xx in 0..w {
                            let o = ((bi * h + yy) * w + xx) * 9 * c;
                            for dy in 0..3 {
                                let sy = yy as isize + dy as isize - 1;
                                if sy < 0 || sy >= h as isize {
                                    continue;
                                }
                                for dx in 0..3 {
                                    let sx = xx as isize + dx as isize - 1;
                                    if sx < 0 || sx >= w as isize {
                                        continue;
                                    }
                                    let s = ((bi * h + sy as usize) * w + sx as usize) * c;
                                    let src = o + (dy * 3 + dx) * c;
                                    for ci in 0..c {
                                        d[s + ci] += g.data()[src + ci];
                                    }
                                }
                            }
                        }
                    }
                }
                acc(*x, Tensor::new(vx.shape().to_vec(), d)?)?;
            }
            Op::Upsample { x, h, w } => {
                let vx = self.value(*x);
                let (b, c) = (vx.shape()[0], vx.shape()[2]);
                let (h, w) = (*h, *w);
                let mut d = vec![F::zero(); vx.numel()];
                for bi in 0..b {
                    for yy in 0..2 * h {
                        for xx in 0..2 * w {
                            let s = ((bi * 2 * h + yy) * 2 * w + xx) * c;
                            let t = ((bi * h + yy / 2) * w + xx / 2) * c;
                            for ci in 0..c {
                                d[t + ci] += g.data()[s + ci];
                            }
                        }
                    }
                }
                acc(*x, Tensor::new(vx.shape().to_vec(), d)?)?;
            }
            Op::BceLogits { x, target } => {
                let vx = self.value(*x);
                let scale = g.item() / F::of(vx.numel().max(1) as f64);
                let d = vx
                    .data()
                    .iter()
                    .zip(target.data())
                    .map(|(&z, &t)| (kernels::sigmoid(z) - t) * scale)
                    .collect();
                acc(*x, Tensor::new(vx.shape().to_vec(), d)?)?;
            }
            Op::DotConst { x, c } => {
                let s = g.item();
                acc(*x, c.map(|v| v * s))?;
            }
            Op::SumAll(x) => {
                acc(*x, Tensor::full(self.shape(*x).to_vec(), g.item()))?;
            }
            Op::MeanAll(x) => {
                let n = F::of(self.value(*x).numel().max(1) as f64);
                acc(*x, Tensor::full(self.shape(*x).to_vec(), g.item() / n))?;
            }
        }
        Ok(())
    }
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Sum `g` over its leading axes down to `target` (a suffix of its shape).
fn reduce_leading<F: Real>(g: &Tensor<F>, target: &[usize]) -> Tensor<F> {
    let inner = numel(target);
    let mut d = vec![F::zero(); inner];
    if inner > 0 {
        for chunk in g.data().chunks(inner) {
            for (a, &b) in d.iter_mut().zip(chunk) {
                *a += b;
            }
        }
    }
    Tensor::new(target.to_vec(), d).unwrap()
}

fn op_name<F: Real>(op: &Op<F>) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::Param(_) => "param",
        Op::MatMul { .. } => "matmul",
        Op::Bmm { .. } => "bmm",
        Op::Add(..) => "add",
        Op::AddBcast(..) => "add_bcast",
        Op::Mul(..) => "mul",
        Op::MulBcast(..) => "mul_bcast",
        Op::Scale(..) => "scale",
        Op::Reshape(_) => "reshape",
        Op::Permute(..) => "permute",
        Op::SumLast(_) => "sum_last",
        Op::MeanAxis(..) => "mean_axis",
        Op::Softmax { .. } => "softmax",
        Op::LogSoftmax { .. } => "log_softmax",
        Op::LayerNorm { .. } => "layer_norm",
        Op::Gelu(_) => "gelu",
        Op::Sigmoid(_) => "sigmoid",
        Op::L2Normalize { .. } => "l2_normalize",
        Op::Concat(_) => "concat",
        Op::Stack { .. } => "stack",
        Op::FillRows { .. } => "fill_rows",
        Op::Im2Col { .. } => "im2col3x3",
        Op::Upsample { .. } => "upsample2x",
        Op::BceLogits { .. } => "bce_with_logits",
        Op::DotConst { .. } => "dot_const",
        Op::SumAll(_) => "sum_all",
        Op::MeanAll(_) => "mean_all",
    }
}
