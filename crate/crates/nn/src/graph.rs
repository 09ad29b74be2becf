//! Tape-based reverse-mode differentiation.
//!
//! Every operation appends a node holding its forward value and the handles
//! of its inputs. [`Graph::backward`] walks the tape in reverse and
//! accumulates exact analytic gradients into every node that requires one.

use crate::params::{ParamId, ParamStore};
use crate::tensor::{numel, Tensor};
use crate::NnError;

const LAYER_NORM_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    MatMul(Var, Var),
    Softmax(Var),
    LayerNorm(Var, Vec<f64>),
    Gelu(Var),
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Concat(Vec<Var>, usize),
    Narrow(Var, usize, usize),
    UnfoldTime(Var, usize),
    Clamp(Var, f64, f64),
    Mse(Var, Var),
    Sum(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// A single forward/backward tape.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    bound: Vec<(ParamId, Var)>,
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let n = a.len().max(b.len());
    let mut out = vec![0; n];
    for i in 0..n {
        let da = if i + a.len() >= n { a[i + a.len() - n] } else { 1 };
        let db = if i + b.len() >= n { b[i + b.len() - n] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// How an operand's elements map onto a broadcast output.
enum Bcast {
    /// Operand already has the output shape.
    Same,
    /// Operand matches the trailing output axes: source index is `i % m`.
    Cycle(usize),
    /// Explicit source index for every output element.
    Index(Vec<usize>),
}

impl Bcast {
    #[inline]
    fn src(&self, i: usize) -> usize {
        match self {
            Bcast::Same => i,
            Bcast::Cycle(m) => i % m,
            Bcast::Index(idx) => idx[i],
        }
    }
}

fn broadcast_map(out: &[usize], inp: &[usize]) -> Bcast {
    if out == inp {
        return Bcast::Same;
    }
    let lead = inp.iter().take_while(|&&d| d == 1).count();
    let core = &inp[lead..];
    if out.ends_with(core) {
        return Bcast::Cycle(numel(core).max(1));
    }
    let n = out.len();
    let offset = n - inp.len();
    let mut strides = vec![0usize; n];
    let mut s = 1;
    for i in (0..inp.len()).rev() {
        strides[i + offset] = if inp[i] == 1 { 0 } else { s };
        s *= inp[i];
    }
    let total = numel(out);
    let mut idx = Vec::with_capacity(total);
    let mut counter = vec![0usize; n];
    let mut cur = 0usize;
    for _ in 0..total {
        idx.push(cur);
        for ax in (0..n).rev() {
            counter[ax] += 1;
            cur += strides[ax];
            if counter[ax] < out[ax] {
                break;
            }
            cur -= strides[ax] * counter[ax];
            counter[ax] = 0;
        }
    }
    Bcast::Index(idx)
}

fn strides_of(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    strides
}

/// Calls `f(dst, src)` for every output element of a permutation, where
/// output axis `i` is input axis `perm[i]`.
fn for_each_permuted(in_shape: &[usize], perm: &[usize], mut f: impl FnMut(usize, usize)) {
    let in_strides = strides_of(in_shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| in_shape[p]).collect();
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let n = out_shape.len();
    let total = numel(&out_shape);
    if n == 0 || total == 0 {
        if total == 1 {
            f(0, 0);
        }
        return;
    }
    let inner = out_shape[n - 1];
    let inner_stride = src_strides[n - 1];
    let mut counter = vec![0usize; n - 1];
    let mut base = 0usize;
    let mut dst = 0usize;
    while dst < total {
        let mut src = base;
        for _ in 0..inner {
            f(dst, src);
            dst += 1;
            src += inner_stride;
        }
        for ax in (0..n - 1).rev() {
            counter[ax] += 1;
            base += src_strides[ax];
            if counter[ax] < out_shape[ax] {
                break;
            }
            base -= src_strides[ax] * counter[ax];
            counter[ax] = 0;
        }
    }
}

/// `c[m,n] (+)= a[m,k] * b[k,n]` with arbitrary strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: isize,
    csa: isize,
    b: &[f64],
    rsb: isize,
    csb: isize,
    beta: f64,
    c: &mut [f64],
) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if beta == 0.0 {
            c[..m * n].iter_mut().for_each(|v| *v = 0.0);
        }
        return;
    }
    // SAFETY: callers pass slices whose extents cover the strided views
    // (checked by the shape logic in `matmul`/`backward`), and `c` is a
    // contiguous row-major m x n buffer that does not alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// `tanh` through a single `exp`, which is markedly cheaper than libm's.
#[inline]
fn tanh(x: f64) -> f64 {
    let a = x.abs();
    if a < 1e-3 {
        let x2 = x * x;
        return x * (1.0 - x2 / 3.0 + 2.0 * x2 * x2 / 15.0);
    }
    if a > 20.0 {
        return x.signum();
    }
    let e = (2.0 * x).exp();
    (e - 1.0) / (e + 1.0)
}

fn gelu(x: f64) -> f64 {
    let inner = GELU_C * (x + GELU_A * x * x * x);
    0.5 * x * (1.0 + tanh(inner))
}

fn gelu_grad(x: f64) -> f64 {
    let inner = GELU_C * (x + GELU_A * x * x * x);
    let th = tanh(inner);
    0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Untracked input.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Tracked input whose gradient can be read back after `backward`.
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Binds a parameter from `store`; repeated binds return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&(_, v)) = self.bound.iter().find(|(p, _)| *p == id) {
            return v;
        }
        let v = self.push(store.value(id).clone(), Op::Param, true);
        self.bound.push((id, v));
        v
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient accumulated by the last `backward` call.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Parameters bound on this tape with their gradients.
    pub fn param_grads(&self) -> impl Iterator<Item = (ParamId, Option<&[f64]>)> + '_ {
        self.bound.iter().map(move |&(id, v)| (id, self.grad(v)))
    }

    fn binary(
        &mut self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<(Tensor, bool), NnError> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let out_shape = broadcast_shape(&sa, &sb).ok_or(NnError::ShapeMismatch {
            op,
            left: sa.clone(),
            right: sb.clone(),
        })?;
        let ia = broadcast_map(&out_shape, &sa);
        let ib = broadcast_map(&out_shape, &sb);
        let da = self.value(a).data();
        let db = self.value(b).data();
        let total = numel(&out_shape);
        let data: Vec<f64> = match (&ia, &ib) {
            (Bcast::Same, Bcast::Same) => da.iter().zip(db).map(|(&x, &y)| f(x, y)).collect(),
            (Bcast::Same, Bcast::Cycle(m)) => da
                .chunks(*m)
                .flat_map(|row| row.iter().zip(db).map(|(&x, &y)| f(x, y)))
                .collect(),
            (Bcast::Cycle(m), Bcast::Same) => db
                .chunks(*m)
                .flat_map(|row| da.iter().zip(row).map(|(&x, &y)| f(x, y)))
                .collect(),
            _ => (0..total).map(|i| f(da[ia.src(i)], db[ib.src(i)])).collect(),
        };
        let rg = self.rg(a) || self.rg(b);
        Ok((Tensor::new(&out_shape, data)?, rg))
    }

    /// Elementwise sum with trailing-axis broadcasting.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        let (t, rg) = self.binary("add", a, b, |x, y| x + y)?;
        Ok(self.push(t, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        let (t, rg) = self.binary("sub", a, b, |x, y| x - y)?;
        Ok(self.push(t, Op::Sub(a, b), rg))
    }

    /// Elementwise product with trailing-axis broadcasting.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        let (t, rg) = self.binary("mul", a, b, |x, y| x * y)?;
        Ok(self.push(t, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let v = self.value(a);
        let t = Tensor::new(v.shape(), v.data().iter().map(|x| x * factor).collect())
            .expect("same length");
        let rg = self.rg(a);
        self.push(t, Op::Scale(a, factor), rg)
    }

    /// Matrix product over the last two axes.
    ///
    /// `b` is either a plain `[K, N]` matrix shared across every leading
    /// index of `a`, or carries the same leading axes as `a`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let mismatch = || NnError::ShapeMismatch {
            op: "matmul",
            left: sa.clone(),
            right: sb.clone(),
        };
        if sa.len() < 2 || sb.len() < 2 {
            return Err(mismatch());
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (kb, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != kb {
            return Err(mismatch());
        }
        let mut out_shape = sa[..sa.len() - 1].to_vec();
        out_shape.push(n);
        let mut out = vec![0.0; numel(&out_shape)];
        let da = self.value(a).data();
        let db = self.value(b).data();
        if sb.len() == 2 {
            let rows = numel(&sa[..sa.len() - 1]);
            gemm(rows, k, n, da, k as isize, 1, db, n as isize, 1, 0.0, &mut out);
        } else {
            if sa[..sa.len() - 2] != sb[..sb.len() - 2] {
                return Err(mismatch());
            }
            let batch = numel(&sa[..sa.len() - 2]);
            for i in 0..batch {
                gemm(
                    m,
                    k,
                    n,
                    &da[i * m * k..],
                    k as isize,
                    1,
                    &db[i * k * n..],
                    n as isize,
                    1,
                    0.0,
                    &mut out[i * m * n..(i + 1) * m * n],
                );
            }
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(&out_shape, out)?, Op::MatMul(a, b), rg))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let shape = v.shape().to_vec();
        let n = *shape.last().unwrap_or(&1);
        let mut out = v.data().to_vec();
        for row in out.chunks_mut(n.max(1)) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for x in row.iter_mut() {
                *x = (*x - max).exp();
                sum += *x;
            }
            for x in row.iter_mut() {
                *x /= sum;
            }
        }
        let rg = self.rg(a);
        self.push(Tensor::new(&shape, out).unwrap(), Op::Softmax(a), rg)
    }

    /// Normalizes over the last axis to zero mean and unit variance.
    pub fn layer_norm(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let shape = v.shape().to_vec();
        let n = *shape.last().unwrap_or(&1);
        let mut out = v.data().to_vec();
        let mut rstds = Vec::with_capacity(out.len() / n.max(1));
        for row in out.chunks_mut(n.max(1)) {
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n as f64;
            let rstd = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            for x in row.iter_mut() {
                *x = (*x - mean) * rstd;
            }
            rstds.push(rstd);
        }
        let rg = self.rg(a);
        self.push(Tensor::new(&shape, out).unwrap(), Op::LayerNorm(a, rstds), rg)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let t = Tensor::new(v.shape(), v.data().iter().map(|&x| gelu(x)).collect()).unwrap();
        let rg = self.rg(a);
        self.push(t, Op::Gelu(a), rg)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var, NnError> {
        let t = self.value(a).clone().reshaped(shape)?;
        let rg = self.rg(a);
        Ok(self.push(t, Op::Reshape(a), rg))
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var, NnError> {
        let shape = self.shape(a).to_vec();
        let mut seen = vec![false; shape.len()];
        let valid = perm.len() == shape.len()
            && perm.iter().all(|&p| p < shape.len() && !std::mem::replace(&mut seen[p], true));
        if !valid {
            return Err(NnError::ShapeMismatch {
                op: "permute",
                left: shape,
                right: perm.to_vec(),
            });
        }
        let src = self.value(a).data();
        let mut data = vec![0.0; src.len()];
        for_each_permuted(&shape, perm, |d, s| data[d] = src[s]);
        let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let rg = self.rg(a);
        Ok(self.push(
            Tensor::new(&out_shape, data)?,
            Op::Permute(a, perm.to_vec()),
            rg,
        ))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, a: Var) -> Result<Var, NnError> {
        let n = self.shape(a).len();
        if n < 2 {
            return Err(NnError::ShapeMismatch {
                op: "transpose",
                left: self.shape(a).to_vec(),
                right: vec![],
            });
        }
        let mut perm: Vec<usize> = (0..n).collect();
        perm.swap(n - 2, n - 1);
        self.permute(a, &perm)
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var, NnError> {
        let first = self.shape(parts[0]).to_vec();
        if axis >= first.len() {
            return Err(NnError::BadAxis {
                axis,
                shape: first,
            });
        }
        let mut out_shape = first.clone();
        out_shape[axis] = 0;
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == first.len()
                && s.iter()
                    .zip(&first)
                    .enumerate()
                    .all(|(i, (x, y))| i == axis || x == y);
            if !compatible {
                return Err(NnError::ShapeMismatch {
                    op: "concat",
                    left: first,
                    right: s.to_vec(),
                });
            }
            out_shape[axis] += s[axis];
        }
        let outer = numel(&first[..axis]);
        let inner = numel(&first[axis + 1..]);
        let mut data = Vec::with_capacity(numel(&out_shape));
        for o in 0..outer {
            for &p in parts {
                let chunk = self.shape(p)[axis] * inner;
                data.extend_from_slice(&self.value(p).data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(
            Tensor::new(&out_shape, data)?,
            Op::Concat(parts.to_vec(), axis),
            rg,
        ))
    }

    /// Slice `len` entries starting at `start` along `axis`.
    pub fn narrow(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var, NnError> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(NnError::BadAxis { axis, shape });
        }
        let outer = numel(&shape[..axis]);
        let inner = numel(&shape[axis + 1..]);
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * shape[axis] + start) * inner;
            data.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let rg = self.rg(a);
        Ok(self.push(
            Tensor::new(&out_shape, data)?,
            Op::Narrow(a, axis, start),
            rg,
        ))
    }

    /// Gathers a centered temporal window of odd width `kernel` with zero
    /// padding: `[B, T, C] -> [B, T, kernel * C]`. A matmul against a
    /// `[kernel * C, C_out]` weight then gives a same-padded 1-D convolution.
    pub fn unfold_time(&mut self, a: Var, kernel: usize) -> Result<Var, NnError> {
        let shape = self.shape(a).to_vec();
        if shape.len() != 3 || kernel % 2 == 0 {
            return Err(NnError::ShapeMismatch {
                op: "unfold_time",
                left: shape,
                right: vec![kernel],
            });
        }
        let (b, t, c) = (shape[0], shape[1], shape[2]);
        let half = kernel / 2;
        let src = self.value(a).data();
        let mut data = vec![0.0; b * t * kernel * c];
        for bi in 0..b {
            for ti in 0..t {
                for j in 0..kernel {
                    let s = ti as isize + j as isize - half as isize;
                    if s < 0 || s >= t as isize {
                        continue;
                    }
                    let src_off = (bi * t + s as usize) * c;
                    let dst_off = ((bi * t + ti) * kernel + j) * c;
                    data[dst_off..dst_off + c].copy_from_slice(&src[src_off..src_off + c]);
                }
            }
        }
        let rg = self.rg(a);
        Ok(self.push(
            Tensor::new(&[b, t, kernel * c], data)?,
            Op::UnfoldTime(a, kernel),
            rg,
        ))
    }

    /// Elementwise clamp; gradient passes only strictly inside the box.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let v = self.value(a);
        let t = Tensor::new(v.shape(), v.data().iter().map(|x| x.clamp(lo, hi)).collect())
            .unwrap();
        let rg = self.rg(a);
        self.push(t, Op::Clamp(a, lo, hi), rg)
    }

    /// Mean squared error over all elements.
    pub fn mse(&mut self, pred: Var, target: Var) -> Result<Var, NnError> {
        let (sp, st) = (self.shape(pred).to_vec(), self.shape(target).to_vec());
        if sp != st {
            return Err(NnError::ShapeMismatch {
                op: "mse",
                left: sp,
                right: st,
            });
        }
        let p = self.value(pred).data();
        let t = self.value(target).data();
        let n = p.len().max(1) as f64;
        let loss = p.iter().zip(t).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / n;
        let rg = self.rg(pred) || self.rg(target);
        Ok(self.push(Tensor::scalar(loss), Op::Mse(pred, target), rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len().max(1) as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Reverse pass seeded with d(root)/d(root) = 1 for every element of `root`.
    pub fn backward(&mut self, root: Var) {
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = (0..n).map(|_| None).collect();
        grads[root.0] = Some(vec![1.0; self.value(root).len()]);
        for i in (0..=root.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else {
                continue;
            };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        self.grads = grads;
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let out = node.value.data();
        let out_shape = node.value.shape();
        let nodes = &self.nodes;
        let acc = |v: Var, grads: &mut [Option<Vec<f64>>]| -> Option<usize> {
            if !nodes[v.0].requires_grad {
                return None;
            }
            if grads[v.0].is_none() {
                grads[v.0] = Some(vec![0.0; nodes[v.0].value.len()]);
            }
            Some(v.0)
        };
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                for (v, s) in [(*a, 1.0), (*b, sign)] {
                    if let Some(j) = acc(v, grads) {
                        let gj = grads[j].as_mut().unwrap();
                        match broadcast_map(out_shape, self.shape(v)) {
                            Bcast::Same => gj.iter_mut().zip(g).for_each(|(x, y)| *x += s * y),
                            Bcast::Cycle(m) => {
                                for row in g.chunks(m) {
                                    gj.iter_mut().zip(row).for_each(|(x, y)| *x += s * y);
                                }
                            }
                            Bcast::Index(idx) => idx
                                .iter()
                                .zip(g)
                                .for_each(|(&k, y)| gj[k] += s * y),
                        }
                    }
                }
            }
            Op::Mul(a, b) => {
                for (v, other) in [(*a, *b), (*b, *a)] {
                    if let Some(j) = acc(v, grads) {
                        let iv = broadcast_map(out_shape, self.shape(v));
                        let io = broadcast_map(out_shape, self.shape(other));
                        let od = self.value(other).data();
                        let gj = grads[j].as_mut().unwrap();
                        match (&iv, &io) {
                            (Bcast::Same, Bcast::Same) => {
                                for ((x, &ge), &o) in gj.iter_mut().zip(g).zip(od) {
                                    *x += ge * o;
                                }
                            }
                            (Bcast::Cycle(m), Bcast::Same) => {
                                for (grow, orow) in g.chunks(*m).zip(od.chunks(*m)) {
                                    for ((x, &ge), &o) in gj.iter_mut().zip(grow).zip(orow) {
                                        *x += ge * o;
                                    }
                                }
                            }
                            (Bcast::Same, Bcast::Cycle(m)) => {
                                for (xrow, grow) in gj.chunks_mut(*m).zip(g.chunks(*m)) {
                                    for ((x, &ge), &o) in xrow.iter_mut().zip(grow).zip(od) {
                                        *x += ge * o;
                                    }
                                }
                            }
                            _ => {
                                for (e, &ge) in g.iter().enumerate() {
                                    gj[iv.src(e)] += ge * od[io.src(e)];
                                }
                            }
                        }
                    }
                }
            }
            Op::Scale(a, f) => {
                if let Some(j) = acc(*a, grads) {
                    let gj = grads[j].as_mut().unwrap();
                    gj.iter_mut().zip(g).for_each(|(x, y)| *x += f * y);
                }
            }
            Op::MatMul(a, b) => self.matmul_backward(*a, *b, g, grads),
            Op::Softmax(a) => {
                if let Some(j) = acc(*a, grads) {
                    let n = *out_shape.last().unwrap_or(&1);
                    let gj = grads[j].as_mut().unwrap();
                    for ((gx, gy), y) in gj.chunks_mut(n).zip(g.chunks(n)).zip(out.chunks(n)) {
                        let dot: f64 = gy.iter().zip(y).map(|(a, b)| a * b).sum();
                        for k in 0..n {
                            gx[k] += y[k] * (gy[k] - dot);
                        }
                    }
                }
            }
            Op::LayerNorm(a, rstds) => {
                if let Some(j) = acc(*a, grads) {
                    let n = *out_shape.last().unwrap_or(&1);
                    let nf = n as f64;
                    let gj = grads[j].as_mut().unwrap();
                    for (((gx, gy), y), rstd) in gj
                        .chunks_mut(n)
                        .zip(g.chunks(n))
                        .zip(out.chunks(n))
                        .zip(rstds)
                    {
                        let mean_g = gy.iter().sum::<f64>() / nf;
                        let mean_gy = gy.iter().zip(y).map(|(a, b)| a * b).sum::<f64>() / nf;
                        for k in 0..n {
                            gx[k] += rstd * (gy[k] - mean_g - y[k] * mean_gy);
                        }
                    }
                }
            }
            Op::Gelu(a) => {
                if let Some(j) = acc(*a, grads) {
                    let x = self.value(*a).data();
                    let gj = grads[j].as_mut().unwrap();
                    for k in 0..g.len() {
                        gj[k] += g[k] * gelu_grad(x[k]);
                    }
                }
            }
            Op::Reshape(a) => {
                if let Some(j) = acc(*a, grads) {
                    let gj = grads[j].as_mut().unwrap();
                    gj.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
            }
            Op::Permute(a, perm) => {
                if let Some(j) = acc(*a, grads) {
                    let gj = grads[j].as_mut().unwrap();
                    for_each_permuted(self.shape(*a), perm, |d, s| gj[s] += g[d]);
                }
            }
            Op::Concat(parts, axis) => {
                let outer = numel(&out_shape[..*axis]);
                let inner = numel(&out_shape[axis + 1..]);
                let row = out_shape[*axis] * inner;
                let mut offset = 0;
                for &p in parts {
                    let chunk = self.shape(p)[*axis] * inner;
                    if let Some(j) = acc(p, grads) {
                        let gj = grads[j].as_mut().unwrap();
                        for o in 0..outer {
                            let src = &g[o * row + offset..o * row + offset + chunk];
                            gj[o * chunk..(o + 1) * chunk]
                                .iter_mut()
                                .zip(src)
                                .for_each(|(x, y)| *x += y);
                        }
                    }
                    offset += chunk;
                }
            }
            Op::Narrow(a, axis, start) => {
                if let Some(j) = acc(*a, grads) {
                    let in_shape = self.shape(*a);
                    let outer = numel(&in_shape[..*axis]);
                    let inner = numel(&in_shape[axis + 1..]);
                    let len = out_shape[*axis];
                    let gj = grads[j].as_mut().unwrap();
                    for o in 0..outer {
                        let base = (o * in_shape[*axis] + start) * inner;
                        gj[base..base + len * inner]
                            .iter_mut()
                            .zip(&g[o * len * inner..(o + 1) * len * inner])
                            .for_each(|(x, y)| *x += y);
                    }
                }
            }
            Op::UnfoldTime(a, kernel) => {
                if let Some(j) = acc(*a, grads) {
                    let s = self.shape(*a);
                    let (b, t, c) = (s[0], s[1], s[2]);
                    let half = kernel / 2;
                    let gj = grads[j].as_mut().unwrap();
                    for bi in 0..b {
                        for ti in 0..t {
                            for k in 0..*kernel {
                                let src_t = ti as isize + k as isize - half as isize;
                                if src_t < 0 || src_t >= t as isize {
                                    continue;
                                }
                                let dst = (bi * t + src_t as usize) * c;
                                let from = ((bi * t + ti) * kernel + k) * c;
                                for ci in 0..c {
                                    gj[dst + ci] += g[from + ci];
                                }
                            }
                        }
                    }
                }
            }
            Op::Clamp(a, lo, hi) => {
                if let Some(j) = acc(*a, grads) {
                    let x = self.value(*a).data();
                    let gj = grads[j].as_mut().unwrap();
                    for k in 0..g.len() {
                        if x[k] > *lo && x[k] < *hi {
                            gj[k] += g[k];
                        }
                    }
                }
            }
            Op::Mse(p, t) => {
                let pd = self.value(*p).data();
                let td = self.value(*t).data();
                let scale = 2.0 * g[0] / pd.len().max(1) as f64;
                for (v, s) in [(*p, 1.0), (*t, -1.0)] {
                    if let Some(j) = acc(v, grads) {
                        let gj = grads[j].as_mut().unwrap();
                        for k in 0..pd.len() {
                            gj[k] += s * scale * (pd[k] - td[k]);
                        }
                    }
                }
            }
            Op::Sum(a) => {
                if let Some(j) = acc(*a, grads) {
                    let gj = grads[j].as_mut().unwrap();
                    gj.iter_mut().for_each(|x| *x += g[0]);
                }
            }
        }
    }

    fn matmul_backward(&self, a: Var, b: Var, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let sa = self.shape(a);
        let sb = self.shape(b);
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let n = sb[sb.len() - 1];
        let da = self.value(a).data();
        let db = self.value(b).data();
        let need_a = self.rg(a);
        let need_b = self.rg(b);
        for (v, need) in [(a, need_a), (b, need_b)] {
            if need && grads[v.0].is_none() {
                grads[v.0] = Some(vec![0.0; self.nodes[v.0].value.len()]);
            }
        }
        if sb.len() == 2 {
            let rows = numel(&sa[..sa.len() - 1]);
            if need_a {
                // dA[rows,k] += G[rows,n] * B^T
                let ga = grads[a.0].as_mut().unwrap();
                gemm(rows, n, k, g, n as isize, 1, db, 1, n as isize, 1.0, ga);
            }
            if need_b {
                // dB[k,n] += A^T * G
                let gb = grads[b.0].as_mut().unwrap();
                gemm(k, rows, n, da, 1, k as isize, g, n as isize, 1, 1.0, gb);
            }
        } else {
            let batch = numel(&sa[..sa.len() - 2]);
            for i in 0..batch {
                let gi = &g[i * m * n..(i + 1) * m * n];
                if need_a {
                    let ga = grads[a.0].as_mut().unwrap();
                    gemm(
                        m,
                        n,
                        k,
                        gi,
                        n as isize,
                        1,
                        &db[i * k * n..],
                        1,
                        n as isize,
                        1.0,
                        &mut ga[i * m * k..(i + 1) * m * k],
                    );
                }
                if need_b {
                    let gb = grads[b.0].as_mut().unwrap();
                    gemm(
                        k,
                        m,
                        n,
                        &da[i * m * k..],
                        1,
                        k as isize,
                        gi,
                        n as isize,
                        1,
                        1.0,
                        &mut gb[i * k * n..(i + 1) * k * n],
                    );
                }
            }
        }
    }
}
