use std::sync::Arc;

use super::gemm::{gemm, matmul_nn, matmul_nt, matmul_tn};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A fixed linear map applied independently to each row of its input.
pub trait LinearOperator: Send + Sync {
    fn in_len(&self) -> usize;
    fn out_len(&self) -> usize;
    /// `y = A x`; `y` arrives zeroed.
    fn apply(&self, x: &[f64], y: &mut [f64]);
    /// `gx = A^T gy`; `gx` arrives zeroed.
    fn adjoint(&self, gy: &[f64], gx: &mut [f64]);
}

/// Geometry of a same-padded convolution over the two leading axes of an
/// `[A1, A2, R, I]` input with an `[K1, K2, I, O]` kernel.
#[derive(Clone, Copy, Debug)]
struct ConvDims {
    a1: usize,
    a2: usize,
    r: usize,
    i: usize,
    k1: usize,
    k2: usize,
    o: usize,
}

impl ConvDims {
    fn patch(&self) -> usize {
        self.k1 * self.k2 * self.i
    }

    fn rows(&self) -> usize {
        self.a1 * self.a2 * self.r
    }

    /// Calls `f(col_row, patch_offset, x_offset)` for every in-bounds tap.
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize)) {
        let (p1, p2) = ((self.k1 / 2) as isize, (self.k2 / 2) as isize);
        for t1 in 0..self.a1 {
            for t2 in 0..self.a2 {
                for j1 in 0..self.k1 {
                    let s1 = t1 as isize + j1 as isize - p1;
                    if s1 < 0 || s1 >= self.a1 as isize {
                        continue;
                    }
                    for j2 in 0..self.k2 {
                        let s2 = t2 as isize + j2 as isize - p2;
                        if s2 < 0 || s2 >= self.a2 as isize {
                            continue;
                        }
                        let src = (s1 as usize * self.a2 + s2 as usize) * self.r;
                        let dst = (t1 * self.a2 + t2) * self.r;
                        let off = (j1 * self.k2 + j2) * self.i;
                        for rr in 0..self.r {
                            f(dst + rr, off, (src + rr) * self.i);
                        }
                    }
                }
            }
        }
    }
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Linear { x: Var, w: Var, k: usize, n: usize },
    Bmm { a: Var, b: Var, g: usize, m: usize, k: usize, n: usize, trans_b: bool, alpha: f64 },
    Softmax(Var),
    RmsGroupNorm { x: Var, gain: Var, group: usize, inv_rms: Vec<f64> },
    Conv { x: Var, w: Var, dims: ConvDims, col: Vec<f64> },
    Swish(Var),
    Sigmoid(Var),
    Log(Var),
    Reshape(Var),
    Permute { x: Var, axes: Vec<usize> },
    SumAll(Var),
    SumSq(Var),
    SumAxis { x: Var, axis: usize },
    Concat { xs: Vec<Var>, axis: usize },
    Slice { x: Var, axis: usize, start: usize },
    Expand { x: Var, axes: Vec<usize> },
    MagPow { x: Var, p: f64 },
    CMul(Var, Var),
    Apply { x: Var, op: Arc<dyn LinearOperator> },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Records primitive applications in execution order and replays them in
/// reverse to accumulate gradients.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

fn shape_err(op: &str, a: &[usize], b: &[usize]) -> Error {
    Error::shape(format!("{op}: {a:?} vs {b:?}"))
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Copies `src` (shape `shape`) into `dst` with axes reordered so that output
/// axis `d` is input axis `axes[d]`.
fn permute_data(src: &[f64], shape: &[usize], axes: &[usize], dst: &mut [f64]) {
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let step: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let nd = out_shape.len();
    if src.is_empty() {
        return;
    }
    let mut idx = vec![0usize; nd];
    let mut off = 0usize;
    let inner = out_shape[nd - 1];
    let inner_step = step[nd - 1];
    let mut o = 0;
    loop {
        for j in 0..inner {
            dst[o + j] = src[off + j * inner_step];
        }
        o += inner;
        // advance all but the innermost axis
        let mut d = nd - 1;
        loop {
            if d == 0 {
                return;
            }
            d -= 1;
            idx[d] += 1;
            off += step[d];
            if idx[d] < out_shape[d] {
                break;
            }
            off -= step[d] * idx[d];
            idx[d] = 0;
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    /// A leaf value; gradients are accumulated for it when `needs_grad`.
    pub fn leaf(&mut self, value: Tensor, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, needs_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Gradient accumulated by the last [`Tape::backward`] call.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    fn same_shape(&self, op: &str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let value = self.value(x).map(f);
        self.push(value, op, &[x])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
        Ok(self.push(v, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y);
        Ok(self.push(v, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y);
        Ok(self.push(v, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, |x| c * x, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, |x| x + c, Op::AddScalar(a))
    }

    pub fn swish(&mut self, a: Var) -> Var {
        self.unary(a, |x| x * sigmoid(x), Op::Swish(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    /// Natural logarithm.
    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, f64::ln, Op::Log(a))
    }

    /// `x @ w` over the last axis of `x`: `[..., K] x [K, N] -> [..., N]`.
    pub fn linear(&mut self, x: Var, w: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if ws.len() != 2 || xs.last() != Some(&ws[0]) {
            return Err(shape_err("linear", &xs, &ws));
        }
        let (k, n) = (ws[0], ws[1]);
        let m = self.value(x).numel() / k;
        let mut out = vec![0.0; m * n];
        matmul_nn(m, k, n, self.data(x), self.data(w), &mut out, false);
        let mut shape = xs;
        *shape.last_mut().unwrap() = n;
        Ok(self.push(Tensor::from_parts(shape, out), Op::Linear { x, w, k, n }, &[x, w]))
    }

    /// Batched `alpha * A B` (or `alpha * A B^T`): `[G, M, K] x [G, K, N]`.
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool, alpha: f64) -> Result<Var> {
        let as_ = self.shape(a).to_vec();
        let bs = self.shape(b).to_vec();
        if as_.len() != 3 || bs.len() != 3 || as_[0] != bs[0] {
            return Err(shape_err("bmm", &as_, &bs));
        }
        let (g, m, k) = (as_[0], as_[1], as_[2]);
        let (bk, n) = if trans_b { (bs[2], bs[1]) } else { (bs[1], bs[2]) };
        if bk != k {
            return Err(shape_err("bmm", &as_, &bs));
        }
        let mut out = vec![0.0; g * m * n];
        let (ad, bd) = (self.data(a), self.data(b));
        for gi in 0..g {
            let ab = &ad[gi * m * k..(gi + 1) * m * k];
            let bb = &bd[gi * k * n..(gi + 1) * k * n];
            let cb = &mut out[gi * m * n..(gi + 1) * m * n];
            let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
            gemm(m, k, n, alpha, ab, k as isize, 1, bb, rsb, csb, 0.0, cb, n as isize, 1);
        }
        Ok(self.push(
            Tensor::from_parts(vec![g, m, n], out),
            Op::Bmm { a, b, g, m, k, n, trans_b, alpha },
            &[a, b],
        ))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        let d = *self.shape(x).last().unwrap();
        let mut out = self.data(x).to_vec();
        for row in out.chunks_exact_mut(d) {
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                s += *v;
            }
            row.iter_mut().for_each(|v| *v /= s);
        }
        let shape = self.shape(x).to_vec();
        self.push(Tensor::from_parts(shape, out), Op::Softmax(x), &[x])
    }

    /// RMS normalization within `groups` equal slices of the last axis,
    /// followed by a per-feature gain.
    pub fn rms_group_norm(&mut self, x: Var, gain: Var, groups: usize, eps: f64) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let d = *xs.last().unwrap();
        if self.shape(gain) != [d] || groups == 0 || d % groups != 0 {
            return Err(shape_err("rms_group_norm", &xs, self.shape(gain)));
        }
        let group = d / groups;
        let xd = self.data(x);
        let gd = self.data(gain);
        let mut out = vec![0.0; xd.len()];
        let mut inv_rms = Vec::with_capacity(xd.len() / group);
        for (ci, (src, dst)) in xd.chunks_exact(group).zip(out.chunks_exact_mut(group)).enumerate() {
            let ms = src.iter().map(|v| v * v).sum::<f64>() / group as f64;
            let inv = 1.0 / (ms + eps).sqrt();
            inv_rms.push(inv);
            let g0 = (ci % groups) * group;
            for (j, (o, v)) in dst.iter_mut().zip(src).enumerate() {
                *o = v * inv * gd[g0 + j];
            }
        }
        Ok(self.push(
            Tensor::from_parts(xs, out),
            Op::RmsGroupNorm { x, gain, group, inv_rms },
            &[x, gain],
        ))
    }

    /// Same-padded convolution over the two leading axes:
    /// `[A1, A2, R, I] * [K1, K2, I, O] -> [A1, A2, R, O]`, odd kernel sizes.
    pub fn conv(&mut self, x: Var, w: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 4 || ws.len() != 4 || xs[3] != ws[2] || ws[0] % 2 == 0 || ws[1] % 2 == 0 {
            return Err(shape_err("conv", &xs, &ws));
        }
        let dims = ConvDims { a1: xs[0], a2: xs[1], r: xs[2], i: xs[3], k1: ws[0], k2: ws[1], o: ws[3] };
        let patch = dims.patch();
        let mut col = vec![0.0; dims.rows() * patch];
        let xd = self.data(x);
        let i = dims.i;
        dims.for_each_tap(|row, off, src| {
            col[row * patch + off..row * patch + off + i].copy_from_slice(&xd[src..src + i]);
        });
        let mut out = vec![0.0; dims.rows() * dims.o];
        matmul_nn(dims.rows(), patch, dims.o, &col, self.data(w), &mut out, false);
        let shape = vec![dims.a1, dims.a2, dims.r, dims.o];
        Ok(self.push(Tensor::from_parts(shape, out), Op::Conv { x, w, dims, col }, &[x, w]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let n: usize = shape.iter().product();
        if n != self.value(x).numel() {
            return Err(shape_err("reshape", self.shape(x), shape));
        }
        let v = Tensor::from_parts(shape.to_vec(), self.data(x).to_vec());
        Ok(self.push(v, Op::Reshape(x), &[x]))
    }

    /// Reorders axes: output axis `d` is input axis `axes[d]`.
    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let mut seen = vec![false; xs.len()];
        if axes.len() != xs.len() || axes.iter().any(|&a| a >= xs.len() || std::mem::replace(&mut seen[a], true)) {
            return Err(Error::shape(format!("permute: axes {axes:?} for shape {xs:?}")));
        }
        let mut out = vec![0.0; self.value(x).numel()];
        permute_data(self.data(x), &xs, axes, &mut out);
        let shape = axes.iter().map(|&a| xs[a]).collect();
        Ok(self.push(Tensor::from_parts(shape, out), Op::Permute { x, axes: axes.to_vec() }, &[x]))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s = self.data(x).iter().sum();
        self.push(Tensor::scalar(s), Op::SumAll(x), &[x])
    }

    /// `sum(x^2)` as a scalar.
    pub fn sum_sq(&mut self, x: Var) -> Var {
        let s = self.data(x).iter().map(|v| v * v).sum();
        self.push(Tensor::scalar(s), Op::SumSq(x), &[x])
    }

    /// Sums out one axis (the axis is removed).
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if axis >= xs.len() {
            return Err(Error::shape(format!("sum_axis: axis {axis} for shape {xs:?}")));
        }
        let outer: usize = xs[..axis].iter().product();
        let len = xs[axis];
        let inner: usize = xs[axis + 1..].iter().product();
        let xd = self.data(x);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for a in 0..len {
                let src = &xd[(o * len + a) * inner..(o * len + a + 1) * inner];
                for (d, s) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        let mut shape = xs;
        shape.remove(axis);
        if shape.is_empty() {
            shape.push(1);
        }
        Ok(self.push(Tensor::from_parts(shape, out), Op::SumAxis { x, axis }, &[x]))
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let n = self.shape(x).get(axis).copied().unwrap_or(1);
        let s = self.sum_axis(x, axis)?;
        Ok(self.scale(s, 1.0 / n as f64))
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = self.shape(xs[0]).to_vec();
        if axis >= first.len() {
            return Err(Error::shape(format!("concat: axis {axis} for shape {first:?}")));
        }
        let mut total = 0;
        for &v in xs {
            let s = self.shape(v);
            if s.len() != first.len() || s.iter().enumerate().any(|(d, &n)| d != axis && n != first[d]) {
                return Err(shape_err("concat", &first, s));
            }
            total += s[axis];
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in xs {
                let len = self.shape(v)[axis] * inner;
                out.extend_from_slice(&self.data(v)[o * len..(o + 1) * len]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        Ok(self.push(Tensor::from_parts(shape, out), Op::Concat { xs: xs.to_vec(), axis }, xs))
    }

    /// `len` entries of `axis` starting at `start`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if axis >= xs.len() || start + len > xs[axis] {
            return Err(Error::shape(format!("slice: {start}+{len} on axis {axis} of {xs:?}")));
        }
        let outer: usize = xs[..axis].iter().product();
        let inner: usize = xs[axis + 1..].iter().product();
        let xd = self.data(x);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * xs[axis] + start) * inner;
            out.extend_from_slice(&xd[base..base + len * inner]);
        }
        let mut shape = xs;
        shape[axis] = len;
        Ok(self.push(Tensor::from_parts(shape, out), Op::Slice { x, axis, start }, &[x]))
    }

    /// Repeats `x` into `shape`; input axis `i` becomes output axis `axes[i]`
    /// (increasing), all other output axes are copies.
    pub fn expand(&mut self, x: Var, shape: &[usize], axes: &[usize]) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ok = axes.len() == xs.len()
            && axes.windows(2).all(|w| w[0] < w[1])
            && axes.iter().zip(&xs).all(|(&a, &n)| a < shape.len() && shape[a] == n);
        if !ok {
            return Err(Error::shape(format!("expand: {xs:?} into {shape:?} along {axes:?}")));
        }
        let map = expand_index_map(&xs, shape, axes);
        let xd = self.data(x);
        let out: Vec<f64> = map.iter().map(|&i| xd[i]).collect();
        Ok(self.push(Tensor::from_parts(shape.to_vec(), out), Op::Expand { x, axes: axes.to_vec() }, &[x]))
    }

    /// `|z|^p e^{i arg z}` on complex pairs stored in a trailing axis of size 2.
    pub fn mag_pow(&mut self, x: Var, p: f64) -> Result<Var> {
        if self.shape(x).last() != Some(&2) {
            return Err(Error::shape(format!("mag_pow: trailing axis of {:?} must be 2", self.shape(x))));
        }
        let v = Tensor::from_parts(self.shape(x).to_vec(), crate::dsp::magnitude_power(self.data(x), p));
        Ok(self.push(v, Op::MagPow { x, p }, &[x]))
    }

    /// Complex product on a trailing axis of size 2.
    pub fn cmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("cmul", a, b)?;
        if self.shape(a).last() != Some(&2) {
            return Err(Error::shape(format!("cmul: trailing axis of {:?} must be 2", self.shape(a))));
        }
        let mut out = vec![0.0; self.value(a).numel()];
        for ((o, p), q) in out.chunks_exact_mut(2).zip(self.data(a).chunks_exact(2)).zip(self.data(b).chunks_exact(2)) {
            o[0] = p[0] * q[0] - p[1] * q[1];
            o[1] = p[0] * q[1] + p[1] * q[0];
        }
        let shape = self.shape(a).to_vec();
        Ok(self.push(Tensor::from_parts(shape, out), Op::CMul(a, b), &[a, b]))
    }

    /// Applies a fixed linear operator to each row `[..., in] -> [..., out]`.
    pub fn apply(&mut self, x: Var, op: Arc<dyn LinearOperator>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.last() != Some(&op.in_len()) {
            return Err(Error::shape(format!("apply: input {xs:?}, operator takes {}", op.in_len())));
        }
        let (n_in, n_out) = (op.in_len(), op.out_len());
        let rows = self.value(x).numel() / n_in;
        let mut out = vec![0.0; rows * n_out];
        for (src, dst) in self.data(x).chunks_exact(n_in).zip(out.chunks_exact_mut(n_out)) {
            op.apply(src, dst);
        }
        let mut shape = xs;
        *shape.last_mut().unwrap() = n_out;
        Ok(self.push(Tensor::from_parts(shape, out), Op::Apply { x, op }, &[x]))
    }

    /// Reverse pass from a scalar output.
    pub fn backward(&mut self, out: Var) -> Result<()> {
        if self.value(out).numel() != 1 {
            return Err(Error::shape(format!("backward needs a scalar, got {:?}", self.shape(out))));
        }
        self.backward_with(out, vec![1.0])
    }

    /// Reverse pass seeded with an explicit output gradient.
    pub fn backward_with(&mut self, out: Var, seed: Vec<f64>) -> Result<()> {
        if seed.len() != self.value(out).numel() {
            return Err(Error::shape("backward seed does not match output"));
        }
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        self.grads[out.0] = Some(seed);
        for idx in (0..=out.0).rev() {
            if !self.nodes[idx].needs_grad {
                continue;
            }
            let Some(g) = self.grads[idx].take() else { continue };
            self.propagate(idx, &g);
            self.grads[idx] = Some(g);
        }
        Ok(())
    }

    fn acc(&mut self, v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        let n = self.nodes[v.0].value.numel();
        let slot = self.grads[v.0].get_or_insert_with(|| vec![0.0; n]);
        f(slot);
    }

    fn propagate(&mut self, idx: usize, g: &[f64]) {
        // Ops borrow node data while writing into `self.grads`; split the
        // borrows by temporarily taking the op out of the node.
        let op = std::mem::replace(&mut self.nodes[idx].op, Op::Leaf);
        match &op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.acc(*a, |ga| ga.iter_mut().zip(g).for_each(|(x, y)| *x += y));
                self.acc(*b, |gb| gb.iter_mut().zip(g).for_each(|(x, y)| *x += y));
            }
            Op::Sub(a, b) => {
                self.acc(*a, |ga| ga.iter_mut().zip(g).for_each(|(x, y)| *x += y));
                self.acc(*b, |gb| gb.iter_mut().zip(g).for_each(|(x, y)| *x -= y));
            }
            Op::Mul(a, b) => {
                let (a, b) = (*a, *b);
                if self.needs(a) {
                    let bd = self.data(b).to_vec();
                    self.acc(a, |ga| {
                        for ((x, y), z) in ga.iter_mut().zip(g).zip(&bd) {
                            *x += y * z;
                        }
                    });
                }
                if self.needs(b) {
                    let ad = self.data(a).to_vec();
                    self.acc(b, |gb| {
                        for ((x, y), z) in gb.iter_mut().zip(g).zip(&ad) {
                            *x += y * z;
                        }
                    });
                }
            }
            Op::Scale(a, c) => {
                let c = *c;
                self.acc(*a, |ga| ga.iter_mut().zip(g).for_each(|(x, y)| *x += c * y));
            }
            Op::AddScalar(a) => {
                self.acc(*a, |ga| ga.iter_mut().zip(g).for_each(|(x, y)| *x += y));
            }
            Op::Linear { x, w, k, n } => {
                let (x, w, k, n) = (*x, *w, *k, *n);
                let m = g.len() / n;
                if self.needs(x) {
                    let mut gx = vec![0.0; m * k];
                    matmul_nt(m, n, k, g, self.data(w), &mut gx, false);
                    self.acc(x, |dst| dst.iter_mut().zip(&gx).for_each(|(p, q)| *p += q));
                }
                if self.needs(w) {
                    let mut gw = vec![0.0; k * n];
                    matmul_tn(k, m, n, self.data(x), g, &mut gw, false);
                    self.acc(w, |dst| dst.iter_mut().zip(&gw).for_each(|(p, q)| *p += q));
                }
            }
            Op::Bmm { a, b, g: groups, m, k, n, trans_b, alpha } => {
                let (a, b, groups, m, k, n, trans_b, alpha) = (*a, *b, *groups, *m, *k, *n, *trans_b, *alpha);
                if self.needs(a) {
                    let bd = self.data(b);
                    let mut ga = vec![0.0; groups * m * k];
                    for gi in 0..groups {
                        let gg = &g[gi * m * n..(gi + 1) * m * n];
                        let bb = &bd[gi * k * n..(gi + 1) * k * n];
                        let dst = &mut ga[gi * m * k..(gi + 1) * m * k];
                        // dA = alpha G B^T (B is k x n) or alpha G B (B is n x k)
                        let (rsb, csb) = if trans_b { (k as isize, 1) } else { (1, n as isize) };
                        gemm(m, n, k, alpha, gg, n as isize, 1, bb, rsb, csb, 0.0, dst, k as isize, 1);
                    }
                    self.acc(a, |dst| dst.iter_mut().zip(&ga).for_each(|(p, q)| *p += q));
                }
                if self.needs(b) {
                    let ad = self.data(a);
                    let mut gb = vec![0.0; groups * k * n];
                    for gi in 0..groups {
                        let gg = &g[gi * m * n..(gi + 1) * m * n];
                        let aa = &ad[gi * m * k..(gi + 1) * m * k];
                        let dst = &mut gb[gi * k * n..(gi + 1) * k * n];
                        if trans_b {
                            // dB (n x k) = alpha G^T A
                            gemm(n, m, k, alpha, gg, 1, n as isize, aa, k as isize, 1, 0.0, dst, k as isize, 1);
                        } else {
                            // dB (k x n) = alpha A^T G
                            gemm(k, m, n, alpha, aa, 1, k as isize, gg, n as isize, 1, 0.0, dst, n as isize, 1);
                        }
                    }
                    self.acc(b, |dst| dst.iter_mut().zip(&gb).for_each(|(p, q)| *p += q));
                }
            }
            Op::Softmax(x) => {
                let y = self.nodes[idx].value.data().to_vec();
                let d = *self.nodes[idx].value.shape().last().unwrap();
                self.acc(*x, |gx| {
                    for ((gxr, yr), gr) in gx.chunks_exact_mut(d).zip(y.chunks_exact(d)).zip(g.chunks_exact(d)) {
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for ((o, yv), gv) in gxr.iter_mut().zip(yr).zip(gr) {
                            *o += yv * (gv - dot);
                        }
                    }
                });
            }
            Op::RmsGroupNorm { x, gain, group, inv_rms } => {
                let (x, gain, group) = (*x, *gain, *group);
                let d = self.nodes[gain.0].value.numel();
                let groups = d / group;
                let xd = self.data(x).to_vec();
                let gd = self.data(gain).to_vec();
                if self.needs(gain) {
                    let mut gg = vec![0.0; d];
                    for (ci, (src, gr)) in xd.chunks_exact(group).zip(g.chunks_exact(group)).enumerate() {
                        let g0 = (ci % groups) * group;
                        for j in 0..group {
                            gg[g0 + j] += gr[j] * src[j] * inv_rms[ci];
                        }
                    }
                    self.acc(gain, |dst| dst.iter_mut().zip(&gg).for_each(|(p, q)| *p += q));
                }
                if self.needs(x) {
                    self.acc(x, |gx| {
                        for (ci, ((dst, src), gr)) in gx
                            .chunks_exact_mut(group)
                            .zip(xd.chunks_exact(group))
                            .zip(g.chunks_exact(group))
                            .enumerate()
                        {
                            let inv = inv_rms[ci];
                            let g0 = (ci % groups) * group;
                            let mut dot = 0.0;
                            for j in 0..group {
                                dot += gr[j] * gd[g0 + j] * src[j] * inv;
                            }
                            dot /= group as f64;
                            for j in 0..group {
                                let gn = gr[j] * gd[g0 + j];
                                dst[j] += (gn - src[j] * inv * dot) * inv;
                            }
                        }
                    });
                }
            }
            Op::Conv { x, w, dims, col } => {
                let (x, w, dims) = (*x, *w, *dims);
                let patch = dims.patch();
                if self.needs(w) {
                    let mut gw = vec![0.0; patch * dims.o];
                    matmul_tn(patch, dims.rows(), dims.o, col, g, &mut gw, false);
                    self.acc(w, |dst| dst.iter_mut().zip(&gw).for_each(|(p, q)| *p += q));
                }
                if self.needs(x) {
                    let mut gcol = vec![0.0; dims.rows() * patch];
                    matmul_nt(dims.rows(), dims.o, patch, g, self.data(w), &mut gcol, false);
                    let i = dims.i;
                    self.acc(x, |gx| {
                        dims.for_each_tap(|row, off, src| {
                            let s = &gcol[row * patch + off..row * patch + off + i];
                            for (p, q) in gx[src..src + i].iter_mut().zip(s) {
                                *p += q;
                            }
                        });
                    });
                }
            }
            Op::Swish(x) => {
                let xd = self.data(*x).to_vec();
                self.acc(*x, |gx| {
                    for ((o, v), gv) in gx.iter_mut().zip(&xd).zip(g) {
                        let s = sigmoid(*v);
                        *o += gv * (s + v * s * (1.0 - s));
                    }
                });
            }
            Op::Sigmoid(x) => {
                let y = self.nodes[idx].value.data().to_vec();
                self.acc(*x, |gx| {
                    for ((o, s), gv) in gx.iter_mut().zip(&y).zip(g) {
                        *o += gv * s * (1.0 - s);
                    }
                });
            }
            Op::Log(x) => {
                let xd = self.data(*x).to_vec();
                self.acc(*x, |gx| {
                    for ((o, v), gv) in gx.iter_mut().zip(&xd).zip(g) {
                        *o += gv / v;
                    }
                });
            }
            Op::Reshape(x) => {
                self.acc(*x, |gx| gx.iter_mut().zip(g).for_each(|(p, q)| *p += q));
            }
            Op::Permute { x, axes } => {
                let out_shape = self.nodes[idx].value.shape().to_vec();
                let mut inv = vec![0; axes.len()];
                for (d, &a) in axes.iter().enumerate() {
                    inv[a] = d;
                }
                let mut back = vec![0.0; g.len()];
                permute_data(g, &out_shape, &inv, &mut back);
                self.acc(*x, |gx| gx.iter_mut().zip(&back).for_each(|(p, q)| *p += q));
            }
            Op::SumAll(x) => {
                let s = g[0];
                self.acc(*x, |gx| gx.iter_mut().for_each(|p| *p += s));
            }
            Op::SumSq(x) => {
                let s = g[0];
                let xd = self.data(*x).to_vec();
                self.acc(*x, |gx| gx.iter_mut().zip(&xd).for_each(|(p, v)| *p += 2.0 * s * v));
            }
            Op::SumAxis { x, axis } => {
                let xs = self.shape(*x).to_vec();
                let outer: usize = xs[..*axis].iter().product();
                let len = xs[*axis];
                let inner: usize = xs[*axis + 1..].iter().product();
                self.acc(*x, |gx| {
                    for o in 0..outer {
                        let src = &g[o * inner..(o + 1) * inner];
                        for a in 0..len {
                            let base = (o * len + a) * inner;
                            for (p, q) in gx[base..base + inner].iter_mut().zip(src) {
                                *p += q;
                            }
                        }
                    }
                });
            }
            Op::Concat { xs, axis } => {
                let shape = self.nodes[idx].value.shape().to_vec();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[*axis + 1..].iter().product();
                let total = shape[*axis] * inner;
                let mut offset = 0;
                for &v in xs {
                    let len = self.shape(v)[*axis] * inner;
                    self.acc(v, |gv| {
                        for o in 0..outer {
                            let src = &g[o * total + offset..o * total + offset + len];
                            for (p, q) in gv[o * len..(o + 1) * len].iter_mut().zip(src) {
                                *p += q;
                            }
                        }
                    });
                    offset += len;
                }
            }
            Op::Slice { x, axis, start } => {
                let xs = self.shape(*x).to_vec();
                let len = self.nodes[idx].value.shape()[*axis];
                let outer: usize = xs[..*axis].iter().product();
                let inner: usize = xs[*axis + 1..].iter().product();
                let full = xs[*axis];
                let start = *start;
                self.acc(*x, |gx| {
                    for o in 0..outer {
                        let base = (o * full + start) * inner;
                        let src = &g[o * len * inner..(o + 1) * len * inner];
                        for (p, q) in gx[base..base + len * inner].iter_mut().zip(src) {
                            *p += q;
                        }
                    }
                });
            }
            Op::Expand { x, axes } => {
                let xs = self.shape(*x).to_vec();
                let out_shape = self.nodes[idx].value.shape().to_vec();
                let map = expand_index_map(&xs, &out_shape, axes);
                self.acc(*x, |gx| {
                    for (&i, gv) in map.iter().zip(g) {
                        gx[i] += gv;
                    }
                });
            }
            Op::MagPow { x, p } => {
                let p = *p;
                let xd = self.data(*x).to_vec();
                self.acc(*x, |gx| {
                    for ((o, z), gz) in gx.chunks_exact_mut(2).zip(xd.chunks_exact(2)).zip(g.chunks_exact(2)) {
                        let s = z[0] * z[0] + z[1] * z[1];
                        if s == 0.0 {
                            continue;
                        }
                        let f = s.powf(0.5 * (p - 1.0));
                        let c = (p - 1.0) * f / s;
                        let (re, im) = (z[0], z[1]);
                        o[0] += gz[0] * (f + c * re * re) + gz[1] * c * re * im;
                        o[1] += gz[0] * c * re * im + gz[1] * (f + c * im * im);
                    }
                });
            }
            Op::CMul(a, b) => {
                let (a, b) = (*a, *b);
                let ad = self.data(a).to_vec();
                let bd = self.data(b).to_vec();
                self.acc(a, |ga| {
                    for ((o, q), gz) in ga.chunks_exact_mut(2).zip(bd.chunks_exact(2)).zip(g.chunks_exact(2)) {
                        o[0] += gz[0] * q[0] + gz[1] * q[1];
                        o[1] += -gz[0] * q[1] + gz[1] * q[0];
                    }
                });
                self.acc(b, |gb| {
                    for ((o, p), gz) in gb.chunks_exact_mut(2).zip(ad.chunks_exact(2)).zip(g.chunks_exact(2)) {
                        o[0] += gz[0] * p[0] + gz[1] * p[1];
                        o[1] += -gz[0] * p[1] + gz[1] * p[0];
                    }
                });
            }
            Op::Apply { x, op: lin } => {
                let (n_in, n_out) = (lin.in_len(), lin.out_len());
                let mut back = vec![0.0; g.len() / n_out * n_in];
                for (src, dst) in g.chunks_exact(n_out).zip(back.chunks_exact_mut(n_in)) {
                    lin.adjoint(src, dst);
                }
                self.acc(*x, |gx| gx.iter_mut().zip(&back).for_each(|(p, q)| *p += q));
            }
        }
        self.nodes[idx].op = op;
    }
}

/// For every output element of an expand, the source index in the input.
fn expand_index_map(xs: &[usize], shape: &[usize], axes: &[usize]) -> Vec<usize> {
    let in_strides = strides(xs);
    let mut step = vec![0usize; shape.len()];
    for (i, &a) in axes.iter().enumerate() {
        step[a] = in_strides[i];
    }
    let n: usize = shape.iter().product();
    let mut map = Vec::with_capacity(n);
    let mut idx = vec![0usize; shape.len()];
    let mut off = 0usize;
    for _ in 0..n {
        map.push(off);
        for d in (0..shape.len()).rev() {
            idx[d] += 1;
            off += step[d];
            if idx[d] < shape[d] {
                break;
            }
            off -= step[d] * idx[d];
            idx[d] = 0;
        }
    }
    map
}
