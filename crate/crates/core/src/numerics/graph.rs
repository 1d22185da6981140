//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every op applied during a forward pass as a node that
//! owns its value. [`Graph::backward`] walks the tape in reverse and returns
//! per-node gradients. Nodes whose inputs all have `requires_grad == false`
//! are constants and are skipped during the backward sweep, which keeps the
//! frozen parts of a model free of backward cost.

use crate::error::{Error, Result};
use crate::numerics::kernels::{
    self, broadcast_offsets, broadcast_shape, col2im, im2col, reduce_to_shape, AxisTaps, ConvGeom,
};
use crate::numerics::scalar::{gemm, MatRef};
use crate::numerics::tensor::strides_of;
use crate::numerics::{Scalar, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Unary {
    Sigmoid,
    Relu,
    Gelu,
    Exp,
    Log,
    Abs,
    Tanh,
    Recip,
}

impl Unary {
    pub fn name(self) -> &'static str {
        match self {
            Unary::Sigmoid => "sigmoid",
            Unary::Relu => "relu",
            Unary::Gelu => "gelu",
            Unary::Exp => "exp",
            Unary::Log => "log",
            Unary::Abs => "abs",
            Unary::Tanh => "tanh",
            Unary::Recip => "recip",
        }
    }
}

const GELU_S: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn unary_fwd<T: Scalar>(kind: Unary, x: T) -> T {
    match kind {
        Unary::Sigmoid => sigmoid_scalar(x),
        Unary::Relu => x.max(T::zero()),
        Unary::Gelu => {
            let u = T::of(GELU_S) * (x + T::of(GELU_A) * x * x * x);
            T::of(0.5) * x * (T::one() + u.tanh())
        }
        Unary::Exp => x.exp(),
        Unary::Log => x.ln(),
        Unary::Abs => x.abs(),
        Unary::Tanh => x.tanh(),
        Unary::Recip => T::one() / x,
    }
}

/// Derivative given input `x` and output `y`.
fn unary_deriv<T: Scalar>(kind: Unary, x: T, y: T) -> T {
    match kind {
        Unary::Sigmoid => y * (T::one() - y),
        Unary::Relu => {
            if x > T::zero() {
                T::one()
            } else {
                T::zero()
            }
        }
        Unary::Gelu => {
            let s = T::of(GELU_S);
            let a = T::of(GELU_A);
            let t = (s * (x + a * x * x * x)).tanh();
            let half = T::of(0.5);
            half * (T::one() + t)
                + half * x * (T::one() - t * t) * s * (T::one() + T::of(3.0) * a * x * x)
        }
        Unary::Exp => y,
        Unary::Log => T::one() / x,
        // Subgradient 0 at the kink.
        Unary::Abs => {
            if x > T::zero() {
                T::one()
            } else if x < T::zero() {
                -T::one()
            } else {
                T::zero()
            }
        }
        Unary::Tanh => T::one() - y * y,
        Unary::Recip => -y * y,
    }
}

/// Numerically stable logistic function.
pub fn sigmoid_scalar<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Unary(Var, Unary),
    Clamp(Var, T, T),
    MatMul {
        a: Var,
        b: Var,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        shared_rhs: bool,
    },
    Permute(Var, Vec<usize>),
    Reshape(Var),
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Narrow {
        x: Var,
        axis: usize,
        start: usize,
    },
    SumAll(Var),
    SumAxes(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Conv2d {
        x: Var,
        w: Var,
        geom: ConvGeom,
        ho: usize,
        wo: usize,
        cols: Vec<T>,
    },
    ConvTranspose2d {
        x: Var,
        w: Var,
        out_geom: ConvGeom,
    },
    Resize {
        x: Var,
        ty: AxisTaps,
        tx: AxisTaps,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Recorded computation.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Result of [`Graph::backward`]: one optional gradient per node.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn add_into<T: Scalar>(slot: &mut Option<Tensor<T>>, shape: &[usize], data: Vec<T>) {
    match slot {
        Some(t) => {
            for (a, b) in t.data_mut().iter_mut().zip(data) {
                *a = *a + b;
            }
        }
        None => *slot = Some(Tensor::from_parts(shape.to_vec(), data)),
    }
}

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

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// Copy of `v` that blocks gradient flow.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.value(v).clone();
        self.constant(t)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Result<(Tensor<T>, Vec<usize>)> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let out_shape = broadcast_shape(&sa, &sb)?;
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let n: usize = out_shape.iter().product();
        let data: Vec<T> = match (
            broadcast_offsets(&out_shape, &sa),
            broadcast_offsets(&out_shape, &sb),
        ) {
            (None, None) => da.iter().zip(db).map(|(x, y)| f(*x, *y)).collect(),
            (None, Some(ob)) => (0..n).map(|i| f(da[i], db[ob[i]])).collect(),
            (Some(oa), None) => (0..n).map(|i| f(da[oa[i]], db[i])).collect(),
            (Some(oa), Some(ob)) => (0..n).map(|i| f(da[oa[i]], db[ob[i]])).collect(),
        };
        Ok((Tensor::from_parts(out_shape.clone(), data), out_shape))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, _) = self.binary(a, b, |x, y| x + y)?;
        Ok(self.push(t, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, _) = self.binary(a, b, |x, y| x - y)?;
        Ok(self.push(t, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, _) = self.binary(a, b, |x, y| x * y)?;
        Ok(self.push(t, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let t = self.value(a).map(|x| x * c);
        self.push(t, Op::Scale(a, c), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, c: T) -> Var {
        let t = self.value(a).map(|x| x + c);
        self.push(t, Op::AddScalar(a), &[a])
    }

    /// `c - a`.
    pub fn rsub_scalar(&mut self, c: T, a: Var) -> Var {
        let neg = self.scale(a, -T::one());
        self.add_scalar(neg, c)
    }

    pub fn unary(&mut self, a: Var, kind: Unary) -> Var {
        let t = self.value(a).map(|x| unary_fwd(kind, x));
        self.push(t, Op::Unary(a, kind), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Sigmoid)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Relu)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Gelu)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Exp)
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Log)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Abs)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Tanh)
    }

    pub fn recip(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Recip)
    }

    pub fn clamp(&mut self, a: Var, lo: T, hi: T) -> Var {
        let t = self.value(a).map(|x| x.max(lo).min(hi));
        self.push(t, Op::Clamp(a, lo, hi), &[a])
    }

    /// `[.., M, K] x [K, N]` (shared right operand) or `[.., M, K] x [.., K, N]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() < 2 || sb.len() < 2 {
            return Err(Error::shape(format!("matmul needs >= 2 dims: {sa:?} x {sb:?}")));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (k2, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != k2 {
            return Err(Error::shape(format!("matmul inner mismatch: {sa:?} x {sb:?}")));
        }
        let batch: usize = sa[..sa.len() - 2].iter().product();
        let shared_rhs = sb.len() == 2;
        if !shared_rhs && sb[..sb.len() - 2] != sa[..sa.len() - 2] {
            return Err(Error::shape(format!("matmul batch mismatch: {sa:?} x {sb:?}")));
        }
        let mut out = vec![T::zero(); batch * m * n];
        {
            let (da, db) = (self.value(a).data(), self.value(b).data());
            if shared_rhs {
                gemm(
                    MatRef::new(da, batch * m, k),
                    MatRef::new(db, k, n),
                    T::zero(),
                    &mut out,
                );
            } else {
                for i in 0..batch {
                    gemm(
                        MatRef::new(&da[i * m * k..(i + 1) * m * k], m, k),
                        MatRef::new(&db[i * k * n..(i + 1) * k * n], k, n),
                        T::zero(),
                        &mut out[i * m * n..(i + 1) * m * n],
                    );
                }
            }
        }
        let mut shape = sa[..sa.len() - 2].to_vec();
        shape.extend([m, n]);
        let t = Tensor::from_parts(shape, out);
        Ok(self.push(
            t,
            Op::MatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
                shared_rhs,
            },
            &[a, b],
        ))
    }

    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::shape(format!("bad permutation {perm:?} for {shape:?}")));
        }
        let t = permute_tensor(self.value(a), perm);
        Ok(self.push(t, Op::Permute(a, perm.to_vec()), &[a]))
    }

    /// Swap the last two axes.
    pub fn transpose_last(&mut self, a: Var) -> Result<Var> {
        let nd = self.shape(a).len();
        if nd < 2 {
            return Err(Error::shape("transpose needs >= 2 dims"));
        }
        let mut perm: Vec<usize> = (0..nd).collect();
        perm.swap(nd - 2, nd - 1);
        self.permute(a, &perm)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).clone().reshape(shape)?;
        Ok(self.push(t, Op::Reshape(a), &[a]))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self.shape(*parts.first().ok_or_else(|| Error::shape("concat of nothing"))?).to_vec();
        if axis >= first.len() {
            return Err(Error::shape(format!("concat axis {axis} out of range for {first:?}")));
        }
        let mut total = 0;
        for p in parts {
            let s = self.shape(*p);
            if s.len() != first.len()
                || s.iter().zip(&first).enumerate().any(|(i, (x, y))| i != axis && x != y)
            {
                return Err(Error::shape(format!("concat mismatch {s:?} vs {first:?}")));
            }
            total += s[axis];
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for p in parts {
                let len = self.shape(*p)[axis] * inner;
                data.extend_from_slice(&self.value(*p).data()[o * len..(o + 1) * len]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let t = Tensor::from_parts(shape, data);
        Ok(self.push(
            t,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            parts,
        ))
    }

    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(Error::shape(format!(
                "narrow({axis}, {start}, {len}) out of range for {shape:?}"
            )));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * shape[axis] + start) * inner;
            data.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let t = Tensor::from_parts(out_shape, data);
        Ok(self.push(t, Op::Narrow { x, axis, start }, &[x]))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let t = Tensor::scalar(self.value(a).sum());
        self.push(t, Op::SumAll(a), &[a])
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = T::of(self.value(a).numel() as f64);
        let s = self.sum_all(a);
        self.scale(s, T::one() / n)
    }

    /// Sum over `axes`, keeping them as size-1 dims.
    pub fn sum_axes(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let mut out_shape = shape.clone();
        for &ax in axes {
            if ax >= shape.len() {
                return Err(Error::shape(format!("sum axis {ax} out of range for {shape:?}")));
            }
            out_shape[ax] = 1;
        }
        let data = reduce_to_shape(self.value(a).data(), &shape, &out_shape);
        let t = Tensor::from_parts(out_shape, data);
        Ok(self.push(t, Op::SumAxes(a), &[a]))
    }

    pub fn mean_axes(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(a);
        let count: usize = axes.iter().map(|&ax| shape.get(ax).copied().unwrap_or(1)).product();
        let s = self.sum_axes(a, axes)?;
        Ok(self.scale(s, T::one() / T::of(count as f64)))
    }

    pub fn softmax_lastdim(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        if !x.all_finite() {
            return Err(Error::NonFinite("softmax input contains NaN or infinity".into()));
        }
        let t = softmax_tensor(x);
        Ok(self.push(t, Op::Softmax(a), &[a]))
    }

    /// Normalize over the last axis, then apply per-channel `gain` and `bias`.
    pub fn layernorm(&mut self, x: Var, gain: Var, bias: Var, eps: T) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let c = *shape.last().ok_or_else(|| Error::shape("layernorm of 0-d tensor"))?;
        if self.shape(gain) != [c] || self.shape(bias) != [c] {
            return Err(Error::shape(format!(
                "layernorm gain {:?} / bias {:?} do not match channel dim {c}",
                self.shape(gain),
                self.shape(bias)
            )));
        }
        if !(eps > T::zero()) {
            return Err(Error::invalid("layernorm eps must be > 0"));
        }
        let rows = self.value(x).numel() / c;
        let (xs, gs, bs) = (self.value(x).data(), self.value(gain).data(), self.value(bias).data());
        let mut xhat = vec![T::zero(); rows * c];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); rows * c];
        let cn = T::of(c as f64);
        for r in 0..rows {
            let row = &xs[r * c..(r + 1) * c];
            let mean = row.iter().copied().sum::<T>() / cn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / cn;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..c {
                let h = (row[j] - mean) * rs;
                xhat[r * c + j] = h;
                out[r * c + j] = h * gs[j] + bs[j];
            }
        }
        let t = Tensor::from_parts(shape, out);
        Ok(self.push(
            t,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            &[x, gain, bias],
        ))
    }

    /// `x: [B,C,H,W]`, `w: [O,C,kh,kw]`, no bias.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[1] {
            return Err(Error::shape(format!("conv2d input {sx:?} vs weight {sw:?}")));
        }
        let geom = ConvGeom {
            channels: sx[1],
            h: sx[2],
            w: sx[3],
            kh: sw[2],
            kw: sw[3],
            stride,
            pad,
        };
        let (ho, wo) = geom.out_hw()?;
        let (b, o) = (sx[0], sw[0]);
        let ck = geom.col_rows();
        let npos = ho * wo;
        let mut cols = vec![T::zero(); b * ck * npos];
        let mut out = vec![T::zero(); b * o * npos];
        {
            let (xd, wd) = (self.value(x).data(), self.value(w).data());
            let img = geom.channels * geom.h * geom.w;
            for i in 0..b {
                let c = &mut cols[i * ck * npos..(i + 1) * ck * npos];
                im2col(&xd[i * img..(i + 1) * img], &geom, ho, wo, c);
                gemm(
                    MatRef::new(wd, o, ck),
                    MatRef::new(c, ck, npos),
                    T::zero(),
                    &mut out[i * o * npos..(i + 1) * o * npos],
                );
            }
        }
        let t = Tensor::from_parts(vec![b, o, ho, wo], out);
        Ok(self.push(
            t,
            Op::Conv2d {
                x,
                w,
                geom,
                ho,
                wo,
                cols,
            },
            &[x, w],
        ))
    }

    /// `x: [B,Ci,H,W]`, `w: [Ci,Co,kh,kw]`; output side `(H-1)*stride - 2*pad + k`.
    pub fn conv_transpose2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[0] || stride == 0 {
            return Err(Error::shape(format!(
                "conv_transpose2d input {sx:?} vs weight {sw:?}"
            )));
        }
        let (b, ci, h, wi) = (sx[0], sx[1], sx[2], sx[3]);
        let (co, kh, kw) = (sw[1], sw[2], sw[3]);
        let oh = ((h - 1) * stride + kh)
            .checked_sub(2 * pad)
            .filter(|&v| v > 0)
            .ok_or_else(|| Error::shape("conv_transpose2d output would be empty"))?;
        let ow = ((wi - 1) * stride + kw)
            .checked_sub(2 * pad)
            .filter(|&v| v > 0)
            .ok_or_else(|| Error::shape("conv_transpose2d output would be empty"))?;
        let out_geom = ConvGeom {
            channels: co,
            h: oh,
            w: ow,
            kh,
            kw,
            stride,
            pad,
        };
        debug_assert_eq!(out_geom.out_hw().ok(), Some((h, wi)));
        let cok = co * kh * kw;
        let npos = h * wi;
        let mut out = vec![T::zero(); b * co * oh * ow];
        {
            let (xd, wd) = (self.value(x).data(), self.value(w).data());
            let mut cols = vec![T::zero(); cok * npos];
            for i in 0..b {
                gemm(
                    MatRef::new(wd, ci, cok).t(),
                    MatRef::new(&xd[i * ci * npos..(i + 1) * ci * npos], ci, npos),
                    T::zero(),
                    &mut cols,
                );
                col2im(
                    &cols,
                    &out_geom,
                    h,
                    wi,
                    &mut out[i * co * oh * ow..(i + 1) * co * oh * ow],
                );
            }
        }
        let t = Tensor::from_parts(vec![b, co, oh, ow], out);
        Ok(self.push(t, Op::ConvTranspose2d { x, w, out_geom }, &[x, w]))
    }

    /// Bilinear resize over the last two axes (half-pixel centers).
    pub fn resize_bilinear(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let (lead, h, w) = kernels::split_hw(self.shape(x))?;
        if out_h == h && out_w == w {
            return self.reshape(x, &self.shape(x).to_vec());
        }
        let ty = AxisTaps::new(h, out_h);
        let tx = AxisTaps::new(w, out_w);
        let mut out = vec![T::zero(); lead * out_h * out_w];
        kernels::resize_forward(self.value(x).data(), lead, h, w, &ty, &tx, &mut out);
        let mut shape = self.shape(x).to_vec();
        let nd = shape.len();
        shape[nd - 2] = out_h;
        shape[nd - 1] = out_w;
        let t = Tensor::from_parts(shape, out);
        Ok(self.push(t, Op::Resize { x, ty, tx }, &[x]))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).numel() != 1 {
            return Err(Error::shape(format!(
                "backward needs a scalar, got {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::from_parts(self.shape(loss).to_vec(), vec![T::one()]));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, data: Vec<T>) {
        let shape = self.shape(v).to_vec();
        add_into(&mut grads[v.0], &shape, data);
    }

    fn backprop_node(&self, node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let gd = g.data();
        let out_shape = node.value.shape();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) {
                    -T::one()
                } else {
                    T::one()
                };
                if self.wants(*a) {
                    let r = reduce_to_shape(gd, out_shape, self.shape(*a));
                    self.accumulate(grads, *a, r);
                }
                if self.wants(*b) {
                    let mut r = reduce_to_shape(gd, out_shape, self.shape(*b));
                    if sign < T::zero() {
                        r.iter_mut().for_each(|v| *v = -*v);
                    }
                    self.accumulate(grads, *b, r);
                }
            }
            Op::Mul(a, b) => {
                let n = gd.len();
                let (da, db) = (self.value(*a).data(), self.value(*b).data());
                let oa = broadcast_offsets(out_shape, self.shape(*a));
                let ob = broadcast_offsets(out_shape, self.shape(*b));
                let at = |i: usize| oa.as_ref().map_or(i, |o| o[i]);
                let bt = |i: usize| ob.as_ref().map_or(i, |o| o[i]);
                if self.wants(*a) {
                    let prod: Vec<T> = (0..n).map(|i| gd[i] * db[bt(i)]).collect();
                    let r = reduce_to_shape(&prod, out_shape, self.shape(*a));
                    self.accumulate(grads, *a, r);
                }
                if self.wants(*b) {
                    let prod: Vec<T> = (0..n).map(|i| gd[i] * da[at(i)]).collect();
                    let r = reduce_to_shape(&prod, out_shape, self.shape(*b));
                    self.accumulate(grads, *b, r);
                }
            }
            Op::Scale(a, c) => {
                let r = gd.iter().map(|&v| v * *c).collect();
                self.accumulate(grads, *a, r);
            }
            Op::AddScalar(a) => self.accumulate(grads, *a, gd.to_vec()),
            Op::Unary(a, kind) => {
                let xs = self.value(*a).data();
                let ys = node.value.data();
                let r = gd
                    .iter()
                    .zip(xs.iter().zip(ys))
                    .map(|(&gv, (&x, &y))| gv * unary_deriv(*kind, x, y))
                    .collect();
                self.accumulate(grads, *a, r);
            }
            Op::Clamp(a, lo, hi) => {
                let xs = self.value(*a).data();
                let r = gd
                    .iter()
                    .zip(xs)
                    .map(|(&gv, &x)| if x >= *lo && x <= *hi { gv } else { T::zero() })
                    .collect();
                self.accumulate(grads, *a, r);
            }
            Op::MatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
                shared_rhs,
            } => {
                let (batch, m, k, n) = (*batch, *m, *k, *n);
                let (da, db) = (self.value(*a).data(), self.value(*b).data());
                if self.wants(*a) {
                    let mut ga = vec![T::zero(); batch * m * k];
                    if *shared_rhs {
                        gemm(
                            MatRef::new(gd, batch * m, n),
                            MatRef::new(db, k, n).t(),
                            T::zero(),
                            &mut ga,
                        );
                    } else {
                        for i in 0..batch {
                            gemm(
                                MatRef::new(&gd[i * m * n..(i + 1) * m * n], m, n),
                                MatRef::new(&db[i * k * n..(i + 1) * k * n], k, n).t(),
                                T::zero(),
                                &mut ga[i * m * k..(i + 1) * m * k],
                            );
                        }
                    }
                    self.accumulate(grads, *a, ga);
                }
                if self.wants(*b) {
                    if *shared_rhs {
                        let mut gb = vec![T::zero(); k * n];
                        gemm(
                            MatRef::new(da, batch * m, k).t(),
                            MatRef::new(gd, batch * m, n),
                            T::zero(),
                            &mut gb,
                        );
                        self.accumulate(grads, *b, gb);
                    } else {
                        let mut gb = vec![T::zero(); batch * k * n];
                        for i in 0..batch {
                            gemm(
                                MatRef::new(&da[i * m * k..(i + 1) * m * k], m, k).t(),
                                MatRef::new(&gd[i * m * n..(i + 1) * m * n], m, n),
                                T::zero(),
                                &mut gb[i * k * n..(i + 1) * k * n],
                            );
                        }
                        self.accumulate(grads, *b, gb);
                    }
                }
            }
            Op::Permute(a, perm) => {
                let mut inv = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                let back = permute_tensor(g, &inv);
                self.accumulate(grads, *a, back.into_data());
            }
            Op::Reshape(a) => self.accumulate(grads, *a, gd.to_vec()),
            Op::Concat { parts, axis } => {
                let inner: usize = out_shape[axis + 1..].iter().product();
                let outer: usize = out_shape[..*axis].iter().product();
                let total = out_shape[*axis] * inner;
                let mut offset = 0;
                for p in parts {
                    let len = self.shape(*p)[*axis] * inner;
                    if self.wants(*p) {
                        let mut r = Vec::with_capacity(outer * len);
                        for o in 0..outer {
                            r.extend_from_slice(&gd[o * total + offset..o * total + offset + len]);
                        }
                        self.accumulate(grads, *p, r);
                    }
                    offset += len;
                }
            }
            Op::Narrow { x, axis, start } => {
                let in_shape = self.shape(*x);
                let inner: usize = in_shape[axis + 1..].iter().product();
                let outer: usize = in_shape[..*axis].iter().product();
                let len = out_shape[*axis] * inner;
                let mut r = vec![T::zero(); self.value(*x).numel()];
                for o in 0..outer {
                    let base = (o * in_shape[*axis] + start) * inner;
                    r[base..base + len].copy_from_slice(&gd[o * len..(o + 1) * len]);
                }
                self.accumulate(grads, *x, r);
            }
            Op::SumAll(a) => {
                let n = self.value(*a).numel();
                self.accumulate(grads, *a, vec![gd[0]; n]);
            }
            Op::SumAxes(a) => {
                let in_shape = self.shape(*a);
                let r = match broadcast_offsets(in_shape, out_shape) {
                    None => gd.to_vec(),
                    Some(off) => off.iter().map(|&o| gd[o]).collect(),
                };
                self.accumulate(grads, *a, r);
            }
            Op::Softmax(a) => {
                let c = *out_shape.last().unwrap();
                let ys = node.value.data();
                let mut r = vec![T::zero(); ys.len()];
                for row in 0..ys.len() / c {
                    let (y, gr) = (&ys[row * c..(row + 1) * c], &gd[row * c..(row + 1) * c]);
                    let dot: T = y.iter().zip(gr).map(|(a, b)| *a * *b).sum();
                    for j in 0..c {
                        r[row * c + j] = y[j] * (gr[j] - dot);
                    }
                }
                self.accumulate(grads, *a, r);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let c = *out_shape.last().unwrap();
                let rows = xhat.len() / c;
                let gs = self.value(*gain).data();
                if self.wants(*x) {
                    let cn = T::of(c as f64);
                    let mut r = vec![T::zero(); xhat.len()];
                    for row in 0..rows {
                        let base = row * c;
                        let mut mean_d = T::zero();
                        let mut mean_dh = T::zero();
                        for j in 0..c {
                            let d = gd[base + j] * gs[j];
                            mean_d = mean_d + d;
                            mean_dh = mean_dh + d * xhat[base + j];
                        }
                        mean_d = mean_d / cn;
                        mean_dh = mean_dh / cn;
                        for j in 0..c {
                            let d = gd[base + j] * gs[j];
                            r[base + j] = rstd[row] * (d - mean_d - xhat[base + j] * mean_dh);
                        }
                    }
                    self.accumulate(grads, *x, r);
                }
                if self.wants(*gain) {
                    let mut r = vec![T::zero(); c];
                    for row in 0..rows {
                        for j in 0..c {
                            r[j] = r[j] + gd[row * c + j] * xhat[row * c + j];
                        }
                    }
                    self.accumulate(grads, *gain, r);
                }
                if self.wants(*bias) {
                    let mut r = vec![T::zero(); c];
                    for row in 0..rows {
                        for j in 0..c {
                            r[j] = r[j] + gd[row * c + j];
                        }
                    }
                    self.accumulate(grads, *bias, r);
                }
            }
            Op::Conv2d {
                x,
                w,
                geom,
                ho,
                wo,
                cols,
            } => {
                let b = out_shape[0];
                let o = out_shape[1];
                let ck = geom.col_rows();
                let npos = ho * wo;
                if self.wants(*w) {
                    let mut gw = vec![T::zero(); o * ck];
                    for i in 0..b {
                        gemm(
                            MatRef::new(&gd[i * o * npos..(i + 1) * o * npos], o, npos),
                            MatRef::new(&cols[i * ck * npos..(i + 1) * ck * npos], ck, npos).t(),
                            T::one(),
                            &mut gw,
                        );
                    }
                    self.accumulate(grads, *w, gw);
                }
                if self.wants(*x) {
                    let wd = self.value(*w).data();
                    let img = geom.channels * geom.h * geom.w;
                    let mut gx = vec![T::zero(); b * img];
                    let mut dcols = vec![T::zero(); ck * npos];
                    for i in 0..b {
                        gemm(
                            MatRef::new(wd, o, ck).t(),
                            MatRef::new(&gd[i * o * npos..(i + 1) * o * npos], o, npos),
                            T::zero(),
                            &mut dcols,
                        );
                        col2im(&dcols, geom, *ho, *wo, &mut gx[i * img..(i + 1) * img]);
                    }
                    self.accumulate(grads, *x, gx);
                }
            }
            Op::ConvTranspose2d { x, w, out_geom } => {
                let sx = self.shape(*x);
                let (b, ci, h, wi) = (sx[0], sx[1], sx[2], sx[3]);
                let cok = out_geom.col_rows();
                let npos = h * wi;
                let out_img = out_geom.channels * out_geom.h * out_geom.w;
                let xd = self.value(*x).data();
                let wd = self.value(*w).data();
                let mut cols = vec![T::zero(); cok * npos];
                let mut gw = vec![T::zero(); ci * cok];
                let mut gx = vec![T::zero(); b * ci * npos];
                for i in 0..b {
                    im2col(&gd[i * out_img..(i + 1) * out_img], out_geom, h, wi, &mut cols);
                    if self.wants(*x) {
                        gemm(
                            MatRef::new(wd, ci, cok),
                            MatRef::new(&cols, cok, npos),
                            T::zero(),
                            &mut gx[i * ci * npos..(i + 1) * ci * npos],
                        );
                    }
                    if self.wants(*w) {
                        gemm(
                            MatRef::new(&xd[i * ci * npos..(i + 1) * ci * npos], ci, npos),
                            MatRef::new(&cols, cok, npos).t(),
                            T::one(),
                            &mut gw,
                        );
                    }
                }
                if self.wants(*x) {
                    self.accumulate(grads, *x, gx);
                }
                if self.wants(*w) {
                    self.accumulate(grads, *w, gw);
                }
            }
            Op::Resize { x, ty, tx } => {
                let (lead, h, w) = kernels::split_hw(self.shape(*x)).expect("validated in forward");
                let mut r = vec![T::zero(); lead * h * w];
                kernels::resize_backward(gd, lead, h, w, ty, tx, &mut r);
                self.accumulate(grads, *x, r);
            }
        }
    }
}

pub(crate) fn permute_tensor<T: Scalar>(x: &Tensor<T>, perm: &[usize]) -> Tensor<T> {
    let shape = x.shape();
    let in_strides = strides_of(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let eff: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let n = x.numel();
    let src = x.data();
    let nd = out_shape.len();
    let mut out = Vec::with_capacity(n);
    let mut idx = vec![0usize; nd];
    let mut off = 0usize;
    for _ in 0..n {
        out.push(src[off]);
        for d in (0..nd).rev() {
            idx[d] += 1;
            off += eff[d];
            if idx[d] < out_shape[d] {
                break;
            }
            off -= eff[d] * idx[d];
            idx[d] = 0;
        }
    }
    Tensor::from_parts(out_shape, out)
}

pub(crate) fn softmax_tensor<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let c = *x.shape().last().unwrap();
    let mut out = x.data().to_vec();
    for row in out.chunks_mut(c) {
        let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut s = T::zero();
        for v in row.iter_mut() {
            *v = (*v - mx).exp();
            s = s + *v;
        }
        for v in row.iter_mut() {
            *v = *v / s;
        }
    }
    Tensor::from_parts(x.shape().to_vec(), out)
}
