//! Raw array kernels shared by the graph ops and by non-differentiable callers
//! (image loading, analysis).

use crate::error::{Error, Result};
use crate::numerics::tensor::strides_of;
use crate::numerics::{Scalar, Tensor};

/// Numpy-style broadcast of two shapes (right-aligned, size-1 dims stretch).
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let n = a.len().max(b.len());
    let mut out = vec![0; n];
    for i in 0..n {
        let da = if i + a.len() >= n { a[i + a.len() - n] } else { 1 };
        let db = if i + b.len() >= n { b[i + b.len() - n] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return Err(Error::shape(format!("cannot broadcast {a:?} with {b:?}"))),
        };
    }
    Ok(out)
}

/// For each element of `out_shape`, the linear offset of the element of an
/// `in_shape` tensor that broadcasts onto it. `None` when shapes are equal.
pub fn broadcast_offsets(out_shape: &[usize], in_shape: &[usize]) -> Option<Vec<usize>> {
    if out_shape == in_shape {
        return None;
    }
    let n = out_shape.len();
    let pad = n - in_shape.len();
    let in_strides = strides_of(in_shape);
    let mut eff = vec![0usize; n];
    for i in 0..n {
        if i >= pad && in_shape[i - pad] != 1 {
            eff[i] = in_strides[i - pad];
        }
    }
    let total: usize = out_shape.iter().product();
    let mut offsets = Vec::with_capacity(total);
    let mut idx = vec![0usize; n];
    let mut off = 0usize;
    for _ in 0..total {
        offsets.push(off);
        for d in (0..n).rev() {
            idx[d] += 1;
            off += eff[d];
            if idx[d] < out_shape[d] {
                break;
            }
            off -= eff[d] * idx[d];
            idx[d] = 0;
        }
    }
    Some(offsets)
}

/// Sum `grad` (shaped like the broadcast output) back onto `in_shape`.
pub fn reduce_to_shape<T: Scalar>(
    grad: &[T],
    out_shape: &[usize],
    in_shape: &[usize],
) -> Vec<T> {
    match broadcast_offsets(out_shape, in_shape) {
        None => grad.to_vec(),
        Some(offsets) => {
            let n: usize = in_shape.iter().product();
            let mut acc = vec![T::zero(); n];
            for (g, &o) in grad.iter().zip(&offsets) {
                acc[o] = acc[o] + *g;
            }
            acc
        }
    }
}

/// Geometry of a 2D convolution (square kernel allowed to differ per axis).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub channels: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_hw(&self) -> Result<(usize, usize)> {
        let hp = self.h + 2 * self.pad;
        let wp = self.w + 2 * self.pad;
        if hp < self.kh || wp < self.kw || self.stride == 0 {
            return Err(Error::shape(format!("convolution does not fit: {self:?}")));
        }
        Ok(((hp - self.kh) / self.stride + 1, (wp - self.kw) / self.stride + 1))
    }

    pub fn col_rows(&self) -> usize {
        self.channels * self.kh * self.kw
    }
}

/// Unfold one `[C,H,W]` image into `[C*kh*kw, Ho*Wo]` patch columns.
pub fn im2col<T: Scalar>(x: &[T], g: &ConvGeom, ho: usize, wo: usize, cols: &mut [T]) {
    let npos = ho * wo;
    for c in 0..g.channels {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * npos..(row + 1) * npos];
                for oy in 0..ho {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    for ox in 0..wo {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        dst[oy * wo + ox] = if iy >= 0
                            && ix >= 0
                            && (iy as usize) < g.h
                            && (ix as usize) < g.w
                        {
                            x[(c * g.h + iy as usize) * g.w + ix as usize]
                        } else {
                            T::zero()
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-add columns back into a `[C,H,W]` image.
pub fn col2im<T: Scalar>(cols: &[T], g: &ConvGeom, ho: usize, wo: usize, x: &mut [T]) {
    let npos = ho * wo;
    for c in 0..g.channels {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &cols[row * npos..(row + 1) * npos];
                for oy in 0..ho {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy as usize >= g.h {
                        continue;
                    }
                    for ox in 0..wo {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix < 0 || ix as usize >= g.w {
                            continue;
                        }
                        let xi = (c * g.h + iy as usize) * g.w + ix as usize;
                        x[xi] = x[xi] + src[oy * wo + ox];
                    }
                }
            }
        }
    }
}

/// Linear interpolation taps along one axis (half-pixel centers, edge clamped).
#[derive(Clone, Debug)]
pub struct AxisTaps {
    pub lo: Vec<usize>,
    pub hi: Vec<usize>,
    pub w_hi: Vec<f64>,
}

impl AxisTaps {
    pub fn new(n_in: usize, n_out: usize) -> Self {
        let scale = n_in as f64 / n_out as f64;
        let mut lo = Vec::with_capacity(n_out);
        let mut hi = Vec::with_capacity(n_out);
        let mut w_hi = Vec::with_capacity(n_out);
        for o in 0..n_out {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(n_in - 1);
            let i1 = (i0 + 1).min(n_in - 1);
            lo.push(i0);
            hi.push(i1);
            w_hi.push(src - i0 as f64);
        }
        Self { lo, hi, w_hi }
    }
}

/// Bilinear resize over the last two axes of `x`.
pub fn resize_bilinear<T: Scalar>(x: &Tensor<T>, out_h: usize, out_w: usize) -> Result<Tensor<T>> {
    let (lead, h, w) = split_hw(x.shape())?;
    let ty = AxisTaps::new(h, out_h);
    let tx = AxisTaps::new(w, out_w);
    let mut out = vec![T::zero(); lead * out_h * out_w];
    resize_forward(x.data(), lead, h, w, &ty, &tx, &mut out);
    let mut shape = x.shape().to_vec();
    let nd = shape.len();
    shape[nd - 2] = out_h;
    shape[nd - 1] = out_w;
    Ok(Tensor::from_parts(shape, out))
}

pub(crate) fn split_hw(shape: &[usize]) -> Result<(usize, usize, usize)> {
    if shape.len() < 2 {
        return Err(Error::shape(format!("resize needs >= 2 dims, got {shape:?}")));
    }
    let nd = shape.len();
    Ok((shape[..nd - 2].iter().product(), shape[nd - 2], shape[nd - 1]))
}

pub(crate) fn resize_forward<T: Scalar>(
    x: &[T],
    lead: usize,
    h: usize,
    w: usize,
    ty: &AxisTaps,
    tx: &AxisTaps,
    out: &mut [T],
) {
    let (oh, ow) = (ty.lo.len(), tx.lo.len());
    for l in 0..lead {
        let src = &x[l * h * w..(l + 1) * h * w];
        let dst = &mut out[l * oh * ow..(l + 1) * oh * ow];
        for oy in 0..oh {
            let wy1 = T::of(ty.w_hi[oy]);
            let wy0 = T::one() - wy1;
            let (r0, r1) = (ty.lo[oy] * w, ty.hi[oy] * w);
            for ox in 0..ow {
                let wx1 = T::of(tx.w_hi[ox]);
                let wx0 = T::one() - wx1;
                let (c0, c1) = (tx.lo[ox], tx.hi[ox]);
                dst[oy * ow + ox] = wy0 * (wx0 * src[r0 + c0] + wx1 * src[r0 + c1])
                    + wy1 * (wx0 * src[r1 + c0] + wx1 * src[r1 + c1]);
            }
        }
    }
}

pub(crate) fn resize_backward<T: Scalar>(
    g: &[T],
    lead: usize,
    h: usize,
    w: usize,
    ty: &AxisTaps,
    tx: &AxisTaps,
    gx: &mut [T],
) {
    let (oh, ow) = (ty.lo.len(), tx.lo.len());
    for l in 0..lead {
        let src = &g[l * oh * ow..(l + 1) * oh * ow];
        let dst = &mut gx[l * h * w..(l + 1) * h * w];
        for oy in 0..oh {
            let wy1 = T::of(ty.w_hi[oy]);
            let wy0 = T::one() - wy1;
            let (r0, r1) = (ty.lo[oy] * w, ty.hi[oy] * w);
            for ox in 0..ow {
                let wx1 = T::of(tx.w_hi[ox]);
                let wx0 = T::one() - wx1;
                let (c0, c1) = (tx.lo[ox], tx.hi[ox]);
                let v = src[oy * ow + ox];
                dst[r0 + c0] = dst[r0 + c0] + wy0 * wx0 * v;
                dst[r0 + c1] = dst[r0 + c1] + wy0 * wx1 * v;
                dst[r1 + c0] = dst[r1 + c0] + wy1 * wx0 * v;
                dst[r1 + c1] = dst[r1 + c1] + wy1 * wx1 * v;
            }
        }
    }
}
