//! Loop kernels for the spatial ops. All tensors are NCHW, row-major.

use super::Real;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeometry {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub o: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeometry {
    pub fn new(x: &[usize], weight: &[usize], stride: usize, pad: usize) -> Result<Self> {
        let (&[n, c, h, w], &[o, wc, kh, kw]) = (x, weight) else {
            return Err(Error::shape(
                "conv2d",
                format!("expected input [N,C,H,W] and weight [O,C,KH,KW], got {x:?} and {weight:?}"),
            ));
        };
        if wc != c {
            return Err(Error::shape(
                "conv2d",
                format!("input has {c} channels but weight expects {wc}"),
            ));
        }
        if stride == 0 {
            return Err(Error::shape("conv2d", "stride must be positive"));
        }
        if h + 2 * pad < kh || w + 2 * pad < kw {
            return Err(Error::shape(
                "conv2d",
                format!("kernel {kh}x{kw} larger than padded input {}x{}", h + 2 * pad, w + 2 * pad),
            ));
        }
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (w + 2 * pad - kw) / stride + 1;
        Ok(ConvGeometry { n, c, h, w, o, kh, kw, stride, pad, oh, ow })
    }

    pub fn out_shape(&self) -> Vec<usize> {
        vec![self.n, self.o, self.oh, self.ow]
    }
}

/// Output positions `[lo, hi)` along one axis whose input tap `k` lands inside
/// the unpadded input of extent `len`.
fn valid_range(k: usize, pad: usize, stride: usize, len: usize, out: usize) -> (usize, usize) {
    let lo = if pad > k { (pad - k).div_ceil(stride) } else { 0 };
    let hi = if len + pad <= k { 0 } else { out.min((len - 1 + pad - k) / stride + 1) };
    (lo, hi.max(lo))
}

/// Unfolds one sample `[C, H, W]` into columns `[C*KH*KW, OH*OW]`; padded
/// taps are zero.
fn im2col<T: Real>(x: &[T], g: &ConvGeometry, col: &mut [T]) {
    let plane = g.oh * g.ow;
    for c in 0..g.c {
        let x_p = &x[c * g.h * g.w..][..g.h * g.w];
        for ky in 0..g.kh {
            let (oy_lo, oy_hi) = valid_range(ky, g.pad, g.stride, g.h, g.oh);
            for kx in 0..g.kw {
                let (ox_lo, ox_hi) = valid_range(kx, g.pad, g.stride, g.w, g.ow);
                let dst = &mut col[((c * g.kh + ky) * g.kw + kx) * plane..][..plane];
                dst.fill(T::zero());
                for oy in oy_lo..oy_hi {
                    let x_row = &x_p[(oy * g.stride + ky - g.pad) * g.w..][..g.w];
                    let d_row = &mut dst[oy * g.ow..][..g.ow];
                    for ox in ox_lo..ox_hi {
                        d_row[ox] = x_row[ox * g.stride + kx - g.pad];
                    }
                }
            }
        }
    }
}

/// Adds columns back onto one sample's input gradient; inverse layout of
/// [`im2col`].
fn col2im_add<T: Real>(col: &[T], g: &ConvGeometry, dx: &mut [T]) {
    let plane = g.oh * g.ow;
    for c in 0..g.c {
        let dx_p = &mut dx[c * g.h * g.w..][..g.h * g.w];
        for ky in 0..g.kh {
            let (oy_lo, oy_hi) = valid_range(ky, g.pad, g.stride, g.h, g.oh);
            for kx in 0..g.kw {
                let (ox_lo, ox_hi) = valid_range(kx, g.pad, g.stride, g.w, g.ow);
                let src = &col[((c * g.kh + ky) * g.kw + kx) * plane..][..plane];
                for oy in oy_lo..oy_hi {
                    let base = (oy * g.stride + ky - g.pad) * g.w;
                    let s_row = &src[oy * g.ow..][..g.ow];
                    for ox in ox_lo..ox_hi {
                        dx_p[base + ox * g.stride + kx - g.pad] += s_row[ox];
                    }
                }
            }
        }
    }
}

/// Dot product with independent partial sums so the loop vectorizes.
#[inline]
fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::zero(); 8];
    let chunks = a.len() / 8 * 8;
    for (ca, cb) in a[..chunks].chunks_exact(8).zip(b[..chunks].chunks_exact(8)) {
        for i in 0..8 {
            acc[i] += ca[i] * cb[i];
        }
    }
    let mut tail = T::zero();
    for i in chunks..a.len() {
        tail += a[i] * b[i];
    }
    acc.iter().fold(tail, |s, &v| s + v)
}

#[inline]
fn axpy<T: Real>(y: &mut [T], a: T, x: &[T]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

pub(crate) fn conv2d_forward<T: Real>(x: &[T], weight: &[T], bias: Option<&[T]>, g: &ConvGeometry) -> Vec<T> {
    let plane = g.oh * g.ow;
    let taps = g.c * g.kh * g.kw;
    let mut out = vec![T::zero(); g.n * g.o * plane];
    let mut col = vec![T::zero(); taps * plane];
    for n in 0..g.n {
        im2col(&x[n * g.c * g.h * g.w..][..g.c * g.h * g.w], g, &mut col);
        for o in 0..g.o {
            let out_p = &mut out[(n * g.o + o) * plane..][..plane];
            if let Some(b) = bias {
                out_p.fill(b[o]);
            }
            for (k, &wv) in weight[o * taps..][..taps].iter().enumerate() {
                axpy(out_p, wv, &col[k * plane..][..plane]);
            }
        }
    }
    out
}

/// Accumulates input and weight gradients of a convolution. Either output
/// may be skipped by passing `None`.
pub(crate) fn conv2d_backward<T: Real>(
    x: &[T],
    weight: &[T],
    dout: &[T],
    g: &ConvGeometry,
    mut dx: Option<&mut [T]>,
    mut dw: Option<&mut [T]>,
) {
    let plane = g.oh * g.ow;
    let taps = g.c * g.kh * g.kw;
    let sample = g.c * g.h * g.w;
    let mut col = vec![T::zero(); taps * plane];
    let mut dcol = vec![T::zero(); taps * plane];
    for n in 0..g.n {
        let d_n = &dout[n * g.o * plane..][..g.o * plane];
        if let Some(dw) = dw.as_deref_mut() {
            im2col(&x[n * sample..][..sample], g, &mut col);
            for o in 0..g.o {
                let d_p = &d_n[o * plane..][..plane];
                for k in 0..taps {
                    dw[o * taps + k] += dot(d_p, &col[k * plane..][..plane]);
                }
            }
        }
        if let Some(dx) = dx.as_deref_mut() {
            dcol.fill(T::zero());
            for o in 0..g.o {
                let d_p = &d_n[o * plane..][..plane];
                for k in 0..taps {
                    axpy(&mut dcol[k * plane..][..plane], weight[o * taps + k], d_p);
                }
            }
            col2im_add(&dcol, g, &mut dx[n * sample..][..sample]);
        }
    }
}

/// Window geometry shared by max and average pooling (no padding).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PoolGeometry {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub kernel: usize,
    pub stride: usize,
    pub oh: usize,
    pub ow: usize,
}

impl PoolGeometry {
    pub fn new(op: &'static str, x: &[usize], kernel: usize, stride: usize) -> Result<Self> {
        let &[n, c, h, w] = x else {
            return Err(Error::shape(op, format!("expected [N,C,H,W], got {x:?}")));
        };
        if kernel == 0 || stride == 0 || kernel > h || kernel > w {
            return Err(Error::shape(op, format!("kernel {kernel} stride {stride} invalid for {h}x{w}")));
        }
        Ok(PoolGeometry {
            n,
            c,
            h,
            w,
            kernel,
            stride,
            oh: (h - kernel) / stride + 1,
            ow: (w - kernel) / stride + 1,
        })
    }

    pub fn out_shape(&self) -> Vec<usize> {
        vec![self.n, self.c, self.oh, self.ow]
    }
}

/// Returns pooled values and, per output, the flat input index of the
/// winning element (first maximum in scan order).
pub(crate) fn maxpool_forward<T: Real>(x: &[T], g: &PoolGeometry) -> (Vec<T>, Vec<usize>) {
    let total = g.n * g.c * g.oh * g.ow;
    let mut out = Vec::with_capacity(total);
    let mut arg = Vec::with_capacity(total);
    for nc in 0..g.n * g.c {
        let base = nc * g.h * g.w;
        for oy in 0..g.oh {
            for ox in 0..g.ow {
                let mut best = base + oy * g.stride * g.w + ox * g.stride;
                for ky in 0..g.kernel {
                    for kx in 0..g.kernel {
                        let i = base + (oy * g.stride + ky) * g.w + ox * g.stride + kx;
                        if x[i] > x[best] {
                            best = i;
                        }
                    }
                }
                out.push(x[best]);
                arg.push(best);
            }
        }
    }
    (out, arg)
}

pub(crate) fn avgpool_forward<T: Real>(x: &[T], g: &PoolGeometry) -> Vec<T> {
    let scale = T::one() / T::of((g.kernel * g.kernel) as f64);
    let mut out = Vec::with_capacity(g.n * g.c * g.oh * g.ow);
    for nc in 0..g.n * g.c {
        let base = nc * g.h * g.w;
        for oy in 0..g.oh {
            for ox in 0..g.ow {
                let mut acc = T::zero();
                for ky in 0..g.kernel {
                    let row = base + (oy * g.stride + ky) * g.w + ox * g.stride;
                    for v in &x[row..row + g.kernel] {
                        acc += *v;
                    }
                }
                out.push(acc * scale);
            }
        }
    }
    out
}

pub(crate) fn avgpool_backward<T: Real>(dout: &[T], g: &PoolGeometry, dx: &mut [T]) {
    let scale = T::one() / T::of((g.kernel * g.kernel) as f64);
    let mut o = 0;
    for nc in 0..g.n * g.c {
        let base = nc * g.h * g.w;
        for oy in 0..g.oh {
            for ox in 0..g.ow {
                let d = dout[o] * scale;
                o += 1;
                for ky in 0..g.kernel {
                    let row = base + (oy * g.stride + ky) * g.w + ox * g.stride;
                    for v in &mut dx[row..row + g.kernel] {
                        *v += d;
                    }
                }
            }
        }
    }
}
