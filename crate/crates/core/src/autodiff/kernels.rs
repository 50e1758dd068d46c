//! Forward and backward kernels for the differentiable operations.
//!
//! Every kernel visits its reductions in a fixed order so repeated runs are
//! bitwise identical.

use crate::error::{Error, Result};
use crate::tensor::{bilinear_taps, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeometry {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub kh: usize,
    pub kw: usize,
    pub oh: usize,
    pub ow: usize,
    pub stride: usize,
    pub pad: usize,
}

fn output_extent(len: usize, kernel: usize, stride: usize, pad: usize, axis: &str) -> Result<usize> {
    let padded = len + 2 * pad;
    if kernel == 0 || kernel > padded {
        return Err(Error::shape(format!("kernel {axis} extent {kernel} exceeds padded input {padded}")));
    }
    let span = padded - kernel;
    if span % stride != 0 {
        return Err(Error::shape(format!(
            "{axis}: ({len} + 2*{pad} - {kernel}) is not divisible by stride {stride}"
        )));
    }
    Ok(span / stride + 1)
}

pub(crate) fn conv_geometry(
    input: &Tensor,
    kernel: &Tensor,
    bias: &Tensor,
    stride: usize,
    pad: usize,
) -> Result<ConvGeometry> {
    if stride == 0 {
        return Err(Error::invalid("stride must be positive"));
    }
    let [n, c, h, w] = *input.shape() else {
        return Err(Error::shape(format!("conv2d input must be N×C×H×W, got {:?}", input.shape())));
    };
    let [k, kc, kh, kw] = *kernel.shape() else {
        return Err(Error::shape(format!("conv2d kernel must be K×C×kh×kw, got {:?}", kernel.shape())));
    };
    if kc != c {
        return Err(Error::shape(format!("kernel expects {kc} input channels, input has {c}")));
    }
    if bias.shape() != [k] {
        return Err(Error::shape(format!("bias must have shape [{k}], got {:?}", bias.shape())));
    }
    let oh = output_extent(h, kh, stride, pad, "height")?;
    let ow = output_extent(w, kw, stride, pad, "width")?;
    Ok(ConvGeometry { n, c, h, w, k, kh, kw, oh, ow, stride, pad })
}

/// Output positions `o` in `[lo, hi)` whose source index `o*stride + tap - pad`
/// lands inside `[0, len)`.
fn valid_range(out_len: usize, len: usize, tap: usize, stride: usize, pad: usize) -> (usize, usize) {
    let lo = if pad > tap { (pad - tap).div_ceil(stride) } else { 0 };
    let hi = if len + pad > tap { ((len + pad - tap - 1) / stride + 1).min(out_len) } else { 0 };
    (lo, hi.max(lo))
}

pub(crate) fn conv2d_forward(input: &Tensor, kernel: &Tensor, bias: &Tensor, g: &ConvGeometry) -> Tensor {
    let (x, wt, b) = (input.data(), kernel.data(), bias.data());
    let mut out = vec![0.0; g.n * g.k * g.oh * g.ow];
    for n in 0..g.n {
        for k in 0..g.k {
            let plane = &mut out[(n * g.k + k) * g.oh * g.ow..][..g.oh * g.ow];
            plane.fill(b[k]);
            for c in 0..g.c {
                let src = &x[(n * g.c + c) * g.h * g.w..][..g.h * g.w];
                for ky in 0..g.kh {
                    let (oy0, oy1) = valid_range(g.oh, g.h, ky, g.stride, g.pad);
                    for kx in 0..g.kw {
                        let weight = wt[((k * g.c + c) * g.kh + ky) * g.kw + kx];
                        let (ox0, ox1) = valid_range(g.ow, g.w, kx, g.stride, g.pad);
                        for oy in oy0..oy1 {
                            let iy = oy * g.stride + ky - g.pad;
                            let row = &src[iy * g.w..][..g.w];
                            let dst = &mut plane[oy * g.ow..][..g.ow];
                            for ox in ox0..ox1 {
                                dst[ox] += weight * row[ox * g.stride + kx - g.pad];
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(&[g.n, g.k, g.oh, g.ow], out).expect("conv output shape")
}

/// Returns (d input, d kernel, d bias).
pub(crate) fn conv2d_backward(
    input: &Tensor,
    kernel: &Tensor,
    grad_out: &[f64],
    g: &ConvGeometry,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let (x, wt) = (input.data(), kernel.data());
    let mut dx = vec![0.0; x.len()];
    let mut dw = vec![0.0; wt.len()];
    let mut db = vec![0.0; g.k];
    for n in 0..g.n {
        for k in 0..g.k {
            let gplane = &grad_out[(n * g.k + k) * g.oh * g.ow..][..g.oh * g.ow];
            db[k] += gplane.iter().sum::<f64>();
            for c in 0..g.c {
                let base = (n * g.c + c) * g.h * g.w;
                for ky in 0..g.kh {
                    let (oy0, oy1) = valid_range(g.oh, g.h, ky, g.stride, g.pad);
                    for kx in 0..g.kw {
                        let widx = ((k * g.c + c) * g.kh + ky) * g.kw + kx;
                        let weight = wt[widx];
                        let (ox0, ox1) = valid_range(g.ow, g.w, kx, g.stride, g.pad);
                        let mut acc = 0.0;
                        for oy in oy0..oy1 {
                            let iy = oy * g.stride + ky - g.pad;
                            let grow = &gplane[oy * g.ow..][..g.ow];
                            let row = base + iy * g.w;
                            for ox in ox0..ox1 {
                                let ix = row + ox * g.stride + kx - g.pad;
                                acc += grow[ox] * x[ix];
                                dx[ix] += grow[ox] * weight;
                            }
                        }
                        dw[widx] += acc;
                    }
                }
            }
        }
    }
    (dx, dw, db)
}

/// 2×2 / stride-2 max pooling. Returns the pooled tensor and, per output,
/// the flat input index that won (first maximum in row-major window order).
pub(crate) fn maxpool2_forward(input: &Tensor) -> Result<(Tensor, Vec<usize>)> {
    let (n, c, h, w) = input.dims4()?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::shape(format!("maxpool2 needs even extents, got {h}×{w}")));
    }
    let (oh, ow) = (h / 2, w / 2);
    let x = input.data();
    let mut out = Vec::with_capacity(n * c * oh * ow);
    let mut argmax = Vec::with_capacity(n * c * oh * ow);
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + 2 * oy * w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                    if x[idx] > x[best] {
                        best = idx;
                    }
                }
                out.push(x[best]);
                argmax.push(best);
            }
        }
    }
    let mut shape = input.shape().to_vec();
    let r = shape.len();
    shape[r - 2] = oh;
    shape[r - 1] = ow;
    Ok((Tensor::new(&shape, out)?, argmax))
}

/// Channel softmax per spatial position, max-subtracted.
pub(crate) fn softmax_channels_forward(scores: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = scores.dims4()?;
    if c < 2 {
        return Err(Error::shape(format!("softmax over channels needs at least 2 channels, got {c}")));
    }
    let hw = h * w;
    let s = scores.data();
    let mut out = vec![0.0; s.len()];
    let mut buf = vec![0.0; c];
    for b in 0..n {
        for p in 0..hw {
            let mut mx = f64::NEG_INFINITY;
            for k in 0..c {
                mx = mx.max(s[(b * c + k) * hw + p]);
            }
            let mut total = 0.0;
            for k in 0..c {
                buf[k] = (s[(b * c + k) * hw + p] - mx).exp();
                total += buf[k];
            }
            for k in 0..c {
                out[(b * c + k) * hw + p] = buf[k] / total;
            }
        }
    }
    Tensor::new(scores.shape(), out)
}

pub(crate) fn softmax_channels_backward(probs: &Tensor, grad_out: &[f64]) -> Vec<f64> {
    let (n, c, h, w) = probs.dims4().expect("softmax output rank");
    let hw = h * w;
    let y = probs.data();
    let mut dx = vec![0.0; y.len()];
    for b in 0..n {
        for p in 0..hw {
            let mut dot = 0.0;
            for k in 0..c {
                let i = (b * c + k) * hw + p;
                dot += grad_out[i] * y[i];
            }
            for k in 0..c {
                let i = (b * c + k) * hw + p;
                dx[i] = y[i] * (grad_out[i] - dot);
            }
        }
    }
    dx
}

pub(crate) fn upsample_forward(input: &Tensor, factor: usize) -> Result<Tensor> {
    if factor == 0 {
        return Err(Error::invalid("upsample factor must be positive"));
    }
    let (n, c, h, w) = input.dims4()?;
    let (oh, ow) = (h * factor, w * factor);
    let ty = bilinear_taps(h, oh);
    let tx = bilinear_taps(w, ow);
    let x = input.data();
    let mut out = Vec::with_capacity(n * c * oh * ow);
    for plane in 0..n * c {
        let src = &x[plane * h * w..][..h * w];
        for &(y0, y1, fy) in &ty {
            for &(x0, x1, fx) in &tx {
                let top = src[y0 * w + x0] * (1.0 - fx) + src[y0 * w + x1] * fx;
                let bottom = src[y1 * w + x0] * (1.0 - fx) + src[y1 * w + x1] * fx;
                out.push(top * (1.0 - fy) + bottom * fy);
            }
        }
    }
    let mut shape = input.shape().to_vec();
    let r = shape.len();
    shape[r - 2] = oh;
    shape[r - 1] = ow;
    Tensor::new(&shape, out)
}

pub(crate) fn upsample_backward(input_shape: &[usize], factor: usize, grad_out: &[f64]) -> Vec<f64> {
    let r = input_shape.len();
    let (h, w) = (input_shape[r - 2], input_shape[r - 1]);
    let planes: usize = input_shape[..r - 2].iter().product();
    let (oh, ow) = (h * factor, w * factor);
    let ty = bilinear_taps(h, oh);
    let tx = bilinear_taps(w, ow);
    let mut dx = vec![0.0; planes * h * w];
    for plane in 0..planes {
        let dst = &mut dx[plane * h * w..][..h * w];
        let gsrc = &grad_out[plane * oh * ow..][..oh * ow];
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let gv = gsrc[oy * ow + ox];
                dst[y0 * w + x0] += gv * (1.0 - fy) * (1.0 - fx);
                dst[y0 * w + x1] += gv * (1.0 - fy) * fx;
                dst[y1 * w + x0] += gv * fy * (1.0 - fx);
                dst[y1 * w + x1] += gv * fy * fx;
            }
        }
    }
    dx
}

pub(crate) fn concat_channels_forward(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (na, ca, ha, wa) = a.dims4()?;
    let (nb, cb, hb, wb) = b.dims4()?;
    if (na, ha, wa) != (nb, hb, wb) || a.shape().len() != b.shape().len() {
        return Err(Error::shape(format!("cannot concat {:?} with {:?}", a.shape(), b.shape())));
    }
    let (sa, sb) = (ca * ha * wa, cb * hb * wb);
    let mut out = Vec::with_capacity(a.len() + b.len());
    for n in 0..na {
        out.extend_from_slice(&a.data()[n * sa..][..sa]);
        out.extend_from_slice(&b.data()[n * sb..][..sb]);
    }
    let mut shape = a.shape().to_vec();
    let r = shape.len();
    shape[r - 3] = ca + cb;
    Tensor::new(&shape, out)
}

pub(crate) fn concat_channels_backward(a_shape: &[usize], b_shape: &[usize], grad_out: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let planes = |s: &[usize]| s[s.len() - 3..].iter().product::<usize>();
    let (sa, sb) = (planes(a_shape), planes(b_shape));
    let n = if a_shape.len() == 4 { a_shape[0] } else { 1 };
    let mut da = Vec::with_capacity(n * sa);
    let mut db = Vec::with_capacity(n * sb);
    for i in 0..n {
        let chunk = &grad_out[i * (sa + sb)..][..sa + sb];
        da.extend_from_slice(&chunk[..sa]);
        db.extend_from_slice(&chunk[sa..]);
    }
    (da, db)
}
