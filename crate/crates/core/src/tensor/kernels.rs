//! Raw numerical kernels for the graph ops.
//!
//! Convolutions are lowered to patch matrices (im2col) and small GEMMs. Every
//! output element accumulates its taps in `(channel, ky, kx)` order starting
//! from zero and adds the bias last, so the lowered route produces the same
//! bits as a direct nested loop over the zero-padded input.

use rayon::prelude::*;

use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Output extent of a strided window sweep, `None` when the window does not fit.
pub fn conv_out_dim(size: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    if stride == 0 || k == 0 || k > size + 2 * pad {
        return None;
    }
    Some((size + 2 * pad - k) / stride + 1)
}

/// Output extent of a transposed convolution.
pub fn conv_transpose_out_dim(size: usize, k: usize, stride: usize, pad: usize, output_pad: usize) -> Option<usize> {
    if size == 0 || stride == 0 {
        return None;
    }
    ((size - 1) * stride + k + output_pad).checked_sub(2 * pad).filter(|&d| d > 0)
}

/// Spatial geometry shared by conv2d, its transpose and the patch lowering.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    pub fn new(channels: usize, height: usize, width: usize, kh: usize, kw: usize, stride: usize, pad: usize) -> Result<Self> {
        let out_h = conv_out_dim(height, kh, stride, pad);
        let out_w = conv_out_dim(width, kw, stride, pad);
        match (out_h, out_w) {
            (Some(out_h), Some(out_w)) => Ok(ConvGeom { channels, height, width, kh, kw, stride, pad, out_h, out_w }),
            _ => Err(Error::shape(
                "conv",
                format!("kernel {kh}x{kw} stride {stride} pad {pad} does not fit input {height}x{width}"),
            )),
        }
    }

    pub fn patch_rows(&self) -> usize {
        self.channels * self.kh * self.kw
    }

    pub fn patch_cols(&self) -> usize {
        self.out_h * self.out_w
    }
}

/// Unfolds one `[C,H,W]` sample into a `[C*kh*kw, out_h*out_w]` patch matrix.
pub fn im2col<T: Scalar>(x: &[T], g: &ConvGeom, col: &mut [T]) {
    let cols = g.patch_cols();
    let mut row = 0;
    for c in 0..g.channels {
        let plane = &x[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let dst = &mut col[row * cols..(row + 1) * cols];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let line = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                    if iy < 0 || iy >= g.height as isize {
                        line.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *v = if ix < 0 || ix >= g.width as isize { T::zero() } else { src[ix as usize] };
                    }
                }
                row += 1;
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-adds patch entries back onto a `[C,H,W]` sample.
pub fn col2im<T: Scalar>(col: &[T], g: &ConvGeom, x: &mut [T]) {
    let cols = g.patch_cols();
    let mut row = 0;
    for c in 0..g.channels {
        let plane = &mut x[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let src = &col[row * cols..(row + 1) * cols];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let base = iy as usize * g.width;
                    for ox in 0..g.out_w {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && (ix as usize) < g.width {
                            plane[base + ix as usize] = plane[base + ix as usize] + src[oy * g.out_w + ox];
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

/// `c[m,n] += a[m,k] · b[k,n]`, accumulating over `k` in order.
pub fn gemm_nn<T: Scalar>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv = *cv + av * bv;
            }
        }
    }
}

/// `c[m,n] += a[m,k] · b[n,k]ᵀ`.
pub fn gemm_nt<T: Scalar>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = T::zero();
            for (&x, &y) in arow.iter().zip(brow) {
                acc = acc + x * y;
            }
            c[i * n + j] = c[i * n + j] + acc;
        }
    }
}

/// `c[m,n] += a[k,m]ᵀ · b[k,n]`.
pub fn gemm_tn<T: Scalar>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    for p in 0..k {
        let brow = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let av = a[p * m + i];
            let crow = &mut c[i * n..(i + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv = *cv + av * bv;
            }
        }
    }
}

fn dims4<T: Scalar>(t: &Tensor<T>, op: &'static str, what: &str) -> Result<[usize; 4]> {
    match *t.shape() {
        [a, b, c, d] => Ok([a, b, c, d]),
        _ => Err(Error::shape(op, format!("{what} must be 4-d, got {:?}", t.shape()))),
    }
}

fn check_bias<T: Scalar>(bias: Option<&Tensor<T>>, channels: usize, op: &'static str) -> Result<()> {
    if let Some(b) = bias {
        if b.shape() != [channels] {
            return Err(Error::shape(op, format!("bias shape {:?}, expected [{channels}]", b.shape())));
        }
    }
    Ok(())
}

fn add_bias<T: Scalar>(out: &mut [T], bias: Option<&Tensor<T>>, plane: usize) {
    if let Some(b) = bias {
        for (o, chunk) in out.chunks_mut(plane).enumerate() {
            let bv = b.data()[o];
            for v in chunk {
                *v = *v + bv;
            }
        }
    }
}

fn par_samples<R: Send>(n: usize, f: impl Fn(usize) -> R + Sync + Send) -> Vec<R> {
    (0..n).into_par_iter().map(f).collect()
}

fn sum_in_order<T: Scalar>(parts: Vec<Vec<T>>, len: usize) -> Vec<T> {
    let mut acc = vec![T::zero(); len];
    for part in parts {
        for (a, p) in acc.iter_mut().zip(part) {
            *a = *a + p;
        }
    }
    acc
}

/// Shape bookkeeping for conv2d; returns `(geom, out_channels)`.
pub fn conv2d_geom<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, bias: Option<&Tensor<T>>, stride: usize, pad: usize) -> Result<(ConvGeom, usize)> {
    let [_, c, h, wd] = dims4(x, "conv2d", "input")?;
    let [o, wc, kh, kw] = dims4(w, "conv2d", "kernel")?;
    if wc != c {
        return Err(Error::shape("conv2d", format!("kernel expects {wc} input channels, input has {c}")));
    }
    check_bias(bias, o, "conv2d")?;
    if stride == 0 {
        return Err(Error::shape("conv2d", "stride must be >= 1"));
    }
    Ok((ConvGeom::new(c, h, wd, kh, kw, stride, pad)?, o))
}

/// Cross-correlation of `[N,C,H,W]` with `[O,C,kh,kw]`.
pub fn conv2d<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, bias: Option<&Tensor<T>>, stride: usize, pad: usize) -> Result<Tensor<T>> {
    let (g, o) = conv2d_geom(x, w, bias, stride, pad)?;
    let n = x.shape()[0];
    let in_len = g.channels * g.height * g.width;
    let (rows, cols) = (g.patch_rows(), g.patch_cols());
    let parts = par_samples(n, |s| {
        let mut col = vec![T::zero(); rows * cols];
        im2col(&x.data()[s * in_len..(s + 1) * in_len], &g, &mut col);
        let mut out = vec![T::zero(); o * cols];
        gemm_nn(o, rows, cols, w.data(), &col, &mut out);
        add_bias(&mut out, bias, cols);
        out
    });
    Tensor::new(vec![n, o, g.out_h, g.out_w], parts.concat())
}

/// Gradients of conv2d w.r.t. input, kernel and bias.
pub fn conv2d_backward<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, gout: &Tensor<T>, stride: usize, pad: usize) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let (g, o) = conv2d_geom(x, w, None, stride, pad)?;
    let n = x.shape()[0];
    let in_len = g.channels * g.height * g.width;
    let (rows, cols) = (g.patch_rows(), g.patch_cols());
    let parts = par_samples(n, |s| {
        let mut col = vec![T::zero(); rows * cols];
        im2col(&x.data()[s * in_len..(s + 1) * in_len], &g, &mut col);
        let go = &gout.data()[s * o * cols..(s + 1) * o * cols];
        let mut gw = vec![T::zero(); o * rows];
        gemm_nt(o, cols, rows, go, &col, &mut gw);
        let mut gcol = vec![T::zero(); rows * cols];
        gemm_tn(rows, o, cols, w.data(), go, &mut gcol);
        let mut gx = vec![T::zero(); in_len];
        col2im(&gcol, &g, &mut gx);
        let gb: Vec<T> = go.chunks(cols).map(|c| c.iter().copied().sum()).collect();
        (gx, gw, gb)
    });
    let mut gxs = Vec::with_capacity(n * in_len);
    let mut gws = Vec::with_capacity(n);
    let mut gbs = Vec::with_capacity(n);
    for (gx, gw, gb) in parts {
        gxs.extend(gx);
        gws.push(gw);
        gbs.push(gb);
    }
    Ok((
        Tensor::new(x.shape().to_vec(), gxs)?,
        Tensor::new(w.shape().to_vec(), sum_in_order(gws, o * rows))?,
        Tensor::new(vec![o], sum_in_order(gbs, o))?,
    ))
}

/// Geometry of a transposed conv as the conv2d it is the adjoint of:
/// the conv maps the `[Cout,Ho,Wo]` output back onto the `[Cin,H,W]` input.
pub fn conv_transpose2d_geom<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    pad: usize,
    output_pad: usize,
) -> Result<(ConvGeom, usize)> {
    let [_, cin, h, wd] = dims4(x, "conv_transpose2d", "input")?;
    let [wc, cout, kh, kw] = dims4(w, "conv_transpose2d", "kernel")?;
    if wc != cin {
        return Err(Error::shape("conv_transpose2d", format!("kernel expects {wc} input channels, input has {cin}")));
    }
    check_bias(bias, cout, "conv_transpose2d")?;
    if stride == 0 || output_pad >= stride {
        return Err(Error::shape("conv_transpose2d", format!("need stride >= 1 and output_pad < stride (stride {stride}, output_pad {output_pad})")));
    }
    let (Some(oh), Some(ow)) = (
        conv_transpose_out_dim(h, kh, stride, pad, output_pad),
        conv_transpose_out_dim(wd, kw, stride, pad, output_pad),
    ) else {
        return Err(Error::shape("conv_transpose2d", format!("kernel {kh}x{kw} pad {pad} gives empty output for {h}x{wd}")));
    };
    let g = ConvGeom::new(cout, oh, ow, kh, kw, stride, pad)?;
    debug_assert_eq!((g.out_h, g.out_w), (h, wd));
    Ok((g, cin))
}

/// Transposed convolution with kernel layout `[Cin,Cout,kh,kw]`.
pub fn conv_transpose2d<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    pad: usize,
    output_pad: usize,
) -> Result<Tensor<T>> {
    let (g, cin) = conv_transpose2d_geom(x, w, bias, stride, pad, output_pad)?;
    let n = x.shape()[0];
    let (rows, cols) = (g.patch_rows(), g.patch_cols());
    let out_len = g.channels * g.height * g.width;
    let parts = par_samples(n, |s| {
        let xs = &x.data()[s * cin * cols..(s + 1) * cin * cols];
        let mut col = vec![T::zero(); rows * cols];
        gemm_tn(rows, cin, cols, w.data(), xs, &mut col);
        let mut out = vec![T::zero(); out_len];
        col2im(&col, &g, &mut out);
        add_bias(&mut out, bias, g.height * g.width);
        out
    });
    Tensor::new(vec![n, g.channels, g.height, g.width], parts.concat())
}

pub fn conv_transpose2d_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    gout: &Tensor<T>,
    stride: usize,
    pad: usize,
    output_pad: usize,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let (g, cin) = conv_transpose2d_geom(x, w, None, stride, pad, output_pad)?;
    let n = x.shape()[0];
    let (rows, cols) = (g.patch_rows(), g.patch_cols());
    let out_len = g.channels * g.height * g.width;
    let plane = g.height * g.width;
    let parts = par_samples(n, |s| {
        let xs = &x.data()[s * cin * cols..(s + 1) * cin * cols];
        let go = &gout.data()[s * out_len..(s + 1) * out_len];
        let mut gcol = vec![T::zero(); rows * cols];
        im2col(go, &g, &mut gcol);
        let mut gx = vec![T::zero(); cin * cols];
        gemm_nn(cin, rows, cols, w.data(), &gcol, &mut gx);
        let mut gw = vec![T::zero(); cin * rows];
        gemm_nt(cin, cols, rows, xs, &gcol, &mut gw);
        let gb: Vec<T> = go.chunks(plane).map(|c| c.iter().copied().sum()).collect();
        (gx, gw, gb)
    });
    let mut gxs = Vec::with_capacity(n * cin * cols);
    let mut gws = Vec::with_capacity(n);
    let mut gbs = Vec::with_capacity(n);
    for (gx, gw, gb) in parts {
        gxs.extend(gx);
        gws.push(gw);
        gbs.push(gb);
    }
    Ok((
        Tensor::new(x.shape().to_vec(), gxs)?,
        Tensor::new(w.shape().to_vec(), sum_in_order(gws, cin * rows))?,
        Tensor::new(vec![g.channels], sum_in_order(gbs, g.channels))?,
    ))
}

pub fn depthwise_geom<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, bias: Option<&Tensor<T>>, stride: usize, pad: usize) -> Result<ConvGeom> {
    let [_, c, h, wd] = dims4(x, "depthwise_conv2d", "input")?;
    let [wc, one, kh, kw] = dims4(w, "depthwise_conv2d", "kernel")?;
    if wc != c || one != 1 {
        return Err(Error::shape("depthwise_conv2d", format!("kernel {:?} does not match {c} input channels (expected [{c},1,kh,kw])", w.shape())));
    }
    check_bias(bias, c, "depthwise_conv2d")?;
    ConvGeom::new(c, h, wd, kh, kw, stride, pad)
}

/// One `kh×kw` filter per channel, kernel layout `[C,1,kh,kw]`.
pub fn depthwise_conv2d<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, bias: Option<&Tensor<T>>, stride: usize, pad: usize) -> Result<Tensor<T>> {
    let g = depthwise_geom(x, w, bias, stride, pad)?;
    let n = x.shape()[0];
    let (hw, ohw, kk) = (g.height * g.width, g.out_h * g.out_w, g.kh * g.kw);
    let mut out = vec![T::zero(); n * g.channels * ohw];
    out.par_chunks_mut(ohw).enumerate().for_each(|(plane_ix, dst)| {
        let c = plane_ix % g.channels;
        let src = &x.data()[plane_ix * hw..(plane_ix + 1) * hw];
        let k = &w.data()[c * kk..(c + 1) * kk];
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                let mut acc = T::zero();
                for ky in 0..g.kh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    for kx in 0..g.kw {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && (ix as usize) < g.width {
                            acc = acc + k[ky * g.kw + kx] * src[iy as usize * g.width + ix as usize];
                        }
                    }
                }
                dst[oy * g.out_w + ox] = acc;
            }
        }
    });
    add_bias_planes(&mut out, bias, g.channels, ohw);
    Tensor::new(vec![n, g.channels, g.out_h, g.out_w], out)
}

fn add_bias_planes<T: Scalar>(out: &mut [T], bias: Option<&Tensor<T>>, channels: usize, plane: usize) {
    if let Some(b) = bias {
        for (i, chunk) in out.chunks_mut(plane).enumerate() {
            let bv = b.data()[i % channels];
            for v in chunk {
                *v = *v + bv;
            }
        }
    }
}

pub fn depthwise_conv2d_backward<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, gout: &Tensor<T>, stride: usize, pad: usize) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let g = depthwise_geom(x, w, None, stride, pad)?;
    let n = x.shape()[0];
    let (hw, ohw, kk) = (g.height * g.width, g.out_h * g.out_w, g.kh * g.kw);
    let mut gx = vec![T::zero(); x.len()];
    let mut gw = vec![T::zero(); w.len()];
    let mut gb = vec![T::zero(); g.channels];
    for plane_ix in 0..n * g.channels {
        let c = plane_ix % g.channels;
        let src = &x.data()[plane_ix * hw..(plane_ix + 1) * hw];
        let go = &gout.data()[plane_ix * ohw..(plane_ix + 1) * ohw];
        let k = &w.data()[c * kk..(c + 1) * kk];
        let gxp = &mut gx[plane_ix * hw..(plane_ix + 1) * hw];
        let gk = &mut gw[c * kk..(c + 1) * kk];
        let mut bsum = T::zero();
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                let gv = go[oy * g.out_w + ox];
                bsum = bsum + gv;
                for ky in 0..g.kh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    for kx in 0..g.kw {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && (ix as usize) < g.width {
                            let off = iy as usize * g.width + ix as usize;
                            gk[ky * g.kw + kx] = gk[ky * g.kw + kx] + gv * src[off];
                            gxp[off] = gxp[off] + gv * k[ky * g.kw + kx];
                        }
                    }
                }
            }
        }
        gb[c] = gb[c] + bsum;
    }
    Ok((
        Tensor::new(x.shape().to_vec(), gx)?,
        Tensor::new(w.shape().to_vec(), gw)?,
        Tensor::new(vec![g.channels], gb)?,
    ))
}

/// Max pooling over `k×k` windows; padding cells never win. Returns the
/// output and, per output element, the flat input index of its maximum
/// (first in row-major window order on ties, i.e. the lowest flat index).
pub fn maxpool2d<T: Scalar>(x: &Tensor<T>, k: usize, stride: usize, pad: usize) -> Result<(Tensor<T>, Vec<usize>)> {
    let [n, c, h, w] = dims4(x, "maxpool2d", "input")?;
    if pad >= k {
        return Err(Error::shape("maxpool2d", format!("padding {pad} must be smaller than window {k}")));
    }
    let g = ConvGeom::new(c, h, w, k, k, stride, pad)
        .map_err(|_| Error::shape("maxpool2d", format!("window {k} stride {stride} pad {pad} larger than input {h}x{w}")))?;
    let ohw = g.out_h * g.out_w;
    let mut out = Vec::with_capacity(n * c * ohw);
    let mut arg = Vec::with_capacity(n * c * ohw);
    for plane_ix in 0..n * c {
        let base = plane_ix * h * w;
        let src = &x.data()[base..base + h * w];
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                let mut best: Option<(usize, T)> = None;
                for ky in 0..k {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..k {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let off = iy as usize * w + ix as usize;
                        let v = src[off];
                        match best {
                            Some((_, b)) if !(v > b) => {}
                            _ => best = Some((off, v)),
                        }
                    }
                }
                let (off, v) = best.expect("window always overlaps the input when pad < k");
                out.push(v);
                arg.push(base + off);
            }
        }
    }
    Ok((Tensor::new(vec![n, c, g.out_h, g.out_w], out)?, arg))
}

/// Numerically stable `ln(1 + e^x)`.
#[inline]
pub fn softplus<T: Scalar>(x: T) -> T {
    if x > T::lit(30.0) {
        x
    } else if x < T::lit(-30.0) {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

#[inline]
pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Softmax along the last axis, rowwise max subtracted first.
pub fn softmax_rows<T: Scalar>(data: &[T], row: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(data.len());
    for r in data.chunks(row) {
        let m = r.iter().copied().fold(T::neg_infinity(), T::max);
        let start = out.len();
        let mut sum = T::zero();
        for &v in r {
            let e = (v - m).exp();
            sum = sum + e;
            out.push(e);
        }
        for v in &mut out[start..] {
            *v = *v / sum;
        }
    }
    out
}
