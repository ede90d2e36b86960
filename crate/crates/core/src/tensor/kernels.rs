//! Slice-level compute kernels shared by the tape's forward and backward
//! passes. All image-like buffers are channel-major `[C, H, W]`.

use super::Real;

/// Additive attention bias used to exclude a key.
pub const MASK_SENTINEL: f64 = -1e9;
/// Rows whose maximum lies below this are treated as fully masked.
pub const MASKED_ROW_THRESHOLD: f64 = -5e8;

/// `c[m,p] += a[m,k] · b[k,p]`.
pub fn gemm<T: Real>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, p: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * p);
    debug_assert_eq!(c.len(), m * p);
    const MR: usize = 4;
    const NR: usize = 16;
    let pj = p / NR * NR;
    let mut i = 0;
    while i + MR <= m {
        let mut j = 0;
        while j < pj {
            let mut acc = [[T::zero(); NR]; MR];
            for kk in 0..k {
                let bs: &[T; NR] = b[kk * p + j..kk * p + j + NR].try_into().expect("tile");
                for (r, row) in acc.iter_mut().enumerate() {
                    let av = a[(i + r) * k + kk];
                    for (x, &bv) in row.iter_mut().zip(bs) {
                        *x += av * bv;
                    }
                }
            }
            for (r, row) in acc.iter().enumerate() {
                for (x, &v) in c[(i + r) * p + j..(i + r) * p + j + NR].iter_mut().zip(row) {
                    *x += v;
                }
            }
            j += NR;
        }
        if pj < p {
            for r in i..i + MR {
                gemm_row(&a[r * k..(r + 1) * k], b, &mut c[r * p..(r + 1) * p], p, pj);
            }
        }
        i += MR;
    }
    for r in i..m {
        gemm_row(&a[r * k..(r + 1) * k], b, &mut c[r * p..(r + 1) * p], p, 0);
    }
}

/// One output row over columns `from..p`.
fn gemm_row<T: Real>(arow: &[T], b: &[T], crow: &mut [T], p: usize, from: usize) {
    for (kk, &av) in arow.iter().enumerate() {
        let brow = &b[kk * p + from..(kk + 1) * p];
        for (x, &bv) in crow[from..].iter_mut().zip(brow) {
            *x += av * bv;
        }
    }
}

/// `dst[c,r] = src[r,c]`.
pub fn transpose<T: Real>(src: &[T], dst: &mut [T], rows: usize, cols: usize) {
    const B: usize = 32;
    for r0 in (0..rows).step_by(B) {
        for c0 in (0..cols).step_by(B) {
            for r in r0..(r0 + B).min(rows) {
                for c in c0..(c0 + B).min(cols) {
                    dst[c * rows + r] = src[r * cols + c];
                }
            }
        }
    }
}

pub fn conv_out_size(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = input + 2 * pad;
    if kernel == 0 || stride == 0 || kernel > padded {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub channels: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

pub fn depthwise_conv2d<T: Real>(x: &[T], k: &[T], g: &ConvGeom) -> Vec<T> {
    let mut out = vec![T::zero(); g.channels * g.oh * g.ow];
    for c in 0..g.channels {
        let xc = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        let kc = &k[c * g.kh * g.kw..(c + 1) * g.kh * g.kw];
        let oc = &mut out[c * g.oh * g.ow..(c + 1) * g.oh * g.ow];
        for oy in 0..g.oh {
            for ox in 0..g.ow {
                let mut acc = T::zero();
                for ky in 0..g.kh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    for kx in 0..g.kw {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix < 0 || ix >= g.w as isize {
                            continue;
                        }
                        acc += xc[iy as usize * g.w + ix as usize] * kc[ky * g.kw + kx];
                    }
                }
                oc[oy * g.ow + ox] = acc;
            }
        }
    }
    out
}

/// Gradients of [`depthwise_conv2d`] with respect to input and kernel.
pub fn depthwise_conv2d_backward<T: Real>(
    x: &[T],
    k: &[T],
    grad: &[T],
    g: &ConvGeom,
) -> (Vec<T>, Vec<T>) {
    let mut dx = vec![T::zero(); x.len()];
    let mut dk = vec![T::zero(); k.len()];
    for c in 0..g.channels {
        let xo = c * g.h * g.w;
        let ko = c * g.kh * g.kw;
        let go = c * g.oh * g.ow;
        for oy in 0..g.oh {
            for ox in 0..g.ow {
                let gv = grad[go + oy * g.ow + ox];
                for ky in 0..g.kh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    for kx in 0..g.kw {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix < 0 || ix >= g.w as isize {
                            continue;
                        }
                        let xi = xo + iy as usize * g.w + ix as usize;
                        let ki = ko + ky * g.kw + kx;
                        dx[xi] += gv * k[ki];
                        dk[ki] += gv * x[xi];
                    }
                }
            }
        }
    }
    (dx, dk)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TConvGeom {
    pub cin: usize,
    pub cout: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
}

impl TConvGeom {
    pub fn oh(&self) -> usize {
        (self.h - 1) * self.stride + self.kh
    }
    pub fn ow(&self) -> usize {
        (self.w - 1) * self.stride + self.kw
    }
}

/// Transposed convolution, no padding. `k` is `[cin, cout, kh, kw]`.
pub fn transposed_conv2d<T: Real>(x: &[T], k: &[T], g: &TConvGeom) -> Vec<T> {
    let hw = g.h * g.w;
    let kk = g.kh * g.kw;
    let mut xt = vec![T::zero(); hw * g.cin];
    transpose(x, &mut xt, g.cin, hw);
    let mut col = vec![T::zero(); hw * g.cout * kk];
    gemm(&xt, k, &mut col, hw, g.cin, g.cout * kk);
    let (oh, ow) = (g.oh(), g.ow());
    let mut out = vec![T::zero(); g.cout * oh * ow];
    for iy in 0..g.h {
        for ix in 0..g.w {
            let row = &col[(iy * g.w + ix) * g.cout * kk..(iy * g.w + ix + 1) * g.cout * kk];
            for co in 0..g.cout {
                for ky in 0..g.kh {
                    for kx in 0..g.kw {
                        let oy = iy * g.stride + ky;
                        let ox = ix * g.stride + kx;
                        out[co * oh * ow + oy * ow + ox] += row[co * kk + ky * g.kw + kx];
                    }
                }
            }
        }
    }
    out
}

pub fn transposed_conv2d_backward<T: Real>(
    x: &[T],
    k: &[T],
    grad: &[T],
    g: &TConvGeom,
) -> (Vec<T>, Vec<T>) {
    let hw = g.h * g.w;
    let kk = g.kh * g.kw;
    let (oh, ow) = (g.oh(), g.ow());
    let ncol = g.cout * kk;
    let mut dcol = vec![T::zero(); hw * ncol];
    for iy in 0..g.h {
        for ix in 0..g.w {
            let row = &mut dcol[(iy * g.w + ix) * ncol..(iy * g.w + ix + 1) * ncol];
            for co in 0..g.cout {
                for ky in 0..g.kh {
                    for kx in 0..g.kw {
                        let oy = iy * g.stride + ky;
                        let ox = ix * g.stride + kx;
                        row[co * kk + ky * g.kw + kx] = grad[co * oh * ow + oy * ow + ox];
                    }
                }
            }
        }
    }
    // dX^T = dcol · K^T
    let mut kt = vec![T::zero(); k.len()];
    transpose(k, &mut kt, g.cin, ncol);
    let mut dxt = vec![T::zero(); hw * g.cin];
    gemm(&dcol, &kt, &mut dxt, hw, ncol, g.cin);
    let mut dx = vec![T::zero(); g.cin * hw];
    transpose(&dxt, &mut dx, hw, g.cin);
    // dK = X · dcol
    let mut dk = vec![T::zero(); k.len()];
    gemm(x, &dcol, &mut dk, g.cin, hw, ncol);
    (dx, dk)
}

/// Max pooling without padding; returns values and the flat argmax of
/// every window (first maximal element wins ties).
pub fn max_pool2d<T: Real>(x: &[T], g: &ConvGeom) -> (Vec<T>, Vec<usize>) {
    let n = g.channels * g.oh * g.ow;
    let mut out = Vec::with_capacity(n);
    let mut arg = Vec::with_capacity(n);
    for c in 0..g.channels {
        let base = c * g.h * g.w;
        for oy in 0..g.oh {
            for ox in 0..g.ow {
                let mut best = base + (oy * g.stride) * g.w + ox * g.stride;
                for ky in 0..g.kh {
                    for kx in 0..g.kw {
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

/// Input index range `[start, end)` of adaptive-pooling bin `i`.
pub fn adaptive_bin(i: usize, input: usize, output: usize) -> (usize, usize) {
    let start = (i * input) / output;
    let end = ((i + 1) * input).div_ceil(output);
    (start, end)
}

pub fn adaptive_avg_pool2d<T: Real>(
    x: &[T],
    c: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
) -> Vec<T> {
    let mut out = vec![T::zero(); c * oh * ow];
    for ch in 0..c {
        for oy in 0..oh {
            let (y0, y1) = adaptive_bin(oy, h, oh);
            for ox in 0..ow {
                let (x0, x1) = adaptive_bin(ox, w, ow);
                let mut acc = T::zero();
                for y in y0..y1 {
                    for xx in x0..x1 {
                        acc += x[ch * h * w + y * w + xx];
                    }
                }
                out[ch * oh * ow + oy * ow + ox] =
                    acc / T::from_f64(((y1 - y0) * (x1 - x0)) as f64);
            }
        }
    }
    out
}

pub fn adaptive_avg_pool2d_backward<T: Real>(
    grad: &[T],
    c: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
) -> Vec<T> {
    let mut dx = vec![T::zero(); c * h * w];
    for ch in 0..c {
        for oy in 0..oh {
            let (y0, y1) = adaptive_bin(oy, h, oh);
            for ox in 0..ow {
                let (x0, x1) = adaptive_bin(ox, w, ow);
                let gv =
                    grad[ch * oh * ow + oy * ow + ox] / T::from_f64(((y1 - y0) * (x1 - x0)) as f64);
                for y in y0..y1 {
                    for xx in x0..x1 {
                        dx[ch * h * w + y * w + xx] += gv;
                    }
                }
            }
        }
    }
    dx
}

/// Source taps for one output coordinate of a half-pixel bilinear resize.
#[derive(Clone, Copy, Debug)]
pub struct LerpTap {
    pub i0: usize,
    pub i1: usize,
    pub frac: f64,
}

/// Align-corners=false sampling positions: `src = (dst + 0.5)·in/out − 0.5`,
/// clamped to the valid range.
pub fn lerp_taps(input: usize, output: usize) -> Vec<LerpTap> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|d| {
            let src = ((d as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(input - 1);
            let i1 = (i0 + 1).min(input - 1);
            let frac = if i1 == i0 { 0.0 } else { src - i0 as f64 };
            LerpTap { i0, i1, frac }
        })
        .collect()
}

pub fn resize_bilinear<T: Real>(
    x: &[T],
    c: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
) -> Vec<T> {
    if oh == h && ow == w {
        return x.to_vec();
    }
    let ty = lerp_taps(h, oh);
    let tx = lerp_taps(w, ow);
    let mut out = vec![T::zero(); c * oh * ow];
    for ch in 0..c {
        let src = &x[ch * h * w..(ch + 1) * h * w];
        for (oy, a) in ty.iter().enumerate() {
            let fy = T::from_f64(a.frac);
            let gy = T::one() - fy;
            for (ox, b) in tx.iter().enumerate() {
                let fx = T::from_f64(b.frac);
                let gx = T::one() - fx;
                let v = gy * (gx * src[a.i0 * w + b.i0] + fx * src[a.i0 * w + b.i1])
                    + fy * (gx * src[a.i1 * w + b.i0] + fx * src[a.i1 * w + b.i1]);
                out[ch * oh * ow + oy * ow + ox] = v;
            }
        }
    }
    out
}

pub fn resize_bilinear_backward<T: Real>(
    grad: &[T],
    c: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
) -> Vec<T> {
    if oh == h && ow == w {
        return grad.to_vec();
    }
    let ty = lerp_taps(h, oh);
    let tx = lerp_taps(w, ow);
    let mut dx = vec![T::zero(); c * h * w];
    for ch in 0..c {
        let dst = &mut dx[ch * h * w..(ch + 1) * h * w];
        for (oy, a) in ty.iter().enumerate() {
            let fy = T::from_f64(a.frac);
            let gy = T::one() - fy;
            for (ox, b) in tx.iter().enumerate() {
                let fx = T::from_f64(b.frac);
                let gx = T::one() - fx;
                let g = grad[ch * oh * ow + oy * ow + ox];
                dst[a.i0 * w + b.i0] += g * gy * gx;
                dst[a.i0 * w + b.i1] += g * gy * fx;
                dst[a.i1 * w + b.i0] += g * fy * gx;
                dst[a.i1 * w + b.i1] += g * fy * fx;
            }
        }
    }
    dx
}

/// Row-wise softmax over contiguous rows of length `n`. Rows whose maximum is
/// below [`MASKED_ROW_THRESHOLD`] become uniform; their count is returned.
pub fn softmax_rows<T: Real>(x: &[T], n: usize) -> (Vec<T>, usize) {
    let mut out = vec![T::zero(); x.len()];
    let mut masked = 0;
    let threshold = T::from_f64(MASKED_ROW_THRESHOLD);
    for (row, orow) in x.chunks_exact(n).zip(out.chunks_exact_mut(n)) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        if max < threshold {
            masked += 1;
            let u = T::one() / T::from_f64(n as f64);
            orow.iter_mut().for_each(|v| *v = u);
            continue;
        }
        let mut sum = T::zero();
        for (o, &v) in orow.iter_mut().zip(row) {
            *o = (v - max).exp();
            sum += *o;
        }
        let inv = T::one() / sum;
        orow.iter_mut().for_each(|v| *v *= inv);
    }
    (out, masked)
}

pub fn log_softmax_rows<T: Real>(x: &[T], n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for (row, orow) in x.chunks_exact(n).zip(out.chunks_exact_mut(n)) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let lse = row.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
        for (o, &v) in orow.iter_mut().zip(row) {
            *o = v - lse;
        }
    }
    out
}

/// Layer normalisation over contiguous rows; returns output, the
/// normalised input and per-row reciprocal standard deviations.
pub fn layer_norm_rows<T: Real>(
    x: &[T],
    gamma: &[T],
    beta: &[T],
    n: usize,
    eps: f64,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let rows = x.len() / n;
    let mut y = vec![T::zero(); x.len()];
    let mut xhat = vec![T::zero(); x.len()];
    let mut rstd = Vec::with_capacity(rows);
    let nf = T::from_f64(n as f64);
    for r in 0..rows {
        let row = &x[r * n..(r + 1) * n];
        let mean = row.iter().copied().sum::<T>() / nf;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nf;
        let rs = T::one() / (var + T::from_f64(eps)).sqrt();
        rstd.push(rs);
        for j in 0..n {
            let h = (row[j] - mean) * rs;
            xhat[r * n + j] = h;
            y[r * n + j] = h * gamma[j] + beta[j];
        }
    }
    (y, xhat, rstd)
}

const SQRT_2: f64 = std::f64::consts::SQRT_2;
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Exact (erf-based) GELU.
#[inline]
pub fn gelu<T: Real>(x: T) -> T {
    T::from_f64(0.5) * x * (T::one() + (x / T::from_f64(SQRT_2)).erf())
}

#[inline]
pub fn gelu_grad<T: Real>(x: T) -> T {
    let cdf = T::from_f64(0.5) * (T::one() + (x / T::from_f64(SQRT_2)).erf());
    let pdf = T::from_f64(INV_SQRT_2PI) * (-(x * x) * T::from_f64(0.5)).exp();
    cdf + x * pdf
}

#[inline]
pub fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// `ln(1 + e^x)` without overflow.
#[inline]
pub fn softplus<T: Real>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}
