use super::{Op, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::kernels::{self, ConvGeom, TConvGeom};
use crate::tensor::{broadcast_zip, split_axis, Real, Tensor};

/// Batch layout of a (possibly batched) matrix product.
#[derive(Clone, Debug)]
pub(crate) struct MatDims {
    pub batch: usize,
    pub m: usize,
    pub k: usize,
    pub p: usize,
    pub a_batched: bool,
    pub b_batched: bool,
    pub out_shape: Vec<usize>,
}

pub(crate) fn matmul_dims(a: &[usize], b: &[usize]) -> Result<MatDims> {
    let err = || Error::shapes("matmul", a, b);
    if a.len() < 2 || b.len() < 2 {
        return Err(err());
    }
    let (ab, am) = a.split_at(a.len() - 2);
    let (bb, bm) = b.split_at(b.len() - 2);
    if am[1] != bm[0] {
        return Err(err());
    }
    let batch_shape = match (ab.is_empty(), bb.is_empty()) {
        (true, _) => bb,
        (false, true) => ab,
        (false, false) if ab == bb => ab,
        _ => return Err(err()),
    };
    let mut out_shape = batch_shape.to_vec();
    out_shape.extend([am[0], bm[1]]);
    Ok(MatDims {
        batch: batch_shape.iter().product(),
        m: am[0],
        k: am[1],
        p: bm[1],
        a_batched: !ab.is_empty(),
        b_batched: !bb.is_empty(),
        out_shape,
    })
}

/// Batched `a · b` over flat buffers laid out according to `d`.
pub(crate) fn batched_gemm<T: Real>(a: &[T], b: &[T], d: &MatDims) -> Vec<T> {
    let (m, k, p) = (d.m, d.k, d.p);
    let mut c = vec![T::zero(); d.batch * m * p];
    for i in 0..d.batch {
        let ao = if d.a_batched { i * m * k } else { 0 };
        let bo = if d.b_batched { i * k * p } else { 0 };
        kernels::gemm(
            &a[ao..ao + m * k],
            &b[bo..bo + k * p],
            &mut c[i * m * p..(i + 1) * m * p],
            m,
            k,
            p,
        );
    }
    c
}

fn same_tape<T: Real>(a: &Var<'_, T>, b: &Var<'_, T>) -> Result<()> {
    if std::ptr::eq(a.tape, b.tape) {
        Ok(())
    } else {
        Err(Error::Contract(
            "variables recorded on different tapes".into(),
        ))
    }
}

fn chw(op: &'static str, s: &[usize]) -> Result<(usize, usize, usize)> {
    match *s {
        [c, h, w] => Ok((c, h, w)),
        _ => Err(Error::dim(
            op,
            format!("[C, H, W] input expected, got {s:?}"),
        )),
    }
}

impl<T: Real> Tape<T> {
    /// Concatenation along `axis`.
    pub fn concat<'t>(&'t self, xs: &[Var<'t, T>], axis: usize) -> Result<Var<'t, T>> {
        let vals: Vec<_> = xs.iter().map(|v| v.value()).collect();
        let refs: Vec<&Tensor<T>> = vals.iter().map(|v| &**v).collect();
        let out = Tensor::concat(&refs, axis)?;
        let ids: Vec<_> = xs.iter().map(|v| v.id).collect();
        Ok(self.push(
            out,
            Op::Concat {
                xs: ids.clone(),
                axis,
            },
            &ids,
        ))
    }
}

impl<'t, T: Real> Var<'t, T> {
    fn binary(
        self,
        o: Var<'t, T>,
        name: &'static str,
        f: impl Fn(T, T) -> T,
        op: Op<T>,
    ) -> Result<Var<'t, T>> {
        same_tape(&self, &o)?;
        let v = broadcast_zip(&self.value(), &o.value(), name, f)?;
        Ok(self.tape.push(v, op, &[self.id, o.id]))
    }

    fn unary(self, f: impl Fn(T) -> T, op: Op<T>) -> Var<'t, T> {
        let v = self.value().map(f);
        self.tape.push(v, op, &[self.id])
    }

    pub fn add(self, o: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(o, "add", |a, b| a + b, Op::Add(self.id, o.id))
    }

    pub fn sub(self, o: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(o, "sub", |a, b| a - b, Op::Sub(self.id, o.id))
    }

    pub fn mul(self, o: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(o, "mul", |a, b| a * b, Op::Mul(self.id, o.id))
    }

    pub fn div(self, o: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(o, "div", |a, b| a / b, Op::Div(self.id, o.id))
    }

    pub fn scale(self, s: f64) -> Var<'t, T> {
        let c = T::from_f64(s);
        self.unary(|v| v * c, Op::Scale(self.id, s))
    }

    pub fn neg(self) -> Var<'t, T> {
        self.scale(-1.0)
    }

    pub fn add_scalar(self, s: f64) -> Var<'t, T> {
        let c = T::from_f64(s);
        self.unary(|v| v + c, Op::AddScalar(self.id))
    }

    /// `s - self`.
    pub fn rsub_scalar(self, s: f64) -> Var<'t, T> {
        self.neg().add_scalar(s)
    }

    pub fn exp(self) -> Var<'t, T> {
        self.unary(T::exp, Op::Exp(self.id))
    }

    pub fn ln(self) -> Var<'t, T> {
        self.unary(T::ln, Op::Log(self.id))
    }

    pub fn sqrt(self) -> Var<'t, T> {
        self.unary(T::sqrt, Op::Sqrt(self.id))
    }

    pub fn sigmoid(self) -> Var<'t, T> {
        self.unary(kernels::sigmoid, Op::Sigmoid(self.id))
    }

    pub fn gelu(self) -> Var<'t, T> {
        self.unary(kernels::gelu, Op::Gelu(self.id))
    }

    pub fn softplus(self) -> Var<'t, T> {
        self.unary(kernels::softplus, Op::Softplus(self.id))
    }

    pub fn square(self) -> Result<Var<'t, T>> {
        self.mul(self)
    }

    /// Matrix product over the last two axes; leading axes are batch axes
    /// and at most one operand may omit them.
    pub fn matmul(self, o: Var<'t, T>) -> Result<Var<'t, T>> {
        same_tape(&self, &o)?;
        let (a, b) = (self.value(), o.value());
        let d = matmul_dims(a.shape(), b.shape())?;
        let c = batched_gemm(a.data(), b.data(), &d);
        self.tape.add_macs((d.batch * d.m * d.k * d.p) as u64);
        Ok(self.tape.push(
            Tensor::from_parts(d.out_shape, c),
            Op::MatMul(self.id, o.id),
            &[self.id, o.id],
        ))
    }

    /// Softmax over the last axis. A row whose largest entry lies below the
    /// masking threshold becomes uniform and passes no gradient.
    pub fn softmax(self) -> Result<Var<'t, T>> {
        let x = self.value();
        let n = *x
            .shape()
            .last()
            .ok_or_else(|| Error::dim("softmax", "scalar input"))?;
        let (y, masked) = kernels::softmax_rows(x.data(), n);
        self.tape
            .masked_rows
            .set(self.tape.masked_rows.get() + masked as u64);
        Ok(self.tape.push(
            Tensor::from_parts(x.shape().to_vec(), y),
            Op::Softmax(self.id),
            &[self.id],
        ))
    }

    pub fn log_softmax(self) -> Result<Var<'t, T>> {
        let x = self.value();
        let n = *x
            .shape()
            .last()
            .ok_or_else(|| Error::dim("log_softmax", "scalar input"))?;
        let y = kernels::log_softmax_rows(x.data(), n);
        Ok(self.tape.push(
            Tensor::from_parts(x.shape().to_vec(), y),
            Op::LogSoftmax(self.id),
            &[self.id],
        ))
    }

    /// Normalises the last axis, then applies the affine `gamma`, `beta`.
    pub fn layer_norm(self, gamma: Var<'t, T>, beta: Var<'t, T>, eps: f64) -> Result<Var<'t, T>> {
        same_tape(&self, &gamma)?;
        same_tape(&self, &beta)?;
        let x = self.value();
        let n = *x
            .shape()
            .last()
            .ok_or_else(|| Error::dim("layer_norm", "scalar input"))?;
        let (g, b) = (gamma.value(), beta.value());
        if g.shape() != [n] || b.shape() != [n] {
            return Err(Error::shapes("layer_norm", x.shape(), g.shape()));
        }
        let (y, xhat, rstd) = kernels::layer_norm_rows(x.data(), g.data(), b.data(), n, eps);
        let op = Op::LayerNorm {
            x: self.id,
            gamma: gamma.id,
            beta: beta.id,
            xhat,
            rstd,
        };
        Ok(self.tape.push(
            Tensor::from_parts(x.shape().to_vec(), y),
            op,
            &[self.id, gamma.id, beta.id],
        ))
    }

    pub fn sum_axis(self, axis: usize, keepdim: bool) -> Result<Var<'t, T>> {
        let x = self.value();
        if axis >= x.rank() {
            return Err(Error::dim(
                "sum_axis",
                format!("axis {axis} out of range for {:?}", x.shape()),
            ));
        }
        let (outer, len, inner) = split_axis(x.shape(), axis);
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            let dst = &mut out[o * inner..(o + 1) * inner];
            for l in 0..len {
                let src = &x.data()[(o * len + l) * inner..(o * len + l + 1) * inner];
                dst.iter_mut().zip(src).for_each(|(d, &s)| *d += s);
            }
        }
        let mut shape = x.shape().to_vec();
        if keepdim {
            shape[axis] = 1;
        } else {
            shape.remove(axis);
        }
        Ok(self.tape.push(
            Tensor::from_parts(shape, out),
            Op::SumAxis { x: self.id, axis },
            &[self.id],
        ))
    }

    pub fn mean_axis(self, axis: usize, keepdim: bool) -> Result<Var<'t, T>> {
        let len = self.shape().get(axis).copied().unwrap_or(1);
        Ok(self.sum_axis(axis, keepdim)?.scale(1.0 / len as f64))
    }

    pub fn sum_all(self) -> Var<'t, T> {
        let s = self.value().data().iter().copied().sum::<T>();
        self.tape
            .push(Tensor::scalar(s), Op::SumAll(self.id), &[self.id])
    }

    pub fn mean_all(self) -> Var<'t, T> {
        let n = self.value().numel();
        self.sum_all().scale(1.0 / n as f64)
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t, T>> {
        let v = self.value().reshape(shape)?;
        Ok(self.tape.push(v, Op::Reshape(self.id), &[self.id]))
    }

    pub fn permute(self, perm: &[usize]) -> Result<Var<'t, T>> {
        let v = self.value().permute(perm)?;
        Ok(self.tape.push(
            v,
            Op::Permute {
                x: self.id,
                perm: perm.to_vec(),
            },
            &[self.id],
        ))
    }

    /// Swaps the last two axes.
    pub fn transpose(self) -> Result<Var<'t, T>> {
        let r = self.shape().len();
        if r < 2 {
            return Err(Error::dim("transpose", format!("rank {r}")));
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 2, r - 1);
        self.permute(&perm)
    }

    pub fn narrow(self, axis: usize, start: usize, len: usize) -> Result<Var<'t, T>> {
        let v = self.value().narrow(axis, start, len)?;
        Ok(self.tape.push(
            v,
            Op::Narrow {
                x: self.id,
                axis,
                start,
            },
            &[self.id],
        ))
    }

    /// Selects rows (entries of the first axis), with repetition allowed.
    pub fn gather_rows(self, index: &[usize]) -> Result<Var<'t, T>> {
        let x = self.value();
        let rows = *x
            .shape()
            .first()
            .ok_or_else(|| Error::dim("gather_rows", "scalar input"))?;
        if index.is_empty() || index.iter().any(|&i| i >= rows) {
            return Err(Error::dim(
                "gather_rows",
                format!("index out of range for {rows} rows"),
            ));
        }
        let w = x.numel() / rows;
        let mut data = Vec::with_capacity(index.len() * w);
        for &i in index {
            data.extend_from_slice(&x.data()[i * w..(i + 1) * w]);
        }
        let mut shape = x.shape().to_vec();
        shape[0] = index.len();
        Ok(self.tape.push(
            Tensor::from_parts(shape, data),
            Op::GatherRows {
                x: self.id,
                index: index.to_vec(),
            },
            &[self.id],
        ))
    }

    /// Averages rows into `out_rows` buckets: row `r` contributes to bucket
    /// `index[r]`. Empty buckets are zero.
    pub fn scatter_mean(self, index: &[usize], out_rows: usize) -> Result<Var<'t, T>> {
        let x = self.value();
        let rows = *x
            .shape()
            .first()
            .ok_or_else(|| Error::dim("scatter_mean", "scalar input"))?;
        if index.len() != rows || out_rows == 0 || index.iter().any(|&i| i >= out_rows) {
            return Err(Error::dim(
                "scatter_mean",
                format!("{} indices for {rows} rows into {out_rows}", index.len()),
            ));
        }
        let w = x.numel() / rows;
        let mut counts = vec![0usize; out_rows];
        index.iter().for_each(|&i| counts[i] += 1);
        let mut data = vec![T::zero(); out_rows * w];
        for (r, &i) in index.iter().enumerate() {
            let inv = T::one() / T::from_f64(counts[i] as f64);
            let src = &x.data()[r * w..(r + 1) * w];
            data[i * w..(i + 1) * w]
                .iter_mut()
                .zip(src)
                .for_each(|(d, &s)| *d += s * inv);
        }
        let mut shape = x.shape().to_vec();
        shape[0] = out_rows;
        let op = Op::ScatterMean {
            x: self.id,
            index: index.to_vec(),
            counts,
        };
        Ok(self
            .tape
            .push(Tensor::from_parts(shape, data), op, &[self.id]))
    }

    /// Depthwise convolution of `[C, H, W]` with a `[C, kh, kw]` kernel.
    pub fn depthwise_conv2d(self, k: Var<'t, T>, stride: usize, pad: usize) -> Result<Var<'t, T>> {
        same_tape(&self, &k)?;
        let (x, kv) = (self.value(), k.value());
        let (c, h, w) = chw("depthwise_conv2d", x.shape())?;
        let (kc, kh, kw) = chw("depthwise_conv2d", kv.shape())?;
        let oh = kernels::conv_out_size(h, kh, stride, pad);
        let ow = kernels::conv_out_size(w, kw, stride, pad);
        let (Some(oh), Some(ow)) = (oh, ow) else {
            return Err(Error::shapes("depthwise_conv2d", x.shape(), kv.shape()));
        };
        if kc != c {
            return Err(Error::shapes("depthwise_conv2d", x.shape(), kv.shape()));
        }
        let geom = ConvGeom {
            channels: c,
            h,
            w,
            kh,
            kw,
            stride,
            pad,
            oh,
            ow,
        };
        let y = kernels::depthwise_conv2d(x.data(), kv.data(), &geom);
        self.tape.add_macs((c * oh * ow * kh * kw) as u64);
        let op = Op::DepthwiseConv {
            x: self.id,
            k: k.id,
            geom,
        };
        Ok(self
            .tape
            .push(Tensor::from_parts(vec![c, oh, ow], y), op, &[self.id, k.id]))
    }

    /// 1×1 convolution of `[C, H, W]` with a `[C', C]` kernel.
    pub fn pointwise_conv2d(self, k: Var<'t, T>) -> Result<Var<'t, T>> {
        let s = self.shape();
        let (c, h, w) = chw("pointwise_conv2d", &s)?;
        let ks = k.shape();
        if ks.len() != 2 || ks[1] != c {
            return Err(Error::shapes("pointwise_conv2d", &s, &ks));
        }
        k.matmul(self.reshape(&[c, h * w])?)?
            .reshape(&[ks[0], h, w])
    }

    /// Transposed convolution of `[Cin, H, W]` with a `[Cin, Cout, kh, kw]`
    /// kernel, without padding.
    pub fn transposed_conv2d(self, k: Var<'t, T>, stride: usize) -> Result<Var<'t, T>> {
        same_tape(&self, &k)?;
        let (x, kv) = (self.value(), k.value());
        let (cin, h, w) = chw("transposed_conv2d", x.shape())?;
        let &[kin, cout, kh, kw] = kv.shape() else {
            return Err(Error::shapes("transposed_conv2d", x.shape(), kv.shape()));
        };
        if kin != cin || stride == 0 {
            return Err(Error::shapes("transposed_conv2d", x.shape(), kv.shape()));
        }
        let geom = TConvGeom {
            cin,
            cout,
            h,
            w,
            kh,
            kw,
            stride,
        };
        let y = kernels::transposed_conv2d(x.data(), kv.data(), &geom);
        self.tape.add_macs((h * w * cin * cout * kh * kw) as u64);
        let op = Op::TransposedConv {
            x: self.id,
            k: k.id,
            geom,
        };
        Ok(self.tape.push(
            Tensor::from_parts(vec![cout, geom.oh(), geom.ow()], y),
            op,
            &[self.id, k.id],
        ))
    }

    /// Max pooling of `[C, H, W]` with a square window, no padding.
    pub fn max_pool2d(self, kernel: usize, stride: usize) -> Result<Var<'t, T>> {
        let x = self.value();
        let (c, h, w) = chw("max_pool2d", x.shape())?;
        let oh = kernels::conv_out_size(h, kernel, stride, 0);
        let ow = kernels::conv_out_size(w, kernel, stride, 0);
        let (Some(oh), Some(ow)) = (oh, ow) else {
            return Err(Error::dim(
                "max_pool2d",
                format!("window {kernel} on {:?}", x.shape()),
            ));
        };
        let geom = ConvGeom {
            channels: c,
            h,
            w,
            kh: kernel,
            kw: kernel,
            stride,
            pad: 0,
            oh,
            ow,
        };
        let (y, argmax) = kernels::max_pool2d(x.data(), &geom);
        Ok(self.tape.push(
            Tensor::from_parts(vec![c, oh, ow], y),
            Op::MaxPool { x: self.id, argmax },
            &[self.id],
        ))
    }

    pub fn adaptive_avg_pool2d(self, oh: usize, ow: usize) -> Result<Var<'t, T>> {
        let x = self.value();
        let (c, h, w) = chw("adaptive_avg_pool2d", x.shape())?;
        if oh == 0 || ow == 0 || oh > h || ow > w {
            return Err(Error::dim(
                "adaptive_avg_pool2d",
                format!("{:?} -> {oh}x{ow}", x.shape()),
            ));
        }
        let y = kernels::adaptive_avg_pool2d(x.data(), c, h, w, oh, ow);
        Ok(self.tape.push(
            Tensor::from_parts(vec![c, oh, ow], y),
            Op::AdaptiveAvgPool(self.id),
            &[self.id],
        ))
    }

    /// Half-pixel bilinear resampling of `[C, H, W]`.
    pub fn resize_bilinear(self, oh: usize, ow: usize) -> Result<Var<'t, T>> {
        let x = self.value();
        let (c, h, w) = chw("resize_bilinear", x.shape())?;
        if oh == 0 || ow == 0 {
            return Err(Error::dim("resize_bilinear", "empty output"));
        }
        let y = kernels::resize_bilinear(x.data(), c, h, w, oh, ow);
        Ok(self.tape.push(
            Tensor::from_parts(vec![c, oh, ow], y),
            Op::Resize(self.id),
            &[self.id],
        ))
    }

    /// `[H, W, C]` token grid to `[C, H, W]` feature map.
    pub fn hwc_to_chw(self) -> Result<Var<'t, T>> {
        self.permute(&[2, 0, 1])
    }

    pub fn chw_to_hwc(self) -> Result<Var<'t, T>> {
        self.permute(&[1, 2, 0])
    }

    /// Divides each vector along the last axis by its Euclidean norm.
    pub fn l2_normalize(self, eps: f64) -> Result<Var<'t, T>> {
        let r = self.shape().len();
        let norm = self.square()?.sum_axis(r - 1, true)?.add_scalar(eps).sqrt();
        self.div(norm)
    }
}
