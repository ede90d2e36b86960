use super::ops::{batched_gemm, matmul_dims, MatDims};
use super::{Fault, Node, NodeId, Op};
use crate::error::Result;
use crate::tensor::kernels::{self, MASKED_ROW_THRESHOLD};
use crate::tensor::{reduce_to_shape, split_axis, Real, Tensor};

type Grads<T> = Vec<(NodeId, Tensor<T>)>;

fn zip_map<T: Real>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| f(x, y))
        .collect();
    Tensor::from_parts(a.shape().to_vec(), data)
}

/// Broadcast-aware gradient for a binary elementwise op: `da(a, b, g)` and
/// `db(a, b, g)` are evaluated on the broadcast grid and reduced back.
fn broadcast_binary<T: Real>(
    nodes: &[Node<T>],
    a: NodeId,
    b: NodeId,
    g: &Tensor<T>,
    da: impl Fn(T, T, T) -> T,
    db: impl Fn(T, T, T) -> T,
) -> Result<Grads<T>> {
    let (va, vb) = (&nodes[a].value, &nodes[b].value);
    let ea = expand(va, g.shape())?;
    let eb = expand(vb, g.shape())?;
    let mut out = Vec::new();
    for (id, v, f) in [(a, va, &da as &dyn Fn(T, T, T) -> T), (b, vb, &db)] {
        if !nodes[id].requires_grad {
            continue;
        }
        let data = ea
            .data()
            .iter()
            .zip(eb.data())
            .zip(g.data())
            .map(|((&x, &y), &gv)| f(x, y, gv))
            .collect();
        let full = Tensor::from_parts(g.shape().to_vec(), data);
        out.push((id, reduce_to_shape(&full, v.shape())));
    }
    Ok(out)
}

fn expand<T: Real>(v: &Tensor<T>, shape: &[usize]) -> Result<Tensor<T>> {
    if v.shape() == shape {
        return Ok(v.clone());
    }
    crate::tensor::broadcast_zip(v, &Tensor::zeros(shape), "expand", |a, _| a)
}

fn matmul_backward<T: Real>(
    nodes: &[Node<T>],
    a: NodeId,
    b: NodeId,
    g: &Tensor<T>,
) -> Result<Grads<T>> {
    let (va, vb) = (&nodes[a].value, &nodes[b].value);
    let d = matmul_dims(va.shape(), vb.shape())?;
    let mut out = Vec::new();
    if nodes[a].requires_grad {
        // dA = G · Bᵀ
        let bt = vb.permute(&last2_perm(vb.rank()))?;
        let dd = MatDims {
            m: d.m,
            k: d.p,
            p: d.k,
            a_batched: true,
            b_batched: d.b_batched,
            ..d.clone()
        };
        let full = batched_gemm(g.data(), bt.data(), &dd);
        out.push((
            a,
            fold_batch(full, d.batch, d.m * d.k, d.a_batched, va.shape()),
        ));
    }
    if nodes[b].requires_grad {
        // dB = Aᵀ · G
        let at = va.permute(&last2_perm(va.rank()))?;
        let dd = MatDims {
            m: d.k,
            k: d.m,
            p: d.p,
            a_batched: d.a_batched,
            b_batched: true,
            ..d.clone()
        };
        let full = batched_gemm(at.data(), g.data(), &dd);
        out.push((
            b,
            fold_batch(full, d.batch, d.k * d.p, d.b_batched, vb.shape()),
        ));
    }
    Ok(out)
}

fn last2_perm(rank: usize) -> Vec<usize> {
    let mut p: Vec<usize> = (0..rank).collect();
    p.swap(rank - 2, rank - 1);
    p
}

/// Sums per-batch gradients of an operand that was shared across the batch.
fn fold_batch<T: Real>(
    full: Vec<T>,
    batch: usize,
    each: usize,
    batched: bool,
    shape: &[usize],
) -> Tensor<T> {
    if batched {
        return Tensor::from_parts(shape.to_vec(), full);
    }
    let mut acc = full[..each].to_vec();
    for i in 1..batch {
        acc.iter_mut()
            .zip(&full[i * each..(i + 1) * each])
            .for_each(|(a, &b)| *a += b);
    }
    Tensor::from_parts(shape.to_vec(), acc)
}

fn last_dim<T: Real>(t: &Tensor<T>) -> usize {
    *t.shape().last().expect("non-scalar")
}

/// Gradients flowing from node `id` (with output gradient `g`) to its inputs.
pub(super) fn propagate<T: Real>(
    nodes: &[Node<T>],
    id: NodeId,
    g: &Tensor<T>,
    fault: Option<Fault>,
) -> Result<Grads<T>> {
    let node = &nodes[id];
    let y = &node.value;
    let val = |i: NodeId| &nodes[i].value;
    let one = T::one();
    Ok(match &node.op {
        Op::Leaf => Vec::new(),
        &Op::Add(a, b) => broadcast_binary(nodes, a, b, g, |_, _, g| g, |_, _, g| g)?,
        &Op::Sub(a, b) => broadcast_binary(nodes, a, b, g, |_, _, g| g, |_, _, g| -g)?,
        &Op::Mul(a, b) => broadcast_binary(nodes, a, b, g, |_, y, g| g * y, |x, _, g| g * x)?,
        &Op::Div(a, b) => {
            broadcast_binary(nodes, a, b, g, |_, y, g| g / y, |x, y, g| -g * x / (y * y))?
        }
        &Op::Scale(x, s) => {
            let c = T::from_f64(s);
            vec![(x, g.map(|v| v * c))]
        }
        &Op::AddScalar(x) => vec![(x, g.clone())],
        &Op::Exp(x) => vec![(x, zip_map(g, y, |g, y| g * y))],
        &Op::Log(x) => vec![(x, zip_map(g, val(x), |g, x| g / x))],
        &Op::Sqrt(x) => vec![(x, zip_map(g, y, |g, y| g / (y + y)))],
        &Op::Sigmoid(x) => vec![(x, zip_map(g, y, |g, y| g * y * (one - y)))],
        &Op::Gelu(x) => vec![(x, zip_map(g, val(x), |g, x| g * kernels::gelu_grad(x)))],
        &Op::Softplus(x) => vec![(x, zip_map(g, val(x), |g, x| g * kernels::sigmoid(x)))],
        &Op::MatMul(a, b) => matmul_backward(nodes, a, b, g)?,
        &Op::Softmax(x) => {
            let n = last_dim(y);
            let xv = val(x);
            let threshold = T::from_f64(MASKED_ROW_THRESHOLD);
            let sign = if fault == Some(Fault::SoftmaxGradSign) {
                -one
            } else {
                one
            };
            let mut dx = vec![T::zero(); y.numel()];
            for ((row_y, row_g), (row_x, row_d)) in y
                .data()
                .chunks_exact(n)
                .zip(g.data().chunks_exact(n))
                .zip(xv.data().chunks_exact(n).zip(dx.chunks_exact_mut(n)))
            {
                let max = row_x.iter().copied().fold(T::neg_infinity(), T::max);
                if max < threshold {
                    continue;
                }
                let dot: T = row_y.iter().zip(row_g).map(|(&a, &b)| a * b).sum();
                for ((d, &yy), &gg) in row_d.iter_mut().zip(row_y).zip(row_g) {
                    *d = sign * yy * (gg - dot);
                }
            }
            vec![(x, Tensor::from_parts(y.shape().to_vec(), dx))]
        }
        &Op::LogSoftmax(x) => {
            let n = last_dim(y);
            let mut dx = vec![T::zero(); y.numel()];
            for ((row_y, row_g), row_d) in y
                .data()
                .chunks_exact(n)
                .zip(g.data().chunks_exact(n))
                .zip(dx.chunks_exact_mut(n))
            {
                let s: T = row_g.iter().copied().sum();
                for ((d, &yy), &gg) in row_d.iter_mut().zip(row_y).zip(row_g) {
                    *d = gg - yy.exp() * s;
                }
            }
            vec![(x, Tensor::from_parts(y.shape().to_vec(), dx))]
        }
        Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat,
            rstd,
        } => {
            let n = last_dim(y);
            let gam = val(*gamma).data();
            let mut dx = vec![T::zero(); y.numel()];
            let mut dg = vec![T::zero(); n];
            let mut db = vec![T::zero(); n];
            let nf = T::from_f64(n as f64);
            for (r, &rs) in rstd.iter().enumerate() {
                let gr = &g.data()[r * n..(r + 1) * n];
                let hr = &xhat[r * n..(r + 1) * n];
                let mut s1 = T::zero();
                let mut s2 = T::zero();
                for j in 0..n {
                    let dh = gr[j] * gam[j];
                    s1 += dh;
                    s2 += dh * hr[j];
                    dg[j] += gr[j] * hr[j];
                    db[j] += gr[j];
                }
                for j in 0..n {
                    let dh = gr[j] * gam[j];
                    dx[r * n + j] = rs / nf * (nf * dh - s1 - hr[j] * s2);
                }
            }
            vec![
                (*x, Tensor::from_parts(y.shape().to_vec(), dx)),
                (*gamma, Tensor::from_parts(vec![n], dg)),
                (*beta, Tensor::from_parts(vec![n], db)),
            ]
        }
        &Op::SumAxis { x, axis } => {
            let shape = val(x).shape();
            let (outer, len, inner) = split_axis(shape, axis);
            let mut dx = Vec::with_capacity(outer * len * inner);
            for o in 0..outer {
                for _ in 0..len {
                    dx.extend_from_slice(&g.data()[o * inner..(o + 1) * inner]);
                }
            }
            vec![(x, Tensor::from_parts(shape.to_vec(), dx))]
        }
        &Op::SumAll(x) => vec![(x, Tensor::full(val(x).shape(), g.data()[0]))],
        &Op::Reshape(x) => vec![(x, g.reshape(val(x).shape())?)],
        Op::Permute { x, perm } => {
            let mut inv = vec![0; perm.len()];
            for (i, &p) in perm.iter().enumerate() {
                inv[p] = i;
            }
            vec![(*x, g.permute(&inv)?)]
        }
        Op::Concat { xs, axis } => {
            let mut start = 0;
            let mut out = Vec::new();
            for &x in xs {
                let len = val(x).shape()[*axis];
                if nodes[x].requires_grad {
                    out.push((x, g.narrow(*axis, start, len)?));
                }
                start += len;
            }
            out
        }
        &Op::Narrow { x, axis, start } => {
            let shape = val(x).shape();
            let (outer, full, inner) = split_axis(shape, axis);
            let len = g.shape()[axis];
            let mut dx = vec![T::zero(); outer * full * inner];
            for o in 0..outer {
                let dst = (o * full + start) * inner;
                dx[dst..dst + len * inner]
                    .copy_from_slice(&g.data()[o * len * inner..(o + 1) * len * inner]);
            }
            vec![(x, Tensor::from_parts(shape.to_vec(), dx))]
        }
        Op::GatherRows { x, index } => {
            let shape = val(*x).shape();
            let w = g.numel() / index.len();
            let mut dx = vec![T::zero(); shape[0] * w];
            for (r, &i) in index.iter().enumerate() {
                dx[i * w..(i + 1) * w]
                    .iter_mut()
                    .zip(&g.data()[r * w..(r + 1) * w])
                    .for_each(|(d, &s)| *d += s);
            }
            vec![(*x, Tensor::from_parts(shape.to_vec(), dx))]
        }
        Op::ScatterMean { x, index, counts } => {
            let shape = val(*x).shape();
            let w = g.numel() / counts.len();
            let mut dx = Vec::with_capacity(index.len() * w);
            for &i in index {
                let inv = one / T::from_f64(counts[i] as f64);
                dx.extend(g.data()[i * w..(i + 1) * w].iter().map(|&v| v * inv));
            }
            vec![(*x, Tensor::from_parts(shape.to_vec(), dx))]
        }
        Op::DepthwiseConv { x, k, geom } => {
            let (dx, dk) =
                kernels::depthwise_conv2d_backward(val(*x).data(), val(*k).data(), g.data(), geom);
            vec![
                (*x, Tensor::from_parts(val(*x).shape().to_vec(), dx)),
                (*k, Tensor::from_parts(val(*k).shape().to_vec(), dk)),
            ]
        }
        Op::TransposedConv { x, k, geom } => {
            let (dx, dk) =
                kernels::transposed_conv2d_backward(val(*x).data(), val(*k).data(), g.data(), geom);
            vec![
                (*x, Tensor::from_parts(val(*x).shape().to_vec(), dx)),
                (*k, Tensor::from_parts(val(*k).shape().to_vec(), dk)),
            ]
        }
        Op::MaxPool { x, argmax } => {
            let shape = val(*x).shape();
            let mut dx = vec![T::zero(); val(*x).numel()];
            for (&i, &gv) in argmax.iter().zip(g.data()) {
                dx[i] += gv;
            }
            vec![(*x, Tensor::from_parts(shape.to_vec(), dx))]
        }
        &Op::AdaptiveAvgPool(x) => {
            let s = val(x).shape();
            let (oh, ow) = (y.shape()[1], y.shape()[2]);
            let dx = kernels::adaptive_avg_pool2d_backward(g.data(), s[0], s[1], s[2], oh, ow);
            vec![(x, Tensor::from_parts(s.to_vec(), dx))]
        }
        &Op::Resize(x) => {
            let s = val(x).shape();
            let (oh, ow) = (y.shape()[1], y.shape()[2]);
            let dx = kernels::resize_bilinear_backward(g.data(), s[0], s[1], s[2], oh, ow);
            vec![(x, Tensor::from_parts(s.to_vec(), dx))]
        }
    })
}
