//! Axis permutation, slicing and concatenation.

use super::{strides, Real, Tensor};
use crate::error::{Error, Result};

/// Splits `shape` around `axis` into `(outer, len, inner)` element counts.
pub(crate) fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl<T: Real> Tensor<T> {
    pub fn permute(&self, perm: &[usize]) -> Result<Self> {
        let rank = self.rank();
        let mut seen = vec![false; rank];
        if perm.len() != rank
            || perm
                .iter()
                .any(|&p| p >= rank || std::mem::replace(&mut seen[p], true))
        {
            return Err(Error::dim(
                "permute",
                format!("{perm:?} is not a permutation of rank {rank}"),
            ));
        }
        if perm.iter().enumerate().all(|(i, &p)| i == p) {
            return Ok(self.clone());
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| self.shape[p]).collect();
        let src = strides(&self.shape);
        let st: Vec<usize> = perm.iter().map(|&p| src[p]).collect();
        let n = self.numel();
        let mut data = Vec::with_capacity(n);
        let inner = out_shape[rank - 1];
        let is = st[rank - 1];
        let mut idx = vec![0usize; rank - 1];
        for _ in 0..n / inner {
            let base: usize = idx.iter().zip(&st).map(|(i, s)| i * s).sum();
            for j in 0..inner {
                data.push(self.data[base + j * is]);
            }
            for d in (0..rank - 1).rev() {
                idx[d] += 1;
                if idx[d] < out_shape[d] {
                    break;
                }
                idx[d] = 0;
            }
        }
        Ok(Tensor::from_parts(out_shape, data))
    }

    /// Elements `start..start + len` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Self> {
        if axis >= self.rank() || len == 0 || start + len > self.shape[axis] {
            return Err(Error::dim(
                "narrow",
                format!(
                    "range {start}..{} on axis {axis} of {:?}",
                    start + len,
                    self.shape
                ),
            ));
        }
        let (outer, full, inner) = split_axis(&self.shape, axis);
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * full + start) * inner;
            data.extend_from_slice(&self.data[base..base + len * inner]);
        }
        let mut shape = self.shape.clone();
        shape[axis] = len;
        Ok(Tensor::from_parts(shape, data))
    }

    pub fn concat(parts: &[&Tensor<T>], axis: usize) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::dim("concat", "no inputs"))?;
        if axis >= first.rank() {
            return Err(Error::dim(
                "concat",
                format!("axis {axis} out of range for {:?}", first.shape),
            ));
        }
        for p in parts {
            let ok = p.rank() == first.rank()
                && p.shape
                    .iter()
                    .zip(&first.shape)
                    .enumerate()
                    .all(|(d, (a, b))| d == axis || a == b);
            if !ok {
                return Err(Error::shapes("concat", &first.shape, &p.shape));
            }
        }
        let (outer, _, inner) = split_axis(&first.shape, axis);
        let total: usize = parts.iter().map(|p| p.shape[axis]).sum();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for p in parts {
                let chunk = p.shape[axis] * inner;
                data.extend_from_slice(&p.data[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = first.shape.clone();
        shape[axis] = total;
        Ok(Tensor::from_parts(shape, data))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn permute_matches_index_oracle() {
        let t = Tensor::<f64>::from_fn(&[2, 3, 4], |i| i as f64);
        let p = t.permute(&[2, 0, 1]).unwrap();
        assert_eq!(p.shape(), &[4, 2, 3]);
        for a in 0..2 {
            for b in 0..3 {
                for c in 0..4 {
                    assert_eq!(p.at(&[c, a, b]), t.at(&[a, b, c]));
                }
            }
        }
        assert!(t.permute(&[0, 0, 1]).is_err());
    }

    #[test]
    fn narrow_then_concat_restores() {
        let t = Tensor::<f32>::from_fn(&[3, 5, 2], |i| i as f32);
        let a = t.narrow(1, 0, 2).unwrap();
        let b = t.narrow(1, 2, 3).unwrap();
        assert_eq!(Tensor::concat(&[&a, &b], 1).unwrap(), t);
        assert!(t.narrow(1, 4, 2).is_err());
    }

    proptest! {
        #[test]
        fn permute_roundtrip(shape in prop::collection::vec(1usize..4, 1..5), seed in any::<u64>()) {
            let t = Tensor::<f32>::from_fn(&shape, |i| (i as u64 ^ seed) as f32);
            let rank = shape.len();
            let perm: Vec<usize> = (0..rank).map(|i| (i + (seed as usize % rank)) % rank).collect();
            let mut inv = vec![0; rank];
            for (i, &p) in perm.iter().enumerate() { inv[p] = i; }
            prop_assert_eq!(t.permute(&perm).unwrap().permute(&inv).unwrap(), t);
        }
    }
}
