//! Set-prediction losses: weighted cross-entropy with a no-object class on
//! every query, and binary cross-entropy plus dice on matched masks.

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{kernels, Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub cls: f64,
    pub bce: f64,
    pub dice: f64,
    pub no_object: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            cls: 2.0,
            bce: 5.0,
            dice: 5.0,
            no_object: 0.1,
        }
    }
}

/// Ground truth at mask resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct Target {
    pub classes: Vec<usize>,
    /// `[G, P]` binary masks over the `P` mask pixels.
    pub masks: Tensor<f64>,
}

impl Target {
    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }
}

pub struct LossTerms<'t, T: Real> {
    pub total: Var<'t, T>,
    pub cls: Var<'t, T>,
    pub bce: Var<'t, T>,
    pub dice: Var<'t, T>,
}

fn bce_mean(logits: &[f64], t: &[f64]) -> f64 {
    logits
        .iter()
        .zip(t)
        .map(|(&m, &y)| kernels::softplus(m) - m * y)
        .sum::<f64>()
        / logits.len() as f64
}

fn dice(logits: &[f64], t: &[f64]) -> f64 {
    let (mut inter, mut ps, mut ts) = (0.0, 0.0, 0.0);
    for (&m, &y) in logits.iter().zip(t) {
        let p = kernels::sigmoid(m);
        inter += p * y;
        ps += p;
        ts += y;
    }
    1.0 - (2.0 * inter + 1.0) / (ps + ts + 1.0)
}

/// `[G, N]` matching cost mirroring the loss terms.
pub fn matching_cost(
    class_logits: &Tensor<f64>,
    mask_logits: &Tensor<f64>,
    target: &Target,
    w: &LossWeights,
) -> Result<Vec<f64>> {
    let (n, c) = (class_logits.shape()[0], class_logits.shape()[1]);
    let p = mask_logits.numel() / n.max(1);
    if mask_logits.shape()[0] != n || target.masks.numel() != target.len() * p {
        return Err(Error::shapes(
            "matching_cost",
            mask_logits.shape(),
            target.masks.shape(),
        ));
    }
    let (probs, _) = kernels::softmax_rows(class_logits.data(), c);
    let mut cost = vec![0.0; target.len() * n];
    for (g, &cls) in target.classes.iter().enumerate() {
        if cls + 1 >= c {
            return Err(Error::Contract(format!(
                "target class {cls} outside {} classes",
                c - 1
            )));
        }
        let t = &target.masks.data()[g * p..(g + 1) * p];
        for q in 0..n {
            let m = &mask_logits.data()[q * p..(q + 1) * p];
            cost[g * n + q] =
                -w.cls * probs[q * c + cls] + w.bce * bce_mean(m, t) + w.dice * dice(m, t);
        }
    }
    Ok(cost)
}

/// Weighted total of the three loss terms. `pairs` holds matched
/// `(target, query)` indices; unmatched queries are pushed to no-object.
pub fn set_loss<'t, T: Real>(
    tape: &'t Tape<T>,
    class_logits: Var<'t, T>,
    mask_logits: Var<'t, T>,
    target: &Target,
    pairs: &[(usize, usize)],
    w: &LossWeights,
) -> Result<LossTerms<'t, T>> {
    let (n, c) = (class_logits.shape()[0], class_logits.shape()[1]);
    let mut labels = vec![c - 1; n];
    for &(g, q) in pairs {
        labels[q] = target.classes[g];
    }
    let mut weights = vec![T::zero(); n * c];
    let mut wsum = 0.0;
    for (q, &l) in labels.iter().enumerate() {
        let wq = if l == c - 1 { w.no_object } else { 1.0 };
        weights[q * c + l] = T::from_f64(wq);
        wsum += wq;
    }
    let picked = class_logits
        .log_softmax()?
        .mul(tape.constant(Tensor::new(vec![n, c], weights)?))?;
    let cls = picked.sum_all().scale(-1.0 / wsum);

    let zero = || tape.constant(Tensor::scalar(T::zero()));
    let (bce, dice) = if pairs.is_empty() {
        (zero(), zero())
    } else {
        let p = mask_logits.value().numel() / n;
        let queries: Vec<usize> = pairs.iter().map(|&(_, q)| q).collect();
        let m = mask_logits.reshape(&[n, p])?.gather_rows(&queries)?;
        let rows: Vec<f64> = pairs
            .iter()
            .flat_map(|&(g, _)| target.masks.data()[g * p..(g + 1) * p].to_vec())
            .collect();
        let t = tape.constant(Tensor::new(vec![pairs.len(), p], rows)?.cast());
        let bce = m.softplus().sub(m.mul(t)?)?.mean_all();
        let prob = m.sigmoid();
        let inter = prob.mul(t)?.sum_axis(1, false)?.scale(2.0).add_scalar(1.0);
        let denom = prob
            .sum_axis(1, false)?
            .add(t.sum_axis(1, false)?)?
            .add_scalar(1.0);
        let dice = inter.div(denom)?.rsub_scalar(1.0).mean_all();
        (bce, dice)
    };
    let total = cls
        .scale(w.cls)
        .add(bce.scale(w.bce))?
        .add(dice.scale(w.dice))?;
    Ok(LossTerms {
        total,
        cls,
        bce,
        dice,
    })
}
