//! Mean IoU over a confusion matrix and panoptic quality over segments.

use serde::Serialize;

use crate::error::{Error, Result};

/// `K × K` pixel counts, ground truth by row and prediction by column,
/// plus per ground-truth class the pixels left unlabelled by the prediction.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    k: usize,
    counts: Vec<u64>,
    unlabelled: Vec<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct IouReport {
    /// `None` for classes absent from the ground truth.
    pub per_class_iou: Vec<Option<f64>>,
    /// `None` when no class appears in the ground truth.
    pub miou: Option<f64>,
}

impl ConfusionMatrix {
    pub fn new(k: usize) -> Self {
        ConfusionMatrix {
            k,
            counts: vec![0; k * k],
            unlabelled: vec![0; k],
        }
    }

    pub fn classes(&self) -> usize {
        self.k
    }

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.k + pred]
    }

    /// Ground-truth pixels of class `gt` predicted as the ignore label.
    pub fn unlabelled(&self, gt: usize) -> u64 {
        self.unlabelled[gt]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum::<u64>() + self.unlabelled.iter().sum::<u64>()
    }

    /// Adds one map pair; pixels whose ground truth is `ignore` are skipped
    /// and predictions equal to `ignore` count as misses.
    pub fn add(&mut self, pred: &[u32], gt: &[u32], ignore: Option<u32>) -> Result<()> {
        if pred.len() != gt.len() {
            return Err(Error::dim(
                "confusion",
                format!(
                    "{} predicted vs {} ground-truth pixels",
                    pred.len(),
                    gt.len()
                ),
            ));
        }
        for (&p, &g) in pred.iter().zip(gt) {
            if Some(g) == ignore {
                continue;
            }
            if Some(p) == ignore && (g as usize) < self.k {
                self.unlabelled[g as usize] += 1;
                continue;
            }
            if g as usize >= self.k || p as usize >= self.k {
                return Err(Error::Contract(format!(
                    "label {} outside {} classes",
                    g.max(p),
                    self.k
                )));
            }
            self.counts[g as usize * self.k + p as usize] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.k != self.k {
            return Err(Error::dim(
                "confusion_merge",
                format!("{} vs {} classes", self.k, other.k),
            ));
        }
        self.counts
            .iter_mut()
            .zip(&other.counts)
            .for_each(|(a, b)| *a += b);
        self.unlabelled
            .iter_mut()
            .zip(&other.unlabelled)
            .for_each(|(a, b)| *a += b);
        Ok(())
    }

    pub fn iou(&self) -> IouReport {
        let k = self.k;
        let per_class_iou: Vec<Option<f64>> = (0..k)
            .map(|c| {
                let gt: u64 = (0..k).map(|p| self.get(c, p)).sum::<u64>() + self.unlabelled[c];
                if gt == 0 {
                    return None;
                }
                let tp = self.get(c, c);
                let fp: u64 = (0..k).filter(|&g| g != c).map(|g| self.get(g, c)).sum();
                Some(tp as f64 / (gt + fp) as f64)
            })
            .collect();
        let present: Vec<f64> = per_class_iou.iter().flatten().copied().collect();
        let miou =
            (!present.is_empty()).then(|| present.iter().sum::<f64>() / present.len() as f64);
        IouReport {
            per_class_iou,
            miou,
        }
    }
}

/// A class-labelled set of pixel indices.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PanopticSegment {
    pub class: u32,
    pub pixels: Vec<usize>,
}

impl PanopticSegment {
    pub fn from_mask(class: u32, mask: &[bool]) -> Self {
        PanopticSegment {
            class,
            pixels: mask
                .iter()
                .enumerate()
                .filter(|(_, &m)| m)
                .map(|(i, _)| i)
                .collect(),
        }
    }

    fn sorted(&self) -> Vec<usize> {
        let mut p = self.pixels.clone();
        p.sort_unstable();
        p.dedup();
        p
    }
}

fn intersection(a: &[usize], b: &[usize]) -> usize {
    let (mut i, mut j, mut n) = (0, 0, 0);
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                n += 1;
                i += 1;
                j += 1;
            }
        }
    }
    n
}

/// Pooled panoptic counts over all classes.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PanopticAccumulator {
    pub iou_sum: f64,
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct PanopticReport {
    pub pq: f64,
    pub sq: f64,
    pub rq: f64,
}

impl PanopticAccumulator {
    /// Matches same-class segments with IoU strictly above one half.
    pub fn add(&mut self, pred: &[PanopticSegment], gt: &[PanopticSegment]) -> Result<()> {
        let classes: Vec<u32> = pred.iter().map(|s| s.class).collect();
        let pred: Vec<Vec<usize>> = pred.iter().map(PanopticSegment::sorted).collect();
        for i in 0..pred.len() {
            for j in i + 1..pred.len() {
                if intersection(&pred[i], &pred[j]) > 0 {
                    return Err(Error::Contract(format!(
                        "predicted segments {i} and {j} overlap"
                    )));
                }
            }
        }
        let gts: Vec<Vec<usize>> = gt.iter().map(PanopticSegment::sorted).collect();
        let mut pred_hit = vec![false; pred.len()];
        let mut gt_hit = vec![false; gt.len()];
        for (gi, g) in gts.iter().enumerate() {
            for (pi, p) in pred.iter().enumerate() {
                if pred_hit[pi] || gt[gi].class != classes[pi] {
                    continue;
                }
                let inter = intersection(g, p);
                let union = g.len() + p.len() - inter;
                let iou = if union == 0 {
                    0.0
                } else {
                    inter as f64 / union as f64
                };
                if iou > 0.5 {
                    pred_hit[pi] = true;
                    gt_hit[gi] = true;
                    self.iou_sum += iou;
                    self.tp += 1;
                    break;
                }
            }
        }
        self.fp += pred_hit.iter().filter(|h| !**h).count();
        self.fn_ += gt_hit.iter().filter(|h| !**h).count();
        Ok(())
    }

    pub fn merge(&mut self, other: &PanopticAccumulator) {
        self.iou_sum += other.iou_sum;
        self.tp += other.tp;
        self.fp += other.fp;
        self.fn_ += other.fn_;
    }

    pub fn report(&self) -> PanopticReport {
        if self.tp == 0 {
            return PanopticReport {
                pq: 0.0,
                sq: 0.0,
                rq: 0.0,
            };
        }
        let denom = self.tp as f64 + 0.5 * self.fp as f64 + 0.5 * self.fn_ as f64;
        PanopticReport {
            pq: self.iou_sum / denom,
            sq: self.iou_sum / self.tp as f64,
            rq: self.tp as f64 / denom,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricsReport {
    pub per_class_iou: Vec<Option<f64>>,
    pub miou: Option<f64>,
    pub pq: f64,
    pub sq: f64,
    pub rq: f64,
}

impl MetricsReport {
    pub fn new(iou: IouReport, pan: PanopticReport) -> Self {
        MetricsReport {
            per_class_iou: iou.per_class_iou,
            miou: iou.miou,
            pq: pan.pq,
            sq: pan.sq,
            rq: pan.rq,
        }
    }
}
