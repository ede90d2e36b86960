//! Set-prediction training on synthetic data with cached backbone features.

pub mod data;
pub mod hungarian;
pub mod loss;
pub mod optim;

use std::collections::BTreeMap;
use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::backbone::MultiResFeatures;
use crate::classifier::{compose_panoptic, compose_semantic, IGNORE_LABEL};
use crate::config::{RunConfig, SeedUse};
use crate::error::{Error, Result};
use crate::metrics::{ConfusionMatrix, MetricsReport, PanopticAccumulator, PanopticSegment};
use crate::model::Model;
use crate::params::ParameterStore;
use crate::tensor::Tensor;
use crate::text::PromptTemplates;
use crate::Tape;

use data::{class_names, make_toy_dataset, ToySample};
use loss::{matching_cost, set_loss, LossWeights, Target};
use optim::{poly_lr, AdamW};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StepLog {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    pub loss_cls: f64,
    pub loss_bce: f64,
    pub loss_dice: f64,
    pub grad_norm: f64,
}

pub const CSV_HEADER: &str = "step,lr,loss,loss_cls,loss_bce,loss_dice,grad_norm";

impl StepLog {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{:e},{},{},{},{},{}",
            self.step,
            self.lr,
            self.loss,
            self.loss_cls,
            self.loss_bce,
            self.loss_dice,
            self.grad_norm
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrainReport {
    pub steps_run: usize,
    pub initial_loss: f64,
    pub final_loss: f64,
    /// `(step, train mIoU)` at each evaluation.
    pub evals: Vec<(usize, f64)>,
    pub final_miou: Option<f64>,
    pub frozen_checksum_before: u64,
    pub frozen_checksum_after: u64,
}

pub struct Trainer {
    pub model: Model,
    pub store: ParameterStore<f32>,
    pub opt: AdamW<f32>,
    pub samples: Vec<ToySample>,
    pub feats: Vec<MultiResFeatures<f32>>,
    pub targets: Vec<Target>,
    pub class_names: Vec<String>,
    pub text: Tensor<f32>,
    pub weights: LossWeights,
    pub step: usize,
    rng: ChaCha8Rng,
    order: Vec<usize>,
}

/// Targets at mask resolution for one sample.
pub fn sample_target(model: &Model, feats: &MultiResFeatures<f32>, sample: &ToySample) -> Target {
    let mask_hw = model.decoder.cfg.mask_hw(feats.layout.grid_hw());
    let map = model.mask_to_image(feats, mask_hw, sample.image.hw());
    let p = map.len();
    let mut masks = Vec::with_capacity(sample.instances.len() * p);
    for inst in &sample.instances {
        masks.extend(map.iter().map(|m| {
            if m.is_some_and(|i| inst.mask[i]) {
                1.0
            } else {
                0.0
            }
        }));
    }
    Target {
        classes: sample.instances.iter().map(|i| i.class).collect(),
        masks: Tensor::new(vec![sample.instances.len(), p], masks).expect("target shape"),
    }
}

impl Trainer {
    pub fn new(cfg: RunConfig) -> Result<Self> {
        let model = Model::new(cfg)?;
        let store = model.init_store::<f32>()?;
        let cfg = &model.cfg;
        let t = &cfg.train;
        let samples = make_toy_dataset(
            cfg.derived_seed(SeedUse::Data),
            t.n_images,
            cfg.image_hw,
            t.n_classes,
        )?;
        Self::with_data(model, store, samples)
    }

    pub fn with_data(
        model: Model,
        store: ParameterStore<f32>,
        samples: Vec<ToySample>,
    ) -> Result<Self> {
        let cfg = &model.cfg;
        let t = &cfg.train;
        let class_names = class_names(t.n_classes)?;
        let text = model
            .text_embedder(PromptTemplates::default())?
            .embed_vocabulary(&class_names)?;
        let feats = samples
            .iter()
            .map(|s| model.encode(&store, &s.image))
            .collect::<Result<Vec<_>>>()?;
        let targets = feats
            .iter()
            .zip(&samples)
            .map(|(f, s)| sample_target(&model, f, s))
            .collect();
        let weights = LossWeights {
            cls: t.lambda_cls,
            bce: t.lambda_bce,
            dice: t.lambda_dice,
            no_object: t.no_object_weight,
        };
        let opt = AdamW::new(t.weight_decay, Some(t.clip_norm));
        let rng = ChaCha8Rng::seed_from_u64(cfg.derived_seed(SeedUse::Data) ^ 0x5eed);
        Ok(Trainer {
            model,
            store,
            opt,
            samples,
            feats,
            targets,
            class_names,
            text,
            weights,
            step: 0,
            rng,
            order: Vec::new(),
        })
    }

    fn next_index(&mut self) -> usize {
        if self.order.is_empty() {
            self.order = (0..self.samples.len()).collect();
            self.order.shuffle(&mut self.rng);
        }
        self.order.pop().expect("non-empty dataset")
    }

    /// Loss terms and parameter gradients for one sample.
    pub fn sample_gradients(
        &self,
        index: usize,
    ) -> Result<([f64; 4], BTreeMap<String, Tensor<f32>>)> {
        let tape = Tape::new();
        let out = self
            .model
            .forward(&tape, &self.store, &self.feats[index], &self.text)?;
        let target = &self.targets[index];
        let n = self.model.cfg.adapter.queries;
        let masks: Tensor<f64> = out.masks.logits.value().cast();
        let masks = masks.into_reshaped(&[n, target.masks.shape()[1]])?;
        let cost = matching_cost(
            &out.classes.logits.value().cast(),
            &masks,
            target,
            &self.weights,
        )?;
        let pairs = hungarian::assign(&cost, target.len(), n)?;
        let terms = set_loss(
            &tape,
            out.classes.logits,
            out.masks.logits,
            target,
            &pairs,
            &self.weights,
        )?;
        let vals =
            [terms.total, terms.cls, terms.bce, terms.dice].map(|v| v.value().data()[0] as f64);
        if !vals.iter().all(|v| v.is_finite()) {
            return Err(Error::Numeric(format!(
                "non-finite loss {vals:?} at step {}",
                self.step
            )));
        }
        Ok((vals, tape.backward(terms.total)?.into_named()))
    }

    pub fn train_step(&mut self) -> Result<StepLog> {
        let t = self.model.cfg.train.clone();
        let b = t.batch_size;
        let mut sum = [0.0; 4];
        let mut grads: BTreeMap<String, Tensor<f32>> = BTreeMap::new();
        for _ in 0..b {
            let i = self.next_index();
            let (vals, g) = self.sample_gradients(i)?;
            sum.iter_mut()
                .zip(vals)
                .for_each(|(s, v)| *s += v / b as f64);
            for (name, gt) in g {
                let scaled = gt.map(|v| v / b as f32);
                match grads.get_mut(&name) {
                    Some(acc) => acc
                        .data_mut()
                        .iter_mut()
                        .zip(scaled.data())
                        .for_each(|(a, v)| *a += v),
                    None => {
                        grads.insert(name, scaled);
                    }
                }
            }
        }
        let lr = poly_lr(t.base_lr, self.step, t.steps, t.poly_power);
        let grad_norm = self.opt.update(&mut self.store, &grads, lr)?;
        self.step += 1;
        Ok(StepLog {
            step: self.step,
            lr,
            loss: sum[0],
            loss_cls: sum[1],
            loss_bce: sum[2],
            loss_dice: sum[3],
            grad_norm,
        })
    }

    /// Semantic and panoptic metrics on the training images.
    pub fn evaluate(&self) -> Result<MetricsReport> {
        let k = self.class_names.len();
        let mut conf = ConfusionMatrix::new(k);
        let mut pan = PanopticAccumulator::default();
        for (s, f) in self.samples.iter().zip(&self.feats) {
            let pred = self
                .model
                .predict_features(&self.store, f, &self.text, s.image.hw())?;
            let (sem, _) = compose_semantic(&pred.class_logits, &pred.mask_logits)?;
            conf.add(&sem.labels, &s.label_map(), Some(IGNORE_LABEL))?;
            let p = compose_panoptic(&pred.class_logits, &pred.mask_logits)?;
            let pred_segs: Vec<PanopticSegment> = p
                .segments
                .iter()
                .map(|seg| {
                    let mask: Vec<bool> = p.segment_ids.iter().map(|&id| id == seg.id).collect();
                    PanopticSegment::from_mask(seg.class, &mask)
                })
                .collect();
            let gt_segs: Vec<PanopticSegment> = s
                .instances
                .iter()
                .map(|i| PanopticSegment::from_mask(i.class as u32, &i.mask))
                .collect();
            pan.add(&pred_segs, &gt_segs)?;
        }
        Ok(MetricsReport::new(conf.iou(), pan.report()))
    }

    /// Runs the configured number of steps, writing CSV rows to `log` and
    /// stopping early once the target train mIoU is reached.
    pub fn run(&mut self, mut log: Option<&mut dyn Write>) -> Result<TrainReport> {
        let t = self.model.cfg.train.clone();
        let before = self.store.frozen_checksum();
        if let Some(w) = log.as_deref_mut() {
            writeln!(w, "{CSV_HEADER}").map_err(|e| Error::io("log", e))?;
        }
        let mut first = None;
        let mut last = f64::NAN;
        let mut evals = Vec::new();
        let mut final_miou = None;
        while self.step < t.steps {
            let s = self.train_step()?;
            first.get_or_insert(s.loss);
            last = s.loss;
            if let Some(w) = log.as_deref_mut() {
                writeln!(w, "{}", s.csv_row()).map_err(|e| Error::io("log", e))?;
            }
            if t.eval_every > 0 && (self.step.is_multiple_of(t.eval_every) || self.step == t.steps)
            {
                let m = self.evaluate()?.miou.unwrap_or(0.0);
                evals.push((self.step, m));
                final_miou = Some(m);
                if t.target_miou.is_some_and(|target| m >= target) {
                    break;
                }
            }
        }
        Ok(TrainReport {
            steps_run: self.step,
            initial_loss: first.unwrap_or(f64::NAN),
            final_loss: last,
            evals,
            final_miou,
            frozen_checksum_before: before,
            frozen_checksum_after: self.store.frozen_checksum(),
        })
    }
}
