use std::path::PathBuf;

use ovseg_core::classifier::IGNORE_LABEL;
use ovseg_core::config::{RunConfig, SeedUse};
use ovseg_core::metrics::{ConfusionMatrix, MetricsReport, PanopticAccumulator};
use ovseg_core::train::data::{class_names, make_toy_dataset};
use ovseg_core::{Error, InputImage, Model, ParameterStore, Tensor};

use crate::common::{self, write_json, CliError, Result};
use crate::data::{self, toy_annotation, Annotation};
use crate::segment::compose;
use crate::{ConfigArgs, Mode, Split};

/// Mixed into the data seed for the held-out synthetic split.
pub const VAL_SALT: u64 = 0x7a11_d5e7;

pub struct EvalArgs {
    pub cfg: ConfigArgs,
    pub checkpoint: Option<PathBuf>,
    pub data: Option<PathBuf>,
    pub toy_split: Option<Split>,
    pub predictions: Option<PathBuf>,
    pub mode: Mode,
    pub templates: Option<PathBuf>,
    pub jobs: usize,
    pub out: Option<PathBuf>,
}

#[derive(Default)]
struct Tally {
    conf: Option<ConfusionMatrix>,
    pan: PanopticAccumulator,
}

fn score(k: usize, pred: &Annotation, gt: &Annotation) -> Result<Tally> {
    if (pred.height, pred.width) != (gt.height, gt.width) {
        return Err(Error::dim(
            "eval",
            format!(
                "prediction {}x{} vs ground truth {}x{}",
                pred.height, pred.width, gt.height, gt.width
            ),
        )
        .into());
    }
    let mut conf = ConfusionMatrix::new(k);
    conf.add(&pred.labels, &gt.labels, Some(IGNORE_LABEL))?;
    let mut pan = PanopticAccumulator::default();
    pan.add(&pred.segments(), &gt.segments())?;
    Ok(Tally {
        conf: Some(conf),
        pan,
    })
}

fn predict(
    model: &Model,
    store: &ParameterStore<f32>,
    text: &Tensor<f32>,
    img: &InputImage,
    mode: Mode,
) -> Result<Annotation> {
    let pred = model.predict(store, img, text)?;
    let seg = compose(&pred, mode)?;
    Ok(Annotation {
        height: seg.height,
        width: seg.width,
        labels: seg.labels,
        instances: (mode == Mode::Panoptic).then_some(seg.segment_ids),
    })
}

/// Runs `f` over `0..n` on `jobs` threads and returns results in index order.
fn parallel<T: Send>(
    n: usize,
    jobs: usize,
    f: impl Fn(usize) -> Result<T> + Sync,
) -> Result<Vec<T>> {
    let jobs = jobs.clamp(1, n.max(1));
    let mut slots: Vec<Option<Result<T>>> = (0..n).map(|_| None).collect();
    std::thread::scope(|s| {
        let handles: Vec<_> = (0..jobs)
            .map(|w| {
                let f = &f;
                s.spawn(move || (w..n).step_by(jobs).map(|i| (i, f(i))).collect::<Vec<_>>())
            })
            .collect();
        for h in handles {
            for (i, r) in h.join().expect("worker panicked") {
                slots[i] = Some(r);
            }
        }
    });
    slots.into_iter().map(|r| r.expect("every index")).collect()
}

fn toy_items(
    cfg: &RunConfig,
    split: Split,
) -> Result<(Vec<String>, Vec<(InputImage, Annotation)>)> {
    let t = &cfg.train;
    let seed = match split {
        Split::Train => cfg.derived_seed(SeedUse::Data),
        Split::Val => cfg.derived_seed(SeedUse::Data) ^ VAL_SALT,
    };
    let samples = make_toy_dataset(seed, t.n_images, cfg.image_hw, t.n_classes)?;
    let items = samples
        .iter()
        .map(|s| (s.image.clone(), toy_annotation(s)))
        .collect();
    Ok((class_names(t.n_classes)?, items))
}

pub fn run(args: EvalArgs) -> Result<()> {
    let tallies: Vec<Tally>;
    let k;
    let cfg = common::resolve_config(&args.cfg, args.checkpoint.as_deref())?;
    if let Some(pred_dir) = &args.predictions {
        let data = args
            .data
            .as_ref()
            .ok_or_else(|| Error::Config("--predictions needs --data".into()))?;
        k = common::read_classes(&data.join(data::CLASSES))?.len();
        let stems = data::stems(data)?;
        tallies = parallel(stems.len(), args.jobs, |i| {
            let gt = Annotation::read(data, &stems[i])?;
            let pred = Annotation::read(pred_dir, &stems[i])?;
            score(k, &pred, &gt)
        })?;
    } else {
        let (names, items) = match (&args.data, args.toy_split) {
            (Some(dir), _) => {
                let names = common::read_classes(&dir.join(data::CLASSES))?;
                let items = data::stems(dir)?
                    .iter()
                    .map(|s| Ok((data::read_image(dir, s)?, Annotation::read(dir, s)?)))
                    .collect::<Result<Vec<_>>>()?;
                (names, items)
            }
            (None, Some(split)) => toy_items(&cfg, split)?,
            (None, None) => return Err(Error::Config("pass --data or --toy-split".into()).into()),
        };
        k = names.len();
        let model = Model::new(cfg.clone())?;
        let store = common::load_store(&model, args.checkpoint.as_deref())?;
        let text = model
            .text_embedder(common::read_templates(args.templates.as_deref())?)?
            .embed_vocabulary::<f32>(&names)?;
        tallies = parallel(items.len(), args.jobs, |i| {
            let (img, gt) = &items[i];
            score(k, &predict(&model, &store, &text, img, args.mode)?, gt)
        })?;
    }
    if tallies.is_empty() {
        return Err(CliError::Core(Error::Contract(
            "no images to evaluate".into(),
        )));
    }
    let mut conf = ConfusionMatrix::new(k);
    let mut pan = PanopticAccumulator::default();
    for t in &tallies {
        conf.merge(t.conf.as_ref().expect("scored"))?;
        pan.merge(&t.pan);
    }
    let report = MetricsReport::new(conf.iou(), pan.report());
    let out = args.out.unwrap_or_else(|| PathBuf::from("metrics.json"));
    write_json(&out, &report)?;
    println!(
        "seed {} images {} mIoU {} PQ {:.4} SQ {:.4} RQ {:.4}",
        cfg.seed,
        tallies.len(),
        report
            .miou
            .map_or_else(|| "n/a".to_string(), |m| format!("{m:.4}")),
        report.pq,
        report.sq,
        report.rq
    );
    Ok(())
}
