use std::path::PathBuf;

use serde::Serialize;

use ovseg_core::classifier::{compose_panoptic, compose_semantic, SegmentationOutput};
use ovseg_core::geometry::{downsample_pad, slice_image};
use ovseg_core::image::GrayMap;
use ovseg_core::model::Prediction;
use ovseg_core::tensor::{io as tio, kernels};
use ovseg_core::{Error, InputImage, Model};

use crate::common::{self, write_json, Result};
use crate::{ConfigArgs, Mode};

pub struct SegmentArgs {
    pub cfg: ConfigArgs,
    pub checkpoint: Option<PathBuf>,
    pub image: PathBuf,
    pub classes: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub mode: Mode,
    pub templates: Option<PathBuf>,
    pub dump_slices: Option<PathBuf>,
    pub dump_masks: bool,
}

#[derive(Debug, Serialize)]
pub struct QueryResult {
    pub query: usize,
    pub class: u32,
    pub class_name: String,
    pub score: f64,
    /// Pixels where the mask probability is at least one half.
    pub area: usize,
}

#[derive(Debug, Serialize)]
struct SegmentResult<'a> {
    image: String,
    height: usize,
    width: usize,
    mode: &'static str,
    classes: &'a [String],
    queries: Vec<QueryResult>,
    segments: Vec<QueryResult>,
}

/// Most likely real class of every query with its probability and area.
pub fn query_results(pred: &Prediction, names: &[String]) -> Vec<QueryResult> {
    let c = pred.class_logits.shape()[1];
    let (probs, _) = kernels::softmax_rows(pred.class_logits.data(), c);
    let s = pred.mask_logits.shape();
    let hw = s[1] * s[2];
    probs
        .chunks(c)
        .enumerate()
        .map(|(q, row)| {
            let (class, score) = row[..c - 1]
                .iter()
                .enumerate()
                .fold((0, f64::MIN), |b, (i, &p)| if p > b.1 { (i, p) } else { b });
            let area = pred.mask_logits.data()[q * hw..(q + 1) * hw]
                .iter()
                .filter(|&&v| v >= 0.0)
                .count();
            QueryResult {
                query: q,
                class: class as u32,
                class_name: names[class].clone(),
                score,
                area,
            }
        })
        .collect()
}

pub fn compose(pred: &Prediction, mode: Mode) -> Result<SegmentationOutput> {
    Ok(match mode {
        Mode::Semantic => compose_semantic(&pred.class_logits, &pred.mask_logits)?.0,
        Mode::Panoptic => compose_panoptic(&pred.class_logits, &pred.mask_logits)?,
    })
}

fn dump_slices(model: &Model, img: &InputImage, dir: &std::path::Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let nw = model.cfg.backbone.native_window;
    let (global, _) = downsample_pad(img, (nw, nw))?;
    tio::write(&dir.join("global.tensor"), global.pixels())?;
    if model.cfg.p != 0.0 {
        let layout = model.layout(img.hw())?;
        for (i, s) in slice_image(img, &layout)?.iter().enumerate() {
            tio::write(&dir.join(format!("slice_{i:02}.tensor")), s.pixels())?;
        }
        write_json(&dir.join("layout.json"), &layout)?;
    }
    Ok(())
}

pub fn run(args: SegmentArgs) -> Result<()> {
    let cfg = common::resolve_config(&args.cfg, args.checkpoint.as_deref())?;
    let classes = args
        .classes
        .clone()
        .or_else(|| cfg.vocabulary.as_ref().map(PathBuf::from))
        .ok_or_else(|| Error::Config("no vocabulary: pass --classes".into()))?;
    let names = common::read_classes(&classes)?;
    let img = InputImage::read_ppm(&args.image)?;
    let model = Model::new(cfg)?;
    let store = common::load_store(&model, args.checkpoint.as_deref())?;
    let text = model
        .text_embedder(common::read_templates(args.templates.as_deref())?)?
        .embed_vocabulary::<f32>(&names)?;
    let out = common::out_dir(args.out.clone(), &model.cfg, "out")?;
    if let Some(dir) = &args.dump_slices {
        dump_slices(&model, &img, dir)?;
    }

    let pred = model.predict(&store, &img, &text)?;
    let seg = compose(&pred, args.mode)?;
    let labels: Vec<u8> = seg.labels.iter().map(|&l| l.min(255) as u8).collect();
    GrayMap::new(seg.height, seg.width, labels)?.write_pgm(&out.join("label.pgm"))?;

    let queries = query_results(&pred, &names);
    let segments = seg
        .segments
        .iter()
        .map(|s| QueryResult {
            query: s.query,
            class: s.class,
            class_name: names[s.class as usize].clone(),
            score: s.score,
            area: s.area,
        })
        .collect();
    write_json(
        &out.join("result.json"),
        &SegmentResult {
            image: args.image.display().to_string(),
            height: seg.height,
            width: seg.width,
            mode: match args.mode {
                Mode::Semantic => "semantic",
                Mode::Panoptic => "panoptic",
            },
            classes: &names,
            queries,
            segments,
        },
    )?;

    if args.dump_masks {
        let dir = out.join("masks");
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let hw = seg.height * seg.width;
        for (q, m) in pred.mask_logits.data().chunks(hw).enumerate() {
            let px = m
                .iter()
                .map(|&v| (kernels::sigmoid(v) * 255.0).round() as u8)
                .collect();
            GrayMap::new(seg.height, seg.width, px)?
                .write_pgm(&dir.join(format!("query_{q:03}.pgm")))?;
        }
    }
    println!("{}", out.join("label.pgm").display());
    Ok(())
}
