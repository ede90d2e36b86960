use std::fs::File;
use std::io::BufWriter;
use std::path::PathBuf;

use serde::Serialize;

use ovseg_core::metrics::MetricsReport;
use ovseg_core::model::param_report;
use ovseg_core::train::{TrainReport, Trainer};
use ovseg_core::Error;

use crate::common::{self, write_json, Result, CONFIG_FILE};
use crate::data::export_toy;
use crate::ConfigArgs;

pub const FAILED_STATE: &str = "failed_state";

#[derive(Serialize)]
struct Summary<'a> {
    train: &'a TrainReport,
    metrics: &'a MetricsReport,
}

pub fn run(
    args: &ConfigArgs,
    out: Option<PathBuf>,
    steps: Option<usize>,
    no_fusion: bool,
    export_data: Option<PathBuf>,
) -> Result<()> {
    let mut cfg = common::resolve_config(args, None)?;
    if let Some(s) = steps {
        cfg.train.steps = s;
    }
    if no_fusion {
        cfg.adapter.fusion_enabled = false;
    }
    cfg.validate()?;
    let out = common::out_dir(out, &cfg, "toy-run")?;
    write_json(&out.join(CONFIG_FILE), &cfg)?;

    let mut trainer = Trainer::new(cfg)?;
    if let Some(dir) = export_data {
        export_toy(&dir, &trainer.samples, &trainer.class_names)?;
    }
    let log_path = out.join("log.csv");
    let file = File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
    let mut log = BufWriter::new(file);
    let report = match trainer.run(Some(&mut log)) {
        Ok(r) => r,
        Err(e) => {
            drop(log);
            trainer.store.save(&out.join(FAILED_STATE))?;
            return Err(e.into());
        }
    };
    drop(log);

    trainer.store.save(&out)?;
    write_json(
        &out.join("param_counts.json"),
        &param_report(&trainer.store),
    )?;
    let metrics = trainer.evaluate()?;
    write_json(&out.join("metrics.json"), &metrics)?;
    write_json(
        &out.join("report.json"),
        &Summary {
            train: &report,
            metrics: &metrics,
        },
    )?;
    println!(
        "steps {} loss {:.4} -> {:.4} train mIoU {:.4}",
        report.steps_run,
        report.initial_loss,
        report.final_loss,
        metrics.miou.unwrap_or(0.0)
    );
    Ok(())
}
