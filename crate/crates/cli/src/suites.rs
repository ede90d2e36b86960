use std::path::PathBuf;

use serde::Serialize;

use ovseg_core::autograd::Fault;
use ovseg_core::flops;
use ovseg_core::gradcheck::{
    module_cases, primitive_cases, run_case, run_module_case, CaseReport, REL_TOL,
};
use ovseg_core::Model;

use crate::common::{self, write_json, CliError, Result};
use crate::ConfigArgs;

#[derive(Serialize)]
struct GradcheckReport {
    tolerance: f64,
    seeds: u64,
    passed: bool,
    cases: Vec<CaseReport>,
}

pub fn gradcheck(
    seeds: u64,
    primitives_only: bool,
    fault: Option<Fault>,
    out: Option<PathBuf>,
) -> Result<()> {
    let mut cases = Vec::new();
    for case in primitive_cases() {
        cases.push(run_case(&case, seeds, fault)?);
    }
    if !primitives_only {
        for case in module_cases()? {
            cases.push(run_module_case(&case, seeds, fault)?);
        }
    }
    for c in &cases {
        let verdict = if c.passed { "ok" } else { "FAILED" };
        println!("{:<36} {:>10.3e}  {verdict}", c.name, c.max_rel_err);
    }
    let failed = cases.iter().filter(|c| !c.passed).count();
    let report = GradcheckReport {
        tolerance: REL_TOL,
        seeds,
        passed: failed == 0,
        cases,
    };
    if let Some(p) = out {
        write_json(&p, &report)?;
    }
    if failed > 0 {
        return Err(CliError::Failed(format!(
            "{failed} of {} gradient checks failed",
            report.cases.len()
        )));
    }
    Ok(())
}

pub fn flops(args: &ConfigArgs, classes: usize, out: Option<PathBuf>) -> Result<()> {
    let cfg = common::resolve_config(args, None)?;
    let hw = cfg.image_hw;
    let model = Model::new(cfg)?;
    let store = model.init_store::<f32>()?;
    let report = flops::report(&model, &store, hw, classes)?;
    match out {
        Some(p) => write_json(&p, &report)?,
        None => println!(
            "{}",
            serde_json::to_string_pretty(&report).map_err(ovseg_core::Error::from)?
        ),
    }
    Ok(())
}
