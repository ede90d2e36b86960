use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use thiserror::Error;

use ovseg_core::config::RunConfig;
use ovseg_core::text::{duplicate_names, PromptTemplates};
use ovseg_core::{Error, Model, ParameterStore};

use crate::{ConfigArgs, Preset};

pub const CONFIG_FILE: &str = "config.json";

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] Error),
    /// A verification suite reported failures.
    #[error("{0}")]
    Failed(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Core(e) => e.exit_code() as u8,
            CliError::Failed(_) => 3,
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;

/// Config from `--config`, else the checkpoint's, else the preset; then the
/// crop-ratio flag and the seed variable are applied and the result checked.
pub fn resolve_config(args: &ConfigArgs, checkpoint: Option<&Path>) -> Result<RunConfig> {
    let ckpt_cfg = checkpoint
        .map(|d| d.join(CONFIG_FILE))
        .filter(|p| p.exists());
    let mut cfg = match (&args.config, ckpt_cfg) {
        (Some(p), _) => RunConfig::load(p)?,
        (None, Some(p)) => RunConfig::load(&p)?,
        (None, None) => match args.preset {
            Preset::Toy => RunConfig::toy(),
            Preset::Default => RunConfig::default(),
        },
    };
    if let Some(p) = args.p {
        cfg.p = p;
    }
    cfg.apply_env()?;
    cfg.validate()?;
    Ok(cfg)
}

/// Freshly initialised parameters, overwritten from the checkpoint if given.
pub fn load_store(model: &Model, checkpoint: Option<&Path>) -> Result<ParameterStore<f32>> {
    let mut store = model.init_store::<f32>()?;
    if let Some(dir) = checkpoint {
        let saved = ParameterStore::load(dir)?;
        let missing = store.load_matching(&saved);
        if !missing.is_empty() {
            return Err(Error::Config(format!(
                "checkpoint {} does not fit the model: {} parameters missing or mis-shaped (first: {})",
                dir.display(),
                missing.len(),
                missing[0]
            ))
            .into());
        }
    }
    Ok(store)
}

pub fn read_classes(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let names: Vec<String> = serde_json::from_str(&text)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    if names.is_empty() {
        return Err(Error::Contract(format!("vocabulary {} is empty", path.display())).into());
    }
    for d in duplicate_names(&names) {
        eprintln!("warning: class name {d:?} appears more than once");
    }
    Ok(names)
}

pub fn read_templates(path: Option<&Path>) -> Result<PromptTemplates> {
    Ok(match path {
        Some(p) => PromptTemplates::read(p)?,
        None => PromptTemplates::default(),
    })
}

pub fn out_dir(flag: Option<PathBuf>, cfg: &RunConfig, fallback: &str) -> Result<PathBuf> {
    let dir = flag
        .or_else(|| cfg.output_dir.as_ref().map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from(fallback));
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    Ok(dir)
}

pub fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(Error::from)?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))?;
    Ok(())
}
