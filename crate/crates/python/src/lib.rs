//! Python bindings: run configuration, segmentation, metrics and gradient checks.

use std::path::PathBuf;

use ovseg_core::classifier::{compose_panoptic, compose_semantic};
use ovseg_core::config::RunConfig;
use ovseg_core::geometry::plan_layout;
use ovseg_core::gradcheck::{primitive_cases, run_case};
use ovseg_core::metrics::ConfusionMatrix;
use ovseg_core::text::PromptTemplates;
use ovseg_core::{Error, InputImage, Model, ParameterStore, Tensor};
use pyo3::exceptions::{PyArithmeticError, PyOSError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyBytes, PyDict};

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Numeric(_) => PyArithmeticError::new_err(e.to_string()),
        Error::Io { .. } | Error::Format(_) => PyOSError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

/// Preset configuration as JSON (`"toy"` or `"default"`).
#[pyfunction]
#[pyo3(signature = (preset = "toy"))]
fn default_config(preset: &str) -> PyResult<String> {
    match preset {
        "toy" => Ok(RunConfig::toy().to_json()),
        "default" => Ok(RunConfig::default().to_json()),
        other => Err(PyValueError::new_err(format!("unknown preset `{other}`"))),
    }
}

/// Slice origins and restored token grid for an input size.
#[pyfunction]
fn layout(
    height: usize,
    width: usize,
    p: f64,
    patch: usize,
) -> PyResult<(Vec<(usize, usize)>, (usize, usize))> {
    let l = plan_layout((height, width), p, patch).map_err(py_err)?;
    Ok((l.origins(), l.grid_hw()))
}

/// Per-class IoU and mIoU of two flat label maps.
#[pyfunction]
#[pyo3(signature = (pred, gt, classes, ignore = None))]
fn miou(
    pred: Vec<u32>,
    gt: Vec<u32>,
    classes: usize,
    ignore: Option<u32>,
) -> PyResult<(Vec<Option<f64>>, Option<f64>)> {
    let mut cm = ConfusionMatrix::new(classes);
    cm.add(&pred, &gt, ignore).map_err(py_err)?;
    let r = cm.iou();
    Ok((r.per_class_iou, r.miou))
}

/// Finite-difference checks of the primitive backward rules.
#[pyfunction]
#[pyo3(signature = (seeds = 1))]
fn gradcheck(seeds: u64) -> PyResult<Vec<(String, f64, bool)>> {
    primitive_cases()
        .iter()
        .map(|c| {
            let r = run_case(c, seeds, None).map_err(py_err)?;
            Ok((r.name, r.max_rel_err, r.passed))
        })
        .collect()
}

#[pyclass(unsendable)]
struct Segmenter {
    model: Model,
    store: ParameterStore<f32>,
}

#[pymethods]
impl Segmenter {
    #[new]
    #[pyo3(signature = (config = None, checkpoint = None))]
    fn new(config: Option<&str>, checkpoint: Option<PathBuf>) -> PyResult<Self> {
        let cfg = match (config, &checkpoint) {
            (Some(json), _) => RunConfig::from_json(json),
            (None, Some(dir)) => RunConfig::load(&dir.join("config.json")),
            (None, None) => Ok(RunConfig::toy()),
        }
        .map_err(py_err)?;
        let model = Model::new(cfg).map_err(py_err)?;
        let mut store = model.init_store::<f32>().map_err(py_err)?;
        if let Some(dir) = checkpoint {
            let saved = ParameterStore::load(&dir).map_err(py_err)?;
            let missing = store.load_matching(&saved);
            if !missing.is_empty() {
                return Err(PyValueError::new_err(format!(
                    "checkpoint lacks {} parameters (first: {})",
                    missing.len(),
                    missing[0]
                )));
            }
        }
        Ok(Segmenter { model, store })
    }

    #[getter]
    fn config(&self) -> String {
        self.model.cfg.to_json()
    }

    /// Segments an interleaved RGB byte buffer of `height × width` pixels.
    /// Returns the label map as bytes plus per-segment details.
    #[pyo3(signature = (rgb, height, width, classes, mode = "semantic"))]
    fn segment<'py>(
        &self,
        py: Python<'py>,
        rgb: &[u8],
        height: usize,
        width: usize,
        classes: Vec<String>,
        mode: &str,
    ) -> PyResult<Bound<'py, PyDict>> {
        if rgb.len() != height * width * 3 {
            return Err(PyValueError::new_err(format!(
                "expected {} bytes for {height}x{width} RGB, got {}",
                height * width * 3,
                rgb.len()
            )));
        }
        let hw = height * width;
        let pixels = Tensor::from_fn(&[3, height, width], |i| {
            let (c, px) = (i / hw, i % hw);
            rgb[px * 3 + c] as f32 / 255.0
        });
        let img = InputImage::new(pixels).map_err(py_err)?;
        let text = self
            .model
            .text_embedder(PromptTemplates::default())
            .and_then(|t| t.embed_vocabulary(&classes))
            .map_err(py_err)?;
        let pred = self
            .model
            .predict(&self.store, &img, &text)
            .map_err(py_err)?;
        let seg = match mode {
            "semantic" => {
                compose_semantic(&pred.class_logits, &pred.mask_logits)
                    .map_err(py_err)?
                    .0
            }
            "panoptic" => {
                compose_panoptic(&pred.class_logits, &pred.mask_logits).map_err(py_err)?
            }
            other => return Err(PyValueError::new_err(format!("unknown mode `{other}`"))),
        };
        let labels: Vec<u8> = seg.labels.iter().map(|&l| l.min(255) as u8).collect();
        let out = PyDict::new(py);
        out.set_item("height", seg.height)?;
        out.set_item("width", seg.width)?;
        out.set_item("labels", PyBytes::new(py, &labels))?;
        let segments: Vec<(u32, usize, u32, f64, usize)> = seg
            .segments
            .iter()
            .map(|s| (s.id, s.query, s.class, s.score, s.area))
            .collect();
        out.set_item("segments", segments)?;
        Ok(out)
    }
}

#[pymodule]
pub fn ovseg(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(default_config, m)?)?;
    m.add_function(wrap_pyfunction!(layout, m)?)?;
    m.add_function(wrap_pyfunction!(miou, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    m.add_class::<Segmenter>()?;
    Ok(())
}
