//! Evaluation dataset layout: `classes.json`, `images/<stem>.ppm`,
//! `labels/<stem>.pgm` (class index, 255 ignored) and optional
//! `instances/<stem>.pgm` (instance id, 0 for none).

use std::fs;
use std::path::{Path, PathBuf};

use ovseg_core::classifier::IGNORE_LABEL;
use ovseg_core::image::GrayMap;
use ovseg_core::metrics::PanopticSegment;
use ovseg_core::train::data::ToySample;
use ovseg_core::{Error, InputImage};

use crate::common::{write_json, Result};

pub const CLASSES: &str = "classes.json";
pub const IMAGES: &str = "images";
pub const LABELS: &str = "labels";
pub const INSTANCES: &str = "instances";

/// Label and instance maps of one image.
#[derive(Clone, Debug, PartialEq)]
pub struct Annotation {
    pub height: usize,
    pub width: usize,
    pub labels: Vec<u32>,
    pub instances: Option<Vec<u32>>,
}

impl Annotation {
    /// One segment per (class, instance) pair, or per class without
    /// instance ids.
    pub fn segments(&self) -> Vec<PanopticSegment> {
        let mut keys: Vec<(u32, u32)> = Vec::new();
        let mut segs: Vec<PanopticSegment> = Vec::new();
        for (px, &c) in self.labels.iter().enumerate() {
            if c == IGNORE_LABEL {
                continue;
            }
            let inst = self.instances.as_ref().map_or(0, |i| i[px]);
            if self.instances.is_some() && inst == 0 {
                continue;
            }
            match keys.iter().position(|&k| k == (c, inst)) {
                Some(i) => segs[i].pixels.push(px),
                None => {
                    keys.push((c, inst));
                    segs.push(PanopticSegment {
                        class: c,
                        pixels: vec![px],
                    });
                }
            }
        }
        segs
    }

    pub fn write(&self, root: &Path, stem: &str) -> Result<()> {
        let to_u8 = |v: &[u32]| v.iter().map(|&x| x.min(255) as u8).collect::<Vec<_>>();
        let dir = ensure(root, LABELS)?;
        GrayMap::new(self.height, self.width, to_u8(&self.labels))?
            .write_pgm(&dir.join(format!("{stem}.pgm")))?;
        if let Some(inst) = &self.instances {
            let dir = ensure(root, INSTANCES)?;
            GrayMap::new(self.height, self.width, to_u8(inst))?
                .write_pgm(&dir.join(format!("{stem}.pgm")))?;
        }
        Ok(())
    }

    pub fn read(root: &Path, stem: &str) -> Result<Self> {
        let labels = GrayMap::read_pgm(&root.join(LABELS).join(format!("{stem}.pgm")))?;
        let inst_path = root.join(INSTANCES).join(format!("{stem}.pgm"));
        let instances = if inst_path.exists() {
            let m = GrayMap::read_pgm(&inst_path)?;
            if (m.height, m.width) != (labels.height, labels.width) {
                return Err(Error::Format(format!(
                    "{} does not match its label map",
                    inst_path.display()
                ))
                .into());
            }
            Some(m.data.iter().map(|&v| v as u32).collect())
        } else {
            None
        };
        Ok(Annotation {
            height: labels.height,
            width: labels.width,
            labels: labels.data.iter().map(|&v| v as u32).collect(),
            instances,
        })
    }
}

fn ensure(root: &Path, sub: &str) -> Result<PathBuf> {
    let dir = root.join(sub);
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    Ok(dir)
}

pub fn toy_annotation(s: &ToySample) -> Annotation {
    let mut inst = vec![0u32; s.image.height() * s.image.width()];
    for (i, instance) in s.instances.iter().enumerate() {
        for (o, &m) in inst.iter_mut().zip(&instance.mask) {
            if m {
                *o = i as u32 + 1;
            }
        }
    }
    Annotation {
        height: s.image.height(),
        width: s.image.width(),
        labels: s.label_map(),
        instances: Some(inst),
    }
}

pub fn export_toy(root: &Path, samples: &[ToySample], classes: &[String]) -> Result<()> {
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    write_json(&root.join(CLASSES), &classes)?;
    let images = ensure(root, IMAGES)?;
    for (i, s) in samples.iter().enumerate() {
        let stem = format!("{i:04}");
        s.image.write_ppm(&images.join(format!("{stem}.ppm")))?;
        toy_annotation(s).write(root, &stem)?;
    }
    Ok(())
}

/// Sorted stems of the PPM files under `images/`.
pub fn stems(root: &Path) -> Result<Vec<String>> {
    let dir = root.join(IMAGES);
    let mut out = Vec::new();
    for entry in fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))? {
        let path = entry.map_err(|e| Error::io(&dir, e))?.path();
        if path.extension().is_some_and(|e| e == "ppm") {
            if let Some(s) = path.file_stem() {
                out.push(s.to_string_lossy().into_owned());
            }
        }
    }
    out.sort();
    Ok(out)
}

pub fn read_image(root: &Path, stem: &str) -> Result<InputImage> {
    Ok(InputImage::read_ppm(
        &root.join(IMAGES).join(format!("{stem}.ppm")),
    )?)
}
