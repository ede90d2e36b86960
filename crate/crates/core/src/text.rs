//! Deterministic toy text encoder with prompt-template ensembling.
//!
//! Each filled template is hashed into signed character 3-gram buckets,
//! normalised and rotated by a fixed seeded orthogonal matrix. Class
//! embeddings average the template embeddings and are re-normalised.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::tensor::{Fnv, Real, Tensor};

pub const PLACEHOLDER: &str = "{}";

pub const DEFAULT_TEMPLATES: [&str; 14] = [
    "a photo of a {}.",
    "This is a photo of a {}",
    "There is a {} in the scene",
    "There is the {} in the scene",
    "a photo of a {} in the scene",
    "a photo of a small {}.",
    "a photo of a medium {}.",
    "a photo of a large {}.",
    "This is a photo of a small {}.",
    "This is a photo of a medium {}.",
    "This is a photo of a large {}.",
    "There is a small {} in the scene.",
    "There is a medium {} in the scene.",
    "There is a large {} in the scene.",
];

#[derive(Clone, Debug, PartialEq)]
pub struct PromptTemplates {
    templates: Vec<String>,
}

impl Default for PromptTemplates {
    fn default() -> Self {
        PromptTemplates {
            templates: DEFAULT_TEMPLATES.iter().map(|s| s.to_string()).collect(),
        }
    }
}

impl PromptTemplates {
    pub fn new(templates: Vec<String>) -> Result<Self> {
        if templates.is_empty() {
            return Err(Error::Config("template set is empty".into()));
        }
        if let Some(t) = templates
            .iter()
            .find(|t| t.matches(PLACEHOLDER).count() != 1)
        {
            return Err(Error::Config(format!(
                "template {t:?} must contain exactly one {PLACEHOLDER}"
            )));
        }
        Ok(PromptTemplates { templates })
    }

    /// One template per non-blank line.
    pub fn parse(text: &str) -> Result<Self> {
        Self::new(
            text.lines()
                .map(str::trim)
                .filter(|l| !l.is_empty())
                .map(String::from)
                .collect(),
        )
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::parse(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    pub fn len(&self) -> usize {
        self.templates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.templates.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &str> {
        self.templates.iter().map(String::as_str)
    }

    pub fn fill(&self, name: &str) -> Vec<String> {
        self.iter()
            .map(|t| t.replacen(PLACEHOLDER, name, 1))
            .collect()
    }
}

#[derive(Clone, Debug)]
pub struct TextEmbedder {
    dim: usize,
    templates: PromptTemplates,
    /// Row-major orthogonal `[dim, dim]` rotation.
    rotation: Vec<f64>,
}

/// Orthonormal rows from Gram-Schmidt over a seeded Gaussian matrix.
fn random_rotation(dim: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut m: Vec<f64> = (0..dim * dim)
        .map(|_| StandardNormal.sample(&mut rng))
        .collect();
    for i in 0..dim {
        for j in 0..i {
            let dot: f64 = (0..dim).map(|c| m[i * dim + c] * m[j * dim + c]).sum();
            for c in 0..dim {
                m[i * dim + c] -= dot * m[j * dim + c];
            }
        }
        let norm = (0..dim).map(|c| m[i * dim + c].powi(2)).sum::<f64>().sqrt();
        m[i * dim..(i + 1) * dim]
            .iter_mut()
            .for_each(|v| *v /= norm);
    }
    m
}

fn normalize(v: &mut [f64]) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
}

impl TextEmbedder {
    pub fn new(dim: usize, seed: u64, templates: PromptTemplates) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Config("text embedding dim must be positive".into()));
        }
        Ok(TextEmbedder {
            dim,
            templates,
            rotation: random_rotation(dim, seed),
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn templates(&self) -> &PromptTemplates {
        &self.templates
    }

    /// Unit-norm embedding of one sentence.
    pub fn embed_sentence(&self, text: &str) -> Vec<f64> {
        let chars: Vec<char> = format!("^{}$", text.to_lowercase()).chars().collect();
        let mut buckets = vec![0.0; self.dim];
        for gram in chars.windows(3) {
            let mut h = Fnv::new();
            gram.iter()
                .for_each(|c| h.write(&(*c as u32).to_le_bytes()));
            let v = h.finish();
            let sign = if v >> 63 == 0 { 1.0 } else { -1.0 };
            buckets[(v % self.dim as u64) as usize] += sign;
        }
        normalize(&mut buckets);
        let mut out: Vec<f64> = (0..self.dim)
            .map(|r| {
                self.rotation[r * self.dim..(r + 1) * self.dim]
                    .iter()
                    .zip(&buckets)
                    .map(|(a, b)| a * b)
                    .sum()
            })
            .collect();
        normalize(&mut out);
        out
    }

    /// Template-averaged, unit-norm class embedding. Template sentences are
    /// summed in sorted order so the result does not depend on their order.
    pub fn embed_class(&self, name: &str) -> Result<Vec<f64>> {
        if name.trim().is_empty() {
            return Err(Error::Contract("class name is empty".into()));
        }
        let mut sentences = self.templates.fill(name);
        sentences.sort();
        let mut acc = vec![0.0; self.dim];
        for s in &sentences {
            acc.iter_mut()
                .zip(self.embed_sentence(s))
                .for_each(|(a, e)| *a += e);
        }
        acc.iter_mut().for_each(|a| *a /= sentences.len() as f64);
        normalize(&mut acc);
        Ok(acc)
    }

    /// `[K, dim]` class embeddings in the given order.
    pub fn embed_vocabulary<T: Real>(&self, names: &[String]) -> Result<Tensor<T>> {
        if names.is_empty() {
            return Ok(Tensor::zeros(&[0, self.dim]));
        }
        let mut data = Vec::with_capacity(names.len() * self.dim);
        for n in names {
            data.extend(self.embed_class(n)?.into_iter().map(T::from_f64));
        }
        Tensor::new(vec![names.len(), self.dim], data)
    }
}

/// Names that occur more than once, in first-repeat order.
pub fn duplicate_names(names: &[String]) -> Vec<String> {
    let mut seen = BTreeSet::new();
    let mut dup = Vec::new();
    for n in names {
        if !seen.insert(n.as_str()) && !dup.contains(n) {
            dup.push(n.clone());
        }
    }
    dup
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rotation_is_orthogonal() {
        let d = 16;
        let r = random_rotation(d, 3);
        for i in 0..d {
            for j in 0..d {
                let dot: f64 = (0..d).map(|c| r[i * d + c] * r[j * d + c]).sum();
                assert!((dot - if i == j { 1.0 } else { 0.0 }).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn templates_need_one_slot() {
        assert!(PromptTemplates::parse("a {} and {}\n").is_err());
        assert!(PromptTemplates::parse("\n\n").is_err());
        assert_eq!(
            PromptTemplates::parse("a {}\n\nthe {}.\n").unwrap().len(),
            2
        );
    }

    #[test]
    fn duplicates_reported_once() {
        let n: Vec<String> = ["a", "b", "a", "a"].iter().map(|s| s.to_string()).collect();
        assert_eq!(duplicate_names(&n), vec!["a".to_string()]);
    }
}
