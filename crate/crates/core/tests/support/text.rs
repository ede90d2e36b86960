#![allow(dead_code)]

use ovseg_core::text::{PromptTemplates, TextEmbedder};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const TABLE: [&str; 14] = [
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

pub fn embedder(templates: PromptTemplates) -> TextEmbedder {
    TextEmbedder::new(64, 3, templates).unwrap()
}

pub fn default_templates_are_the_fourteen_prompts() {
    let t = PromptTemplates::default();
    assert_eq!(t.len(), 14);
    assert_eq!(t.iter().collect::<Vec<_>>(), TABLE);
    assert!(t.iter().all(|s| s.matches("{}").count() == 1));
}

pub fn template_order_does_not_change_embedding() {
    let e = embedder(PromptTemplates::default());
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for name in ["red box", "sky", "traffic light"] {
        let base = e.embed_class(name).unwrap();
        for _ in 0..5 {
            let mut shuffled: Vec<String> = TABLE.iter().map(|s| s.to_string()).collect();
            shuffled.shuffle(&mut rng);
            let other = embedder(PromptTemplates::new(shuffled).unwrap());
            assert_eq!(other.embed_class(name).unwrap(), base);
        }
    }
}

pub fn class_embedding_is_normalised_template_mean() {
    let e = embedder(PromptTemplates::default());
    let name = "cyan disk";
    let mut sentences: Vec<String> = TABLE.iter().map(|t| t.replacen("{}", name, 1)).collect();
    sentences.sort();
    let mut mean = vec![0.0; 64];
    for s in &sentences {
        for (m, v) in mean.iter_mut().zip(e.embed_sentence(s)) {
            *m += v / 14.0;
        }
    }
    let n = mean.iter().map(|v| v * v).sum::<f64>().sqrt();
    let got = e.embed_class(name).unwrap();
    for (g, m) in got.iter().zip(&mean) {
        assert!((g - m / n).abs() < 1e-12);
    }
}

pub fn vocabulary_rows_and_shapes() {
    let e = embedder(PromptTemplates::default());
    let names: Vec<String> = ["box", "disk", "box"].map(String::from).to_vec();
    let v = e.embed_vocabulary::<f64>(&names).unwrap();
    assert_eq!(v.shape(), &[3, 64]);
    for (i, n) in names.iter().enumerate() {
        assert_eq!(
            &v.data()[i * 64..(i + 1) * 64],
            e.embed_class(n).unwrap().as_slice()
        );
    }
    assert_eq!(&v.data()[..64], &v.data()[128..]);
    assert_eq!(e.embed_vocabulary::<f32>(&[]).unwrap().shape(), &[0, 64]);
    let wide = TextEmbedder::new(512, 0, PromptTemplates::default()).unwrap();
    assert_eq!(
        wide.embed_vocabulary::<f32>(&names).unwrap().shape(),
        &[3, 512]
    );
    assert!(e.embed_class("  ").is_err());
}

pub fn template_file_parsing() {
    let t = PromptTemplates::parse("a {} here\n\n  one {} more  \n").unwrap();
    assert_eq!(t.iter().collect::<Vec<_>>(), ["a {} here", "one {} more"]);
    assert!(PromptTemplates::parse("no slot\n").is_err());
    assert!(PromptTemplates::parse("").is_err());
}
