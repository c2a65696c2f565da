//! Procedural stand-in dataset with the same three-label record shape as a
//! real retinal collection: class-dependent images, class-correlated keywords
//! and captions built from per-class templates.

use std::f64::consts::PI;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::image::{Modality, RetinalImage};
use super::manifest::{CaseRecord, DatasetManifest};
use crate::error::{Error, Result};
use crate::rng;

const DISEASES: &[&str] = &[
    "age-related macular degeneration",
    "diabetic retinopathy",
    "central serous chorioretinopathy",
    "retinitis pigmentosa",
    "optic neuritis",
    "stargardt disease",
    "branch retinal vein occlusion",
    "choroidal nevus",
];

const HALLMARKS: &[&str] = &[
    "drusen",
    "microaneurysms",
    "subretinal fluid",
    "bone spicules",
    "disc swelling",
    "yellow flecks",
    "venous tortuosity",
    "pigmented lesion",
];

const FINDINGS: &[&str] = &[
    "hemorrhage",
    "hard exudates",
    "macular edema",
    "atrophy",
    "leakage",
    "staining",
    "scarring",
    "neovascularization",
    "cotton wool spots",
    "pigment clumping",
    "window defect",
    "pallor",
];

const TEMPLATES: &[&str] = &[
    "{disease} with {finding} in the {side} eye",
    "the {side} eye shows {finding} consistent with {disease}",
    "fundus reveals {finding} in the {side} eye suggestive of {disease}",
];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub classes: usize,
    pub records: usize,
    /// Number of distinct per-record finding phrases.
    pub vocab_size: usize,
    pub image_side: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self { classes: 4, records: 200, vocab_size: 8, image_side: 32, seed: 0 }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::invalid("synth-data", "need at least 2 classes"));
        }
        if self.records < self.classes {
            return Err(Error::invalid("synth-data", "need at least one record per class"));
        }
        if self.vocab_size < 2 {
            return Err(Error::invalid("synth-data", "vocabulary size must be at least 2"));
        }
        if self.image_side < 8 {
            return Err(Error::invalid("synth-data", "image side must be at least 8"));
        }
        Ok(())
    }
}

pub fn disease_name(class: usize) -> String {
    DISEASES.get(class).map_or_else(|| format!("retinal disease {class}"), |s| s.to_string())
}

fn hallmark(class: usize) -> String {
    HALLMARKS.get(class).map_or_else(|| format!("sign {class}"), |s| s.to_string())
}

fn finding(index: usize) -> String {
    FINDINGS.get(index).map_or_else(|| format!("lesion {index}"), |s| s.to_string())
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticDataset {
    pub manifest: DatasetManifest,
    pub images: Vec<RetinalImage>,
}

impl SyntheticDataset {
    /// Writes `manifest.json` and `images/` under `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        for (record, image) in self.manifest.records().iter().zip(&self.images) {
            image.save(&dir.join(&record.image_path))?;
        }
        self.manifest.save(&dir.join("manifest.json"))
    }
}

pub fn generate_synthetic_dataset(cfg: &SynthConfig) -> Result<SyntheticDataset> {
    cfg.validate()?;
    let mut rng = rng::seeded(cfg.seed);
    let mut classes: Vec<usize> = (0..cfg.records).map(|i| i % cfg.classes).collect();
    classes.shuffle(&mut rng);

    let mut records = Vec::with_capacity(cfg.records);
    let mut images = Vec::with_capacity(cfg.records);
    for (i, &class) in classes.iter().enumerate() {
        let modality = if rng.random_bool(0.25) { Modality::Fa } else { Modality::Cfp };
        let side = if rng.random_bool(0.5) { "right" } else { "left" };
        let found = finding(rng.random_range(0..cfg.vocab_size));
        let disease = disease_name(class);
        let text = TEMPLATES[class % TEMPLATES.len()]
            .replace("{disease}", &disease)
            .replace("{finding}", &found)
            .replace("{side}", side);
        let mut description = text[..1].to_uppercase() + &text[1..];
        description.push('.');

        let id = format!("case_{i:04}");
        let ext = if modality == Modality::Fa { "pgm" } else { "ppm" };
        records.push(CaseRecord {
            id: id.clone(),
            image_path: format!("images/{id}.{ext}"),
            modality,
            disease,
            keywords: vec![hallmark(class), found, format!("{side} eye")],
            description,
            split: None,
        });
        images.push(render_image(cfg, class, modality, &mut rng)?);
    }
    Ok(SyntheticDataset { manifest: DatasetManifest::new(records)?, images })
}

/// Fundus-like disc with a bright lesion whose position and stripe texture
/// depend on the class.
fn render_image(cfg: &SynthConfig, class: usize, modality: Modality, rng: &mut rng::Rng) -> Result<RetinalImage> {
    let n = cfg.image_side;
    let s = n as f64;
    let angle = 2.0 * PI * class as f64 / cfg.classes as f64;
    let (cx, cy) = (s / 2.0 + 0.28 * s * angle.cos(), s / 2.0 + 0.28 * s * angle.sin());
    let jitter = (rng.random_range(-0.04..0.04) * s, rng.random_range(-0.04..0.04) * s);
    let (bx, by) = (cx + jitter.0, cy + jitter.1);
    let freq = 1.0 + (class % 4) as f64;
    let sigma = 0.12 * s;
    let mut pixels = Vec::with_capacity(n * n * modality.channels());
    for y in 0..n {
        for x in 0..n {
            let (xf, yf) = (x as f64 + 0.5, y as f64 + 0.5);
            let r = ((xf - s / 2.0).powi(2) + (yf - s / 2.0).powi(2)).sqrt() / (s / 2.0);
            let disc = (1.0 - r * r).max(0.0) * 0.45;
            let d2 = (xf - bx).powi(2) + (yf - by).powi(2);
            let blob = (-d2 / (2.0 * sigma * sigma)).exp() * 0.5;
            let texture = 0.06 * (2.0 * PI * freq * (xf + yf) / s).sin();
            let noise = rng.random_range(-0.03..0.03);
            let v = (disc + blob + texture + noise).clamp(0.0, 1.0);
            match modality {
                Modality::Fa => pixels.push((v * 255.0).round() as u8),
                Modality::Cfp => {
                    pixels.push(((0.35 + 0.65 * v) * 255.0).round().min(255.0) as u8);
                    pixels.push((v * 0.75 * 255.0).round() as u8);
                    pixels.push((v * 0.3 * 255.0).round() as u8);
                }
            }
        }
    }
    RetinalImage::new(n, n, modality, pixels)
}
