//! Seeded real/fake corpus with one low-level and one semantic cue.
//!
//! Real images are smooth near-gray gradients plus Gaussian sensor noise.
//! The spectral artifact is a 2x bilinear down/up-sample, which removes the
//! noise. The semantic artifact adds a fixed 16x16 chroma bump (`+s` to red,
//! `-s` to green), leaving the channel sum, and with it the SRM residual,
//! untouched.

use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::manifest::{build_manifest, DatasetManifest, Label};
use crate::error::{Error, Result};
use crate::imageio::{resize_image, save_png, ResizeMethod, RgbImage};
use crate::seeding::stream_rng;

pub const SENTINEL_SIZE: usize = 16;
pub const SENTINEL_AMPLITUDE: f64 = 48.0;
pub const NOISE_SIGMA: f64 = 6.0;
const NOISE_CLIP: f64 = 24.0;
const SYNTH_STREAM: u64 = 0x5359_4E54;
pub const REAL_SOURCE: &str = "camera";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Artifact {
    Spectral,
    Semantic,
    Both,
}

impl Artifact {
    pub fn spectral(self) -> bool {
        matches!(self, Artifact::Spectral | Artifact::Both)
    }

    pub fn semantic(self) -> bool {
        matches!(self, Artifact::Semantic | Artifact::Both)
    }

    pub fn source(self) -> &'static str {
        match self {
            Artifact::Spectral => "synth_spectral",
            Artifact::Semantic => "synth_semantic",
            Artifact::Both => "synth_both",
        }
    }
}

fn default_image_size() -> usize {
    128
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub count_per_class: usize,
    #[serde(default = "default_image_size")]
    pub image_size: usize,
    pub artifact: Artifact,
    #[serde(default)]
    pub seed: u64,
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.count_per_class < 2 {
            return Err(Error::Config(format!(
                "count_per_class must be at least 2, got {}",
                self.count_per_class
            )));
        }
        if self.image_size < 2 * SENTINEL_SIZE || self.image_size % 2 != 0 {
            return Err(Error::Config(format!(
                "image_size must be even and at least {}, got {}",
                2 * SENTINEL_SIZE,
                self.image_size
            )));
        }
        Ok(())
    }
}

/// The additive sentinel offsets, `round(A sin(pi (x+.5)/16) sin(pi (y+.5)/16))`.
pub fn sentinel() -> [[i16; SENTINEL_SIZE]; SENTINEL_SIZE] {
    let mut s = [[0i16; SENTINEL_SIZE]; SENTINEL_SIZE];
    let n = SENTINEL_SIZE as f64;
    for (y, row) in s.iter_mut().enumerate() {
        for (x, v) in row.iter_mut().enumerate() {
            let a = (std::f64::consts::PI * (x as f64 + 0.5) / n).sin();
            let b = (std::f64::consts::PI * (y as f64 + 0.5) / n).sin();
            *v = (SENTINEL_AMPLITUDE * a * b).round() as i16;
        }
    }
    s
}

/// Smooth gradient plus clipped Gaussian noise. Channel values stay within
/// [63, 189], leaving headroom for the sentinel.
pub fn real_image(size: usize, rng: &mut impl Rng) -> RgbImage {
    let base = rng.random_range(102.0..150.0);
    let offsets: [f64; 3] = [
        rng.random_range(-8.0..8.0),
        rng.random_range(-8.0..8.0),
        rng.random_range(-8.0..8.0),
    ];
    let gx = rng.random_range(-15.0..15.0);
    let gy = rng.random_range(-15.0..15.0);
    let noise = Normal::new(0.0, NOISE_SIGMA).expect("positive sigma");
    let s = size as f64;
    let mut pixels = Vec::with_capacity(size * size * 3);
    for y in 0..size {
        for x in 0..size {
            let smooth = base + gx * (2.0 * x as f64 / s - 1.0) + gy * (2.0 * y as f64 / s - 1.0);
            for off in offsets {
                let n: f64 = noise.sample(rng);
                let v = smooth + off + n.clamp(-NOISE_CLIP, NOISE_CLIP);
                pixels.push(v.round().clamp(0.0, 255.0) as u8);
            }
        }
    }
    RgbImage::new(size, size, pixels).expect("sized buffer")
}

pub fn spectral_artifact(img: &RgbImage) -> Result<RgbImage> {
    let half = resize_image(img, img.width() / 2, img.height() / 2, ResizeMethod::Bilinear)?;
    resize_image(&half, img.width(), img.height(), ResizeMethod::Bilinear)
}

/// Adds the sentinel with its top-left corner at `(x0, y0)`.
pub fn add_sentinel(img: &mut RgbImage, x0: usize, y0: usize) {
    let s = sentinel();
    for (dy, row) in s.iter().enumerate() {
        for (dx, &v) in row.iter().enumerate() {
            let [r, g, b] = img.get(x0 + dx, y0 + dy);
            let r = (i16::from(r) + v).clamp(0, 255) as u8;
            let g = (i16::from(g) - v).clamp(0, 255) as u8;
            img.set(x0 + dx, y0 + dy, [r, g, b]);
        }
    }
}

/// One corpus image. Fakes start from the same construction as reals (same
/// generator stream) and return the sentinel offset when it was applied.
pub fn synth_image(spec: &SynthSpec, label: Label, index: usize) -> Result<(RgbImage, Option<(usize, usize)>)> {
    let class = match label {
        Label::Real => 0,
        Label::Fake => 1,
    };
    let mut rng = stream_rng(spec.seed, &[SYNTH_STREAM, class, index as u64]);
    let mut img = real_image(spec.image_size, &mut rng);
    let span = spec.image_size - SENTINEL_SIZE;
    let offset = (rng.random_range(0..=span), rng.random_range(0..=span));
    if label == Label::Real {
        return Ok((img, None));
    }
    if spec.artifact.spectral() {
        img = spectral_artifact(&img)?;
    }
    if spec.artifact.semantic() {
        add_sentinel(&mut img, offset.0, offset.1);
        return Ok((img, Some(offset)));
    }
    Ok((img, None))
}

/// Writes `real/camera/NNNNN.png` and `fake/<synth_artifact>/NNNNN.png`
/// under `out_dir`, plus `manifest.jsonl`, and returns the manifest.
pub fn make_synthetic_dataset(spec: &SynthSpec, out_dir: impl AsRef<Path>) -> Result<DatasetManifest> {
    spec.validate()?;
    let out_dir = out_dir.as_ref();
    let jobs: Vec<(Label, usize)> = [Label::Real, Label::Fake]
        .into_iter()
        .flat_map(|l| (0..spec.count_per_class).map(move |i| (l, i)))
        .collect();
    for label in [Label::Real, Label::Fake] {
        let dir = class_dir(out_dir, spec, label);
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    jobs.par_iter().try_for_each(|&(label, i)| -> Result<()> {
        let (img, _) = synth_image(spec, label, i)?;
        save_png(&img, class_dir(out_dir, spec, label).join(format!("{i:05}.png")))
    })?;
    let manifest = build_manifest(out_dir)?;
    manifest.save(out_dir.join("manifest.jsonl"))?;
    Ok(manifest)
}

fn class_dir(out_dir: &Path, spec: &SynthSpec, label: Label) -> std::path::PathBuf {
    let source = match label {
        Label::Real => REAL_SOURCE,
        Label::Fake => spec.artifact.source(),
    };
    out_dir.join(label.name()).join(source)
}
