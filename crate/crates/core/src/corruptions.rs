//! Seeded image degradations in four families: sensor failure
//! (`dead_pixels`, `striping`), adverse environment (`fog_low_exposure`)
//! and transmission loss (`transmission`).
//!
//! Every family maps severity 1..=5 to fixed parameters from the tables
//! below; the seed only drives the random placements and draws.

use std::fs;
use std::path::Path;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::manifest::{CorruptionEntry, ImageRecord, Manifest};
use crate::registry::Registry;
use crate::tensor::{write_tensor, Tensor};

pub const DEAD_PIXELS: &str = "dead_pixels";
pub const STRIPING: &str = "striping";
pub const FOG_LOW_EXPOSURE: &str = "fog_low_exposure";
pub const TRANSMISSION: &str = "transmission";

/// Share of pixel sites forced to 0 or 1.
pub const DEAD_PIXEL_FRACTION: [f64; 5] = [0.01, 0.02, 0.04, 0.08, 0.16];
/// Half-width of the uniform per-row offset.
pub const STRIPE_AMPLITUDE: [f64; 5] = [0.05, 0.1, 0.2, 0.3, 0.4];
/// Blend weight of the fog layer.
pub const FOG_WEIGHT: [f64; 5] = [0.2, 0.3, 0.45, 0.6, 0.7];
/// Exposure exponent applied after fogging.
pub const FOG_GAMMA: [f64; 5] = [1.2, 1.5, 1.8, 2.2, 2.5];
pub const FOG_GRAY: f64 = 0.5;
/// Per-severity step of the warm-to-cool shift: red down, blue up.
pub const FOG_COLOR_STEP: f64 = 0.02;
/// Quantization levels for 8×8 block residuals.
pub const TRANSMISSION_LEVELS: [u32; 5] = [32, 16, 8, 6, 4];
pub const TRANSMISSION_PATCHES: [usize; 5] = [1, 2, 2, 3, 4];
pub const TRANSMISSION_BLOCK: usize = 8;

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CorruptionSpec {
    pub family: String,
    pub severity: u8,
    pub seed: u64,
}

impl CorruptionSpec {
    pub fn new(family: &str, severity: u8, seed: u64) -> Self {
        Self {
            family: family.to_string(),
            severity,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(1..=5).contains(&self.severity) {
            return Err(Error::Config(format!(
                "severity {} outside 1..=5",
                self.severity
            )));
        }
        default_corruptions().get(&self.family).map(|_| ())
    }

    fn level(&self) -> usize {
        self.severity as usize - 1
    }
}

pub trait Corruption: Send + Sync {
    /// Degrades a `C×H×W` image with values in `[0,1]` in place.
    fn apply(&self, data: &mut [f32], extents: (usize, usize, usize), spec: &CorruptionSpec, rng: &mut ChaCha8Rng);
}

pub fn default_corruptions() -> Registry<dyn Corruption> {
    let mut r: Registry<dyn Corruption> = Registry::new("corruption family");
    r.register(DEAD_PIXELS, Box::new(DeadPixels));
    r.register(STRIPING, Box::new(Striping));
    r.register(FOG_LOW_EXPOSURE, Box::new(FogLowExposure));
    r.register(TRANSMISSION, Box::new(Transmission));
    r
}

struct DeadPixels;
struct Striping;
struct FogLowExposure;
struct Transmission;

impl Corruption for DeadPixels {
    fn apply(&self, data: &mut [f32], (c, h, w): (usize, usize, usize), spec: &CorruptionSpec, rng: &mut ChaCha8Rng) {
        let sites = h * w;
        let n = (DEAD_PIXEL_FRACTION[spec.level()] * sites as f64).floor() as usize;
        for site in sample(rng, sites, n).into_vec() {
            let v = if rng.random::<bool>() { 1.0 } else { 0.0 };
            for ch in 0..c {
                data[ch * sites + site] = v;
            }
        }
    }
}

impl Corruption for Striping {
    fn apply(&self, data: &mut [f32], (c, h, w): (usize, usize, usize), spec: &CorruptionSpec, rng: &mut ChaCha8Rng) {
        let a = STRIPE_AMPLITUDE[spec.level()];
        for y in 0..h {
            let offset = rng.random_range(-a..=a) as f32;
            for ch in 0..c {
                let row = &mut data[(ch * h + y) * w..(ch * h + y + 1) * w];
                row.iter_mut().for_each(|v| *v += offset);
            }
        }
    }
}

impl Corruption for FogLowExposure {
    fn apply(&self, data: &mut [f32], (c, h, w): (usize, usize, usize), spec: &CorruptionSpec, _: &mut ChaCha8Rng) {
        let weight = FOG_WEIGHT[spec.level()];
        let gamma = FOG_GAMMA[spec.level()];
        let shift = FOG_COLOR_STEP * spec.severity as f64;
        let hw = h * w;
        for ch in 0..c {
            // Warm-to-cool: the first channel loses, the last gains.
            let tint = if c < 2 {
                0.0
            } else if ch == 0 {
                -shift
            } else if ch == c - 1 {
                shift
            } else {
                0.0
            };
            for v in &mut data[ch * hw..(ch + 1) * hw] {
                let fogged = (1.0 - weight) * *v as f64 + weight * FOG_GRAY;
                *v = (fogged.powf(gamma) + tint) as f32;
            }
        }
    }
}

impl Corruption for Transmission {
    fn apply(&self, data: &mut [f32], (c, h, w): (usize, usize, usize), spec: &CorruptionSpec, rng: &mut ChaCha8Rng) {
        let steps = (TRANSMISSION_LEVELS[spec.level()] - 1) as f64;
        let b = TRANSMISSION_BLOCK;
        let hw = h * w;
        for ch in 0..c {
            let plane = &mut data[ch * hw..(ch + 1) * hw];
            for by in (0..h).step_by(b) {
                for bx in (0..w).step_by(b) {
                    let ys = by..(by + b).min(h);
                    let xs = bx..(bx + b).min(w);
                    let count = ys.len() * xs.len();
                    let mut sum = 0.0f64;
                    for y in ys.clone() {
                        for x in xs.clone() {
                            sum += plane[y * w + x] as f64;
                        }
                    }
                    let mean = sum / count as f64;
                    for y in ys.clone() {
                        for x in xs.clone() {
                            let r = plane[y * w + x] as f64 - mean;
                            plane[y * w + x] = (mean + (r * steps).round() / steps) as f32;
                        }
                    }
                }
            }
        }
        let side_h = h.div_ceil(4);
        let side_w = w.div_ceil(4);
        for _ in 0..TRANSMISSION_PATCHES[spec.level()] {
            let y0 = rng.random_range(0..=h - side_h);
            let x0 = rng.random_range(0..=w - side_w);
            for ch in 0..c {
                for y in y0..y0 + side_h {
                    for x in x0..x0 + side_w {
                        data[ch * hw + y * w + x] = rng.random::<f32>();
                    }
                }
            }
        }
    }
}

pub fn apply_corruption(img: &Tensor, spec: &CorruptionSpec) -> Result<Tensor> {
    spec.validate()?;
    let (c, h, w) = img.chw()?;
    if let Some(v) = img.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::Validation(format!(
            "corruption input must lie in [0,1], found {v}"
        )));
    }
    let registry = default_corruptions();
    let family = registry.get(&spec.family)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut data = img.data().to_vec();
    family.apply(&mut data, (c, h, w), spec, &mut rng);
    data.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    Tensor::new(img.shape().to_vec(), data)
}

/// Writes one corrupted TZR per (image, spec) into `out_dir` plus
/// `manifest.json`, and returns the manifest entries. Output names depend
/// only on the inputs, so reruns overwrite with identical bytes.
pub fn build_corrupted_corpus(
    images: &[ImageRecord],
    specs: &[CorruptionSpec],
    out_dir: &Path,
) -> Result<Vec<CorruptionEntry>> {
    for s in specs {
        s.validate()?;
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let jobs: Vec<(&ImageRecord, &CorruptionSpec)> = images
        .iter()
        .flat_map(|img| specs.iter().map(move |s| (img, s)))
        .collect();
    let entries = jobs
        .par_iter()
        .map(|(img, spec)| {
            let src = img.load()?;
            let out = apply_corruption(&src, spec)?;
            let name = format!(
                "{}_{}_s{}_{}.tzr",
                img.sample_id, spec.family, spec.severity, spec.seed
            );
            write_tensor(&out, out_dir.join(&name))?;
            Ok(CorruptionEntry {
                source_id: img.sample_id.clone(),
                family: spec.family.clone(),
                severity: spec.severity,
                seed: spec.seed,
                path: name,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Manifest::save(&entries, out_dir.join("manifest.json"))?;
    Ok(entries)
}
