//! Synthetic stand-in for chest radiographs: textured backgrounds with
//! class-specific shapes as "abnormalities".
//!
//! - class 0: filled disc
//! - class 1: square outline
//! - class 2: thin elongated bar (hard to localize at 1/8 resolution)

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::mask::{BoxAnnotation, Region};
use super::{LabelSet, Sample};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const CLASS_NAMES: [&str; 3] = ["disc", "square", "bar"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticConfig {
    pub count: usize,
    #[serde(default = "default_classes")]
    pub num_classes: usize,
    #[serde(default = "default_image_size")]
    pub image_size: usize,
    #[serde(default = "default_annotated")]
    pub annotated_fraction: f64,
    #[serde(default = "default_positive")]
    pub positive_fraction: f64,
    pub seed: u64,
}

fn default_classes() -> usize {
    3
}
fn default_image_size() -> usize {
    64
}
fn default_annotated() -> f64 {
    0.1
}
fn default_positive() -> f64 {
    0.6
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            count: 100,
            num_classes: 3,
            image_size: 64,
            annotated_fraction: 0.1,
            positive_fraction: 0.6,
            seed: 0,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.annotated_fraction) {
            return Err(Error::Config(format!(
                "annotated_fraction {} outside [0,1]",
                self.annotated_fraction
            )));
        }
        if !(0.0..=1.0).contains(&self.positive_fraction) {
            return Err(Error::Config(format!(
                "positive_fraction {} outside [0,1]",
                self.positive_fraction
            )));
        }
        if self.num_classes == 0 || self.num_classes > CLASS_NAMES.len() {
            return Err(Error::Config(format!(
                "synthetic data supports 1..={} classes",
                CLASS_NAMES.len()
            )));
        }
        if self.image_size < 32 || self.image_size % 8 != 0 {
            return Err(Error::Config("image_size must be a multiple of 8 and >= 32".into()));
        }
        Ok(())
    }

    /// Probability that a positive image carries 1, 2 or 3 distinct shapes.
    pub const SHAPE_COUNT_PROBS: [f64; 3] = [0.6, 0.3, 0.1];

    /// Expected marginal frequency of each class label.
    pub fn class_frequency(&self) -> f64 {
        let d = self.num_classes;
        let expected: f64 = Self::SHAPE_COUNT_PROBS
            .iter()
            .enumerate()
            .map(|(i, p)| p * ((i + 1).min(d)) as f64)
            .sum();
        self.positive_fraction * expected / d as f64
    }
}

fn sample_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64 + 1);
    rng
}

fn background(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let base = rng.gen_range(0.25..0.45);
    let waves: Vec<(f64, f64, f64, f64)> = (0..2)
        .map(|_| {
            (
                rng.gen_range(0.02..0.06),
                rng.gen_range(0.05..0.2),
                rng.gen_range(0.05..0.2),
                rng.gen_range(0.0..std::f64::consts::TAU),
            )
        })
        .collect();
    let mut px = vec![0.0; n * n];
    for r in 0..n {
        for c in 0..n {
            let wave: f64 = waves
                .iter()
                .map(|(a, fy, fx, ph)| a * (fy * r as f64 + fx * c as f64 + ph).sin())
                .sum();
            px[r * n + c] = base + wave + rng.gen_range(-0.08..0.08);
        }
    }
    px
}

fn shape_region(class_id: usize, n: usize, rng: &mut ChaCha8Rng) -> Region {
    match class_id {
        0 => {
            let rad = rng.gen_range(4..=7) as isize;
            let cy = rng.gen_range(rad + 1..n as isize - rad - 1);
            let cx = rng.gen_range(rad + 1..n as isize - rad - 1);
            Region::from_fn(n, n, |r, c| {
                let (dy, dx) = (r as isize - cy, c as isize - cx);
                dy * dy + dx * dx <= rad * rad
            })
        }
        1 => {
            let side = rng.gen_range(10..=16);
            let y = rng.gen_range(1..n - side - 1);
            let x = rng.gen_range(1..n - side - 1);
            Region::from_fn(n, n, |r, c| {
                let inside = r >= y && r < y + side && c >= x && c < x + side;
                let core = r >= y + 2 && r < y + side - 2 && c >= x + 2 && c < x + side - 2;
                inside && !core
            })
        }
        _ => {
            let len = rng.gen_range(14..=22);
            let thick = 2;
            let (bh, bw) = if rng.gen_bool(0.5) { (thick, len) } else { (len, thick) };
            let y = rng.gen_range(1..n - bh - 1);
            let x = rng.gen_range(1..n - bw - 1);
            Region::from_fn(n, n, |r, c| r >= y && r < y + bh && c >= x && c < x + bw)
        }
    }
}

fn boxes_clear(a: &BoxAnnotation, b: &BoxAnnotation, gap: usize) -> bool {
    a.x + a.w + gap <= b.x || b.x + b.w + gap <= a.x || a.y + a.h + gap <= b.y || b.y + b.h + gap <= a.y
}

fn generate_one(cfg: &SyntheticConfig, index: usize) -> Sample {
    let n = cfg.image_size;
    let d = cfg.num_classes;
    let mut rng = sample_rng(cfg.seed, index);
    let mut px = background(&mut rng, n);
    let positive = rng.gen_bool(cfg.positive_fraction);
    let mut classes = Vec::new();
    let mut boxes: Vec<BoxAnnotation> = Vec::new();
    if positive {
        let u: f64 = rng.gen();
        let mut count = 1;
        let mut acc = 0.0;
        for (i, p) in SyntheticConfig::SHAPE_COUNT_PROBS.iter().enumerate() {
            acc += p;
            if u < acc {
                count = i + 1;
                break;
            }
        }
        let count = count.min(d);
        classes = index::sample(&mut rng, d, count).into_vec();
        classes.sort_unstable();
        for &k in &classes {
            let mut placed = None;
            for _ in 0..100 {
                let region = shape_region(k, n, &mut rng);
                let bb = region.bounding_box(k).expect("shapes are non-empty");
                if boxes.iter().all(|b| boxes_clear(b, &bb, 2)) {
                    placed = Some((region, bb));
                    break;
                }
            }
            // crowded images keep the last attempt; the overlap only affects pixels, not labels
            let (region, bb) = placed.unwrap_or_else(|| {
                let region = shape_region(k, n, &mut rng);
                let bb = region.bounding_box(k).expect("shapes are non-empty");
                (region, bb)
            });
            let contrast = rng.gen_range(0.3..0.45);
            for (p, &on) in px.iter_mut().zip(region.pixels()) {
                if on {
                    *p += contrast;
                }
            }
            boxes.push(bb);
        }
    }
    let tint: Vec<f64> = (0..3).map(|_| rng.gen_range(-0.02..0.02)).collect();
    let mut image = Vec::with_capacity(3 * n * n);
    for t in &tint {
        image.extend(px.iter().map(|v| (v + t).clamp(0.0, 1.0)));
    }
    Sample {
        id: format!("syn{}-{index:05}", cfg.seed),
        image: Tensor::new(&[3, n, n], image).expect("image shape"),
        labels: LabelSet::from_classes(d, &classes),
        boxes,
        refined: Vec::new(),
    }
}

/// Generates `count` samples. Each sample draws from its own seeded stream, so
/// sample `i` does not depend on `count`. Exactly `round(annotated_fraction * positives)`
/// positives, chosen by a seeded shuffle, keep their boxes.
pub fn generate_synthetic(cfg: &SyntheticConfig) -> Result<Vec<Sample>> {
    cfg.validate()?;
    let mut samples: Vec<Sample> = (0..cfg.count).map(|i| generate_one(cfg, i)).collect();
    retain_annotations(&mut samples, cfg.annotated_fraction, cfg.seed)?;
    Ok(samples)
}

/// Keeps boxes on `round(fraction * positives)` positive samples chosen by a seeded
/// shuffle and clears them everywhere else.
pub fn retain_annotations(samples: &mut [Sample], fraction: f64, seed: u64) -> Result<()> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::Config(format!("annotated fraction {fraction} outside [0,1]")));
    }
    let mut positives: Vec<usize> = samples
        .iter()
        .enumerate()
        .filter(|(_, s)| s.labels.positive())
        .map(|(i, _)| i)
        .collect();
    let keep = (positives.len() as f64 * fraction).round() as usize;
    positives.shuffle(&mut sample_rng(seed, usize::MAX - 1));
    let annotated: std::collections::HashSet<usize> = positives[..keep].iter().copied().collect();
    for (i, s) in samples.iter_mut().enumerate() {
        if !annotated.contains(&i) {
            s.boxes.clear();
            s.refined.clear();
        }
    }
    Ok(())
}
