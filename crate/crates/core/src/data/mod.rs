//! Samples, labels, box annotations, and the synthetic hierarchical-label dataset.

pub mod augment;
pub mod manifest;
pub mod mask;
pub mod synthetic;

use serde::{Deserialize, Serialize};

pub use augment::{augment, apply_transform, Transform};
pub use mask::{mask_from_boxes, BinaryMask, BoxAnnotation, Provenance, RefinedAnnotation, Region};
pub use synthetic::{generate_synthetic, retain_annotations, SyntheticConfig, CLASS_NAMES};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Per-class binary labels; an image is positive iff any class is present.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LabelSet {
    y: Vec<u8>,
}

impl LabelSet {
    pub fn new(y: Vec<u8>) -> Result<Self> {
        if y.iter().any(|&v| v > 1) {
            return Err(Error::Format(format!("labels must be 0/1, got {y:?}")));
        }
        Ok(Self { y })
    }

    pub fn negative(d: usize) -> Self {
        Self { y: vec![0; d] }
    }

    pub fn from_classes(d: usize, classes: &[usize]) -> Self {
        let mut y = vec![0; d];
        for &k in classes {
            y[k] = 1;
        }
        Self { y }
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn get(&self, k: usize) -> bool {
        self.y[k] == 1
    }

    pub fn values(&self) -> &[u8] {
        &self.y
    }

    pub fn positive(&self) -> bool {
        self.y.iter().any(|&v| v == 1)
    }

    /// N: number of positive classes.
    pub fn count(&self) -> usize {
        self.y.iter().filter(|&&v| v == 1).count()
    }

    pub fn positive_classes(&self) -> impl Iterator<Item = usize> + '_ {
        self.y.iter().enumerate().filter(|(_, &v)| v == 1).map(|(k, _)| k)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    /// `[3,H,W]` with values in `[0,1]`.
    pub image: Tensor,
    pub labels: LabelSet,
    pub boxes: Vec<BoxAnnotation>,
    /// Replacement training masks; a class listed here overrides its box mask.
    pub refined: Vec<RefinedAnnotation>,
}

impl Sample {
    pub fn image_size(&self) -> (usize, usize) {
        (self.image.shape()[1], self.image.shape()[2])
    }

    pub fn has_boxes(&self) -> bool {
        !self.boxes.is_empty()
    }

    pub fn boxes_of(&self, class_id: usize) -> Vec<BoxAnnotation> {
        self.boxes.iter().copied().filter(|b| b.class_id == class_id).collect()
    }

    /// Training mask for `class_id`: the refined mask if present, else the box mask.
    pub fn mask(&self, class_id: usize) -> Option<BinaryMask> {
        if let Some(r) = self.refined.iter().find(|r| r.class_id == class_id) {
            return Some(r.mask.clone());
        }
        self.box_mask(class_id)
    }

    /// Rasterized boxes of `class_id`, if any.
    pub fn box_mask(&self, class_id: usize) -> Option<BinaryMask> {
        let boxes = self.boxes_of(class_id);
        (!boxes.is_empty()).then(|| mask_from_boxes(&boxes, class_id, self.image_size()))
    }

    pub fn validate(&self) -> Result<()> {
        let s = self.image.shape();
        if s.len() != 3 || s[0] != 3 {
            return Err(Error::Format(format!("{}: image must be [3,H,W], got {s:?}", self.id)));
        }
        if !self.image.data().iter().all(|v| (0.0..=1.0).contains(v)) {
            return Err(Error::Format(format!("{}: pixel values outside [0,1]", self.id)));
        }
        for b in &self.boxes {
            b.validate(self.image_size(), self.labels.len())?;
            if !self.labels.get(b.class_id) {
                return Err(Error::Format(format!(
                    "{}: box of class {} on a sample without that label",
                    self.id, b.class_id
                )));
            }
        }
        for r in &self.refined {
            if (r.mask.region.height(), r.mask.region.width()) != self.image_size() || !self.labels.get(r.class_id) {
                return Err(Error::Format(format!("{}: refined mask of class {} is invalid", self.id, r.class_id)));
            }
        }
        Ok(())
    }
}

/// Deterministic split: every `k`-th sample after a seeded shuffle goes to evaluation.
pub fn train_eval_split(samples: Vec<Sample>, eval_fraction: f64, seed: u64) -> Result<(Vec<Sample>, Vec<Sample>)> {
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    if !(0.0..=1.0).contains(&eval_fraction) {
        return Err(Error::Config(format!("eval fraction {eval_fraction} outside [0,1]")));
    }
    let n_eval = (samples.len() as f64 * eval_fraction).round() as usize;
    let mut order: Vec<usize> = (0..samples.len()).collect();
    order.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
    let eval_idx: std::collections::HashSet<usize> = order[..n_eval].iter().copied().collect();
    let (mut train, mut eval) = (Vec::new(), Vec::new());
    for (i, s) in samples.into_iter().enumerate() {
        if eval_idx.contains(&i) {
            eval.push(s);
        } else {
            train.push(s);
        }
    }
    Ok((train, eval))
}
