//! Self-refinement of box masks with a separately trained network's attention.

use std::collections::HashSet;

use crate::data::{BinaryMask, Provenance, RefinedAnnotation, Region, Sample};
use crate::error::{Error, Result};
use crate::evaluation::{attention_to_regions, iou, predict_samples, DEFAULT_MIN_AREA};
use crate::model::{ArchFlags, Model};

/// Below this IoU between attention and box, the box is kept as is.
pub const REFINE_IOU_TRIGGER: f64 = 0.3;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Eval,
}

pub fn refine_mask(box_mask: &BinaryMask, attention: &Region) -> RefinedAnnotation {
    let k = box_mask.class_id;
    if iou(attention, &box_mask.region) < REFINE_IOU_TRIGGER {
        RefinedAnnotation {
            class_id: k,
            mask: box_mask.clone(),
            provenance: Provenance::OriginalBox,
        }
    } else {
        RefinedAnnotation {
            class_id: k,
            mask: BinaryMask {
                class_id: k,
                region: box_mask.region.intersection(attention),
            },
            provenance: Provenance::RefinedIntersection,
        }
    }
}

/// Returns `samples` with a refined mask for every annotated class. Samples without
/// boxes pass through untouched. Refusing the evaluation split is part of the contract.
pub fn self_refine(
    samples: &[Sample],
    split: Split,
    sr_model: &Model,
    flags: ArchFlags,
    bin_threshold: f64,
) -> Result<Vec<Sample>> {
    if split == Split::Eval {
        return Err(Error::Config("self-refinement must never run on the evaluation split".into()));
    }
    let annotated: Vec<Sample> = samples.iter().filter(|s| s.has_boxes()).cloned().collect();
    let predictions = predict_samples(sr_model, flags, &annotated)?;
    let mut refined = predictions.into_iter().zip(annotated).map(|(p, mut s)| {
        let mut out = Vec::new();
        for k in s.labels.positive_classes() {
            let Some(box_mask) = s.box_mask(k) else { continue };
            let regions = attention_to_regions(&p.attention.class_map(k), k, bin_threshold, DEFAULT_MIN_AREA)?;
            out.push(refine_mask(&box_mask, &regions.mask));
        }
        s.refined = out;
        Ok(s)
    });
    samples
        .iter()
        .map(|s| if s.has_boxes() { refined.next().expect("one per annotated sample") } else { Ok(s.clone()) })
        .collect()
}

/// Panics if any evaluation id also appears in the training set.
pub fn assert_disjoint(train: &[Sample], eval: &[Sample]) {
    let ids: HashSet<&str> = train.iter().map(|s| s.id.as_str()).collect();
    for s in eval {
        assert!(!ids.contains(s.id.as_str()), "sample {} is in both splits", s.id);
    }
}
