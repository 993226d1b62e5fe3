//! Localization and classification metrics: attention binarization, IoU/IoR,
//! per-class correct ratios, rank AUC, and report/heatmap output.

pub mod regions;

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use regions::{attention_to_regions, connected_components, Connectivity, ExtractedRegions, DEFAULT_MIN_AREA};

use crate::data::{Region, Sample, CLASS_NAMES};
use crate::error::{Error, Result};
use crate::model::heads::{self, AttentionMap, AttentionStage, HeatmapSidecar};
use crate::model::{ArchFlags, Model};
use crate::numerics::Tensor;

pub const DEFAULT_BIN_THRESHOLD: f64 = 0.999;

pub fn iou(a: &Region, b: &Region) -> f64 {
    let union = a.union_area(b);
    if union == 0 {
        return 0.0;
    }
    a.intersection_area(b) as f64 / union as f64
}

/// Intersection over the predicted region; 0 when the prediction is empty.
pub fn ior(pred: &Region, gt: &Region) -> f64 {
    let area = pred.area();
    if area == 0 {
        return 0.0;
    }
    pred.intersection_area(gt) as f64 / area as f64
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum CriterionKind {
    #[serde(rename = "iou")]
    IoU,
    #[serde(rename = "ior")]
    IoR,
}

impl CriterionKind {
    pub fn name(self) -> &'static str {
        match self {
            CriterionKind::IoU => "iou",
            CriterionKind::IoR => "ior",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LocalizationCriterion {
    pub kind: CriterionKind,
    pub threshold: f64,
}

impl LocalizationCriterion {
    pub fn new(kind: CriterionKind, threshold: f64) -> Result<Self> {
        if !(threshold > 0.0 && threshold <= 1.0) {
            return Err(Error::Config(format!("criterion threshold {threshold} outside (0,1]")));
        }
        Ok(Self { kind, threshold })
    }

    pub fn iou(threshold: f64) -> Result<Self> {
        Self::new(CriterionKind::IoU, threshold)
    }

    pub fn ior(threshold: f64) -> Result<Self> {
        Self::new(CriterionKind::IoR, threshold)
    }

    pub fn metric(&self, pred: &Region, gt: &Region) -> f64 {
        match self.kind {
            CriterionKind::IoU => iou(pred, gt),
            CriterionKind::IoR => ior(pred, gt),
        }
    }

    /// Strictly greater than the threshold.
    pub fn is_correct(&self, pred: &Region, gt: &Region) -> bool {
        self.metric(pred, gt) > self.threshold
    }
}

/// One (image, class) case: union of predicted regions vs union of that class's boxes.
#[derive(Clone, Debug, PartialEq)]
pub struct LocalizationCase {
    pub sample_id: String,
    pub class_id: usize,
    pub predicted: Region,
    pub truth: Region,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassRatio {
    pub n_cases: usize,
    pub n_correct: usize,
    pub ratio: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorrectRatioReport {
    pub criterion: LocalizationCriterion,
    pub attention_threshold: f64,
    pub classes: Vec<ClassRatio>,
    /// Unweighted mean over classes with at least one case.
    pub mean: Option<f64>,
}

pub fn correct_ratio(
    cases: &[LocalizationCase],
    num_classes: usize,
    criterion: LocalizationCriterion,
    bin_threshold: f64,
) -> Result<CorrectRatioReport> {
    let mut classes = vec![
        ClassRatio {
            n_cases: 0,
            n_correct: 0,
            ratio: None,
        };
        num_classes
    ];
    for c in cases {
        let slot = classes
            .get_mut(c.class_id)
            .ok_or_else(|| Error::Shape(format!("case class {} >= {num_classes}", c.class_id)))?;
        slot.n_cases += 1;
        if criterion.is_correct(&c.predicted, &c.truth) {
            slot.n_correct += 1;
        }
    }
    for c in &mut classes {
        if c.n_cases > 0 {
            c.ratio = Some(c.n_correct as f64 / c.n_cases as f64);
        }
    }
    let defined: Vec<f64> = classes.iter().filter_map(|c| c.ratio).collect();
    let mean = (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64);
    Ok(CorrectRatioReport {
        criterion,
        attention_threshold: bin_threshold,
        classes,
        mean,
    })
}

/// Mann-Whitney AUC: `P(s⁺ > s⁻) + ½ P(s⁺ = s⁻)`.
pub fn auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Shape(format!("{} scores for {} labels", scores.len(), labels.len())));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Undefined("AUC of NaN scores".into()));
    }
    let n_pos = labels.iter().filter(|&&l| l == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::Undefined("AUC needs both positive and negative labels".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut wins = 0.0;
    let mut neg_below = 0usize;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        let (mut pos, mut neg) = (0usize, 0usize);
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            if labels[order[j]] == 1 {
                pos += 1;
            } else {
                neg += 1;
            }
            j += 1;
        }
        wins += (pos * neg_below) as f64 + 0.5 * (pos * neg) as f64;
        neg_below += neg;
        i = j;
    }
    Ok(wins / (n_pos * n_neg) as f64)
}

pub fn class_name(k: usize) -> String {
    CLASS_NAMES.get(k).map_or_else(|| format!("class{k}"), |s| s.to_string())
}

/// Model output for one image: class probabilities and abnormality attention,
/// normalized, resized to the image, then soft-masked.
#[derive(Clone, Debug)]
pub struct Prediction {
    pub sample_id: String,
    pub probabilities: Vec<f64>,
    pub attention: AttentionMap,
}

pub const PREDICT_BATCH: usize = 32;

pub fn predict_samples(model: &Model, flags: ArchFlags, samples: &[Sample]) -> Result<Vec<Prediction>> {
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(PREDICT_BATCH) {
        let images: Vec<Tensor> = chunk.iter().map(|s| s.image.clone()).collect();
        let batch = Tensor::stack(&images)?;
        for (s, h) in chunk.iter().zip(model.predict(&batch, flags)?) {
            let attention = h
                .abnormality_attention
                .upsample_to_image()?
                .soft_mask(heads::SOFT_MASK_ALPHA, heads::SOFT_MASK_BETA)?;
            out.push(Prediction {
                sample_id: s.id.clone(),
                probabilities: h.abnormality_probabilities(),
                attention,
            });
        }
    }
    Ok(out)
}

/// Cases for every positively labeled class that has ground-truth boxes.
pub fn localization_cases(
    predictions: &[Prediction],
    samples: &[Sample],
    bin_threshold: f64,
    min_area: usize,
) -> Result<Vec<LocalizationCase>> {
    if predictions.len() != samples.len() {
        return Err(Error::Shape("predictions and samples differ in length".into()));
    }
    let mut cases = Vec::new();
    for (p, s) in predictions.iter().zip(samples) {
        if !p.attention.at_image_resolution() || p.attention.spatial() != s.image_size() {
            return Err(Error::Shape(format!("{}: attention not at image resolution", s.id)));
        }
        for k in s.labels.positive_classes() {
            let Some(truth) = s.box_mask(k) else { continue };
            let regions = attention_to_regions(&p.attention.class_map(k), k, bin_threshold, min_area)?;
            cases.push(LocalizationCase {
                sample_id: s.id.clone(),
                class_id: k,
                predicted: regions.mask,
                truth: truth.region,
            });
        }
    }
    Ok(cases)
}

/// Cases whose predictions are the ground-truth masks themselves.
pub fn bypass_cases(samples: &[Sample]) -> Vec<LocalizationCase> {
    let mut cases = Vec::new();
    for s in samples {
        for k in s.labels.positive_classes() {
            if let Some(m) = s.box_mask(k) {
                cases.push(LocalizationCase {
                    sample_id: s.id.clone(),
                    class_id: k,
                    predicted: m.region.clone(),
                    truth: m.region,
                });
            }
        }
    }
    cases
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub num_images: usize,
    pub bin_threshold: f64,
    pub localization: Vec<CorrectRatioReport>,
    /// Per-class AUC; `None` when the class has only one label value.
    pub auc: Vec<Option<f64>>,
    pub mean_auc: Option<f64>,
}

impl EvalReport {
    pub fn from_cases(
        cases: &[LocalizationCase],
        predictions: Option<&[Prediction]>,
        samples: &[Sample],
        num_classes: usize,
        criteria: &[LocalizationCriterion],
        bin_threshold: f64,
    ) -> Result<Self> {
        let localization = criteria
            .iter()
            .map(|&c| correct_ratio(cases, num_classes, c, bin_threshold))
            .collect::<Result<Vec<_>>>()?;
        let auc: Vec<Option<f64>> = match predictions {
            Some(preds) => (0..num_classes)
                .map(|k| {
                    let scores: Vec<f64> = preds.iter().map(|p| p.probabilities[k]).collect();
                    let labels: Vec<u8> = samples.iter().map(|s| s.labels.values()[k]).collect();
                    auc(&scores, &labels).ok()
                })
                .collect(),
            None => vec![None; num_classes],
        };
        let defined: Vec<f64> = auc.iter().flatten().copied().collect();
        let mean_auc = (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64);
        Ok(Self {
            num_images: samples.len(),
            bin_threshold,
            localization,
            auc,
            mean_auc,
        })
    }

    pub fn report_for(&self, kind: CriterionKind, threshold: f64) -> Option<&CorrectRatioReport> {
        self.localization
            .iter()
            .find(|r| r.criterion.kind == kind && r.criterion.threshold == threshold)
    }

    /// `class,criterion,threshold,n_cases,n_correct,ratio` rows, a `mean` row per
    /// criterion, then one `auc` row per class and a mean.
    pub fn to_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map_or_else(String::new, |v| v.to_string());
        let mut s = String::from("class,criterion,threshold,n_cases,n_correct,ratio\n");
        for r in &self.localization {
            let (kind, t) = (r.criterion.kind.name(), r.criterion.threshold);
            for (k, c) in r.classes.iter().enumerate() {
                let _ = writeln!(s, "{},{kind},{t},{},{},{}", class_name(k), c.n_cases, c.n_correct, opt(c.ratio));
            }
            let n: usize = r.classes.iter().map(|c| c.n_cases).sum();
            let ok: usize = r.classes.iter().map(|c| c.n_correct).sum();
            let _ = writeln!(s, "mean,{kind},{t},{n},{ok},{}", opt(r.mean));
        }
        for (k, a) in self.auc.iter().enumerate() {
            let _ = writeln!(s, "{},auc,,{},,{}", class_name(k), self.num_images, opt(*a));
        }
        let _ = writeln!(s, "mean,auc,,{},,{}", self.num_images, opt(self.mean_auc));
        s
    }
}

/// Writes one PGM per (image, class) plus a JSON sidecar naming the class and thresholds.
pub fn dump_heatmaps(dir: &Path, predictions: &[Prediction], bin_threshold: f64) -> Result<()> {
    fs::create_dir_all(dir)?;
    for p in predictions {
        for k in 0..p.attention.class_count() {
            let stem = format!("{}_{}", p.sample_id, class_name(k));
            heads::write_pgm(&dir.join(format!("{stem}.pgm")), &p.attention.class_map(k))?;
            let sidecar = HeatmapSidecar {
                class_name: class_name(k),
                stage: p.attention.stage(),
                thresholds: vec![bin_threshold],
            };
            fs::write(dir.join(format!("{stem}.json")), serde_json::to_vec_pretty(&sidecar)?)?;
        }
    }
    Ok(())
}

/// Runs the model over `samples` and scores localization and classification.
pub fn evaluate(
    model: &Model,
    flags: ArchFlags,
    samples: &[Sample],
    criteria: &[LocalizationCriterion],
    bin_threshold: f64,
    heatmap_dir: Option<&Path>,
) -> Result<EvalReport> {
    let d = model.config.num_classes;
    if let Some(s) = samples.iter().find(|s| s.labels.len() != d) {
        return Err(Error::Shape(format!(
            "{}: manifest has {} classes, checkpoint has {d}",
            s.id,
            s.labels.len()
        )));
    }
    let predictions = predict_samples(model, flags, samples)?;
    debug_assert!(predictions.iter().all(|p| p.attention.stage() == AttentionStage::SoftMasked));
    if let Some(dir) = heatmap_dir {
        dump_heatmaps(dir, &predictions, bin_threshold)?;
    }
    let cases = localization_cases(&predictions, samples, bin_threshold, DEFAULT_MIN_AREA)?;
    EvalReport::from_cases(&cases, Some(&predictions), samples, d, criteria, bin_threshold)
}
