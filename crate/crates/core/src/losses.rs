//! Training objectives: BCE for both heads, attention bound, attention union,
//! attention-adaptive MSE, and their weighted sum.
//!
//! Batch terms are per-sample losses averaged over the batch; samples with no
//! positive class (or, for AMSE, no usable mask) contribute zero.

use serde::{Deserialize, Serialize};

use crate::data::{BinaryMask, LabelSet};
use crate::error::{Error, Result};
use crate::model::heads::{self, AttentionMap, AttentionStage, HeadOutputs, HeadVars};
use crate::numerics::{Tape, Tensor, Var};

/// Added to every ratio denominator.
pub const DENOM_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub z: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            z: 0.5,
            lambda1: 0.01,
            lambda2: 0.001,
            lambda3: 0.001,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("z", self.z),
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
            ("lambda3", self.lambda3),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("loss weight {name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_ab: f64,
    pub l_pn: f64,
    pub l_bound: f64,
    pub l_union: f64,
    pub l_amse: f64,
    pub total: f64,
    pub n_positive_classes: usize,
}

impl LossBreakdown {
    /// `l_ab + z l_amse + λ1 l_pn + λ2 l_bound + λ3 l_union`, skipping zero-weight terms.
    pub fn recompose(&self, w: &LossWeights) -> f64 {
        let mut t = self.l_ab;
        for (weight, term) in [
            (w.z, self.l_amse),
            (w.lambda1, self.l_pn),
            (w.lambda2, self.l_bound),
            (w.lambda3, self.l_union),
        ] {
            if weight != 0.0 {
                t += weight * term;
            }
        }
        t
    }
}

fn check_maps(tape: &Tape, m_p: Var, m_a: Var, labels: &[LabelSet]) -> Result<(usize, usize, usize, usize)> {
    let sa = tape.value(m_a).shape();
    let sp = tape.value(m_p).shape();
    if sa.len() != 4 || sp.len() != 4 || sp[1] != 1 || sp[0] != sa[0] || sp[2..] != sa[2..] {
        return Err(Error::Shape(format!("positive map {sp:?} incompatible with abnormality maps {sa:?}")));
    }
    if labels.len() != sa[0] || labels.iter().any(|l| l.len() != sa[1]) {
        return Err(Error::Shape("label sets do not match attention batch/classes".into()));
    }
    Ok((sa[0], sa[1], sa[2], sa[3]))
}

fn label_mask(labels: &[LabelSet], d: usize, h: usize, w: usize) -> Tensor {
    let plane = h * w;
    let mut data = Vec::with_capacity(labels.len() * d * plane);
    for l in labels {
        for k in 0..d {
            let v = if l.get(k) { 1.0 } else { 0.0 };
            data.extend(std::iter::repeat(v).take(plane));
        }
    }
    Tensor::new(&[labels.len(), d, h, w], data).expect("label mask shape")
}

/// `Σ coeff ⊙ (1 − ratio)`.
fn weighted_complement(tape: &mut Tape, ratio: Var, coeff: Tensor) -> Result<Var> {
    let neg = tape.scale(ratio, -1.0);
    let one_minus = tape.add_scalar(neg, 1.0);
    let c = tape.constant(coeff);
    let weighted = tape.mul(one_minus, c)?;
    Ok(tape.sum_all(weighted))
}

/// Attention bound loss over a batch of normalized maps `m_p: [N,1,h,w]`, `m_a: [N,D,h,w]`.
pub fn bound_loss(
    tape: &mut Tape,
    m_p: Var,
    m_a: Var,
    labels: &[LabelSet],
    alpha: f64,
    beta: f64,
) -> Result<Var> {
    let (n, d, _, _) = check_maps(tape, m_p, m_a, labels)?;
    let p = tape.expand_channels(m_p, d)?;
    let overlap = tape.minimum(p, m_a)?;
    let t = heads::soft_mask(tape, m_a, alpha, beta);
    let masked = tape.mul(overlap, t)?;
    let num = tape.sum_spatial(masked)?;
    let den = tape.sum_spatial(m_a)?;
    let den = tape.add_scalar(den, DENOM_EPS);
    let ratio = tape.div(num, den)?;
    let mut coeff = vec![0.0; n * d];
    for (i, l) in labels.iter().enumerate() {
        let count = l.count();
        for k in l.positive_classes() {
            coeff[i * d + k] = 1.0 / (count as f64 * n as f64);
        }
    }
    weighted_complement(tape, ratio, Tensor::new(&[n, d], coeff)?)
}

/// `M^u[n] = max_k M^{a_k}[n] · y_k` → `[N,1,h,w]`.
pub fn union_map(tape: &mut Tape, m_a: Var, labels: &[LabelSet]) -> Result<Var> {
    let s = tape.value(m_a).shape().to_vec();
    if s.len() != 4 || labels.len() != s[0] || labels.iter().any(|l| l.len() != s[1]) {
        return Err(Error::Shape("label sets do not match attention batch/classes".into()));
    }
    let y = tape.constant(label_mask(labels, s[1], s[2], s[3]));
    let masked = tape.mul(m_a, y)?;
    tape.max_channels(masked)
}

/// Attention union loss over a batch.
pub fn union_loss(
    tape: &mut Tape,
    m_p: Var,
    m_a: Var,
    labels: &[LabelSet],
    alpha: f64,
    beta: f64,
) -> Result<Var> {
    let (n, _, _, _) = check_maps(tape, m_p, m_a, labels)?;
    let mu = union_map(tape, m_a, labels)?;
    let overlap = tape.minimum(m_p, mu)?;
    let t = heads::soft_mask(tape, m_p, alpha, beta);
    let masked = tape.mul(overlap, t)?;
    let num = tape.sum_spatial(masked)?;
    let den = tape.sum_spatial(m_p)?;
    let den = tape.add_scalar(den, DENOM_EPS);
    let ratio = tape.div(num, den)?;
    let coeff = labels
        .iter()
        .map(|l| if l.positive() { 1.0 / n as f64 } else { 0.0 })
        .collect();
    weighted_complement(tape, ratio, Tensor::new(&[n, 1], coeff)?)
}

/// Ground-truth masks for a batch: `masks[n][k]` is the mask of class `k` in sample `n`, if any.
pub type BatchMasks = [Vec<Option<BinaryMask>>];

/// AMSE on soft-masked maps already at image resolution, `soft: [N,D,H,W]`.
/// A class participates iff it is labeled positive and has a mask.
pub fn amse_loss_soft(tape: &mut Tape, soft: Var, masks: &BatchMasks, labels: &[LabelSet]) -> Result<Var> {
    let s = tape.value(soft).shape().to_vec();
    let (n, d, h, w) = match s[..] {
        [n, d, h, w] => (n, d, h, w),
        _ => return Err(Error::Shape(format!("AMSE maps must be [N,D,H,W], got {s:?}"))),
    };
    if masks.len() != n || labels.len() != n || masks.iter().any(|m| m.len() != d) {
        return Err(Error::Shape("masks/labels do not match the AMSE batch".into()));
    }
    let plane = h * w;
    let mut g = vec![0.0; n * d * plane];
    let mut g_sum = vec![DENOM_EPS; n * d];
    let mut coeff = vec![0.0; n * d];
    for i in 0..n {
        let participating: Vec<usize> = (0..d)
            .filter(|&k| labels[i].get(k) && masks[i][k].is_some())
            .collect();
        for &k in &participating {
            let m = masks[i][k].as_ref().expect("filtered");
            if (m.region.height(), m.region.width()) != (h, w) {
                return Err(Error::Shape(format!(
                    "mask resolution {}x{} differs from attention {h}x{w}",
                    m.region.height(),
                    m.region.width()
                )));
            }
            let dst = &mut g[(i * d + k) * plane..][..plane];
            for (v, &on) in dst.iter_mut().zip(m.region.pixels()) {
                *v = if on { 1.0 } else { 0.0 };
            }
            g_sum[i * d + k] += m.sum() as f64;
            coeff[i * d + k] = 1.0 / (participating.len() as f64 * n as f64);
        }
    }
    let gt = tape.constant(Tensor::new(&[n, d, h, w], g)?);
    let diff = tape.sub(soft, gt)?;
    let sq = tape.mul(diff, diff)?;
    let num = tape.sum_spatial(sq)?;
    let t_sum = tape.sum_spatial(soft)?;
    let g_sum = tape.constant(Tensor::new(&[n, d], g_sum)?);
    let den = tape.add(t_sum, g_sum)?;
    let ratio = tape.div(num, den)?;
    let c = tape.constant(Tensor::new(&[n, d], coeff)?);
    let weighted = tape.mul(ratio, c)?;
    Ok(tape.sum_all(weighted))
}

/// AMSE from normalized feature-resolution maps: soft mask, then bilinear resize to the image.
pub fn amse_loss(
    tape: &mut Tape,
    m_a: Var,
    masks: &BatchMasks,
    labels: &[LabelSet],
    image_size: (usize, usize),
    alpha: f64,
    beta: f64,
) -> Result<Var> {
    let t = heads::soft_mask(tape, m_a, alpha, beta);
    let up = tape.upsample(t, image_size.0, image_size.1)?;
    amse_loss_soft(tape, up, masks, labels)
}

/// Which terms of the objective are active. A disabled term still gets computed for logging
/// but is left out of the total, exactly as a zero weight would be.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LossGates {
    pub use_positive_head: bool,
    pub use_bound: bool,
    pub use_union: bool,
    pub use_amse: bool,
}

impl Default for LossGates {
    fn default() -> Self {
        Self {
            use_positive_head: true,
            use_bound: true,
            use_union: true,
            use_amse: true,
        }
    }
}

impl LossGates {
    pub fn effective(&self, w: &LossWeights) -> LossWeights {
        LossWeights {
            z: if self.use_amse { w.z } else { 0.0 },
            lambda1: if self.use_positive_head { w.lambda1 } else { 0.0 },
            lambda2: if self.use_bound && self.use_positive_head { w.lambda2 } else { 0.0 },
            lambda3: if self.use_union && self.use_positive_head { w.lambda3 } else { 0.0 },
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub l_ab: Var,
    pub l_pn: Var,
    pub l_bound: Var,
    pub l_union: Var,
    pub l_amse: Var,
    pub total: Var,
}

impl LossVars {
    pub fn breakdown(&self, tape: &Tape, labels: &[LabelSet]) -> LossBreakdown {
        LossBreakdown {
            l_ab: tape.value(self.l_ab).item(),
            l_pn: tape.value(self.l_pn).item(),
            l_bound: tape.value(self.l_bound).item(),
            l_union: tape.value(self.l_union).item(),
            l_amse: tape.value(self.l_amse).item(),
            total: tape.value(self.total).item(),
            n_positive_classes: labels.iter().map(LabelSet::count).sum(),
        }
    }
}

/// Records the weighted objective for a batch. `weights` should already have gates applied.
pub fn total_loss_vars(
    tape: &mut Tape,
    heads: &HeadVars,
    labels: &[LabelSet],
    masks: &BatchMasks,
    weights: &LossWeights,
    image_size: (usize, usize),
) -> Result<LossVars> {
    weights.validate()?;
    let n = labels.len();
    let d = tape.value(heads.ab_logits).shape()[1];
    let ab_targets = Tensor::new(
        &[n, d],
        labels.iter().flat_map(|l| l.values().iter().map(|&v| v as f64)).collect(),
    )?;
    let pn_targets = Tensor::new(
        &[n, 1],
        labels.iter().map(|l| if l.positive() { 1.0 } else { 0.0 }).collect(),
    )?;
    let (alpha, beta) = (heads::SOFT_MASK_ALPHA, heads::SOFT_MASK_BETA);
    let l_ab = tape.bce_with_logits(heads.ab_logits, &ab_targets)?;
    let l_pn = tape.bce_with_logits(heads.pos_logit, &pn_targets)?;
    let l_bound = bound_loss(tape, heads.pos_norm, heads.ab_norm, labels, alpha, beta)?;
    let l_union = union_loss(tape, heads.pos_norm, heads.ab_norm, labels, alpha, beta)?;
    let l_amse = amse_loss(tape, heads.ab_norm, masks, labels, image_size, alpha, beta)?;
    let mut total = l_ab;
    for (weight, term) in [
        (weights.z, l_amse),
        (weights.lambda1, l_pn),
        (weights.lambda2, l_bound),
        (weights.lambda3, l_union),
    ] {
        if weight != 0.0 {
            let scaled = tape.scale(term, weight);
            total = tape.add(total, scaled)?;
        }
    }
    Ok(LossVars {
        l_ab,
        l_pn,
        l_bound,
        l_union,
        l_amse,
        total,
    })
}

// Single-image value versions.

fn expect_normalized_pair(m_p: &AttentionMap, m_a: &AttentionMap) -> Result<()> {
    m_p.expect_stage(AttentionStage::Normalized)?;
    m_a.expect_stage(AttentionStage::Normalized)?;
    if m_p.class_count() != 1 {
        return Err(Error::Shape("positive attention must have one class".into()));
    }
    if m_p.spatial() != m_a.spatial() {
        return Err(Error::Shape("positive and abnormality maps differ in extent".into()));
    }
    Ok(())
}

fn batched(m: &AttentionMap) -> Tensor {
    let s = m.maps().shape();
    m.maps().clone().reshape(&[1, s[0], s[1], s[2]]).expect("reshape")
}

pub fn attention_bound_loss(m_p: &AttentionMap, m_a: &AttentionMap, labels: &LabelSet) -> Result<f64> {
    expect_normalized_pair(m_p, m_a)?;
    let mut t = Tape::new();
    let p = t.constant(batched(m_p));
    let a = t.constant(batched(m_a));
    let l = bound_loss(&mut t, p, a, std::slice::from_ref(labels), heads::SOFT_MASK_ALPHA, heads::SOFT_MASK_BETA)?;
    Ok(t.value(l).item())
}

/// `[H,W]` union of positively labeled abnormality maps.
pub fn attention_union_map(m_a: &AttentionMap, labels: &LabelSet) -> Result<Tensor> {
    m_a.expect_stage(AttentionStage::Normalized)?;
    let mut t = Tape::new();
    let a = t.constant(batched(m_a));
    let u = union_map(&mut t, a, std::slice::from_ref(labels))?;
    let (h, w) = m_a.spatial();
    t.value(u).clone().reshape(&[h, w])
}

pub fn attention_union_loss(m_p: &AttentionMap, m_a: &AttentionMap, labels: &LabelSet) -> Result<f64> {
    expect_normalized_pair(m_p, m_a)?;
    let mut t = Tape::new();
    let p = t.constant(batched(m_p));
    let a = t.constant(batched(m_a));
    let l = union_loss(&mut t, p, a, std::slice::from_ref(labels), heads::SOFT_MASK_ALPHA, heads::SOFT_MASK_BETA)?;
    Ok(t.value(l).item())
}

/// AMSE for one image from soft-masked maps at image resolution.
pub fn attention_amse_loss(soft: &AttentionMap, masks: &[BinaryMask], labels: &LabelSet) -> Result<f64> {
    soft.expect_stage(AttentionStage::SoftMasked)?;
    if !soft.at_image_resolution() {
        return Err(Error::Shape(format!(
            "AMSE needs maps at image resolution {:?}, got {:?}",
            soft.image_size(),
            soft.spatial()
        )));
    }
    let mut per_class = vec![None; soft.class_count()];
    for m in masks {
        if m.class_id >= per_class.len() {
            return Err(Error::Shape(format!("mask class {} out of range", m.class_id)));
        }
        per_class[m.class_id] = Some(m.clone());
    }
    let mut t = Tape::new();
    let s = t.constant(batched(soft));
    let l = amse_loss_soft(&mut t, s, &[per_class], std::slice::from_ref(labels))?;
    Ok(t.value(l).item())
}

/// Objective terms for a single image's head outputs (no gradients).
pub fn total_loss(
    outputs: &HeadOutputs,
    labels: &LabelSet,
    masks: Option<&[BinaryMask]>,
    weights: &LossWeights,
) -> Result<LossBreakdown> {
    let mut t = Tape::new();
    let pos_logit = t.constant(Tensor::new(&[1, 1], vec![outputs.pos_logit])?);
    let d = outputs.abnormality_logits.len();
    let ab_logits = t.constant(outputs.abnormality_logits.clone().reshape(&[1, d])?);
    let pos_norm = t.constant(batched(&outputs.positive_attention));
    let ab_norm = t.constant(batched(&outputs.abnormality_attention));
    let hv = HeadVars {
        pos_logit,
        ab_logits,
        pos_raw: pos_norm,
        pos_norm,
        ab_raw: ab_norm,
        ab_norm,
    };
    let mut per_class = vec![None; d];
    for m in masks.unwrap_or(&[]) {
        if m.class_id < d {
            per_class[m.class_id] = Some(m.clone());
        }
    }
    let mut w = *weights;
    if masks.map_or(true, <[BinaryMask]>::is_empty) {
        w.z = 0.0;
    }
    let vars = total_loss_vars(
        &mut t,
        &hv,
        std::slice::from_ref(labels),
        &[per_class],
        &w,
        outputs.abnormality_attention.image_size(),
    )?;
    Ok(vars.breakdown(&t, std::slice::from_ref(labels)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{mask_from_boxes, BoxAnnotation};

    fn map(values: Vec<f64>, k: usize, h: usize, w: usize) -> AttentionMap {
        AttentionMap::new(
            Tensor::new(&[k, h, w], values).unwrap(),
            AttentionStage::Normalized,
            (h, w),
            (h * 8, w * 8),
        )
        .unwrap()
    }

    fn binary_block(k: usize) -> AttentionMap {
        let mut v = vec![0.0; k * 16];
        for c in 0..k {
            for p in [5, 6, 9, 10] {
                v[c * 16 + p] = 1.0;
            }
        }
        map(v, k, 4, 4)
    }

    #[test]
    fn bound_satisfied_when_positive_covers_everything() {
        let l = attention_bound_loss(&map(vec![1.0; 16], 1, 4, 4), &binary_block(2), &LabelSet::from_classes(2, &[0, 1])).unwrap();
        assert!(l < 1e-3, "{l}");
    }

    #[test]
    fn bound_violated_when_positive_is_empty() {
        let l = attention_bound_loss(&map(vec![0.0; 16], 1, 4, 4), &binary_block(2), &LabelSet::from_classes(2, &[1])).unwrap();
        assert!((l - 1.0).abs() < 1e-9, "{l}");
    }

    #[test]
    fn bound_is_zero_without_positive_labels() {
        let l = attention_bound_loss(&map(vec![0.0; 16], 1, 4, 4), &binary_block(2), &LabelSet::negative(2)).unwrap();
        assert_eq!(l, 0.0);
    }

    #[test]
    fn vanished_attention_costs_one() {
        let l = attention_bound_loss(&map(vec![1.0; 16], 1, 4, 4), &map(vec![0.0; 16], 1, 4, 4), &LabelSet::from_classes(1, &[0])).unwrap();
        assert!((l - 1.0).abs() < 1e-12);
    }

    #[test]
    fn stage_mismatch_is_rejected() {
        let raw = AttentionMap::new(Tensor::ones(&[1, 4, 4]), AttentionStage::Raw, (4, 4), (32, 32)).unwrap();
        assert!(matches!(
            attention_bound_loss(&raw, &binary_block(1), &LabelSet::from_classes(1, &[0])),
            Err(Error::Stage { .. })
        ));
        assert!(attention_union_loss(&raw, &binary_block(1), &LabelSet::from_classes(1, &[0])).is_err());
    }

    #[test]
    fn union_map_cases() {
        let a = map((0..32).map(|i| (i % 7) as f64 / 6.0).collect(), 2, 4, 4);
        let u = attention_union_map(&a, &LabelSet::from_classes(2, &[1])).unwrap();
        assert_eq!(u.data(), a.class_map(1).data());
        let z = attention_union_map(&a, &LabelSet::negative(2)).unwrap();
        assert!(z.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn union_loss_extremes() {
        let b = binary_block(1);
        let l = attention_union_loss(&b, &b, &LabelSet::from_classes(1, &[0])).unwrap();
        assert!(l < 1e-3, "{l}");
        let empty = map(vec![0.0; 16], 1, 4, 4);
        let l = attention_union_loss(&b, &empty, &LabelSet::from_classes(1, &[0])).unwrap();
        assert!((l - 1.0).abs() < 1e-9);
    }

    fn soft(values: Vec<f64>, k: usize, h: usize, w: usize) -> AttentionMap {
        AttentionMap::new(Tensor::new(&[k, h, w], values).unwrap(), AttentionStage::SoftMasked, (h / 8, w / 8), (h, w)).unwrap()
    }

    #[test]
    fn amse_extremes() {
        let b = BoxAnnotation { class_id: 0, x: 2, y: 3, w: 5, h: 4 };
        let g = mask_from_boxes(&[b], 0, (16, 16));
        let exact = soft(g.region.to_tensor().into_data(), 1, 16, 16);
        let labels = LabelSet::from_classes(1, &[0]);
        assert_eq!(attention_amse_loss(&exact, &[g.clone()], &labels).unwrap(), 0.0);
        let zero = soft(vec![0.0; 256], 1, 16, 16);
        let l = attention_amse_loss(&zero, &[g.clone()], &labels).unwrap();
        assert!((l - 1.0).abs() < 1e-9);
        // no mask → no participation
        assert_eq!(attention_amse_loss(&zero, &[], &labels).unwrap(), 0.0);
    }

    #[test]
    fn amse_rejects_feature_resolution() {
        let m = AttentionMap::new(Tensor::zeros(&[1, 2, 2]), AttentionStage::SoftMasked, (2, 2), (16, 16)).unwrap();
        assert!(attention_amse_loss(&m, &[], &LabelSet::from_classes(1, &[0])).is_err());
    }

    #[test]
    fn gates_zero_dependent_weights() {
        let g = LossGates {
            use_positive_head: false,
            ..LossGates::default()
        };
        let w = g.effective(&LossWeights::default());
        assert_eq!((w.lambda1, w.lambda2, w.lambda3), (0.0, 0.0, 0.0));
        assert_eq!(w.z, 0.5);
    }
}
