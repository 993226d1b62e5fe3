//! Two-level classification heads and their online class activation maps.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor, Var};

pub const SOFT_MASK_ALPHA: f64 = 100.0;
pub const SOFT_MASK_BETA: f64 = 0.4;
pub const LSE_SHARPNESS: f64 = 6.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionStage {
    Raw,
    Normalized,
    SoftMasked,
}

impl AttentionStage {
    pub fn name(self) -> &'static str {
        match self {
            AttentionStage::Raw => "raw",
            AttentionStage::Normalized => "normalized",
            AttentionStage::SoftMasked => "soft_masked",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    #[default]
    Lse,
    Gap,
}

/// Per-class spatial attention for one image.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMap {
    maps: Tensor,
    stage: AttentionStage,
    feature_size: (usize, usize),
    image_size: (usize, usize),
}

impl AttentionMap {
    /// `maps` is `[K,H,W]` at either feature or image resolution.
    pub fn new(
        maps: Tensor,
        stage: AttentionStage,
        feature_size: (usize, usize),
        image_size: (usize, usize),
    ) -> Result<Self> {
        if maps.rank() != 3 {
            return Err(Error::Shape(format!("attention maps must be [K,H,W], got {:?}", maps.shape())));
        }
        let ok = match stage {
            AttentionStage::Raw => maps.data().iter().all(|&v| v >= 0.0 && v.is_finite()),
            _ => maps.data().iter().all(|&v| (0.0..=1.0).contains(&v)),
        };
        if !ok {
            return Err(Error::Shape(format!("values out of range for {} attention", stage.name())));
        }
        Ok(Self {
            maps,
            stage,
            feature_size,
            image_size,
        })
    }

    pub fn maps(&self) -> &Tensor {
        &self.maps
    }

    pub fn stage(&self) -> AttentionStage {
        self.stage
    }

    pub fn class_count(&self) -> usize {
        self.maps.shape()[0]
    }

    pub fn spatial(&self) -> (usize, usize) {
        (self.maps.shape()[1], self.maps.shape()[2])
    }

    pub fn feature_size(&self) -> (usize, usize) {
        self.feature_size
    }

    pub fn image_size(&self) -> (usize, usize) {
        self.image_size
    }

    pub fn at_image_resolution(&self) -> bool {
        self.spatial() == self.image_size
    }

    /// `[H,W]` plane of class `k`.
    pub fn class_map(&self, k: usize) -> Tensor {
        self.maps.index_first(k)
    }

    pub fn expect_stage(&self, stage: AttentionStage) -> Result<()> {
        if self.stage != stage {
            return Err(Error::Stage {
                expected: stage.name(),
                got: self.stage.name(),
            });
        }
        Ok(())
    }

    fn batched(&self) -> Tensor {
        let s = self.maps.shape();
        self.maps.clone().reshape(&[1, s[0], s[1], s[2]]).expect("reshape")
    }

    fn with(&self, batched: &Tensor, stage: AttentionStage) -> Result<Self> {
        let s = batched.shape();
        Self::new(
            batched.clone().reshape(&s[1..])?,
            stage,
            self.feature_size,
            self.image_size,
        )
    }

    /// Per-class min-max rescale to `[0,1]`; constant maps become zeros.
    pub fn normalize(&self) -> Result<Self> {
        self.expect_stage(AttentionStage::Raw)?;
        let mut tape = Tape::new();
        let x = tape.constant(self.batched());
        let y = normalize_map(&mut tape, x)?;
        self.with(tape.value(y), AttentionStage::Normalized)
    }

    pub fn soft_mask(&self, alpha: f64, beta: f64) -> Result<Self> {
        self.expect_stage(AttentionStage::Normalized)?;
        let mut tape = Tape::new();
        let x = tape.constant(self.batched());
        let y = soft_mask(&mut tape, x, alpha, beta);
        self.with(tape.value(y), AttentionStage::SoftMasked)
    }

    /// Bilinear resize to the image extents; the stage is unchanged.
    pub fn upsample_to_image(&self) -> Result<Self> {
        let up = crate::numerics::bilinear_upsample(&self.maps, self.image_size)?;
        // interpolation of values in [0,1] can round a hair outside
        let up = match self.stage {
            AttentionStage::Raw => up.map(|v| v.max(0.0)),
            _ => up.map(|v| v.clamp(0.0, 1.0)),
        };
        Self::new(up, self.stage, self.feature_size, self.image_size)
    }
}

/// `relu(conv1x1(f, w))` with `w: [K,C]` reused as the kernel.
pub fn online_cam(tape: &mut Tape, features: Var, weight: Var) -> Result<Var> {
    let ws = tape.value(weight).shape().to_vec();
    if ws.len() != 2 {
        return Err(Error::Shape(format!("CAM weight must be [K,C], got {ws:?}")));
    }
    let c = tape.value(features).shape().get(1).copied().unwrap_or(0);
    if ws[1] != c {
        return Err(Error::Shape(format!(
            "CAM weight expects {} channels, features have {c}",
            ws[1]
        )));
    }
    let k = tape.reshape(weight, &[ws[0], ws[1], 1, 1])?;
    let m = tape.conv2d(features, k, 1, 1, 0)?;
    Ok(tape.relu(m))
}

pub fn normalize_map(tape: &mut Tape, raw: Var) -> Result<Var> {
    tape.normalize_min_max(raw)
}

/// `1 / (1 + exp(-alpha (m - beta)))`.
pub fn soft_mask(tape: &mut Tape, m: Var, alpha: f64, beta: f64) -> Var {
    let shifted = tape.add_scalar(m, -beta);
    let scaled = tape.scale(shifted, alpha);
    tape.sigmoid(scaled)
}

/// Tape handles for both heads over a batch.
#[derive(Clone, Copy, Debug)]
pub struct HeadVars {
    /// `[N,1]`
    pub pos_logit: Var,
    /// `[N,D]`
    pub ab_logits: Var,
    /// `[N,1,h,w]`
    pub pos_raw: Var,
    pub pos_norm: Var,
    /// `[N,D,h,w]`
    pub ab_raw: Var,
    pub ab_norm: Var,
}

/// Both heads read the same `encoded` features; each FC weight is also its CAM kernel.
pub fn forward_heads(
    tape: &mut Tape,
    encoded: Var,
    w_pn: Var,
    w_ab: Var,
    pooling: Pooling,
    r: f64,
) -> Result<HeadVars> {
    let pooled = match pooling {
        Pooling::Lse => tape.lse_pool(encoded, r)?,
        Pooling::Gap => tape.mean_pool(encoded)?,
    };
    let pos_logit = tape.linear(pooled, w_pn)?;
    let ab_logits = tape.linear(pooled, w_ab)?;
    let pos_raw = online_cam(tape, encoded, w_pn)?;
    let pos_norm = normalize_map(tape, pos_raw)?;
    let ab_raw = online_cam(tape, encoded, w_ab)?;
    let ab_norm = normalize_map(tape, ab_raw)?;
    Ok(HeadVars {
        pos_logit,
        ab_logits,
        pos_raw,
        pos_norm,
        ab_raw,
        ab_norm,
    })
}

/// Head results for a single image.
#[derive(Clone, Debug)]
pub struct HeadOutputs {
    pub pos_logit: f64,
    pub abnormality_logits: Tensor,
    pub positive_attention: AttentionMap,
    pub abnormality_attention: AttentionMap,
}

impl HeadOutputs {
    /// Extracts sample `n` (normalized maps) from a batch.
    pub fn from_tape(tape: &Tape, heads: &HeadVars, n: usize, image_size: (usize, usize)) -> Result<Self> {
        let pn = tape.value(heads.pos_norm);
        let feature_size = (pn.shape()[2], pn.shape()[3]);
        Ok(Self {
            pos_logit: tape.value(heads.pos_logit).index_first(n).item(),
            abnormality_logits: tape.value(heads.ab_logits).index_first(n),
            positive_attention: AttentionMap::new(
                pn.index_first(n),
                AttentionStage::Normalized,
                feature_size,
                image_size,
            )?,
            abnormality_attention: AttentionMap::new(
                tape.value(heads.ab_norm).index_first(n),
                AttentionStage::Normalized,
                feature_size,
                image_size,
            )?,
        })
    }

    /// Sigmoid probabilities of the abnormality head.
    pub fn abnormality_probabilities(&self) -> Vec<f64> {
        self.abnormality_logits
            .data()
            .iter()
            .map(|&l| crate::numerics::kernels::sigmoid(l))
            .collect()
    }
}

/// Writes an `[H,W]` map in `[0,1]` as binary PGM (P5) with value `round(255 v)`.
pub fn write_pgm(path: &Path, map: &Tensor) -> Result<()> {
    let bytes = encode_pgm(map)?;
    let mut f = std::fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn encode_pgm(map: &Tensor) -> Result<Vec<u8>> {
    if map.rank() != 2 {
        return Err(Error::Shape(format!("PGM needs an [H,W] map, got {:?}", map.shape())));
    }
    let (h, w) = (map.shape()[0], map.shape()[1]);
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(map.data().iter().map(|&v| (255.0 * v.clamp(0.0, 1.0)).round() as u8));
    Ok(out)
}

/// Parses a binary PGM into an `[H,W]` map of `byte / 255`.
pub fn decode_pgm(bytes: &[u8]) -> Result<Tensor> {
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Format("truncated PGM header".into()));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    pos += 1;
    if fields[0] != "P5" {
        return Err(Error::Format(format!("not a binary PGM: {}", fields[0])));
    }
    let parse = |s: &str| s.parse::<usize>().map_err(|_| Error::Format(format!("bad PGM field {s}")));
    let (w, h, maxval) = (parse(&fields[1])?, parse(&fields[2])?, parse(&fields[3])?);
    if maxval == 0 || maxval > 255 {
        return Err(Error::Format(format!("unsupported PGM maxval {maxval}")));
    }
    let body = bytes
        .get(pos..pos + w * h)
        .ok_or_else(|| Error::Format("truncated PGM body".into()))?;
    Tensor::new(&[h, w], body.iter().map(|&b| b as f64 / maxval as f64).collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeatmapSidecar {
    pub class_name: String,
    pub stage: AttentionStage,
    pub thresholds: Vec<f64>,
}
