//! Convolutional backbone at 1/8 resolution and the foreground attention block.
//!
//! The FAB runs channel attention first (softmax-weighted spatial pooling
//! followed by an SE-style excitation), reweights the channels, then derives a
//! single foreground map with a 1x1 conv + batch norm head. That map is added
//! to every channel of the block input.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::params::{kaiming_uniform, BoundParams, ParamStore};
use crate::error::{Error, Result};
use crate::numerics::{BatchStats, Tape, Tensor, Var};

pub const DOWNSAMPLE_FACTOR: usize = 8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneConfig {
    pub input_size: (usize, usize),
    /// Widths of the four conv stages (three stride-2 stages, then one dilated stage).
    pub stage_channels: Vec<usize>,
    pub encoded_channels: usize,
    #[serde(default = "default_downsample")]
    pub downsample_factor: usize,
    pub fab_reduced_channels: usize,
    #[serde(default = "default_se_ratio")]
    pub se_ratio: usize,
}

fn default_downsample() -> usize {
    DOWNSAMPLE_FACTOR
}

fn default_se_ratio() -> usize {
    4
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            input_size: (64, 64),
            stage_channels: vec![16, 32, 32, 32],
            encoded_channels: 32,
            downsample_factor: DOWNSAMPLE_FACTOR,
            fab_reduced_channels: 16,
            se_ratio: 4,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.input_size;
        if self.downsample_factor != DOWNSAMPLE_FACTOR {
            return Err(Error::Config(format!(
                "downsample factor is fixed at {DOWNSAMPLE_FACTOR}, got {}",
                self.downsample_factor
            )));
        }
        if h == 0 || w == 0 || h % DOWNSAMPLE_FACTOR != 0 || w % DOWNSAMPLE_FACTOR != 0 {
            return Err(Error::Config(format!(
                "input size {h}x{w} must be a positive multiple of {DOWNSAMPLE_FACTOR}"
            )));
        }
        if self.stage_channels.len() != 4 || self.stage_channels.contains(&0) {
            return Err(Error::Config("stage_channels needs four positive widths".into()));
        }
        if self.encoded_channels == 0 || self.fab_reduced_channels == 0 || self.se_ratio == 0 {
            return Err(Error::Config("channel counts and se_ratio must be positive".into()));
        }
        Ok(())
    }

    pub fn feature_size(&self) -> (usize, usize) {
        (
            self.input_size.0 / DOWNSAMPLE_FACTOR,
            self.input_size.1 / DOWNSAMPLE_FACTOR,
        )
    }

    fn se_hidden(&self) -> usize {
        (self.fab_reduced_channels / self.se_ratio).max(1)
    }

    /// Adds backbone, FAB and Conv3 parameters to `store`.
    pub fn init_params<R: Rng>(&self, store: &mut ParamStore, rng: &mut R) {
        let mut cin = 3;
        for (i, &c) in self.stage_channels.iter().enumerate() {
            store.insert(
                format!("stage{}.weight", i + 1),
                kaiming_uniform(&[c, cin, 3, 3], cin * 9, 2.0, rng),
            );
            store.insert(format!("stage{}.bias", i + 1), Tensor::zeros(&[c]));
            cin = c;
        }
        let r = self.fab_reduced_channels;
        let h = self.se_hidden();
        store.insert("conv1.weight", kaiming_uniform(&[r, cin, 1, 1], cin, 2.0, rng));
        store.insert("conv1.bias", Tensor::zeros(&[r]));
        store.insert("fab.ca.score.weight", kaiming_uniform(&[1, r, 1, 1], r, 1.0, rng));
        store.insert("fab.ca.fc1.weight", kaiming_uniform(&[h, r], r, 2.0, rng));
        store.insert("fab.ca.fc1.bias", Tensor::zeros(&[h]));
        store.insert("fab.ca.fc2.weight", kaiming_uniform(&[r, h], h, 1.0, rng));
        store.insert("fab.ca.fc2.bias", Tensor::zeros(&[r]));
        store.insert("fab.pa.score.weight", kaiming_uniform(&[1, r, 1, 1], r, 1.0, rng));
        store.insert("fab.pa.bn.gamma", Tensor::ones(&[1]));
        store.insert("fab.pa.bn.beta", Tensor::zeros(&[1]));
        let e = self.encoded_channels;
        let cat = cin + r;
        store.insert("conv3.weight", kaiming_uniform(&[e, cat, 3, 3], cat * 9, 2.0, rng));
        store.insert("conv3.bias", Tensor::zeros(&[e]));
    }
}

/// `relu(conv(x) + b)`.
pub fn conv_relu(
    tape: &mut Tape,
    x: Var,
    weight: Var,
    bias: Var,
    stride: usize,
    dilation: usize,
    padding: usize,
) -> Result<Var> {
    let c = tape.conv2d(x, weight, stride, dilation, padding)?;
    let b = tape.channel_bias(c, bias)?;
    Ok(tape.relu(b))
}

/// Four conv stages: three stride-2 reductions and a dilation-2 stage at 1/8 resolution.
pub fn backbone_forward(tape: &mut Tape, p: &BoundParams, images: Var) -> Result<Var> {
    let mut x = images;
    for stage in 1..=4 {
        let (stride, dilation, padding) = if stage < 4 { (2, 1, 1) } else { (1, 2, 2) };
        x = conv_relu(
            tape,
            x,
            p.var(&format!("stage{stage}.weight")),
            p.var(&format!("stage{stage}.bias")),
            stride,
            dilation,
            padding,
        )?;
    }
    Ok(x)
}

#[derive(Clone, Copy, Debug)]
pub struct ChannelAttentionParams {
    pub score: Var,
    pub fc1_weight: Var,
    pub fc1_bias: Var,
    pub fc2_weight: Var,
    pub fc2_bias: Var,
}

impl ChannelAttentionParams {
    pub fn from_bound(p: &BoundParams) -> Self {
        Self {
            score: p.var("fab.ca.score.weight"),
            fc1_weight: p.var("fab.ca.fc1.weight"),
            fc1_bias: p.var("fab.ca.fc1.bias"),
            fc2_weight: p.var("fab.ca.fc2.weight"),
            fc2_bias: p.var("fab.ca.fc2.bias"),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ChannelAttention {
    /// `[N,1,H,W]` softmax over positions.
    pub spatial_weights: Var,
    /// `[N,C]` attention-pooled descriptor.
    pub pooled: Var,
    /// `[N,C]` excitation output in (0,1).
    pub weights: Var,
}

pub fn channel_attention(
    tape: &mut Tape,
    ca: &ChannelAttentionParams,
    features: Var,
) -> Result<ChannelAttention> {
    let score = tape.conv2d(features, ca.score, 1, 1, 0)?;
    let spatial_weights = tape.spatial_softmax(score)?;
    let pooled = tape.weighted_pool(features, spatial_weights)?;
    let h = tape.linear(pooled, ca.fc1_weight)?;
    let h = tape.row_bias(h, ca.fc1_bias)?;
    let h = tape.relu(h);
    let e = tape.linear(h, ca.fc2_weight)?;
    let e = tape.row_bias(e, ca.fc2_bias)?;
    let weights = tape.sigmoid(e);
    Ok(ChannelAttention {
        spatial_weights,
        pooled,
        weights,
    })
}

#[derive(Clone, Copy, Debug)]
pub struct PositionAttentionParams {
    pub score: Var,
    pub gamma: Var,
    pub beta: Var,
}

impl PositionAttentionParams {
    pub fn from_bound(p: &BoundParams) -> Self {
        Self {
            score: p.var("fab.pa.score.weight"),
            gamma: p.var("fab.pa.bn.gamma"),
            beta: p.var("fab.pa.bn.beta"),
        }
    }
}

/// `BN(conv1x1(x))` → `[N,1,H,W]` foreground map. `running` selects evaluation-mode statistics.
pub fn position_attention(
    tape: &mut Tape,
    pa: &PositionAttentionParams,
    recalibrated: Var,
    running: Option<(&[f64], &[f64])>,
) -> Result<(Var, Option<BatchStats>)> {
    let s = tape.conv2d(recalibrated, pa.score, 1, 1, 0)?;
    tape.batch_norm(s, pa.gamma, pa.beta, running)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum FabStep {
    ChannelAttention,
    PositionAttention,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FabFlags {
    pub use_channel_attn: bool,
    pub use_position_attn: bool,
}

impl FabFlags {
    pub const FULL: FabFlags = FabFlags {
        use_channel_attn: true,
        use_position_attn: true,
    };
}

#[derive(Debug)]
pub struct FabOutput {
    pub features: Var,
    pub foreground: Option<Var>,
    pub channel_weights: Option<Var>,
    pub bn_stats: Option<BatchStats>,
    /// Order in which the attention stages ran.
    pub trace: Vec<FabStep>,
}

/// Cascaded channel → position attention with the foreground map added to every input channel.
///
/// With only channel attention enabled the output is the channel-reweighted input;
/// with only position attention the map is computed from the raw input.
pub fn fab_forward(
    tape: &mut Tape,
    ca: &ChannelAttentionParams,
    pa: &PositionAttentionParams,
    features: Var,
    flags: FabFlags,
    running: Option<(&[f64], &[f64])>,
) -> Result<FabOutput> {
    let mut trace = Vec::new();
    let mut channel_weights = None;
    let mut recalibrated = features;
    if flags.use_channel_attn {
        let att = channel_attention(tape, ca, features)?;
        recalibrated = tape.scale_channels(features, att.weights)?;
        channel_weights = Some(att.weights);
        trace.push(FabStep::ChannelAttention);
    }
    if !flags.use_position_attn {
        return Ok(FabOutput {
            features: recalibrated,
            foreground: None,
            channel_weights,
            bn_stats: None,
            trace,
        });
    }
    trace.push(FabStep::PositionAttention);
    let (map, bn_stats) = position_attention(tape, pa, recalibrated, running)?;
    let out = tape.add_map(features, map)?;
    Ok(FabOutput {
        features: out,
        foreground: Some(map),
        channel_weights,
        bn_stats,
        trace,
    })
}
