//! Backbone, foreground attention block and the two attention heads, assembled.

pub mod backbone;
pub mod heads;
pub mod params;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use backbone::{BackboneConfig, FabFlags, FabStep};
pub use heads::{AttentionMap, AttentionStage, HeadOutputs, HeadVars, Pooling};
pub use params::{BoundParams, ParamStore};

use crate::error::{Error, Result};
use crate::numerics::{BatchStats, Tape, Tensor, Var};
use backbone::{ChannelAttentionParams, PositionAttentionParams};

pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub num_classes: usize,
    #[serde(default = "default_lse_r")]
    pub lse_r: f64,
    /// Start both heads at zero instead of the uniform fan-in initialization.
    #[serde(default)]
    pub zero_init_heads: bool,
}

fn default_lse_r() -> f64 {
    heads::LSE_SHARPNESS
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            backbone: BackboneConfig::default(),
            num_classes: 3,
            lse_r: heads::LSE_SHARPNESS,
            zero_init_heads: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        if self.num_classes == 0 {
            return Err(Error::Config("num_classes must be >= 1".into()));
        }
        if !(self.lse_r > 0.0) {
            return Err(Error::Config("lse_r must be > 0".into()));
        }
        Ok(())
    }
}

/// Architecture switches exercised by the ablation lattice.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchFlags {
    pub use_fab: bool,
    pub use_channel_attn: bool,
    pub use_position_attn: bool,
    pub pooling: Pooling,
}

impl Default for ArchFlags {
    fn default() -> Self {
        Self {
            use_fab: true,
            use_channel_attn: true,
            use_position_attn: true,
            pooling: Pooling::Lse,
        }
    }
}

/// Parameters plus batch-norm running statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub buffers: ParamStore,
}

pub struct ForwardOutput {
    pub params: BoundParams,
    pub encoded: Var,
    pub heads: HeadVars,
    pub foreground: Option<Var>,
    pub channel_weights: Option<Var>,
    pub bn_stats: Option<BatchStats>,
    pub fab_trace: Vec<FabStep>,
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        config.backbone.init_params(&mut params, &mut rng);
        let e = config.backbone.encoded_channels;
        let d = config.num_classes;
        let (w_pn, w_ab) = if config.zero_init_heads {
            (Tensor::zeros(&[1, e]), Tensor::zeros(&[d, e]))
        } else {
            (
                params::kaiming_uniform(&[1, e], e, 1.0, &mut rng),
                params::kaiming_uniform(&[d, e], e, 1.0, &mut rng),
            )
        };
        params.insert("head.pn.weight", w_pn);
        params.insert("head.ab.weight", w_ab);
        let mut buffers = ParamStore::new();
        buffers.insert("fab.pa.bn.running_mean", Tensor::zeros(&[1]));
        buffers.insert("fab.pa.bn.running_var", Tensor::ones(&[1]));
        Ok(Self {
            config,
            params,
            buffers,
        })
    }

    pub fn image_size(&self) -> (usize, usize) {
        self.config.backbone.input_size
    }

    pub fn feature_size(&self) -> (usize, usize) {
        self.config.backbone.feature_size()
    }

    /// Records the forward pass of `images: [N,3,H,W]`.
    ///
    /// In training mode the foreground batch norm uses batch statistics, which are
    /// returned for [`Model::update_running_stats`]; otherwise running averages are used.
    pub fn forward(&self, tape: &mut Tape, images: &Tensor, flags: ArchFlags, train: bool) -> Result<ForwardOutput> {
        self.forward_with(tape, images, flags, train, &[])
    }

    /// [`Model::forward`] with some parameters supplied as existing tape vars.
    pub fn forward_with(
        &self,
        tape: &mut Tape,
        images: &Tensor,
        flags: ArchFlags,
        train: bool,
        overrides: &[(&str, Var)],
    ) -> Result<ForwardOutput> {
        let (h, w) = self.image_size();
        if images.rank() != 4 || images.shape()[1] != 3 || images.shape()[2] != h || images.shape()[3] != w {
            return Err(Error::Shape(format!(
                "expected images [N,3,{h},{w}], got {:?}",
                images.shape()
            )));
        }
        let p = self.params.bind_with(tape, overrides);
        let x = tape.constant(images.clone());
        let feats = backbone::backbone_forward(tape, &p, x)?;
        let reduced = backbone::conv_relu(tape, feats, p.var("conv1.weight"), p.var("conv1.bias"), 1, 1, 0)?;

        let running_mean = self.buffers.expect("fab.pa.bn.running_mean")?.data().to_vec();
        let running_var = self.buffers.expect("fab.pa.bn.running_var")?.data().to_vec();
        let running = (!train).then_some((&running_mean[..], &running_var[..]));

        let (fab_features, foreground, channel_weights, bn_stats, fab_trace) = if flags.use_fab {
            let out = backbone::fab_forward(
                tape,
                &ChannelAttentionParams::from_bound(&p),
                &PositionAttentionParams::from_bound(&p),
                reduced,
                FabFlags {
                    use_channel_attn: flags.use_channel_attn,
                    use_position_attn: flags.use_position_attn,
                },
                running,
            )?;
            (out.features, out.foreground, out.channel_weights, out.bn_stats, out.trace)
        } else {
            (reduced, None, None, None, Vec::new())
        };

        let cat = tape.concat_channels(feats, fab_features)?;
        let encoded = backbone::conv_relu(tape, cat, p.var("conv3.weight"), p.var("conv3.bias"), 1, 1, 1)?;
        let heads = heads::forward_heads(
            tape,
            encoded,
            p.var("head.pn.weight"),
            p.var("head.ab.weight"),
            flags.pooling,
            self.config.lse_r,
        )?;
        Ok(ForwardOutput {
            params: p,
            encoded,
            heads,
            foreground,
            channel_weights,
            bn_stats,
            fab_trace,
        })
    }

    /// Exponential running average with momentum 0.1; variance is unbiased.
    pub fn update_running_stats(&mut self, stats: &BatchStats, count: usize) {
        let correction = if count > 1 {
            count as f64 / (count - 1) as f64
        } else {
            1.0
        };
        if let Some(m) = self.buffers.get_mut("fab.pa.bn.running_mean") {
            for (r, b) in m.data_mut().iter_mut().zip(&stats.mean) {
                *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b;
            }
        }
        if let Some(v) = self.buffers.get_mut("fab.pa.bn.running_var") {
            for (r, b) in v.data_mut().iter_mut().zip(&stats.var) {
                *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b * correction;
            }
        }
    }

    /// Evaluation-mode forward returning per-image head outputs.
    pub fn predict(&self, images: &Tensor, flags: ArchFlags) -> Result<Vec<HeadOutputs>> {
        let mut tape = Tape::new();
        let out = self.forward(&mut tape, images, flags, false)?;
        (0..images.shape()[0])
            .map(|n| HeadOutputs::from_tape(&tape, &out.heads, n, self.image_size()))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        ModelConfig {
            backbone: BackboneConfig {
                input_size: (16, 16),
                stage_channels: vec![2, 3, 4, 4],
                encoded_channels: 4,
                downsample_factor: 8,
                fab_reduced_channels: 4,
                se_ratio: 4,
            },
            num_classes: 3,
            lse_r: 6.0,
            zero_init_heads: false,
        }
    }

    #[test]
    fn encoded_features_are_at_one_eighth() {
        let m = Model::new(tiny(), 1).unwrap();
        let mut t = Tape::new();
        let imgs = Tensor::from_fn(&[2, 3, 16, 16], |i| ((i * 37) % 11) as f64 / 11.0);
        let out = m.forward(&mut t, &imgs, ArchFlags::default(), true).unwrap();
        assert_eq!(t.value(out.encoded).shape(), &[2, 4, 2, 2]);
        assert_eq!(t.value(out.heads.ab_norm).shape(), &[2, 3, 2, 2]);
        assert_eq!(t.value(out.heads.pos_logit).shape(), &[2, 1]);
        assert_eq!(out.fab_trace, vec![FabStep::ChannelAttention, FabStep::PositionAttention]);
    }

    #[test]
    fn rejects_bad_geometry() {
        let mut c = tiny();
        c.backbone.input_size = (20, 16);
        assert!(Model::new(c, 0).is_err());
        let m = Model::new(tiny(), 0).unwrap();
        let mut t = Tape::new();
        assert!(m.forward(&mut t, &Tensor::zeros(&[1, 3, 8, 8]), ArchFlags::default(), false).is_err());
    }

    #[test]
    fn same_seed_same_weights() {
        assert_eq!(Model::new(tiny(), 5).unwrap(), Model::new(tiny(), 5).unwrap());
        assert_ne!(Model::new(tiny(), 5).unwrap(), Model::new(tiny(), 6).unwrap());
    }
}
