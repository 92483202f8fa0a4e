//! Early fusion: every backbone stage is lifted back to image resolution by a
//! bridge, stacked onto the RGB channels, and the 18-channel result is
//! processed like an image by a plain ViT.

use crate::autodiff::NodeId;
use crate::backbone::{Backbone, NUM_STAGES};
use crate::encoder::EncoderStack;
use crate::error::{shape_err, Result};
use crate::fusion::config::{BridgeVariant, ModelConfig};
use crate::fusion::head::Head;
use crate::nn::{Conv2d, UpConv};
use crate::params::{Forward, ParamLayout};
use crate::tensor::Element;
use crate::tokenization::{embed_tokens, patchify, to_channels_last, EmbeddingParams, PatchGrid, TokenSequence};

/// Channels of the stacked map: 3 image channels plus 5 bridges × 3.
pub const UNIFIED_CHANNELS: usize = 18;
pub const BRIDGE_CHANNELS: usize = 3;
const MIN_UPCONV_CHANNELS: usize = 4;

#[derive(Debug, Clone)]
pub enum Upsampler {
    /// One learned 2× transposed convolution per halving of resolution.
    Learned(Vec<UpConv>),
    /// Nearest-neighbour replication by `2^stage`.
    Copy { factor: usize },
}

#[derive(Debug, Clone)]
pub struct Bridge {
    pub stage: usize,
    pub upsample: Upsampler,
    pub project: Conv2d,
}

impl Bridge {
    /// Learned bridges halve the channel count at every 2× step (not below 4).
    pub fn new(layout: &mut ParamLayout, name: &str, stage: usize, in_c: usize, stride: usize, learned: bool, out_c: usize) -> Self {
        let mut c = in_c;
        let upsample = if learned {
            let steps = stride.trailing_zeros() as usize;
            let ups = (0..steps)
                .map(|i| {
                    let next = (c / 2).max(MIN_UPCONV_CHANNELS);
                    let u = UpConv::new(layout, &format!("{name}.up{i}"), c, next, 2);
                    c = next;
                    u
                })
                .collect();
            Upsampler::Learned(ups)
        } else {
            Upsampler::Copy { factor: stride }
        };
        let project = Conv2d::new(layout, &format!("{name}.proj"), c, out_c, 1, 1, 0, true);
        Self { stage, upsample, project }
    }
}

/// Lifts a stage map `[B,C,H/s,W/s]` to `[B,out,H,W]`.
pub fn bridge_forward<T: Element>(f: &mut Forward<T>, stage_map: NodeId, bridge: &Bridge) -> Result<NodeId> {
    let x = match &bridge.upsample {
        Upsampler::Learned(ups) => ups.iter().try_fold(stage_map, |x, u| u.forward(f, x))?,
        Upsampler::Copy { factor } => f.upsample_nearest(stage_map, *factor)?,
    };
    bridge.project.forward(f, x)
}

#[derive(Debug, Clone)]
pub struct EarlyFusion {
    pub backbone: Backbone,
    pub variant: BridgeVariant,
    pub bridges: Vec<Bridge>,
    pub embed: EmbeddingParams,
    pub encoder: EncoderStack,
    pub head: Head,
    pub patch: usize,
}

impl EarlyFusion {
    pub fn new(layout: &mut ParamLayout, cfg: &ModelConfig) -> Result<Self> {
        let [h, w] = cfg.image_size;
        let grid = PatchGrid::new(h, w, cfg.patch_size)?;
        let variant = cfg.bridge();
        let backbone = Backbone::new(layout, "backbone", &cfg.backbone)?;
        let bb = &cfg.backbone;
        let learned = variant.uses_upconv();
        let bridges = if variant.is_multi() {
            (1..=NUM_STAGES)
                .map(|s| Bridge::new(layout, &format!("bridge{s}"), s, bb.channels(s), bb.stride(s), learned, BRIDGE_CHANNELS))
                .collect()
        } else {
            // The lone bridge carries all 15 non-image channels.
            let s = NUM_STAGES;
            vec![Bridge::new(layout, &format!("bridge{s}"), s, bb.channels(s), bb.stride(s), learned, UNIFIED_CHANNELS - 3)]
        };
        let embed = EmbeddingParams::new(layout, "embed", cfg.patch_size * cfg.patch_size * UNIFIED_CHANNELS, grid.num_tokens(), cfg.dim);
        let encoder = EncoderStack::new(layout, "encoder", &cfg.encoder(cfg.depths.early), cfg.identity_init)?;
        let head = Head::new(layout, "head", cfg.head_type, grid.num_tokens(), cfg.dim, cfg.num_classes);
        Ok(Self { backbone, variant, bridges, embed, encoder, head, patch: cfg.patch_size })
    }

    /// The stacked `[B,18,H,W]` map: image channels first, then bridges by stage.
    pub fn unified_map<T: Element>(&self, f: &mut Forward<T>, image: NodeId) -> Result<NodeId> {
        let maps = self.backbone.forward(f, image)?;
        let mut parts = vec![image];
        for b in &self.bridges {
            parts.push(bridge_forward(f, maps.stage(b.stage), b)?);
        }
        let unified = f.concat(&parts, 1)?;
        if f.shape(unified)[1] != UNIFIED_CHANNELS {
            return Err(shape_err("early_fusion", format!("stacked map has shape {:?}", f.shape(unified))));
        }
        Ok(unified)
    }

    pub fn tokens<T: Element>(&self, f: &mut Forward<T>, image: NodeId) -> Result<TokenSequence> {
        let unified = self.unified_map(f, image)?;
        let nhwc = to_channels_last(f, unified)?;
        let (patches, grid) = patchify(f, nhwc, self.patch)?;
        let seq = embed_tokens(f, patches, grid, &self.embed)?;
        let tokens = self.encoder.forward(f, seq.tokens)?;
        Ok(TokenSequence { tokens, ..seq })
    }

    pub fn forward<T: Element>(&self, f: &mut Forward<T>, image: NodeId) -> Result<NodeId> {
        let seq = self.tokens(f, image)?;
        self.head.forward(f, seq.tokens)
    }
}
