//! Residual CNN with the ResNet-101 stage topology at configurable width and
//! depth. Exposes the stem map and the four residual stage outputs.

use serde::{Deserialize, Serialize};

use crate::autodiff::NodeId;
use crate::error::{shape_err, Error, Result};
use crate::nn::{ChannelNorm, Conv2d};
use crate::params::{Forward, ParamLayout};
use crate::tensor::{Element, Tensor};

/// Number of emitted feature maps: the stem map plus four residual stages.
pub const NUM_STAGES: usize = 5;
/// Cumulative stride of the deepest map.
pub const MAX_STRIDE: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageSpec {
    pub num_blocks: usize,
    pub out_channels: usize,
    /// Applied at the first block of the stage.
    pub stride: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackbonePreset {
    Toy,
    PaperScale,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Gelu,
}

/// Downsampling between the stem map (stride 2) and the first residual stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StemPool {
    /// 3×3 window, stride 2, padding 1.
    Max,
    /// 2×2 window, stride 2.
    Avg,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "BackboneConfigRepr", into = "BackboneConfigRepr")]
pub struct BackboneConfig {
    pub preset: BackbonePreset,
    pub stem_channels: usize,
    pub stages: [StageSpec; 4],
    pub activation: Activation,
    pub stem_pool: StemPool,
}

impl BackboneConfig {
    /// Stem 16, one block per stage, widths 16/32/64/128. Smooth activation and
    /// pooling so finite-difference checks are well posed.
    pub fn toy() -> Self {
        Self::from_preset(BackbonePreset::Toy)
    }

    /// ResNet-101: blocks [3,4,23,3], widths [256,512,1024,2048].
    pub fn paper_scale() -> Self {
        Self::from_preset(BackbonePreset::PaperScale)
    }

    pub fn from_preset(preset: BackbonePreset) -> Self {
        let (stem, blocks, widths, activation, stem_pool) = match preset {
            BackbonePreset::Toy => (16, [1, 1, 1, 1], [16, 32, 64, 128], Activation::Gelu, StemPool::Avg),
            BackbonePreset::PaperScale => (64, [3, 4, 23, 3], [256, 512, 1024, 2048], Activation::Relu, StemPool::Max),
        };
        let strides = [1, 2, 2, 2];
        let stages = std::array::from_fn(|i| StageSpec { num_blocks: blocks[i], out_channels: widths[i], stride: strides[i] });
        Self { preset, stem_channels: stem, stages, activation, stem_pool }
    }

    pub fn validate(&self) -> Result<()> {
        if self.stem_channels == 0 {
            return Err(Error::Config("backbone stem_channels must be positive".into()));
        }
        for (i, s) in self.stages.iter().enumerate() {
            if s.num_blocks == 0 || s.out_channels == 0 {
                return Err(Error::Config(format!("backbone stage {} needs at least one block and channel", i + 2)));
            }
            if s.stride != 1 && s.stride != 2 {
                return Err(Error::Config(format!("backbone stage {} stride must be 1 or 2", i + 2)));
            }
        }
        if self.stride(NUM_STAGES) != MAX_STRIDE {
            return Err(Error::Config(format!(
                "backbone stage strides must reach a cumulative stride of {MAX_STRIDE}, got {}",
                self.stride(NUM_STAGES)
            )));
        }
        Ok(())
    }

    /// Channel count of map `stage` (1-based, 1 = stem).
    pub fn channels(&self, stage: usize) -> usize {
        match stage {
            1 => self.stem_channels,
            s => self.stages[s - 2].out_channels,
        }
    }

    /// Cumulative stride of map `stage` (1-based).
    pub fn stride(&self, stage: usize) -> usize {
        // stem conv and stem pool each halve.
        let mut s = 2;
        for i in 2..=stage {
            s *= if i == 2 { 2 * self.stages[0].stride } else { self.stages[i - 2].stride };
        }
        s
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BackboneConfigRepr {
    preset: BackbonePreset,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    stem_channels: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    stages: Option<[StageSpec; 4]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    activation: Option<Activation>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    stem_pool: Option<StemPool>,
}

impl TryFrom<BackboneConfigRepr> for BackboneConfig {
    type Error = Error;

    fn try_from(r: BackboneConfigRepr) -> Result<Self> {
        let base = BackboneConfig::from_preset(r.preset);
        let cfg = BackboneConfig {
            preset: r.preset,
            stem_channels: r.stem_channels.unwrap_or(base.stem_channels),
            stages: r.stages.unwrap_or(base.stages),
            activation: r.activation.unwrap_or(base.activation),
            stem_pool: r.stem_pool.unwrap_or(base.stem_pool),
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

impl From<BackboneConfig> for BackboneConfigRepr {
    fn from(c: BackboneConfig) -> Self {
        Self {
            preset: c.preset,
            stem_channels: Some(c.stem_channels),
            stages: Some(c.stages),
            activation: Some(c.activation),
            stem_pool: Some(c.stem_pool),
        }
    }
}

/// Bottleneck residual block: 1×1 reduce, 3×3 (strided), 1×1 expand, each
/// normalised, plus an identity or projection shortcut.
#[derive(Debug, Clone)]
pub struct Bottleneck {
    pub reduce: Conv2d,
    pub reduce_norm: ChannelNorm,
    pub spatial: Conv2d,
    pub spatial_norm: ChannelNorm,
    pub expand: Conv2d,
    pub expand_norm: ChannelNorm,
    /// Present iff the block changes channel count or resolution.
    pub projection: Option<(Conv2d, ChannelNorm)>,
    pub activation: Activation,
}

impl Bottleneck {
    pub fn new(layout: &mut ParamLayout, name: &str, in_c: usize, out_c: usize, stride: usize, activation: Activation) -> Self {
        let width = (out_c / 4).max(1);
        let projection = (in_c != out_c || stride != 1).then(|| {
            (
                Conv2d::new(layout, &format!("{name}.proj"), in_c, out_c, 1, stride, 0, false),
                ChannelNorm::new(layout, &format!("{name}.proj_norm"), out_c),
            )
        });
        // Convolutions feeding a normalisation carry no bias: it would be cancelled.
        Self {
            reduce: Conv2d::new(layout, &format!("{name}.reduce"), in_c, width, 1, 1, 0, false),
            reduce_norm: ChannelNorm::new(layout, &format!("{name}.reduce_norm"), width),
            spatial: Conv2d::new(layout, &format!("{name}.spatial"), width, width, 3, stride, 1, false),
            spatial_norm: ChannelNorm::new(layout, &format!("{name}.spatial_norm"), width),
            expand: Conv2d::new(layout, &format!("{name}.expand"), width, out_c, 1, 1, 0, false),
            expand_norm: ChannelNorm::new(layout, &format!("{name}.expand_norm"), out_c),
            projection,
            activation,
        }
    }

    pub fn forward<T: Element>(&self, f: &mut Forward<T>, x: NodeId) -> Result<NodeId> {
        let h = self.reduce.forward(f, x)?;
        let h = self.reduce_norm.forward(f, h)?;
        let h = activate(f, h, self.activation)?;
        let h = self.spatial.forward(f, h)?;
        let h = self.spatial_norm.forward(f, h)?;
        let h = activate(f, h, self.activation)?;
        let h = self.expand.forward(f, h)?;
        let h = self.expand_norm.forward(f, h)?;
        let shortcut = match &self.projection {
            Some((conv, norm)) => {
                let s = conv.forward(f, x)?;
                norm.forward(f, s)?
            }
            None => {
                if f.shape(x) != f.shape(h) {
                    return Err(shape_err(
                        "bottleneck",
                        format!("identity shortcut cannot add {:?} to {:?}", f.shape(x), f.shape(h)),
                    ));
                }
                x
            }
        };
        let sum = f.add(h, shortcut)?;
        activate(f, sum, self.activation)
    }
}

pub fn activate<T: Element>(f: &mut Forward<T>, x: NodeId, act: Activation) -> Result<NodeId> {
    match act {
        Activation::Relu => f.relu(x),
        Activation::Gelu => f.gelu(x),
    }
}

/// The five feature maps of one forward pass, in stride order 2, 4, 8, 16, 32.
/// A truncated backbone yields fewer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StageFeatureMaps {
    pub maps: Vec<NodeId>,
}

impl StageFeatureMaps {
    /// Map `stage` (1-based, 1 = stem).
    pub fn stage(&self, stage: usize) -> NodeId {
        self.maps[stage - 1]
    }

    pub fn tensors<T: Element>(&self, f: &Forward<T>) -> Vec<Tensor<T>> {
        self.maps.iter().map(|&m| f.value(m).clone()).collect()
    }
}

#[derive(Debug, Clone)]
pub struct Backbone {
    pub cfg: BackboneConfig,
    pub stem: Conv2d,
    pub stem_norm: ChannelNorm,
    /// Residual stages actually built; `stages.len() + 1` maps are emitted.
    pub stages: Vec<Vec<Bottleneck>>,
}

impl Backbone {
    pub fn new(layout: &mut ParamLayout, name: &str, cfg: &BackboneConfig) -> Result<Self> {
        Self::truncated(layout, name, cfg, NUM_STAGES)
    }

    /// Builds only the layers needed to emit maps `1..=last_stage`.
    pub fn truncated(layout: &mut ParamLayout, name: &str, cfg: &BackboneConfig, last_stage: usize) -> Result<Self> {
        cfg.validate()?;
        if !(1..=NUM_STAGES).contains(&last_stage) {
            return Err(Error::Config(format!("backbone stage {last_stage} does not exist")));
        }
        let stem = Conv2d::new(layout, &format!("{name}.stem"), 3, cfg.stem_channels, 7, 2, 3, false);
        let stem_norm = ChannelNorm::new(layout, &format!("{name}.stem_norm"), cfg.stem_channels);
        let mut in_c = cfg.stem_channels;
        let mut stages = Vec::new();
        for (si, spec) in cfg.stages.iter().enumerate().take(last_stage - 1) {
            let blocks = (0..spec.num_blocks)
                .map(|bi| {
                    let stride = if bi == 0 { spec.stride } else { 1 };
                    let block_name = format!("{name}.stage{}.{bi}", si + 2);
                    let b = Bottleneck::new(layout, &block_name, in_c, spec.out_channels, stride, cfg.activation);
                    in_c = spec.out_channels;
                    b
                })
                .collect();
            stages.push(blocks);
        }
        Ok(Self { cfg: cfg.clone(), stem, stem_norm, stages })
    }

    pub fn num_maps(&self) -> usize {
        self.stages.len() + 1
    }

    /// `image: [B,3,H,W]` with H and W divisible by 32.
    pub fn forward<T: Element>(&self, f: &mut Forward<T>, image: NodeId) -> Result<StageFeatureMaps> {
        let s = f.shape(image).to_vec();
        if s.len() != 4 || s[1] != 3 {
            return Err(shape_err("backbone", format!("expected [B,3,H,W], got {s:?}")));
        }
        if s[2] % MAX_STRIDE != 0 || s[3] % MAX_STRIDE != 0 {
            return Err(shape_err("backbone", format!("input extent {}x{} is not divisible by {MAX_STRIDE}", s[2], s[3])));
        }
        let h = self.stem.forward(f, image)?;
        let h = self.stem_norm.forward(f, h)?;
        let mut x = activate(f, h, self.cfg.activation)?;
        let mut maps = vec![x];
        for (i, blocks) in self.stages.iter().enumerate() {
            if i == 0 {
                x = match self.cfg.stem_pool {
                    StemPool::Max => f.max_pool2d(x, 3, 2, 1)?,
                    StemPool::Avg => f.avg_pool2d(x, 2)?,
                };
            }
            for b in blocks {
                x = b.forward(f, x)?;
            }
            maps.push(x);
        }
        Ok(StageFeatureMaps { maps })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn preset_strides_and_channels() {
        for cfg in [BackboneConfig::toy(), BackboneConfig::paper_scale()] {
            cfg.validate().unwrap();
            let strides: Vec<usize> = (1..=5).map(|s| cfg.stride(s)).collect();
            assert_eq!(strides, vec![2, 4, 8, 16, 32]);
        }
        let p = BackboneConfig::paper_scale();
        assert_eq!(p.stages.map(|s| s.num_blocks), [3, 4, 23, 3]);
        assert_eq!(p.stages.map(|s| s.out_channels), [256, 512, 1024, 2048]);
        assert_eq!(p.channels(1), 64);
    }

    #[test]
    fn rejects_wrong_total_stride() {
        let mut c = BackboneConfig::toy();
        c.stages[3].stride = 1;
        assert!(c.validate().is_err());
    }

    #[test]
    fn repr_fills_from_preset() {
        let c: BackboneConfig = serde_json::from_str(r#"{"preset":"paper_scale"}"#).unwrap();
        assert_eq!(c, BackboneConfig::paper_scale());
        let c: BackboneConfig = serde_json::from_str(r#"{"preset":"toy","activation":"relu"}"#).unwrap();
        assert_eq!(c.activation, Activation::Relu);
        assert!(serde_json::from_str::<BackboneConfig>(r#"{"preset":"toy","bogus":1}"#).is_err());
    }
}
