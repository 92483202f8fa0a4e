use std::fmt;

use serde::{Deserialize, Serialize};

use crate::backbone::BackboneConfig;
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};

/// Every fusion model without a relaxed budget runs this many encoder blocks.
pub const BLOCK_BUDGET: usize = 12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMethod {
    /// ViT and CNN token streams encoded in parallel, combined after encoding.
    LateParallel,
    /// CNN stages bridged back to image resolution and stacked onto the image channels.
    EarlyFusion,
    /// Mixing blocks interleave encoder blocks with CNN stage features.
    LayerByLayer,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CombineVariant {
    UpconvConcat,
    UpconvAdd,
    CopyConcat,
    CopyAdd,
}

impl CombineVariant {
    pub fn uses_upconv(self) -> bool {
        matches!(self, CombineVariant::UpconvConcat | CombineVariant::UpconvAdd)
    }

    pub fn concatenates(self) -> bool {
        matches!(self, CombineVariant::UpconvConcat | CombineVariant::CopyConcat)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BridgeVariant {
    UpconvMulti,
    CopyMulti,
    UpconvSingle,
    CopySingle,
}

impl BridgeVariant {
    pub fn uses_upconv(self) -> bool {
        matches!(self, BridgeVariant::UpconvMulti | BridgeVariant::UpconvSingle)
    }

    /// Multi variants bridge all five stages; single variants only the last.
    pub fn is_multi(self) -> bool {
        matches!(self, BridgeVariant::UpconvMulti | BridgeVariant::CopyMulti)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadType {
    /// Mean over the channel axis: one scalar per token.
    TokenWise,
    /// Mean over the token axis: one scalar per channel.
    ChannelWise,
    /// Both pooled vectors concatenated.
    Mixing,
}

/// Encoder depths per method. Only the entries for the selected method are used.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DepthConfig {
    pub late_vit: usize,
    pub late_cnn: usize,
    pub early: usize,
    /// Encoder blocks inside each of the five mixing blocks.
    pub mixing: usize,
    /// Plain encoder blocks after the last mixing block.
    pub tail: usize,
}

impl Default for DepthConfig {
    fn default() -> Self {
        Self { late_vit: 6, late_cnn: 6, early: 12, mixing: 2, tail: 2 }
    }
}

impl DepthConfig {
    /// One block wherever a stack exists: the reduced depth used for gradient checks.
    pub fn minimal() -> Self {
        Self { late_vit: 1, late_cnn: 1, early: 1, mixing: 1, tail: 1 }
    }
}

pub const NUM_MIXING_BLOCKS: usize = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub fusion_method: FusionMethod,
    /// Late fusion only; defaults to `upconv_concat`.
    pub combine_variant: Option<CombineVariant>,
    /// Early fusion only; defaults to `upconv_multi`.
    pub bridge_variant: Option<BridgeVariant>,
    /// Layer-by-layer only.
    pub use_class_token: bool,
    pub head_type: HeadType,
    pub backbone: BackboneConfig,
    pub dim: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub depths: DepthConfig,
    pub patch_size: usize,
    pub num_classes: usize,
    /// `[H, W]`
    pub image_size: [usize; 2],
    pub relax_block_budget: bool,
    /// Zero attention output and MLP output weights (residual identity).
    pub identity_init: bool,
    pub freeze_backbone: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::toy(FusionMethod::LayerByLayer, HeadType::ChannelWise)
    }
}

impl ModelConfig {
    /// 32×32 inputs, D = 16, 4 heads, P = 8, 10 classes, toy backbone.
    pub fn toy(method: FusionMethod, head: HeadType) -> Self {
        Self {
            fusion_method: method,
            combine_variant: None,
            bridge_variant: None,
            use_class_token: false,
            head_type: head,
            backbone: BackboneConfig::toy(),
            dim: 16,
            heads: 4,
            mlp_ratio: 4,
            depths: DepthConfig::default(),
            patch_size: 8,
            num_classes: 10,
            image_size: [32, 32],
            relax_block_budget: false,
            identity_init: false,
            freeze_backbone: false,
        }
    }

    /// 224×224 inputs, D = 768, 12 heads, P = 16, 1000 classes, ResNet-101 backbone.
    pub fn paper_scale(method: FusionMethod, head: HeadType) -> Self {
        Self {
            backbone: BackboneConfig::paper_scale(),
            dim: 768,
            heads: 12,
            patch_size: 16,
            num_classes: 1000,
            image_size: [224, 224],
            ..Self::toy(method, head)
        }
    }

    /// Same model with one encoder block per stack and the budget relaxed.
    pub fn relaxed_minimal(mut self) -> Self {
        self.depths = DepthConfig::minimal();
        self.relax_block_budget = true;
        self
    }

    pub fn combine(&self) -> CombineVariant {
        self.combine_variant.unwrap_or(CombineVariant::UpconvConcat)
    }

    pub fn bridge(&self) -> BridgeVariant {
        self.bridge_variant.unwrap_or(BridgeVariant::UpconvMulti)
    }

    pub fn encoder(&self, depth: usize) -> EncoderConfig {
        EncoderConfig { depth, dim: self.dim, heads: self.heads, mlp_ratio: self.mlp_ratio }
    }

    /// Encoder blocks executed by one forward pass of this configuration.
    pub fn transformer_blocks(&self) -> usize {
        let d = &self.depths;
        match self.fusion_method {
            FusionMethod::LateParallel => d.late_vit + d.late_cnn,
            FusionMethod::EarlyFusion => d.early,
            FusionMethod::LayerByLayer => NUM_MIXING_BLOCKS * d.mixing + d.tail,
        }
    }

    pub fn validate(&self) -> Result<()> {
        use FusionMethod::*;
        if self.combine_variant.is_some() && self.fusion_method != LateParallel {
            return Err(Error::Config("combine_variant only applies to late_parallel fusion".into()));
        }
        if self.bridge_variant.is_some() && self.fusion_method != EarlyFusion {
            return Err(Error::Config("bridge_variant only applies to early_fusion".into()));
        }
        if self.use_class_token && self.fusion_method != LayerByLayer {
            return Err(Error::Config("use_class_token is only valid with layer_by_layer fusion".into()));
        }
        if self.num_classes == 0 {
            return Err(Error::Config("num_classes must be positive".into()));
        }
        self.backbone.validate()?;
        self.encoder(0).validate()?;
        let [h, w] = self.image_size;
        if h == 0 || w == 0 || h % 32 != 0 || w % 32 != 0 {
            return Err(Error::Config(format!("image size {h}x{w} must be a positive multiple of 32")));
        }
        if self.fusion_method != LayerByLayer && (self.patch_size == 0 || h % self.patch_size != 0 || w % self.patch_size != 0) {
            return Err(Error::Config(format!("patch size {} does not divide image size {h}x{w}", self.patch_size)));
        }
        let blocks = self.transformer_blocks();
        if !self.relax_block_budget && blocks != BLOCK_BUDGET {
            return Err(Error::BlockBudget { found: blocks });
        }
        Ok(())
    }

    /// Short identifier such as `late_parallel/copy_add/token_wise`.
    pub fn variant_name(&self) -> String {
        let m = serde_plain(&self.fusion_method);
        let h = serde_plain(&self.head_type);
        match self.fusion_method {
            FusionMethod::LateParallel => format!("{m}/{}/{h}", serde_plain(&self.combine())),
            FusionMethod::EarlyFusion => format!("{m}/{}/{h}", serde_plain(&self.bridge())),
            FusionMethod::LayerByLayer if self.use_class_token => format!("{m}/class_token/{h}"),
            FusionMethod::LayerByLayer => format!("{m}/{h}"),
        }
    }
}

fn serde_plain<S: Serialize>(v: &S) -> String {
    serde_json::to_value(v).ok().and_then(|v| v.as_str().map(str::to_owned)).unwrap_or_default()
}

/// One row of the experiment grid: a method, its variant and a head.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Variant {
    pub method: FusionMethod,
    pub combine: Option<CombineVariant>,
    pub bridge: Option<BridgeVariant>,
    pub class_token: bool,
    pub head: HeadType,
}

impl Variant {
    /// Applies the variant to a base configuration (sizes are kept).
    pub fn apply(&self, base: &ModelConfig) -> ModelConfig {
        ModelConfig {
            fusion_method: self.method,
            combine_variant: self.combine,
            bridge_variant: self.bridge,
            use_class_token: self.class_token,
            head_type: self.head,
            ..base.clone()
        }
    }

    pub fn name(&self) -> String {
        self.apply(&ModelConfig::default()).variant_name()
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name())
    }
}

const METHODS: [FusionMethod; 3] = [FusionMethod::LateParallel, FusionMethod::EarlyFusion, FusionMethod::LayerByLayer];
const HEADS: [HeadType; 3] = [HeadType::TokenWise, HeadType::ChannelWise, HeadType::Mixing];

/// The three methods in their default form, each with the three heads.
pub fn basic_variants() -> Vec<Variant> {
    METHODS
        .iter()
        .flat_map(|&method| {
            HEADS.iter().map(move |&head| Variant { method, combine: None, bridge: None, class_token: false, head })
        })
        .collect()
}

/// The seven modified variants, all with the token-wise head.
pub fn modified_variants() -> Vec<Variant> {
    let head = HeadType::TokenWise;
    let late = [CombineVariant::UpconvAdd, CombineVariant::CopyConcat, CombineVariant::CopyAdd].map(|c| Variant {
        method: FusionMethod::LateParallel,
        combine: Some(c),
        bridge: None,
        class_token: false,
        head,
    });
    let early = [BridgeVariant::CopyMulti, BridgeVariant::UpconvSingle, BridgeVariant::CopySingle].map(|b| Variant {
        method: FusionMethod::EarlyFusion,
        combine: None,
        bridge: Some(b),
        class_token: false,
        head,
    });
    let lbl = Variant { method: FusionMethod::LayerByLayer, combine: None, bridge: None, class_token: true, head };
    late.into_iter().chain(early).chain(std::iter::once(lbl)).collect()
}

pub fn all_variants() -> Vec<Variant> {
    let mut v = basic_variants();
    v.extend(modified_variants());
    v
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_depths_meet_the_budget() {
        for v in all_variants() {
            let c = v.apply(&ModelConfig::default());
            assert_eq!(c.transformer_blocks(), BLOCK_BUDGET, "{v}");
            c.validate().unwrap();
        }
    }

    #[test]
    fn catalogue_sizes_and_names_are_unique() {
        assert_eq!(basic_variants().len(), 9);
        assert_eq!(modified_variants().len(), 7);
        let mut names: Vec<String> = all_variants().iter().map(Variant::name).collect();
        names.sort();
        names.dedup();
        assert_eq!(names.len(), 16);
        assert!(names.contains(&"late_parallel/copy_add/token_wise".to_string()));
        assert!(names.contains(&"layer_by_layer/class_token/token_wise".to_string()));
    }

    #[test]
    fn pairing_rules() {
        let mut c = ModelConfig::toy(FusionMethod::LateParallel, HeadType::Mixing);
        c.use_class_token = true;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        let mut c = ModelConfig::toy(FusionMethod::EarlyFusion, HeadType::Mixing);
        c.combine_variant = Some(CombineVariant::CopyAdd);
        assert!(c.validate().is_err());
        let mut c = ModelConfig::toy(FusionMethod::EarlyFusion, HeadType::Mixing);
        c.depths.early = 4;
        assert!(matches!(c.validate(), Err(Error::BlockBudget { found: 4 })));
        c.relax_block_budget = true;
        c.validate().unwrap();
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = serde_json::from_str::<ModelConfig>(r#"{"fusion_methd":"early_fusion"}"#);
        assert!(err.is_err());
        let c: ModelConfig = serde_json::from_str(r#"{"fusion_method":"early_fusion"}"#).unwrap();
        assert_eq!(c.fusion_method, FusionMethod::EarlyFusion);
        assert!(serde_json::from_str::<ModelConfig>(r#"{"combine_variant":"upconv_concatt"}"#).is_err());
    }
}
