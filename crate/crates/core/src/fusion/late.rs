//! Late fusion: a ViT stream and a CNN-token stream are encoded in parallel
//! and merged token-by-token after the ViT grid is expanded to the CNN grid.

use crate::autodiff::NodeId;
use crate::backbone::{Backbone, NUM_STAGES};
use crate::encoder::EncoderStack;
use crate::error::{shape_err, Error, Result};
use crate::fusion::config::{CombineVariant, ModelConfig};
use crate::fusion::head::Head;
use crate::nn::UpConv;
use crate::params::{Forward, ParamLayout};
use crate::tensor::Element;
use crate::tokenization::{
    embed_tokens, featuremap_to_tokens, grid_to_tokens, patchify, to_channels_last, tokens_to_grid, EmbeddingParams,
    PatchGrid, TokenSequence,
};

/// Expands the ViT grid 2× per side (4× the tokens) and merges it with the
/// CNN tokens on the doubled grid.
pub fn late_fusion_combine<T: Element>(
    f: &mut Forward<T>,
    vit: &TokenSequence,
    cnn: &TokenSequence,
    variant: CombineVariant,
    upconv: Option<&UpConv>,
) -> Result<TokenSequence> {
    let (vg, cg) = (vit.grid, cnn.grid);
    if cg.grid_h != 2 * vg.grid_h || cg.grid_w != 2 * vg.grid_w {
        return Err(shape_err(
            "late_fusion_combine",
            format!("CNN grid {}x{} must be twice the ViT grid {}x{}", cg.grid_h, cg.grid_w, vg.grid_h, vg.grid_w),
        ));
    }
    let (dv, dc) = (f.shape(vit.tokens)[2], f.shape(cnn.tokens)[2]);
    if !variant.concatenates() && dv != dc {
        return Err(shape_err("late_fusion_combine", format!("add needs equal channels, got {dv} and {dc}")));
    }
    if cnn.has_class_token {
        return Err(Error::InvalidArgument { op: "late_fusion_combine", detail: "class tokens are not used here".into() });
    }
    let grid = tokens_to_grid(f, vit)?;
    let expanded = if variant.uses_upconv() {
        let up = upconv.ok_or_else(|| Error::InvalidArgument {
            op: "late_fusion_combine",
            detail: "UpConv variant needs its transposed-convolution parameters".into(),
        })?;
        up.forward(f, grid)?
    } else {
        f.upsample_nearest(grid, 2)?
    };
    let expanded = grid_to_tokens(f, expanded, cg.patch)?;
    let tokens = if variant.concatenates() {
        f.concat(&[expanded.tokens, cnn.tokens], 2)?
    } else {
        f.add(expanded.tokens, cnn.tokens)?
    };
    Ok(TokenSequence { tokens, grid: cg, has_class_token: false })
}

#[derive(Debug, Clone)]
pub struct LateFusion {
    pub backbone: Backbone,
    /// Backbone map feeding the CNN stream: the one at stride `P/2`.
    pub cnn_stage: usize,
    pub vit_embed: EmbeddingParams,
    pub cnn_embed: EmbeddingParams,
    pub vit_encoder: EncoderStack,
    pub cnn_encoder: EncoderStack,
    pub variant: CombineVariant,
    pub upconv: Option<UpConv>,
    pub head: Head,
    pub patch: usize,
}

impl LateFusion {
    pub fn new(layout: &mut ParamLayout, cfg: &ModelConfig) -> Result<Self> {
        let [h, w] = cfg.image_size;
        let vit_grid = PatchGrid::new(h, w, cfg.patch_size)?;
        let cnn_stage = (1..=NUM_STAGES)
            .find(|&s| 2 * cfg.backbone.stride(s) == cfg.patch_size)
            .ok_or_else(|| {
                Error::Config(format!(
                    "late fusion needs a backbone stage at stride P/2 = {}/2; none exists",
                    cfg.patch_size
                ))
            })?;
        let stride = cfg.backbone.stride(cnn_stage);
        let cnn_grid = PatchGrid::pixels(h / stride, w / stride);
        let variant = cfg.combine();
        let d = cfg.dim;
        let backbone = Backbone::truncated(layout, "backbone", &cfg.backbone, cnn_stage)?;
        let vit_embed = EmbeddingParams::new(layout, "vit_embed", cfg.patch_size * cfg.patch_size * 3, vit_grid.num_tokens(), d);
        let cnn_embed = EmbeddingParams::new(layout, "cnn_embed", cfg.backbone.channels(cnn_stage), cnn_grid.num_tokens(), d);
        let vit_encoder = EncoderStack::new(layout, "vit_encoder", &cfg.encoder(cfg.depths.late_vit), cfg.identity_init)?;
        let cnn_encoder = EncoderStack::new(layout, "cnn_encoder", &cfg.encoder(cfg.depths.late_cnn), cfg.identity_init)?;
        let upconv = variant.uses_upconv().then(|| UpConv::new(layout, "combine.upconv", d, d, 2));
        let out_dim = if variant.concatenates() { 2 * d } else { d };
        let head = Head::new(layout, "head", cfg.head_type, cnn_grid.num_tokens(), out_dim, cfg.num_classes);
        Ok(Self { backbone, cnn_stage, vit_embed, cnn_embed, vit_encoder, cnn_encoder, variant, upconv, head, patch: cfg.patch_size })
    }

    /// Combined tokens ahead of the head.
    pub fn tokens<T: Element>(&self, f: &mut Forward<T>, image: NodeId) -> Result<TokenSequence> {
        let nhwc = to_channels_last(f, image)?;
        let (patches, grid) = patchify(f, nhwc, self.patch)?;
        let vit = embed_tokens(f, patches, grid, &self.vit_embed)?;
        let vit_out = self.vit_encoder.forward(f, vit.tokens)?;
        let vit = TokenSequence { tokens: vit_out, ..vit };

        let maps = self.backbone.forward(f, image)?;
        let cnn = featuremap_to_tokens(f, maps.stage(self.cnn_stage), &self.cnn_embed)?;
        let cnn_out = self.cnn_encoder.forward(f, cnn.tokens)?;
        let cnn = TokenSequence { tokens: cnn_out, ..cnn };

        late_fusion_combine(f, &vit, &cnn, self.variant, self.upconv.as_ref())
    }

    pub fn forward<T: Element>(&self, f: &mut Forward<T>, image: NodeId) -> Result<NodeId> {
        let seq = self.tokens(f, image)?;
        self.head.forward(f, seq.tokens)
    }
}
