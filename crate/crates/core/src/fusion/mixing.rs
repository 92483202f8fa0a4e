//! Layer-by-layer fusion: five mixing blocks follow the backbone hierarchy,
//! each running encoder blocks on the token stream and then folding in the
//! pixels of the next backbone stage.

use crate::autodiff::NodeId;
use crate::backbone::{Backbone, NUM_STAGES};
use crate::encoder::EncoderStack;
use crate::error::{shape_err, Result};
use crate::fusion::config::{ModelConfig, NUM_MIXING_BLOCKS};
use crate::fusion::head::Head;
use crate::nn::Linear;
use crate::params::{Forward, Init, ParamId, ParamLayout};
use crate::tensor::{Element, Tensor};
use crate::tokenization::{
    featuremap_raw_tokens, featuremap_to_tokens, grid_to_tokens, join_class_token, split_class_token, tokens_to_grid,
    EmbeddingParams, TokenSequence,
};

#[derive(Debug, Clone)]
pub struct MixingBlock {
    pub encoder: EncoderStack,
    /// Backbone map whose pixels are concatenated onto the tokens.
    pub cnn_stage: usize,
    /// `(D + C) → D`
    pub projection: Linear,
}

impl MixingBlock {
    pub fn new(layout: &mut ParamLayout, name: &str, cfg: &ModelConfig, cnn_stage: usize) -> Result<Self> {
        let encoder = EncoderStack::new(layout, &format!("{name}.encoder"), &cfg.encoder(cfg.depths.mixing), cfg.identity_init)?;
        let in_dim = cfg.dim + cfg.backbone.channels(cnn_stage);
        let projection = Linear::new(layout, &format!("{name}.proj"), in_dim, cfg.dim, true, Init::LecunNormal { fan_in: in_dim });
        Ok(Self { encoder, cnn_stage, projection })
    }
}

/// Runs the block's encoder on `seq`, re-aligns the spatial tokens to the
/// grid of `stage_map` (2×2 average pooling when the token grid is twice as
/// fine, nothing when equal), concatenates each token with its pixel of
/// `stage_map` and projects back to D. A class token skips pooling and is
/// projected with a zero CNN part.
pub fn mixing_block_forward<T: Element>(
    f: &mut Forward<T>,
    seq: &TokenSequence,
    stage_map: NodeId,
    block: &MixingBlock,
) -> Result<TokenSequence> {
    let tokens = block.encoder.forward(f, seq.tokens)?;
    let seq = TokenSequence { tokens, ..*seq };
    let (cls, spatial) = split_class_token(f, &seq)?;

    let ms = f.shape(stage_map).to_vec();
    let g = spatial.grid;
    let spatial = if (g.grid_h, g.grid_w) == (ms[2], ms[3]) {
        spatial
    } else if (g.grid_h, g.grid_w) == (2 * ms[2], 2 * ms[3]) {
        let grid = tokens_to_grid(f, &spatial)?;
        let pooled = f.avg_pool2d(grid, 2)?;
        grid_to_tokens(f, pooled, g.patch * 2)?
    } else {
        return Err(shape_err(
            "mixing_block",
            format!("token grid {}x{} does not align with stage map {}x{}", g.grid_h, g.grid_w, ms[2], ms[3]),
        ));
    };

    let (pixels, _) = featuremap_raw_tokens(f, stage_map)?;
    let joined = f.concat(&[spatial.tokens, pixels], 2)?;
    let mixed = block.projection.forward(f, joined)?;
    let out = TokenSequence { tokens: mixed, ..spatial };
    match cls {
        None => Ok(out),
        Some(cls) => {
            let b = f.shape(cls)[0];
            let zeros = f.input(Tensor::zeros([b, 1, ms[1]]));
            let padded = f.concat(&[cls, zeros], 2)?;
            let cls = block.projection.forward(f, padded)?;
            join_class_token(f, cls, &out)
        }
    }
}

#[derive(Debug, Clone)]
pub struct ClassToken {
    pub token: ParamId,
    pub position: ParamId,
}

#[derive(Debug, Clone)]
pub struct LayerByLayer {
    pub backbone: Backbone,
    pub embed: EmbeddingParams,
    pub class_token: Option<ClassToken>,
    pub blocks: Vec<MixingBlock>,
    pub tail: EncoderStack,
    pub head: Head,
}

impl LayerByLayer {
    pub fn new(layout: &mut ParamLayout, cfg: &ModelConfig) -> Result<Self> {
        let [h, w] = cfg.image_size;
        let bb = &cfg.backbone;
        let backbone = Backbone::new(layout, "backbone", bb)?;
        let first = (h / bb.stride(1)) * (w / bb.stride(1));
        let embed = EmbeddingParams::new(layout, "embed", bb.channels(1), first, cfg.dim);
        let class_token = cfg.use_class_token.then(|| ClassToken {
            token: layout.add("class_token.token", [1, cfg.dim], Init::EMBED),
            position: layout.add("class_token.pos", [1, cfg.dim], Init::EMBED),
        });
        // Blocks 1..4 consume stages 2..5; block 5 reuses stage 5.
        let blocks = (1..=NUM_MIXING_BLOCKS)
            .map(|i| MixingBlock::new(layout, &format!("mixing{i}"), cfg, (i + 1).min(NUM_STAGES)))
            .collect::<Result<Vec<_>>>()?;
        let tail = EncoderStack::new(layout, "tail_encoder", &cfg.encoder(cfg.depths.tail), cfg.identity_init)?;
        let last = (h / bb.stride(NUM_STAGES)) * (w / bb.stride(NUM_STAGES)) + usize::from(cfg.use_class_token);
        let head = Head::new(layout, "head", cfg.head_type, last, cfg.dim, cfg.num_classes);
        Ok(Self { backbone, embed, class_token, blocks, tail, head })
    }

    pub fn tokens<T: Element>(&self, f: &mut Forward<T>, image: NodeId) -> Result<TokenSequence> {
        let maps = self.backbone.forward(f, image)?;
        let mut seq = featuremap_to_tokens(f, maps.stage(1), &self.embed)?;
        if let Some(ct) = &self.class_token {
            let b = f.shape(image)[0];
            let d = f.shape(seq.tokens)[2];
            let token = f.param(ct.token);
            let pos = f.param(ct.position);
            let cls = f.add(token, pos)?;
            let zeros = f.input(Tensor::zeros([b, 1, d]));
            let cls = f.add(zeros, cls)?;
            seq = join_class_token(f, cls, &seq)?;
        }
        for block in &self.blocks {
            seq = mixing_block_forward(f, &seq, maps.stage(block.cnn_stage), block)?;
        }
        let tokens = self.tail.forward(f, seq.tokens)?;
        Ok(TokenSequence { tokens, ..seq })
    }

    pub fn forward<T: Element>(&self, f: &mut Forward<T>, image: NodeId) -> Result<NodeId> {
        let seq = self.tokens(f, image)?;
        self.head.forward(f, seq.tokens)
    }
}
