//! Image patches and feature-map pixels as transformer tokens.

use crate::autodiff::NodeId;
use crate::error::{shape_err, Error, Result};
use crate::nn::Linear;
use crate::params::{Forward, Init, ParamId, ParamLayout};
use crate::tensor::Element;

/// Spatial layout of a token sequence: `grid_h × grid_w` tokens, each
/// covering a `patch × patch` window of its source.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchGrid {
    pub patch: usize,
    pub grid_h: usize,
    pub grid_w: usize,
}

impl PatchGrid {
    pub fn new(height: usize, width: usize, patch: usize) -> Result<Self> {
        if patch == 0 || height % patch != 0 || width % patch != 0 {
            return Err(shape_err(
                "patchify",
                format!("patch size {patch} does not divide image extent H={height}, W={width}"),
            ));
        }
        Ok(Self { patch, grid_h: height / patch, grid_w: width / patch })
    }

    /// One token per pixel of an `h × w` map.
    pub fn pixels(h: usize, w: usize) -> Self {
        Self { patch: 1, grid_h: h, grid_w: w }
    }

    pub fn num_tokens(&self) -> usize {
        self.grid_h * self.grid_w
    }
}

/// `tokens: [B, N, D]`; when `has_class_token`, row 0 is the class token and
/// `N == grid.num_tokens() + 1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TokenSequence {
    pub tokens: NodeId,
    pub grid: PatchGrid,
    pub has_class_token: bool,
}

impl TokenSequence {
    pub fn num_tokens(&self) -> usize {
        self.grid.num_tokens() + usize::from(self.has_class_token)
    }
}

/// Channels-first `[B,C,H,W]` to channels-last `[B,H,W,C]`.
pub fn to_channels_last<T: Element>(f: &mut Forward<T>, x: NodeId) -> Result<NodeId> {
    f.permute(x, &[0, 2, 3, 1])
}

/// `[B,H,W,C] → [B,N,P²·C]`. Patches in row-major grid order; inside a patch,
/// row-major pixel order with channels innermost.
pub fn patchify<T: Element>(f: &mut Forward<T>, image: NodeId, patch: usize) -> Result<(NodeId, PatchGrid)> {
    let s = f.shape(image).to_vec();
    if s.len() != 4 {
        return Err(shape_err("patchify", format!("expected [B,H,W,C], got {s:?}")));
    }
    let (b, h, w, c) = (s[0], s[1], s[2], s[3]);
    let grid = PatchGrid::new(h, w, patch)?;
    let x = f.reshape(image, [b, grid.grid_h, patch, grid.grid_w, patch, c])?;
    let x = f.permute(x, &[0, 1, 3, 2, 4, 5])?;
    let x = f.reshape(x, [b, grid.num_tokens(), patch * patch * c])?;
    Ok((x, grid))
}

/// Inverse of [`patchify`]: `[B,N,P²·C] → [B,H,W,C]`.
pub fn unpatchify<T: Element>(f: &mut Forward<T>, patches: NodeId, grid: PatchGrid, channels: usize) -> Result<NodeId> {
    let s = f.shape(patches).to_vec();
    let p = grid.patch;
    if s.len() != 3 || s[1] != grid.num_tokens() || s[2] != p * p * channels {
        return Err(shape_err("unpatchify", format!("{s:?} does not match {grid:?} with {channels} channels")));
    }
    let x = f.reshape(patches, [s[0], grid.grid_h, grid.grid_w, p, p, channels])?;
    let x = f.permute(x, &[0, 1, 3, 2, 4, 5])?;
    f.reshape(x, [s[0], grid.grid_h * p, grid.grid_w * p, channels])
}

/// Trainable projection `E ∈ R^{(P²·C)×D}` and position table `E_pos ∈ R^{N×D}`.
#[derive(Debug, Clone)]
pub struct EmbeddingParams {
    pub projection: Linear,
    pub position: ParamId,
    pub num_tokens: usize,
    pub dim: usize,
}

impl EmbeddingParams {
    pub fn new(layout: &mut ParamLayout, name: &str, in_dim: usize, num_tokens: usize, dim: usize) -> Self {
        Self {
            projection: Linear::new(layout, &format!("{name}.proj"), in_dim, dim, false, Init::EMBED),
            position: layout.add(format!("{name}.pos"), [num_tokens, dim], Init::EMBED),
            num_tokens,
            dim,
        }
    }
}

/// `t0[b,i] = patches[b,i] · E + E_pos[i]`.
pub fn embed_tokens<T: Element>(
    f: &mut Forward<T>,
    patches: NodeId,
    grid: PatchGrid,
    params: &EmbeddingParams,
) -> Result<TokenSequence> {
    let s = f.shape(patches).to_vec();
    if s.len() != 3 || s[1] != params.num_tokens || s[1] != grid.num_tokens() {
        return Err(shape_err(
            "embed_tokens",
            format!("{s:?} has a token count that does not match E_pos with {} rows", params.num_tokens),
        ));
    }
    let x = params.projection.forward(f, patches)?;
    let pos = f.param(params.position);
    let tokens = f.add(x, pos)?;
    Ok(TokenSequence { tokens, grid, has_class_token: false })
}

/// `[B,C,H,W] → [B,H·W,C]`: one raw token per pixel, row-major.
pub fn featuremap_raw_tokens<T: Element>(f: &mut Forward<T>, fm: NodeId) -> Result<(NodeId, PatchGrid)> {
    let s = f.shape(fm).to_vec();
    if s.len() != 4 {
        return Err(shape_err("featuremap_to_tokens", format!("expected [B,C,H,W], got {s:?}")));
    }
    let x = f.reshape(fm, [s[0], s[1], s[2] * s[3]])?;
    let x = f.permute(x, &[0, 2, 1])?;
    Ok((x, PatchGrid::pixels(s[2], s[3])))
}

/// Each pixel of the map becomes a token (patchify with P = 1) and is embedded
/// with its own `E ∈ R^{C×D}` and `E_pos ∈ R^{(H·W)×D}`.
pub fn featuremap_to_tokens<T: Element>(f: &mut Forward<T>, fm: NodeId, params: &EmbeddingParams) -> Result<TokenSequence> {
    let (raw, grid) = featuremap_raw_tokens(f, fm)?;
    embed_tokens(f, raw, grid, params)
}

/// `[B,N,D] → [B,D,grid_h,grid_w]`; token (r, c) lands at grid position [r, c].
pub fn tokens_to_grid<T: Element>(f: &mut Forward<T>, seq: &TokenSequence) -> Result<NodeId> {
    if seq.has_class_token {
        return Err(Error::InvalidArgument {
            op: "tokens_to_grid",
            detail: "detach the class token before mapping tokens onto a grid".into(),
        });
    }
    let s = f.shape(seq.tokens).to_vec();
    if s.len() != 3 || s[1] != seq.grid.num_tokens() {
        return Err(shape_err("tokens_to_grid", format!("{s:?} does not match {:?}", seq.grid)));
    }
    let x = f.permute(seq.tokens, &[0, 2, 1])?;
    f.reshape(x, [s[0], s[2], seq.grid.grid_h, seq.grid.grid_w])
}

/// Inverse of [`tokens_to_grid`].
pub fn grid_to_tokens<T: Element>(f: &mut Forward<T>, grid_map: NodeId, patch: usize) -> Result<TokenSequence> {
    let (tokens, mut grid) = featuremap_raw_tokens(f, grid_map)?;
    grid.patch = patch;
    Ok(TokenSequence { tokens, grid, has_class_token: false })
}

/// Splits a sequence into `(class token [B,1,D], spatial tokens)`.
pub fn split_class_token<T: Element>(f: &mut Forward<T>, seq: &TokenSequence) -> Result<(Option<NodeId>, TokenSequence)> {
    if !seq.has_class_token {
        return Ok((None, *seq));
    }
    let n = f.shape(seq.tokens)[1];
    let cls = f.slice(seq.tokens, 1, 0, 1)?;
    let rest = f.slice(seq.tokens, 1, 1, n - 1)?;
    Ok((Some(cls), TokenSequence { tokens: rest, grid: seq.grid, has_class_token: false }))
}

/// Prepends a class token `[B,1,D]` to a spatial sequence.
pub fn join_class_token<T: Element>(f: &mut Forward<T>, cls: NodeId, seq: &TokenSequence) -> Result<TokenSequence> {
    let tokens = f.concat(&[cls, seq.tokens], 1)?;
    Ok(TokenSequence { tokens, grid: seq.grid, has_class_token: true })
}
