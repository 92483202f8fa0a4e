//! Pre-LN transformer encoder: `t' = MHSA(LN(t)) + t`, `out = MLP(LN(t')) + t'`.

use serde::{Deserialize, Serialize};

use crate::autodiff::NodeId;
use crate::error::{shape_err, Error, Result};
use crate::nn::{LayerNorm, Linear};
use crate::params::{Forward, Init, ParamLayout};
use crate::tensor::Element;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub depth: usize,
    pub dim: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.heads == 0 || self.mlp_ratio == 0 {
            return Err(Error::Config("encoder dim, heads and mlp_ratio must be positive".into()));
        }
        if self.dim % self.heads != 0 {
            return Err(Error::Config(format!("{} heads do not divide model dim {}", self.heads, self.dim)));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    pub fn hidden(&self) -> usize {
        self.dim * self.mlp_ratio
    }
}

#[derive(Debug, Clone)]
pub struct Attention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub out: Linear,
    pub heads: usize,
}

#[derive(Debug, Clone)]
pub struct BlockParams {
    pub norm1: LayerNorm,
    pub attn: Attention,
    pub norm2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
}

impl BlockParams {
    /// With `identity_init` the attention output projection and the second MLP
    /// layer start at zero, making the block an exact identity.
    pub fn new(layout: &mut ParamLayout, name: &str, cfg: &EncoderConfig, identity_init: bool) -> Self {
        let d = cfg.dim;
        let out_init = if identity_init { Init::Zeros } else { Init::EMBED };
        let lin = |layout: &mut ParamLayout, n: &str, i, o, init| Linear::new(layout, &format!("{name}.{n}"), i, o, true, init);
        Self {
            norm1: LayerNorm::new(layout, &format!("{name}.norm1"), d),
            attn: Attention {
                query: lin(layout, "attn.q", d, d, Init::EMBED),
                // A key bias only shifts each query's scores by a constant, which
                // softmax cancels; its gradient is identically zero.
                key: Linear::new(layout, &format!("{name}.attn.k"), d, d, false, Init::EMBED),
                value: lin(layout, "attn.v", d, d, Init::EMBED),
                out: lin(layout, "attn.o", d, d, out_init),
                heads: cfg.heads,
            },
            norm2: LayerNorm::new(layout, &format!("{name}.norm2"), d),
            fc1: lin(layout, "mlp.fc1", d, cfg.hidden(), Init::EMBED),
            fc2: lin(layout, "mlp.fc2", cfg.hidden(), d, out_init),
        }
    }
}

/// Multi-head scaled dot-product self-attention over `[B,N,D]`. Returns the
/// output and the attention weights `[B,h,N,N]`.
pub fn mhsa_with_weights<T: Element>(f: &mut Forward<T>, x: NodeId, attn: &Attention) -> Result<(NodeId, NodeId)> {
    let s = f.shape(x).to_vec();
    if s.len() != 3 {
        return Err(shape_err("mhsa", format!("expected [B,N,D], got {s:?}")));
    }
    let (b, n, d) = (s[0], s[1], s[2]);
    let h = attn.heads;
    if h == 0 || d % h != 0 {
        return Err(Error::InvalidArgument { op: "mhsa", detail: format!("{h} heads do not divide model dim {d}") });
    }
    let dh = d / h;
    let split = |f: &mut Forward<T>, t: NodeId, axes: &[usize]| -> Result<NodeId> {
        let t = f.reshape(t, [b, n, h, dh])?;
        f.permute(t, axes)
    };
    let q = attn.query.forward(f, x)?;
    let q = split(f, q, &[0, 2, 1, 3])?;
    let k = attn.key.forward(f, x)?;
    let kt = split(f, k, &[0, 2, 3, 1])?;
    let v = attn.value.forward(f, x)?;
    let v = split(f, v, &[0, 2, 1, 3])?;
    let scores = f.batch_matmul(q, kt)?;
    let scores = f.scale(scores, T::from_f64(1.0 / (dh as f64).sqrt()))?;
    let weights = f.softmax(scores)?;
    let ctx = f.batch_matmul(weights, v)?;
    let ctx = f.permute(ctx, &[0, 2, 1, 3])?;
    let ctx = f.reshape(ctx, [b, n, d])?;
    let out = attn.out.forward(f, ctx)?;
    Ok((out, weights))
}

pub fn mhsa<T: Element>(f: &mut Forward<T>, x: NodeId, attn: &Attention) -> Result<NodeId> {
    mhsa_with_weights(f, x, attn).map(|(out, _)| out)
}

pub fn encoder_block<T: Element>(f: &mut Forward<T>, x: NodeId, p: &BlockParams) -> Result<NodeId> {
    f.count_encoder_block();
    let h = p.norm1.forward(f, x)?;
    let h = mhsa(f, h, &p.attn)?;
    let x = f.add(h, x)?;
    let h = p.norm2.forward(f, x)?;
    let h = p.fc1.forward(f, h)?;
    let h = f.gelu(h)?;
    let h = p.fc2.forward(f, h)?;
    f.add(h, x)
}

#[derive(Debug, Clone)]
pub struct EncoderStack {
    pub blocks: Vec<BlockParams>,
}

impl EncoderStack {
    pub fn new(layout: &mut ParamLayout, name: &str, cfg: &EncoderConfig, identity_init: bool) -> Result<Self> {
        cfg.validate()?;
        let blocks = (0..cfg.depth)
            .map(|i| BlockParams::new(layout, &format!("{name}.{i}"), cfg, identity_init))
            .collect();
        Ok(Self { blocks })
    }

    pub fn depth(&self) -> usize {
        self.blocks.len()
    }

    pub fn forward<T: Element>(&self, f: &mut Forward<T>, x: NodeId) -> Result<NodeId> {
        self.blocks.iter().try_fold(x, |x, b| encoder_block(f, x, b))
    }
}
