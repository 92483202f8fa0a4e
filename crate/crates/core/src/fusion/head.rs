//! Pooling classification heads. All tokens feed the classifier; no class
//! token is singled out (a class token, when present, is pooled like any other).

use crate::autodiff::NodeId;
use crate::error::{shape_err, Result};
use crate::fusion::config::HeadType;
use crate::nn::Linear;
use crate::params::{Forward, Init, ParamLayout};
use crate::tensor::Element;

#[derive(Debug, Clone)]
pub struct Head {
    pub kind: HeadType,
    pub classifier: Linear,
    pub num_tokens: usize,
    pub dim: usize,
}

impl Head {
    /// Token-wise and mixing heads bind the token count `num_tokens` here.
    pub fn new(layout: &mut ParamLayout, name: &str, kind: HeadType, num_tokens: usize, dim: usize, classes: usize) -> Self {
        let in_dim = match kind {
            HeadType::TokenWise => num_tokens,
            HeadType::ChannelWise => dim,
            HeadType::Mixing => num_tokens + dim,
        };
        let classifier = Linear::new(layout, &format!("{name}.fc"), in_dim, classes, true, Init::EMBED);
        Self { kind, classifier, num_tokens, dim }
    }

    /// `tokens: [B,N,D] → logits: [B,K]`
    pub fn forward<T: Element>(&self, f: &mut Forward<T>, tokens: NodeId) -> Result<NodeId> {
        let s = f.shape(tokens).to_vec();
        if s.len() != 3 || s[2] != self.dim || (self.kind != HeadType::ChannelWise && s[1] != self.num_tokens) {
            return Err(shape_err(
                "head",
                format!("tokens {s:?} do not match a head built for N={}, D={}", self.num_tokens, self.dim),
            ));
        }
        let pooled = pool(f, self.kind, tokens)?;
        self.classifier.forward(f, pooled)
    }
}

/// The head's pooled feature vector: `[B,N]`, `[B,D]` or `[B,N+D]`.
pub fn pool<T: Element>(f: &mut Forward<T>, kind: HeadType, tokens: NodeId) -> Result<NodeId> {
    match kind {
        HeadType::TokenWise => f.mean(tokens, 2),
        HeadType::ChannelWise => f.mean(tokens, 1),
        HeadType::Mixing => {
            let by_token = f.mean(tokens, 2)?;
            let by_channel = f.mean(tokens, 1)?;
            f.concat(&[by_token, by_channel], 1)
        }
    }
}
