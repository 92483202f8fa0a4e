//! Parameterised building blocks shared by the backbone, encoder and fusion heads.

use crate::autodiff::NodeId;
use crate::error::Result;
use crate::params::{Forward, Init, ParamId, ParamLayout};
use crate::tensor::Element;

pub const NORM_EPS: f64 = 1e-5;

/// Affine map over the last axis, weight stored `[in, out]`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(layout: &mut ParamLayout, name: &str, in_dim: usize, out_dim: usize, bias: bool, init: Init) -> Self {
        let weight = layout.add(format!("{name}.weight"), [in_dim, out_dim], init);
        let bias = bias.then(|| layout.add(format!("{name}.bias"), [out_dim], Init::Zeros));
        Self { weight, bias, in_dim, out_dim }
    }

    pub fn forward<T: Element>(&self, f: &mut Forward<T>, x: NodeId) -> Result<NodeId> {
        let w = f.param(self.weight);
        let b = self.bias.map(|b| f.param(b));
        f.linear(x, w, b)
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        layout: &mut ParamLayout,
        name: &str,
        in_c: usize,
        out_c: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        bias: bool,
    ) -> Self {
        let fan_in = in_c * kernel * kernel;
        let weight = layout.add(format!("{name}.weight"), [out_c, in_c, kernel, kernel], Init::HeNormal { fan_in });
        let bias = bias.then(|| layout.add(format!("{name}.bias"), [out_c], Init::Zeros));
        Self { weight, bias, stride, pad }
    }

    pub fn forward<T: Element>(&self, f: &mut Forward<T>, x: NodeId) -> Result<NodeId> {
        let w = f.param(self.weight);
        let b = self.bias.map(|b| f.param(b));
        f.conv2d(x, w, b, self.stride, self.pad)
    }
}

/// Learned upsampling: transposed convolution with kernel = stride, no padding.
#[derive(Debug, Clone)]
pub struct UpConv {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
}

impl UpConv {
    pub fn new(layout: &mut ParamLayout, name: &str, in_c: usize, out_c: usize, stride: usize) -> Self {
        let weight = layout.add(
            format!("{name}.weight"),
            [in_c, out_c, stride, stride],
            Init::HeNormal { fan_in: in_c },
        );
        let bias = layout.add(format!("{name}.bias"), [out_c], Init::Zeros);
        Self { weight, bias, stride }
    }

    pub fn forward<T: Element>(&self, f: &mut Forward<T>, x: NodeId) -> Result<NodeId> {
        let w = f.param(self.weight);
        let b = f.param(self.bias);
        f.conv_transpose2d(x, w, Some(b), self.stride, 0, 0)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(layout: &mut ParamLayout, name: &str, dim: usize) -> Self {
        Self {
            gamma: layout.add(format!("{name}.gamma"), [dim], Init::Ones),
            beta: layout.add(format!("{name}.beta"), [dim], Init::Zeros),
        }
    }

    pub fn forward<T: Element>(&self, f: &mut Forward<T>, x: NodeId) -> Result<NodeId> {
        let g = f.param(self.gamma);
        let b = f.param(self.beta);
        f.layer_norm(x, g, b, NORM_EPS)
    }
}

/// Per-sample normalisation over all channels and positions of a feature
/// map (a single normalisation group) with per-channel affine parameters.
#[derive(Debug, Clone)]
pub struct ChannelNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl ChannelNorm {
    pub fn new(layout: &mut ParamLayout, name: &str, channels: usize) -> Self {
        Self {
            gamma: layout.add(format!("{name}.gamma"), [channels], Init::Ones),
            beta: layout.add(format!("{name}.beta"), [channels], Init::Zeros),
        }
    }

    pub fn forward<T: Element>(&self, f: &mut Forward<T>, x: NodeId) -> Result<NodeId> {
        let g = f.param(self.gamma);
        let b = f.param(self.beta);
        f.group_norm(x, g, b, 1, NORM_EPS)
    }
}
