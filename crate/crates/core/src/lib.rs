//! Token fusion of CNN feature maps and ViT patch tokens for image
//! classification, built on a small reverse-mode autodiff core.

pub mod autodiff;
pub mod backbone;
pub mod encoder;
mod error;
pub mod fusion;
pub mod nn;
pub mod params;
pub mod tensor;
pub mod tokenization;
pub mod train;
pub mod weights;

pub use autodiff::{finite_diff_check, GradCheckOptions, GradCheckReport, Gradients, Graph, NodeId, Stencil};
pub use backbone::{BackboneConfig, StageFeatureMaps};
pub use encoder::EncoderConfig;
pub use error::{Error, Result};
pub use fusion::{build_model, count_params, FusionModel, ModelConfig};
pub use params::{Forward, ParamLayout, ParamReport};
pub use tensor::{DType, Element, Tensor};
pub use tokenization::{PatchGrid, TokenSequence};
