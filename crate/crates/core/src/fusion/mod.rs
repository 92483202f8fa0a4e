//! The three fusion architectures, their variants and pooling heads.

mod check;
pub mod config;
pub mod early;
pub mod head;
pub mod late;
pub mod mixing;
mod model;

pub use config::{
    all_variants, basic_variants, modified_variants, BridgeVariant, CombineVariant, DepthConfig, FusionMethod, HeadType,
    ModelConfig, Variant, BLOCK_BUDGET,
};
pub use check::{check_model_gradients, end_to_end_options, max_rel_err_by_module, GradCheckProblem, GRADCHECK_BATCH};
pub use early::{bridge_forward, UNIFIED_CHANNELS};
pub use head::Head;
pub use late::late_fusion_combine;
pub use mixing::mixing_block_forward;
pub use model::{build_model, count_params, FusionModel, Network, StepOutput};
