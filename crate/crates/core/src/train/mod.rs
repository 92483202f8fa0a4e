//! Data loading, preprocessing and augmentation, optimizers, top-k metrics and
//! the training loop.

pub mod data;
pub mod harness;
pub mod metrics;
pub mod optim;
pub mod preprocess;

pub use data::{load_dataset, parse_cifar10, synthetic, Dataset, DatasetSource, Sample, SyntheticSpec};
pub use harness::{evaluate, run_training, run_training_with, stack, EpochControl, EvalMetrics, Prepared};
pub use metrics::{evaluate_topk, topk_correct, EpochMetrics, MetricsRecord};
pub use optim::{optimizer_step, Algorithm, OptimConfig, OptimState};
pub use preprocess::{augment, preprocess, AugmentConfig, AugmentDraw, IMAGENET_MEAN, IMAGENET_STD};
