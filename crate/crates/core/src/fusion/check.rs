use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::{finite_diff_check, GradCheckOptions, GradCheckReport, Stencil};
use crate::error::Result;
use crate::fusion::model::FusionModel;
use crate::tensor::Tensor;

/// Batch size of the end-to-end gradient check.
pub const GRADCHECK_BATCH: usize = 2;

/// A float64 evaluation point for an end-to-end gradient check.
#[derive(Debug, Clone)]
pub struct GradCheckProblem {
    pub params: Vec<Tensor<f64>>,
    pub images: Tensor<f64>,
    pub labels: Vec<usize>,
}

impl GradCheckProblem {
    /// Generic parameters, standard-normal images and distinct labels.
    pub fn new(model: &FusionModel, seed: u64) -> Self {
        let cfg = model.config();
        let [h, w] = cfg.image_size;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<f64> = (0..GRADCHECK_BATCH * 3 * h * w).map(|_| StandardNormal.sample(&mut rng)).collect();
        let k = cfg.num_classes;
        Self {
            params: model.layout().init_generic(seed),
            images: Tensor::from_f64([GRADCHECK_BATCH, 3, h, w], &data).expect("image shape"),
            labels: (0..GRADCHECK_BATCH).map(|i| (1 + 6 * i) % k).collect(),
        }
    }

    /// Analytic gradients of the cross-entropy loss at this point.
    pub fn analytic(&self, model: &FusionModel) -> Result<Vec<Tensor<f64>>> {
        Ok(model.loss_and_grads(&self.params, &self.images, &self.labels)?.grads)
    }

    /// Checks `analytic` against finite differences of the loss.
    pub fn check(&self, model: &FusionModel, analytic: &[Tensor<f64>], opts: &GradCheckOptions) -> Result<GradCheckReport> {
        finite_diff_check(|p| model.loss(p, &self.images, &self.labels), &self.params, analytic, opts)
    }
}

/// Settings for whole-model checks: 100 sampled coordinates, at most 4 per
/// tensor, and an extrapolated difference so a wide step stays accurate.
/// A narrow plain central difference drowns small gradients in float64 roundoff.
pub fn end_to_end_options(seed: u64) -> GradCheckOptions {
    GradCheckOptions { eps: 3e-3, tol: 1e-5, max_per_tensor: 4, max_total: 100, seed, stencil: Stencil::Richardson }
}

/// Backpropagated gradients of `model` checked against finite differences.
pub fn check_model_gradients(model: &FusionModel, seed: u64, opts: &GradCheckOptions) -> Result<GradCheckReport> {
    let problem = GradCheckProblem::new(model, seed);
    let analytic = problem.analytic(model)?;
    problem.check(model, &analytic, opts)
}

/// Worst relative error per top-level module, over the sampled coordinates.
pub fn max_rel_err_by_module(model: &FusionModel, report: &GradCheckReport) -> BTreeMap<String, f64> {
    let specs = model.layout().specs();
    let mut out = BTreeMap::new();
    for c in &report.checks {
        let e = out.entry(specs[c.at.tensor].module().to_string()).or_insert(0.0f64);
        *e = e.max(c.rel_err);
    }
    out
}
