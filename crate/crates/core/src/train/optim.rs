use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::tensor::{Element, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    SgdMomentum,
    Adam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub algorithm: Algorithm,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub momentum: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Shuffling and augmentation seed. Filled from the run seed.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            algorithm: Algorithm::Adam,
            lr: 3e-4,
            weight_decay: 0.01,
            batch_size: 32,
            epochs: 10,
            momentum: 0.9,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be finite and >= 0, got {}", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config(format!("weight_decay must be >= 0, got {}", self.weight_decay)));
        }
        for (name, b) in [("momentum", self.momentum), ("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{name} must lie in [0,1), got {b}")));
            }
        }
        if !(self.adam_eps > 0.0) {
            return Err(Error::Config("adam_eps must be positive".into()));
        }
        Ok(())
    }
}

/// Per-parameter optimizer buffers. Frozen parameters are never updated.
#[derive(Debug, Clone)]
pub struct OptimState<T> {
    step: u64,
    first: Vec<Vec<T>>,
    second: Vec<Vec<T>>,
    frozen: Vec<bool>,
}

impl<T: Element> OptimState<T> {
    pub fn new(params: &[Tensor<T>], frozen: Vec<bool>) -> Self {
        assert_eq!(params.len(), frozen.len(), "one frozen flag per parameter");
        Self {
            step: 0,
            first: params.iter().map(|p| vec![T::zero(); p.numel()]).collect(),
            second: params.iter().map(|p| vec![T::zero(); p.numel()]).collect(),
            frozen,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }
}

/// One update of every trainable parameter.
///
/// SGD: `v ← μv + g; p ← p − lr·(v + wd·p)`.
/// Adam: bias-corrected moments with decoupled decay,
/// `p ← p − lr·(m̂/(√v̂ + ε) + wd·p)`.
pub fn optimizer_step<T: Element>(params: &mut [Tensor<T>], grads: &[Tensor<T>], state: &mut OptimState<T>, cfg: &OptimConfig) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.first.len() {
        return Err(shape_err("optimizer_step", format!("{} params, {} grads, {} state slots", params.len(), grads.len(), state.first.len())));
    }
    state.step += 1;
    let t = state.step as i32;
    let lr = T::from_f64(cfg.lr);
    let wd = T::from_f64(cfg.weight_decay);
    let mu = T::from_f64(cfg.momentum);
    let b1 = T::from_f64(cfg.beta1);
    let b2 = T::from_f64(cfg.beta2);
    let c1 = T::from_f64(1.0 - cfg.beta1.powi(t));
    let c2 = T::from_f64(1.0 - cfg.beta2.powi(t));
    let eps = T::from_f64(cfg.adam_eps);
    let one = T::one();
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        if state.frozen[i] {
            continue;
        }
        if p.shape() != g.shape() {
            return Err(shape_err("optimizer_step", format!("param {i} {:?} vs grad {:?}", p.shape(), g.shape())));
        }
        let m = &mut state.first[i];
        let v = &mut state.second[i];
        let pd = p.data_mut();
        match cfg.algorithm {
            Algorithm::SgdMomentum => {
                for ((w, &gj), mj) in pd.iter_mut().zip(g.data()).zip(m.iter_mut()) {
                    *mj = mu * *mj + gj;
                    *w = *w - lr * (*mj + wd * *w);
                }
            }
            Algorithm::Adam => {
                for (((w, &gj), mj), vj) in pd.iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                    *mj = b1 * *mj + (one - b1) * gj;
                    *vj = b2 * *vj + (one - b2) * gj * gj;
                    let mhat = *mj / c1;
                    let vhat = *vj / c2;
                    *w = *w - lr * (mhat / (vhat.sqrt() + eps) + wd * *w);
                }
            }
        }
    }
    Ok(())
}
