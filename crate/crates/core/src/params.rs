//! Parameter declarations, initialisation and the per-forward parameter binding.

use std::collections::BTreeMap;
use std::ops::{Deref, DerefMut};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::autodiff::{Gradients, Graph, NodeId};
use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub enum Init {
    Zeros,
    Ones,
    /// Normal with the given std, resampled outside ±2σ.
    TruncNormal { std: f64 },
    /// He fan-in: `N(0, 2 / fan_in)`.
    HeNormal { fan_in: usize },
    /// LeCun fan-in: `N(0, 1 / fan_in)`.
    LecunNormal { fan_in: usize },
}

impl Init {
    pub const EMBED: Init = Init::TruncNormal { std: 0.02 };
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

impl ParamSpec {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    /// Leading dotted component of the name, e.g. `backbone` for `backbone.stem.weight`.
    pub fn module(&self) -> &str {
        self.name.split('.').next().unwrap_or(&self.name)
    }
}

/// The ordered list of every trainable tensor of a model.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamLayout {
    specs: Vec<ParamSpec>,
}

impl ParamLayout {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, shape: impl Into<Vec<usize>>, init: Init) -> ParamId {
        let name = name.into();
        debug_assert!(self.find(&name).is_none(), "duplicate parameter {name}");
        self.specs.push(ParamSpec { name, shape: shape.into(), init });
        ParamId(self.specs.len() - 1)
    }

    pub fn specs(&self) -> &[ParamSpec] {
        &self.specs
    }

    pub fn spec(&self, id: ParamId) -> &ParamSpec {
        &self.specs[id.0]
    }

    pub fn len(&self) -> usize {
        self.specs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.specs.is_empty()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.specs.iter().position(|s| s.name == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.specs.len()).map(ParamId)
    }

    /// Draws every parameter from its declared initialiser. Values are drawn
    /// in `f64` from one seeded stream, so the two dtypes see the same numbers.
    pub fn init<T: Element>(&self, seed: u64) -> Vec<Tensor<T>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.specs
            .iter()
            .map(|s| {
                let n = s.numel();
                let data: Vec<f64> = match s.init {
                    Init::Zeros => vec![0.0; n],
                    Init::Ones => vec![1.0; n],
                    Init::TruncNormal { std } => (0..n).map(|_| trunc_normal(&mut rng) * std).collect(),
                    Init::HeNormal { fan_in } => normal_vec(&mut rng, n, (2.0 / fan_in as f64).sqrt()),
                    Init::LecunNormal { fan_in } => normal_vec(&mut rng, n, (1.0 / fan_in as f64).sqrt()),
                };
                Tensor::from_f64(s.shape.clone(), &data).expect("declared shape")
            })
            .collect()
    }

    /// A generic evaluation point for finite-difference checks: weights drawn
    /// at fan-in scale, norm gains, biases and shifts jittered away from their
    /// constant starting values. Near-zero initial scales leave many gradient
    /// coordinates at the level of float64 round-off, where relative errors are
    /// meaningless.
    pub fn init_generic<T: Element>(&self, seed: u64) -> Vec<Tensor<T>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
        self.specs
            .iter()
            .map(|s| {
                let n = s.numel();
                let data: Vec<f64> = match s.init {
                    Init::Zeros => normal_vec(&mut rng, n, 0.1),
                    Init::Ones => normal_vec(&mut rng, n, 0.1).into_iter().map(|v| 1.0 + v).collect(),
                    Init::TruncNormal { .. } => normal_vec(&mut rng, n, (1.0 / s.shape[0] as f64).sqrt()),
                    Init::HeNormal { fan_in } => normal_vec(&mut rng, n, (2.0 / fan_in as f64).sqrt()),
                    Init::LecunNormal { fan_in } => normal_vec(&mut rng, n, (1.0 / fan_in as f64).sqrt()),
                };
                Tensor::from_f64(s.shape.clone(), &data).expect("declared shape")
            })
            .collect()
    }

    /// Checks that `params` matches the declared shapes one-to-one.
    pub fn check<T: Element>(&self, params: &[Tensor<T>]) -> Result<()> {
        if params.len() != self.specs.len() {
            return Err(Error::WeightMismatch(format!(
                "model declares {} tensors, got {}",
                self.specs.len(),
                params.len()
            )));
        }
        for (s, p) in self.specs.iter().zip(params) {
            if s.shape != p.shape() {
                return Err(Error::WeightMismatch(format!(
                    "{} expects shape {:?}, got {:?}",
                    s.name,
                    s.shape,
                    p.shape()
                )));
            }
        }
        Ok(())
    }

    pub fn count(&self) -> ParamReport {
        let mut per_module = BTreeMap::new();
        for s in &self.specs {
            *per_module.entry(s.module().to_string()).or_insert(0) += s.numel();
        }
        ParamReport { total: per_module.values().sum(), per_module }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ParamReport {
    pub total: usize,
    pub per_module: BTreeMap<String, usize>,
}

fn trunc_normal(rng: &mut ChaCha8Rng) -> f64 {
    loop {
        let z: f64 = rng.sample(StandardNormal);
        if z.abs() <= 2.0 {
            return z;
        }
    }
}

fn normal_vec(rng: &mut ChaCha8Rng, n: usize, std: f64) -> Vec<f64> {
    (0..n).map(|_| rng.sample::<f64, _>(StandardNormal) * std).collect()
}

/// A tape bound to one set of parameter values for a single forward pass.
///
/// Each parameter is recorded as a leaf the first time it is used, so every
/// use shares one node and gradient contributions accumulate there.
pub struct Forward<'p, T> {
    graph: Graph<T>,
    params: &'p [Tensor<T>],
    nodes: Vec<Option<NodeId>>,
    encoder_blocks: usize,
}

impl<'p, T: Element> Forward<'p, T> {
    pub fn new(params: &'p [Tensor<T>]) -> Self {
        Self { graph: Graph::new(), params, nodes: vec![None; params.len()], encoder_blocks: 0 }
    }

    pub fn with_finite_checks(mut self, on: bool) -> Self {
        self.graph = self.graph.with_finite_checks(on);
        self
    }

    pub fn param(&mut self, id: ParamId) -> NodeId {
        if let Some(n) = self.nodes[id.0] {
            return n;
        }
        let n = self.graph.variable(self.params[id.0].clone());
        self.nodes[id.0] = Some(n);
        n
    }

    pub fn graph(&self) -> &Graph<T> {
        &self.graph
    }

    /// Number of transformer encoder blocks executed so far on this tape.
    pub fn encoder_blocks_run(&self) -> usize {
        self.encoder_blocks
    }

    pub(crate) fn count_encoder_block(&mut self) {
        self.encoder_blocks += 1;
    }

    /// Gradient for every parameter; parameters off the loss ancestry get zeros.
    pub fn param_grads(&self, grads: &Gradients<T>) -> Vec<Tensor<T>> {
        self.params
            .iter()
            .zip(&self.nodes)
            .map(|(p, n)| match n.and_then(|n| grads.get(n)) {
                Some(g) => g.clone(),
                None => Tensor::zeros(p.shape().to_vec()),
            })
            .collect()
    }
}

impl<T> Deref for Forward<'_, T> {
    type Target = Graph<T>;

    fn deref(&self) -> &Graph<T> {
        &self.graph
    }
}

impl<T> DerefMut for Forward<'_, T> {
    fn deref_mut(&mut self) -> &mut Graph<T> {
        &mut self.graph
    }
}
