use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::fusion::FusionModel;
use crate::tensor::{Element, Tensor};
use crate::train::data::{Dataset, Sample};
use crate::train::metrics::{topk_correct, EpochMetrics};
use crate::train::optim::{optimizer_step, OptimConfig, OptimState};
use crate::train::preprocess::{augment, preprocess, AugmentConfig};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalMetrics {
    pub loss: f64,
    pub acc1: f64,
    pub acc5: f64,
}

/// Preprocessed `[3,S,S]` images with their labels.
pub struct Prepared<T> {
    pub images: Vec<Tensor<T>>,
    pub labels: Vec<usize>,
}

impl<T: Element> Prepared<T> {
    pub fn new(samples: &[Sample], model: &FusionModel) -> Result<Self> {
        let [h, w] = model.config().image_size;
        if h != w {
            return Err(Error::Config(format!("preprocessing produces square crops, image_size is {h}x{w}")));
        }
        let classes = model.config().num_classes;
        if let Some(s) = samples.iter().find(|s| s.label >= classes) {
            return Err(Error::Dataset(format!("label {} out of range for a {classes}-class model", s.label)));
        }
        let images = samples.iter().map(|s| preprocess(s, h)).collect::<Result<_>>()?;
        Ok(Self { images, labels: samples.iter().map(|s| s.label).collect() })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Stacks `[3,S,S]` images into `[B,3,S,S]`.
pub fn stack<T: Element>(images: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = images.first().ok_or_else(|| Error::InvalidArgument { op: "stack", detail: "empty batch".into() })?;
    let mut shape = vec![images.len()];
    shape.extend_from_slice(first.shape());
    let mut data = Vec::with_capacity(images.len() * first.numel());
    for img in images {
        if img.shape() != first.shape() {
            return Err(Error::Shape { op: "stack", detail: format!("{:?} vs {:?}", img.shape(), first.shape()) });
        }
        data.extend_from_slice(img.data());
    }
    Tensor::from_vec(shape, data)
}

/// Loss and top-1/top-5 accuracy over `data`, without augmentation.
pub fn evaluate<T: Element>(model: &FusionModel, params: &[Tensor<T>], data: &Prepared<T>, batch_size: usize) -> Result<EvalMetrics> {
    if data.is_empty() {
        return Err(Error::Dataset("cannot evaluate an empty split".into()));
    }
    let (mut loss, mut top1, mut top5) = (0.0, 0, 0);
    let order: Vec<usize> = (0..data.len()).collect();
    for chunk in order.chunks(batch_size.max(1)) {
        let images = stack(&chunk.iter().map(|&i| &data.images[i]).collect::<Vec<_>>())?;
        let labels: Vec<usize> = chunk.iter().map(|&i| data.labels[i]).collect();
        let logits = model.logits(params, &images)?;
        let mut g = crate::Graph::new();
        let l = g.input(logits.clone());
        let ce = g.cross_entropy(l, &labels)?;
        loss += g.value(ce).data()[0].to_f64() * labels.len() as f64;
        top1 += topk_correct(&logits, &labels, 1)?;
        top5 += topk_correct(&logits, &labels, 5)?;
    }
    let n = data.len() as f64;
    Ok(EvalMetrics { loss: loss / n, acc1: top1 as f64 / n, acc5: top5 as f64 / n })
}

/// Trains `params` in place and returns one record per epoch.
pub fn run_training<T: Element>(
    model: &FusionModel,
    params: &mut [Tensor<T>],
    dataset: &Dataset,
    optim: &OptimConfig,
    aug: &AugmentConfig,
) -> Result<Vec<EpochMetrics>> {
    run_training_with(model, params, dataset, optim, aug, |_| Ok(EpochControl::Continue))
}

/// Returned by the per-epoch callback of [`run_training_with`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EpochControl {
    Continue,
    /// End training after this epoch.
    Stop,
}

/// [`run_training`], calling `on_epoch` as each epoch completes.
///
/// Each epoch shuffles the training split, augments every sample, then steps
/// the optimizer once per batch (the last batch may be short). Training
/// loss and accuracy are taken from the forward pass of each step.
/// `on_epoch` may end training early by returning [`EpochControl::Stop`].
pub fn run_training_with<T: Element>(
    model: &FusionModel,
    params: &mut [Tensor<T>],
    dataset: &Dataset,
    optim: &OptimConfig,
    aug: &AugmentConfig,
    mut on_epoch: impl FnMut(&EpochMetrics) -> Result<EpochControl>,
) -> Result<Vec<EpochMetrics>> {
    optim.validate()?;
    aug.validate()?;
    model.layout().check(params)?;
    if dataset.train.is_empty() || dataset.val.is_empty() {
        return Err(Error::Dataset("empty dataset".into()));
    }
    if optim.epochs == 0 {
        return Ok(Vec::new());
    }
    let train = Prepared::<T>::new(&dataset.train, model)?;
    let val = Prepared::<T>::new(&dataset.val, model)?;
    let frozen = (0..params.len()).map(|i| model.config().freeze_backbone && model.is_backbone_param(i)).collect();
    let mut state = OptimState::new(params, frozen);
    let mut rng = ChaCha8Rng::seed_from_u64(optim.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut history = Vec::with_capacity(optim.epochs);
    for epoch in 1..=optim.epochs {
        let start = Instant::now();
        order.shuffle(&mut rng);
        let (mut loss_sum, mut hits) = (0.0, 0);
        for chunk in order.chunks(optim.batch_size) {
            let images = chunk.iter().map(|&i| augment(&train.images[i], aug, &mut rng)).collect::<Result<Vec<_>>>()?;
            let images = stack(&images.iter().collect::<Vec<_>>())?;
            let labels: Vec<usize> = chunk.iter().map(|&i| train.labels[i]).collect();
            let out = model.loss_and_grads(params, &images, &labels)?;
            let loss = out.loss.to_f64();
            if !loss.is_finite() {
                return Err(Error::NonFinite(format!("training loss at epoch {epoch}")));
            }
            loss_sum += loss * labels.len() as f64;
            hits += topk_correct(&out.logits, &labels, 1)?;
            optimizer_step(params, &out.grads, &mut state, optim)?;
        }
        let eval = evaluate(model, params, &val, optim.batch_size)?;
        let n = train.len() as f64;
        let metrics = EpochMetrics {
            epoch,
            train_loss: loss_sum / n,
            train_acc1: hits as f64 / n,
            val_acc1: eval.acc1,
            val_acc5: eval.acc5,
            wall_ms: start.elapsed().as_millis() as u64,
        };
        let control = on_epoch(&metrics)?;
        history.push(metrics);
        if control == EpochControl::Stop {
            break;
        }
    }
    Ok(history)
}
