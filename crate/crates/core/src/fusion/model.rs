use crate::autodiff::NodeId;
use crate::error::{shape_err, Result};
use crate::fusion::config::{FusionMethod, ModelConfig};
use crate::fusion::early::EarlyFusion;
use crate::fusion::late::LateFusion;
use crate::fusion::mixing::LayerByLayer;
use crate::params::{Forward, ParamLayout, ParamReport};
use crate::tensor::{Element, Tensor};
use crate::tokenization::TokenSequence;

#[derive(Debug, Clone)]
pub enum Network {
    Late(LateFusion),
    Early(EarlyFusion),
    LayerByLayer(LayerByLayer),
}

/// A built model: its structure and parameter declarations. Parameter values
/// live outside the model so one structure serves both dtypes and any number
/// of parameter sets.
#[derive(Debug, Clone)]
pub struct FusionModel {
    cfg: ModelConfig,
    layout: ParamLayout,
    net: Network,
}

/// Validates `cfg` (including the block budget) and declares every parameter.
/// Nothing is allocated until [`FusionModel::init_params`].
pub fn build_model(cfg: &ModelConfig) -> Result<FusionModel> {
    cfg.validate()?;
    let mut layout = ParamLayout::new();
    let net = match cfg.fusion_method {
        FusionMethod::LateParallel => Network::Late(LateFusion::new(&mut layout, cfg)?),
        FusionMethod::EarlyFusion => Network::Early(EarlyFusion::new(&mut layout, cfg)?),
        FusionMethod::LayerByLayer => Network::LayerByLayer(LayerByLayer::new(&mut layout, cfg)?),
    };
    Ok(FusionModel { cfg: cfg.clone(), layout, net })
}

/// Parameter totals, overall and per top-level module.
pub fn count_params(model: &FusionModel) -> ParamReport {
    model.layout.count()
}

pub struct StepOutput<T> {
    pub loss: T,
    pub logits: Tensor<T>,
    pub grads: Vec<Tensor<T>>,
    pub encoder_blocks_run: usize,
}

impl FusionModel {
    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    pub fn network(&self) -> &Network {
        &self.net
    }

    pub fn init_params<T: Element>(&self, seed: u64) -> Vec<Tensor<T>> {
        self.layout.init(seed)
    }

    /// Whether parameter `index` belongs to the CNN backbone.
    pub fn is_backbone_param(&self, index: usize) -> bool {
        self.layout.specs()[index].module() == "backbone"
    }

    fn check_images(&self, shape: &[usize]) -> Result<()> {
        let [h, w] = self.cfg.image_size;
        if shape.len() != 4 || shape[1] != 3 || shape[2] != h || shape[3] != w {
            return Err(shape_err("model", format!("expected images [B,3,{h},{w}], got {shape:?}")));
        }
        Ok(())
    }

    /// Tokens handed to the classification head.
    pub fn head_tokens<T: Element>(&self, f: &mut Forward<T>, images: NodeId) -> Result<TokenSequence> {
        self.check_images(f.shape(images))?;
        match &self.net {
            Network::Late(m) => m.tokens(f, images),
            Network::Early(m) => m.tokens(f, images),
            Network::LayerByLayer(m) => m.tokens(f, images),
        }
    }

    /// `images: [B,3,H,W] → logits: [B,K]`
    pub fn forward<T: Element>(&self, f: &mut Forward<T>, images: NodeId) -> Result<NodeId> {
        self.check_images(f.shape(images))?;
        match &self.net {
            Network::Late(m) => m.forward(f, images),
            Network::Early(m) => m.forward(f, images),
            Network::LayerByLayer(m) => m.forward(f, images),
        }
    }

    pub fn logits<T: Element>(&self, params: &[Tensor<T>], images: &Tensor<T>) -> Result<Tensor<T>> {
        let mut f = Forward::new(params);
        let x = f.input(images.clone());
        let logits = self.forward(&mut f, x)?;
        Ok(f.value(logits).clone())
    }

    pub fn loss<T: Element>(&self, params: &[Tensor<T>], images: &Tensor<T>, labels: &[usize]) -> Result<T> {
        let mut f = Forward::new(params);
        let x = f.input(images.clone());
        let logits = self.forward(&mut f, x)?;
        let loss = f.cross_entropy(logits, labels)?;
        Ok(f.value(loss).data()[0])
    }

    /// Cross-entropy loss, logits and the gradient of every parameter.
    pub fn loss_and_grads<T: Element>(&self, params: &[Tensor<T>], images: &Tensor<T>, labels: &[usize]) -> Result<StepOutput<T>> {
        let mut f = Forward::new(params);
        let x = f.input(images.clone());
        let logits = self.forward(&mut f, x)?;
        let loss = f.cross_entropy(logits, labels)?;
        let grads = f.backward(loss)?;
        Ok(StepOutput {
            loss: f.value(loss).data()[0],
            logits: f.value(logits).clone(),
            grads: f.param_grads(&grads),
            encoder_blocks_run: f.encoder_blocks_run(),
        })
    }
}
