#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tokenfusion::{finite_diff_check, Forward, GradCheckOptions, GradCheckReport, NodeId, ParamLayout, Result, Tensor};

pub fn uniform(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data: Vec<f64> = (0..shape.iter().product()).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::from_f64(shape.to_vec(), &data).unwrap()
}

/// Finite-difference check of every parameter of a module, on the scalar
/// `sum(module(input) ⊙ R)` for a fixed random `R`.
pub fn module_gradcheck(
    layout: &ParamLayout,
    input: &Tensor<f64>,
    module: impl Fn(&mut Forward<f64>, NodeId) -> Result<NodeId>,
    opts: &GradCheckOptions,
) -> GradCheckReport {
    let params: Vec<Tensor<f64>> = layout.init_generic(5);
    let probe = {
        let mut f = Forward::new(&params);
        let x = f.input(input.clone());
        let y = module(&mut f, x).unwrap();
        uniform(f.shape(y), 77)
    };
    let scalar = |f: &mut Forward<f64>| -> Result<NodeId> {
        let x = f.input(input.clone());
        let y = module(f, x)?;
        let r = f.input(probe.clone());
        let prod = f.mul(y, r)?;
        f.sum(prod)
    };
    let mut f = Forward::new(&params);
    let loss = scalar(&mut f).unwrap();
    let grads = f.backward(loss).unwrap();
    let analytic = f.param_grads(&grads);
    finite_diff_check(
        |p| {
            let mut f = Forward::new(p);
            let l = scalar(&mut f)?;
            Ok(f.value(l).data()[0])
        },
        &params,
        &analytic,
        opts,
    )
    .unwrap()
}

/// Parameter count of `cfg` from the architecture's arithmetic alone,
/// written without the layout or any module constructor.
pub fn closed_form_params(cfg: &tokenfusion::ModelConfig) -> usize {
    use tokenfusion::fusion::{CombineVariant, FusionMethod, HeadType};
    let d = cfg.dim;
    let bb = &cfg.backbone;
    let [h, w] = cfg.image_size;
    // map s (1-based): channels and cumulative stride
    let chans = |s: usize| if s == 1 { bb.stem_channels } else { bb.stages[s - 2].out_channels };
    let stride = |s: usize| (2..=s).fold(2, |acc, i| acc * if i == 2 { 2 * bb.stages[0].stride } else { bb.stages[i - 2].stride });
    let pixels = |s: usize| (h / stride(s)) * (w / stride(s));

    let norm = |c: usize| 2 * c;
    let bottleneck = |cin: usize, cout: usize, s: usize| {
        let m = (cout / 4).max(1);
        let proj = if cin != cout || s != 1 { cin * cout + norm(cout) } else { 0 };
        cin * m + norm(m) + 9 * m * m + norm(m) + m * cout + norm(cout) + proj
    };
    let backbone = |last: usize| {
        let mut n = 49 * 3 * bb.stem_channels + norm(bb.stem_channels);
        let mut cin = bb.stem_channels;
        for st in &bb.stages[..last - 1] {
            for b in 0..st.num_blocks {
                n += bottleneck(cin, st.out_channels, if b == 0 { st.stride } else { 1 });
                cin = st.out_channels;
            }
        }
        n
    };
    let r = cfg.mlp_ratio;
    let block = (4 + 2 * r) * d * d + (8 + r) * d;
    let encoder = |depth: usize| depth * block;
    let embed = |k: usize, n: usize| k * d + n * d;
    let head = |n: usize, dim: usize| {
        let input = match cfg.head_type {
            HeadType::TokenWise => n,
            HeadType::ChannelWise => dim,
            HeadType::Mixing => n + dim,
        };
        input * cfg.num_classes + cfg.num_classes
    };
    let p = cfg.patch_size;
    let deps = &cfg.depths;
    match cfg.fusion_method {
        FusionMethod::LateParallel => {
            let s = (1..=5).find(|&s| 2 * stride(s) == p).expect("aligned stage");
            let variant = cfg.combine_variant.unwrap_or(CombineVariant::UpconvConcat);
            let upconv = matches!(variant, CombineVariant::UpconvConcat | CombineVariant::UpconvAdd);
            let concat = matches!(variant, CombineVariant::UpconvConcat | CombineVariant::CopyConcat);
            backbone(s)
                + embed(p * p * 3, (h / p) * (w / p))
                + embed(chans(s), pixels(s))
                + encoder(deps.late_vit)
                + encoder(deps.late_cnn)
                + if upconv { 4 * d * d + d } else { 0 }
                + head(pixels(s), if concat { 2 * d } else { d })
        }
        FusionMethod::EarlyFusion => {
            let variant = cfg.bridge_variant.unwrap_or(tokenfusion::fusion::BridgeVariant::UpconvMulti);
            let name = format!("{variant:?}");
            let learned = name.starts_with("Upconv");
            let bridge = |s: usize, out: usize| {
                let mut c = chans(s);
                let mut n = 0;
                if learned {
                    for _ in 0..stride(s).trailing_zeros() {
                        let next = (c / 2).max(4);
                        n += 4 * c * next + next;
                        c = next;
                    }
                }
                n + c * out + out
            };
            let bridges = if name.ends_with("Multi") { (1..=5).map(|s| bridge(s, 3)).sum() } else { bridge(5, 15) };
            let n = (h / p) * (w / p);
            backbone(5) + bridges + embed(p * p * 18, n) + encoder(deps.early) + head(n, d)
        }
        FusionMethod::LayerByLayer => {
            let cls = if cfg.use_class_token { 2 * d } else { 0 };
            let mixing: usize = (1..=5).map(|i| encoder(deps.mixing) + (d + chans((i + 1).min(5))) * d + d).sum();
            backbone(5) + embed(chans(1), pixels(1)) + cls + mixing + encoder(deps.tail)
                + head(pixels(5) + usize::from(cfg.use_class_token), d)
        }
    }
}
