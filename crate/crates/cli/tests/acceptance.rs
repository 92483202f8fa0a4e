//! End-to-end acceptance suite. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any fails. Positional arguments filter criteria by name.

#[path = "../../core/tests/common/mod.rs"]
mod common;

use std::panic::{self, AssertUnwindSafe};
use std::path::Path;
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use common::{closed_form_params, uniform};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tokenfusion::encoder::{mhsa_with_weights, BlockParams, EncoderStack};
use tokenfusion::fusion::{
    all_variants, basic_variants, build_model, check_model_gradients, count_params, end_to_end_options, modified_variants,
    BridgeVariant, FusionMethod, Head, HeadType, ModelConfig, Network, UNIFIED_CHANNELS,
};
use tokenfusion::tokenization::{embed_tokens, patchify, EmbeddingParams};
use tokenfusion::train::preprocess::{apply_augment, hflip, preprocess, vflip, AugmentDraw, IMAGENET_MEAN, IMAGENET_STD};
use tokenfusion::train::{
    evaluate, run_training_with, synthetic, AugmentConfig, Dataset, EpochControl, OptimConfig, Prepared, Sample, SyntheticSpec,
};
use tokenfusion::{EncoderConfig, Forward, Graph, ParamLayout, Tensor};

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

const GRADCHECK_LIMIT: Duration = Duration::from_secs(120);
const OVERFIT_LIMIT: Duration = Duration::from_secs(300);

fn gradient_fidelity() -> Outcome {
    let mut worst = 0.0f64;
    let mut slowest = Duration::ZERO;
    for v in basic_variants().into_iter().chain(modified_variants()) {
        let model = build_model(&v.apply(&ModelConfig::default()).relaxed_minimal()).map_err(|e| e.to_string())?;
        let start = Instant::now();
        let report = check_model_gradients(&model, 0, &end_to_end_options(0)).map_err(|e| e.to_string())?;
        let took = start.elapsed();
        println!("    {:<45} {} params  max_rel_err {:.2e}  {:.1?}", v.name(), report.checked(), report.max_rel_err, took);
        ensure!(report.checked() >= 100, "{}: only {} parameters sampled", v.name(), report.checked());
        ensure!(report.max_rel_err < 1e-5, "{}: max_rel_err {:.3e}", v.name(), report.max_rel_err);
        ensure!(took < GRADCHECK_LIMIT, "{}: took {took:.1?}", v.name());
        worst = worst.max(report.max_rel_err);
        slowest = slowest.max(took);
    }
    Ok(format!("16 configs, worst max_rel_err {worst:.2e}, slowest {slowest:.1?}"))
}

fn block_budget() -> Outcome {
    let images = uniform(&[1, 3, 32, 32], 1).cast::<f32>();
    for v in all_variants() {
        let cfg = v.apply(&ModelConfig::default());
        ensure!(!cfg.relax_block_budget, "{} is relaxed", v.name());
        let m = build_model(&cfg).map_err(|e| e.to_string())?;
        let params: Vec<Tensor<f32>> = m.init_params(0);
        let mut f = Forward::new(&params);
        let x = f.input(images.clone());
        m.forward(&mut f, x).map_err(|e| e.to_string())?;
        ensure!(f.encoder_blocks_run() == 12, "{}: {} blocks", v.name(), f.encoder_blocks_run());
    }
    Ok("12 encoder blocks per forward pass in all 16 configs".into())
}

fn early_fusion_channels() -> Outcome {
    for b in [BridgeVariant::UpconvMulti, BridgeVariant::CopyMulti, BridgeVariant::UpconvSingle, BridgeVariant::CopySingle] {
        let mut cfg = ModelConfig::toy(FusionMethod::EarlyFusion, HeadType::ChannelWise);
        cfg.bridge_variant = Some(b);
        let m = build_model(&cfg).map_err(|e| e.to_string())?;
        let Network::Early(e) = m.network() else { return Err("early fusion network expected".into()) };
        let params: Vec<Tensor<f64>> = m.init_params(0);
        let mut f = Forward::new(&params);
        let x = f.input(uniform(&[1, 3, 32, 32], 2));
        let u = e.unified_map(&mut f, x).map_err(|e| e.to_string())?;
        ensure!(f.shape(u) == [1, 18, 32, 32], "{b:?}: unified map {:?}", f.shape(u));
    }
    ensure!(UNIFIED_CHANNELS == 18, "UNIFIED_CHANNELS = {UNIFIED_CHANNELS}");
    Ok("unified map is H×W×18 for all four bridge variants".into())
}

fn embedded_shape(h: usize, w: usize, p: usize, d: usize) -> Result<(usize, Vec<usize>), String> {
    let n = (h / p) * (w / p);
    let mut layout = ParamLayout::new();
    let emb = EmbeddingParams::new(&mut layout, "embed", p * p * 3, n, d);
    let params: Vec<Tensor<f64>> = layout.init(0);
    let mut f = Forward::new(&params);
    let x = f.input(Tensor::zeros([1, h, w, 3]));
    let (patches, grid) = patchify(&mut f, x, p).map_err(|e| e.to_string())?;
    let seq = embed_tokens(&mut f, patches, grid, &emb).map_err(|e| e.to_string())?;
    Ok((grid.num_tokens(), f.shape(seq.tokens).to_vec()))
}

fn shape_law() -> Outcome {
    let (n, shape) = embedded_shape(224, 224, 16, 8)?;
    ensure!(n == 196 && shape == [1, 196, 8], "224/16: N = {n}, t0 {shape:?}");
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let cases = 200;
    for _ in 0..cases {
        let p = rng.random_range(1..=8);
        let (gh, gw) = (rng.random_range(1..=6), rng.random_range(1..=6));
        let d = rng.random_range(1..=8);
        let (n, shape) = embedded_shape(gh * p, gw * p, p, d)?;
        let expect = gh * p * gw * p / (p * p);
        ensure!(n == expect && shape == [1, expect, d], "H={} W={} P={p}: N = {n}, t0 {shape:?}", gh * p, gw * p);
    }
    Ok(format!("N = 196 at 224/16, and N = HW/P² over {cases} random (H,W,P)"))
}

fn residual_identity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst = 0.0f64;
    let cases = 50;
    for case in 0..cases {
        let heads = rng.random_range(1..=3);
        let cfg = EncoderConfig { depth: rng.random_range(1..=4), dim: heads * rng.random_range(1..=4), heads, mlp_ratio: rng.random_range(1..=4) };
        let mut layout = ParamLayout::new();
        let stack = EncoderStack::new(&mut layout, "enc", &cfg, true).map_err(|e| e.to_string())?;
        // generic values everywhere, then zero the two output projections
        let mut params: Vec<Tensor<f64>> = layout.init_generic(case);
        for b in &stack.blocks {
            for lin in [&b.attn.out, &b.fc2] {
                for id in std::iter::once(lin.weight).chain(lin.bias) {
                    params[id.index()] = Tensor::zeros(params[id.index()].shape().to_vec());
                }
            }
        }
        let x = uniform(&[rng.random_range(1..=2), rng.random_range(1..=6), cfg.dim], case);
        let mut f = Forward::new(&params);
        let xi = f.input(x.clone());
        let y = stack.forward(&mut f, xi).map_err(|e| e.to_string())?;
        let diff = f.value(y).max_abs_diff(&x).ok_or("shape mismatch")?;
        ensure!(diff < 1e-6, "{cfg:?}: deviation {diff:.2e}");
        worst = worst.max(diff);
    }
    Ok(format!("{cases} random stacks, max deviation {worst:.1e}"))
}

fn attention_normalization() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut worst = 0.0f64;
    let inputs = 1000;
    for i in 0..inputs {
        let heads = rng.random_range(1..=4);
        let cfg = EncoderConfig { depth: 1, dim: heads * rng.random_range(1..=4), heads, mlp_ratio: 1 };
        let n = rng.random_range(1..=12);
        let mut layout = ParamLayout::new();
        let block = BlockParams::new(&mut layout, "b", &cfg, false);
        let params: Vec<Tensor<f64>> = layout.init_generic(i);
        let scale = 10f64.powf(rng.random_range(-2.0..2.0));
        let mut f = Forward::new(&params);
        let x = f.input(uniform(&[rng.random_range(1..=2), n, cfg.dim], i).map(|v| v * scale));
        let (_, w) = mhsa_with_weights(&mut f, x, &block.attn).map_err(|e| e.to_string())?;
        for row in f.value(w).data().chunks(n) {
            worst = worst.max((row.iter().sum::<f64>() - 1.0).abs());
        }
    }
    ensure!(worst < 1e-6, "row sum off by {worst:.2e}");
    Ok(format!("{inputs} random inputs, max |row sum − 1| {worst:.1e}"))
}

fn permute(t: &Tensor<f64>, perm: &[usize]) -> Tensor<f64> {
    let (b, n, d) = (t.shape()[0], t.shape()[1], t.shape()[2]);
    let data = (0..b).flat_map(|s| perm.iter().flat_map(move |&i| t.data()[(s * n + i) * d..(s * n + i + 1) * d].to_vec())).collect();
    Tensor::from_vec([b, n, d], data).unwrap()
}

fn permutation_properties() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (mut eq, mut inv) = (0.0f64, 0.0f64);
    let cases = 50;
    for case in 0..cases {
        let heads = rng.random_range(1..=3);
        let cfg = EncoderConfig { depth: rng.random_range(1..=3), dim: heads * rng.random_range(1..=4), heads, mlp_ratio: 2 };
        let n = rng.random_range(2..=8);
        let mut perm: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            perm.swap(i, rng.random_range(0..=i));
        }
        let x = uniform(&[2, n, cfg.dim], case);

        let mut layout = ParamLayout::new();
        let stack = EncoderStack::new(&mut layout, "enc", &cfg, false).map_err(|e| e.to_string())?;
        let head = Head::new(&mut layout, "head", HeadType::ChannelWise, n, cfg.dim, 5);
        let params: Vec<Tensor<f64>> = layout.init_generic(case);
        let run = |x: Tensor<f64>| -> Result<(Tensor<f64>, Tensor<f64>), String> {
            let mut f = Forward::new(&params);
            let xi = f.input(x);
            let y = stack.forward(&mut f, xi).map_err(|e| e.to_string())?;
            let logits = head.forward(&mut f, y).map_err(|e| e.to_string())?;
            Ok((f.value(y).clone(), f.value(logits).clone()))
        };
        let (y, logits) = run(x.clone())?;
        let (yp, logits_p) = run(permute(&x, &perm))?;
        eq = eq.max(yp.max_abs_diff(&permute(&y, &perm)).ok_or("shape mismatch")?);
        inv = inv.max(logits_p.max_abs_diff(&logits).ok_or("shape mismatch")?);
    }
    ensure!(eq < 1e-5, "encoder equivariance off by {eq:.2e}");
    ensure!(inv < 1e-5, "channel-wise logits change by {inv:.2e}");
    Ok(format!("{cases} cases, equivariance {eq:.1e}, head invariance {inv:.1e}"))
}

fn conv_adjointness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut worst = 0.0f64;
    let mut checked = 0;
    while checked < 100 {
        let (b, c, o) = (rng.random_range(1..=2), rng.random_range(1..=3), rng.random_range(1..=3));
        let (h, w) = (rng.random_range(2..=8), rng.random_range(2..=8));
        let k = rng.random_range(1..=3);
        let stride = rng.random_range(1..=3);
        let pad = rng.random_range(0..k);
        if k > h.min(w) + 2 * pad {
            continue;
        }
        let seed = checked as u64;
        let mut g = Graph::new();
        let x = g.input(uniform(&[b, c, h, w], seed));
        let wt = g.input(uniform(&[o, c, k, k], seed + 1000));
        let y = g.conv2d(x, wt, None, stride, pad).map_err(|e| e.to_string())?;
        let ys = g.shape(y).to_vec();
        let probe = g.input(uniform(&ys, seed + 2000));
        // the transposed output is at most stride−1 short of the input; crop/pad handled by output_pad
        let oh = h - ((ys[2] - 1) * stride + k - 2 * pad);
        let ow = w - ((ys[3] - 1) * stride + k - 2 * pad);
        if oh != ow {
            continue;
        }
        let back = g.conv_transpose2d(probe, wt, None, stride, pad, oh).map_err(|e| e.to_string())?;
        ensure!(g.shape(back) == [b, c, h, w], "transposed shape {:?}", g.shape(back));
        let lhs = g.value(y).dot(g.value(probe)).ok_or("shape mismatch")?;
        let rhs = g.value(x).dot(g.value(back)).ok_or("shape mismatch")?;
        let err = (lhs - rhs).abs() / lhs.abs().max(1.0);
        ensure!(err < 1e-5, "b={b} c={c} o={o} {h}×{w} k={k} s={stride} p={pad}: {lhs} vs {rhs}");
        worst = worst.max(err);
        checked += 1;
    }
    Ok(format!("{checked} random shapes, max error {worst:.1e}"))
}

fn overfit() -> Outcome {
    let m = build_model(&ModelConfig::toy(FusionMethod::LayerByLayer, HeadType::ChannelWise)).map_err(|e| e.to_string())?;
    let data = synthetic(&SyntheticSpec { seed: 0, train: 32, val: 8, num_classes: 10, ..Default::default() }).map_err(|e| e.to_string())?;
    let classes: std::collections::BTreeSet<usize> = data.train.iter().map(|s| s.label).collect();
    ensure!(classes.len() == 10, "only {} classes among the 32 samples", classes.len());
    // one full batch per epoch, so epochs count optimizer steps
    let optim = OptimConfig { lr: 1e-3, weight_decay: 0.0, batch_size: 32, epochs: 500, seed: 0, ..Default::default() };
    let mut params: Vec<Tensor<f32>> = m.init_params(0);
    let start = Instant::now();
    let history = run_training_with(&m, &mut params, &data, &optim, &AugmentConfig::none(), |e| {
        Ok(if e.train_acc1 == 1.0 { EpochControl::Stop } else { EpochControl::Continue })
    })
    .map_err(|e| e.to_string())?;
    let took = start.elapsed();
    let last = history.last().ok_or("no epochs ran")?;
    ensure!(last.train_acc1 == 1.0, "train acc@1 {:.3} after {} steps", last.train_acc1, history.len());
    let train = Prepared::new(&data.train, &m).map_err(|e| e.to_string())?;
    let after = evaluate(&m, &params, &train, 32).map_err(|e| e.to_string())?;
    ensure!(took < OVERFIT_LIMIT, "took {took:.1?}");
    ensure!(history.iter().all(|e| e.val_acc5 >= e.val_acc1), "acc@5 < acc@1 during training");
    Ok(format!("100% after {} steps in {took:.1?} (post-training train acc@1 {:.3})", history.len(), after.acc1))
}

fn metric_sanity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let random: Vec<Sample> = (0..64)
        .map(|_| Sample::new((0..32 * 32 * 3).map(|_| rng.random::<u8>()).collect(), 32, 32, 3, rng.random_range(0..10)))
        .collect::<Result<_, _>>()
        .map_err(|e| e.to_string())?;
    let ln_k = 10f64.ln();
    let mut worst = 0.0f64;
    for v in all_variants() {
        let m = build_model(&v.apply(&ModelConfig::default())).map_err(|e| e.to_string())?;
        let params: Vec<Tensor<f32>> = m.init_params(1);
        let val = Prepared::new(&random, &m).map_err(|e| e.to_string())?;
        let e = evaluate(&m, &params, &val, 32).map_err(|e| e.to_string())?;
        ensure!(e.acc5 >= e.acc1, "{}: acc@5 {} < acc@1 {}", v.name(), e.acc5, e.acc1);
        let rel = (e.loss - ln_k).abs() / ln_k;
        ensure!(rel < 0.1, "{}: fresh loss {:.4} vs ln K {ln_k:.4}", v.name(), e.loss);
        worst = worst.max(rel);
    }
    let data = Dataset::new(random.clone(), random, 10).map_err(|e| e.to_string())?;
    let m = build_model(&ModelConfig::toy(FusionMethod::LateParallel, HeadType::Mixing)).map_err(|e| e.to_string())?;
    let mut params: Vec<Tensor<f32>> = m.init_params(2);
    let optim = OptimConfig { epochs: 3, seed: 2, ..Default::default() };
    let h = run_training_with(&m, &mut params, &data, &optim, &AugmentConfig::default(), |_| Ok(EpochControl::Continue))
        .map_err(|e| e.to_string())?;
    ensure!(h.iter().all(|e| e.val_acc5 >= e.val_acc1), "acc@5 < acc@1 during training");
    Ok(format!("fresh loss within {:.1}% of ln K for 16 configs; acc@5 ≥ acc@1 on every evaluation", 100.0 * worst))
}

fn parameter_accounting() -> Outcome {
    let documented = [
        ModelConfig::toy(FusionMethod::LateParallel, HeadType::TokenWise),
        ModelConfig::toy(FusionMethod::EarlyFusion, HeadType::ChannelWise),
        ModelConfig::toy(FusionMethod::LayerByLayer, HeadType::Mixing),
    ];
    let mut counts = Vec::new();
    for cfg in &documented {
        let got = count_params(&build_model(cfg).map_err(|e| e.to_string())?).total;
        let want = closed_form_params(cfg);
        ensure!(got == want, "{}: counted {got}, closed form {want}", cfg.variant_name());
        counts.push(format!("{} {got}", cfg.variant_name()));
    }
    let paper = ModelConfig::paper_scale(FusionMethod::LayerByLayer, HeadType::TokenWise);
    let total = count_params(&build_model(&paper).map_err(|e| e.to_string())?).total;
    ensure!(total == closed_form_params(&paper), "paper-scale count disagrees with the closed form");
    println!("    paper-scale layer_by_layer/token_wise: {total} parameters ({:.1}M; reference 140M, informational)", total as f64 / 1e6);
    ensure!((1e8..1e9).contains(&(total as f64)), "paper-scale total {total} is not of order 1e8");
    Ok(counts.join(", "))
}

fn cli_train(out: &Path) -> Result<Vec<u8>, String> {
    let o = Command::new(env!("CARGO_BIN_EXE_tokenfusion"))
        .args(["train", "--seed", "11", "--out", out.to_str().unwrap()])
        .args(["--set", "model.fusion_method=early_fusion", "--set", "dataset.train=16", "--set", "dataset.val=8"])
        .args(["--set", "optim.epochs=2", "--set", "optim.batch_size=8"])
        .output()
        .map_err(|e| e.to_string())?;
    ensure!(o.status.success(), "train failed: {}", String::from_utf8_lossy(&o.stderr));
    std::fs::read(out.join("metrics.jsonl")).map_err(|e| e.to_string())
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let a = cli_train(&dir.path().join("a"))?;
    let b = cli_train(&dir.path().join("b"))?;
    ensure!(!a.is_empty() && a == b, "metrics.jsonl differs between runs");
    Ok(format!("two runs wrote identical metrics.jsonl ({} bytes)", a.len()))
}

fn preprocessing() -> Outcome {
    ensure!(IMAGENET_MEAN == [0.485, 0.456, 0.406], "mean {IMAGENET_MEAN:?}");
    ensure!(IMAGENET_STD == [0.229, 0.224, 0.225], "std {IMAGENET_STD:?}");
    let rgb = [200u8, 100, 30];
    let flat = Sample::new(rgb.iter().copied().cycle().take(40 * 40 * 3).collect(), 40, 40, 3, 0).map_err(|e| e.to_string())?;
    let img: Tensor<f64> = preprocess(&flat, 32).map_err(|e| e.to_string())?;
    for (c, plane) in img.data().chunks(32 * 32).enumerate() {
        let want = (rgb[c] as f64 / 255.0 - IMAGENET_MEAN[c]) / IMAGENET_STD[c];
        ensure!(plane.iter().all(|v| (v - want).abs() < 1e-9), "channel {c} normalized to {} not {want}", plane[0]);
    }

    let defaults = AugmentConfig::default();
    ensure!(defaults.max_rotation_deg == 15.0, "rotation bound {}", defaults.max_rotation_deg);
    ensure!(defaults.hflip_prob > 0.0 && defaults.vflip_prob > 0.0, "flips disabled by default");
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for _ in 0..1000 {
        let d = AugmentDraw::sample(&defaults, &mut rng);
        ensure!(d.angle_deg.abs() <= 15.0, "drew {} degrees", d.angle_deg);
    }
    let x = uniform(&[3, 6, 5], 14);
    let only = |hflip_prob, vflip_prob| AugmentConfig { hflip_prob, vflip_prob, max_rotation_deg: 0.0 };
    let draw = |cfg: &AugmentConfig| AugmentDraw::sample(cfg, &mut ChaCha8Rng::seed_from_u64(0));
    let apply = |cfg: AugmentConfig| apply_augment(&x, draw(&cfg)).map_err(|e| e.to_string());
    ensure!(apply(only(1.0, 0.0))? == hflip(&x).map_err(|e| e.to_string())?, "horizontal flip alone");
    ensure!(apply(only(0.0, 1.0))? == vflip(&x).map_err(|e| e.to_string())?, "vertical flip alone");
    ensure!(apply(only(0.0, 0.0))? == x, "no augmentation");
    ensure!(hflip(&x).map_err(|e| e.to_string())? != vflip(&x).map_err(|e| e.to_string())?, "flips coincide");
    Ok("ImageNet mean/std, 15° rotation bound, independent h/v flips".into())
}

type Criterion = (&'static str, fn() -> Outcome);

const CRITERIA: [Criterion; 13] = [
    ("gradient_fidelity", gradient_fidelity),
    ("block_budget", block_budget),
    ("early_fusion_channels", early_fusion_channels),
    ("shape_law", shape_law),
    ("residual_identity", residual_identity),
    ("attention_normalization", attention_normalization),
    ("permutation_properties", permutation_properties),
    ("conv_adjointness", conv_adjointness),
    ("overfit", overfit),
    ("metric_sanity", metric_sanity),
    ("parameter_accounting", parameter_accounting),
    ("determinism", determinism),
    ("preprocessing", preprocessing),
];

fn main() -> ExitCode {
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    if std::env::args().any(|a| a == "--list") {
        for (name, _) in CRITERIA {
            println!("{name}: test");
        }
        return ExitCode::SUCCESS;
    }
    panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    let mut ran = 0;
    for (i, (name, run)) in CRITERIA.iter().enumerate() {
        if !filters.is_empty() && !filters.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        ran += 1;
        let start = Instant::now();
        let outcome = panic::catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|p| {
            Err(p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_else(|| "panicked".into()))
        });
        let took = start.elapsed();
        match outcome {
            Ok(detail) => println!("PASS {:>2} {name}: {detail} [{took:.1?}]", i + 1),
            Err(why) => {
                failed += 1;
                println!("FAIL {:>2} {name}: {why} [{took:.1?}]", i + 1);
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", ran - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
