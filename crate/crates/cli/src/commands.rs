use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

use serde_json::json;
use tokenfusion::fusion::{all_variants, basic_variants, max_rel_err_by_module, GradCheckProblem};
use tokenfusion::train::{
    evaluate, load_dataset, run_training_with, DatasetSource, EpochControl, EpochMetrics, MetricsRecord, Prepared,
};
use tokenfusion::weights::{read_weights, write_weights};
use tokenfusion::{build_model, count_params, DType, Element, Error, FusionModel, GradCheckOptions, Tensor};

use crate::config::RunConfig;
use crate::error::CliError;
use crate::Common;

/// Largest model `gradcheck` accepts; each sampled coordinate costs two forward passes.
const GRADCHECK_MAX_PARAMS: usize = 2_000_000;

fn resolve(c: &Common) -> Result<RunConfig, CliError> {
    let mut cfg = RunConfig::load(c.config.as_deref(), &c.overrides)?;
    if let Some(seed) = c.seed {
        cfg.seed = seed;
        cfg.optim.seed = seed;
    }
    if let Some(out) = &c.out {
        cfg.out = out.clone();
    }
    if let Some(dir) = &c.dataset {
        cfg.dataset = DatasetSource::Cifar10 { dir: dir.clone() };
    }
    cfg.optim.validate()?;
    cfg.augment.validate()?;
    Ok(cfg)
}

fn output_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Output { path: path.display().to_string(), source }
}

fn write_resolved(cfg: &RunConfig) -> Result<(), CliError> {
    fs::create_dir_all(&cfg.out).map_err(output_err(&cfg.out))?;
    let path = cfg.out.join("resolved_config.json");
    fs::write(&path, cfg.to_json() + "\n").map_err(output_err(&path))
}

fn line_writer(path: &Path) -> Result<BufWriter<File>, CliError> {
    Ok(BufWriter::new(File::create(path).map_err(output_err(path))?))
}

pub fn train(c: &Common) -> Result<(), CliError> {
    let cfg = resolve(c)?;
    let model = build_model(&cfg.model)?;
    write_resolved(&cfg)?;
    match cfg.dtype {
        DType::Float32 => train_as::<f32>(&cfg, &model),
        DType::Float64 => train_as::<f64>(&cfg, &model),
    }
}

fn train_as<T: Element>(cfg: &RunConfig, model: &FusionModel) -> Result<(), CliError> {
    let dataset = load_dataset(&cfg.dataset)?;
    let mut params: Vec<Tensor<T>> = model.init_params(cfg.seed);
    let metrics_path = cfg.out.join("metrics.jsonl");
    let timing_path = cfg.out.join("timing.jsonl");
    let mut metrics = line_writer(&metrics_path)?;
    let mut timing = line_writer(&timing_path)?;
    let mut on_epoch = |m: &EpochMetrics| -> tokenfusion::Result<EpochControl> {
        writeln!(metrics, "{}", serde_json::to_string(&MetricsRecord::from(m)).expect("metrics serialize"))?;
        writeln!(timing, "{}", json!({ "epoch": m.epoch, "wall_ms": m.wall_ms }))?;
        metrics.flush()?;
        timing.flush()?;
        println!(
            "epoch {:>3}  loss {:.4}  train@1 {:.4}  val@1 {:.4}  val@5 {:.4}  ({} ms)",
            m.epoch, m.train_loss, m.train_acc1, m.val_acc1, m.val_acc5, m.wall_ms
        );
        Ok(EpochControl::Continue)
    };
    run_training_with(model, &mut params, &dataset, &cfg.optim, &cfg.augment, &mut on_epoch).map_err(|e| match e {
        Error::Io(source) => CliError::Output { path: metrics_path.display().to_string(), source },
        e => e.into(),
    })?;
    let weights_path = cfg.out.join("weights.bin");
    let mut w = line_writer(&weights_path)?;
    write_weights(&mut w, model.layout(), &params)?;
    w.flush().map_err(output_err(&weights_path))?;
    println!("wrote {}", weights_path.display());
    Ok(())
}

pub fn eval(c: &Common, weights: &Path) -> Result<(), CliError> {
    let cfg = resolve(c)?;
    let model = build_model(&cfg.model)?;
    if c.out.is_some() {
        write_resolved(&cfg)?;
    }
    match cfg.dtype {
        DType::Float32 => eval_as::<f32>(&cfg, &model, weights),
        DType::Float64 => eval_as::<f64>(&cfg, &model, weights),
    }
}

fn eval_as<T: Element>(cfg: &RunConfig, model: &FusionModel, weights: &Path) -> Result<(), CliError> {
    let file = File::open(weights).map_err(|e| Error::WeightFormat(format!("{}: {e}", weights.display())))?;
    let params: Vec<Tensor<T>> = read_weights(&mut std::io::BufReader::new(file), model.layout())?;
    let dataset = load_dataset(&cfg.dataset)?;
    let val = Prepared::<T>::new(&dataset.val, model)?;
    let m = evaluate(model, &params, &val, cfg.optim.batch_size)?;
    println!("loss {:.6}  acc@1 {:.4}  acc@5 {:.4}  ({} samples)", m.loss, m.acc1, m.acc5, val.len());
    println!("{}", json!({ "loss": m.loss, "acc1": m.acc1, "acc5": m.acc5, "samples": val.len() }));
    Ok(())
}

pub fn gradcheck(c: &Common, inject_fault: bool) -> Result<(), CliError> {
    let cfg = resolve(c)?;
    if cfg.dtype == DType::Float32 {
        eprintln!("warning: dtype float32 requested; gradient verification always runs in float64");
    }
    let settings = &cfg.gradcheck;
    let model_cfg = if settings.minimal_depth { cfg.model.clone().relaxed_minimal() } else { cfg.model.clone() };
    let model = build_model(&model_cfg)?;
    let total = count_params(&model).total;
    if total > GRADCHECK_MAX_PARAMS {
        return Err(CliError::Config(format!(
            "gradcheck needs a toy-scale model (at most {GRADCHECK_MAX_PARAMS} parameters), this one has {total}"
        )));
    }
    if c.out.is_some() {
        write_resolved(&cfg)?;
    }
    let problem = GradCheckProblem::new(&model, cfg.seed);
    let mut analytic = problem.analytic(&model)?;
    if inject_fault {
        for g in &mut analytic {
            *g = g.map(|v| v * 2.0);
        }
    }
    let opts = GradCheckOptions {
        eps: settings.eps,
        tol: settings.tol,
        max_per_tensor: settings.max_per_tensor,
        max_total: settings.max_total,
        seed: cfg.seed,
        stencil: settings.stencil,
    };
    let report = problem.check(&model, &analytic, &opts)?;
    println!("{}", model_cfg.variant_name());
    for (module, err) in max_rel_err_by_module(&model, &report) {
        println!("  {module:<16} max_rel_err {err:.3e}  {}", if err < opts.tol { "pass" } else { "FAIL" });
    }
    println!(
        "checked {} coordinates: max_rel_err {:.3e} (tol {:e})  {}",
        report.checked(),
        report.max_rel_err,
        opts.tol,
        if report.pass { "PASS" } else { "FAIL" }
    );
    let worst = report.worst_coordinate.map(|w| json!({ "tensor": model.layout().specs()[w.tensor].name, "index": w.index }));
    println!(
        "{}",
        json!({ "variant": model_cfg.variant_name(), "checked": report.checked(), "max_rel_err": report.max_rel_err, "tol": opts.tol, "pass": report.pass, "worst": worst })
    );
    if report.pass {
        Ok(())
    } else {
        Err(CliError::GradCheckFailed { max_rel_err: report.max_rel_err, tol: opts.tol })
    }
}

/// `123456789` → `"123.5M"`
pub fn millions(n: usize) -> String {
    format!("{:.1}M", n as f64 / 1e6)
}

pub fn params(c: &Common) -> Result<(), CliError> {
    let cfg = resolve(c)?;
    let model = build_model(&cfg.model)?;
    if c.out.is_some() {
        write_resolved(&cfg)?;
    }
    let report = count_params(&model);
    println!("{}", cfg.model.variant_name());
    println!("{:<20} {:>14}", "module", "parameters");
    for (module, n) in &report.per_module {
        println!("{module:<20} {n:>14}");
    }
    println!("{:<20} {:>14}  ({})", "total", report.total, millions(report.total));
    println!(
        "{}",
        json!({ "variant": cfg.model.variant_name(), "total": report.total, "total_millions": millions(report.total), "per_module": report.per_module })
    );
    Ok(())
}

pub fn list_variants(as_json: bool) -> Result<(), CliError> {
    let basic = basic_variants().len();
    let rows: Vec<(String, &str)> =
        all_variants().iter().enumerate().map(|(i, v)| (v.name(), if i < basic { "basic" } else { "modified" })).collect();
    if as_json {
        let items: Vec<_> = rows.iter().map(|(name, group)| json!({ "name": name, "group": group })).collect();
        println!("{}", serde_json::Value::Array(items));
    } else {
        for (name, group) in rows {
            println!("{name:<45} {group}");
        }
    }
    Ok(())
}
