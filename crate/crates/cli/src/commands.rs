use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::Args;
use struprune::admm::trace_csv;
use struprune::allocation::{
    binarize_by_threshold, relaxed_mask, softmax_allocate, unit_scores as rank_scores, ClosedFormContext, ScoreRule,
};
use struprune::eval::{memory_csv, memory_report, opt_family, ratio_csv, scaling_report};
use struprune::fixtures;
use struprune::fsutil::write_atomic;
use struprune::model::{
    capture_reference_activations, generate_toy_model, load_calibration, load_model, save_calibration, save_model,
    CalibrationSet, ModelArch, ToyModel,
};
use struprune::oracle::{energy_minimize_projected, enumerate_masks};
use struprune::pipeline::{
    build_plan, criterion_label, evaluate, importance_csv, infer_masks, keep_counts, masks_from_scores, parse_plan_csv,
    plan_csv, report_json, run, solve, sweep_csv, toy_memory_csv, unit_scores, write_run, Method, RunConfig,
};
use struprune::Rng;

use crate::args::{Inputs, Tuning};

#[derive(Debug, Args)]
pub struct GenArgs {
    #[arg(long, default_value_t = 16)]
    pub d: usize,
    #[arg(long, default_value_t = 2)]
    pub layers: usize,
    #[arg(long, default_value_t = 2)]
    pub heads: usize,
    /// FFN width; defaults to 4d.
    #[arg(long)]
    pub ffn_dim: Option<usize>,
    /// Vocabulary size; 0 builds a model without embedding and head.
    #[arg(long, default_value_t = 32)]
    pub vocab: usize,
    /// Layers contain only the FFN block.
    #[arg(long)]
    pub ffn_only: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Model directory to create.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct CalibrateArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long, default_value_t = 8)]
    pub samples: usize,
    #[arg(long, default_value_t = 8)]
    pub seq_len: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Calibration blob to write, e.g. `calib.bin`.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[command(flatten)]
    pub inputs: Inputs,
    #[command(flatten)]
    pub tuning: Tuning,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct AdmmArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// Existing plan.csv; computed from the method when absent.
    #[arg(long)]
    pub plan: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Pruned model directory.
    #[arg(long)]
    pub model: PathBuf,
    /// Dense reference model directory.
    #[arg(long)]
    pub dense: PathBuf,
    #[arg(long)]
    pub calib: PathBuf,
    /// Plan whose sparsities are echoed next to the achieved ones.
    #[arg(long)]
    pub plan: Option<PathBuf>,
    #[arg(long, default_value_t = 1.0)]
    pub alpha: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct MemoryArgs {
    /// Output directory; the parameter table goes to stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Random instances per check.
    #[arg(long, default_value_t = 20)]
    pub cases: usize,
}

/// Oracle checks that disagreed with the library.
#[derive(Debug)]
pub struct VerifyFailed(pub usize);

impl std::fmt::Display for VerifyFailed {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{} oracle check(s) failed", self.0)
    }
}

impl std::error::Error for VerifyFailed {}

fn create_dir(out: &Path) -> Result<()> {
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))
}

fn write(path: PathBuf, text: &str) -> Result<()> {
    write_atomic(&path, text.as_bytes())?;
    println!("wrote {}", path.display());
    Ok(())
}

fn load_inputs(inputs: &Inputs) -> Result<(ToyModel, CalibrationSet)> {
    let model = load_model(&inputs.model).with_context(|| format!("loading model {}", inputs.model.display()))?;
    let calib =
        load_calibration(&inputs.calib).with_context(|| format!("loading calibration {}", inputs.calib.display()))?;
    Ok((model, calib))
}

pub fn gen(a: &GenArgs) -> Result<()> {
    let mut arch = ModelArch::new(a.d, a.layers, a.heads).with_vocab(a.vocab);
    if let Some(f) = a.ffn_dim {
        arch.ffn_dim = f;
    }
    if a.ffn_only {
        arch = arch.ffn_only();
    }
    let model = generate_toy_model(arch, &mut Rng::new(a.seed))?;
    save_model(&model, &a.out)?;
    println!("wrote {} ({} parameters)", a.out.display(), model.param_count());
    Ok(())
}

pub fn calibrate(a: &CalibrateArgs) -> Result<()> {
    let model = load_model(&a.model)?;
    let mut rng = Rng::new(a.seed).fork(fixtures::CALIB_STREAM);
    let calib = if model.arch.vocab > 0 {
        CalibrationSet::tokens(&model, a.samples, a.seq_len, &mut rng)?
    } else {
        CalibrationSet::gaussian(a.samples, a.seq_len, model.arch.d, &mut rng)?
    };
    save_calibration(&calib, model.arch.d, model.arch.vocab, &a.out)?;
    println!("wrote {}", a.out.display());
    Ok(())
}

pub fn importance(a: &RunArgs) -> Result<()> {
    let cfg = a.tuning.resolve()?;
    let (model, calib) = load_inputs(&a.inputs)?;
    let cache = capture_reference_activations(&model, &calib)?;
    let scores = unit_scores(
        &model,
        &cache,
        cfg.method,
        cfg.solver.score_rule,
        &Rng::new(cfg.seed).fork(1),
    )?;
    create_dir(&a.out)?;
    write(
        a.out.join("importance.csv"),
        &importance_csv(&model, &scores, criterion_label(&cfg)),
    )
}

fn plan_outputs(a: &RunArgs, cfg: &RunConfig) -> Result<()> {
    let (model, calib) = load_inputs(&a.inputs)?;
    let cache = capture_reference_activations(&model, &calib)?;
    let scores = unit_scores(
        &model,
        &cache,
        cfg.method,
        cfg.solver.score_rule,
        &Rng::new(cfg.seed).fork(1),
    )?;
    let outcome = build_plan(&model, &cache, &scores, cfg)?;
    create_dir(&a.out)?;
    write(a.out.join("plan.csv"), &plan_csv(&outcome.plan))?;
    if let Some(s) = &outcome.sweep {
        write(a.out.join("sweep.csv"), &sweep_csv(s))?;
    }
    Ok(())
}

pub fn plan(a: &RunArgs) -> Result<()> {
    plan_outputs(a, &a.tuning.resolve()?)
}

pub fn sweep(a: &RunArgs) -> Result<()> {
    let cfg = a.tuning.resolve()?;
    if !matches!(cfg.method, Method::Softmax | Method::InverseWeight) {
        bail!("sweep needs --method softmax or inverse-weight, got {}", cfg.method);
    }
    if cfg.temperature.is_some() {
        bail!("sweep takes --t-grid (or the default grid), not a fixed --temperature");
    }
    plan_outputs(a, &cfg)
}

pub fn prune(a: &RunArgs) -> Result<()> {
    let cfg = a.tuning.resolve()?;
    let (model, calib) = load_inputs(&a.inputs)?;
    let result = run(&model, &calib, &cfg)?;
    write_run(&result, &model, &a.out)?;
    println!(
        "{}: loss {:.6e} (masked start {:.6e}), mean sparsity {:.4}; artifacts in {}",
        cfg.method,
        result.report.total_loss,
        result.report.initial_loss.unwrap_or(f64::NAN),
        result.report.mean_sparsity,
        a.out.display()
    );
    Ok(())
}

pub fn admm(a: &AdmmArgs) -> Result<()> {
    let cfg = a.run.tuning.resolve()?;
    if cfg.method.is_baseline() {
        bail!(
            "admm needs --method closed-form, softmax or inverse-weight, got {}",
            cfg.method
        );
    }
    let (model, calib) = load_inputs(&a.run.inputs)?;
    let cache = capture_reference_activations(&model, &calib)?;
    let scores = unit_scores(
        &model,
        &cache,
        cfg.method,
        cfg.solver.score_rule,
        &Rng::new(cfg.seed).fork(1),
    )?;
    let gran = cfg.solver.granularity;
    let keep = match &a.plan {
        Some(path) => {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            keep_counts(&model, &scores, &parse_plan_csv(&text)?, gran)?
        }
        None => build_plan(&model, &cache, &scores, &cfg)?.keep,
    };
    let masks = masks_from_scores(&model, &scores, &keep, gran)?;
    let (pruned, _, trace) = solve(&model, &cache, &masks, cfg.method, &cfg.solver)?;
    let out = &a.run.out;
    create_dir(out)?;
    save_model(&pruned, &out.join("model"))?;
    println!("wrote {}", out.join("model").display());
    write(out.join("trace.csv"), &trace_csv(&trace))
}

pub fn eval(a: &EvalArgs) -> Result<()> {
    let dense = load_model(&a.dense)?;
    let pruned = load_model(&a.model)?;
    if dense.arch != pruned.arch {
        bail!("pruned model architecture does not match the dense reference");
    }
    let calib = load_calibration(&a.calib)?;
    let plan = match &a.plan {
        Some(p) => Some(parse_plan_csv(
            &std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?,
        )?),
        None => None,
    };
    let cache = capture_reference_activations(&dense, &calib)?;
    let masks = infer_masks(&pruned);
    let report = evaluate(&dense, &pruned, &calib, &cache, &masks, plan.as_ref(), a.alpha)?;
    create_dir(&a.out)?;
    write(a.out.join("report.json"), &report_json(&report)?)?;
    write(a.out.join("memory.csv"), &toy_memory_csv(&dense, &pruned))?;
    println!(
        "loss {:.6e}, mean sparsity {:.4}",
        report.total_loss, report.mean_sparsity
    );
    Ok(())
}

pub fn memory(a: &MemoryArgs) -> Result<()> {
    let rows = memory_report(&opt_family());
    let Some(out) = &a.out else {
        print!("{}", memory_csv(&rows));
        return Ok(());
    };
    create_dir(out)?;
    write(out.join("memory.csv"), &memory_csv(&rows))?;
    write(out.join("ratio.csv"), &ratio_csv(&rows))?;
    let scaling = scaling_report(&opt_family())?;
    let mut json = serde_json::to_string_pretty(&scaling)?;
    json.push('\n');
    write(out.join("scaling.json"), &json)
}

fn gaussian(n: usize, rng: &mut Rng) -> Vec<f64> {
    (0..n).map(|_| rng.normal()).collect()
}

fn report(name: &str, pass: bool, detail: String) -> usize {
    println!("{} {name}: {detail}", if pass { "ok  " } else { "FAIL" });
    usize::from(!pass)
}

pub fn verify(a: &VerifyArgs) -> Result<()> {
    let root = Rng::new(a.seed);
    let mut failed = 0;

    // top-k on each rule against exhaustive search
    let (mut gain_miss, mut ratio_miss, mut total) = (0, 0, 0);
    for i in 0..a.cases {
        let mut rng = root.fork(i as u64);
        let n = 3 + (i % 8);
        let ctx = ClosedFormContext::new(
            gaussian(n, &mut rng),
            gaussian(n, &mut rng),
            gaussian(n, &mut rng),
            gaussian(n, &mut rng),
        )?;
        for k in 0..=n {
            let best = enumerate_masks(&ctx, k)?.best_loss;
            for (rule, miss) in [(ScoreRule::Gain, &mut gain_miss), (ScoreRule::Ratio, &mut ratio_miss)] {
                let m = binarize_by_threshold(&rank_scores(&ctx, rule), k)?;
                if ctx.loss_bits(&m.bits) - best > 1e-9 {
                    *miss += 1;
                }
            }
            total += 1;
        }
    }
    failed += report(
        "gain ranking vs enumeration",
        gain_miss == 0,
        format!("{gain_miss} of {total} budgets off the optimum"),
    );
    println!("info ratio ranking vs enumeration: {ratio_miss} of {total} budgets off the optimum");

    // relaxed mask stationarity
    let mut stat = 0.0f64;
    for i in 0..a.cases {
        let mut rng = root.fork(1000 + i as u64);
        let n = 3 + (i % 10);
        let ctx = ClosedFormContext::new(
            gaussian(n, &mut rng),
            gaussian(n, &mut rng),
            gaussian(n, &mut rng),
            gaussian(n, &mut rng),
        )?;
        let r = rng.uniform_range(0.1, 0.9);
        let m = relaxed_mask(&ctx, r)?;
        for j in 0..n {
            let g = -2.0 * ctx.c[j] * (ctx.b[j] - m.mask[j] * ctx.c[j])
                - 2.0 * ctx.d[j] * (ctx.z[j] - m.mask[j] * ctx.d[j])
                + m.lambda;
            stat = stat.max(g.abs());
        }
    }
    failed += report(
        "relaxed mask stationarity",
        stat < 1e-8,
        format!("max residual {stat:.2e}"),
    );

    // softmax allocation against projected gradient on the layer energy
    let (mut gap, mut done, mut draw) = (0.0f64, 0, 0u64);
    while done < a.cases {
        let mut rng = root.fork(2000 + draw);
        draw += 1;
        let l = 2 + (draw as usize % 7);
        let imp: Vec<f64> = (0..l).map(|_| rng.uniform()).collect();
        let t = rng.uniform_range(0.2, 2.0);
        let r_bar = rng.uniform_range(0.1, 0.7);
        let closed = softmax_allocate(&imp, r_bar, t)?;
        if closed.iter().any(|&r| r >= 1.0) {
            continue;
        }
        let numeric = energy_minimize_projected(&imp, r_bar, t, 5000, 0.1)?;
        gap = closed
            .iter()
            .zip(&numeric)
            .map(|(x, y)| (x - y).abs())
            .fold(gap, f64::max);
        done += 1;
    }
    failed += report(
        "softmax allocation vs projected solver",
        gap < 1e-4,
        format!("max per-layer gap {gap:.2e}"),
    );

    let rows = memory_report(&opt_family());
    let ok = rows
        .iter()
        .all(|r| r.ratio() == "2.00" && r.mem_per_layer_tenths_mb == 2 * r.params_per_layer_tenths_m);
    failed += report("memory model", ok, format!("{} configurations", rows.len()));

    if failed > 0 {
        return Err(VerifyFailed(failed).into());
    }
    Ok(())
}
