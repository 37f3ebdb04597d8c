//! End-to-end runs: unit scores, sparsity plan, masks, solver or refit,
//! evaluation and the artifact files the CLI writes.

use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::admm::lowrank::{lowrank_correct, LowRankConfig};
use crate::admm::{
    self, apply_masks, run_outer_loop, trace_csv, BlockMasks, Granularity, MaskPolicy, SolverConfig, TraceRow,
};
use crate::allocation::{
    binarize_by_threshold, default_temperature_grid, global_threshold, inverse_weight_allocate, post_correct,
    retained_count, softmax_allocate, temperature_sweep, Allocator, PlanEntry, PruneMask, ScoreRule, SparsityPlan,
};
use crate::error::{Error, Result};
use crate::eval::{memory_csv, memory_report, opt_family, pseudo_perplexity, total_reconstruction_loss, ModelConfig};
use crate::fsutil::write_atomic;
use crate::importance::{block_unit_scores, layer_importance, Criterion, LayerMethod, UnitGroup, UnitScores};
use crate::model::{
    attention, capture_reference_activations, save_model, ActivationCache, Block, BlockKind, BlockRecord,
    CalibrationSet, ToyModel,
};
use crate::tensor::{matmul, relu, ridge_fit, DenseMatrix, Rng};

/// Pruning method of a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    /// Global top-K on closed-form scores, solver re-scores masks.
    ClosedForm,
    /// Softmax allocation with post-correction, Wanda masks, fixed-mask solve.
    Softmax,
    /// Per-family inverse weighting with depth decay, Wanda masks, fixed-mask solve.
    InverseWeight,
    Magnitude,
    Snip,
    L0,
    /// Wanda masks at uniform sparsity.
    WandaLocal,
}

impl Method {
    pub const ALL: [Method; 7] = [
        Method::ClosedForm,
        Method::Softmax,
        Method::InverseWeight,
        Method::Magnitude,
        Method::Snip,
        Method::L0,
        Method::WandaLocal,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::ClosedForm => "closed-form",
            Method::Softmax => "softmax",
            Method::InverseWeight => "inverse-weight",
            Method::Magnitude => "magnitude",
            Method::Snip => "snip",
            Method::L0 => "l0",
            Method::WandaLocal => "wanda-local",
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        Self::ALL.into_iter().find(|m| m.as_str() == name).ok_or_else(|| {
            let names: Vec<&str> = Self::ALL.iter().map(|m| m.as_str()).collect();
            Error::param(
                "method",
                format!("unknown method `{name}` (expected one of {})", names.join(", ")),
            )
        })
    }

    /// Baselines prune at uniform sparsity and refit, without the solver.
    pub fn is_baseline(self) -> bool {
        matches!(self, Method::Magnitude | Method::Snip | Method::L0 | Method::WandaLocal)
    }

    /// Unit criterion for the masks, `None` for the closed form.
    pub fn criterion(self) -> Option<Criterion> {
        match self {
            Method::ClosedForm => None,
            Method::Softmax | Method::InverseWeight | Method::WandaLocal => Some(Criterion::Wanda),
            Method::Magnitude => Some(Criterion::Magnitude),
            Method::Snip => Some(Criterion::snip()),
            Method::L0 => Some(Criterion::l0()),
        }
    }

    pub fn criterion_name(self) -> &'static str {
        self.criterion().map_or("closed-form", |c| c.name())
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Everything a run depends on besides the model and calibration data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub method: Method,
    /// Global target sparsity `r̄`.
    pub sparsity: f64,
    /// Fixed temperature; when absent the grid is swept.
    pub temperature: Option<f64>,
    /// Temperature grid; defaults to `{0.25, 0.5, 1, 2, 4} × mean|I|`.
    pub t_grid: Option<Vec<f64>>,
    /// Depth decay for inverse weighting.
    pub gamma: f64,
    /// Attention/MLP importance ratio for inverse weighting.
    pub rho: f64,
    /// Upper clip of allocated sparsities.
    pub cap: f64,
    pub solver: SolverConfig,
    /// Optional low-rank residual correction after pruning.
    pub correction: Option<LowRankConfig>,
    pub seed: u64,
    /// Record wall time in the report (makes reports differ run to run).
    pub timing: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            method: Method::ClosedForm,
            sparsity: 0.5,
            temperature: None,
            t_grid: None,
            gamma: 0.9,
            rho: 1.0,
            cap: 0.95,
            solver: SolverConfig::default(),
            correction: None,
            seed: 0,
            timing: false,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sparsity > 0.0 && self.sparsity < 1.0) {
            return Err(Error::param(
                "sparsity",
                format!("must lie in (0, 1), got {}", self.sparsity),
            ));
        }
        if let Some(t) = self.temperature {
            if !(t > 0.0) {
                return Err(Error::param("temperature", format!("must be positive, got {t}")));
            }
        }
        if let Some(grid) = &self.t_grid {
            if grid.is_empty() || grid.iter().any(|t| !(*t > 0.0)) {
                return Err(Error::param(
                    "t_grid",
                    "must be a nonempty list of positive temperatures",
                ));
            }
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::param("gamma", format!("must lie in (0, 1], got {}", self.gamma)));
        }
        if !(self.rho > 0.0) {
            return Err(Error::param("rho", format!("must be positive, got {}", self.rho)));
        }
        if !(self.cap > 0.0 && self.cap <= 1.0) {
            return Err(Error::param("cap", format!("must lie in (0, 1], got {}", self.cap)));
        }
        self.solver.validate()
    }
}

/// Closed-form unit scores of every group at the dense point.
pub fn closed_form_unit_scores(model: &ToyModel, cache: &ActivationCache, rule: ScoreRule) -> Result<Vec<UnitScores>> {
    let mut out = Vec::new();
    for (b, block) in model.blocks.iter().enumerate() {
        let x = cache.input(b);
        match (block, cache.record(b)) {
            (Block::Ffn(f), BlockRecord::Ffn(rec)) => out.push(UnitScores {
                block: b,
                group: UnitGroup::Hidden,
                scores: admm::ffn::closed_form_scores(&f.w1, &f.w2, x, &rec.a, &rec.out, cache.samples(), rule)?,
            }),
            (Block::Mha(m), BlockRecord::Mha(rec)) => {
                let z = admm::mha::stack(&rec.att.logits);
                let [q, k, vo] = admm::mha::closed_form_scores(
                    m,
                    rec,
                    x,
                    &z,
                    &rec.att.attn,
                    model.arch.h,
                    cache.seq_len(),
                    cache.samples(),
                    rule,
                )?;
                for (group, scores) in [(UnitGroup::Query, q), (UnitGroup::Key, k), (UnitGroup::ValueOut, vo)] {
                    out.push(UnitScores {
                        block: b,
                        group,
                        scores,
                    });
                }
            }
            _ => return Err(Error::dim("closed_form_unit_scores", "cache does not match model")),
        }
    }
    Ok(out)
}

/// Unit scores the method builds its masks from.
pub fn unit_scores(
    model: &ToyModel,
    cache: &ActivationCache,
    method: Method,
    rule: ScoreRule,
    rng: &Rng,
) -> Result<Vec<UnitScores>> {
    match method.criterion() {
        None => closed_form_unit_scores(model, cache, rule),
        Some(criterion) => {
            let mut out = Vec::new();
            for b in 0..model.blocks.len() {
                let mut block_rng = rng.fork(b as u64);
                out.extend(block_unit_scores(model, cache, b, criterion, &mut block_rng)?);
            }
            Ok(out)
        }
    }
}

/// A plan with the per-group retained counts it implies.
#[derive(Debug, Clone, PartialEq)]
pub struct PlanOutcome {
    pub plan: SparsityPlan,
    /// Retained units per entry of the unit-score list.
    pub keep: Vec<usize>,
    /// `(T, total loss)` per grid point when a sweep ran.
    pub sweep: Option<Vec<(f64, f64)>>,
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// Retained count per group for a plan. In head mode, attention groups keep
/// whole heads.
pub fn keep_counts(
    model: &ToyModel,
    scores: &[UnitScores],
    plan: &SparsityPlan,
    granularity: Granularity,
) -> Result<Vec<usize>> {
    scores
        .iter()
        .map(|s| {
            let layer = model.layer_of(s.block);
            let kind = s.group.kind();
            let rho = plan
                .retention_for(layer, kind)
                .ok_or_else(|| Error::param("plan", format!("no entry covers layer {layer} {kind}")))?;
            let n = s.scores.len();
            Ok(if kind == BlockKind::Mha && granularity == Granularity::Head {
                let h = model.arch.h;
                retained_count(rho, h) * (n / h)
            } else {
                retained_count(rho, n)
            })
        })
        .collect()
}

/// Global top-K over all closed-form unit scores with
/// `K = ⌊(1 − r̄)·total⌋`.
pub fn closed_form_plan(
    model: &ToyModel,
    scores: &[UnitScores],
    sparsity: f64,
    granularity: Granularity,
) -> Result<PlanOutcome> {
    let total: usize = scores.iter().map(|s| s.scores.len()).sum();
    let keep_total = ((1.0 - sparsity) * total as f64).floor() as usize;
    let pools: Vec<Vec<f64>> = scores.iter().map(|s| s.scores.clone()).collect();
    let mut keep = global_threshold(&pools, keep_total);
    if granularity == Granularity::Head {
        let h = model.arch.h;
        for (k, s) in keep.iter_mut().zip(scores) {
            if s.group.kind() == BlockKind::Mha {
                let dh = s.scores.len() / h;
                *k = ((*k as f64 / dh as f64).round() as usize).min(h) * dh;
            }
        }
    }
    let mut entries = Vec::new();
    for b in 0..model.blocks.len() {
        let (mut kept, mut n, mut sum) = (0usize, 0usize, 0.0);
        for (s, &k) in scores.iter().zip(&keep).filter(|(s, _)| s.block == b) {
            kept += k;
            n += s.scores.len();
            sum += s.scores.iter().sum::<f64>();
        }
        let retention = kept as f64 / n.max(1) as f64;
        entries.push(PlanEntry {
            layer: model.layer_of(b),
            block_kind: Some(model.blocks[b].kind()),
            importance: sum / n.max(1) as f64,
            temperature: None,
            retention,
            sparsity: 1.0 - retention,
            allocator: Allocator::ClosedForm,
        });
    }
    Ok(PlanOutcome {
        plan: SparsityPlan { entries },
        keep,
        sweep: None,
    })
}

/// Same sparsity for every layer; importance is the mean unit score.
pub fn uniform_plan(model: &ToyModel, scores: &[UnitScores], sparsity: f64) -> SparsityPlan {
    let importance: Vec<f64> = (0..model.arch.layers)
        .map(|l| {
            let all: Vec<f64> = scores
                .iter()
                .filter(|s| model.layer_of(s.block) == l)
                .flat_map(|s| s.scores.iter().copied())
                .collect();
            mean(&all)
        })
        .collect();
    SparsityPlan::from_sparsities(
        &vec![sparsity; model.arch.layers],
        &importance,
        None,
        None,
        Allocator::Uniform,
    )
}

/// Plan for one temperature of a temperature-driven allocator.
pub fn temperature_plan(
    model: &ToyModel,
    cache: &ActivationCache,
    cfg: &RunConfig,
    temperature: f64,
) -> Result<SparsityPlan> {
    match cfg.method {
        Method::Softmax => {
            let imp = layer_importance(model, cache, LayerMethod::WandaSum)?.values();
            let raw = softmax_allocate(&imp, cfg.sparsity, temperature)?;
            let corrected = post_correct(&raw, cfg.sparsity, cfg.cap)?;
            Ok(SparsityPlan::from_sparsities(
                &corrected.values,
                &imp,
                None,
                Some(temperature),
                Allocator::Softmax,
            ))
        }
        Method::InverseWeight => {
            let li = layer_importance(
                model,
                cache,
                LayerMethod::ModuleSplit {
                    gamma: cfg.gamma,
                    rho: cfg.rho,
                },
            )?;
            let mut plan = SparsityPlan::default();
            for kind in [BlockKind::Mha, BlockKind::Ffn] {
                let fam: Vec<f64> = li
                    .layers
                    .iter()
                    .filter_map(|l| if kind == BlockKind::Mha { l.attn } else { l.mlp })
                    .collect();
                if fam.is_empty() {
                    continue;
                }
                let s = inverse_weight_allocate(&fam, cfg.sparsity, temperature, cfg.cap)?;
                plan.entries.extend(
                    SparsityPlan::from_sparsities(&s, &fam, Some(kind), Some(temperature), Allocator::InverseWeight)
                        .entries,
                );
            }
            plan.entries.sort_by_key(|e| (e.layer, e.block_kind));
            Ok(plan)
        }
        m => Err(Error::param("method", format!("`{m}` does not use a temperature"))),
    }
}

/// Importance values the default temperature grid is scaled to.
fn grid_scale(model: &ToyModel, cache: &ActivationCache, cfg: &RunConfig) -> Result<Vec<f64>> {
    Ok(match cfg.method {
        Method::InverseWeight => {
            let li = layer_importance(
                model,
                cache,
                LayerMethod::ModuleSplit {
                    gamma: cfg.gamma,
                    rho: cfg.rho,
                },
            )?;
            li.layers.iter().flat_map(|l| l.attn.into_iter().chain(l.mlp)).collect()
        }
        _ => layer_importance(model, cache, LayerMethod::WandaSum)?.values(),
    })
}

/// Temperatures a run considers: the fixed one, the configured grid, or the
/// default grid.
pub fn temperature_grid(model: &ToyModel, cache: &ActivationCache, cfg: &RunConfig) -> Result<Vec<f64>> {
    if let Some(t) = cfg.temperature {
        return Ok(vec![t]);
    }
    if let Some(g) = &cfg.t_grid {
        return Ok(g.clone());
    }
    Ok(default_temperature_grid(&grid_scale(model, cache, cfg)?))
}

/// Builds the method's plan; temperature-driven allocators sweep their grid
/// when more than one temperature is given, scoring each point by the loss of
/// its masks after a refit.
pub fn build_plan(
    model: &ToyModel,
    cache: &ActivationCache,
    scores: &[UnitScores],
    cfg: &RunConfig,
) -> Result<PlanOutcome> {
    let gran = cfg.solver.granularity;
    match cfg.method {
        Method::ClosedForm => closed_form_plan(model, scores, cfg.sparsity, gran),
        Method::Softmax | Method::InverseWeight => {
            let grid = temperature_grid(model, cache, cfg)?;
            if grid.len() == 1 {
                let plan = temperature_plan(model, cache, cfg, grid[0])?;
                let keep = keep_counts(model, scores, &plan, gran)?;
                return Ok(PlanOutcome {
                    plan,
                    keep,
                    sweep: None,
                });
            }
            let sweep = temperature_sweep(
                &grid,
                cfg.solver.threads,
                |t| temperature_plan(model, cache, cfg, t),
                |plan| {
                    let keep = keep_counts(model, scores, plan, gran)?;
                    let masks = masks_from_scores(model, scores, &keep, gran)?;
                    let pruned = masked_refit(model, cache, &masks, cfg.solver.ridge_eps)?;
                    Ok(total_reconstruction_loss(&pruned, cache, cfg.solver.alpha)?.total)
                },
            )?;
            log::info!("temperature sweep picked T = {}", sweep.best_temperature);
            let keep = keep_counts(model, scores, &sweep.best, gran)?;
            Ok(PlanOutcome {
                plan: sweep.best,
                keep,
                sweep: Some(sweep.losses),
            })
        }
        _ => {
            let plan = uniform_plan(model, scores, cfg.sparsity);
            let keep = keep_counts(model, scores, &plan, gran)?;
            Ok(PlanOutcome {
                plan,
                keep,
                sweep: None,
            })
        }
    }
}

/// Masks keeping the top `keep[i]` units of each score group; in head mode
/// attention blocks keep whole heads ranked by mean unit score.
pub fn masks_from_scores(
    model: &ToyModel,
    scores: &[UnitScores],
    keep: &[usize],
    granularity: Granularity,
) -> Result<Vec<BlockMasks>> {
    let mut masks: Vec<BlockMasks> = model
        .blocks
        .iter()
        .enumerate()
        .map(|(b, block)| BlockMasks::dense(block, b))
        .collect();
    for (s, &k) in scores.iter().zip(keep) {
        masks[s.block].set(s.group, binarize_by_threshold(&s.scores, k)?);
    }
    if granularity == Granularity::Head {
        let h = model.arch.h;
        for (b, block) in model.blocks.iter().enumerate() {
            if block.kind() != BlockKind::Mha {
                continue;
            }
            let find = |g: UnitGroup| {
                scores
                    .iter()
                    .zip(keep)
                    .find(|(s, _)| s.block == b && s.group == g)
                    .ok_or_else(|| Error::param("scores", format!("block {b} has no {g:?} scores")))
            };
            let (q, _) = find(UnitGroup::Query)?;
            let (k, _) = find(UnitGroup::Key)?;
            let (vo, &kv) = find(UnitGroup::ValueOut)?;
            let dh = vo.scores.len() / h;
            let new = admm::mha::head_masks([&q.scores, &k.scores, &vo.scores], h, kv / dh);
            for (g, m) in [UnitGroup::Query, UnitGroup::Key, UnitGroup::ValueOut]
                .into_iter()
                .zip(new)
            {
                masks[b].set(g, m);
            }
        }
    }
    Ok(masks)
}

fn refit_kept_columns(
    w: &mut DenseMatrix,
    target: &DenseMatrix,
    inputs: &DenseMatrix,
    mask: &PruneMask,
    eps: f64,
) -> Result<()> {
    let kept = mask.kept();
    if kept.is_empty() {
        return Ok(());
    }
    let fit = ridge_fit(target, &inputs.select_rows(&kept), eps)?;
    for (c, &j) in kept.iter().enumerate() {
        for i in 0..w.rows() {
            w.set(i, j, fit.get(i, c));
        }
    }
    Ok(())
}

/// Applies masks to the dense weights and refits the kept columns of `w2`
/// and `wo` on the activations the masked first matrices produce.
pub fn masked_refit(model: &ToyModel, cache: &ActivationCache, masks: &[BlockMasks], eps: f64) -> Result<ToyModel> {
    let mut out = model.clone();
    for (b, block) in model.blocks.iter().enumerate() {
        let x = cache.input(b);
        out.blocks[b] = match (apply_masks(block, &masks[b])?, cache.record(b)) {
            (Block::Ffn(mut f), rec) => {
                let h = relu(&matmul(&f.w1, x)?);
                let m = masks[b].get(UnitGroup::Hidden).expect("ffn mask");
                refit_kept_columns(&mut f.w2, rec.out(), &h, m, eps)?;
                Block::Ffn(f)
            }
            (Block::Mha(mut a), rec) => {
                let att = attention(
                    &matmul(&a.wq, x)?,
                    &matmul(&a.wk, x)?,
                    &matmul(&a.wv, x)?,
                    model.arch.h,
                    cache.seq_len(),
                )?;
                let m = masks[b].get(UnitGroup::ValueOut).expect("attention mask");
                refit_kept_columns(&mut a.wo, rec.out(), &att.attn, m, eps)?;
                Block::Mha(a)
            }
        };
    }
    Ok(out)
}

/// Loss and sparsity of one block in a report.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BlockReport {
    pub layer: usize,
    pub block_kind: BlockKind,
    pub loss: f64,
    pub planned_sparsity: Option<f64>,
    pub achieved_sparsity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub method: Option<Method>,
    pub blocks: Vec<BlockReport>,
    pub total_loss: f64,
    /// Loss of the initial masks on the dense weights, before any refit.
    pub initial_loss: Option<f64>,
    pub mean_sparsity: f64,
    pub dense_perplexity: Option<f64>,
    pub pseudo_perplexity: Option<f64>,
    pub wall_time_s: Option<f64>,
    pub config: Option<RunConfig>,
}

/// Fraction of pruned units over all groups of a block.
pub fn achieved_sparsity(masks: &BlockMasks) -> f64 {
    let (kept, n) = masks
        .groups
        .iter()
        .fold((0, 0), |(k, n), (_, m)| (k + m.popcount(), n + m.len()));
    1.0 - kept as f64 / n.max(1) as f64
}

/// Masks read off a model's zero structure: a unit counts as pruned when all
/// of its weights are exactly zero.
pub fn infer_masks(model: &ToyModel) -> Vec<BlockMasks> {
    let live_rows =
        |w: &DenseMatrix| -> Vec<bool> { (0..w.rows()).map(|i| w.row(i).iter().any(|&v| v != 0.0)).collect() };
    let live_cols =
        |w: &DenseMatrix| -> Vec<bool> { (0..w.cols()).map(|j| w.col(j).iter().any(|&v| v != 0.0)).collect() };
    let to_mask = |bits: Vec<bool>| {
        let k = bits.iter().filter(|&&b| b).count();
        PruneMask { bits, k }
    };
    let or = |a: Vec<bool>, b: Vec<bool>| a.iter().zip(&b).map(|(x, y)| *x || *y).collect::<Vec<_>>();
    model
        .blocks
        .iter()
        .enumerate()
        .map(|(b, block)| {
            let groups = match block {
                Block::Ffn(f) => vec![(UnitGroup::Hidden, to_mask(or(live_rows(&f.w1), live_cols(&f.w2))))],
                Block::Mha(m) => vec![
                    (UnitGroup::Query, to_mask(live_rows(&m.wq))),
                    (UnitGroup::Key, to_mask(live_rows(&m.wk))),
                    (UnitGroup::ValueOut, to_mask(or(live_rows(&m.wv), live_cols(&m.wo)))),
                ],
            };
            BlockMasks { block: b, groups }
        })
        .collect()
}

/// Report for a pruned model against the dense reference captured in `cache`.
pub fn evaluate(
    dense: &ToyModel,
    pruned: &ToyModel,
    calib: &CalibrationSet,
    cache: &ActivationCache,
    masks: &[BlockMasks],
    plan: Option<&SparsityPlan>,
    alpha: f64,
) -> Result<EvalReport> {
    let loss = total_reconstruction_loss(pruned, cache, alpha)?;
    let blocks: Vec<BlockReport> = loss
        .blocks
        .iter()
        .map(|bl| BlockReport {
            layer: bl.layer,
            block_kind: bl.kind,
            loss: bl.loss,
            planned_sparsity: plan.and_then(|p| p.retention_for(bl.layer, bl.kind)).map(|r| 1.0 - r),
            achieved_sparsity: masks.get(bl.block).map_or(0.0, achieved_sparsity),
        })
        .collect();
    let mean_sparsity = mean(&blocks.iter().map(|b| b.achieved_sparsity).collect::<Vec<_>>());
    let (dense_ppl, ppl) = if pruned.head.is_some() && calib.has_tokens() {
        (
            Some(pseudo_perplexity(dense, calib)?),
            Some(pseudo_perplexity(pruned, calib)?),
        )
    } else {
        (None, None)
    };
    Ok(EvalReport {
        method: None,
        blocks,
        total_loss: loss.total,
        initial_loss: None,
        mean_sparsity,
        dense_perplexity: dense_ppl,
        pseudo_perplexity: ppl,
        wall_time_s: None,
        config: None,
    })
}

/// Everything a run produces.
#[derive(Debug, Clone, PartialEq)]
pub struct RunResult {
    pub config: RunConfig,
    pub scores: Vec<UnitScores>,
    pub plan: PlanOutcome,
    pub masks: Vec<BlockMasks>,
    pub pruned: ToyModel,
    pub trace: Vec<TraceRow>,
    pub report: EvalReport,
}

/// Runs the solver stage on given initial masks: refit for baselines, the
/// alternating solver otherwise (fixed masks for the allocator methods,
/// re-scored masks for the closed form).
pub fn solve(
    model: &ToyModel,
    cache: &ActivationCache,
    masks: &[BlockMasks],
    method: Method,
    solver: &SolverConfig,
) -> Result<(ToyModel, Vec<BlockMasks>, Vec<TraceRow>)> {
    if method.is_baseline() {
        return Ok((
            masked_refit(model, cache, masks, solver.ridge_eps)?,
            masks.to_vec(),
            Vec::new(),
        ));
    }
    let policy = if method == Method::ClosedForm {
        MaskPolicy::ClosedForm
    } else {
        MaskPolicy::Fixed
    };
    let cfg = SolverConfig {
        mask_policy: policy,
        ..solver.clone()
    };
    let out = run_outer_loop(model, cache, masks, &cfg)?;
    Ok((out.model, out.masks, out.trace))
}

/// Applies the low-rank correction to every block of a pruned model.
pub fn correct_model(
    pruned: &ToyModel,
    cache: &ActivationCache,
    masks: &[BlockMasks],
    cfg: &LowRankConfig,
    rng: &Rng,
) -> Result<ToyModel> {
    let mut out = pruned.clone();
    for (b, block) in pruned.blocks.iter().enumerate() {
        let mut block_rng = rng.fork(b as u64);
        out.blocks[b] = lowrank_correct(
            block,
            &masks[b],
            cache.record(b),
            cache.input(b),
            cache.seq_len(),
            pruned.arch.h,
            cfg,
            &mut block_rng,
        )?;
    }
    Ok(out)
}

/// Full run of `cfg.method` on `model` with calibration set `calib`.
pub fn run(model: &ToyModel, calib: &CalibrationSet, cfg: &RunConfig) -> Result<RunResult> {
    cfg.validate()?;
    let start = Instant::now();
    let cache = capture_reference_activations(model, calib)?;
    let rng = Rng::new(cfg.seed);
    let scores = unit_scores(model, &cache, cfg.method, cfg.solver.score_rule, &rng.fork(1))?;
    let plan = build_plan(model, &cache, &scores, cfg)?;
    let masks = masks_from_scores(model, &scores, &plan.keep, cfg.solver.granularity)?;
    let initial = masked_dense(model, &masks)?;
    let initial_loss = total_reconstruction_loss(&initial, &cache, cfg.solver.alpha)?.total;
    log::info!("{}: initial masked loss {initial_loss:.6e}", cfg.method);
    let (mut pruned, masks, trace) = solve(model, &cache, &masks, cfg.method, &cfg.solver)?;
    if let Some(lr) = &cfg.correction {
        pruned = correct_model(&pruned, &cache, &masks, lr, &rng.fork(2))?;
    }
    let mut report = evaluate(
        model,
        &pruned,
        calib,
        &cache,
        &masks,
        Some(&plan.plan),
        cfg.solver.alpha,
    )?;
    report.method = Some(cfg.method);
    report.initial_loss = Some(initial_loss);
    report.config = Some(cfg.clone());
    if cfg.timing {
        report.wall_time_s = Some(start.elapsed().as_secs_f64());
    }
    log::info!("{}: final loss {:.6e}", cfg.method, report.total_loss);
    Ok(RunResult {
        config: cfg.clone(),
        scores,
        plan,
        masks,
        pruned,
        trace,
        report,
    })
}

/// Dense weights with masks applied and nothing refit.
pub fn masked_dense(model: &ToyModel, masks: &[BlockMasks]) -> Result<ToyModel> {
    let mut out = model.clone();
    for (b, block) in model.blocks.iter().enumerate() {
        out.blocks[b] = apply_masks(block, &masks[b])?;
    }
    Ok(out)
}

/// `importance.csv`: `layer,block_kind,unit_axis,unit_index,criterion,score`.
pub fn importance_csv(model: &ToyModel, scores: &[UnitScores], criterion: &str) -> String {
    let mut out = String::from("layer,block_kind,unit_axis,unit_index,criterion,score\n");
    for s in scores {
        let layer = model.layer_of(s.block);
        for (j, v) in s.scores.iter().enumerate() {
            out.push_str(&format!(
                "{layer},{},{},{j},{criterion},{v:.17e}\n",
                s.group.kind(),
                s.group.axis_label()
            ));
        }
    }
    out
}

/// `plan.csv`: `layer,block_kind,importance,temperature,retention,sparsity,allocator`.
/// Layer-wide entries use `all` as block kind; missing temperatures are empty.
pub fn plan_csv(plan: &SparsityPlan) -> String {
    let mut out = String::from("layer,block_kind,importance,temperature,retention,sparsity,allocator\n");
    for e in &plan.entries {
        out.push_str(&format!(
            "{},{},{:.17e},{},{:.17e},{:.17e},{}\n",
            e.layer,
            e.block_kind.map_or("all", BlockKind::as_str),
            e.importance,
            e.temperature.map_or(String::new(), |t| format!("{t:.17e}")),
            e.retention,
            e.sparsity,
            e.allocator.as_str()
        ));
    }
    out
}

/// Parses a `plan.csv` written by [`plan_csv`].
pub fn parse_plan_csv(text: &str) -> Result<SparsityPlan> {
    let mut lines = text.lines();
    let header = lines.next().unwrap_or_default();
    if header.trim() != "layer,block_kind,importance,temperature,retention,sparsity,allocator" {
        return Err(Error::Format {
            path: "plan.csv".into(),
            detail: format!("unexpected header `{header}`"),
        });
    }
    let bad = |line: usize, detail: String| Error::Format {
        path: "plan.csv".into(),
        detail: format!("line {line}: {detail}"),
    };
    let mut entries = Vec::new();
    for (i, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let ln = i + 2;
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 7 {
            return Err(bad(ln, format!("expected 7 fields, found {}", f.len())));
        }
        let num = |s: &str, what: &str| s.trim().parse::<f64>().map_err(|e| bad(ln, format!("{what}: {e}")));
        let block_kind = match f[1] {
            "all" => None,
            "mha" => Some(BlockKind::Mha),
            "ffn" => Some(BlockKind::Ffn),
            other => return Err(bad(ln, format!("unknown block kind `{other}`"))),
        };
        let allocator = match f[6].trim() {
            "closed-form" => Allocator::ClosedForm,
            "softmax" => Allocator::Softmax,
            "inverse-weight" => Allocator::InverseWeight,
            "uniform" => Allocator::Uniform,
            other => return Err(bad(ln, format!("unknown allocator `{other}`"))),
        };
        entries.push(PlanEntry {
            layer: f[0].trim().parse().map_err(|e| bad(ln, format!("layer: {e}")))?,
            block_kind,
            importance: num(f[2], "importance")?,
            temperature: if f[3].trim().is_empty() {
                None
            } else {
                Some(num(f[3], "temperature")?)
            },
            retention: num(f[4], "retention")?,
            sparsity: num(f[5], "sparsity")?,
            allocator,
        });
    }
    Ok(SparsityPlan { entries })
}

/// `sweep.csv`: `temperature,total_loss`.
pub fn sweep_csv(losses: &[(f64, f64)]) -> String {
    let mut out = String::from("temperature,total_loss\n");
    for (t, l) in losses {
        out.push_str(&format!("{t:.17e},{l:.17e}\n"));
    }
    out
}

/// Per-layer memory rows for the OPT reference sizes followed by the dense and
/// pruned toy model (pruned counts nonzero weights only).
pub fn toy_memory_csv(dense: &ToyModel, pruned: &ToyModel) -> String {
    let nonzero: usize = pruned
        .blocks
        .iter()
        .flat_map(|b| b.matrices())
        .map(|(_, m)| m.data().iter().filter(|&&v| v != 0.0).count())
        .sum();
    let (l, d) = (dense.arch.layers as u64, dense.arch.d as u64);
    let mut configs = opt_family();
    configs.push(ModelConfig::new("toy-dense", dense.param_count() as u64, l, d));
    configs.push(ModelConfig::new("toy-pruned", nonzero as u64, l, d));
    memory_csv(&memory_report(&configs))
}

pub fn report_json(report: &EvalReport) -> Result<String> {
    serde_json::to_string_pretty(report)
        .map(|s| s + "\n")
        .map_err(|e| Error::param("report", e.to_string()))
}

/// Name of the unit criterion a configuration scores with.
pub fn criterion_label(cfg: &RunConfig) -> &'static str {
    match (cfg.method, cfg.solver.score_rule) {
        (Method::ClosedForm, ScoreRule::Gain) => "closed-form-gain",
        (m, _) => m.criterion_name(),
    }
}

/// Writes every artifact of a run under `out`: the pruned model in `model/`,
/// `importance.csv`, `plan.csv`, `sweep.csv` (when swept), `trace.csv` (when
/// the solver ran), `report.json` and `memory.csv`.
pub fn write_run(result: &RunResult, dense: &ToyModel, out: &Path) -> Result<()> {
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    save_model(&result.pruned, &out.join("model"))?;
    write_atomic(
        &out.join("importance.csv"),
        importance_csv(dense, &result.scores, criterion_label(&result.config)).as_bytes(),
    )?;
    write_atomic(&out.join("plan.csv"), plan_csv(&result.plan.plan).as_bytes())?;
    if let Some(s) = &result.plan.sweep {
        write_atomic(&out.join("sweep.csv"), sweep_csv(s).as_bytes())?;
    }
    if !result.trace.is_empty() {
        write_atomic(&out.join("trace.csv"), trace_csv(&result.trace).as_bytes())?;
    }
    write_atomic(&out.join("report.json"), report_json(&result.report)?.as_bytes())?;
    write_atomic(
        &out.join("memory.csv"),
        toy_memory_csv(dense, &result.pruned).as_bytes(),
    )?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{generate_toy_model, ModelArch};

    fn setup(arch: ModelArch) -> (ToyModel, CalibrationSet) {
        let model = generate_toy_model(arch, &mut Rng::new(7)).unwrap();
        let calib = CalibrationSet::gaussian(4, 6, arch.d, &mut Rng::new(8)).unwrap();
        (model, calib)
    }

    #[test]
    fn method_names_round_trip() {
        for m in Method::ALL {
            assert_eq!(Method::parse(m.as_str()).unwrap(), m);
        }
        assert!(Method::parse("bogus").is_err());
    }

    #[test]
    fn every_method_runs_and_keeps_masks() {
        let (model, calib) = setup(ModelArch::new(8, 2, 2));
        for method in Method::ALL {
            let cfg = RunConfig {
                method,
                sparsity: 0.3,
                solver: SolverConfig {
                    iters: 2,
                    inner_steps: 3,
                    ..SolverConfig::default()
                },
                ..RunConfig::default()
            };
            let r = run(&model, &calib, &cfg).unwrap();
            let eff = masked_dense(&r.pruned, &r.masks).unwrap();
            assert_eq!(eff, r.pruned, "{method}");
            assert!(r.report.total_loss.is_finite());
            if !method.is_baseline() {
                assert_eq!(r.trace.len(), 2 * model.blocks.len());
            }
        }
    }

    #[test]
    fn equal_importance_softmax_plan_is_uniform() {
        let (model, calib) = setup(ModelArch::new(8, 3, 2));
        let cache = capture_reference_activations(&model, &calib).unwrap();
        let cfg = RunConfig {
            method: Method::Softmax,
            sparsity: 0.4,
            ..RunConfig::default()
        };
        // a huge temperature flattens any importance differences
        let plan = temperature_plan(&model, &cache, &cfg, 1e12).unwrap();
        for e in &plan.entries {
            assert!((e.sparsity - 0.4).abs() < 1e-9);
        }
    }

    #[test]
    fn plan_csv_round_trips() {
        let (model, calib) = setup(ModelArch::new(8, 2, 2));
        let cfg = RunConfig {
            method: Method::InverseWeight,
            temperature: Some(1.0),
            ..RunConfig::default()
        };
        let cache = capture_reference_activations(&model, &calib).unwrap();
        let plan = temperature_plan(&model, &cache, &cfg, 1.0).unwrap();
        let parsed = parse_plan_csv(&plan_csv(&plan)).unwrap();
        assert_eq!(parsed, plan);
    }

    #[test]
    fn inferred_masks_match_applied_ones() {
        let (model, calib) = setup(ModelArch::new(8, 1, 2));
        let cfg = RunConfig {
            method: Method::Magnitude,
            sparsity: 0.5,
            ..RunConfig::default()
        };
        let r = run(&model, &calib, &cfg).unwrap();
        assert_eq!(infer_masks(&r.pruned), r.masks);
    }
}
