//! Alternating layer-pair solver.
//!
//! Each block is optimized against the frozen dense reference: its input is
//! the dense input `x`, and the targets are the dense intermediate values.
//! Blocks are therefore independent and can be solved in any order or in
//! parallel. One outer iteration on a block runs: prune (mask + refit), the
//! activation update(s), the output update, then weight recovery from the
//! updated iterates.

pub mod ffn;
pub mod lowrank;
pub mod mha;

use serde::{Deserialize, Serialize};

use crate::allocation::{PruneMask, ScoreRule};
use crate::error::{Error, Result};
use crate::importance::UnitGroup;
use crate::model::{ActivationCache, Block, BlockKind, BlockRecord, FfnBlock, MhaBlock, ToyModel};
use crate::parallel::map_ordered;
use crate::tensor::{ridge_fit, DenseMatrix};

/// How masks evolve across outer iterations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MaskPolicy {
    /// Re-score units with the closed form every iteration, keeping each
    /// group's retained count.
    ClosedForm,
    /// Keep the initial masks.
    Fixed,
}

/// Structured unit for attention masks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Granularity {
    /// Rows of each projection independently.
    Unit,
    /// Whole heads across Q, K, V and O.
    Head,
}

/// How weights are recovered from the updated activations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Recovery {
    Ridge,
    /// Plain gradient descent on the same ridge objective.
    Sgd {
        steps: usize,
        lr: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverConfig {
    pub alpha: f64,
    pub beta: f64,
    /// Outer iterations `K`.
    pub iters: usize,
    /// Gradient steps per attention sub-solve.
    pub inner_steps: usize,
    /// Relative step size of the attention sub-solves, as a fraction of
    /// `1 / (Lipschitz bound)`.
    pub lr: f64,
    pub ridge_eps: f64,
    pub mask_policy: MaskPolicy,
    /// Ranking of closed-form scores when masks are (re)chosen.
    pub score_rule: ScoreRule,
    pub granularity: Granularity,
    pub recovery: Recovery,
    /// Refit the kept columns of the second matrix of each pair on the
    /// activations the final pruned first matrix actually produces.
    pub final_refit: bool,
    /// Return, per block, the iterate with the lowest reconstruction loss
    /// (the masked starting point counts as iterate 0) instead of the last.
    pub keep_best: bool,
    pub threads: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 1.0,
            iters: 20,
            inner_steps: 20,
            lr: 0.5,
            ridge_eps: 1e-6,
            mask_policy: MaskPolicy::ClosedForm,
            score_rule: ScoreRule::Ratio,
            granularity: Granularity::Unit,
            recovery: Recovery::Ridge,
            final_refit: true,
            keep_best: true,
            threads: 1,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0) || !(self.beta > 0.0) {
            return Err(Error::param("alpha/beta", "must be positive"));
        }
        if self.iters == 0 {
            return Err(Error::param("iters", "K must be >= 1"));
        }
        if !(self.lr > 0.0) {
            return Err(Error::param("lr", "must be positive"));
        }
        if !(self.ridge_eps >= 0.0) {
            return Err(Error::param("ridge_eps", "must be >= 0"));
        }
        Ok(())
    }
}

/// Masks of every unit group of one block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockMasks {
    pub block: usize,
    pub groups: Vec<(UnitGroup, PruneMask)>,
}

impl BlockMasks {
    pub fn dense(block: &Block, b: usize) -> Self {
        let groups = match block {
            Block::Ffn(f) => vec![(UnitGroup::Hidden, PruneMask::dense(f.w1.rows()))],
            Block::Mha(m) => vec![
                (UnitGroup::Query, PruneMask::dense(m.wq.rows())),
                (UnitGroup::Key, PruneMask::dense(m.wk.rows())),
                (UnitGroup::ValueOut, PruneMask::dense(m.wv.rows())),
            ],
        };
        Self { block: b, groups }
    }

    pub fn get(&self, group: UnitGroup) -> Option<&PruneMask> {
        self.groups.iter().find(|(g, _)| *g == group).map(|(_, m)| m)
    }

    pub fn set(&mut self, group: UnitGroup, mask: PruneMask) {
        if let Some(slot) = self.groups.iter_mut().find(|(g, _)| *g == group) {
            slot.1 = mask;
        } else {
            self.groups.push((group, mask));
        }
    }

    fn require(&self, group: UnitGroup) -> Result<&PruneMask> {
        self.get(group)
            .ok_or_else(|| Error::param("masks", format!("block {} has no {group:?} mask", self.block)))
    }
}

pub(crate) fn mask_rows(w: &DenseMatrix, mask: &PruneMask) -> DenseMatrix {
    let mut out = w.clone();
    for (i, &keep) in mask.bits.iter().enumerate() {
        if !keep {
            out.row_mut(i).iter_mut().for_each(|v| *v = 0.0);
        }
    }
    out
}

pub(crate) fn mask_cols(w: &DenseMatrix, mask: &PruneMask) -> DenseMatrix {
    let mut out = w.clone();
    for i in 0..out.rows() {
        let row = out.row_mut(i);
        for (j, &keep) in mask.bits.iter().enumerate() {
            if !keep {
                row[j] = 0.0;
            }
        }
    }
    out
}

/// Effective weights `M ⊙ Ŵ` of a block.
pub fn apply_masks(block: &Block, masks: &BlockMasks) -> Result<Block> {
    Ok(match block {
        Block::Ffn(f) => {
            let m = masks.require(UnitGroup::Hidden)?;
            check_len(m, f.w1.rows())?;
            Block::Ffn(FfnBlock {
                w1: mask_rows(&f.w1, m),
                w2: mask_cols(&f.w2, m),
            })
        }
        Block::Mha(a) => {
            let (q, k, vo) = (
                masks.require(UnitGroup::Query)?,
                masks.require(UnitGroup::Key)?,
                masks.require(UnitGroup::ValueOut)?,
            );
            check_len(q, a.wq.rows())?;
            check_len(k, a.wk.rows())?;
            check_len(vo, a.wv.rows())?;
            Block::Mha(MhaBlock {
                wq: mask_rows(&a.wq, q),
                wk: mask_rows(&a.wk, k),
                wv: mask_rows(&a.wv, vo),
                wo: mask_cols(&a.wo, vo),
            })
        }
    })
}

fn check_len(mask: &PruneMask, n: usize) -> Result<()> {
    if mask.len() != n {
        return Err(Error::dim("mask", format!("{} bits for {n} units", mask.len())));
    }
    Ok(())
}

/// `min_W ‖W a_prev − z‖² + eps‖W‖²`.
pub fn recover_weights(z: &DenseMatrix, a_prev: &DenseMatrix, eps: f64) -> Result<DenseMatrix> {
    ridge_fit(z, a_prev, eps)
}

/// Gradient-descent solve of the same ridge objective, starting from `init`.
pub fn recover_weights_sgd(
    z: &DenseMatrix,
    a_prev: &DenseMatrix,
    eps: f64,
    init: &DenseMatrix,
    steps: usize,
    lr: f64,
) -> Result<DenseMatrix> {
    let gram = crate::tensor::matmul_nt(a_prev, a_prev)?;
    let cross = crate::tensor::matmul_nt(z, a_prev)?;
    // Lipschitz bound of the gradient 2(W G − C) + 2 eps W
    let bound = 2.0 * (gram.frobenius() + eps);
    let step = if bound > 0.0 { lr / bound } else { lr };
    let mut w = init.clone();
    for _ in 0..steps {
        let mut g = crate::tensor::matmul(&w, &gram)?.sub(&cross)?;
        g.add_assign_scaled(&w, eps);
        w.add_assign_scaled(&g, -2.0 * step);
    }
    Ok(w)
}

pub(crate) fn recover(
    cfg: &SolverConfig,
    z: &DenseMatrix,
    a_prev: &DenseMatrix,
    init: &DenseMatrix,
) -> Result<DenseMatrix> {
    match cfg.recovery {
        Recovery::Ridge => recover_weights(z, a_prev, cfg.ridge_eps),
        Recovery::Sgd { steps, lr } => recover_weights_sgd(z, a_prev, cfg.ridge_eps, init, steps, lr),
    }
}

/// Objective of one block after one outer iteration.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TraceRow {
    /// 1-based outer iteration.
    pub iteration: usize,
    pub block: usize,
    pub layer: usize,
    pub kind: BlockKind,
    pub objective: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdmmOutcome {
    /// Model with masks applied multiplicatively.
    pub model: ToyModel,
    pub masks: Vec<BlockMasks>,
    /// Iteration-major: all blocks of iteration 1, then iteration 2, ...
    pub trace: Vec<TraceRow>,
}

pub(crate) fn non_finite(stage: String, iteration: usize, trace: Vec<f64>) -> Error {
    Error::Solver {
        stage,
        detail: format!("objective became non-finite at iteration {iteration}"),
        trace,
    }
}

/// Runs `cfg.iters` outer iterations on every block and returns the pruned
/// model, final masks and objective trace.
pub fn run_outer_loop(
    dense: &ToyModel,
    cache: &ActivationCache,
    masks: &[BlockMasks],
    cfg: &SolverConfig,
) -> Result<AdmmOutcome> {
    cfg.validate()?;
    if masks.len() != dense.blocks.len() || cache.num_blocks() != dense.blocks.len() {
        return Err(Error::param(
            "plan",
            format!(
                "{} block masks and {} cached blocks for {} blocks",
                masks.len(),
                cache.num_blocks(),
                dense.blocks.len()
            ),
        ));
    }
    let jobs: Vec<usize> = (0..dense.blocks.len()).collect();
    let results = map_ordered(jobs, cfg.threads, |b| -> Result<(Block, BlockMasks, Vec<f64>)> {
        let layer = dense.layer_of(b);
        let x = cache.input(b);
        match (&dense.blocks[b], cache.record(b)) {
            (Block::Ffn(f), BlockRecord::Ffn(rec)) => {
                let mask = masks[b].require(UnitGroup::Hidden)?.clone();
                let (block, mask, trace) = ffn::solve_block(f, rec, x, mask, cfg, cache.samples(), layer)?;
                let mut out = masks[b].clone();
                out.set(UnitGroup::Hidden, mask);
                Ok((Block::Ffn(block), out, trace))
            }
            (Block::Mha(m), BlockRecord::Mha(rec)) => {
                let (block, out, trace) = mha::solve_block(m, rec, x, &masks[b], cfg, cache, dense.arch.h, layer)?;
                Ok((Block::Mha(block), out, trace))
            }
            _ => Err(Error::dim("run_outer_loop", "cache does not match model")),
        }
    });
    let mut model = dense.clone();
    let mut final_masks = Vec::with_capacity(results.len());
    let mut traces = Vec::with_capacity(results.len());
    for (b, r) in results.into_iter().enumerate() {
        let (block, m, t) = r?;
        model.blocks[b] = block;
        final_masks.push(m);
        traces.push(t);
    }
    let mut trace = Vec::with_capacity(cfg.iters * traces.len());
    for it in 0..cfg.iters {
        for (b, t) in traces.iter().enumerate() {
            trace.push(TraceRow {
                iteration: it + 1,
                block: b,
                layer: dense.layer_of(b),
                kind: dense.blocks[b].kind(),
                objective: t[it],
            });
        }
    }
    Ok(AdmmOutcome {
        model,
        masks: final_masks,
        trace,
    })
}

/// `trace.csv` contents: `iteration,layer,block_kind,objective`.
pub fn trace_csv(trace: &[TraceRow]) -> String {
    let mut out = String::from("iteration,layer,block_kind,objective\n");
    for r in trace {
        out.push_str(&format!(
            "{},{},{},{:.17e}\n",
            r.iteration, r.layer, r.kind, r.objective
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{matmul, Rng};

    #[test]
    fn recover_exact_and_identity() {
        let mut rng = Rng::new(2);
        let w = DenseMatrix::random_normal(3, 4, 1.0, &mut rng);
        let a = DenseMatrix::random_normal(4, 30, 1.0, &mut rng);
        let z = matmul(&w, &a).unwrap();
        assert!(recover_weights(&z, &a, 0.0).unwrap().max_abs_diff(&w) < 1e-8);
        let z = DenseMatrix::random_normal(2, 4, 1.0, &mut rng);
        let got = recover_weights(&z, &DenseMatrix::identity(4), 0.0).unwrap();
        assert!(got.max_abs_diff(&z) < 1e-12);
    }

    #[test]
    fn recover_rank_deficient() {
        let mut rng = Rng::new(5);
        let base = DenseMatrix::random_normal(2, 10, 1.0, &mut rng);
        // third feature duplicates the first
        let a = DenseMatrix::from_fn(3, 10, |i, t| base.get(if i == 2 { 0 } else { i }, t));
        let z = DenseMatrix::random_normal(2, 10, 1.0, &mut rng);
        assert!(matches!(recover_weights(&z, &a, 0.0), Err(Error::Singular { .. })));
        let ridge = recover_weights(&z, &a, 1e-6).unwrap();
        let gd = recover_weights_sgd(&z, &a, 1e-6, &DenseMatrix::zeros(2, 3), 200_000, 0.9).unwrap();
        assert!(ridge.max_abs_diff(&gd) < 1e-5, "{}", ridge.max_abs_diff(&gd));
    }

    #[test]
    fn masks_zero_rows_and_cols() {
        let block = Block::Ffn(FfnBlock {
            w1: DenseMatrix::from_fn(3, 2, |i, j| (i + j + 1) as f64),
            w2: DenseMatrix::from_fn(2, 3, |i, j| (i * 3 + j + 1) as f64),
        });
        let mut masks = BlockMasks::dense(&block, 0);
        masks.set(
            UnitGroup::Hidden,
            PruneMask {
                bits: vec![true, false, true],
                k: 2,
            },
        );
        let Block::Ffn(f) = apply_masks(&block, &masks).unwrap() else {
            panic!()
        };
        assert_eq!(f.w1.row(1), &[0.0, 0.0]);
        assert_eq!(f.w2.col(1), vec![0.0, 0.0]);
        assert_eq!(f.w1.row(0), &[1.0, 2.0]);
    }
}
