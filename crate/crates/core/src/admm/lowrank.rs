//! Low-rank residual correction of pruned weights.
//!
//! Each retained matrix gets an additive `ΔW = M ⊙ (B A)` with `A` (`r × n`)
//! drawn at scale `1/√n` and `B` (`m × r`) starting at zero, trained by
//! alternating gradient steps on `‖T − (W + ΔW) X‖² / N`. The structural
//! mask multiplies the update, so pruned units stay exactly zero.

use serde::{Deserialize, Serialize};

use super::BlockMasks;
use crate::allocation::PruneMask;
use crate::error::{Error, Result};
use crate::importance::UnitGroup;
use crate::model::{attention, Block, BlockRecord, FfnBlock, MhaBlock};
use crate::tensor::{matmul, matmul_nt, matmul_tn, relu, DenseMatrix, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LowRankConfig {
    pub rank: usize,
    pub steps: usize,
    /// Relative step size, as a fraction of the per-factor Lipschitz bound.
    pub lr: f64,
}

/// Which side of a matrix the structural mask acts on.
#[derive(Debug, Clone, Copy)]
enum Side<'a> {
    Rows(&'a PruneMask),
    Cols(&'a PruneMask),
    Dense,
}

fn apply_side(m: &mut DenseMatrix, side: Side<'_>) {
    match side {
        Side::Rows(mask) => {
            for (i, &keep) in mask.bits.iter().enumerate() {
                if !keep {
                    m.row_mut(i).iter_mut().for_each(|v| *v = 0.0);
                }
            }
        }
        Side::Cols(mask) => {
            for i in 0..m.rows() {
                let row = m.row_mut(i);
                for (j, &keep) in mask.bits.iter().enumerate() {
                    if !keep {
                        row[j] = 0.0;
                    }
                }
            }
        }
        Side::Dense => {}
    }
}

/// Reconstruction loss `‖target − W x‖² / samples`.
pub fn layer_loss(w: &DenseMatrix, x: &DenseMatrix, target: &DenseMatrix, samples: usize) -> Result<f64> {
    Ok(target.dist_sq(&matmul(w, x)?) / samples.max(1) as f64)
}

fn correct_matrix(
    w: &DenseMatrix,
    side: Side<'_>,
    x: &DenseMatrix,
    target: &DenseMatrix,
    samples: usize,
    cfg: &LowRankConfig,
    rng: &mut Rng,
) -> Result<DenseMatrix> {
    let (m, n) = w.shape();
    if cfg.rank == 0 || cfg.rank > m.min(n) {
        return Err(Error::param(
            "rank",
            format!("{} is outside 1..={}", cfg.rank, m.min(n)),
        ));
    }
    if cfg.steps == 0 {
        return Ok(w.clone());
    }
    let inv = 1.0 / samples.max(1) as f64;
    let mut a = DenseMatrix::random_normal(cfg.rank, n, 1.0 / (n as f64).sqrt(), rng);
    let mut b = DenseMatrix::zeros(m, cfg.rank);
    let x_sq = x.frobenius_sq();
    let current = |a: &DenseMatrix, b: &DenseMatrix| -> Result<DenseMatrix> {
        let mut delta = matmul(b, a)?;
        apply_side(&mut delta, side);
        w.add(&delta)
    };
    // gradient of the loss with respect to ΔW, restricted to the mask
    let masked_grad = |wc: &DenseMatrix| -> Result<DenseMatrix> {
        let resid = matmul(wc, x)?.sub(target)?;
        let mut g = matmul_nt(&resid, x)?.scale(2.0 * inv);
        apply_side(&mut g, side);
        Ok(g)
    };
    for _ in 0..cfg.steps {
        let g = masked_grad(&current(&a, &b)?)?;
        let ax = matmul(&a, x)?.frobenius_sq();
        if ax > 0.0 {
            b.add_assign_scaled(&matmul_nt(&g, &a)?, -cfg.lr / (2.0 * inv * ax));
        }
        let g = masked_grad(&current(&a, &b)?)?;
        let bound = 2.0 * inv * b.frobenius_sq() * x_sq;
        if bound > 0.0 {
            a.add_assign_scaled(&matmul_tn(&b, &g)?, -cfg.lr / bound);
        }
    }
    current(&a, &b)
}

/// Corrects every matrix of a pruned block in forward order, each against
/// its dense target on the inputs the already-corrected matrices produce.
#[allow(clippy::too_many_arguments)]
pub fn lowrank_correct(
    pruned: &Block,
    masks: &BlockMasks,
    rec: &BlockRecord,
    x: &DenseMatrix,
    seq_len: usize,
    heads: usize,
    cfg: &LowRankConfig,
    rng: &mut Rng,
) -> Result<Block> {
    let samples = x.cols() / seq_len.max(1);
    let group = |g: UnitGroup| masks.get(g).map_or(Side::Dense, Side::Rows);
    let group_cols = |g: UnitGroup| masks.get(g).map_or(Side::Dense, Side::Cols);
    match (pruned, rec) {
        (Block::Ffn(f), BlockRecord::Ffn(r)) => {
            let w1 = correct_matrix(&f.w1, group(UnitGroup::Hidden), x, &r.z, samples, cfg, rng)?;
            let h = relu(&matmul(&w1, x)?);
            let w2 = correct_matrix(&f.w2, group_cols(UnitGroup::Hidden), &h, &r.out, samples, cfg, rng)?;
            Ok(Block::Ffn(FfnBlock { w1, w2 }))
        }
        (Block::Mha(m), BlockRecord::Mha(r)) => {
            let wq = correct_matrix(&m.wq, group(UnitGroup::Query), x, &r.q, samples, cfg, rng)?;
            let wk = correct_matrix(&m.wk, group(UnitGroup::Key), x, &r.k, samples, cfg, rng)?;
            let wv = correct_matrix(&m.wv, group(UnitGroup::ValueOut), x, &r.v, samples, cfg, rng)?;
            let att = attention(&matmul(&wq, x)?, &matmul(&wk, x)?, &matmul(&wv, x)?, heads, seq_len)?;
            let wo = correct_matrix(
                &m.wo,
                group_cols(UnitGroup::ValueOut),
                &att.attn,
                &r.out,
                samples,
                cfg,
                rng,
            )?;
            Ok(Block::Mha(MhaBlock { wq, wk, wv, wo }))
        }
        _ => Err(Error::dim("lowrank_correct", "record does not match block")),
    }
}

/// Low-rank correction of a single matrix; exposed for checking against the
/// ridge optimum.
pub fn lowrank_correct_matrix(
    w: &DenseMatrix,
    x: &DenseMatrix,
    target: &DenseMatrix,
    samples: usize,
    cfg: &LowRankConfig,
    rng: &mut Rng,
) -> Result<DenseMatrix> {
    correct_matrix(w, Side::Dense, x, target, samples, cfg, rng)
}
