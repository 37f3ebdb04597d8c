//! FFN layer pair: `z = W1 x`, `a = ReLU(z)`, `y = W2 a`.
//!
//! The pair objective is
//! `α‖y_pre − W2' a‖² + β‖a − ReLU(z)‖² + α‖z − W1' x‖²` with
//! `W1' = M ⊙ Ŵ1` (rows) and `W2' = M ⊙ Ŵ2` (columns) sharing one
//! hidden-unit mask.

use super::{mask_cols, mask_rows, non_finite, recover, MaskPolicy, SolverConfig};
use crate::allocation::{binarize_by_threshold, context_from_activations, unit_scores, PruneMask, ScoreRule};
use crate::error::Result;
use crate::eval::ffn_loss;
use crate::model::{FfnBlock, FfnRecord};
use crate::tensor::{matmul, matmul_tn, relu, ridge_fit, solve_spd, DenseMatrix};

/// Iterates and free (unmasked) weight estimates of one FFN pair.
#[derive(Debug, Clone, PartialEq)]
pub struct FfnState {
    pub w1: DenseMatrix,
    pub w2: DenseMatrix,
    pub mask: PruneMask,
    /// Hidden activation iterate.
    pub a: DenseMatrix,
    /// Pre-activation iterate.
    pub z: DenseMatrix,
}

impl FfnState {
    /// Starts from the dense weights and the dense activations.
    pub fn new(dense: &FfnBlock, rec: &FfnRecord, mask: PruneMask) -> Self {
        Self {
            w1: dense.w1.clone(),
            w2: dense.w2.clone(),
            mask,
            a: rec.a.clone(),
            z: rec.z.clone(),
        }
    }

    pub fn effective(&self) -> FfnBlock {
        FfnBlock {
            w1: mask_rows(&self.w1, &self.mask),
            w2: mask_cols(&self.w2, &self.mask),
        }
    }
}

/// Closed-form hidden-unit scores for free weights `w1`, `w2`, hidden
/// iterate `a` and dense block output `y_pre`.
pub fn closed_form_scores(
    w1: &DenseMatrix,
    w2: &DenseMatrix,
    x: &DenseMatrix,
    a: &DenseMatrix,
    y_pre: &DenseMatrix,
    samples: usize,
    rule: ScoreRule,
) -> Result<Vec<f64>> {
    let z = matmul(w1, x)?;
    let ctx = context_from_activations(&z, &z, Some((w2, a, y_pre)), samples)?;
    Ok(unit_scores(&ctx, rule))
}

#[derive(Debug, Clone, PartialEq)]
pub struct PruneOutcome {
    pub mask: PruneMask,
    /// `‖W1 x − W1' x‖²` with `W1` the current recovered weights.
    pub recon_loss: f64,
}

/// Chooses the mask (closed-form scores at the current budget, or the fixed
/// mask) and refits the kept units: rows of `W1` on the inputs, columns of
/// `W2` on the kept hidden activations.
pub fn ffn_prune_step(
    state: &mut FfnState,
    x: &DenseMatrix,
    y_pre: &DenseMatrix,
    cfg: &SolverConfig,
    samples: usize,
) -> Result<PruneOutcome> {
    let eps = cfg.ridge_eps;
    let target = matmul(&state.w1, x)?;
    if cfg.mask_policy == MaskPolicy::ClosedForm {
        let scores = closed_form_scores(&state.w1, &state.w2, x, &state.a, y_pre, samples, cfg.score_rule)?;
        state.mask = binarize_by_threshold(&scores, state.mask.k)?;
    }
    let kept = state.mask.kept();
    if !kept.is_empty() {
        let w1_kept = ridge_fit(&target.select_rows(&kept), x, eps)?;
        for (r, &j) in kept.iter().enumerate() {
            state.w1.row_mut(j).copy_from_slice(w1_kept.row(r));
        }
        let w2_kept = ridge_fit(y_pre, &state.a.select_rows(&kept), eps)?;
        for (c, &j) in kept.iter().enumerate() {
            for i in 0..state.w2.rows() {
                state.w2.set(i, j, w2_kept.get(i, c));
            }
        }
    }
    let w1e = mask_rows(&state.w1, &state.mask);
    let recon_loss = target.dist_sq(&matmul(&w1e, x)?);
    Ok(PruneOutcome {
        mask: state.mask.clone(),
        recon_loss,
    })
}

/// `a = (α W2ᵀW2 + β I)⁻¹ (α W2ᵀ y_pre + β ReLU(z))`.
pub fn ffn_update_activation(
    w2: &DenseMatrix,
    y_pre: &DenseMatrix,
    z: &DenseMatrix,
    alpha: f64,
    beta: f64,
) -> Result<DenseMatrix> {
    let mut gram = matmul_tn(w2, w2)?.scale(alpha);
    for i in 0..gram.rows() {
        let v = gram.get(i, i) + beta;
        gram.set(i, i, v);
    }
    let mut rhs = matmul_tn(w2, y_pre)?.scale(alpha);
    rhs.add_assign_scaled(&relu(z), beta);
    solve_spd(&gram, &rhs)
}

/// Coordinate-wise output update: `z⁽¹⁾` where the previous `z` was negative,
/// `z⁽²⁾ = (β a + α z⁽¹⁾) / (α + β)` elsewhere.
pub fn ffn_update_output(
    z1: &DenseMatrix,
    a: &DenseMatrix,
    z_prev: &DenseMatrix,
    alpha: f64,
    beta: f64,
) -> DenseMatrix {
    DenseMatrix::from_fn(z1.rows(), z1.cols(), |i, t| {
        if z_prev.get(i, t) < 0.0 {
            z1.get(i, t)
        } else {
            (beta * a.get(i, t) + alpha * z1.get(i, t)) / (alpha + beta)
        }
    })
}

/// Pair objective per calibration sample.
#[allow(clippy::too_many_arguments)]
pub fn ffn_objective(
    eff: &FfnBlock,
    x: &DenseMatrix,
    y_pre: &DenseMatrix,
    a: &DenseMatrix,
    z: &DenseMatrix,
    alpha: f64,
    beta: f64,
    samples: usize,
) -> Result<f64> {
    let t1 = y_pre.dist_sq(&matmul(&eff.w2, a)?);
    let t2 = a.dist_sq(&relu(z));
    let t3 = z.dist_sq(&matmul(&eff.w1, x)?);
    Ok((alpha * t1 + beta * t2 + alpha * t3) / samples as f64)
}

/// One outer iteration; returns the objective after the output update.
pub fn ffn_iteration(
    state: &mut FfnState,
    x: &DenseMatrix,
    y_pre: &DenseMatrix,
    cfg: &SolverConfig,
    samples: usize,
) -> Result<f64> {
    ffn_prune_step(state, x, y_pre, cfg, samples)?;
    let eff = state.effective();
    state.a = ffn_update_activation(&eff.w2, y_pre, &state.z, cfg.alpha, cfg.beta)?;
    let z1 = matmul(&eff.w1, x)?;
    state.z = ffn_update_output(&z1, &state.a, &state.z, cfg.alpha, cfg.beta);
    let obj = ffn_objective(&eff, x, y_pre, &state.a, &state.z, cfg.alpha, cfg.beta, samples)?;
    state.w1 = recover(cfg, &state.z, x, &state.w1)?;
    state.w2 = recover(cfg, y_pre, &state.a, &state.w2)?;
    Ok(obj)
}

/// Effective weights of the state, with the kept `W2` columns refit on the
/// activations the pruned `W1` produces when `final_refit` is set.
fn finish(state: &FfnState, x: &DenseMatrix, y_pre: &DenseMatrix, cfg: &SolverConfig) -> Result<FfnBlock> {
    let mut eff = state.effective();
    let kept = state.mask.kept();
    if cfg.final_refit && !kept.is_empty() {
        let h = relu(&matmul(&eff.w1, x)?).select_rows(&kept);
        let w2_kept = ridge_fit(y_pre, &h, cfg.ridge_eps)?;
        for (c, &j) in kept.iter().enumerate() {
            for i in 0..eff.w2.rows() {
                eff.w2.set(i, j, w2_kept.get(i, c));
            }
        }
    }
    Ok(eff)
}

/// Full solve of one FFN pair; returns the pruned block, its mask and the
/// per-iteration objectives.
pub fn solve_block(
    dense: &FfnBlock,
    rec: &FfnRecord,
    x: &DenseMatrix,
    mask: PruneMask,
    cfg: &SolverConfig,
    samples: usize,
    layer: usize,
) -> Result<(FfnBlock, PruneMask, Vec<f64>)> {
    let mut state = FfnState::new(dense, rec, mask);
    let seq_len = x.cols() / samples.max(1);
    let loss = |b: &FfnBlock| ffn_loss(b, rec, x, seq_len, cfg.alpha);
    let mut best = if cfg.keep_best {
        let b = finish(&state, x, &rec.out, cfg)?;
        Some((loss(&b)?, b, state.mask.clone()))
    } else {
        None
    };
    let mut trace = Vec::with_capacity(cfg.iters);
    for it in 0..cfg.iters {
        let obj = ffn_iteration(&mut state, x, &rec.out, cfg, samples)?;
        trace.push(obj);
        if !obj.is_finite() || !state.w1.is_finite() || !state.w2.is_finite() {
            return Err(non_finite(format!("layer {layer} ffn"), it + 1, trace));
        }
        log::debug!("layer {layer} ffn iteration {} objective {obj:.6e}", it + 1);
        if let Some((best_loss, best_block, best_mask)) = &mut best {
            let b = finish(&state, x, &rec.out, cfg)?;
            let l = loss(&b)?;
            if l < *best_loss {
                (*best_loss, *best_block, *best_mask) = (l, b, state.mask.clone());
            }
        }
    }
    match best {
        Some((_, block, mask)) => Ok((block, mask, trace)),
        None => Ok((finish(&state, x, &rec.out, cfg)?, state.mask, trace)),
    }
}
