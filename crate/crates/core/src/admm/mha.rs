//! Attention block solver.
//!
//! The constraints on Q, K, V and O are separated: besides the attention
//! output iterate `attn` the solver keeps per-(sample, head) probability and
//! logit iterates `a` and `z`. Both are stored stacked as `(N·h·T) × T`
//! matrices, block `s·h + i` occupying rows `(s·h + i)·T ..`. Three gradient
//! sub-solves run per outer iteration:
//!
//! * `a`:    `α‖attn − P(a)‖² + β‖a − φ(z)‖²` with `P_{s,i} = V̂_{s,i} a_{s,i}ᵀ`
//! * `attn`: `α‖y_pre − WO' attn‖² + α‖attn − P(a)‖²`
//! * `z`:    `β‖a − φ(z)‖² + α‖z − Q̂ᵀK_pre/√dh‖² + α‖z − Q_preᵀK̂/√dh‖²`
//!
//! where `φ` is the row softmax and hats are the masked projections of the
//! dense input.

use super::{mask_cols, mask_rows, non_finite, recover, BlockMasks, Granularity, MaskPolicy, SolverConfig};
use crate::allocation::{
    binarize_by_threshold, context_from_activations, rank_desc, unit_scores, ClosedFormContext, PruneMask, ScoreRule,
};
use crate::error::{Error, Result};
use crate::eval::mha_loss;
use crate::importance::UnitGroup;
use crate::model::{attention, ActivationCache, MhaBlock, MhaRecord};
use crate::tensor::{dot, matmul, matmul_nt, matmul_tn, ridge_fit, softmax_rows, DenseMatrix};

/// Sub-block `(head i, sample s)` of a feature-major `d × (N·T)` matrix.
fn head_block(m: &DenseMatrix, i: usize, s: usize, dh: usize, t: usize) -> DenseMatrix {
    m.row_slice(i * dh, (i + 1) * dh).col_slice(s * t, (s + 1) * t)
}

fn put(m: &mut DenseMatrix, r0: usize, c0: usize, blk: &DenseMatrix) {
    for r in 0..blk.rows() {
        m.row_mut(r0 + r)[c0..c0 + blk.cols()].copy_from_slice(blk.row(r));
    }
}

/// Stacks square per-(sample, head) matrices on top of each other.
pub fn stack(blocks: &[DenseMatrix]) -> DenseMatrix {
    let t = blocks.first().map_or(0, DenseMatrix::cols);
    let mut out = DenseMatrix::zeros(blocks.len() * t, t);
    for (idx, b) in blocks.iter().enumerate() {
        put(&mut out, idx * t, 0, b);
    }
    out
}

fn block(stacked: &DenseMatrix, idx: usize, t: usize) -> DenseMatrix {
    stacked.row_slice(idx * t, (idx + 1) * t)
}

/// Stacked scaled logits `Q_{s,i}ᵀ K_{s,i} / √dh`.
pub fn scaled_logits(q: &DenseMatrix, k: &DenseMatrix, heads: usize, seq_len: usize) -> Result<DenseMatrix> {
    let dh = q.rows() / heads;
    let n = q.cols() / seq_len;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut out = DenseMatrix::zeros(n * heads * seq_len, seq_len);
    for s in 0..n {
        for i in 0..heads {
            let z = matmul_tn(&head_block(q, i, s, dh, seq_len), &head_block(k, i, s, dh, seq_len))?.scale(scale);
            put(&mut out, (s * heads + i) * seq_len, 0, &z);
        }
    }
    Ok(out)
}

/// Fixed quantities of the three sub-objectives for one set of effective
/// weights.
#[derive(Debug, Clone, PartialEq)]
pub struct MhaProblem {
    pub alpha: f64,
    pub beta: f64,
    pub heads: usize,
    pub seq_len: usize,
    /// `WV' x`.
    pub vhat: DenseMatrix,
    /// Effective output projection `WO'`.
    pub wo: DenseMatrix,
    pub out_pre: DenseMatrix,
    /// Stacked `Q̂ᵀ K_pre / √dh`.
    pub s_q: DenseMatrix,
    /// Stacked `Q_preᵀ K̂ / √dh`.
    pub s_k: DenseMatrix,
}

impl MhaProblem {
    pub fn new(
        eff: &MhaBlock,
        rec: &MhaRecord,
        x: &DenseMatrix,
        heads: usize,
        seq_len: usize,
        alpha: f64,
        beta: f64,
    ) -> Result<Self> {
        let qhat = matmul(&eff.wq, x)?;
        let khat = matmul(&eff.wk, x)?;
        Ok(Self {
            alpha,
            beta,
            heads,
            seq_len,
            vhat: matmul(&eff.wv, x)?,
            wo: eff.wo.clone(),
            out_pre: rec.out.clone(),
            s_q: scaled_logits(&qhat, &rec.k, heads, seq_len)?,
            s_k: scaled_logits(&rec.q, &khat, heads, seq_len)?,
        })
    }

    fn dh(&self) -> usize {
        self.vhat.rows() / self.heads
    }

    fn samples(&self) -> usize {
        self.vhat.cols() / self.seq_len
    }

    /// `P(a)`: head outputs rebuilt from the value projection and `a`.
    pub fn projection(&self, a: &DenseMatrix) -> Result<DenseMatrix> {
        let (dh, t) = (self.dh(), self.seq_len);
        let mut p = DenseMatrix::zeros(self.vhat.rows(), self.vhat.cols());
        for s in 0..self.samples() {
            for i in 0..self.heads {
                let blk = matmul_nt(&head_block(&self.vhat, i, s, dh, t), &block(a, s * self.heads + i, t))?;
                put(&mut p, i * dh, s * t, &blk);
            }
        }
        Ok(p)
    }

    pub fn a_objective(&self, a: &DenseMatrix, attn: &DenseMatrix, z: &DenseMatrix) -> Result<f64> {
        let p = self.projection(a)?;
        Ok(self.alpha * attn.dist_sq(&p) + self.beta * a.dist_sq(&softmax_rows(z)))
    }

    pub fn a_gradient(&self, a: &DenseMatrix, attn: &DenseMatrix, z: &DenseMatrix) -> Result<DenseMatrix> {
        let (dh, t) = (self.dh(), self.seq_len);
        let resid = attn.sub(&self.projection(a)?)?;
        let mut g = a.sub(&softmax_rows(z))?.scale(2.0 * self.beta);
        for s in 0..self.samples() {
            for i in 0..self.heads {
                let idx = s * self.heads + i;
                let gb = matmul_tn(&head_block(&resid, i, s, dh, t), &head_block(&self.vhat, i, s, dh, t))?;
                for r in 0..t {
                    let row = g.row_mut(idx * t + r);
                    for (c, v) in row.iter_mut().enumerate() {
                        *v -= 2.0 * self.alpha * gb.get(r, c);
                    }
                }
            }
        }
        Ok(g)
    }

    pub fn attn_objective(&self, attn: &DenseMatrix, a: &DenseMatrix) -> Result<f64> {
        let p = self.projection(a)?;
        let out = matmul(&self.wo, attn)?;
        Ok(self.alpha * (self.out_pre.dist_sq(&out) + attn.dist_sq(&p)))
    }

    pub fn attn_gradient(&self, attn: &DenseMatrix, a: &DenseMatrix) -> Result<DenseMatrix> {
        let resid = self.out_pre.sub(&matmul(&self.wo, attn)?)?;
        let mut g = matmul_tn(&self.wo, &resid)?.scale(-2.0 * self.alpha);
        g.add_assign_scaled(&attn.sub(&self.projection(a)?)?, 2.0 * self.alpha);
        Ok(g)
    }

    pub fn z_objective(&self, z: &DenseMatrix, a: &DenseMatrix) -> f64 {
        self.beta * a.dist_sq(&softmax_rows(z)) + self.alpha * (z.dist_sq(&self.s_q) + z.dist_sq(&self.s_k))
    }

    pub fn z_gradient(&self, z: &DenseMatrix, a: &DenseMatrix) -> Result<DenseMatrix> {
        let p = softmax_rows(z);
        let mut g = DenseMatrix::zeros(z.rows(), z.cols());
        for r in 0..z.rows() {
            let pr = p.row(r);
            let v: Vec<f64> = a.row(r).iter().zip(pr).map(|(ai, pi)| -2.0 * (ai - pi)).collect();
            let pv = dot(pr, &v);
            for (c, out) in g.row_mut(r).iter_mut().enumerate() {
                *out = self.beta * pr[c] * (v[c] - pv);
            }
        }
        g.add_assign_scaled(&z.sub(&self.s_q)?, 2.0 * self.alpha);
        g.add_assign_scaled(&z.sub(&self.s_k)?, 2.0 * self.alpha);
        Ok(g)
    }

    /// Sum of all five terms (not normalized by `N`).
    pub fn total(&self, a: &DenseMatrix, attn: &DenseMatrix, z: &DenseMatrix) -> Result<f64> {
        let p = self.projection(a)?;
        let out = matmul(&self.wo, attn)?;
        Ok(self.alpha * self.out_pre.dist_sq(&out)
            + self.alpha * attn.dist_sq(&p)
            + self.beta * a.dist_sq(&softmax_rows(z))
            + self.alpha * (z.dist_sq(&self.s_q) + z.dist_sq(&self.s_k)))
    }

    fn lipschitz_a(&self) -> f64 {
        let (dh, t) = (self.dh(), self.seq_len);
        let mut vmax: f64 = 0.0;
        for s in 0..self.samples() {
            for i in 0..self.heads {
                vmax = vmax.max(head_block(&self.vhat, i, s, dh, t).frobenius_sq());
            }
        }
        2.0 * self.alpha * vmax + 2.0 * self.beta
    }

    fn lipschitz_attn(&self) -> f64 {
        2.0 * self.alpha * (self.wo.frobenius_sq() + 1.0)
    }

    fn lipschitz_z(&self) -> f64 {
        4.0 * self.beta + 4.0 * self.alpha
    }
}

/// Plain gradient descent with a fixed step. Fails when the objective ends
/// more than ten times above where it started.
fn descend<F, G>(x0: DenseMatrix, steps: usize, step: f64, stage: &str, f: F, grad: G) -> Result<DenseMatrix>
where
    F: Fn(&DenseMatrix) -> Result<f64>,
    G: Fn(&DenseMatrix) -> Result<DenseMatrix>,
{
    if steps == 0 {
        return Ok(x0);
    }
    let mut x = x0;
    let mut trace = vec![f(&x)?];
    for _ in 0..steps {
        let g = grad(&x)?;
        x.add_assign_scaled(&g, -step);
        trace.push(f(&x)?);
    }
    let (start, end) = (trace[0], *trace.last().expect("non-empty"));
    if !end.is_finite() || (end > 10.0 * start && end > 1e-12) {
        return Err(Error::Solver {
            stage: stage.to_string(),
            detail: format!("objective grew from {start:.6e} to {end:.6e}"),
            trace,
        });
    }
    Ok(x)
}

/// Iterates and free weight estimates of one attention block.
#[derive(Debug, Clone, PartialEq)]
pub struct MhaState {
    pub weights: MhaBlock,
    pub masks: BlockMasks,
    /// Stacked attention probabilities.
    pub a: DenseMatrix,
    /// Concatenated head outputs.
    pub attn: DenseMatrix,
    /// Stacked logits.
    pub z: DenseMatrix,
}

impl MhaState {
    pub fn new(dense: &MhaBlock, rec: &MhaRecord, masks: BlockMasks) -> Self {
        Self {
            weights: dense.clone(),
            masks,
            a: stack(&rec.att.probs),
            attn: rec.att.attn.clone(),
            z: stack(&rec.att.logits),
        }
    }

    pub fn effective(&self) -> Result<MhaBlock> {
        let get = |g| {
            self.masks
                .get(g)
                .ok_or_else(|| Error::param("masks", format!("attention block has no {g:?} mask")))
        };
        let (q, k, vo) = (get(UnitGroup::Query)?, get(UnitGroup::Key)?, get(UnitGroup::ValueOut)?);
        Ok(MhaBlock {
            wq: mask_rows(&self.weights.wq, q),
            wk: mask_rows(&self.weights.wk, k),
            wv: mask_rows(&self.weights.wv, vo),
            wo: mask_cols(&self.weights.wo, vo),
        })
    }
}

/// Context for rows of a projection whose per-unit logit contribution is
/// `own_j ⊗ other_j / √dh` within each (sample, head) block.
fn logit_context(
    own: &DenseMatrix,
    other: &DenseMatrix,
    z: &DenseMatrix,
    own_is_query: bool,
    heads: usize,
    seq_len: usize,
    samples: usize,
) -> Result<ClosedFormContext> {
    let base = context_from_activations(own, own, None, samples)?;
    let d = own.rows();
    let dh = d / heads;
    let inv = 1.0 / samples.max(1) as f64;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut dd = vec![0.0; d];
    let mut zz = vec![0.0; d];
    for (j, (dj, zj)) in dd.iter_mut().zip(zz.iter_mut()).enumerate() {
        let i = j / dh;
        let (mut sq, mut cross) = (0.0, 0.0);
        for s in 0..samples {
            let cols = s * seq_len..(s + 1) * seq_len;
            let u = &own.row(j)[cols.clone()];
            let w = &other.row(j)[cols];
            sq += dot(u, u) * dot(w, w) * scale * scale;
            let zb = block(z, s * heads + i, seq_len);
            let (left, right) = if own_is_query { (u, w) } else { (w, u) };
            // ⟨left ⊗ right, Z⟩ = leftᵀ Z right
            for (t, &l) in left.iter().enumerate() {
                cross += l * dot(zb.row(t), right) * scale;
            }
        }
        *dj = (sq * inv).sqrt();
        *zj = if *dj > 0.0 { cross * inv / *dj } else { 0.0 };
    }
    ClosedFormContext::new(base.b, base.c, dd, zz)
}

fn mask_from_heads(head_keep: &[bool], dh: usize) -> PruneMask {
    let bits: Vec<bool> = head_keep.iter().flat_map(|&k| std::iter::repeat_n(k, dh)).collect();
    let k = bits.iter().filter(|&&b| b).count();
    PruneMask { bits, k }
}

/// Whole-head masks keeping the `keep` heads with the highest mean unit
/// score across the Q, K and VO groups.
pub fn head_masks(scores: [&[f64]; 3], heads: usize, keep: usize) -> [PruneMask; 3] {
    let dh = scores[0].len() / heads;
    let head_score: Vec<f64> = (0..heads)
        .map(|i| {
            let total: f64 = scores.iter().map(|s| s[i * dh..(i + 1) * dh].iter().sum::<f64>()).sum();
            total / (3 * dh) as f64
        })
        .collect();
    let mut keep_bits = vec![false; heads];
    for &i in rank_desc(&head_score).iter().take(keep) {
        keep_bits[i] = true;
    }
    let m = mask_from_heads(&keep_bits, dh);
    [m.clone(), m.clone(), m]
}

/// Closed-form unit scores of the Q, K and VO groups for free weights `w`
/// against the logit iterate `z` and attention iterate `attn`.
#[allow(clippy::too_many_arguments)]
pub fn closed_form_scores(
    w: &MhaBlock,
    rec: &MhaRecord,
    x: &DenseMatrix,
    z: &DenseMatrix,
    attn: &DenseMatrix,
    heads: usize,
    seq_len: usize,
    samples: usize,
    rule: ScoreRule,
) -> Result<[Vec<f64>; 3]> {
    let qhat = matmul(&w.wq, x)?;
    let khat = matmul(&w.wk, x)?;
    let vhat = matmul(&w.wv, x)?;
    let q_ctx = logit_context(&qhat, &rec.k, z, true, heads, seq_len, samples)?;
    let k_ctx = logit_context(&khat, &rec.q, z, false, heads, seq_len, samples)?;
    let vo_ctx = context_from_activations(&vhat, &vhat, Some((&w.wo, attn, &rec.out)), samples)?;
    Ok([
        unit_scores(&q_ctx, rule),
        unit_scores(&k_ctx, rule),
        unit_scores(&vo_ctx, rule),
    ])
}

/// Re-scores masks (closed-form policy) and refits the kept output columns on
/// the current attention iterate.
pub fn mha_prune_step(
    state: &mut MhaState,
    rec: &MhaRecord,
    x: &DenseMatrix,
    cfg: &SolverConfig,
    heads: usize,
    seq_len: usize,
    samples: usize,
) -> Result<()> {
    if cfg.mask_policy == MaskPolicy::ClosedForm {
        let w = &state.weights;
        let scores = closed_form_scores(
            w,
            rec,
            x,
            &state.z,
            &state.attn,
            heads,
            seq_len,
            samples,
            cfg.score_rule,
        )?;
        let groups = [UnitGroup::Query, UnitGroup::Key, UnitGroup::ValueOut];
        match cfg.granularity {
            Granularity::Unit => {
                for (g, s) in groups.iter().zip(&scores) {
                    let k = state.masks.get(*g).map_or(s.len(), |m| m.k);
                    state.masks.set(*g, binarize_by_threshold(s, k)?);
                }
            }
            Granularity::Head => {
                let dh = w.wv.rows() / heads;
                let k = state.masks.get(UnitGroup::ValueOut).map_or(w.wv.rows(), |m| m.k);
                let new = head_masks([&scores[0], &scores[1], &scores[2]], heads, k / dh);
                for (g, m) in groups.iter().zip(new) {
                    state.masks.set(*g, m);
                }
            }
        }
    }
    let kept = state
        .masks
        .get(UnitGroup::ValueOut)
        .map(PruneMask::kept)
        .unwrap_or_default();
    refit_columns(&mut state.weights.wo, &rec.out, &state.attn, &kept, cfg.ridge_eps)
}

fn refit_columns(
    w: &mut DenseMatrix,
    target: &DenseMatrix,
    inputs: &DenseMatrix,
    kept: &[usize],
    eps: f64,
) -> Result<()> {
    if kept.is_empty() {
        return Ok(());
    }
    let fit = ridge_fit(target, &inputs.select_rows(kept), eps)?;
    for (c, &j) in kept.iter().enumerate() {
        for i in 0..w.rows() {
            w.set(i, j, fit.get(i, c));
        }
    }
    Ok(())
}

/// Runs the `a`, `attn` and `z` sub-solves in that order and returns the
/// normalized total objective afterwards.
pub fn mha_update(
    state: &mut MhaState,
    problem: &MhaProblem,
    cfg: &SolverConfig,
    samples: usize,
    stage: &str,
) -> Result<f64> {
    let steps = cfg.inner_steps;
    let (attn, z) = (state.attn.clone(), state.z.clone());
    state.a = descend(
        state.a.clone(),
        steps,
        cfg.lr / problem.lipschitz_a(),
        &format!("{stage} a-update"),
        |a| problem.a_objective(a, &attn, &z),
        |a| problem.a_gradient(a, &attn, &z),
    )?;
    let a = state.a.clone();
    state.attn = descend(
        state.attn.clone(),
        steps,
        cfg.lr / problem.lipschitz_attn(),
        &format!("{stage} attn-update"),
        |m| problem.attn_objective(m, &a),
        |m| problem.attn_gradient(m, &a),
    )?;
    state.z = descend(
        state.z.clone(),
        steps,
        cfg.lr / problem.lipschitz_z(),
        &format!("{stage} z-update"),
        |m| Ok(problem.z_objective(m, &a)),
        |m| problem.z_gradient(m, &a),
    )?;
    Ok(problem.total(&state.a, &state.attn, &state.z)? / samples as f64)
}

/// Solves `Σ_s X_s X_sᵀ W H_s H_sᵀ + eps·W = Σ_s X_s Z_s H_sᵀ` for `W` by
/// conjugate gradients from `init`; the least-squares problem behind it is
/// `min_W Σ_s ‖X_sᵀ W H_s − Z_s‖² + eps‖W‖²`.
pub fn bilinear_fit(
    xs: &[DenseMatrix],
    hs: &[DenseMatrix],
    zs: &[DenseMatrix],
    eps: f64,
    init: DenseMatrix,
) -> Result<DenseMatrix> {
    let grams: Vec<DenseMatrix> = xs.iter().map(|x| matmul_nt(x, x)).collect::<Result<_>>()?;
    let hgrams: Vec<DenseMatrix> = hs.iter().map(|h| matmul_nt(h, h)).collect::<Result<_>>()?;
    let op = |w: &DenseMatrix| -> Result<DenseMatrix> {
        let mut out = w.scale(eps);
        for (g, f) in grams.iter().zip(&hgrams) {
            out.add_assign_scaled(&matmul(&matmul(g, w)?, f)?, 1.0);
        }
        Ok(out)
    };
    let mut rhs = DenseMatrix::zeros(init.rows(), init.cols());
    for ((x, h), z) in xs.iter().zip(hs).zip(zs) {
        rhs.add_assign_scaled(&matmul_nt(&matmul(x, z)?, h)?, 1.0);
    }
    let tol = 1e-10 * rhs.frobenius().max(f64::MIN_POSITIVE);
    let mut w = init;
    let mut r = rhs.sub(&op(&w)?)?;
    let mut p = r.clone();
    let mut rr = r.frobenius_sq();
    for _ in 0..50 {
        if rr.sqrt() <= tol {
            break;
        }
        let ap = op(&p)?;
        let pap = dot(p.data(), ap.data());
        if !(pap > 0.0) {
            break;
        }
        let step = rr / pap;
        w.add_assign_scaled(&p, step);
        r.add_assign_scaled(&ap, -step);
        let rr_next = r.frobenius_sq();
        let mut next = r.clone();
        next.add_assign_scaled(&p, rr_next / rr);
        p = next;
        rr = rr_next;
    }
    Ok(w)
}

/// Rebuilds the four projections from the iterates.
pub fn mha_recover(
    state: &mut MhaState,
    rec: &MhaRecord,
    x: &DenseMatrix,
    cfg: &SolverConfig,
    heads: usize,
    seq_len: usize,
) -> Result<()> {
    let d = x.rows();
    let dh = state.weights.wv.rows() / heads;
    let n = x.cols() / seq_len;
    let t = seq_len;
    let scale = 1.0 / (dh as f64).sqrt();
    state.weights.wo = recover(cfg, &rec.out, &state.attn, &state.weights.wo)?;
    let xs: Vec<DenseMatrix> = (0..n).map(|s| x.col_slice(s * t, (s + 1) * t)).collect();
    for i in 0..heads {
        // attn_{s,i} = WV_i x_s a_{s,i}ᵀ
        let mut feats = DenseMatrix::zeros(d, n * t);
        let mut target = DenseMatrix::zeros(dh, n * t);
        for (s, xs_s) in xs.iter().enumerate() {
            put(
                &mut feats,
                0,
                s * t,
                &matmul_nt(xs_s, &block(&state.a, s * heads + i, t))?,
            );
            put(&mut target, 0, s * t, &head_block(&state.attn, i, s, dh, t));
        }
        let init = state.weights.wv.row_slice(i * dh, (i + 1) * dh);
        let wv_i = recover(cfg, &target, &feats, &init)?;
        put(&mut state.weights.wv, i * dh, 0, &wv_i);

        let zq: Vec<DenseMatrix> = (0..n).map(|s| block(&state.z, s * heads + i, t)).collect();
        let zk: Vec<DenseMatrix> = zq.iter().map(DenseMatrix::transpose).collect();
        let kh: Vec<DenseMatrix> = (0..n).map(|s| head_block(&rec.k, i, s, dh, t).scale(scale)).collect();
        let qh: Vec<DenseMatrix> = (0..n).map(|s| head_block(&rec.q, i, s, dh, t).scale(scale)).collect();
        let wq_i = bilinear_fit(
            &xs,
            &kh,
            &zq,
            cfg.ridge_eps,
            state.weights.wq.row_slice(i * dh, (i + 1) * dh).transpose(),
        )?;
        put(&mut state.weights.wq, i * dh, 0, &wq_i.transpose());
        let wk_i = bilinear_fit(
            &xs,
            &qh,
            &zk,
            cfg.ridge_eps,
            state.weights.wk.row_slice(i * dh, (i + 1) * dh).transpose(),
        )?;
        put(&mut state.weights.wk, i * dh, 0, &wk_i.transpose());
    }
    Ok(())
}

/// One outer iteration: prune, the three sub-solves, recovery.
pub fn mha_iteration(
    state: &mut MhaState,
    rec: &MhaRecord,
    x: &DenseMatrix,
    cfg: &SolverConfig,
    heads: usize,
    seq_len: usize,
    stage: &str,
) -> Result<f64> {
    let samples = x.cols() / seq_len;
    mha_prune_step(state, rec, x, cfg, heads, seq_len, samples)?;
    let problem = MhaProblem::new(&state.effective()?, rec, x, heads, seq_len, cfg.alpha, cfg.beta)?;
    let obj = mha_update(state, &problem, cfg, samples, stage)?;
    mha_recover(state, rec, x, cfg, heads, seq_len)?;
    Ok(obj)
}

/// Effective weights of the state, with the kept `WO` columns refit on the
/// realized attention when `final_refit` is set.
fn finish(
    state: &MhaState,
    rec: &MhaRecord,
    x: &DenseMatrix,
    cfg: &SolverConfig,
    heads: usize,
    seq_len: usize,
) -> Result<MhaBlock> {
    let mut eff = state.effective()?;
    if cfg.final_refit {
        let q = matmul(&eff.wq, x)?;
        let k = matmul(&eff.wk, x)?;
        let v = matmul(&eff.wv, x)?;
        let att = attention(&q, &k, &v, heads, seq_len)?;
        let kept = state
            .masks
            .get(UnitGroup::ValueOut)
            .map(PruneMask::kept)
            .unwrap_or_default();
        refit_columns(&mut eff.wo, &rec.out, &att.attn, &kept, cfg.ridge_eps)?;
    }
    Ok(eff)
}

/// Full solve of one attention block; returns the pruned block, final masks
/// and per-iteration objectives.
#[allow(clippy::too_many_arguments)]
pub fn solve_block(
    dense: &MhaBlock,
    rec: &MhaRecord,
    x: &DenseMatrix,
    masks: &BlockMasks,
    cfg: &SolverConfig,
    cache: &ActivationCache,
    heads: usize,
    layer: usize,
) -> Result<(MhaBlock, BlockMasks, Vec<f64>)> {
    let seq_len = cache.seq_len();
    let mut state = MhaState::new(dense, rec, masks.clone());
    let stage = format!("layer {layer} mha");
    let loss = |b: &MhaBlock| mha_loss(b, rec, x, seq_len, heads, cfg.alpha);
    let mut best = if cfg.keep_best {
        let b = finish(&state, rec, x, cfg, heads, seq_len)?;
        Some((loss(&b)?, b, state.masks.clone()))
    } else {
        None
    };
    let mut trace = Vec::with_capacity(cfg.iters);
    for it in 0..cfg.iters {
        let obj = mha_iteration(&mut state, rec, x, cfg, heads, seq_len, &stage)?;
        trace.push(obj);
        let w = &state.weights;
        if !obj.is_finite() || ![&w.wq, &w.wk, &w.wv, &w.wo].iter().all(|m| m.is_finite()) {
            return Err(non_finite(stage, it + 1, trace));
        }
        log::debug!("{stage} iteration {} objective {obj:.6e}", it + 1);
        if let Some((best_loss, best_block, best_masks)) = &mut best {
            let b = finish(&state, rec, x, cfg, heads, seq_len)?;
            let l = loss(&b)?;
            if l < *best_loss {
                (*best_loss, *best_block, *best_masks) = (l, b, state.masks.clone());
            }
        }
    }
    match best {
        Some((_, block, masks)) => Ok((block, masks, trace)),
        None => Ok((finish(&state, rec, x, cfg, heads, seq_len)?, state.masks, trace)),
    }
}
