//! Closed-form masks and layer-wise sparsity allocation.
//!
//! The per-unit loss behind the closed form is
//! `ℓ_j(M) = (b_j − M c_j)² + (z_j − M d_j)²`: `b`/`c` compare the dense and
//! current outputs of the unit, `d`/`z` its contribution to the next layer
//! against the dense next-layer output. Retention `ρ` (mask density) is what
//! masks consume; sparsity is `1 − ρ`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::BlockKind;
use crate::parallel::map_ordered;
use crate::tensor::{dot, matmul_tn, softmax_vec, DenseMatrix};

/// Per-unit coefficients `b, c, d, z` of one group of units.
#[derive(Debug, Clone, PartialEq)]
pub struct ClosedFormContext {
    pub b: Vec<f64>,
    pub c: Vec<f64>,
    pub d: Vec<f64>,
    pub z: Vec<f64>,
}

impl ClosedFormContext {
    pub fn new(b: Vec<f64>, c: Vec<f64>, d: Vec<f64>, z: Vec<f64>) -> Result<Self> {
        let n = b.len();
        if c.len() != n || d.len() != n || z.len() != n {
            return Err(Error::dim("closed_form_context", "b, c, d, z differ in length"));
        }
        Ok(Self { b, c, d, z })
    }

    /// Context with no downstream term (`d ≡ 0`).
    pub fn separable(b: Vec<f64>, c: Vec<f64>) -> Result<Self> {
        let n = b.len();
        Self::new(b, c, vec![0.0; n], vec![0.0; n])
    }

    pub fn len(&self) -> usize {
        self.b.len()
    }

    pub fn is_empty(&self) -> bool {
        self.b.is_empty()
    }

    fn denom(&self, j: usize) -> f64 {
        self.c[j] * self.c[j] + self.d[j] * self.d[j]
    }

    /// True when `c_j = d_j = 0`: the unit's loss does not depend on its mask.
    pub fn is_degenerate(&self, j: usize) -> bool {
        self.denom(j) == 0.0
    }

    /// Loss of unit `j` at mask value `m`.
    pub fn unit_loss(&self, j: usize, m: f64) -> f64 {
        let e1 = self.b[j] - m * self.c[j];
        let e2 = self.z[j] - m * self.d[j];
        e1 * e1 + e2 * e2
    }

    /// Summed loss of a (binary or relaxed) mask.
    pub fn loss(&self, mask: &[f64]) -> f64 {
        mask.iter().enumerate().map(|(j, &m)| self.unit_loss(j, m)).sum()
    }

    /// Loss of a binary mask given as bits.
    pub fn loss_bits(&self, bits: &[bool]) -> f64 {
        bits.iter()
            .enumerate()
            .map(|(j, &keep)| self.unit_loss(j, if keep { 1.0 } else { 0.0 }))
            .sum()
    }
}

/// Builds the context of one group of units from activations.
///
/// `b_out` and `c_out` are the dense and current outputs of the units
/// (`n × T`). When `next` is given as `(W_next, a, target)`, unit `j`
/// contributes `U_j = W_next[:, j] · a_j` to the next layer and is compared
/// with `target`. Coefficients are aggregated over tokens so that
/// `c_j b_j = Σ_t B_jt C_jt / N`, `c_j² = Σ_t C_jt² / N`,
/// `d_j z_j = ⟨U_j, target⟩ / N` and `d_j² = ‖U_j‖² / N`.
pub fn context_from_activations(
    b_out: &DenseMatrix,
    c_out: &DenseMatrix,
    next: Option<(&DenseMatrix, &DenseMatrix, &DenseMatrix)>,
    samples: usize,
) -> Result<ClosedFormContext> {
    if b_out.shape() != c_out.shape() {
        return Err(Error::dim(
            "closed_form_context",
            format!("{:?} vs {:?}", b_out.shape(), c_out.shape()),
        ));
    }
    let n = b_out.rows();
    let inv = 1.0 / samples.max(1) as f64;
    let ratio = |num: f64, root: f64| if root > 0.0 { num / root } else { 0.0 };
    let mut b = Vec::with_capacity(n);
    let mut c = Vec::with_capacity(n);
    for j in 0..n {
        let cc = (dot(c_out.row(j), c_out.row(j)) * inv).sqrt();
        b.push(ratio(dot(b_out.row(j), c_out.row(j)) * inv, cc));
        c.push(cc);
    }
    let (d, z) = match next {
        None => (vec![0.0; n], vec![0.0; n]),
        Some((w_next, a, target)) => {
            if w_next.cols() != n || a.rows() != n || target.rows() != w_next.rows() || a.cols() != target.cols() {
                return Err(Error::dim("closed_form_context", "next-layer shapes do not line up"));
            }
            let back = matmul_tn(w_next, target)?;
            let mut d = Vec::with_capacity(n);
            let mut z = Vec::with_capacity(n);
            for j in 0..n {
                let col_sq: f64 = (0..w_next.rows()).map(|i| w_next.get(i, j).powi(2)).sum();
                let dd = (col_sq * dot(a.row(j), a.row(j)) * inv).sqrt();
                z.push(ratio(dot(a.row(j), back.row(j)) * inv, dd));
                d.push(dd);
            }
            (d, z)
        }
    };
    ClosedFormContext::new(b, c, d, z)
}

/// `s_j = (c_j b_j + d_j z_j) / (c_j² + d_j²)`; degenerate units score 0.
pub fn unit_scores_closed_form(ctx: &ClosedFormContext) -> Vec<f64> {
    (0..ctx.len())
        .map(|j| {
            let den = ctx.denom(j);
            if den == 0.0 {
                0.0
            } else {
                (ctx.c[j] * ctx.b[j] + ctx.d[j] * ctx.z[j]) / den
            }
        })
        .collect()
}

/// Loss reduction from keeping unit `j` instead of dropping it:
/// `ℓ_j(0) − ℓ_j(1) = (c_j² + d_j²)(2 s_j − 1)`. Ranking by this quantity
/// minimizes the summed unit loss at a fixed budget.
pub fn unit_keep_gain(ctx: &ClosedFormContext) -> Vec<f64> {
    (0..ctx.len())
        .map(|j| 2.0 * (ctx.c[j] * ctx.b[j] + ctx.d[j] * ctx.z[j]) - ctx.denom(j))
        .collect()
}

/// How closed-form unit scores are ranked for binary masks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScoreRule {
    /// The ratio `s_j` of [`unit_scores_closed_form`].
    #[default]
    Ratio,
    /// The exact loss decrease of [`unit_keep_gain`]; top-k on it minimizes
    /// the summed unit loss at every budget.
    Gain,
}

impl ScoreRule {
    pub fn as_str(self) -> &'static str {
        match self {
            ScoreRule::Ratio => "ratio",
            ScoreRule::Gain => "gain",
        }
    }
}

/// Unit scores under `rule`.
pub fn unit_scores(ctx: &ClosedFormContext, rule: ScoreRule) -> Vec<f64> {
    match rule {
        ScoreRule::Ratio => unit_scores_closed_form(ctx),
        ScoreRule::Gain => unit_keep_gain(ctx),
    }
}

/// Layer retention from the closed form.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Retention {
    /// Value clamped to `[0, 1]`.
    pub value: f64,
    pub raw: f64,
    pub clamped: bool,
}

/// Mean unit score, clamped to `[0, 1]` with a flag.
pub fn closed_form_retention(ctx: &ClosedFormContext) -> Retention {
    let scores = unit_scores_closed_form(ctx);
    let raw = if scores.is_empty() {
        0.0
    } else {
        scores.iter().sum::<f64>() / scores.len() as f64
    };
    let value = raw.clamp(0.0, 1.0);
    Retention {
        value,
        raw,
        clamped: value != raw,
    }
}

/// Continuous mask and its budget multiplier.
#[derive(Debug, Clone, PartialEq)]
pub struct RelaxedMask {
    pub mask: Vec<f64>,
    pub lambda: f64,
}

/// Stationary point of `Σ_j ℓ_j(M_j) + λ(Σ_j M_j − r n)`:
/// `M_j = s_j − λ / (2(c_j² + d_j²))`. Degenerate units are set to `r` and
/// left out of the multiplier sum.
pub fn relaxed_mask(ctx: &ClosedFormContext, r: f64) -> Result<RelaxedMask> {
    let n = ctx.len();
    let live: Vec<usize> = (0..n).filter(|&j| !ctx.is_degenerate(j)).collect();
    if live.is_empty() {
        return Err(Error::param("ctx", "every unit is degenerate (c = d = 0)"));
    }
    let s = unit_scores_closed_form(ctx);
    let inv_sum: f64 = live.iter().map(|&j| 1.0 / ctx.denom(j)).sum();
    let s_sum: f64 = live.iter().map(|&j| s[j]).sum();
    let lambda = 2.0 * (s_sum - r * live.len() as f64) / inv_sum;
    let mut mask = vec![r; n];
    for &j in &live {
        mask[j] = s[j] - lambda / (2.0 * ctx.denom(j));
    }
    Ok(RelaxedMask { mask, lambda })
}

/// Binary structured mask with its retained count.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PruneMask {
    pub bits: Vec<bool>,
    pub k: usize,
}

impl PruneMask {
    pub fn dense(n: usize) -> Self {
        Self {
            bits: vec![true; n],
            k: n,
        }
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn popcount(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn as_f64(&self) -> Vec<f64> {
        self.bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect()
    }

    pub fn kept(&self) -> Vec<usize> {
        (0..self.bits.len()).filter(|&j| self.bits[j]).collect()
    }
}

/// Indices sorted by descending score; equal scores keep the lower index
/// first and NaN sorts last.
pub fn rank_desc(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| {
        let (x, y) = (scores[a], scores[b]);
        match (x.is_nan(), y.is_nan()) {
            (true, true) => a.cmp(&b),
            (true, false) => std::cmp::Ordering::Greater,
            (false, true) => std::cmp::Ordering::Less,
            _ => y.partial_cmp(&x).unwrap().then(a.cmp(&b)),
        }
    });
    idx
}

/// Keeps the `k` highest-scoring units.
pub fn binarize_by_threshold(scores: &[f64], k: usize) -> Result<PruneMask> {
    if k > scores.len() {
        return Err(Error::param("k", format!("budget {k} exceeds {} units", scores.len())));
    }
    let mut bits = vec![false; scores.len()];
    for &j in rank_desc(scores).iter().take(k) {
        bits[j] = true;
    }
    Ok(PruneMask { bits, k })
}

/// `round(ρ·n)` with halves rounded away from zero.
pub fn retained_count(retention: f64, n: usize) -> usize {
    ((retention.clamp(0.0, 1.0) * n as f64).round() as usize).min(n)
}

/// Global top-K over several pools of unit scores; returns the kept count
/// per pool. Ties go to the lower pool index, then the lower unit index.
pub fn global_threshold(pools: &[Vec<f64>], keep_total: usize) -> Vec<usize> {
    let mut all: Vec<(f64, usize, usize)> = pools
        .iter()
        .enumerate()
        .flat_map(|(p, s)| s.iter().enumerate().map(move |(j, &v)| (v, p, j)))
        .collect();
    all.sort_by(|a, b| {
        let (x, y) = (
            if a.0.is_nan() { f64::NEG_INFINITY } else { a.0 },
            if b.0.is_nan() { f64::NEG_INFINITY } else { b.0 },
        );
        y.partial_cmp(&x).unwrap().then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2))
    });
    let mut kept = vec![0; pools.len()];
    for &(_, p, _) in all.iter().take(keep_total) {
        kept[p] += 1;
    }
    kept
}

fn check_target(r_bar: f64) -> Result<()> {
    if !(r_bar > 0.0 && r_bar < 1.0) {
        return Err(Error::param("sparsity", format!("must lie in (0, 1), got {r_bar}")));
    }
    Ok(())
}

/// `r̄ L · softmax(−I / T)`, one value per layer. Lower importance receives a
/// larger value; Algorithm-2 style pipelines read it as sparsity.
pub fn softmax_allocate(importance: &[f64], r_bar: f64, temperature: f64) -> Result<Vec<f64>> {
    check_target(r_bar)?;
    if importance.is_empty() {
        return Err(Error::param("importance", "no layers"));
    }
    let neg: Vec<f64> = importance.iter().map(|v| -v).collect();
    let w = softmax_vec(&neg, temperature)?;
    let budget = r_bar * importance.len() as f64;
    Ok(w.into_iter().map(|v| budget * v).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct PostCorrected {
    pub values: Vec<f64>,
    /// Some raw value exceeded the cap.
    pub cap_hit: bool,
    pub rescaled: bool,
}

/// Clip to `[0, cap]`; when nothing exceeded the cap, rescale by `r̄ / mean`
/// and clip again.
pub fn post_correct(values: &[f64], r_bar: f64, cap: f64) -> Result<PostCorrected> {
    if values.is_empty() {
        return Err(Error::param("plan", "empty plan"));
    }
    let clip = |v: f64| v.clamp(0.0, cap);
    let cap_hit = values.iter().any(|&v| v > cap);
    let mut out: Vec<f64> = values.iter().map(|&v| clip(v)).collect();
    if cap_hit {
        return Ok(PostCorrected {
            values: out,
            cap_hit,
            rescaled: false,
        });
    }
    let mean = out.iter().sum::<f64>() / out.len() as f64;
    if mean == 0.0 {
        if r_bar == 0.0 {
            return Ok(PostCorrected {
                values: out,
                cap_hit,
                rescaled: false,
            });
        }
        return Err(Error::param("plan", "mean is zero, cannot rescale to a nonzero target"));
    }
    let factor = r_bar / mean;
    for v in &mut out {
        *v = clip(*v * factor);
    }
    Ok(PostCorrected {
        values: out,
        cap_hit,
        rescaled: true,
    })
}

/// `clip(r̄ L (1 − w_ℓ) / Σ_j (1 − w_j), 0, cap)` for softmax weights `w`.
pub fn inverse_weight_from_weights(w: &[f64], r_bar: f64, cap: f64) -> Result<Vec<f64>> {
    let l = w.len();
    if l < 2 {
        return Err(Error::param("L", "inverse weighting needs at least two layers"));
    }
    let total: f64 = w.iter().map(|v| 1.0 - v).sum();
    if !(total > 0.0) {
        return Err(Error::param("weights", "Σ(1 − w) must be positive"));
    }
    let budget = r_bar * l as f64;
    Ok(w.iter().map(|v| (budget * (1.0 - v) / total).clamp(0.0, cap)).collect())
}

/// Per-family inverse weighting: weights `softmax(I / T)` within each family,
/// sparsities from [`inverse_weight_from_weights`].
pub fn inverse_weight_allocate(importance: &[f64], r_bar: f64, temperature: f64, cap: f64) -> Result<Vec<f64>> {
    check_target(r_bar)?;
    let w = softmax_vec(importance, temperature)?;
    inverse_weight_from_weights(&w, r_bar, cap)
}

/// Which formula produced a plan entry, and therefore whether its raw value
/// is a retention or a sparsity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Allocator {
    /// Global top-K on closed-form unit scores; produces retention.
    ClosedForm,
    /// Softmax allocation with post-correction; produces sparsity.
    Softmax,
    /// Inverse weighting per module family; produces sparsity.
    InverseWeight,
    /// Same sparsity everywhere.
    Uniform,
}

impl Allocator {
    pub fn as_str(self) -> &'static str {
        match self {
            Allocator::ClosedForm => "closed-form",
            Allocator::Softmax => "softmax",
            Allocator::InverseWeight => "inverse-weight",
            Allocator::Uniform => "uniform",
        }
    }

    /// `"retention"` or `"sparsity"`.
    pub fn produces(self) -> &'static str {
        match self {
            Allocator::ClosedForm => "retention",
            _ => "sparsity",
        }
    }
}

/// Allocation for one layer, or one block kind within a layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanEntry {
    pub layer: usize,
    /// `None` applies to every block of the layer.
    pub block_kind: Option<BlockKind>,
    pub importance: f64,
    pub temperature: Option<f64>,
    pub retention: f64,
    pub sparsity: f64,
    pub allocator: Allocator,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SparsityPlan {
    pub entries: Vec<PlanEntry>,
}

impl SparsityPlan {
    /// Entries from sparsities (retention `1 − s`).
    pub fn from_sparsities(
        sparsities: &[f64],
        importance: &[f64],
        kind: Option<BlockKind>,
        temperature: Option<f64>,
        allocator: Allocator,
    ) -> Self {
        let entries = sparsities
            .iter()
            .zip(importance)
            .enumerate()
            .map(|(layer, (&s, &i))| PlanEntry {
                layer,
                block_kind: kind,
                importance: i,
                temperature,
                retention: 1.0 - s,
                sparsity: s,
                allocator,
            })
            .collect();
        Self { entries }
    }

    /// Retention for a block of `kind` in `layer`: the kind-specific entry if
    /// present, else the layer-wide one.
    pub fn retention_for(&self, layer: usize, kind: BlockKind) -> Option<f64> {
        self.entries
            .iter()
            .find(|e| e.layer == layer && e.block_kind == Some(kind))
            .or_else(|| self.entries.iter().find(|e| e.layer == layer && e.block_kind.is_none()))
            .map(|e| e.retention)
    }

    pub fn mean_sparsity(&self) -> f64 {
        if self.entries.is_empty() {
            return 0.0;
        }
        self.entries.iter().map(|e| e.sparsity).sum::<f64>() / self.entries.len() as f64
    }
}

/// `{0.25, 0.5, 1, 2, 4} × mean|I|` (unit scale when every `I` is zero).
pub fn default_temperature_grid(importance: &[f64]) -> Vec<f64> {
    let mean = importance.iter().map(|v| v.abs()).sum::<f64>() / importance.len().max(1) as f64;
    let base = if mean > 0.0 { mean } else { 1.0 };
    [0.25, 0.5, 1.0, 2.0, 4.0].iter().map(|m| m * base).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepResult<P> {
    pub best_temperature: f64,
    pub best: P,
    /// `(T, total loss)` in grid order.
    pub losses: Vec<(f64, f64)>,
}

/// Evaluates every grid temperature and returns the one with the lowest loss,
/// the smallest `T` winning ties. Grid points run on up to `threads` workers.
pub fn temperature_sweep<P, A, E>(grid: &[f64], threads: usize, allocate: A, evaluate: E) -> Result<SweepResult<P>>
where
    P: Send,
    A: Fn(f64) -> Result<P> + Sync,
    E: Fn(&P) -> Result<f64> + Sync,
{
    if grid.is_empty() {
        return Err(Error::param("grid", "temperature grid is empty"));
    }
    let results = map_ordered(grid.to_vec(), threads, |t| -> Result<(f64, P, f64)> {
        let plan = allocate(t)?;
        let loss = evaluate(&plan)?;
        Ok((t, plan, loss))
    });
    let mut best: Option<(f64, P, f64)> = None;
    let mut losses = Vec::with_capacity(grid.len());
    for r in results {
        let (t, plan, loss) = r?;
        losses.push((t, loss));
        let better = match &best {
            None => true,
            Some((bt, _, bl)) => loss < *bl || (loss == *bl && t < *bt),
        };
        if better {
            best = Some((t, plan, loss));
        }
    }
    let (best_temperature, best, _) = best.expect("grid is nonempty");
    Ok(SweepResult {
        best_temperature,
        best,
        losses,
    })
}
