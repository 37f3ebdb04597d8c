//! Unit-level and layer-level importance scores.
//!
//! Unit scores are grouped the way masks are applied: an FFN block has one
//! group of hidden units (a row of `w1` together with the matching column of
//! `w2`), an attention block has query rows, key rows, and value rows paired
//! with the matching output columns.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ActivationCache, Block, BlockKind, BlockRecord, ToyModel};
use crate::tensor::{matmul, relu, DenseMatrix, Rng};

/// Which structured dimension of a weight matrix a score refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    /// Output rows.
    Row,
    /// Input columns.
    Col,
}

/// A set of units pruned together.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UnitGroup {
    /// FFN hidden unit: `w1` row plus `w2` column.
    Hidden,
    /// `wq` row.
    Query,
    /// `wk` row.
    Key,
    /// `wv` row plus `wo` column.
    ValueOut,
}

impl UnitGroup {
    /// Label used in CSV output: the owning matrix and axis.
    pub fn axis_label(self) -> &'static str {
        match self {
            UnitGroup::Hidden => "w1.row",
            UnitGroup::Query => "wq.row",
            UnitGroup::Key => "wk.row",
            UnitGroup::ValueOut => "wv.row",
        }
    }

    pub fn kind(self) -> BlockKind {
        match self {
            UnitGroup::Hidden => BlockKind::Ffn,
            _ => BlockKind::Mha,
        }
    }

    pub fn for_kind(kind: BlockKind) -> &'static [UnitGroup] {
        match kind {
            BlockKind::Ffn => &[UnitGroup::Hidden],
            BlockKind::Mha => &[UnitGroup::Query, UnitGroup::Key, UnitGroup::ValueOut],
        }
    }
}

/// One score per structured unit of a group.
#[derive(Debug, Clone, PartialEq)]
pub struct UnitScores {
    pub block: usize,
    pub group: UnitGroup,
    pub scores: Vec<f64>,
}

/// Baseline and allocation criteria that score units from weights and
/// calibration activations alone.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "kebab-case")]
pub enum Criterion {
    Wanda,
    Magnitude,
    /// Gradient-times-weight at a probe point `(1 − damping)·W`.
    Snip {
        damping: f64,
    },
    /// Trained sigmoid gates.
    L0 {
        steps: usize,
        lambda: f64,
        lr: f64,
    },
}

impl Criterion {
    pub fn name(&self) -> &'static str {
        match self {
            Criterion::Wanda => "wanda",
            Criterion::Magnitude => "magnitude",
            Criterion::Snip { .. } => "snip",
            Criterion::L0 { .. } => "l0",
        }
    }

    pub fn snip() -> Self {
        Criterion::Snip { damping: 0.5 }
    }

    pub fn l0() -> Self {
        Criterion::L0 {
            steps: 200,
            lambda: 1e-3,
            lr: 0.5,
        }
    }
}

fn check_calibration(x: &DenseMatrix, w: &DenseMatrix, op: &'static str) -> Result<()> {
    if x.cols() == 0 {
        return Err(Error::param("calibration", "empty calibration set"));
    }
    if x.rows() != w.cols() {
        return Err(Error::dim(
            op,
            format!("weights {:?} with inputs of {} features", w.shape(), x.rows()),
        ));
    }
    Ok(())
}

/// `|W_ij| · ‖X_j‖₂`, where `‖X_j‖₂` is the norm of input feature `j` over all
/// calibration tokens (`x` is feature-major).
pub fn wanda_elementwise(w: &DenseMatrix, x: &DenseMatrix) -> Result<DenseMatrix> {
    check_calibration(x, w, "wanda_elementwise")?;
    let norms: Vec<f64> = (0..x.rows())
        .map(|j| x.row(j).iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect();
    Ok(DenseMatrix::from_fn(w.rows(), w.cols(), |i, j| {
        w.get(i, j).abs() * norms[j]
    }))
}

/// Per-unit mean over samples of `‖W_unit · x‖₁`: for unit `i` on the row
/// axis, `(1/N) Σ_j Σ_t |W_ij x_jt|`; on the column axis the roles of rows
/// and columns swap.
pub fn wanda_unit(w: &DenseMatrix, x: &DenseMatrix, axis: Axis, samples: usize) -> Result<Vec<f64>> {
    check_calibration(x, w, "wanda_unit")?;
    if samples == 0 {
        return Err(Error::param("samples", "must be positive"));
    }
    // Σ_t |W_ij x_jt| = |W_ij| · Σ_t |x_jt|
    let l1: Vec<f64> = (0..x.rows()).map(|j| x.row(j).iter().map(|v| v.abs()).sum()).collect();
    let n = samples as f64;
    Ok(match axis {
        Axis::Row => (0..w.rows())
            .map(|i| w.row(i).iter().zip(&l1).map(|(a, b)| a.abs() * b).sum::<f64>() / n)
            .collect(),
        Axis::Col => (0..w.cols())
            .map(|j| (0..w.rows()).map(|i| w.get(i, j).abs()).sum::<f64>() * l1[j] / n)
            .collect(),
    })
}

/// ℓ₁ norm of each unit's weights.
pub fn magnitude_unit(w: &DenseMatrix, axis: Axis) -> Vec<f64> {
    match axis {
        Axis::Row => (0..w.rows()).map(|i| w.row(i).iter().map(|v| v.abs()).sum()).collect(),
        Axis::Col => (0..w.cols())
            .map(|j| (0..w.rows()).map(|i| w.get(i, j).abs()).sum())
            .collect(),
    }
}

/// Gradient of the linear reconstruction loss
/// `α/N · ‖W x − Ŵ x‖²` with respect to `Ŵ`.
pub fn recon_gradient(
    w_ref: &DenseMatrix,
    w_hat: &DenseMatrix,
    x: &DenseMatrix,
    alpha: f64,
    samples: usize,
) -> Result<DenseMatrix> {
    let resid = matmul(&w_ref.sub(w_hat)?, x)?;
    let g = crate::tensor::matmul_nt(&resid, x)?;
    Ok(g.scale(-2.0 * alpha / samples as f64))
}

/// SNIP saliency `Σ_unit |∂L/∂Ŵ ⊙ Ŵ|` for the linear reconstruction loss
/// evaluated at `w_hat`.
pub fn snip_unit(
    w_ref: &DenseMatrix,
    w_hat: &DenseMatrix,
    x: &DenseMatrix,
    axis: Axis,
    alpha: f64,
    samples: usize,
) -> Result<Vec<f64>> {
    check_calibration(x, w_ref, "snip_unit")?;
    let g = recon_gradient(w_ref, w_hat, x, alpha, samples)?;
    let saliency = g.hadamard(w_hat)?.map(f64::abs);
    Ok(magnitude_unit(&saliency, axis))
}

fn sigmoid(t: f64) -> f64 {
    1.0 / (1.0 + (-t).exp())
}

/// Trains one sigmoid gate per unit of `h` (units × tokens) feeding
/// `w_next`, minimizing `α/N · ‖target − W_next diag(g) h‖² + λ Σ g` by
/// gradient descent on the gate logits. Returns the final gate values.
///
/// Gate logits start at `init` plus a small seeded jitter.
#[allow(clippy::too_many_arguments)]
pub fn train_gates(
    w_next: &DenseMatrix,
    h: &DenseMatrix,
    target: &DenseMatrix,
    samples: usize,
    steps: usize,
    lambda: f64,
    lr: f64,
    init: f64,
    rng: &mut Rng,
) -> Result<Vec<f64>> {
    if steps == 0 {
        return Err(Error::param("steps", "must be >= 1"));
    }
    let units = h.rows();
    if w_next.cols() != units || target.rows() != w_next.rows() || target.cols() != h.cols() {
        return Err(Error::dim("train_gates", "gate shapes do not line up"));
    }
    let scale = 2.0 / samples.max(1) as f64;
    let mut theta: Vec<f64> = (0..units).map(|_| init + 0.01 * rng.normal()).collect();
    for _ in 0..steps {
        let g: Vec<f64> = theta.iter().map(|&t| sigmoid(t)).collect();
        let gated = DenseMatrix::from_fn(units, h.cols(), |j, t| g[j] * h.get(j, t));
        let resid = target.sub(&matmul(w_next, &gated)?)?;
        let back = crate::tensor::matmul_tn(w_next, &resid)?;
        for j in 0..units {
            let dg = -scale * crate::tensor::dot(back.row(j), h.row(j)) + lambda;
            theta[j] -= lr * dg * g[j] * (1.0 - g[j]);
        }
    }
    Ok(theta.into_iter().map(sigmoid).collect())
}

/// Unit scores for every group of block `b` under `criterion`.
pub fn block_unit_scores(
    model: &ToyModel,
    cache: &ActivationCache,
    b: usize,
    criterion: Criterion,
    rng: &mut Rng,
) -> Result<Vec<UnitScores>> {
    let x = cache.input(b);
    let n = cache.samples();
    let pack = |group, scores| UnitScores {
        block: b,
        group,
        scores,
    };
    let add = |a: Vec<f64>, c: Vec<f64>| a.iter().zip(&c).map(|(p, q)| p + q).collect::<Vec<_>>();
    match (&model.blocks[b], cache.record(b)) {
        (Block::Ffn(f), BlockRecord::Ffn(rec)) => {
            let scores = match criterion {
                Criterion::Wanda => add(
                    wanda_unit(&f.w1, x, Axis::Row, n)?,
                    wanda_unit(&f.w2, &rec.a, Axis::Col, n)?,
                ),
                Criterion::Magnitude => add(magnitude_unit(&f.w1, Axis::Row), magnitude_unit(&f.w2, Axis::Col)),
                Criterion::Snip { damping } => {
                    let p1 = f.w1.scale(1.0 - damping);
                    let p2 = f.w2.scale(1.0 - damping);
                    add(
                        snip_unit(&f.w1, &p1, x, Axis::Row, 1.0, n)?,
                        snip_unit(&f.w2, &p2, &rec.a, Axis::Col, 1.0, n)?,
                    )
                }
                Criterion::L0 { steps, lambda, lr } => {
                    let h = relu(&matmul(&f.w1, x)?);
                    train_gates(&f.w2, &h, &rec.out, n, steps, lambda, lr, 3.0, rng)?
                }
            };
            Ok(vec![pack(UnitGroup::Hidden, scores)])
        }
        (Block::Mha(m), BlockRecord::Mha(rec)) => {
            let attn = &rec.att.attn;
            let (q, k, vo) = match criterion {
                Criterion::Wanda => (
                    wanda_unit(&m.wq, x, Axis::Row, n)?,
                    wanda_unit(&m.wk, x, Axis::Row, n)?,
                    add(
                        wanda_unit(&m.wv, x, Axis::Row, n)?,
                        wanda_unit(&m.wo, attn, Axis::Col, n)?,
                    ),
                ),
                Criterion::Magnitude => (
                    magnitude_unit(&m.wq, Axis::Row),
                    magnitude_unit(&m.wk, Axis::Row),
                    add(magnitude_unit(&m.wv, Axis::Row), magnitude_unit(&m.wo, Axis::Col)),
                ),
                Criterion::Snip { damping } => {
                    let s = 1.0 - damping;
                    (
                        snip_unit(&m.wq, &m.wq.scale(s), x, Axis::Row, 1.0, n)?,
                        snip_unit(&m.wk, &m.wk.scale(s), x, Axis::Row, 1.0, n)?,
                        add(
                            snip_unit(&m.wv, &m.wv.scale(s), x, Axis::Row, 1.0, n)?,
                            snip_unit(&m.wo, &m.wo.scale(s), attn, Axis::Col, 1.0, n)?,
                        ),
                    )
                }
                Criterion::L0 { steps, lambda, lr } => {
                    // gating a value row scales the matching attention row
                    let vo = train_gates(&m.wo, attn, &rec.out, n, steps, lambda, lr, 3.0, rng)?;
                    (magnitude_unit(&m.wq, Axis::Row), magnitude_unit(&m.wk, Axis::Row), vo)
                }
            };
            Ok(vec![
                pack(UnitGroup::Query, q),
                pack(UnitGroup::Key, k),
                pack(UnitGroup::ValueOut, vo),
            ])
        }
        _ => Err(Error::dim("block_unit_scores", "cache does not match model")),
    }
}

fn population_variance(m: &DenseMatrix) -> f64 {
    let n = m.data().len();
    if n == 0 {
        return 0.0;
    }
    let mean = m.data().iter().sum::<f64>() / n as f64;
    m.data().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64
}

fn l1(m: &DenseMatrix) -> f64 {
    m.data().iter().map(|v| v.abs()).sum()
}

fn check_decay(gamma: f64, rho: f64) -> Result<()> {
    if !(gamma > 0.0 && gamma <= 1.0) {
        return Err(Error::param("gamma", format!("must lie in (0, 1], got {gamma}")));
    }
    if !(rho > 0.0) {
        return Err(Error::param("rho", format!("must be positive, got {rho}")));
    }
    Ok(())
}

/// Attention importance `γ^ℓ · ρ · Σ_h (‖W_h‖₁ + 0.1·Var(W_h) + 0.01·‖W_h‖_F)`
/// over head slices `heads`; `layer` is 1-based.
pub fn attention_importance(heads: &[DenseMatrix], gamma: f64, rho: f64, layer: usize) -> Result<f64> {
    check_decay(gamma, rho)?;
    let total: f64 = heads
        .iter()
        .map(|w| l1(w) + 0.1 * population_variance(w) + 0.01 * w.frobenius())
        .sum();
    Ok(gamma.powi(layer as i32) * rho * total)
}

/// MLP importance `γ^ℓ · Σ_m (‖W_m‖₁ + 0.05·Var(W_m))`; `layer` is 1-based.
pub fn mlp_importance(mats: &[&DenseMatrix], gamma: f64, layer: usize) -> Result<f64> {
    check_decay(gamma, 1.0)?;
    let total: f64 = mats.iter().map(|w| l1(w) + 0.05 * population_variance(w)).sum();
    Ok(gamma.powi(layer as i32) * total)
}

/// Head slices of all four projections: rows of `wq`, `wk`, `wv` and
/// columns of `wo`.
pub fn head_slices(block: &crate::model::MhaBlock, heads: usize) -> Vec<DenseMatrix> {
    let dh = block.wq.rows() / heads;
    let mut out = Vec::with_capacity(4 * heads);
    for i in 0..heads {
        let (a, b) = (i * dh, (i + 1) * dh);
        out.push(block.wq.row_slice(a, b));
        out.push(block.wk.row_slice(a, b));
        out.push(block.wv.row_slice(a, b));
        out.push(block.wo.col_slice(a, b));
    }
    out
}

/// How per-layer importance is estimated.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LayerMethod {
    /// Mean Wanda unit score over all matrices of the layer.
    WandaSum,
    /// Separate attention and MLP importances with depth decay.
    ModuleSplit { gamma: f64, rho: f64 },
}

impl LayerMethod {
    pub fn parse(name: &str, gamma: f64, rho: f64) -> Result<Self> {
        match name {
            "wanda-sum" => Ok(LayerMethod::WandaSum),
            "module-split" => Ok(LayerMethod::ModuleSplit { gamma, rho }),
            other => Err(Error::param(
                "method",
                format!("unknown importance method `{other}` (expected wanda-sum or module-split)"),
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerScore {
    /// 0-based layer index.
    pub layer: usize,
    pub importance: f64,
    pub attn: Option<f64>,
    pub mlp: Option<f64>,
    /// `γ^ℓ` with 1-based `ℓ`; 1 when no decay applies.
    pub depth_weight: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerImportance {
    pub layers: Vec<LayerScore>,
}

impl LayerImportance {
    pub fn values(&self) -> Vec<f64> {
        self.layers.iter().map(|l| l.importance).collect()
    }
}

/// Layer scores for every decoder layer.
pub fn layer_importance(model: &ToyModel, cache: &ActivationCache, method: LayerMethod) -> Result<LayerImportance> {
    let mut layers = Vec::with_capacity(model.arch.layers);
    for layer in 0..model.arch.layers {
        let blocks: Vec<usize> = (0..model.blocks.len())
            .filter(|&b| model.layer_of(b) == layer)
            .collect();
        let score = match method {
            LayerMethod::WandaSum => {
                let mut total = 0.0;
                let mut count = 0usize;
                for &b in &blocks {
                    let x = cache.input(b);
                    let n = cache.samples();
                    let parts: Vec<Vec<f64>> = match (&model.blocks[b], cache.record(b)) {
                        (Block::Ffn(f), BlockRecord::Ffn(r)) => vec![
                            wanda_unit(&f.w1, x, Axis::Row, n)?,
                            wanda_unit(&f.w2, &r.a, Axis::Col, n)?,
                        ],
                        (Block::Mha(m), BlockRecord::Mha(r)) => vec![
                            wanda_unit(&m.wq, x, Axis::Row, n)?,
                            wanda_unit(&m.wk, x, Axis::Row, n)?,
                            wanda_unit(&m.wv, x, Axis::Row, n)?,
                            wanda_unit(&m.wo, &r.att.attn, Axis::Col, n)?,
                        ],
                        _ => return Err(Error::dim("layer_importance", "cache does not match model")),
                    };
                    for p in parts {
                        count += p.len();
                        total += p.iter().sum::<f64>();
                    }
                }
                LayerScore {
                    layer,
                    importance: total / count.max(1) as f64,
                    attn: None,
                    mlp: None,
                    depth_weight: 1.0,
                }
            }
            LayerMethod::ModuleSplit { gamma, rho } => {
                let l1 = layer + 1;
                let mut attn = None;
                let mut mlp = None;
                for &b in &blocks {
                    match &model.blocks[b] {
                        Block::Mha(m) => {
                            attn = Some(attention_importance(&head_slices(m, model.arch.h), gamma, rho, l1)?)
                        }
                        Block::Ffn(f) => mlp = Some(mlp_importance(&[&f.w1, &f.w2], gamma, l1)?),
                    }
                }
                check_decay(gamma, rho)?;
                LayerScore {
                    layer,
                    importance: attn.unwrap_or(0.0) + mlp.unwrap_or(0.0),
                    attn,
                    mlp,
                    depth_weight: gamma.powi(l1 as i32),
                }
            }
        };
        layers.push(score);
    }
    Ok(LayerImportance { layers })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{capture_reference_activations, generate_toy_model, CalibrationSet, ModelArch};

    #[test]
    fn wanda_elementwise_hand_case() {
        let w = DenseMatrix::from_rows(&[&[1.0, -2.0]]);
        // feature norms 3 and 1 over two tokens
        let x = DenseMatrix::from_rows(&[&[3.0, 0.0], &[0.0, 1.0]]);
        let s = wanda_elementwise(&w, &x).unwrap();
        assert_eq!(s, DenseMatrix::from_rows(&[&[3.0, 2.0]]));
        let ones = DenseMatrix::from_rows(&[&[1.0], &[1.0]]);
        assert_eq!(wanda_elementwise(&w, &ones).unwrap(), w.map(f64::abs));
        let doubled = wanda_elementwise(&w, &x.scale(2.0)).unwrap();
        assert_eq!(doubled, s.scale(2.0));
    }

    #[test]
    fn wanda_requires_calibration() {
        let w = DenseMatrix::zeros(2, 2);
        assert!(matches!(
            wanda_elementwise(&w, &DenseMatrix::zeros(2, 0)),
            Err(Error::Parameter { .. })
        ));
    }

    #[test]
    #[allow(clippy::needless_range_loop)]
    fn wanda_unit_matches_per_sample_loop() {
        let mut rng = Rng::new(4);
        let w = DenseMatrix::random_normal(4, 4, 1.0, &mut rng);
        let (samples, seq) = (3, 5);
        let x = DenseMatrix::random_normal(4, samples * seq, 1.0, &mut rng);
        let got = wanda_unit(&w, &x, Axis::Row, samples).unwrap();
        for i in 0..4 {
            let mut total = 0.0;
            for s in 0..samples {
                for t in 0..seq {
                    for j in 0..4 {
                        total += (w.get(i, j) * x.get(j, s * seq + t)).abs();
                    }
                }
            }
            assert!((got[i] - total / samples as f64).abs() < 1e-12);
        }
    }

    #[test]
    fn magnitude_cases() {
        let w = DenseMatrix::from_rows(&[&[3.0, -4.0], &[0.0, 0.0]]);
        assert_eq!(magnitude_unit(&w, Axis::Row), vec![7.0, 0.0]);
        assert_eq!(magnitude_unit(&w, Axis::Col), vec![3.0, 4.0]);
    }

    #[test]
    fn snip_zero_at_dense_and_linear_in_alpha() {
        let mut rng = Rng::new(8);
        let w = DenseMatrix::random_normal(3, 3, 1.0, &mut rng);
        let x = DenseMatrix::random_normal(3, 6, 1.0, &mut rng);
        let zero = snip_unit(&w, &w, &x, Axis::Row, 1.0, 2).unwrap();
        assert!(zero.iter().all(|&v| v == 0.0));
        let probe = w.scale(0.5);
        let s1 = snip_unit(&w, &probe, &x, Axis::Row, 1.0, 2).unwrap();
        let s3 = snip_unit(&w, &probe, &x, Axis::Row, 3.0, 2).unwrap();
        for (a, b) in s1.iter().zip(&s3) {
            assert!((3.0 * a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn module_importance_hand_case() {
        let w = DenseMatrix::from_rows(&[&[1.0, -1.0]]);
        let got = attention_importance(std::slice::from_ref(&w), 1.0, 2.0, 3).unwrap();
        let want = 2.0 * (2.0 + 0.1 * 1.0 + 0.01 * 2f64.sqrt());
        assert!((got - want).abs() < 1e-12);
        assert!((got - 4.228_284_271_247_462).abs() < 1e-12);
        assert_eq!(
            attention_importance(std::slice::from_ref(&w), 1.0, 2.0, 1).unwrap(),
            attention_importance(&[w], 1.0, 2.0, 7).unwrap()
        );
        let z = DenseMatrix::zeros(2, 2);
        assert_eq!(
            attention_importance(std::slice::from_ref(&z), 0.9, 1.0, 2).unwrap(),
            0.0
        );
        assert_eq!(mlp_importance(&[&z], 0.9, 2).unwrap(), 0.0);
        assert!(attention_importance(&[z], 1.5, 1.0, 1).is_err());
    }

    #[test]
    fn depth_decay_is_monotone_for_identical_layers() {
        let mut model = generate_toy_model(ModelArch::new(8, 3, 2), &mut Rng::new(0)).unwrap();
        for b in 2..6 {
            model.blocks[b] = model.blocks[b % 2].clone();
        }
        let calib = CalibrationSet::gaussian(2, 4, 8, &mut Rng::new(1)).unwrap();
        let cache = capture_reference_activations(&model, &calib).unwrap();
        let imp = layer_importance(&model, &cache, LayerMethod::ModuleSplit { gamma: 0.9, rho: 1.0 })
            .unwrap()
            .values();
        assert!(imp[0] > imp[1] && imp[1] > imp[2]);
        assert!(LayerMethod::parse("hessian", 1.0, 1.0).is_err());
    }

    #[test]
    fn l0_gates_limits() {
        let mut rng = Rng::new(3);
        let w = DenseMatrix::random_normal(4, 6, 0.5, &mut rng);
        let h = relu(&DenseMatrix::random_normal(6, 20, 1.0, &mut rng));
        let target = matmul(&w, &h).unwrap();
        let keep = train_gates(&w, &h, &target, 4, 50, 0.0, 0.5, 30.0, &mut Rng::new(1)).unwrap();
        assert!(keep.iter().all(|&g| g > 0.99));
        let drop = train_gates(&w, &h, &target, 4, 200, 1e4, 0.5, 3.0, &mut Rng::new(1)).unwrap();
        assert!(drop.iter().all(|&g| g < 0.5));
    }
}
