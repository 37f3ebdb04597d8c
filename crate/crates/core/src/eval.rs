//! Reconstruction loss, pseudo-perplexity and parameter/memory accounting.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{
    attention, ActivationCache, Block, BlockKind, BlockRecord, CalibrationData, CalibrationSet, FfnBlock, FfnRecord,
    MhaBlock, MhaRecord, ToyModel,
};
use crate::tensor::{matmul, relu, DenseMatrix};

/// Loss of one block.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BlockLoss {
    pub block: usize,
    pub layer: usize,
    pub kind: BlockKind,
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LossReport {
    pub blocks: Vec<BlockLoss>,
    pub total: f64,
}

/// Reconstruction loss of `pruned` against the dense reference for block `b`,
/// averaged over calibration samples.
///
/// FFN: `α(‖y − W2' ReLU(W1' x)‖² + ‖W1 x − W1' x‖²) / N`, where `y` is the
/// dense block output. Attention: `α(‖y − WO' attn'‖² + ‖Q − Q'‖² + ‖K − K'‖²
/// + ‖V − V'‖²) / N` with `attn'` recomputed from the pruned projections.
pub fn block_loss(pruned: &Block, cache: &ActivationCache, b: usize, heads: usize, alpha: f64) -> Result<f64> {
    record_loss(pruned, cache.record(b), cache.input(b), cache.seq_len(), heads, alpha)
}

/// [`block_loss`] against an explicit dense record and input.
pub fn record_loss(
    pruned: &Block,
    rec: &BlockRecord,
    x: &DenseMatrix,
    seq_len: usize,
    heads: usize,
    alpha: f64,
) -> Result<f64> {
    match (pruned, rec) {
        (Block::Ffn(f), BlockRecord::Ffn(rec)) => ffn_loss(f, rec, x, seq_len, alpha),
        (Block::Mha(m), BlockRecord::Mha(rec)) => mha_loss(m, rec, x, seq_len, heads, alpha),
        _ => Err(Error::dim("block_loss", "block kind does not match the cache")),
    }
}

pub fn ffn_loss(f: &FfnBlock, rec: &FfnRecord, x: &DenseMatrix, seq_len: usize, alpha: f64) -> Result<f64> {
    let z = matmul(&f.w1, x)?;
    let out = matmul(&f.w2, &relu(&z))?;
    Ok(alpha * (rec.out.dist_sq(&out) + rec.z.dist_sq(&z)) / samples(x, seq_len))
}

pub fn mha_loss(
    m: &MhaBlock,
    rec: &MhaRecord,
    x: &DenseMatrix,
    seq_len: usize,
    heads: usize,
    alpha: f64,
) -> Result<f64> {
    let q = matmul(&m.wq, x)?;
    let k = matmul(&m.wk, x)?;
    let v = matmul(&m.wv, x)?;
    let att = attention(&q, &k, &v, heads, seq_len)?;
    let out = matmul(&m.wo, &att.attn)?;
    let raw = rec.out.dist_sq(&out) + rec.q.dist_sq(&q) + rec.k.dist_sq(&k) + rec.v.dist_sq(&v);
    Ok(alpha * raw / samples(x, seq_len))
}

fn samples(x: &DenseMatrix, seq_len: usize) -> f64 {
    (x.cols() / seq_len.max(1)).max(1) as f64
}

/// Per-block and total reconstruction loss of a pruned model.
pub fn total_reconstruction_loss(pruned: &ToyModel, cache: &ActivationCache, alpha: f64) -> Result<LossReport> {
    if pruned.blocks.len() != cache.num_blocks() {
        return Err(Error::dim(
            "total_reconstruction_loss",
            format!("{} blocks vs {} cached", pruned.blocks.len(), cache.num_blocks()),
        ));
    }
    let mut blocks = Vec::with_capacity(pruned.blocks.len());
    let mut total = 0.0;
    for (b, block) in pruned.blocks.iter().enumerate() {
        let loss = block_loss(block, cache, b, pruned.arch.h, alpha)?;
        total += loss;
        blocks.push(BlockLoss {
            block: b,
            layer: pruned.layer_of(b),
            kind: block.kind(),
            loss,
        });
    }
    Ok(LossReport { blocks, total })
}

/// `exp` of the mean cross-entropy of `logits` (`vocab × tokens`) against
/// `targets`.
pub fn perplexity_from_logits(logits: &DenseMatrix, targets: &[usize]) -> Result<f64> {
    if logits.cols() != targets.len() || targets.is_empty() {
        return Err(Error::dim(
            "perplexity",
            format!("{} logit columns for {} targets", logits.cols(), targets.len()),
        ));
    }
    let mut total = 0.0;
    for (t, &y) in targets.iter().enumerate() {
        if y >= logits.rows() {
            return Err(Error::param("targets", format!("token {y} outside vocabulary")));
        }
        let col = logits.col(t);
        let max = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + col.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        total += lse - col[y];
    }
    Ok((total / targets.len() as f64).exp())
}

/// Perplexity of the model's vocabulary head on token calibration data.
pub fn pseudo_perplexity(model: &ToyModel, calib: &CalibrationSet) -> Result<f64> {
    if model.head.is_none() {
        return Err(Error::Capability("model has no vocabulary head".into()));
    }
    let CalibrationData::Tokens { ids, targets } = &calib.data else {
        return Err(Error::Capability("perplexity needs token calibration data".into()));
    };
    let hidden = model.forward(&model.embed_tokens(ids)?, calib.seq_len)?;
    let logits = model.logits(&hidden)?;
    let flat: Vec<usize> = targets.iter().flatten().copied().collect();
    perplexity_from_logits(&logits, &flat)
}

/// A model size from the parameter tables.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ModelConfig {
    pub name: String,
    pub total_params: u64,
    pub layers: u64,
    pub d: u64,
}

impl ModelConfig {
    pub fn new(name: &str, total_params: u64, layers: u64, d: u64) -> Self {
        Self {
            name: name.to_string(),
            total_params,
            layers,
            d,
        }
    }
}

/// The OPT family with the totals, depths and widths the tables use.
pub fn opt_family() -> Vec<ModelConfig> {
    vec![
        ModelConfig::new("OPT-125M", 125_000_000, 12, 768),
        ModelConfig::new("OPT-350M", 350_000_000, 24, 1024),
        ModelConfig::new("OPT-1.3B", 1_300_000_000, 24, 2048),
        ModelConfig::new("OPT-2.7B", 2_700_000_000, 32, 2560),
        ModelConfig::new("OPT-6.7B", 6_700_000_000, 32, 4096),
        ModelConfig::new("OPT-13B", 13_000_000_000, 40, 5120),
        ModelConfig::new("OPT-30B", 30_000_000_000, 48, 7168),
        ModelConfig::new("OPT-66B", 66_000_000_000, 64, 9216),
    ]
}

/// One row of the memory table.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MemoryRow {
    pub name: String,
    pub total_params: u64,
    pub layers: u64,
    pub d: u64,
    /// `total / L` in units of 0.1 M, rounded half to even.
    pub params_per_layer_tenths_m: u64,
    /// Two bytes per parameter, in units of 0.1 MB.
    pub mem_per_layer_tenths_mb: u64,
    pub ffn_params: u64,
    pub mha_params: u64,
}

impl MemoryRow {
    pub fn params_per_layer_m(&self) -> String {
        tenths(self.params_per_layer_tenths_m)
    }

    pub fn mem_per_layer_mb(&self) -> String {
        tenths(self.mem_per_layer_tenths_mb)
    }

    /// Total parameters in billions, as printed in the table.
    pub fn total_b(&self) -> String {
        let b = self.total_params as f64 / 1e9;
        if self.total_params < 1_000_000_000 {
            format!("{b:.3}B")
        } else {
            let s = format!("{b}");
            format!("{s}B")
        }
    }

    /// Analytic `12 d²` per layer.
    pub fn analytic_per_layer(&self) -> u64 {
        self.ffn_params + self.mha_params
    }

    /// `FFN:MHA` ratio to two decimals.
    pub fn ratio(&self) -> String {
        let hundredths = round_half_even(self.ffn_params * 100, self.mha_params);
        format!("{}.{:02}", hundredths / 100, hundredths % 100)
    }
}

fn tenths(v: u64) -> String {
    format!("{}.{}", v / 10, v % 10)
}

fn round_half_even(num: u64, den: u64) -> u64 {
    let (q, r) = (num / den, num % den);
    match (2 * r).cmp(&den) {
        std::cmp::Ordering::Less => q,
        std::cmp::Ordering::Greater => q + 1,
        std::cmp::Ordering::Equal => q + (q % 2),
    }
}

/// Decimal with comma thousands separators.
pub fn with_thousands(v: u64) -> String {
    let s = v.to_string();
    let mut out = String::with_capacity(s.len() + s.len() / 3);
    for (i, ch) in s.chars().enumerate() {
        if i > 0 && (s.len() - i).is_multiple_of(3) {
            out.push(',');
        }
        out.push(ch);
    }
    out
}

/// Per-layer parameter and FP16 memory figures. Params per layer follow the
/// `total / L` convention, so they include embeddings; the analytic
/// `8d² + 4d²` split is reported next to it.
pub fn memory_report(configs: &[ModelConfig]) -> Vec<MemoryRow> {
    configs
        .iter()
        .map(|c| {
            let per_layer = round_half_even(c.total_params, c.layers * 100_000);
            MemoryRow {
                name: c.name.clone(),
                total_params: c.total_params,
                layers: c.layers,
                d: c.d,
                params_per_layer_tenths_m: per_layer,
                mem_per_layer_tenths_mb: 2 * per_layer,
                ffn_params: 8 * c.d * c.d,
                mha_params: 4 * c.d * c.d,
            }
        })
        .collect()
}

/// Per-layer parameter and 16-bit memory CSV.
pub fn memory_csv(rows: &[MemoryRow]) -> String {
    let mut out = String::from("Model,Tot. Params,#Layers,Params/L (M),Mem/L (MB),Analytic 12d^2\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.name,
            r.total_b(),
            r.layers,
            r.params_per_layer_m(),
            r.mem_per_layer_mb(),
            r.analytic_per_layer()
        ));
    }
    out
}

/// FFN versus attention parameter CSV; large counts are quoted because they contain commas.
pub fn ratio_csv(rows: &[MemoryRow]) -> String {
    let mut out = String::from("Model,Hidden Size d,FFN Params (8d^2),MHA Params (4d^2),FFN:MHA Ratio\n");
    for r in rows {
        out.push_str(&format!(
            "{},\"{}\",\"{}\",\"{}\",{}\n",
            r.name,
            with_thousands(r.d),
            with_thousands(r.ffn_params),
            with_thousands(r.mha_params),
            r.ratio()
        ));
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ScalingReport {
    /// Least-squares slope of `log L` against `log N`.
    pub layers_slope: f64,
    /// Least-squares slope of `log(N / L)` against `log N`.
    pub params_per_layer_slope: f64,
}

fn ols_slope(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    sxy / sxx
}

/// Log-log growth of depth and width with total size.
pub fn scaling_report(configs: &[ModelConfig]) -> Result<ScalingReport> {
    if configs.len() < 3 {
        return Err(Error::param(
            "configs",
            format!("need at least 3 configs, got {}", configs.len()),
        ));
    }
    let ln_n: Vec<f64> = configs.iter().map(|c| (c.total_params as f64).ln()).collect();
    if ln_n.iter().all(|&v| v == ln_n[0]) {
        return Err(Error::param("configs", "all configs have the same size"));
    }
    let ln_l: Vec<f64> = configs.iter().map(|c| (c.layers as f64).ln()).collect();
    let ln_w: Vec<f64> = configs
        .iter()
        .map(|c| (c.total_params as f64 / c.layers as f64).ln())
        .collect();
    Ok(ScalingReport {
        layers_slope: ols_slope(&ln_n, &ln_l),
        params_per_layer_slope: ols_slope(&ln_n, &ln_w),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{capture_reference_activations, generate_toy_model, CalibrationSet, ModelArch};
    use crate::tensor::Rng;

    #[test]
    fn loss_zero_for_dense_and_closed_form_at_zero() {
        let model = generate_toy_model(ModelArch::new(8, 1, 2), &mut Rng::new(0)).unwrap();
        let calib = CalibrationSet::gaussian(3, 4, 8, &mut Rng::new(1)).unwrap();
        let cache = capture_reference_activations(&model, &calib).unwrap();
        assert_eq!(total_reconstruction_loss(&model, &cache, 1.0).unwrap().total, 0.0);

        let mut zero = model.clone();
        for b in &mut zero.blocks {
            if let Block::Ffn(f) = b {
                f.w1 = DenseMatrix::zeros(f.w1.rows(), f.w1.cols());
                f.w2 = DenseMatrix::zeros(f.w2.rows(), f.w2.cols());
            }
        }
        let BlockRecord::Ffn(rec) = cache.record(1) else {
            panic!()
        };
        let want = (rec.out.frobenius_sq() + rec.z.frobenius_sq()) / 3.0;
        let got = block_loss(&zero.blocks[1], &cache, 1, 2, 1.0).unwrap();
        assert!((got - want).abs() < 1e-12 * want);
    }

    #[test]
    fn perplexity_limits() {
        let logits = DenseMatrix::zeros(16, 5);
        let ppl = perplexity_from_logits(&logits, &[0, 3, 15, 7, 7]).unwrap();
        assert!((ppl - 16.0).abs() < 1e-9);
        let mut sharp = DenseMatrix::zeros(4, 2);
        sharp.set(2, 0, 100.0);
        sharp.set(1, 1, 100.0);
        assert!((perplexity_from_logits(&sharp, &[2, 1]).unwrap() - 1.0).abs() < 1e-9);
        let shifted = sharp.map(|v| v + 7.5);
        let a = perplexity_from_logits(&sharp, &[0, 1]).unwrap();
        let b = perplexity_from_logits(&shifted, &[0, 1]).unwrap();
        assert!((a - b).abs() < 1e-9 * a);
    }

    #[test]
    fn perplexity_needs_head() {
        let model = generate_toy_model(ModelArch::new(8, 1, 2), &mut Rng::new(0)).unwrap();
        let calib = CalibrationSet::gaussian(1, 2, 8, &mut Rng::new(0)).unwrap();
        assert!(matches!(pseudo_perplexity(&model, &calib), Err(Error::Capability(_))));
    }

    #[test]
    fn table_rows() {
        let rows = memory_report(&opt_family());
        assert_eq!(rows[0].params_per_layer_m(), "10.4");
        assert_eq!(rows[0].mem_per_layer_mb(), "20.8");
        assert_eq!(rows[7].params_per_layer_m(), "1031.2");
        assert_eq!(rows[7].mem_per_layer_mb(), "2062.4");
        assert_eq!(with_thousands(rows[0].ffn_params), "4,718,592");
        assert_eq!(with_thousands(rows[7].ffn_params), "679,477,248");
        assert_eq!(rows[0].ratio(), "2.00");
        assert_eq!(rows[0].total_b(), "0.125B");
        assert_eq!(rows[2].total_b(), "1.3B");
    }

    #[test]
    fn scaling_cases() {
        let family: Vec<ModelConfig> = [4u64, 16, 64, 256]
            .iter()
            .map(|&n| {
                let root = (n as f64).sqrt() as u64;
                ModelConfig::new("sq", n, root, root)
            })
            .collect();
        let s = scaling_report(&family).unwrap();
        assert!((s.layers_slope - 0.5).abs() < 1e-9);
        assert!((s.params_per_layer_slope - 0.5).abs() < 1e-9);
        assert!(scaling_report(&family[..1]).is_err());
    }
}
