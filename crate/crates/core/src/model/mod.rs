//! Toy decoder model, dense-reference activation capture and calibration data.
//!
//! Activations are stored feature-major: a batch of `N` samples of length
//! `seq_len` is a `d × (N·seq_len)` matrix whose column `s·seq_len + t` is
//! token `t` of sample `s`. Residual connections and normalization layers are
//! left out, so each block maps its input straight to its output.

mod io;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{matmul, matmul_nt, matmul_tn, relu, softmax_rows, DenseMatrix, Rng};

pub use io::{load_calibration, load_model, save_calibration, save_model, MANIFEST_FILE};

/// Shape of a toy model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelArch {
    /// Hidden size.
    pub d: usize,
    /// Number of decoder layers.
    #[serde(rename = "L")]
    pub layers: usize,
    /// Attention heads per layer.
    pub h: usize,
    pub ffn_dim: usize,
    /// Vocabulary size; `0` means the model has no token embedding or head.
    #[serde(default)]
    pub vocab: usize,
    /// Layers contain only the FFN block.
    #[serde(default)]
    pub ffn_only: bool,
}

impl ModelArch {
    /// Standard shape with `ffn_dim = 4d`, attention and FFN in every layer.
    pub fn new(d: usize, layers: usize, h: usize) -> Self {
        Self {
            d,
            layers,
            h,
            ffn_dim: 4 * d,
            vocab: 0,
            ffn_only: false,
        }
    }

    pub fn with_vocab(mut self, vocab: usize) -> Self {
        self.vocab = vocab;
        self
    }

    pub fn ffn_only(mut self) -> Self {
        self.ffn_only = true;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.layers == 0 || self.ffn_dim == 0 {
            return Err(Error::param("arch", "d, L and ffn_dim must be positive"));
        }
        if !self.ffn_only && (self.h == 0 || !self.d.is_multiple_of(self.h)) {
            return Err(Error::param(
                "arch",
                format!("d = {} is not divisible by h = {}", self.d, self.h),
            ));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d / self.h.max(1)
    }

    pub fn blocks_per_layer(&self) -> usize {
        if self.ffn_only {
            1
        } else {
            2
        }
    }

    pub fn ffn_params(&self) -> usize {
        2 * self.d * self.ffn_dim
    }

    pub fn mha_params(&self) -> usize {
        4 * self.d * self.d
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BlockKind {
    Mha,
    Ffn,
}

impl BlockKind {
    pub fn as_str(self) -> &'static str {
        match self {
            BlockKind::Mha => "mha",
            BlockKind::Ffn => "ffn",
        }
    }
}

impl std::fmt::Display for BlockKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Up projection `w1` (`ffn_dim × d`) and down projection `w2` (`d × ffn_dim`).
#[derive(Debug, Clone, PartialEq)]
pub struct FfnBlock {
    pub w1: DenseMatrix,
    pub w2: DenseMatrix,
}

/// Four `d × d` projections; head `i` owns rows `i·dh..(i+1)·dh` of
/// `wq`, `wk`, `wv` and the matching columns of `wo`.
#[derive(Debug, Clone, PartialEq)]
pub struct MhaBlock {
    pub wq: DenseMatrix,
    pub wk: DenseMatrix,
    pub wv: DenseMatrix,
    pub wo: DenseMatrix,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Block {
    Mha(MhaBlock),
    Ffn(FfnBlock),
}

impl Block {
    pub fn kind(&self) -> BlockKind {
        match self {
            Block::Mha(_) => BlockKind::Mha,
            Block::Ffn(_) => BlockKind::Ffn,
        }
    }

    pub fn param_count(&self) -> usize {
        self.matrices().iter().map(|(_, m)| m.rows() * m.cols()).sum()
    }

    /// Named weight matrices in manifest order.
    pub fn matrices(&self) -> Vec<(&'static str, &DenseMatrix)> {
        match self {
            Block::Mha(b) => vec![("wq", &b.wq), ("wk", &b.wk), ("wv", &b.wv), ("wo", &b.wo)],
            Block::Ffn(b) => vec![("w1", &b.w1), ("w2", &b.w2)],
        }
    }
}

/// Decoder stack plus, when `arch.vocab > 0`, an embedding and an output head
/// (both `vocab × d`).
#[derive(Debug, Clone, PartialEq)]
pub struct ToyModel {
    pub arch: ModelArch,
    pub blocks: Vec<Block>,
    pub embed: Option<DenseMatrix>,
    pub head: Option<DenseMatrix>,
}

impl ToyModel {
    /// Layer index of block `b`.
    pub fn layer_of(&self, b: usize) -> usize {
        b / self.arch.blocks_per_layer()
    }

    /// Block index of `kind` in layer `layer`, if the layer has one.
    pub fn block_index(&self, layer: usize, kind: BlockKind) -> Option<usize> {
        let per = self.arch.blocks_per_layer();
        (layer * per..(layer + 1) * per).find(|&b| self.blocks.get(b).map(Block::kind) == Some(kind))
    }

    pub fn param_count(&self) -> usize {
        self.blocks.iter().map(Block::param_count).sum()
    }

    /// Runs the decoder stack on feature-major input `x`.
    pub fn forward(&self, x: &DenseMatrix, seq_len: usize) -> Result<DenseMatrix> {
        let mut h = x.clone();
        for block in &self.blocks {
            h = block_output(block, &h, seq_len, self.arch.h)?;
        }
        Ok(h)
    }

    /// Embeds token sequences into a feature-major matrix.
    pub fn embed_tokens(&self, ids: &[Vec<usize>]) -> Result<DenseMatrix> {
        let embed = self
            .embed
            .as_ref()
            .ok_or_else(|| Error::Capability("model has no token embedding".into()))?;
        let seq_len = ids.first().map_or(0, Vec::len);
        let mut x = DenseMatrix::zeros(self.arch.d, ids.len() * seq_len);
        for (s, seq) in ids.iter().enumerate() {
            if seq.len() != seq_len {
                return Err(Error::dim("embed_tokens", "samples differ in length"));
            }
            for (t, &id) in seq.iter().enumerate() {
                if id >= embed.rows() {
                    return Err(Error::param(
                        "tokens",
                        format!("id {id} outside vocabulary of {}", embed.rows()),
                    ));
                }
                for (k, &v) in embed.row(id).iter().enumerate() {
                    x.set(k, s * seq_len + t, v);
                }
            }
        }
        Ok(x)
    }

    /// Head logits (`vocab × columns`) for final hidden states.
    pub fn logits(&self, hidden: &DenseMatrix) -> Result<DenseMatrix> {
        let head = self
            .head
            .as_ref()
            .ok_or_else(|| Error::Capability("model has no vocabulary head".into()))?;
        matmul(head, hidden)
    }
}

/// Normal draws rounded to `f32`, so that a generated model or calibration set
/// survives the on-disk format unchanged.
fn storable_normal(rows: usize, cols: usize, scale: f64, rng: &mut Rng) -> DenseMatrix {
    DenseMatrix::random_normal(rows, cols, scale, rng).map(|v| v as f32 as f64)
}

/// Draws a model with i.i.d. `N(0, 1/d)` weights (rounded to `f32`).
pub fn generate_toy_model(arch: ModelArch, rng: &mut Rng) -> Result<ToyModel> {
    arch.validate()?;
    let d = arch.d;
    let scale = 1.0 / (d as f64).sqrt();
    let mut blocks = Vec::with_capacity(arch.layers * arch.blocks_per_layer());
    for _ in 0..arch.layers {
        if !arch.ffn_only {
            blocks.push(Block::Mha(MhaBlock {
                wq: storable_normal(d, d, scale, rng),
                wk: storable_normal(d, d, scale, rng),
                wv: storable_normal(d, d, scale, rng),
                wo: storable_normal(d, d, scale, rng),
            }));
        }
        blocks.push(Block::Ffn(FfnBlock {
            w1: storable_normal(arch.ffn_dim, d, scale, rng),
            w2: storable_normal(d, arch.ffn_dim, scale, rng),
        }));
    }
    let (embed, head) = if arch.vocab > 0 {
        (
            Some(storable_normal(arch.vocab, d, 1.0, rng)),
            Some(storable_normal(arch.vocab, d, scale, rng)),
        )
    } else {
        (None, None)
    };
    Ok(ToyModel {
        arch,
        blocks,
        embed,
        head,
    })
}

/// Output of one block.
pub fn block_output(block: &Block, x: &DenseMatrix, seq_len: usize, heads: usize) -> Result<DenseMatrix> {
    match block {
        Block::Ffn(b) => matmul(&b.w2, &relu(&matmul(&b.w1, x)?)),
        Block::Mha(b) => {
            let q = matmul(&b.wq, x)?;
            let k = matmul(&b.wk, x)?;
            let v = matmul(&b.wv, x)?;
            let att = attention(&q, &k, &v, heads, seq_len)?;
            matmul(&b.wo, &att.attn)
        }
    }
}

/// Per-(sample, head) attention quantities for feature-major `q`, `k`, `v`.
#[derive(Debug, Clone, PartialEq)]
pub struct Attention {
    /// Scaled logits `Q_iᵀ K_i / √dh` (`seq_len × seq_len`), indexed `s·h + i`.
    pub logits: Vec<DenseMatrix>,
    /// Row-softmax of `logits`.
    pub probs: Vec<DenseMatrix>,
    /// Concatenated head outputs `V_i P_iᵀ`, `d × (N·seq_len)`.
    pub attn: DenseMatrix,
}

pub fn attention(q: &DenseMatrix, k: &DenseMatrix, v: &DenseMatrix, heads: usize, seq_len: usize) -> Result<Attention> {
    let d = q.rows();
    if heads == 0 || !d.is_multiple_of(heads) || seq_len == 0 || !q.cols().is_multiple_of(seq_len) {
        return Err(Error::dim(
            "attention",
            format!("d = {d}, heads = {heads}, columns = {}, seq_len = {seq_len}", q.cols()),
        ));
    }
    let dh = d / heads;
    let n = q.cols() / seq_len;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut logits = Vec::with_capacity(n * heads);
    let mut probs = Vec::with_capacity(n * heads);
    let mut attn = DenseMatrix::zeros(v.rows(), q.cols());
    for s in 0..n {
        let (c0, c1) = (s * seq_len, (s + 1) * seq_len);
        for i in 0..heads {
            let (r0, r1) = (i * dh, (i + 1) * dh);
            let qi = q.row_slice(r0, r1).col_slice(c0, c1);
            let ki = k.row_slice(r0, r1).col_slice(c0, c1);
            let vi = v.row_slice(r0, r1).col_slice(c0, c1);
            let z = matmul_tn(&qi, &ki)?.scale(scale);
            let p = softmax_rows(&z);
            let out = matmul_nt(&vi, &p)?;
            for r in 0..dh {
                for t in 0..seq_len {
                    attn.set(r0 + r, c0 + t, out.get(r, t));
                }
            }
            logits.push(z);
            probs.push(p);
        }
    }
    Ok(Attention { logits, probs, attn })
}

/// Frozen dense-reference activations of an FFN block.
#[derive(Debug, Clone, PartialEq)]
pub struct FfnRecord {
    /// Pre-activation `W1 x`.
    pub z: DenseMatrix,
    /// Hidden activation `ReLU(z)`.
    pub a: DenseMatrix,
    /// Block output `W2 a`.
    pub out: DenseMatrix,
}

/// Frozen dense-reference activations of an attention block.
#[derive(Debug, Clone, PartialEq)]
pub struct MhaRecord {
    pub q: DenseMatrix,
    pub k: DenseMatrix,
    pub v: DenseMatrix,
    pub att: Attention,
    /// Block output `WO attn`.
    pub out: DenseMatrix,
}

#[derive(Debug, Clone, PartialEq)]
pub enum BlockRecord {
    Mha(MhaRecord),
    Ffn(FfnRecord),
}

impl BlockRecord {
    pub fn out(&self) -> &DenseMatrix {
        match self {
            BlockRecord::Mha(r) => &r.out,
            BlockRecord::Ffn(r) => &r.out,
        }
    }
}

/// Dense-reference activations captured once per calibration set.
///
/// Nothing hands out mutable access; optimizers keep their own iterates and
/// read targets from here.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationCache {
    seq_len: usize,
    samples: usize,
    inputs: Vec<DenseMatrix>,
    records: Vec<BlockRecord>,
}

impl ActivationCache {
    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    /// Number of calibration samples `N`.
    pub fn samples(&self) -> usize {
        self.samples
    }

    pub fn num_blocks(&self) -> usize {
        self.records.len()
    }

    /// Dense input of block `b`.
    pub fn input(&self, b: usize) -> &DenseMatrix {
        &self.inputs[b]
    }

    pub fn record(&self, b: usize) -> &BlockRecord {
        &self.records[b]
    }

    /// Dense output of the last block.
    pub fn final_output(&self) -> &DenseMatrix {
        self.records.last().map_or(&self.inputs[0], BlockRecord::out)
    }

    /// Order-sensitive checksum over every stored value, for verifying that
    /// nothing touched the frozen reference.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut feed = |m: &DenseMatrix| {
            for v in m.data() {
                h ^= v.to_bits();
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        };
        for x in &self.inputs {
            feed(x);
        }
        for r in &self.records {
            match r {
                BlockRecord::Ffn(f) => {
                    feed(&f.z);
                    feed(&f.a);
                    feed(&f.out);
                }
                BlockRecord::Mha(m) => {
                    feed(&m.q);
                    feed(&m.k);
                    feed(&m.v);
                    m.att.logits.iter().for_each(&mut feed);
                    m.att.probs.iter().for_each(&mut feed);
                    feed(&m.att.attn);
                    feed(&m.out);
                }
            }
        }
        h
    }
}

/// Calibration inputs, either continuous activations or token ids.
#[derive(Debug, Clone, PartialEq)]
pub enum CalibrationData {
    /// Feature-major `d × (N·seq_len)` inputs.
    Dense(DenseMatrix),
    /// Token ids per sample with next-token targets of the same shape.
    Tokens {
        ids: Vec<Vec<usize>>,
        targets: Vec<Vec<usize>>,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationSet {
    pub samples: usize,
    pub seq_len: usize,
    pub data: CalibrationData,
}

impl CalibrationSet {
    /// `N` samples of i.i.d. standard normal activations (rounded to `f32`).
    pub fn gaussian(samples: usize, seq_len: usize, d: usize, rng: &mut Rng) -> Result<Self> {
        if samples == 0 || seq_len == 0 {
            return Err(Error::param("calibration", "N and seq_len must be positive"));
        }
        Ok(Self {
            samples,
            seq_len,
            data: CalibrationData::Dense(storable_normal(d, samples * seq_len, 1.0, rng)),
        })
    }

    /// Uniform random input ids; each target is drawn from the dense model's
    /// predictive distribution at that position, so the dense model is the
    /// reference the pruned one is measured against.
    pub fn tokens(model: &ToyModel, samples: usize, seq_len: usize, rng: &mut Rng) -> Result<Self> {
        let vocab = model.arch.vocab;
        if vocab == 0 {
            return Err(Error::Capability("token calibration needs a vocabulary head".into()));
        }
        if samples == 0 || seq_len == 0 {
            return Err(Error::param("calibration", "N and seq_len must be positive"));
        }
        let ids: Vec<Vec<usize>> = (0..samples)
            .map(|_| (0..seq_len).map(|_| rng.below(vocab)).collect())
            .collect();
        let x = model.embed_tokens(&ids)?;
        let logits = model.logits(&model.forward(&x, seq_len)?)?;
        let probs = softmax_rows(&logits.transpose());
        let mut targets = Vec::with_capacity(samples);
        for s in 0..samples {
            let mut row = Vec::with_capacity(seq_len);
            for t in 0..seq_len {
                let p = probs.row(s * seq_len + t);
                let u = rng.uniform();
                let mut acc = 0.0;
                let mut pick = vocab - 1;
                for (j, &pj) in p.iter().enumerate() {
                    acc += pj;
                    if u < acc {
                        pick = j;
                        break;
                    }
                }
                row.push(pick);
            }
            targets.push(row);
        }
        Ok(Self {
            samples,
            seq_len,
            data: CalibrationData::Tokens { ids, targets },
        })
    }

    pub fn has_tokens(&self) -> bool {
        matches!(self.data, CalibrationData::Tokens { .. })
    }

    /// Feature-major inputs to the first block.
    pub fn inputs(&self, model: &ToyModel) -> Result<DenseMatrix> {
        match &self.data {
            CalibrationData::Dense(x) => {
                if x.rows() != model.arch.d || x.cols() != self.samples * self.seq_len {
                    return Err(Error::dim(
                        "calibration",
                        format!(
                            "inputs {:?} do not match d = {}, N·seq_len = {}",
                            x.shape(),
                            model.arch.d,
                            self.samples * self.seq_len
                        ),
                    ));
                }
                Ok(x.clone())
            }
            CalibrationData::Tokens { ids, .. } => model.embed_tokens(ids),
        }
    }
}

/// Forward pass through the dense model that records every intermediate the
/// optimizers need as reconstruction targets.
pub fn capture_reference_activations(model: &ToyModel, calib: &CalibrationSet) -> Result<ActivationCache> {
    let x = calib.inputs(model)?;
    let seq_len = calib.seq_len;
    let mut inputs = Vec::with_capacity(model.blocks.len());
    let mut records = Vec::with_capacity(model.blocks.len());
    let mut h = x;
    for block in &model.blocks {
        let record = match block {
            Block::Ffn(b) => {
                let z = matmul(&b.w1, &h)?;
                let a = relu(&z);
                let out = matmul(&b.w2, &a)?;
                BlockRecord::Ffn(FfnRecord { z, a, out })
            }
            Block::Mha(b) => {
                let q = matmul(&b.wq, &h)?;
                let k = matmul(&b.wk, &h)?;
                let v = matmul(&b.wv, &h)?;
                let att = attention(&q, &k, &v, model.arch.h, seq_len)?;
                let out = matmul(&b.wo, &att.attn)?;
                BlockRecord::Mha(MhaRecord { q, k, v, att, out })
            }
        };
        let next = record.out().clone();
        inputs.push(h);
        records.push(record);
        h = next;
    }
    if records.is_empty() {
        inputs.push(h);
    }
    Ok(ActivationCache {
        seq_len,
        samples: calib.samples,
        inputs,
        records,
    })
}
