//! Model directory and calibration file formats.
//!
//! A model directory holds `manifest.json` plus one raw blob per matrix:
//! little-endian `f32`, row-major, no header. Calibration data is a blob of
//! `N·seq_len` rows (sample-major) with a JSON sidecar of the same stem.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Block, CalibrationData, CalibrationSet, FfnBlock, MhaBlock, ModelArch, ToyModel};
use crate::error::{Error, Result};
use crate::fsutil::write_atomic;
use crate::tensor::DenseMatrix;

pub const MANIFEST_FILE: &str = "manifest.json";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    arch: ModelArch,
    matrices: Vec<MatrixEntry>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct MatrixEntry {
    name: String,
    rows: usize,
    cols: usize,
    file: String,
}

fn named_matrices(model: &ToyModel) -> Vec<(String, &DenseMatrix)> {
    let mut out = Vec::new();
    if let Some(e) = &model.embed {
        out.push(("embed".to_string(), e));
    }
    for (b, block) in model.blocks.iter().enumerate() {
        let layer = model.layer_of(b);
        let group = match block {
            Block::Mha(_) => "attn",
            Block::Ffn(_) => "ffn",
        };
        for (name, m) in block.matrices() {
            out.push((format!("layer{layer}.{group}.{name}"), m));
        }
    }
    if let Some(h) = &model.head {
        out.push(("head".to_string(), h));
    }
    out
}

/// Expected `(name, rows, cols)` for every matrix of `arch`.
fn expected_shapes(arch: &ModelArch) -> Vec<(String, usize, usize)> {
    let d = arch.d;
    let mut out = Vec::new();
    if arch.vocab > 0 {
        out.push(("embed".to_string(), arch.vocab, d));
    }
    for l in 0..arch.layers {
        if !arch.ffn_only {
            for n in ["wq", "wk", "wv", "wo"] {
                out.push((format!("layer{l}.attn.{n}"), d, d));
            }
        }
        out.push((format!("layer{l}.ffn.w1"), arch.ffn_dim, d));
        out.push((format!("layer{l}.ffn.w2"), d, arch.ffn_dim));
    }
    if arch.vocab > 0 {
        out.push(("head".to_string(), arch.vocab, d));
    }
    out
}

fn to_f32_bytes(m: &DenseMatrix) -> Vec<u8> {
    let mut bytes = Vec::with_capacity(m.data().len() * 4);
    for &v in m.data() {
        bytes.extend_from_slice(&(v as f32).to_le_bytes());
    }
    bytes
}

fn from_f32_bytes(bytes: &[u8]) -> Vec<f64> {
    bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect()
}

/// Writes `model` into directory `dir`, blobs first and the manifest last.
pub fn save_model(model: &ToyModel, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries = Vec::new();
    for (name, m) in named_matrices(model) {
        let file = format!("{name}.bin");
        write_atomic(&dir.join(&file), &to_f32_bytes(m))?;
        entries.push(MatrixEntry {
            name,
            rows: m.rows(),
            cols: m.cols(),
            file,
        });
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        arch: model.arch,
        matrices: entries,
    };
    let mut json = serde_json::to_vec_pretty(&manifest).expect("manifest serializes");
    json.push(b'\n');
    write_atomic(&dir.join(MANIFEST_FILE), &json)
}

/// Reads a model directory. The manifest and every blob size are checked
/// before any blob is read.
pub fn load_model(dir: &Path) -> Result<ToyModel> {
    let manifest_path = dir.join(MANIFEST_FILE);
    let text = std::fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| Error::format(&manifest_path, format!("invalid manifest: {e}")))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::format(
            &manifest_path,
            format!("unsupported format_version {}", manifest.format_version),
        ));
    }
    let arch = manifest.arch;
    arch.validate()
        .map_err(|e| Error::format(&manifest_path, e.to_string()))?;

    let listed: BTreeMap<&str, &MatrixEntry> = manifest.matrices.iter().map(|m| (m.name.as_str(), m)).collect();
    let mut plan: Vec<(String, PathBuf, usize, usize)> = Vec::new();
    for (name, rows, cols) in expected_shapes(&arch) {
        let entry = listed
            .get(name.as_str())
            .ok_or_else(|| Error::format(&manifest_path, format!("matrix `{name}` missing from manifest")))?;
        if (entry.rows, entry.cols) != (rows, cols) {
            return Err(Error::format(
                &manifest_path,
                format!(
                    "matrix `{name}` is {}x{} but the arch requires {rows}x{cols}",
                    entry.rows, entry.cols
                ),
            ));
        }
        let path = dir.join(&entry.file);
        let meta = std::fs::metadata(&path)
            .map_err(|_| Error::format(&path, format!("blob for matrix `{name}` is missing")))?;
        let want = (rows * cols * 4) as u64;
        if meta.len() != want {
            return Err(Error::format(
                &path,
                format!("blob for matrix `{name}` has {} bytes, expected {want}", meta.len()),
            ));
        }
        plan.push((name, path, rows, cols));
    }
    if listed.len() != plan.len() {
        return Err(Error::format(
            &manifest_path,
            format!("manifest lists {} matrices, arch defines {}", listed.len(), plan.len()),
        ));
    }

    let mut mats: BTreeMap<String, DenseMatrix> = BTreeMap::new();
    for (name, path, rows, cols) in plan {
        let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let m = DenseMatrix::from_vec(rows, cols, from_f32_bytes(&bytes))?;
        if !m.is_finite() {
            return Err(Error::format(&path, format!("matrix `{name}` has non-finite values")));
        }
        mats.insert(name, m);
    }
    let mut take = |n: String| mats.remove(&n).expect("validated above");
    let embed = (arch.vocab > 0).then(|| take("embed".into()));
    let mut blocks = Vec::new();
    for l in 0..arch.layers {
        if !arch.ffn_only {
            blocks.push(Block::Mha(MhaBlock {
                wq: take(format!("layer{l}.attn.wq")),
                wk: take(format!("layer{l}.attn.wk")),
                wv: take(format!("layer{l}.attn.wv")),
                wo: take(format!("layer{l}.attn.wo")),
            }));
        }
        blocks.push(Block::Ffn(FfnBlock {
            w1: take(format!("layer{l}.ffn.w1")),
            w2: take(format!("layer{l}.ffn.w2")),
        }));
    }
    let head = (arch.vocab > 0).then(|| take("head".into()));
    Ok(ToyModel {
        arch,
        blocks,
        embed,
        head,
    })
}

#[derive(Debug, Serialize, Deserialize)]
struct CalibSidecar {
    #[serde(rename = "N")]
    samples: usize,
    seq_len: usize,
    d: usize,
    #[serde(default = "dense_kind")]
    kind: String,
    #[serde(default)]
    vocab: usize,
}

fn dense_kind() -> String {
    "dense".into()
}

fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

fn targets_path(path: &Path) -> PathBuf {
    path.with_extension("targets.bin")
}

/// Writes a calibration set to `path` with its sidecar next to it.
/// Token ids are stored as `f32` values, one row per sample.
pub fn save_calibration(calib: &CalibrationSet, d: usize, vocab: usize, path: &Path) -> Result<()> {
    if sidecar_path(path) == path || targets_path(path) == path {
        return Err(Error::param(
            "calibration path",
            format!("{} would collide with its sidecar; use a .bin name", path.display()),
        ));
    }
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let sidecar = match &calib.data {
        CalibrationData::Dense(x) => {
            // stored sample-major: N·seq_len rows of d features
            write_atomic(path, &to_f32_bytes(&x.transpose()))?;
            CalibSidecar {
                samples: calib.samples,
                seq_len: calib.seq_len,
                d,
                kind: dense_kind(),
                vocab: 0,
            }
        }
        CalibrationData::Tokens { ids, targets } => {
            let as_matrix =
                |rows: &Vec<Vec<usize>>| DenseMatrix::from_fn(calib.samples, calib.seq_len, |s, t| rows[s][t] as f64);
            write_atomic(path, &to_f32_bytes(&as_matrix(ids)))?;
            write_atomic(&targets_path(path), &to_f32_bytes(&as_matrix(targets)))?;
            CalibSidecar {
                samples: calib.samples,
                seq_len: calib.seq_len,
                d,
                kind: "tokens".into(),
                vocab,
            }
        }
    };
    let mut json = serde_json::to_vec_pretty(&sidecar).expect("sidecar serializes");
    json.push(b'\n');
    write_atomic(&sidecar_path(path), &json)
}

fn read_blob(path: &Path, rows: usize, cols: usize) -> Result<DenseMatrix> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() != rows * cols * 4 {
        return Err(Error::format(
            path,
            format!("{} bytes, expected {} for {rows}x{cols}", bytes.len(), rows * cols * 4),
        ));
    }
    DenseMatrix::from_vec(rows, cols, from_f32_bytes(&bytes))
}

pub fn load_calibration(path: &Path) -> Result<CalibrationSet> {
    let side = sidecar_path(path);
    let text = std::fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
    let meta: CalibSidecar =
        serde_json::from_str(&text).map_err(|e| Error::format(&side, format!("invalid sidecar: {e}")))?;
    if meta.samples == 0 || meta.seq_len == 0 {
        return Err(Error::format(&side, "N and seq_len must be positive"));
    }
    match meta.kind.as_str() {
        "dense" => {
            let m = read_blob(path, meta.samples * meta.seq_len, meta.d)?;
            Ok(CalibrationSet {
                samples: meta.samples,
                seq_len: meta.seq_len,
                data: CalibrationData::Dense(m.transpose()),
            })
        }
        "tokens" => {
            let to_ids = |m: DenseMatrix, p: &Path| -> Result<Vec<Vec<usize>>> {
                let mut out = Vec::with_capacity(m.rows());
                for s in 0..m.rows() {
                    let mut row = Vec::with_capacity(m.cols());
                    for &v in m.row(s) {
                        if v < 0.0 || v.fract() != 0.0 || v as usize >= meta.vocab {
                            return Err(Error::format(p, format!("bad token id {v}")));
                        }
                        row.push(v as usize);
                    }
                    out.push(row);
                }
                Ok(out)
            };
            let ids = to_ids(read_blob(path, meta.samples, meta.seq_len)?, path)?;
            let tp = targets_path(path);
            let targets = to_ids(read_blob(&tp, meta.samples, meta.seq_len)?, &tp)?;
            Ok(CalibrationSet {
                samples: meta.samples,
                seq_len: meta.seq_len,
                data: CalibrationData::Tokens { ids, targets },
            })
        }
        other => Err(Error::format(&side, format!("unknown calibration kind `{other}`"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::generate_toy_model;
    use crate::tensor::Rng;

    fn roundtrip_f32(m: &ToyModel) -> ToyModel {
        let mut out = m.clone();
        let cast = |x: &mut DenseMatrix| {
            for v in x.data_mut() {
                *v = *v as f32 as f64;
            }
        };
        for b in &mut out.blocks {
            match b {
                Block::Ffn(f) => {
                    cast(&mut f.w1);
                    cast(&mut f.w2);
                }
                Block::Mha(a) => {
                    cast(&mut a.wq);
                    cast(&mut a.wk);
                    cast(&mut a.wv);
                    cast(&mut a.wo);
                }
            }
        }
        out.embed.as_mut().map(cast);
        out.head.as_mut().map(cast);
        out
    }

    #[test]
    fn save_load_roundtrip_at_f32() {
        let dir = tempfile::tempdir().unwrap();
        let model = generate_toy_model(ModelArch::new(8, 2, 2).with_vocab(6), &mut Rng::new(1)).unwrap();
        save_model(&model, dir.path()).unwrap();
        let loaded = load_model(dir.path()).unwrap();
        assert_eq!(loaded, roundtrip_f32(&model));
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let model = generate_toy_model(ModelArch::new(8, 1, 2), &mut Rng::new(9)).unwrap();
        save_model(&model, a.path()).unwrap();
        save_model(&load_model(a.path()).unwrap(), b.path()).unwrap();
        for entry in std::fs::read_dir(a.path()).unwrap() {
            let name = entry.unwrap().file_name();
            let x = std::fs::read(a.path().join(&name)).unwrap();
            let y = std::fs::read(b.path().join(&name)).unwrap();
            assert_eq!(x, y, "{name:?}");
        }
    }

    #[test]
    fn truncated_blob_is_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let model = generate_toy_model(ModelArch::new(8, 1, 2).ffn_only(), &mut Rng::new(1)).unwrap();
        save_model(&model, dir.path()).unwrap();
        let blob = dir.path().join("layer0.ffn.w2.bin");
        let bytes = std::fs::read(&blob).unwrap();
        std::fs::write(&blob, &bytes[..bytes.len() - 3]).unwrap();
        let err = load_model(dir.path()).unwrap_err();
        assert!(matches!(err, Error::Format { .. }));
        assert!(err.to_string().contains("layer0.ffn.w2"));
    }

    #[test]
    fn missing_blob_names_matrix() {
        let dir = tempfile::tempdir().unwrap();
        let model = generate_toy_model(ModelArch::new(8, 1, 2).ffn_only(), &mut Rng::new(1)).unwrap();
        save_model(&model, dir.path()).unwrap();
        std::fs::remove_file(dir.path().join("layer0.ffn.w1.bin")).unwrap();
        let err = load_model(dir.path()).unwrap_err();
        assert!(matches!(err, Error::Format { .. }));
        assert!(err.to_string().contains("layer0.ffn.w1"), "{err}");
    }

    #[test]
    fn calibration_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("calib.bin");
        let calib = CalibrationSet::gaussian(3, 4, 8, &mut Rng::new(2)).unwrap();
        save_calibration(&calib, 8, 0, &path).unwrap();
        let back = load_calibration(&path).unwrap();
        let (CalibrationData::Dense(x), CalibrationData::Dense(y)) = (&calib.data, &back.data) else {
            panic!()
        };
        assert!(x.max_abs_diff(y) < 1e-6);
        assert_eq!((back.samples, back.seq_len), (3, 4));

        let model = generate_toy_model(ModelArch::new(8, 1, 2).with_vocab(7), &mut Rng::new(2)).unwrap();
        let tokens = CalibrationSet::tokens(&model, 2, 5, &mut Rng::new(4)).unwrap();
        let tpath = dir.path().join("tok.bin");
        save_calibration(&tokens, 8, 7, &tpath).unwrap();
        assert_eq!(load_calibration(&tpath).unwrap(), tokens);
    }
}
