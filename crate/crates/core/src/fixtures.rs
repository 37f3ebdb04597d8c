//! Seeded toy instances shared by tests, the CLI and the guide.

use crate::error::Result;
use crate::model::{generate_toy_model, CalibrationSet, ModelArch, ToyModel};
use crate::tensor::Rng;

/// RNG stream of calibration data drawn for a model seed, so `gen --seed s`
/// followed by `calibrate --seed s` reproduces these fixtures.
pub const CALIB_STREAM: u64 = 0xca1;

/// Two FFN-only layers, `d = 16`, 8 Gaussian calibration samples of 4 tokens.
pub fn ffn_pair(seed: u64) -> Result<(ToyModel, CalibrationSet)> {
    let arch = ModelArch::new(16, 2, 1).ffn_only();
    let model = generate_toy_model(arch, &mut Rng::new(seed))?;
    let calib = CalibrationSet::gaussian(8, 4, arch.d, &mut Rng::new(seed).fork(CALIB_STREAM))?;
    Ok((model, calib))
}

/// Two full decoder layers (`d = 16`, 2 heads, vocabulary 32) with 8 token
/// calibration samples of 8 tokens.
pub fn standard(seed: u64) -> Result<(ToyModel, CalibrationSet)> {
    let arch = ModelArch::new(16, 2, 2).with_vocab(32);
    let model = generate_toy_model(arch, &mut Rng::new(seed))?;
    let calib = CalibrationSet::tokens(&model, 8, 8, &mut Rng::new(seed).fork(CALIB_STREAM))?;
    Ok((model, calib))
}
