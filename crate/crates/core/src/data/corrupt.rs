//! Clue degradations used for robustness evaluation.

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::text::VOCAB_SIZE;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const VIDEO_NOISE_DB: f64 = -2.5;

/// Replaces `floor(n/3)` distinct positions, chosen uniformly, with a
/// uniformly drawn different word.
pub fn corrupt_text(tokens: &[usize], seed: u64) -> Result<Vec<usize>> {
    let n = tokens.len();
    if n < 3 {
        return Err(Error::Input(format!(
            "text corruption needs at least 3 tokens, got {n}"
        )));
    }
    if let Some(t) = tokens.iter().find(|&&t| t >= VOCAB_SIZE) {
        return Err(Error::Input(format!(
            "token {t} outside the {VOCAB_SIZE}-word vocabulary"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = tokens.to_vec();
    for pos in index::sample(&mut rng, n, n / 3) {
        let r = rng.random_range(0..VOCAB_SIZE - 1);
        out[pos] = if r >= tokens[pos] { r + 1 } else { r };
    }
    Ok(out)
}

/// Adds white Gaussian noise scaled so that the frame-to-noise energy ratio
/// over the whole clip is `noise_db`.
pub fn corrupt_video(frames: &Tensor<f64>, noise_db: f64, seed: u64) -> Result<Tensor<f64>> {
    if !noise_db.is_finite() {
        return Err(Error::Input(format!(
            "noise level must be finite, got {noise_db}"
        )));
    }
    let energy: f64 = frames.data().iter().map(|v| v * v).sum();
    if energy <= 0.0 {
        return Err(Error::Input(
            "cannot corrupt zero-energy video frames".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise: Vec<f64> = (0..frames.numel())
        .map(|_| rng.sample(StandardNormal))
        .collect();
    let noise_energy: f64 = noise.iter().map(|v| v * v).sum();
    let gain = (energy / (noise_energy * 10f64.powf(noise_db / 10.0))).sqrt();
    let data = frames
        .data()
        .iter()
        .zip(&noise)
        .map(|(x, n)| x + gain * n)
        .collect();
    Tensor::new(frames.shape().to_vec(), data)
}
