//! Synthetic two-source mixtures with tag, caption and video clues.

mod corrupt;
mod example;
mod manifest;
mod source;
pub mod text;

pub use corrupt::{corrupt_text, corrupt_video, VIDEO_NOISE_DB};
pub use example::{
    build_example, classify_video, clue_draws, make_example, video_clue, video_template,
    MixtureExample, VIDEO_DIM, VIDEO_FRAMES,
};
pub use manifest::{Manifest, ManifestRecord, Split};
pub use source::{
    catalog, class, clip_len, gen_source, SoundClass, SynthSpec, CLIP_SECS, MAX_CLASSES, PEAK,
};

use std::path::Path;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Map;

use crate::error::{Error, Result};
use crate::signal::{write_wav, WavFormat};

pub const SNR_RANGE_DB: f64 = 2.0;

/// Sizes for [`simulate`]. The last `unseen` classes are held out of every
/// split except `test-unseen`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SimConfig {
    pub classes: usize,
    pub train: usize,
    pub valid: usize,
    /// Examples in each test split.
    pub test: usize,
    pub unseen: usize,
    pub seed: u64,
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        catalog(self.classes).map_err(|e| Error::Config(e.to_string()))?;
        if self.classes < self.unseen + 2 {
            return Err(Error::Config(format!(
                "{} classes leave fewer than 2 seen classes after holding out {}",
                self.classes, self.unseen
            )));
        }
        Ok(())
    }
}

/// Draws the example list: per split, target and interferer classes,
/// an SNR uniform in ±2 dB and a per-example seed, all from `cfg.seed`.
pub fn simulate(cfg: &SimConfig) -> Result<Manifest> {
    cfg.validate()?;
    let seen = cfg.classes - cfg.unseen;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut records = Vec::new();
    let plan = [
        (Split::Train, cfg.train),
        (Split::Valid, cfg.valid),
        (Split::TestSeen, cfg.test),
        (Split::TestUnseen, if cfg.unseen > 0 { cfg.test } else { 0 }),
    ];
    for (split, count) in plan {
        for i in 0..count {
            let target = if split == Split::TestUnseen {
                seen + rng.random_range(0..cfg.unseen)
            } else {
                rng.random_range(0..seen)
            };
            let interferer = loop {
                let c = rng.random_range(0..seen);
                if c != target {
                    break c;
                }
            };
            let snr_db = rng.random_range(-SNR_RANGE_DB..=SNR_RANGE_DB);
            let seed = rng.next_u64();
            let (tokens, video_seed) = clue_draws(target, seed)?;
            records.push(ManifestRecord {
                id: format!("{split}-{i:05}"),
                split,
                target_class: target,
                interferer_class: interferer,
                snr_db,
                seed,
                clue_text_tokens: tokens,
                video_seed,
                mix_wav: None,
                target_wav: None,
                extra: Map::new(),
            });
        }
    }
    Manifest::new(records)
}

/// Writes `<id>_mix.wav` and `<id>_target.wav` for every record into `dir`
/// and stores the file names in the records.
pub fn materialize_wavs(manifest: &mut Manifest, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    for r in &mut manifest.records {
        let ex = r.example()?;
        let mix = format!("{}_mix.wav", r.id);
        let target = format!("{}_target.wav", r.id);
        write_wav(dir.join(&mix), &ex.mixture, WavFormat::Float32)?;
        write_wav(dir.join(&target), &ex.target, WavFormat::Float32)?;
        r.mix_wav = Some(mix);
        r.target_wav = Some(target);
    }
    Ok(())
}
