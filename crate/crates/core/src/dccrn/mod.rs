//! Complex convolutional encoder/decoder with a clue-conditioned complex
//! LSTM bottleneck.

mod checkpoint;
mod model;

use serde::{Deserialize, Serialize};

use crate::clue::ClueNetConfig;
use crate::error::{Error, Result};
use crate::signal::StftConfig;

pub use checkpoint::{Checkpoint, CHECKPOINT_VERSION};
pub use model::{ClueMode, Encoded, Extraction, Forward, Model};

use crate::clue::ClueSet;
use crate::signal::{AudioClip, StftPlan};

/// Extracts the clue-described target from `mixture` with a trained
/// checkpoint. Stage-1 checkpoints use the tag path; stage-2 checkpoints
/// fuse every present clue.
pub fn extract(mixture: &AudioClip, clues: &ClueSet, ckpt: &Checkpoint) -> Result<Extraction> {
    if clues.is_empty() {
        return Err(Error::Contract("clue set is empty".into()));
    }
    let (model, store) = ckpt.instantiate::<f32>()?;
    let plan = StftPlan::new(ckpt.config.stft)?;
    model.extract(&store, &plan, mixture, clues, model.default_mode())
}

/// Architecture of the extraction network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DccrnConfig {
    /// Encoder output channels per layer; the decoder mirrors them.
    pub channels: Vec<usize>,
    /// Kernel size as (frequency, time).
    pub kernel: [usize; 2],
    pub lstm_hidden: usize,
    pub lstm_layers: usize,
    pub stft: StftConfig,
    pub clue: ClueNetConfig,
}

impl Default for DccrnConfig {
    fn default() -> Self {
        Self {
            channels: vec![8, 16, 32, 32],
            kernel: [5, 2],
            lstm_hidden: 64,
            lstm_layers: 2,
            stft: StftConfig::default(),
            clue: ClueNetConfig::default(),
        }
    }
}

pub const FREQ_STRIDE: usize = 2;

impl DccrnConfig {
    /// The configuration with the published channel widths and LSTM size.
    pub fn paper_scale() -> Self {
        Self {
            channels: vec![32, 64, 128, 256, 256, 256],
            lstm_hidden: 512,
            ..Self::default()
        }
    }

    /// Frequency rows entering each encoder layer, followed by the rows
    /// leaving the last one.
    pub fn freq_sizes(&self) -> Vec<usize> {
        let mut f = vec![self.stft.bins()];
        for _ in &self.channels {
            let last = *f.last().unwrap();
            f.push((last - 1) / FREQ_STRIDE + 1);
        }
        f
    }

    /// Width `D` of the bottleneck features (channels × frequency rows).
    pub fn dim(&self) -> usize {
        self.channels.last().copied().unwrap_or(0) * self.freq_sizes().last().copied().unwrap_or(0)
    }

    pub fn validate(&self) -> Result<()> {
        self.stft.validate()?;
        if self.channels.is_empty() || self.channels.contains(&0) {
            return Err(Error::Config(
                "encoder needs at least one layer with positive channels".into(),
            ));
        }
        let [kf, kt] = self.kernel;
        if kf % 2 == 0 || kt == 0 {
            return Err(Error::Config(format!(
                "kernel {:?} needs an odd frequency size",
                self.kernel
            )));
        }
        if self.lstm_hidden == 0 || self.lstm_layers == 0 {
            return Err(Error::Config(
                "LSTM needs positive hidden size and layer count".into(),
            ));
        }
        let sizes = self.freq_sizes();
        for &f in &sizes[..sizes.len() - 1] {
            if f < 2 {
                return Err(Error::Config(format!(
                    "frequency axis collapses below one row after {} layers",
                    self.channels.len()
                )));
            }
            if f % 2 == 0 {
                return Err(Error::Config(format!(
                    "{f} frequency rows cannot be mirrored by the decoder (need an odd count)"
                )));
            }
        }
        self.clue.validate(self.dim())
    }
}
