use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::adam::AdamConfig;
use super::loss::LossConfig;
use crate::clue::ClueSubset;
use crate::dccrn::DccrnConfig;
use crate::error::{Error, Result};

/// Everything a training run reads from its JSON config file. Missing
/// fields take the defaults below.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub stage: u8,
    pub lr0: f64,
    /// Per-epoch multiplicative learning-rate decay.
    pub decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Epochs without a validation improvement before stopping.
    pub patience: usize,
    pub seed: u64,
    /// Stage-2 sampling weights keyed by subset, e.g. `"tag+text"`.
    pub subset_weights: BTreeMap<String, f64>,
    /// Optional cap on optimiser steps across all epochs.
    pub max_steps: Option<usize>,
    pub adam: AdamConfig,
    pub loss: LossConfig,
    pub model: DccrnConfig,
}

pub fn default_subset_weights() -> BTreeMap<String, f64> {
    ClueSubset::all_nonempty()
        .into_iter()
        .map(|s| (s.to_string(), if s == ClueSubset::ALL { 0.4 } else { 0.1 }))
        .collect()
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            stage: 1,
            lr0: 0.5e-4,
            decay: 0.97,
            batch_size: 8,
            epochs: 200,
            patience: 10,
            seed: 0,
            subset_weights: default_subset_weights(),
            max_steps: None,
            adam: AdamConfig::default(),
            loss: LossConfig::default(),
            model: DccrnConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_json(&std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    pub fn validate(&self) -> Result<()> {
        if !matches!(self.stage, 1 | 2) {
            return Err(Error::Config(format!(
                "stage must be 1 or 2, got {}",
                self.stage
            )));
        }
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return Err(Error::Config(format!(
                "lr0 must be positive, got {}",
                self.lr0
            )));
        }
        if !(self.decay > 0.0 && self.decay <= 1.0) {
            return Err(Error::Config(format!(
                "decay must be in (0, 1], got {}",
                self.decay
            )));
        }
        if self.batch_size == 0 || self.epochs == 0 || self.patience == 0 {
            return Err(Error::Config(
                "batch_size, epochs and patience must be positive".into(),
            ));
        }
        self.loss.validate()?;
        self.model.validate()?;
        SubsetSampler::new(&self.subset_weights)?;
        Ok(())
    }
}

/// Draws clue subsets in proportion to their weights.
#[derive(Debug, Clone)]
pub struct SubsetSampler {
    subsets: Vec<(ClueSubset, f64)>,
    total: f64,
}

impl SubsetSampler {
    /// Every non-empty subset needs a positive weight.
    pub fn new(weights: &BTreeMap<String, f64>) -> Result<Self> {
        let mut parsed = BTreeMap::new();
        for (k, &w) in weights {
            let s = ClueSubset::parse(k).map_err(|e| Error::Config(e.to_string()))?;
            if !(w > 0.0 && w.is_finite()) {
                return Err(Error::Config(format!(
                    "subset {k} has weight {w}; weights must be positive"
                )));
            }
            if parsed.insert(s.to_string(), (s, w)).is_some() {
                return Err(Error::Config(format!("subset {k} is listed twice")));
            }
        }
        let mut subsets = Vec::new();
        for s in ClueSubset::all_nonempty() {
            let (_, w) = parsed
                .get(&s.to_string())
                .ok_or_else(|| Error::Config(format!("subset {s} has no sampling weight")))?;
            subsets.push((s, *w));
        }
        let total = subsets.iter().map(|(_, w)| w).sum();
        Ok(Self { subsets, total })
    }

    pub fn probability(&self, subset: ClueSubset) -> f64 {
        self.subsets
            .iter()
            .find(|(s, _)| *s == subset)
            .map_or(0.0, |(_, w)| w / self.total)
    }

    pub fn sample<R: Rng>(&self, rng: &mut R) -> ClueSubset {
        let mut u = rng.random::<f64>() * self.total;
        for &(s, w) in &self.subsets {
            if u < w {
                return s;
            }
            u -= w;
        }
        self.subsets.last().expect("seven subsets").0
    }
}
