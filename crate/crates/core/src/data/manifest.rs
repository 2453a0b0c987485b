use std::collections::{BTreeSet, HashSet};
use std::fmt;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use super::example::{build_example, MixtureExample};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Split {
    Train,
    Valid,
    TestSeen,
    TestUnseen,
}

impl Split {
    pub const ALL: [Split; 4] = [
        Split::Train,
        Split::Valid,
        Split::TestSeen,
        Split::TestUnseen,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::TestSeen => "test-seen",
            Split::TestUnseen => "test-unseen",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Split::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Input(format!("unknown split {s:?}")))
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// One example, stored by its seeds so the audio can be regenerated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub id: String,
    pub split: Split,
    pub target_class: usize,
    pub interferer_class: usize,
    pub snr_db: f64,
    pub seed: u64,
    pub clue_text_tokens: Vec<usize>,
    pub video_seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mix_wav: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_wav: Option<String>,
    /// Fields this version does not know about, kept for round-trips.
    #[serde(flatten)]
    pub extra: Map<String, Value>,
}

impl ManifestRecord {
    pub fn example(&self) -> Result<MixtureExample> {
        build_example(
            self.target_class,
            self.interferer_class,
            self.snr_db,
            self.seed,
            self.clue_text_tokens.clone(),
            self.video_seed,
        )
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Manifest {
    pub records: Vec<ManifestRecord>,
}

impl Manifest {
    pub fn new(records: Vec<ManifestRecord>) -> Result<Self> {
        let m = Self { records };
        m.validate()?;
        Ok(m)
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestRecord> {
        self.records.iter().filter(move |r| r.split == split)
    }

    pub fn find(&self, id: &str) -> Result<&ManifestRecord> {
        self.records
            .iter()
            .find(|r| r.id == id)
            .ok_or_else(|| Error::Input(format!("no example with id {id:?} in manifest")))
    }

    /// Every class used as target or interferer in the training split.
    pub fn train_classes(&self) -> BTreeSet<usize> {
        self.split(Split::Train)
            .flat_map(|r| [r.target_class, r.interferer_class])
            .collect()
    }

    /// Checks id uniqueness, distinct classes per example, and that no
    /// unseen-test target class occurs anywhere in training.
    pub fn validate(&self) -> Result<()> {
        let mut ids = HashSet::new();
        for r in &self.records {
            if !ids.insert(r.id.as_str()) {
                return Err(Error::Validation(format!(
                    "duplicate example id {:?}",
                    r.id
                )));
            }
            if r.target_class == r.interferer_class {
                return Err(Error::Validation(format!(
                    "example {:?} uses class {} as both target and interferer",
                    r.id, r.target_class
                )));
            }
        }
        let train = self.train_classes();
        if let Some(r) = self
            .split(Split::TestUnseen)
            .find(|r| train.contains(&r.target_class))
        {
            return Err(Error::Validation(format!(
                "unseen-test example {:?} targets class {}, which appears in training",
                r.id, r.target_class
            )));
        }
        Ok(())
    }

    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r)?);
            out.push('\n');
        }
        Ok(out)
    }

    /// Parses JSON lines; blank lines are skipped.
    pub fn from_jsonl(text: &str) -> Result<Self> {
        let mut records = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let r = serde_json::from_str(line).map_err(|e| Error::Parse {
                line: i + 1,
                msg: e.to_string(),
            })?;
            records.push(r);
        }
        Self::new(records)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_jsonl()?).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_jsonl(&text)
    }
}
