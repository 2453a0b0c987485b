//! Clue modalities, their encoders, and attention-based fusion.

mod embfile;
mod net;

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use embfile::{read_embedding, write_embedding};
pub use net::{upsample_indices, ClueNet, ClueNetConfig, EncodedClue, FusedClue};

/// Clue modalities. The declaration order is the fixed concatenation order
/// of encoded clues.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Text,
    Video,
    Tag,
    Sound,
}

impl Modality {
    pub const CLUES: [Modality; 3] = [Modality::Text, Modality::Video, Modality::Tag];

    pub fn name(self) -> &'static str {
        match self {
            Modality::Text => "text",
            Modality::Video => "video",
            Modality::Tag => "tag",
            Modality::Sound => "sound",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "text" => Ok(Modality::Text),
            "video" => Ok(Modality::Video),
            "tag" => Ok(Modality::Tag),
            "sound" => Ok(Modality::Sound),
            other => Err(Error::Input(format!("unknown modality {other:?}"))),
        }
    }

    pub(crate) fn code(self) -> u8 {
        match self {
            Modality::Sound => 0,
            Modality::Text => 1,
            Modality::Video => 2,
            Modality::Tag => 3,
        }
    }

    pub(crate) fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(Modality::Sound),
            1 => Ok(Modality::Text),
            2 => Ok(Modality::Video),
            3 => Ok(Modality::Tag),
            c => Err(Error::Input(format!("unknown modality code {c}"))),
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// A non-empty subset of the clue modalities.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct ClueSubset {
    pub text: bool,
    pub video: bool,
    pub tag: bool,
}

impl ClueSubset {
    pub const ALL: ClueSubset = ClueSubset {
        text: true,
        video: true,
        tag: true,
    };
    pub const TAG: ClueSubset = ClueSubset {
        text: false,
        video: false,
        tag: true,
    };

    /// The seven non-empty subsets, singletons first.
    pub fn all_nonempty() -> Vec<ClueSubset> {
        let mut v: Vec<_> = (1u8..8)
            .map(|m| ClueSubset {
                tag: m & 1 != 0,
                text: m & 2 != 0,
                video: m & 4 != 0,
            })
            .collect();
        v.sort_by_key(|s| (s.len(), !s.tag, !s.text));
        v
    }

    pub fn len(&self) -> usize {
        self.text as usize + self.video as usize + self.tag as usize
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn contains(&self, m: Modality) -> bool {
        match m {
            Modality::Text => self.text,
            Modality::Video => self.video,
            Modality::Tag => self.tag,
            Modality::Sound => false,
        }
    }

    /// Parses `tag+text+video` style names.
    pub fn parse(s: &str) -> Result<Self> {
        let mut out = ClueSubset::default();
        for part in s.split('+') {
            match Modality::parse(part.trim())? {
                Modality::Text => out.text = true,
                Modality::Video => out.video = true,
                Modality::Tag => out.tag = true,
                Modality::Sound => return Err(Error::Input("sound is not a clue modality".into())),
            }
        }
        Ok(out)
    }
}

impl fmt::Display for ClueSubset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let names: Vec<_> = [
            (self.tag, "tag"),
            (self.text, "text"),
            (self.video, "video"),
        ]
        .iter()
        .filter(|(on, _)| *on)
        .map(|(_, n)| *n)
        .collect();
        f.write_str(&names.join("+"))
    }
}

/// Text clue: token ids into the stub vocabulary, or precomputed raw
/// features (`T_t×D_traw`) from an external encoder.
#[derive(Debug, Clone, PartialEq)]
pub enum TextClue {
    Tokens(Vec<usize>),
    Features(Tensor<f64>),
}

impl TextClue {
    pub fn len(&self) -> usize {
        match self {
            TextClue::Tokens(t) => t.len(),
            TextClue::Features(f) => f.shape()[0],
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// The clues available for one extraction. Absent modalities are `None`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ClueSet {
    /// Target class index; encoded as a one-hot vector.
    pub tag: Option<usize>,
    pub text: Option<TextClue>,
    /// Frame features, `T_v×D_vraw`.
    pub video: Option<Tensor<f64>>,
}

impl ClueSet {
    pub fn is_empty(&self) -> bool {
        self.tag.is_none() && self.text.is_none() && self.video.is_none()
    }

    pub fn present(&self) -> ClueSubset {
        ClueSubset {
            text: self.text.is_some(),
            video: self.video.is_some(),
            tag: self.tag.is_some(),
        }
    }

    /// Parses `tag=ID[,text=T1:T2:…][,video=FILE]`. The video file holds
    /// raw frame features in the embedding format with the video modality.
    pub fn parse_arg(spec: &str) -> Result<ClueSet> {
        let mut out = ClueSet::default();
        for part in spec.split(',').filter(|p| !p.trim().is_empty()) {
            let (key, value) = part
                .split_once('=')
                .ok_or_else(|| Error::Input(format!("clue {part:?} is not key=value")))?;
            let bad = |what: &str| Error::Input(format!("malformed {what} clue {value:?}"));
            match Modality::parse(key.trim())? {
                Modality::Tag if out.tag.is_none() => {
                    out.tag = Some(value.trim().parse().map_err(|_| bad("tag"))?);
                }
                Modality::Text if out.text.is_none() => {
                    let tokens = value
                        .split(':')
                        .map(|t| t.trim().parse::<usize>())
                        .collect::<std::result::Result<Vec<_>, _>>()
                        .map_err(|_| bad("text"))?;
                    out.text = Some(TextClue::Tokens(tokens));
                }
                Modality::Video if out.video.is_none() => {
                    let seq = read_embedding(std::path::Path::new(value.trim()))?;
                    if seq.modality != Modality::Video {
                        return Err(Error::Input(format!(
                            "{value} holds a {} embedding, not video",
                            seq.modality
                        )));
                    }
                    out.video = Some(seq.data);
                }
                m => return Err(Error::Input(format!("{m} clue given twice or not a clue"))),
            }
        }
        if out.is_empty() {
            return Err(Error::Input("no clues given".into()));
        }
        Ok(out)
    }

    /// Keeps only the modalities in `subset`; errors if one is missing.
    pub fn restrict(&self, subset: ClueSubset) -> Result<ClueSet> {
        for m in Modality::CLUES {
            if subset.contains(m) && !self.present().contains(m) {
                return Err(Error::Input(format!(
                    "clue subset {subset} needs an absent {m} clue"
                )));
            }
        }
        Ok(ClueSet {
            tag: self.tag.filter(|_| subset.tag),
            text: self.text.clone().filter(|_| subset.text),
            video: self.video.clone().filter(|_| subset.video),
        })
    }
}

/// One-hot vector of length `classes` with a 1 at `class`.
pub fn one_hot(class: usize, classes: usize) -> Result<Vec<f64>> {
    if class >= classes {
        return Err(Error::Input(format!(
            "class {class} out of range for {classes} classes"
        )));
    }
    let mut v = vec![0.0; classes];
    v[class] = 1.0;
    Ok(v)
}

/// Index of the single 1 in a one-hot vector.
pub fn one_hot_index(v: &[f64]) -> Result<usize> {
    let mut hit = None;
    for (i, &x) in v.iter().enumerate() {
        if x == 1.0 && hit.is_none() {
            hit = Some(i);
        } else if x != 0.0 {
            return Err(Error::Input(format!(
                "malformed one-hot vector at entry {i}"
            )));
        }
    }
    hit.ok_or_else(|| Error::Input("one-hot vector has no set entry".into()))
}

/// A dense `L×D` embedding sequence tagged with its modality.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSeq {
    pub modality: Modality,
    pub data: Tensor<f64>,
}

impl EmbeddingSeq {
    pub fn new(modality: Modality, data: Tensor<f64>) -> Result<Self> {
        if data.shape().len() != 2 {
            return Err(Error::dim("embedding sequence", data.shape(), &[2]));
        }
        if data.data().iter().any(|v| !v.is_finite()) {
            return Err(Error::Input(
                "embedding sequence has non-finite entries".into(),
            ));
        }
        Ok(Self { modality, data })
    }

    pub fn len(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.data.shape()[1]
    }
}

/// Which rows of the concatenated clue belong to which modality.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SegmentMap {
    pub segments: Vec<(Modality, std::ops::Range<usize>)>,
}

impl SegmentMap {
    pub fn len(&self) -> usize {
        self.segments.last().map_or(0, |(_, r)| r.end)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Column labels such as `text_0`, `video_12`, `tag_0`.
    pub fn labels(&self) -> Vec<String> {
        self.segments
            .iter()
            .flat_map(|(m, r)| (0..r.len()).map(move |i| format!("{m}_{i}")))
            .collect()
    }

    pub fn modality_of(&self, row: usize) -> Option<Modality> {
        self.segments
            .iter()
            .find(|(_, r)| r.contains(&row))
            .map(|(m, _)| *m)
    }
}
