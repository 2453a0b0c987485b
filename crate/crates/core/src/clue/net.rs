use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{one_hot, one_hot_index, ClueSet, Modality, SegmentMap, TextClue};
use crate::error::{Error, Result};
use crate::nn::{Graph, Linear, MhaOutput, MultiHeadAttention, ParamId, ParamStore, ProjectionNet};
use crate::tensor::{Conv2dGeom, Float, Tensor, Var};

/// Sizes of the clue encoders. The shared clue width `D` is supplied by the
/// backbone.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClueNetConfig {
    pub classes: usize,
    pub heads: usize,
    /// Time downsampling of the sound encoder.
    pub downsample: usize,
    pub sound_channels: Vec<usize>,
    pub vocab: usize,
    pub text_raw: usize,
    pub video_raw: usize,
}

impl Default for ClueNetConfig {
    fn default() -> Self {
        Self {
            classes: 4,
            heads: 4,
            downsample: 4,
            sound_channels: vec![8, 16],
            vocab: 64,
            text_raw: 32,
            video_raw: 32,
        }
    }
}

impl ClueNetConfig {
    pub fn validate(&self, dim: usize) -> Result<()> {
        if self.classes == 0 || self.vocab == 0 || self.text_raw == 0 || self.video_raw == 0 {
            return Err(Error::Config(format!(
                "clue net sizes must be positive: {self:?}"
            )));
        }
        if self.downsample == 0
            || self.sound_channels.is_empty()
            || self.sound_channels.contains(&0)
        {
            return Err(Error::Config(
                "sound encoder needs k ≥ 1 and positive channels".into(),
            ));
        }
        if self.heads == 0 || dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "clue width {dim} is not divisible by {} heads",
                self.heads
            )));
        }
        Ok(())
    }

    /// Frequency rows left after the sound encoder's strided convolutions.
    pub fn sound_freq(&self, freq_bins: usize) -> usize {
        self.sound_channels
            .iter()
            .fold(freq_bins, |f, _| (f - 1) / SOUND_FREQ_STRIDE + 1)
    }
}

const SOUND_FREQ_STRIDE: usize = 4;
const SOUND_KERNEL_FREQ: usize = 5;

#[derive(Debug, Clone, Copy)]
struct SoundConv {
    k: ParamId,
    b: ParamId,
    geom: Conv2dGeom,
}

/// An encoded clue sequence (`L×D`) on a graph.
#[derive(Debug, Clone, Copy)]
pub struct EncodedClue {
    pub modality: Modality,
    pub seq: Var,
}

/// Output of the clue pipeline for one mixture.
#[derive(Debug, Clone)]
pub struct FusedClue {
    /// Clue aligned with the backbone frames, `T×D`.
    pub clue: Var,
    /// Per-head attention weights, `h×T_a×|U|`.
    pub weights: Var,
    pub segments: SegmentMap,
}

/// Stub sound/text/video/tag encoders, attention fusion and upsampling.
#[derive(Debug, Clone)]
pub struct ClueNet {
    pub config: ClueNetConfig,
    pub dim: usize,
    pub freq_bins: usize,
    sound: Vec<SoundConv>,
    sound_proj: ProjectionNet,
    text_table: ParamId,
    text_proj: ProjectionNet,
    video_proj: ProjectionNet,
    tag: Linear,
    pub attention: MultiHeadAttention,
}

impl ClueNet {
    pub fn new<S: Float>(
        store: &mut ParamStore<S>,
        config: &ClueNetConfig,
        dim: usize,
        freq_bins: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        config.validate(dim)?;
        let k = config.downsample;
        let mut sound = Vec::new();
        let mut c_in = 1;
        for (i, &c) in config.sound_channels.iter().enumerate() {
            let kw = if i == 0 { k } else { 1 };
            let shape = [c, c_in, SOUND_KERNEL_FREQ, kw];
            sound.push(SoundConv {
                k: store.uniform(
                    format!("clue.sound.conv{i}.k"),
                    &shape,
                    c_in * SOUND_KERNEL_FREQ * kw,
                    rng,
                )?,
                b: store.constant(format!("clue.sound.conv{i}.b"), &[c], 0.0)?,
                geom: Conv2dGeom::new((SOUND_FREQ_STRIDE, kw), (SOUND_KERNEL_FREQ / 2, 0)),
            });
            c_in = c;
        }
        let sound_raw = c_in * config.sound_freq(freq_bins);
        Ok(Self {
            sound,
            sound_proj: ProjectionNet::new(store, "clue.sound.proj", sound_raw, dim, rng)?,
            text_table: store.uniform(
                "clue.text.table",
                &[config.vocab, config.text_raw],
                1,
                rng,
            )?,
            text_proj: ProjectionNet::new(store, "clue.text.proj", config.text_raw, dim, rng)?,
            video_proj: ProjectionNet::new(store, "clue.video.proj", config.video_raw, dim, rng)?,
            tag: Linear::new(store, "clue.tag", config.classes, dim, rng)?,
            attention: MultiHeadAttention::new(store, "clue.attention", dim, config.heads, rng)?,
            config: config.clone(),
            dim,
            freq_bins,
        })
    }

    /// Parameters owned by the encoder of `m`.
    pub fn modality_params(&self, m: Modality) -> Vec<ParamId> {
        let proj = |p: &ProjectionNet| {
            let mut v = vec![p.gain, p.bias, p.linear.w];
            v.extend(p.linear.b);
            v
        };
        match m {
            Modality::Sound => {
                let mut v: Vec<_> = self.sound.iter().flat_map(|c| [c.k, c.b]).collect();
                v.extend(proj(&self.sound_proj));
                v
            }
            Modality::Text => {
                let mut v = vec![self.text_table];
                v.extend(proj(&self.text_proj));
                v
            }
            Modality::Video => proj(&self.video_proj),
            Modality::Tag => {
                let mut v = vec![self.tag.w];
                v.extend(self.tag.b);
                v
            }
        }
    }

    /// Number of sound-embedding frames for `frames` spectrogram frames.
    pub fn sound_frames(&self, frames: usize) -> usize {
        frames.div_ceil(self.config.downsample)
    }

    /// Frame-wise sound embeddings `T_a×D` from the mixture spectrum parts
    /// (`T×F`). The log-magnitude input is treated as data.
    pub fn encode_sound<S: Float>(&self, g: &Graph<S>, re: Var, im: Var) -> Result<Var> {
        let shape = g.shape(re);
        if shape.len() != 2 || g.shape(im) != shape || shape[1] != self.freq_bins {
            return Err(Error::dim("encode_sound", &shape, &[self.freq_bins]));
        }
        let (t, f) = (shape[0], shape[1]);
        let k = self.config.downsample;
        if t < k {
            return Err(Error::Input(format!(
                "spectrum of {t} frames is shorter than the downsample factor {k}"
            )));
        }
        let ta = self.sound_frames(t);
        let tp = ta * k;
        let mut mag = vec![S::zero(); f * tp];
        {
            let (r, i) = (g.value(re), g.value(im));
            for ti in 0..t {
                for fi in 0..f {
                    let j = ti * f + fi;
                    mag[fi * tp + ti] = (r[j] * r[j] + i[j] * i[j]).sqrt().ln_1p();
                }
            }
        }
        let mut x = g.constant(vec![1, f, tp], mag)?;
        for c in &self.sound {
            x = g.relu(g.conv2d(x, g.param(c.k), Some(g.param(c.b)), c.geom)?)?;
        }
        let s = g.shape(x);
        let flat = g.transpose(g.reshape(x, vec![s[0] * s[1], s[2]])?)?;
        self.sound_proj.forward(g, flat)
    }

    pub fn encode_text<S: Float>(&self, g: &Graph<S>, text: &TextClue) -> Result<Var> {
        let raw = match text {
            TextClue::Tokens(tokens) => {
                if tokens.is_empty() {
                    return Err(Error::Input("text clue has no tokens".into()));
                }
                if let Some(&bad) = tokens.iter().find(|&&t| t >= self.config.vocab) {
                    return Err(Error::Input(format!(
                        "token id {bad} outside the {}-word vocabulary",
                        self.config.vocab
                    )));
                }
                g.index_rows(g.param(self.text_table), tokens)?
            }
            TextClue::Features(feat) => self.raw_constant(g, feat, self.config.text_raw, "text")?,
        };
        self.text_proj.forward(g, raw)
    }

    pub fn encode_video<S: Float>(&self, g: &Graph<S>, frames: &Tensor<f64>) -> Result<Var> {
        let raw = self.raw_constant(g, frames, self.config.video_raw, "video")?;
        self.video_proj.forward(g, raw)
    }

    pub fn encode_tag<S: Float>(&self, g: &Graph<S>, onehot: &[f64]) -> Result<Var> {
        if onehot.len() != self.config.classes {
            return Err(Error::dim(
                "encode_tag",
                &[onehot.len()],
                &[self.config.classes],
            ));
        }
        one_hot_index(onehot)?;
        let x = g.constant(
            vec![1, onehot.len()],
            onehot.iter().map(|&v| S::from_f64(v)).collect(),
        )?;
        self.tag.forward(g, x)
    }

    fn raw_constant<S: Float>(
        &self,
        g: &Graph<S>,
        t: &Tensor<f64>,
        width: usize,
        what: &str,
    ) -> Result<Var> {
        let s = t.shape();
        if s.len() != 2 || s[1] != width {
            return Err(Error::Input(format!(
                "{what} features must be L×{width}, got {s:?}"
            )));
        }
        g.constant(
            s.to_vec(),
            t.data().iter().map(|&v| S::from_f64(v)).collect(),
        )
    }

    /// Encodes every present clue, in the fixed modality order.
    pub fn encode_clues<S: Float>(
        &self,
        g: &Graph<S>,
        clues: &ClueSet,
    ) -> Result<Vec<EncodedClue>> {
        if clues.is_empty() {
            return Err(Error::Contract("clue set is empty".into()));
        }
        let mut out = Vec::new();
        if let Some(text) = &clues.text {
            out.push(EncodedClue {
                modality: Modality::Text,
                seq: self.encode_text(g, text)?,
            });
        }
        if let Some(video) = &clues.video {
            out.push(EncodedClue {
                modality: Modality::Video,
                seq: self.encode_video(g, video)?,
            });
        }
        if let Some(tag) = clues.tag {
            out.push(EncodedClue {
                modality: Modality::Tag,
                seq: self.encode_tag(g, &one_hot(tag, self.config.classes)?)?,
            });
        }
        Ok(out)
    }

    /// Stacks encoded clues along length in the order text, video, tag.
    pub fn concat_clues<S: Float>(
        g: &Graph<S>,
        encoded: &[EncodedClue],
    ) -> Result<(Var, SegmentMap)> {
        if encoded.is_empty() {
            return Err(Error::Contract("no clue modality present".into()));
        }
        let mut sorted = encoded.to_vec();
        sorted.sort_by_key(|e| e.modality);
        if sorted.windows(2).any(|w| w[0].modality == w[1].modality) {
            return Err(Error::Contract("a clue modality appears twice".into()));
        }
        let mut segments = Vec::with_capacity(sorted.len());
        let mut at = 0;
        for e in &sorted {
            let len = g.shape(e.seq)[0];
            segments.push((e.modality, at..at + len));
            at += len;
        }
        let parts: Vec<Var> = sorted.iter().map(|e| e.seq).collect();
        let u = if parts.len() == 1 {
            parts[0]
        } else {
            g.concat(&parts, 0)?
        };
        Ok((u, SegmentMap { segments }))
    }

    /// Attends from the sound embeddings `q` over the concatenated clue `u`.
    pub fn fuse<S: Float>(
        &self,
        g: &Graph<S>,
        q: Var,
        u: Var,
        key_mask: Option<&[bool]>,
    ) -> Result<MhaOutput> {
        self.attention.forward(g, q, u, u, key_mask)
    }

    /// Repeats each of the `T_a` rows `k` times and trims or extends with
    /// the last row to `frames` rows.
    pub fn upsample<S: Float>(&self, g: &Graph<S>, c_u: Var, frames: usize) -> Result<Var> {
        let ta = g.shape(c_u)[0];
        g.index_rows(c_u, &upsample_indices(ta, self.config.downsample, frames)?)
    }

    /// The whole clue pipeline: sound embedding, clue encoding,
    /// concatenation, fusion and upsampling to the spectrum's frame count.
    pub fn forward<S: Float>(
        &self,
        g: &Graph<S>,
        re: Var,
        im: Var,
        clues: &ClueSet,
    ) -> Result<FusedClue> {
        let frames = g.shape(re)[0];
        let q = self.encode_sound(g, re, im)?;
        let encoded = self.encode_clues(g, clues)?;
        let (u, segments) = Self::concat_clues(g, &encoded)?;
        let fused = self.fuse(g, q, u, None)?;
        Ok(FusedClue {
            clue: self.upsample(g, fused.out, frames)?,
            weights: fused.weights,
            segments,
        })
    }
}

/// Row indices for nearest-neighbour upsampling of `ta` rows by `k` to
/// `frames` rows.
pub fn upsample_indices(ta: usize, k: usize, frames: usize) -> Result<Vec<usize>> {
    if ta == 0 || frames < ta {
        return Err(Error::Contract(format!(
            "cannot upsample {ta} clue frames to {frames} frames"
        )));
    }
    Ok((0..frames).map(|t| (t / k.max(1)).min(ta - 1)).collect())
}
