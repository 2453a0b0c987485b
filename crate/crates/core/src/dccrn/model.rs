use rand_chacha::ChaCha8Rng;

use super::{DccrnConfig, FREQ_STRIDE};
use crate::clue::SegmentMap;
use crate::clue::{one_hot, ClueNet, ClueSet, FusedClue};
use crate::error::{Error, Result};
use crate::nn::{
    complex_lstm_enhance, ComplexConv2d, ComplexFeature, Graph, Linear, LstmProjection, ParamStore,
    Prelu,
};
use crate::signal::{AudioClip, StftPlan};
use crate::tensor::{Conv2dGeom, Float, Tensor, Var};

#[derive(Debug, Clone)]
struct EncoderLayer {
    conv: ComplexConv2d,
    act: (Prelu, Prelu),
}

#[derive(Debug, Clone)]
struct DecoderLayer {
    conv: ComplexConv2d,
    act: Option<(Prelu, Prelu)>,
}

/// How the clue reaching the bottleneck is produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClueMode {
    /// The tag embedding tiled over all frames.
    Tag,
    /// Attention fusion of every present clue.
    Fused,
}

/// Encoder output: bottleneck features `T×D` and per-layer skip features.
#[derive(Debug, Clone)]
pub struct Encoded {
    pub features: ComplexFeature,
    pub skips: Vec<ComplexFeature>,
}

/// Everything recorded by one forward pass.
#[derive(Debug, Clone)]
pub struct Forward {
    /// Mixture spectrum parts, `T×F`.
    pub mix: ComplexFeature,
    /// Estimated target spectrum parts, `T×F`.
    pub estimate: ComplexFeature,
    /// Estimated waveform, same length as the mixture.
    pub wave: Var,
    pub fused: Option<FusedClue>,
}

/// Parameter layout of the extraction network. Values live in a
/// [`ParamStore`]; the model only holds ids.
#[derive(Debug, Clone)]
pub struct Model {
    pub config: DccrnConfig,
    encoder: Vec<EncoderLayer>,
    pub lstm_r: LstmProjection,
    pub lstm_i: LstmProjection,
    decoder: Vec<DecoderLayer>,
    tag: Linear,
    pub clue: Option<ClueNet>,
}

impl Model {
    /// Registers the backbone and the tag path in `store`.
    pub fn new<S: Float>(
        config: &DccrnConfig,
        store: &mut ParamStore<S>,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        config.validate()?;
        let [kf, kt] = config.kernel;
        let enc_geom = Conv2dGeom::new((FREQ_STRIDE, 1), (kf / 2, kt - 1));
        let dec_geom = Conv2dGeom::new((FREQ_STRIDE, 1), (kf / 2, 0));
        let prelus = |store: &mut ParamStore<S>, name: &str| -> Result<(Prelu, Prelu)> {
            Ok((
                Prelu::new(store, &format!("{name}.act_r"))?,
                Prelu::new(store, &format!("{name}.act_i"))?,
            ))
        };

        let mut encoder = Vec::new();
        let mut c_in = 1;
        for (i, &c) in config.channels.iter().enumerate() {
            let name = format!("enc{i}");
            let conv =
                ComplexConv2d::new(store, &name, c_in, c, (kf, kt), enc_geom, false, true, rng)?;
            encoder.push(EncoderLayer {
                conv,
                act: prelus(store, &name)?,
            });
            c_in = c;
        }

        let dim = config.dim();
        let (h, l) = (config.lstm_hidden, config.lstm_layers);
        let lstm_r = LstmProjection::new(store, "lstm_r", dim, h, l, rng)?;
        let lstm_i = LstmProjection::new(store, "lstm_i", dim, h, l, rng)?;

        let mut decoder = Vec::new();
        for i in (0..config.channels.len()).rev() {
            let name = format!("dec{i}");
            let c_out = if i == 0 { 1 } else { config.channels[i - 1] };
            // A bias on the output spectrum is invisible after the inverse
            // transform (its real part lands outside the window), so the
            // last layer has none.
            let conv = ComplexConv2d::new(
                store,
                &name,
                2 * config.channels[i],
                c_out,
                (kf, kt),
                dec_geom,
                true,
                i > 0,
                rng,
            )?;
            let act = if i == 0 {
                None
            } else {
                Some(prelus(store, &name)?)
            };
            decoder.push(DecoderLayer { conv, act });
        }
        let tag = Linear::new(store, "tag", config.clue.classes, dim, rng)?;
        Ok(Self {
            config: config.clone(),
            encoder,
            lstm_r,
            lstm_i,
            decoder,
            tag,
            clue: None,
        })
    }

    /// Registers a freshly initialised clue network.
    pub fn add_clue_net<S: Float>(
        &mut self,
        store: &mut ParamStore<S>,
        rng: &mut ChaCha8Rng,
    ) -> Result<()> {
        if self.clue.is_some() {
            return Err(Error::Contract("model already has a clue network".into()));
        }
        let net = ClueNet::new(
            store,
            &self.config.clue,
            self.config.dim(),
            self.config.stft.bins(),
            rng,
        )?;
        self.clue = Some(net);
        Ok(())
    }

    /// Frame count of the mixture spectrum for `len` samples.
    pub fn frames(&self, len: usize) -> usize {
        self.config.stft.frames(len)
    }

    /// Runs the complex encoder over a `T×F` spectrum.
    pub fn encode<S: Float>(&self, g: &Graph<S>, spec: ComplexFeature) -> Result<Encoded> {
        let shape = spec.shape(g.tape());
        let bins = self.config.stft.bins();
        if shape.len() != 2 || shape[1] != bins {
            return Err(Error::dim("encode", &shape, &[bins]));
        }
        let t = shape[0];
        let mut x = spec.map(g.tape(), |p| g.reshape(g.transpose(p)?, vec![1, bins, t]))?;
        let mut skips = Vec::with_capacity(self.encoder.len());
        for layer in &self.encoder {
            let y = layer.conv.forward(g, x)?;
            // Causal in time: keep the outputs aligned with frames 0..T.
            let y = y.map(g.tape(), |p| g.slice(p, 2, 0, t))?;
            x = ComplexFeature::new(
                g.tape(),
                layer.act.0.forward(g, y.real)?,
                layer.act.1.forward(g, y.imag)?,
            )?;
            skips.push(x);
        }
        let s = x.shape(g.tape());
        let features = x.map(g.tape(), |p| {
            g.transpose(g.reshape(p, vec![s[0] * s[1], t])?)
        })?;
        Ok(Encoded { features, skips })
    }

    /// The clue-conditioned complex LSTM stage on `T×D` features.
    pub fn enhance<S: Float>(
        &self,
        g: &Graph<S>,
        y: ComplexFeature,
        clue: Var,
    ) -> Result<ComplexFeature> {
        complex_lstm_enhance(g, y, clue, &self.lstm_r, &self.lstm_i)
    }

    /// Mirrors the encoder back to a `T×F` spectrum estimate.
    pub fn decode<S: Float>(
        &self,
        g: &Graph<S>,
        f_out: ComplexFeature,
        skips: &[ComplexFeature],
    ) -> Result<ComplexFeature> {
        if skips.len() != self.encoder.len() {
            return Err(Error::Contract(format!(
                "decoder expects {} skip features, got {}",
                self.encoder.len(),
                skips.len()
            )));
        }
        let shape = f_out.shape(g.tape());
        let t = shape[0];
        let last = skips[skips.len() - 1].shape(g.tape());
        if shape.len() != 2 || last.len() != 3 || shape[1] != last[0] * last[1] || last[2] != t {
            return Err(Error::dim("decode", &shape, &last));
        }
        let mut x = f_out.map(g.tape(), |p| {
            g.reshape(g.transpose(p)?, vec![last[0], last[1], t])
        })?;
        for (layer, skip) in self.decoder.iter().zip(skips.iter().rev()) {
            let joined = ComplexFeature::new(
                g.tape(),
                g.concat(&[x.real, skip.real], 0)?,
                g.concat(&[x.imag, skip.imag], 0)?,
            )?;
            let y = layer.conv.forward(g, joined)?;
            let y = y.map(g.tape(), |p| g.slice(p, 2, 0, t))?;
            x = match &layer.act {
                Some((ar, ai)) => {
                    ComplexFeature::new(g.tape(), ar.forward(g, y.real)?, ai.forward(g, y.imag)?)?
                }
                None => y,
            };
        }
        let s = x.shape(g.tape());
        x.map(g.tape(), |p| g.transpose(g.reshape(p, vec![s[1], s[2]])?))
    }

    /// Baseline clue: the tag embedding repeated over `frames` frames.
    pub fn tag_clue<S: Float>(&self, g: &Graph<S>, class: usize, frames: usize) -> Result<Var> {
        let onehot = one_hot(class, self.config.clue.classes)?;
        let x = g.constant(
            vec![1, onehot.len()],
            onehot.into_iter().map(S::from_f64).collect(),
        )?;
        g.tile(self.tag.forward(g, x)?, frames)
    }

    /// Full extraction graph from a waveform `[len]` to the estimated
    /// waveform `[len]`.
    pub fn forward<S: Float>(
        &self,
        g: &Graph<S>,
        plan: &StftPlan<S>,
        mixture: Var,
        clues: &ClueSet,
        mode: ClueMode,
    ) -> Result<Forward> {
        if plan.config() != &self.config.stft {
            return Err(Error::Contract(
                "stft plan does not match the model configuration".into(),
            ));
        }
        let len = g.shape(mixture)[0];
        let (re, im) = plan.forward(g.tape(), mixture)?;
        let mix = ComplexFeature::new(g.tape(), re, im)?;
        let frames = g.shape(re)[0];
        let (clue, fused) = match mode {
            ClueMode::Tag => {
                let class = clues
                    .tag
                    .ok_or_else(|| Error::Contract("the tag clue path needs a tag".into()))?;
                (self.tag_clue(g, class, frames)?, None)
            }
            ClueMode::Fused => {
                let net = self.clue.as_ref().ok_or_else(|| {
                    Error::Contract("model has no clue network (stage-1 checkpoint)".into())
                })?;
                let fused = net.forward(g, re, im, clues)?;
                (fused.clue, Some(fused))
            }
        };
        let enc = self.encode(g, mix)?;
        let f_out = self.enhance(g, enc.features, clue)?;
        let estimate = self.decode(g, f_out, &enc.skips)?;
        let wave = plan.inverse(g.tape(), estimate.real, estimate.imag, len)?;
        Ok(Forward {
            mix,
            estimate,
            wave,
            fused,
        })
    }

    /// The default clue path: fused when a clue network exists.
    pub fn default_mode(&self) -> ClueMode {
        if self.clue.is_some() {
            ClueMode::Fused
        } else {
            ClueMode::Tag
        }
    }
}

/// Result of running the network on one mixture.
#[derive(Debug, Clone)]
pub struct Extraction {
    pub audio: AudioClip,
    /// Per-head attention weights `h×T_a×|U|` when the fused path ran.
    pub attention: Option<Tensor<f64>>,
    pub segments: Option<SegmentMap>,
}

impl Model {
    /// Extracts the target from `mixture` using parameters in `store`.
    pub fn extract<S: Float>(
        &self,
        store: &ParamStore<S>,
        plan: &StftPlan<S>,
        mixture: &AudioClip,
        clues: &ClueSet,
        mode: ClueMode,
    ) -> Result<Extraction> {
        let g = Graph::new(store);
        let x = g.constant(
            vec![mixture.len()],
            mixture.samples.iter().map(|&v| S::from_f64(v)).collect(),
        )?;
        let out = self.forward(&g, plan, x, clues, mode)?;
        let samples = g.value(out.wave).iter().map(|v| v.as_f64()).collect();
        let (attention, segments) = match out.fused {
            Some(f) => (Some(g.to_tensor(f.weights).cast()), Some(f.segments)),
            None => (None, None),
        };
        Ok(Extraction {
            audio: AudioClip::new(samples, mixture.sample_rate)?,
            attention,
            segments,
        })
    }
}
