use std::f64::consts::PI;
use std::rc::Rc;

use serde::{Deserialize, Serialize};

use super::AudioClip;
use crate::error::{Error, Result};
use crate::tensor::{Float, Tape, Tensor, Var};

/// Frame parameters. The analysis/synthesis window is a periodic Hann of
/// `win_len` samples, centred inside each `fft_size` frame. Signals are
/// reflect-padded by `win_len / 2` on both sides.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StftConfig {
    pub fft_size: usize,
    pub win_len: usize,
    pub hop: usize,
}

impl Default for StftConfig {
    fn default() -> Self {
        Self {
            fft_size: 512,
            win_len: 400,
            hop: 100,
        }
    }
}

impl StftConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hop == 0 || self.hop > self.win_len || self.win_len > self.fft_size {
            return Err(Error::Config(format!(
                "stft requires 0 < hop ≤ win_len ≤ fft_size, got {self:?}"
            )));
        }
        if self.fft_size % 2 != 0 {
            return Err(Error::Config(format!(
                "fft_size {} must be even",
                self.fft_size
            )));
        }
        Ok(())
    }

    pub fn bins(&self) -> usize {
        self.fft_size / 2 + 1
    }

    pub fn pad(&self) -> usize {
        self.win_len / 2
    }

    /// Number of frames produced for a signal of `len` samples.
    pub fn frames(&self, len: usize) -> usize {
        1 + (len + 2 * self.pad() - self.win_len) / self.hop
    }

    pub fn window(&self) -> Vec<f64> {
        let n = self.win_len as f64;
        (0..self.win_len)
            .map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / n).cos())
            .collect()
    }

    fn check_len(&self, len: usize) -> Result<()> {
        if len < self.win_len {
            return Err(Error::Input(format!(
                "signal of {len} samples is shorter than the {}-sample window",
                self.win_len
            )));
        }
        Ok(())
    }
}

/// Complex spectrogram with `frames × bins` real and imaginary parts.
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexSpec {
    pub real: Tensor<f64>,
    pub imag: Tensor<f64>,
    pub config: StftConfig,
}

impl ComplexSpec {
    pub fn new(real: Tensor<f64>, imag: Tensor<f64>, config: StftConfig) -> Result<Self> {
        if real.shape() != imag.shape() || real.shape().len() != 2 {
            return Err(Error::dim("complex spec", real.shape(), imag.shape()));
        }
        if real.shape()[1] != config.bins() {
            return Err(Error::dim(
                "complex spec bins",
                real.shape(),
                &[config.bins()],
            ));
        }
        Ok(Self { real, imag, config })
    }

    pub fn zeros(frames: usize, config: StftConfig) -> Self {
        let shape = vec![frames, config.bins()];
        Self {
            real: Tensor::zeros(shape.clone()),
            imag: Tensor::zeros(shape),
            config,
        }
    }

    pub fn frames(&self) -> usize {
        self.real.shape()[0]
    }

    pub fn bins(&self) -> usize {
        self.real.shape()[1]
    }

    /// `|X|` per frame and bin.
    pub fn magnitude(&self) -> Vec<f64> {
        self.real
            .data()
            .iter()
            .zip(self.imag.data())
            .map(|(r, i)| r.hypot(*i))
            .collect()
    }
}

/// Precomputed transform matrices for one [`StftConfig`], with the window
/// folded in. The forward and inverse transforms are recorded on a tape so
/// gradients flow through them.
#[derive(Debug, Clone)]
pub struct StftPlan<S: Float> {
    config: StftConfig,
    window_sq: Vec<f64>,
    /// `win_len × bins`, analysis.
    fwd_re: Tensor<S>,
    fwd_im: Tensor<S>,
    /// `bins × win_len`, synthesis.
    inv_re: Tensor<S>,
    inv_im: Tensor<S>,
}

impl<S: Float> StftPlan<S> {
    pub fn new(config: StftConfig) -> Result<Self> {
        config.validate()?;
        let (n, w, f) = (config.fft_size, config.win_len, config.bins());
        let off = (n - w) / 2;
        let win = config.window();
        let mut fwd_re = vec![S::zero(); w * f];
        let mut fwd_im = vec![S::zero(); w * f];
        let mut inv_re = vec![S::zero(); f * w];
        let mut inv_im = vec![S::zero(); f * w];
        for s in 0..w {
            for k in 0..f {
                // Reduce the phase index modulo n to keep the argument small.
                let phase = 2.0 * PI * ((k * (s + off)) % n) as f64 / n as f64;
                let (sin, cos) = phase.sin_cos();
                fwd_re[s * f + k] = S::from_f64(win[s] * cos);
                fwd_im[s * f + k] = S::from_f64(-win[s] * sin);
                let weight = if k == 0 || k == n / 2 { 1.0 } else { 2.0 } / n as f64;
                inv_re[k * w + s] = S::from_f64(weight * cos * win[s]);
                inv_im[k * w + s] = S::from_f64(-weight * sin * win[s]);
            }
        }
        Ok(Self {
            config,
            window_sq: win.iter().map(|v| v * v).collect(),
            fwd_re: Tensor::new(vec![w, f], fwd_re)?,
            fwd_im: Tensor::new(vec![w, f], fwd_im)?,
            inv_re: Tensor::new(vec![f, w], inv_re)?,
            inv_im: Tensor::new(vec![f, w], inv_im)?,
        })
    }

    pub fn config(&self) -> &StftConfig {
        &self.config
    }

    /// Forward transform of a `[len]` signal into `(real, imag)`, each
    /// `frames × bins`.
    pub fn forward(&self, tape: &Tape<S>, x: Var) -> Result<(Var, Var)> {
        let shape = tape.shape(x);
        if shape.len() != 1 {
            return Err(Error::dim("stft", &shape, &[1]));
        }
        let len = shape[0];
        let cfg = &self.config;
        cfg.check_len(len)?;
        let (pad, w, hop) = (cfg.pad() as isize, cfg.win_len, cfg.hop);
        let frames = cfg.frames(len);
        let last = len as isize - 1;
        let idx: Rc<[usize]> = (0..frames)
            .flat_map(|t| (0..w).map(move |s| (t * hop + s) as isize - pad))
            .map(|i| {
                let r = if i < 0 {
                    -i
                } else if i > last {
                    2 * last - i
                } else {
                    i
                };
                r as usize
            })
            .collect();
        let framed = tape.gather(x, idx, vec![frames, w])?;
        let re = tape.matmul(framed, tape.leaf(&self.fwd_re))?;
        let im = tape.matmul(framed, tape.leaf(&self.fwd_im))?;
        Ok((re, im))
    }

    /// Inverse transform by windowed overlap-add with squared-window
    /// normalisation, trimmed or zero-padded to `out_len` samples.
    pub fn inverse(&self, tape: &Tape<S>, re: Var, im: Var, out_len: usize) -> Result<Var> {
        let cfg = &self.config;
        let shape = tape.shape(re);
        if shape.len() != 2 || shape[1] != cfg.bins() || tape.shape(im) != shape {
            return Err(Error::dim("istft", &shape, &tape.shape(im)));
        }
        if out_len == 0 {
            return Err(Error::Input("istft output length must be positive".into()));
        }
        let frames = shape[0];
        let (w, hop, pad) = (cfg.win_len, cfg.hop, cfg.pad());
        let a = tape.matmul(re, tape.leaf(&self.inv_re))?;
        let b = tape.matmul(im, tape.leaf(&self.inv_im))?;
        let segs = tape.add(a, b)?;

        let span = (frames - 1) * hop + w;
        let mut norm = vec![0.0; span];
        for t in 0..frames {
            for s in 0..w {
                norm[t * hop + s] += self.window_sq[s];
            }
        }
        let idx: Rc<[usize]> = (0..frames * w).map(|i| (i / w) * hop + i % w).collect();
        let ola = tape.scatter_add(segs, idx, vec![span])?;
        let avail = span.saturating_sub(pad).min(out_len);
        if avail == 0 {
            return Err(Error::Config(format!(
                "{frames} frames cannot cover any output sample"
            )));
        }
        let mut scale = Vec::with_capacity(avail);
        for (i, &d) in norm[pad..pad + avail].iter().enumerate() {
            if d < 1e-10 {
                return Err(Error::Config(format!(
                    "overlap-add normaliser {d:e} at sample {i} (window/hop combination invalid)"
                )));
            }
            scale.push(S::from_f64(1.0 / d));
        }
        let body = tape.slice(ola, 0, pad, avail)?;
        let body = tape.mul(body, tape.constant(vec![avail], scale)?)?;
        if avail == out_len {
            Ok(body)
        } else {
            let zeros = tape.constant(vec![out_len - avail], vec![S::zero(); out_len - avail])?;
            tape.concat(&[body, zeros], 0)
        }
    }
}

/// Forward STFT of a clip (no gradient tracking).
pub fn stft(x: &AudioClip, config: &StftConfig) -> Result<ComplexSpec> {
    let plan = StftPlan::<f64>::new(*config)?;
    stft_with(&plan, x)
}

pub(crate) fn stft_with(plan: &StftPlan<f64>, x: &AudioClip) -> Result<ComplexSpec> {
    plan.config.check_len(x.len())?;
    let tape = Tape::new();
    let v = tape.constant(vec![x.len()], x.samples.clone())?;
    let (re, im) = plan.forward(&tape, v)?;
    ComplexSpec::new(tape.to_tensor(re), tape.to_tensor(im), plan.config)
}

/// Inverse STFT to a clip of `out_len` samples at `sample_rate`.
pub fn istft(spec: &ComplexSpec, out_len: usize, sample_rate: u32) -> Result<AudioClip> {
    let plan = StftPlan::<f64>::new(spec.config)?;
    let tape = Tape::new();
    let re = tape.leaf(&spec.real);
    let im = tape.leaf(&spec.imag);
    let y = plan.inverse(&tape, re, im, out_len)?;
    let samples = tape.value(y).to_vec();
    AudioClip::new(samples, sample_rate)
}
