use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::signal::{AudioClip, DEFAULT_SAMPLE_RATE};

pub const PEAK: f64 = 0.5;
pub const CLIP_SECS: f64 = 2.0;

/// Parametric generator for one class. Frequencies are in Hz.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum SynthSpec {
    /// Sum of sinusoids at `base·p` for each partial multiplier `p`.
    ToneComplex { base: f64, partials: Vec<f64> },
    /// Linear frequency sweep over the whole clip.
    Chirp { f0: f64, f1: f64 },
    /// Gaussian noise band-limited to `[lo, hi]`.
    NoiseBand { lo: f64, hi: f64 },
    /// Band noise with a sinusoidal envelope at `rate` Hz.
    AmNoise { lo: f64, hi: f64, rate: f64 },
}

impl SynthSpec {
    /// The frequency interval holding the generator's energy.
    pub fn band(&self) -> (f64, f64) {
        match self {
            SynthSpec::ToneComplex { base, partials } => {
                let lo = partials.iter().cloned().fold(f64::INFINITY, f64::min);
                let hi = partials.iter().cloned().fold(0.0, f64::max);
                (base * lo, base * hi)
            }
            SynthSpec::Chirp { f0, f1 } => (f0.min(*f1), f0.max(*f1)),
            SynthSpec::NoiseBand { lo, hi } | SynthSpec::AmNoise { lo, hi, .. } => (*lo, *hi),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SoundClass {
    pub id: usize,
    pub name: String,
    pub synth: SynthSpec,
}

fn tone(base: f64, partials: &[f64]) -> SynthSpec {
    SynthSpec::ToneComplex {
        base,
        partials: partials.to_vec(),
    }
}

/// The fixed class table. Names double as the class nouns of the text
/// vocabulary; bands do not overlap.
fn table() -> Vec<(&'static str, SynthSpec)> {
    use SynthSpec::*;
    vec![
        ("horn", tone(300.0, &[1.0, 2.0, 3.0])),
        (
            "siren",
            Chirp {
                f0: 1100.0,
                f1: 1700.0,
            },
        ),
        (
            "hiss",
            NoiseBand {
                lo: 5500.0,
                hi: 7400.0,
            },
        ),
        (
            "motor",
            AmNoise {
                lo: 2200.0,
                hi: 3200.0,
                rate: 9.0,
            },
        ),
        ("whistle", tone(3500.0, &[1.0])),
        ("buzzer", tone(110.0, &[1.0, 2.0])),
        (
            "bird",
            Chirp {
                f0: 4600.0,
                f1: 4000.0,
            },
        ),
        ("rumble", NoiseBand { lo: 30.0, hi: 90.0 }),
        (
            "rain",
            AmNoise {
                lo: 4800.0,
                hi: 5300.0,
                rate: 3.0,
            },
        ),
        ("beep", tone(950.0, &[1.0])),
        ("hum", tone(2000.0, &[1.0])),
        (
            "alarm",
            AmNoise {
                lo: 3300.0,
                hi: 3450.0,
                rate: 4.0,
            },
        ),
        (
            "sweep",
            Chirp {
                f0: 7600.0,
                f1: 7900.0,
            },
        ),
        ("flute", tone(1850.0, &[1.0])),
        (
            "wind",
            NoiseBand {
                lo: 3700.0,
                hi: 3950.0,
            },
        ),
        (
            "clock",
            AmNoise {
                lo: 5350.0,
                hi: 5480.0,
                rate: 2.0,
            },
        ),
    ]
}

pub const MAX_CLASSES: usize = 16;

/// The first `n` classes of the built-in table.
pub fn catalog(n: usize) -> Result<Vec<SoundClass>> {
    if !(2..=MAX_CLASSES).contains(&n) {
        return Err(Error::Input(format!(
            "class count must be in 2..={MAX_CLASSES}, got {n}"
        )));
    }
    Ok(table()
        .into_iter()
        .take(n)
        .enumerate()
        .map(|(id, (name, synth))| SoundClass {
            id,
            name: name.to_string(),
            synth,
        })
        .collect())
}

/// Looks up a class by id in the full table.
pub fn class(id: usize) -> Result<SoundClass> {
    if id >= MAX_CLASSES {
        return Err(Error::Input(format!(
            "class id {id} out of range 0..{MAX_CLASSES}"
        )));
    }
    Ok(catalog(MAX_CLASSES)?.swap_remove(id))
}

pub fn clip_len() -> usize {
    (CLIP_SECS * DEFAULT_SAMPLE_RATE as f64) as usize
}

/// Band-limited Gaussian noise by shaping a random spectrum.
fn band_noise(rng: &mut ChaCha8Rng, n: usize, sr: f64, lo: f64, hi: f64) -> Vec<f64> {
    let mut spec = vec![Complex::new(0.0, 0.0); n];
    for k in 1..n.div_ceil(2) {
        let f = k as f64 * sr / n as f64;
        if f >= lo && f <= hi {
            let re: f64 = rng.sample(StandardNormal);
            let im: f64 = rng.sample(StandardNormal);
            spec[k] = Complex::new(re, im);
            spec[n - k] = Complex::new(re, -im);
        }
    }
    FftPlanner::new().plan_fft_inverse(n).process(&mut spec);
    spec.into_iter().map(|c| c.re).collect()
}

/// Synthesises two seconds of `class` at 16 kHz. Phases, partial
/// amplitudes, envelope and noise realisations depend on `seed`; the
/// result is peak-normalised to 0.5.
pub fn gen_source(class: &SoundClass, seed: u64) -> Result<AudioClip> {
    let sr = DEFAULT_SAMPLE_RATE as f64;
    let n = clip_len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(class.id as u64);
    let t = |i: usize| i as f64 / sr;
    let mut x: Vec<f64> = match &class.synth {
        SynthSpec::ToneComplex { base, partials } => {
            let parts: Vec<(f64, f64, f64)> = partials
                .iter()
                .map(|p| {
                    (
                        base * p,
                        rng.random_range(0.6..1.0),
                        rng.random_range(0.0..2.0 * PI),
                    )
                })
                .collect();
            (0..n)
                .map(|i| {
                    parts
                        .iter()
                        .map(|(f, a, ph)| a * (2.0 * PI * f * t(i) + ph).sin())
                        .sum()
                })
                .collect()
        }
        SynthSpec::Chirp { f0, f1 } => {
            let ph: f64 = rng.random_range(0.0..2.0 * PI);
            let k = (f1 - f0) / CLIP_SECS;
            (0..n)
                .map(|i| (2.0 * PI * (f0 * t(i) + 0.5 * k * t(i) * t(i)) + ph).sin())
                .collect()
        }
        SynthSpec::NoiseBand { lo, hi } => band_noise(&mut rng, n, sr, *lo, *hi),
        SynthSpec::AmNoise { lo, hi, rate } => {
            let ph: f64 = rng.random_range(0.0..2.0 * PI);
            let noise = band_noise(&mut rng, n, sr, *lo, *hi);
            noise
                .into_iter()
                .enumerate()
                .map(|(i, v)| v * (1.0 + 0.8 * (2.0 * PI * rate * t(i) + ph).sin()))
                .collect()
        }
    };
    // Slow loudness drift so two draws of a class are not just phase shifts.
    let (drift, phase): (f64, f64) = (rng.random_range(0.3..1.5), rng.random_range(0.0..2.0 * PI));
    for (i, v) in x.iter_mut().enumerate() {
        *v *= 1.0 - 0.3 * (0.5 + 0.5 * (2.0 * PI * drift * t(i) + phase).sin());
    }
    let peak = x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if peak == 0.0 {
        return Err(Error::Contract(format!(
            "class {} produced a silent clip",
            class.name
        )));
    }
    x.iter_mut().for_each(|v| *v *= PEAK / peak);
    AudioClip::new(x, DEFAULT_SAMPLE_RATE)
}
