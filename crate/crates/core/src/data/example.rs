use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::source::{class, gen_source};
use super::text::caption;
use crate::clue::{ClueSet, TextClue};
use crate::error::{Error, Result};
use crate::signal::{mix_at_snr, AudioClip};
use crate::tensor::Tensor;

/// Video clue frames per clip (2 s at 15 fps).
pub const VIDEO_FRAMES: usize = 30;
/// Width of a raw video feature row.
pub const VIDEO_DIM: usize = 32;

/// The class signature every video clue of `class` is built around: a
/// fixed random unit-scale direction.
pub fn video_template(class: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x51de0 ^ class as u64);
    (0..VIDEO_DIM).map(|_| rng.sample(StandardNormal)).collect()
}

/// `VIDEO_FRAMES×VIDEO_DIM` rows: the class template under a slow periodic
/// gain, plus seed-dependent jitter.
pub fn video_clue(class: usize, seed: u64) -> Tensor<f64> {
    let tpl = video_template(class);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let phase: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let cycles = 1.0 + (class % 3) as f64;
    let mut data = Vec::with_capacity(VIDEO_FRAMES * VIDEO_DIM);
    for t in 0..VIDEO_FRAMES {
        let gain = 1.0
            + 0.3 * (std::f64::consts::TAU * cycles * t as f64 / VIDEO_FRAMES as f64 + phase).sin();
        for &v in &tpl {
            let jitter: f64 = rng.sample(StandardNormal);
            data.push(gain * v + 0.1 * jitter);
        }
    }
    Tensor::new(vec![VIDEO_FRAMES, VIDEO_DIM], data).expect("fixed video shape")
}

/// Index of the template (among the first `classes`) closest in cosine to
/// the mean frame.
pub fn classify_video(frames: &Tensor<f64>, classes: usize) -> Result<usize> {
    let shape = frames.shape();
    if shape.len() != 2 || shape[1] != VIDEO_DIM || shape[0] == 0 {
        return Err(Error::dim(
            "classify_video",
            shape,
            &[VIDEO_FRAMES, VIDEO_DIM],
        ));
    }
    let mut mean = vec![0.0; VIDEO_DIM];
    for row in frames.data().chunks(VIDEO_DIM) {
        mean.iter_mut().zip(row).for_each(|(m, v)| *m += v);
    }
    let cos = |a: &[f64], b: &[f64]| {
        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        dot / (na * nb).max(1e-300)
    };
    (0..classes)
        .map(|c| (c, cos(&mean, &video_template(c))))
        .max_by(|a, b| a.1.total_cmp(&b.1))
        .map(|(c, _)| c)
        .ok_or_else(|| Error::Input("no classes to match against".into()))
}

/// Seeds for the target source, interferer source, caption and video clue.
struct Draws {
    target: u64,
    interferer: u64,
    text: u64,
    video: u64,
}

impl Draws {
    fn new(seed: u64) -> Self {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        Self {
            target: r.next_u64(),
            interferer: r.next_u64(),
            text: r.next_u64(),
            video: r.next_u64(),
        }
    }
}

/// The caption tokens and video seed [`make_example`] draws for `seed`.
pub fn clue_draws(target_class: usize, seed: u64) -> Result<(Vec<usize>, u64)> {
    let d = Draws::new(seed);
    let tokens = caption(target_class, &mut ChaCha8Rng::seed_from_u64(d.text))?;
    Ok((tokens, d.video))
}

#[derive(Debug, Clone, PartialEq)]
pub struct MixtureExample {
    pub mixture: AudioClip,
    pub target: AudioClip,
    /// The interferer after scaling to the requested SNR.
    pub interferer: AudioClip,
    pub target_class: usize,
    pub interferer_class: usize,
    pub snr_db: f64,
    pub clues: ClueSet,
    pub seed: u64,
    pub video_seed: u64,
}

/// Two-source mixture of `target_class` over `interferer_class` at
/// `snr_db`, with a tag, caption and video clue for the target.
pub fn make_example(
    target_class: usize,
    interferer_class: usize,
    snr_db: f64,
    seed: u64,
) -> Result<MixtureExample> {
    let (tokens, video_seed) = clue_draws(target_class, seed)?;
    build_example(
        target_class,
        interferer_class,
        snr_db,
        seed,
        tokens,
        video_seed,
    )
}

/// Like [`make_example`] but with the caption and video seed given, as
/// stored in a manifest record.
pub fn build_example(
    target_class: usize,
    interferer_class: usize,
    snr_db: f64,
    seed: u64,
    tokens: Vec<usize>,
    video_seed: u64,
) -> Result<MixtureExample> {
    if target_class == interferer_class {
        return Err(Error::Input(format!(
            "target and interferer are both class {target_class}"
        )));
    }
    let d = Draws::new(seed);
    let target = gen_source(&class(target_class)?, d.target)?;
    let raw = gen_source(&class(interferer_class)?, d.interferer)?;
    let (mixture, interferer) = mix_at_snr(&target, &raw, snr_db)?;
    Ok(MixtureExample {
        mixture,
        target,
        interferer,
        target_class,
        interferer_class,
        snr_db,
        clues: ClueSet {
            tag: Some(target_class),
            text: Some(TextClue::Tokens(tokens)),
            video: Some(video_clue(target_class, video_seed)),
        },
        seed,
        video_seed,
    })
}
