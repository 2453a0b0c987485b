use mctse::clue::TextClue;
use mctse::data::text::{decode_class, render, VOCAB_SIZE};
use mctse::data::*;
use mctse::signal::{read_wav, AudioClip};
use mctse::tensor::Tensor;
use mctse::Error;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

fn power_spectrum(x: &AudioClip) -> Vec<f64> {
    let mut buf: Vec<Complex<f64>> = x.samples.iter().map(|&s| Complex::new(s, 0.0)).collect();
    FftPlanner::new()
        .plan_fft_forward(buf.len())
        .process(&mut buf);
    buf[..buf.len() / 2 + 1]
        .iter()
        .map(|c| c.norm_sqr())
        .collect()
}

fn bin_hz(x: &AudioClip) -> f64 {
    x.sample_rate as f64 / x.len() as f64
}

#[test]
fn sources_are_deterministic_and_peak_normalised() {
    for c in catalog(MAX_CLASSES).unwrap() {
        let a = gen_source(&c, 7).unwrap();
        let b = gen_source(&c, 7).unwrap();
        let other = gen_source(&c, 8).unwrap();
        assert_eq!(a, b, "{}", c.name);
        assert_ne!(a.samples, other.samples, "{}", c.name);
        assert_eq!(a.len(), 32_000);
        let peak = a.samples.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!((peak - PEAK).abs() < 1e-12, "{}: peak {peak}", c.name);
        assert!(a.energy() > 0.0);
    }
}

#[test]
fn tone_complex_peaks_sit_on_partials() {
    let horn = class(0).unwrap();
    let SynthSpec::ToneComplex { base, partials } = &horn.synth else {
        panic!("class 0 is a tone complex");
    };
    for seed in 0..5 {
        let x = gen_source(&horn, seed).unwrap();
        let p = power_spectrum(&x);
        let hz = bin_hz(&x);
        // Local maxima, strongest first.
        let mut peaks: Vec<usize> = (1..p.len() - 1)
            .filter(|&k| p[k] > p[k - 1] && p[k] >= p[k + 1])
            .collect();
        peaks.sort_by(|a, b| p[*b].total_cmp(&p[*a]));
        let mut top: Vec<f64> = peaks[..partials.len()]
            .iter()
            .map(|&k| k as f64 * hz)
            .collect();
        top.sort_by(f64::total_cmp);
        for (f, m) in top.iter().zip(partials) {
            assert!(
                (f - base * m).abs() <= hz,
                "seed {seed}: peak {f} Hz vs partial {}",
                base * m
            );
        }
    }
}

#[test]
fn class_energy_stays_in_its_band() {
    let classes = catalog(MAX_CLASSES).unwrap();
    for c in &classes {
        let x = gen_source(c, 3).unwrap();
        let p = power_spectrum(&x);
        let hz = bin_hz(&x);
        let (lo, hi) = c.synth.band();
        let total: f64 = p.iter().sum();
        let inside: f64 = p
            .iter()
            .enumerate()
            .filter(|(k, _)| {
                let f = *k as f64 * hz;
                f >= lo - 20.0 && f <= hi + 20.0
            })
            .map(|(_, v)| v)
            .sum();
        assert!(
            inside / total > 0.95,
            "{}: {:.3} of energy in band",
            c.name,
            inside / total
        );
    }
    for (i, a) in classes.iter().enumerate() {
        for b in &classes[i + 1..] {
            let (a0, a1) = a.synth.band();
            let (b0, b1) = b.synth.band();
            assert!(a1 < b0 || b1 < a0, "{} and {} overlap", a.name, b.name);
        }
    }
}

#[test]
fn catalog_size_is_checked() {
    assert!(matches!(catalog(1), Err(Error::Input(_))));
    assert!(matches!(catalog(17), Err(Error::Input(_))));
    assert_eq!(catalog(4).unwrap().len(), 4);
}

#[test]
fn mixture_is_exactly_target_plus_interferer() {
    for seed in 0..5 {
        let ex = make_example(1, 3, -1.5 + seed as f64 * 0.7, seed).unwrap();
        for ((m, t), n) in ex
            .mixture
            .samples
            .iter()
            .zip(&ex.target.samples)
            .zip(&ex.interferer.samples)
        {
            assert_eq!(*m, t + n);
        }
    }
}

#[test]
fn zero_db_mixture_has_equal_energies() {
    let ex = make_example(0, 2, 0.0, 11).unwrap();
    let ratio = ex.target.energy() / ex.interferer.energy();
    assert!((ratio - 1.0).abs() < 1e-12, "{ratio}");
}

#[test]
fn generated_clues_agree_with_the_target_class() {
    for seed in 0..40u64 {
        let target = (seed % MAX_CLASSES as u64) as usize;
        let interferer = (target + 1 + (seed as usize % 3)) % MAX_CLASSES;
        let ex = make_example(target, interferer, 1.0, seed).unwrap();
        assert_eq!(ex.clues.tag, Some(target));
        let Some(TextClue::Tokens(tokens)) = &ex.clues.text else {
            panic!("token caption expected");
        };
        assert!((3..=9).contains(&tokens.len()));
        assert_eq!(
            decode_class(tokens).unwrap(),
            target,
            "{}",
            render(tokens).unwrap()
        );
        let video = ex.clues.video.as_ref().unwrap();
        assert_eq!(video.shape(), &[VIDEO_FRAMES, VIDEO_DIM]);
        assert_eq!(classify_video(video, MAX_CLASSES).unwrap(), target);
    }
}

#[test]
fn class_collision_is_rejected() {
    assert!(matches!(make_example(2, 2, 0.0, 1), Err(Error::Input(_))));
}

#[test]
fn text_corruption_replaces_a_third() {
    let diff = |a: &[usize], b: &[usize]| a.iter().zip(b).filter(|(x, y)| x != y).count();
    let nine: Vec<usize> = (0..9).collect();
    assert_eq!(diff(&nine, &corrupt_text(&nine, 1).unwrap()), 3);
    assert_eq!(diff(&[4, 5, 6], &corrupt_text(&[4, 5, 6], 1).unwrap()), 1);
    for n in 3..=20 {
        for seed in 0..20 {
            let tokens: Vec<usize> = (0..n)
                .map(|i| (i * 7 + seed as usize) % VOCAB_SIZE)
                .collect();
            let out = corrupt_text(&tokens, seed).unwrap();
            assert_eq!(out.len(), n);
            assert_eq!(diff(&tokens, &out), n / 3, "n {n} seed {seed}");
            assert!(out.iter().all(|&t| t < VOCAB_SIZE));
            assert_eq!(out, corrupt_text(&tokens, seed).unwrap());
        }
    }
}

#[test]
fn text_corruption_reaches_every_position() {
    let tokens = vec![0; 6];
    let mut hits = [0usize; 6];
    for seed in 0..300 {
        for (i, t) in corrupt_text(&tokens, seed).unwrap().iter().enumerate() {
            hits[i] += (*t != 0) as usize;
        }
    }
    // 600 replacements over 6 slots: 100 expected per slot.
    assert!(hits.iter().all(|&h| (60..=140).contains(&h)), "{hits:?}");
}

#[test]
fn short_or_foreign_text_is_rejected() {
    assert!(matches!(corrupt_text(&[1, 2], 0), Err(Error::Input(_))));
    assert!(matches!(
        corrupt_text(&[1, 2, VOCAB_SIZE], 0),
        Err(Error::Input(_))
    ));
}

#[test]
fn video_corruption_hits_the_requested_ratio() {
    for seed in 0..10 {
        let frames = video_clue(seed as usize % 4, seed);
        let noisy = corrupt_video(&frames, VIDEO_NOISE_DB, seed).unwrap();
        let es: f64 = frames.data().iter().map(|v| v * v).sum();
        let en: f64 = noisy
            .data()
            .iter()
            .zip(frames.data())
            .map(|(a, b)| (a - b).powi(2))
            .sum();
        let db = 10.0 * (es / en).log10();
        assert!((db - VIDEO_NOISE_DB).abs() < 1e-6, "seed {seed}: {db}");
        assert_eq!(noisy, corrupt_video(&frames, VIDEO_NOISE_DB, seed).unwrap());
    }
    let frames = video_clue(1, 4);
    let faint = corrupt_video(&frames, 120.0, 0).unwrap();
    let worst = faint
        .data()
        .iter()
        .zip(frames.data())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    assert!(worst < 1e-4, "{worst}");
    let zeros = Tensor::zeros(vec![VIDEO_FRAMES, VIDEO_DIM]);
    assert!(matches!(
        corrupt_video(&zeros, -2.5, 0),
        Err(Error::Input(_))
    ));
}

fn small_sim(seed: u64) -> SimConfig {
    SimConfig {
        classes: 6,
        train: 12,
        valid: 3,
        test: 4,
        unseen: 2,
        seed,
    }
}

#[test]
fn simulate_is_reproducible_and_respects_splits() {
    let a = simulate(&small_sim(5)).unwrap();
    let b = simulate(&small_sim(5)).unwrap();
    assert_eq!(a.to_jsonl().unwrap(), b.to_jsonl().unwrap());
    assert_ne!(
        a.to_jsonl().unwrap(),
        simulate(&small_sim(6)).unwrap().to_jsonl().unwrap()
    );
    let count = |s| a.split(s).count();
    assert_eq!(
        [
            count(Split::Train),
            count(Split::Valid),
            count(Split::TestSeen),
            count(Split::TestUnseen)
        ],
        [12, 3, 4, 4]
    );
    let train = a.train_classes();
    assert!(train.iter().all(|&c| c < 4));
    for r in a.split(Split::TestUnseen) {
        assert!(r.target_class >= 4);
    }
    for r in &a.records {
        assert!(r.snr_db.abs() <= SNR_RANGE_DB);
        assert_ne!(r.target_class, r.interferer_class);
        let ex = r.example().unwrap();
        assert_eq!(ex.clues.tag, Some(r.target_class));
    }
}

#[test]
fn simulate_needs_two_seen_classes() {
    let cfg = SimConfig {
        classes: 3,
        unseen: 2,
        ..small_sim(0)
    };
    assert!(matches!(simulate(&cfg), Err(Error::Config(_))));
}

#[test]
fn manifest_round_trip_keeps_unknown_fields() {
    let m = simulate(&small_sim(1)).unwrap();
    let mut text = m.to_jsonl().unwrap();
    let first = text.lines().next().unwrap().to_string();
    let tagged = first.replacen('{', "{\"annotator\":\"x\",\"quality\":[1,2],", 1);
    text = text.replacen(&first, &tagged, 1);
    let back = Manifest::from_jsonl(&text).unwrap();
    assert_eq!(back.records[0].extra.get("annotator").unwrap(), "x");
    assert_eq!(back.records[1..], m.records[1..]);
    let again = Manifest::from_jsonl(&back.to_jsonl().unwrap()).unwrap();
    assert_eq!(again, back);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.jsonl");
    back.write(&path).unwrap();
    assert_eq!(Manifest::read(&path).unwrap(), back);
}

#[test]
fn empty_manifest_reads_as_empty() {
    assert!(Manifest::from_jsonl("").unwrap().is_empty());
    assert!(Manifest::from_jsonl("\n\n").unwrap().is_empty());
}

#[test]
fn malformed_line_reports_its_number() {
    let m = simulate(&small_sim(2)).unwrap();
    let mut lines: Vec<String> = m.to_jsonl().unwrap().lines().map(String::from).collect();
    lines[2] = "{\"id\": 3".into();
    match Manifest::from_jsonl(&lines.join("\n")) {
        Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
        other => panic!("expected parse error, got {other:?}"),
    }
}

#[test]
fn unseen_class_in_training_is_rejected() {
    let mut m = simulate(&small_sim(3)).unwrap();
    let unseen = m.split(Split::TestUnseen).next().unwrap().target_class;
    let r = m
        .records
        .iter_mut()
        .find(|r| r.split == Split::Train)
        .unwrap();
    r.interferer_class = unseen;
    if r.target_class == unseen {
        r.target_class = (unseen + 1) % 6;
    }
    assert!(matches!(
        Manifest::from_jsonl(&m.to_jsonl().unwrap()),
        Err(Error::Validation(_))
    ));
    assert!(matches!(m.validate(), Err(Error::Validation(_))));
}

#[test]
fn wav_files_match_regenerated_audio() {
    let mut m = simulate(&SimConfig {
        classes: 4,
        train: 2,
        valid: 0,
        test: 0,
        unseen: 0,
        seed: 9,
    })
    .unwrap();
    let dir = tempfile::tempdir().unwrap();
    materialize_wavs(&mut m, dir.path()).unwrap();
    for r in &m.records {
        let ex = r.example().unwrap();
        let mix = read_wav(dir.path().join(r.mix_wav.as_ref().unwrap())).unwrap();
        let target = read_wav(dir.path().join(r.target_wav.as_ref().unwrap())).unwrap();
        assert_eq!(
            r.mix_wav.as_deref(),
            Some(format!("{}_mix.wav", r.id).as_str())
        );
        for (a, b) in mix.samples.iter().zip(&ex.mixture.samples) {
            assert_eq!(*a, *b as f32 as f64);
        }
        for (a, b) in target.samples.iter().zip(&ex.target.samples) {
            assert_eq!(*a, *b as f32 as f64);
        }
    }
}
