//! Backbone shape contracts, checkpoint round trips, and whole-model
//! gradient checks on a miniature configuration.

mod common;

use common::*;
use mctse::clue::{ClueNetConfig, ClueSet, TextClue};
use mctse::dccrn::{extract, Checkpoint, ClueMode, DccrnConfig, Model};
use mctse::nn::{ComplexFeature, Graph, ParamStore, SequenceMap};
use mctse::signal::{AudioClip, StftConfig, StftPlan};
use mctse::tensor::Tensor;
use mctse::Error;
use rand::Rng;

/// Every width is at most 8 and a 20-sample signal gives 6 frames.
fn mini_config() -> DccrnConfig {
    DccrnConfig {
        channels: vec![2, 2],
        kernel: [5, 2],
        lstm_hidden: 3,
        lstm_layers: 2,
        stft: StftConfig {
            fft_size: 16,
            win_len: 12,
            hop: 4,
        },
        clue: ClueNetConfig {
            classes: 3,
            heads: 2,
            downsample: 2,
            sound_channels: vec![2],
            vocab: 5,
            text_raw: 3,
            video_raw: 3,
        },
    }
}

fn build<S: mctse::tensor::Float>(
    cfg: &DccrnConfig,
    seed: u64,
    clue: bool,
) -> (Model, ParamStore<S>) {
    let mut store = ParamStore::new();
    let mut r = rng(seed);
    let mut model = Model::new(cfg, &mut store, &mut r).unwrap();
    if clue {
        model.add_clue_net(&mut store, &mut r).unwrap();
    }
    (model, store)
}

fn clip(seed: u64, len: usize) -> AudioClip {
    let mut r = rng(seed);
    AudioClip::new(
        (0..len).map(|_| r.random_range(-0.5..0.5)).collect(),
        16_000,
    )
    .unwrap()
}

fn all_clues(seed: u64, cfg: &DccrnConfig) -> ClueSet {
    let mut r = rng(seed);
    ClueSet {
        tag: Some(1),
        text: Some(TextClue::Tokens(vec![0, 3, 4, 1])),
        video: Some(rand_tensor(&mut r, &[3, cfg.clue.video_raw], 1.0, 0.0)),
    }
}

fn spectrum(g: &Graph<f64>, cfg: &DccrnConfig, x: &AudioClip) -> ComplexFeature {
    let plan = StftPlan::<f64>::new(cfg.stft).unwrap();
    let v = g.constant(vec![x.len()], x.samples.clone()).unwrap();
    let (re, im) = plan.forward(g.tape(), v).unwrap();
    ComplexFeature { real: re, imag: im }
}

#[test]
fn desk_encoder_preserves_time_and_flattens_to_544() {
    let cfg = DccrnConfig::default();
    let (model, store) = build::<f64>(&cfg, 0, false);
    let g = Graph::new(&store);
    let spec = spectrum(&g, &cfg, &clip(1, 4000));
    let enc = model.encode(&g, spec).unwrap();
    assert_eq!(enc.features.shape(g.tape()), vec![41, 544]);
    let skip_shapes: Vec<_> = enc.skips.iter().map(|s| s.shape(g.tape())).collect();
    assert_eq!(
        skip_shapes,
        vec![
            vec![8, 129, 41],
            vec![16, 65, 41],
            vec![32, 33, 41],
            vec![32, 17, 41]
        ]
    );
    let est = model.decode(&g, enc.features, &enc.skips).unwrap();
    assert_eq!(est.shape(g.tape()), vec![41, 257]);
}

#[test]
fn zero_input_gives_zero_features() {
    let cfg = mini_config();
    let (model, store) = build::<f64>(&cfg, 0, false);
    let g = Graph::new(&store);
    let z = g.leaf(&Tensor::zeros(vec![6, 9]));
    let enc = model
        .encode(&g, ComplexFeature { real: z, imag: z })
        .unwrap();
    assert!(g
        .value(enc.features.real)
        .iter()
        .chain(g.value(enc.features.imag).iter())
        .all(|&v| v == 0.0));
}

#[test]
fn zero_decoder_weights_give_zero_spectrum() {
    let cfg = mini_config();
    let (model, mut store) = build::<f64>(&cfg, 0, false);
    for id in store.ids().collect::<Vec<_>>() {
        if store.name(id).starts_with("dec") {
            let n = store.get(id).numel();
            store.set(id, vec![0.0; n]).unwrap();
        }
    }
    let g = Graph::new(&store);
    let spec = spectrum(&g, &cfg, &clip(2, 20));
    let enc = model.encode(&g, spec).unwrap();
    let est = model.decode(&g, enc.features, &enc.skips).unwrap();
    assert_eq!(est.shape(g.tape()), vec![6, 9]);
    assert!(g
        .value(est.real)
        .iter()
        .chain(g.value(est.imag).iter())
        .all(|&v| v == 0.0));
    assert!(matches!(
        model.decode(&g, enc.features, &enc.skips[1..]),
        Err(Error::Contract(_))
    ));
}

#[test]
fn zero_clue_equals_unconditioned_enhancement() {
    let cfg = mini_config();
    let (model, store) = build::<f64>(&cfg, 3, false);
    let mut r = rng(4);
    let g = Graph::new(&store);
    let y = ComplexFeature {
        real: g.leaf(&rand_tensor(&mut r, &[6, 6], 1.0, 0.0)),
        imag: g.leaf(&rand_tensor(&mut r, &[6, 6], 1.0, 0.0)),
    };
    let zero = g.leaf(&Tensor::zeros(vec![6, 6]));
    let out = model.enhance(&g, y, zero).unwrap();
    let rr = model.lstm_r.forward(&g, y.real).unwrap();
    let ii = model.lstm_i.forward(&g, y.imag).unwrap();
    let ri = model.lstm_i.forward(&g, y.real).unwrap();
    let ir = model.lstm_r.forward(&g, y.imag).unwrap();
    let want_r = g.sub(rr, ii).unwrap();
    let want_i = g.add(ri, ir).unwrap();
    assert_eq!(&*g.value(out.real), &*g.value(want_r));
    assert_eq!(&*g.value(out.imag), &*g.value(want_i));

    let c = g.leaf(&rand_tensor(&mut r, &[6, 6], 1.0, 0.0));
    let conditioned = model.enhance(&g, y, c).unwrap();
    assert_ne!(&*g.value(conditioned.real), &*g.value(out.real));
    assert_eq!(conditioned.shape(g.tape()), vec![6, 6]);
}

#[test]
fn extraction_preserves_length_and_is_deterministic() {
    let cfg = DccrnConfig::default();
    let (model, store) = build::<f32>(&cfg, 5, true);
    let ckpt = Checkpoint::new(&cfg, 2, &store).unwrap();
    let clues = ClueSet {
        tag: Some(2),
        text: Some(TextClue::Tokens(vec![1, 2, 3])),
        video: None,
    };
    for len in [1600, 4001, 48_000] {
        let x = clip(len as u64, len);
        let a = extract(&x, &clues, &ckpt).unwrap();
        assert_eq!(a.audio.len(), len);
        assert!(a.audio.samples.iter().all(|v| v.is_finite()));
        if len == 4001 {
            let b = extract(&x, &clues, &ckpt).unwrap();
            assert_eq!(a.audio.samples, b.audio.samples);
            let w = a.attention.unwrap();
            assert_eq!(w.shape(), &[4, 11, 4]);
        }
    }
    let _ = model;
    assert!(matches!(
        extract(&clip(0, 1600), &ClueSet::default(), &ckpt),
        Err(Error::Contract(_))
    ));
}

#[test]
fn tag_path_and_fused_tag_path_agree_in_shape() {
    let cfg = mini_config();
    let (model, store) = build::<f64>(&cfg, 6, true);
    let plan = StftPlan::<f64>::new(cfg.stft).unwrap();
    let x = clip(7, 37);
    let clues = ClueSet {
        tag: Some(0),
        ..ClueSet::default()
    };
    let a = model
        .extract(&store, &plan, &x, &clues, ClueMode::Tag)
        .unwrap();
    let b = model
        .extract(&store, &plan, &x, &clues, ClueMode::Fused)
        .unwrap();
    assert_eq!(a.audio.len(), b.audio.len());
    assert!(a
        .audio
        .samples
        .iter()
        .chain(&b.audio.samples)
        .all(|v| v.is_finite()));
    assert_ne!(a.audio.samples, b.audio.samples);
    assert!(a.attention.is_none());
    assert!(b.attention.unwrap().data().iter().all(|&w| w == 1.0));
}

#[test]
fn stage_one_models_refuse_the_fused_path() {
    let cfg = mini_config();
    let (model, store) = build::<f64>(&cfg, 0, false);
    let plan = StftPlan::<f64>::new(cfg.stft).unwrap();
    let res = model.extract(
        &store,
        &plan,
        &clip(0, 20),
        &all_clues(0, &cfg),
        ClueMode::Fused,
    );
    assert!(matches!(res, Err(Error::Contract(_))));
}

#[test]
fn checkpoints_round_trip_bit_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = mini_config();
    for stage in [1u8, 2] {
        let (_, store) = build::<f32>(&cfg, 8, stage == 2);
        let ckpt = Checkpoint::new(&cfg, stage, &store).unwrap();
        let path = dir.path().join(format!("s{stage}.ckpt"));
        ckpt.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back.stage, stage);
        assert_eq!(back.config, cfg);
        assert_eq!(back.to_bytes().unwrap(), std::fs::read(&path).unwrap());
        for ((_, a, ta), (_, b, tb)) in back.store.iter().zip(store.iter()) {
            assert_eq!(a, b);
            let (x, y): (Vec<u32>, Vec<u32>) = (
                ta.data().iter().map(|v| v.to_bits()).collect(),
                tb.data().iter().map(|v| v.to_bits()).collect(),
            );
            assert_eq!(x, y);
        }
    }
}

#[test]
fn malformed_checkpoints_are_rejected() {
    let cfg = mini_config();
    let (_, store) = build::<f32>(&cfg, 8, false);
    let bytes = Checkpoint::new(&cfg, 1, &store)
        .unwrap()
        .to_bytes()
        .unwrap();
    assert!(matches!(
        Checkpoint::from_bytes(&bytes[..bytes.len() - 3]),
        Err(Error::Input(_))
    ));
    let mut foreign = bytes.clone();
    foreign[0] = b'X';
    assert!(matches!(
        Checkpoint::from_bytes(&foreign),
        Err(Error::Input(_))
    ));
    // A stage-1 parameter set cannot be labelled stage 2.
    assert!(matches!(
        Checkpoint::new(&cfg, 2, &store),
        Err(Error::Validation(_))
    ));
    let other = DccrnConfig {
        lstm_hidden: 4,
        ..cfg.clone()
    };
    assert!(matches!(
        Checkpoint::new(&other, 1, &store),
        Err(Error::Validation(_))
    ));
}

#[test]
fn whole_model_grads_match_finite_differences() {
    let cfg = mini_config();
    for seed in 0..10 {
        for mode in [ClueMode::Tag, ClueMode::Fused] {
            let (model, mut store) = build::<f64>(&cfg, seed, mode == ClueMode::Fused);
            let mut r = rng(seed + 1000);
            randomize_vectors(&mut store, &mut r);
            let plan = StftPlan::<f64>::new(cfg.stft).unwrap();
            let x = clip(seed, 20);
            let clues = all_clues(seed, &cfg);
            let err = store_grad_check(&store, &|g| {
                let v = g.constant(vec![20], x.samples.clone()).unwrap();
                let out = model.forward(g, &plan, v, &clues, mode).unwrap();
                weighted_sum(g.tape(), out.wave, seed)
            });
            assert!(err <= 1e-4, "seed {seed} {mode:?}: {err:e}");
        }
    }
}

#[test]
fn every_parameter_receives_gradient() {
    let cfg = mini_config();
    let (model, store) = build::<f64>(&cfg, 11, true);
    let plan = StftPlan::<f64>::new(cfg.stft).unwrap();
    let g = Graph::new(&store);
    let mut total = None;
    for (i, mode) in [ClueMode::Tag, ClueMode::Fused, ClueMode::Fused]
        .into_iter()
        .enumerate()
    {
        let x = clip(20 + i as u64, 24);
        let v = g.constant(vec![24], x.samples.clone()).unwrap();
        let out = model
            .forward(&g, &plan, v, &all_clues(i as u64, &cfg), mode)
            .unwrap();
        let l = weighted_sum(g.tape(), out.wave, i as u64);
        total = Some(match total {
            None => l,
            Some(t) => g.add(t, l).unwrap(),
        });
    }
    let grads = g.backward(total.unwrap()).unwrap();
    for id in store.ids() {
        let gr = grads
            .get(id)
            .unwrap_or_else(|| panic!("{} untouched", store.name(id)));
        assert!(gr.iter().all(|v| v.is_finite()));
        let peak = gr.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(
            peak > 1e-8,
            "{} has a vanishing gradient ({peak:e})",
            store.name(id)
        );
    }
}
