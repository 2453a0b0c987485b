//! Oracles for the parameterised layers.

mod common;

use common::*;
use mctse::nn::{
    complex_conv2d, complex_conv2d_transpose, complex_lstm_enhance, ComplexConv2d, ComplexFeature,
    Graph, Linear, LstmProjection, LstmStack, MultiHeadAttention, ParamStore, SequenceMap,
};
use mctse::tensor::{Conv2dGeom, Float, Tape, Tensor, Var};
use mctse::Error;

fn tensor(shape: &[usize], data: &[f64]) -> Tensor<f64> {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

#[test]
fn linear_identity_and_one_hot() {
    let mut store = ParamStore::<f64>::new();
    let lin = Linear::new(&mut store, "fc", 3, 3, &mut rng(0)).unwrap();
    store
        .set(lin.w, vec![1., 0., 0., 0., 1., 0., 0., 0., 1.])
        .unwrap();
    let g = Graph::new(&store);
    let x = g.leaf(&tensor(&[2, 3], &[1., -2., 3., 0.5, 0.25, -4.]));
    let y = lin.forward(&g, x).unwrap();
    assert_eq!(&*g.value(y), &*g.value(x));

    let mut store = ParamStore::<f64>::new();
    let lin = Linear::new(&mut store, "tag", 4, 3, &mut rng(1)).unwrap();
    let g = Graph::new(&store);
    let onehot = g.leaf(&tensor(&[1, 4], &[0., 0., 1., 0.]));
    let y = lin.forward(&g, onehot).unwrap();
    assert_eq!(&*g.value(y), &store.get(lin.w).data()[6..9]);
}

#[test]
fn linear_rejects_width_mismatch() {
    let mut store = ParamStore::<f64>::new();
    let lin = Linear::new(&mut store, "fc", 3, 2, &mut rng(0)).unwrap();
    let g = Graph::new(&store);
    let x = g.leaf(&Tensor::zeros(vec![2, 4]));
    assert!(matches!(lin.forward(&g, x), Err(Error::Dimension { .. })));
}

#[test]
fn linear_grads_match_finite_differences() {
    for seed in 0..5 {
        let mut r = rng(seed);
        let mut store = ParamStore::<f64>::new();
        let lin = Linear::new(&mut store, "fc", 4, 3, &mut r).unwrap();
        store.set(lin.b.unwrap(), vec![0.1, -0.2, 0.3]).unwrap();
        let x = add_random(&mut store, &mut r, "x", &[5, 4]);
        let err = store_grad_check(&store, &|g| {
            let y = lin.forward(g, g.param(x)).unwrap();
            weighted_sum(g.tape(), y, seed)
        });
        assert!(err <= 1e-6, "seed {seed}: {err:e}");
    }
}

#[test]
fn lstm_with_zero_parameters_outputs_zero() {
    let mut store = ParamStore::<f64>::new();
    let lstm = LstmStack::new(&mut store, "l", 3, 4, 2, true, &mut rng(0)).unwrap();
    for id in store.ids().collect::<Vec<_>>() {
        let n = store.get(id).numel();
        store.set(id, vec![0.0; n]).unwrap();
    }
    let g = Graph::new(&store);
    let x = g.leaf(&rand_tensor(&mut rng(1), &[6, 3], 1.0, 0.0));
    let y = lstm.forward(&g, x).unwrap();
    assert_eq!(g.shape(y), vec![6, 8]);
    assert!(g.value(y).iter().all(|&v| v == 0.0));
}

#[test]
fn lstm_single_step_matches_hand_evaluation() {
    let mut store = ParamStore::<f64>::new();
    let lstm = LstmStack::new(&mut store, "l", 2, 2, 1, false, &mut rng(0)).unwrap();
    let ids: Vec<_> = store.ids().collect();
    // Columns: i0 i1 f0 f1 g0 g1 o0 o1.
    let w_ih = [
        0.1, -0.2, 0.3, 0.4, -0.5, 0.6, 0.7, -0.8, 0.9, 1.0, -1.1, 1.2, 0.2, 0.3, -0.4, 0.5,
    ];
    let b = [0.05, -0.05, 1.0, 1.0, 0.1, -0.1, 0.0, 0.2];
    store.set(ids[0], w_ih.to_vec()).unwrap();
    store.set(ids[2], b.to_vec()).unwrap();
    let x = [0.7, -1.3];

    let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
    let z: Vec<f64> = (0..8)
        .map(|j| x[0] * w_ih[j] + x[1] * w_ih[8 + j] + b[j])
        .collect();
    // With h0 = c0 = 0 the forget gate and recurrent weights play no role.
    let expect: Vec<f64> = (0..2)
        .map(|u| {
            let c = sig(z[u]) * z[4 + u].tanh();
            sig(z[6 + u]) * c.tanh()
        })
        .collect();

    let g = Graph::new(&store);
    let y = lstm.forward(&g, g.leaf(&tensor(&[1, 2], &x))).unwrap();
    for (a, e) in g.value(y).iter().zip(&expect) {
        assert!((a - e).abs() < 1e-14, "{a} vs {e}");
    }
}

#[test]
fn lstm_forget_bias_starts_at_one() {
    let mut store = ParamStore::<f64>::new();
    LstmStack::new(&mut store, "l", 3, 2, 1, false, &mut rng(0)).unwrap();
    let b = store.get(store.id("l.l0.fwd.b").unwrap()).data();
    assert_eq!(b, &[0., 0., 1., 1., 0., 0., 0., 0.]);
}

#[test]
fn lstm_rejects_empty_sequence() {
    let mut store = ParamStore::<f64>::new();
    let lstm = LstmStack::new(&mut store, "l", 3, 2, 1, false, &mut rng(0)).unwrap();
    let g = Graph::new(&store);
    // A zero-length sequence cannot even be recorded.
    assert!(g.constant(vec![0, 3], vec![]).is_err());
    let x = g.constant(vec![1, 3], vec![0.0; 3]).unwrap();
    assert_eq!(g.shape(lstm.forward(&g, x).unwrap()), vec![1, 2]);
}

#[test]
fn lstm_stack_grads_match_finite_differences() {
    for seed in 0..3 {
        let mut r = rng(seed);
        let mut store = ParamStore::<f64>::new();
        let lstm = LstmStack::new(&mut store, "l", 3, 2, 2, true, &mut r).unwrap();
        let x = add_random(&mut store, &mut r, "x", &[5, 3]);
        let err = store_grad_check(&store, &|g| {
            let y = lstm.forward(g, g.param(x)).unwrap();
            weighted_sum(g.tape(), y, seed)
        });
        assert!(err <= 1e-4, "seed {seed}: {err:e}");
    }
}

// ---- complex convolution ----------------------------------------------

type C = (f64, f64);

fn cmul(a: C, b: C) -> C {
    (a.0 * b.0 - a.1 * b.1, a.0 * b.1 + a.1 * b.0)
}

fn pair(t: &Tensor<f64>, u: &Tensor<f64>, i: usize) -> C {
    (t.data()[i], u.data()[i])
}

/// Direct complex cross-correlation, `x` is `ci×h×w`, `k` is `co×ci×kh×kw`.
fn naive_complex_conv(
    x: (&Tensor<f64>, &Tensor<f64>),
    k: (&Tensor<f64>, &Tensor<f64>),
    geom: Conv2dGeom,
) -> (Vec<usize>, Vec<C>) {
    let (ci, h, w) = (x.0.shape()[0], x.0.shape()[1], x.0.shape()[2]);
    let (co, kh, kw) = (k.0.shape()[0], k.0.shape()[2], k.0.shape()[3]);
    let (oh, ow) = geom.conv_out(h, w, kh, kw).unwrap();
    let mut out = vec![(0.0, 0.0); co * oh * ow];
    for o in 0..co {
        for y in 0..oh {
            for z in 0..ow {
                let mut acc = (0.0, 0.0);
                for c in 0..ci {
                    for a in 0..kh {
                        for b in 0..kw {
                            let iy = (y * geom.stride.0 + a) as isize - geom.padding.0 as isize;
                            let iz = (z * geom.stride.1 + b) as isize - geom.padding.1 as isize;
                            if iy < 0 || iz < 0 || iy >= h as isize || iz >= w as isize {
                                continue;
                            }
                            let xi = (c * h + iy as usize) * w + iz as usize;
                            let ki = ((o * ci + c) * kh + a) * kw + b;
                            let p = cmul(pair(x.0, x.1, xi), pair(k.0, k.1, ki));
                            acc = (acc.0 + p.0, acc.1 + p.1);
                        }
                    }
                }
                out[(o * oh + y) * ow + z] = acc;
            }
        }
    }
    (vec![co, oh, ow], out)
}

/// Direct complex transposed convolution, `k` is `ci×co×kh×kw`.
fn naive_complex_conv_t(
    x: (&Tensor<f64>, &Tensor<f64>),
    k: (&Tensor<f64>, &Tensor<f64>),
    geom: Conv2dGeom,
) -> (Vec<usize>, Vec<C>) {
    let (ci, h, w) = (x.0.shape()[0], x.0.shape()[1], x.0.shape()[2]);
    let (co, kh, kw) = (k.0.shape()[1], k.0.shape()[2], k.0.shape()[3]);
    let (oh, ow) = geom.transpose_out(h, w, kh, kw).unwrap();
    let mut out = vec![(0.0, 0.0); co * oh * ow];
    for c in 0..ci {
        for y in 0..h {
            for z in 0..w {
                for o in 0..co {
                    for a in 0..kh {
                        for b in 0..kw {
                            let oy = (y * geom.stride.0 + a) as isize - geom.padding.0 as isize;
                            let oz = (z * geom.stride.1 + b) as isize - geom.padding.1 as isize;
                            if oy < 0 || oz < 0 || oy >= oh as isize || oz >= ow as isize {
                                continue;
                            }
                            let xi = (c * h + y) * w + z;
                            let ki = ((c * co + o) * kh + a) * kw + b;
                            let p = cmul(pair(x.0, x.1, xi), pair(k.0, k.1, ki));
                            let dst = &mut out[(o * oh + oy as usize) * ow + oz as usize];
                            *dst = (dst.0 + p.0, dst.1 + p.1);
                        }
                    }
                }
            }
        }
    }
    (vec![co, oh, ow], out)
}

fn run_complex(
    transpose: bool,
    x: (&Tensor<f64>, &Tensor<f64>),
    k: (&Tensor<f64>, &Tensor<f64>),
    geom: Conv2dGeom,
) -> (Vec<usize>, Vec<f64>, Vec<f64>) {
    let tape = Tape::new();
    let xv = ComplexFeature::new(&tape, tape.leaf(x.0), tape.leaf(x.1)).unwrap();
    let kv = ComplexFeature::new(&tape, tape.leaf(k.0), tape.leaf(k.1)).unwrap();
    let y = if transpose {
        complex_conv2d_transpose(&tape, xv, kv, None, geom).unwrap()
    } else {
        complex_conv2d(&tape, xv, kv, None, geom).unwrap()
    };
    let (re, im) = (tape.value(y.real).to_vec(), tape.value(y.imag).to_vec());
    (tape.shape(y.real), re, im)
}

fn delta_kernel(c: usize, value: f64) -> Tensor<f64> {
    let mut k = Tensor::zeros(vec![c, c, 1, 1]);
    for i in 0..c {
        k.data_mut()[i * c + i] = value;
    }
    k
}

#[test]
fn complex_conv_real_delta_is_identity() {
    let mut r = rng(3);
    let (xr, xi) = (
        rand_tensor(&mut r, &[2, 4, 4], 1.0, 0.0),
        rand_tensor(&mut r, &[2, 4, 4], 1.0, 0.0),
    );
    let (one, zero) = (delta_kernel(2, 1.0), delta_kernel(2, 0.0));
    for transpose in [false, true] {
        let (_, re, im) = run_complex(transpose, (&xr, &xi), (&one, &zero), Conv2dGeom::unit());
        assert_eq!(re, xr.data());
        assert_eq!(im, xi.data());
    }
}

#[test]
fn complex_conv_i_times_i_is_minus_one() {
    let zero = tensor(&[1, 1, 1], &[0.0]);
    let one = tensor(&[1, 1, 1], &[1.0]);
    let (kz, ki) = (delta_kernel(1, 0.0), delta_kernel(1, 1.0));
    for transpose in [false, true] {
        let (_, re, im) = run_complex(transpose, (&zero, &one), (&kz, &ki), Conv2dGeom::unit());
        assert_eq!((re[0], im[0]), (-1.0, 0.0));
    }
}

#[test]
fn complex_conv_matches_scalar_complex_oracle() {
    for seed in 0..5 {
        let mut r = rng(seed);
        let xr = rand_tensor(&mut r, &[2, 4, 4], 1.0, 0.0);
        let xi = rand_tensor(&mut r, &[2, 4, 4], 1.0, 0.0);
        let kr = rand_tensor(&mut r, &[3, 2, 3, 2], 1.0, 0.0);
        let ki = rand_tensor(&mut r, &[3, 2, 3, 2], 1.0, 0.0);
        for geom in [Conv2dGeom::unit(), Conv2dGeom::new((2, 1), (1, 1))] {
            let (shape, re, im) = run_complex(false, (&xr, &xi), (&kr, &ki), geom);
            let (want_shape, want) = naive_complex_conv((&xr, &xi), (&kr, &ki), geom);
            assert_eq!(shape, want_shape);
            for ((a, b), w) in re.iter().zip(&im).zip(&want) {
                assert!((a - w.0).abs() <= 1e-10 && (b - w.1).abs() <= 1e-10);
            }
        }
    }
}

#[test]
fn complex_conv_transpose_matches_scalar_complex_oracle() {
    for seed in 0..5 {
        let mut r = rng(seed);
        let xr = rand_tensor(&mut r, &[2, 4, 4], 1.0, 0.0);
        let xi = rand_tensor(&mut r, &[2, 4, 4], 1.0, 0.0);
        let kr = rand_tensor(&mut r, &[2, 3, 5, 2], 1.0, 0.0);
        let ki = rand_tensor(&mut r, &[2, 3, 5, 2], 1.0, 0.0);
        for geom in [Conv2dGeom::unit(), Conv2dGeom::new((2, 1), (2, 0))] {
            let (shape, re, im) = run_complex(true, (&xr, &xi), (&kr, &ki), geom);
            let (want_shape, want) = naive_complex_conv_t((&xr, &xi), (&kr, &ki), geom);
            assert_eq!(shape, want_shape);
            for ((a, b), w) in re.iter().zip(&im).zip(&want) {
                assert!((a - w.0).abs() <= 1e-10 && (b - w.1).abs() <= 1e-10);
            }
        }
    }
}

#[test]
fn complex_conv_transpose_is_linear() {
    let mut r = rng(11);
    let geom = Conv2dGeom::new((2, 1), (2, 0));
    let parts: Vec<_> = (0..6)
        .map(|_| rand_tensor(&mut r, &[2, 4, 4], 1.0, 0.0))
        .collect();
    let kr = rand_tensor(&mut r, &[2, 3, 5, 2], 1.0, 0.0);
    let ki = rand_tensor(&mut r, &[2, 3, 5, 2], 1.0, 0.0);
    let (alpha, beta) = (0.7, -1.9);
    let combo = |a: &Tensor<f64>, b: &Tensor<f64>| {
        let d = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(x, y)| alpha * x + beta * y)
            .collect();
        Tensor::new(a.shape().to_vec(), d).unwrap()
    };
    let (_, r1, i1) = run_complex(true, (&parts[0], &parts[1]), (&kr, &ki), geom);
    let (_, r2, i2) = run_complex(true, (&parts[2], &parts[3]), (&kr, &ki), geom);
    let (_, rc, ic) = run_complex(
        true,
        (&combo(&parts[0], &parts[2]), &combo(&parts[1], &parts[3])),
        (&kr, &ki),
        geom,
    );
    for j in 0..rc.len() {
        assert!((rc[j] - (alpha * r1[j] + beta * r2[j])).abs() <= 1e-10);
        assert!((ic[j] - (alpha * i1[j] + beta * i2[j])).abs() <= 1e-10);
    }
}

#[test]
fn complex_conv_layer_grads_match_finite_differences() {
    for transpose in [false, true] {
        let mut r = rng(5);
        let mut store = ParamStore::<f64>::new();
        let geom = Conv2dGeom::new((2, 1), (2, if transpose { 0 } else { 1 }));
        let layer =
            ComplexConv2d::new(&mut store, "c", 2, 3, (5, 2), geom, transpose, true, &mut r)
                .unwrap();
        let (br, bi) = layer.bias.unwrap();
        store.set(br, vec![0.1, 0.2, -0.3]).unwrap();
        store.set(bi, vec![-0.1, 0.4, 0.3]).unwrap();
        let xr = add_random(&mut store, &mut r, "xr", &[2, 7, 3]);
        let xi = add_random(&mut store, &mut r, "xi", &[2, 7, 3]);
        let err = store_grad_check(&store, &|g| {
            let x = ComplexFeature::new(g.tape(), g.param(xr), g.param(xi)).unwrap();
            let y = layer.forward(g, x).unwrap();
            let a = weighted_sum(g.tape(), y.real, 1);
            let b = weighted_sum(g.tape(), y.imag, 2);
            g.add(a, b).unwrap()
        });
        assert!(err <= 1e-6, "transpose={transpose}: {err:e}");
    }
}

// ---- complex enhancement ----------------------------------------------

struct Identity;

impl<S: Float> SequenceMap<S> for Identity {
    fn forward(&self, _: &Graph<S>, x: Var) -> mctse::Result<Var> {
        Ok(x)
    }
}

#[test]
fn enhance_with_identity_stubs_follows_complex_algebra() {
    let mut r = rng(2);
    let (a, b, c) = (
        rand_tensor(&mut r, &[3, 4], 1.0, 0.0),
        rand_tensor(&mut r, &[3, 4], 1.0, 0.0),
        rand_tensor(&mut r, &[3, 4], 1.0, 0.0),
    );
    let store = ParamStore::<f64>::new();
    for clue in [c.clone(), Tensor::zeros(vec![3, 4])] {
        let g = Graph::new(&store);
        let y = ComplexFeature::new(g.tape(), g.leaf(&a), g.leaf(&b)).unwrap();
        let out = complex_lstm_enhance(&g, y, g.leaf(&clue), &Identity, &Identity).unwrap();
        let (re, im) = (g.value(out.real).to_vec(), g.value(out.imag).to_vec());
        for j in 0..12 {
            let (av, bv, cv) = (a.data()[j], b.data()[j], clue.data()[j]);
            assert_eq!(re[j], (av + cv) - (bv + cv));
            assert_eq!(im[j], (av + cv) + (bv + cv));
            assert!((re[j] - (av - bv)).abs() < 1e-15);
            assert!((im[j] - (av + bv + 2.0 * cv)).abs() < 1e-15);
        }
    }
}

#[test]
fn enhance_rejects_clue_shape_mismatch() {
    let store = ParamStore::<f64>::new();
    let g = Graph::new(&store);
    let y = ComplexFeature::new(
        g.tape(),
        g.leaf(&Tensor::zeros(vec![3, 4])),
        g.leaf(&Tensor::zeros(vec![3, 4])),
    )
    .unwrap();
    let clue = g.leaf(&Tensor::zeros(vec![2, 4]));
    match complex_lstm_enhance(&g, y, clue, &Identity, &Identity) {
        Err(Error::Contract(msg)) => {
            assert!(msg.contains("[3, 4]") && msg.contains("[2, 4]"), "{msg}")
        }
        other => panic!("expected contract error, got {other:?}"),
    }
}

#[test]
fn enhance_grads_match_finite_differences() {
    let mut r = rng(9);
    let mut store = ParamStore::<f64>::new();
    let lr = LstmProjection::new(&mut store, "r", 4, 3, 2, &mut r).unwrap();
    let li = LstmProjection::new(&mut store, "i", 4, 3, 2, &mut r).unwrap();
    let yr = add_random(&mut store, &mut r, "yr", &[3, 4]);
    let yi = add_random(&mut store, &mut r, "yi", &[3, 4]);
    let c = add_random(&mut store, &mut r, "c", &[3, 4]);
    let f = |g: &Graph<f64>| {
        let y = ComplexFeature::new(g.tape(), g.param(yr), g.param(yi)).unwrap();
        let out = complex_lstm_enhance(g, y, g.param(c), &lr, &li).unwrap();
        let a = weighted_sum(g.tape(), out.real, 3);
        let b = weighted_sum(g.tape(), out.imag, 4);
        g.add(a, b).unwrap()
    };
    let err = store_grad_check(&store, &f);
    assert!(err <= 1e-4, "{err:e}");

    let g = Graph::new(&store);
    let grads = g.backward(f(&g)).unwrap();
    for id in store.ids() {
        let gr = grads
            .get(id)
            .unwrap_or_else(|| panic!("no grad for {}", store.name(id)));
        assert!(
            gr.iter().any(|v| v.abs() > 0.0),
            "dead parameter {}",
            store.name(id)
        );
    }
}

// ---- attention ----------------------------------------------------------

fn mha_setup(seed: u64, dim: usize, heads: usize) -> (ParamStore<f64>, MultiHeadAttention) {
    let mut store = ParamStore::<f64>::new();
    let mut r = rng(seed);
    let mha = MultiHeadAttention::new(&mut store, "att", dim, heads, &mut r).unwrap();
    // Non-zero biases so the tests also cover them.
    assert!(mha.k.b.is_none());
    for lin in [mha.q, mha.v, mha.o] {
        let b = rand_tensor(&mut r, &[dim], 0.5, 0.0).into_data();
        store.set(lin.b.unwrap(), b).unwrap();
    }
    (store, mha)
}

fn attend(
    store: &ParamStore<f64>,
    mha: &MultiHeadAttention,
    q: &Tensor<f64>,
    kv: &Tensor<f64>,
    mask: Option<&[bool]>,
) -> (Vec<f64>, Vec<f64>) {
    let g = Graph::new(store);
    let (qv, kvv) = (g.leaf(q), g.leaf(kv));
    let out = mha.forward(&g, qv, kvv, kvv, mask).unwrap();
    let res = (g.value(out.out).to_vec(), g.value(out.weights).to_vec());
    res
}

fn permute_rows(t: &Tensor<f64>, perm: &[usize]) -> Tensor<f64> {
    let d = t.shape()[1];
    let data = perm
        .iter()
        .flat_map(|&i| t.data()[i * d..(i + 1) * d].to_vec())
        .collect();
    Tensor::new(t.shape().to_vec(), data).unwrap()
}

#[test]
fn single_key_attention_ignores_queries() {
    let (store, mha) = mha_setup(0, 8, 4);
    let mut r = rng(1);
    let kv = rand_tensor(&mut r, &[1, 8], 1.0, 0.0);
    let (o1, w1) = attend(
        &store,
        &mha,
        &rand_tensor(&mut r, &[5, 8], 1.0, 0.0),
        &kv,
        None,
    );
    let (o2, _) = attend(
        &store,
        &mha,
        &rand_tensor(&mut r, &[5, 8], 3.0, 0.0),
        &kv,
        None,
    );
    assert!(w1.iter().all(|&w| w == 1.0));
    assert_eq!(o1, o2);
    for row in o1.chunks(8) {
        assert_eq!(row, &o1[..8]);
    }
    // out = (kv·W_v + b_v)·W_o + b_o
    let g = Graph::new(&store);
    let v = mha.v.forward(&g, g.leaf(&kv)).unwrap();
    let want = mha.o.forward(&g, v).unwrap();
    for (a, b) in o1[..8].iter().zip(g.value(want).iter()) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn attention_is_invariant_to_key_permutation() {
    let (store, mha) = mha_setup(2, 8, 4);
    let mut r = rng(3);
    let q = rand_tensor(&mut r, &[4, 8], 1.0, 0.0);
    let kv = rand_tensor(&mut r, &[6, 8], 1.0, 0.0);
    let perm = [3, 0, 5, 1, 4, 2];
    let mask = [false, true, false, false, true, false];
    let pmask: Vec<bool> = perm.iter().map(|&i| mask[i]).collect();
    let (a, _) = attend(&store, &mha, &q, &kv, Some(&mask));
    let (b, _) = attend(&store, &mha, &q, &permute_rows(&kv, &perm), Some(&pmask));
    assert!(rel_err(&a, &b) <= 1e-6);
}

#[test]
fn masking_a_key_equals_deleting_it() {
    let (store, mha) = mha_setup(4, 8, 2);
    let mut r = rng(5);
    let q = rand_tensor(&mut r, &[3, 8], 1.0, 0.0);
    let kv = rand_tensor(&mut r, &[5, 8], 1.0, 0.0);
    let mask = [false, false, true, false, true];
    let (masked, weights) = attend(&store, &mha, &q, &kv, Some(&mask));
    let kept = Tensor::new(
        vec![3, 8],
        [0, 1, 3]
            .iter()
            .flat_map(|&i| kv.data()[i * 8..(i + 1) * 8].to_vec())
            .collect(),
    )
    .unwrap();
    let (deleted, _) = attend(&store, &mha, &q, &kept, None);
    assert!(rel_err(&masked, &deleted) <= 1e-6);
    for row in weights.chunks(5) {
        assert_eq!((row[2], row[4]), (0.0, 0.0));
        assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-6);
    }
}

#[test]
fn fully_masked_keys_are_a_contract_error() {
    let (store, mha) = mha_setup(0, 4, 2);
    let g = Graph::new(&store);
    let x = g.leaf(&Tensor::zeros(vec![2, 4]));
    let res = mha.forward(&g, x, x, x, Some(&[true, true]));
    assert!(matches!(res, Err(Error::Contract(_))));
}

#[test]
fn attention_rejects_indivisible_heads_and_width_mismatch() {
    let mut store = ParamStore::<f64>::new();
    assert!(MultiHeadAttention::new(&mut store, "a", 6, 4, &mut rng(0)).is_err());
    let (store, mha) = mha_setup(0, 4, 2);
    let g = Graph::new(&store);
    let x = g.leaf(&Tensor::zeros(vec![2, 5]));
    assert!(mha.forward(&g, x, x, x, None).is_err());
}

#[test]
fn attention_grads_match_finite_differences() {
    let (mut store, mha) = mha_setup(6, 4, 2);
    let mut r = rng(7);
    let q = add_random(&mut store, &mut r, "q", &[3, 4]);
    let kv = add_random(&mut store, &mut r, "kv", &[5, 4]);
    let mask = [false, true, false, false, false];
    let err = store_grad_check(&store, &|g| {
        let kvv = g.param(kv);
        let out = mha.forward(g, g.param(q), kvv, kvv, Some(&mask)).unwrap();
        weighted_sum(g.tape(), out.out, 8)
    });
    assert!(err <= 1e-6, "{err:e}");
}
