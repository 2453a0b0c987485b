//! Test-only oracles shared by the integration suites.
#![allow(dead_code)]

use mctse::tensor::{Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Uniform entries in ±scale, kept at least `gap` away from zero so that
/// kinked functions (relu, abs) are not probed across their kink.
pub fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64, gap: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let v: f64 = rng.random_range(gap..scale);
            if rng.random_bool(0.5) {
                v
            } else {
                -v
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap().with_grad()
}

/// Reduces any output to a scalar with fixed pseudo-random weights so every
/// output entry contributes a distinct amount to the checked loss.
pub fn weighted_sum(tape: &Tape<f64>, v: Var, seed: u64) -> Var {
    let shape = tape.shape(v);
    let n: usize = shape.iter().product();
    let mut r = rng(seed ^ 0x5eed);
    let w = tape
        .constant(shape, (0..n).map(|_| r.random_range(-1.0..1.0)).collect())
        .unwrap();
    tape.reduce_sum(tape.mul(v, w).unwrap()).unwrap()
}

/// Norm-wise relative error `‖a−b‖ / max(‖a‖, ‖b‖)`.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        .sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let denom = na.max(nb);
    if denom < 1e-300 {
        0.0
    } else {
        diff / denom
    }
}

/// Central finite differences of a scalar function of several tensors.
pub fn finite_diff(
    inputs: &[Tensor<f64>],
    f: &dyn Fn(&Tape<f64>, &[Var]) -> Var,
    h: f64,
) -> Vec<Vec<f64>> {
    let eval = |ins: &[Tensor<f64>]| {
        let tape = Tape::new();
        let vars: Vec<Var> = ins.iter().map(|t| tape.leaf(t)).collect();
        let out = f(&tape, &vars);
        tape.scalar_value(out)
    };
    let mut all = Vec::new();
    for (which, t) in inputs.iter().enumerate() {
        let mut g = vec![0.0; t.numel()];
        for j in 0..t.numel() {
            let mut plus = inputs.to_vec();
            plus[which].data_mut()[j] += h;
            let mut minus = inputs.to_vec();
            minus[which].data_mut()[j] -= h;
            g[j] = (eval(&plus) - eval(&minus)) / (2.0 * h);
        }
        all.push(g);
    }
    all
}

/// Analytic gradients through the tape for every input.
pub fn analytic(inputs: &[Tensor<f64>], f: &dyn Fn(&Tape<f64>, &[Var]) -> Var) -> Vec<Vec<f64>> {
    let tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t)).collect();
    let out = f(&tape, &vars);
    let grads = tape.backward(out).unwrap();
    vars.iter()
        .zip(inputs)
        .map(|(v, t)| {
            grads
                .get(*v)
                .map(|g| g.to_vec())
                .unwrap_or_else(|| vec![0.0; t.numel()])
        })
        .collect()
}

/// Largest per-input relative error between analytic and numeric gradients.
pub fn grad_check(inputs: &[Tensor<f64>], f: &dyn Fn(&Tape<f64>, &[Var]) -> Var) -> f64 {
    let a = analytic(inputs, f);
    let n = finite_diff(inputs, f, FD_STEP);
    a.iter()
        .zip(&n)
        .map(|(x, y)| rel_err(x, y))
        .fold(0.0, f64::max)
}

/// Largest per-parameter relative error between graph gradients and central
/// differences, perturbing every entry of every parameter in `store`.
pub fn store_grad_check(
    store: &mctse::nn::ParamStore<f64>,
    f: &dyn Fn(&mctse::nn::Graph<f64>) -> Var,
) -> f64 {
    store_grad_check_step(store, f, FD_STEP)
}

/// [`store_grad_check`] with an explicit step. Losses whose value dwarfs
/// some gradients need a wider step to keep roundoff below the tolerance.
pub fn store_grad_check_step(
    store: &mctse::nn::ParamStore<f64>,
    f: &dyn Fn(&mctse::nn::Graph<f64>) -> Var,
    h: f64,
) -> f64 {
    use mctse::nn::Graph;
    let g = Graph::new(store);
    let loss = f(&g);
    let grads = g.backward(loss).unwrap();
    let eval = |s: &mctse::nn::ParamStore<f64>| {
        let g = Graph::new(s);
        let l = f(&g);
        g.scalar_value(l)
    };
    let mut worst: f64 = 0.0;
    for id in store.ids().collect::<Vec<_>>() {
        let n = store.get(id).numel();
        let mut numeric = vec![0.0; n];
        let mut work = store.clone();
        for j in 0..n {
            let orig = store.get(id).data()[j];
            work.get_mut(id).data_mut()[j] = orig + h;
            let up = eval(&work);
            work.get_mut(id).data_mut()[j] = orig - h;
            let down = eval(&work);
            work.get_mut(id).data_mut()[j] = orig;
            numeric[j] = (up - down) / (2.0 * h);
        }
        let analytic = grads.get(id).map(<[f64]>::to_vec).unwrap_or(vec![0.0; n]);
        let e = rel_err(&analytic, &numeric);
        if std::env::var("FD_DEBUG").is_ok() {
            eprintln!("{} {e:e}", store.name(id));
        }
        worst = worst.max(e);
    }
    worst
}

/// Adds a random tensor to `store` as a trainable entry.
pub fn add_random(
    store: &mut mctse::nn::ParamStore<f64>,
    rng: &mut ChaCha8Rng,
    name: &str,
    shape: &[usize],
) -> mctse::nn::ParamId {
    store.add(name, rand_tensor(rng, shape, 1.0, 0.0)).unwrap()
}

/// Replaces every rank-1 parameter (biases, gains, slopes) with random
/// values bounded away from zero, so checks do not sit on relu kinks that
/// zero-initialised biases would create.
pub fn randomize_vectors(store: &mut mctse::nn::ParamStore<f64>, rng: &mut ChaCha8Rng) {
    for id in store.ids().collect::<Vec<_>>() {
        let shape = store.get(id).shape().to_vec();
        if shape.len() == 1 {
            let v = rand_tensor(rng, &shape, 0.5, 0.05).into_data();
            store.set(id, v).unwrap();
        }
    }
}
