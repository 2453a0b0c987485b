use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::ComplexFeature;
use crate::signal::{AudioClip, ComplexSpec, SNR_CLAMP_DB};
use crate::tensor::{Float, Tape, Var};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    /// Weight of the spectral L1 term.
    pub lambda: f64,
    /// The SNR term is clamped to ±this many dB.
    pub snr_clamp_db: f64,
    /// Error-energy floor relative to the target energy.
    pub eps: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda: 5.0,
            snr_clamp_db: SNR_CLAMP_DB,
            eps: 1e-12,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) || !(self.snr_clamp_db > 0.0) || !(self.eps > 0.0) {
            return Err(Error::Config(format!(
                "loss needs lambda ≥ 0 and positive clamp and eps, got {self:?}"
            )));
        }
        Ok(())
    }
}

/// Negative clamped SNR of `estimate` against the constant `target`, in dB.
pub fn snr_loss<S: Float>(
    tape: &Tape<S>,
    target: Var,
    estimate: Var,
    cfg: &LossConfig,
) -> Result<Var> {
    let es: f64 = tape
        .value(target)
        .iter()
        .map(|v| v.as_f64() * v.as_f64())
        .sum();
    if es <= 0.0 {
        return Err(Error::Input("loss: zero-energy target".into()));
    }
    let err = tape.reduce_sum(tape.square(tape.sub(target, estimate)?)?)?;
    // 10·log10(max(err/es, eps)), so a perfect estimate lands exactly on the floor.
    let ratio = tape.scale(err, S::from_f64(1.0 / es))?;
    let floored = tape.clamp(ratio, S::from_f64(cfg.eps), S::max_value())?;
    let db = tape.scale(tape.log10(floored)?, S::from_f64(10.0))?;
    let c = S::from_f64(cfg.snr_clamp_db);
    tape.clamp(db, -c, c)
}

/// Mean over frames and bins of `|ΔR| + |ΔI|`.
pub fn spectral_l1<S: Float>(
    tape: &Tape<S>,
    target: ComplexFeature,
    estimate: ComplexFeature,
) -> Result<Var> {
    let dr = tape.mean(tape.abs(tape.sub(target.real, estimate.real)?)?)?;
    let di = tape.mean(tape.abs(tape.sub(target.imag, estimate.imag)?)?)?;
    tape.add(dr, di)
}

/// `L_snr + λ·L_L1` on the tape; gradients flow into both estimates.
pub fn loss_graph<S: Float>(
    tape: &Tape<S>,
    target: Var,
    estimate: Var,
    target_spec: ComplexFeature,
    estimate_spec: ComplexFeature,
    cfg: &LossConfig,
) -> Result<Var> {
    if tape.shape(target) != tape.shape(estimate) {
        return Err(Error::dim(
            "loss",
            &tape.shape(target),
            &tape.shape(estimate),
        ));
    }
    let snr = snr_loss(tape, target, estimate, cfg)?;
    let l1 = spectral_l1(tape, target_spec, estimate_spec)?;
    tape.add(snr, tape.scale(l1, S::from_f64(cfg.lambda))?)
}

/// Loss value for concrete clips and spectra.
pub fn loss(
    target: &AudioClip,
    estimate: &AudioClip,
    s: &ComplexSpec,
    s_hat: &ComplexSpec,
    cfg: &LossConfig,
) -> Result<f64> {
    if target.len() != estimate.len() {
        return Err(Error::dim("loss", &[target.len()], &[estimate.len()]));
    }
    let tape = Tape::<f64>::new();
    let t = tape.constant(vec![target.len()], target.samples.clone())?;
    let e = tape.constant(vec![estimate.len()], estimate.samples.clone())?;
    let spec = |x: &ComplexSpec| -> Result<ComplexFeature> {
        ComplexFeature::new(&tape, tape.leaf(&x.real), tape.leaf(&x.imag))
    };
    let out = loss_graph(&tape, t, e, spec(s)?, spec(s_hat)?, cfg)?;
    Ok(tape.scalar_value(out))
}
