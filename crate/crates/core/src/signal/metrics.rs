use super::AudioClip;
use crate::error::{Error, Result};

/// SNR values are clamped to ±this many dB.
pub const SNR_CLAMP_DB: f64 = 120.0;

fn same_shape(a: &AudioClip, b: &AudioClip, what: &str) -> Result<()> {
    if a.len() != b.len() || a.sample_rate != b.sample_rate {
        return Err(Error::Input(format!(
            "{what}: clips differ ({} samples @ {} Hz vs {} samples @ {} Hz)",
            a.len(),
            a.sample_rate,
            b.len(),
            b.sample_rate
        )));
    }
    Ok(())
}

/// Scales `interferer` by `g` so that `10·log10(‖target‖² / ‖g·interferer‖²)`
/// equals `snr_db`, and returns `(target + g·interferer, g·interferer)`.
pub fn mix_at_snr(
    target: &AudioClip,
    interferer: &AudioClip,
    snr_db: f64,
) -> Result<(AudioClip, AudioClip)> {
    same_shape(target, interferer, "mix_at_snr")?;
    if !snr_db.is_finite() {
        return Err(Error::Input(format!("snr must be finite, got {snr_db}")));
    }
    let (et, ei) = (target.energy(), interferer.energy());
    if et <= 0.0 || ei <= 0.0 {
        return Err(Error::Input("mix_at_snr: zero-energy input".into()));
    }
    let gain = (et / (ei * 10f64.powf(snr_db / 10.0))).sqrt();
    let scaled: Vec<f64> = interferer.samples.iter().map(|s| s * gain).collect();
    let mixture = target
        .samples
        .iter()
        .zip(&scaled)
        .map(|(t, n)| t + n)
        .collect();
    Ok((
        AudioClip::new(mixture, target.sample_rate)?,
        AudioClip::new(scaled, target.sample_rate)?,
    ))
}

/// `10·log10(‖s‖² / max(‖s−ŝ‖², 1e-12·‖s‖²))`, clamped to ±120 dB.
pub fn snr(reference: &AudioClip, estimate: &AudioClip) -> Result<f64> {
    same_shape(reference, estimate, "snr")?;
    let es = reference.energy();
    if es <= 0.0 {
        return Err(Error::Input("snr: zero-energy reference".into()));
    }
    let err: f64 = reference
        .samples
        .iter()
        .zip(&estimate.samples)
        .map(|(s, e)| (s - e) * (s - e))
        .sum();
    let db = 10.0 * (es / err.max(1e-12 * es)).log10();
    Ok(db.clamp(-SNR_CLAMP_DB, SNR_CLAMP_DB))
}

/// Output SNR minus input (mixture) SNR, both against `reference`.
pub fn snr_improvement(
    mixture: &AudioClip,
    estimate: &AudioClip,
    reference: &AudioClip,
) -> Result<f64> {
    Ok(snr(reference, estimate)? - snr(reference, mixture)?)
}
