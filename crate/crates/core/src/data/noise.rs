use super::DataError;
use crate::feat::AudioBuffer;

pub fn mean_square(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>() / x.len().max(1) as f64
}

/// Factor that brings noise of power `noise_power` to `snr_db` below
/// `signal_power`.
pub fn noise_scale(signal_power: f64, noise_power: f64, snr_db: f64) -> f64 {
    (signal_power / (noise_power * 10f64.powf(snr_db / 10.0))).sqrt()
}

/// Adds `noise` (looped or truncated to the clean length) scaled to the
/// requested SNR, rounding and clipping to 16 bits. An infinite SNR returns
/// the clean signal unchanged.
pub fn mix_noise(clean: &AudioBuffer, noise: &AudioBuffer, snr_db: f64) -> Result<AudioBuffer, DataError> {
    if snr_db.is_nan() || snr_db == f64::NEG_INFINITY {
        return Err(DataError::InvalidSnr(snr_db));
    }
    let c: Vec<f64> = clean.samples().iter().map(|&s| f64::from(s)).collect();
    let ps = mean_square(&c);
    if ps == 0.0 {
        return Err(DataError::SilentSignal);
    }
    if snr_db == f64::INFINITY {
        return Ok(clean.clone());
    }
    let n: Vec<f64> = noise.samples().iter().cycle().take(c.len()).map(|&s| f64::from(s)).collect();
    let pn = mean_square(&n);
    if pn == 0.0 {
        return Err(DataError::SilentNoise);
    }
    let k = noise_scale(ps, pn, snr_db);
    let mixed = c
        .iter()
        .zip(&n)
        .map(|(&s, &v)| (s + k * v).round().clamp(f64::from(i16::MIN), f64::from(i16::MAX)) as i16)
        .collect();
    Ok(AudioBuffer::new(mixed, clean.sample_rate()).expect("same length and rate as clean"))
}

/// SNR of `mixed` against `clean`, taking `mixed - clean` as the noise.
pub fn realized_snr_db(clean: &AudioBuffer, mixed: &AudioBuffer) -> f64 {
    let c: Vec<f64> = clean.samples().iter().map(|&s| f64::from(s)).collect();
    let d: Vec<f64> = mixed
        .samples()
        .iter()
        .zip(clean.samples())
        .map(|(&m, &s)| f64::from(m) - f64::from(s))
        .collect();
    10.0 * (mean_square(&c) / mean_square(&d)).log10()
}
