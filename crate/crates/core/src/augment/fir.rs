//! Telephony-style band limitation.

use rand::Rng;

use crate::error::{Error, Result};
use crate::frontend::Waveform;

use super::dsp::{convolve_same, design_bandpass};

/// Band-pass filtering with fixed cutoffs, same-length output.
pub fn bandpass(wave: &Waveform, low_hz: f64, high_hz: f64, taps: usize) -> Result<Waveform> {
    let nyquist = wave.sample_rate as f64 / 2.0;
    if !(low_hz > 0.0 && low_hz < high_hz && high_hz < nyquist) || taps % 2 == 0 {
        return Err(Error::InvalidArgument(format!(
            "band-pass needs 0 < low < high < {nyquist} and an odd tap count, got {low_hz}..{high_hz} with {taps} taps"
        )));
    }
    let h = design_bandpass(low_hz, high_hz, taps, wave.sample_rate as f64);
    Ok(wave.with_samples(convolve_same(&wave.samples, &h).into_iter().map(|v| v as f32).collect()))
}

/// Band-pass filter with cutoffs drawn uniformly from the given ranges.
pub fn narrowband_fir(
    wave: &Waveform,
    low_range: (f64, f64),
    high_range: (f64, f64),
    taps: usize,
    rng: &mut impl Rng,
) -> Result<Waveform> {
    if !(low_range.0 <= low_range.1 && high_range.0 <= high_range.1) {
        return Err(Error::InvalidArgument("narrowband_fir: cutoff ranges must be ordered".into()));
    }
    let low = rng.random_range(low_range.0..=low_range.1);
    let high = rng.random_range(high_range.0..=high_range.1);
    bandpass(wave, low, high, taps)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::augment::dsp::design_bandpass;
    use crate::rng::RngStream;

    fn rms(x: &[f32]) -> f64 {
        (x.iter().map(|v| (*v as f64).powi(2)).sum::<f64>() / x.len() as f64).sqrt()
    }

    fn sine(f: f64) -> Waveform {
        Waveform::new(
            (0..16_000)
                .map(|i| (0.5 * (2.0 * std::f64::consts::PI * f * i as f64 / 16_000.0).sin()) as f32)
                .collect(),
            16_000,
        )
    }

    #[test]
    fn passband_kept_stopband_removed() {
        let pass = bandpass(&sine(1000.0), 300.0, 3400.0, 65).unwrap();
        let stop = bandpass(&sine(7000.0), 300.0, 3400.0, 65).unwrap();
        // skip the filter's edge transients
        let mid = 100..15_900;
        let pass_db = 20.0 * (rms(&pass.samples[mid.clone()]) / rms(&sine(1000.0).samples[mid.clone()])).log10();
        let stop_db = 20.0 * (rms(&stop.samples[mid.clone()]) / rms(&sine(7000.0).samples[mid])).log10();
        assert!(pass_db.abs() <= 3.0, "passband change {pass_db} dB");
        assert!(stop_db <= -20.0, "stopband change {stop_db} dB");
    }

    #[test]
    fn impulse_response_is_the_filter() {
        let mut x = vec![0.0f32; 200];
        x[32] = 1.0;
        let y = bandpass(&Waveform::new(x, 16_000), 300.0, 3400.0, 65).unwrap();
        let h = design_bandpass(300.0, 3400.0, 65, 16_000.0);
        for (a, b) in y.samples[..65].iter().zip(&h) {
            assert!((*a as f64 - b).abs() < 1e-6);
        }
        assert!(y.samples[65..].iter().all(|v| *v == 0.0));
    }

    #[test]
    fn random_cutoffs_preserve_length() {
        let mut rng = RngStream::new(3, 0).rng();
        let y = narrowband_fir(&sine(440.0), (100.0, 400.0), (3000.0, 4000.0), 65, &mut rng).unwrap();
        assert_eq!(y.len(), 16_000);
        assert!(bandpass(&sine(440.0), 400.0, 300.0, 65).is_err());
    }
}
