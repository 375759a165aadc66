//! Convolutive and impulsive signal-dependent noise in the style of RawBoost.

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frontend::Waveform;

use super::dsp::{convolve_sum_same, design_from_response};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Notch {
    pub center_hz: f64,
    pub width_hz: f64,
    /// Attenuation at the center; `f64::INFINITY` removes the band entirely.
    pub depth_db: f64,
}

impl Notch {
    fn gain(&self, f: f64) -> f64 {
        let half = self.width_hz / 2.0;
        let d = (f - self.center_hz).abs();
        if d >= half {
            return 1.0;
        }
        let floor = if self.depth_db.is_infinite() {
            0.0
        } else {
            10f64.powf(-self.depth_db / 20.0)
        };
        let bump = 0.5 * (1.0 + (std::f64::consts::PI * d / half).cos());
        1.0 - (1.0 - floor) * bump
    }
}

/// Linear-phase FIR whose magnitude response is the product of the notches.
pub fn design_multi_notch(notches: &[Notch], taps: usize, sample_rate: f64) -> Vec<f64> {
    design_from_response(|f| notches.iter().map(|n| n.gain(f)).product(), taps, sample_rate)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConvolutiveParams {
    pub n_notches: usize,
    pub min_width_hz: f64,
    pub max_width_hz: f64,
    pub min_depth_db: f64,
    pub max_depth_db: f64,
    pub min_center_hz: f64,
    pub max_center_hz: f64,
    /// Powers of the input that are filtered and summed (1 = linear term).
    pub orders: Vec<u32>,
    /// Odd filter length.
    pub taps: usize,
}

impl Default for ConvolutiveParams {
    fn default() -> Self {
        ConvolutiveParams {
            n_notches: 5,
            min_width_hz: 10.0,
            max_width_hz: 100.0,
            min_depth_db: 5.0,
            max_depth_db: 25.0,
            min_center_hz: 20.0,
            max_center_hz: 7980.0,
            orders: vec![1, 2, 3],
            taps: 1601,
        }
    }
}

impl ConvolutiveParams {
    pub fn validate(&self) -> Result<()> {
        let ok = self.min_width_hz > 0.0
            && self.min_width_hz <= self.max_width_hz
            && self.min_depth_db >= 0.0
            && self.min_depth_db <= self.max_depth_db
            && self.min_center_hz >= 0.0
            && self.min_center_hz <= self.max_center_hz
            && !self.orders.is_empty()
            && self.orders.iter().all(|o| *o >= 1)
            && self.taps % 2 == 1;
        if ok {
            Ok(())
        } else {
            Err(Error::Config("rawboost_convolutive: invalid parameter ranges".into()))
        }
    }

    fn draw_notches(&self, rng: &mut impl Rng) -> Vec<Notch> {
        (0..self.n_notches)
            .map(|_| Notch {
                center_hz: rng.random_range(self.min_center_hz..=self.max_center_hz),
                width_hz: rng.random_range(self.min_width_hz..=self.max_width_hz),
                depth_db: rng.random_range(self.min_depth_db..=self.max_depth_db),
            })
            .collect()
    }
}

/// `Σ_k (x^k ∗ h_k)`, rescaled so its peak equals the input peak.
pub fn apply_convolutive(wave: &Waveform, filters: &[(u32, Vec<f64>)]) -> Waveform {
    let peak = wave.peak() as f64;
    if peak == 0.0 || filters.is_empty() {
        return wave.with_samples(vec![0.0; wave.len()]);
    }
    let signals: Vec<Vec<f64>> = filters
        .iter()
        .map(|(order, _)| wave.samples.iter().map(|v| (*v as f64).powi(*order as i32)).collect())
        .collect();
    let taps: Vec<Vec<f64>> = filters.iter().map(|(_, h)| h.clone()).collect();
    let y = convolve_sum_same(&signals, &taps);
    let out_peak = y.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let gain = if out_peak > 0.0 { peak / out_peak } else { 0.0 };
    wave.with_samples(y.iter().map(|v| (v * gain) as f32).collect())
}

pub fn rawboost_convolutive(wave: &Waveform, params: &ConvolutiveParams, rng: &mut impl Rng) -> Result<Waveform> {
    params.validate()?;
    let sr = wave.sample_rate as f64;
    let filters: Vec<(u32, Vec<f64>)> = params
        .orders
        .iter()
        .map(|order| (*order, design_multi_notch(&params.draw_notches(rng), params.taps, sr)))
        .collect();
    Ok(apply_convolutive(wave, &filters))
}

/// Adds noise at a random `density` fraction of sample positions, each
/// noise sample proportional to the signal there, scaled so the overall
/// signal-to-noise ratio is `snr_db`.
pub fn isd_additive_at_snr(wave: &Waveform, snr_db: f64, density: f64, rng: &mut impl Rng) -> Waveform {
    let n = wave.len();
    if n == 0 {
        return wave.clone();
    }
    let count = ((density * n as f64).round() as usize).clamp(1, n);
    let mut noise = vec![0.0f64; n];
    let positions = sample(rng, n, count);
    for i in positions.iter() {
        noise[i] = wave.samples[i] as f64 * rng.random_range(-1.0..=1.0);
    }
    let ps: f64 = wave.samples.iter().map(|v| (*v as f64).powi(2)).sum();
    let pn: f64 = noise.iter().map(|v| v * v).sum();
    if pn == 0.0 {
        return wave.clone();
    }
    let gain = (ps / (pn * 10f64.powf(snr_db / 10.0))).sqrt();
    wave.with_samples(
        wave.samples
            .iter()
            .zip(&noise)
            .map(|(x, e)| ((*x as f64 + gain * e) as f32).clamp(-1.5, 1.5))
            .collect(),
    )
}

pub fn rawboost_isd_additive(
    wave: &Waveform,
    snr_range: (f64, f64),
    density: f64,
    rng: &mut impl Rng,
) -> Result<Waveform> {
    let (lo, hi) = snr_range;
    if !(lo <= hi) || !(density > 0.0 && density <= 1.0) {
        return Err(Error::InvalidArgument("rawboost_isd: invalid SNR range or density".into()));
    }
    let snr = rng.random_range(lo..=hi);
    Ok(isd_additive_at_snr(wave, snr, density, rng))
}

#[cfg(test)]
mod tests {
    use rustfft::num_complex::Complex;
    use rustfft::FftPlanner;

    use super::*;
    use crate::augment::dsp::fir_magnitude;
    use crate::rng::RngStream;

    fn tone(freqs: &[f64], n: usize) -> Waveform {
        let s = (0..n)
            .map(|i| {
                freqs
                    .iter()
                    .map(|f| 0.4 * (2.0 * std::f64::consts::PI * f * i as f64 / 16_000.0).sin())
                    .sum::<f64>() as f32
            })
            .collect();
        Waveform::new(s, 16_000)
    }

    /// Energy within ±`half` Hz of `f0`, measured on the central part.
    fn band_energy(x: &[f32], f0: f64, half: f64) -> f64 {
        let seg = &x[4096..4096 + 16_384];
        let mut buf: Vec<Complex<f64>> = seg.iter().map(|v| Complex::new(*v as f64, 0.0)).collect();
        FftPlanner::new().plan_fft_forward(buf.len()).process(&mut buf);
        let bin_hz = 16_000.0 / buf.len() as f64;
        (0..buf.len() / 2)
            .filter(|k| ((*k as f64 * bin_hz) - f0).abs() <= half)
            .map(|k| buf[k].norm_sqr())
            .sum()
    }

    #[test]
    fn zero_in_zero_out_and_length() {
        let mut rng = RngStream::new(1, 1).rng();
        let p = ConvolutiveParams::default();
        let z = Waveform::new(vec![0.0; 4000], 16_000);
        let y = rawboost_convolutive(&z, &p, &mut rng).unwrap();
        assert_eq!(y.samples, vec![0.0; 4000]);
        let x = tone(&[300.0, 1700.0], 4000);
        let y = rawboost_convolutive(&x, &p, &mut rng).unwrap();
        assert_eq!(y.len(), x.len());
        assert!((y.peak() - x.peak()).abs() < 1e-5);
        let y = isd_additive_at_snr(&z, 20.0, 0.1, &mut rng);
        assert_eq!(y.samples, z.samples);
        let y = rawboost_isd_additive(&x, (10.0, 40.0), 0.1, &mut rng).unwrap();
        assert_eq!(y.len(), x.len());
    }

    #[test]
    fn full_notch_removes_the_tone() {
        let notch = Notch {
            center_hz: 1000.0,
            width_hz: 100.0,
            depth_db: f64::INFINITY,
        };
        let h = design_multi_notch(&[notch], 1601, 16_000.0);
        assert!(fir_magnitude(&h, 1000.0, 16_000.0) < 0.1);
        assert!((fir_magnitude(&h, 3000.0, 16_000.0) - 1.0).abs() < 0.01);

        let x = tone(&[1000.0, 3000.0], 24_000);
        let y = apply_convolutive(&x, &[(1, h)]);
        // compare band energy relative to the untouched 3 kHz component
        let before = band_energy(&x.samples, 1000.0, 20.0) / band_energy(&x.samples, 3000.0, 20.0);
        let after = band_energy(&y.samples, 1000.0, 20.0) / band_energy(&y.samples, 3000.0, 20.0);
        let drop_db = 10.0 * (before / after).log10();
        assert!(drop_db >= 20.0, "attenuation {drop_db} dB");
    }

    #[test]
    fn isd_hits_the_requested_snr() {
        let mut rng = RngStream::new(5, 0).rng();
        let x: Vec<f32> = (0..32_000).map(|_| rng.random_range(-0.1..0.1)).collect();
        let x = Waveform::new(x, 16_000);
        for snr in [10.0, 25.0, 40.0] {
            let y = isd_additive_at_snr(&x, snr, 0.1, &mut rng);
            let ps: f64 = x.samples.iter().map(|v| (*v as f64).powi(2)).sum();
            let pn: f64 = x.samples.iter().zip(&y.samples).map(|(a, b)| ((b - a) as f64).powi(2)).sum();
            let achieved = 10.0 * (ps / pn).log10();
            assert!((achieved - snr).abs() < 1.0, "{achieved} vs {snr}");
            let changed = x.samples.iter().zip(&y.samples).filter(|(a, b)| a != b).count();
            assert!(changed <= 3200);
        }
    }
}
