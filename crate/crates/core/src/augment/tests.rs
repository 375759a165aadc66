use proptest::prelude::*;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use super::*;
use crate::frontend::Waveform;
use crate::rng::RngStream;

fn sine(freq: f64, n: usize) -> Waveform {
    Waveform::new(
        (0..n)
            .map(|i| (0.5 * (2.0 * std::f64::consts::PI * freq * i as f64 / 16_000.0).sin()) as f32)
            .collect(),
        16_000,
    )
}

/// Frequency of the largest FFT bin of a Hann-windowed central segment,
/// refined by parabolic interpolation.
fn peak_hz(x: &[f32]) -> f64 {
    let n = 16_384.min(x.len().next_power_of_two() / 2);
    let start = (x.len() - n) / 2;
    let mut buf: Vec<Complex<f64>> = x[start..start + n]
        .iter()
        .enumerate()
        .map(|(i, v)| {
            let w = 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos();
            Complex::new(*v as f64 * w, 0.0)
        })
        .collect();
    FftPlanner::new().plan_fft_forward(n).process(&mut buf);
    let mag: Vec<f64> = buf[..n / 2].iter().map(|c| c.norm()).collect();
    let k = (1..n / 2 - 1).max_by(|a, b| mag[*a].total_cmp(&mag[*b])).unwrap();
    let (a, b, c) = (mag[k - 1].ln(), mag[k].ln(), mag[k + 1].ln());
    let delta = 0.5 * (a - c) / (a - 2.0 * b + c);
    (k as f64 + delta) * 16_000.0 / n as f64
}

fn correlation(a: &[f32], b: &[f32]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| (*x as f64) * (*y as f64)).sum();
    let na: f64 = a.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
    dot / (na * nb)
}

#[test]
fn pitch_shift_octave_doubles_frequency() {
    let x = sine(440.0, 48_000);
    let y = pitch_shift(&x, 12.0).unwrap();
    assert_eq!(y.len(), x.len());
    let f = peak_hz(&y.samples);
    assert!((f - 880.0).abs() <= 0.03 * 880.0, "peak at {f} Hz");
    let down = pitch_shift(&x, -2.0).unwrap();
    let expected = 440.0 * 2f64.powf(-2.0 / 12.0);
    assert!((peak_hz(&down.samples) - expected).abs() <= 0.03 * expected);
}

#[test]
fn pitch_shift_zero_is_identity() {
    let x = sine(440.0, 16_000);
    let y = pitch_shift(&x, 0.0).unwrap();
    assert!(correlation(&x.samples, &y.samples) > 0.99);
}

#[test]
fn time_stretch_keeps_pitch() {
    let x = sine(440.0, 48_000);
    let y = time_stretch(&x, 1.1).unwrap();
    let f = peak_hz(&y.samples);
    assert!((f - 440.0).abs() <= 0.03 * 440.0, "peak at {f} Hz");
    assert_eq!(time_stretch(&x, 1.0).unwrap(), x);
    assert_eq!(time_stretch(&sine(300.0, 96_000), 2.0).unwrap().len(), 48_000);
    assert!(time_stretch(&x, 0.0).is_err());
    assert!(time_stretch(&x, -1.0).is_err());
}

#[test]
fn time_stretch_is_continuous_on_a_sine() {
    // a well aligned overlap-add has no large sample-to-sample jumps
    let x = sine(440.0, 32_000);
    let y = time_stretch(&x, 0.9).unwrap();
    let max_step = 0.5 * 2.0 * std::f64::consts::PI * 440.0 / 16_000.0;
    let worst = y.samples[512..y.len() - 512]
        .windows(2)
        .map(|w| (w[1] - w[0]).abs() as f64)
        .fold(0.0, f64::max);
    assert!(worst < 1.5 * max_step, "step {worst} vs {max_step}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn length_contracts(len in 600usize..6000, rate in 0.5f64..2.0, semis in -4.0f64..4.0, seed in any::<u64>()) {
        let mut rng = RngStream::new(seed, 0).rng();
        let x = Waveform::new((0..len).map(|_| rand::Rng::random_range(&mut rng, -0.9f32..0.9)).collect(), 16_000);
        let y = time_stretch(&x, rate).unwrap();
        prop_assert!((y.len() as f64 - len as f64 / rate).abs() <= 256.0);
        prop_assert_eq!(pitch_shift(&x, semis).unwrap().len(), len);
        let mut r1 = RngStream::new(seed, 1).rng();
        let mut r2 = RngStream::new(seed, 1).rng();
        let aug = Augmentation::default_for("rawboost_isd").unwrap();
        prop_assert_eq!(aug.apply_waveform(&x, &mut r1).unwrap(), aug.apply_waveform(&x, &mut r2).unwrap());
        let aug = Augmentation::default_for("narrowband_fir").unwrap();
        let y = aug.apply_waveform(&x, &mut r1).unwrap();
        prop_assert_eq!(y.len(), len);
        prop_assert!(y.samples.iter().all(|v| v.is_finite() && v.abs() <= HEADROOM));
    }
}
