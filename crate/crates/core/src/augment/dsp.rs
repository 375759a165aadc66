//! Shared filtering helpers.

use std::cell::RefCell;
use std::f64::consts::PI;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

thread_local! {
    static PLANNER: RefCell<FftPlanner<f64>> = RefCell::new(FftPlanner::new());
}

/// Cached plan from this thread's planner.
fn plan(size: usize, inverse: bool) -> Arc<dyn Fft<f64>> {
    PLANNER.with(|p| {
        let mut p = p.borrow_mut();
        if inverse {
            p.plan_fft_inverse(size)
        } else {
            p.plan_fft_forward(size)
        }
    })
}

/// Smallest integer `>= n` whose only prime factors are 2, 3 and 5.
fn smooth_size(n: usize) -> usize {
    (n.max(1)..)
        .find(|&m| {
            let mut r = m;
            for p in [2, 3, 5] {
                while r % p == 0 {
                    r /= p;
                }
            }
            r == 1
        })
        .unwrap()
}

pub fn hann_symmetric(n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![1.0];
    }
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / (n - 1) as f64).cos())
        .collect()
}

pub fn hann_periodic(n: usize) -> Vec<f64> {
    (0..n).map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos()).collect()
}

pub fn hamming(n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![1.0];
    }
    (0..n)
        .map(|i| 0.54 - 0.46 * (2.0 * PI * i as f64 / (n - 1) as f64).cos())
        .collect()
}

fn sinc(x: f64) -> f64 {
    if x == 0.0 {
        1.0
    } else {
        (PI * x).sin() / (PI * x)
    }
}

/// Windowed-sinc linear-phase band-pass design (Hamming window).
pub fn design_bandpass(low_hz: f64, high_hz: f64, taps: usize, sample_rate: f64) -> Vec<f64> {
    let (f1, f2) = (low_hz / sample_rate, high_hz / sample_rate);
    let mid = (taps as f64 - 1.0) / 2.0;
    let win = hamming(taps);
    (0..taps)
        .map(|n| {
            let t = n as f64 - mid;
            win[n] * (2.0 * f2 * sinc(2.0 * f2 * t) - 2.0 * f1 * sinc(2.0 * f1 * t))
        })
        .collect()
}

/// Magnitude response of an FIR at `freq_hz`.
pub fn fir_magnitude(taps: &[f64], freq_hz: f64, sample_rate: f64) -> f64 {
    let w = 2.0 * PI * freq_hz / sample_rate;
    let (re, im) = taps
        .iter()
        .enumerate()
        .fold((0.0, 0.0), |(re, im), (n, h)| (re + h * (w * n as f64).cos(), im - h * (w * n as f64).sin()));
    (re * re + im * im).sqrt()
}

/// Linear-phase FIR from a sampled magnitude response (frequency sampling
/// design, Hann-windowed). `response` maps frequency in Hz to gain.
pub fn design_from_response(response: impl Fn(f64) -> f64, taps: usize, sample_rate: f64) -> Vec<f64> {
    let grid = (4 * taps).next_power_of_two();
    let mut spec: Vec<Complex<f64>> = (0..grid)
        .map(|i| {
            let k = if i <= grid / 2 { i } else { grid - i };
            Complex::new(response(k as f64 * sample_rate / grid as f64), 0.0)
        })
        .collect();
    plan(grid, true).process(&mut spec);
    let center = (taps - 1) / 2;
    let win = hann_symmetric(taps);
    (0..taps)
        .map(|n| {
            let idx = (n as isize - center as isize).rem_euclid(grid as isize) as usize;
            spec[idx].re / grid as f64 * win[n]
        })
        .collect()
}

/// Direct "same"-mode convolution: output sample `n` is aligned with input
/// sample `n` through the filter's center tap.
pub fn convolve_same(x: &[f32], taps: &[f64]) -> Vec<f64> {
    let center = (taps.len() - 1) / 2;
    let n = x.len();
    (0..n)
        .map(|i| {
            // x[j] pairs with taps[i + center - j]
            let hi = (i + center).min(n - 1);
            let lo = (i + center + 1).saturating_sub(taps.len());
            (lo..=hi).map(|j| taps[i + center - j] * x[j] as f64).sum()
        })
        .collect()
}

/// `Σ_k signals[k] * filters[k]` in "same" mode, computed in the frequency
/// domain. All filters must share one odd length.
pub fn convolve_sum_same(signals: &[Vec<f64>], filters: &[Vec<f64>]) -> Vec<f64> {
    assert_eq!(signals.len(), filters.len());
    let Some(first) = signals.first() else {
        return Vec::new();
    };
    let len = first.len();
    let taps = filters[0].len();
    let size = smooth_size(len + taps - 1);
    let (fwd, inv) = (plan(size, false), plan(size, true));
    let mut acc = vec![Complex::new(0.0, 0.0); size];
    let to_complex = |v: &[f64]| -> Vec<Complex<f64>> {
        let mut buf: Vec<Complex<f64>> = v.iter().map(|x| Complex::new(*x, 0.0)).collect();
        buf.resize(size, Complex::new(0.0, 0.0));
        buf
    };
    for (s, h) in signals.iter().zip(filters) {
        let mut xs = to_complex(s);
        let mut hs = to_complex(h);
        fwd.process(&mut xs);
        fwd.process(&mut hs);
        for ((a, x), h) in acc.iter_mut().zip(&xs).zip(&hs) {
            *a += x * h;
        }
    }
    inv.process(&mut acc);
    let center = (taps - 1) / 2;
    acc[center..center + len].iter().map(|c| c.re / size as f64).collect()
}
