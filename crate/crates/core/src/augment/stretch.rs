//! Tempo and pitch modification by waveform-similarity overlap-add (WSOLA).

use crate::error::{Error, Result};
use crate::frontend::{interpolate, Waveform};

use super::dsp::hann_periodic;

const FRAME: usize = 512;
const HOP: usize = FRAME / 2;
const TOLERANCE: isize = 128;

fn read(x: &[f32], i: isize) -> f32 {
    if i >= 0 && (i as usize) < x.len() {
        x[i as usize]
    } else {
        0.0
    }
}

/// Dot product split over eight lanes so it vectorizes.
fn dot(a: &[f32], b: &[f32]) -> f32 {
    let mut acc = [0.0f32; 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let tail: f32 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        for k in 0..8 {
            acc[k] += x[k] * y[k];
        }
    }
    acc.iter().sum::<f32>() + tail
}

/// Picks the analysis position near `nominal` whose leading overlap best
/// matches the natural continuation of the previous frame. `padded` is the
/// input followed by `FRAME` zeros and `energy[i]` is the sum of squares of
/// its first `i` samples.
fn best_offset(padded: &[f32], energy: &[f64], natural: isize, nominal: isize, max_start: isize) -> isize {
    let overlap = FRAME - HOP;
    let lo = (nominal - TOLERANCE).max(0);
    let hi = (nominal + TOLERANCE).min(max_start);
    if lo > hi {
        return nominal.clamp(0, max_start);
    }
    let target = &padded[natural as usize..natural as usize + overlap];
    let mut best = lo;
    let mut best_score = f64::NEG_INFINITY;
    for c in lo..=hi {
        let c0 = c as usize;
        let e = (energy[c0 + overlap] - energy[c0]).max(0.0);
        let score = dot(target, &padded[c0..c0 + overlap]) as f64 / (e + 1e-12).sqrt();
        if score > best_score {
            best_score = score;
            best = c;
        }
    }
    best
}

/// Samples of `x` played `rate` times faster with unchanged pitch; the
/// output has `round(len / rate)` samples.
pub fn stretch_samples(x: &[f32], rate: f64) -> Result<Vec<f32>> {
    if !(rate > 0.0) || !rate.is_finite() {
        return Err(Error::InvalidArgument(format!("time stretch rate must be positive, got {rate}")));
    }
    let out_len = (x.len() as f64 / rate).round() as usize;
    if rate == 1.0 || x.is_empty() {
        return Ok(x.to_vec());
    }
    let win = hann_periodic(FRAME);
    let mut out = vec![0.0f64; out_len + FRAME];
    let mut norm = vec![0.0f64; out_len + FRAME];
    let max_start = x.len().saturating_sub(FRAME) as isize;
    let mut padded = x.to_vec();
    padded.resize(x.len() + FRAME, 0.0);
    let mut energy = Vec::with_capacity(padded.len() + 1);
    energy.push(0.0f64);
    for v in &padded {
        energy.push(energy[energy.len() - 1] + (*v as f64) * (*v as f64));
    }
    let mut prev = 0isize;
    let mut k = 0usize;
    while k * HOP < out_len {
        let o = k * HOP;
        let pos = if k == 0 {
            0
        } else {
            let nominal = (o as f64 * rate).round() as isize;
            best_offset(&padded, &energy, prev + HOP as isize, nominal, max_start)
        };
        for i in 0..FRAME {
            out[o + i] += read(x, pos + i as isize) as f64 * win[i];
            norm[o + i] += win[i];
        }
        prev = pos;
        k += 1;
    }
    Ok(out[..out_len]
        .iter()
        .zip(&norm)
        .map(|(v, n)| if *n > 1e-8 { (v / n) as f32 } else { 0.0 })
        .collect())
}

pub fn time_stretch(wave: &Waveform, rate: f64) -> Result<Waveform> {
    Ok(wave.with_samples(stretch_samples(&wave.samples, rate)?))
}

/// Shifts pitch by `semitones` keeping the sample count: stretch by the
/// pitch factor, then resample back to the original length.
pub fn pitch_shift(wave: &Waveform, semitones: f64) -> Result<Waveform> {
    if !semitones.is_finite() {
        return Err(Error::InvalidArgument("pitch shift must be finite".into()));
    }
    if semitones == 0.0 || wave.is_empty() {
        return Ok(wave.clone());
    }
    let factor = 2f64.powf(semitones / 12.0);
    let stretched = stretch_samples(&wave.samples, 1.0 / factor)?;
    let samples = (0..wave.len())
        .map(|i| interpolate(&stretched, i as f64 * factor))
        .collect();
    Ok(wave.with_samples(samples))
}
