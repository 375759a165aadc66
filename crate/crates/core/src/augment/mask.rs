//! Time and frequency masking of log-mel features.

use rand::Rng;

use crate::frontend::LogMelSpectrogram;

/// Sets frames `[start, start + width)` to `value`.
pub fn mask_columns(spec: &mut LogMelSpectrogram, start: usize, width: usize, value: f32) {
    let end = (start + width).min(spec.n_frames);
    for m in 0..spec.n_mels {
        let row = &mut spec.values[m * spec.n_frames..(m + 1) * spec.n_frames];
        row[start.min(end)..end].fill(value);
    }
}

/// Sets mel bands `[start, start + width)` to `value`.
pub fn mask_rows(spec: &mut LogMelSpectrogram, start: usize, width: usize, value: f32) {
    let end = (start + width).min(spec.n_mels);
    let n = spec.n_frames;
    spec.values[start.min(end) * n..end * n].fill(value);
}

/// One block of `w ~ U{0..=max_width}` frames filled with the utterance mean.
pub fn time_mask(spec: &LogMelSpectrogram, max_width: usize, rng: &mut impl Rng) -> LogMelSpectrogram {
    let mut out = spec.clone();
    let max_width = max_width.min(spec.n_frames);
    if max_width == 0 {
        return out;
    }
    let w = rng.random_range(0..=max_width);
    let t0 = rng.random_range(0..=spec.n_frames - w);
    mask_columns(&mut out, t0, w, spec.mean());
    out
}

/// One block of `w ~ U{0..=max_bands}` mel bands filled with the utterance mean.
pub fn freq_mask(spec: &LogMelSpectrogram, max_bands: usize, rng: &mut impl Rng) -> LogMelSpectrogram {
    let mut out = spec.clone();
    let max_bands = max_bands.min(spec.n_mels);
    if max_bands == 0 {
        return out;
    }
    let w = rng.random_range(0..=max_bands);
    let f0 = rng.random_range(0..=spec.n_mels - w);
    mask_rows(&mut out, f0, w, spec.mean());
    out
}
