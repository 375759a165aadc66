use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::audio::Waveform;

/// Feature extraction parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FrontendConfig {
    pub sample_rate: u32,
    /// Waveforms are cut or repeat-padded to this many samples (6 s).
    pub target_samples: usize,
    /// 25 ms analysis window.
    pub win_length: usize,
    /// 10 ms frame shift.
    pub hop_length: usize,
    pub n_fft: usize,
    pub n_mels: usize,
    pub n_frames: usize,
    pub fmin: f64,
    pub fmax: f64,
    pub log_floor: f64,
    pub resample: bool,
    pub downmix: bool,
}

impl Default for FrontendConfig {
    fn default() -> Self {
        FrontendConfig {
            sample_rate: 16_000,
            target_samples: 96_000,
            win_length: 400,
            hop_length: 160,
            n_fft: 512,
            n_mels: 128,
            n_frames: 512,
            fmin: 20.0,
            fmax: 8000.0,
            log_floor: 1e-10,
            resample: false,
            downmix: true,
        }
    }
}

impl FrontendConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("frontend: {m}")));
        if self.win_length == 0 || self.win_length > self.n_fft {
            return bad("win_length must be in 1..=n_fft");
        }
        if self.hop_length == 0 || self.n_mels == 0 || self.n_frames == 0 || self.target_samples == 0 {
            return bad("hop_length, n_mels, n_frames and target_samples must be positive");
        }
        if !(self.fmin >= 0.0 && self.fmin < self.fmax && self.fmax <= self.sample_rate as f64 / 2.0) {
            return bad("need 0 <= fmin < fmax <= sample_rate / 2");
        }
        if self.log_floor <= 0.0 {
            return bad("log_floor must be positive");
        }
        Ok(())
    }
}

/// Log-mel feature matrix, `n_mels` rows by `n_frames` columns, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct LogMelSpectrogram {
    pub n_mels: usize,
    pub n_frames: usize,
    pub values: Vec<f32>,
}

impl LogMelSpectrogram {
    pub fn new(n_mels: usize, n_frames: usize, values: Vec<f32>) -> Result<Self> {
        if values.len() != n_mels * n_frames {
            return Err(Error::shape(format!(
                "{n_mels}x{n_frames} spectrogram needs {} values, got {}",
                n_mels * n_frames,
                values.len()
            )));
        }
        Ok(LogMelSpectrogram {
            n_mels,
            n_frames,
            values,
        })
    }

    pub fn at(&self, mel: usize, frame: usize) -> f32 {
        self.values[mel * self.n_frames + frame]
    }

    pub fn mean(&self) -> f32 {
        (self.values.iter().map(|v| *v as f64).sum::<f64>() / self.values.len() as f64) as f32
    }

    pub fn column(&self, frame: usize) -> Vec<f32> {
        (0..self.n_mels).map(|m| self.at(m, frame)).collect()
    }
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

#[derive(Clone, Debug)]
struct Filter {
    start: usize,
    weights: Vec<f64>,
    center_hz: f64,
}

/// HTK-scale triangular filters, each weight being the triangle's mean over
/// the frequency interval one FFT bin covers.
///
/// Averaging over bin intervals (rather than sampling at bin centers) keeps
/// narrow low-frequency filters from ending up with empty support.
#[derive(Clone, Debug)]
pub struct MelFilterbank {
    n_bins: usize,
    filters: Vec<Filter>,
}

/// `∫_a^b` of the triangle with corners `(l, 0)`, `(c, 1)`, `(r, 0)`.
fn triangle_integral(l: f64, c: f64, r: f64, a: f64, b: f64) -> f64 {
    let mut total = 0.0;
    let (lo, hi) = (a.max(l), b.min(c));
    if hi > lo && c > l {
        total += ((hi - l).powi(2) - (lo - l).powi(2)) / (2.0 * (c - l));
    }
    let (lo, hi) = (a.max(c), b.min(r));
    if hi > lo && r > c {
        total += ((r - lo).powi(2) - (r - hi).powi(2)) / (2.0 * (r - c));
    }
    total
}

impl MelFilterbank {
    pub fn new(n_mels: usize, n_fft: usize, sample_rate: u32, fmin: f64, fmax: f64) -> Result<Self> {
        if n_mels == 0 || n_fft < 2 || !(fmin < fmax) {
            return Err(Error::InvalidArgument("invalid mel filterbank parameters".into()));
        }
        let n_bins = n_fft / 2 + 1;
        let bin_hz = sample_rate as f64 / n_fft as f64;
        let (mlo, mhi) = (hz_to_mel(fmin), hz_to_mel(fmax));
        let edges: Vec<f64> = (0..n_mels + 2)
            .map(|i| mel_to_hz(mlo + (mhi - mlo) * i as f64 / (n_mels + 1) as f64))
            .collect();
        let mut filters = Vec::with_capacity(n_mels);
        for m in 0..n_mels {
            let (l, c, r) = (edges[m], edges[m + 1], edges[m + 2]);
            let dense: Vec<f64> = (0..n_bins)
                .map(|k| {
                    let f = k as f64 * bin_hz;
                    triangle_integral(l, c, r, f - bin_hz / 2.0, f + bin_hz / 2.0) / bin_hz
                })
                .collect();
            let start = dense.iter().position(|w| *w > 0.0).ok_or_else(|| {
                Error::InvalidArgument(format!("mel filter {m} has no support"))
            })?;
            let end = dense.iter().rposition(|w| *w > 0.0).unwrap() + 1;
            filters.push(Filter {
                start,
                weights: dense[start..end].to_vec(),
                center_hz: c,
            });
        }
        Ok(MelFilterbank { n_bins, filters })
    }

    pub fn from_config(cfg: &FrontendConfig) -> Result<Self> {
        MelFilterbank::new(cfg.n_mels, cfg.n_fft, cfg.sample_rate, cfg.fmin, cfg.fmax)
    }

    pub fn len(&self) -> usize {
        self.filters.len()
    }

    pub fn is_empty(&self) -> bool {
        self.filters.is_empty()
    }

    pub fn center_frequencies(&self) -> Vec<f64> {
        self.filters.iter().map(|f| f.center_hz).collect()
    }

    /// Dense `n_mels × (n_fft/2 + 1)` weight matrix.
    pub fn dense(&self) -> Vec<Vec<f64>> {
        self.filters
            .iter()
            .map(|f| {
                let mut row = vec![0.0; self.n_bins];
                row[f.start..f.start + f.weights.len()].copy_from_slice(&f.weights);
                row
            })
            .collect()
    }

    pub fn apply(&self, power: &[f64], out: &mut [f64]) {
        for (o, f) in out.iter_mut().zip(&self.filters) {
            *o = f
                .weights
                .iter()
                .zip(&power[f.start..])
                .map(|(w, p)| w * p)
                .sum();
        }
    }
}

/// Reusable STFT + filterbank pipeline.
#[derive(Clone)]
pub struct MelExtractor {
    cfg: FrontendConfig,
    window: Vec<f64>,
    fft: Arc<dyn Fft<f64>>,
    bank: MelFilterbank,
}

impl std::fmt::Debug for MelExtractor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("MelExtractor").field("cfg", &self.cfg).finish_non_exhaustive()
    }
}

impl MelExtractor {
    pub fn new(cfg: &FrontendConfig) -> Result<Self> {
        cfg.validate()?;
        let n = cfg.win_length;
        // symmetric Hann
        let window = (0..n)
            .map(|i| {
                if n == 1 {
                    1.0
                } else {
                    0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / (n - 1) as f64).cos()
                }
            })
            .collect();
        let fft = FftPlanner::new().plan_fft_forward(cfg.n_fft);
        Ok(MelExtractor {
            cfg: cfg.clone(),
            window,
            fft,
            bank: MelFilterbank::from_config(cfg)?,
        })
    }

    pub fn config(&self) -> &FrontendConfig {
        &self.cfg
    }

    pub fn filterbank(&self) -> &MelFilterbank {
        &self.bank
    }

    /// Pre-log mel energies, `n_mels × n_frames` row-major. Frames that do
    /// not fit in the waveform are left at zero energy.
    pub fn mel_power(&self, wave: &Waveform) -> Vec<f64> {
        let cfg = &self.cfg;
        let (n_mels, n_frames) = (cfg.n_mels, cfg.n_frames);
        let mut out = vec![0.0; n_mels * n_frames];
        let mut buf = vec![Complex::new(0.0, 0.0); cfg.n_fft];
        let mut scratch = vec![Complex::new(0.0, 0.0); self.fft.get_inplace_scratch_len()];
        let mut power = vec![0.0; cfg.n_fft / 2 + 1];
        let mut mel = vec![0.0; n_mels];
        for t in 0..n_frames {
            let start = t * cfg.hop_length;
            if start + cfg.win_length > wave.len() {
                break;
            }
            for (i, c) in buf.iter_mut().enumerate() {
                *c = if i < cfg.win_length {
                    Complex::new(wave.samples[start + i] as f64 * self.window[i], 0.0)
                } else {
                    Complex::new(0.0, 0.0)
                };
            }
            self.fft.process_with_scratch(&mut buf, &mut scratch);
            for (p, c) in power.iter_mut().zip(&buf) {
                *p = c.norm_sqr();
            }
            self.bank.apply(&power, &mut mel);
            for (m, v) in mel.iter().enumerate() {
                out[m * n_frames + t] = *v;
            }
        }
        out
    }

    /// `log(max(mel energy, floor))`; columns beyond the signal are zero.
    pub fn log_mel(&self, wave: &Waveform) -> LogMelSpectrogram {
        let cfg = &self.cfg;
        let available = if wave.len() >= cfg.win_length {
            (wave.len() - cfg.win_length) / cfg.hop_length + 1
        } else {
            0
        };
        let power = self.mel_power(wave);
        let values = power
            .iter()
            .enumerate()
            .map(|(i, p)| {
                if i % cfg.n_frames < available {
                    p.max(cfg.log_floor).ln() as f32
                } else {
                    0.0
                }
            })
            .collect();
        LogMelSpectrogram {
            n_mels: cfg.n_mels,
            n_frames: cfg.n_frames,
            values,
        }
    }
}

pub fn log_mel(wave: &Waveform, cfg: &FrontendConfig) -> Result<LogMelSpectrogram> {
    Ok(MelExtractor::new(cfg)?.log_mel(wave))
}
