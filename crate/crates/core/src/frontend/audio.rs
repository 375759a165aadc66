use std::path::Path;

use crate::error::{Error, Result};

pub const SAMPLE_RATE: u32 = 16_000;

/// Mono PCM audio, samples nominally in `[-1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Self {
        Waveform {
            samples,
            sample_rate,
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn peak(&self) -> f32 {
        self.samples.iter().fold(0.0f32, |m, v| m.max(v.abs()))
    }

    pub fn with_samples(&self, samples: Vec<f32>) -> Self {
        Waveform {
            samples,
            sample_rate: self.sample_rate,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LoadOptions {
    /// Convert other sample rates to 16 kHz by linear interpolation.
    pub resample: bool,
    /// Average multi-channel audio down to mono.
    pub downmix: bool,
}

impl Default for LoadOptions {
    fn default() -> Self {
        LoadOptions {
            resample: false,
            downmix: true,
        }
    }
}

pub fn load_audio(path: &Path, opts: LoadOptions) -> Result<Waveform> {
    let audio_err = |message: String| Error::Audio {
        path: path.to_path_buf(),
        message,
    };
    let mut reader = hound::WavReader::open(path).map_err(|e| match e {
        hound::Error::IoError(io) => Error::io(path, io),
        other => audio_err(other.to_string()),
    })?;
    let spec = reader.spec();
    let interleaved: Vec<f32> = match spec.sample_format {
        hound::SampleFormat::Float => reader
            .samples::<f32>()
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| audio_err(e.to_string()))?,
        hound::SampleFormat::Int => {
            let scale = 1.0 / (1u64 << (spec.bits_per_sample - 1)) as f32;
            reader
                .samples::<i32>()
                .map(|s| s.map(|v| v as f32 * scale))
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| audio_err(e.to_string()))?
        }
    };
    let channels = spec.channels as usize;
    let samples = if channels == 1 {
        interleaved
    } else if opts.downmix {
        interleaved
            .chunks_exact(channels)
            .map(|frame| frame.iter().sum::<f32>() / channels as f32)
            .collect()
    } else {
        return Err(audio_err(format!("{channels} channels and downmixing is disabled")));
    };
    if samples.iter().any(|v| !v.is_finite()) {
        return Err(audio_err("non-finite samples".into()));
    }
    let wave = Waveform::new(samples, spec.sample_rate);
    if spec.sample_rate == SAMPLE_RATE {
        Ok(wave)
    } else if opts.resample {
        Ok(resample_linear(&wave, SAMPLE_RATE))
    } else {
        Err(Error::UnsupportedRate {
            found: spec.sample_rate,
            expected: SAMPLE_RATE,
        })
    }
}

/// 16-bit PCM output.
pub fn save_wav_pcm16(path: &Path, wave: &Waveform) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: wave.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    write_wav(path, spec, |w| {
        for s in &wave.samples {
            let v = (s.clamp(-1.0, 1.0) * 32767.0).round() as i16;
            w.write_sample(v)?;
        }
        Ok(())
    })
}

/// 32-bit float output; keeps augmentation headroom beyond `[-1, 1]`.
pub fn save_wav_f32(path: &Path, wave: &Waveform) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: wave.sample_rate,
        bits_per_sample: 32,
        sample_format: hound::SampleFormat::Float,
    };
    write_wav(path, spec, |w| {
        for s in &wave.samples {
            w.write_sample(*s)?;
        }
        Ok(())
    })
}

type WavWriter = hound::WavWriter<std::io::BufWriter<std::fs::File>>;

fn write_wav(
    path: &Path,
    spec: hound::WavSpec,
    body: impl FnOnce(&mut WavWriter) -> std::result::Result<(), hound::Error>,
) -> Result<()> {
    let wrap = |e: hound::Error| match e {
        hound::Error::IoError(io) => Error::io(path, io),
        other => Error::Audio {
            path: path.to_path_buf(),
            message: other.to_string(),
        },
    };
    let mut writer = hound::WavWriter::create(path, spec).map_err(wrap)?;
    body(&mut writer).map_err(wrap)?;
    writer.finalize().map_err(wrap)
}

/// Linear-interpolation resampler.
pub fn resample_linear(wave: &Waveform, target_rate: u32) -> Waveform {
    if wave.sample_rate == target_rate || wave.is_empty() {
        return Waveform::new(wave.samples.clone(), target_rate);
    }
    let ratio = wave.sample_rate as f64 / target_rate as f64;
    let out_len = ((wave.len() as f64) / ratio).round().max(1.0) as usize;
    let samples = (0..out_len)
        .map(|i| interpolate(&wave.samples, i as f64 * ratio))
        .collect();
    Waveform::new(samples, target_rate)
}

/// Sample of `x` at fractional position `pos`, zero outside the signal.
pub(crate) fn interpolate(x: &[f32], pos: f64) -> f32 {
    let i = pos.floor();
    let frac = (pos - i) as f32;
    let i = i as isize;
    let at = |j: isize| -> f32 {
        if j >= 0 && (j as usize) < x.len() {
            x[j as usize]
        } else {
            0.0
        }
    };
    at(i) * (1.0 - frac) + at(i + 1) * frac
}

/// Cuts or repeat-pads to exactly `target` samples. Padding repeats the
/// signal followed by its time reversal: `x ‖ rev(x) ‖ x ‖ rev(x) …`.
pub fn fit_length(wave: &Waveform, target: usize) -> Result<Waveform> {
    if wave.is_empty() {
        return Err(Error::InvalidArgument("cannot fit an empty waveform".into()));
    }
    let x = &wave.samples;
    if x.len() >= target {
        return Ok(wave.with_samples(x[..target].to_vec()));
    }
    let mut out = Vec::with_capacity(target);
    let mut forward = true;
    while out.len() < target {
        let need = target - out.len();
        if forward {
            out.extend(x.iter().take(need));
        } else {
            out.extend(x.iter().rev().take(need));
        }
        forward = !forward;
    }
    Ok(wave.with_samples(out))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn w(samples: &[f32]) -> Waveform {
        Waveform::new(samples.to_vec(), SAMPLE_RATE)
    }

    #[test]
    fn fit_length_examples() {
        let long: Vec<f32> = (0..100_000).map(|i| (i % 97) as f32 / 97.0).collect();
        assert_eq!(fit_length(&w(&long[..96_000]), 96_000).unwrap().samples, &long[..96_000]);
        assert_eq!(fit_length(&w(&long), 96_000).unwrap().samples, &long[..96_000]);
        assert_eq!(
            fit_length(&w(&[1.0, 2.0, 3.0]), 8).unwrap().samples,
            vec![1.0, 2.0, 3.0, 3.0, 2.0, 1.0, 1.0, 2.0]
        );
        assert!(fit_length(&w(&[]), 8).is_err());
    }

    #[test]
    fn wav_roundtrip_and_rate_checks() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.wav");
        let samples: Vec<f32> = (0..16_000).map(|i| ((i as f32) * 0.01).sin() * 0.5).collect();
        save_wav_pcm16(&path, &w(&samples)).unwrap();
        let loaded = load_audio(&path, LoadOptions::default()).unwrap();
        assert_eq!(loaded.len(), 16_000);
        assert!(loaded.samples.iter().zip(&samples).all(|(a, b)| (a - b).abs() < 1e-4));

        let stereo = dir.path().join("s.wav");
        let spec = hound::WavSpec {
            channels: 2,
            sample_rate: SAMPLE_RATE,
            bits_per_sample: 32,
            sample_format: hound::SampleFormat::Float,
        };
        let mut wr = hound::WavWriter::create(&stereo, spec).unwrap();
        for (l, r) in [(0.2f32, 0.4f32), (-0.5, 0.1)] {
            wr.write_sample(l).unwrap();
            wr.write_sample(r).unwrap();
        }
        wr.finalize().unwrap();
        let mono = load_audio(&stereo, LoadOptions::default()).unwrap();
        assert!((mono.samples[0] - 0.3).abs() < 1e-7 && (mono.samples[1] + 0.2).abs() < 1e-7);
        let no_downmix = LoadOptions {
            downmix: false,
            ..Default::default()
        };
        assert!(matches!(load_audio(&stereo, no_downmix), Err(Error::Audio { .. })));

        let cd = dir.path().join("cd.wav");
        save_wav_f32(&cd, &Waveform::new(vec![0.0; 44_100], 44_100)).unwrap();
        assert!(matches!(
            load_audio(&cd, LoadOptions::default()),
            Err(Error::UnsupportedRate { found: 44_100, .. })
        ));
        let opts = LoadOptions {
            resample: true,
            ..Default::default()
        };
        assert_eq!(load_audio(&cd, opts).unwrap().len(), 16_000);

        let junk = dir.path().join("junk.wav");
        std::fs::write(&junk, b"RIFF not really a wave").unwrap();
        assert!(matches!(load_audio(&junk, LoadOptions::default()), Err(Error::Audio { .. })));
    }
}
