//! `name[:value[,value]]` descriptions of a single waveform augmentation.

use std::fmt;

use spoofcl::augment::{Augmentation, Domain};

#[derive(Debug, Clone, PartialEq)]
pub enum SpecError {
    Unknown(String),
    SpectrogramOnly(String),
    BadArguments { name: String, usage: &'static str },
}

impl fmt::Display for SpecError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SpecError::Unknown(name) => write!(
                f,
                "unknown augmentation `{name}`; valid names: {}",
                Augmentation::NAMES.join(", ")
            ),
            SpecError::SpectrogramOnly(name) => {
                write!(f, "`{name}` works on spectrograms and cannot be applied to a WAV file")
            }
            SpecError::BadArguments { name, usage } => write!(f, "bad arguments for `{name}`; usage: {usage}"),
        }
    }
}

impl std::error::Error for SpecError {}

fn usage(name: &str) -> &'static str {
    match name {
        "pitch_shift" => "pitch_shift[:semitones]",
        "time_stretch" => "time_stretch[:rate]",
        "rawboost_isd" => "rawboost_isd[:snr_db]",
        "narrowband_fir" => "narrowband_fir[:low_hz,high_hz]",
        _ => "rawboost_convolutive",
    }
}

/// Parses an augmentation description. Given values pin the random ranges
/// to a single point; omitted values keep the default ranges.
pub fn parse(spec: &str) -> Result<Augmentation, SpecError> {
    let (name, args) = match spec.split_once(':') {
        Some((n, a)) => (n.trim(), Some(a)),
        None => (spec.trim(), None),
    };
    let mut aug = Augmentation::default_for(name).ok_or_else(|| SpecError::Unknown(name.to_string()))?;
    if aug.domain() == Domain::Spectrogram {
        return Err(SpecError::SpectrogramOnly(name.to_string()));
    }
    let bad = || SpecError::BadArguments {
        name: name.to_string(),
        usage: usage(name),
    };
    let Some(args) = args else {
        return Ok(aug);
    };
    let values: Vec<f64> = args
        .split(',')
        .map(|v| v.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .map_err(|_| bad())?;
    match (&mut aug, values.as_slice()) {
        (
            Augmentation::PitchShift {
                min_semitones,
                max_semitones,
            },
            [s],
        ) => (*min_semitones, *max_semitones) = (*s, *s),
        (Augmentation::TimeStretch { min_rate, max_rate }, [r]) => (*min_rate, *max_rate) = (*r, *r),
        (
            Augmentation::RawboostIsd {
                min_snr_db, max_snr_db, ..
            },
            [s],
        ) => (*min_snr_db, *max_snr_db) = (*s, *s),
        (
            Augmentation::NarrowbandFir {
                low_min_hz,
                low_max_hz,
                high_min_hz,
                high_max_hz,
                ..
            },
            [lo, hi],
        ) => {
            (*low_min_hz, *low_max_hz) = (*lo, *lo);
            (*high_min_hz, *high_max_hz) = (*hi, *hi);
        }
        _ => return Err(bad()),
    }
    aug.validate().map_err(|_| bad())?;
    Ok(aug)
}
