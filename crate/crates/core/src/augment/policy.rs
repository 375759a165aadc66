//! Augmentation descriptors and the two application policies.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frontend::{fit_length, LogMelSpectrogram, MelExtractor, Waveform};

use super::fir::narrowband_fir;
use super::mask::{freq_mask, time_mask};
use super::rawboost::{rawboost_convolutive, rawboost_isd_additive, ConvolutiveParams};
use super::stretch::{pitch_shift, time_stretch};

/// Waveform augmentations never leave this range.
pub const HEADROOM: f32 = 1.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Domain {
    Waveform,
    Spectrogram,
}

/// One augmentation with the ranges its random parameters are drawn from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case")]
pub enum Augmentation {
    PitchShift {
        min_semitones: f64,
        max_semitones: f64,
    },
    TimeStretch {
        min_rate: f64,
        max_rate: f64,
    },
    RawboostConvolutive(ConvolutiveParams),
    RawboostIsd {
        min_snr_db: f64,
        max_snr_db: f64,
        /// Fraction of sample positions that receive noise.
        density: f64,
    },
    NarrowbandFir {
        low_min_hz: f64,
        low_max_hz: f64,
        high_min_hz: f64,
        high_max_hz: f64,
        taps: usize,
    },
    TimeMask {
        max_width: usize,
    },
    FreqMask {
        max_bands: usize,
    },
}

impl Augmentation {
    pub const NAMES: [&'static str; 7] = [
        "pitch_shift",
        "time_stretch",
        "rawboost_convolutive",
        "rawboost_isd",
        "narrowband_fir",
        "time_mask",
        "freq_mask",
    ];

    /// The augmentation called `name` with its default ranges.
    pub fn default_for(name: &str) -> Option<Self> {
        Some(match name {
            "pitch_shift" => Augmentation::PitchShift {
                min_semitones: -2.0,
                max_semitones: 2.0,
            },
            "time_stretch" => Augmentation::TimeStretch {
                min_rate: 0.9,
                max_rate: 1.1,
            },
            "rawboost_convolutive" => Augmentation::RawboostConvolutive(ConvolutiveParams::default()),
            "rawboost_isd" => Augmentation::RawboostIsd {
                min_snr_db: 10.0,
                max_snr_db: 40.0,
                density: 0.1,
            },
            "narrowband_fir" => Augmentation::NarrowbandFir {
                low_min_hz: 100.0,
                low_max_hz: 400.0,
                high_min_hz: 3000.0,
                high_max_hz: 4000.0,
                taps: 65,
            },
            "time_mask" => Augmentation::TimeMask { max_width: 64 },
            "freq_mask" => Augmentation::FreqMask { max_bands: 16 },
            _ => return None,
        })
    }

    pub fn name(&self) -> &'static str {
        match self {
            Augmentation::PitchShift { .. } => "pitch_shift",
            Augmentation::TimeStretch { .. } => "time_stretch",
            Augmentation::RawboostConvolutive(_) => "rawboost_convolutive",
            Augmentation::RawboostIsd { .. } => "rawboost_isd",
            Augmentation::NarrowbandFir { .. } => "narrowband_fir",
            Augmentation::TimeMask { .. } => "time_mask",
            Augmentation::FreqMask { .. } => "freq_mask",
        }
    }

    pub fn domain(&self) -> Domain {
        match self {
            Augmentation::TimeMask { .. } | Augmentation::FreqMask { .. } => Domain::Spectrogram,
            _ => Domain::Waveform,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ordered = |lo: f64, hi: f64| lo.is_finite() && hi.is_finite() && lo <= hi;
        let ok = match self {
            Augmentation::PitchShift {
                min_semitones,
                max_semitones,
            } => ordered(*min_semitones, *max_semitones),
            Augmentation::TimeStretch { min_rate, max_rate } => *min_rate > 0.0 && ordered(*min_rate, *max_rate),
            Augmentation::RawboostConvolutive(p) => return p.validate(),
            Augmentation::RawboostIsd {
                min_snr_db,
                max_snr_db,
                density,
            } => ordered(*min_snr_db, *max_snr_db) && *density > 0.0 && *density <= 1.0,
            Augmentation::NarrowbandFir {
                low_min_hz,
                low_max_hz,
                high_min_hz,
                high_max_hz,
                taps,
            } => {
                *low_min_hz > 0.0
                    && ordered(*low_min_hz, *low_max_hz)
                    && ordered(*high_min_hz, *high_max_hz)
                    && low_max_hz < high_min_hz
                    && taps % 2 == 1
            }
            Augmentation::TimeMask { max_width } => *max_width <= 512,
            Augmentation::FreqMask { max_bands } => *max_bands <= 128,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("augmentation `{}` has invalid parameters", self.name())))
        }
    }

    pub fn apply_waveform(&self, wave: &Waveform, rng: &mut impl Rng) -> Result<Waveform> {
        let out = match self {
            Augmentation::PitchShift {
                min_semitones,
                max_semitones,
            } => pitch_shift(wave, rng.random_range(*min_semitones..=*max_semitones))?,
            Augmentation::TimeStretch { min_rate, max_rate } => {
                time_stretch(wave, rng.random_range(*min_rate..=*max_rate))?
            }
            Augmentation::RawboostConvolutive(p) => rawboost_convolutive(wave, p, rng)?,
            Augmentation::RawboostIsd {
                min_snr_db,
                max_snr_db,
                density,
            } => rawboost_isd_additive(wave, (*min_snr_db, *max_snr_db), *density, rng)?,
            Augmentation::NarrowbandFir {
                low_min_hz,
                low_max_hz,
                high_min_hz,
                high_max_hz,
                taps,
            } => narrowband_fir(wave, (*low_min_hz, *low_max_hz), (*high_min_hz, *high_max_hz), *taps, rng)?,
            Augmentation::TimeMask { .. } | Augmentation::FreqMask { .. } => {
                return Err(Error::InvalidArgument(format!("`{}` operates on spectrograms", self.name())))
            }
        };
        Ok(out.with_samples(out.samples.iter().map(|v| v.clamp(-HEADROOM, HEADROOM)).collect()))
    }

    pub fn apply_spectrogram(&self, spec: &LogMelSpectrogram, rng: &mut impl Rng) -> Result<LogMelSpectrogram> {
        match self {
            Augmentation::TimeMask { max_width } => Ok(time_mask(spec, *max_width, rng)),
            Augmentation::FreqMask { max_bands } => Ok(freq_mask(spec, *max_bands, rng)),
            _ => Err(Error::InvalidArgument(format!("`{}` operates on waveforms", self.name()))),
        }
    }
}

/// How the members of a policy are selected for one sample.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Selection {
    /// Each augmentation independently with this probability.
    Probability(f64),
    /// A subset drawn uniformly from all subsets.
    UniformSubset,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentationPolicy {
    /// Applied in this order (waveform members first, whatever their position).
    pub augmentations: Vec<Augmentation>,
    /// Per-augmentation probability in probability mode.
    pub probability: f64,
}

impl Default for AugmentationPolicy {
    fn default() -> Self {
        AugmentationPolicy {
            augmentations: Augmentation::NAMES
                .iter()
                .map(|n| Augmentation::default_for(n).expect("known name"))
                .collect(),
            probability: 0.8,
        }
    }
}

/// Features of one augmented sample and the names of what was applied.
#[derive(Clone, Debug, PartialEq)]
pub struct Augmented {
    pub features: LogMelSpectrogram,
    pub applied: Vec<&'static str>,
}

impl AugmentationPolicy {
    pub fn none() -> Self {
        AugmentationPolicy {
            augmentations: Vec::new(),
            probability: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.probability) {
            return Err(Error::Config(format!(
                "augmentation probability must be in [0, 1], got {}",
                self.probability
            )));
        }
        self.augmentations.iter().try_for_each(Augmentation::validate)
    }

    pub fn choose(&self, selection: Selection, rng: &mut impl Rng) -> Vec<bool> {
        let p = match selection {
            Selection::Probability(p) => p,
            Selection::UniformSubset => 0.5,
        };
        self.augmentations.iter().map(|_| rng.random_bool(p)).collect()
    }

    /// Waveform members of `selected`, then repeat-pad or cut to the
    /// frontend length, clip to [-1, 1], extract features and finally the
    /// spectrogram members.
    pub fn apply_selected(
        &self,
        wave: &Waveform,
        selected: &[bool],
        extractor: &MelExtractor,
        rng: &mut impl Rng,
    ) -> Result<Augmented> {
        let target = extractor.config().target_samples;
        let mut applied = Vec::new();
        // Augment at most one target length of signal, padding afterwards:
        // short clips are not processed several times over.
        let mut w = wave.with_samples(wave.samples[..wave.len().min(target)].to_vec());
        if w.is_empty() {
            return Err(Error::InvalidArgument("cannot augment an empty waveform".into()));
        }
        for (aug, _) in self
            .augmentations
            .iter()
            .zip(selected)
            .filter(|(a, s)| **s && a.domain() == Domain::Waveform)
        {
            w = aug.apply_waveform(&w, rng)?;
            applied.push(aug.name());
        }
        let mut w = fit_length(&w, target)?;
        for v in &mut w.samples {
            *v = v.clamp(-1.0, 1.0);
        }
        let mut spec = extractor.log_mel(&w);
        for (aug, _) in self
            .augmentations
            .iter()
            .zip(selected)
            .filter(|(a, s)| **s && a.domain() == Domain::Spectrogram)
        {
            spec = aug.apply_spectrogram(&spec, rng)?;
            applied.push(aug.name());
        }
        Ok(Augmented {
            features: spec,
            applied,
        })
    }

    pub fn apply(
        &self,
        wave: &Waveform,
        selection: Selection,
        extractor: &MelExtractor,
        rng: &mut impl Rng,
    ) -> Result<Augmented> {
        let selected = self.choose(selection, rng);
        self.apply_selected(wave, &selected, extractor, rng)
    }
}

/// Anchor view: every augmentation independently with the policy probability.
pub fn apply_policy_x1(
    wave: &Waveform,
    policy: &AugmentationPolicy,
    extractor: &MelExtractor,
    rng: &mut impl Rng,
) -> Result<Augmented> {
    policy.apply(wave, Selection::Probability(policy.probability), extractor, rng)
}

/// Partner view: a uniformly random subset of the augmentations.
pub fn apply_policy_x2(
    wave: &Waveform,
    policy: &AugmentationPolicy,
    extractor: &MelExtractor,
    rng: &mut impl Rng,
) -> Result<Augmented> {
    policy.apply(wave, Selection::UniformSubset, extractor, rng)
}
