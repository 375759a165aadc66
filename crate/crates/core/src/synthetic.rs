//! Deterministic synthetic corpus: band-limited noise whose spectral envelope
//! depends on the class (and, for spoofs, on the attack subtype).

use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::augment::bandpass;
use crate::error::{Error, Result};
use crate::frontend::{save_wav_pcm16, Waveform};
use crate::manifest::{Label, Manifest, ManifestEntry, Subtype};
use crate::rng::RngStream;

const STREAM_SYNTH: u64 = 31;
const TAPS: usize = 129;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub seed: u64,
    pub sample_rate: u32,
    pub min_seconds: f64,
    pub max_seconds: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            n_train: 400,
            n_val: 100,
            n_test: 100,
            seed: 7,
            sample_rate: 16_000,
            min_seconds: 1.0,
            max_seconds: 2.0,
        }
    }
}

/// Pass band of each kind of utterance.
pub fn band(label: Label, subtype: Option<Subtype>) -> (f64, f64) {
    match (label, subtype) {
        (Label::Bonafide, _) => (300.0, 2000.0),
        (Label::Spoof, Some(Subtype::Vc)) => (4500.0, 7000.0),
        (Label::Spoof, _) => (2500.0, 4500.0),
    }
}

/// Class of the `i`-th utterance: half bonafide, then TTS and VC in turn.
fn kind(i: usize) -> (Label, Option<Subtype>) {
    match i % 4 {
        0 | 2 => (Label::Bonafide, None),
        1 => (Label::Spoof, Some(Subtype::Tts)),
        _ => (Label::Spoof, Some(Subtype::Vc)),
    }
}

pub fn synthesize(label: Label, subtype: Option<Subtype>, spec: &SyntheticSpec, rng: &mut impl Rng) -> Result<Waveform> {
    let sr = spec.sample_rate as f64;
    let secs = rng.random_range(spec.min_seconds..=spec.max_seconds);
    let n = (secs * sr).round() as usize;
    let noise: Vec<f32> = (0..n).map(|_| StandardNormal.sample(rng)).collect();
    let (lo, hi) = band(label, subtype);
    let mut shaped = bandpass(&Waveform::new(noise, spec.sample_rate), lo, hi, TAPS)?;
    let peak = shaped.peak().max(1e-6);
    let gain = rng.random_range(0.3f32..0.7) / peak;
    for v in &mut shaped.samples {
        let floor: f32 = StandardNormal.sample(rng);
        *v = (*v * gain + 0.005 * floor).clamp(-1.0, 1.0);
    }
    Ok(shaped)
}

#[derive(Clone, Debug)]
pub struct SyntheticPaths {
    pub train: PathBuf,
    pub val: PathBuf,
    pub test: PathBuf,
}

/// Writes `wav/*.wav` plus `train.tsv`, `val.tsv` and `test.tsv` under `dir`.
pub fn make_synthetic(dir: &Path, spec: &SyntheticSpec) -> Result<SyntheticPaths> {
    if spec.n_train < 4 || spec.n_val < 2 || spec.n_test < 2 {
        return Err(Error::InvalidArgument(
            "synthetic splits need at least 4 train, 2 val and 2 test utterances".into(),
        ));
    }
    if !(spec.min_seconds > 0.0 && spec.min_seconds <= spec.max_seconds) {
        return Err(Error::InvalidArgument("synthetic durations must satisfy 0 < min <= max".into()));
    }
    let wav_dir = dir.join("wav");
    std::fs::create_dir_all(&wav_dir).map_err(|e| Error::io(&wav_dir, e))?;
    let mut out = Vec::new();
    for (split, count, id) in [("train", spec.n_train, 0u64), ("val", spec.n_val, 1), ("test", spec.n_test, 2)] {
        let mut entries = Vec::with_capacity(count);
        for i in 0..count {
            let (label, subtype) = kind(i);
            let mut rng = RngStream::derive(spec.seed, &[STREAM_SYNTH, id, i as u64]).rng();
            let wave = synthesize(label, subtype, spec, &mut rng)?;
            let utt = format!("{split}_{i:05}");
            let path = wav_dir.join(format!("{utt}.wav"));
            save_wav_pcm16(&path, &wave)?;
            entries.push(ManifestEntry::new(utt, path, label, subtype)?);
        }
        let manifest_path = dir.join(format!("{split}.tsv"));
        Manifest { entries }.save(&manifest_path)?;
        out.push(manifest_path);
    }
    let test = out.pop().expect("three splits");
    let val = out.pop().expect("three splits");
    let train = out.pop().expect("three splits");
    Ok(SyntheticPaths { train, val, test })
}
