use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::autodiff::Tensor;
use crate::checkpoint::{Checkpoint, TensorKind};
use crate::error::Result;

use super::{FrontendConfig, LogMelSpectrogram, MelExtractor, Waveform};

/// On-disk cache of un-augmented log-mel features keyed by a hash of the
/// waveform samples and the frontend configuration.
#[derive(Clone, Debug)]
pub struct FeatureCache {
    dir: PathBuf,
}

impl FeatureCache {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        FeatureCache { dir: dir.into() }
    }

    pub fn key(wave: &Waveform, cfg: &FrontendConfig) -> String {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(cfg).expect("frontend config serializes"));
        h.update(wave.sample_rate.to_le_bytes());
        for s in &wave.samples {
            h.update(s.to_le_bytes());
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    fn path_for(&self, key: &str) -> PathBuf {
        self.dir.join(format!("{key}.feat"))
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn get_or_compute(&self, wave: &Waveform, extractor: &MelExtractor) -> Result<LogMelSpectrogram> {
        let key = Self::key(wave, extractor.config());
        let path = self.path_for(&key);
        if path.exists() {
            if let Ok(ckpt) = Checkpoint::load(&path) {
                if let Some(t) = ckpt.get("log_mel") {
                    if let [m, f] = *t.shape() {
                        return LogMelSpectrogram::new(m, f, t.data().to_vec());
                    }
                }
            }
            log::warn!("ignoring unreadable cache entry {}", path.display());
        }
        let spec = extractor.log_mel(wave);
        let mut ckpt = Checkpoint::new(serde_json::to_value(extractor.config()).expect("serializable"));
        ckpt.push(
            "log_mel",
            TensorKind::Buffer,
            Tensor::new(vec![spec.n_mels, spec.n_frames], spec.values.clone())?,
        );
        ckpt.save(&path)?;
        Ok(spec)
    }
}
