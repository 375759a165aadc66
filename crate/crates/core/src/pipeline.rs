//! Waveform to model-input features, with or without augmentation.

use rand::Rng;

use crate::augment::{apply_policy_x1, apply_policy_x2, AugmentationPolicy};
use crate::error::Result;
use crate::frontend::{fit_length, FeatureCache, FrontendConfig, LogMelSpectrogram, MelExtractor, Waveform};

#[derive(Clone, Debug)]
pub struct FeaturePipeline {
    extractor: MelExtractor,
    policy: AugmentationPolicy,
    cache: Option<FeatureCache>,
}

impl FeaturePipeline {
    pub fn new(frontend: &FrontendConfig, policy: AugmentationPolicy, cache: Option<FeatureCache>) -> Result<Self> {
        policy.validate()?;
        Ok(FeaturePipeline {
            extractor: MelExtractor::new(frontend)?,
            policy,
            cache,
        })
    }

    pub fn extractor(&self) -> &MelExtractor {
        &self.extractor
    }

    pub fn policy(&self) -> &AugmentationPolicy {
        &self.policy
    }

    /// Features of the un-augmented waveform, length-fitted and clipped the
    /// same way as the augmented path.
    pub fn plain(&self, wave: &Waveform) -> Result<LogMelSpectrogram> {
        let mut w = fit_length(wave, self.extractor.config().target_samples)?;
        for v in &mut w.samples {
            *v = v.clamp(-1.0, 1.0);
        }
        match &self.cache {
            Some(cache) => cache.get_or_compute(&w, &self.extractor),
            None => Ok(self.extractor.log_mel(&w)),
        }
    }

    /// Anchor-view features: each augmentation with the policy probability.
    pub fn x1(&self, wave: &Waveform, rng: &mut impl Rng) -> Result<LogMelSpectrogram> {
        Ok(apply_policy_x1(wave, &self.policy, &self.extractor, rng)?.features)
    }

    /// Partner-view features: a uniformly random subset of the augmentations.
    pub fn x2(&self, wave: &Waveform, rng: &mut impl Rng) -> Result<LogMelSpectrogram> {
        Ok(apply_policy_x2(wave, &self.policy, &self.extractor, rng)?.features)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::augment::AugmentationPolicy;
    use crate::rng::RngStream;

    #[test]
    fn plain_matches_an_empty_policy_and_the_cache() {
        let cfg = FrontendConfig {
            target_samples: 8000,
            n_frames: 48,
            ..FrontendConfig::default()
        };
        let wave = Waveform::new((0..5000).map(|i| ((i * 13 % 29) as f32 / 29.0 - 0.5) * 2.5).collect(), 16_000);
        let p = FeaturePipeline::new(&cfg, AugmentationPolicy::none(), None).unwrap();
        let plain = p.plain(&wave).unwrap();
        assert_eq!(plain, p.x1(&wave, &mut RngStream::new(0, 0).rng()).unwrap());
        assert_eq!(plain, p.x2(&wave, &mut RngStream::new(0, 0).rng()).unwrap());

        let dir = tempfile::tempdir().unwrap();
        let cached = FeaturePipeline::new(&cfg, AugmentationPolicy::none(), Some(FeatureCache::new(dir.path()))).unwrap();
        assert_eq!(cached.plain(&wave).unwrap(), plain);
        assert_eq!(cached.plain(&wave).unwrap(), plain);
    }
}
