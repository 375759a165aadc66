//! Run configuration: one JSON document covering data, features,
//! augmentation, model and both training stages.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::augment::AugmentationPolicy;
use crate::backbone::BackboneConfig;
use crate::error::{Error, Result};
use crate::frontend::{FeatureCache, FrontendConfig, LoadOptions};
use crate::manifest::{Dataset, Manifest};
use crate::pipeline::FeaturePipeline;
use crate::stage1::Stage1Config;
use crate::stage2::Stage2Config;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub train_manifest: PathBuf,
    pub val_manifest: PathBuf,
    pub test_manifest: Option<PathBuf>,
    pub output_dir: PathBuf,
    /// Directory for cached un-augmented features; no caching when unset.
    pub cache_dir: Option<PathBuf>,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            train_manifest: PathBuf::from("data/train.tsv"),
            val_manifest: PathBuf::from("data/val.tsv"),
            test_manifest: None,
            output_dir: PathBuf::from("runs"),
            cache_dir: None,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataConfig,
    pub frontend: FrontendConfig,
    pub backbone: BackboneConfig,
    pub augmentation: AugmentationPolicy,
    pub stage1: Stage1Config,
    pub stage2: Stage2Config,
}

fn parse_value(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json_pretty() + "\n").map_err(|e| Error::io(path, e))
    }

    /// Applies `dotted.key=value` overrides. Values are parsed as JSON when
    /// possible and taken as strings otherwise; unknown keys are rejected.
    pub fn with_overrides<S: AsRef<str>>(&self, overrides: &[S]) -> Result<Self> {
        let mut root = serde_json::to_value(self).expect("config serializes");
        for item in overrides {
            let item = item.as_ref();
            let (key, raw) = item
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override `{item}` is not key=value")))?;
            let mut node = &mut root;
            let parts: Vec<&str> = key.split('.').collect();
            for (depth, part) in parts.iter().enumerate() {
                let obj = node
                    .as_object_mut()
                    .ok_or_else(|| Error::Config(format!("`{key}`: `{}` is not a section", parts[..depth].join("."))))?;
                if !obj.contains_key(*part) {
                    return Err(Error::Config(format!("unknown configuration key `{key}`")));
                }
                node = obj.get_mut(*part).expect("checked");
            }
            *node = parse_value(raw);
        }
        let cfg: RunConfig = serde_json::from_value(root).map_err(|e| Error::Config(e.to_string()))?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.frontend.validate()?;
        self.backbone.validate()?;
        self.augmentation.validate()?;
        self.stage1.validate()?;
        self.stage2.validate()?;
        if self.frontend.n_mels != self.backbone.n_mels || self.frontend.n_frames != self.backbone.n_frames {
            return Err(Error::Config(format!(
                "frontend produces {}x{} features but the backbone expects {}x{}",
                self.frontend.n_mels, self.frontend.n_frames, self.backbone.n_mels, self.backbone.n_frames
            )));
        }
        Ok(())
    }

    pub fn load_options(&self) -> LoadOptions {
        LoadOptions {
            resample: self.frontend.resample,
            downmix: self.frontend.downmix,
        }
    }

    /// Feature pipeline with the configured augmentation policy.
    pub fn feature_pipeline(&self) -> Result<FeaturePipeline> {
        self.feature_pipeline_with(self.augmentation.clone())
    }

    pub fn feature_pipeline_with(&self, policy: AugmentationPolicy) -> Result<FeaturePipeline> {
        let cache = self.data.cache_dir.as_ref().map(FeatureCache::new);
        FeaturePipeline::new(&self.frontend, policy, cache)
    }

    pub fn load_dataset(&self, manifest: &Path) -> Result<Dataset> {
        if !manifest.exists() {
            return Err(Error::Config(format!("manifest not found: {}", manifest.display())));
        }
        Dataset::load(&Manifest::load(manifest)?, self.load_options())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Stage1,
    Stage2,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Stage1 => "stage1",
            Stage::Stage2 => "stage2",
        }
    }
}

/// Configuration stored inside every model checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSnapshot {
    pub stage: Stage,
    pub epoch: usize,
    pub run: RunConfig,
}

impl ModelSnapshot {
    pub fn new(stage: Stage, epoch: usize, run: &RunConfig) -> Self {
        ModelSnapshot {
            stage,
            epoch,
            run: run.clone(),
        }
    }

    pub fn to_value(&self) -> Value {
        serde_json::to_value(self).expect("snapshot serializes")
    }

    pub fn from_value(v: &Value) -> Result<Self> {
        serde_json::from_value(v.clone()).map_err(|e| Error::Checkpoint(format!("config snapshot: {e}")))
    }
}
