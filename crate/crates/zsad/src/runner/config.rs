//! Run configuration: one serializable struct covering every ablation axis,
//! with defaults matching the reference training recipe.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::{Path, PathBuf};

use crate::backbone::{BackboneHandle, DpamConfig, ModelSpec};
use crate::data::DatasetLayout;
use crate::error::{Error, Result};
use crate::losses::GlocalConfig;
use crate::prompts::PromptMode;
use crate::scoring::FusionRule;

/// Environment variable naming the cache/weights directory used to resolve
/// relative weight paths.
pub const CACHE_DIR_ENV: &str = "ZSAD_CACHE_DIR";

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct BackboneConfig {
    pub spec: String,
    /// Checkpoint path; omitted for stub specs, which are synthesized.
    pub weights: Option<PathBuf>,
    /// Seed for synthesized stub weights.
    pub stub_seed: u64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            spec: "vit-l-14-336".into(),
            weights: None,
            stub_seed: 42,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct PromptConfig {
    /// Learnable word embedding count E.
    pub context_len: usize,
    /// Deep tuning depth M'.
    pub tuning_depth: usize,
    /// Tuning token length per layer.
    pub tuning_length: usize,
    pub mode: PromptMode,
    pub abnormal_word: String,
    /// Class name used in aware/plain_clip modes.
    pub class_name: String,
}

impl Default for PromptConfig {
    fn default() -> Self {
        PromptConfig {
            context_len: 12,
            tuning_depth: 9,
            tuning_length: 4,
            mode: PromptMode::Agnostic,
            abnormal_word: crate::prompts::DEFAULT_ABNORMAL_WORD.into(),
            class_name: "object".into(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimConfig {
    pub name: String,
    pub lr: f64,
    pub batch: usize,
    pub epochs: usize,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            name: "adam".into(),
            lr: 0.001,
            batch: 8,
            epochs: 15,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct DataConfig {
    pub train_root: Option<PathBuf>,
    pub eval_root: Option<PathBuf>,
    pub layout: DatasetLayout,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub backbone: BackboneConfig,
    pub prompt: PromptConfig,
    pub dpam: DpamConfig,
    pub tap_layers: Vec<usize>,
    pub loss: GlocalConfig,
    pub optim: OptimConfig,
    pub data: DataConfig,
    pub seed: u64,
    /// Gaussian smoothing parameter for the anomaly map.
    pub sigma: f64,
    pub fusion: FusionRule,
    pub output_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            backbone: BackboneConfig::default(),
            prompt: PromptConfig::default(),
            dpam: DpamConfig::default(),
            tap_layers: vec![6, 12, 18, 24],
            loss: GlocalConfig::default(),
            optim: OptimConfig::default(),
            data: DataConfig::default(),
            seed: 0,
            sigma: 4.0,
            fusion: FusionRule::Mean,
            output_dir: PathBuf::from("runs"),
        }
    }
}

impl RunConfig {
    /// Stub-backbone configuration used by desk-scale tests and examples.
    pub fn stub_defaults() -> Self {
        RunConfig {
            backbone: BackboneConfig {
                spec: "stub-2l".into(),
                weights: None,
                stub_seed: 42,
            },
            prompt: PromptConfig {
                tuning_depth: 2,
                ..Default::default()
            },
            dpam: DpamConfig {
                start_layer: 1,
                ..Default::default()
            },
            tap_layers: vec![1, 2],
            optim: OptimConfig {
                // Desk-scale schedule is short (tens of steps), so the stub
                // uses a much larger step size than the full-scale recipe.
                lr: 0.01,
                batch: 2,
                ..Default::default()
            },
            ..Default::default()
        }
    }

    /// Parse TOML (`.toml`) or JSON (anything else) from disk.
    pub fn from_file(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let is_toml = path
            .extension()
            .and_then(|e| e.to_str())
            .map(|e| e.eq_ignore_ascii_case("toml"))
            .unwrap_or(false);
        if is_toml {
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
        } else {
            serde_json::from_str(&text)
                .map_err(|e| Error::Config(format!("{}: {e}", path.display())))
        }
    }

    /// SHA-256 over the canonical JSON form; records every knob including
    /// both dataset paths, so train/eval cross-contamination is detectable.
    pub fn fingerprint(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let mut hasher = Sha256::new();
        hasher.update(json.as_bytes());
        format!("{:x}", hasher.finalize())
    }

    pub fn validate(&self, spec: &ModelSpec) -> Result<()> {
        if self.prompt.context_len < 1 {
            return Err(Error::Config("prompt context_len must be >= 1".into()));
        }
        if self.prompt.tuning_depth > spec.text_layers {
            return Err(Error::Config(format!(
                "tuning_depth {} exceeds text encoder depth {}",
                self.prompt.tuning_depth, spec.text_layers
            )));
        }
        self.dpam.validate(spec.visual_layers)?;
        self.loss.validate()?;
        if self.tap_layers.is_empty() {
            return Err(Error::Config("tap_layers must not be empty".into()));
        }
        for &t in &self.tap_layers {
            if t < 1 || t > spec.visual_layers {
                return Err(Error::Config(format!(
                    "tap layer {t} out of range 1..={}",
                    spec.visual_layers
                )));
            }
        }
        if self.optim.name != "adam" {
            return Err(Error::Config(format!(
                "unknown optimizer '{}'",
                self.optim.name
            )));
        }
        if self.optim.batch == 0 || self.optim.epochs == 0 {
            return Err(Error::Config("batch and epochs must be >= 1".into()));
        }
        if self.sigma < 0.0 {
            return Err(Error::Config("sigma must be >= 0".into()));
        }
        Ok(())
    }

    /// Resolve a weights path, falling back to `$ZSAD_CACHE_DIR`.
    fn resolve_weights(&self, path: &Path) -> PathBuf {
        if path.is_file() || path.is_absolute() {
            return path.to_path_buf();
        }
        if let Ok(cache) = std::env::var(CACHE_DIR_ENV) {
            let candidate = Path::new(&cache).join(path);
            if candidate.is_file() {
                return candidate;
            }
        }
        path.to_path_buf()
    }

    /// Load (or synthesize, for stub specs) the frozen backbone and validate
    /// the rest of the configuration against it.
    pub fn load_backbone(&self) -> Result<BackboneHandle> {
        let handle = match &self.backbone.weights {
            Some(path) => {
                crate::backbone::load_backbone(&self.backbone.spec, &self.resolve_weights(path))?
            }
            None if self.backbone.spec == "stub-2l" => {
                BackboneHandle::stub(self.backbone.stub_seed)
            }
            None => {
                return Err(Error::Config(format!(
                    "model spec '{}' requires a weights path",
                    self.backbone.spec
                )))
            }
        };
        self.validate(&handle.spec)?;
        Ok(handle)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_the_reference_recipe() {
        let c = RunConfig::default();
        assert_eq!(c.prompt.context_len, 12);
        assert_eq!(c.prompt.tuning_depth, 9);
        assert_eq!(c.prompt.tuning_length, 4);
        assert_eq!(c.tap_layers, vec![6, 12, 18, 24]);
        assert_eq!(c.optim.lr, 0.001);
        assert_eq!(c.optim.batch, 8);
        assert_eq!(c.optim.epochs, 15);
        assert_eq!(c.loss.lambda, 1.0);
        assert_eq!(c.sigma, 4.0);
    }

    #[test]
    fn toml_and_json_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let toml_path = dir.path().join("run.toml");
        std::fs::write(&toml_path, "seed = 7\n[optim]\nlr = 0.01\n").unwrap();
        let c = RunConfig::from_file(&toml_path).unwrap();
        assert_eq!(c.seed, 7);
        assert_eq!(c.optim.lr, 0.01);

        let json_path = dir.path().join("run.json");
        std::fs::write(&json_path, r#"{"seed": 9, "sigma": 2.0}"#).unwrap();
        let c = RunConfig::from_file(&json_path).unwrap();
        assert_eq!(c.seed, 9);
        assert_eq!(c.sigma, 2.0);
    }

    #[test]
    fn fingerprint_tracks_every_knob() {
        let a = RunConfig::stub_defaults();
        let mut b = RunConfig::stub_defaults();
        assert_eq!(a.fingerprint(), b.fingerprint());
        b.data.eval_root = Some(PathBuf::from("/elsewhere"));
        assert_ne!(a.fingerprint(), b.fingerprint());
    }

    #[test]
    fn full_scale_spec_requires_weights() {
        let c = RunConfig::default();
        assert!(matches!(c.load_backbone(), Err(Error::Config(_))));
    }
}
