//! Run configuration, read from TOML. Every field has a default and unknown
//! keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use trajvid_core::scene::SceneDistribution;
use trajvid_core::trajectory::DensifyParams;

use crate::dataset::IngestSpec;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, SamplerConfig};
use crate::providers::Endpoint;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Dataset directory written by `synth` and read by `train`.
    pub root: PathBuf,
    pub count: usize,
    pub train_fraction: f64,
    pub scenes: SceneDistribution,
    pub ingest: IngestSpec,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            root: PathBuf::from("data"),
            count: 500,
            train_fraction: 0.8,
            scenes: SceneDistribution::default(),
            ingest: IngestSpec::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    /// Backbone alone, no conditioning.
    Core,
    /// Injector, flow mapper and adapters; backbone frozen unless configured.
    Conditioned,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub out_dir: PathBuf,
    /// Steps of backbone pretraining.
    pub core_steps: usize,
    /// Steps of conditioned training after pretraining.
    pub cond_steps: usize,
    /// Steps of completion-network training (0 keeps the closed-form densifier).
    pub completion_steps: usize,
    pub completion_lr: f64,
    pub batch_size: usize,
    pub lr: f64,
    pub core_lr: f64,
    pub weight_decay: f64,
    pub freeze_core: bool,
    pub checkpoint_every: usize,
    /// Checkpoint to continue from.
    pub resume: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            out_dir: PathBuf::from("runs/default"),
            core_steps: 2000,
            cond_steps: 3000,
            completion_steps: 0,
            completion_lr: 1e-3,
            batch_size: 4,
            lr: 2e-5,
            core_lr: 2e-5,
            weight_decay: 0.01,
            freeze_core: true,
            checkpoint_every: 500,
            resume: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ProviderKind {
    /// Luminance bins and luminance depth.
    #[default]
    Heuristic,
    External,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProviderConfig {
    pub segmentation: ProviderKind,
    pub depth: ProviderKind,
    pub segmentation_endpoint: Option<Endpoint>,
    pub depth_endpoint: Option<Endpoint>,
    pub heuristic_bins: usize,
    pub timeout_secs: u64,
}

impl Default for ProviderConfig {
    fn default() -> Self {
        Self {
            segmentation: ProviderKind::Heuristic,
            depth: ProviderKind::Heuristic,
            segmentation_endpoint: None,
            depth_endpoint: None,
            heuristic_bins: 4,
            timeout_secs: 60,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrajectoryConfig {
    /// Densifier parameters; scaled from the 256-pixel reference when absent.
    pub densify: Option<DensifyParams>,
    /// Use the trained completion network when the checkpoint has one.
    pub use_completion: bool,
}

impl Default for TrajectoryConfig {
    fn default() -> Self {
        Self {
            densify: None,
            use_completion: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ServeConfig {
    pub host: String,
    pub port: u16,
    pub checkpoint: Option<PathBuf>,
    /// Where job outputs are written.
    pub work_dir: PathBuf,
}

impl Default for ServeConfig {
    fn default() -> Self {
        Self {
            host: "127.0.0.1".into(),
            port: 8080,
            checkpoint: None,
            work_dir: PathBuf::from("serve"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    /// Compute device; only `cpu` is built in.
    pub device: String,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub sampler: SamplerConfig,
    pub providers: ProviderConfig,
    pub trajectory: TrajectoryConfig,
    pub serve: ServeConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            device: "cpu".into(),
            data: DataConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            sampler: SamplerConfig::default(),
            providers: ProviderConfig::default(),
            trajectory: TrajectoryConfig::default(),
            serve: ServeConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.check()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn check(&self) -> Result<()> {
        if self.device != "cpu" {
            return Err(Error::Config(format!("device {:?} is not available; use \"cpu\"", self.device)));
        }
        self.model.check()?;
        let d = &self.data;
        if !(0.0..=1.0).contains(&d.train_fraction) {
            return Err(Error::Config(format!("train_fraction {} must lie in [0, 1]", d.train_fraction)));
        }
        if (d.scenes.height, d.scenes.width, d.scenes.frames) != (self.model.height, self.model.width, self.model.frames)
        {
            return Err(Error::Config(format!(
                "scenes are {}x{}x{}, model is {}x{}x{}",
                d.scenes.frames, d.scenes.height, d.scenes.width, self.model.frames, self.model.height, self.model.width
            )));
        }
        let t = &self.train;
        if t.batch_size == 0 || t.checkpoint_every == 0 {
            return Err(Error::Config("batch_size and checkpoint_every must be positive".into()));
        }
        if !(t.lr > 0.0 && t.core_lr > 0.0) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if self.sampler.steps == 0 || self.sampler.steps > self.model.schedule.num_steps {
            return Err(Error::Config(format!(
                "sampler steps {} must lie in 1..={}",
                self.sampler.steps, self.model.schedule.num_steps
            )));
        }
        let p = &self.providers;
        if p.segmentation == ProviderKind::External && p.segmentation_endpoint.is_none() {
            return Err(Error::Config("external segmentation needs segmentation_endpoint".into()));
        }
        if p.depth == ProviderKind::External && p.depth_endpoint.is_none() {
            return Err(Error::Config("external depth needs depth_endpoint".into()));
        }
        if let Some(d) = &self.trajectory.densify {
            d.check()?;
        }
        Ok(())
    }

    pub fn densify_params(&self) -> DensifyParams {
        self.trajectory
            .densify
            .unwrap_or_else(|| DensifyParams::for_resolution(self.model.height, self.model.width))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let cfg = RunConfig::default();
        cfg.check().unwrap();
        assert_eq!(RunConfig::parse(&cfg.to_toml()).unwrap(), cfg);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = RunConfig::parse("[model.injector]\nuse_segmnet_feature = false\n").unwrap_err();
        assert!(err.to_string().contains("use_segmnet_feature"), "{err}");
        assert!(RunConfig::parse("sed = 3").is_err());
    }

    #[test]
    fn partial_files_fill_defaults() {
        let cfg = RunConfig::parse("seed = 7\n[model.fusion]\nuse_msf = false\n").unwrap();
        assert_eq!(cfg.seed, 7);
        assert!(!cfg.model.fusion.use_msf);
        assert_eq!(cfg.train.batch_size, 4);
    }

    #[test]
    fn mismatched_scene_size_is_rejected() {
        assert!(RunConfig::parse("[data.scenes]\nwidth = 48\n").is_err());
    }
}
