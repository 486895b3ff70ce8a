//! Run configuration: one file (JSON or TOML) with per-command sections,
//! all fields defaulted. Every command writes its resolved configuration
//! next to its outputs so a run is reproducible from the artifacts alone.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use pilight_core::difftoy::{AeConfig, DenoiserConfig};
use pilight_core::losses::LossWeights;
use pilight_core::scenegen::{DatasetConfig, RecordOptions};

use crate::CliError;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub out: PathBuf,
    pub gen: GenConfig,
    pub train: TrainSection,
    pub relight: RelightSection,
    pub eval: EvalSection,
    pub ablate: AblateSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 42,
            out: PathBuf::from("out"),
            gen: GenConfig::default(),
            train: TrainSection::default(),
            relight: RelightSection::default(),
            eval: EvalSection::default(),
            ablate: AblateSection::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct GenConfig {
    pub scenes: usize,
    pub object_test_scenes: usize,
    pub scene_test_scenes: usize,
    pub views: usize,
    pub lights: usize,
    pub resolution: usize,
    pub env_height: usize,
    pub ball_resolution: usize,
    pub max_complexity: usize,
    pub cast_shadows: bool,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            scenes: 64,
            object_test_scenes: 8,
            scene_test_scenes: 4,
            views: 4,
            lights: 4,
            resolution: 64,
            env_height: 32,
            ball_resolution: 64,
            max_complexity: 3,
            cast_shadows: false,
        }
    }
}

impl GenConfig {
    pub fn dataset_config(&self, seed: u64) -> DatasetConfig {
        DatasetConfig {
            seed,
            train_scenes: self.scenes,
            object_test_scenes: self.object_test_scenes,
            scene_test_scenes: self.scene_test_scenes,
            views: self.views,
            lights: self.lights,
            max_complexity: self.max_complexity,
            record: RecordOptions {
                resolution: self.resolution,
                env_height: self.env_height,
                ball_resolution: self.ball_resolution,
                cast_shadows: self.cast_shadows,
            },
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainSection {
    pub dataset: PathBuf,
    /// Desk-scale working default; the reference training recipe uses 1e-5
    /// at production scale.
    pub lr: f64,
    pub steps_stage1: usize,
    pub steps_stage2: usize,
    pub p_uncond: f64,
    pub log_every: usize,
    pub ae_steps: usize,
    pub ae_lr: f64,
    pub ae_c1: usize,
    pub ae_c2: usize,
    pub token_dim: usize,
    pub blocks: usize,
    pub ffn_mult: usize,
    pub weights: LossWeights,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            dataset: PathBuf::from("out/dataset"),
            lr: 1e-3,
            steps_stage1: 1200,
            steps_stage2: 900,
            p_uncond: 0.1,
            log_every: 1,
            ae_steps: 8000,
            ae_lr: 1e-3,
            ae_c1: 16,
            ae_c2: 32,
            token_dim: 128,
            blocks: 4,
            ffn_mult: 2,
            weights: LossWeights::default(),
        }
    }
}

impl TrainSection {
    pub fn ae_config(&self) -> AeConfig {
        AeConfig { c1: self.ae_c1, c2: self.ae_c2, latent_ch: 4 }
    }

    pub fn denoiser_config(&self) -> DenoiserConfig {
        DenoiserConfig {
            token_dim: self.token_dim,
            blocks: self.blocks,
            ffn_mult: self.ffn_mult,
            ..DenoiserConfig::default()
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct RelightSection {
    pub checkpoints: PathBuf,
    pub cfg_scale: f64,
    pub stage1_cfg_scale: f64,
    pub ddim_steps: usize,
}

impl Default for RelightSection {
    fn default() -> Self {
        RelightSection {
            checkpoints: PathBuf::from("out"),
            cfg_scale: 1.5,
            stage1_cfg_scale: 1.0,
            ddim_steps: 10,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalSection {
    pub dataset: PathBuf,
    pub checkpoints: PathBuf,
    pub split: String,
    pub cfg_scale_stage1: f64,
    pub cfg_scale_stage2: f64,
    pub ddim_steps: usize,
    /// Cap on scored records (0 = all); evaluation cost is dominated by
    /// DDIM sampling.
    pub max_records: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            dataset: PathBuf::from("out/dataset"),
            checkpoints: PathBuf::from("out"),
            split: "object_test".into(),
            cfg_scale_stage1: 1.0,
            cfg_scale_stage2: 1.5,
            ddim_steps: 10,
            max_records: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct AblateSection {
    pub dataset: PathBuf,
    pub steps: usize,
    pub lr: f64,
    pub eval_ddim_steps: usize,
    pub eval_max_records: usize,
    /// Below this budget an ordering miss degrades to a warning instead of
    /// a trend failure: tiny runs have no statistical power.
    pub min_steps_for_assert: usize,
    pub cfg_sweep: Vec<f64>,
}

impl Default for AblateSection {
    fn default() -> Self {
        AblateSection {
            dataset: PathBuf::from("out/dataset"),
            steps: 700,
            lr: 1e-3,
            eval_ddim_steps: 8,
            eval_max_records: 12,
            min_steps_for_assert: 300,
            cfg_sweep: vec![1.0, 1.5, 2.0, 2.5],
        }
    }
}

impl RunConfig {
    /// Load from JSON (`.json`) or TOML (anything else).
    pub fn load(path: &Path) -> Result<RunConfig, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Data(format!("config {}: {e}", path.display())))?;
        if path.extension().is_some_and(|e| e == "json") {
            serde_json::from_str(&text)
                .map_err(|e| CliError::Usage(format!("config {}: {e}", path.display())))
        } else {
            toml::from_str(&text)
                .map_err(|e| CliError::Usage(format!("config {}: {e}", path.display())))
        }
    }

    /// Write the fully resolved configuration next to the outputs.
    pub fn write_resolved(&self, out_dir: &Path) -> Result<(), CliError> {
        std::fs::create_dir_all(out_dir)
            .map_err(|e| CliError::Data(format!("create {}: {e}", out_dir.display())))?;
        let path = out_dir.join("resolved_config.json");
        let json = serde_json::to_string_pretty(self).expect("config serializes");
        std::fs::write(&path, json)
            .map_err(|e| CliError::Data(format!("write {}: {e}", path.display())))
    }
}
