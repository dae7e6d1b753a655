use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::autoencoder::{AeConfig, AeLossWeights, AeTrainConfig};
use crate::backbone::UNetConfig;
use crate::conditioning::AdapterConfig;
use crate::diffusion::{DiffusionWeights, ScheduleConfig};
use crate::error::{Error, Result};
use crate::metrics::SsimConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    /// Cross-validation cohort size.
    pub n_subjects: usize,
    /// Disjoint pool used for the autoencoders and backbone pretraining.
    pub n_pretrain: usize,
    pub dims: [usize; 3],
    pub n_lesions: usize,
    pub seed_base: u64,
    pub pretrain_seed_base: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            n_subjects: 48,
            n_pretrain: 32,
            dims: [32, 32, 32],
            n_lesions: 3,
            seed_base: 1000,
            pretrain_seed_base: 100_000,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NormalizeConfig {
    pub lo_pct: f64,
    pub hi_pct: f64,
}

impl Default for NormalizeConfig {
    fn default() -> Self {
        Self {
            lo_pct: 0.0,
            hi_pct: 99.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AlignConfig {
    pub steps: usize,
    pub batch: usize,
    /// Random crop edge; 0 uses whole volumes.
    pub crop: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for AlignConfig {
    fn default() -> Self {
        Self {
            steps: 200,
            batch: 2,
            crop: 16,
            lr: 1e-3,
            seed: 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 3000,
            batch: 8,
            lr: 1e-3,
            seed: 4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Stage2Config {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub weights: DiffusionWeights,
    /// Decode `ẑ_y` for the edge term every this many steps; 0 disables it.
    pub edge_every: usize,
    pub adapt_cond_encoder: bool,
    pub seed: u64,
}

impl Default for Stage2Config {
    fn default() -> Self {
        Self {
            steps: 3000,
            batch: 8,
            lr: 1e-3,
            weights: DiffusionWeights::default(),
            edge_every: 8,
            adapt_cond_encoder: false,
            seed: 5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SampleConfig {
    pub steps: usize,
    pub eta: f64,
    /// Clamp on the scaled clean-latent estimate during sampling; 0 disables it.
    pub clip: f64,
    pub seed: u64,
    pub patch: [usize; 3],
    pub stride: [usize; 3],
}

impl Default for SampleConfig {
    fn default() -> Self {
        Self {
            steps: 25,
            eta: 0.0,
            clip: 3.0,
            seed: 6,
            patch: [16, 16, 16],
            stride: [8, 8, 8],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub data_range: f64,
    pub ssim: SsimConfig,
    /// `(t, ε)` draws per subject for validation noise loss.
    pub noise_draws: usize,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            data_range: 1.0,
            ssim: SsimConfig::default(),
            noise_draws: 8,
            seed: 7,
        }
    }
}

/// Everything a run needs; serialized verbatim into each checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub out_dir: PathBuf,
    /// Dataset manifest written by `gen-data`; defaults to `<out_dir>/data/manifest.json`.
    pub manifest: Option<PathBuf>,
    pub folds: usize,
    pub data: DataConfig,
    pub normalize: NormalizeConfig,
    pub autoencoder: AeConfig,
    pub train_ae_psr: AeTrainConfig,
    pub train_ae_cond: AeTrainConfig,
    pub align: AlignConfig,
    pub unet: UNetConfig,
    pub schedule: ScheduleConfig,
    pub pretrain: PretrainConfig,
    pub adapters: AdapterConfig,
    pub stage2: Stage2Config,
    pub sample: SampleConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    /// The 32³ phantom reference configuration.
    fn default() -> Self {
        let ae_train = AeTrainConfig {
            steps: 1500,
            batch: 4,
            crop: 16,
            lr: 2e-3,
            weights: AeLossWeights::default(),
            adv_warmup: 0.25,
            use_adversarial: true,
            seed: 1,
        };
        Self {
            out_dir: PathBuf::from("runs/default"),
            manifest: None,
            folds: 5,
            data: DataConfig::default(),
            normalize: NormalizeConfig::default(),
            autoencoder: AeConfig::default(),
            train_ae_psr: ae_train.clone(),
            train_ae_cond: AeTrainConfig { seed: 2, ..ae_train },
            align: AlignConfig::default(),
            unet: UNetConfig {
                in_channels: 4,
                levels: vec![16, 32, 32],
                attention_levels: vec![1, 2],
                time_embed_dim: 64,
                num_groups: 8,
            },
            schedule: ScheduleConfig {
                steps: 100,
                beta_min: 1e-3,
                beta_max: 0.2,
                ..Default::default()
            },
            pretrain: PretrainConfig::default(),
            adapters: AdapterConfig::default(),
            stage2: Stage2Config::default(),
            sample: SampleConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Format(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Format(format!("config: {e}")))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn manifest_path(&self) -> PathBuf {
        self.manifest
            .clone()
            .unwrap_or_else(|| self.out_dir.join("data").join("manifest.json"))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        for (name, w) in [("train_ae_psr", &self.train_ae_psr), ("train_ae_cond", &self.train_ae_cond)] {
            w.weights.validate().map_err(|e| Error::InvalidArgument(format!("{name}: {e}")))?;
            if w.batch == 0 {
                return bad(format!("{name}.batch must be positive"));
            }
        }
        let dw = &self.stage2.weights;
        if dw.edge < 0.0 || dw.align < 0.0 {
            return bad(format!("stage2 weights must be >= 0, got {dw:?}"));
        }
        if self.folds < 2 {
            return bad(format!("need at least 2 folds, got {}", self.folds));
        }
        if self.data.dims.iter().any(|d| d % 4 != 0) {
            return bad(format!("dims {:?} must be divisible by 4", self.data.dims));
        }
        if self.sample.patch.iter().any(|p| p % (4 * self.unet.depth_factor()) != 0) {
            return bad(format!(
                "patch {:?} must be divisible by {} (autoencoder x backbone downsampling)",
                self.sample.patch,
                4 * self.unet.depth_factor()
            ));
        }
        if !(self.sample.clip >= 0.0) || !(0.0..=1.0).contains(&self.sample.eta) {
            return bad(format!("sample.clip must be >= 0 and eta in [0, 1], got {} and {}", self.sample.clip, self.sample.eta));
        }
        if self.stage2.batch == 0 || self.pretrain.batch == 0 || self.align.batch == 0 {
            return bad("batch sizes must be positive".into());
        }
        if self.autoencoder.latent_channels != self.unet.in_channels {
            return bad(format!(
                "latent channels {} vs backbone input channels {}",
                self.autoencoder.latent_channels, self.unet.in_channels
            ));
        }
        self.unet.validate()?;
        crate::diffusion::make_schedule(&self.schedule)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_roundtrip_and_partial_files() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        let text = cfg.to_toml().unwrap();
        assert_eq!(RunConfig::from_toml(&text).unwrap(), cfg);
        let partial = RunConfig::from_toml("folds = 3\n[stage2]\nsteps = 7\n").unwrap();
        assert_eq!((partial.folds, partial.stage2.steps, partial.stage2.batch), (3, 7, 8));
        assert!(RunConfig::from_toml("[stage2.weights]\nedge = -1.0\n").is_err());
        assert!(RunConfig::from_toml("folds = 1\n").is_err());
    }
}
