//! Run configuration: one TOML file with flat dotted keys (for example
//! `train.lr = 1e-3`) fully reproduces a run. Every key has a default so
//! minimal configs stay short; see the README for the full key list.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use serde::Deserialize;

use qucal_core::qnet::{ArchConfig, QuantileEmbeddingConfig};
use qucal_core::training::TrainConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Task {
    Gaussian,
    Poisson,
    MriUndersample,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImageSection {
    #[serde(default = "default_image_size")]
    pub size: usize,
}

fn default_image_size() -> usize {
    32
}

impl Default for ImageSection {
    fn default() -> Self {
        Self {
            size: default_image_size(),
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSection {
    #[serde(default = "default_n_train")]
    pub n_train: usize,
    #[serde(default = "default_n_calib")]
    pub n_calib: usize,
    #[serde(default = "default_n_val")]
    pub n_val: usize,
}

fn default_n_train() -> usize {
    180
}
fn default_n_calib() -> usize {
    40
}
fn default_n_val() -> usize {
    20
}

impl Default for DatasetSection {
    fn default() -> Self {
        Self {
            n_train: default_n_train(),
            n_calib: default_n_calib(),
            n_val: default_n_val(),
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSection {
    /// Gaussian task: per-image noise level is U(0, sigma_max).
    #[serde(default = "default_sigma_max")]
    pub sigma_max: f64,
    /// Poisson task: count scale is U(lambda_min, lambda_max).
    #[serde(default = "default_lambda_min")]
    pub lambda_min: f64,
    #[serde(default = "default_lambda_max")]
    pub lambda_max: f64,
}

fn default_sigma_max() -> f64 {
    0.3
}
fn default_lambda_min() -> f64 {
    50.0
}
fn default_lambda_max() -> f64 {
    100.0
}

impl Default for NoiseSection {
    fn default() -> Self {
        Self {
            sigma_max: default_sigma_max(),
            lambda_min: default_lambda_min(),
            lambda_max: default_lambda_max(),
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MriSection {
    #[serde(default = "default_acceleration")]
    pub acceleration: f64,
    #[serde(default = "default_center_fraction")]
    pub center_fraction: f64,
}

fn default_acceleration() -> f64 {
    4.0
}
fn default_center_fraction() -> f64 {
    0.08
}

impl Default for MriSection {
    fn default() -> Self {
        Self {
            acceleration: default_acceleration(),
            center_fraction: default_center_fraction(),
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    #[serde(default = "default_channels")]
    pub channels: Vec<usize>,
    #[serde(default = "default_embed_dim")]
    pub embed_dim: usize,
    #[serde(default = "default_mlp_hidden")]
    pub mlp_hidden: usize,
}

fn default_channels() -> Vec<usize> {
    vec![16, 32]
}
fn default_embed_dim() -> usize {
    32
}
fn default_mlp_hidden() -> usize {
    64
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            channels: default_channels(),
            embed_dim: default_embed_dim(),
            mlp_hidden: default_mlp_hidden(),
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_q_min")]
    pub q_min: f64,
    #[serde(default = "default_q_max")]
    pub q_max: f64,
    #[serde(default)]
    pub checkpoint_every: usize,
}

fn default_epochs() -> usize {
    10
}
fn default_batch_size() -> usize {
    16
}
fn default_lr() -> f64 {
    1e-3
}
fn default_q_min() -> f64 {
    0.005
}
fn default_q_max() -> f64 {
    0.995
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            epochs: default_epochs(),
            batch_size: default_batch_size(),
            lr: default_lr(),
            q_min: default_q_min(),
            q_max: default_q_max(),
            checkpoint_every: 0,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CalibrateSection {
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_delta_q")]
    pub delta_q: f64,
    #[serde(default = "default_max_iters")]
    pub max_iters: usize,
    #[serde(default = "default_baseline_q_lower")]
    pub baseline_q_lower: f64,
    #[serde(default = "default_baseline_q_upper")]
    pub baseline_q_upper: f64,
}

fn default_alpha() -> f64 {
    0.1
}
fn default_delta_q() -> f64 {
    0.002
}
fn default_max_iters() -> usize {
    2000
}
fn default_baseline_q_lower() -> f64 {
    0.05
}
fn default_baseline_q_upper() -> f64 {
    0.95
}

impl Default for CalibrateSection {
    fn default() -> Self {
        Self {
            alpha: default_alpha(),
            delta_q: default_delta_q(),
            max_iters: default_max_iters(),
            baseline_q_lower: default_baseline_q_lower(),
            baseline_q_upper: default_baseline_q_upper(),
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PdfSection {
    /// Sweep levels; defaults to 33 levels from 0.02 to 0.98.
    #[serde(default = "qucal_core::pdfest::default_q_grid")]
    pub q_grid: Vec<f64>,
    /// Miscoverage budgets for the conformalized density; empty disables it.
    #[serde(default)]
    pub alpha_list: Vec<f64>,
    /// (row, col) pixels exported by the pdf command.
    #[serde(default = "default_pixels")]
    pub pixels: Vec<[usize; 2]>,
    /// Validation-split sample the density is computed for.
    #[serde(default)]
    pub sample_index: usize,
}

fn default_pixels() -> Vec<[usize; 2]> {
    vec![[8, 8]]
}

impl Default for PdfSection {
    fn default() -> Self {
        Self {
            q_grid: qucal_core::pdfest::default_q_grid(),
            alpha_list: Vec::new(),
            pixels: default_pixels(),
            sample_index: 0,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub task: Task,
    pub out_dir: PathBuf,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub image: ImageSection,
    #[serde(default)]
    pub dataset: DatasetSection,
    #[serde(default)]
    pub noise: NoiseSection,
    #[serde(default)]
    pub mri: MriSection,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub calibrate: CalibrateSection,
    #[serde(default)]
    pub pdf: PdfSection,
}

impl RunConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let cfg: RunConfig =
            toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        let size = self.image.size;
        if size < 16 {
            bail!("image.size must be at least 16, got {}", size);
        }
        let stages = self.model.channels.len();
        if size % (1 << stages) != 0 {
            bail!(
                "image.size {} must be divisible by 2^{} for {} encoder stages",
                size,
                stages,
                stages
            );
        }
        if self.dataset.n_train == 0 || self.dataset.n_calib == 0 || self.dataset.n_val == 0 {
            bail!("dataset sizes must all be positive");
        }
        if !(0.0 < self.calibrate.alpha && self.calibrate.alpha < 1.0) {
            bail!("calibrate.alpha must lie in (0, 1)");
        }
        match self.task {
            Task::Gaussian => {
                if self.noise.sigma_max < 0.0 {
                    bail!("noise.sigma_max must be nonnegative");
                }
            }
            Task::Poisson => {
                if !(0.0 < self.noise.lambda_min && self.noise.lambda_min <= self.noise.lambda_max)
                {
                    bail!("noise.lambda_min/lambda_max must satisfy 0 < min <= max");
                }
            }
            Task::MriUndersample => {
                if self.mri.acceleration < 1.0 {
                    bail!("mri.acceleration must be >= 1");
                }
                if !(0.0..1.0).contains(&self.mri.center_fraction) {
                    bail!("mri.center_fraction must lie in [0, 1)");
                }
            }
        }
        for p in &self.pdf.pixels {
            if p[0] >= size || p[1] >= size {
                bail!("pdf pixel {:?} outside a {}x{} image", p, size, size);
            }
        }
        Ok(())
    }

    pub fn arch_config(&self) -> ArchConfig {
        ArchConfig {
            channels: self.model.channels.clone(),
            embed: QuantileEmbeddingConfig {
                dim: self.model.embed_dim,
                mlp_hidden: self.model.mlp_hidden,
            },
            seed: stage_seed(self.seed, StageSeed::ModelInit),
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.train.epochs,
            batch_size: self.train.batch_size,
            lr: self.train.lr,
            seed: stage_seed(self.seed, StageSeed::Train),
            q_min: self.train.q_min,
            q_max: self.train.q_max,
            checkpoint_every: self.train.checkpoint_every,
        }
    }

    pub fn n_total(&self) -> usize {
        self.dataset.n_train + self.dataset.n_calib + self.dataset.n_val
    }
}

/// Stage tags for deriving independent seeds from the single run seed.
#[derive(Debug, Clone, Copy)]
pub enum StageSeed {
    Phantom(usize),
    Noise(usize),
    Mask(usize),
    Split,
    ModelInit,
    Train,
}

pub fn stage_seed(seed: u64, stage: StageSeed) -> u64 {
    fn splitmix64(mut x: u64) -> u64 {
        x = x.wrapping_add(0x9e3779b97f4a7c15);
        x = (x ^ (x >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
        x = (x ^ (x >> 27)).wrapping_mul(0x94d049bb133111eb);
        x ^ (x >> 31)
    }
    let (tag, idx) = match stage {
        StageSeed::Phantom(i) => (1u64, i as u64),
        StageSeed::Noise(i) => (2, i as u64),
        StageSeed::Mask(i) => (3, i as u64),
        StageSeed::Split => (4, 0),
        StageSeed::ModelInit => (5, 0),
        StageSeed::Train => (6, 0),
    };
    splitmix64(splitmix64(seed ^ (tag << 56)) ^ idx)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_parses_with_defaults() {
        let cfg: RunConfig = toml::from_str(
            r#"
task = "gaussian"
out_dir = "runs/demo"
"#,
        )
        .unwrap();
        cfg.validate().unwrap();
        assert_eq!(cfg.image.size, 32);
        assert_eq!(cfg.dataset.n_train, 180);
        assert_eq!(cfg.calibrate.alpha, 0.1);
        assert_eq!(cfg.pdf.q_grid.len(), 33);
    }

    #[test]
    fn dotted_keys_parse() {
        let cfg: RunConfig = toml::from_str(
            r#"
task = "mri-undersample"
out_dir = "runs/mri"
seed = 7
image.size = 64
train.lr = 0.002
calibrate.alpha = 0.2
mri.acceleration = 4.0
"#,
        )
        .unwrap();
        cfg.validate().unwrap();
        assert_eq!(cfg.image.size, 64);
        assert_eq!(cfg.train.lr, 0.002);
        assert_eq!(cfg.calibrate.alpha, 0.2);
    }

    #[test]
    fn rejects_indivisible_size() {
        let cfg: RunConfig = toml::from_str(
            r#"
task = "gaussian"
out_dir = "runs/demo"
image.size = 20
"#,
        )
        .unwrap();
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn rejects_unknown_keys() {
        let r: Result<RunConfig, _> = toml::from_str(
            r#"
task = "gaussian"
out_dir = "runs/demo"
train.learning_rate = 0.1
"#,
        );
        assert!(r.is_err());
    }

    #[test]
    fn stage_seeds_differ() {
        let a = stage_seed(0, StageSeed::Phantom(0));
        let b = stage_seed(0, StageSeed::Noise(0));
        let c = stage_seed(0, StageSeed::Phantom(1));
        assert_ne!(a, b);
        assert_ne!(a, c);
        assert_eq!(a, stage_seed(0, StageSeed::Phantom(0)));
    }
}
