use std::path::{Path, PathBuf};

use nerveseg::error::{Error, Result};
use nerveseg::models::{Arch, ModelOptions};
use nerveseg::nn::ShortcutSource;
use nerveseg::training::{AdamConfig, DiceLossCfg, TrainConfig};
use serde::{Deserialize, Serialize};

/// Everything `nerveseg train` needs. Relative paths are resolved against
/// the directory holding the config file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub arch: Arch,
    pub base_filters: usize,
    /// `[height, width]`
    pub image_size: [usize; 2],
    pub epochs: usize,
    pub batch_size: usize,
    #[serde(default = "defaults::lr")]
    pub lr: f64,
    #[serde(default = "defaults::beta1")]
    pub beta1: f64,
    #[serde(default = "defaults::beta2")]
    pub beta2: f64,
    #[serde(default = "defaults::adam_eps")]
    pub adam_eps: f64,
    #[serde(default = "defaults::dice_k")]
    pub dice_k: f64,
    #[serde(default)]
    pub seed: u64,
    pub train_data: PathBuf,
    pub val_data: PathBuf,
    pub checkpoint: PathBuf,
    /// Defaults to `metrics.csv` next to the checkpoint.
    #[serde(default)]
    pub metrics: Option<PathBuf>,
    #[serde(default = "defaults::threshold")]
    pub threshold: f64,
    #[serde(default = "defaults::bn_momentum")]
    pub bn_momentum: f64,
    #[serde(default = "defaults::bn_eps")]
    pub bn_eps: f64,
    #[serde(default)]
    pub bias_under_bn: bool,
    #[serde(default = "defaults::scale_b")]
    pub scale_b: f64,
    #[serde(default)]
    pub shortcut_source: ShortcutSource,
    /// Fill the `seconds` column of the metrics file.
    #[serde(default)]
    pub record_time: bool,
    #[serde(default = "defaults::recalibrate_bn")]
    pub recalibrate_bn: bool,
}

mod defaults {
    use nerveseg::models::ModelOptions;
    use nerveseg::training::{AdamConfig, DiceLossCfg, TrainConfig};

    pub fn lr() -> f64 {
        AdamConfig::default().lr
    }
    pub fn beta1() -> f64 {
        AdamConfig::default().beta1
    }
    pub fn beta2() -> f64 {
        AdamConfig::default().beta2
    }
    pub fn adam_eps() -> f64 {
        AdamConfig::default().eps
    }
    pub fn dice_k() -> f64 {
        DiceLossCfg::default().k
    }
    pub fn threshold() -> f64 {
        TrainConfig::default().threshold
    }
    pub fn bn_momentum() -> f64 {
        ModelOptions::default().bn_momentum
    }
    pub fn bn_eps() -> f64 {
        ModelOptions::default().bn_eps
    }
    pub fn scale_b() -> f64 {
        ModelOptions::default().scale_b
    }
    pub fn recalibrate_bn() -> bool {
        TrainConfig::default().recalibrate_bn
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads, validates and resolves relative paths against the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?;
        let mut cfg = Self::from_json(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [&mut cfg.train_data, &mut cfg.val_data, &mut cfg.checkpoint] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        if let Some(p) = cfg.metrics.as_mut() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let [h, w] = self.image_size;
        let d = self.arch.spatial_divisor();
        if h == 0 || w == 0 || h % d != 0 || w % d != 0 {
            return Err(Error::Config(format!("image_size {h}x{w} must be divisible by {d} for {}", self.arch)));
        }
        if self.base_filters == 0 {
            return Err(Error::Config("base_filters must be at least 1".into()));
        }
        if !(self.bn_momentum >= 0.0 && self.bn_momentum < 1.0) {
            return Err(Error::Config(format!("bn_momentum {} outside [0, 1)", self.bn_momentum)));
        }
        if !(self.bn_eps > 0.0) {
            return Err(Error::Config("bn_eps must be positive".into()));
        }
        self.train_config().validate()
    }

    pub fn model_options(&self) -> ModelOptions {
        ModelOptions {
            base_filters: self.base_filters,
            bias_under_bn: self.bias_under_bn,
            scale_b: self.scale_b,
            shortcut_source: self.shortcut_source,
            bn_eps: self.bn_eps,
            bn_momentum: self.bn_momentum,
            seed: self.seed,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            adam: AdamConfig { lr: self.lr, beta1: self.beta1, beta2: self.beta2, eps: self.adam_eps },
            dice: DiceLossCfg { k: self.dice_k },
            seed: self.seed,
            threshold: self.threshold,
            record_time: self.record_time,
            recalibrate_bn: self.recalibrate_bn,
        }
    }

    pub fn metrics_path(&self) -> PathBuf {
        self.metrics.clone().unwrap_or_else(|| {
            self.checkpoint.parent().unwrap_or(Path::new(".")).join("metrics.csv")
        })
    }
}
