//! Training run configuration file.
//!
//! ```toml
//! seed = 0                  # weight init and tuple sampling
//! mode = "single-flow"      # single-flow | single-pixels | mask | multi-flow
//! iterations = 10000
//! batch_size = 16
//! loss_region = "full"      # full | foreground
//! checkpoint_every = 0      # 0: checkpoint only at the end
//! architecture = "auto"     # auto | default_64 | desk_32 | tiny | reduced
//! data = "data/"            # optional, --data overrides
//!
//! [adam]                    # every key optional
//! learning_rate = 1e-4
//! beta1 = 0.9
//! beta2 = 0.999
//! epsilon = 1e-8
//! step_size = 50000
//! gamma = 0.5
//!
//! [network]                 # optional; replaces `architecture` entirely
//! image_size = 32
//! conv_channels = [16, 32, 64, 64, 128]
//! ...
//! ```
//!
//! `auto` picks `default_64` for 64px datasets and `desk_32` for 32px ones. The
//! resolved configuration, with an explicit `[network]` table, is written to
//! `<out>/config.toml` and can be passed back through `--config` unchanged.

use std::path::{Path, PathBuf};

use aflow::network::NetworkConfig;
use aflow::trainer::{AdamConfig, LossRegion, TrainMode, TrainSettings};
use aflow::{Error, Result};
use serde::{Deserialize, Serialize};

fn default_mode() -> TrainMode {
    TrainMode::SingleFlow
}
fn default_iterations() -> u64 {
    10_000
}
fn default_batch_size() -> usize {
    16
}
fn default_loss_region() -> LossRegion {
    LossRegion::Full
}
fn default_architecture() -> String {
    "auto".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_mode")]
    pub mode: TrainMode,
    #[serde(default = "default_iterations")]
    pub iterations: u64,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_loss_region")]
    pub loss_region: LossRegion,
    #[serde(default)]
    pub checkpoint_every: u64,
    #[serde(default = "default_architecture")]
    pub architecture: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data: Option<PathBuf>,
    #[serde(default)]
    pub adam: AdamConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub network: Option<NetworkConfig>,
}

impl Default for RunConfig {
    fn default() -> Self {
        toml::from_str("").expect("every field has a default")
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config(format!("config: {e}")))
    }

    /// Fixes the architecture for `image_size`, writing it into `network`.
    pub fn resolve(&mut self, image_size: usize) -> Result<NetworkConfig> {
        let mode = self.mode.output_mode();
        let cfg = match &self.network {
            Some(n) => n.clone().with_mode(mode),
            None => match self.architecture.as_str() {
                "auto" => match image_size {
                    64 => NetworkConfig::default_64(mode),
                    32 => NetworkConfig::desk_32(mode),
                    s => return Err(Error::config(format!("no default architecture for {s}px images"))),
                },
                "default_64" => NetworkConfig::default_64(mode),
                "desk_32" => NetworkConfig::desk_32(mode),
                "tiny" => NetworkConfig::tiny(mode),
                "reduced" => NetworkConfig::reduced(mode),
                other => return Err(Error::config(format!("unknown architecture {other:?}"))),
            },
        };
        cfg.validate()?;
        if cfg.image_size != image_size {
            return Err(Error::config(format!(
                "architecture expects {}px images, dataset has {image_size}px",
                cfg.image_size
            )));
        }
        self.network = Some(cfg.clone());
        Ok(cfg)
    }

    pub fn settings(&self) -> TrainSettings {
        TrainSettings {
            mode: self.mode,
            batch_size: self.batch_size,
            seed: self.seed,
            loss_region: self.loss_region,
            checkpoint_every: self.checkpoint_every,
            adam: self.adam,
        }
    }
}
