use std::fs;
use std::path::{Path, PathBuf};

use fluff_core::detector::{DetectionHeadConfig, MultiboxConfig, NmsConfig};
use fluff_core::synth::SceneSpec;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

/// SGD with momentum; weight decay is added to the gradient.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            learning_rate: 1e-3,
            momentum: 0.9,
            weight_decay: 5e-4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Epochs (0-based) at whose start the rate is multiplied by `decay_factor`.
    pub decay_epochs: Vec<usize>,
    pub decay_factor: f64,
    pub horizontal_flip: bool,
    /// Parallel kernels; results are identical either way.
    pub parallel: bool,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            epochs: 1,
            batch_size: 32,
            decay_epochs: Vec::new(),
            decay_factor: 0.1,
            horizontal_flip: false,
            parallel: true,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    #[serde(default)]
    pub train: Option<PathBuf>,
    #[serde(default)]
    pub test: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    pub warmup_iters: usize,
    pub timed_iters: usize,
    pub batch_size: usize,
    pub parallel: bool,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            warmup_iters: 2,
            timed_iters: 20,
            batch_size: 1,
            parallel: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub network: DetectionHeadConfig,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    #[serde(default)]
    pub schedule: ScheduleConfig,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub loss: MultiboxConfig,
    #[serde(default)]
    pub nms: NmsConfig,
    #[serde(default)]
    pub bench: BenchConfig,
}

impl RunConfig {
    pub fn validate(&self) -> CliResult<()> {
        self.network.validate()?;
        let o = &self.optimizer;
        if !(o.learning_rate > 0.0 && o.learning_rate.is_finite()) || !(0.0..1.0).contains(&o.momentum) || o.weight_decay < 0.0 {
            return Err(CliError::Config(format!("optimizer settings out of range: {o:?}")));
        }
        if self.schedule.batch_size == 0 {
            return Err(CliError::Config("batch_size must be positive".into()));
        }
        if self.bench.timed_iters == 0 || self.bench.warmup_iters == 0 || self.bench.batch_size == 0 {
            return Err(CliError::Config("bench needs at least one warm-up and one timed iteration".into()));
        }
        Ok(())
    }

    /// Relative data paths are taken from the directory holding the config.
    pub fn resolve_paths(&mut self, base: &Path) {
        for p in [&mut self.data.train, &mut self.data.test].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let mut cfg: RunConfig = read_json(path)?;
        cfg.resolve_paths(path.parent().unwrap_or(Path::new(".")));
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Scene parameters plus split sizes for `gen-data`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSpec {
    pub scene: SceneSpec,
    pub train_images: usize,
    #[serde(default)]
    pub test_images: usize,
}

impl DataSpec {
    /// The test split draws from a seed whose top bit differs, so no test
    /// image seed can equal a training image seed.
    pub fn test_scene(&self) -> SceneSpec {
        SceneSpec {
            seed: self.scene.seed ^ (1 << 63),
            ..self.scene.clone()
        }
    }
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> CliResult<T> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| CliError::Data(format!("{}: {e}", dir.display())))?;
    }
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::Data(e.to_string()))?;
    fs::write(path, text + "\n").map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}
