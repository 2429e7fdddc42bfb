//! Line-oriented `key=value` configuration with flag overrides.
//!
//! Precedence: command-line flags > `MRAG_SEED` env var > config file >
//! built-in defaults. Unknown keys are rejected.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use mrag_core::optim::TrainConfig;

#[derive(Debug, Clone, Default)]
pub struct FileConfig {
    pub data_dir: Option<PathBuf>,
    pub model_file: Option<PathBuf>,
    pub surrogate_file: Option<PathBuf>,
    pub csv_log: Option<PathBuf>,
    pub learning_rate: Option<f64>,
    pub beta1: Option<f64>,
    pub beta2: Option<f64>,
    pub epsilon: Option<f64>,
    pub weight_decay: Option<f64>,
    pub batch_size: Option<usize>,
    pub steps: Option<usize>,
    pub quality: Option<u32>,
    pub seed: Option<u64>,
    pub fusion_layers: Option<usize>,
    pub embed_rate: Option<f64>,
    pub pretrain_epochs: Option<usize>,
}

pub const KNOWN_KEYS: &[&str] = &[
    "data_dir",
    "model_file",
    "surrogate_file",
    "csv_log",
    "learning_rate",
    "beta1",
    "beta2",
    "epsilon",
    "weight_decay",
    "batch_size",
    "steps",
    "quality",
    "seed",
    "fusion_layers",
    "embed_rate",
    "pretrain_epochs",
];

impl FileConfig {
    pub fn parse(path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| format!("cannot read config {}: {e}", path.display()))?;
        let mut map = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| format!("line {}: expected key=value", lineno + 1))?;
            let key = key.trim();
            if !KNOWN_KEYS.contains(&key) {
                return Err(format!("line {}: unknown key `{key}`", lineno + 1));
            }
            if map.insert(key.to_string(), value.trim().to_string()).is_some() {
                return Err(format!("line {}: duplicate key `{key}`", lineno + 1));
            }
        }
        let mut cfg = FileConfig::default();
        let get_num = |map: &BTreeMap<String, String>, key: &str| -> Result<Option<f64>, String> {
            map.get(key)
                .map(|v| v.parse::<f64>().map_err(|_| format!("key `{key}`: bad number `{v}`")))
                .transpose()
        };
        cfg.data_dir = map.get("data_dir").map(PathBuf::from);
        cfg.model_file = map.get("model_file").map(PathBuf::from);
        cfg.surrogate_file = map.get("surrogate_file").map(PathBuf::from);
        cfg.csv_log = map.get("csv_log").map(PathBuf::from);
        cfg.learning_rate = get_num(&map, "learning_rate")?;
        cfg.beta1 = get_num(&map, "beta1")?;
        cfg.beta2 = get_num(&map, "beta2")?;
        cfg.epsilon = get_num(&map, "epsilon")?;
        cfg.weight_decay = get_num(&map, "weight_decay")?;
        cfg.embed_rate = get_num(&map, "embed_rate")?;
        cfg.batch_size = get_num(&map, "batch_size")?.map(|v| v as usize);
        cfg.steps = get_num(&map, "steps")?.map(|v| v as usize);
        cfg.quality = get_num(&map, "quality")?.map(|v| v as u32);
        cfg.seed = get_num(&map, "seed")?.map(|v| v as u64);
        cfg.fusion_layers = get_num(&map, "fusion_layers")?.map(|v| v as usize);
        cfg.pretrain_epochs = get_num(&map, "pretrain_epochs")?.map(|v| v as usize);
        Ok(cfg)
    }

    /// Train hyperparameters after applying the file, then the env seed,
    /// then explicit flag overrides.
    pub fn train_config(&self, seed_flag: Option<u64>, steps_flag: Option<usize>) -> TrainConfig {
        let mut cfg = TrainConfig::default();
        if let Some(v) = self.learning_rate {
            cfg.learning_rate = v;
        }
        if let Some(v) = self.beta1 {
            cfg.beta1 = v;
        }
        if let Some(v) = self.beta2 {
            cfg.beta2 = v;
        }
        if let Some(v) = self.epsilon {
            cfg.epsilon = v;
        }
        if let Some(v) = self.weight_decay {
            cfg.weight_decay = v;
        }
        if let Some(v) = self.batch_size {
            cfg.batch_size = v;
        }
        if let Some(v) = self.steps {
            cfg.steps = v;
        }
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Ok(env_seed) = std::env::var("MRAG_SEED") {
            if let Ok(v) = env_seed.parse::<u64>() {
                cfg.seed = v;
            }
        }
        if let Some(v) = seed_flag {
            cfg.seed = v;
        }
        if let Some(v) = steps_flag {
            cfg.steps = v;
        }
        cfg
    }
}
