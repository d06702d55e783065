//! `key = value` configuration with command-line overrides.

use std::path::PathBuf;
use std::str::FromStr;

use part_core::data::SynthSpec;
use part_core::model::{ModelConfig, TrainConfig};
use part_core::tensor::OptimizerKind;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum ConfigError {
    #[error("unknown config key `{key}`")]
    UnknownKey { key: String },
    #[error("bad value for `{key}`: {value:?} ({reason})")]
    BadValue { key: String, value: String, reason: String },
    #[error("line {line}: expected `key = value`, got {text:?}")]
    Syntax { line: usize, text: String },
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

impl ConfigError {
    /// The offending key, when there is one.
    pub fn key(&self) -> Option<&str> {
        match self {
            Self::UnknownKey { key } | Self::BadValue { key, .. } => Some(key),
            _ => None,
        }
    }
}

/// Independent seeds for each consumer of randomness.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Seeds {
    pub data: u64,
    pub init: u64,
    /// Batch order and per-sample part discovery during training.
    pub train: u64,
    /// Part discovery in the `discover` command.
    pub discover: u64,
    /// Random input and kernel of the `equiv` sweep.
    pub equiv: u64,
}

impl Seeds {
    pub fn split(master: u64) -> Self {
        let derive = |stream: u64| {
            let mut rng = ChaCha8Rng::seed_from_u64(master);
            rng.set_stream(stream);
            rng.next_u64()
        };
        Self { data: derive(1), init: derive(2), train: derive(3), discover: derive(4), equiv: derive(5) }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EquivConfig {
    pub alphas: Vec<f64>,
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub kernel: usize,
}

impl Default for EquivConfig {
    fn default() -> Self {
        Self { alphas: vec![1.0, 10.0, 100.0, 1000.0], width: 8, height: 8, channels: 4, kernel: 3 }
    }
}

/// Fully resolved settings.
#[derive(Debug, Clone, PartialEq)]
pub struct Settings {
    pub seed: u64,
    pub seeds: Seeds,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: SynthSpec,
    /// Load `train/` and `test/` from here instead of generating data.
    pub data_dir: Option<PathBuf>,
    /// Test-set index used by `discover` and `cam`.
    pub sample: usize,
    /// Class explained by `cam`; the sample's label when unset.
    pub cam_class: Option<usize>,
    pub equiv: EquivConfig,
    /// Checkpoint read by `eval`, `discover` and `cam`; `<out>/model.ckpt` when unset.
    pub checkpoint: Option<PathBuf>,
}

impl Default for Settings {
    fn default() -> Self {
        let seed = 0;
        Self {
            seed,
            seeds: Seeds::split(seed),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            data: SynthSpec::default(),
            data_dir: None,
            sample: 0,
            cam_class: None,
            equiv: EquivConfig::default(),
            checkpoint: None,
        }
    }
}

/// Every recognised key.
pub const KEYS: &[&str] = &[
    "seed",
    "seed.data",
    "seed.init",
    "seed.train",
    "seed.discover",
    "seed.equiv",
    "epochs",
    "max_steps",
    "batch",
    "samples_per_class",
    "optimizer",
    "lr",
    "lr_step",
    "lr_gamma",
    "shift",
    "lambda",
    "use_transformer",
    "pos_encoding",
    "mask_logits",
    "heads_global",
    "heads_part",
    "stack_global",
    "stack_part",
    "head_dim",
    "shared_part_classifier",
    "model.channels",
    "model.widths",
    "parts.N",
    "parts.R",
    "parts.th",
    "parts.mu",
    "parts.sigma",
    "parts.eta_min",
    "parts.eta_max",
    "parts.eps",
    "parts.maxiter",
    "data.classes",
    "data.per_class",
    "data.width",
    "data.height",
    "data.motifs",
    "data.motif_size",
    "data.noise",
    "data.dir",
    "sample",
    "cam.class",
    "equiv.alphas",
    "equiv.width",
    "equiv.height",
    "equiv.channels",
    "equiv.kernel",
    "checkpoint",
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, ConfigError>
where
    T::Err: std::fmt::Display,
{
    value.parse().map_err(|e: T::Err| ConfigError::BadValue {
        key: key.to_string(),
        value: value.to_string(),
        reason: e.to_string(),
    })
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>, ConfigError>
where
    T::Err: std::fmt::Display,
{
    value.split(',').map(|v| parse(key, v.trim())).collect()
}

fn bad(key: &str, value: &str, reason: &str) -> ConfigError {
    ConfigError::BadValue { key: key.into(), value: value.into(), reason: reason.into() }
}

impl Settings {
    /// Applies one `key = value` pair. Seed keys are resolved in [`parse_config`].
    fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let m = &mut self.model;
        let d = &mut m.discovery;
        match key {
            "seed" => self.seed = parse(key, value)?,
            "seed.data" => self.seeds.data = parse(key, value)?,
            "seed.init" => self.seeds.init = parse(key, value)?,
            "seed.train" => self.seeds.train = parse(key, value)?,
            "seed.discover" => self.seeds.discover = parse(key, value)?,
            "seed.equiv" => self.seeds.equiv = parse(key, value)?,
            "epochs" => self.train.epochs = parse(key, value)?,
            "max_steps" => {
                self.train.max_steps = if value == "none" { None } else { Some(parse(key, value)?) };
            }
            "batch" => self.train.batch = parse(key, value)?,
            "samples_per_class" => self.train.per_class = parse(key, value)?,
            "optimizer" => self.train.optimizer = parse::<OptimizerKind>(key, value)?,
            "lr" => self.train.schedule.base = parse(key, value)?,
            "lr_step" => self.train.schedule.step = parse(key, value)?,
            "lr_gamma" => self.train.schedule.gamma = parse(key, value)?,
            "shift" => self.train.shift = parse(key, value)?,
            "lambda" => m.lambda = parse(key, value)?,
            "use_transformer" => m.use_transformer = parse(key, value)?,
            "pos_encoding" => m.pos_mode = parse(key, value)?,
            "mask_logits" => m.mask_logits = parse(key, value)?,
            "heads_global" => m.heads_global = parse(key, value)?,
            "heads_part" => m.heads_part = parse(key, value)?,
            "stack_global" => m.stack_global = parse(key, value)?,
            "stack_part" => m.stack_part = parse(key, value)?,
            "head_dim" => m.head_dim = parse(key, value)?,
            "shared_part_classifier" => m.shared_part_classifier = parse(key, value)?,
            "model.channels" => m.backbone.channels = parse(key, value)?,
            "model.widths" => {
                let w: Vec<usize> = parse_list(key, value)?;
                m.backbone.widths = w.try_into().map_err(|_| bad(key, value, "expected three widths"))?;
            }
            "parts.N" => d.parts = parse(key, value)?,
            "parts.R" => d.capacity = parse(key, value)?,
            "parts.th" => d.iou_threshold = parse(key, value)?,
            "parts.mu" => d.eta_mean = parse(key, value)?,
            "parts.sigma" => d.eta_std = parse(key, value)?,
            "parts.eta_min" => d.eta_min = parse(key, value)?,
            "parts.eta_max" => d.eta_max = parse(key, value)?,
            "parts.eps" => d.eps = parse(key, value)?,
            "parts.maxiter" => d.max_iter = parse(key, value)?,
            "data.classes" => self.data.classes = parse(key, value)?,
            "data.per_class" => self.data.per_class = parse(key, value)?,
            "data.width" => self.data.width = parse(key, value)?,
            "data.height" => self.data.height = parse(key, value)?,
            "data.motifs" => self.data.motifs = parse(key, value)?,
            "data.motif_size" => self.data.motif_size = parse(key, value)?,
            "data.noise" => self.data.noise = parse(key, value)?,
            "data.dir" => self.data_dir = Some(PathBuf::from(value)),
            "sample" => self.sample = parse(key, value)?,
            "cam.class" => self.cam_class = Some(parse(key, value)?),
            "equiv.alphas" => self.equiv.alphas = parse_list(key, value)?,
            "equiv.width" => self.equiv.width = parse(key, value)?,
            "equiv.height" => self.equiv.height = parse(key, value)?,
            "equiv.channels" => self.equiv.channels = parse(key, value)?,
            "equiv.kernel" => self.equiv.kernel = parse(key, value)?,
            "checkpoint" => self.checkpoint = Some(PathBuf::from(value)),
            _ => return Err(ConfigError::UnknownKey { key: key.to_string() }),
        }
        Ok(())
    }

    /// Copies data dimensions into the model and checks both.
    fn finish(mut self) -> Result<Self, ConfigError> {
        self.model.classes = self.data.classes;
        self.model.image = (self.data.width, self.data.height);
        self.data.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.model.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if self.train.batch == 0 || self.train.per_class == 0 || self.train.batch % self.train.per_class != 0 {
            return Err(ConfigError::Invalid(format!(
                "batch {} must be a positive multiple of samples_per_class {}",
                self.train.batch, self.train.per_class
            )));
        }
        if self.equiv.alphas.iter().any(|a| !(*a > 0.0)) {
            return Err(ConfigError::Invalid("equiv.alphas must be positive".into()));
        }
        Ok(self)
    }
}

/// Splits `key = value` (or `key=value`) text into pairs; `#` starts a comment.
pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>, ConfigError> {
    let mut pairs = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| ConfigError::Syntax { line: i + 1, text: raw.to_string() })?;
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() {
            return Err(ConfigError::Syntax { line: i + 1, text: raw.to_string() });
        }
        pairs.push((k.to_string(), v.to_string()));
    }
    Ok(pairs)
}

/// Defaults, then the file, then `--set` overrides, then `--seed`.
/// Per-consumer seeds derive from the master seed unless set explicitly.
pub fn parse_config(file: &str, overrides: &[String], seed: Option<u64>) -> Result<Settings, ConfigError> {
    let mut pairs = parse_pairs(file)?;
    for o in overrides {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| ConfigError::Syntax { line: 0, text: o.clone() })?;
        pairs.push((k.trim().to_string(), v.trim().to_string()));
    }
    let mut s = Settings::default();
    for (k, v) in &pairs {
        s.set(k, v)?;
    }
    if let Some(seed) = seed {
        s.seed = seed;
    }
    let explicit = s.seeds;
    let derived = Seeds::split(s.seed);
    let last = |key: &str| pairs.iter().any(|(k, _)| k == key);
    s.seeds = Seeds {
        data: if last("seed.data") { explicit.data } else { derived.data },
        init: if last("seed.init") { explicit.init } else { derived.init },
        train: if last("seed.train") { explicit.train } else { derived.train },
        discover: if last("seed.discover") { explicit.discover } else { derived.discover },
        equiv: if last("seed.equiv") { explicit.equiv } else { derived.equiv },
    };
    s.finish()
}
