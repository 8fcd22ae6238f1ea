//! Flat key=value run configuration.
//!
//! Lines are `key = value`, `#` starts a comment, unknown keys are rejected.
//! Every key has a documented default (see README); `paths.*` entries have
//! no defaults and each command checks for the ones it needs.

use pemi_core::encoder::PromptPositional;
use pemi_core::error::{Error, Result};
use pemi_core::hlr::Normalization;
use pemi_core::template::DEFAULT_LAYOUT;
use pemi_core::train::TrainConfig;
use std::path::{Path, PathBuf};

#[derive(Debug, Clone)]
pub struct EncoderSettings {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_seq_len: usize,
    pub seed: u64,
    pub prompt_positional: PromptPositional,
}

impl Default for EncoderSettings {
    fn default() -> Self {
        EncoderSettings {
            d_model: 64,
            n_layers: 4,
            n_heads: 4,
            d_ff: 256,
            max_seq_len: 128,
            seed: 0,
            prompt_positional: PromptPositional::Kept,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SynthSettings {
    pub per_label: usize,
    pub vocab_size: usize,
}

impl Default for SynthSettings {
    fn default() -> Self {
        SynthSettings {
            per_label: 200,
            vocab_size: 300,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct PathSettings {
    pub hierarchy: Option<PathBuf>,
    pub train: Option<PathBuf>,
    pub dev: Option<PathBuf>,
    pub test: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

impl PathSettings {
    /// The path for `paths.<key>`, or a config error naming the key.
    pub fn require(&self, key: &str) -> Result<&Path> {
        let slot = match key {
            "hierarchy" => &self.hierarchy,
            "train" => &self.train,
            "dev" => &self.dev,
            "test" => &self.test,
            "out" => &self.out,
            _ => &None,
        };
        slot.as_deref()
            .ok_or_else(|| Error::Config(format!("missing required config key paths.{key}")))
    }
}

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub layout: String,
    pub encoder: EncoderSettings,
    pub train: TrainConfig,
    pub normalization: Normalization,
    pub warm_start: bool,
    pub synth: SynthSettings,
    pub paths: PathSettings,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            layout: DEFAULT_LAYOUT.to_string(),
            encoder: EncoderSettings::default(),
            train: TrainConfig::default(),
            normalization: Normalization::Softmax,
            warm_start: true,
            synth: SynthSettings::default(),
            paths: PathSettings::default(),
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("bad value {value:?} for key {key}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(Error::Config(format!(
            "bad value {value:?} for key {key} (expected true or false)"
        ))),
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text, path.parent().unwrap_or(Path::new(".")))
    }

    /// Parses config text; relative paths resolve against `base`.
    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected key=value, got {raw:?}", i + 1))
            })?;
            let (key, value) = (key.trim(), value.trim());
            let path_of = |v: &str| -> PathBuf {
                let p = PathBuf::from(v);
                if p.is_absolute() {
                    p
                } else {
                    base.join(p)
                }
            };
            match key {
                "layout" => cfg.layout = value.to_string(),
                "encoder.d_model" => cfg.encoder.d_model = parse_num(key, value)?,
                "encoder.n_layers" => cfg.encoder.n_layers = parse_num(key, value)?,
                "encoder.n_heads" => cfg.encoder.n_heads = parse_num(key, value)?,
                "encoder.d_ff" => cfg.encoder.d_ff = parse_num(key, value)?,
                "encoder.max_seq_len" => cfg.encoder.max_seq_len = parse_num(key, value)?,
                "encoder.seed" => cfg.encoder.seed = parse_num(key, value)?,
                "encoder.prompt_positional" => {
                    cfg.encoder.prompt_positional = value.parse()?;
                }
                "train.lr" => cfg.train.learning_rate = parse_num(key, value)?,
                "train.batch" => cfg.train.batch_size = parse_num(key, value)?,
                "train.max_epochs" => cfg.train.max_epochs = parse_num(key, value)?,
                "train.eval_step" => cfg.train.eval_step = parse_num(key, value)?,
                "train.lambdas" => {
                    cfg.train.lambda = value
                        .split(',')
                        .map(|v| parse_num::<f32>(key, v.trim()))
                        .collect::<Result<Vec<f32>>>()?;
                }
                "train.seed" => cfg.train.seed = parse_num(key, value)?,
                "train.patience" => {
                    cfg.train.patience = if value == "none" {
                        None
                    } else {
                        Some(parse_num(key, value)?)
                    };
                }
                "hlr.normalization" => cfg.normalization = value.parse()?,
                "hlr.warm_start" => cfg.warm_start = parse_bool(key, value)?,
                "synth.per_label" => cfg.synth.per_label = parse_num(key, value)?,
                "synth.vocab_size" => cfg.synth.vocab_size = parse_num(key, value)?,
                "paths.hierarchy" => cfg.paths.hierarchy = Some(path_of(value)),
                "paths.train" => cfg.paths.train = Some(path_of(value)),
                "paths.dev" => cfg.paths.dev = Some(path_of(value)),
                "paths.test" => cfg.paths.test = Some(path_of(value)),
                "paths.out" => cfg.paths.out = Some(path_of(value)),
                _ => {
                    return Err(Error::Config(format!("unknown config key {key:?}")));
                }
            }
        }
        Ok(cfg)
    }
}
