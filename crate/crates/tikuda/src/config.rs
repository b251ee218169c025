//! Plain-text run configuration: `[section]` headers with `key = value`
//! lines, `#`/`;` comments, and `--set section.key=value` overrides.
//!
//! Unknown sections and keys are hard errors so a typo in a weight name
//! cannot silently fall back to a default. `render()` writes a canonical
//! snapshot that parses back to the same configuration.

use std::fmt::Write as _;
use std::path::Path;

use thiserror::Error;

use crate::alignment::Similarity;
use crate::stgnn::ModelConfig;
use crate::trainer::{Method, TrainConfig};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("unknown section [{0}]")]
    UnknownSection(String),
    #[error("unknown key {section}.{key}")]
    UnknownKey { section: String, key: String },
    #[error("invalid value for {key}: {msg}")]
    InvalidValue { key: String, msg: String },
    #[error("bad --set override {0:?}: expected section.key=value")]
    BadOverride(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

type Result<V> = std::result::Result<V, ConfigError>;

/// Data-source settings for the CLI pipeline.
#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    pub source: String,
    pub target: String,
    /// Sensor column names, in node order.
    pub sensors: Vec<String>,
    pub label: String,
    pub stride: usize,
    /// "full" or a path to a 0/1 adjacency matrix file.
    pub graph: String,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            source: String::new(),
            target: String::new(),
            sensors: Vec::new(),
            label: String::new(),
            stride: 1,
            graph: "full".to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Config {
    pub train: TrainConfig,
    pub model: ModelConfig,
    pub data: DataConfig,
}

impl PartialEq for TrainConfig {
    fn eq(&self, other: &Self) -> bool {
        self.render_kv() == other.render_kv()
    }
}

impl TrainConfig {
    fn render_kv(&self) -> String {
        let a = &self.alignment;
        format!(
            "lr = {}\nbatch = {}\nepochs = {}\ngamma_angle_max = {}\ngamma_scale_max = {}\n\
             schedule_gain = {}\nmethod = {}\nseed = {}\nholdout_fraction = {}\n\
             @alpha = {}\n@similarity = {}\n@epsilon_norm = {}\n@dare_gram_energy_threshold = {}\n\
             @power_max_iters = {}\n@power_tol = {}\n@power_seed = {}",
            self.lr,
            self.batch,
            self.epochs,
            self.gamma_angle_max,
            self.gamma_scale_max,
            self.schedule_gain,
            self.method.name(),
            self.seed,
            self.holdout_fraction,
            a.alpha,
            match a.similarity {
                Similarity::Haversine => "haversine",
                Similarity::Cosine => "cosine",
            },
            a.epsilon_norm,
            a.dare_gram_energy_threshold,
            a.power.max_iters,
            a.power.tol,
            a.power.seed,
        )
    }
}

impl Default for Config {
    fn default() -> Self {
        Config {
            train: TrainConfig::default(),
            model: ModelConfig::default(),
            data: DataConfig::default(),
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| ConfigError::InvalidValue {
        key: key.to_string(),
        msg: format!("cannot parse {v:?}"),
    })
}

impl Config {
    pub fn from_file(path: &Path) -> Result<Config> {
        let text = std::fs::read_to_string(path)?;
        Config::from_str_cfg(&text)
    }

    pub fn from_str_cfg(text: &str) -> Result<Config> {
        let mut cfg = Config::default();
        let mut section = String::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split(['#', ';']).next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if line.starts_with('[') {
                if !line.ends_with(']') {
                    return Err(ConfigError::Parse {
                        line: i + 1,
                        msg: format!("malformed section header {line:?}"),
                    });
                }
                section = line[1..line.len() - 1].trim().to_string();
                if !matches!(section.as_str(), "train" | "model" | "alignment" | "data") {
                    return Err(ConfigError::UnknownSection(section));
                }
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(ConfigError::Parse {
                    line: i + 1,
                    msg: format!("expected key = value, got {line:?}"),
                });
            };
            cfg.set(&section, key.trim(), value.trim())?;
        }
        Ok(cfg)
    }

    /// Apply a `section.key=value` override string.
    pub fn apply_override(&mut self, spec: &str) -> Result<()> {
        let (path, value) =
            spec.split_once('=').ok_or_else(|| ConfigError::BadOverride(spec.to_string()))?;
        let (section, key) =
            path.split_once('.').ok_or_else(|| ConfigError::BadOverride(spec.to_string()))?;
        self.set(section.trim(), key.trim(), value.trim())
    }

    pub fn set(&mut self, section: &str, key: &str, value: &str) -> Result<()> {
        let unknown = || ConfigError::UnknownKey {
            section: section.to_string(),
            key: key.to_string(),
        };
        match section {
            "train" => match key {
                "lr" => self.train.lr = parse_num(key, value)?,
                "batch" => self.train.batch = parse_num(key, value)?,
                "epochs" => self.train.epochs = parse_num(key, value)?,
                "gamma_angle_max" => self.train.gamma_angle_max = parse_num(key, value)?,
                "gamma_scale_max" => self.train.gamma_scale_max = parse_num(key, value)?,
                "schedule_gain" => self.train.schedule_gain = parse_num(key, value)?,
                "seed" => self.train.seed = parse_num(key, value)?,
                "holdout_fraction" => self.train.holdout_fraction = parse_num(key, value)?,
                "method" => {
                    self.train.method = Method::parse(value).ok_or_else(|| {
                        ConfigError::InvalidValue {
                            key: key.to_string(),
                            msg: format!("unknown method {value:?}"),
                        }
                    })?
                }
                _ => return Err(unknown()),
            },
            "alignment" => {
                let a = &mut self.train.alignment;
                match key {
                    "alpha" => a.alpha = parse_num(key, value)?,
                    "epsilon_norm" => a.epsilon_norm = parse_num(key, value)?,
                    "dare_gram_energy_threshold" => {
                        a.dare_gram_energy_threshold = parse_num(key, value)?
                    }
                    "power_max_iters" => a.power.max_iters = parse_num(key, value)?,
                    "power_tol" => a.power.tol = parse_num(key, value)?,
                    "power_seed" => a.power.seed = parse_num(key, value)?,
                    "similarity" => {
                        a.similarity = match value {
                            "haversine" => Similarity::Haversine,
                            "cosine" => Similarity::Cosine,
                            _ => {
                                return Err(ConfigError::InvalidValue {
                                    key: key.to_string(),
                                    msg: format!("unknown similarity {value:?}"),
                                })
                            }
                        }
                    }
                    _ => return Err(unknown()),
                }
            }
            "model" => match key {
                "n_nodes" => self.model.n_nodes = parse_num(key, value)?,
                "in_features" => self.model.in_features = parse_num(key, value)?,
                "window" => self.model.window = parse_num(key, value)?,
                "hidden" => self.model.hidden = parse_num(key, value)?,
                "gru_layers" => self.model.gru_layers = parse_num(key, value)?,
                "embed_dim" => self.model.embed_dim = parse_num(key, value)?,
                "leaky_slope" => self.model.leaky_slope = parse_num(key, value)?,
                _ => return Err(unknown()),
            },
            "data" => match key {
                "source" => self.data.source = value.to_string(),
                "target" => self.data.target = value.to_string(),
                "label" => self.data.label = value.to_string(),
                "graph" => self.data.graph = value.to_string(),
                "stride" => self.data.stride = parse_num(key, value)?,
                "sensors" => {
                    self.data.sensors =
                        value.split(',').map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect()
                }
                _ => return Err(unknown()),
            },
            "" => {
                return Err(ConfigError::Parse {
                    line: 0,
                    msg: format!("key {key:?} appears before any [section] header"),
                })
            }
            _ => return Err(ConfigError::UnknownSection(section.to_string())),
        }
        Ok(())
    }

    /// Canonical snapshot text; parses back to an equal configuration.
    pub fn render(&self) -> String {
        let t = &self.train;
        let a = &t.alignment;
        let m = &self.model;
        let d = &self.data;
        let mut s = String::new();
        let _ = writeln!(s, "[train]");
        let _ = writeln!(s, "lr = {}", t.lr);
        let _ = writeln!(s, "batch = {}", t.batch);
        let _ = writeln!(s, "epochs = {}", t.epochs);
        let _ = writeln!(s, "gamma_angle_max = {}", t.gamma_angle_max);
        let _ = writeln!(s, "gamma_scale_max = {}", t.gamma_scale_max);
        let _ = writeln!(s, "schedule_gain = {}", t.schedule_gain);
        let _ = writeln!(s, "method = {}", t.method.name());
        let _ = writeln!(s, "seed = {}", t.seed);
        let _ = writeln!(s, "holdout_fraction = {}", t.holdout_fraction);
        let _ = writeln!(s, "\n[alignment]");
        let _ = writeln!(s, "alpha = {}", a.alpha);
        let _ = writeln!(
            s,
            "similarity = {}",
            match a.similarity {
                Similarity::Haversine => "haversine",
                Similarity::Cosine => "cosine",
            }
        );
        let _ = writeln!(s, "epsilon_norm = {}", a.epsilon_norm);
        let _ = writeln!(s, "dare_gram_energy_threshold = {}", a.dare_gram_energy_threshold);
        let _ = writeln!(s, "power_max_iters = {}", a.power.max_iters);
        let _ = writeln!(s, "power_tol = {}", a.power.tol);
        let _ = writeln!(s, "power_seed = {}", a.power.seed);
        let _ = writeln!(s, "\n[model]");
        let _ = writeln!(s, "n_nodes = {}", m.n_nodes);
        let _ = writeln!(s, "in_features = {}", m.in_features);
        let _ = writeln!(s, "window = {}", m.window);
        let _ = writeln!(s, "hidden = {}", m.hidden);
        let _ = writeln!(s, "gru_layers = {}", m.gru_layers);
        let _ = writeln!(s, "embed_dim = {}", m.embed_dim);
        let _ = writeln!(s, "leaky_slope = {}", m.leaky_slope);
        let _ = writeln!(s, "\n[data]");
        let _ = writeln!(s, "source = {}", d.source);
        let _ = writeln!(s, "target = {}", d.target);
        let _ = writeln!(s, "sensors = {}", d.sensors.join(","));
        let _ = writeln!(s, "label = {}", d.label);
        let _ = writeln!(s, "stride = {}", d.stride);
        let _ = writeln!(s, "graph = {}", d.graph);
        s
    }
}
