//! Run configuration as a flat `section.key = value` text file.
//!
//! Every key has a default and unknown keys are rejected. [`RunConfig::to_text`]
//! writes every key, so a saved file reproduces a run exactly.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::box_algebra::MeetMode;
use crate::model::{EvolutionTarget, ModelConfig, ScoreMode};
use crate::quad_store::{DataOptions, IntervalMode};
use crate::time_codec::TimeWarp;
use crate::trainer::TrainConfig;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("unknown config key {0:?}")]
    UnknownKey(String),
    #[error("bad value {value:?} for {key}: expected {expected}")]
    BadValue {
        key: String,
        value: String,
        expected: &'static str,
    },
    #[error("line {line}: expected `key = value`, found {text:?}")]
    Malformed { line: usize, text: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub data_dir: Option<PathBuf>,
    pub data: DataOptions,
    pub model: ModelConfig,
    /// Hidden width used when `time.warp = mlp`.
    pub warp_hidden: usize,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            data_dir: None,
            data: DataOptions::default(),
            model: ModelConfig::default(),
            warp_hidden: 8,
            train: TrainConfig::default(),
        }
    }
}

pub const KEYS: &[&str] = &[
    "data.dir",
    "data.granularity",
    "data.interval_cap",
    "data.interval_mode",
    "time.order",
    "time.normalize",
    "time.warp",
    "time.warp_hidden",
    "model.dim",
    "model.beta",
    "model.meet",
    "model.score",
    "model.evolution",
    "model.init_center",
    "model.init_width_min",
    "model.init_width_max",
    "model.init_translation",
    "model.init_time_basis",
    "train.lr",
    "train.epochs",
    "train.batch_size",
    "train.neg_ratio",
    "train.adam_beta1",
    "train.adam_beta2",
    "train.adam_eps",
    "train.seed",
    "train.eval_every",
    "train.clamp_eps",
    "train.l2",
    "train.workers",
];

fn parse_num<T: FromStr>(key: &str, value: &str, expected: &'static str) -> Result<T, ConfigError> {
    value.parse().map_err(|_| ConfigError::BadValue {
        key: key.to_string(),
        value: value.to_string(),
        expected,
    })
}

fn parse_choice<T: Copy>(key: &str, value: &str, options: &[(&str, T)], expected: &'static str) -> Result<T, ConfigError> {
    options
        .iter()
        .find(|(name, _)| *name == value)
        .map(|(_, v)| *v)
        .ok_or_else(|| ConfigError::BadValue {
            key: key.to_string(),
            value: value.to_string(),
            expected,
        })
}

const MEET: &[(&str, MeetMode)] = &[("gumbel", MeetMode::Gumbel), ("hard", MeetMode::Hard)];
const SCORE: &[(&str, ScoreMode)] = &[("shared", ScoreMode::Shared), ("head", ScoreMode::Head)];
const EVOLUTION: &[(&str, EvolutionTarget)] = &[
    ("entity", EvolutionTarget::Entity),
    ("relation", EvolutionTarget::Relation),
    ("both", EvolutionTarget::Both),
];
const INTERVAL: &[(&str, IntervalMode)] = &[("expand", IntervalMode::Expand), ("sample", IntervalMode::Sample)];
const BOOL: &[(&str, bool)] = &[("true", true), ("false", false)];

fn name_of<T: PartialEq + Copy>(options: &[(&'static str, T)], v: T) -> &'static str {
    options.iter().find(|(_, x)| *x == v).map(|(n, _)| *n).expect("every variant is named")
}

impl RunConfig {
    /// Sets one key from its text form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let v = value.trim();
        const REAL: &str = "a number";
        const COUNT: &str = "a non-negative integer";
        let m = &mut self.model;
        let t = &mut self.train;
        match key {
            "data.dir" => self.data_dir = (!v.is_empty()).then(|| PathBuf::from(v)),
            "data.granularity" => self.data.granularity = parse_num(key, v, COUNT)?,
            "data.interval_cap" => self.data.interval_cap = parse_num(key, v, COUNT)?,
            "data.interval_mode" => t.interval_mode = parse_choice(key, v, INTERVAL, "expand or sample")?,
            "time.order" => m.order = parse_num(key, v, COUNT)?,
            "time.normalize" => m.normalize_time = parse_choice(key, v, BOOL, "true or false")?,
            "time.warp" => {
                m.warp = match v {
                    "linear" => TimeWarp::Linear,
                    "mlp" => TimeWarp::Mlp {
                        hidden: self.warp_hidden,
                    },
                    _ => {
                        return Err(ConfigError::BadValue {
                            key: key.into(),
                            value: v.into(),
                            expected: "linear or mlp",
                        })
                    }
                }
            }
            "time.warp_hidden" => {
                self.warp_hidden = parse_num(key, v, COUNT)?;
                if let TimeWarp::Mlp { hidden } = &mut m.warp {
                    *hidden = self.warp_hidden;
                }
            }
            "model.dim" => m.dim = parse_num(key, v, COUNT)?,
            "model.beta" => m.beta = parse_num(key, v, REAL)?,
            "model.meet" => m.meet = parse_choice(key, v, MEET, "gumbel or hard")?,
            "model.score" => m.score = parse_choice(key, v, SCORE, "shared or head")?,
            "model.evolution" => m.evolution = parse_choice(key, v, EVOLUTION, "entity, relation or both")?,
            "model.init_center" => m.init.center = parse_num(key, v, REAL)?,
            "model.init_width_min" => m.init.width_min = parse_num(key, v, REAL)?,
            "model.init_width_max" => m.init.width_max = parse_num(key, v, REAL)?,
            "model.init_translation" => m.init.translation = parse_num(key, v, REAL)?,
            "model.init_time_basis" => m.init.time_basis = parse_num(key, v, REAL)?,
            "train.lr" => t.lr = parse_num(key, v, REAL)?,
            "train.epochs" => t.epochs = parse_num(key, v, COUNT)?,
            "train.batch_size" => t.batch_size = parse_num(key, v, COUNT)?,
            "train.neg_ratio" => t.neg_ratio = parse_num(key, v, COUNT)?,
            "train.adam_beta1" => t.adam.beta1 = parse_num(key, v, REAL)?,
            "train.adam_beta2" => t.adam.beta2 = parse_num(key, v, REAL)?,
            "train.adam_eps" => t.adam.eps = parse_num(key, v, REAL)?,
            "train.seed" => t.seed = parse_num(key, v, COUNT)?,
            "train.eval_every" => t.eval_every = parse_num(key, v, COUNT)?,
            "train.clamp_eps" => t.clamp_eps = parse_num(key, v, REAL)?,
            "train.l2" => t.l2 = parse_num(key, v, REAL)?,
            "train.workers" => t.workers = parse_num(key, v, COUNT)?,
            _ => return Err(ConfigError::UnknownKey(key.to_string())),
        }
        Ok(())
    }

    /// Current value of `key` in the form [`RunConfig::set`] accepts.
    pub fn get(&self, key: &str) -> Result<String, ConfigError> {
        let m = &self.model;
        let t = &self.train;
        Ok(match key {
            "data.dir" => self
                .data_dir
                .as_ref()
                .map(|p| p.display().to_string())
                .unwrap_or_default(),
            "data.granularity" => self.data.granularity.to_string(),
            "data.interval_cap" => self.data.interval_cap.to_string(),
            "data.interval_mode" => name_of(INTERVAL, t.interval_mode).into(),
            "time.order" => m.order.to_string(),
            "time.normalize" => m.normalize_time.to_string(),
            "time.warp" => match m.warp {
                TimeWarp::Linear => "linear".into(),
                TimeWarp::Mlp { .. } => "mlp".into(),
            },
            "time.warp_hidden" => self.warp_hidden.to_string(),
            "model.dim" => m.dim.to_string(),
            "model.beta" => format!("{:?}", m.beta),
            "model.meet" => name_of(MEET, m.meet).into(),
            "model.score" => name_of(SCORE, m.score).into(),
            "model.evolution" => name_of(EVOLUTION, m.evolution).into(),
            "model.init_center" => format!("{:?}", m.init.center),
            "model.init_width_min" => format!("{:?}", m.init.width_min),
            "model.init_width_max" => format!("{:?}", m.init.width_max),
            "model.init_translation" => format!("{:?}", m.init.translation),
            "model.init_time_basis" => format!("{:?}", m.init.time_basis),
            "train.lr" => format!("{:?}", t.lr),
            "train.epochs" => t.epochs.to_string(),
            "train.batch_size" => t.batch_size.to_string(),
            "train.neg_ratio" => t.neg_ratio.to_string(),
            "train.adam_beta1" => format!("{:?}", t.adam.beta1),
            "train.adam_beta2" => format!("{:?}", t.adam.beta2),
            "train.adam_eps" => format!("{:?}", t.adam.eps),
            "train.seed" => t.seed.to_string(),
            "train.eval_every" => t.eval_every.to_string(),
            "train.clamp_eps" => format!("{:?}", t.clamp_eps),
            "train.l2" => format!("{:?}", t.l2),
            "train.workers" => t.workers.to_string(),
            _ => return Err(ConfigError::UnknownKey(key.to_string())),
        })
    }

    /// Applies `key = value` lines on top of `self`; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<(), ConfigError> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| ConfigError::Malformed {
                line: i + 1,
                text: raw.to_string(),
            })?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut c = Self::default();
        c.apply_text(text)?;
        Ok(c)
    }

    pub fn from_file(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::parse(&text)
    }

    /// Every key in canonical order.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for key in KEYS {
            writeln!(s, "{key} = {}", self.get(key).expect("listed keys are known")).unwrap();
        }
        s
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |msg: &str| Err(ConfigError::Invalid(msg.to_string()));
        let m = &self.model;
        if m.dim == 0 {
            return bad("model.dim must be positive");
        }
        if m.order == 0 {
            return bad("time.order must be at least 1");
        }
        if !(m.beta > 0.0 && m.beta.is_finite()) {
            return bad("model.beta must be positive");
        }
        if !(m.init.width_min > 0.0 && m.init.width_min <= m.init.width_max) {
            return bad("model.init_width_min must be positive and at most model.init_width_max");
        }
        if !(m.init.center >= 0.0 && m.init.translation >= 0.0 && m.init.time_basis >= 0.0) {
            return bad("init ranges must be non-negative");
        }
        if self.data.granularity == 0 {
            return bad("data.granularity must be at least 1");
        }
        if self.data.interval_cap < 2 {
            return bad("data.interval_cap must be at least 2");
        }
        if matches!(m.warp, TimeWarp::Mlp { hidden: 0 }) {
            return bad("time.warp_hidden must be positive");
        }
        self.train
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))
    }
}
