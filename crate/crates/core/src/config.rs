//! Flat `key = value` experiment configuration.
//!
//! Blank lines and `#` comments are ignored. Environment keys carry an
//! `env.` prefix; everything else configures the trainer. Unknown keys and
//! malformed values are errors that name the key.

use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::env::{EnvConfig, Template};
use crate::grpo::{KlStrategy, RatioLevel};
use crate::structured::FormatMode;
use crate::trainer::{AuxReward, JudgeSpec, TrainerConfig};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ConfigError {
    #[error("line {line}: expected `key = value`")]
    Syntax { line: usize },
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("invalid value for `{key}`: {message}")]
    Invalid { key: String, message: String },
    #[error("cannot read config {path}: {message}")]
    Io { path: PathBuf, message: String },
}

impl ConfigError {
    pub fn invalid(key: &str, message: impl Into<String>) -> Self {
        ConfigError::Invalid {
            key: key.to_owned(),
            message: message.into(),
        }
    }

    /// The offending key, when there is one.
    pub fn key(&self) -> Option<&str> {
        match self {
            ConfigError::UnknownKey(k) | ConfigError::Invalid { key: k, .. } => Some(k),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ExperimentConfig {
    pub env: EnvConfig,
    pub trainer: TrainerConfig,
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, ConfigError> {
    value
        .parse()
        .map_err(|_| ConfigError::invalid(key, format!("cannot parse `{value}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool, ConfigError> {
    match value {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(ConfigError::invalid(key, format!("expected true or false, got `{value}`"))),
    }
}

fn parse_templates(key: &str, value: &str) -> Result<Vec<Template>, ConfigError> {
    value
        .split(',')
        .map(|t| Template::parse_name(t).ok_or_else(|| ConfigError::invalid(key, format!("unknown template `{}`", t.trim()))))
        .collect()
}

fn templates_text(ts: &[Template]) -> String {
    ts.iter().map(|t| t.as_str()).collect::<Vec<_>>().join(",")
}

fn ratio_level_name(r: RatioLevel) -> &'static str {
    match r {
        RatioLevel::PerToken => "per_token",
        RatioLevel::PerSequence => "per_sequence",
    }
}

impl ExperimentConfig {
    /// The full configuration (caption format, caption reward).
    pub fn full() -> Self {
        Self::default()
    }

    /// Plain GRPO baseline on the same environment.
    pub fn baseline() -> Self {
        ExperimentConfig {
            env: EnvConfig::default(),
            trainer: TrainerConfig::baseline(),
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.env.validate().map_err(|e| ConfigError::invalid("env", e.to_string()))?;
        self.trainer.validate()
    }

    /// Applies one `key = value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let (e, t) = (&mut self.env, &mut self.trainer);
        let value = value.trim();
        match key {
            "env.num_attributes" => e.num_attributes = parse(key, value)?,
            "env.values_per_attribute" => e.values_per_attribute = parse(key, value)?,
            "env.train_size" => e.train_size = parse(key, value)?,
            "env.test_size" => e.test_size = parse(key, value)?,
            "env.easy_fraction_train" => e.easy_fraction_train = parse(key, value)?,
            "env.easy_fraction_test" => e.easy_fraction_test = parse(key, value)?,
            "env.shortcut_correlation" => e.shortcut_correlation = parse(key, value)?,
            "env.rng_seed" => e.rng_seed = parse(key, value)?,
            "env.train_hard_templates" => e.train_hard_templates = parse_templates(key, value)?,
            "env.test_hard_templates" => e.test_hard_templates = parse_templates(key, value)?,
            "format_mode" => {
                t.format_mode = FormatMode::parse_name(value).ok_or_else(|| ConfigError::invalid(key, format!("unknown mode `{value}`")))?
            }
            "aux_reward" => {
                t.aux_reward = AuxReward::parse_name(value).ok_or_else(|| ConfigError::invalid(key, format!("unknown reward `{value}`")))?
            }
            "alpha" => t.alpha = parse(key, value)?,
            "length_target" => t.length_target = parse(key, value)?,
            "strict_format" => t.strict_format = parse_bool(key, value)?,
            "group_size" => t.group_size = parse(key, value)?,
            "batch_size" => t.batch_size = parse(key, value)?,
            "temperature" => t.temperature = parse(key, value)?,
            "max_tokens" => t.max_tokens = parse(key, value)?,
            "beta" => t.beta = parse(key, value)?,
            "kl_strategy" => {
                t.kl_strategy = KlStrategy::parse_name(value).ok_or_else(|| ConfigError::invalid(key, format!("unknown strategy `{value}`")))?
            }
            "t_max" => t.t_max = parse(key, value)?,
            "clip_epsilon" => t.clip_epsilon = parse(key, value)?,
            "ratio_level" => {
                t.ratio_level = match value {
                    "per_token" => RatioLevel::PerToken,
                    "per_sequence" => RatioLevel::PerSequence,
                    _ => return Err(ConfigError::invalid(key, format!("unknown ratio level `{value}`"))),
                }
            }
            "learning_rate" => t.learning_rate = parse(key, value)?,
            "grad_clip_norm" => t.grad_clip_norm = parse(key, value)?,
            "old_policy_refresh_every" => t.old_policy_refresh_every = parse(key, value)?,
            "eval_every" => t.eval_every = parse(key, value)?,
            "checkpoint_every" => t.checkpoint_every = parse(key, value)?,
            "hidden_units" => t.hidden_units = parse(key, value)?,
            "std_floor" => t.std_floor = parse(key, value)?,
            "reveal_image" => t.reveal_image = parse_bool(key, value)?,
            "seed" => t.seed = parse(key, value)?,
            "judge" => {
                t.judge = match value {
                    "oracle" => JudgeSpec::Oracle,
                    "external" => match &t.judge {
                        JudgeSpec::External { .. } => t.judge.clone(),
                        JudgeSpec::Oracle => JudgeSpec::External {
                            endpoint: String::new(),
                            model: "judge".to_owned(),
                            timeout_ms: 10_000,
                            max_in_flight: 4,
                            template: None,
                        },
                    },
                    _ => return Err(ConfigError::invalid(key, format!("expected oracle or external, got `{value}`"))),
                }
            }
            "judge_endpoint" | "judge_model" | "judge_timeout_ms" | "judge_max_in_flight" | "judge_template" => {
                let JudgeSpec::External {
                    endpoint,
                    model,
                    timeout_ms,
                    max_in_flight,
                    template,
                } = &mut t.judge
                else {
                    return Err(ConfigError::invalid(key, "set `judge = external` first"));
                };
                match key {
                    "judge_endpoint" => *endpoint = value.to_owned(),
                    "judge_model" => *model = value.to_owned(),
                    "judge_timeout_ms" => *timeout_ms = parse(key, value)?,
                    "judge_max_in_flight" => *max_in_flight = parse(key, value)?,
                    _ => *template = (!value.is_empty()).then(|| PathBuf::from(value)),
                }
            }
            _ => return Err(ConfigError::UnknownKey(key.to_owned())),
        }
        Ok(())
    }

    /// Applies every setting in `text` on top of `self`.
    pub fn apply_kv_text(&mut self, text: &str) -> Result<(), ConfigError> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or(ConfigError::Syntax { line: i + 1 })?;
            self.set(key.trim(), value)?;
        }
        Ok(())
    }

    /// Defaults overridden by `text`, then validated.
    pub fn from_kv_text(text: &str) -> Result<Self, ConfigError> {
        let mut c = Self::default();
        c.apply_kv_text(text)?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Io {
            path: path.to_owned(),
            message: e.to_string(),
        })?;
        Self::from_kv_text(&text)
    }

    /// Every setting, one per line; `from_kv_text` reads it back exactly.
    pub fn to_kv_text(&self) -> String {
        let (e, t) = (&self.env, &self.trainer);
        let mut lines = vec![
            format!("env.num_attributes = {}", e.num_attributes),
            format!("env.values_per_attribute = {}", e.values_per_attribute),
            format!("env.train_size = {}", e.train_size),
            format!("env.test_size = {}", e.test_size),
            format!("env.easy_fraction_train = {:?}", e.easy_fraction_train),
            format!("env.easy_fraction_test = {:?}", e.easy_fraction_test),
            format!("env.shortcut_correlation = {:?}", e.shortcut_correlation),
            format!("env.rng_seed = {}", e.rng_seed),
            format!("env.train_hard_templates = {}", templates_text(&e.train_hard_templates)),
            format!("env.test_hard_templates = {}", templates_text(&e.test_hard_templates)),
            format!("format_mode = {}", t.format_mode),
            format!("aux_reward = {}", t.aux_reward.as_str()),
            format!("alpha = {:?}", t.alpha),
            format!("length_target = {}", t.length_target),
            format!("strict_format = {}", t.strict_format),
            format!("group_size = {}", t.group_size),
            format!("batch_size = {}", t.batch_size),
            format!("temperature = {:?}", t.temperature),
            format!("max_tokens = {}", t.max_tokens),
            format!("beta = {:?}", t.beta),
            format!("kl_strategy = {}", t.kl_strategy),
            format!("t_max = {}", t.t_max),
            format!("clip_epsilon = {:?}", t.clip_epsilon),
            format!("ratio_level = {}", ratio_level_name(t.ratio_level)),
            format!("learning_rate = {:?}", t.learning_rate),
            format!("grad_clip_norm = {:?}", t.grad_clip_norm),
            format!("old_policy_refresh_every = {}", t.old_policy_refresh_every),
            format!("eval_every = {}", t.eval_every),
            format!("checkpoint_every = {}", t.checkpoint_every),
            format!("hidden_units = {}", t.hidden_units),
            format!("std_floor = {:?}", t.std_floor),
            format!("reveal_image = {}", t.reveal_image),
            format!("seed = {}", t.seed),
        ];
        match &t.judge {
            JudgeSpec::Oracle => lines.push("judge = oracle".to_owned()),
            JudgeSpec::External {
                endpoint,
                model,
                timeout_ms,
                max_in_flight,
                template,
            } => {
                lines.push("judge = external".to_owned());
                lines.push(format!("judge_endpoint = {endpoint}"));
                lines.push(format!("judge_model = {model}"));
                lines.push(format!("judge_timeout_ms = {timeout_ms}"));
                lines.push(format!("judge_max_in_flight = {max_in_flight}"));
                if let Some(p) = template {
                    lines.push(format!("judge_template = {}", p.display()));
                }
            }
        }
        let mut text = lines.join("\n");
        text.push('\n');
        text
    }
}
