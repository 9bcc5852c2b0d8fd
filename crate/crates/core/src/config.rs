//! Flat `key = value` experiment configuration.
//!
//! One assignment per line, `#` starts a comment, blank lines are ignored.
//! Unknown and repeated keys are errors. Lists are comma separated.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::PathBuf;
use std::str::FromStr;

use thiserror::Error;

use crate::distributions::SampleMethod;
use crate::estlab::{EstlabError, MIN_SAMPLES, MODE_CAP};
use crate::trainer::{Method, TrainConfig};

pub const DEFAULT_SEEDS: [u64; 5] = [0, 1, 2, 3, 4];
pub const DEFAULT_OUTPUT_DIR: &str = "runs";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ConfigError {
    #[error("line {line}: {msg}")]
    Syntax { line: usize, msg: String },
    #[error("line {line}: unknown key {key:?}")]
    UnknownKey { line: usize, key: String },
    #[error("line {line}: key {key:?} already set on line {first}")]
    DuplicateKey { line: usize, first: usize, key: String },
    #[error("missing required key {0:?}")]
    Missing(&'static str),
    #[error("{key}: {msg}")]
    Value { key: String, msg: String },
}

pub type Result<T> = std::result::Result<T, ConfigError>;

/// A parsed assignment with its 1-based line number.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Entry {
    pub line: usize,
    pub key: String,
    pub value: String,
}

/// Splits text into assignments, rejecting malformed lines and repeated keys.
pub fn parse_entries(text: &str) -> Result<Vec<Entry>> {
    let mut out: Vec<Entry> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let syntax = |msg: &str| ConfigError::Syntax {
            line,
            msg: msg.to_string(),
        };
        let (key, value) = content
            .split_once('=')
            .ok_or_else(|| syntax("expected `key = value`"))?;
        let (key, value) = (key.trim(), value.trim());
        if key.is_empty()
            || !key
                .bytes()
                .all(|b| b.is_ascii_lowercase() || b.is_ascii_digit() || b == b'_')
        {
            return Err(syntax("keys use lowercase letters, digits and underscores"));
        }
        if value.is_empty() {
            return Err(syntax("empty value"));
        }
        if let Some(prev) = out.iter().find(|e| e.key == key) {
            return Err(ConfigError::DuplicateKey {
                line,
                first: prev.line,
                key: key.to_string(),
            });
        }
        out.push(Entry {
            line,
            key: key.to_string(),
            value: value.to_string(),
        });
    }
    Ok(out)
}

fn value_err(key: &str, msg: impl ToString) -> ConfigError {
    ConfigError::Value {
        key: key.to_string(),
        msg: msg.to_string(),
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value
        .parse()
        .map_err(|e: T::Err| value_err(key, format!("{value:?}: {e}")))
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>>
where
    T::Err: std::fmt::Display,
{
    value.split(',').map(|item| parse(key, item.trim())).collect()
}

fn parse_seeds(key: &str, value: &str) -> Result<Vec<u64>> {
    let seeds: Vec<u64> = parse_list(key, value)?;
    let distinct: BTreeSet<_> = seeds.iter().collect();
    if distinct.len() != seeds.len() {
        return Err(value_err(key, "repeated seed"));
    }
    Ok(seeds)
}

/// Applies one trainer key. Returns `Ok(false)` for keys it does not own.
fn apply_train_key(cfg: &mut TrainConfig, key: &str, value: &str) -> Result<bool> {
    match key {
        "env" => cfg.env = value.parse().map_err(|e| value_err(key, e))?,
        "method" => cfg.method = value.parse().map_err(|e| value_err(key, e))?,
        "n_factors" => cfg.n_factors = parse(key, value)?,
        "n_classes" => cfg.n_classes = parse(key, value)?,
        "hidden" => cfg.hidden = parse(key, value)?,
        "temperature" => cfg.temperature = parse(key, value)?,
        "gamma" => cfg.gamma = parse(key, value)?,
        "lambda" => cfg.lambda = parse(key, value)?,
        "horizon" => cfg.horizon = parse(key, value)?,
        "batch" => cfg.batch = parse(key, value)?,
        "actor_lr" => cfg.actor_lr = parse(key, value)?,
        "critic_lr" => cfg.critic_lr = parse(key, value)?,
        "updates" => cfg.updates = parse(key, value)?,
        "eval_every" => cfg.eval_every = parse(key, value)?,
        "eval_episodes" => cfg.eval_episodes = parse(key, value)?,
        "grad_clip" => cfg.grad_clip = parse(key, value)?,
        "record_wall_time" => cfg.record_wall_time = parse(key, value)?,
        _ => return Ok(false),
    }
    Ok(true)
}

fn validate_train(cfg: &TrainConfig) -> Result<()> {
    cfg.validate().map_err(|e| value_err("config", e))
}

/// Canonical text form of a single-seed trainer configuration, used as the
/// checkpoint config echo. [`parse_train_config`] reads it back exactly.
pub fn train_config_text(cfg: &TrainConfig) -> String {
    let mut s = String::new();
    let mut put = |k: &str, v: String| {
        let _ = writeln!(s, "{k} = {v}");
    };
    put("env", cfg.env.name().to_string());
    put("method", cfg.method.name().to_string());
    put("n_factors", cfg.n_factors.to_string());
    put("n_classes", cfg.n_classes.to_string());
    put("hidden", cfg.hidden.to_string());
    put("temperature", cfg.temperature.to_string());
    put("gamma", cfg.gamma.to_string());
    put("lambda", cfg.lambda.to_string());
    put("horizon", cfg.horizon.to_string());
    put("batch", cfg.batch.to_string());
    put("actor_lr", cfg.actor_lr.to_string());
    put("critic_lr", cfg.critic_lr.to_string());
    put("updates", cfg.updates.to_string());
    put("eval_every", cfg.eval_every.to_string());
    put("eval_episodes", cfg.eval_episodes.to_string());
    put("grad_clip", cfg.grad_clip.to_string());
    put("seed", cfg.seed.to_string());
    put("record_wall_time", cfg.record_wall_time.to_string());
    s
}

/// Reads a single-seed trainer configuration; unset keys keep defaults.
pub fn parse_train_config(text: &str) -> Result<TrainConfig> {
    let mut cfg = TrainConfig::default();
    for e in parse_entries(text)? {
        if e.key == "seed" {
            cfg.seed = parse(&e.key, &e.value)?;
        } else if !apply_train_key(&mut cfg, &e.key, &e.value)? {
            return Err(ConfigError::UnknownKey {
                line: e.line,
                key: e.key,
            });
        }
    }
    validate_train(&cfg)?;
    Ok(cfg)
}

/// A training run over several seeds.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    /// Everything but the seed, which comes from `seeds`.
    pub train: TrainConfig,
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            seeds: DEFAULT_SEEDS.to_vec(),
            output_dir: PathBuf::from(DEFAULT_OUTPUT_DIR),
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for e in parse_entries(text)? {
            if !cfg.apply(&e)? {
                return Err(ConfigError::UnknownKey {
                    line: e.line,
                    key: e.key,
                });
            }
        }
        validate_train(&cfg.train)?;
        Ok(cfg)
    }

    fn apply(&mut self, e: &Entry) -> Result<bool> {
        match e.key.as_str() {
            "seeds" => self.seeds = parse_seeds(&e.key, &e.value)?,
            "output_dir" => self.output_dir = PathBuf::from(&e.value),
            _ => return apply_train_key(&mut self.train, &e.key, &e.value),
        }
        Ok(true)
    }

    pub fn for_seed(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            seed,
            ..self.train.clone()
        }
    }
}

/// A grid over mode layouts; every cell shares the run settings.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepConfig {
    pub run: RunConfig,
    /// `(n_factors, n_classes)` per cell.
    pub cells: Vec<(usize, usize)>,
}

/// `"NxM"`.
pub fn cell_label((n, m): (usize, usize)) -> String {
    format!("{n}x{m}")
}

pub fn parse_cell(s: &str) -> Option<(usize, usize)> {
    let (n, m) = s.trim().split_once('x')?;
    let (n, m) = (n.parse().ok()?, m.parse().ok()?);
    (n > 0 && m > 0).then_some((n, m))
}

impl SweepConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut run = RunConfig::default();
        let mut cells = None;
        for e in parse_entries(text)? {
            match e.key.as_str() {
                "cells" => {
                    let parsed: Option<Vec<_>> = e.value.split(',').map(parse_cell).collect();
                    let parsed = parsed.ok_or_else(|| value_err("cells", "cells look like 4x4, 1x64"))?;
                    let distinct: BTreeSet<_> = parsed.iter().collect();
                    if distinct.len() != parsed.len() {
                        return Err(value_err("cells", "repeated cell"));
                    }
                    cells = Some(parsed);
                }
                "n_factors" | "n_classes" => {
                    return Err(ConfigError::UnknownKey {
                        line: e.line,
                        key: e.key,
                    });
                }
                _ => {
                    if !run.apply(&e)? {
                        return Err(ConfigError::UnknownKey {
                            line: e.line,
                            key: e.key,
                        });
                    }
                }
            }
        }
        let cells = cells.ok_or(ConfigError::Missing("cells"))?;
        if run.train.method == Method::Unimodal {
            return Err(value_err("method", "a mode sweep needs a multimodal method"));
        }
        for &(n, m) in &cells {
            validate_train(&run.for_cell((n, m)).train)?;
        }
        Ok(Self { run, cells })
    }
}

impl RunConfig {
    pub fn for_cell(&self, (n, m): (usize, usize)) -> RunConfig {
        let mut out = self.clone();
        out.train.n_factors = n;
        out.train.n_classes = m;
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ObjectiveKind {
    Linear,
    Quadratic,
}

impl ObjectiveKind {
    pub fn name(self) -> &'static str {
        match self {
            ObjectiveKind::Linear => "linear",
            ObjectiveKind::Quadratic => "quadratic",
        }
    }
}

/// Grid of estimator cells: methods x temperatures x seeds.
#[derive(Debug, Clone, PartialEq)]
pub struct EstlabConfig {
    pub methods: Vec<SampleMethod>,
    pub temperatures: Vec<f64>,
    pub seeds: Vec<u64>,
    pub n_factors: usize,
    pub n_classes: usize,
    pub n_samples: usize,
    pub objective: ObjectiveKind,
    pub output_dir: PathBuf,
}

impl Default for EstlabConfig {
    fn default() -> Self {
        Self {
            methods: vec![SampleMethod::Ste, SampleMethod::GumbelSoft, SampleMethod::GumbelHard],
            temperatures: vec![0.5],
            seeds: DEFAULT_SEEDS.to_vec(),
            n_factors: 2,
            n_classes: 3,
            n_samples: 100_000,
            objective: ObjectiveKind::Linear,
            output_dir: PathBuf::from(DEFAULT_OUTPUT_DIR),
        }
    }
}

impl EstlabConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = EstlabConfig::default();
        for e in parse_entries(text)? {
            let (k, v) = (e.key.as_str(), e.value.as_str());
            match k {
                "methods" => {
                    cfg.methods = v
                        .split(',')
                        .map(|m| {
                            SampleMethod::parse(m.trim())
                                .ok_or_else(|| value_err(k, format!("unknown method {:?}", m.trim())))
                        })
                        .collect::<Result<_>>()?;
                }
                "temperatures" => cfg.temperatures = parse_list(k, v)?,
                "seeds" => cfg.seeds = parse_seeds(k, v)?,
                "n_factors" => cfg.n_factors = parse(k, v)?,
                "n_classes" => cfg.n_classes = parse(k, v)?,
                "n_samples" => cfg.n_samples = parse(k, v)?,
                "objective" => {
                    cfg.objective = match v {
                        "linear" => ObjectiveKind::Linear,
                        "quadratic" => ObjectiveKind::Quadratic,
                        _ => return Err(value_err(k, format!("unknown objective {v:?}"))),
                    }
                }
                "output_dir" => cfg.output_dir = PathBuf::from(v),
                _ => {
                    return Err(ConfigError::UnknownKey {
                        line: e.line,
                        key: e.key,
                    })
                }
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn validate(&self) -> Result<()> {
        if let Some(t) = self.temperatures.iter().find(|t| !(t.is_finite() && **t > 0.0)) {
            return Err(value_err("temperatures", format!("{t} is not a positive temperature")));
        }
        if self.n_samples < MIN_SAMPLES {
            return Err(value_err("n_samples", EstlabError::TooFewSamples(self.n_samples)));
        }
        crate::estlab::enumerate_modes(self.n_factors, self.n_classes).map_err(|_| {
            value_err(
                "n_factors",
                format!("{}^{} modes exceed {MODE_CAP}", self.n_classes, self.n_factors),
            )
        })?;
        Ok(())
    }

    /// Cells in output order: seed-major, then method, then temperature.
    pub fn cells(&self) -> Vec<(u64, SampleMethod, f64)> {
        let mut out = Vec::new();
        for &seed in &self.seeds {
            for &method in &self.methods {
                for &t in &self.temperatures {
                    out.push((seed, method, t));
                }
            }
        }
        out
    }
}

#[cfg(test)]
mod tests;
