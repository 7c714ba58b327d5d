//! Flat `key = value` run configuration with command-line overrides.

use std::collections::BTreeMap;
use std::fmt;
use std::path::PathBuf;

use mcvi::experiments::{Experiment, ExperimentConfig};
use toml::Value;

/// Keys accepted in a config file or as `--set key=value`.
pub const KEYS: &[&str] = &[
    "experiment",
    "seed",
    "out",
    "steps",
    "leapfrog",
    "mixture_k",
    "tied_inverse",
    "momentum_inputs",
    "alpha_init",
    "pilot",
    "refit_every",
    "eval_draws",
    "warmup",
    "grid_points",
    "record_timing",
    "iterations",
    "draws",
    "eval_every",
    "smoothing",
    "failure_window",
    "max_attempts",
    "step_size",
    "beta1",
    "beta2",
    "epsilon",
];

/// Axes a sweep can vary.
pub const SWEEP_AXES: &[&str] = &["steps", "leapfrog", "mixture_k"];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfigError(pub String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

fn err<T>(msg: impl Into<String>) -> Result<T, ConfigError> {
    Err(ConfigError(msg.into()))
}

/// `T` is accepted for `steps`.
pub fn canonical_key(key: &str) -> &str {
    if key == "T" {
        "steps"
    } else {
        key
    }
}

/// Raw settings in file order, later entries overriding earlier ones.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Settings {
    values: BTreeMap<String, Value>,
}

impl Settings {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let table: toml::Table = text.parse().map_err(|e: toml::de::Error| ConfigError(e.message().to_string()))?;
        let mut settings = Self::default();
        for (key, value) in table {
            if value.is_table() || value.is_array() {
                return err(format!("{key}: nested values are not supported"));
            }
            settings.insert(&key, value)?;
        }
        Ok(settings)
    }

    fn insert(&mut self, key: &str, value: Value) -> Result<(), ConfigError> {
        let key = canonical_key(key);
        if !KEYS.contains(&key) {
            return err(format!("unknown key {key:?}"));
        }
        self.values.insert(key.to_string(), value);
        Ok(())
    }

    /// Applies `key=value`. The value is read as TOML, or as a bare string.
    pub fn set(&mut self, assignment: &str) -> Result<(), ConfigError> {
        let Some((key, raw)) = assignment.split_once('=') else {
            return err(format!("override {assignment:?} is not key=value"));
        };
        let (key, raw) = (key.trim(), raw.trim());
        let value = format!("v = {raw}")
            .parse::<toml::Table>()
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or_else(|| Value::String(raw.to_string()));
        self.insert(key, value)
    }

    pub fn set_value(&mut self, key: &str, value: Value) -> Result<(), ConfigError> {
        self.insert(key, value)
    }

    pub fn get(&self, key: &str) -> Option<&Value> {
        self.values.get(canonical_key(key))
    }

    /// The experiment configuration and output directory.
    pub fn resolve(&self) -> Result<(ExperimentConfig, PathBuf), ConfigError> {
        let experiment: Experiment = match self.get("experiment") {
            Some(Value::String(s)) => s.parse().map_err(|e: mcvi::Error| ConfigError(e.to_string()))?,
            Some(v) => return err(format!("experiment must be a string, got {v}")),
            None => return err("missing key \"experiment\""),
        };
        let seed = match self.get("seed") {
            Some(v) => int(v, "seed")?,
            None => return err("missing key \"seed\" (set it in the config or pass --seed)"),
        };
        let mut cfg = ExperimentConfig::new(experiment, seed);
        let mut out = PathBuf::from("out");
        for (key, v) in &self.values {
            let count = || -> Result<usize, ConfigError> {
                usize::try_from(int(v, key)?).map_err(|_| ConfigError(format!("{key} is too large")))
            };
            match key.as_str() {
                "experiment" | "seed" => {}
                "out" => match v {
                    Value::String(s) => out = PathBuf::from(s),
                    _ => return err("out must be a string"),
                },
                "steps" => cfg.steps = count()?,
                "leapfrog" => cfg.leapfrog = count()?,
                "mixture_k" => cfg.mixture_k = count()?,
                "tied_inverse" => cfg.tied_inverse = boolean(v, key)?,
                "momentum_inputs" => cfg.momentum_inputs = count()?,
                "alpha_init" => cfg.alpha_init = float(v, key)?,
                "pilot" => cfg.pilot = count()?,
                "refit_every" => cfg.refit_every = count()?,
                "eval_draws" => cfg.eval_draws = count()?,
                "warmup" => cfg.warmup = count()?,
                "grid_points" => cfg.grid_points = count()?,
                "record_timing" => cfg.record_timing = boolean(v, key)?,
                "iterations" => cfg.train.iterations = count()?,
                "draws" => cfg.train.draws = count()?,
                "eval_every" => cfg.train.eval_every = count()?,
                "smoothing" => cfg.train.smoothing = count()?,
                "failure_window" => cfg.train.failure_window = count()?,
                "max_attempts" => cfg.train.max_attempts = count()?,
                "step_size" => cfg.train.adam.step_size = float(v, key)?,
                "beta1" => cfg.train.adam.beta1 = float(v, key)?,
                "beta2" => cfg.train.adam.beta2 = float(v, key)?,
                "epsilon" => cfg.train.adam.epsilon = float(v, key)?,
                _ => unreachable!("keys are checked on insert"),
            }
        }
        cfg.validate().map_err(|e| ConfigError(e.to_string()))?;
        Ok((cfg, out))
    }
}

fn int(v: &Value, key: &str) -> Result<u64, ConfigError> {
    match v {
        Value::Integer(i) if *i >= 0 => Ok(*i as u64),
        _ => err(format!("{key} must be a nonnegative integer, got {v}")),
    }
}

fn float(v: &Value, key: &str) -> Result<f64, ConfigError> {
    match v {
        Value::Float(x) => Ok(*x),
        Value::Integer(i) => Ok(*i as f64),
        _ => err(format!("{key} must be a number, got {v}")),
    }
}

fn boolean(v: &Value, key: &str) -> Result<bool, ConfigError> {
    v.as_bool().ok_or_else(|| ConfigError(format!("{key} must be true or false, got {v}")))
}

/// Every field of `cfg` as `key = value` lines, readable by [`Settings::parse`].
pub fn to_text(cfg: &ExperimentConfig) -> String {
    let t = &cfg.train;
    let mut s = String::new();
    let mut line = |k: &str, v: String| {
        s.push_str(k);
        s.push_str(" = ");
        s.push_str(&v);
        s.push('\n');
    };
    line("experiment", format!("\"{}\"", cfg.experiment));
    line("seed", t.seed.to_string());
    line("steps", cfg.steps.to_string());
    line("leapfrog", cfg.leapfrog.to_string());
    line("mixture_k", cfg.mixture_k.to_string());
    line("tied_inverse", cfg.tied_inverse.to_string());
    line("momentum_inputs", cfg.momentum_inputs.to_string());
    line("alpha_init", Value::Float(cfg.alpha_init).to_string());
    line("pilot", cfg.pilot.to_string());
    line("refit_every", cfg.refit_every.to_string());
    line("eval_draws", cfg.eval_draws.to_string());
    line("warmup", cfg.warmup.to_string());
    line("grid_points", cfg.grid_points.to_string());
    line("record_timing", cfg.record_timing.to_string());
    line("iterations", t.iterations.to_string());
    line("draws", t.draws.to_string());
    line("eval_every", t.eval_every.to_string());
    line("smoothing", t.smoothing.to_string());
    line("failure_window", t.failure_window.to_string());
    line("max_attempts", t.max_attempts.to_string());
    line("step_size", Value::Float(t.adam.step_size).to_string());
    line("beta1", Value::Float(t.adam.beta1).to_string());
    line("beta2", Value::Float(t.adam.beta2).to_string());
    line("epsilon", Value::Float(t.adam.epsilon).to_string());
    s
}
