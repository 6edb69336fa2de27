//! Experiment configuration: a TOML file plus command-line overrides.

use serde::{Deserialize, Serialize};
use std::fmt;
use std::path::PathBuf;

/// Every tunable of a run. Fields absent from the file take the defaults
/// below; flags given on the command line replace file values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    /// Built-in model id.
    pub model: String,
    /// Custom model TOML file; takes precedence over `model`.
    pub model_file: Option<PathBuf>,
    /// Saved cocycle file, or `"designated"` for the built-in non-dominated
    /// test cocycle. When set, commands that only need a cocycle skip
    /// integration.
    pub cocycle: Option<String>,
    pub seed: u64,
    pub horizon: usize,
    pub step: f64,
    pub samples: usize,
    pub m_grid: Vec<usize>,
    pub k: Vec<usize>,
    pub past: usize,
    pub future: usize,
    pub epsilon: f64,
    pub kappa: f64,
    pub delta: f64,
    /// Exchange length; the schedule minimum when unset.
    pub m: Option<usize>,
    pub kappa_lambda: f64,
    pub kappa_sigma: f64,
    pub j_max: usize,
    pub radius: f64,
    pub flow_time: f64,
    pub workers: Option<usize>,
    pub output_dir: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            model: "cat_suspension".into(),
            model_file: None,
            cocycle: None,
            seed: 0,
            horizon: 1000,
            step: 0.01,
            samples: 8,
            m_grid: (1..=10).collect(),
            k: vec![1],
            past: 40,
            future: 40,
            epsilon: 0.1,
            kappa: 0.5,
            delta: 0.1,
            m: None,
            kappa_lambda: 0.99,
            kappa_sigma: 0.95,
            j_max: 50,
            radius: 0.01,
            flow_time: 1.0,
            workers: None,
            output_dir: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConfigError {
    pub field: Option<String>,
    pub line: Option<usize>,
    pub message: String,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("config error")?;
        if let Some(field) = &self.field {
            write!(f, ": field `{field}`")?;
        }
        if let Some(line) = self.line {
            write!(f, " (line {line})")?;
        }
        write!(f, ": {}", self.message)
    }
}

impl std::error::Error for ConfigError {}

fn line_of_offset(src: &str, offset: usize) -> usize {
    src[..offset.min(src.len())].matches('\n').count() + 1
}

/// Line on which `field` is assigned, if it is.
fn line_of_field(src: &str, field: &str) -> Option<usize> {
    src.lines().position(|l| {
        let l = l.trim_start();
        l.strip_prefix(field)
            .is_some_and(|rest| rest.trim_start().starts_with('='))
    })
    .map(|i| i + 1)
}

/// Parses a config file. Unknown keys and type errors are reported with the
/// line they occur on.
pub fn parse_config(src: &str) -> Result<ExperimentConfig, ConfigError> {
    toml::from_str(src).map_err(|e| {
        let line = e.span().map(|s| line_of_offset(src, s.start));
        let field = e
            .message()
            .split('`')
            .nth(1)
            .filter(|f| f.chars().all(|c| c.is_ascii_alphanumeric() || c == '_'))
            .map(str::to_string);
        ConfigError {
            field,
            line,
            message: e.message().trim().to_string(),
        }
    })
}

impl ExperimentConfig {
    /// Range checks; `src` is the file the config came from, used to name
    /// the offending line.
    pub fn validate(&self, src: Option<&str>) -> Result<(), ConfigError> {
        let fail = |field: &str, message: String| ConfigError {
            field: Some(field.to_string()),
            line: src.and_then(|s| line_of_field(s, field)),
            message,
        };
        if !(self.step > 0.0 && self.step <= 0.1) {
            return Err(fail("step", format!("{} outside (0, 0.1]", self.step)));
        }
        if !(1..=1_000_000).contains(&self.horizon) {
            return Err(fail("horizon", format!("{} outside 1..=1000000", self.horizon)));
        }
        if !(1..=1_000_000).contains(&self.samples) {
            return Err(fail("samples", format!("{} outside 1..=1000000", self.samples)));
        }
        if self.m_grid.is_empty() {
            return Err(fail("m_grid", "must not be empty".into()));
        }
        if self.m_grid.contains(&0) {
            return Err(fail("m_grid", "entries must be positive".into()));
        }
        if self.k.is_empty() || self.k.contains(&0) {
            return Err(fail("k", "must list positive indices".into()));
        }
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(fail("epsilon", format!("{} must be positive", self.epsilon)));
        }
        if !(self.kappa > 0.0 && self.kappa < 1.0) {
            return Err(fail("kappa", format!("{} outside (0, 1)", self.kappa)));
        }
        if !(self.delta > 0.0 && self.delta.is_finite()) {
            return Err(fail("delta", format!("{} must be positive", self.delta)));
        }
        if self.m == Some(0) {
            return Err(fail("m", "must be positive".into()));
        }
        if !(self.kappa_lambda > 0.0 && self.kappa_lambda <= 1.0) {
            return Err(fail("kappa_lambda", format!("{} outside (0, 1]", self.kappa_lambda)));
        }
        if !(self.kappa_sigma > 0.0 && self.kappa_sigma <= 1.0) {
            return Err(fail("kappa_sigma", format!("{} outside (0, 1]", self.kappa_sigma)));
        }
        if !(1..=10_000).contains(&self.j_max) {
            return Err(fail("j_max", format!("{} outside 1..=10000", self.j_max)));
        }
        if !(self.radius > 0.0 && self.radius < 1.0) {
            return Err(fail("radius", format!("{} outside (0, 1)", self.radius)));
        }
        if !(self.flow_time > 0.0 && self.flow_time <= 10.0) {
            return Err(fail("flow_time", format!("{} outside (0, 10]", self.flow_time)));
        }
        if self.workers == Some(0) {
            return Err(fail("workers", "must be positive".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid() {
        ExperimentConfig::default().validate(None).unwrap();
        assert_eq!(parse_config("").unwrap(), ExperimentConfig::default());
    }

    #[test]
    fn empty_grid_names_field_and_line() {
        let src = "model = \"cat_suspension\"\nseed = 3\nm_grid = []\n";
        let err = parse_config(src).unwrap().validate(Some(src)).unwrap_err();
        assert_eq!(err.field.as_deref(), Some("m_grid"));
        assert_eq!(err.line, Some(3));
        assert!(err.to_string().contains("m_grid"));
    }

    #[test]
    fn type_errors_carry_lines() {
        let src = "seed = 1\nhorizon = \"long\"\n";
        let err = parse_config(src).unwrap_err();
        assert_eq!(err.line, Some(2));
        let err = parse_config("sed = 1\n").unwrap_err();
        assert_eq!(err.field.as_deref(), Some("sed"));
        assert_eq!(err.line, Some(1));
    }
}
