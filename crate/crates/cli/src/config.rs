//! Run configuration: a TOML document, optionally overridden by flags.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::Deserialize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    Solve,
    Optimize,
    GradCheck,
    SecondVariationCheck,
    SufficiencyCheck,
    LqcSolve,
    BilinearSolve,
}

impl Command {
    pub const ALL: [Command; 7] = [
        Command::Solve,
        Command::Optimize,
        Command::GradCheck,
        Command::SecondVariationCheck,
        Command::SufficiencyCheck,
        Command::LqcSolve,
        Command::BilinearSolve,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Command::Solve => "solve",
            Command::Optimize => "optimize",
            Command::GradCheck => "grad-check",
            Command::SecondVariationCheck => "second-variation-check",
            Command::SufficiencyCheck => "sufficiency-check",
            Command::LqcSolve => "lqc-solve",
            Command::BilinearSolve => "bilinear-solve",
        }
    }
}

impl FromStr for Command {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self, ConfigError> {
        Command::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| ConfigError::new("command", format!("unknown command '{s}'")))
    }
}

/// A configuration problem, naming the offending key.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfigError {
    pub key: String,
    pub message: String,
}

impl ConfigError {
    pub fn new(key: impl Into<String>, message: impl Into<String>) -> Self {
        Self { key: key.into(), message: message.into() }
    }
}

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "config key '{}': {}", self.key, self.message)
    }
}

impl std::error::Error for ConfigError {}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemSection {
    pub preset: Option<String>,
    #[serde(default)]
    pub params: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSection {
    /// Intervals per axis.
    pub n: Option<usize>,
    /// Right end of the interval `[0, T]`.
    pub horizon: Option<f64>,
    /// Per-axis bounds of a box domain.
    pub bounds: Option<Vec<[f64; 2]>>,
}

#[derive(Debug, Clone, Copy, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Tolerances {
    pub grad_check: f64,
    pub second_check: f64,
    pub fd_eps: f64,
    pub fd_eps_second: f64,
    pub probes: usize,
    pub stationarity: f64,
    pub max_iters: usize,
}

impl Default for Tolerances {
    fn default() -> Self {
        Self {
            grad_check: 1e-4,
            second_check: 1e-3,
            fd_eps: 1e-5,
            fd_eps_second: 1e-3,
            probes: 5,
            stationarity: 1e-8,
            max_iters: 500,
        }
    }
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub command: Option<String>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    #[serde(default)]
    pub problem: ProblemSection,
    #[serde(default)]
    pub grid: GridSection,
    #[serde(default)]
    pub tolerances: Tolerances,
}

/// Values given on the command line; each one overrides the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub preset: Option<String>,
    pub command: Option<String>,
    pub grid_n: Option<usize>,
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
}

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub command: Command,
    pub preset: String,
    pub params: BTreeMap<String, f64>,
    pub n: usize,
    pub horizon: f64,
    pub bounds: Option<Vec<(f64, f64)>>,
    pub tolerances: Tolerances,
    pub out: PathBuf,
    pub seed: u64,
}

pub const DEFAULT_N: usize = 32;

pub fn parse_file(text: &str) -> Result<FileConfig, ConfigError> {
    toml::from_str(text).map_err(|e| {
        let msg = e.message().to_string();
        // serde names the key in messages like "unknown field `foo`"
        let key = msg.split('`').nth(1).unwrap_or("<document>").to_string();
        ConfigError::new(key, msg)
    })
}

pub fn load_file(path: &Path) -> Result<FileConfig, ConfigError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| ConfigError::new("--config", format!("cannot read {}: {e}", path.display())))?;
    parse_file(&text)
}

impl RunConfig {
    pub fn resolve(file: FileConfig, over: Overrides) -> Result<Self, ConfigError> {
        let command = over
            .command
            .or(file.command)
            .ok_or_else(|| ConfigError::new("command", "no command given"))?
            .parse()?;
        let preset = over
            .preset
            .or(file.problem.preset)
            .ok_or_else(|| ConfigError::new("problem.preset", "no preset given"))?;
        intcontrol::presets::info(&preset)
            .map_err(|_| ConfigError::new("problem.preset", format!("unknown preset '{preset}'")))?;
        let n = over.grid_n.or(file.grid.n).unwrap_or(DEFAULT_N);
        if n < 2 {
            return Err(ConfigError::new("grid.n", format!("need at least 2 intervals, got {n}")));
        }
        let horizon = file.grid.horizon.unwrap_or(1.0);
        if !(horizon > 0.0 && horizon.is_finite()) {
            return Err(ConfigError::new("grid.horizon", format!("must be positive, got {horizon}")));
        }
        let bounds = match file.grid.bounds {
            Some(b) => {
                if b.iter().any(|[lo, hi]| !(hi > lo)) {
                    return Err(ConfigError::new("grid.bounds", "every axis needs lower < upper"));
                }
                Some(b.into_iter().map(|[lo, hi]| (lo, hi)).collect())
            }
            None => None,
        };
        let t = file.tolerances;
        for (key, v) in [
            ("tolerances.grad_check", t.grad_check),
            ("tolerances.second_check", t.second_check),
            ("tolerances.fd_eps", t.fd_eps),
            ("tolerances.fd_eps_second", t.fd_eps_second),
            ("tolerances.stationarity", t.stationarity),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(ConfigError::new(key, format!("must be positive, got {v}")));
            }
        }
        Ok(Self {
            command,
            preset,
            params: file.problem.params,
            n,
            horizon,
            bounds,
            tolerances: t,
            out: over.out.or(file.out).unwrap_or_else(|| PathBuf::from("out")),
            seed: over.seed.or(file.seed).unwrap_or(0),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_keys_are_named() {
        let e = parse_file("command = \"solve\"\n[grid]\nsize = 3\n").unwrap_err();
        assert_eq!(e.key, "size");
        let e = parse_file("[problem]\npreset = \"fredholm-zero\"\ncolour = 1\n").unwrap_err();
        assert_eq!(e.key, "colour");
    }

    #[test]
    fn flags_override_the_file() {
        let file = parse_file("command = \"solve\"\nseed = 4\n[problem]\npreset = \"fredholm-zero\"\n[grid]\nn = 8\n")
            .unwrap();
        let over = Overrides { grid_n: Some(16), command: Some("grad-check".into()), ..Overrides::default() };
        let cfg = RunConfig::resolve(file, over).unwrap();
        assert_eq!((cfg.n, cfg.command, cfg.seed), (16, Command::GradCheck, 4));
    }

    #[test]
    fn invalid_values_are_rejected() {
        let file = parse_file("command = \"solve\"\n[problem]\npreset = \"nope\"\n").unwrap();
        assert_eq!(RunConfig::resolve(file, Overrides::default()).unwrap_err().key, "problem.preset");
        let file = parse_file("command = \"solve\"\n[problem]\npreset = \"fredholm-zero\"\n[grid]\nn = 1\n").unwrap();
        assert_eq!(RunConfig::resolve(file, Overrides::default()).unwrap_err().key, "grid.n");
        let file = parse_file("command = \"fly\"\n[problem]\npreset = \"fredholm-zero\"\n").unwrap();
        assert_eq!(RunConfig::resolve(file, Overrides::default()).unwrap_err().key, "command");
    }
}
