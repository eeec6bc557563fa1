use std::path::{Path, PathBuf};

use nleig::c64;
use nleig::continuation::ContinuationConfig;
use nleig::ls_solver::LSConfig;
use nleig::models::ModelSpec;
use serde::Deserialize;

use crate::report::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Command {
    Spectrum,
    Solve,
    Continue,
    Oracle,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Spectrum => "spectrum",
            Command::Solve => "solve",
            Command::Continue => "continue",
            Command::Oracle => "oracle",
        }
    }
}

/// A spectral target: a real number or `[re, im]`.
#[derive(Debug, Clone, Copy, PartialEq, Deserialize)]
#[serde(untagged)]
pub enum Target {
    Real(f64),
    Complex([f64; 2]),
}

impl Target {
    pub fn value(self) -> c64 {
        match self {
            Target::Real(re) => c64::new(re, 0.0),
            Target::Complex([re, im]) => c64::new(re, im),
        }
    }
}

fn eps_name() -> String {
    "eps".to_string()
}

/// Continuation settings plus what to continue in and how far.
#[derive(Debug, Clone, Deserialize)]
pub struct ContinuationBlock {
    #[serde(flatten)]
    pub config: ContinuationConfig,
    /// `eps` or a model parameter such as `gamma`.
    #[serde(default = "eps_name")]
    pub parameter: String,
    pub end: f64,
    /// Fixed ε for continuation in a model parameter. A nonzero value is
    /// first reached by continuing each seed in ε.
    #[serde(default)]
    pub eps: f64,
    /// Start child branches at detected bifurcation markers.
    #[serde(default)]
    pub switch: bool,
}

/// One run of the tool. The model block sits at the top level, so a bare
/// model file is a valid spectrum config.
#[derive(Debug, Clone, Deserialize)]
pub struct RunConfig {
    #[serde(default)]
    pub command: Option<Command>,
    #[serde(flatten)]
    pub model: ModelSpec,
    #[serde(default)]
    pub targets: Vec<Target>,
    #[serde(default)]
    pub solver: Option<LSConfig>,
    #[serde(default)]
    pub continuation: Option<ContinuationBlock>,
    #[serde(default)]
    pub output: Option<PathBuf>,
    #[serde(default)]
    pub seed: Option<u64>,
    /// Also write the unit-norm rescaled triple after a solve.
    #[serde(default)]
    pub unit_norm: bool,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        RunConfig::parse(&text)
    }

    pub fn parse(text: &str) -> Result<RunConfig, CliError> {
        serde_json::from_str(text).map_err(|e| CliError::Config(format!("cannot parse config: {e}")))
    }

    /// Checks that the blocks `command` needs are present.
    pub fn check(&self, command: Command) -> Result<(), CliError> {
        if let Some(declared) = self.command {
            if declared != command {
                return Err(CliError::Config(format!(
                    "config is for `{}` but `{}` was invoked",
                    declared.name(),
                    command.name()
                )));
            }
        }
        match command {
            Command::Oracle => {
                return Err(CliError::Config("the oracle command is not provided by this tool".into()))
            }
            Command::Solve => {
                if self.solver.is_none() {
                    return Err(CliError::Config("solve needs a `solver` block".into()));
                }
                if self.targets.len() != 1 {
                    return Err(CliError::Config(format!(
                        "solve needs exactly one target, got {}",
                        self.targets.len()
                    )));
                }
            }
            Command::Continue => {
                let Some(block) = &self.continuation else {
                    return Err(CliError::Config("continue needs a `continuation` block".into()));
                };
                if !block.end.is_finite() || !block.eps.is_finite() {
                    return Err(CliError::Config("continuation end and eps must be finite".into()));
                }
                if block.parameter == "eps" && block.eps != 0.0 {
                    return Err(CliError::Config(
                        "a fixed `eps` only applies to continuation in a model parameter".into(),
                    ));
                }
            }
            Command::Spectrum => {}
        }
        if command != Command::Solve && self.targets.is_empty() {
            return Err(CliError::Config(format!("{} needs at least one target", command.name())));
        }
        Ok(())
    }

    /// Solver settings with the seed override applied.
    pub fn solver_config(&self, seed: Option<u64>) -> Option<LSConfig> {
        self.solver.map(|mut cfg| {
            if let Some(s) = seed.or(self.seed) {
                cfg.seed = s;
            }
            cfg
        })
    }
}
