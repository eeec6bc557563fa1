use std::io::Write;
use std::path::{Path, PathBuf};

use nleig::Error;
use serde::Serialize;
use serde_json::{json, Value};

/// Exit statuses of the tool.
pub const EXIT_OK: u8 = 0;
pub const EXIT_CONFIG: u8 = 2;
pub const EXIT_NUMERICAL: u8 = 3;
pub const EXIT_PARTIAL: u8 = 4;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("cannot access {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Solver(#[from] Error),
    /// A solver error with extra facts for the report.
    #[error("{error}")]
    Annotated { error: Error, extra: Value },
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) | CliError::Io { .. } => EXIT_CONFIG,
            CliError::Solver(e) | CliError::Annotated { error: e, .. } => {
                if e.is_numerical() {
                    EXIT_NUMERICAL
                } else {
                    EXIT_CONFIG
                }
            }
        }
    }

    pub fn report(&self) -> ErrorReport {
        match self {
            CliError::Config(msg) => ErrorReport {
                code: "ConfigError".into(),
                module: "cli".into(),
                message: msg.clone(),
                context: json!({}),
            },
            CliError::Io { path, source } => ErrorReport {
                code: "IoError".into(),
                module: "cli".into(),
                message: self.to_string(),
                context: json!({ "path": path.display().to_string(), "kind": format!("{:?}", source.kind()) }),
            },
            CliError::Solver(e) => ErrorReport::from_error(e, json!({})),
            CliError::Annotated { error, extra } => ErrorReport::from_error(error, extra.clone()),
        }
    }
}

/// Machine-readable error written to stderr and `error.json`.
#[derive(Debug, Clone, Serialize)]
pub struct ErrorReport {
    pub code: String,
    pub module: String,
    pub message: String,
    pub context: Value,
}

impl ErrorReport {
    /// Report for a solver error; `extra` object fields are merged into the
    /// context.
    pub fn from_error(e: &Error, extra: Value) -> ErrorReport {
        let mut context = error_context(e);
        if let (Value::Object(ctx), Value::Object(more)) = (&mut context, extra) {
            ctx.extend(more);
        }
        ErrorReport {
            code: e.code().into(),
            module: e.module().into(),
            message: e.to_string(),
            context,
        }
    }
}

fn error_context(e: &Error) -> Value {
    match e {
        Error::DimensionMismatch { expected, found } => json!({ "expected": expected, "found": found }),
        Error::SingularSystem { pivot } => json!({ "pivot": pivot }),
        Error::NonSimple { mu0, neighbor } => {
            json!({ "mu0": [mu0.re, mu0.im], "neighbor": [neighbor.re, neighbor.im] })
        }
        Error::NoConvergence { iterations, residual } | Error::NewtonDiverged { iterations, residual } => {
            json!({ "iterations": iterations, "residual": residual })
        }
        Error::DefectivePair { overlap } => json!({ "overlap": overlap }),
        Error::NonRealEigenvalue { mu } => json!({ "mu": [mu.re, mu.im] }),
        Error::InconsistentRhs { residual } => json!({ "residual": residual }),
        Error::NoContraction {
            loop_name,
            ratio,
            iteration,
        } => json!({ "loop": loop_name, "ratio": ratio, "iteration": iteration }),
        Error::MaxIterations { loop_name, iterations } => json!({ "loop": loop_name, "iterations": iterations }),
        Error::ResidualCheckFailed { residual, bound } => json!({ "residual": residual, "bound": bound }),
        Error::StepUnderflow { param, step } => json!({ "param": param, "step": step }),
        _ => json!({}),
    }
}

/// Writes `bytes` to `path` through a temporary file in the same directory,
/// so readers never see a half-written file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    let io = |e| CliError::Io {
        path: path.to_path_buf(),
        source: e,
    };
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    let mut f = std::fs::File::create(&tmp).map_err(io)?;
    f.write_all(bytes).map_err(io)?;
    f.sync_all().map_err(io)?;
    drop(f);
    std::fs::rename(&tmp, path).map_err(io)
}

pub fn write_json(path: &Path, value: &impl Serialize) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| CliError::Config(format!("cannot serialize {}: {e}", path.display())))?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

/// Round-trip exact float formatting shared by all CSV output.
pub fn num(v: f64) -> String {
    format!("{v:.16e}")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn no_contraction_context_carries_ratio_and_step() {
        let e = Error::NoContraction {
            loop_name: "sigma",
            ratio: 0.97,
            iteration: 4,
        };
        let r = CliError::Annotated {
            error: e,
            extra: json!({ "largest_eps_reached": 0.05 }),
        };
        assert_eq!(r.exit_code(), EXIT_NUMERICAL);
        let rep = r.report();
        assert_eq!(rep.code, "NoContraction");
        assert_eq!(rep.module, "ls_solver");
        assert_eq!(rep.context["ratio"], 0.97);
        assert_eq!(rep.context["iteration"], 4);
        assert_eq!(rep.context["largest_eps_reached"], 0.05);
    }

    #[test]
    fn input_errors_exit_with_config_status() {
        assert_eq!(CliError::Config("x".into()).exit_code(), EXIT_CONFIG);
        assert_eq!(CliError::Solver(Error::UnknownModel("m".into())).exit_code(), EXIT_CONFIG);
        assert_eq!(
            CliError::Solver(Error::SingularSystem { pivot: 0.0 }).exit_code(),
            EXIT_NUMERICAL
        );
    }

    #[test]
    fn atomic_write_leaves_no_temporary() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.csv");
        write_atomic(&path, b"x\n").unwrap();
        write_atomic(&path, b"y\n").unwrap();
        assert_eq!(std::fs::read_to_string(&path).unwrap(), "y\n");
        assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 1);
    }
}
