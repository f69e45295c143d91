//! Library half of the `sbsrl` binary: config parsing, CSV/JSON reporting,
//! SVG plotting, and the comparison orchestrator. The binary in `main.rs` is
//! a thin clap dispatcher over these modules so that the integration tests
//! can drive every code path in-process.

pub mod compare;
pub mod config;
pub mod driver;
pub mod plot;
pub mod report;

use thiserror::Error;

/// Harness-level failures. Exit codes are decided at the dispatch site: any
/// error surfacing while loading or validating a config exits 2, errors
/// during a run exit 3, and a tripped wall-clock budget exits 4.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("{path}:{line}: {msg}")]
    Config { path: String, line: usize, msg: String },
    #[error("{path}: {msg}")]
    File { path: String, msg: String },
    #[error(transparent)]
    Core(#[from] sbsrl::Error),
    #[error("wall-clock budget exceeded: {elapsed:.1}s > {budget:.1}s")]
    BudgetExceeded { elapsed: f64, budget: f64 },
}

pub type Result<T> = std::result::Result<T, CliError>;

impl CliError {
    pub fn file(path: &std::path::Path, msg: impl Into<String>) -> Self {
        CliError::File {
            path: path.display().to_string(),
            msg: msg.into(),
        }
    }
}
