//! Exit codes and the one-line JSON error report.

use std::fmt;
use std::path::Path;

use eventsb::Error;

pub const EXIT_USAGE: u8 = 2;
pub const EXIT_DATA: u8 = 3;
pub const EXIT_NUMERIC: u8 = 4;
pub const EXIT_REFUSED: u8 = 5;

#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub kind: &'static str,
    pub message: String,
}

impl Failure {
    pub fn usage(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_USAGE,
            kind: "usage",
            message: message.into(),
        }
    }

    pub fn data(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_DATA,
            kind: "data",
            message: message.into(),
        }
    }

    pub fn io(path: &Path, e: std::io::Error) -> Self {
        Self::data(format!("{}: {e}", path.display()))
    }

    /// `{"error":{...}}` on one line.
    pub fn json_line(&self) -> String {
        serde_json::json!({
            "error": {
                "code": self.code,
                "kind": self.kind,
                "message": self.message,
            }
        })
        .to_string()
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} error: {}", self.kind, self.message)
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let (code, kind) = match &e {
            Error::Config(_) | Error::Shape(_) | Error::Schedule(_) | Error::Index(_) => (EXIT_USAGE, "usage"),
            Error::NumericalAbort { .. } | Error::NonConvergence { .. } => (EXIT_NUMERIC, "numerical"),
            Error::ConfigMismatch { .. }
            | Error::FingerprintMissing
            | Error::Uncertified { .. }
            | Error::FingerprintMismatch { .. } => (EXIT_REFUSED, "refused"),
            _ => (EXIT_DATA, "data"),
        };
        Self {
            code,
            kind,
            message: e.to_string(),
        }
    }
}

pub type CliResult<T> = std::result::Result<T, Failure>;
