//! Command-line entry points and the annotation HTTP service.

pub mod commands;
pub mod config;
pub mod server;

use std::fmt;

/// Failure reported as one machine-parsable line.
#[derive(Debug, Clone, PartialEq)]
pub struct CliError {
    pub kind: String,
    pub message: String,
}

impl CliError {
    pub fn new(kind: impl Into<String>, message: impl Into<String>) -> Self {
        Self {
            kind: kind.into(),
            message: message.into(),
        }
    }

    pub fn config(message: impl Into<String>) -> Self {
        Self::new("config", message)
    }

    /// `error: kind=<kind> msg="<message>"` with quotes and newlines escaped.
    pub fn line(&self) -> String {
        let msg = self.message.replace('\\', "\\\\").replace('"', "\\\"").replace('\n', "\\n");
        format!("error: kind={} msg=\"{}\"", self.kind, msg)
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.line())
    }
}

impl std::error::Error for CliError {}

impl From<adclick_core::Error> for CliError {
    fn from(e: adclick_core::Error) -> Self {
        Self::new(e.kind(), e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self::new("io", e.to_string())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn error_line_is_single_line() {
        let e = CliError::new("io", "bad \"path\"\nsecond");
        assert_eq!(e.line(), r#"error: kind=io msg="bad \"path\"\nsecond""#);
        assert!(!e.line().contains('\n'));
    }
}
