//! Error type shared by every subcommand, with stable exit codes and a
//! one-line JSON rendering for scripts that drive the binary.

use std::fmt;
use std::io;

#[derive(Debug)]
pub enum CliError {
    /// Bad or inconsistent configuration: parse errors, unknown keys,
    /// invariant violations. Exit code 2.
    Config(String),
    /// Missing files or filesystem failures. Exit code 3.
    Io(String),
    /// A pipeline stage failed while running. Exit code 4.
    Stage { stage: String, message: String },
}

impl CliError {
    pub fn config(message: impl Into<String>) -> Self {
        CliError::Config(message.into())
    }

    pub fn io(message: impl Into<String>) -> Self {
        CliError::Io(message.into())
    }

    pub fn stage(stage: impl Into<String>, message: impl Into<String>) -> Self {
        CliError::Stage { stage: stage.into(), message: message.into() }
    }

    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Io(_) => 3,
            CliError::Stage { .. } => 4,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Config(_) => "config",
            CliError::Io(_) => "io",
            CliError::Stage { .. } => "stage",
        }
    }

    /// Single-line JSON for stderr.
    pub fn to_json_line(&self) -> String {
        let body = match self {
            CliError::Config(m) | CliError::Io(m) => {
                serde_json::json!({ "error": self.kind(), "message": m })
            }
            CliError::Stage { stage, message } => {
                serde_json::json!({ "error": "stage", "stage": stage, "message": message })
            }
        };
        body.to_string()
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "config error: {m}"),
            CliError::Io(m) => write!(f, "io error: {m}"),
            CliError::Stage { stage, message } => write!(f, "stage {stage} failed: {message}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<io::Error> for CliError {
    fn from(e: io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

impl From<selfmem_core::pipeline::PipelineError> for CliError {
    fn from(e: selfmem_core::pipeline::PipelineError) -> Self {
        CliError::Stage { stage: e.stage.to_string(), message: e.message }
    }
}

impl From<selfmem_core::corpus::CorpusError> for CliError {
    fn from(e: selfmem_core::corpus::CorpusError) -> Self {
        CliError::Stage { stage: "corpus".to_string(), message: e.to_string() }
    }
}

impl From<selfmem_core::retrieval::RetrievalError> for CliError {
    fn from(e: selfmem_core::retrieval::RetrievalError) -> Self {
        CliError::Stage { stage: "retrieve".to_string(), message: e.to_string() }
    }
}

impl From<selfmem_core::generator::GeneratorError> for CliError {
    fn from(e: selfmem_core::generator::GeneratorError) -> Self {
        CliError::Stage { stage: "train-generator".to_string(), message: e.to_string() }
    }
}

impl From<selfmem_core::selector::SelectorError> for CliError {
    fn from(e: selfmem_core::selector::SelectorError) -> Self {
        CliError::Stage { stage: "train-selector".to_string(), message: e.to_string() }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes_are_distinct_per_kind() {
        let config = CliError::config("bad");
        let io = CliError::io("gone");
        let stage = CliError::stage("train-generator", "diverged");
        assert_eq!(config.exit_code(), 2);
        assert_eq!(io.exit_code(), 3);
        assert_eq!(stage.exit_code(), 4);
    }

    #[test]
    fn json_line_is_single_line_and_parseable() {
        let e = CliError::stage("retrieve", "no such pair");
        let line = e.to_json_line();
        assert!(!line.contains('\n'));
        let v: serde_json::Value = serde_json::from_str(&line).unwrap();
        assert_eq!(v["error"], "stage");
        assert_eq!(v["stage"], "retrieve");
    }
}
