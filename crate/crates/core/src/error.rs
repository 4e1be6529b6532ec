use thiserror::Error;

use crate::model::{MachineId, MachineState};

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("illegal transition {from} -> {to} on machine {machine}")]
    IllegalTransition {
        machine: MachineId,
        from: MachineState,
        to: MachineState,
    },
    #[error("machine {machine} in state {state} cannot run a {mode} execution")]
    ModeStateMismatch {
        machine: MachineId,
        state: MachineState,
        mode: &'static str,
    },
    #[error("invalid test profile: {0}")]
    InvalidProfile(String),
    #[error("invalid defect spec: {0}")]
    InvalidDefect(String),
    #[error("invalid operands: {0}")]
    InvalidOperands(String),
    #[error("template for {class} did not produce its class within {attempts} draws")]
    TemplateExhausted { class: String, attempts: u32 },
    #[error("no detections: coverage partition is undefined")]
    EmptyUnion,
    #[error("config parse error at line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("config validation failed for `{field}`: {reason}")]
    Validation { field: String, reason: String },
    #[error("invariant violated: {0}")]
    Invariant(String),
    #[error("while processing {event}: {source}")]
    AtEvent {
        event: String,
        #[source]
        source: Box<Error>,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn validation(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Validation {
            field: field.into(),
            reason: reason.into(),
        }
    }

    /// Process exit code: 1 for bad input, 2 for a broken internal invariant.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::IllegalTransition { .. } | Error::ModeStateMismatch { .. } | Error::Invariant(_) => 2,
            Error::AtEvent { source, .. } => source.exit_code(),
            _ => 1,
        }
    }
}
