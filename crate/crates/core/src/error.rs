use std::fmt;

use thiserror::Error;

/// Where in a run an error surfaced.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Provenance {
    pub round: Option<u32>,
    pub client: Option<u32>,
    pub step: Option<usize>,
}

impl fmt::Display for Provenance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut parts = Vec::new();
        if let Some(r) = self.round {
            parts.push(format!("round {r}"));
        }
        if let Some(c) = self.client {
            parts.push(format!("client {c}"));
        }
        if let Some(s) = self.step {
            parts.push(format!("step {s}"));
        }
        if parts.is_empty() {
            f.write_str("unknown location")
        } else {
            f.write_str(&parts.join(", "))
        }
    }
}

#[derive(Debug, Error)]
pub enum FedError {
    #[error("shape mismatch in {what}: expected {expected}, got {got}")]
    Shape {
        what: &'static str,
        expected: String,
        got: String,
    },

    #[error("non-finite {what} at {provenance}")]
    NonFinite {
        what: &'static str,
        provenance: Provenance,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("consistency error: {0}")]
    Consistency(String),

    #[error("partition error: {0}")]
    Partition(String),

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("encode error: {0}")]
    Encode(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
}

impl FedError {
    pub fn shape(what: &'static str, expected: impl ToString, got: impl ToString) -> Self {
        FedError::Shape {
            what,
            expected: expected.to_string(),
            got: got.to_string(),
        }
    }

    pub fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        FedError::Io {
            context: context.into(),
            source,
        }
    }

    /// Fill in missing provenance fields. Fields already set are kept.
    pub fn at(mut self, round: Option<u32>, client: Option<u32>, step: Option<usize>) -> Self {
        if let FedError::NonFinite { provenance, .. } = &mut self {
            provenance.round = provenance.round.or(round);
            provenance.client = provenance.client.or(client);
            provenance.step = provenance.step.or(step);
        }
        self
    }
}

pub type Result<T, E = FedError> = std::result::Result<T, E>;
