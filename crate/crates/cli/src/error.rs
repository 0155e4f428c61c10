use iman_core::Error;
use thiserror::Error as ThisError;

pub const EXIT_USAGE: i32 = 2;
pub const EXIT_IO: i32 = 3;
pub const EXIT_STAGE_ORDER: i32 = 4;
pub const EXIT_DIVERGENCE: i32 = 5;
pub const EXIT_NO_CLUSTERS: i32 = 6;
pub const EXIT_DEGENERATE: i32 = 7;

#[derive(Debug, ThisError)]
#[error("{message}")]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    pub fn new(code: i32, message: impl Into<String>) -> Self {
        Self {
            code,
            message: message.into(),
        }
    }

    pub fn usage(message: impl Into<String>) -> Self {
        Self::new(EXIT_USAGE, message)
    }

    pub fn io(message: impl Into<String>) -> Self {
        Self::new(EXIT_IO, message)
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Io { .. } | Error::Parse { .. } | Error::Schema(_) => EXIT_IO,
            Error::StageOrder(_) => EXIT_STAGE_ORDER,
            Error::Divergence(_) | Error::NonFinite(_) => EXIT_DIVERGENCE,
            Error::PseudoLabelFailure => EXIT_NO_CLUSTERS,
            Error::DegenerateFeature { .. } | Error::DegenerateBandwidth => EXIT_DEGENERATE,
            _ => EXIT_USAGE,
        };
        Self::new(code, e.to_string())
    }
}
