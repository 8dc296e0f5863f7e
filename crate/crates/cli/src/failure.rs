use protodep::Error;
use serde::Serialize;

pub const EXIT_INPUT: i32 = 2;
pub const EXIT_INCOMPATIBLE: i32 = 3;
pub const EXIT_LOOKUP: i32 = 4;
pub const EXIT_NUMERIC: i32 = 5;

/// What goes to stderr as a single JSON line.
#[derive(Debug, Serialize)]
pub struct Failure {
    pub error: &'static str,
    pub code: i32,
    pub message: String,
}

impl Failure {
    pub fn input(message: impl Into<String>) -> Self {
        Self {
            error: "input",
            code: EXIT_INPUT,
            message: message.into(),
        }
    }

    pub fn numeric(message: impl Into<String>) -> Self {
        Self {
            error: "numeric",
            code: EXIT_NUMERIC,
            message: message.into(),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let (error, code) = match &e {
            Error::Io { .. } | Error::Schema { .. } | Error::Invalid(_) | Error::TooLarge(_) => ("input", EXIT_INPUT),
            Error::Incompatible(_) | Error::Shape(_) => ("incompatible", EXIT_INCOMPATIBLE),
            Error::UnknownUser(_) => ("lookup", EXIT_LOOKUP),
            Error::Divergence { .. } | Error::NonFinite(_) | Error::DegenerateVector => ("numeric", EXIT_NUMERIC),
        };
        Self {
            error,
            code,
            message: e.to_string(),
        }
    }
}
