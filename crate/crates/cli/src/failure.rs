use std::fmt;

use stepwise_core::Error;

/// Failure classes with their process exit codes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Kind {
    Config,
    Data,
    Numeric,
}

#[derive(Debug)]
pub struct Failure {
    pub kind: Kind,
    pub message: String,
}

impl Failure {
    pub fn config(message: impl Into<String>) -> Self {
        Self { kind: Kind::Config, message: message.into() }
    }

    pub fn data(message: impl Into<String>) -> Self {
        Self { kind: Kind::Data, message: message.into() }
    }

    pub fn numeric(message: impl Into<String>) -> Self {
        Self { kind: Kind::Numeric, message: message.into() }
    }

    pub fn code(&self) -> i32 {
        match self.kind {
            Kind::Config => 2,
            Kind::Data => 3,
            Kind::Numeric => 4,
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let label = match self.kind {
            Kind::Config => "config error",
            Kind::Data => "data error",
            Kind::Numeric => "numeric failure",
        };
        write!(f, "{label}: {}", self.message)
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let message = e.to_string();
        let kind = match e {
            Error::Config(_)
            | Error::Partition(_)
            | Error::Shape { .. }
            | Error::NoAttention(_)
            | Error::UnknownParam(_) => Kind::Config,
            Error::Data(_) | Error::Csv(_) | Error::Json(_) | Error::Io(_) => Kind::Data,
            Error::NonFinite(_) | Error::Metric(_) | Error::LossNotScalar(_) | Error::BackwardBeforeForward => {
                Kind::Numeric
            }
        };
        Self { kind, message }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Self::data(e.to_string())
    }
}

impl From<csv::Error> for Failure {
    fn from(e: csv::Error) -> Self {
        Self::data(e.to_string())
    }
}
