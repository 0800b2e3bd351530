use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// Malformed input data: bad IDX headers, count mismatches, broken
    /// score files, unparseable report artifacts.
    #[error("malformed data: {0}")]
    Format(String),

    #[error("insufficient samples: {0}")]
    InsufficientSamples(String),

    #[error("degenerate regression fit: {0}")]
    DegenerateFit(String),

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    /// Configuration file problems (unknown keys, type errors, missing files).
    #[error("configuration: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Process exit code contract: 1 usage error, 2 data error, 3 runtime error.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvalidArgument(_) | Error::Config(_) => 1,
            Error::Format(_) | Error::InsufficientSamples(_) | Error::Csv(_) => 2,
            Error::DegenerateFit(_)
            | Error::UndefinedMetric(_)
            | Error::Io(_)
            | Error::Json(_) => 3,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes_follow_the_contract() {
        assert_eq!(Error::InvalidArgument("x".into()).exit_code(), 1);
        assert_eq!(Error::Config("x".into()).exit_code(), 1);
        assert_eq!(Error::Format("x".into()).exit_code(), 2);
        assert_eq!(Error::InsufficientSamples("x".into()).exit_code(), 2);
        assert_eq!(Error::DegenerateFit("x".into()).exit_code(), 3);
        assert_eq!(
            Error::Io(std::io::Error::new(std::io::ErrorKind::Other, "x")).exit_code(),
            3
        );
    }
}
