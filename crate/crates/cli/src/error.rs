use std::fmt;

use fairdec::Error;

/// Exit code 2 for bad configuration or input files, 1 for everything else.
#[derive(Debug)]
pub enum CliError {
    Config(String),
    Runtime(anyhow::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "invalid configuration: {m}"),
            CliError::Runtime(e) => write!(f, "{e:#}"),
        }
    }
}

fn is_validation(e: &Error) -> bool {
    matches!(
        e,
        Error::DimensionMismatch { .. }
            | Error::DuplicateToken { .. }
            | Error::NonFiniteValue { .. }
            | Error::MalformedLine { .. }
            | Error::EmptyFile
            | Error::OutOfVocabulary(_)
            | Error::InvalidConfig(_)
            | Error::Format(_)
            | Error::Json(_)
            | Error::Csv(_)
            | Error::EmptyCorpus
            | Error::EmptyResult
            | Error::EmptyContext
            | Error::AllTokensOov
            | Error::NoExamplesForClass(_)
            | Error::SingleClassDataset
            | Error::OovGoldToken(_)
            | Error::DimMismatch { .. }
    )
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        if is_validation(&e) {
            CliError::Config(e.to_string())
        } else {
            CliError::Runtime(e.into())
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.into())
    }
}

impl From<anyhow::Error> for CliError {
    fn from(e: anyhow::Error) -> Self {
        CliError::Runtime(e)
    }
}
