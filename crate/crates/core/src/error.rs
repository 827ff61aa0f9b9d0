use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("line {line}: expected {expected} values, found {found}")]
    DimensionMismatch {
        line: usize,
        expected: usize,
        found: usize,
    },

    #[error("line {line}: duplicate token {token:?}")]
    DuplicateToken { line: usize, token: String },

    #[error("line {line}: non-finite value {value:?}")]
    NonFiniteValue { line: usize, value: String },

    #[error("line {line}: malformed embedding line")]
    MalformedLine { line: usize },

    #[error("embedding file contains no vectors")]
    EmptyFile,

    #[error("out of vocabulary: {}", .0.join(", "))]
    OutOfVocabulary(Vec<String>),

    #[error("vector has zero norm")]
    ZeroNorm,

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimMismatch { expected: usize, found: usize },

    #[error("requested {requested} components but only {available} nonzero singular values")]
    RankDeficient { requested: usize, available: usize },

    #[error("no tokens left after stopword filtering")]
    EmptyAfterFiltering,

    #[error("context is empty")]
    EmptyContext,

    #[error("every context token is out of vocabulary")]
    AllTokensOov,

    #[error("training corpus is empty")]
    EmptyCorpus,

    #[error("no examples for class {0:?}")]
    NoExamplesForClass(String),

    #[error("training split contains a single class")]
    SingleClassDataset,

    #[error("classifier weight matrix is zero")]
    ZeroWeightMatrix,

    #[error("distribution is not normalized (sum = {0})")]
    NotNormalized(f64),

    #[error("context contains no swappable term")]
    NoSwappableToken,

    #[error("gold token {0:?} is out of vocabulary")]
    OovGoldToken(String),

    #[error("no sentences survived filtering")]
    EmptyResult,

    #[error("context of length {len} is shorter than the minimum {min}")]
    TooShort { len: usize, min: usize },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("malformed data: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}
