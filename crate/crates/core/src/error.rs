use thiserror::Error;

/// Failures raised by a generation backend.
#[derive(Debug, Error)]
pub enum GenError {
    #[error("transport failure talking to {endpoint}: {message}")]
    Transport { endpoint: String, message: String },

    #[error("server returned HTTP {status}: {body}")]
    HttpStatus { status: u16, body: String },

    #[error("malformed response body: {0}")]
    MalformedBody(String),

    /// Neither evaluation token showed up in the returned top log-probabilities.
    #[error(
        "neither {good:?} nor {bad:?} among the top {depth} log-probabilities; \
         request a logprobs depth above {depth}"
    )]
    MissingEvalTokens {
        good: String,
        bad: String,
        depth: u32,
    },

    #[error("cannot continue a finished sample (prompt {prompt_id}, sample {sample_index})")]
    ContinueFinished { prompt_id: u64, sample_index: usize },

    #[error("invalid generation request: {0}")]
    InvalidRequest(String),

    #[error("unknown prompt id {0}")]
    UnknownPrompt(u64),
}

/// Accounting recorded up to the point a run was interrupted.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct PartialAccounting {
    pub samples_used: usize,
    pub batches_used: usize,
    pub tokens_generated: u64,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Generator(#[from] GenError),

    #[error("degenerate evaluation: no probability mass on either evaluation token")]
    DegenerateEvaluation,

    #[error("misuse: {0}")]
    Misuse(&'static str),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error(
        "percent of maximum improvement undefined: max-strategy quality equals 1-sample quality"
    )]
    UndefinedBaseline,

    #[error("run interrupted after {partial:?}: {source}")]
    Interrupted {
        #[source]
        source: Box<Error>,
        partial: PartialAccounting,
    },

    /// Output could not be written; the computed metric rows are kept.
    #[error("{source} (metrics computed for {} strategies were kept)", rows.len())]
    WithPartialRows {
        #[source]
        source: Box<Error>,
        rows: Vec<crate::experiment::MetricRow>,
    },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    /// Generator error underneath any interruption wrappers.
    pub fn generator_cause(&self) -> Option<&GenError> {
        match self {
            Error::Generator(e) => Some(e),
            Error::Interrupted { source, .. } => source.generator_cause(),
            _ => None,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
