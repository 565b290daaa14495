use std::path::PathBuf;

use thiserror::Error;

/// Grammar accepted when parsing a [`crate::peft::PeftMethod`], repeated in usage errors.
pub const METHOD_GRAMMAR: &str =
    "full | noft | adapter:<b> | prefix:<p> | bitfit:lnbias | bitfit:lnweights | xattn";

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: normalized axis is empty")]
    EmptyAxis { op: &'static str },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("backward already ran for this forward pass; record a new forward pass first")]
    BackwardTwice,

    #[error("expected a scalar output, got shape {0:?}")]
    NonScalar(Vec<usize>),

    #[error("no loss positions: every target position is padding")]
    NoLossPositions,

    #[error("invalid model config: {0}")]
    Config(String),

    #[error("invalid method {input:?} ({reason}); expected {METHOD_GRAMMAR}")]
    MethodSyntax { input: String, reason: String },

    #[error("model is already instrumented with {0}")]
    AlreadyInstrumented(String),

    #[error("method {0} would mark no parameters trainable")]
    EmptyMask(String),

    #[error(
        "budget of {target} parameters is unreachable for the {family} family: \
         its smallest configuration trains {minimum}"
    )]
    UnreachableBudget {
        family: String,
        target: u64,
        minimum: u64,
    },

    #[error(
        "parallel files are not aligned: {} has {src_lines} lines but {} has {tgt_lines}",
        src_path.display(),
        tgt_path.display()
    )]
    Alignment {
        src_path: PathBuf,
        tgt_path: PathBuf,
        src_lines: usize,
        tgt_lines: usize,
    },

    #[error("{}: line {line} is not valid UTF-8", path.display())]
    Encoding { path: PathBuf, line: usize },

    #[error("{}: line {line} is empty", path.display())]
    EmptyLine { path: PathBuf, line: usize },

    #[error("sentence {index} has length {len}, longer than max_tokens = {max_tokens}")]
    SentenceTooLong {
        index: usize,
        len: usize,
        max_tokens: usize,
    },

    #[error("cannot draw a subset of {requested} pairs from a corpus of {available}")]
    SubsetSize { requested: usize, available: usize },

    #[error("empty dataset: {0}")]
    EmptyDataset(String),

    #[error("non-finite loss {loss} at step {step} (epoch {epoch}); lower the learning rate or check the data")]
    NonFiniteLoss { loss: f64, step: usize, epoch: usize },

    #[error("undefined baseline: full fine-tuning score is {0}")]
    UndefinedBaseline(f64),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("length mismatch: {hypotheses} hypotheses vs {references} references")]
    LengthMismatch { hypotheses: usize, references: usize },

    #[error("missing baseline: {0}")]
    MissingBaseline(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("csv: {0}")]
    Csv(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn shape_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Error {
    Error::Shape {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}
