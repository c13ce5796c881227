//! Error types for the pipeline, one enum per subsystem plus a
//! catch-all [`Error`] used at the library surface.

use thiserror::Error;

/// Errors raised by the tensor graph.
#[derive(Debug, Error, PartialEq)]
pub enum NumericsError {
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("backward already ran on this graph; rebuild the graph before calling again")]
    BackwardAlreadyRun,
    #[error("cross-entropy mean over zero non-ignored rows is undefined")]
    AllRowsIgnored,
    #[error("non-finite value detected in {context}")]
    NonFinite { context: String },
}

#[derive(Debug, Error, PartialEq)]
pub enum TokenizerError {
    #[error("vocabulary target size {target} too small: need > {min} (specials + base characters)")]
    TargetSizeTooSmall { target: usize, min: usize },
    #[error("empty corpus: no tokens to build a vocabulary from")]
    EmptyCorpus,
    #[error("token id {id} out of range for vocabulary of size {size}")]
    IdOutOfRange { id: u32, size: usize },
    #[error("bad vocabulary file {path}: {reason}")]
    BadVocabFile { path: String, reason: String },
}

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("sequence length {len} exceeds model maximum {max_len}")]
    SequenceTooLong { len: usize, max_len: usize },
    #[error("token id {id} out of range for vocabulary size {vocab}")]
    TokenIdOutOfRange { id: u32, vocab: usize },
    #[error("masked position {pos} out of range or padding (sequence length {len})")]
    PositionOutOfRange { pos: usize, len: usize },
    #[error("checkpoint format error: {0}")]
    CheckpointFormat(String),
    #[error("checkpoint vocabulary size {checkpoint} does not match vocabulary file size {vocab}")]
    VocabSizeMismatch { checkpoint: usize, vocab: usize },
    #[error("hidden size {hidden} not divisible by attention head count {heads}")]
    BadHeadCount { hidden: usize, heads: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Error)]
pub enum DataError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("{path}:{line}: malformed line: {reason}")]
    MalformedLine {
        path: String,
        line: usize,
        reason: String,
    },
    #[error("unknown docid {0}")]
    UnknownDocId(String),
    #[error("duplicate docid {0}")]
    DuplicateDocId(String),
    #[error("query is empty after tokenization")]
    EmptyQuery,
    #[error("query has {got} tokens, more than max_query_tokens {max}; queries are never truncated")]
    QueryTooLong { got: usize, max: usize },
    #[error("sample rate {0} outside (0, 1]")]
    BadSampleRate(f64),
    #[error("no positions eligible for masking")]
    NoEligiblePositions,
    #[error("no eligible negative document outside the clicked set")]
    NoEligibleNegative,
    #[error("fold count {k} exceeds query count {n}")]
    TooManyFolds { k: usize, n: usize },
    #[error("fold count must be at least 2, got {0}")]
    TooFewFolds(usize),
    #[error("invalid qrels grade {grade} (expected 0, 1, or 2)")]
    BadGrade { grade: i64 },
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("non-finite gradient in parameter {name}; step aborted")]
    NonFiniteGradient { name: String },
    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },
    #[error("no training instances: {0}")]
    EmptyData(String),
    #[error("checkpoint stage {got} unusable here: {expected}")]
    WrongStage { got: String, expected: String },
    #[error("bad condition setup: {0}")]
    BadCondition(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

#[derive(Debug, Error)]
pub enum RetrievalError {
    #[error("unknown docid {0}")]
    UnknownDocId(String),
    #[error("cannot index an empty document store")]
    EmptyStore,
    #[error("index format error: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Error)]
pub enum RankEvalError {
    #[error("run format error at {path}:{line}: {reason}")]
    Format {
        path: String,
        line: usize,
        reason: String,
    },
    #[error("run violates invariant for qid {qid}: {reason}")]
    BadRun { qid: String, reason: String },
    #[error("qid sets differ between runs: {0}")]
    QidSetMismatch(String),
    #[error("paired samples must have equal length >= 2 (got {a} and {b})")]
    BadPairing { a: usize, b: usize },
    #[error("candidate docid {0} not resolvable in document store")]
    UnresolvableDocId(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Error)]
pub enum ProbeError {
    #[error("document is empty after tokenization")]
    EmptyDocument,
    #[error("n_masks must be >= 1")]
    NoMasks,
    #[error("a {n_masks}-wide mask slot leaves no document room at max_len {max_len}")]
    SlotTooWide { n_masks: usize, max_len: usize },
    #[error("checkpoints do not share a vocabulary (sizes {0} vs {1})")]
    VocabMismatch(usize, usize),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Umbrella error for callers that cross subsystem boundaries.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Tokenizer(#[from] TokenizerError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
    #[error(transparent)]
    RankEval(#[from] RankEvalError),
    #[error(transparent)]
    Probe(#[from] ProbeError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// True when the failure is numeric (NaN/Inf, diverged optimization)
    /// rather than bad input data. The CLI maps this to a distinct exit code.
    pub fn is_numeric(&self) -> bool {
        match self {
            Error::Numerics(_) => true,
            Error::Train(TrainError::NonFiniteGradient { .. }) => true,
            Error::Train(TrainError::NonFiniteLoss { .. }) => true,
            Error::Train(TrainError::Numerics(_)) => true,
            _ => false,
        }
    }
}
