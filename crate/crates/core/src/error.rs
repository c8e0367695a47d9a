//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    // tokenizer
    #[error("corpus is empty: cannot build a vocabulary from zero bytes")]
    EmptyCorpus,
    #[error("target vocabulary size {requested} is below the minimum {minimum} (256 base bytes + specials)")]
    VocabTooSmall { requested: usize, minimum: usize },
    #[error("token id {id} out of range for vocabulary of size {vocab_size}")]
    TokenIdOutOfRange { id: u32, vocab_size: usize },
    #[error("malformed vocabulary: {0}")]
    MalformedVocab(String),
    #[error("context length {0} is too short; need at least 3 (SOT + one slot + EOT)")]
    ContextTooShort(usize),
    #[error("malformed token row: {0}")]
    MalformedTokenRow(String),

    // vision
    #[error("image has a zero dimension ({width}x{height})")]
    ZeroDimImage { width: u32, height: u32 },
    #[error("unsupported channel count {0}; expected 1, 3 or 4")]
    UnsupportedChannels(u8),
    #[error("cannot decode image {path}: {reason}")]
    ImageDecode { path: String, reason: String },
    #[error("resolution {resolution} is not divisible by patch size {patch_size}")]
    ResolutionPatchMismatch { resolution: usize, patch_size: usize },
    #[error("image batch resolution {batch} does not match encoder resolution {encoder}")]
    ResolutionMismatch { batch: usize, encoder: usize },
    #[error("patch size mismatch: {old} vs {new}; positional interpolation requires an unchanged patch size")]
    PatchSizeMismatch { old: usize, new: usize },

    // encoders / training
    #[error("embedding matrix is not L2-normalized (row {row} has norm {norm})")]
    NotNormalized { row: usize, norm: f64 },
    #[error("embedding dimension mismatch: {left} vs {right}")]
    DimMismatch { left: usize, right: usize },
    #[error("row count mismatch: {left} vs {right}")]
    RowCountMismatch { left: usize, right: usize },
    #[error("non-finite {what} encountered{}", step.map(|s| format!(" at step {s}")).unwrap_or_default())]
    NonFinite { what: &'static str, step: Option<usize> },
    #[error("batch size {0} too small for the contrastive objective; need at least 2")]
    BatchTooSmall(usize),
    #[error("step {step} out of range; schedule is defined on [0, {total_steps}]")]
    StepOutOfRange { step: usize, total_steps: usize },
    #[error("invalid train config: {0}")]
    InvalidTrainConfig(String),

    // zeroshot / probe
    #[error("class list is empty")]
    NoClasses,
    #[error("empty class name at index {0}")]
    EmptyClassName(usize),
    #[error("no predictions to score")]
    EmptyEval,
    #[error("training labels contain a single class; a linear probe needs at least two")]
    SingleClassTrain,
    #[error("invalid probe config: {0}")]
    InvalidProbeConfig(String),
    #[error("prompt template {0:?} must contain exactly one {{}} placeholder")]
    BadTemplate(String),
    #[error("template set is empty")]
    EmptyTemplates,
    #[error("prediction/truth length mismatch: {pred} vs {truth}")]
    LengthMismatch { pred: usize, truth: usize },
    #[error("class {0} absent from the ground truth; mean-per-class accuracy is undefined")]
    ClassAbsent(usize),
    #[error("labels contain a single class only; ROC-AUC needs both positives and negatives")]
    SingleClassLabels,
    #[error("class {class} has {available} pool examples; cannot sample {requested} shots")]
    NotEnoughShots { class: usize, available: usize, requested: usize },
    #[error("label {label} out of range for {num_classes} classes")]
    LabelOutOfRange { label: usize, num_classes: usize },

    // bench
    #[error("invalid bench config: {0}")]
    InvalidBench(String),

    // persistence
    #[error("unknown preset {name:?}; closest matches: {}", suggestions.join(", "))]
    UnknownPreset { name: String, suggestions: Vec<String> },
    #[error("bad checkpoint magic; not a duoclip checkpoint")]
    BadMagic,
    #[error("unknown checkpoint format version {found}; this build reads version {supported}")]
    UnknownVersion { found: u32, supported: u32 },
    #[error("checkpoint checksum mismatch; the file is corrupt")]
    ChecksumMismatch,
    #[error("checkpoint is truncated: {0}")]
    TruncatedCheckpoint(String),
    #[error("checkpoint tensor {name}: {reason}")]
    BadTensor { name: String, reason: String },

    // data files
    #[error("{path}:{line}: malformed manifest line: {reason}")]
    ManifestLine { path: String, line: usize, reason: String },
    #[error("dataset {0}: {1}")]
    Dataset(String, String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}
