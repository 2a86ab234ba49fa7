use std::path::PathBuf;

/// Crate-wide error type.
///
/// Variants are grouped so the CLI can map them onto its exit-code classes:
/// data errors (bad input files or values) versus internal/IO failures.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("not a RIFF/WAVE file: {0}")]
    NotWave(PathBuf),
    #[error("truncated header in {0}")]
    TruncatedHeader(PathBuf),
    #[error("unsupported encoding (expected PCM) in {0}")]
    UnsupportedEncoding(PathBuf),
    #[error("unsupported channel count {channels} in {path} (expected mono)")]
    UnsupportedChannels { path: PathBuf, channels: u16 },
    #[error("unsupported bit depth {bits} in {path} (expected 16-bit)")]
    UnsupportedBitDepth { path: PathBuf, bits: u16 },

    #[error("audio too short: {samples} samples, need at least {needed}")]
    AudioTooShort { samples: usize, needed: usize },
    #[error("unexpected sample rate {got} (expected {expected})")]
    SampleRateMismatch { got: u32, expected: u32 },

    #[error("insufficient data: {frames} frames for {k} clusters")]
    InsufficientData { frames: usize, k: usize },
    #[error("insufficient distinct data: fewer than {k} distinct frames")]
    InsufficientDistinctData { k: usize },
    #[error("cluster count must be at least 2, got {0}")]
    BadClusterCount(usize),
    #[error("feature dimension mismatch: frames have {frames}, codebook has {codebook}")]
    DimensionMismatch { frames: usize, codebook: usize },
    #[error("unit {unit} out of range for K={k}")]
    UnitOutOfRange { unit: u32, k: usize },
    #[error("unit sequence is not reduced")]
    NotReduced,

    #[error("unit count must be at least 1")]
    BadUnitCount,
    #[error("malformed unit marker at byte {0}")]
    MalformedMarker(usize),
    #[error("non-finite value in embedding matrix")]
    NonFiniteEmbedding,

    #[error("manifest line {line}: missing TAB separator")]
    ManifestMissingTab { line: usize },
    #[error("misaligned inputs: {left} manifest records vs {right} unit sequences")]
    MisalignedInputs { left: usize, right: usize },
    #[error("empty description pool for {0}")]
    EmptyDescriptionPool(String),
    #[error("empty transcript at record {0}")]
    EmptyTranscript(usize),
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("empty text")]
    EmptyText,
    #[error("generation failed: no units produced")]
    GenerationFailed,

    #[error("input length {len} exceeds max_len {max_len}")]
    OverlongInput { len: usize, max_len: usize },
    #[error("token id {id} out of range for vocab size {vocab}")]
    TokenOutOfRange { id: u32, vocab: usize },
    #[error("empty target: no unmasked positions to score")]
    EmptyTarget,
    #[error("invalid segment [{start}, {end}) with prefix {prefix_len}")]
    BadSegment {
        start: usize,
        prefix_len: usize,
        end: usize,
    },
    #[error("invalid stage {0} (expected 1, 2, or 3)")]
    BadStage(u8),
    #[error("missing LoRA config for stage 3")]
    MissingLora,

    #[error("checkpoint error in {path}: {reason}")]
    Checkpoint { path: PathBuf, reason: String },
    #[error("config error: {0}")]
    Config(String),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("modality mismatch: format {format} requires a {expected} instruction")]
    ModalityMismatch {
        format: &'static str,
        expected: &'static str,
    },
    #[error("empty unit sequence where units are required")]
    EmptyUnits,
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by bad input data or values, as opposed to
    /// internal/IO failures. The CLI maps these to distinct exit codes.
    pub fn is_data_error(&self) -> bool {
        !matches!(self, Error::Io { .. })
    }
}

pub type Result<T> = std::result::Result<T, Error>;
