use std::path::PathBuf;

/// Errors produced by the conversion toolkit.
#[derive(Debug, thiserror::Error)]
pub enum QuartzError {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed manifest {path}: {message}")]
    Manifest { path: PathBuf, message: String },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("unknown layer kind `{0}`")]
    UnknownLayerKind(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("value {value} outside the encodable range [0, 1]")]
    OutOfRange { value: f64 },

    #[error("spike time {t_local} precedes the decoding window starting at {t_max}")]
    EarlySpikeTime { t_local: i64, t_max: u32 },

    #[error("degenerate normalization scale {scale} at layer {layer}: activations are all non-positive at the requested percentile")]
    DegenerateScale { layer: usize, scale: f64 },

    #[error("unsupported network: {0}")]
    Unsupported(String),

    #[error("simulation exceeded its step budget of {0}")]
    StepBudget(u64),

    #[error("no output spike within the decoding window")]
    NoOutputSpike,

    #[error("unit with {synapses} synapses cannot fit on a core holding {capacity}")]
    Unplaceable { synapses: usize, capacity: usize },

    #[error("corrupt IDX file {path}: {message}")]
    Idx { path: PathBuf, message: String },

    #[error("training diverged at epoch {epoch} (loss {loss}); config: {config}")]
    Divergence { epoch: usize, loss: f64, config: String },
}

pub type Result<T> = std::result::Result<T, QuartzError>;

impl QuartzError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        QuartzError::Io {
            path: path.into(),
            source,
        }
    }
}
