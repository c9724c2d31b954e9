use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("pebble spawning stalled after {attempts} consecutive rejections")]
    SpawnStall { attempts: u64 },

    #[error("step() called on a terminated world")]
    SteppedTerminated,

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("malformed observation: expected length {expected}, got {actual}")]
    Shape { expected: usize, actual: usize },

    #[error("sequence length mismatch: {what}")]
    LengthMismatch { what: String },

    #[error("trajectory buffer holds {len} transitions, update needs {required}")]
    BufferNotFull { len: usize, required: usize },

    #[error("config error: {0}")]
    Config(String),

    #[error("checkpoint shape mismatch: {0}")]
    CheckpointShape(String),

    #[error("checkpoint format error: {0}")]
    CheckpointFormat(String),

    #[error("response window overruns episode: event at step {step} + window {window} > episode length {len}")]
    WindowOverrun { step: usize, window: usize, len: usize },

    #[error("no replay logs to report on")]
    EmptyLog,

    #[error("malformed replay log: {0}")]
    ReplayFormat(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
