use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Two tensors whose shapes must agree for an operation do not.
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// A single tensor has the wrong rank or a dimension that does not
    /// satisfy an operation's requirements (non-integral conv output,
    /// channel count not divisible by heads, ...).
    #[error("{op}: {msg}")]
    Dimension { op: &'static str, msg: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("attention over an empty memory pool")]
    EmptyMemory,

    /// Memory pool frame indices must be strictly increasing.
    #[error("memory push out of order: frame {new} after frame {last}")]
    FrameOrder { last: usize, new: usize },

    /// A binary artifact failed validation. `offset` is the byte position
    /// of the first field that could not be accepted.
    #[error("{path}: malformed file at byte {offset}: {msg}")]
    Format {
        path: String,
        offset: u64,
        msg: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn dim(op: &'static str, msg: impl Into<String>) -> Error {
        Error::Dimension { op, msg: msg.into() }
    }

    pub fn config(msg: impl Into<String>) -> Error {
        Error::Config(msg.into())
    }
}
