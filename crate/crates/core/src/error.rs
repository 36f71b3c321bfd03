use thiserror::Error;

use crate::modality::ModalityKind;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("input error: {0}")]
    Input(String),

    #[error("missing modality {0} in sample")]
    MissingModality(ModalityKind),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("cannot handle task `{task}`: modality {modality} was never trained")]
    Capability { task: String, modality: ModalityKind },

    #[error("malformed update: {0}")]
    Parse(#[from] ParseError),

    #[error("{context}: {source}")]
    Context {
        context: String,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn dim(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Dimension {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub fn context(self, context: impl Into<String>) -> Self {
        Error::Context {
            context: context.into(),
            source: Box::new(self),
        }
    }

    /// Innermost error, with all [`Error::Context`] layers removed.
    pub fn root(&self) -> &Error {
        match self {
            Error::Context { source, .. } => source.root(),
            other => other,
        }
    }
}

/// Wire-format decoding failures.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ParseError {
    #[error("bad magic {0:02x?}")]
    BadMagic([u8; 4]),
    #[error("unsupported format version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("truncated input: needed {needed} bytes at offset {offset}, {available} available")]
    Truncated { offset: usize, needed: usize, available: usize },
    #[error("tensor `{name}` has inconsistent shape {dims:?}")]
    Shape { name: String, dims: Vec<u32> },
    #[error("tensor name is not valid UTF-8")]
    Utf8,
    #[error("duplicate tensor name `{0}`")]
    DuplicateName(String),
    #[error("checksum mismatch: stored {stored:08x}, computed {computed:08x}")]
    Checksum { stored: u32, computed: u32 },
    #[error("{0} trailing bytes after checksum")]
    TrailingBytes(usize),
}
