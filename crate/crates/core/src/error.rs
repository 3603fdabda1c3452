use std::path::PathBuf;

use thiserror::Error;

use crate::layer::SubspaceLayer;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    Dimension {
        context: String,
        expected: String,
        got: String,
    },

    #[error("empty input: {0}")]
    EmptyInput(String),

    /// An update produced a non-finite entry. `last_finite` holds the layer as it
    /// stood before the offending sample was consumed.
    #[error("step size too large: non-finite update at iteration {iteration}{}", layer_suffix(*.layer))]
    StepSize {
        iteration: usize,
        layer: Option<usize>,
        last_finite: Box<SubspaceLayer>,
    },

    #[error("degenerate {kind} at index {index}")]
    Degenerate { kind: &'static str, index: usize },

    #[error("division by zero: {0}")]
    ZeroReference(String),

    #[error("ill-conditioned system: {0}; use a positive ridge penalty")]
    Conditioning(String),

    #[error("{}:{line}:{column}: {message}", path.display())]
    Parse {
        path: PathBuf,
        line: u64,
        column: usize,
        message: String,
    },

    #[error("{}: rows with missing cells: {rows:?}", path.display())]
    MissingCells { path: PathBuf, rows: Vec<u64> },

    #[error("model file: bad magic bytes")]
    BadMagic,

    #[error("model file: unsupported format version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("model file: truncated ({0})")]
    Truncated(String),

    #[error("model file: checksum mismatch (stored {stored:#010x}, computed {computed:#010x})")]
    Checksum { stored: u32, computed: u32 },

    #[error("model file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

fn layer_suffix(layer: Option<usize>) -> String {
    match layer {
        Some(k) => format!(" in layer {k}"),
        None => String::new(),
    }
}

impl Error {
    pub(crate) fn dim(context: impl Into<String>, expected: impl ToString, got: impl ToString) -> Self {
        Error::Dimension {
            context: context.into(),
            expected: expected.to_string(),
            got: got.to_string(),
        }
    }

    /// Tags a training error with the index of the layer being trained.
    pub fn in_layer(self, k: usize) -> Self {
        match self {
            Error::StepSize {
                iteration,
                last_finite,
                ..
            } => Error::StepSize {
                iteration,
                layer: Some(k),
                last_finite,
            },
            Error::Dimension {
                context,
                expected,
                got,
            } => Error::Dimension {
                context: format!("layer {k}: {context}"),
                expected,
                got,
            },
            Error::EmptyInput(m) => Error::EmptyInput(format!("layer {k}: {m}")),
            Error::InvalidArgument(m) => Error::InvalidArgument(format!("layer {k}: {m}")),
            other => other,
        }
    }
}
