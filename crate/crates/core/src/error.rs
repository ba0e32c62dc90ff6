use std::path::PathBuf;

use thiserror::Error;

use crate::losses::FisherLossBreakdown;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("backward called on a tape already consumed by a non-create_graph pass")]
    TapeConsumed,

    #[error("non-finite activations in {layer}")]
    NumericOverflow { layer: String },

    #[error("non-finite loss (posterior_div={}, reconstruction={}, stability={})", .0.posterior_div, .0.reconstruction, .0.stability)]
    NonFiniteLoss(Box<FisherLossBreakdown>),

    #[error("non-finite gradient for parameter {name}")]
    NonFiniteGradient { name: String },

    #[error("svgd particle {index} diverged (norm {norm:.3e}); check that the prior's leading even coefficient is negative")]
    ParticleDivergence { index: usize, norm: f64 },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("idx {path}: {msg} at byte offset {offset}")]
    Idx {
        path: PathBuf,
        offset: u64,
        msg: String,
    },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("config: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }
}
