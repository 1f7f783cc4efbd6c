//! POS-guided softmax language modelling.
//!
//! A causal transformer backbone ([`net`]) feeds one of two output layers
//! ([`heads`]): a plain softmax over the vocabulary, or a factorized head that
//! first predicts a part-of-speech tag and then a token restricted to that
//! tag's cell. [`decode`] implements single- and two-stage sampling,
//! [`metrics`] the diversity and quality measures, and [`oracle`] the entropy
//! bounds for truncated sampling.

use std::path::{Path, PathBuf};

pub mod cli;
pub mod corpus;
pub mod decode;
pub mod heads;
pub mod metrics;
pub mod net;
pub mod oracle;

pub use corpus::{Lexicon, PosPartition, TaggedCorpus, Vocabulary};
pub use heads::{CategoricalDist, HeadKind, JointDist};
pub use net::{ModelConfig, ModelParams};

/// Errors surfaced at file and process boundaries.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Data { path: PathBuf, message: String },
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Runtime(String),
    #[error("{0}")]
    Assertion(String),
}

impl Error {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub fn data(path: &Path, err: impl std::fmt::Display) -> Self {
        Self::Data {
            path: path.to_path_buf(),
            message: err.to_string(),
        }
    }

    /// Process exit status: 2 usage, 3 input data, 4 runtime, 5 failed check.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Usage(_) => 2,
            Self::Io { .. } | Self::Data { .. } => 3,
            Self::Runtime(_) => 4,
            Self::Assertion(_) => 5,
        }
    }
}
