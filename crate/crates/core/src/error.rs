use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch{}: expected {expected:?}, got {got:?}", layer_suffix(*.layer))]
    ShapeMismatch {
        layer: Option<usize>,
        expected: Vec<usize>,
        got: Vec<usize>,
    },

    #[error("invalid tensor: shape {shape:?} needs {expected} elements, data has {got}")]
    TensorSize {
        shape: Vec<usize>,
        expected: usize,
        got: usize,
    },

    #[error("architecture does not compose between {between}: {reason}")]
    Architecture { between: String, reason: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("cache does not belong to this layer{}: {reason}", layer_suffix(*.layer))]
    StaleCache { layer: Option<usize>, reason: String },

    #[error("non-finite gradient in {0}")]
    NonFiniteGradient(String),

    #[error("training diverged at iteration {iteration}: L = {loss}, L_s = {softmax_loss}, L_c = {center_loss}")]
    Divergence {
        iteration: u64,
        loss: f64,
        softmax_loss: f64,
        center_loss: f64,
    },

    #[error("checkpoint {path}: {reason}")]
    Checkpoint { path: PathBuf, reason: String },

    #[error("dataset: {0}")]
    Dataset(String),

    #[error("payload {path}: {reason}")]
    Payload { path: PathBuf, reason: String },

    #[error("evaluation: {0}")]
    Eval(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

fn layer_suffix(layer: Option<usize>) -> String {
    match layer {
        Some(i) => format!(" at layer {i}"),
        None => String::new(),
    }
}

impl Error {
    /// Attaches a layer index to errors raised by a single-layer kernel.
    pub fn at_layer(self, index: usize) -> Self {
        match self {
            Error::ShapeMismatch { expected, got, .. } => Error::ShapeMismatch {
                layer: Some(index),
                expected,
                got,
            },
            Error::StaleCache { reason, .. } => Error::StaleCache {
                layer: Some(index),
                reason,
            },
            other => other,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
