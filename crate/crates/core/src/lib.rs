//! Joint unsupervised learning of a convolutional feature extractor and a
//! set of pseudo-classes.
//!
//! Each sample is labeled with its nearest center in feature space; the
//! network is trained against those labels with a softmax loss plus a
//! center loss, while the centers follow their assigned features. Learned
//! features are scored downstream by a linear least-squares classifier under
//! k-fold cross-validation.

pub mod checkpoint;
pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod layers;
pub mod network;
pub mod pseudo_loss;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use network::{ArchitectureSpec, InputGeometry, LayerSpec, Network};
pub use pseudo_loss::{CenterBank, CenterGradScale, LossBreakdown, PseudoAssignment};
pub use tensor::Tensor;
pub use trainer::{TrainConfig, TrainLogRecord, TrainState};
