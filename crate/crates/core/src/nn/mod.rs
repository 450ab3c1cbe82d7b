//! From-scratch convolutional classifier: tensors as flat NHWC buffers,
//! GEMM-backed convolutions, reverse-mode gradients, Adam training,
//! evaluation metrics and a compact binary weight format.

mod adam;
mod arch;
mod io;
mod metrics;
mod model;
mod scalar;
mod train;

use std::path::PathBuf;

use thiserror::Error;

use crate::morpho::MorphoError;

pub use adam::{adam_step, AdamState};
pub use arch::{ArchSpec, ConvGeom, LayerGeom, LayerSpec};
pub use io::{decode_weights, encode_weights, load_weights, save_weights, WEIGHT_MAGIC};
pub use metrics::{evaluate, predict_classes, EvalReport};
pub use model::{argmax, softmax, CnnModel, Grads, Tensor, Trace};
pub use scalar::{Mat, MatMut, Scalar};
pub use train::{history_csv, train, Dataset, EpochRecord, TrainConfig, TrainOutcome};

#[derive(Debug, Error)]
pub enum NnError {
    #[error("invalid architecture: {0}")]
    InvalidArch(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("not a weight file (magic {0:?})")]
    BadMagic([u8; 8]),
    #[error("weights do not match the architecture: {0}")]
    ShapeMismatchWithArch(String),
    #[error("weight file truncated: {0}")]
    Truncated(String),
    #[error("training split is empty")]
    EmptyTrainSplit,
    #[error("split `{0}` has no labeled samples")]
    EmptySplit(String),
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Morpho(#[from] MorphoError),
}
