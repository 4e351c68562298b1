use std::path::PathBuf;

use thiserror::Error;

use crate::model::BnMode;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch between layer {from} ({from_kind}) and layer {to} ({to_kind}): {detail}")]
    LayerComposition {
        from: usize,
        from_kind: String,
        to: usize,
        to_kind: String,
        detail: String,
    },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("batch-norm mode error: model is in {active:?} mode but {required:?} is required")]
    BnMode { active: BnMode, required: BnMode },

    #[error("unsupported layer kind for transposition: {0}")]
    UnsupportedLayer(String),

    #[error(
        "transposed size equation unsolvable: reaching {target} from {input} (kernel {kernel}, stride {stride}, padding {padding}) requires output_padding {required}, which must be below the stride"
    )]
    OutputPadding {
        input: usize,
        target: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        required: i64,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("vector augmentation could not reach a balanced set after {attempts} draws (sigma {sigma}); adjust sigma")]
    AugmentationBalance { attempts: usize, sigma: f32 },

    #[error("dot-code capacity exceeded: {bits} bits do not fit into H*W*C = {capacity}")]
    Capacity { bits: usize, capacity: usize },

    #[error("zero-norm vector has no cosine similarity")]
    ZeroNorm,

    #[error("empty batch")]
    EmptyBatch,

    #[error("non-finite loss in round {round}, client {client}: {detail}")]
    NonFiniteLoss {
        round: usize,
        client: usize,
        detail: String,
    },

    #[error("corrupt file {path}: {detail}")]
    Corrupt { path: PathBuf, detail: String },

    #[error("unsupported format version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("client {client} failed in round {round}: {source}")]
    Client {
        round: usize,
        client: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("io error on {path}: {source}")]
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

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
