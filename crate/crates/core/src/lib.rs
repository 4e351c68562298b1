//! Federated-learning laboratory for visually verifiable model watermarks.
//!
//! Each simulated client embeds its own watermark image into the shared
//! global model through a transposed model that reuses every learnable
//! parameter of the classifier. The crate covers model construction and
//! transposition, the contrastive watermark objective, federated training
//! under several aggregation schemes, model-modification and forgery
//! attacks, and ownership verification.

pub mod attacks;
pub mod capacity;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod exec;
pub mod federation;
pub mod kernels;
pub mod metrics;
pub mod model;
pub mod par;
pub mod rng;
pub mod tensor;
pub mod training;
pub mod transpose;
pub mod verify;
pub mod watermark;

pub use error::{Error, Result};
pub use tensor::Tensor;
