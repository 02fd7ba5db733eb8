//! Training engine for feed-forward networks whose layer widths grow during
//! training and can be pruned back afterwards.
//!
//! The crate is organized bottom-up:
//!
//! - [`tensor`]: dense row-major tensors, convolution and matmul kernels.
//! - [`rng`]: seeded deterministic random source used everywhere.
//! - [`arch`]: declarative layer specs, shape checking, the all-conv
//!   transform.
//! - [`net`]: parameter storage, initialization, forward/backward passes.
//! - [`optim`]: SGD with momentum, Nesterov lookahead, weight decay and a
//!   stepwise learning-rate schedule.
//! - [`metrics`]: per-feature importance scores (weight drift from
//!   initialization, L1 norm, mean activation).
//! - [`data`]: IDX image loading, normalization, augmentation and a synthetic
//!   oriented-grating task generator.
//! - [`train`]: the plain mini-batch training loop.
//! - [`expand`]: width expansion driven by the drift metric.
//! - [`prune`]: importance-ordered feature removal and loss curves.

pub mod arch;
pub mod data;
pub mod error;
pub mod expand;
pub mod metrics;
pub mod net;
pub mod optim;
pub mod prune;
pub mod rng;
pub mod tensor;
pub mod train;

pub use arch::{ArchSpec, LayerKind, LayerSpec};
pub use error::{Error, Result};
pub use net::ParamStore;
pub use rng::Rng;
pub use tensor::Tensor;
