//! Sparsity-adaptive depth refinement.
//!
//! Refines a dense monocular depth estimate using a variable number of sparse
//! depth measurements. Measurements are propagated outward through the depth
//! map by a masked pixel-to-window attention operator, guided by features from
//! a small convolutional encoder-decoder. Everything runs on a self-contained
//! tensor engine with reverse-mode differentiation, so the whole pipeline is
//! trainable on the CPU and every gradient can be checked against finite
//! differences.
//!
//! Module map:
//! - [`tensor`], [`kernels`], [`tape`], [`params`], [`gradcheck`]: the engine.
//! - [`plane`]: depth map / sparse depth / propagation mask newtypes.
//! - [`guidance`]: guidance feature network (plus optional initial-depth head).
//! - [`propagation`]: the masked propagation step and its brute-force reference.
//! - [`pipeline`]: sparsity-adaptive scheduling and the two-layer refinement.
//! - [`objectives`]: training losses and evaluation metrics.
//! - [`datagen`]: synthetic scenes, simulated initial depths, samplers.
//! - [`trainer`]: training loop, optimizer, sparsity-sweep evaluation.
//! - [`io`]: PFM depth maps, sparse-point CSV, parameter checkpoints.

pub mod datagen;
pub mod error;
pub mod gradcheck;
pub mod guidance;
pub mod io;
pub mod kernels;
pub mod objectives;
pub mod params;
pub mod pipeline;
pub mod plane;
pub mod propagation;
pub mod tape;
pub mod tensor;
pub mod trainer;

pub use error::SdrError;
pub use plane::{DepthMap, PropagationMask, SparseDepth};
pub use tensor::{Scalar, Tensor};

/// Crate-wide result type.
pub type Result<V> = std::result::Result<V, SdrError>;
