//! Numerical core for text-controlled selective state-space grounding models.
//!
//! The crate is organized bottom-up:
//!
//! * [`tensor`], [`tape`], [`gradcheck`]: dense tensors and tape-based
//!   reverse-mode differentiation.
//! * [`ssm`]: zero-order-hold discretization, sequential/parallel scans and
//!   the time-invariant convolution form.
//! * [`selective`]: input- and query-dependent selection with a fused scan
//!   kernel that has its own backward pass.
//! * [`graph`]: skeleton graphs and the adaptive graph convolution that
//!   produces relational embeddings.
//! * [`model`]: the stacked bidirectional block network, its frame-score head
//!   and loss, plus the attention and recurrent baselines in [`baselines`].
//! * [`params`] and [`checkpoint`]: named parameter stores and their on-disk
//!   format.

pub mod baselines;
pub mod checkpoint;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod model;
pub mod params;
pub mod real;
pub mod selective;
pub mod ssm;
pub mod tape;
pub mod tensor;

pub use error::{Error, Result};
pub use real::{DType, Real};
pub use tape::{Tape, Var};
pub use tensor::Tensor;
