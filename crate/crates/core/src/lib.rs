//! Discriminative event forecasting on temporal knowledge graphs.
//!
//! The crate trains a model that answers queries of the form "which entity
//! completes the event (subject, relation, ?) at a future time t" over a
//! history of timestamped (subject, relation, object, time) facts. It is
//! organized as:
//!
//! * [`tensor`], [`tape`], [`adam`]: a small dense f64 tensor type, a
//!   define-by-run reverse-mode differentiation tape, and an ADAM optimizer.
//! * [`data`], [`graph`]: dataset loading, synthetic generators, and the
//!   snapshot graph that arranges history into fixed time windows.
//! * [`encoder`], [`seqhead`], [`decoder`]: the attention-based graph
//!   encoder producing per-snapshot entity embeddings, the sequence heads
//!   that extrapolate an embedding series to a future time, and the scoring
//!   decoder with its optional copy branch.
//! * [`train`], [`eval`]: the training loop and the filtered ranking
//!   metrics.
//! * [`config`], [`cli`]: run configuration and the command-line front end.
//!
//! Everything is deterministic given a seed: computation is single-threaded
//! and every iteration order over model state is fixed.

pub mod adam;
pub mod cli;
pub mod config;
pub mod data;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod graph;
pub mod model;
pub mod nn;
pub mod params;
pub mod query;
pub mod seqhead;
pub mod tape;
pub mod tensor;
pub mod train;

pub use cli::run;
pub use error::{Error, Result};
pub use params::{ParamId, ParamStore};
pub use tape::{Tape, Var};
pub use tensor::Tensor;
