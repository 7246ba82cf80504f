//! Runs every code block of the guide in `book/` as a doc-test, so the
//! book cannot drift from the library. One module per chapter.
#![doc = include_str!("../../../book/src/introduction.md")]

#[doc = include_str!("../../../book/src/getting-started.md")]
pub mod getting_started {}

#[doc = include_str!("../../../book/src/data.md")]
pub mod data {}

#[doc = include_str!("../../../book/src/history-graph.md")]
pub mod history_graph {}

#[doc = include_str!("../../../book/src/autodiff.md")]
pub mod autodiff {}

#[doc = include_str!("../../../book/src/encoder.md")]
pub mod encoder {}

#[doc = include_str!("../../../book/src/sequence-heads.md")]
pub mod sequence_heads {}

#[doc = include_str!("../../../book/src/decoder.md")]
pub mod decoder {}

#[doc = include_str!("../../../book/src/training.md")]
pub mod training {}

#[doc = include_str!("../../../book/src/evaluation.md")]
pub mod evaluation {}

#[doc = include_str!("../../../book/src/checkpoints.md")]
pub mod checkpoints {}

#[doc = include_str!("../../../book/src/cli.md")]
pub mod cli {}
