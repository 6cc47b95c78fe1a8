//! The chapters of the book, compiled here so their examples run as
//! doc-tests against the current library.

#[doc = include_str!("../../../book/src/introduction.md")]
pub mod introduction {}

#[doc = include_str!("../../../book/src/data.md")]
pub mod data {}

#[doc = include_str!("../../../book/src/reward-model.md")]
pub mod reward_model {}

#[doc = include_str!("../../../book/src/bradley-terry.md")]
pub mod bradley_terry {}

#[doc = include_str!("../../../book/src/meta-training.md")]
pub mod meta_training {}

#[doc = include_str!("../../../book/src/robust-aggregation.md")]
pub mod robust_aggregation {}

#[doc = include_str!("../../../book/src/synthetic.md")]
pub mod synthetic {}

#[doc = include_str!("../../../book/src/evaluation.md")]
pub mod evaluation {}

#[doc = include_str!("../../../book/src/cli.md")]
pub mod cli {}
