//! Meta-learned personalized reward models.
//!
//! A user's reward is a weighted combination of `K` shared base reward
//! functions evaluated on a precomputed prompt/response embedding. Training
//! learns a shared weight initialization `w0` together with the base
//! functions so that a few gradient steps on a handful of a new user's
//! preference pairs yield a good personalized reward. The outer objective can
//! be reweighted toward users whose adapted query loss is high.
//!
//! Module map:
//!
//! * [`corpus`]: preference pairs, JSON-lines ingestion, seeded splits.
//! * [`rewardnet`]: base functions (linear or one-hidden-layer tanh MLP) and
//!   the combined reward.
//! * [`btcore`]: Bradley-Terry probability and the per-user loss with its
//!   gradient and Hessian in the user weights.
//! * [`metaopt`]: inner-loop adaptation, exact and first-order meta-gradients,
//!   the outer training loop, and a finite-difference checker.
//! * [`rpo`]: quantile threshold, hard filtering and sigmoid soft reweighting
//!   of per-user losses.
//! * [`synthlab`]: synthetic populations with known ground truth.
//! * [`evalbench`]: accuracy metrics, worst-k% summaries, few-shot curves and
//!   ablation baselines.

pub mod btcore;
pub mod corpus;
mod error;
pub mod evalbench;
pub mod metaopt;
pub mod rewardnet;
pub mod rpo;
pub mod seeding;
pub mod synthlab;

pub use error::{Error, Result};
