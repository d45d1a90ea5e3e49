//! Exploratory-iteration autocurriculum reinforcement learning.
//!
//! The crate trains small stochastic token policies with group-relative policy
//! optimization on self-improvement tasks. A learnability-prioritized task
//! buffer recycles the policy's own partial histories into new single-step
//! iteration tasks, optionally mixing in divergence steps and an
//! embedding-diversity advantage bonus.
//!
//! Module map:
//! - [`sidp`]: turns, iterates, histories, grading and shaped rewards, plus the
//!   two synthetic environments.
//! - [`policy`]: linear-softmax token policy with exact log-probabilities and
//!   closed-form gradients, and the optimizer.
//! - [`grpo`]: advantages, importance ratios, KL estimator, clipped surrogate.
//! - [`curriculum`]: the prioritized task buffer and its transforms.
//! - [`diversity`]: embeddings, centroid-distance scores, advantage scaling.
//! - [`harness`]: configuration, training loop, K-step evaluation, reports,
//!   persistence.

pub mod curriculum;
pub mod diversity;
pub mod error;
pub mod grpo;
pub mod harness;
pub mod policy;
pub mod prf;
pub mod sidp;

pub use error::{Error, Result};
