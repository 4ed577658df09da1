//! World-model agents with categorical latents, plus a residual mechanism for
//! adapting a frozen model's dynamics to a shifted environment from a small
//! reward-free dataset.
//!
//! Layout:
//! - [`gradcore`]: reverse-mode autodiff tape, parameter store, Adam.
//! - [`envs`]: three toy control tasks, each with a source and a shifted
//!   target variant, plus scripted experts.
//! - [`draw`]: the world model (encoder, forward dynamics, decoder/reward/
//!   continue heads) and its training loss.
//! - [`adapt`]: residual dynamics correction and the baseline adaptation
//!   modes it is compared against.
//! - [`agent`]: actor-critic trained on imagined rollouts.
//! - [`explore`]: ensemble-disagreement intrinsic reward and the explorer
//!   policy trained on it.
//! - [`harness`]: replay buffer, file formats, training/eval phases, CLI
//!   entry points.

pub mod adapt;
pub mod agent;
pub mod draw;
pub mod envs;
pub mod error;
pub mod explore;
pub mod gradcore;
pub mod harness;

pub use error::{Error, Result};
