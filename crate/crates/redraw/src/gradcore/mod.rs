//! Reverse-mode autodiff on a flat tape, plus the parameter plumbing the rest
//! of the crate trains with: named/grouped parameter store, Adam, MLP helper,
//! purpose-keyed RNG streams, and a finite-difference gradient audit.

mod adam;
mod array;
mod check;
mod graph;
mod mlp;
mod params;
mod rng;

pub use adam::Adam;
pub use array::Array;
pub use check::finite_diff_check;
pub use graph::{Gradients, Graph, NodeId};
pub use mlp::Mlp;
pub use params::{clip_global_norm, Binder, ParamEntry, ParameterStore};
pub use rng::{RngStream, StreamId};
