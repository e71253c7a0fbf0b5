//! Multi-modal unsupervised domain adaptation on pre-extracted clip features.
//!
//! The crate bundles a small reverse-mode autodiff engine ([`tensor`]), a
//! finite-difference checker ([`gradcheck`]), the adaptation losses
//! ([`losses`]), per-stream temporal models with adversarial domain heads
//! ([`models`]), a seeded synthetic multi-domain dataset ([`data`]) and the
//! training and evaluation driver ([`trainer`]).

// `!(x >= 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod data;
pub mod gradcheck;
pub mod losses;
pub mod models;
pub mod tensor;
pub mod trainer;

pub use tensor::{Graph, Tensor, TensorError, Var};
