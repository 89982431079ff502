//! Desk-scale workbench for zeroth-order differentiable architecture search.
//!
//! The crate is layered bottom-up:
//!
//! - [`tensor`], [`kernels`], [`autodiff`], [`optim`]: a minimal
//!   double-precision reverse-mode engine with exactly the operations a
//!   cell-based supernet needs.
//! - [`simplex`]: softmax, sparsemax and the annealed sparsemax.
//! - [`supernet`]: stages of NAS-Bench-201 style cells with mixed edges,
//!   kernel-variable convolutions and depth-variable stage outputs, plus
//!   expected parameter accounting.
//! - [`search`]: the bilevel driver with a surrogate network and a
//!   zeroth-order hypergradient, and [`bilevel`] analytic test problems.
//! - [`eval`]: architecture sampling, retraining with discard rules,
//!   size-tier derivation and evaluation campaigns.
//! - [`data`], [`checkpoint`], [`config`], [`trace`]: persistence and I/O.

pub mod autodiff;
pub mod bilevel;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod eval;
pub mod error;
pub mod kernels;
pub mod optim;
pub mod search;
pub mod simplex;
pub mod supernet;
pub mod tensor;
pub mod trace;

pub use error::{Error, Result};
