//! Learned controllers whose every output satisfies high-order control
//! barrier function constraints. Each head is a network feeding a
//! differentiable QP safety layer; heads are fused by a convex combination,
//! which keeps the fused control safe.
//!
//! Pipeline: [`expert`] generates labelled data, [`abnet`] trains and fuses
//! heads, [`harness`] runs closed-loop benchmarks under observation noise.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod abnet;
pub mod barriernet;
pub mod baseline;
pub mod data;
pub mod dynamics;
pub mod expert;
pub mod harness;
pub mod hocbf;
pub mod nn;
pub mod qp;
pub mod rng;
pub mod task;
