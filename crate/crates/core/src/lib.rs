//! Adversarial-attack laboratory: small CNNs, gradient attacks, feature-space
//! detectors and the hierarchical feature constraint.

// `!(x > 0.0)` style checks deliberately reject NaN along with the bad range.
#![allow(clippy::neg_cmp_op_on_partial_ord)]
// Index loops mirror the textbook forms of the linear-algebra kernels.
#![allow(clippy::needless_range_loop)]

pub mod attacks;
pub mod cli;
pub mod data;
pub mod detectors;
pub mod error;
pub mod evalkit;
pub mod hfc;
pub mod linalg;
pub mod nn;
pub mod rng;
pub mod tensor;
