//! Two-head adversarially trained encoder.
//!
//! A robust encoder is trained under PGD/FGSM perturbations with two output
//! heads: a classification head (plain or cosine-normalized cross-entropy)
//! and a feature head aligned contrastively to a frozen naturally trained
//! encoder, with negatives drawn from a FIFO memory bank. The crate also
//! ships the evaluation side: softmax and nearest-neighbor defenses,
//! divergence diagnostics, and loss-surface grids, all bit-reproducible from
//! a seed.

pub mod attack;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod defense;
pub mod error;
pub mod losses;
pub mod membank;
pub mod model;
pub mod numerics;
pub mod surface;
pub mod training;

pub use cli::cli_main;
pub use error::{Error, Result};
