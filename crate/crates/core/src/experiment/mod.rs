//! Training, evaluation and reporting built on the core library.

pub mod config;
pub mod eval;
pub mod selftest;
pub mod threshold;
pub mod train;
pub mod weights;
