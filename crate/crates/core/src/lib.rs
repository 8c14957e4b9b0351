//! Concept identifiability toolkit.
//!
//! Generates data from a class-conditional latent concept process, fits a
//! sparsity-regularized maximum-likelihood flow estimator, and measures how
//! well concepts, concept blocks, and the class-concept structure are
//! recovered.

pub mod cli;
pub mod numerics;
pub mod estimator;
pub mod eval;
pub mod flow;
pub mod genmodel;
pub mod oracle;
pub mod structure;
