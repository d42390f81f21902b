//! Probabilistic latent variable models for count matrices: the
//! Dirichlet-multinomial mixture, LDA, the dynamic unigram model and
//! gamma-Poisson factorization, with simulation, inference, alignment and
//! posterior predictive checks.

pub mod align;
pub mod cli;
pub mod corpus;
pub mod error;
pub mod gap;
pub mod inference;
pub mod lda;
pub mod numeric;
pub mod ppc;
pub mod report;
pub mod simstudy;
pub mod unigram;

pub use error::{Error, Result};
