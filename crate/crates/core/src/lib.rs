//! Long- and session-based top-n movie recommendation: matrix factorization
//! profiles, LSTM session dynamics, four MF/RNN mixture scorers and an
//! adversarial generator/discriminator trainer driven by policy gradient.

pub mod adversarial;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod mf;
pub mod mixture;
pub mod nn;
pub mod pipeline;
pub mod rnn;
pub mod synthetic;

pub use error::{Error, Result};
