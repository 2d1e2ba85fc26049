//! Closed-loop bidirectional prompting for adversarially robust few-class
//! classification with a frozen dual-encoder model.

pub mod aggregate;
pub mod analysis;
pub mod attack;
pub mod cli;
pub mod closed_loop;
pub mod data;
pub mod error;
pub mod eval;
pub mod model;
pub mod optim;
pub mod persist;
pub mod pipeline;
pub mod seed;
pub mod train;
pub mod tensor;

pub use error::{Error, Result};
