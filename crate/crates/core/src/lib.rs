pub mod classifier;
pub mod corpus;
pub mod error;
pub mod evaluation;
pub mod fusion;
pub mod numerics;
pub mod persona;
pub mod pipeline;
pub mod seq2seq;
pub mod training;

pub use error::{Error, Result};
