//! Attention-based encoder-decoder.

pub mod attention;
pub mod config;
pub mod generate;
pub mod gru;
pub mod model;
pub mod vocab;

pub use config::{DecodingScheme, ModelConfig, Variant};
pub use generate::{Generated, Strategy};
pub use model::{BatchLoss, DecodeContext, Encoded, PersonaModel, StepOutput, TrainPair};
pub use vocab::Vocabulary;
