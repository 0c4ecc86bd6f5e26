//! Cross-utterance contextual conformer-transducer speech recognition at
//! desk scale: a small reverse-mode tensor library, the encoder, predictor
//! and joint network, frame-level and attention-pooled context, and the
//! data, training, evaluation and benchmark harness around them.

pub mod context;
pub mod data;
pub mod encoder;
pub mod error;
pub mod harness;
pub mod numerics;
pub mod predictor;
pub mod transducer;

pub use error::{Error, Result};
