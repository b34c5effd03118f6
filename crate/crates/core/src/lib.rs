//! EEG-to-text translation with a BiLSTM encoder, a ReLU projection and a
//! transformer encoder-decoder, trained in two stages and evaluated with
//! BLEU/ROUGE/WER/CER in teacher-forced and free-running modes.

pub mod data;
pub mod decoding;
pub mod error;
pub mod layers;
pub mod metrics;
pub mod model;
pub mod params;
pub mod pipeline;
pub mod report;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
