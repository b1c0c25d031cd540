//! Unsupervised anomaly scoring of network flows.
//!
//! Flows are turned into tokens ([`tokenize`]), grouped into hourly
//! per-endpoint sequences ([`aggregate`]) and scored by a token-frequency
//! baseline ([`freq_model`]) or a bidirectional LSTM next-token model
//! ([`lstm_model`], built on [`nn`]). [`eval`] measures the scores against
//! labels, [`pipeline`] runs it all from files, and [`synth`] generates
//! labelled test data.
//!
//! ```
//! use flowseq::freq_model::FrequencyModel;
//! use flowseq::tokenize::{build_vocab, protobyte_token, Protocol};
//!
//! let train = [protobyte_token(Protocol(6), 1500), protobyte_token(Protocol(6), 1400)];
//! let vocab = build_vocab(&train).unwrap();
//! let model = FrequencyModel::fit(train.iter().map(|t| vocab.encode(t))).unwrap();
//! assert_eq!(model.score(vocab.encode("TCP:10")), -1.0);
//! assert_eq!(model.score(vocab.encode("UDP:03")), 0.0);
//! ```

pub mod aggregate;
pub mod error;
pub mod eval;
pub mod freq_model;
pub mod ingest;
pub mod lstm_model;
pub mod nn;
pub mod pipeline;
pub mod synth;
pub mod tokenize;

pub use error::{Error, Result};

// The guide's code blocks run as doc tests.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/intro.md")]
    mod intro {}
    #[doc = include_str!("../../../book/src/ingest.md")]
    mod ingest {}
    #[doc = include_str!("../../../book/src/tokens.md")]
    mod tokens {}
    #[doc = include_str!("../../../book/src/aggregation.md")]
    mod aggregation {}
    #[doc = include_str!("../../../book/src/frequency.md")]
    mod frequency {}
    #[doc = include_str!("../../../book/src/lstm.md")]
    mod lstm {}
    #[doc = include_str!("../../../book/src/evaluation.md")]
    mod evaluation {}
    #[doc = include_str!("../../../book/src/pipeline.md")]
    mod pipeline {}
}
