//! PRformer: pyramidal RNN embeddings of each variable's lookback window,
//! mixed across variables by a Transformer encoder, on a small reverse-mode
//! autodiff engine.
//!
//! Start with [`config::RunConfig`] and [`train::run_training`]; the guide in
//! `book/` walks through the model piece by piece.

pub mod analysis;
pub mod config;
pub mod data;
pub mod encoder;
pub mod error;
pub mod model;
pub mod nn;
pub mod params;
pub mod pre;
pub mod revin;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/pyramid.md")]
    mod pyramid {}
    #[doc = include_str!("../../../book/src/embedding.md")]
    mod embedding {}
    #[doc = include_str!("../../../book/src/encoder.md")]
    mod encoder {}
    #[doc = include_str!("../../../book/src/revin.md")]
    mod revin {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/positional-encoding.md")]
    mod positional_encoding {}
    #[doc = include_str!("../../../book/src/scaling.md")]
    mod scaling {}
    #[doc = include_str!("../../../book/src/ablations.md")]
    mod ablations {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
