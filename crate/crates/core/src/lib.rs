pub mod adapt;
pub mod artifact;
pub mod autoencoder;
pub mod data;
pub mod error;
pub mod multitask;
pub mod eval;
pub mod numerics;
pub mod rnn;
pub mod train;

pub use error::{Error, Result};

#[cfg(doctest)]
mod guide {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/gru.md")]
    mod gru {}
    #[doc = include_str!("../../../book/src/autoencoder.md")]
    mod autoencoder {}
    #[doc = include_str!("../../../book/src/linear.md")]
    mod linear {}
    #[doc = include_str!("../../../book/src/multitask.md")]
    mod multitask {}
    #[doc = include_str!("../../../book/src/evaluation.md")]
    mod evaluation {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
