//! A small, deterministic, single-threaded autodiff engine for 2D
//! convolutional networks.
//!
//! Graphs are recorded on a [`Tape`] during the forward pass. Losses are
//! evaluated outside the tape: callers compute the loss value and its
//! gradient with respect to a network output themselves, then seed
//! [`Tape::backward`] with that gradient. Parameter gradients are
//! accumulated into a [`ParamStore`] and consumed by [`Adam`].

mod conv;
mod error;
mod layers;
mod optim;
mod params;
mod tape;
mod tensor;

pub use error::NnError;
pub use layers::{Conv2d, Conv2dConfig};
pub use optim::{Adam, AdamConfig};
pub use params::{ParamId, ParamStore};
pub use tape::{Grads, Tape, Var};
pub use tensor::Tensor;

pub type Result<T> = std::result::Result<T, NnError>;
