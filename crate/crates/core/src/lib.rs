//! Semantic multiplexing simulator.
//!
//! Several classification tasks are bound into one latent representation with
//! learnable keys, pushed through a stochastic CSI-conditioned precoder and a
//! simulated MIMO-OFDM channel, then postcoded, unbound and classified. The
//! whole chain is trained end-to-end with a variational information-bottleneck
//! objective and adapted online with communication and task-oriented pilots.

pub mod channel;
pub mod codec;
pub mod data;
pub mod diffcore;
pub mod error;
pub mod experiment;
pub mod modem;
pub mod nets;
pub mod pipeline;
pub mod vibloss;
pub mod vsa;

pub use error::{Error, Result};
