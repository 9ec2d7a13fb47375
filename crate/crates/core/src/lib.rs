//! Fixed-point autoencoder codec for an OFDM link.
//!
//! The crate covers both halves of a learn-then-deploy workflow:
//!
//! - the *learning center*: a float-valued fully-connected encoder/decoder pair
//!   trained end to end through a simulated OFDM channel ([`autoencoder`],
//!   [`neuralnet`], [`ofdmlink`]);
//! - the *endpoint*: the same networks run on a bit-exact signed fixed-point
//!   datapath ([`fixedpoint`]) after the trained parameters are shipped as a
//!   self-checking artifact ([`paramdelivery`]).
//!
//! [`metrics`] measures what the fixed-point datapath costs: per-layer
//! implementation error, EVM, BER curves, structure sweeps and a per-layer
//! latency budget against the OFDM symbol duration.

pub mod autoencoder;
pub mod error;
pub mod fixedpoint;
pub mod metrics;
pub mod neuralnet;
pub mod ofdmlink;
pub mod paramdelivery;
pub mod seed;

pub use error::{Error, Result};
pub use fixedpoint::{FixedScalar, FixedTensor, QFormat};
pub use num_complex::Complex64;
