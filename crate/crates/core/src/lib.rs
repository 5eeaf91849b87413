//! Constrained decoding by distribution-preserving logit exclusion.
//!
//! Two ways to forbid a set of tokens `B` are implemented side by side:
//!
//! * [`processors::naive_mask`] sets banned logits to `-inf` and leaves the
//!   rest untouched;
//! * [`processors::gidle_process`] rewrites every allowed logit to
//!   `ln P(i) - ln Z`, where `Z` is the original mass outside `B`, so the
//!   output vector holds the exact log-probabilities of the KL-closest
//!   distribution supported on the allowed tokens.
//!
//! Around them sit log-space kernels ([`numerics`]), ban-set construction from
//! Unicode script classes ([`vocab`]), exactly computable toy models
//! ([`toylm`]), a seeded generation loop ([`decode`]) and an experiment harness
//! that reports per-arm score mean/variance and per-step distortion
//! ([`diagnostics`]).

pub mod decode;
pub mod diagnostics;
pub mod error;
pub mod numerics;
pub mod processors;
pub mod toylm;
pub mod vocab;

pub use error::{Error, Result};

/// Token index into a [`vocab::Vocabulary`].
pub type TokenId = u32;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
