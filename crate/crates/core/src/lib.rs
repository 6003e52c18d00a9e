//! Token-plane machinery for full-duplex speech-text dialogue models.
//!
//! The crate covers everything that happens between an audio codec's latent
//! space and a hierarchical token model:
//!
//! - [`rvq`]: plain, residual and split residual vector quantization.
//! - [`alignment`]: frame-aligned text streams with `PAD`/`EPAD` tokens.
//! - [`layout`]: delay patterns, the joint multi-stream grid and latency arithmetic.
//! - [`rqt`]: a toy temporal/depth transformer with its weighted loss.
//! - [`duplex`]: streaming dialogue, ASR and TTS inference on top of [`rqt`].
//! - [`entropy`]: windowed entropy spectra and artifact classification.
//! - [`fingerprint`]: constellation hashing, retrieval and deduplication.

pub mod alignment;
pub mod binio;
pub mod duplex;
pub mod entropy;
mod error;
pub mod fingerprint;
pub mod layout;
pub mod rqt;
pub mod rvq;

pub use error::{Error, Result};

/// Frames per second of the token grid.
pub const FRAME_RATE_HZ: f64 = 12.5;

/// Duration of one grid step in milliseconds.
pub const FRAME_MS: u32 = 80;
