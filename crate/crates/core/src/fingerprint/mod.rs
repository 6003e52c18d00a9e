//! Landmark audio fingerprinting.
//!
//! A log-mel spectrogram at 40 frames per second is reduced to a sparse
//! constellation of peaks. Each peak together with its nearest usable
//! neighbours before and after it forms a signature, hashed into a 26-bit
//! key. Keys go into an inverted index; a query votes for temporal offsets
//! per indexed audio. Signatures that recur across many clips of a corpus
//! are fused into a [`DuplicateSet`] used to filter training data.

mod dedup;
mod index;
mod io;
mod keypoints;
mod mel;

pub use dedup::{build_duplicate_set, is_duplicate, DedupParams, DuplicateSet};
pub use index::{Match, Posting, SignatureIndex};
pub use io::{read_index, read_signatures, read_wav, write_index, write_signatures};
pub use keypoints::{
    extract_constellation, extract_signatures, pack_key, tolerant_keys, unpack_key, Keypoint,
    Signature, SignatureParams, KEY_BITS, TIME_FILTER_HALF_WIDTH,
};
pub use mel::{
    band_edges, hz_to_mel, mel_spectrogram, mel_to_hz, MelAnalyzer, MelSpec, FFT_SIZE,
    FRAME_RATE_HZ, F_MAX_HZ, F_MIN_HZ, LOG_FLOOR, N_BANDS,
};

use crate::error::Result;

/// Waveform to signatures with the default gaps.
pub fn fingerprint(samples: &[f32], sample_rate: u32) -> Result<Vec<Signature>> {
    let spec = mel_spectrogram(samples, sample_rate)?;
    Ok(extract_signatures(
        &extract_constellation(&spec),
        SignatureParams::default(),
    ))
}
