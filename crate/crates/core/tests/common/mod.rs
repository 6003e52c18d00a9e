//! Fixtures shared by the integration tests.
#![allow(dead_code)]

pub mod stubs;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use tokenplane::fingerprint::{fingerprint, Signature};

pub const SAMPLE_RATE: u32 = 16_000;
pub const HOP: usize = 400;

/// Random tone bursts over faint white noise.
pub fn tone_events(seconds: f64, seed: u64) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = (seconds * SAMPLE_RATE as f64) as usize;
    let mut out: Vec<f32> = (0..n).map(|_| rng.gen_range(-0.01..0.01)).collect();
    let mut t = 0usize;
    loop {
        t += rng.gen_range(0.06..0.25f64).mul_add(SAMPLE_RATE as f64, 0.0) as usize;
        if t >= n {
            break;
        }
        let freq = (rng.gen_range(250f64.ln()..2800f64.ln())).exp();
        let len = (rng.gen_range(0.05..0.25) * SAMPLE_RATE as f64) as usize;
        let amp = rng.gen_range(0.1..0.5);
        let phase = rng.gen_range(0.0..std::f64::consts::TAU);
        for i in 0..len.min(n - t) {
            let env = (std::f64::consts::PI * i as f64 / len as f64).sin();
            let w = std::f64::consts::TAU * freq * i as f64 / SAMPLE_RATE as f64 + phase;
            out[t + i] += (amp * env * w.sin()) as f32;
        }
    }
    out
}

pub struct Corpus {
    pub clips: Vec<Vec<f32>>,
    /// `(clip, frame offset)` of every planted copy.
    pub planted: Vec<(usize, usize)>,
}

/// `count` clips of `seconds`, with one `segment_seconds` excerpt planted
/// at frame-aligned offsets in `copies` of them.
pub fn planted_corpus(count: usize, seconds: f64, segment_seconds: f64, copies: usize, seed: u64) -> Corpus {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut clips: Vec<Vec<f32>> = (0..count)
        .into_par_iter()
        .map(|i| tone_events(seconds, seed.wrapping_mul(1000).wrapping_add(i as u64 + 1)))
        .collect();
    let segment = tone_events(segment_seconds, seed ^ 0xdead_beef);
    let total_frames = clips[0].len() / HOP;
    let seg_frames = segment.len() / HOP;
    let mut ids: Vec<usize> = (0..count).collect();
    rand::seq::SliceRandom::shuffle(ids.as_mut_slice(), &mut rng);
    let mut planted = Vec::new();
    for &c in ids.iter().take(copies) {
        let frame = rng.gen_range(0..=total_frames - seg_frames);
        let start = frame * HOP;
        clips[c][start..start + segment.len()].copy_from_slice(&segment);
        planted.push((c, frame));
    }
    planted.sort();
    Corpus { clips, planted }
}

pub fn signatures(clips: &[Vec<f32>]) -> Vec<Vec<Signature>> {
    clips
        .par_iter()
        .map(|c| fingerprint(c, SAMPLE_RATE).unwrap())
        .collect()
}
