use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::StepLogits;
use crate::error::{input_err, Error, Result};

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Seed for the draw of `stream` at `step`, so that every token of a session
/// is reproducible on its own.
pub fn derive_seed(base: u64, step: usize, stream: usize) -> u64 {
    splitmix(splitmix(splitmix(base) ^ step as u64) ^ stream as u64)
}

/// Draws one token. Temperature 0 is greedy with the lowest index winning
/// ties.
pub fn sample_token<R: Rng>(logits: &[f64], temperature: f64, rng: &mut R) -> Result<u32> {
    if !(temperature >= 0.0) || !temperature.is_finite() {
        return Err(input_err!("temperature must be finite and >= 0, got {temperature}"));
    }
    if logits.is_empty() {
        return Err(input_err!("empty logits"));
    }
    if logits.iter().any(|l| l.is_nan()) {
        return Err(Error::Numeric("NaN in logits".into()));
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if temperature == 0.0 || max == f64::INFINITY {
        let i = logits.iter().position(|&l| l == max).expect("max present");
        return Ok(i as u32);
    }
    let weights: Vec<f64> = logits.iter().map(|l| ((l - max) / temperature).exp()).collect();
    let total: f64 = weights.iter().sum();
    if !(total > 0.0) || !total.is_finite() {
        return Err(Error::Numeric("degenerate softmax".into()));
    }
    let mut u = rng.gen::<f64>() * total;
    for (i, w) in weights.iter().enumerate() {
        if u < *w {
            return Ok(i as u32);
        }
        u -= w;
    }
    // Rounding can leave `u` just past the last positive weight.
    let last = weights.iter().rposition(|&w| w > 0.0).expect("positive total");
    Ok(last as u32)
}

/// Draws one token per stream, stream `k` seeded by `derive_seed(seed, 0, k)`.
pub fn sample_step(logits: &StepLogits, temperature: f64, seed: u64) -> Result<Vec<u32>> {
    logits
        .0
        .iter()
        .enumerate()
        .map(|(k, l)| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0, k));
            sample_token(l, temperature, &mut rng)
        })
        .collect()
}
