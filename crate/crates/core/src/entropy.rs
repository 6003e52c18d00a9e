//! Windowed entropy of generated token streams, and a rule-based classifier
//! that flags common generation artifacts from it.

use std::collections::HashMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{input_err, Result};
use crate::layout::TokenGrid;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntropyParams {
    /// Tokens per entropy estimate.
    pub context: usize,
    /// Entropy values per classified window.
    pub window: usize,
    pub eta_flat: f64,
    pub eta_audio_silence: f64,
    pub eta_gibberish: f64,
    pub eta_noise: f64,
}

impl Default for EntropyParams {
    fn default() -> Self {
        Self {
            context: 64,
            window: 64,
            eta_flat: 1e-3,
            eta_audio_silence: 2.0,
            eta_gibberish: 3.5,
            eta_noise: 0.6,
        }
    }
}

impl EntropyParams {
    pub fn validate(&self) -> Result<()> {
        if self.context == 0 || self.window == 0 {
            return Err(input_err!("context and window must be positive"));
        }
        let etas = [
            self.eta_flat,
            self.eta_audio_silence,
            self.eta_gibberish,
            self.eta_noise,
        ];
        if etas.iter().any(|&e| !(e > 0.0) || !e.is_finite()) {
            return Err(input_err!("thresholds must be positive"));
        }
        Ok(())
    }
}

/// Shannon entropy (bits) of `tokens[s - c .. s]` for every `s` in
/// `c ..= len`; element `i` belongs to `s = c + i`.
pub fn windowed_entropy(tokens: &[u32], c: usize) -> Result<Vec<f64>> {
    if c == 0 {
        return Err(input_err!("context must be positive"));
    }
    if tokens.len() < c {
        return Err(input_err!(
            "{} tokens are fewer than the context of {c}",
            tokens.len()
        ));
    }
    // Entropy from counts: log2(c) - sum(n log2 n) / c.
    let nlogn = |n: usize| if n > 1 { n as f64 * (n as f64).log2() } else { 0.0 };
    let mut counts: HashMap<u32, usize> = HashMap::new();
    let mut acc = 0.0;
    for &t in &tokens[..c] {
        let n = counts.entry(t).or_insert(0);
        acc += nlogn(*n + 1) - nlogn(*n);
        *n += 1;
    }
    let log_c = (c as f64).log2();
    let finish = |acc: f64| (log_c - acc / c as f64).max(0.0);
    let mut out = Vec::with_capacity(tokens.len() - c + 1);
    out.push(finish(acc));
    for s in c..tokens.len() {
        let old = counts.get_mut(&tokens[s - c]).expect("token in window");
        acc += nlogn(*old - 1) - nlogn(*old);
        *old -= 1;
        let new = counts.entry(tokens[s]).or_insert(0);
        acc += nlogn(*new + 1) - nlogn(*new);
        *new += 1;
        out.push(finish(acc));
    }
    Ok(out)
}

/// Entropy trajectories of the text stream and each audio codebook.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntropySpectrum {
    pub context: usize,
    /// `streams[0]` is text, `streams[k]` audio level `k`.
    pub streams: Vec<Vec<f64>>,
}

impl EntropySpectrum {
    /// Spectrum of stream 0 and the `q_levels` streams after it.
    pub fn from_grid(grid: &TokenGrid, q_levels: usize, context: usize) -> Result<Self> {
        if q_levels == 0 || q_levels + 1 > grid.num_streams() {
            return Err(input_err!(
                "{q_levels} audio levels do not fit a {}-stream grid",
                grid.num_streams()
            ));
        }
        let streams = (0..=q_levels)
            .map(|k| windowed_entropy(&grid.column(k), context))
            .collect::<Result<_>>()?;
        Ok(Self { context, streams })
    }

    pub fn len(&self) -> usize {
        self.streams[0].len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArtifactLabel {
    Gibberish,
    NoisyAudio,
    BackgroundNoise,
    RepetitiveText,
    Silence,
    None,
}

impl ArtifactLabel {
    /// Silence is the other speaker's turn, not a defect.
    pub fn is_artifact(self) -> bool {
        !matches!(self, ArtifactLabel::Silence | ArtifactLabel::None)
    }
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        (xs[n / 2 - 1] + xs[n / 2]) / 2.0
    }
}

/// Least-squares slope of `ys` against `0, 1, ..`.
fn slope(ys: &[f64]) -> f64 {
    let n = ys.len() as f64;
    if ys.len() < 2 {
        return 0.0;
    }
    let mx = (n - 1.0) / 2.0;
    let my = mean(ys);
    let (mut sxy, mut sxx) = (0.0, 0.0);
    for (i, y) in ys.iter().enumerate() {
        let dx = i as f64 - mx;
        sxy += dx * (y - my);
        sxx += dx * dx;
    }
    sxy / sxx
}

/// Labels one window. `h_audio[q]` holds the entropies of audio level
/// `q + 1`; the first entry is the semantic level and is left out of the
/// silence median.
pub fn classify_window(h_text: &[f64], h_audio: &[Vec<f64>], p: &EntropyParams) -> ArtifactLabel {
    if h_text.is_empty() {
        return ArtifactLabel::None;
    }
    let text_mean = mean(h_text);
    if text_mean > p.eta_gibberish {
        return ArtifactLabel::Gibberish;
    }
    if h_text.iter().all(|&h| h == 0.0) {
        let acoustic: Vec<f64> = h_audio.iter().skip(1).flatten().copied().collect();
        let pool = if acoustic.is_empty() {
            h_audio.iter().flatten().copied().collect()
        } else {
            acoustic
        };
        if pool.is_empty() || median(pool) <= p.eta_audio_silence {
            return ArtifactLabel::Silence;
        }
        return ArtifactLabel::BackgroundNoise;
    }
    if slope(h_text).abs() < p.eta_flat && text_mean > 0.0 {
        return ArtifactLabel::RepetitiveText;
    }
    let means: Vec<f64> = h_audio.iter().filter(|h| !h.is_empty()).map(|h| mean(h)).collect();
    if !means.is_empty() {
        let m = mean(&means);
        let std = (means.iter().map(|x| (x - m).powi(2)).sum::<f64>() / means.len() as f64).sqrt();
        if std > p.eta_noise {
            return ArtifactLabel::NoisyAudio;
        }
    }
    ArtifactLabel::None
}

/// One classified window of the report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowLabel {
    /// First grid step `s` whose entropy is in the window.
    pub start_step: usize,
    pub label: ArtifactLabel,
}

/// Per-window labels plus category percentages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArtifactReport {
    pub windows: Vec<WindowLabel>,
    pub gibberish_pct: f64,
    pub noisy_pct: f64,
    pub background_pct: f64,
    pub repetitive_pct: f64,
    /// Artifact-free windows, silences included.
    pub no_artifacts_pct: f64,
    /// Share of windows labeled silence, already part of `no_artifacts_pct`.
    pub silence_pct: f64,
}

/// Classifies consecutive, non-overlapping windows of `p.window` entropy
/// values over stream 0 (text) and the next `q_levels` streams.
pub fn artifact_report(grid: &TokenGrid, q_levels: usize, p: &EntropyParams) -> Result<ArtifactReport> {
    p.validate()?;
    let spectrum = EntropySpectrum::from_grid(grid, q_levels, p.context)?;
    let count = spectrum.len() / p.window;
    if count == 0 {
        return Err(input_err!(
            "{} steps are too few for one window (context {} + window {} - 1)",
            grid.steps(),
            p.context,
            p.window
        ));
    }
    let windows: Vec<WindowLabel> = (0..count)
        .map(|w| {
            let r = w * p.window..(w + 1) * p.window;
            let audio: Vec<Vec<f64>> = spectrum.streams[1..]
                .iter()
                .map(|h| h[r.clone()].to_vec())
                .collect();
            WindowLabel {
                start_step: p.context + r.start,
                label: classify_window(&spectrum.streams[0][r], &audio, p),
            }
        })
        .collect();
    let pct = |f: &dyn Fn(ArtifactLabel) -> bool| {
        100.0 * windows.iter().filter(|w| f(w.label)).count() as f64 / count as f64
    };
    Ok(ArtifactReport {
        gibberish_pct: pct(&|l| l == ArtifactLabel::Gibberish),
        noisy_pct: pct(&|l| l == ArtifactLabel::NoisyAudio),
        background_pct: pct(&|l| l == ArtifactLabel::BackgroundNoise),
        repetitive_pct: pct(&|l| l == ArtifactLabel::RepetitiveText),
        no_artifacts_pct: pct(&|l| !l.is_artifact()),
        silence_pct: pct(&|l| l == ArtifactLabel::Silence),
        windows,
    })
}

impl fmt::Display for ArtifactReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let cols = [
            ("Gibberish", self.gibberish_pct),
            ("Noisy", self.noisy_pct),
            ("Background", self.background_pct),
            ("Repetitive", self.repetitive_pct),
            ("No artifacts", self.no_artifacts_pct),
        ];
        let header: Vec<String> = cols.iter().map(|(n, _)| format!("{n:>12}")).collect();
        let values: Vec<String> = cols.iter().map(|(_, v)| format!("{:>11.1}%", v)).collect();
        writeln!(f, "{}", header.join(" "))?;
        writeln!(f, "{}", values.join(" "))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn params() -> EntropyParams {
        EntropyParams::default()
    }

    #[test]
    fn entropy_of_simple_streams() {
        let constant = vec![7; 100];
        assert!(windowed_entropy(&constant, 64).unwrap().iter().all(|&h| h == 0.0));
        let alternating: Vec<u32> = (0..100).map(|i| i % 2).collect();
        let h = windowed_entropy(&alternating, 64).unwrap();
        assert_eq!(h.len(), 37);
        assert!(h.iter().all(|&x| (x - 1.0).abs() < 1e-12));
        let distinct: Vec<u32> = (0..64).collect();
        assert!((windowed_entropy(&distinct, 64).unwrap()[0] - 6.0).abs() < 1e-12);
        assert!(windowed_entropy(&distinct, 65).is_err());
    }

    #[test]
    fn classifier_examples() {
        let p = params();
        let zero = vec![0.0; 64];
        let silent_audio = vec![vec![1.5; 64]; 8];
        assert_eq!(classify_window(&zero, &silent_audio, &p), ArtifactLabel::Silence);
        let rich_audio = vec![vec![3.0; 64]; 8];
        assert_eq!(classify_window(&zero, &rich_audio, &p), ArtifactLabel::BackgroundNoise);
        assert_eq!(classify_window(&vec![4.0; 64], &rich_audio, &p), ArtifactLabel::Gibberish);
        assert_eq!(classify_window(&vec![1.2; 64], &rich_audio, &p), ArtifactLabel::RepetitiveText);
        let rising: Vec<f64> = (0..64).map(|i| 1.0 + 0.01 * i as f64).collect();
        assert_eq!(classify_window(&rising, &rich_audio, &p), ArtifactLabel::None);
        let falling: Vec<f64> = rising.iter().rev().copied().collect();
        assert_eq!(classify_window(&falling, &rich_audio, &p), ArtifactLabel::None);
        let mut uneven = vec![vec![1.0; 64]; 4];
        uneven.extend(vec![vec![3.0; 64]; 4]);
        assert_eq!(classify_window(&rising, &uneven, &p), ArtifactLabel::NoisyAudio);
    }

    #[test]
    fn silence_median_skips_the_semantic_level() {
        let p = params();
        let zero = vec![0.0; 64];
        let mut audio = vec![vec![5.0; 64]];
        audio.extend(vec![vec![1.0; 64]; 7]);
        assert_eq!(classify_window(&zero, &audio, &p), ArtifactLabel::Silence);
    }

    #[test]
    fn constant_grid_is_all_silence() {
        let grid = TokenGrid::from_rows(&vec![vec![1, 2, 3]; 300], vec![4, 4, 4]).unwrap();
        let r = artifact_report(&grid, 2, &params()).unwrap();
        assert_eq!(r.windows.len(), (300 - 64 + 1) / 64);
        assert!(r.windows.iter().all(|w| w.label == ArtifactLabel::Silence));
        assert_eq!(r.no_artifacts_pct, 100.0);
        assert_eq!(r.silence_pct, 100.0);
        let short = grid.truncated(126);
        assert!(artifact_report(&short, 2, &params()).is_err());
        let text = r.to_string();
        assert!(text.contains("Gibberish") && text.contains("No artifacts"));
    }

    proptest! {
        #[test]
        fn entropy_is_bounded(tokens in prop::collection::vec(0u32..100, 64..200), c in 1usize..64) {
            let max = (c as f64).log2() + 1e-12;
            for h in windowed_entropy(&tokens, c).unwrap() {
                prop_assert!((-1e-12..=max).contains(&h));
            }
        }

        #[test]
        fn entropy_ignores_order(mut tokens in prop::collection::vec(0u32..20, 32), seed: u64) {
            let a = windowed_entropy(&tokens, 32).unwrap()[0];
            let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(seed);
            rand::seq::SliceRandom::shuffle(tokens.as_mut_slice(), &mut rng);
            let b = windowed_entropy(&tokens, 32).unwrap()[0];
            prop_assert!((a - b).abs() < 1e-9);
        }

        #[test]
        fn every_window_gets_one_label(
            text in prop::collection::vec(0.0f64..6.0, 1..80),
            audio in prop::collection::vec(prop::collection::vec(0.0f64..6.0, 1..80), 0..9),
        ) {
            // Total function: never panics for any finite input.
            let _ = classify_window(&text, &audio, &EntropyParams::default());
        }
    }
}
