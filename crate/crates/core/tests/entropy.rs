use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tokenplane::entropy::{artifact_report, windowed_entropy, ArtifactLabel, EntropyParams};
use tokenplane::layout::TokenGrid;

fn naive_entropy(window: &[u32]) -> f64 {
    let mut counts = HashMap::new();
    for &t in window {
        *counts.entry(t).or_insert(0usize) += 1;
    }
    let n = window.len() as f64;
    -counts
        .values()
        .map(|&c| {
            let p = c as f64 / n;
            p * p.log2()
        })
        .sum::<f64>()
}

#[test]
fn sliding_entropy_matches_direct_count() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let tokens: Vec<u32> = (0..500)
        .map(|_| {
            let vocab = rng.gen_range(2..40);
            rng.gen_range(0..vocab)
        })
        .collect();
    for c in [1, 7, 64, 128] {
        let h = windowed_entropy(&tokens, c).unwrap();
        assert_eq!(h.len(), tokens.len() - c + 1);
        for (i, &x) in h.iter().enumerate() {
            assert!((x - naive_entropy(&tokens[i..i + c])).abs() < 1e-9);
        }
    }
}

/// Text whose vocabulary widens over every 64 steps, so its entropy keeps
/// rising within each window.
fn lively_text(len: usize, rng: &mut ChaCha8Rng) -> Vec<u32> {
    (0..len)
        .map(|i| {
            let vocab = 2 + (i % 64) as u32 / 6;
            rng.gen_range(1..=vocab)
        })
        .collect()
}

#[test]
fn planted_gibberish_window_is_flagged() {
    let p = EntropyParams {
        context: 16,
        ..EntropyParams::default()
    };
    let windows = 6;
    let steps = p.context - 1 + windows * p.window;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut text = lively_text(steps, &mut rng);
    // Window 3 holds entropies for steps s in [c + 3w, c + 4w), which read
    // tokens [s - c, s).
    let planted = 3;
    let start = p.window * planted;
    for t in &mut text[start..start + p.window + p.context - 1] {
        *t = rng.gen_range(100..400);
    }
    let q = 4;
    let rows: Vec<Vec<u32>> = (0..steps)
        .map(|s| {
            let mut row = vec![text[s]];
            row.extend((0..q).map(|_| rng.gen_range(1..12)));
            row
        })
        .collect();
    let grid = TokenGrid::from_rows(&rows, vec![400, 12, 12, 12, 12]).unwrap();
    let report = artifact_report(&grid, q, &p).unwrap();
    assert_eq!(report.windows.len(), windows);
    for (i, w) in report.windows.iter().enumerate() {
        let expected = if i == planted {
            ArtifactLabel::Gibberish
        } else {
            ArtifactLabel::None
        };
        assert_eq!(w.label, expected, "window {i}");
        assert_eq!(w.start_step, p.context + i * p.window);
    }
    let total = report.gibberish_pct
        + report.noisy_pct
        + report.background_pct
        + report.repetitive_pct
        + report.no_artifacts_pct;
    assert!((total - 100.0).abs() < 1e-9);
    assert!((report.gibberish_pct - 100.0 / 6.0).abs() < 1e-9);
}

#[test]
fn silence_degrading_into_background_noise() {
    let p = EntropyParams::default();
    let steps = 63 + 4 * 64;
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let rows: Vec<Vec<u32>> = (0..steps)
        .map(|s| {
            // Audio vocabulary widens over time while text stays PAD.
            let width = if s < 63 + 128 { 3 } else { 60 };
            let mut row = vec![1];
            row.extend((0..8).map(|_| rng.gen_range(1..=width)));
            row
        })
        .collect();
    let grid = TokenGrid::from_rows(&rows, [vec![4], vec![64; 8]].concat()).unwrap();
    let labels: Vec<ArtifactLabel> = artifact_report(&grid, 8, &p)
        .unwrap()
        .windows
        .iter()
        .map(|w| w.label)
        .collect();
    assert_eq!(labels[0], ArtifactLabel::Silence);
    assert_eq!(labels[3], ArtifactLabel::BackgroundNoise);
}
