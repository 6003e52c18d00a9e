use serde::{Deserialize, Serialize};

use super::StepLogits;
use crate::error::{input_err, Result};
use crate::layout::TokenGrid;

/// Per-stream weights of the training objective.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    /// `alpha[k]` for every stream; `alpha[0]` is ignored.
    pub alpha: Vec<f64>,
    pub text_weight: f64,
    /// Multiplier on first-stream targets equal to `pad_id`.
    pub pad_weight: f64,
    /// Grid id of the text PAD token, if the first stream is text.
    pub pad_id: Option<u32>,
}

impl LossWeights {
    /// Semantic levels get weight 100, acoustic levels 1.
    ///
    /// `streams` counts every stream of the grid; `q_levels` is the number of
    /// audio levels per speaker, each speaker block starting with its
    /// semantic level right after the first stream.
    pub fn for_layout(streams: usize, q_levels: usize, pad_id: Option<u32>) -> Self {
        let alpha = (0..streams)
            .map(|k| match k {
                0 => 0.0,
                k if q_levels > 0 && (k - 1) % q_levels == 0 => 100.0,
                _ => 1.0,
            })
            .collect();
        Self {
            alpha,
            text_weight: 1.0,
            pad_weight: 0.5,
            pad_id,
        }
    }

    /// Every stream weighted 1 and no PAD discount.
    pub fn uniform(streams: usize) -> Self {
        Self {
            alpha: vec![1.0; streams],
            text_weight: 1.0,
            pad_weight: 1.0,
            pad_id: None,
        }
    }

    pub(crate) fn check(&self, streams: usize) -> Result<()> {
        if self.alpha.len() != streams {
            return Err(input_err!(
                "{} stream weights for {streams} streams",
                self.alpha.len()
            ));
        }
        let all = self
            .alpha
            .iter()
            .chain([&self.text_weight, &self.pad_weight]);
        if all.clone().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(input_err!("loss weights must be finite and non-negative"));
        }
        Ok(())
    }

    pub(crate) fn first_stream_weight(&self, target: u32) -> f64 {
        if Some(target) == self.pad_id {
            self.text_weight * self.pad_weight
        } else {
            self.text_weight
        }
    }

    /// `1 / sum_{k>=1} alpha_k`, or 0 when that sum vanishes.
    pub(crate) fn rest_normalizer(&self, streams: usize) -> f64 {
        let total: f64 = self.alpha.iter().take(streams).skip(1).sum();
        if total > 0.0 {
            1.0 / total
        } else {
            0.0
        }
    }
}

fn cross_entropy(logits: &[f64], target: usize) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln() + max;
    lse - logits[target]
}

/// Weighted cross-entropy of `logits` against `grid`, averaged over steps.
pub fn loss(grid: &TokenGrid, logits: &[StepLogits], w: &LossWeights) -> Result<f64> {
    let k_streams = grid.num_streams();
    if logits.len() != grid.steps() {
        return Err(input_err!(
            "{} logit steps for a grid of {} steps",
            logits.len(),
            grid.steps()
        ));
    }
    if grid.steps() == 0 {
        return Err(input_err!("empty grid"));
    }
    w.check(k_streams)?;
    let norm = w.rest_normalizer(k_streams);
    let mut total = 0.0;
    for (s, step) in logits.iter().enumerate() {
        if step.0.len() != k_streams {
            return Err(input_err!("step {s} has logits for {} streams", step.0.len()));
        }
        for (k, l) in step.0.iter().enumerate() {
            if l.len() != grid.cardinalities()[k] {
                return Err(input_err!(
                    "step {s} stream {k}: {} logits for cardinality {}",
                    l.len(),
                    grid.cardinalities()[k]
                ));
            }
            let target = grid.get(s, k);
            let ce = cross_entropy(l, target as usize);
            total += if k == 0 {
                w.first_stream_weight(target) * ce
            } else {
                w.alpha[k] * norm * ce
            };
        }
    }
    Ok(total / grid.steps() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(rows: Vec<Vec<u32>>, cards: Vec<usize>) -> TokenGrid {
        TokenGrid::from_rows(&rows, cards).unwrap()
    }

    fn uniform_logits(steps: usize, cards: &[usize]) -> Vec<StepLogits> {
        (0..steps)
            .map(|_| StepLogits(cards.iter().map(|&n| vec![0.3; n]).collect()))
            .collect()
    }

    #[test]
    fn uniform_logits_give_log_cardinality() {
        let cards = vec![33, 17, 17, 9];
        let g = grid(vec![vec![1, 2, 3, 4], vec![5, 6, 7, 8]], cards.clone());
        let w = LossWeights {
            alpha: vec![0.0, 100.0, 1.0, 1.0],
            text_weight: 1.0,
            pad_weight: 0.5,
            pad_id: None,
        };
        let got = loss(&g, &uniform_logits(2, &cards), &w).unwrap();
        let expected = 33f64.ln() + (100.0 * 17f64.ln() + 17f64.ln() + 9f64.ln()) / 102.0;
        assert!((got - expected).abs() < 1e-12);
    }

    #[test]
    fn semantic_levels_weighted_100() {
        let w = LossWeights::for_layout(17, 8, Some(1));
        assert_eq!(w.alpha[1], 100.0);
        assert_eq!(w.alpha[9], 100.0);
        assert!(w.alpha[2..9].iter().all(|&a| a == 1.0));
        assert!(w.alpha[10..].iter().all(|&a| a == 1.0));
        assert_eq!(w.pad_weight, 0.5);
    }

    #[test]
    fn all_pad_text_halves_the_text_term() {
        let cards = vec![5, 4];
        let g = grid(vec![vec![1, 2], vec![1, 3]], cards.clone());
        let logits = uniform_logits(2, &cards);
        let mut w = LossWeights {
            alpha: vec![0.0, 0.0],
            text_weight: 1.0,
            pad_weight: 1.0,
            pad_id: Some(1),
        };
        let full = loss(&g, &logits, &w).unwrap();
        w.pad_weight = 0.5;
        let half = loss(&g, &logits, &w).unwrap();
        assert!((half - full / 2.0).abs() < 1e-12);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let cards = vec![5, 4];
        let g = grid(vec![vec![1, 2]], cards.clone());
        let w = LossWeights::uniform(2);
        assert!(loss(&g, &uniform_logits(2, &cards), &w).is_err());
        assert!(loss(&g, &uniform_logits(1, &[5, 5]), &w).is_err());
    }
}
