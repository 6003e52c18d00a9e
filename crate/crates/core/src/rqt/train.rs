//! Adam training on small synthetic token grids.

use std::collections::BTreeMap;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::autodiff::Graph;
use super::loss::LossWeights;
use super::model::RqtModel;
use crate::error::{input_err, Result};
use crate::layout::{apply_stream_delays, TokenGrid, INITIAL_ID};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 3e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam state for every parameter of one model.
#[derive(Debug, Clone)]
pub struct Adam {
    cfg: AdamConfig,
    m: BTreeMap<String, Array2<f64>>,
    v: BTreeMap<String, Array2<f64>>,
    t: i32,
}

impl Adam {
    pub fn new(cfg: AdamConfig) -> Self {
        Self {
            cfg,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
            t: 0,
        }
    }

    pub fn step(&mut self, model: &mut RqtModel, grads: &BTreeMap<String, Array2<f64>>) {
        self.t += 1;
        let c = self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.t);
        let bc2 = 1.0 - c.beta2.powi(self.t);
        for (name, p) in model.params_mut().iter_mut() {
            let Some(g) = grads.get(name) else { continue };
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| Array2::zeros(g.raw_dim()));
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| Array2::zeros(g.raw_dim()));
            ndarray::Zip::from(p)
                .and(m)
                .and(v)
                .and(g)
                .for_each(|p, m, v, &g| {
                    *m = c.beta1 * *m + (1.0 - c.beta1) * g;
                    *v = c.beta2 * *v + (1.0 - c.beta2) * g * g;
                    *p -= c.lr * (*m / bc1) / ((*v / bc2).sqrt() + c.eps);
                });
        }
    }
}

/// Loss and gradient of every parameter on one batch of equally long grids.
pub fn loss_and_grads(
    model: &RqtModel,
    batch: &[&TokenGrid],
    weights: &LossWeights,
) -> Result<(f64, BTreeMap<String, Array2<f64>>)> {
    let mut g = Graph::new();
    let vars = model.graph_params(&mut g);
    let loss = model.graph_loss(&mut g, &vars, batch, weights)?;
    g.backward(loss);
    let grads = vars
        .iter()
        .map(|(name, &v)| {
            let grad = g
                .grad(v)
                .cloned()
                .unwrap_or_else(|| Array2::zeros(g.value(v).raw_dim()));
            (name.clone(), grad)
        })
        .collect();
    Ok((g.scalar(loss), grads))
}

/// Batch loss, without gradients.
pub fn batch_loss(model: &RqtModel, batch: &[&TokenGrid], weights: &LossWeights) -> Result<f64> {
    let mut g = Graph::new();
    let vars = model.graph_params(&mut g);
    let loss = model.graph_loss(&mut g, &vars, batch, weights)?;
    Ok(g.scalar(loss))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 300,
            batch_size: 4,
            adam: AdamConfig::default(),
            seed: 0,
        }
    }
}

/// Trains on minibatches drawn from `data`; returns the loss of every step.
pub fn train(
    model: &mut RqtModel,
    data: &[TokenGrid],
    weights: &LossWeights,
    cfg: &TrainConfig,
) -> Result<Vec<f64>> {
    if data.is_empty() || cfg.batch_size == 0 {
        return Err(input_err!("need data and a positive batch size"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(cfg.adam);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut cursor = order.len();
    let mut losses = Vec::with_capacity(cfg.steps);
    for _ in 0..cfg.steps {
        let mut batch = Vec::with_capacity(cfg.batch_size);
        while batch.len() < cfg.batch_size.min(data.len()) {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push(&data[order[cursor]]);
            cursor += 1;
        }
        let (loss, grads) = loss_and_grads(model, &batch, weights)?;
        adam.step(model, &grads);
        losses.push(loss);
    }
    Ok(losses)
}

/// Fraction of tokens in `streams` that the greedy teacher-forced
/// prediction gets right.
pub fn accuracy(model: &RqtModel, grids: &[TokenGrid], streams: &[usize]) -> Result<f64> {
    let mut hits = 0usize;
    let mut total = 0usize;
    for grid in grids {
        for (s, step) in model.forward_grid(grid)?.iter().enumerate() {
            for &k in streams {
                let l = &step.0[k];
                let best = l
                    .iter()
                    .enumerate()
                    .fold(0, |b, (i, &x)| if x > l[b] { i } else { b });
                hits += usize::from(best as u32 == grid.get(s, k));
                total += 1;
            }
        }
    }
    Ok(hits as f64 / total.max(1) as f64)
}

/// Deterministic toy tasks for exercising the model.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SyntheticTask {
    /// Stream 0 is random; every other stream repeats stream 0 of the
    /// previous step.
    CopyPrevious,
    /// Four audio-like streams `a, b, f(b), g(f(b), a)` with delays
    /// `[0, 2, 2, 2]`, so two streams depend on tokens of their own step.
    IntraStep,
}

impl SyntheticTask {
    pub fn streams(self) -> usize {
        match self {
            SyntheticTask::CopyPrevious => 4,
            SyntheticTask::IntraStep => 4,
        }
    }

    /// Streams whose tokens are fully determined by the context.
    pub fn predictable_streams(self) -> Vec<usize> {
        match self {
            SyntheticTask::CopyPrevious => (1..self.streams()).collect(),
            SyntheticTask::IntraStep => vec![2, 3],
        }
    }

    /// One grid with `vocab` real tokens per stream (grid ids `1..=vocab`).
    pub fn grid<R: Rng>(self, vocab: usize, steps: usize, rng: &mut R) -> Result<TokenGrid> {
        let k = self.streams();
        let cards = vec![vocab + 1; k];
        let mut draw = || rng.gen_range(1..=vocab as u32);
        match self {
            SyntheticTask::CopyPrevious => {
                let mut rows = Vec::with_capacity(steps);
                let mut prev = INITIAL_ID;
                for _ in 0..steps {
                    let first = draw();
                    let mut row = vec![prev; k];
                    row[0] = first;
                    rows.push(row);
                    prev = first;
                }
                TokenGrid::from_rows(&rows, cards)
            }
            SyntheticTask::IntraStep => {
                if steps < 3 {
                    return Err(input_err!("intra-step task needs at least 3 steps"));
                }
                let t = steps - 2;
                let n = vocab as u32;
                let a: Vec<u32> = (0..t).map(|_| draw()).collect();
                let b: Vec<u32> = (0..t).map(|_| draw()).collect();
                let f = |x: u32| (x * 3 + 1) % n + 1;
                let c: Vec<u32> = b.iter().map(|&x| f(x)).collect();
                let d: Vec<u32> = c.iter().zip(&a).map(|(&x, &y)| (x + y) % n + 1).collect();
                apply_stream_delays(&[a, b, c, d], &[0, 2, 2, 2], cards)
            }
        }
    }

    pub fn dataset(self, vocab: usize, steps: usize, count: usize, seed: u64) -> Result<Vec<TokenGrid>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..count).map(|_| self.grid(vocab, steps, &mut rng)).collect()
    }
}
