use std::collections::BTreeMap;

use ndarray::Array2;

use super::autodiff::{self, rope_frequencies, rope_row, Graph, Var};
use super::loss::LossWeights;
use super::params::{Initializer, ParamStore};
use super::{ContextVector, DepthKind, RqtConfig, StepLogits};
use crate::error::{input_err, Result};
use crate::layout::{TokenGrid, INITIAL_ID};

/// Parameters plus the shape bookkeeping needed to run them.
#[derive(Debug, Clone)]
pub struct RqtModel {
    cfg: RqtConfig,
    params: ParamStore,
    /// Row offset of each stream inside the temporal embedding table.
    emb_offsets: Vec<usize>,
    /// Row offset of each depth position inside the depth embedding table.
    depth_emb_offsets: Vec<usize>,
}

/// Per-layer keys and values of the temporal transformer.
#[derive(Debug, Clone, Default)]
pub struct TemporalCache {
    keys: Vec<Vec<Vec<f64>>>,
    values: Vec<Vec<Vec<f64>>>,
    len: usize,
}

impl TemporalCache {
    /// Number of rows consumed so far.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

fn offsets(sizes: &[usize]) -> Vec<usize> {
    sizes
        .iter()
        .scan(0, |acc, &n| {
            let start = *acc;
            *acc += n;
            Some(start)
        })
        .collect()
}

fn vec_mat(x: &[f64], w: &Array2<f64>) -> Vec<f64> {
    let cols = w.ncols();
    let data = w.as_slice().expect("standard layout");
    let mut out = vec![0.0; cols];
    for (i, &xi) in x.iter().enumerate() {
        for (o, &wij) in out.iter_mut().zip(&data[i * cols..(i + 1) * cols]) {
            *o += xi * wij;
        }
    }
    out
}

fn rms_norm(x: &[f64], gain: &Array2<f64>) -> Vec<f64> {
    let d = x.len() as f64;
    let r = 1.0 / (x.iter().map(|v| v * v).sum::<f64>() / d + autodiff::RMS_EPS).sqrt();
    x.iter().zip(gain.iter()).map(|(v, g)| v * r * g).collect()
}

fn add_into(acc: &mut [f64], x: &[f64]) {
    acc.iter_mut().zip(x).for_each(|(a, b)| *a += b);
}

/// Causal attention of one query row against `keys[..=last]`.
fn attend(q: &[f64], keys: &[Vec<f64>], values: &[Vec<f64>], heads: usize) -> Vec<f64> {
    let d = q.len();
    let hd = d / heads;
    let scale = 1.0 / (hd as f64).sqrt();
    let mut out = vec![0.0; d];
    for h in 0..heads {
        let cols = h * hd..(h + 1) * hd;
        let scores: Vec<f64> = keys
            .iter()
            .map(|k| {
                q[cols.clone()]
                    .iter()
                    .zip(&k[cols.clone()])
                    .map(|(a, b)| a * b)
                    .sum::<f64>()
                    * scale
            })
            .collect();
        let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
        let total: f64 = exps.iter().sum();
        for (e, v) in exps.iter().zip(values) {
            let p = e / total;
            for c in cols.clone() {
                out[c] += p * v[c];
            }
        }
    }
    out
}

fn gated_ffn(h: &[f64], w1: &Array2<f64>, w3: &Array2<f64>, w2: &Array2<f64>) -> Vec<f64> {
    let a = vec_mat(h, w1);
    let b = vec_mat(h, w3);
    let gated: Vec<f64> = a.iter().zip(&b).map(|(x, y)| autodiff::silu(*x) * y).collect();
    vec_mat(&gated, w2)
}

/// Graph handles for every parameter, by name.
pub(crate) type ParamVars = BTreeMap<String, Var>;

impl RqtModel {
    pub fn new(cfg: RqtConfig) -> Result<Self> {
        cfg.validate()?;
        let params = Self::init_params(&cfg);
        Ok(Self::assemble(cfg, params))
    }

    /// Wraps existing parameters, checking that every expected tensor is
    /// present with the right shape.
    pub fn from_params(cfg: RqtConfig, params: ParamStore) -> Result<Self> {
        cfg.validate()?;
        let reference = Self::init_params(&cfg);
        if reference.len() != params.len() {
            return Err(input_err!(
                "expected {} tensors, got {}",
                reference.len(),
                params.len()
            ));
        }
        for (name, t) in reference.iter() {
            if !params.contains(name) {
                return Err(input_err!("missing tensor {name}"));
            }
            if params.get(name).dim() != t.dim() {
                return Err(input_err!(
                    "tensor {name} has shape {:?}, expected {:?}",
                    params.get(name).dim(),
                    t.dim()
                ));
            }
        }
        Ok(Self::assemble(cfg, params))
    }

    fn assemble(cfg: RqtConfig, params: ParamStore) -> Self {
        let emb_offsets = offsets(&cfg.cardinalities);
        let depth_emb_offsets = offsets(&cfg.cardinalities[..cfg.depth_positions()]);
        Self {
            cfg,
            params,
            emb_offsets,
            depth_emb_offsets,
        }
    }

    fn init_params(cfg: &RqtConfig) -> ParamStore {
        let mut init = Initializer::new(cfg.seed);
        let mut p = ParamStore::new();
        let dt = cfg.d_temporal;
        let dd = cfg.d_depth;
        let total: usize = cfg.cardinalities.iter().sum();
        p.insert("temporal.emb", init.gaussian(total, dt, 1.0));
        for l in 0..cfg.temporal_layers {
            Self::init_block(&mut p, &mut init, &format!("temporal.{l}"), dt, cfg.ffn_mult, &[0]);
        }
        p.insert("temporal.out_norm", Initializer::ones(dt));
        p.insert(
            "text_head",
            init.linear(dt, cfg.cardinalities[0], cfg.head_init_scale),
        );
        match cfg.depth_kind {
            DepthKind::IndependentHeads => {
                for (k, &n) in cfg.cardinalities.iter().enumerate().skip(1) {
                    p.insert(format!("head.{k}"), init.linear(dt, n, cfg.head_init_scale));
                }
            }
            DepthKind::Joint if cfg.num_streams() > 1 => {
                let positions = cfg.depth_positions();
                let groups: Vec<usize> = (0..cfg.depth_groups()).collect();
                let rows: usize = cfg.cardinalities[..positions].iter().sum();
                p.insert("depth.emb", init.gaussian(rows, dd, 1.0));
                for &g in &groups {
                    p.insert(format!("depth.in.{g}"), init.linear(dt, dd, 1.0));
                }
                for l in 0..cfg.depth_layers {
                    Self::init_block(&mut p, &mut init, &format!("depth.{l}"), dd, cfg.ffn_mult, &groups);
                }
                p.insert("depth.out_norm", Initializer::ones(dd));
                for j in 0..positions {
                    p.insert(
                        format!("depth.head.{j}"),
                        init.linear(dd, cfg.cardinalities[j + 1], cfg.head_init_scale),
                    );
                }
            }
            DepthKind::Joint => {}
        }
        p
    }

    fn init_block(
        p: &mut ParamStore,
        init: &mut Initializer,
        prefix: &str,
        d: usize,
        ffn_mult: usize,
        groups: &[usize],
    ) {
        let h = ffn_mult * d;
        p.insert(format!("{prefix}.attn_norm"), Initializer::ones(d));
        p.insert(format!("{prefix}.ffn_norm"), Initializer::ones(d));
        for &g in groups {
            for name in ["wq", "wk", "wv", "wo"] {
                p.insert(format!("{prefix}.{name}.{g}"), init.linear(d, d, 1.0));
            }
            p.insert(format!("{prefix}.w1.{g}"), init.linear(d, h, 1.0));
            p.insert(format!("{prefix}.w3.{g}"), init.linear(d, h, 1.0));
            p.insert(format!("{prefix}.w2.{g}"), init.linear(h, d, 1.0));
        }
    }

    pub fn config(&self) -> &RqtConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.num_scalars()
    }

    pub fn num_streams(&self) -> usize {
        self.cfg.num_streams()
    }

    fn check_row(&self, row: &[u32], what: &str) -> Result<()> {
        if row.len() > self.num_streams() {
            return Err(input_err!(
                "{what} has {} tokens for {} streams",
                row.len(),
                self.num_streams()
            ));
        }
        for (k, (&t, &n)) in row.iter().zip(&self.cfg.cardinalities).enumerate() {
            if t as usize >= n {
                return Err(input_err!("{what}: token {t} in stream {k} exceeds cardinality {n}"));
            }
        }
        Ok(())
    }

    pub fn new_cache(&self) -> TemporalCache {
        TemporalCache {
            keys: vec![Vec::new(); self.cfg.temporal_layers],
            values: vec![Vec::new(); self.cfg.temporal_layers],
            len: 0,
        }
    }

    /// Consumes row `V_{s-1}` and returns `z_s`.
    pub fn temporal_step(&self, cache: &mut TemporalCache, row: &[u32]) -> Result<ContextVector> {
        if row.len() != self.num_streams() {
            return Err(input_err!(
                "temporal input row has {} tokens, expected {}",
                row.len(),
                self.num_streams()
            ));
        }
        self.check_row(row, "temporal input")?;
        let p = &self.params;
        let emb = p.get("temporal.emb");
        let mut x = vec![0.0; self.cfg.d_temporal];
        for (k, &t) in row.iter().enumerate() {
            let r = emb.row(self.emb_offsets[k] + t as usize);
            add_into(&mut x, r.as_slice().expect("contiguous"));
        }
        let heads = self.cfg.heads;
        let freqs = rope_frequencies(self.cfg.d_temporal / heads, self.cfg.rope_base);
        let pos = cache.len;
        for l in 0..self.cfg.temporal_layers {
            let pre = format!("temporal.{l}");
            let h = rms_norm(&x, p.get(&format!("{pre}.attn_norm")));
            let mut q = vec_mat(&h, p.get(&format!("{pre}.wq.0")));
            let mut k = vec_mat(&h, p.get(&format!("{pre}.wk.0")));
            let v = vec_mat(&h, p.get(&format!("{pre}.wv.0")));
            rope_row(&mut q, heads, pos, &freqs, 1.0);
            rope_row(&mut k, heads, pos, &freqs, 1.0);
            cache.keys[l].push(k);
            cache.values[l].push(v);
            let a = attend(&q, &cache.keys[l], &cache.values[l], heads);
            add_into(&mut x, &vec_mat(&a, p.get(&format!("{pre}.wo.0"))));
            let h = rms_norm(&x, p.get(&format!("{pre}.ffn_norm")));
            let f = gated_ffn(
                &h,
                p.get(&format!("{pre}.w1.0")),
                p.get(&format!("{pre}.w3.0")),
                p.get(&format!("{pre}.w2.0")),
            );
            add_into(&mut x, &f);
        }
        cache.len += 1;
        Ok(ContextVector(rms_norm(&x, p.get("temporal.out_norm"))))
    }

    /// `z_s` from the rows `V_0 .. V_{s-1}`, recomputed from scratch.
    pub fn temporal_forward(&self, prefix: &[Vec<u32>]) -> Result<ContextVector> {
        if prefix.is_empty() {
            return Err(input_err!("temporal prefix must contain at least V_0"));
        }
        let mut cache = self.new_cache();
        let mut z = None;
        for row in prefix {
            z = Some(self.temporal_step(&mut cache, row)?);
        }
        Ok(z.expect("non-empty prefix"))
    }

    /// Logits for stream `partial.len()` of the current step, given `z_s`
    /// and the tokens already chosen for streams `0..partial.len()`.
    pub fn depth_forward(&self, z: &ContextVector, partial: &[u32]) -> Result<Vec<f64>> {
        let k = partial.len();
        if k >= self.num_streams() {
            return Err(input_err!(
                "partial row of {k} tokens leaves no stream to predict among {}",
                self.num_streams()
            ));
        }
        if z.0.len() != self.cfg.d_temporal {
            return Err(input_err!("context vector has dimension {}", z.0.len()));
        }
        self.check_row(partial, "partial row")?;
        let p = &self.params;
        if k == 0 {
            return Ok(vec_mat(&z.0, p.get("text_head")));
        }
        if self.cfg.depth_kind == DepthKind::IndependentHeads {
            return Ok(vec_mat(&z.0, p.get(&format!("head.{k}"))));
        }
        let group = |j: usize| if self.cfg.depthwise_params { j } else { 0 };
        let emb = p.get("depth.emb");
        let mut xs: Vec<Vec<f64>> = (0..k)
            .map(|j| {
                let mut x = vec_mat(&z.0, p.get(&format!("depth.in.{}", group(j))));
                let r = emb.row(self.depth_emb_offsets[j] + partial[j] as usize);
                add_into(&mut x, r.as_slice().expect("contiguous"));
                x
            })
            .collect();
        let heads = self.cfg.heads;
        for l in 0..self.cfg.depth_layers {
            let pre = format!("depth.{l}");
            let w = |name: &str, j: usize| p.get(&format!("{pre}.{name}.{}", group(j)));
            let hs: Vec<Vec<f64>> = xs
                .iter()
                .map(|x| rms_norm(x, p.get(&format!("{pre}.attn_norm"))))
                .collect();
            let qs: Vec<Vec<f64>> = hs.iter().enumerate().map(|(j, h)| vec_mat(h, w("wq", j))).collect();
            let ks: Vec<Vec<f64>> = hs.iter().enumerate().map(|(j, h)| vec_mat(h, w("wk", j))).collect();
            let vs: Vec<Vec<f64>> = hs.iter().enumerate().map(|(j, h)| vec_mat(h, w("wv", j))).collect();
            for (j, x) in xs.iter_mut().enumerate() {
                let a = attend(&qs[j], &ks[..=j], &vs[..=j], heads);
                add_into(x, &vec_mat(&a, w("wo", j)));
                let h = rms_norm(x, p.get(&format!("{pre}.ffn_norm")));
                add_into(x, &gated_ffn(&h, w("w1", j), w("w3", j), w("w2", j)));
            }
        }
        let last = rms_norm(&xs[k - 1], p.get("depth.out_norm"));
        Ok(vec_mat(&last, p.get(&format!("depth.head.{}", k - 1))))
    }

    /// Teacher-forced logits for all streams of one step.
    pub fn step_logits(&self, z: &ContextVector, row: &[u32]) -> Result<StepLogits> {
        (0..self.num_streams())
            .map(|k| self.depth_forward(z, &row[..k]))
            .collect::<Result<Vec<_>>>()
            .map(StepLogits)
    }

    /// Teacher-forced logits for every step of `grid`, one cached pass.
    pub fn forward_grid(&self, grid: &TokenGrid) -> Result<Vec<StepLogits>> {
        if grid.cardinalities() != self.cfg.cardinalities.as_slice() {
            return Err(input_err!("grid cardinalities do not match the model"));
        }
        let mut cache = self.new_cache();
        let mut prev = vec![INITIAL_ID; self.num_streams()];
        let mut out = Vec::with_capacity(grid.steps());
        for row in grid.rows() {
            let z = self.temporal_step(&mut cache, &prev)?;
            out.push(self.step_logits(&z, row)?);
            prev.copy_from_slice(row);
        }
        Ok(out)
    }

    /// Adds every parameter to `g` as a leaf.
    pub(crate) fn graph_params(&self, g: &mut Graph) -> ParamVars {
        self.params
            .iter()
            .map(|(name, t)| (name.clone(), g.leaf(t.clone())))
            .collect()
    }

    fn lin(g: &mut Graph, x: Var, ws: &[Var]) -> Var {
        if ws.len() == 1 {
            g.matmul(x, ws[0])
        } else {
            g.grouped_matmul(x, ws)
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn graph_block(
        g: &mut Graph,
        vars: &ParamVars,
        prefix: &str,
        x: Var,
        groups: usize,
        heads: usize,
        block: usize,
        rope_base: Option<f64>,
    ) -> Var {
        let ws = |name: &str| -> Vec<Var> {
            (0..groups).map(|i| vars[&format!("{prefix}.{name}.{i}")]).collect()
        };
        let h = g.rms_norm(x, vars[&format!("{prefix}.attn_norm")]);
        let mut q = Self::lin(g, h, &ws("wq"));
        let mut k = Self::lin(g, h, &ws("wk"));
        let v = Self::lin(g, h, &ws("wv"));
        if let Some(base) = rope_base {
            q = g.rope(q, heads, block, base);
            k = g.rope(k, heads, block, base);
        }
        let a = g.causal_attention(q, k, v, heads, block);
        let o = Self::lin(g, a, &ws("wo"));
        let x = g.add(x, o);
        let h = g.rms_norm(x, vars[&format!("{prefix}.ffn_norm")]);
        let a = Self::lin(g, h, &ws("w1"));
        let b = Self::lin(g, h, &ws("w3"));
        let gated = g.silu_mul(a, b);
        let f = Self::lin(g, gated, &ws("w2"));
        g.add(x, f)
    }

    /// Builds the weighted training loss of a batch of equally long grids.
    pub(crate) fn graph_loss(
        &self,
        g: &mut Graph,
        vars: &ParamVars,
        batch: &[&TokenGrid],
        weights: &LossWeights,
    ) -> Result<Var> {
        let cfg = &self.cfg;
        let k_streams = cfg.num_streams();
        let steps = batch.first().map(|b| b.steps()).unwrap_or(0);
        if steps == 0 {
            return Err(input_err!("empty batch"));
        }
        for grid in batch {
            if grid.steps() != steps {
                return Err(input_err!("batch grids must share one length"));
            }
            if grid.cardinalities() != cfg.cardinalities.as_slice() {
                return Err(input_err!("grid cardinalities do not match the model"));
            }
        }
        weights.check(k_streams)?;
        let rows = batch.len() * steps;
        let norm = 1.0 / rows as f64;

        // Temporal transformer over the inputs V_0 .. V_{S-1}.
        let mut ids = Vec::with_capacity(rows);
        for grid in batch {
            for s in 0..steps {
                let prev: Vec<usize> = if s == 0 {
                    vec![INITIAL_ID as usize; k_streams]
                } else {
                    grid.row(s - 1).iter().map(|&t| t as usize).collect()
                };
                ids.push(
                    prev.iter()
                        .zip(&self.emb_offsets)
                        .map(|(t, o)| t + o)
                        .collect(),
                );
            }
        }
        let mut x = g.gather_sum(vars["temporal.emb"], ids);
        for l in 0..cfg.temporal_layers {
            x = Self::graph_block(
                g,
                vars,
                &format!("temporal.{l}"),
                x,
                1,
                cfg.heads,
                steps,
                Some(cfg.rope_base),
            );
        }
        let z = g.rms_norm(x, vars["temporal.out_norm"]);

        let targets = |k: usize| -> Vec<usize> {
            batch
                .iter()
                .flat_map(|grid| (0..steps).map(move |s| grid.get(s, k) as usize))
                .collect()
        };
        let mut terms = Vec::with_capacity(k_streams);

        let first = g.matmul(z, vars["text_head"]);
        let t0 = targets(0);
        let w0 = t0
            .iter()
            .map(|&t| weights.first_stream_weight(t as u32) * norm)
            .collect();
        terms.push(g.cross_entropy(first, t0, w0));

        let audio_norm = weights.rest_normalizer(k_streams);
        match cfg.depth_kind {
            DepthKind::IndependentHeads => {
                for k in 1..k_streams {
                    let l = g.matmul(z, vars[&format!("head.{k}")]);
                    let w = vec![weights.alpha[k] * audio_norm * norm; rows];
                    terms.push(g.cross_entropy(l, targets(k), w));
                }
            }
            DepthKind::Joint if k_streams > 1 => {
                let positions = cfg.depth_positions();
                let groups = cfg.depth_groups();
                let zr = g.repeat_rows(z, positions);
                let w_in: Vec<Var> = (0..groups).map(|i| vars[&format!("depth.in.{i}")]).collect();
                let proj = Self::lin(g, zr, &w_in);
                let mut ids = Vec::with_capacity(rows * positions);
                for grid in batch {
                    for s in 0..steps {
                        for j in 0..positions {
                            ids.push(vec![self.depth_emb_offsets[j] + grid.get(s, j) as usize]);
                        }
                    }
                }
                let e = g.gather_sum(vars["depth.emb"], ids);
                let mut x = g.add(proj, e);
                for l in 0..cfg.depth_layers {
                    x = Self::graph_block(
                        g,
                        vars,
                        &format!("depth.{l}"),
                        x,
                        groups,
                        cfg.heads,
                        positions,
                        None,
                    );
                }
                let h = g.rms_norm(x, vars["depth.out_norm"]);
                for j in 0..positions {
                    let sel = g.select_rows(h, (j..rows * positions).step_by(positions).collect());
                    let l = g.matmul(sel, vars[&format!("depth.head.{j}")]);
                    let k = j + 1;
                    let w = vec![weights.alpha[k] * audio_norm * norm; rows];
                    terms.push(g.cross_entropy(l, targets(k), w));
                }
            }
            DepthKind::Joint => {}
        }
        Ok(g.sum(&terms))
    }
}
