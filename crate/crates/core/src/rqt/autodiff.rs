//! A small reverse-mode tape over row-major `f64` matrices.
//!
//! Only the operations the RQ-Transformer needs are provided. Every op
//! records enough of its forward state to run its backward pass without
//! recomputation.

use ndarray::{s, Array2, ArrayView1, Axis};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Scale(Var, f64),
    RmsNorm {
        x: Var,
        gain: Var,
        inv_rms: Vec<f64>,
    },
    Rope {
        x: Var,
        heads: usize,
        block: usize,
        base: f64,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        block: usize,
        // One lower-triangular `block x block` matrix per (block, head).
        probs: Vec<Array2<f64>>,
    },
    SiluMul(Var, Var),
    GatherSum {
        table: Var,
        ids: Vec<Vec<usize>>,
    },
    RepeatRows {
        x: Var,
        times: usize,
    },
    SelectRows {
        x: Var,
        rows: Vec<usize>,
    },
    GroupedMatMul {
        x: Var,
        ws: Vec<Var>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        weights: Vec<f64>,
        probs: Array2<f64>,
    },
}

struct Node {
    value: Array2<f64>,
    op: Op,
}

/// Records a forward computation and differentiates it.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Array2<f64>>>,
}

pub(crate) const RMS_EPS: f64 = 1e-6;

pub(crate) fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Rotary angle table for one head: `theta_i = base^(-2i / head_dim)`.
pub(crate) fn rope_frequencies(head_dim: usize, base: f64) -> Vec<f64> {
    (0..head_dim / 2)
        .map(|i| base.powf(-2.0 * i as f64 / head_dim as f64))
        .collect()
}

/// Rotates consecutive pairs of each head of `row` by `pos * theta_i`.
/// `sign = -1.0` applies the inverse rotation.
pub(crate) fn rope_row(row: &mut [f64], heads: usize, pos: usize, freqs: &[f64], sign: f64) {
    let head_dim = row.len() / heads;
    for h in 0..heads {
        let head = &mut row[h * head_dim..(h + 1) * head_dim];
        for (i, &f) in freqs.iter().enumerate() {
            let (sin, cos) = (pos as f64 * f).sin_cos();
            let sin = sign * sin;
            let (a, b) = (head[2 * i], head[2 * i + 1]);
            head[2 * i] = a * cos - b * sin;
            head[2 * i + 1] = a * sin + b * cos;
        }
    }
}

fn dot(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| x * y).sum()
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Array2<f64>, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    /// Scalar value of a `1 x 1` node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v)[[0, 0]]
    }

    pub fn grad(&self, v: Var) -> Option<&Array2<f64>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(self.value(b));
        self.push(value, Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) + self.value(b);
        self.push(value, Op::Add(a, b))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let value = self.value(x) * factor;
        self.push(value, Op::Scale(x, factor))
    }

    /// Sum of `1 x 1` nodes.
    pub fn sum(&mut self, xs: &[Var]) -> Var {
        let mut acc = xs[0];
        for &x in &xs[1..] {
            acc = self.add(acc, x);
        }
        acc
    }

    /// Row-wise RMS normalization with a `1 x d` gain.
    pub fn rms_norm(&mut self, x: Var, gain: Var) -> Var {
        let xv = self.value(x);
        let g = self.value(gain).row(0).to_owned();
        let d = xv.ncols() as f64;
        let mut out = xv.clone();
        let mut inv_rms = Vec::with_capacity(xv.nrows());
        for mut row in out.rows_mut() {
            let r = 1.0 / (row.iter().map(|v| v * v).sum::<f64>() / d + RMS_EPS).sqrt();
            inv_rms.push(r);
            row.iter_mut().zip(g.iter()).for_each(|(v, g)| *v *= r * g);
        }
        self.push(out, Op::RmsNorm { x, gain, inv_rms })
    }

    /// Rotary position encoding; row `r` sits at position `r % block`.
    pub fn rope(&mut self, x: Var, heads: usize, block: usize, base: f64) -> Var {
        let mut out = self.value(x).clone();
        let freqs = rope_frequencies(out.ncols() / heads, base);
        for (r, mut row) in out.rows_mut().into_iter().enumerate() {
            let slice = row.as_slice_mut().expect("contiguous row");
            rope_row(slice, heads, r % block, &freqs, 1.0);
        }
        self.push(out, Op::Rope { x, heads, block, base })
    }

    /// Multi-head causal self-attention inside consecutive blocks of `block`
    /// rows. Rows never attend across blocks.
    pub fn causal_attention(&mut self, q: Var, k: Var, v: Var, heads: usize, block: usize) -> Var {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let (n, d) = qv.dim();
        assert_eq!(n % block, 0, "rows must fill whole blocks");
        let hd = d / heads;
        let scale = 1.0 / (hd as f64).sqrt();
        let mut out = Array2::<f64>::zeros((n, d));
        let mut probs = Vec::with_capacity(n / block * heads);
        for b in 0..n / block {
            let base = b * block;
            for h in 0..heads {
                let cols = h * hd..(h + 1) * hd;
                let mut p = Array2::<f64>::zeros((block, block));
                for i in 0..block {
                    let qi = qv.slice(s![base + i, h * hd..(h + 1) * hd]);
                    let mut max = f64::NEG_INFINITY;
                    for j in 0..=i {
                        let sc = dot(qi, kv.slice(s![base + j, h * hd..(h + 1) * hd])) * scale;
                        p[[i, j]] = sc;
                        max = max.max(sc);
                    }
                    let mut total = 0.0;
                    for j in 0..=i {
                        let e = (p[[i, j]] - max).exp();
                        p[[i, j]] = e;
                        total += e;
                    }
                    for j in 0..=i {
                        p[[i, j]] /= total;
                    }
                    let mut o = out.slice_mut(s![base + i, cols.clone()]);
                    for j in 0..=i {
                        o.scaled_add(p[[i, j]], &vv.slice(s![base + j, cols.clone()]));
                    }
                }
                probs.push(p);
            }
        }
        self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                heads,
                block,
                probs,
            },
        )
    }

    /// `silu(a) * b`, elementwise.
    pub fn silu_mul(&mut self, a: Var, b: Var) -> Var {
        let mut out = self.value(a).mapv(silu);
        out *= self.value(b);
        self.push(out, Op::SiluMul(a, b))
    }

    /// Output row `r` is the sum of `table` rows `ids[r]`.
    pub fn gather_sum(&mut self, table: Var, ids: Vec<Vec<usize>>) -> Var {
        let t = self.value(table);
        let mut out = Array2::<f64>::zeros((ids.len(), t.ncols()));
        for (mut row, idx) in out.rows_mut().into_iter().zip(&ids) {
            for &i in idx {
                row += &t.row(i);
            }
        }
        self.push(out, Op::GatherSum { table, ids })
    }

    /// Output row `r` is input row `r / times`.
    pub fn repeat_rows(&mut self, x: Var, times: usize) -> Var {
        let xv = self.value(x);
        let rows: Vec<usize> = (0..xv.nrows() * times).map(|r| r / times).collect();
        let out = xv.select(Axis(0), &rows);
        self.push(out, Op::RepeatRows { x, times })
    }

    pub fn select_rows(&mut self, x: Var, rows: Vec<usize>) -> Var {
        let out = self.value(x).select(Axis(0), &rows);
        self.push(out, Op::SelectRows { x, rows })
    }

    /// Row `r` is multiplied by `ws[r % ws.len()]`.
    pub fn grouped_matmul(&mut self, x: Var, ws: &[Var]) -> Var {
        let period = ws.len();
        let xv = self.value(x);
        let n = xv.nrows();
        let d_out = self.value(ws[0]).ncols();
        let mut out = Array2::<f64>::zeros((n, d_out));
        for (g, &w) in ws.iter().enumerate() {
            let rows: Vec<usize> = (g..n).step_by(period).collect();
            let part = xv.select(Axis(0), &rows).dot(self.value(w));
            for (i, &r) in rows.iter().enumerate() {
                out.row_mut(r).assign(&part.row(i));
            }
        }
        self.push(out, Op::GroupedMatMul { x, ws: ws.to_vec() })
    }

    /// `sum_i weights[i] * CE(logits[i], targets[i])` as a `1 x 1` node.
    pub fn cross_entropy(&mut self, logits: Var, targets: Vec<usize>, weights: Vec<f64>) -> Var {
        let lv = self.value(logits);
        let mut probs = lv.clone();
        let mut total = 0.0;
        for (i, ((mut row, &t), &w)) in probs
            .rows_mut()
            .into_iter()
            .zip(&targets)
            .zip(&weights)
            .enumerate()
        {
            let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            row.mapv_inplace(|v| (v - max).exp());
            let z: f64 = row.sum();
            total += w * (z.ln() - (lv[[i, t]] - max));
            row.mapv_inplace(|v| v / z);
        }
        self.push(
            Array2::from_elem((1, 1), total),
            Op::CrossEntropy {
                logits,
                targets,
                weights,
                probs,
            },
        )
    }

    fn accumulate(&mut self, v: Var, g: Array2<f64>) {
        match &mut self.grads[v.0] {
            Some(acc) => *acc += &g,
            slot @ None => *slot = Some(g),
        }
    }

    /// Back-propagates from a `1 x 1` root; gradients are then available
    /// through [`Graph::grad`].
    pub fn backward(&mut self, root: Var) {
        self.grads = vec![None; self.nodes.len()];
        self.grads[root.0] = Some(Array2::from_elem((1, 1), 1.0));
        for id in (0..=root.0).rev() {
            let Some(dy) = self.grads[id].take() else { continue };
            let updates = self.node_backward(id, &dy);
            self.grads[id] = Some(dy);
            for (v, g) in updates {
                self.accumulate(v, g);
            }
        }
    }

    fn node_backward(&self, id: usize, dy: &Array2<f64>) -> Vec<(Var, Array2<f64>)> {
        let node = &self.nodes[id];
        match &node.op {
            Op::Leaf => vec![],
            Op::MatMul(a, b) => {
                let da = dy.dot(&self.value(*b).t());
                let db = self.value(*a).t().dot(dy);
                vec![(*a, da), (*b, db)]
            }
            Op::Add(a, b) => vec![(*a, dy.clone()), (*b, dy.clone())],
            Op::Scale(x, f) => vec![(*x, dy * *f)],
            Op::RmsNorm { x, gain, inv_rms } => {
                let xv = self.value(*x);
                let g = self.value(*gain).row(0);
                let d = xv.ncols() as f64;
                let mut dx = Array2::<f64>::zeros(xv.dim());
                let mut dg = Array2::<f64>::zeros((1, xv.ncols()));
                for (r, &ir) in inv_rms.iter().enumerate() {
                    let xr = xv.row(r);
                    let dyr = dy.row(r);
                    let mut proj = 0.0;
                    for c in 0..xv.ncols() {
                        let n = xr[c] * ir;
                        dg[[0, c]] += dyr[c] * n;
                        proj += dyr[c] * g[c] * n;
                    }
                    proj /= d;
                    for c in 0..xv.ncols() {
                        let n = xr[c] * ir;
                        dx[[r, c]] = ir * (dyr[c] * g[c] - n * proj);
                    }
                }
                vec![(*x, dx), (*gain, dg)]
            }
            Op::Rope { x, heads, block, base } => {
                let mut dx = dy.clone();
                let freqs = rope_frequencies(dx.ncols() / heads, *base);
                for (r, mut row) in dx.rows_mut().into_iter().enumerate() {
                    let slice = row.as_slice_mut().expect("contiguous row");
                    rope_row(slice, *heads, r % block, &freqs, -1.0);
                }
                vec![(*x, dx)]
            }
            Op::Attention { q, k, v, heads, block, probs } => {
                let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                let (n, d) = qv.dim();
                let hd = d / heads;
                let scale = 1.0 / (hd as f64).sqrt();
                let mut dq = Array2::<f64>::zeros((n, d));
                let mut dk = Array2::<f64>::zeros((n, d));
                let mut dv = Array2::<f64>::zeros((n, d));
                for b in 0..n / block {
                    let base = b * block;
                    for h in 0..*heads {
                        let p = &probs[b * heads + h];
                        let cols = h * hd..(h + 1) * hd;
                        for i in 0..*block {
                            let dyi = dy.slice(s![base + i, cols.clone()]);
                            let mut dp = vec![0.0; i + 1];
                            let mut weighted = 0.0;
                            for j in 0..=i {
                                dv.slice_mut(s![base + j, cols.clone()]).scaled_add(p[[i, j]], &dyi);
                                dp[j] = dot(dyi, vv.slice(s![base + j, cols.clone()]));
                                weighted += p[[i, j]] * dp[j];
                            }
                            for j in 0..=i {
                                let ds = p[[i, j]] * (dp[j] - weighted) * scale;
                                if ds == 0.0 {
                                    continue;
                                }
                                dq.slice_mut(s![base + i, cols.clone()])
                                    .scaled_add(ds, &kv.slice(s![base + j, cols.clone()]));
                                dk.slice_mut(s![base + j, cols.clone()])
                                    .scaled_add(ds, &qv.slice(s![base + i, cols.clone()]));
                            }
                        }
                    }
                }
                vec![(*q, dq), (*k, dk), (*v, dv)]
            }
            Op::SiluMul(a, b) => {
                let av = self.value(*a);
                let bv = self.value(*b);
                let mut da = dy * bv;
                da.zip_mut_with(av, |g, &x| {
                    let sg = sigmoid(x);
                    *g *= sg * (1.0 + x * (1.0 - sg));
                });
                let mut db = dy.clone();
                db.zip_mut_with(av, |g, &x| *g *= silu(x));
                vec![(*a, da), (*b, db)]
            }
            Op::GatherSum { table, ids } => {
                let mut dt = Array2::<f64>::zeros(self.value(*table).dim());
                for (r, idx) in ids.iter().enumerate() {
                    for &i in idx {
                        let mut row = dt.row_mut(i);
                        row += &dy.row(r);
                    }
                }
                vec![(*table, dt)]
            }
            Op::RepeatRows { x, times } => {
                let mut dx = Array2::<f64>::zeros(self.value(*x).dim());
                for (r, row) in dy.rows().into_iter().enumerate() {
                    let mut target = dx.row_mut(r / times);
                    target += &row;
                }
                vec![(*x, dx)]
            }
            Op::SelectRows { x, rows } => {
                let mut dx = Array2::<f64>::zeros(self.value(*x).dim());
                for (i, &r) in rows.iter().enumerate() {
                    let mut target = dx.row_mut(r);
                    target += &dy.row(i);
                }
                vec![(*x, dx)]
            }
            Op::GroupedMatMul { x, ws } => {
                let xv = self.value(*x);
                let n = xv.nrows();
                let period = ws.len();
                let mut dx = Array2::<f64>::zeros(xv.dim());
                let mut out = Vec::with_capacity(period + 1);
                for (g, &w) in ws.iter().enumerate() {
                    let rows: Vec<usize> = (g..n).step_by(period).collect();
                    let dyg = dy.select(Axis(0), &rows);
                    let dw = xv.select(Axis(0), &rows).t().dot(&dyg);
                    let dxg = dyg.dot(&self.value(w).t());
                    for (i, &r) in rows.iter().enumerate() {
                        dx.row_mut(r).assign(&dxg.row(i));
                    }
                    out.push((w, dw));
                }
                out.push((*x, dx));
                out
            }
            Op::CrossEntropy { logits, targets, weights, probs } => {
                let g = dy[[0, 0]];
                let mut dl = probs.clone();
                for ((mut row, &t), &w) in dl.rows_mut().into_iter().zip(targets).zip(weights) {
                    row[t] -= 1.0;
                    row *= w * g;
                }
                vec![(*logits, dl)]
            }
        }
    }
}
