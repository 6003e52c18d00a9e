//! Plain, residual and split residual vector quantization.
//!
//! Vectors live in an unnamed embedding space of dimension `D`. All arithmetic
//! is done in `f64`; the on-disk codebook format stores `f32`, and learned
//! codebooks are rounded to `f32` precision so that saving and loading them is
//! lossless.

use std::io::{Read, Write};

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::binio::{self, magic};
use crate::error::{format_err, input_err, Result};

const CODEBOOK_MAGIC: u32 = magic(b"RVQC");
const CODEBOOK_VERSION: u32 = 1;

/// Number of Lloyd iterations run per level by [`learn_codebooks`].
pub const KMEANS_ITERATIONS: usize = 20;

/// A table of `N_A` centroids of dimension `D`, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    dim: usize,
    centroids: Vec<f64>,
}

impl Codebook {
    pub fn new(centroids: Vec<Vec<f64>>) -> Result<Self> {
        let dim = centroids
            .first()
            .map(Vec::len)
            .ok_or_else(|| input_err!("codebook needs at least one centroid"))?;
        if centroids.iter().any(|c| c.len() != dim) {
            return Err(input_err!("all centroids must have dimension {dim}"));
        }
        Self::from_flat(dim, centroids.into_iter().flatten().collect())
    }

    pub fn from_flat(dim: usize, centroids: Vec<f64>) -> Result<Self> {
        if dim == 0 {
            return Err(input_err!("codebook dimension must be positive"));
        }
        if centroids.is_empty() || !centroids.len().is_multiple_of(dim) {
            return Err(input_err!(
                "{} values do not form whole centroids of dimension {dim}",
                centroids.len()
            ));
        }
        if centroids.iter().any(|x| x.is_nan()) {
            return Err(input_err!("codebook contains NaN"));
        }
        Ok(Self { dim, centroids })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.centroids.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.centroids.is_empty()
    }

    pub fn centroid(&self, index: usize) -> &[f64] {
        &self.centroids[index * self.dim..(index + 1) * self.dim]
    }

    pub fn iter(&self) -> impl Iterator<Item = &[f64]> {
        self.centroids.chunks_exact(self.dim)
    }

    /// Index of the nearest centroid under squared Euclidean distance and that
    /// distance. Ties go to the lowest index.
    pub fn nearest(&self, v: &[f64]) -> (usize, f64) {
        let mut best = (0, f64::INFINITY);
        for (i, c) in self.iter().enumerate() {
            let d = squared_distance(v, c);
            if d < best.1 {
                best = (i, d);
            }
        }
        best
    }

    fn check_dim(&self, v: &[f64]) -> Result<()> {
        if v.len() != self.dim {
            return Err(input_err!(
                "vector has dimension {}, codebook expects {}",
                v.len(),
                self.dim
            ));
        }
        Ok(())
    }
}

pub fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Quantizer hyper-parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RvqConfig {
    pub levels: usize,
    pub codebook_size: usize,
    pub dim: usize,
    pub frame_rate_hz: f64,
}

impl RvqConfig {
    pub fn new(levels: usize, codebook_size: usize, dim: usize) -> Result<Self> {
        let cfg = Self {
            levels,
            codebook_size,
            dim,
            frame_rate_hz: crate::FRAME_RATE_HZ,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.levels == 0 {
            return Err(input_err!("level count must be at least 1"));
        }
        if self.codebook_size < 2 {
            return Err(input_err!("codebook size must be at least 2"));
        }
        if !(self.frame_rate_hz > 0.0) {
            return Err(input_err!("frame rate must be positive"));
        }
        Ok(())
    }
}

/// Bits per second produced by `levels` indices of `log2(codebook_size)` bits
/// at the configured frame rate.
pub fn bitrate_bps(cfg: &RvqConfig) -> f64 {
    let bits_per_index = if cfg.codebook_size.is_power_of_two() {
        cfg.codebook_size.trailing_zeros() as f64
    } else {
        (cfg.codebook_size as f64).log2()
    };
    (cfg.levels as f64 * bits_per_index) * cfg.frame_rate_hz
}

/// Codeword indices for one frame. Levels dropped by quantizer dropout are `None`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QuantizedFrame {
    pub indices: Vec<Option<u32>>,
}

impl QuantizedFrame {
    pub fn present(&self) -> impl Iterator<Item = u32> + '_ {
        self.indices.iter().filter_map(|i| *i)
    }
}

/// Nearest-centroid quantization. Returns the index and the residual `v - c`.
pub fn vq_encode(v: &[f64], cb: &Codebook) -> Result<(u32, Vec<f64>)> {
    cb.check_dim(v)?;
    let (index, _) = cb.nearest(v);
    let residual = v.iter().zip(cb.centroid(index)).map(|(x, c)| x - c).collect();
    Ok((index as u32, residual))
}

/// Chained VQ over successive residuals using the first `n_levels` codebooks.
pub fn rvq_encode(v: &[f64], cbs: &[Codebook], n_levels: usize) -> Result<QuantizedFrame> {
    rvq_encode_with_residual(v, cbs, n_levels).map(|(frame, _)| frame)
}

/// Like [`rvq_encode`] but also returns the final residual.
pub fn rvq_encode_with_residual(
    v: &[f64],
    cbs: &[Codebook],
    n_levels: usize,
) -> Result<(QuantizedFrame, Vec<f64>)> {
    if n_levels == 0 || n_levels > cbs.len() {
        return Err(input_err!(
            "n_levels must lie in 1..={}, got {n_levels}",
            cbs.len()
        ));
    }
    let mut indices = vec![None; cbs.len()];
    let mut residual = v.to_vec();
    for (slot, cb) in indices.iter_mut().zip(cbs).take(n_levels) {
        let (index, next) = vq_encode(&residual, cb)?;
        *slot = Some(index);
        residual = next;
    }
    Ok((QuantizedFrame { indices }, residual))
}

/// Sum of the centroids selected at each present level.
pub fn rvq_decode(f: &QuantizedFrame, cbs: &[Codebook]) -> Result<Vec<f64>> {
    if f.indices.len() > cbs.len() {
        return Err(input_err!(
            "frame has {} levels but only {} codebooks were given",
            f.indices.len(),
            cbs.len()
        ));
    }
    let dim = cbs
        .first()
        .map(Codebook::dim)
        .ok_or_else(|| input_err!("no codebooks"))?;
    let mut out = vec![0.0; dim];
    for (level, (index, cb)) in f.indices.iter().zip(cbs).enumerate() {
        let Some(index) = *index else { continue };
        if index as usize >= cb.len() {
            return Err(input_err!(
                "index {index} at level {level} exceeds codebook size {}",
                cb.len()
            ));
        }
        if cb.dim() != dim {
            return Err(input_err!("codebooks disagree on dimension"));
        }
        for (o, c) in out.iter_mut().zip(cb.centroid(index as usize)) {
            *o += c;
        }
    }
    Ok(out)
}

/// Training-time forward pass with quantizer dropout.
///
/// `n_levels` selects how many levels are applied; `bypass` returns `v`
/// untouched, which is how the codec skips quantization for part of training.
pub fn quantize(v: &[f64], cbs: &[Codebook], n_levels: usize, bypass: bool) -> Result<Vec<f64>> {
    if bypass {
        return Ok(v.to_vec());
    }
    let frame = rvq_encode(v, cbs, n_levels)?;
    rvq_decode(&frame, cbs)
}

/// What the acoustic branch of a [`SplitRvq`] quantizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum AcousticInput {
    /// The acoustic RVQ sees `v - semantic_centroid`.
    #[default]
    SemanticResidual,
    /// The acoustic RVQ sees `v` itself, in parallel with the semantic VQ.
    Input,
}

/// A one-level semantic VQ next to a multi-level acoustic RVQ whose decoded
/// outputs are summed.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitRvq {
    pub semantic: Codebook,
    pub acoustic: Vec<Codebook>,
    pub acoustic_input: AcousticInput,
}

/// Output of [`split_rvq_encode`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitCodes {
    pub semantic: u32,
    pub acoustic: QuantizedFrame,
}

impl SplitCodes {
    /// All indices of the frame, semantic first.
    pub fn flatten(&self) -> Vec<Option<u32>> {
        std::iter::once(Some(self.semantic))
            .chain(self.acoustic.indices.iter().copied())
            .collect()
    }
}

impl SplitRvq {
    pub fn new(semantic: Codebook, acoustic: Vec<Codebook>) -> Result<Self> {
        if acoustic.iter().any(|cb| cb.dim() != semantic.dim()) {
            return Err(input_err!("split RVQ codebooks must share one dimension"));
        }
        Ok(Self {
            semantic,
            acoustic,
            acoustic_input: AcousticInput::default(),
        })
    }

    pub fn with_acoustic_input(mut self, input: AcousticInput) -> Self {
        self.acoustic_input = input;
        self
    }

    pub fn levels(&self) -> usize {
        1 + self.acoustic.len()
    }
}

pub fn split_rvq_encode(v: &[f64], q: &SplitRvq) -> Result<SplitCodes> {
    let (semantic, residual) = vq_encode(v, &q.semantic)?;
    let acoustic = if q.acoustic.is_empty() {
        QuantizedFrame { indices: vec![] }
    } else {
        let source = match q.acoustic_input {
            AcousticInput::SemanticResidual => &residual[..],
            AcousticInput::Input => v,
        };
        rvq_encode(source, &q.acoustic, q.acoustic.len())?
    };
    Ok(SplitCodes { semantic, acoustic })
}

pub fn split_rvq_decode(codes: &SplitCodes, q: &SplitRvq) -> Result<Vec<f64>> {
    let index = codes.semantic as usize;
    if index >= q.semantic.len() {
        return Err(input_err!(
            "semantic index {index} exceeds codebook size {}",
            q.semantic.len()
        ));
    }
    let mut out = q.semantic.centroid(index).to_vec();
    if !q.acoustic.is_empty() {
        let acoustic = rvq_decode(&codes.acoustic, &q.acoustic)?;
        for (o, a) in out.iter_mut().zip(acoustic) {
            *o += a;
        }
    }
    Ok(out)
}

/// Seeded k-means over `data`, returning `k` centroids rounded to `f32`
/// precision.
///
/// Initial centroids are `k` distinct data points drawn without replacement.
/// Empty clusters keep their previous centroid.
pub fn kmeans(data: &[Vec<f64>], k: usize, iterations: usize, seed: u64) -> Result<Codebook> {
    if data.len() < k {
        return Err(input_err!(
            "k-means needs at least {k} points, got {}",
            data.len()
        ));
    }
    let dim = data[0].len();
    if data.iter().any(|v| v.len() != dim) {
        return Err(input_err!("training vectors disagree on dimension"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids: Vec<f64> = sample(&mut rng, data.len(), k)
        .iter()
        .flat_map(|i| data[i].iter().copied())
        .collect();
    let mut assignment = vec![0usize; data.len()];
    for _ in 0..iterations {
        let cb = Codebook::from_flat(dim, centroids.clone())?;
        let mut changed = false;
        for (slot, v) in assignment.iter_mut().zip(data) {
            let (i, _) = cb.nearest(v);
            changed |= *slot != i;
            *slot = i;
        }
        let mut sums = vec![0.0; k * dim];
        let mut counts = vec![0usize; k];
        for (&i, v) in assignment.iter().zip(data) {
            counts[i] += 1;
            for (s, x) in sums[i * dim..(i + 1) * dim].iter_mut().zip(v) {
                *s += x;
            }
        }
        for (i, &n) in counts.iter().enumerate() {
            if n > 0 {
                for d in 0..dim {
                    centroids[i * dim + d] = sums[i * dim + d] / n as f64;
                }
            }
        }
        if !changed {
            break;
        }
    }
    let rounded = centroids.into_iter().map(|x| x as f32 as f64).collect();
    Codebook::from_flat(dim, rounded)
}

/// Learns one codebook per level, each by k-means over the residuals left by
/// the levels before it.
pub fn learn_codebooks(data: &[Vec<f64>], cfg: &RvqConfig, seed: u64) -> Result<Vec<Codebook>> {
    cfg.validate()?;
    if data.len() < cfg.codebook_size {
        return Err(input_err!(
            "need at least {} training vectors, got {}",
            cfg.codebook_size,
            data.len()
        ));
    }
    if let Some(v) = data.iter().find(|v| v.len() != cfg.dim) {
        return Err(input_err!(
            "training vector has dimension {}, config says {}",
            v.len(),
            cfg.dim
        ));
    }
    let mut residuals = data.to_vec();
    let mut codebooks = Vec::with_capacity(cfg.levels);
    for level in 0..cfg.levels {
        let cb = kmeans(
            &residuals,
            cfg.codebook_size,
            KMEANS_ITERATIONS,
            seed.wrapping_add(level as u64),
        )?;
        for r in residuals.iter_mut() {
            let (_, next) = vq_encode(r, &cb)?;
            *r = next;
        }
        codebooks.push(cb);
    }
    Ok(codebooks)
}

/// Learns a split quantizer: a semantic codebook over the data and an
/// acoustic RVQ with `cfg.levels - 1` levels over the semantic residuals.
pub fn learn_split_rvq(data: &[Vec<f64>], cfg: &RvqConfig, seed: u64) -> Result<SplitRvq> {
    let semantic_cfg = RvqConfig { levels: 1, ..*cfg };
    let semantic = learn_codebooks(data, &semantic_cfg, seed)?.remove(0);
    let acoustic = if cfg.levels > 1 {
        let residuals = data
            .iter()
            .map(|v| vq_encode(v, &semantic).map(|(_, r)| r))
            .collect::<Result<Vec<_>>>()?;
        let acoustic_cfg = RvqConfig {
            levels: cfg.levels - 1,
            ..*cfg
        };
        learn_codebooks(&residuals, &acoustic_cfg, seed.wrapping_add(1000))?
    } else {
        Vec::new()
    };
    SplitRvq::new(semantic, acoustic)
}

/// Writes codebooks as `magic, version, Q, N_A, D` (LE u32) followed by all
/// centroids as LE f32.
pub fn write_codebooks<W: Write>(w: &mut W, cbs: &[Codebook]) -> Result<()> {
    let first = cbs
        .first()
        .ok_or_else(|| input_err!("no codebooks to write"))?;
    let (n, dim) = (first.len(), first.dim());
    if cbs.iter().any(|cb| cb.len() != n || cb.dim() != dim) {
        return Err(input_err!("codebooks must share size and dimension"));
    }
    binio::write_u32(w, CODEBOOK_MAGIC)?;
    binio::write_u32(w, CODEBOOK_VERSION)?;
    for v in [cbs.len(), n, dim] {
        binio::write_u32(w, v as u32)?;
    }
    for cb in cbs {
        for &x in &cb.centroids {
            binio::write_f32(w, x as f32)?;
        }
    }
    Ok(())
}

pub fn read_codebooks<R: Read>(r: &mut R) -> Result<Vec<Codebook>> {
    binio::expect_header(r, CODEBOOK_MAGIC, CODEBOOK_VERSION, "codebook file")?;
    let levels = binio::read_u32(r)? as usize;
    let n = binio::read_u32(r)? as usize;
    let dim = binio::read_u32(r)? as usize;
    if levels == 0 || n == 0 || dim == 0 {
        return Err(format_err!("codebook file has an empty dimension"));
    }
    let mut out = Vec::with_capacity(levels);
    for _ in 0..levels {
        let mut values = Vec::with_capacity(n * dim);
        for _ in 0..n * dim {
            values.push(binio::read_f32(r)? as f64);
        }
        out.push(Codebook::from_flat(dim, values).map_err(|e| format_err!("{e}"))?);
    }
    binio::expect_eof(r, "codebook file")?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, StandardNormal};

    fn cb(points: &[&[f64]]) -> Codebook {
        Codebook::new(points.iter().map(|p| p.to_vec()).collect()).unwrap()
    }

    fn gaussian(n: usize, dim: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect())
            .collect()
    }

    fn assert_close(a: &[f64], b: &[f64]) {
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() < 1e-12, "{a:?} != {b:?}");
        }
    }

    #[test]
    fn vq_picks_nearest_and_returns_residual() {
        let book = cb(&[&[0.0, 0.0], &[1.0, 1.0]]);
        let (i, r) = vq_encode(&[0.9, 0.8], &book).unwrap();
        assert_eq!(i, 1);
        assert_close(&r, &[-0.1, -0.2]);

        let (i, r) = vq_encode(&[0.0, 0.0], &book).unwrap();
        assert_eq!(i, 0);
        assert_eq!(r, vec![0.0, 0.0]);
    }

    #[test]
    fn vq_ties_go_to_lowest_index() {
        let book = cb(&[&[0.0, 0.0], &[1.0, 1.0]]);
        assert_eq!(vq_encode(&[0.5, 0.5], &book).unwrap().0, 0);
    }

    #[test]
    fn vq_rejects_dimension_mismatch() {
        let book = cb(&[&[0.0, 0.0]]);
        assert!(vq_encode(&[1.0], &book).is_err());
    }

    #[test]
    fn rvq_hand_chain() {
        let cbs = vec![
            cb(&[&[0.0, 0.0], &[2.0, 2.0]]),
            cb(&[&[0.0, 0.0], &[0.5, 0.5]]),
        ];
        // 2.4 -> level 1 picks (2,2), residual 0.4 -> level 2 picks (0.5,0.5).
        let frame = rvq_encode(&[2.4, 2.4], &cbs, 2).unwrap();
        assert_eq!(frame.indices, vec![Some(1), Some(1)]);
        assert_eq!(rvq_decode(&frame, &cbs).unwrap(), vec![2.5, 2.5]);
    }

    #[test]
    fn rvq_exact_centroid_single_level() {
        let cbs = vec![cb(&[&[0.0, 0.0], &[2.0, 2.0]]), cb(&[&[0.0, 0.0], &[0.5, 0.5]])];
        let (frame, residual) = rvq_encode_with_residual(&[2.0, 2.0], &cbs, 1).unwrap();
        assert_eq!(frame.indices, vec![Some(1), None]);
        assert_eq!(residual, vec![0.0, 0.0]);
    }

    #[test]
    fn rvq_rejects_bad_level_counts() {
        let cbs = vec![cb(&[&[0.0, 0.0]])];
        assert!(rvq_encode(&[0.0, 0.0], &cbs, 0).is_err());
        assert!(rvq_encode(&[0.0, 0.0], &cbs, 2).is_err());
    }

    #[test]
    fn decode_of_absent_levels_is_zero() {
        let cbs = vec![cb(&[&[1.0, 2.0]]), cb(&[&[3.0, 4.0]])];
        let frame = QuantizedFrame { indices: vec![None, None] };
        assert_eq!(rvq_decode(&frame, &cbs).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn decode_rejects_out_of_range_index() {
        let cbs = vec![cb(&[&[1.0, 2.0]])];
        let frame = QuantizedFrame { indices: vec![Some(1)] };
        assert!(rvq_decode(&frame, &cbs).is_err());
    }

    #[test]
    fn decode_encode_is_identity_on_centroids() {
        let cbs = vec![cb(&[&[0.0, 0.0], &[1.5, -2.0], &[3.0, 1.0]])];
        for c in cbs[0].iter() {
            let frame = rvq_encode(c, &cbs, 1).unwrap();
            assert_eq!(rvq_decode(&frame, &cbs).unwrap(), c);
        }
    }

    #[test]
    fn bypass_returns_input() {
        let cbs = vec![cb(&[&[0.0, 0.0]])];
        assert_eq!(quantize(&[0.3, 0.7], &cbs, 1, true).unwrap(), vec![0.3, 0.7]);
        assert_eq!(quantize(&[0.3, 0.7], &cbs, 1, false).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn bitrate_examples() {
        let cfg = RvqConfig::new(8, 2048, 256).unwrap();
        assert_eq!(bitrate_bps(&cfg), 1100.0);
        let tiny = RvqConfig { levels: 1, codebook_size: 2, dim: 1, frame_rate_hz: 1.0 };
        assert_eq!(bitrate_bps(&tiny), 1.0);
        let doubled = RvqConfig { levels: 16, ..cfg };
        assert_eq!(bitrate_bps(&doubled), 2.0 * bitrate_bps(&cfg));
    }

    #[test]
    fn config_validation() {
        assert!(RvqConfig::new(0, 4, 2).is_err());
        assert!(RvqConfig::new(1, 1, 2).is_err());
        let bad_rate = RvqConfig { levels: 1, codebook_size: 2, dim: 1, frame_rate_hz: 0.0 };
        assert!(bad_rate.validate().is_err());
    }

    fn zero_augmented_split() -> SplitRvq {
        let semantic = cb(&[&[1.0, 0.0], &[-1.0, 0.5], &[0.2, 2.0]]);
        let acoustic = vec![
            cb(&[&[0.0, 0.0], &[0.3, 0.1], &[-0.2, 0.4]]),
            cb(&[&[0.0, 0.0], &[0.05, -0.05], &[-0.1, 0.0]]),
        ];
        SplitRvq::new(semantic, acoustic).unwrap()
    }

    #[test]
    fn split_reproduces_semantic_centroid() {
        let q = zero_augmented_split();
        let v = q.semantic.centroid(2).to_vec();
        let codes = split_rvq_encode(&v, &q).unwrap();
        assert_eq!(split_rvq_decode(&codes, &q).unwrap(), v);

        // Parallel reading: the acoustic branch sees v, so its codebooks must
        // make the zero vector v's nearest point for the same guarantee.
        let far = vec![cb(&[&[0.0, 0.0], &[50.0, 50.0]])];
        let parallel = SplitRvq::new(q.semantic.clone(), far)
            .unwrap()
            .with_acoustic_input(AcousticInput::Input);
        let codes = split_rvq_encode(&v, &parallel).unwrap();
        assert_eq!(split_rvq_decode(&codes, &parallel).unwrap(), v);
    }

    #[test]
    fn split_never_worse_than_semantic_alone() {
        let q = zero_augmented_split();
        for v in gaussian(2000, 2, 11) {
            let codes = split_rvq_encode(&v, &q).unwrap();
            let split_err = squared_distance(&v, &split_rvq_decode(&codes, &q).unwrap());
            let semantic_err = squared_distance(&v, q.semantic.centroid(codes.semantic as usize));
            assert!(split_err <= semantic_err, "{split_err} > {semantic_err} for {v:?}");
        }
    }

    #[test]
    fn split_with_seven_acoustic_levels_has_eight_indices() {
        let data = gaussian(64, 4, 3);
        let cfg = RvqConfig::new(8, 4, 4).unwrap();
        let q = learn_split_rvq(&data, &cfg, 5).unwrap();
        assert_eq!(q.acoustic.len(), 7);
        let codes = split_rvq_encode(&data[0], &q).unwrap();
        let all = codes.flatten();
        assert_eq!(all.len(), 8);
        assert!(all.iter().all(|i| matches!(i, Some(x) if (*x as usize) < 4)));
    }

    #[test]
    fn kmeans_fixed_point_on_exact_points() {
        let points = vec![vec![0.0, 1.0], vec![2.0, -1.0], vec![5.0, 5.0], vec![-3.0, 0.5]];
        let cfg = RvqConfig::new(1, 4, 2).unwrap();
        let books = learn_codebooks(&points, &cfg, 9).unwrap();
        for p in &points {
            let (_, d) = books[0].nearest(p);
            assert_eq!(d, 0.0);
        }
    }

    #[test]
    fn second_level_reduces_distortion() {
        let data = gaussian(2000, 4, 21);
        let cfg = RvqConfig::new(2, 16, 4).unwrap();
        let books = learn_codebooks(&data, &cfg, 1).unwrap();
        let distortion = |levels: usize| -> f64 {
            data.iter()
                .map(|v| {
                    let f = rvq_encode(v, &books, levels).unwrap();
                    squared_distance(v, &rvq_decode(&f, &books).unwrap())
                })
                .sum::<f64>()
                / data.len() as f64
        };
        let (one, two) = (distortion(1), distortion(2));
        assert!(two <= one, "level 2 {two} > level 1 {one}");
    }

    #[test]
    fn learning_is_seeded() {
        let data = gaussian(300, 3, 4);
        let cfg = RvqConfig::new(2, 8, 3).unwrap();
        assert_eq!(
            learn_codebooks(&data, &cfg, 42).unwrap(),
            learn_codebooks(&data, &cfg, 42).unwrap()
        );
    }

    #[test]
    fn learning_rejects_small_data() {
        let cfg = RvqConfig::new(1, 8, 2).unwrap();
        assert!(learn_codebooks(&gaussian(7, 2, 0), &cfg, 0).is_err());
    }

    #[test]
    fn codebook_file_round_trip() {
        let data = gaussian(200, 3, 8);
        let cfg = RvqConfig::new(3, 8, 3).unwrap();
        let books = learn_codebooks(&data, &cfg, 2).unwrap();
        let mut buf = Vec::new();
        write_codebooks(&mut buf, &books).unwrap();
        assert_eq!(buf.len(), 20 + 3 * 8 * 3 * 4);
        assert_eq!(read_codebooks(&mut buf.as_slice()).unwrap(), books);

        buf[0] ^= 1;
        assert!(read_codebooks(&mut buf.as_slice()).is_err());
    }
}
