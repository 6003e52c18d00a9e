//! Delay patterns and the joint multi-stream token grid.
//!
//! A [`TokenGrid`] has one row per model step and one column per stream.
//! Grid ids reserve `0` as the deterministic initial token: rows that a
//! delayed stream has not reached yet hold `0`, and vocabulary id `v` is
//! stored as `v + 1` by [`joint_layout`]. Row `r` of a grid is step `r + 1`
//! of the model; the all-initial step 0 is implicit.

use std::io::{BufRead, Read, Write};

use serde::{Deserialize, Serialize};

use crate::alignment::TextStream;
use crate::binio::{self, magic};
use crate::error::{format_err, input_err, Result};
use crate::{FRAME_MS, FRAME_RATE_HZ};

/// The reserved initial token.
pub const INITIAL_ID: u32 = 0;

const GRID_MAGIC: u32 = magic(b"TGRD");
const GRID_VERSION: u32 = 1;

/// Maps a vocabulary id to its grid id.
pub fn to_grid_id(vocab_id: u32) -> u32 {
    vocab_id + 1
}

/// Inverse of [`to_grid_id`]; `None` for the initial token.
pub fn from_grid_id(grid_id: u32) -> Option<u32> {
    grid_id.checked_sub(1)
}

/// Per-stream step delays of one speaker's audio, plus the signed text offset
/// used by the ASR (text behind audio, positive) and TTS (audio behind text,
/// negative) layouts.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DelayPattern {
    pub delays: Vec<usize>,
    pub text_delay_steps: i32,
}

impl DelayPattern {
    pub fn new(delays: Vec<usize>) -> Result<Self> {
        match delays.first() {
            None => Err(input_err!("delay pattern needs at least one stream")),
            Some(&d) if d != 0 => Err(input_err!(
                "the semantic stream must not be delayed (got {d})"
            )),
            Some(_) => Ok(Self {
                delays,
                text_delay_steps: 0,
            }),
        }
    }

    /// `[0, tau, tau, ...]` over `q_levels` streams.
    pub fn acoustic(q_levels: usize, tau: usize) -> Result<Self> {
        if q_levels == 0 {
            return Err(input_err!("need at least one audio level"));
        }
        Self::new(
            std::iter::once(0)
                .chain(std::iter::repeat_n(tau, q_levels - 1))
                .collect(),
        )
    }

    /// Parses a comma-separated list such as `0,2,2,2`.
    pub fn parse(text: &str) -> Result<Self> {
        let delays = text
            .split(',')
            .map(|p| {
                p.trim()
                    .parse::<usize>()
                    .map_err(|e| input_err!("bad delay {p:?}: {e}"))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(delays)
    }

    pub fn with_text_delay(mut self, steps: i32) -> Self {
        self.text_delay_steps = steps;
        self
    }

    pub fn max_delay(&self) -> usize {
        self.delays.iter().copied().max().unwrap_or(0)
    }
}

/// Converts a signed text offset in seconds into steps, flooring the
/// magnitude: `±0.6 s` becomes `±7` steps at 12.5 Hz.
pub fn text_delay_steps(seconds: f64, frame_rate_hz: f64) -> i32 {
    let steps = (seconds.abs() * frame_rate_hz + 1e-9).floor() as i32;
    if seconds < 0.0 {
        -steps
    } else {
        steps
    }
}

/// Theoretical latency of a delay pattern: `(max delay + 1)` frames.
pub fn latency_ms(pattern: &DelayPattern, frame_ms: u32) -> u32 {
    (pattern.max_delay() as u32 + 1) * frame_ms
}

/// Shape of a joint sequence.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StreamSpec {
    pub q_levels: usize,
    pub speakers: usize,
    pub text_present: bool,
    /// Vocabulary sizes `N_k`, one per joint stream (text first).
    pub cardinalities: Vec<usize>,
    pub frame_ms: u32,
}

impl StreamSpec {
    pub fn new(
        q_levels: usize,
        speakers: usize,
        text_cardinality: Option<usize>,
        audio_cardinality: usize,
    ) -> Result<Self> {
        if q_levels == 0 || speakers == 0 {
            return Err(input_err!("need at least one level and one speaker"));
        }
        let mut cardinalities = Vec::new();
        cardinalities.extend(text_cardinality);
        cardinalities.extend(std::iter::repeat_n(audio_cardinality, speakers * q_levels));
        let spec = Self {
            q_levels,
            speakers,
            text_present: text_cardinality.is_some(),
            cardinalities,
            frame_ms: FRAME_MS,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Two speakers with an Inner-Monologue text stream: `K = 2Q + 1`.
    pub fn dialogue(q_levels: usize, text_cardinality: usize, audio_cardinality: usize) -> Result<Self> {
        Self::new(q_levels, 2, Some(text_cardinality), audio_cardinality)
    }

    pub fn validate(&self) -> Result<()> {
        let expected = usize::from(self.text_present) + self.speakers * self.q_levels;
        if self.cardinalities.len() != expected {
            return Err(input_err!(
                "{} cardinalities for {expected} streams",
                self.cardinalities.len()
            ));
        }
        if let Some(n) = self.cardinalities.iter().find(|&&n| n < 2) {
            return Err(input_err!("stream cardinality {n} is below 2"));
        }
        Ok(())
    }

    /// Number of joint streams `K`.
    pub fn num_streams(&self) -> usize {
        self.cardinalities.len()
    }

    /// Tokens materialized per step, i.e. `K`.
    pub fn tokens_per_step(&self) -> usize {
        self.num_streams()
    }

    /// Grid cardinalities: vocabulary sizes plus the reserved initial id.
    pub fn grid_cardinalities(&self) -> Vec<usize> {
        self.cardinalities.iter().map(|n| n + 1).collect()
    }

    /// Per-stream delays of the joint grid for `pattern`.
    pub fn joint_delays(&self, pattern: &DelayPattern) -> Result<Vec<usize>> {
        if pattern.delays.len() != self.q_levels {
            return Err(input_err!(
                "pattern has {} delays for {} levels",
                pattern.delays.len(),
                self.q_levels
            ));
        }
        let text_lag = pattern.text_delay_steps.max(0) as usize;
        let audio_lag = (-pattern.text_delay_steps).max(0) as usize;
        let mut delays = Vec::with_capacity(self.num_streams());
        if self.text_present {
            delays.push(text_lag);
        }
        for _ in 0..self.speakers {
            delays.extend(pattern.delays.iter().map(|d| d + audio_lag));
        }
        Ok(delays)
    }
}

/// An `S x K` matrix of grid ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenGrid {
    steps: usize,
    tokens: Vec<u32>,
    cardinalities: Vec<usize>,
}

impl TokenGrid {
    /// Builds a grid from row-major ids, checking each against its stream's
    /// cardinality.
    pub fn from_flat(tokens: Vec<u32>, cardinalities: Vec<usize>) -> Result<Self> {
        let k = cardinalities.len();
        if k == 0 {
            return Err(input_err!("a grid needs at least one stream"));
        }
        if !tokens.len().is_multiple_of(k) {
            return Err(input_err!("{} tokens do not fill rows of {k}", tokens.len()));
        }
        for (i, &t) in tokens.iter().enumerate() {
            let n = cardinalities[i % k];
            if t as usize >= n {
                return Err(input_err!(
                    "token {t} at step {} stream {} exceeds cardinality {n}",
                    i / k,
                    i % k
                ));
            }
        }
        Ok(Self {
            steps: tokens.len() / k,
            tokens,
            cardinalities,
        })
    }

    pub fn from_rows(rows: &[Vec<u32>], cardinalities: Vec<usize>) -> Result<Self> {
        let k = cardinalities.len();
        if let Some(r) = rows.iter().find(|r| r.len() != k) {
            return Err(input_err!("row of length {} in a {k}-stream grid", r.len()));
        }
        Self::from_flat(rows.concat(), cardinalities)
    }

    pub fn empty(cardinalities: Vec<usize>) -> Self {
        Self {
            steps: 0,
            tokens: Vec::new(),
            cardinalities,
        }
    }

    pub fn initial_id(&self) -> u32 {
        INITIAL_ID
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn num_streams(&self) -> usize {
        self.cardinalities.len()
    }

    pub fn cardinalities(&self) -> &[usize] {
        &self.cardinalities
    }

    pub fn get(&self, step: usize, stream: usize) -> u32 {
        self.tokens[step * self.num_streams() + stream]
    }

    pub fn row(&self, step: usize) -> &[u32] {
        let k = self.num_streams();
        &self.tokens[step * k..(step + 1) * k]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[u32]> {
        self.tokens.chunks_exact(self.num_streams())
    }

    pub fn column(&self, stream: usize) -> Vec<u32> {
        self.rows().map(|r| r[stream]).collect()
    }

    pub fn as_flat(&self) -> &[u32] {
        &self.tokens
    }

    /// Appends a row after checking cardinalities.
    pub fn push_row(&mut self, row: &[u32]) -> Result<()> {
        if row.len() != self.num_streams() {
            return Err(input_err!(
                "row of length {} in a {}-stream grid",
                row.len(),
                self.num_streams()
            ));
        }
        for (k, (&t, &n)) in row.iter().zip(&self.cardinalities).enumerate() {
            if t as usize >= n {
                return Err(input_err!("token {t} in stream {k} exceeds cardinality {n}"));
            }
        }
        self.tokens.extend_from_slice(row);
        self.steps += 1;
        Ok(())
    }

    /// First `steps` rows.
    pub fn truncated(&self, steps: usize) -> Self {
        let steps = steps.min(self.steps);
        Self {
            steps,
            tokens: self.tokens[..steps * self.num_streams()].to_vec(),
            cardinalities: self.cardinalities.clone(),
        }
    }
}

/// Lays streams out with per-stream delays: `V[s][k] = A[s - d_k][k]` and
/// the initial id elsewhere. The grid has `T + max(d)` rows.
pub fn apply_stream_delays(
    streams: &[Vec<u32>],
    delays: &[usize],
    cardinalities: Vec<usize>,
) -> Result<TokenGrid> {
    if streams.len() != delays.len() || streams.len() != cardinalities.len() {
        return Err(input_err!(
            "{} streams, {} delays and {} cardinalities",
            streams.len(),
            delays.len(),
            cardinalities.len()
        ));
    }
    let len = streams.first().map(Vec::len).unwrap_or(0);
    if let Some((k, s)) = streams.iter().enumerate().find(|(_, s)| s.len() != len) {
        return Err(input_err!(
            "stream {k} has length {}, stream 0 has {len}",
            s.len()
        ));
    }
    let k = streams.len();
    let steps = len + delays.iter().copied().max().unwrap_or(0);
    let mut tokens = vec![INITIAL_ID; steps * k];
    for (q, (stream, &d)) in streams.iter().zip(delays).enumerate() {
        for (t, &id) in stream.iter().enumerate() {
            tokens[(t + d) * k + q] = id;
        }
    }
    TokenGrid::from_flat(tokens, cardinalities)
}

/// Inverse of [`apply_stream_delays`]: returns `S - max(d)` tokens per stream.
pub fn remove_stream_delays(grid: &TokenGrid, delays: &[usize]) -> Result<Vec<Vec<u32>>> {
    if delays.len() != grid.num_streams() {
        return Err(input_err!(
            "{} delays for a {}-stream grid",
            delays.len(),
            grid.num_streams()
        ));
    }
    let max = delays.iter().copied().max().unwrap_or(0);
    for (k, &d) in delays.iter().enumerate() {
        for s in 0..d.min(grid.steps()) {
            if grid.get(s, k) != INITIAL_ID {
                return Err(input_err!(
                    "stream {k} has token {} at step {s}, inside its {d}-step delay",
                    grid.get(s, k)
                ));
            }
        }
    }
    let len = grid.steps().saturating_sub(max);
    Ok(delays
        .iter()
        .enumerate()
        .map(|(k, &d)| (0..len).map(|t| grid.get(t + d, k)).collect())
        .collect())
}

/// Applies one speaker's delay pattern to its `Q` streams.
pub fn apply_delay(
    streams: &[Vec<u32>],
    pattern: &DelayPattern,
    cardinalities: Vec<usize>,
) -> Result<TokenGrid> {
    apply_stream_delays(streams, &pattern.delays, cardinalities)
}

pub fn remove_delay(grid: &TokenGrid, pattern: &DelayPattern) -> Result<Vec<Vec<u32>>> {
    remove_stream_delays(grid, &pattern.delays)
}

/// Builds the joint grid: text, the model's `Q` audio streams, then the
/// user's `Q` audio streams, each delayed as `pattern` says.
///
/// Inputs carry vocabulary ids (`text` as a [`TextStream`], audio as
/// `Q` streams of `T` codes); the grid stores them shifted by one.
pub fn joint_layout(
    text: Option<&TextStream>,
    agent: &[Vec<u32>],
    user: &[Vec<u32>],
    pattern: &DelayPattern,
    spec: &StreamSpec,
) -> Result<TokenGrid> {
    spec.validate()?;
    if text.is_some() != spec.text_present {
        return Err(input_err!("text stream presence does not match the stream spec"));
    }
    let speakers: Vec<&[Vec<u32>]> = match spec.speakers {
        1 => vec![agent],
        2 => vec![agent, user],
        n => return Err(input_err!("unsupported speaker count {n}")),
    };
    let mut streams: Vec<Vec<u32>> = Vec::with_capacity(spec.num_streams());
    if let Some(text) = text {
        streams.push(text.tokens.clone());
    }
    for (i, audio) in speakers.iter().enumerate() {
        if audio.len() != spec.q_levels {
            return Err(input_err!(
                "speaker {i} has {} streams, expected {}",
                audio.len(),
                spec.q_levels
            ));
        }
        streams.extend(audio.iter().cloned());
    }
    for (k, (stream, &n)) in streams.iter_mut().zip(&spec.cardinalities).enumerate() {
        for id in stream.iter_mut() {
            if *id as usize >= n {
                return Err(input_err!("token {id} in stream {k} exceeds vocabulary {n}"));
            }
            *id = to_grid_id(*id);
        }
    }
    let delays = spec.joint_delays(pattern)?;
    apply_stream_delays(&streams, &delays, spec.grid_cardinalities())
}

/// Row-major flattening: all `K` tokens of a step before the next step.
pub fn flatten(grid: &TokenGrid) -> Vec<u32> {
    grid.as_flat().to_vec()
}

pub fn unflatten(seq: &[u32], cardinalities: Vec<usize>) -> Result<TokenGrid> {
    TokenGrid::from_flat(seq.to_vec(), cardinalities)
}

/// Number of sequential predictions needed for `grid`: `(temporal, flattened)`.
pub fn prediction_steps(grid: &TokenGrid) -> (usize, usize) {
    (grid.steps(), grid.steps() * grid.num_streams())
}

/// Writes `magic, version, S, K, N_1..N_K` as LE u32 followed by `S*K` LE
/// u16 ids.
pub fn write_grid_binary<W: Write>(w: &mut W, grid: &TokenGrid) -> Result<()> {
    if let Some(n) = grid.cardinalities.iter().find(|&&n| n > 1 << 16) {
        return Err(input_err!("cardinality {n} does not fit 16-bit ids"));
    }
    binio::write_u32(w, GRID_MAGIC)?;
    binio::write_u32(w, GRID_VERSION)?;
    binio::write_u32(w, grid.steps as u32)?;
    binio::write_u32(w, grid.num_streams() as u32)?;
    for &n in &grid.cardinalities {
        binio::write_u32(w, n as u32)?;
    }
    for &t in &grid.tokens {
        binio::write_u16(w, t as u16)?;
    }
    Ok(())
}

pub fn read_grid_binary<R: Read>(r: &mut R) -> Result<TokenGrid> {
    binio::expect_header(r, GRID_MAGIC, GRID_VERSION, "grid file")?;
    let steps = binio::read_u32(r)? as usize;
    let k = binio::read_u32(r)? as usize;
    let cardinalities = (0..k)
        .map(|_| binio::read_u32(r).map(|n| n as usize))
        .collect::<Result<Vec<_>>>()?;
    let tokens = (0..steps * k)
        .map(|_| binio::read_u16(r).map(u32::from))
        .collect::<Result<Vec<_>>>()?;
    binio::expect_eof(r, "grid file")?;
    TokenGrid::from_flat(tokens, cardinalities).map_err(|e| format_err!("grid file: {e}"))
}

/// One JSON array per step.
pub fn write_grid_jsonl<W: Write>(w: &mut W, grid: &TokenGrid) -> Result<()> {
    for row in grid.rows() {
        serde_json::to_writer(&mut *w, row)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

/// Reads JSONL rows. Without explicit cardinalities each stream gets
/// `max id + 1`.
pub fn read_grid_jsonl<R: BufRead>(r: R, cardinalities: Option<Vec<usize>>) -> Result<TokenGrid> {
    let mut rows: Vec<Vec<u32>> = Vec::new();
    for (n, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        rows.push(serde_json::from_str(&line).map_err(|e| format_err!("line {}: {e}", n + 1))?);
    }
    let cardinalities = match cardinalities {
        Some(c) => c,
        None => {
            let k = rows
                .first()
                .map(Vec::len)
                .ok_or_else(|| format_err!("empty grid file"))?;
            (0..k)
                .map(|s| rows.iter().filter_map(|r| r.get(s)).max().map_or(1, |&m| m as usize + 1))
                .collect()
        }
    };
    TokenGrid::from_rows(&rows, cardinalities)
}

/// Frame count of a duration at the grid rate.
pub fn frames_for_seconds(seconds: f64) -> usize {
    (seconds * FRAME_RATE_HZ).ceil() as usize
}
