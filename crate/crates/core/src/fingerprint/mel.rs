use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{input_err, Result};

pub const N_BANDS: usize = 64;
pub const FRAME_RATE_HZ: usize = 40;
pub const FFT_SIZE: usize = 1024;
pub const F_MIN_HZ: f64 = 200.0;
pub const F_MAX_HZ: f64 = 3000.0;
pub const LOG_FLOOR: f64 = 1e-10;

/// Log-mel magnitudes, `frames x 64`, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MelSpec {
    pub frames: usize,
    pub values: Vec<f64>,
}

impl MelSpec {
    pub fn new(frames: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != frames * N_BANDS {
            return Err(input_err!(
                "{} values for {frames} frames of {N_BANDS} bands",
                values.len()
            ));
        }
        Ok(Self { frames, values })
    }

    pub fn get(&self, t: usize, f: usize) -> f64 {
        self.values[t * N_BANDS + f]
    }

    pub fn frame(&self, t: usize) -> &[f64] {
        &self.values[t * N_BANDS..(t + 1) * N_BANDS]
    }
}

pub fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

pub fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Lower edge, centre and upper edge (Hz) of every band.
pub fn band_edges() -> Vec<(f64, f64, f64)> {
    let (lo, hi) = (hz_to_mel(F_MIN_HZ), hz_to_mel(F_MAX_HZ));
    let pts: Vec<f64> = (0..N_BANDS + 2)
        .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (N_BANDS + 1) as f64))
        .collect();
    (0..N_BANDS).map(|b| (pts[b], pts[b + 1], pts[b + 2])).collect()
}

/// Triangular, area-normalized filters over the `FFT_SIZE / 2 + 1` bins.
fn filterbank(sample_rate: u32) -> Vec<Vec<(usize, f64)>> {
    let bin_hz = sample_rate as f64 / FFT_SIZE as f64;
    band_edges()
        .into_iter()
        .map(|(lo, c, hi)| {
            let norm = 2.0 / (hi - lo);
            (0..=FFT_SIZE / 2)
                .filter_map(|bin| {
                    let f = bin as f64 * bin_hz;
                    let w = if f > lo && f <= c {
                        (f - lo) / (c - lo)
                    } else if f > c && f < hi {
                        (hi - f) / (hi - c)
                    } else {
                        0.0
                    };
                    (w > 0.0).then_some((bin, w * norm))
                })
                .collect()
        })
        .collect()
}

/// Computes log-mel spectrograms for one sample rate.
pub struct MelAnalyzer {
    sample_rate: u32,
    hop: usize,
    window: Vec<f64>,
    filters: Vec<Vec<(usize, f64)>>,
    fft: Arc<dyn Fft<f64>>,
}

impl MelAnalyzer {
    /// Supports 16 and 24 kHz, where the 40 Hz hop is a whole number of
    /// samples.
    pub fn new(sample_rate: u32) -> Result<Self> {
        if !matches!(sample_rate, 16_000 | 24_000) {
            return Err(input_err!(
                "unsupported sample rate {sample_rate} (expected 16000 or 24000)"
            ));
        }
        let window = (0..FFT_SIZE)
            .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / FFT_SIZE as f64).cos())
            .collect();
        Ok(Self {
            sample_rate,
            hop: sample_rate as usize / FRAME_RATE_HZ,
            window,
            filters: filterbank(sample_rate),
            fft: FftPlanner::new().plan_fft_forward(FFT_SIZE),
        })
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn hop(&self) -> usize {
        self.hop
    }

    /// Frame `t` covers samples `[t * hop, t * hop + 1024)`, zero-padded
    /// past the end; there are `floor(len / hop)` frames.
    pub fn analyze(&self, samples: &[f32]) -> Result<MelSpec> {
        if samples.is_empty() {
            return Err(input_err!("empty waveform"));
        }
        let frames = samples.len() / self.hop;
        let mut values = Vec::with_capacity(frames * N_BANDS);
        let mut buf = vec![Complex::new(0.0, 0.0); FFT_SIZE];
        let mut mag = vec![0.0; FFT_SIZE / 2 + 1];
        for t in 0..frames {
            let start = t * self.hop;
            for (i, c) in buf.iter_mut().enumerate() {
                let x = samples.get(start + i).copied().unwrap_or(0.0) as f64;
                *c = Complex::new(x * self.window[i], 0.0);
            }
            self.fft.process(&mut buf);
            for (m, c) in mag.iter_mut().zip(&buf) {
                *m = c.norm();
            }
            for filter in &self.filters {
                let e: f64 = filter.iter().map(|&(bin, w)| w * mag[bin]).sum();
                values.push(e.max(LOG_FLOOR).ln());
            }
        }
        MelSpec::new(frames, values)
    }
}

pub fn mel_spectrogram(samples: &[f32], sample_rate: u32) -> Result<MelSpec> {
    MelAnalyzer::new(sample_rate)?.analyze(samples)
}
