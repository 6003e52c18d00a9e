use serde::{Deserialize, Serialize};

use super::mel::{MelSpec, N_BANDS};
use crate::error::{input_err, Result};

/// Half-width in frames of the time filter's sliding window.
pub const TIME_FILTER_HALF_WIDTH: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Keypoint {
    pub t: u32,
    pub f: u8,
}

/// Keypoints surviving the energy, time and frequency filters, sorted by
/// frame. A point `(t, f)` is kept when `f` is the loudest band of frame
/// `t`, its value is strictly above the spectrogram mean, and it is the
/// maximum of band `f` over frames `t-4 ..= t+4` (earliest frame wins ties).
pub fn extract_constellation(spec: &MelSpec) -> Vec<Keypoint> {
    if spec.frames == 0 {
        return Vec::new();
    }
    let mean = spec.values.iter().sum::<f64>() / spec.values.len() as f64;
    let w = TIME_FILTER_HALF_WIDTH;
    let mut out = Vec::new();
    for t in 0..spec.frames {
        let frame = spec.frame(t);
        let f = (0..N_BANDS).fold(0, |b, f| if frame[f] > frame[b] { f } else { b });
        let v = frame[f];
        if v <= mean {
            continue;
        }
        let earlier = t.saturating_sub(w)..t;
        let later = t + 1..(t + w + 1).min(spec.frames);
        if earlier.into_iter().all(|u| spec.get(u, f) < v) && later.into_iter().all(|u| spec.get(u, f) <= v) {
            out.push(Keypoint { t: t as u32, f: f as u8 });
        }
    }
    out
}

/// Limits of the frame gaps between a keypoint and its neighbours.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SignatureParams {
    pub m: u32,
    #[serde(rename = "M")]
    pub big_m: u32,
}

impl Default for SignatureParams {
    fn default() -> Self {
        Self { m: 4, big_m: 20 }
    }
}

impl SignatureParams {
    pub fn new(m: u32, big_m: u32) -> Result<Self> {
        if m >= big_m {
            return Err(input_err!("need m < M, got m={m}, M={big_m}"));
        }
        if big_m - m > 16 {
            return Err(input_err!("M - m = {} does not fit 4 bits", big_m - m));
        }
        Ok(Self { m, big_m })
    }
}

/// A keypoint with its backward and forward neighbours.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Signature {
    pub f_b: u8,
    pub f_k: u8,
    pub f_f: u8,
    pub dt_b: u8,
    pub dt_f: u8,
    /// Frame of the middle keypoint.
    pub anchor: u32,
}

/// One signature per keypoint that has a backward neighbour in
/// `(t - M, t - m]` and a forward neighbour in `[t + m, t + M)`; the
/// time-closest candidate is taken on each side.
pub fn extract_signatures(points: &[Keypoint], p: SignatureParams) -> Vec<Signature> {
    let mut sorted = points.to_vec();
    sorted.sort();
    let mut out = Vec::new();
    for (i, k) in sorted.iter().enumerate() {
        let backward = sorted[..i]
            .iter()
            .rev()
            .find(|b| k.t - b.t >= p.m)
            .filter(|b| k.t - b.t < p.big_m);
        let forward = sorted[i + 1..]
            .iter()
            .find(|f| f.t - k.t >= p.m)
            .filter(|f| f.t - k.t < p.big_m);
        if let (Some(b), Some(f)) = (backward, forward) {
            out.push(Signature {
                f_b: b.f,
                f_k: k.f,
                f_f: f.f,
                dt_b: (k.t - b.t) as u8,
                dt_f: (f.t - k.t) as u8,
                anchor: k.t,
            });
        }
    }
    out
}

pub const KEY_BITS: u32 = 26;

/// `f_b | f_k | f_f | dt_b - m | dt_f - m`, most significant first.
pub fn pack_key(s: &Signature, p: SignatureParams) -> Result<u32> {
    for (name, f) in [("f_b", s.f_b), ("f_k", s.f_k), ("f_f", s.f_f)] {
        if f as usize >= N_BANDS {
            return Err(input_err!("{name}={f} is not a band index"));
        }
    }
    for (name, dt) in [("dt_b", s.dt_b), ("dt_f", s.dt_f)] {
        let dt = dt as u32;
        if dt < p.m || dt >= p.big_m {
            return Err(input_err!("{name}={dt} is outside [{}, {})", p.m, p.big_m));
        }
    }
    Ok((s.f_b as u32) << 20
        | (s.f_k as u32) << 14
        | (s.f_f as u32) << 8
        | (s.dt_b as u32 - p.m) << 4
        | (s.dt_f as u32 - p.m))
}

/// Inverse of [`pack_key`]; the anchor is set to `anchor`.
pub fn unpack_key(key: u32, anchor: u32, p: SignatureParams) -> Result<Signature> {
    if key >> KEY_BITS != 0 {
        return Err(input_err!("key {key:#x} exceeds {KEY_BITS} bits"));
    }
    let s = Signature {
        f_b: (key >> 20 & 63) as u8,
        f_k: (key >> 14 & 63) as u8,
        f_f: (key >> 8 & 63) as u8,
        dt_b: ((key >> 4 & 15) + p.m) as u8,
        dt_f: ((key & 15) + p.m) as u8,
        anchor,
    };
    if s.dt_b as u32 >= p.big_m || s.dt_f as u32 >= p.big_m {
        return Err(input_err!("key {key:#x} encodes a gap beyond M={}", p.big_m));
    }
    Ok(s)
}

/// Keys of the 3x3 `(dt_b, dt_f)` neighbourhood of `s`, clipped to `[m, M)`.
pub fn tolerant_keys(s: &Signature, p: SignatureParams) -> Vec<u32> {
    let mut keys = Vec::with_capacity(9);
    for db in -1i32..=1 {
        for df in -1i32..=1 {
            let b = s.dt_b as i32 + db;
            let f = s.dt_f as i32 + df;
            let ok = |x: i32| x >= p.m as i32 && x < p.big_m as i32;
            if ok(b) && ok(f) {
                let v = Signature {
                    dt_b: b as u8,
                    dt_f: f as u8,
                    ..*s
                };
                keys.push(pack_key(&v, p).expect("fields in range"));
            }
        }
    }
    keys
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn kp(t: u32, f: u8) -> Keypoint {
        Keypoint { t, f }
    }

    #[test]
    fn hand_worked_signature() {
        let sigs = extract_signatures(&[kp(0, 10), kp(5, 20), kp(10, 30)], SignatureParams::default());
        assert_eq!(
            sigs,
            vec![Signature {
                f_b: 10,
                f_k: 20,
                f_f: 30,
                dt_b: 5,
                dt_f: 5,
                anchor: 5
            }]
        );
        assert!(extract_signatures(&[kp(3, 1)], SignatureParams::default()).is_empty());
    }

    #[test]
    fn neighbours_respect_the_gap_window() {
        let p = SignatureParams::default();
        // Too close (3 < m) and too far (20 >= M) neighbours are ignored.
        assert!(extract_signatures(&[kp(0, 1), kp(20, 2), kp(23, 3)], p).is_empty());
        // The time-closest valid neighbour is taken.
        let sigs = extract_signatures(&[kp(0, 1), kp(6, 2), kp(8, 3), kp(10, 4), kp(14, 5), kp(29, 6)], p);
        let at_10: Vec<_> = sigs.iter().filter(|s| s.anchor == 10).collect();
        assert_eq!(at_10.len(), 1);
        assert_eq!((at_10[0].f_b, at_10[0].dt_b, at_10[0].f_f, at_10[0].dt_f), (2, 4, 5, 4));
    }

    #[test]
    fn key_extremes() {
        let p = SignatureParams::default();
        let zero = Signature { f_b: 0, f_k: 0, f_f: 0, dt_b: 4, dt_f: 4, anchor: 0 };
        assert_eq!(pack_key(&zero, p).unwrap(), 0);
        let max = Signature { f_b: 63, f_k: 63, f_f: 63, dt_b: 19, dt_f: 19, anchor: 0 };
        assert_eq!(pack_key(&max, p).unwrap(), (1 << 26) - 1);
        assert_eq!(64u64.pow(3) * 16 * 16, 1 << 26);
        assert!(pack_key(&Signature { dt_b: 20, ..max }, p).is_err());
        assert!(pack_key(&Signature { f_k: 64, ..max }, p).is_err());
        assert!(pack_key(&Signature { dt_f: 3, ..max }, p).is_err());
        assert!(unpack_key(1 << 26, 0, p).is_err());
    }

    #[test]
    fn tolerance_neighbourhood_is_clipped() {
        let p = SignatureParams::default();
        let corner = Signature { f_b: 1, f_k: 2, f_f: 3, dt_b: 4, dt_f: 19, anchor: 0 };
        assert_eq!(tolerant_keys(&corner, p).len(), 4);
        let inner = Signature { dt_b: 10, dt_f: 10, ..corner };
        let keys = tolerant_keys(&inner, p);
        assert_eq!(keys.len(), 9);
        assert!(keys.contains(&pack_key(&inner, p).unwrap()));
    }

    fn spec_from(frames: usize, f: impl Fn(usize, usize) -> f64) -> MelSpec {
        let values = (0..frames).flat_map(|t| (0..N_BANDS).map(move |b| (t, b))).map(|(t, b)| f(t, b)).collect();
        MelSpec::new(frames, values).unwrap()
    }

    #[test]
    fn constellation_filters() {
        assert!(extract_constellation(&spec_from(30, |_, _| 1.5)).is_empty());
        let peak = spec_from(30, |t, b| if (t, b) == (12, 40) { 9.0 } else { 0.0 });
        assert_eq!(extract_constellation(&peak), vec![kp(12, 40)]);
        // Equal values in one band: only the earliest of the run survives.
        let plateau = spec_from(30, |t, b| if b == 5 && (10..13).contains(&t) { 3.0 } else { 0.0 });
        assert_eq!(extract_constellation(&plateau), vec![kp(10, 5)]);
    }

    proptest! {
        #[test]
        fn pack_round_trips(f_b in 0u8..64, f_k in 0u8..64, f_f in 0u8..64, dt_b in 4u8..20, dt_f in 4u8..20, anchor: u32) {
            let p = SignatureParams::default();
            let s = Signature { f_b, f_k, f_f, dt_b, dt_f, anchor };
            let key = pack_key(&s, p).unwrap();
            prop_assert!(key < 1 << 26);
            prop_assert_eq!(unpack_key(key, anchor, p).unwrap(), s);
        }

        #[test]
        fn at_most_one_keypoint_per_frame(values in prop::collection::vec(-5.0f64..5.0, 64 * 20)) {
            let spec = MelSpec::new(20, values).unwrap();
            let points = extract_constellation(&spec);
            prop_assert!(points.windows(2).all(|w| w[0].t < w[1].t));
        }
    }
}
