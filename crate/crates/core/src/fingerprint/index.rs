use std::collections::{BTreeMap, HashMap, HashSet};

use serde::{Deserialize, Serialize};

use super::keypoints::{pack_key, tolerant_keys, Signature, SignatureParams};
use crate::error::{input_err, Result};

/// One occurrence of a key: which audio and at which anchor frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Posting {
    pub audio_id: u32,
    pub anchor: u32,
}

/// Inverted file from 26-bit key to postings sorted by `(audio_id, anchor)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SignatureIndex {
    params: SignatureParams,
    postings: HashMap<u32, Vec<Posting>>,
    names: BTreeMap<u32, String>,
    signature_counts: BTreeMap<u32, usize>,
}

/// A ranked hit: the best temporal offset for one indexed audio.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Match {
    pub audio_id: u32,
    /// Indexed anchor minus query anchor, in frames.
    pub offset: i64,
    pub votes: u32,
}

impl SignatureIndex {
    pub fn new(params: SignatureParams) -> Self {
        Self {
            params,
            postings: HashMap::new(),
            names: BTreeMap::new(),
            signature_counts: BTreeMap::new(),
        }
    }

    pub fn params(&self) -> SignatureParams {
        self.params
    }

    pub fn contains(&self, audio_id: u32) -> bool {
        self.names.contains_key(&audio_id)
    }

    /// Indexed audio ids with their names.
    pub fn names(&self) -> &BTreeMap<u32, String> {
        &self.names
    }

    pub fn name(&self, audio_id: u32) -> Option<&str> {
        self.names.get(&audio_id).map(String::as_str)
    }

    pub fn num_audios(&self) -> usize {
        self.names.len()
    }

    pub fn num_postings(&self) -> usize {
        self.postings.values().map(Vec::len).sum()
    }

    pub fn num_keys(&self) -> usize {
        self.postings.len()
    }

    pub fn postings(&self, key: u32) -> &[Posting] {
        self.postings.get(&key).map(Vec::as_slice).unwrap_or(&[])
    }

    /// Keys in ascending order with their postings.
    pub fn sorted_entries(&self) -> Vec<(u32, &[Posting])> {
        let mut keys: Vec<u32> = self.postings.keys().copied().collect();
        keys.sort_unstable();
        keys.into_iter().map(|k| (k, self.postings(k))).collect()
    }

    pub fn add(&mut self, audio_id: u32, name: impl Into<String>, sigs: &[Signature]) -> Result<()> {
        if self.contains(audio_id) {
            return Err(input_err!("audio id {audio_id} is already indexed"));
        }
        let keyed = sigs
            .iter()
            .map(|s| pack_key(s, self.params).map(|k| (k, s.anchor)))
            .collect::<Result<Vec<_>>>()?;
        let mut touched = HashSet::new();
        for (key, anchor) in keyed {
            self.postings.entry(key).or_default().push(Posting { audio_id, anchor });
            touched.insert(key);
        }
        for key in touched {
            self.postings.get_mut(&key).expect("touched").sort_unstable();
        }
        self.names.insert(audio_id, name.into());
        self.signature_counts.insert(audio_id, sigs.len());
        Ok(())
    }

    /// Inserts raw postings, used when loading an index from disk.
    pub(crate) fn insert_raw(&mut self, key: u32, postings: Vec<Posting>) {
        self.postings.insert(key, postings);
    }

    pub(crate) fn register(&mut self, audio_id: u32, name: String, signatures: usize) {
        self.names.insert(audio_id, name);
        self.signature_counts.insert(audio_id, signatures);
    }

    pub fn signature_count(&self, audio_id: u32) -> usize {
        self.signature_counts.get(&audio_id).copied().unwrap_or(0)
    }

    /// Hough voting over temporal offsets. Each query signature casts at
    /// most one vote per `(audio, offset)` pair, over its exact key or, with
    /// `tolerance = 1`, the 3x3 neighbourhood of its time gaps. An audio's
    /// score is its fullest offset bin; ties go to the smallest offset.
    pub fn query(&self, sigs: &[Signature], tolerance: u8) -> Result<Vec<Match>> {
        if tolerance > 1 {
            return Err(input_err!("tolerance must be 0 or 1, got {tolerance}"));
        }
        let mut bins: HashMap<(u32, i64), u32> = HashMap::new();
        let mut seen: HashSet<(u32, i64)> = HashSet::new();
        for s in sigs {
            let keys = if tolerance == 0 {
                vec![pack_key(s, self.params)?]
            } else {
                pack_key(s, self.params)?;
                tolerant_keys(s, self.params)
            };
            seen.clear();
            for key in keys {
                for p in self.postings(key) {
                    let delta = p.anchor as i64 - s.anchor as i64;
                    if seen.insert((p.audio_id, delta)) {
                        *bins.entry((p.audio_id, delta)).or_insert(0) += 1;
                    }
                }
            }
        }
        let mut best: HashMap<u32, (i64, u32)> = HashMap::new();
        for ((id, delta), votes) in bins {
            let e = best.entry(id).or_insert((delta, votes));
            if votes > e.1 || (votes == e.1 && delta < e.0) {
                *e = (delta, votes);
            }
        }
        let mut out: Vec<Match> = best
            .into_iter()
            .map(|(audio_id, (offset, votes))| Match {
                audio_id,
                offset,
                votes,
            })
            .collect();
        out.sort_by(|a, b| b.votes.cmp(&a.votes).then(a.audio_id.cmp(&b.audio_id)));
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sig(f: u8, anchor: u32) -> Signature {
        Signature {
            f_b: f,
            f_k: f + 1,
            f_f: f + 2,
            dt_b: 5,
            dt_f: 6,
            anchor,
        }
    }

    #[test]
    fn add_and_query() {
        let mut ix = SignatureIndex::new(SignatureParams::default());
        ix.add(7, "a", &[]).unwrap();
        assert_eq!(ix.num_postings(), 0);
        let sigs: Vec<Signature> = (0..10).map(|i| sig(i, 10 * i as u32 + 3)).collect();
        ix.add(1, "b", &sigs).unwrap();
        assert_eq!(ix.num_postings(), 10);
        assert!(ix.add(1, "again", &sigs).is_err());
        let hits = ix.query(&sigs, 0).unwrap();
        assert_eq!(hits[0], Match { audio_id: 1, offset: 0, votes: 10 });
        assert!(ix.query(&[], 1).unwrap().is_empty());
        let shifted: Vec<Signature> = sigs[2..8].iter().map(|s| Signature { anchor: s.anchor - 3, ..*s }).collect();
        assert_eq!(ix.query(&shifted, 0).unwrap()[0], Match { audio_id: 1, offset: 3, votes: 6 });
        assert!(ix.query(&sigs, 2).is_err());
    }

    #[test]
    fn tolerance_recovers_jittered_gaps() {
        let mut ix = SignatureIndex::new(SignatureParams::default());
        let sigs: Vec<Signature> = (0..5).map(|i| sig(i, 20 * i as u32)).collect();
        ix.add(0, "x", &sigs).unwrap();
        let jittered: Vec<Signature> = sigs.iter().map(|s| Signature { dt_f: s.dt_f + 1, ..*s }).collect();
        assert!(ix.query(&jittered, 0).unwrap().is_empty());
        assert_eq!(ix.query(&jittered, 1).unwrap()[0].votes, 5);
    }
}
