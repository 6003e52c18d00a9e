use std::collections::BTreeSet;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::index::SignatureIndex;
use super::keypoints::{pack_key, tolerant_keys, unpack_key, Signature, SignatureParams};
use crate::error::{input_err, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DedupParams {
    /// Other clips a signature must be found in to count as duplicated.
    pub min_matches: usize,
    /// Votes at one offset needed to call two clips matching.
    pub threshold: u32,
    pub tolerance: u8,
}

impl Default for DedupParams {
    fn default() -> Self {
        Self {
            min_matches: 10,
            threshold: 5,
            tolerance: 1,
        }
    }
}

/// Signatures that recur across the corpus, fused onto one time axis.
#[derive(Debug, Clone, PartialEq)]
pub struct DuplicateSet {
    params: SignatureParams,
    threshold: u32,
    tolerance: u8,
    /// Unique `(key, time)` pairs.
    entries: Vec<(u32, u32)>,
    /// Clips that contributed signatures.
    sources: Vec<u32>,
    index: SignatureIndex,
}

impl DuplicateSet {
    pub fn from_entries(
        params: SignatureParams,
        entries: impl IntoIterator<Item = (u32, u32)>,
        threshold: u32,
        tolerance: u8,
    ) -> Result<Self> {
        let entries: Vec<(u32, u32)> = entries.into_iter().collect::<BTreeSet<_>>().into_iter().collect();
        let sigs = entries
            .iter()
            .map(|&(k, t)| unpack_key(k, t, params))
            .collect::<Result<Vec<_>>>()?;
        let mut index = SignatureIndex::new(params);
        index.add(0, "duplicates", &sigs)?;
        Ok(Self {
            params,
            threshold,
            tolerance,
            entries,
            sources: Vec::new(),
            index,
        })
    }

    pub fn entries(&self) -> &[(u32, u32)] {
        &self.entries
    }

    pub fn signatures(&self) -> Vec<Signature> {
        self.entries
            .iter()
            .map(|&(k, t)| unpack_key(k, t, self.params).expect("validated on construction"))
            .collect()
    }

    pub fn sources(&self) -> &[u32] {
        &self.sources
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn threshold(&self) -> u32 {
        self.threshold
    }

    pub fn params(&self) -> SignatureParams {
        self.params
    }

    /// Best temporally consistent vote count of `sigs` against the set.
    pub fn score(&self, sigs: &[Signature]) -> Result<u32> {
        if self.entries.is_empty() || sigs.is_empty() {
            return Ok(0);
        }
        Ok(self
            .index
            .query(sigs, self.tolerance)?
            .first()
            .map_or(0, |m| m.votes))
    }
}

/// `(flag, score)`: flagged when the score reaches the set's threshold.
pub fn is_duplicate(sigs: &[Signature], dup: &DuplicateSet) -> Result<(bool, u32)> {
    let score = dup.score(sigs)?;
    Ok((score > 0 && score >= dup.threshold, score))
}

/// Signatures of `sigs` (clip `id`) found at a consistent offset in at
/// least `min_matches` other clips.
fn recurring(ix: &SignatureIndex, id: u32, sigs: &[Signature], p: &DedupParams) -> Result<Vec<Signature>> {
    let sp = ix.params();
    let mut partners = vec![0usize; sigs.len()];
    for hit in ix.query(sigs, p.tolerance)? {
        if hit.audio_id == id || hit.votes < p.threshold {
            continue;
        }
        for (count, s) in partners.iter_mut().zip(sigs) {
            let keys = if p.tolerance == 0 {
                vec![pack_key(s, sp)?]
            } else {
                tolerant_keys(s, sp)
            };
            let target = s.anchor as i64 + hit.offset;
            let found = keys.iter().any(|&k| {
                ix.postings(k)
                    .iter()
                    .any(|q| q.audio_id == hit.audio_id && q.anchor as i64 == target)
            });
            *count += usize::from(found);
        }
    }
    Ok(sigs
        .iter()
        .zip(partners)
        .filter(|(_, c)| *c >= p.min_matches)
        .map(|(s, _)| *s)
        .collect())
}

/// Cross-matches every clip against the corpus and fuses the recurring
/// signatures. Clips are aligned onto the fused time axis by their best
/// offset; content that matches nothing already fused is appended after it.
pub fn build_duplicate_set(
    corpus: &[(u32, Vec<Signature>)],
    sp: SignatureParams,
    p: &DedupParams,
) -> Result<DuplicateSet> {
    if corpus.is_empty() {
        return Err(input_err!("empty corpus"));
    }
    if p.tolerance > 1 {
        return Err(input_err!("tolerance must be 0 or 1"));
    }
    let mut ix = SignatureIndex::new(sp);
    for (id, sigs) in corpus {
        ix.add(*id, id.to_string(), sigs)?;
    }
    let mut kept: Vec<(u32, Vec<Signature>)> = corpus
        .par_iter()
        .map(|(id, sigs)| recurring(&ix, *id, sigs, p).map(|k| (*id, k)))
        .collect::<Result<Vec<_>>>()?;
    kept.retain(|(_, k)| !k.is_empty());
    kept.sort_by_key(|(id, _)| *id);

    let mut entries: BTreeSet<(u32, u32)> = BTreeSet::new();
    let mut sources = Vec::new();
    for (id, sigs) in &kept {
        let shift: i64 = if entries.is_empty() {
            0
        } else {
            let current = DuplicateSet::from_entries(sp, entries.iter().copied(), p.threshold, p.tolerance)?;
            let best = current.index.query(sigs, p.tolerance)?.first().copied();
            match best {
                Some(m) if m.votes >= p.threshold => m.offset,
                _ => {
                    let end = entries.iter().map(|e| e.1).max().unwrap_or(0) as i64;
                    let start = sigs.iter().map(|s| s.anchor).min().unwrap_or(0) as i64;
                    end + 2 * sp.big_m as i64 - start
                }
            }
        };
        for s in sigs {
            let t = s.anchor as i64 + shift;
            if t >= 0 && t <= u32::MAX as i64 {
                entries.insert((pack_key(s, sp)?, t as u32));
            }
        }
        sources.push(*id);
    }
    let mut set = DuplicateSet::from_entries(sp, entries, p.threshold, p.tolerance)?;
    set.sources = sources;
    Ok(set)
}
