//! Frame-aligned text streams.
//!
//! A text stream holds one token per grid frame. Words are written at the
//! frame where they start, the gaps are filled with `PAD`, and an `EPAD`
//! token announces the end of the padding right before each word.

use std::io::BufRead;

use serde::{Deserialize, Serialize};

use crate::error::{input_err, Result};
use crate::FRAME_RATE_HZ;

/// Guards `floor` against representation error, e.g. `0.56 * 12.5`.
const INDEX_EPSILON: f64 = 1e-9;

/// Ids of the two padding tokens of the text vocabulary.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpecialTokens {
    pub pad_id: u32,
    pub epad_id: u32,
}

impl SpecialTokens {
    pub fn new(pad_id: u32, epad_id: u32) -> Result<Self> {
        if pad_id == epad_id {
            return Err(input_err!("PAD and EPAD must differ (both {pad_id})"));
        }
        Ok(Self { pad_id, epad_id })
    }

    pub fn is_special(&self, id: u32) -> bool {
        id == self.pad_id || id == self.epad_id
    }
}

/// One transcribed word: its text tokens and start time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WordTiming {
    #[serde(default)]
    pub word: String,
    pub tokens: Vec<u32>,
    #[serde(rename = "start")]
    pub start_time_s: f64,
}

impl WordTiming {
    pub fn new(word: impl Into<String>, tokens: Vec<u32>, start_time_s: f64) -> Self {
        Self {
            word: word.into(),
            tokens,
            start_time_s,
        }
    }
}

/// A text stream `W` of length `T`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TextStream {
    pub tokens: Vec<u32>,
}

impl TextStream {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// Frame index of a timestamp: `floor(t * frame_rate_hz)`.
pub fn time_to_index(t: f64, frame_rate_hz: f64) -> Result<usize> {
    if !t.is_finite() || t < 0.0 {
        return Err(input_err!("timestamp must be a finite non-negative value, got {t}"));
    }
    Ok((t * frame_rate_hz + INDEX_EPSILON).floor() as usize)
}

/// Lays `words` out on a `frames`-long stream at 12.5 Hz.
pub fn build_text_stream(words: &[WordTiming], frames: usize, sp: SpecialTokens) -> Result<TextStream> {
    build_text_stream_at(words, frames, sp, FRAME_RATE_HZ)
}

/// Lays `words` out on a `frames`-long stream.
///
/// Word `i` with start index `t_i` occupies `t_i..t_i+n_i` and gets an `EPAD`
/// at `t_i - 1`. Words starting at index 0 or 1 are shifted to start at 2 so
/// their `EPAD` lands on index 1. An `EPAD` that would land on a token of the
/// previous word is dropped. Overlapping words are rejected.
pub fn build_text_stream_at(
    words: &[WordTiming],
    frames: usize,
    sp: SpecialTokens,
    frame_rate_hz: f64,
) -> Result<TextStream> {
    let mut tokens = vec![sp.pad_id; frames];
    // Which word owns each slot, for overlap reporting.
    let mut owner: Vec<Option<usize>> = vec![None; frames];
    let mut last_start: Option<usize> = None;

    for (i, w) in words.iter().enumerate() {
        if w.tokens.is_empty() {
            return Err(input_err!("word {i} ({:?}) has no tokens", w.word));
        }
        if let Some(&t) = w.tokens.iter().find(|&&t| sp.is_special(t)) {
            return Err(input_err!("word {i} ({:?}) uses reserved token {t}", w.word));
        }
        let index = time_to_index(w.start_time_s, frame_rate_hz)?;
        if let Some(prev) = last_start {
            if index <= prev {
                return Err(input_err!(
                    "word {i} ({:?}) starts at frame {index}, not after the previous word (frame {prev})",
                    w.word
                ));
            }
        }
        last_start = Some(index);
        if index >= frames {
            return Err(input_err!(
                "word {i} ({:?}) starts at frame {index}, beyond the {frames}-frame stream",
                w.word
            ));
        }
        let (epad_at, start) = if index <= 1 { (1, 2) } else { (index - 1, index) };
        let end = start + w.tokens.len();
        if end > frames {
            return Err(input_err!(
                "word {i} ({:?}) spans frames {start}..{end}, past the end of the {frames}-frame stream",
                w.word
            ));
        }
        if let Some(j) = owner[start..end].iter().flatten().next() {
            return Err(input_err!(
                "word {i} ({:?}) at frames {start}..{end} overlaps word {j} ({:?})",
                w.word,
                words[*j].word
            ));
        }
        if owner[epad_at].is_none() {
            tokens[epad_at] = sp.epad_id;
        }
        tokens[start..end].copy_from_slice(&w.tokens);
        owner[start..end].fill(Some(i));
    }
    Ok(TextStream { tokens })
}

/// Maximal runs of word tokens with the index of their first token.
pub fn extract_words(stream: &TextStream, sp: SpecialTokens) -> Vec<(Vec<u32>, usize)> {
    let mut out: Vec<(Vec<u32>, usize)> = Vec::new();
    let mut current: Option<(Vec<u32>, usize)> = None;
    for (t, &id) in stream.tokens.iter().enumerate() {
        if sp.is_special(id) {
            out.extend(current.take());
        } else {
            current.get_or_insert_with(|| (Vec::new(), t)).0.push(id);
        }
    }
    out.extend(current);
    out
}

/// Fraction of `PAD` tokens. `EPAD` does not count as padding.
pub fn pad_fraction(stream: &TextStream, sp: SpecialTokens) -> Result<f64> {
    if stream.is_empty() {
        return Err(input_err!("pad fraction of an empty stream"));
    }
    let pads = stream.tokens.iter().filter(|&&t| t == sp.pad_id).count();
    Ok(pads as f64 / stream.len() as f64)
}

/// Fraction of `PAD` and `EPAD` tokens together.
pub fn special_fraction(stream: &TextStream, sp: SpecialTokens) -> Result<f64> {
    if stream.is_empty() {
        return Err(input_err!("special-token fraction of an empty stream"));
    }
    let specials = stream.tokens.iter().filter(|&&t| sp.is_special(t)).count();
    Ok(specials as f64 / stream.len() as f64)
}

/// Reads one [`WordTiming`] per non-blank line.
pub fn read_word_timings<R: BufRead>(reader: R) -> Result<Vec<WordTiming>> {
    let mut words = Vec::new();
    for (n, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let word: WordTiming = serde_json::from_str(&line)
            .map_err(|e| input_err!("line {}: {e}", n + 1))?;
        words.push(word);
    }
    Ok(words)
}
