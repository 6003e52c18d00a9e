//! Stub models for driving the streaming engine.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use tokenplane::alignment::SpecialTokens;
use tokenplane::duplex::{Engine, Mode, StreamModel};
use tokenplane::rqt::ContextVector;
use tokenplane::Result;

pub const PAD: u32 = 1; // grid id of vocab 0
pub const EPAD: u32 = 2; // grid id of vocab 1

pub fn special() -> SpecialTokens {
    SpecialTokens::new(0, 1).unwrap()
}

pub fn mix(mut x: u64) -> u64 {
    x ^= x >> 33;
    x = x.wrapping_mul(0xff51_afd7_ed55_8ccd);
    x ^= x >> 33;
    x = x.wrapping_mul(0xc4ce_b9fe_1a85_ec53);
    x ^ (x >> 33)
}

/// Context is a rolling hash of the history; logits are hashes of the
/// context and the partial row.
pub struct HashModel {
    pub cards: Vec<usize>,
    pub salt: u64,
}

impl StreamModel for HashModel {
    type State = u64;

    fn cardinalities(&self) -> &[usize] {
        &self.cards
    }

    fn init_state(&self) -> u64 {
        self.salt
    }

    fn advance(&self, state: &mut u64, prev: &[u32]) -> Result<ContextVector> {
        for &t in prev {
            *state = mix(*state ^ u64::from(t).wrapping_add(0x9e37));
        }
        Ok(ContextVector(vec![*state as f64]))
    }

    fn context_offline(&self, prefix: &[Vec<u32>]) -> Result<ContextVector> {
        let h = prefix
            .iter()
            .flatten()
            .fold(self.salt, |h, &t| mix(h ^ u64::from(t).wrapping_add(0x9e37)));
        Ok(ContextVector(vec![h as f64]))
    }

    fn depth_logits(&self, z: &ContextVector, partial: &[u32]) -> Result<Vec<f64>> {
        let mut h = z.0[0] as u64;
        for &t in partial {
            h = mix(h ^ u64::from(t));
        }
        let n = self.cards[partial.len()];
        Ok((0..n)
            .map(|i| (mix(h ^ i as u64) % 1000) as f64 / 250.0)
            .collect())
    }
}

pub fn hash_model(mode: Mode, q: usize, salt: u64) -> HashModel {
    let mut cards = vec![12];
    cards.extend(vec![9; mode.num_streams(q) - 1]);
    HashModel { cards, salt }
}

pub fn run_session<'m, M: StreamModel>(
    mut e: Engine<'m, M>,
    mode: Mode,
    steps: usize,
    rng: &mut ChaCha8Rng,
    inputs: &[Vec<u32>],
) -> Engine<'m, M> {
    match mode {
        Mode::Dialogue => {
            for (s, col) in inputs.iter().enumerate().take(steps) {
                if s == 3 {
                    e.force_epad().unwrap();
                }
                e.step_dialogue(col).unwrap();
            }
        }
        Mode::Asr => {
            for col in inputs.iter().take(steps) {
                e.step_asr(col).unwrap();
            }
        }
        Mode::Tts => {
            let words: Vec<Vec<u32>> = (0..10)
                .map(|_| (0..rng.gen_range(1..3)).map(|_| rng.gen_range(3..12)).collect())
                .collect();
            e.queue_words(&words).unwrap();
            for _ in 0..steps {
                if e.step_tts().unwrap().done {
                    break;
                }
            }
        }
    }
    e
}

/// Text logits are a one-hot of the audio token `d` steps back.
pub struct EchoModel {
    pub cards: Vec<usize>,
    pub delay: usize,
}

impl StreamModel for EchoModel {
    type State = Vec<Vec<u32>>;

    fn cardinalities(&self) -> &[usize] {
        &self.cards
    }

    fn init_state(&self) -> Vec<Vec<u32>> {
        Vec::new()
    }

    fn advance(&self, state: &mut Vec<Vec<u32>>, prev: &[u32]) -> Result<ContextVector> {
        state.push(prev.to_vec());
        // z_s sees V_0 .. V_{s-1}; the audio of step s - d sits at index s - d + 1.
        let s = state.len() - 1;
        let token = if s >= self.delay {
            state[s - self.delay + 1][1]
        } else {
            0
        };
        Ok(ContextVector(vec![token as f64]))
    }

    fn depth_logits(&self, z: &ContextVector, partial: &[u32]) -> Result<Vec<f64>> {
        let n = self.cards[partial.len()];
        let hot = if partial.is_empty() { z.0[0] as usize } else { 0 };
        Ok((0..n).map(|i| if i == hot { 1.0 } else { 0.0 }).collect())
    }
}

/// Text: fixed logits over PAD, EPAD and word tokens. Audio stream k copies
/// the text token `d` steps back, read from the history.
pub struct TtsModel {
    pub cards: Vec<usize>,
    pub text_logits: Vec<f64>,
    pub delay: usize,
}

impl StreamModel for TtsModel {
    type State = Vec<Vec<u32>>;

    fn cardinalities(&self) -> &[usize] {
        &self.cards
    }

    fn init_state(&self) -> Vec<Vec<u32>> {
        Vec::new()
    }

    fn advance(&self, state: &mut Vec<Vec<u32>>, prev: &[u32]) -> Result<ContextVector> {
        state.push(prev.to_vec());
        let s = state.len() - 1;
        let text = if s >= self.delay && s - self.delay + 1 < state.len() {
            state[s - self.delay + 1][0]
        } else {
            0
        };
        Ok(ContextVector(vec![text as f64]))
    }

    fn depth_logits(&self, z: &ContextVector, partial: &[u32]) -> Result<Vec<f64>> {
        if partial.is_empty() {
            return Ok(self.text_logits.clone());
        }
        let n = self.cards[partial.len()];
        let hot = z.0[0] as usize;
        Ok((0..n).map(|i| if i == hot { 50.0 } else { 0.0 }).collect())
    }
}

pub fn tts_model(pad_logit: f64, epad_logit: f64, delay: usize) -> TtsModel {
    // Nine word tokens (grid 3..12) sharing the remaining mass.
    let mut text_logits = vec![f64::NEG_INFINITY, pad_logit, epad_logit];
    text_logits.extend(vec![0.0; 9]);
    TtsModel {
        cards: vec![12, 12, 12],
        text_logits,
        delay,
    }
}
