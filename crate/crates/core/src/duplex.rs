//! Streaming inference over a grid model.
//!
//! An [`Engine`] advances one grid row per call. Every mode fixes which
//! streams of the row come from the outside world and which are sampled:
//!
//! | mode     | stream 0 (text)              | streams `1..=Q`        | streams `Q+1..=2Q` |
//! |----------|------------------------------|------------------------|--------------------|
//! | dialogue | sampled                      | sampled                | forced (user)      |
//! | ASR      | greedy, `d` steps behind     | forced (input audio)   | -                  |
//! | TTS      | sampled, words substituted   | sampled, `d` steps behind | -               |
//!
//! All token ids handled here are grid ids, so vocabulary id `v` is `v + 1`
//! and `0` is the initial token.

use std::collections::VecDeque;
use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::alignment::SpecialTokens;
use crate::error::{input_err, Error, Result};
use crate::layout::{to_grid_id, TokenGrid, INITIAL_ID};
use crate::rqt::{derive_seed, sample_token, ContextVector, RqtModel, TemporalCache};
use crate::{FRAME_MS, FRAME_RATE_HZ};

/// Default lag between text and audio, 2 s of frames.
pub const DEFAULT_TEXT_DELAY_STEPS: usize = 25;

/// Default logit bonus added to `PAD`/`EPAD` by the TTS pad controller.
pub const DEFAULT_PAD_BONUS: f64 = 2.0;

/// What the engine needs from a model: a temporal state advanced one row at
/// a time, and per-stream logits given the context and the row so far.
pub trait StreamModel {
    type State;

    fn cardinalities(&self) -> &[usize];

    fn init_state(&self) -> Self::State;

    /// Consumes row `V_{s-1}` and returns `z_s`.
    fn advance(&self, state: &mut Self::State, prev_row: &[u32]) -> Result<ContextVector>;

    /// `z_s` recomputed from `V_0 .. V_{s-1}` without any cached state.
    fn context_offline(&self, prefix: &[Vec<u32>]) -> Result<ContextVector> {
        let mut state = self.init_state();
        let mut z = None;
        for row in prefix {
            z = Some(self.advance(&mut state, row)?);
        }
        z.ok_or_else(|| input_err!("empty prefix"))
    }

    /// Logits of stream `partial.len()`.
    fn depth_logits(&self, z: &ContextVector, partial: &[u32]) -> Result<Vec<f64>>;
}

impl StreamModel for RqtModel {
    type State = TemporalCache;

    fn cardinalities(&self) -> &[usize] {
        &self.config().cardinalities
    }

    fn init_state(&self) -> TemporalCache {
        self.new_cache()
    }

    fn advance(&self, state: &mut TemporalCache, prev_row: &[u32]) -> Result<ContextVector> {
        self.temporal_step(state, prev_row)
    }

    fn context_offline(&self, prefix: &[Vec<u32>]) -> Result<ContextVector> {
        self.temporal_forward(prefix)
    }

    fn depth_logits(&self, z: &ContextVector, partial: &[u32]) -> Result<Vec<f64>> {
        self.depth_forward(z, partial)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Dialogue,
    Asr,
    Tts,
}

impl Mode {
    /// Streams of a grid with `q_levels` audio levels per speaker.
    pub fn num_streams(self, q_levels: usize) -> usize {
        match self {
            Mode::Dialogue => 2 * q_levels + 1,
            Mode::Asr | Mode::Tts => q_levels + 1,
        }
    }
}

/// Nudges the text stream toward a target share of padding tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct PadController {
    pub target_rate: f64,
    pub bonus: f64,
    pads: usize,
    total: usize,
}

impl PadController {
    pub fn new(target_rate: f64, bonus: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&target_rate) {
            return Err(input_err!("pad target {target_rate} is outside [0, 1]"));
        }
        if !(bonus >= 0.0) || !bonus.is_finite() {
            return Err(input_err!("pad bonus must be finite and >= 0"));
        }
        Ok(Self {
            target_rate,
            bonus,
            pads: 0,
            total: 0,
        })
    }

    /// Share of padding tokens emitted so far, 0 before any token.
    pub fn running_fraction(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.pads as f64 / self.total as f64
        }
    }

    /// Bonus to add to the padding logits for the next token.
    pub fn current_bonus(&self) -> f64 {
        if self.running_fraction() < self.target_rate {
            self.bonus
        } else {
            0.0
        }
    }

    pub fn record(&mut self, is_padding: bool) {
        self.pads += usize::from(is_padding);
        self.total += 1;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EngineConfig {
    pub mode: Mode,
    pub q_levels: usize,
    /// ASR: text behind audio. TTS: audio behind text. Unused in dialogue.
    pub text_delay_steps: usize,
    pub text_temperature: f64,
    pub audio_temperature: f64,
    pub seed: u64,
    /// Grid id of `PAD`.
    pub pad_id: u32,
    /// Grid id of `EPAD`.
    pub epad_id: u32,
    pub pad_target: f64,
    pub pad_bonus: f64,
    /// TTS ends this many steps after the last word reached the audio.
    pub end_pad_steps: usize,
}

impl EngineConfig {
    /// Defaults for `mode`, with `special` given as vocabulary ids.
    pub fn new(mode: Mode, q_levels: usize, special: SpecialTokens) -> Self {
        Self {
            mode,
            q_levels,
            text_delay_steps: DEFAULT_TEXT_DELAY_STEPS,
            text_temperature: 0.7,
            audio_temperature: 0.8,
            seed: 0,
            pad_id: to_grid_id(special.pad_id),
            epad_id: to_grid_id(special.epad_id),
            pad_target: 0.65,
            pad_bonus: DEFAULT_PAD_BONUS,
            end_pad_steps: FRAME_RATE_HZ.ceil() as usize,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StreamToken {
    pub stream: usize,
    pub token: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Event {
    /// EPAD forced into the text stream by the caller.
    ForcedEpad,
    /// ASR: a word's first token was emitted.
    WordStart { token: u32, time_ms: u64 },
    /// TTS: the model asked for a word and got queued word `index`.
    WordConsumed { index: usize, time_ms: u64 },
    /// TTS: the model asked for a word but the queue was empty.
    QueueExhausted,
    SessionEnd,
}

/// One row of the session log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub step: usize,
    pub mode: Mode,
    pub forced: Vec<StreamToken>,
    pub sampled: Vec<StreamToken>,
    pub events: Vec<Event>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DialogueStep {
    pub text: u32,
    pub audio: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TtsStep {
    pub text: u32,
    /// Audio column of this step; initial ids while the delay fills up.
    pub audio: Vec<u32>,
    pub done: bool,
}

/// How stream 0 is produced this step.
enum TextRule {
    Sample,
    Greedy,
    Force(u32),
    Tts,
}

/// One inference session.
pub struct Engine<'m, M: StreamModel> {
    model: &'m M,
    cfg: EngineConfig,
    state: M::State,
    history: TokenGrid,
    offline: bool,
    pending_epad: bool,
    pad: PadController,
    queue: VecDeque<(usize, u32)>,
    words_queued: usize,
    /// Step at which the last queued word token was emitted.
    last_word_step: Option<usize>,
    last_consumed: Option<usize>,
    finished: bool,
    log: Vec<LogRow>,
}

impl<'m, M: StreamModel> Engine<'m, M> {
    pub fn new(model: &'m M, cfg: EngineConfig) -> Result<Self> {
        let cards = model.cardinalities().to_vec();
        let expected = cfg.mode.num_streams(cfg.q_levels);
        if cfg.q_levels == 0 {
            return Err(input_err!("need at least one audio level"));
        }
        if cards.len() != expected {
            return Err(input_err!(
                "{:?} with Q={} needs {expected} streams, the model has {}",
                cfg.mode,
                cfg.q_levels,
                cards.len()
            ));
        }
        for id in [cfg.pad_id, cfg.epad_id] {
            if id == INITIAL_ID || id as usize >= cards[0] {
                return Err(input_err!("special grid id {id} is not a text token"));
            }
        }
        if cfg.pad_id == cfg.epad_id {
            return Err(input_err!("PAD and EPAD must differ"));
        }
        for t in [cfg.text_temperature, cfg.audio_temperature] {
            if !(t >= 0.0) || !t.is_finite() {
                return Err(input_err!("temperatures must be finite and >= 0"));
            }
        }
        let pad = PadController::new(cfg.pad_target, cfg.pad_bonus)?;
        Ok(Self {
            model,
            state: model.init_state(),
            history: TokenGrid::empty(cards),
            offline: false,
            pending_epad: false,
            pad,
            queue: VecDeque::new(),
            words_queued: 0,
            last_word_step: None,
            last_consumed: None,
            finished: false,
            log: Vec::new(),
            cfg,
        })
    }

    /// Same engine, but every step recomputes the context from the whole
    /// history instead of using the model's incremental state.
    pub fn new_offline(model: &'m M, cfg: EngineConfig) -> Result<Self> {
        let mut e = Self::new(model, cfg)?;
        e.offline = true;
        Ok(e)
    }

    pub fn config(&self) -> &EngineConfig {
        &self.cfg
    }

    /// Rows emitted so far.
    pub fn grid(&self) -> &TokenGrid {
        &self.history
    }

    pub fn step_counter(&self) -> usize {
        self.history.steps()
    }

    pub fn log(&self) -> &[LogRow] {
        &self.log
    }

    pub fn pad_controller(&self) -> &PadController {
        &self.pad
    }

    pub fn is_finished(&self) -> bool {
        self.finished
    }

    pub fn write_log<W: Write>(&self, w: &mut W) -> Result<()> {
        for row in &self.log {
            serde_json::to_writer(&mut *w, row)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    fn require(&self, mode: Mode) -> Result<()> {
        if self.cfg.mode != mode {
            return Err(Error::State(format!(
                "{mode:?} step on a {:?} engine",
                self.cfg.mode
            )));
        }
        if self.finished {
            return Err(Error::State("session already ended".into()));
        }
        Ok(())
    }

    fn check_column(&self, tokens: &[u32], first_stream: usize) -> Result<()> {
        if tokens.len() != self.cfg.q_levels {
            return Err(input_err!(
                "expected {} audio tokens, got {}",
                self.cfg.q_levels,
                tokens.len()
            ));
        }
        let cards = self.history.cardinalities();
        for (i, &t) in tokens.iter().enumerate() {
            let n = cards[first_stream + i];
            if t as usize >= n {
                return Err(input_err!(
                    "token {t} for stream {} exceeds cardinality {n}",
                    first_stream + i
                ));
            }
        }
        Ok(())
    }

    fn time_ms(step: usize) -> u64 {
        step as u64 * FRAME_MS as u64
    }

    fn is_padding(&self, t: u32) -> bool {
        t == self.cfg.pad_id || t == self.cfg.epad_id
    }

    /// Produces row `s`: forced streams are copied, the others sampled in
    /// stream order. Streams after the last sampled one must be forced.
    fn advance_row(&mut self, text: TextRule, forced: &[Option<u32>]) -> Result<(Vec<u32>, Vec<Event>)> {
        let s = self.history.steps();
        let k_streams = forced.len();
        let prev: Vec<u32> = if s == 0 {
            vec![INITIAL_ID; k_streams]
        } else {
            self.history.row(s - 1).to_vec()
        };
        let z = if self.offline {
            let mut prefix = vec![vec![INITIAL_ID; k_streams]];
            prefix.extend(self.history.rows().map(<[u32]>::to_vec));
            self.model.context_offline(&prefix)?
        } else {
            self.model.advance(&mut self.state, &prev)?
        };
        let mut row = Vec::with_capacity(k_streams);
        let mut events = Vec::new();
        let mut log_forced = Vec::new();
        let mut log_sampled = Vec::new();
        for (k, f) in forced.iter().enumerate() {
            let seed = derive_seed(self.cfg.seed, s, k);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let token = match (k, f, &text) {
                (0, _, TextRule::Force(t)) => {
                    log_forced.push(StreamToken { stream: 0, token: *t });
                    *t
                }
                (_, Some(t), _) => {
                    log_forced.push(StreamToken { stream: k, token: *t });
                    *t
                }
                (0, None, rule) => {
                    let mut logits = self.model.depth_logits(&z, &row)?;
                    let temperature = match rule {
                        TextRule::Greedy => 0.0,
                        _ => self.cfg.text_temperature,
                    };
                    if let TextRule::Tts = rule {
                        let bonus = self.pad.current_bonus();
                        logits[self.cfg.pad_id as usize] += bonus;
                        logits[self.cfg.epad_id as usize] += bonus;
                    }
                    let mut t = sample_token(&logits, temperature, &mut rng)?;
                    if let TextRule::Tts = rule {
                        t = self.substitute(t, s, &mut events);
                        self.pad.record(self.is_padding(t));
                    }
                    log_sampled.push(StreamToken { stream: 0, token: t });
                    t
                }
                (_, None, _) => {
                    let logits = self.model.depth_logits(&z, &row)?;
                    let t = sample_token(&logits, self.cfg.audio_temperature, &mut rng)?;
                    log_sampled.push(StreamToken { stream: k, token: t });
                    t
                }
            };
            row.push(token);
        }
        self.history.push_row(&row)?;
        if let TextRule::Force(t) = text {
            if t == self.cfg.epad_id && self.cfg.mode == Mode::Dialogue {
                events.insert(0, Event::ForcedEpad);
            }
        }
        self.log.push(LogRow {
            step: s,
            mode: self.cfg.mode,
            forced: log_forced,
            sampled: log_sampled,
            events: events.clone(),
        });
        Ok((row, events))
    }

    /// TTS text substitution: padding passes through, anything else becomes
    /// the next queued token.
    fn substitute(&mut self, sampled: u32, step: usize, events: &mut Vec<Event>) -> u32 {
        if self.is_padding(sampled) {
            return sampled;
        }
        match self.queue.pop_front() {
            Some((index, token)) => {
                if self.last_consumed != Some(index) {
                    events.push(Event::WordConsumed {
                        index,
                        time_ms: Self::time_ms(step),
                    });
                    self.last_consumed = Some(index);
                }
                self.last_word_step = Some(step);
                token
            }
            None => {
                events.push(Event::QueueExhausted);
                self.cfg.pad_id
            }
        }
    }

    // ---- dialogue ----

    /// Makes the next dialogue text token `EPAD`, whatever the model says.
    pub fn force_epad(&mut self) -> Result<()> {
        self.require(Mode::Dialogue)?;
        self.pending_epad = true;
        Ok(())
    }

    /// Samples text and the model's audio for the next step, then stores
    /// `user_tokens` as the user's streams of that row.
    pub fn step_dialogue(&mut self, user_tokens: &[u32]) -> Result<DialogueStep> {
        self.require(Mode::Dialogue)?;
        let q = self.cfg.q_levels;
        self.check_column(user_tokens, q + 1)?;
        let mut forced = vec![None; 2 * q + 1];
        for (i, &t) in user_tokens.iter().enumerate() {
            forced[q + 1 + i] = Some(t);
        }
        let rule = if self.pending_epad {
            TextRule::Force(self.cfg.epad_id)
        } else {
            TextRule::Sample
        };
        let (row, _) = self.advance_row(rule, &forced)?;
        self.pending_epad = false;
        Ok(DialogueStep {
            text: row[0],
            audio: row[1..=q].to_vec(),
        })
    }

    // ---- ASR ----

    /// Stores `audio_tokens` and greedily predicts the text stream, which
    /// runs `text_delay_steps` behind. Returns the text token once the delay
    /// has been filled.
    pub fn step_asr(&mut self, audio_tokens: &[u32]) -> Result<Option<u32>> {
        self.require(Mode::Asr)?;
        self.check_column(audio_tokens, 1)?;
        let s = self.history.steps();
        let d = self.cfg.text_delay_steps;
        let mut forced = vec![None];
        forced.extend(audio_tokens.iter().map(|&t| Some(t)));
        let rule = if s < d {
            TextRule::Force(INITIAL_ID)
        } else {
            TextRule::Greedy
        };
        let (row, _) = self.advance_row(rule, &forced)?;
        if s < d {
            return Ok(None);
        }
        let t = row[0];
        let prev = if s > d { self.history.get(s - 1, 0) } else { INITIAL_ID };
        let starts_word = !self.is_padding(t)
            && t != INITIAL_ID
            && (prev == INITIAL_ID || self.is_padding(prev));
        if starts_word {
            let event = Event::WordStart {
                token: t,
                time_ms: Self::time_ms(s - d),
            };
            self.log.last_mut().expect("row just logged").events.push(event);
        }
        Ok(Some(t))
    }

    /// Word start events emitted so far, as `(first token, time in ms)`.
    pub fn word_starts(&self) -> Vec<(u32, u64)> {
        self.log
            .iter()
            .flat_map(|r| &r.events)
            .filter_map(|e| match e {
                Event::WordStart { token, time_ms } => Some((*token, *time_ms)),
                _ => None,
            })
            .collect()
    }

    // ---- TTS ----

    /// Appends words (grid-id token lists) to the TTS queue.
    pub fn queue_words(&mut self, words: &[Vec<u32>]) -> Result<()> {
        self.require(Mode::Tts)?;
        let n = self.history.cardinalities()[0];
        for word in words {
            if word.is_empty() {
                return Err(input_err!("queued word has no tokens"));
            }
            for &t in word {
                if t == INITIAL_ID || t as usize >= n || self.is_padding(t) {
                    return Err(input_err!("queued token {t} is not a word token"));
                }
            }
        }
        for word in words {
            let index = self.words_queued;
            self.queue.extend(word.iter().map(|&t| (index, t)));
            self.words_queued += 1;
        }
        Ok(())
    }

    pub fn queue_is_empty(&self) -> bool {
        self.queue.is_empty()
    }

    /// Produces one TTS step. The session ends once the queue is empty and
    /// the last word has been followed by `text_delay_steps + end_pad_steps`
    /// padding steps, so its audio is rendered and followed by silence.
    pub fn step_tts(&mut self) -> Result<TtsStep> {
        self.require(Mode::Tts)?;
        let s = self.history.steps();
        let d = self.cfg.text_delay_steps;
        let q = self.cfg.q_levels;
        let mut forced = vec![None; q + 1];
        if s < d {
            forced[1..].iter_mut().for_each(|f| *f = Some(INITIAL_ID));
        }
        let (row, _) = self.advance_row(TextRule::Tts, &forced)?;
        let since = match self.last_word_step {
            Some(w) => s - w,
            None => s + 1,
        };
        let done = self.queue.is_empty() && since >= d + self.cfg.end_pad_steps;
        if done {
            self.finished = true;
            self.log.last_mut().expect("row just logged").events.push(Event::SessionEnd);
        }
        Ok(TtsStep {
            text: row[0],
            audio: row[1..].to_vec(),
            done,
        })
    }

    /// `(word index, time in ms)` of every consumed word.
    pub fn consumed_words(&self) -> Vec<(usize, u64)> {
        self.log
            .iter()
            .flat_map(|r| &r.events)
            .filter_map(|e| match e {
                Event::WordConsumed { index, time_ms } => Some((*index, *time_ms)),
                _ => None,
            })
            .collect()
    }
}
