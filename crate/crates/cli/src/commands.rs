use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use anyhow::{bail, Context, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;
use serde_json::{json, Value};
use tokenplane::alignment::{build_text_stream, pad_fraction, read_word_timings, special_fraction, SpecialTokens, TextStream};
use tokenplane::duplex::{Engine, EngineConfig, Mode};
use tokenplane::entropy::{artifact_report, EntropyParams};
use tokenplane::fingerprint::{
    build_duplicate_set, fingerprint, is_duplicate, read_index, read_wav, write_index, write_signatures, DedupParams,
    SignatureIndex, SignatureParams, FRAME_RATE_HZ as FP_FRAME_RATE_HZ,
};
use tokenplane::layout::{
    from_grid_id, joint_layout, latency_ms, prediction_steps, read_grid_binary, read_grid_jsonl, to_grid_id,
    write_grid_binary, write_grid_jsonl, DelayPattern, StreamSpec, TokenGrid, INITIAL_ID,
};
use tokenplane::rqt::train::{train, AdamConfig, SyntheticTask, TrainConfig};
use tokenplane::rqt::{
    derive_seed, read_checkpoint, sample_token, write_checkpoint, DepthKind, LossWeights, RqtConfig, RqtModel,
};
use tokenplane::FRAME_MS;

use crate::report::render;
use crate::{
    AlignArgs, AsrArgs, Cli, Command, Depth, DialogueArgs, EngineArgs, EntropyArgs, FpDedupArgs, FpIndexArgs,
    FpQueryArgs, GridFormat, LatencyArgs, LayoutArgs, SampleArgs, Task, TrainArgs, TtsArgs, UsageError,
};

macro_rules! usage {
    ($($t:tt)*) => {
        return Err(UsageError(format!($($t)*)).into())
    };
}

pub fn run(cli: &Cli) -> Result<String> {
    let pretty = cli.pretty;
    match &cli.command {
        Command::Layout(a) => layout(a, pretty),
        Command::Latency(a) => latency(a, pretty),
        Command::Align(a) => align(a, pretty),
        Command::RqtTrain(a) => rqt_train(a, pretty),
        Command::RqtSample(a) => rqt_sample(a, pretty),
        Command::Asr(a) => asr(a, pretty),
        Command::Tts(a) => tts(a, pretty),
        Command::Dialogue(a) => dialogue(a, pretty),
        Command::Entropy(a) => entropy(a, pretty),
        Command::FpIndex(a) => fp_index(a, pretty),
        Command::FpQuery(a) => fp_query(a, pretty),
        Command::FpDedup(a) => fp_dedup(a, pretty),
    }
}

// ---- file helpers ----

fn open(path: &Path) -> Result<BufReader<File>> {
    Ok(BufReader::new(File::open(path).with_context(|| format!("cannot open {}", path.display()))?))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).with_context(|| format!("cannot write {}", path.display()))?))
}

/// Reads a grid in either format; JSONL files start with `[`.
fn read_grid(path: &Path) -> Result<(TokenGrid, GridFormat)> {
    let mut bytes = Vec::new();
    open(path)?.read_to_end(&mut bytes)?;
    let ctx = || format!("reading grid {}", path.display());
    if bytes.iter().find(|b| !b.is_ascii_whitespace()) == Some(&b'[') {
        Ok((read_grid_jsonl(bytes.as_slice(), None).with_context(ctx)?, GridFormat::Json))
    } else {
        Ok((read_grid_binary(&mut bytes.as_slice()).with_context(ctx)?, GridFormat::Binary))
    }
}

fn write_grid(path: &Path, grid: &TokenGrid, format: GridFormat) -> Result<()> {
    let mut w = create(path)?;
    match format {
        GridFormat::Binary => write_grid_binary(&mut w, grid)?,
        GridFormat::Json => write_grid_jsonl(&mut w, grid)?,
    }
    w.flush()?;
    Ok(())
}

/// One JSON array of ids per non-blank line.
fn read_rows(path: &Path) -> Result<Vec<Vec<u32>>> {
    let mut rows = Vec::new();
    for (n, line) in open(path)?.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let row: Vec<u32> = serde_json::from_str(&line)
            .with_context(|| format!("{}: line {}", path.display(), n + 1))?;
        rows.push(row);
    }
    Ok(rows)
}

/// Checks that every row has `width` entries and converts to grid ids.
fn rows_to_grid_ids(rows: &[Vec<u32>], width: usize, what: &str) -> Result<Vec<Vec<u32>>> {
    rows.iter()
        .enumerate()
        .map(|(s, r)| {
            if r.len() != width {
                bail!("{what}: step {s} has {} codes, expected {width}", r.len());
            }
            Ok(r.iter().map(|&v| to_grid_id(v)).collect())
        })
        .collect()
}

fn transpose(rows: &[Vec<u32>], width: usize) -> Vec<Vec<u32>> {
    (0..width).map(|k| rows.iter().map(|r| r[k]).collect()).collect()
}

fn load_model(path: &Path) -> Result<RqtModel> {
    read_checkpoint(&mut open(path)?).with_context(|| format!("reading checkpoint {}", path.display()))
}

fn vocab_id(t: u32) -> Value {
    from_grid_id(t).map_or(Value::Null, Value::from)
}

fn special(a: &crate::SpecialArgs) -> Result<SpecialTokens> {
    SpecialTokens::new(a.pad_id, a.epad_id).map_err(|e| UsageError(e.to_string()).into())
}

// ---- layout ----

fn layout(a: &LayoutArgs, pretty: bool) -> Result<String> {
    if let Some(path) = &a.inspect {
        let (grid, format) = read_grid(path)?;
        let (temporal, flat) = prediction_steps(&grid);
        let mut v = json!({
            "format": match format { GridFormat::Binary => "binary", GridFormat::Json => "json" },
            "steps": grid.steps(),
            "streams": grid.num_streams(),
            "cardinalities": grid.cardinalities(),
            "temporal_steps": temporal,
            "flattened_steps": flat,
        });
        if a.rows {
            v["rows"] = json!(grid.rows().collect::<Vec<_>>());
        }
        return Ok(render(&v, pretty));
    }

    let speakers = if a.single { 1 } else { 2 };
    let Some(agent_path) = &a.agent else {
        let text = (!a.no_text).then_some(a.text_vocab);
        let spec = StreamSpec::new(a.q_levels, speakers, text, a.audio_vocab).map_err(|e| UsageError(e.to_string()))?;
        let pattern = pattern_or_default(a, a.q_levels)?;
        let delays = spec.joint_delays(&pattern).map_err(|e| UsageError(e.to_string()))?;
        let v = json!({
            "q_levels": a.q_levels,
            "speakers": speakers,
            "text": spec.text_present,
            "streams": spec.num_streams(),
            "tokens_per_step": spec.tokens_per_step(),
            "delays": delays,
            "latency_ms": latency_ms(&pattern, FRAME_MS),
        });
        return Ok(render(&v, pretty));
    };

    let agent_rows = read_rows(agent_path)?;
    let q = agent_rows.first().map(Vec::len).context("--agent file has no steps")?;
    let steps = agent_rows.len();
    check_width(&agent_rows, q, "--agent")?;
    let agent = transpose(&agent_rows, q);
    let user = match &a.user {
        Some(p) => {
            let rows = read_rows(p)?;
            check_width(&rows, q, "--user")?;
            if rows.len() != steps {
                bail!("--user has {} steps, --agent has {steps}", rows.len());
            }
            transpose(&rows, q)
        }
        None if speakers == 2 => usage!("--user is required for a two-speaker layout (or pass --single)"),
        None => Vec::new(),
    };
    let text = match &a.text {
        Some(p) => {
            let tokens: Vec<u32> =
                serde_json::from_reader(open(p)?).with_context(|| format!("reading text stream {}", p.display()))?;
            if tokens.len() != steps {
                bail!("text stream has {} tokens, audio has {steps} steps", tokens.len());
            }
            Some(TextStream { tokens })
        }
        None => None,
    };
    let text_card = text.as_ref().map(|_| a.text_vocab);
    let spec = StreamSpec::new(q, speakers, text_card, a.audio_vocab)?;
    let pattern = pattern_or_default(a, q)?;
    let grid = joint_layout(text.as_ref(), &agent, &user, &pattern, &spec)?;
    if let Some(out) = &a.out {
        write_grid(out, &grid, a.format)?;
    }
    let mut v = json!({
        "steps": grid.steps(),
        "streams": grid.num_streams(),
        "delays": spec.joint_delays(&pattern)?,
        "latency_ms": latency_ms(&pattern, FRAME_MS),
    });
    match &a.out {
        Some(out) => v["out"] = json!(out.display().to_string()),
        None => v["rows"] = json!(grid.rows().collect::<Vec<_>>()),
    }
    Ok(render(&v, pretty))
}

fn check_width(rows: &[Vec<u32>], q: usize, what: &str) -> Result<()> {
    match rows.iter().position(|r| r.len() != q) {
        Some(s) => bail!("{what}: step {s} has {} codes, expected {q}", rows[s].len()),
        None => Ok(()),
    }
}

fn pattern_or_default(a: &LayoutArgs, q: usize) -> Result<DelayPattern> {
    let pattern = match &a.pattern {
        Some(p) => p.clone(),
        None => DelayPattern::acoustic(q, 1).map_err(|e| UsageError(e.to_string()))?,
    };
    if pattern.delays.len() != q {
        usage!("--pattern has {} delays for {q} levels", pattern.delays.len());
    }
    Ok(pattern.with_text_delay(a.text_delay))
}

fn latency(a: &LatencyArgs, pretty: bool) -> Result<String> {
    let ms = latency_ms(&a.pattern, FRAME_MS);
    Ok(if pretty { format!("{ms} ms\n") } else { format!("{ms}\n") })
}

// ---- alignment ----

fn align(a: &AlignArgs, pretty: bool) -> Result<String> {
    let sp = special(&a.special)?;
    let words = read_word_timings(open(&a.words)?).with_context(|| format!("reading {}", a.words.display()))?;
    let stream = build_text_stream(&words, a.frames, sp)?;
    let v = json!({
        "frames": stream.len(),
        "words": words.len(),
        "pad_fraction": pad_fraction(&stream, sp)?,
        "special_fraction": special_fraction(&stream, sp)?,
        "tokens": stream.tokens,
    });
    Ok(render(&v, pretty))
}

// ---- RQ-Transformer ----

fn rqt_train(a: &TrainArgs, pretty: bool) -> Result<String> {
    if a.lr <= 0.0 || !a.lr.is_finite() {
        usage!("--lr must be positive");
    }
    if a.batch_size == 0 {
        usage!("--batch-size must be positive");
    }
    let data: Vec<TokenGrid> = if a.data.is_empty() {
        if a.vocab < 2 {
            usage!("--vocab must be at least 2");
        }
        if a.grids == 0 {
            usage!("--grids must be positive");
        }
        let task = match a.task {
            Task::Copy => SyntheticTask::CopyPrevious,
            Task::IntraStep => SyntheticTask::IntraStep,
        };
        task.dataset(a.vocab, a.grid_steps, a.grids, a.seed)
            .map_err(|e| UsageError(e.to_string()))?
    } else {
        a.data.iter().map(|p| read_grid(p).map(|g| g.0)).collect::<Result<_>>()?
    };
    let cards = data[0].cardinalities().to_vec();
    if let Some(i) = data.iter().position(|g| g.cardinalities() != cards.as_slice()) {
        bail!("grid {i} has cardinalities {:?}, grid 0 has {cards:?}", data[i].cardinalities());
    }
    let k = cards.len();
    let weights = match a.q_levels {
        Some(q) => LossWeights::for_layout(k, q, None),
        None => LossWeights::uniform(k),
    };
    let mut cfg = RqtConfig::toy(cards);
    cfg.d_temporal = a.d_temporal;
    cfg.d_depth = a.d_depth;
    cfg.seed = a.seed;
    cfg.depth_kind = match a.depth {
        Depth::Joint => DepthKind::Joint,
        Depth::Independent => DepthKind::IndependentHeads,
    };
    let mut model = RqtModel::new(cfg).map_err(|e| UsageError(e.to_string()))?;
    let tc = TrainConfig {
        steps: a.steps,
        batch_size: a.batch_size,
        adam: AdamConfig { lr: a.lr, ..AdamConfig::default() },
        seed: a.seed,
    };
    let losses = train(&mut model, &data, &weights, &tc)?;
    let mut w = create(&a.out)?;
    write_checkpoint(&mut w, &model)?;
    w.flush()?;
    let tail = losses.len().min(10);
    let v = json!({
        "out": a.out.display().to_string(),
        "params": model.num_params(),
        "streams": k,
        "steps": losses.len(),
        "initial_loss": losses.first(),
        "final_loss": losses.last(),
        "final_loss_avg10": (tail > 0).then(|| losses[losses.len() - tail..].iter().sum::<f64>() / tail as f64),
    });
    Ok(render(&v, pretty))
}

fn rqt_sample(a: &SampleArgs, pretty: bool) -> Result<String> {
    if a.temperature < 0.0 || !a.temperature.is_finite() {
        usage!("--temperature must be non-negative");
    }
    let model = load_model(&a.model)?;
    let k = model.num_streams();
    let mut grid = TokenGrid::empty(model.config().cardinalities.clone());
    let mut cache = model.new_cache();
    let mut prev = vec![INITIAL_ID; k];
    for s in 0..a.steps {
        let z = model.temporal_step(&mut cache, &prev)?;
        let mut row = Vec::with_capacity(k);
        for j in 0..k {
            let logits = model.depth_forward(&z, &row)?;
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(a.seed, s, j));
            row.push(sample_token(&logits, a.temperature, &mut rng)?);
        }
        grid.push_row(&row)?;
        prev = row;
    }
    let mut v = json!({ "steps": grid.steps(), "streams": k });
    match &a.out {
        Some(out) => {
            write_grid(out, &grid, a.format)?;
            v["out"] = json!(out.display().to_string());
        }
        None => v["rows"] = json!(grid.rows().collect::<Vec<_>>()),
    }
    Ok(render(&v, pretty))
}

// ---- streaming engine ----

fn engine_config(e: &EngineArgs, model: &RqtModel, mode: Mode) -> Result<EngineConfig> {
    let k = model.num_streams();
    let q = match mode {
        Mode::Dialogue if k >= 3 && k % 2 == 1 => (k - 1) / 2,
        Mode::Asr | Mode::Tts if k >= 2 => k - 1,
        _ => bail!("a model with {k} streams cannot run {mode:?}"),
    };
    let sp = special(&e.special)?;
    let text_card = model.config().cardinalities[0];
    for id in [sp.pad_id, sp.epad_id] {
        if to_grid_id(id) as usize >= text_card {
            bail!("special token {id} is outside the model's text vocabulary");
        }
    }
    let mut cfg = EngineConfig::new(mode, q, sp);
    cfg.seed = e.seed;
    Ok(cfg)
}

fn check_temperatures(text: f64, audio: f64) -> Result<()> {
    if text < 0.0 || audio < 0.0 || !text.is_finite() || !audio.is_finite() {
        usage!("temperatures must be non-negative");
    }
    Ok(())
}

fn write_log<M: tokenplane::duplex::StreamModel>(e: &EngineArgs, engine: &Engine<'_, M>) -> Result<()> {
    if let Some(path) = &e.log {
        let mut w = create(path)?;
        engine.write_log(&mut w)?;
        w.flush()?;
    }
    Ok(())
}

fn asr(a: &AsrArgs, pretty: bool) -> Result<String> {
    let model = load_model(&a.engine.model)?;
    let mut cfg = engine_config(&a.engine, &model, Mode::Asr)?;
    cfg.text_delay_steps = a.delay;
    let rows = rows_to_grid_ids(&read_rows(&a.audio)?, cfg.q_levels, "--audio")?;
    let mut engine = Engine::new(&model, cfg)?;
    let mut text = Vec::with_capacity(rows.len());
    for row in &rows {
        if let Some(t) = engine.step_asr(row)? {
            text.push(vocab_id(t));
        }
    }
    write_log(&a.engine, &engine)?;
    let words: Vec<Value> = engine
        .word_starts()
        .into_iter()
        .map(|(t, ms)| json!({ "token": vocab_id(t), "time_ms": ms }))
        .collect();
    let v = json!({
        "steps": rows.len(),
        "delay": a.delay,
        "first_emission_step": (rows.len() > a.delay).then_some(a.delay),
        "text": text,
        "words": words,
    });
    Ok(render(&v, pretty))
}

#[derive(Deserialize)]
struct QueuedWord {
    tokens: Vec<u32>,
}

fn tts(a: &TtsArgs, pretty: bool) -> Result<String> {
    check_temperatures(a.text_temperature, a.audio_temperature)?;
    if !(0.0..1.0).contains(&a.pad_target) {
        usage!("--pad-target must be in [0, 1)");
    }
    let model = load_model(&a.engine.model)?;
    let mut cfg = engine_config(&a.engine, &model, Mode::Tts)?;
    cfg.text_delay_steps = a.delay;
    cfg.pad_target = a.pad_target;
    cfg.text_temperature = a.text_temperature;
    cfg.audio_temperature = a.audio_temperature;
    let mut words = Vec::new();
    for (n, line) in open(&a.words)?.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let w: QueuedWord =
            serde_json::from_str(&line).with_context(|| format!("{}: line {}", a.words.display(), n + 1))?;
        words.push(w.tokens.iter().map(|&t| to_grid_id(t)).collect::<Vec<_>>());
    }
    let mut engine = Engine::new(&model, cfg)?;
    engine.queue_words(&words)?;
    let mut text = Vec::new();
    let mut audio = Vec::new();
    while !engine.is_finished() && engine.step_counter() < a.max_steps {
        let step = engine.step_tts()?;
        text.push(vocab_id(step.text));
        audio.push(step.audio.iter().map(|&t| vocab_id(t)).collect::<Vec<_>>());
    }
    write_log(&a.engine, &engine)?;
    let consumed: Vec<Value> = engine
        .consumed_words()
        .into_iter()
        .map(|(index, ms)| json!({ "index": index, "time_ms": ms }))
        .collect();
    let v = json!({
        "steps": text.len(),
        "finished": engine.is_finished(),
        "queued_words": words.len(),
        "pad_fraction": engine.pad_controller().running_fraction(),
        "consumed": consumed,
        "text": text,
        "audio": audio,
    });
    Ok(render(&v, pretty))
}

fn dialogue(a: &DialogueArgs, pretty: bool) -> Result<String> {
    check_temperatures(a.text_temperature, a.audio_temperature)?;
    let model = load_model(&a.engine.model)?;
    let mut cfg = engine_config(&a.engine, &model, Mode::Dialogue)?;
    cfg.text_temperature = a.text_temperature;
    cfg.audio_temperature = a.audio_temperature;
    let rows = rows_to_grid_ids(&read_rows(&a.user)?, cfg.q_levels, "--user")?;
    let mut engine = Engine::new(&model, cfg)?;
    let mut text = Vec::with_capacity(rows.len());
    let mut audio = Vec::with_capacity(rows.len());
    for row in &rows {
        let step = engine.step_dialogue(row)?;
        text.push(vocab_id(step.text));
        audio.push(step.audio.iter().map(|&t| vocab_id(t)).collect::<Vec<_>>());
    }
    write_log(&a.engine, &engine)?;
    let v = json!({ "steps": rows.len(), "text": text, "audio": audio });
    Ok(render(&v, pretty))
}

// ---- entropy ----

fn entropy(a: &EntropyArgs, pretty: bool) -> Result<String> {
    let p = EntropyParams {
        context: a.context,
        window: a.window,
        eta_flat: a.eta_flat,
        eta_audio_silence: a.eta_silence,
        eta_gibberish: a.eta_gibberish,
        eta_noise: a.eta_noise,
    };
    p.validate().map_err(|e| UsageError(e.to_string()))?;
    let (grid, _) = read_grid(&a.grid)?;
    let report = artifact_report(&grid, a.q_levels, &p)?;
    if pretty && !a.windows {
        return Ok(format!("windows: {}\n{report}", report.windows.len()));
    }
    let mut v = serde_json::to_value(&report)?;
    v["window_count"] = json!(report.windows.len());
    if !a.windows {
        v.as_object_mut().expect("report is an object").remove("windows");
    }
    Ok(render(&v, pretty))
}

// ---- fingerprinting ----

fn fingerprint_file(path: &Path) -> Result<Vec<tokenplane::fingerprint::Signature>> {
    let (samples, sr) = read_wav(path).with_context(|| format!("reading {}", path.display()))?;
    fingerprint(&samples, sr).with_context(|| format!("fingerprinting {}", path.display()))
}

fn fingerprint_all(paths: &[std::path::PathBuf]) -> Result<Vec<Vec<tokenplane::fingerprint::Signature>>> {
    use rayon::prelude::*;
    paths.par_iter().map(|p| fingerprint_file(p)).collect()
}

fn fp_index(a: &FpIndexArgs, pretty: bool) -> Result<String> {
    let sigs = fingerprint_all(&a.audio)?;
    let mut ix = SignatureIndex::new(SignatureParams::default());
    let mut files = Vec::new();
    for (i, (path, s)) in a.audio.iter().zip(&sigs).enumerate() {
        let name = path.display().to_string();
        ix.add(i as u32, name.clone(), s)?;
        files.push(json!({ "id": i, "name": name, "signatures": s.len() }));
    }
    let mut w = create(&a.out)?;
    write_index(&mut w, &ix)?;
    w.flush()?;
    let v = json!({
        "out": a.out.display().to_string(),
        "audios": ix.num_audios(),
        "keys": ix.num_keys(),
        "postings": ix.num_postings(),
        "files": files,
    });
    Ok(render(&v, pretty))
}

fn fp_query(a: &FpQueryArgs, pretty: bool) -> Result<String> {
    let ix = read_index(&mut open(&a.index)?).with_context(|| format!("reading index {}", a.index.display()))?;
    let sigs = fingerprint_file(&a.audio)?;
    let results: Vec<Value> = ix
        .query(&sigs, a.tolerance)?
        .into_iter()
        .filter(|m| m.votes >= a.min_votes)
        .take(a.top)
        .enumerate()
        .map(|(r, m)| {
            json!({
                "rank": r + 1,
                "audio_id": m.audio_id,
                "name": ix.name(m.audio_id),
                "offset": m.offset,
                "offset_s": m.offset as f64 / FP_FRAME_RATE_HZ as f64,
                "votes": m.votes,
            })
        })
        .collect();
    Ok(render(&json!({ "results": results }), pretty))
}

fn fp_dedup(a: &FpDedupArgs, pretty: bool) -> Result<String> {
    if a.min_matches == 0 || a.threshold == 0 {
        usage!("--min-matches and --threshold must be positive");
    }
    let p = DedupParams {
        min_matches: a.min_matches,
        threshold: a.threshold,
        tolerance: a.tolerance,
    };
    let sp = SignatureParams::default();
    let corpus: Vec<(u32, Vec<_>)> = fingerprint_all(&a.audio)?
        .into_iter()
        .enumerate()
        .map(|(i, s)| (i as u32, s))
        .collect();
    let dup = build_duplicate_set(&corpus, sp, &p)?;
    let mut results = Vec::new();
    for (id, sigs) in &corpus {
        let (flag, score) = is_duplicate(sigs, &dup)?;
        if flag {
            results.push(json!({
                "audio_id": id,
                "name": a.audio[*id as usize].display().to_string(),
                "score": score,
            }));
        }
    }
    if let Some(out) = &a.out {
        let mut w = create(out)?;
        write_signatures(&mut w, &dup.signatures(), sp)?;
        w.flush()?;
    }
    let v = json!({
        "clips": corpus.len(),
        "duplicate_signatures": dup.len(),
        "results": results,
    });
    Ok(render(&v, pretty))
}
