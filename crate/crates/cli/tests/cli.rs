use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_tokenplane"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn ok_json(args: &[&str]) -> Value {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    serde_json::from_slice(&out.stdout).expect("stdout is JSON")
}

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Deterministic tone bursts, enough structure for fingerprints.
fn tone_wav(path: &Path, seconds: f64, seed: u32) {
    let sr = 16_000u32;
    let n = (seconds * sr as f64) as usize;
    let mut x = vec![0f32; n];
    let mut state = seed.wrapping_mul(2_654_435_761).wrapping_add(1);
    let mut next = || {
        state ^= state << 13;
        state ^= state >> 17;
        state ^= state << 5;
        state as f64 / u32::MAX as f64
    };
    let mut t = 0;
    while t < n {
        let freq = 250.0 * (2800.0f64 / 250.0).powf(next());
        let len = ((0.05 + 0.2 * next()) * sr as f64) as usize;
        for i in 0..len.min(n - t) {
            let env = (std::f64::consts::PI * i as f64 / len as f64).sin();
            x[t + i] += (0.3 * env * (std::f64::consts::TAU * freq * i as f64 / sr as f64).sin()) as f32;
        }
        t += ((0.06 + 0.19 * next()) * sr as f64) as usize;
    }
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: sr,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut w = hound::WavWriter::create(path, spec).unwrap();
    for v in x {
        w.write_sample((v.clamp(-1.0, 1.0) * 32767.0) as i16).unwrap();
    }
    w.finalize().unwrap();
}

fn audio_rows(steps: usize, q: usize, vocab: u32) -> String {
    (0..steps)
        .map(|t| {
            let row: Vec<u32> = (0..q).map(|k| ((t * 7 + k * 3) as u32) % vocab).collect();
            serde_json::to_string(&row).unwrap() + "\n"
        })
        .collect()
}

#[test]
fn latency_of_the_reduced_pattern_is_240() {
    let out = run(&["latency", "--pattern", "0,2,2,2,2,2,2,2"]);
    assert!(out.status.success());
    assert_eq!(String::from_utf8(out.stdout).unwrap(), "240\n");
    let out = run(&["latency", "--pattern", "0,1,2,3,4,5,6,7"]);
    assert_eq!(String::from_utf8(out.stdout).unwrap(), "640\n");
}

#[test]
fn layout_reports_stream_counts() {
    let v = ok_json(&["layout", "--q-levels", "8"]);
    assert_eq!(v["streams"], 17);
    assert_eq!(v["tokens_per_step"], 17);
    let v = ok_json(&["layout", "--q-levels", "8", "--no-text"]);
    assert_eq!(v["tokens_per_step"], 16);
}

#[test]
fn align_emits_requested_length() {
    let dir = TempDir::new().unwrap();
    let words = write(
        dir.path(),
        "words.jsonl",
        "{\"word\":\"a\",\"tokens\":[5,6],\"start\":0.5}\n{\"word\":\"b\",\"tokens\":[7],\"start\":2.0}\n",
    );
    let v = ok_json(&["align", "--words", s(&words), "--frames", "100"]);
    let tokens = v["tokens"].as_array().unwrap();
    assert_eq!(tokens.len(), 100);
    assert_eq!(tokens[5], 1);
    assert_eq!(tokens[6], 5);
    assert_eq!(tokens[7], 6);
}

#[test]
fn binary_and_json_grids_reload_with_inspect() {
    let dir = TempDir::new().unwrap();
    let agent = write(dir.path(), "agent.jsonl", &audio_rows(10, 2, 8));
    let user = write(dir.path(), "user.jsonl", &audio_rows(10, 2, 5));
    let text = write(dir.path(), "text.json", "[0,0,1,4,5,0,1,6,0,0]");
    let mut shapes = Vec::new();
    for format in ["binary", "json"] {
        let out = dir.path().join(format!("grid.{format}"));
        let v = ok_json(&[
            "layout", "--agent", s(&agent), "--user", s(&user), "--text", s(&text),
            "--pattern", "0,1", "--text-vocab", "8", "--audio-vocab", "8",
            "--out", s(&out), "--format", format,
        ]);
        assert_eq!(v["streams"], 5);
        let ins = ok_json(&["layout", "--inspect", s(&out), "--rows"]);
        assert_eq!(ins["format"], format);
        assert_eq!(ins["streams"], 5);
        assert_eq!(ins["steps"], 11);
        assert_eq!(ins["flattened_steps"], 55);
        // First row: text starts at once, delayed acoustic levels hold the initial id.
        assert_eq!(ins["rows"][0], serde_json::json!([1, 1, 0, 1, 0]));
        shapes.push(ins["rows"].clone());
    }
    assert_eq!(shapes[0], shapes[1]);
}

#[test]
fn train_sample_and_engines_run_deterministically() {
    let dir = TempDir::new().unwrap();
    let ckpt = dir.path().join("asr.ckpt");
    let train_args = [
        "rqt-train", "--task", "copy", "--steps", "3", "--grids", "4", "--grid-steps", "6",
        "--d-temporal", "16", "--d-depth", "8", "--seed", "7", "--out", s(&ckpt),
    ];
    let v = ok_json(&train_args);
    assert_eq!(v["streams"], 4);
    assert_eq!(v["steps"], 3);
    let bytes = std::fs::read(&ckpt).unwrap();
    ok_json(&train_args);
    assert_eq!(bytes, std::fs::read(&ckpt).unwrap(), "training is seeded");

    let sample = ["rqt-sample", "--model", s(&ckpt), "--steps", "5", "--seed", "3"];
    let a = run(&sample);
    let b = run(&sample);
    assert!(a.status.success());
    assert_eq!(a.stdout, b.stdout);
    let v: Value = serde_json::from_slice(&a.stdout).unwrap();
    assert_eq!(v["rows"].as_array().unwrap().len(), 5);

    let audio = write(dir.path(), "audio.jsonl", &audio_rows(30, 3, 6));
    let log = dir.path().join("asr.log");
    let v = ok_json(&["asr", "--model", s(&ckpt), "--audio", s(&audio), "--delay", "4", "--log", s(&log)]);
    assert_eq!(v["text"].as_array().unwrap().len(), 26);
    assert_eq!(v["first_emission_step"], 4);
    for w in v["words"].as_array().unwrap() {
        assert_eq!(w["time_ms"].as_u64().unwrap() % 80, 0);
    }
    let rows = std::fs::read_to_string(&log).unwrap();
    assert_eq!(rows.lines().count(), 30);
    let first: Value = serde_json::from_str(rows.lines().next().unwrap()).unwrap();
    assert_eq!(first["mode"], "asr");

    let words = write(dir.path(), "words.jsonl", "{\"tokens\":[3]}\n{\"tokens\":[4,5]}\n");
    let tts = ["tts", "--model", s(&ckpt), "--words", s(&words), "--delay", "2", "--seed", "1"];
    let v = ok_json(&tts);
    assert_eq!(v["finished"], true);
    let text: Vec<u64> = v["text"].as_array().unwrap().iter().filter_map(Value::as_u64).collect();
    let spoken: Vec<u64> = text.into_iter().filter(|&t| t > 1).collect();
    assert_eq!(spoken, vec![3, 4, 5]);
    assert_eq!(run(&tts).stdout, run(&tts).stdout);
}

#[test]
fn dialogue_runs_on_a_model_trained_from_a_layout() {
    let dir = TempDir::new().unwrap();
    let agent = write(dir.path(), "agent.jsonl", &audio_rows(12, 2, 6));
    let user = write(dir.path(), "user.jsonl", &audio_rows(12, 2, 6));
    let text = write(dir.path(), "text.json", "[0,0,1,4,5,0,1,6,0,0,0,0]");
    let grid = dir.path().join("grid.bin");
    ok_json(&[
        "layout", "--agent", s(&agent), "--user", s(&user), "--text", s(&text),
        "--pattern", "0,1", "--text-vocab", "8", "--audio-vocab", "6", "--out", s(&grid),
    ]);
    let ckpt = dir.path().join("dlg.ckpt");
    let v = ok_json(&[
        "rqt-train", "--data", s(&grid), "--q-levels", "2", "--steps", "2", "--batch-size", "1",
        "--d-temporal", "16", "--d-depth", "8", "--out", s(&ckpt),
    ]);
    assert_eq!(v["streams"], 5);
    let v = ok_json(&["dialogue", "--model", s(&ckpt), "--user", s(&user), "--seed", "4"]);
    assert_eq!(v["audio"].as_array().unwrap().len(), 12);
    assert_eq!(v["audio"][0].as_array().unwrap().len(), 2);
    // As an ASR model the same checkpoint expects 4 codes per step.
    let out = run(&["asr", "--model", s(&ckpt), "--audio", s(&user)]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn entropy_report_partitions_windows() {
    let dir = TempDir::new().unwrap();
    let rows: String = (0..200)
        .map(|t| format!("[{}, {}, {}]\n", 1 + t % 40, 1 + (t * 7) % 3, 1 + t % 2))
        .collect();
    let grid = write(dir.path(), "grid.jsonl", &rows);
    let v = ok_json(&["entropy", "--grid", s(&grid), "--q-levels", "2", "--context", "16", "--window", "16", "--windows"]);
    let n = v["window_count"].as_u64().unwrap();
    assert_eq!(n, (200 - 16 + 1) / 16);
    assert_eq!(v["windows"].as_array().unwrap().len() as u64, n);
    let total: f64 = ["gibberish_pct", "noisy_pct", "background_pct", "repetitive_pct", "no_artifacts_pct"]
        .iter()
        .map(|k| v[*k].as_f64().unwrap())
        .sum();
    assert!((total - 100.0).abs() < 1e-9);
    let out = run(&["entropy", "--grid", s(&grid), "--q-levels", "2", "--context", "16", "--window", "16", "--pretty"]);
    assert!(String::from_utf8(out.stdout).unwrap().contains("No artifacts"));
}

#[test]
fn fingerprint_index_query_and_dedup() {
    let dir = TempDir::new().unwrap();
    let wavs: Vec<PathBuf> = (0..4)
        .map(|i| {
            let p = dir.path().join(format!("clip{i}.wav"));
            tone_wav(&p, 6.0, i);
            p
        })
        .collect();
    let idx = dir.path().join("idx.bin");
    let mut args = vec!["fp-index", "--out", s(&idx), "--audio"];
    args.extend(wavs.iter().map(|p| s(p)));
    let v = ok_json(&args);
    assert_eq!(v["audios"], 4);
    for (i, w) in wavs.iter().enumerate() {
        let q = ["fp-query", "--index", s(&idx), "--audio", s(w)];
        let v = ok_json(&q);
        assert_eq!(v["results"][0]["rank"], 1);
        assert_eq!(v["results"][0]["audio_id"], i);
        assert_eq!(v["results"][0]["offset"], 0);
        assert_eq!(run(&q).stdout, run(&q).stdout);
    }

    let silent = dir.path().join("silent.wav");
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: 16_000,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut w = hound::WavWriter::create(&silent, spec).unwrap();
    for _ in 0..16_000 {
        w.write_sample(0i16).unwrap();
    }
    w.finalize().unwrap();
    let out = run(&["fp-query", "--index", s(&idx), "--audio", s(&silent)]);
    assert!(out.status.success());
    assert_eq!(String::from_utf8(out.stdout).unwrap(), "{\"results\":[]}\n");

    let dup_out = dir.path().join("dup.sig");
    let mut args = vec!["fp-dedup", "--min-matches", "1", "--out", s(&dup_out), "--audio"];
    args.extend(wavs.iter().map(|p| s(p)));
    let copy = dir.path().join("copy.wav");
    std::fs::copy(&wavs[0], &copy).unwrap();
    args.push(s(&copy));
    let v = ok_json(&args);
    let flagged: Vec<u64> = v["results"].as_array().unwrap().iter().map(|r| r["audio_id"].as_u64().unwrap()).collect();
    assert_eq!(flagged, vec![0, 4]);
    assert!(v["duplicate_signatures"].as_u64().unwrap() > 0);
    assert!(dup_out.is_file());
}

#[test]
fn misuse_exit_codes() {
    let dir = TempDir::new().unwrap();
    let d = dir.path();
    let words = write(d, "words.jsonl", "{\"word\":\"a\",\"tokens\":[5],\"start\":0.5}\n");
    let garbage = write(d, "garbage.bin", "not a grid at all");
    let broken_words = write(d, "broken.jsonl", "{\"tokens\": [1,\n");
    let ragged = write(d, "ragged.jsonl", "[1,2]\n[1]\n");
    let wav_text = write(d, "fake.wav", "RIFF????");
    let ckpt = d.join("m.ckpt");
    ok_json(&[
        "rqt-train", "--task", "copy", "--steps", "1", "--grids", "2", "--grid-steps", "4",
        "--d-temporal", "16", "--d-depth", "8", "--out", s(&ckpt),
    ]);
    let big_audio = write(d, "big.jsonl", "[100, 100, 100]\n");
    let two_audio = write(d, "two.jsonl", "[1, 1]\n");
    let unwritable = d.join("no_such_dir").join("out.bin");
    let index_out = d.join("i.bin");

    let cases: Vec<(Vec<&str>, i32)> = vec![
        (vec![], 2),
        (vec!["frobnicate"], 2),
        (vec!["latency"], 2),
        (vec!["latency", "--pattern", "0,x,2"], 2),
        (vec!["latency", "--pattern", "3,1,1"], 2),
        (vec!["align", "--frames", "10"], 2),
        (vec!["align", "--words", "/nonexistent/words.jsonl", "--frames", "10"], 2),
        (vec!["align", "--words", s(&words), "--frames", "ten"], 2),
        (vec!["align", "--words", s(&words), "--frames", "10", "--pad-id", "3", "--epad-id", "3"], 2),
        (vec!["layout", "--q-levels", "2", "--pattern", "0,1,1"], 2),
        (vec!["fp-query", "--index", s(&words), "--audio", s(&words), "--tolerance", "3"], 2),
        (vec!["rqt-train", "--out", s(&ckpt), "--lr", "-1"], 2),
        (vec!["tts", "--model", s(&ckpt), "--words", s(&words), "--pad-target", "1.5"], 2),
        (vec!["align", "--words", s(&broken_words), "--frames", "10"], 1),
        (vec!["align", "--words", s(&words), "--frames", "3"], 1),
        (vec!["layout", "--inspect", s(&garbage)], 1),
        (vec!["entropy", "--grid", s(&ragged)], 1),
        (vec!["fp-index", "--audio", s(&wav_text), "--out", s(&index_out)], 1),
        (vec!["asr", "--model", s(&ckpt), "--audio", s(&big_audio)], 1),
        (vec!["asr", "--model", s(&ckpt), "--audio", s(&two_audio)], 1),
        (vec!["rqt-train", "--task", "copy", "--steps", "1", "--out", s(&unwritable)], 1),
        (vec!["rqt-sample", "--model", s(&words)], 1),
    ];
    assert!(cases.len() >= 20);
    for (args, code) in &cases {
        let out = run(args);
        assert_eq!(
            out.status.code(),
            Some(*code),
            "{args:?}: stderr {}",
            String::from_utf8_lossy(&out.stderr)
        );
        assert!(out.stdout.is_empty(), "{args:?} wrote to stdout");
        assert!(!out.stderr.is_empty(), "{args:?} gave no message");
    }
    let out = run(&["frobnicate"]);
    assert!(String::from_utf8_lossy(&out.stderr).contains("fp-dedup"), "help lists subcommands");
    assert_eq!(run(&["--help"]).status.code(), Some(0));
}
