use std::io::{Read, Write};
use std::path::Path;

use super::index::{Posting, SignatureIndex};
use super::keypoints::{pack_key, unpack_key, Signature, SignatureParams};
use crate::binio::{self, magic};
use crate::error::{format_err, input_err, Result};

const SIGNATURE_MAGIC: u32 = magic(b"FPSG");
const INDEX_MAGIC: u32 = magic(b"FPIX");
const VERSION: u32 = 1;

/// Reads 16-bit PCM (or float) WAV as mono `f32` in `[-1, 1]`, averaging
/// channels. Returns the samples and the sample rate.
pub fn read_wav(path: &Path) -> Result<(Vec<f32>, u32)> {
    let mut reader = hound::WavReader::open(path)
        .map_err(|e| input_err!("cannot read WAV {}: {e}", path.display()))?;
    let spec = reader.spec();
    let channels = spec.channels as usize;
    if channels == 0 {
        return Err(format_err!("WAV has no channels"));
    }
    let interleaved: Vec<f32> = match (spec.sample_format, spec.bits_per_sample) {
        (hound::SampleFormat::Int, 16) => reader
            .samples::<i16>()
            .map(|s| s.map(|v| v as f32 / 32768.0))
            .collect::<Result<_, _>>(),
        (hound::SampleFormat::Float, 32) => reader.samples::<f32>().collect::<Result<_, _>>(),
        (fmt, bits) => {
            return Err(input_err!("unsupported WAV encoding {fmt:?} {bits}-bit"));
        }
    }
    .map_err(|e| format_err!("corrupt WAV {}: {e}", path.display()))?;
    let mono = interleaved
        .chunks_exact(channels)
        .map(|frame| frame.iter().sum::<f32>() / channels as f32)
        .collect();
    Ok((mono, spec.sample_rate))
}

/// Header `magic, version, m, M, count`, then `(key, anchor)` records, all
/// little-endian u32.
pub fn write_signatures<W: Write>(w: &mut W, sigs: &[Signature], p: SignatureParams) -> Result<()> {
    for v in [SIGNATURE_MAGIC, VERSION, p.m, p.big_m, sigs.len() as u32] {
        binio::write_u32(w, v)?;
    }
    for s in sigs {
        binio::write_u32(w, pack_key(s, p)?)?;
        binio::write_u32(w, s.anchor)?;
    }
    Ok(())
}

fn read_params<R: Read>(r: &mut R) -> Result<SignatureParams> {
    let m = binio::read_u32(r)?;
    let big_m = binio::read_u32(r)?;
    SignatureParams::new(m, big_m).map_err(|e| format_err!("{e}"))
}

pub fn read_signatures<R: Read>(r: &mut R) -> Result<(SignatureParams, Vec<Signature>)> {
    binio::expect_header(r, SIGNATURE_MAGIC, VERSION, "signature file")?;
    let p = read_params(r)?;
    let count = binio::read_u32(r)? as usize;
    let mut sigs = Vec::with_capacity(count.min(1 << 20));
    for _ in 0..count {
        let key = binio::read_u32(r)?;
        let anchor = binio::read_u32(r)?;
        sigs.push(unpack_key(key, anchor, p).map_err(|e| format_err!("{e}"))?);
    }
    binio::expect_eof(r, "signature file")?;
    Ok((p, sigs))
}

/// Header `magic, version, m, M`; the names table (`count`, then `id,
/// signature count, name length (u16), UTF-8 name`); then `key count` and
/// per key in ascending order `key, posting count, (audio_id, anchor)*`.
pub fn write_index<W: Write>(w: &mut W, ix: &SignatureIndex) -> Result<()> {
    let p = ix.params();
    for v in [INDEX_MAGIC, VERSION, p.m, p.big_m, ix.num_audios() as u32] {
        binio::write_u32(w, v)?;
    }
    for (&id, name) in ix.names() {
        binio::write_u32(w, id)?;
        binio::write_u32(w, ix.signature_count(id) as u32)?;
        let bytes = name.as_bytes();
        let len = u16::try_from(bytes.len()).map_err(|_| input_err!("audio name too long"))?;
        binio::write_u16(w, len)?;
        w.write_all(bytes)?;
    }
    let entries = ix.sorted_entries();
    binio::write_u32(w, entries.len() as u32)?;
    for (key, postings) in entries {
        binio::write_u32(w, key)?;
        binio::write_u32(w, postings.len() as u32)?;
        for p in postings {
            binio::write_u32(w, p.audio_id)?;
            binio::write_u32(w, p.anchor)?;
        }
    }
    Ok(())
}

pub fn read_index<R: Read>(r: &mut R) -> Result<SignatureIndex> {
    binio::expect_header(r, INDEX_MAGIC, VERSION, "index file")?;
    let p = read_params(r)?;
    let mut ix = SignatureIndex::new(p);
    let audios = binio::read_u32(r)?;
    for _ in 0..audios {
        let id = binio::read_u32(r)?;
        let count = binio::read_u32(r)? as usize;
        let len = binio::read_u16(r)? as usize;
        let name = String::from_utf8(binio::read_bytes(r, len)?)
            .map_err(|_| format_err!("index file: audio name is not UTF-8"))?;
        if ix.contains(id) {
            return Err(format_err!("index file: audio id {id} listed twice"));
        }
        ix.register(id, name, count);
    }
    let keys = binio::read_u32(r)?;
    let mut last = None;
    for _ in 0..keys {
        let key = binio::read_u32(r)?;
        if key >> 26 != 0 || last.is_some_and(|l| key <= l) {
            return Err(format_err!("index file: keys must be ascending 26-bit values"));
        }
        last = Some(key);
        let n = binio::read_u32(r)? as usize;
        let mut postings = Vec::with_capacity(n.min(1 << 20));
        for _ in 0..n {
            let audio_id = binio::read_u32(r)?;
            let anchor = binio::read_u32(r)?;
            if !ix.contains(audio_id) {
                return Err(format_err!("index file: posting for unknown audio {audio_id}"));
            }
            postings.push(Posting { audio_id, anchor });
        }
        if postings.windows(2).any(|w| w[0] > w[1]) {
            return Err(format_err!("index file: postings of key {key:#x} are not sorted"));
        }
        ix.insert_raw(key, postings);
    }
    binio::expect_eof(r, "index file")?;
    Ok(ix)
}
