//! Little-endian helpers shared by the binary file formats.

use std::io::{Read, Write};

use crate::error::{format_err, Result};

pub fn write_u32<W: Write>(w: &mut W, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

pub fn write_u16<W: Write>(w: &mut W, v: u16) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

pub fn write_f32<W: Write>(w: &mut W, v: f32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

pub fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)
        .map_err(|e| format_err!("truncated input: {e}"))?;
    Ok(u32::from_le_bytes(buf))
}

pub fn read_u16<R: Read>(r: &mut R) -> Result<u16> {
    let mut buf = [0u8; 2];
    r.read_exact(&mut buf)
        .map_err(|e| format_err!("truncated input: {e}"))?;
    Ok(u16::from_le_bytes(buf))
}

pub fn read_f32<R: Read>(r: &mut R) -> Result<f32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)
        .map_err(|e| format_err!("truncated input: {e}"))?;
    Ok(f32::from_le_bytes(buf))
}

pub fn read_bytes<R: Read>(r: &mut R, len: usize) -> Result<Vec<u8>> {
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)
        .map_err(|e| format_err!("truncated input: {e}"))?;
    Ok(buf)
}

/// Reads the `(magic, version)` pair and checks both.
pub fn expect_header<R: Read>(r: &mut R, magic: u32, version: u32, what: &str) -> Result<()> {
    let got = read_u32(r)?;
    if got != magic {
        return Err(format_err!("{what}: bad magic {got:#010x}, expected {magic:#010x}"));
    }
    let got = read_u32(r)?;
    if got != version {
        return Err(format_err!("{what}: unsupported version {got}"));
    }
    Ok(())
}

/// Errors unless the reader is exhausted.
pub fn expect_eof<R: Read>(r: &mut R, what: &str) -> Result<()> {
    let mut probe = [0u8; 1];
    match r.read(&mut probe)? {
        0 => Ok(()),
        _ => Err(format_err!("{what}: trailing bytes after payload")),
    }
}

pub const fn magic(tag: &[u8; 4]) -> u32 {
    u32::from_le_bytes(*tag)
}
