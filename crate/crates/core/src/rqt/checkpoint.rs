use std::io::{Read, Write};

use ndarray::Array2;

use super::{ParamStore, RqtConfig, RqtModel};
use crate::binio::{self, magic};
use crate::error::{format_err, input_err, Result};

const CHECKPOINT_MAGIC: u32 = magic(b"RQTC");
const CHECKPOINT_VERSION: u32 = 1;

/// Layout: magic, version, config JSON (u32 length + bytes), tensor count,
/// then per tensor its name (u16 length + UTF-8), rows, cols and values as
/// LE f32.
pub fn write_checkpoint<W: Write>(w: &mut W, model: &RqtModel) -> Result<()> {
    binio::write_u32(w, CHECKPOINT_MAGIC)?;
    binio::write_u32(w, CHECKPOINT_VERSION)?;
    let cfg = serde_json::to_vec(model.config())?;
    binio::write_u32(w, cfg.len() as u32)?;
    w.write_all(&cfg)?;
    binio::write_u32(w, model.params().len() as u32)?;
    for (name, t) in model.params().iter() {
        let bytes = name.as_bytes();
        let len = u16::try_from(bytes.len()).map_err(|_| input_err!("tensor name too long"))?;
        binio::write_u16(w, len)?;
        w.write_all(bytes)?;
        binio::write_u32(w, t.nrows() as u32)?;
        binio::write_u32(w, t.ncols() as u32)?;
        for &x in t.iter() {
            binio::write_f32(w, x as f32)?;
        }
    }
    Ok(())
}

pub fn read_checkpoint<R: Read>(r: &mut R) -> Result<RqtModel> {
    binio::expect_header(r, CHECKPOINT_MAGIC, CHECKPOINT_VERSION, "checkpoint")?;
    let len = binio::read_u32(r)? as usize;
    let cfg: RqtConfig = serde_json::from_slice(&binio::read_bytes(r, len)?)?;
    let count = binio::read_u32(r)?;
    let mut params = ParamStore::new();
    for _ in 0..count {
        let len = binio::read_u16(r)? as usize;
        let name = String::from_utf8(binio::read_bytes(r, len)?)
            .map_err(|_| format_err!("checkpoint: tensor name is not UTF-8"))?;
        let rows = binio::read_u32(r)? as usize;
        let cols = binio::read_u32(r)? as usize;
        let n = rows
            .checked_mul(cols)
            .filter(|&n| n <= 1 << 28)
            .ok_or_else(|| format_err!("checkpoint: tensor {name} is implausibly large"))?;
        let mut values = Vec::with_capacity(n);
        for _ in 0..n {
            values.push(binio::read_f32(r)? as f64);
        }
        let t = Array2::from_shape_vec((rows, cols), values).expect("length checked");
        params.insert(name, t);
    }
    binio::expect_eof(r, "checkpoint")?;
    RqtModel::from_params(cfg, params).map_err(|e| format_err!("checkpoint: {e}"))
}
