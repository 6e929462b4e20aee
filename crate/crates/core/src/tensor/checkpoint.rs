//! Checkpoint file layout (all integers little-endian u32):
//!
//! ```text
//! "TISCKPT1" | count | { name_len | name (UTF-8) | rank | extents… | f64 LE data… } × count
//! ```

use std::fs;
use std::path::Path;

use super::{ParamStore, Tensor};
use crate::error::{Error, Result};
use crate::io::{Reader, Writer};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"TISCKPT1";

pub fn checkpoint_bytes(store: &ParamStore) -> Vec<u8> {
    let mut w = Writer::new(CHECKPOINT_MAGIC);
    w.u32(store.len() as u32);
    for p in store.iter() {
        w.u32(p.name.len() as u32);
        w.bytes(p.name.as_bytes());
        w.u32(p.value.rank() as u32);
        for &e in p.value.shape() {
            w.u32(e as u32);
        }
        for &v in p.value.data() {
            w.f64(v);
        }
    }
    w.finish()
}

pub fn parse_checkpoint(bytes: &[u8]) -> Result<ParamStore> {
    let mut r = Reader::new("checkpoint", bytes, CHECKPOINT_MAGIC)?;
    let count = r.u32()? as usize;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|e| Error::format("checkpoint", format!("parameter name: {e}")))?
            .to_owned();
        let rank = r.u32()? as usize;
        let shape = (0..rank).map(|_| r.u32().map(|e| e as usize)).collect::<Result<Vec<_>>>()?;
        let len: usize = shape.iter().product();
        let data = (0..len).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
        let value = Tensor::new(shape, data).map_err(|e| Error::format("checkpoint", e.to_string()))?;
        store.add(name, value)?;
    }
    r.expect_end()?;
    Ok(store)
}

pub fn write_checkpoint(path: &Path, store: &ParamStore) -> Result<()> {
    fs::write(path, checkpoint_bytes(store)).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(path: &Path) -> Result<ParamStore> {
    let bytes = match fs::read(path) {
        Ok(b) => b,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            return Err(Error::MissingCheckpoint(path.to_path_buf()))
        }
        Err(e) => return Err(Error::io(path, e)),
    };
    parse_checkpoint(&bytes)
}
