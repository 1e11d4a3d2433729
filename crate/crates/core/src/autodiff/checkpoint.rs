//! Binary checkpoint layout, all integers little-endian `u32`:
//!
//! ```text
//! version | parameter count
//! per parameter: name length | name bytes (UTF-8) | rank | dims... | f32 payload
//! ```

use std::io::{Read, Write};

use crate::autodiff::{ParamStore, Real, Tensor};
use crate::error::{Error, Result};

pub const CHECKPOINT_VERSION: u32 = 1;

fn put_u32(w: &mut impl Write, v: u32) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn get_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)
        .map_err(|e| Error::Data(format!("truncated checkpoint: {e}")))?;
    Ok(u32::from_le_bytes(b))
}

pub fn write_checkpoint<T: Real>(params: &ParamStore<T>, w: &mut impl Write) -> std::io::Result<()> {
    put_u32(w, CHECKPOINT_VERSION)?;
    put_u32(w, params.len() as u32)?;
    for p in params.iter() {
        put_u32(w, p.name.len() as u32)?;
        w.write_all(p.name.as_bytes())?;
        put_u32(w, 2)?;
        put_u32(w, p.value.rows() as u32)?;
        put_u32(w, p.value.cols() as u32)?;
        for &v in p.value.data() {
            w.write_all(&(v.as_f64() as f32).to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_checkpoint(r: &mut impl Read) -> Result<ParamStore<f32>> {
    let version = get_u32(r)?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Data(format!(
            "checkpoint version {version}, expected {CHECKPOINT_VERSION}"
        )));
    }
    let count = get_u32(r)?;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let len = get_u32(r)? as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name)
            .map_err(|e| Error::Data(format!("truncated checkpoint: {e}")))?;
        let name = String::from_utf8(name)
            .map_err(|_| Error::Data("parameter name is not UTF-8".into()))?;
        let rank = get_u32(r)? as usize;
        let dims = (0..rank).map(|_| get_u32(r)).collect::<Result<Vec<_>>>()?;
        let (rows, cols) = match dims.as_slice() {
            [] => (1, 1),
            [n] => (*n as usize, 1),
            [a, b] => (*a as usize, *b as usize),
            _ => return Err(Error::Data(format!("{name}: rank {rank} unsupported"))),
        };
        let mut payload = vec![0u8; rows * cols * 4];
        r.read_exact(&mut payload)
            .map_err(|e| Error::Data(format!("truncated checkpoint: {e}")))?;
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        store.push(name, Tensor::new(rows, cols, data)?);
    }
    Ok(store)
}
