//! Binary parameter container.
//!
//! ```text
//! magic    8 bytes  "NCPCKPT\0"
//! version  u32 LE
//! meta     u32 LE length + UTF-8 bytes (opaque to the container)
//! count    u32 LE
//! count × { name: u32 LE length + UTF-8, rows: u32 LE, cols: u32 LE,
//!           frozen: u8, payload: rows·cols × f32 LE }
//! ```

use std::io::{self, Read, Write};

use thiserror::Error;

use super::{ParamStore, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"NCPCKPT\0";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("not a checkpoint file")]
    Magic,
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
}

fn put_u32(w: &mut impl Write, x: u32) -> io::Result<()> {
    w.write_all(&x.to_le_bytes())
}

fn get_u32(r: &mut impl Read) -> io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn put_str(w: &mut impl Write, s: &str) -> io::Result<()> {
    put_u32(w, s.len() as u32)?;
    w.write_all(s.as_bytes())
}

fn get_str(r: &mut impl Read) -> Result<String, CheckpointError> {
    let n = get_u32(r)? as usize;
    let mut b = vec![0u8; n];
    r.read_exact(&mut b)?;
    String::from_utf8(b).map_err(|e| CheckpointError::Malformed(e.to_string()))
}

pub fn write_checkpoint(
    w: &mut impl Write,
    store: &ParamStore,
    meta: &str,
) -> Result<(), CheckpointError> {
    w.write_all(CHECKPOINT_MAGIC)?;
    put_u32(w, CHECKPOINT_VERSION)?;
    put_str(w, meta)?;
    put_u32(w, store.len() as u32)?;
    for p in store.iter() {
        put_str(w, &p.name)?;
        put_u32(w, p.value.rows() as u32)?;
        put_u32(w, p.value.cols() as u32)?;
        w.write_all(&[u8::from(p.frozen)])?;
        let mut buf = Vec::with_capacity(p.value.len() * 4);
        for &x in p.value.data() {
            buf.extend_from_slice(&(x as f32).to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    Ok(())
}

/// A stored parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct StoredParam {
    pub name: String,
    pub value: Tensor,
    pub frozen: bool,
}

/// Returns the metadata block and the parameters in file order.
pub fn read_checkpoint(r: &mut impl Read) -> Result<(String, Vec<StoredParam>), CheckpointError> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(CheckpointError::Magic);
    }
    let version = get_u32(r)?;
    if version != CHECKPOINT_VERSION {
        return Err(CheckpointError::Version(version));
    }
    let meta = get_str(r)?;
    let count = get_u32(r)?;
    let mut out = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let name = get_str(r)?;
        let rows = get_u32(r)? as usize;
        let cols = get_u32(r)? as usize;
        let mut flag = [0u8; 1];
        r.read_exact(&mut flag)?;
        let mut buf = vec![0u8; rows * cols * 4];
        r.read_exact(&mut buf)?;
        let data = buf
            .chunks_exact(4)
            .map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]])))
            .collect();
        let value =
            Tensor::from_vec(rows, cols, data).map_err(|e| CheckpointError::Malformed(e.to_string()))?;
        out.push(StoredParam {
            name,
            value,
            frozen: flag[0] != 0,
        });
    }
    Ok((meta, out))
}
