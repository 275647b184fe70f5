//! `RTWT` parameter checkpoints.
//!
//! Layout (little-endian): magic `RTWT`, version `u16`, count `u32`, then per
//! parameter: identifier (`u16` byte length + UTF-8), rank `u8`, extents
//! (`u32` each), raw `f32` data.

use std::io::{Read, Write};

use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::io::{read_bytes, read_u16, read_u32, read_u8};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"RTWT";
pub const CHECKPOINT_VERSION: u16 = 1;

pub fn write_checkpoint(store: &ParamStore<f32>, mut w: impl Write) -> Result<()> {
    w.write_all(&CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    w.write_all(&(store.len() as u32).to_le_bytes())?;
    for (_, p) in store.iter() {
        let name = p.name.as_bytes();
        let len = u16::try_from(name.len())
            .map_err(|_| Error::invalid(format!("identifier `{}` too long", p.name)))?;
        w.write_all(&len.to_le_bytes())?;
        w.write_all(name)?;
        let shape = p.value.shape();
        w.write_all(&[shape.len() as u8])?;
        for &e in shape {
            w.write_all(&(e as u32).to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(p.value.len() * 4);
        for v in p.value.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    Ok(())
}

/// Loads values into an already-constructed store. Every identifier in the
/// file must exist in the store with an identical shape, and vice versa.
pub fn read_checkpoint_into(store: &mut ParamStore<f32>, mut r: impl Read) -> Result<()> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|_| Error::Truncated("checkpoint header".into()))?;
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::BadMagic {
            expected: CHECKPOINT_MAGIC,
            found: magic,
        });
    }
    let version = read_u16(&mut r)?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let count = read_u32(&mut r)? as usize;
    if count != store.len() {
        return Err(Error::Format(format!(
            "checkpoint holds {count} parameters, model defines {}",
            store.len()
        )));
    }
    for _ in 0..count {
        let len = read_u16(&mut r)? as usize;
        let name = String::from_utf8(read_bytes(&mut r, len)?)
            .map_err(|_| Error::Format("identifier is not UTF-8".into()))?;
        let rank = read_u8(&mut r)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u32(&mut r)? as usize);
        }
        let id = store
            .id(&name)
            .ok_or_else(|| Error::Format(format!("unknown parameter `{name}` in checkpoint")))?;
        let expected = store.get(id).value.shape().to_vec();
        if expected != shape {
            return Err(Error::Shape(format!(
                "parameter `{name}`: checkpoint shape {shape:?}, model shape {expected:?}"
            )));
        }
        let n: usize = shape.iter().product();
        let raw = read_bytes(&mut r, n * 4)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        store.get_mut(id).value = Tensor::new(&shape, data)?;
    }
    Ok(())
}
