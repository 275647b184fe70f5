//! Little-endian read helpers shared by the binary formats.

use std::io::Read;

use crate::error::{Error, Result};

fn fill(r: &mut impl Read, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::Truncated(format!("needed {} more bytes", buf.len())),
        _ => Error::Io(e),
    })
}

pub(crate) fn read_u8(r: &mut impl Read) -> Result<u8> {
    let mut b = [0u8; 1];
    fill(r, &mut b)?;
    Ok(b[0])
}

pub(crate) fn read_u16(r: &mut impl Read) -> Result<u16> {
    let mut b = [0u8; 2];
    fill(r, &mut b)?;
    Ok(u16::from_le_bytes(b))
}

pub(crate) fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    fill(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub(crate) fn read_f32(r: &mut impl Read) -> Result<f32> {
    Ok(f32::from_bits(read_u32(r)?))
}

/// Reads exactly `n` bytes without trusting `n` for the allocation size.
pub(crate) fn read_bytes(r: &mut impl Read, n: usize) -> Result<Vec<u8>> {
    let mut buf = Vec::with_capacity(n.min(1 << 20));
    Read::take(&mut *r, n as u64).read_to_end(&mut buf)?;
    if buf.len() != n {
        return Err(Error::Truncated(format!("needed {} more bytes", n - buf.len())));
    }
    Ok(buf)
}
