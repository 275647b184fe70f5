//! The `.rwmd` metadata file: header, model hash and one range-coded stream
//! per latent level.
//!
//! Layout (little-endian):
//!
//! | bytes | field |
//! |-------|-------|
//! | 4 | magic `RWMD` |
//! | 2 | version |
//! | 2 | width |
//! | 2 | height |
//! | 1 | beta |
//! | 4 | gamma (`f32`) |
//! | 8 | model hash |
//! | 1 | level count |
//!
//! followed by each level as `u32` length, `u32` CRC-32, payload. The hyper
//! level comes first.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::entropymodel::VarRateConfig;
use crate::error::{Error, Result};
use crate::io::{read_f32, read_u16, read_u8};
use crate::rangecoder::Bitstream;

pub const CONTAINER_MAGIC: [u8; 4] = *b"RWMD";
pub const CONTAINER_VERSION: u16 = 1;
pub const HEADER_BYTES: usize = 24;
/// Length and checksum in front of every level payload.
pub const FRAME_BYTES: usize = 8;

#[derive(Clone, Debug, PartialEq)]
pub struct Container {
    pub width: u16,
    pub height: u16,
    pub rate: VarRateConfig,
    pub model_hash: [u8; 8],
    pub levels: Vec<Bitstream>,
}

impl Container {
    pub fn write(&self, mut w: impl Write) -> Result<()> {
        let count = u8::try_from(self.levels.len()).map_err(|_| Error::invalid("too many levels"))?;
        w.write_all(&CONTAINER_MAGIC)?;
        w.write_all(&CONTAINER_VERSION.to_le_bytes())?;
        w.write_all(&self.width.to_le_bytes())?;
        w.write_all(&self.height.to_le_bytes())?;
        w.write_all(&[self.rate.beta])?;
        w.write_all(&self.rate.gamma.to_le_bytes())?;
        w.write_all(&self.model_hash)?;
        w.write_all(&[count])?;
        for l in &self.levels {
            l.write_framed(&mut w)?;
        }
        Ok(())
    }

    /// Parses a container. Checksums are verified; trailing bytes are an error.
    pub fn read(mut r: impl Read) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)
            .map_err(|_| Error::Truncated("container header".into()))?;
        if magic != CONTAINER_MAGIC {
            return Err(Error::BadMagic {
                expected: CONTAINER_MAGIC,
                found: magic,
            });
        }
        let version = read_u16(&mut r)?;
        if version != CONTAINER_VERSION {
            return Err(Error::UnsupportedVersion(version));
        }
        let width = read_u16(&mut r)?;
        let height = read_u16(&mut r)?;
        let beta = read_u8(&mut r)?;
        let gamma = read_f32(&mut r)?;
        let mut model_hash = [0u8; 8];
        r.read_exact(&mut model_hash)
            .map_err(|_| Error::Truncated("container header".into()))?;
        let count = read_u8(&mut r)?;
        let levels = (0..count)
            .map(|_| Bitstream::read_framed(&mut r))
            .collect::<Result<Vec<_>>>()?;
        let mut rest = Vec::new();
        r.read_to_end(&mut rest)?;
        if !rest.is_empty() {
            return Err(Error::Format(format!("{} bytes after the last level", rest.len())));
        }
        Ok(Container {
            width,
            height,
            rate: VarRateConfig { beta, gamma },
            model_hash,
            levels,
        })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut v = Vec::with_capacity(self.byte_len());
        self.write(&mut v)?;
        Ok(v)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        Container::read(bytes)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Container::read(BufReader::new(File::open(path)?))
    }

    pub fn byte_len(&self) -> usize {
        HEADER_BYTES + self.levels.iter().map(|l| FRAME_BYTES + l.payload.len()).sum::<usize>()
    }

    pub fn payload_bits(&self) -> u64 {
        self.levels.iter().map(Bitstream::bit_len).sum()
    }

    /// Payload bits per pixel. Header and framing are not counted.
    pub fn bpp(&self) -> f64 {
        self.payload_bits() as f64 / (self.width as f64 * self.height as f64)
    }
}
