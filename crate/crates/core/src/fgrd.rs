//! FGRD: the on-disk grid format shared by every command.
//!
//! Layout (all little-endian): `b"FGRD"`, `u32` version (= 1), `u32` height,
//! `u32` width, `u32` channels, then `channels * height * width` `f32`
//! values, row-major within a channel, channels contiguous.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::fields::{Field, GridSpec, JointState};

pub const MAGIC: &[u8; 4] = b"FGRD";
pub const VERSION: u32 = 1;
const HEADER_LEN: usize = 20;

#[derive(Debug, Clone, PartialEq)]
pub struct FgrdData {
    pub height: usize,
    pub width: usize,
    pub channels: Vec<Vec<f32>>,
}

impl FgrdData {
    pub fn from_fields(fields: &[&Field]) -> Result<Self> {
        let first = fields
            .first()
            .ok_or_else(|| Error::invalid("FGRD needs at least one channel"))?;
        let g = *first.grid();
        for f in fields {
            g.check_same(f.grid())?;
        }
        Ok(Self {
            height: g.height,
            width: g.width,
            channels: fields
                .iter()
                .map(|f| f.values().iter().map(|&v| v as f32).collect())
                .collect(),
        })
    }

    /// Interprets the channels on a grid with the given cell size.
    pub fn to_fields(&self, cell_size: f64) -> Result<Vec<Field>> {
        let g = GridSpec::new(self.height, self.width, cell_size)?;
        self.channels
            .iter()
            .map(|c| Field::new(g, c.iter().map(|&v| v as f64).collect()))
            .collect()
    }

    /// Reads a two-channel file as a joint state `(k, s)`.
    pub fn to_joint(&self, cell_size: f64) -> Result<JointState> {
        if self.channels.len() != 2 {
            return Err(Error::invalid(format!(
                "joint state needs 2 channels, file has {}",
                self.channels.len()
            )));
        }
        let mut f = self.to_fields(cell_size)?;
        let s = f.pop().unwrap();
        let k = f.pop().unwrap();
        JointState::new(k, s)
    }

    pub fn encode(&self) -> Vec<u8> {
        let n = self.height * self.width;
        let mut out = Vec::with_capacity(HEADER_LEN + 4 * n * self.channels.len());
        out.extend_from_slice(MAGIC);
        for v in [
            VERSION,
            self.height as u32,
            self.width as u32,
            self.channels.len() as u32,
        ] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for ch in &self.channels {
            for v in ch {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8], path: &Path) -> Result<Self> {
        if bytes.len() < HEADER_LEN || &bytes[..4] != MAGIC {
            return Err(Error::format(path, "missing FGRD magic"));
        }
        let word = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap());
        let version = word(0);
        if version != VERSION {
            return Err(Error::format(
                path,
                format!("unsupported version {version}"),
            ));
        }
        let (height, width, nch) = (word(1) as usize, word(2) as usize, word(3) as usize);
        let n = height * width;
        let expected = HEADER_LEN + 4 * n * nch;
        if bytes.len() != expected {
            return Err(Error::format(
                path,
                format!("expected {expected} bytes, found {}", bytes.len()),
            ));
        }
        let channels = (0..nch)
            .map(|c| {
                let base = HEADER_LEN + 4 * n * c;
                bytes[base..base + 4 * n]
                    .chunks_exact(4)
                    .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
                    .collect()
            })
            .collect();
        Ok(Self {
            height,
            width,
            channels,
        })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes, path)
    }
}

pub fn write_fields(path: impl AsRef<Path>, fields: &[&Field]) -> Result<()> {
    FgrdData::from_fields(fields)?.write(path)
}

pub fn write_joint(path: impl AsRef<Path>, x: &JointState) -> Result<()> {
    write_fields(path, &[&x.k, &x.s])
}

pub fn read_joint(path: impl AsRef<Path>, cell_size: f64) -> Result<JointState> {
    FgrdData::read(path)?.to_joint(cell_size)
}

/// Rounds every value to the nearest `f32`, i.e. what a write/read cycle yields.
pub fn quantize(x: &JointState) -> JointState {
    let q = |f: &Field| f.map(|v| v as f32 as f64);
    JointState {
        k: q(&x.k),
        s: q(&x.s),
    }
}
