//! Bit-exact binary tensor files (magic `TGT1`).
//!
//! Layout, all little-endian:
//!
//! ```text
//! "TGT1"            4 bytes
//! name length       u16
//! name              UTF-8 bytes
//! rank              u32 (at most 8; rank 0 stores one value)
//! extents           rank x u32
//! payload           IEEE-754 f64, row-major
//! ```
//!
//! A write followed by a read returns the identical byte pattern for every
//! value, including non-finite ones, so the format is safe as an interchange
//! path for externally produced embeddings.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"TGT1";
pub const MAX_RANK: u32 = 8;

pub fn write_tensor_file(path: &Path, name: &str, t: &Tensor) -> Result<()> {
    if name.len() > u16::MAX as usize {
        return Err(Error::MalformedTensorFile {
            path: path.to_path_buf(),
            reason: format!("name of {} bytes exceeds u16 length field", name.len()),
        });
    }
    if t.rank() as u32 > MAX_RANK {
        return Err(Error::RankTooLarge {
            path: path.to_path_buf(),
            rank: t.rank() as u32,
        });
    }
    let mut bytes = Vec::with_capacity(4 + 2 + name.len() + 4 + 4 * t.rank() + 8 * t.numel());
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&(name.len() as u16).to_le_bytes());
    bytes.extend_from_slice(name.as_bytes());
    bytes.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &e in t.shape() {
        bytes.extend_from_slice(&(e as u32).to_le_bytes());
    }
    for v in t.values() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, bytes)?;
    Ok(())
}

pub fn read_tensor_file(path: &Path) -> Result<(String, Tensor)> {
    let bytes = fs::read(path)?;
    let mut cur = Cursor {
        bytes: &bytes,
        pos: 0,
        path,
    };
    let magic = cur.take(4)?;
    if magic != MAGIC {
        return Err(Error::BadMagic {
            path: path.to_path_buf(),
            found: [magic[0], magic[1], magic[2], magic[3]],
        });
    }
    let name_len = u16::from_le_bytes(cur.take(2)?.try_into().unwrap()) as usize;
    let name = String::from_utf8(cur.take(name_len)?.to_vec()).map_err(|_| {
        Error::MalformedTensorFile {
            path: path.to_path_buf(),
            reason: "tensor name is not valid UTF-8".into(),
        }
    })?;
    let rank = u32::from_le_bytes(cur.take(4)?.try_into().unwrap());
    if rank > MAX_RANK {
        return Err(Error::RankTooLarge {
            path: path.to_path_buf(),
            rank,
        });
    }
    let mut shape = Vec::with_capacity(rank as usize);
    for _ in 0..rank {
        shape.push(u32::from_le_bytes(cur.take(4)?.try_into().unwrap()) as usize);
    }
    let count: usize = shape.iter().product();
    let mut values = Vec::with_capacity(count);
    for _ in 0..count {
        values.push(f64::from_le_bytes(cur.take(8)?.try_into().unwrap()));
    }
    if cur.pos != bytes.len() {
        return Err(Error::MalformedTensorFile {
            path: path.to_path_buf(),
            reason: format!("{} trailing bytes after payload", bytes.len() - cur.pos),
        });
    }
    Ok((name, Tensor::from_vec(shape, values)?))
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Truncated {
                path: self.path.to_path_buf(),
            });
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }
}
