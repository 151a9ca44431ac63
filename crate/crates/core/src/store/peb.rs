//! PEB1 binary layout (all integers little-endian):
//!
//! | offset | size | field                         |
//! |--------|------|-------------------------------|
//! | 0      | 4    | magic `b"PEB1"`               |
//! | 4      | 4    | version, `u32` = 1            |
//! | 8      | 4    | `n_tiles`, `u32`              |
//! | 12     | 4    | `dim`, `u32`                  |
//! | 16     | 4·n·d| `f32` values, row-major       |
//!
//! No padding, no checksum. Row `i` is tile `i` of the slide.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use super::{EmbeddingMatrix, StoreError};

pub const PEB1_MAGIC: [u8; 4] = *b"PEB1";
pub const PEB1_VERSION: u32 = 1;
/// Magic plus the three `u32` header words.
pub const PEB1_HEADER_LEN: usize = 16;

pub fn read_embedding_file(path: impl AsRef<Path>) -> Result<EmbeddingMatrix, StoreError> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| StoreError::io(path, e))?;
    decode(path, &bytes)
}

fn decode(path: &Path, bytes: &[u8]) -> Result<EmbeddingMatrix, StoreError> {
    if bytes.len() < PEB1_HEADER_LEN {
        if bytes.len() >= 4 && bytes[..4] != PEB1_MAGIC {
            return Err(StoreError::BadMagic { path: path.into(), found: bytes[..4].try_into().unwrap() });
        }
        return Err(StoreError::Truncated {
            path: path.into(),
            expected: PEB1_HEADER_LEN as u64,
            found: bytes.len() as u64,
        });
    }
    let word = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap());
    let magic: [u8; 4] = bytes[..4].try_into().unwrap();
    if magic != PEB1_MAGIC {
        return Err(StoreError::BadMagic { path: path.into(), found: magic });
    }
    let version = word(4);
    if version != PEB1_VERSION {
        return Err(StoreError::UnsupportedVersion { path: path.into(), version });
    }
    let n_tiles = word(8) as usize;
    let dim = word(12) as usize;
    let expected = n_tiles as u64 * dim as u64 * 4;
    let found = (bytes.len() - PEB1_HEADER_LEN) as u64;
    if found < expected {
        return Err(StoreError::Truncated { path: path.into(), expected, found });
    }
    if found > expected {
        return Err(StoreError::TrailingBytes { path: path.into(), extra: found - expected });
    }
    let values = bytes[PEB1_HEADER_LEN..].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
    EmbeddingMatrix::new(n_tiles, dim, values)
}

pub fn write_embedding_file(matrix: &EmbeddingMatrix, path: impl AsRef<Path>) -> Result<(), StoreError> {
    let path = path.as_ref();
    let to_u32 = |v: usize, what: &str| {
        u32::try_from(v).map_err(|_| StoreError::Shape(format!("{what} = {v} does not fit the PEB1 header")))
    };
    let n_tiles = to_u32(matrix.n_tiles(), "n_tiles")?;
    let dim = to_u32(matrix.dim(), "dim")?;

    let file = fs::File::create(path).map_err(|e| StoreError::io(path, e))?;
    let mut w = BufWriter::with_capacity(1 << 20, file);
    let mut write = |buf: &[u8]| w.write_all(buf);
    let result = (|| {
        write(&PEB1_MAGIC)?;
        write(&PEB1_VERSION.to_le_bytes())?;
        write(&n_tiles.to_le_bytes())?;
        write(&dim.to_le_bytes())?;
        for v in matrix.values() {
            write(&v.to_le_bytes())?;
        }
        Ok(())
    })();
    result.and_then(|()| w.flush()).map_err(|e| StoreError::io(path, e))
}
