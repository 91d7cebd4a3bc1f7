//! Embedding matrix file.
//!
//! Layout (all integers little-endian):
//!
//! | offset | size | field                                        |
//! |--------|------|----------------------------------------------|
//! | 0      | 4    | magic `FEMB`                                 |
//! | 4      | 4    | flags, bit 0 set when rows are L2-normalised |
//! | 8      | 4    | dimension `D` (u32)                          |
//! | 12     | 4    | row count `N` (u32)                          |
//! | 16     | 4·D·N| row-major IEEE-754 binary32 values           |

use std::path::Path;

use crate::catalogue::EmbeddingVector;
use crate::error::{CoreError, Result};

pub const EMBEDDING_MAGIC: [u8; 4] = *b"FEMB";
pub const EMBEDDING_HEADER_LEN: usize = 16;
const FLAG_NORMALIZED: u32 = 1;

pub fn encode_embeddings(dimension: usize, rows: &[EmbeddingVector]) -> Result<Vec<u8>> {
    let normalized = !rows.is_empty() && rows.iter().all(|r| r.normalized);
    let mut buf = Vec::with_capacity(EMBEDDING_HEADER_LEN + 4 * dimension * rows.len());
    buf.extend_from_slice(&EMBEDDING_MAGIC);
    buf.extend_from_slice(&(if normalized { FLAG_NORMALIZED } else { 0 }).to_le_bytes());
    buf.extend_from_slice(&(dimension as u32).to_le_bytes());
    buf.extend_from_slice(&(rows.len() as u32).to_le_bytes());
    for row in rows {
        row.check_dim(dimension)?;
        for v in &row.values {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(buf)
}

pub fn decode_embeddings(bytes: &[u8]) -> Result<(usize, Vec<EmbeddingVector>)> {
    if bytes.len() < EMBEDDING_HEADER_LEN || bytes[..4] != EMBEDDING_MAGIC {
        return Err(CoreError::CorruptEmbeddings("bad magic or short header".into()));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap());
    let normalized = word(4) & FLAG_NORMALIZED != 0;
    let dim = word(8) as usize;
    let count = word(12) as usize;
    let expected = EMBEDDING_HEADER_LEN + 4 * dim * count;
    if bytes.len() != expected {
        return Err(CoreError::CorruptEmbeddings(format!(
            "expected {expected} bytes for {count} rows of dimension {dim}, found {}",
            bytes.len()
        )));
    }
    let rows = bytes[EMBEDDING_HEADER_LEN..]
        .chunks_exact(4 * dim.max(1))
        .take(count)
        .map(|row| {
            let values = row
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
                .collect();
            EmbeddingVector::new(values, normalized)
        })
        .collect();
    Ok((dim, rows))
}

pub fn write_embeddings(path: &Path, dimension: usize, rows: &[EmbeddingVector]) -> Result<()> {
    let bytes = encode_embeddings(dimension, rows)?;
    std::fs::write(path, bytes).map_err(|e| CoreError::io(path, e))
}

pub fn read_embeddings(path: &Path) -> Result<(usize, Vec<EmbeddingVector>)> {
    let bytes = std::fs::read(path).map_err(|e| CoreError::io(path, e))?;
    decode_embeddings(&bytes)
}
