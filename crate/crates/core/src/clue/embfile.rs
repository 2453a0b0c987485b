use std::fs;
use std::path::Path;

use super::{EmbeddingSeq, Modality};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 6] = b"MCEMB1";

/// Writes `MCEMB1`, a modality byte, `L` and `D` as little-endian u32, then
/// row-major little-endian f32 values.
pub fn write_embedding(path: &Path, seq: &EmbeddingSeq) -> Result<()> {
    let mut buf = Vec::with_capacity(15 + 4 * seq.data.numel());
    buf.extend_from_slice(MAGIC);
    buf.push(seq.modality.code());
    buf.extend_from_slice(&(seq.len() as u32).to_le_bytes());
    buf.extend_from_slice(&(seq.dim() as u32).to_le_bytes());
    for &v in seq.data.data() {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn read_embedding(path: &Path) -> Result<EmbeddingSeq> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse(&bytes).map_err(|e| match e {
        Error::Input(msg) => Error::Input(format!("{}: {msg}", path.display())),
        other => other,
    })
}

fn parse(bytes: &[u8]) -> Result<EmbeddingSeq> {
    if bytes.len() < 15 || &bytes[..6] != MAGIC {
        return Err(Error::Input("not an MCEMB1 embedding file".into()));
    }
    let modality = Modality::from_code(bytes[6])?;
    let word = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap()) as usize;
    let (l, d) = (word(7), word(11));
    if l == 0 || d == 0 {
        return Err(Error::Input(format!("embedding has empty shape {l}×{d}")));
    }
    let body = &bytes[15..];
    if body.len() != 4 * l * d {
        return Err(Error::Input(format!(
            "embedding {l}×{d} expects {} data bytes, found {}",
            4 * l * d,
            body.len()
        )));
    }
    let data = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    EmbeddingSeq::new(modality, Tensor::new(vec![l, d], data)?)
}
