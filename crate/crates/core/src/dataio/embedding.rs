use std::collections::HashSet;
use std::io::{Read, Write};

use super::container::{check_string_len, ByteReader, ByteWriter, RecordKind};
use crate::error::{Error, Result};

/// `N x D` matrix of embeddings with one string id per row.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    ids: Vec<String>,
    dim: usize,
    data: Vec<f32>,
}

impl EmbeddingMatrix {
    pub fn new(ids: Vec<String>, dim: usize, data: Vec<f32>) -> Result<Self> {
        if ids.is_empty() {
            return Err(Error::InvalidEmbedding("matrix has no rows".into()));
        }
        if dim == 0 || dim > u32::MAX as usize || ids.len() > u32::MAX as usize {
            return Err(Error::InvalidEmbedding(format!("invalid dimension {dim}")));
        }
        if data.len() != ids.len() * dim {
            return Err(Error::DimensionMismatch {
                expected: ids.len() * dim,
                actual: data.len(),
            });
        }
        let mut seen = HashSet::with_capacity(ids.len());
        for id in &ids {
            check_string_len(id, "id").map_err(Error::InvalidEmbedding)?;
            if !seen.insert(id.as_str()) {
                return Err(Error::DuplicateId(id.clone()));
            }
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(i));
        }
        Ok(Self { ids, dim, data })
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.ids.iter().position(|x| x == id)
    }

    pub fn get(&self, id: &str) -> Option<&[f32]> {
        self.position(id).map(|i| self.row(i))
    }

    pub fn payload(&self) -> &[f32] {
        &self.data
    }
}

pub fn write_embedding_matrix<W: Write>(m: &EmbeddingMatrix, sink: W) -> Result<u64> {
    let mut w = ByteWriter::new(sink);
    w.preamble(RecordKind::EmbeddingMatrix)?;
    w.u32(m.ids.len() as u32)?;
    w.u32(m.dim as u32)?;
    for id in &m.ids {
        w.string(id)?;
    }
    w.f32s(&m.data)?;
    w.flush()?;
    Ok(w.written())
}

pub fn read_embedding_matrix<R: Read>(source: R) -> Result<EmbeddingMatrix> {
    let mut r = ByteReader::new(source);
    r.expect_kind(RecordKind::EmbeddingMatrix)?;
    let n = r.u32("N")? as usize;
    let dim = r.u32("D")? as usize;
    let mut ids = Vec::new();
    for _ in 0..n {
        ids.push(r.string("id")?);
    }
    let data = r.f32_payload(n.saturating_mul(dim))?;
    EmbeddingMatrix::new(ids, dim, data)
}
