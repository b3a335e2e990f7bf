use std::io::{Read, Write};

use super::container::{check_string_len, ByteReader, ByteWriter, RecordKind};
use crate::error::{Error, Result};

/// Token indices of one label inside the conditioning prompt.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelSpan {
    pub label: String,
    pub tokens: Vec<usize>,
}

/// Everything in a kind-1 record except the payload.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StackHeader {
    pub image_id: String,
    /// Reverse-diffusion timesteps (J).
    pub timesteps: usize,
    /// Prompt tokens (T).
    pub tokens: usize,
    /// `(height, width)` of each cross-attention block's grid; `blocks.len()` is K.
    pub blocks: Vec<(usize, usize)>,
    pub spans: Vec<LabelSpan>,
}

impl StackHeader {
    pub fn num_blocks(&self) -> usize {
        self.blocks.len()
    }

    pub fn span(&self, label: &str) -> Option<&[usize]> {
        self.spans
            .iter()
            .find(|s| s.label == label)
            .map(|s| s.tokens.as_slice())
    }

    /// Number of f32 values in one timestep (all blocks, all tokens).
    fn timestep_len(&self) -> usize {
        self.tokens * self.blocks.iter().map(|(h, w)| h * w).sum::<usize>()
    }

    pub fn payload_len(&self) -> usize {
        self.timesteps * self.timestep_len()
    }

    fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidStack(m));
        if let Err(m) = check_string_len(&self.image_id, "image id") {
            return bad(m);
        }
        if self.timesteps == 0 || self.blocks.is_empty() || self.tokens == 0 {
            return bad(format!(
                "J, K and T must be positive (J={}, K={}, T={})",
                self.timesteps,
                self.blocks.len(),
                self.tokens
            ));
        }
        for limit in [self.timesteps, self.blocks.len(), self.tokens] {
            if limit > u32::MAX as usize {
                return bad("dimension exceeds u32".into());
            }
        }
        for (k, &(h, w)) in self.blocks.iter().enumerate() {
            if h == 0 || w == 0 || h > u32::MAX as usize || w > u32::MAX as usize {
                return bad(format!("block {k} has invalid grid {h}x{w}"));
            }
        }
        for (i, span) in self.spans.iter().enumerate() {
            if let Err(m) = check_string_len(&span.label, "label") {
                return bad(m);
            }
            if span.tokens.is_empty() {
                return bad(format!("span for {:?} is empty", span.label));
            }
            if let Some(&t) = span.tokens.iter().find(|&&t| t >= self.tokens) {
                return bad(format!(
                    "span for {:?} has token {t} >= T = {}",
                    span.label, self.tokens
                ));
            }
            if self.spans[..i].iter().any(|s| s.label == span.label) {
                return bad(format!("duplicate span label {:?}", span.label));
            }
        }
        Ok(())
    }
}

/// Per-timestep, per-block, per-token cross-attention maps of one image.
///
/// Payload order is `j`, then `k`, then `t`, each map row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionStack {
    header: StackHeader,
    data: Vec<f32>,
    /// Offset of block k inside one timestep.
    block_offsets: Vec<usize>,
}

impl AttentionStack {
    pub fn new(header: StackHeader, data: Vec<f32>) -> Result<Self> {
        header.validate()?;
        if data.len() != header.payload_len() {
            return Err(Error::InvalidStack(format!(
                "payload has {} values, header requires {}",
                data.len(),
                header.payload_len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::InvalidStack(format!(
                "value {} at payload index {i} is negative or non-finite",
                data[i]
            )));
        }
        let mut block_offsets = Vec::with_capacity(header.blocks.len());
        let mut off = 0;
        for &(h, w) in &header.blocks {
            block_offsets.push(off);
            off += header.tokens * h * w;
        }
        Ok(Self {
            header,
            data,
            block_offsets,
        })
    }

    pub fn header(&self) -> &StackHeader {
        &self.header
    }

    pub fn image_id(&self) -> &str {
        &self.header.image_id
    }

    pub fn timesteps(&self) -> usize {
        self.header.timesteps
    }

    pub fn num_blocks(&self) -> usize {
        self.header.blocks.len()
    }

    pub fn tokens(&self) -> usize {
        self.header.tokens
    }

    pub fn block_dims(&self, k: usize) -> (usize, usize) {
        self.header.blocks[k]
    }

    pub fn span(&self, label: &str) -> Option<&[usize]> {
        self.header.span(label)
    }

    pub fn payload(&self) -> &[f32] {
        &self.data
    }

    /// The `H_k x W_k` map of token `t` at timestep `j`, block `k`.
    pub fn map(&self, j: usize, k: usize, t: usize) -> &[f32] {
        let (h, w) = self.header.blocks[k];
        let start = j * self.header.timestep_len() + self.block_offsets[k] + t * h * w;
        &self.data[start..start + h * w]
    }

    /// Rebuilds the stack with its `(j, k)` blocks reordered; `order` lists
    /// source `(j, k)` pairs in destination order, row-major over a `J x K` layout.
    pub fn permuted(&self, order: &[(usize, usize)]) -> Result<Self> {
        let j_count = self.timesteps();
        let k_count = self.num_blocks();
        if order.len() != j_count * k_count {
            return Err(Error::InvalidStack("permutation has wrong length".into()));
        }
        let blocks: Vec<(usize, usize)> = order[..k_count]
            .iter()
            .map(|&(_, k)| self.header.blocks[k])
            .collect();
        // Every destination block column must keep a single grid size.
        for (i, &(_, k)) in order.iter().enumerate() {
            if self.header.blocks[k] != blocks[i % k_count] {
                return Err(Error::InvalidStack(
                    "permutation mixes grid sizes within a block column".into(),
                ));
            }
        }
        let mut data = Vec::with_capacity(self.data.len());
        for &(j, k) in order {
            for t in 0..self.tokens() {
                data.extend_from_slice(self.map(j, k, t));
            }
        }
        let header = StackHeader {
            blocks,
            ..self.header.clone()
        };
        Self::new(header, data)
    }
}

/// Serializes a stack as a kind-1 record. Nothing is written if the stack is invalid.
pub fn write_attention_stack<W: Write>(stack: &AttentionStack, sink: W) -> Result<u64> {
    let h = &stack.header;
    h.validate()?;
    let mut w = ByteWriter::new(sink);
    w.preamble(RecordKind::AttentionStack)?;
    w.string(&h.image_id)?;
    w.u32(h.timesteps as u32)?;
    w.u32(h.blocks.len() as u32)?;
    w.u32(h.tokens as u32)?;
    for &(bh, bw) in &h.blocks {
        w.u32(bh as u32)?;
        w.u32(bw as u32)?;
    }
    w.u32(h.spans.len() as u32)?;
    for span in &h.spans {
        w.string(&span.label)?;
        w.u32(span.tokens.len() as u32)?;
        for &t in &span.tokens {
            w.u32(t as u32)?;
        }
    }
    w.f32s(&stack.data)?;
    w.flush()?;
    Ok(w.written())
}

fn read_header_body<R: Read>(r: &mut ByteReader<R>) -> Result<StackHeader> {
    let image_id = r.string("image id")?;
    let timesteps = r.u32("J")? as usize;
    let num_blocks = r.u32("K")? as usize;
    let tokens = r.u32("T")? as usize;
    let mut blocks = Vec::new();
    for _ in 0..num_blocks {
        let h = r.u32("block height")? as usize;
        let w = r.u32("block width")? as usize;
        blocks.push((h, w));
    }
    let label_count = r.u32("span count")?;
    let mut spans = Vec::new();
    for _ in 0..label_count {
        let label = r.string("span label")?;
        let len = r.u32("span length")?;
        let mut span_tokens = Vec::new();
        for _ in 0..len {
            span_tokens.push(r.u32("span token")? as usize);
        }
        spans.push(LabelSpan {
            label,
            tokens: span_tokens,
        });
    }
    let header = StackHeader {
        image_id,
        timesteps,
        tokens,
        blocks,
        spans,
    };
    header.validate()?;
    Ok(header)
}

/// Reads only the header of a kind-1 record, leaving the payload unread.
pub fn read_stack_header<R: Read>(source: R) -> Result<StackHeader> {
    let mut r = ByteReader::new(source);
    r.expect_kind(RecordKind::AttentionStack)?;
    read_header_body(&mut r)
}

pub fn read_attention_stack<R: Read>(source: R) -> Result<AttentionStack> {
    let mut r = ByteReader::new(source);
    r.expect_kind(RecordKind::AttentionStack)?;
    let header = read_header_body(&mut r)?;
    let data = r.f32_payload(header.payload_len())?;
    AttentionStack::new(header, data)
}
