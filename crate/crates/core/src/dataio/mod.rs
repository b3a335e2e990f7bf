//! File formats exchanged with the model bridge, dataset manifests and the
//! synthetic fixture generator.
//!
//! Binary artifacts share one little-endian container:
//!
//! ```text
//! "NADA" | u16 version = 1 | u16 kind | kind-specific body
//! ```
//!
//! Kind 1 is an [`AttentionStack`], kind 2 an [`EmbeddingMatrix`] and kind 3 an
//! MLP checkpoint (see [`crate::proposer::MlpModel`]). Text streams (proposals,
//! detections, transcripts) are JSON lines, see [`records`].

mod container;
mod embedding;
pub mod fixture;
mod manifest;
pub mod records;
mod stack;

pub use container::{read_kind, RecordKind, MAGIC, VERSION};
pub(crate) use container::{ByteReader, ByteWriter};
pub use embedding::{read_embedding_matrix, write_embedding_matrix, EmbeddingMatrix};
pub use fixture::{synth_fixture, Fixture, FixtureSpec};
pub use manifest::{
    builtin_vocabulary, load_manifest, parse_manifest, DatasetManifest, GtBox, ImageRecord,
    ARTDL_CLASSES, ICONART_CLASSES,
};
pub use stack::{
    read_attention_stack, read_stack_header, write_attention_stack, AttentionStack, LabelSpan,
    StackHeader,
};
