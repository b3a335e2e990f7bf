//! Object detection from text-to-image diffusion cross-attention.
//!
//! The engine works on exported artifacts only: attention stacks captured while
//! a diffusion model reconstructs a painting, image/text embeddings, and raw
//! vision-language model transcripts. From those it
//!
//! * proposes the classes present in each image ([`proposer`]),
//! * aggregates the attention maps of each proposed label ([`attnagg`]),
//! * thresholds and watershed-splits the aggregated map into boxes ([`segbox`]),
//! * and scores the result with detection AP50 and classification metrics ([`evalkit`]).
//!
//! [`promptgen`] builds the conditioning prompts and model queries that a
//! bridge process feeds to the frozen models, and [`dataio`] defines every
//! file format exchanged with that bridge.

pub mod attnagg;
pub mod dataio;
pub mod error;
pub mod evalkit;
pub mod geometry;
pub mod pipeline;
pub mod promptgen;
pub mod proposer;
pub mod segbox;

pub use attnagg::{LabelMap, TokenMap};
pub use dataio::{AttentionStack, DatasetManifest, EmbeddingMatrix, ImageRecord};
pub use error::{Error, Result};
pub use evalkit::{Detection, EvalReport};
pub use geometry::{BBox, Grid};
pub use proposer::{MlpModel, Proposal, ProposalSet};
pub use segbox::{ExtractionConfig, ThresholdMode};
