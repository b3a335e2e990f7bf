//! Class proposers: each turns per-image evidence into a [`ProposalSet`], the
//! labels to hand to the detector together with a score in `[0, 1]`.
//!
//! * [`mlp`]: a small MLP trained on image embeddings (weakly supervised).
//! * [`transcript`]: parsers for vision-language model answers (zero shot),
//!   plus the per-class yes/no baseline.
//! * [`clip_propose`]: cosine similarity against class text embeddings.
//! * [`oracle_propose`]: ground-truth labels, an upper bound for the detector.

pub mod mlp;
pub mod transcript;

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::dataio::{EmbeddingMatrix, ImageRecord};
use crate::error::{Error, Result};

pub use mlp::{
    read_checkpoint, train_on_arrays, write_checkpoint, wscp_infer, wscp_train, Gradients,
    HeadMode, Layer, LossKind, MlpModel, TrainConfig, TrainOutcome,
};
pub use transcript::{
    yesno_parse, yesno_propose, zscp_parse_choice, zscp_parse_score, QueryKind, ScoreParseError,
    VlmTranscript,
};

/// Default score threshold for score-style VLM answers.
pub const DEFAULT_TAU: f64 = 0.5;
/// Default cosine-similarity threshold for the CLIP baseline.
pub const DEFAULT_SIMILARITY: f64 = 0.28;
/// Default sigmoid threshold for multi-label MLP heads.
pub const DEFAULT_MULTI_LABEL_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Proposal {
    pub label: String,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProposalSet {
    pub image_id: String,
    pub proposals: Vec<Proposal>,
}

impl ProposalSet {
    pub fn empty(image_id: impl Into<String>) -> Self {
        Self {
            image_id: image_id.into(),
            proposals: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.proposals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.proposals.is_empty()
    }

    pub fn score(&self, label: &str) -> Option<f64> {
        self.proposals
            .iter()
            .find(|p| p.label == label)
            .map(|p| p.score)
    }

    pub fn labels(&self) -> impl Iterator<Item = &str> {
        self.proposals.iter().map(|p| p.label.as_str())
    }

    /// Labels unique and in `vocabulary`, scores in `[0, 1]`.
    pub fn validate<S: AsRef<str>>(&self, vocabulary: &[S]) -> Result<()> {
        let mut seen = HashSet::new();
        for p in &self.proposals {
            if !vocabulary.iter().any(|v| v.as_ref() == p.label) {
                return Err(Error::UnknownLabel(p.label.clone()));
            }
            if !seen.insert(p.label.as_str()) {
                return Err(Error::Config(format!(
                    "image {:?} proposes {:?} twice",
                    self.image_id, p.label
                )));
            }
            if !(0.0..=1.0).contains(&p.score) {
                return Err(Error::Config(format!(
                    "score {} for {:?} outside [0, 1]",
                    p.score, p.label
                )));
            }
        }
        Ok(())
    }
}

/// Turns per-class scores into proposals.
///
/// Single-label heads keep exactly the argmax (ties to the lowest index);
/// multi-label heads keep every class scoring strictly above `threshold`.
pub fn select_labels<S: AsRef<str>>(
    image_id: &str,
    scores: &[f64],
    classes: &[S],
    head: HeadMode,
    threshold: f64,
) -> ProposalSet {
    let mut set = ProposalSet::empty(image_id);
    match head {
        HeadMode::SingleLabel => {
            let mut best: Option<usize> = None;
            for (i, &s) in scores.iter().enumerate() {
                if best.is_none_or(|b| s > scores[b]) {
                    best = Some(i);
                }
            }
            if let Some(i) = best {
                set.proposals.push(Proposal {
                    label: classes[i].as_ref().to_string(),
                    score: scores[i].clamp(0.0, 1.0),
                });
            }
        }
        HeadMode::MultiLabel => {
            for (i, &s) in scores.iter().enumerate() {
                if s > threshold {
                    set.proposals.push(Proposal {
                        label: classes[i].as_ref().to_string(),
                        score: s.clamp(0.0, 1.0),
                    });
                }
            }
        }
    }
    set
}

/// Cosine similarity in double precision.
pub fn cosine_similarity(a: &[f32], b: &[f32]) -> Option<f64> {
    let mut dot = 0.0f64;
    let mut na = 0.0f64;
    let mut nb = 0.0f64;
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (x as f64, y as f64);
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        None
    } else {
        Some(dot / (na.sqrt() * nb.sqrt()))
    }
}

/// Keeps every class whose text embedding has cosine similarity strictly
/// above `threshold` with the image embedding. `text` rows are looked up by
/// class label.
pub fn clip_propose<S: AsRef<str>>(
    image_id: &str,
    image_embedding: &[f32],
    text: &EmbeddingMatrix,
    classes: &[S],
    threshold: f64,
) -> Result<ProposalSet> {
    if image_embedding.len() != text.dim() {
        return Err(Error::DimensionMismatch {
            expected: text.dim(),
            actual: image_embedding.len(),
        });
    }
    let mut set = ProposalSet::empty(image_id);
    for class in classes {
        let class = class.as_ref();
        let row = text
            .get(class)
            .ok_or_else(|| Error::UnknownLabel(class.to_string()))?;
        let sim = cosine_similarity(image_embedding, row).ok_or_else(|| {
            if row.iter().all(|&v| v == 0.0) {
                Error::ZeroNorm(class.to_string())
            } else {
                Error::ZeroNorm(image_id.to_string())
            }
        })?;
        if sim > threshold {
            set.proposals.push(Proposal {
                label: class.to_string(),
                score: sim.clamp(0.0, 1.0),
            });
        }
    }
    Ok(set)
}

/// Ground-truth labels with score 1.
pub fn oracle_propose(record: &ImageRecord) -> ProposalSet {
    ProposalSet {
        image_id: record.id.clone(),
        proposals: record
            .gt_labels
            .iter()
            .map(|l| Proposal {
                label: l.clone(),
                score: 1.0,
            })
            .collect(),
    }
}
