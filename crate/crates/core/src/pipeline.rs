//! Per-image detection: proposals in, scored boxes out.

use serde::{Deserialize, Serialize};

use crate::attnagg::{align_maps, label_map};
use crate::dataio::{AttentionStack, ImageRecord};
use crate::error::{Error, Result};
use crate::evalkit::Detection;
use crate::promptgen::{remap_label, LabelRemapTable};
use crate::proposer::ProposalSet;
use crate::segbox::{extract, ExtractionConfig, ThresholdMode};

#[derive(Debug, Clone, Default)]
pub struct DetectOptions {
    pub extraction: ExtractionConfig,
    /// Rank every detection with confidence 1 instead of `score * saliency`.
    pub uniform_scores: bool,
    /// Used when a stack's spans are keyed by rendered labels.
    pub remap: LabelRemapTable,
}

/// Foreground cell count of one label's binary mask.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForegroundArea {
    pub label: String,
    pub threshold: f64,
    pub cells: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ImageDetections {
    pub image_id: String,
    pub detections: Vec<Detection>,
    /// Proposed labels the stack holds no span for.
    pub missing_spans: Vec<String>,
    pub foreground: Vec<ForegroundArea>,
}

/// The nine fixed thresholds `0.1, 0.2, ..., 0.9` followed by Otsu.
pub fn sweep_thresholds() -> Vec<ThresholdMode> {
    (1..=9)
        .map(|i| ThresholdMode::Fixed(i as f64 / 10.0))
        .chain(std::iter::once(ThresholdMode::Otsu))
        .collect()
}

pub fn detect_image(
    stack: &AttentionStack,
    record: &ImageRecord,
    proposals: &ProposalSet,
    options: &DetectOptions,
) -> Result<ImageDetections> {
    let mut out = detect_image_multi(
        stack,
        record,
        proposals,
        std::slice::from_ref(&options.extraction),
        options,
    )?;
    Ok(out.pop().expect("one result per configuration"))
}

/// Runs several extraction configurations over the same label maps, one
/// result per configuration. `options.extraction` is ignored.
pub fn detect_image_multi(
    stack: &AttentionStack,
    record: &ImageRecord,
    proposals: &ProposalSet,
    configs: &[ExtractionConfig],
    options: &DetectOptions,
) -> Result<Vec<ImageDetections>> {
    if stack.image_id() != record.id {
        return Err(Error::UnknownImage(stack.image_id().to_string()));
    }
    if proposals.image_id != record.id {
        return Err(Error::UnknownImage(proposals.image_id.clone()));
    }
    for c in configs {
        c.validate()?;
    }
    let mut results: Vec<ImageDetections> = configs
        .iter()
        .map(|_| ImageDetections {
            image_id: record.id.clone(),
            ..Default::default()
        })
        .collect();
    let aligned = align_maps(stack);
    let image = (record.width, record.height);
    for p in &proposals.proposals {
        let key = if stack.span(&p.label).is_some() {
            p.label.as_str()
        } else {
            remap_label(&p.label, &options.remap)
        };
        if stack.span(key).is_none() {
            for r in &mut results {
                r.missing_spans.push(p.label.clone());
            }
            continue;
        }
        let mut map = label_map(&aligned, key)?;
        map.label = p.label.clone();
        for (config, result) in configs.iter().zip(&mut results) {
            let ex = extract(&map, image, config)?;
            result.foreground.push(ForegroundArea {
                label: p.label.clone(),
                threshold: ex.threshold,
                cells: ex.mask.count(),
            });
            for b in ex.boxes {
                let score = if options.uniform_scores {
                    1.0
                } else {
                    (p.score * b.saliency).clamp(0.0, 1.0)
                };
                result.detections.push(Detection {
                    image_id: record.id.clone(),
                    label: p.label.clone(),
                    bbox: b.bbox,
                    score,
                });
            }
        }
    }
    Ok(results)
}
