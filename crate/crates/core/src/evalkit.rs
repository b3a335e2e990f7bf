//! Detection AP50 and classification metrics, per class and macro-averaged.
//!
//! Matching is greedy in confidence order: each detection claims the unclaimed
//! ground-truth box of highest IoU in its image and is a true positive when
//! that IoU is at least the threshold. AP is the all-point interpolated area
//! under the precision-recall curve. Classes without ground truth are reported
//! but left out of macro means.

use std::collections::HashMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::dataio::DatasetManifest;
use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::proposer::ProposalSet;

pub const IOU_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub image_id: String,
    pub label: String,
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub score: f64,
}

pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let inter = a.intersection_area(b);
    if inter <= 0.0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    (inter / union).clamp(0.0, 1.0)
}

/// Indices of `detections` in ranking order: score descending, then image id,
/// then input order.
pub fn rank_detections(detections: &[Detection]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..detections.len()).collect();
    order.sort_by(|&a, &b| {
        let (da, db) = (&detections[a], &detections[b]);
        db.score
            .total_cmp(&da.score)
            .then_with(|| da.image_id.cmp(&db.image_id))
    });
    order
}

/// TP flags for ranked detections `(image, box)` of one class against that
/// class's ground truth `(image, box)`.
pub fn match_detections(
    ranked: &[(&str, BBox)],
    ground_truth: &[(&str, BBox)],
    iou_threshold: f64,
) -> Vec<bool> {
    let mut by_image: HashMap<&str, Vec<(BBox, bool)>> = HashMap::new();
    for (img, b) in ground_truth {
        by_image.entry(img).or_default().push((*b, false));
    }
    ranked
        .iter()
        .map(|(img, det)| {
            let Some(gts) = by_image.get_mut(img) else {
                return false;
            };
            let mut best: Option<(usize, f64)> = None;
            for (i, (gt, claimed)) in gts.iter().enumerate() {
                if *claimed {
                    continue;
                }
                let v = iou(det, gt);
                if best.is_none_or(|(_, bv)| v > bv) {
                    best = Some((i, v));
                }
            }
            match best {
                Some((i, v)) if v >= iou_threshold => {
                    gts[i].1 = true;
                    true
                }
                _ => false,
            }
        })
        .collect()
}

/// All-point interpolated AP of ranked TP flags.
///
/// `None` when there is nothing to measure (no ground truth, no detections);
/// detections without any ground truth score 0.
pub fn average_precision(flags: &[bool], num_gt: usize) -> Option<f64> {
    if num_gt == 0 {
        return if flags.is_empty() { None } else { Some(0.0) };
    }
    let mut precision = Vec::with_capacity(flags.len());
    let mut recall = Vec::with_capacity(flags.len());
    let mut tp = 0usize;
    for (i, &f) in flags.iter().enumerate() {
        tp += f as usize;
        precision.push(tp as f64 / (i + 1) as f64);
        recall.push(tp as f64 / num_gt as f64);
    }
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (p, r) in precision.iter().zip(&recall) {
        if *r > prev_recall {
            ap += (r - prev_recall) * p;
            prev_recall = *r;
        }
    }
    Some(ap.clamp(0.0, 1.0))
}

fn mean_defined(values: impl Iterator<Item = Option<f64>>) -> f64 {
    let (sum, n) = values
        .flatten()
        .fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassDetectionStats {
    pub label: String,
    pub num_gt: usize,
    pub num_detections: usize,
    pub true_positives: usize,
    /// `None` for classes with neither ground truth nor detections.
    pub ap50: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionReport {
    pub per_class: Vec<ClassDetectionStats>,
    pub macro_ap50: f64,
    pub images: usize,
    pub ground_truths: usize,
    pub detections: usize,
}

pub fn detection_ap50(detections: &[Detection], manifest: &DatasetManifest) -> Result<DetectionReport> {
    detection_ap_at(detections, manifest, IOU_THRESHOLD)
}

pub fn detection_ap_at(
    detections: &[Detection],
    manifest: &DatasetManifest,
    iou_threshold: f64,
) -> Result<DetectionReport> {
    let mut per_label: Vec<Vec<usize>> = vec![Vec::new(); manifest.classes.len()];
    let ranked = rank_detections(detections);
    for &i in &ranked {
        let d = &detections[i];
        let c = manifest
            .class_index(&d.label)
            .ok_or_else(|| Error::UnknownLabel(d.label.clone()))?;
        if manifest.image(&d.image_id).is_none() {
            return Err(Error::UnknownImage(d.image_id.clone()));
        }
        per_label[c].push(i);
    }
    let mut per_class = Vec::with_capacity(manifest.classes.len());
    let mut total_gt = 0;
    for (c, label) in manifest.classes.iter().enumerate() {
        let gt: Vec<(&str, BBox)> = manifest
            .images
            .iter()
            .flat_map(|img| {
                img.gt_boxes
                    .iter()
                    .filter(|g| &g.label == label)
                    .map(move |g| (img.id.as_str(), g.bbox))
            })
            .collect();
        let dets: Vec<(&str, BBox)> = per_label[c]
            .iter()
            .map(|&i| (detections[i].image_id.as_str(), detections[i].bbox))
            .collect();
        let flags = match_detections(&dets, &gt, iou_threshold);
        total_gt += gt.len();
        per_class.push(ClassDetectionStats {
            label: label.clone(),
            num_gt: gt.len(),
            num_detections: dets.len(),
            true_positives: flags.iter().filter(|&&f| f).count(),
            ap50: average_precision(&flags, gt.len()),
        });
    }
    let macro_ap50 = mean_defined(
        per_class
            .iter()
            .map(|s| if s.num_gt > 0 { s.ap50 } else { None }),
    );
    Ok(DetectionReport {
        per_class,
        macro_ap50,
        images: manifest.images.len(),
        ground_truths: total_gt,
        detections: detections.len(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassClassificationStats {
    pub label: String,
    pub positives: usize,
    pub true_positives: usize,
    pub false_positives: usize,
    pub false_negatives: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// `None` for classes absent from the ground truth.
    pub ap: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassificationReport {
    pub per_class: Vec<ClassClassificationStats>,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    pub macro_ap: f64,
    pub images: usize,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Precision, recall, F1 and ranking AP of proposals against image labels.
///
/// Images without a proposal set count as proposing nothing. For AP every
/// image is ranked by its score for the class (0 when not proposed), ties
/// broken by manifest order.
pub fn classification_metrics(
    proposals: &[ProposalSet],
    manifest: &DatasetManifest,
) -> Result<ClassificationReport> {
    let mut by_image: Vec<Option<&ProposalSet>> = vec![None; manifest.images.len()];
    for set in proposals {
        let i = manifest
            .image_index(&set.image_id)
            .ok_or_else(|| Error::UnknownImage(set.image_id.clone()))?;
        set.validate(&manifest.classes)?;
        by_image[i] = Some(set);
    }
    let mut per_class = Vec::with_capacity(manifest.classes.len());
    for label in &manifest.classes {
        let mut scored: Vec<(f64, bool)> = Vec::with_capacity(manifest.images.len());
        let (mut tp, mut fp, mut fn_) = (0, 0, 0);
        for (img, set) in manifest.images.iter().zip(&by_image) {
            let truth = img.has_label(label);
            let score = set.and_then(|s| s.score(label));
            match (score.is_some(), truth) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fn_ += 1,
                (false, false) => {}
            }
            scored.push((score.unwrap_or(0.0), truth));
        }
        let mut order: Vec<usize> = (0..scored.len()).collect();
        order.sort_by(|&a, &b| scored[b].0.total_cmp(&scored[a].0));
        let flags: Vec<bool> = order.iter().map(|&i| scored[i].1).collect();
        let positives = tp + fn_;
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, positives);
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        per_class.push(ClassClassificationStats {
            label: label.clone(),
            positives,
            true_positives: tp,
            false_positives: fp,
            false_negatives: fn_,
            precision,
            recall,
            f1,
            ap: if positives > 0 {
                average_precision(&flags, positives)
            } else {
                None
            },
        });
    }
    let present = || per_class.iter().filter(|s| s.positives > 0);
    Ok(ClassificationReport {
        macro_precision: mean_defined(present().map(|s| Some(s.precision))),
        macro_recall: mean_defined(present().map(|s| Some(s.recall))),
        macro_f1: mean_defined(present().map(|s| Some(s.f1))),
        macro_ap: mean_defined(present().map(|s| s.ap)),
        images: manifest.images.len(),
        per_class,
    })
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detection: Option<DetectionReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub classification: Option<ClassificationReport>,
}

fn pct(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |v| format!("{:.1}", 100.0 * v))
}

impl EvalReport {
    /// Human-readable per-class tables followed by a macro row.
    pub fn render_table(&self) -> String {
        let mut out = String::new();
        if let Some(d) = &self.detection {
            let _ = writeln!(
                out,
                "# detection: AP50, all-point interpolation, greedy matching at IoU >= {IOU_THRESHOLD}"
            );
            let _ = writeln!(
                out,
                "# images {}  ground truths {}  detections {}",
                d.images, d.ground_truths, d.detections
            );
            let width = d.per_class.iter().map(|s| s.label.len()).max().unwrap_or(5).max(5);
            let _ = writeln!(out, "{:<width$}  {:>6}  {:>6}  {:>6}  {:>6}", "class", "gt", "dets", "tp", "AP50");
            for s in &d.per_class {
                let _ = writeln!(
                    out,
                    "{:<width$}  {:>6}  {:>6}  {:>6}  {:>6}",
                    s.label,
                    s.num_gt,
                    s.num_detections,
                    s.true_positives,
                    pct(if s.num_gt > 0 { s.ap50 } else { None })
                );
            }
            let _ = writeln!(out, "{:<width$}  {:>6}  {:>6}  {:>6}  {:>6}", "macro", "", "", "", pct(Some(d.macro_ap50)));
        }
        if let Some(c) = &self.classification {
            if !out.is_empty() {
                out.push('\n');
            }
            let _ = writeln!(out, "# classification over {} images", c.images);
            let width = c.per_class.iter().map(|s| s.label.len()).max().unwrap_or(5).max(5);
            let _ = writeln!(out, "{:<width$}  {:>6}  {:>6}  {:>6}  {:>6}", "class", "P", "R", "F1", "AP");
            for s in &c.per_class {
                let defined = s.positives > 0;
                let show = |v: f64| pct(defined.then_some(v));
                let _ = writeln!(
                    out,
                    "{:<width$}  {:>6}  {:>6}  {:>6}  {:>6}",
                    s.label,
                    show(s.precision),
                    show(s.recall),
                    show(s.f1),
                    pct(s.ap)
                );
            }
            let _ = writeln!(
                out,
                "{:<width$}  {:>6}  {:>6}  {:>6}  {:>6}",
                "macro",
                pct(Some(c.macro_precision)),
                pct(Some(c.macro_recall)),
                pct(Some(c.macro_f1)),
                pct(Some(c.macro_ap))
            );
        }
        out
    }
}
