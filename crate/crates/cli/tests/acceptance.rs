//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit on any failure.

use std::cmp::Ordering;
use std::collections::HashMap;
use std::io::Cursor;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use ndarray::{Array1, Array2};
use num_bigint::BigInt;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use nada_core::attnagg::{align_maps, average_token_maps, label_map};
use nada_core::dataio::{
    read_attention_stack, read_embedding_matrix, synth_fixture, write_attention_stack,
    write_embedding_matrix, AttentionStack, DatasetManifest, EmbeddingMatrix, FixtureSpec, GtBox,
    ImageRecord, LabelSpan, StackHeader, ICONART_CLASSES,
};
use nada_core::evalkit::{classification_metrics, detection_ap50, iou, Detection};
use nada_core::geometry::{BBox, Grid};
use nada_core::pipeline::{detect_image_multi, sweep_thresholds, DetectOptions};
use nada_core::proposer::{
    oracle_propose, read_checkpoint, train_on_arrays, write_checkpoint, yesno_parse,
    zscp_parse_choice, zscp_parse_score, HeadMode, LossKind, MlpModel, Proposal, ProposalSet,
    QueryKind, TrainConfig, VlmTranscript,
};
use nada_core::segbox::{
    otsu_threshold_values, regions_to_boxes, watershed_regions, BinaryMask, ExtractionConfig,
};

type Outcome = Result<String, String>;

fn nada() -> Command {
    Command::new(env!("CARGO_BIN_EXE_nada"))
}

fn run_cli(args: &[&str], dir: &Path) -> Result<String, String> {
    let out = nada()
        .args(args)
        .current_dir(dir)
        .env_remove("NADA_DATA_DIR")
        .env("RUST_LOG", "warn")
        .output()
        .map_err(|e| e.to_string())?;
    if !out.status.success() {
        return Err(format!(
            "`nada {}` failed: {}",
            args.join(" "),
            String::from_utf8_lossy(&out.stderr)
        ));
    }
    Ok(String::from_utf8_lossy(&out.stdout).into_owned())
}

fn fixture_dir(dir: &Path) -> Result<(), String> {
    run_cli(&["fixtures", "--images", "50", "--seed", "0", "--out", "fx"], dir)?;
    run_cli(
        &["propose", "--kind", "oracle", "-m", "fx/manifest.json", "-o", "fx/oracle.jsonl"],
        dir,
    )?;
    Ok(())
}

// ---------------------------------------------------------------------------

fn end_to_end_fixture() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let dir = tmp.path();
    let start = Instant::now();
    fixture_dir(dir)?;
    run_cli(
        &[
            "detect", "-m", "fx/manifest.json", "-s", "fx/stacks", "-p", "fx/oracle.jsonl", "-o",
            "fx/dets.jsonl",
        ],
        dir,
    )?;
    run_cli(
        &["eval", "-m", "fx/manifest.json", "-d", "fx/dets.jsonl", "--json", "fx/report.json"],
        dir,
    )?;
    let elapsed = start.elapsed().as_secs_f64();
    let report: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(dir.join("fx/report.json")).map_err(|e| e.to_string())?,
    )
    .map_err(|e| e.to_string())?;
    let ap = report["detection"]["macro_ap50"]
        .as_f64()
        .ok_or("report lacks macro_ap50")?;
    let msg = format!("macro AP50 {ap:.6}, wall time {elapsed:.2} s");
    if ap == 1.0 && elapsed < 10.0 {
        Ok(msg)
    } else {
        Err(msg)
    }
}

// ---------------------------------------------------------------------------

/// Exhaustive Otsu over the 255 interior edges, comparing between-class
/// variances as exact rationals.
fn otsu_oracle(values: &[f64]) -> f64 {
    let level = |v: f64| (1..256).filter(|&m| v > m as f64 / 256.0).count() as i64;
    let q: Vec<i64> = values.iter().map(|&v| level(v)).collect();
    // best (numerator, denominator) of (S0*N1 - S1*N0)^2 / (N0*N1)
    let mut best: Option<(usize, BigInt, BigInt)> = None;
    for k in 1..256usize {
        let t = k as f64 / 256.0;
        let (mut n0, mut n1, mut s0, mut s1) = (0i64, 0i64, 0i64, 0i64);
        for (&v, &qi) in values.iter().zip(&q) {
            if v > t {
                n1 += 1;
                s1 += qi;
            } else {
                n0 += 1;
                s0 += qi;
            }
        }
        if n0 == 0 || n1 == 0 {
            continue;
        }
        let d = BigInt::from(s0) * n1 - BigInt::from(s1) * n0;
        let num = &d * &d;
        let den = BigInt::from(n0) * n1;
        let better = match &best {
            None => true,
            Some((_, bn, bd)) => (&num * bd).cmp(&(bn * &den)) == Ordering::Greater,
        };
        if better {
            best = Some((k, num, den));
        }
    }
    match best {
        Some((k, _, _)) => k as f64 / 256.0,
        None => values.iter().copied().fold(f64::NEG_INFINITY, f64::max),
    }
}

fn random_map(rng: &mut ChaCha8Rng) -> Vec<f64> {
    let h = rng.gen_range(4..40);
    let w = rng.gen_range(4..40);
    let n = h * w;
    match rng.gen_range(0..5) {
        // single uniform
        0 => {
            let lo: f64 = rng.gen_range(0.0..0.9);
            let hi = rng.gen_range(lo..=1.0);
            (0..n).map(|_| rng.gen_range(lo..=hi)).collect()
        }
        // mixture of two uniforms
        1 => {
            let p: f64 = rng.gen();
            let a: (f64, f64) = (rng.gen_range(0.0..0.5), rng.gen_range(0.5..0.7));
            let b: (f64, f64) = (rng.gen_range(0.3..0.8), rng.gen_range(0.8..=1.0));
            (0..n)
                .map(|_| {
                    let (lo, hi) = if rng.gen::<f64>() < p { a } else { b };
                    rng.gen_range(lo.min(hi)..=hi.max(lo))
                })
                .collect()
        }
        // bimodal blobs over a noisy floor
        2 => {
            let blobs: Vec<(f64, f64, f64, f64)> = (0..rng.gen_range(1..4))
                .map(|_| {
                    (
                        rng.gen_range(0.0..h as f64),
                        rng.gen_range(0.0..w as f64),
                        rng.gen_range(1.0..8.0),
                        rng.gen_range(0.3..=1.0),
                    )
                })
                .collect();
            (0..n)
                .map(|i| {
                    let (r, c) = ((i / w) as f64, (i % w) as f64);
                    let bump: f64 = blobs
                        .iter()
                        .map(|&(br, bc, s, a)| {
                            a * (-((r - br).powi(2) + (c - bc).powi(2)) / (2.0 * s * s)).exp()
                        })
                        .sum();
                    (0.05 + bump + rng.gen_range(-0.02..0.02)).clamp(0.0, 1.0)
                })
                .collect()
        }
        // values exactly on bin edges
        3 => (0..n)
            .map(|_| rng.gen_range(0..=256u32) as f64 / 256.0)
            .collect(),
        // few distinct levels, constant maps included
        _ => {
            let levels: Vec<f64> = (0..rng.gen_range(1..4)).map(|_| rng.gen()).collect();
            (0..n).map(|_| *levels.choose(rng).unwrap()).collect()
        }
    }
}

fn otsu_equivalence() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut agree = 0;
    let mut first_miss = None;
    for case in 0..1000 {
        let values = random_map(&mut rng);
        let (got, want) = (otsu_threshold_values(&values), otsu_oracle(&values));
        if got == want {
            agree += 1;
        } else if first_miss.is_none() {
            first_miss = Some(format!("case {case}: got {got}, oracle {want}"));
        }
    }
    let msg = format!("{agree}/1000 maps agree with the exhaustive maximizer");
    match first_miss {
        None => Ok(msg),
        Some(m) => Err(format!("{msg}; {m}")),
    }
}

// ---------------------------------------------------------------------------

/// AP by direct PR summation: each true positive at rank i adds
/// `1/num_gt * max precision at ranks >= i`.
fn direct_ap(flags: &[bool], num_gt: usize) -> f64 {
    let prec: Vec<f64> = flags
        .iter()
        .enumerate()
        .map(|(i, _)| flags[..=i].iter().filter(|&&f| f).count() as f64 / (i + 1) as f64)
        .collect();
    let mut ap = 0.0;
    for i in 0..flags.len() {
        if flags[i] {
            let best = prec[i..].iter().copied().fold(0.0, f64::max);
            ap += best / num_gt as f64;
        }
    }
    ap
}

fn direct_detection_macro(dets: &[Detection], m: &DatasetManifest) -> f64 {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| {
        dets[b]
            .score
            .partial_cmp(&dets[a].score)
            .unwrap()
            .then(dets[a].image_id.cmp(&dets[b].image_id))
            .then(a.cmp(&b))
    });
    let mut aps = Vec::new();
    for class in &m.classes {
        let gts: Vec<(&str, BBox)> = m
            .images
            .iter()
            .flat_map(|img| {
                img.gt_boxes
                    .iter()
                    .filter(move |g| &g.label == class)
                    .map(move |g| (img.id.as_str(), g.bbox))
            })
            .collect();
        if gts.is_empty() {
            continue;
        }
        let mut claimed = vec![false; gts.len()];
        let mut flags = Vec::new();
        for &i in &order {
            let d = &dets[i];
            if &d.label != class {
                continue;
            }
            let mut best_iou = -1.0;
            let mut best_j = None;
            for (j, (img, g)) in gts.iter().enumerate() {
                if *img != d.image_id || claimed[j] {
                    continue;
                }
                let v = iou(&d.bbox, g);
                if v > best_iou {
                    best_iou = v;
                    best_j = Some(j);
                }
            }
            let tp = best_j.is_some() && (best_iou >= 0.5);
            if tp {
                claimed[best_j.unwrap()] = true;
            }
            flags.push(tp);
        }
        aps.push(direct_ap(&flags, gts.len()));
    }
    if aps.is_empty() {
        0.0
    } else {
        aps.iter().sum::<f64>() / aps.len() as f64
    }
}

fn direct_classification_aps(sets: &[ProposalSet], m: &DatasetManifest) -> Vec<Option<f64>> {
    m.classes
        .iter()
        .map(|class| {
            let mut ranked: Vec<(f64, bool)> = m
                .images
                .iter()
                .map(|img| {
                    let s = sets
                        .iter()
                        .find(|s| s.image_id == img.id)
                        .and_then(|s| s.score(class))
                        .unwrap_or(0.0);
                    (s, img.gt_labels.contains(class))
                })
                .collect();
            let positives = ranked.iter().filter(|r| r.1).count();
            if positives == 0 {
                return None;
            }
            // stable: equal scores keep manifest order
            ranked.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
            let flags: Vec<bool> = ranked.iter().map(|r| r.1).collect();
            Some(direct_ap(&flags, positives))
        })
        .collect()
}

fn random_box(rng: &mut ChaCha8Rng) -> BBox {
    let x0 = rng.gen_range(0..16) as f64;
    let y0 = rng.gen_range(0..16) as f64;
    let w = rng.gen_range(1..9) as f64;
    let h = rng.gen_range(1..9) as f64;
    BBox::new(x0, y0, x0 + w, y0 + h).unwrap()
}

fn jitter(b: &BBox, rng: &mut ChaCha8Rng) -> BBox {
    let mut d = || rng.gen_range(-2..=2) as f64;
    let (x0, y0) = (b.x0 + d(), b.y0 + d());
    let (x1, y1) = (b.x1 + d(), b.y1 + d());
    BBox::new(x0.min(x1 - 1.0), y0.min(y1 - 1.0), x1.max(x0 + 1.0), y1.max(y0 + 1.0)).unwrap()
}

fn evaluator_equivalence() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let mut worst = 0.0f64;
    for case in 0..200 {
        let n_classes = rng.gen_range(1..=3);
        let classes: Vec<String> = (0..n_classes).map(|c| format!("c{c}")).collect();
        let n_images = rng.gen_range(1..=5);
        let mut images: Vec<ImageRecord> = (0..n_images)
            .map(|i| ImageRecord {
                id: format!("im{i}"),
                width: 32,
                height: 32,
                gt_labels: vec![],
                gt_boxes: vec![],
            })
            .collect();
        for _ in 0..rng.gen_range(0..=10) {
            let img = &mut images[rng.gen_range(0..n_images)];
            let label = classes[rng.gen_range(0..n_classes)].clone();
            if !img.gt_labels.contains(&label) {
                img.gt_labels.push(label.clone());
            }
            img.gt_boxes.push(GtBox {
                label,
                bbox: random_box(&mut rng),
            });
        }
        let m = DatasetManifest {
            name: "toy".into(),
            classes: classes.clone(),
            images,
        };
        let mut dets = Vec::new();
        for _ in 0..rng.gen_range(0..=10) {
            let img = &m.images[rng.gen_range(0..n_images)];
            let (label, bbox) = match img.gt_boxes.choose(&mut rng) {
                Some(g) if rng.gen_bool(0.7) => (g.label.clone(), jitter(&g.bbox, &mut rng)),
                _ => (classes[rng.gen_range(0..n_classes)].clone(), random_box(&mut rng)),
            };
            dets.push(Detection {
                image_id: img.id.clone(),
                label,
                bbox,
                score: [0.25, 0.5, 0.75, 1.0][rng.gen_range(0..4)],
            });
        }
        let report = detection_ap50(&dets, &m).map_err(|e| e.to_string())?;
        let want = direct_detection_macro(&dets, &m);
        let diff = (report.macro_ap50 - want).abs();
        worst = worst.max(diff);
        if diff > 1e-9 {
            return Err(format!("case {case}: detection AP50 {} vs direct {want}", report.macro_ap50));
        }

        let mut sets: Vec<ProposalSet> = Vec::new();
        for img in &m.images {
            if !rng.gen_bool(0.8) {
                continue;
            }
            let mut proposals = Vec::new();
            for c in &classes {
                if rng.gen_bool(0.5) {
                    proposals.push(Proposal {
                        label: c.clone(),
                        score: [0.3, 0.6, 0.9, 1.0][rng.gen_range(0..4)],
                    });
                }
            }
            sets.push(ProposalSet {
                image_id: img.id.clone(),
                proposals,
            });
        }
        let cls = classification_metrics(&sets, &m).map_err(|e| e.to_string())?;
        for (stats, want) in cls.per_class.iter().zip(direct_classification_aps(&sets, &m)) {
            let ok = match (stats.ap, want) {
                (None, None) => true,
                (Some(a), Some(b)) => {
                    worst = worst.max((a - b).abs());
                    (a - b).abs() <= 1e-9
                }
                _ => false,
            };
            if !ok {
                return Err(format!(
                    "case {case}: classification AP of {} is {:?}, direct {want:?}",
                    stats.label, stats.ap
                ));
            }
        }
    }
    Ok(format!("200 instances, max deviation {worst:.1e}"))
}

// ---------------------------------------------------------------------------

fn random_mask(rng: &mut ChaCha8Rng) -> BinaryMask {
    let h = rng.gen_range(1..48);
    let w = rng.gen_range(1..48);
    let mut g = Grid::filled(h, w, false);
    match rng.gen_range(0..3) {
        0 => {
            for i in 0..h * w {
                g.as_mut_slice()[i] = rng.gen_bool(0.45);
            }
        }
        1 => {
            for _ in 0..rng.gen_range(1..5) {
                let (cr, cc) = (rng.gen_range(0..h) as f64, rng.gen_range(0..w) as f64);
                let rad: f64 = rng.gen_range(1.0..12.0);
                for r in 0..h {
                    for c in 0..w {
                        if (r as f64 - cr).powi(2) + (c as f64 - cc).powi(2) <= rad * rad {
                            g.set(r, c, true);
                        }
                    }
                }
            }
        }
        _ => {
            for _ in 0..rng.gen_range(1..6) {
                let r0 = rng.gen_range(0..h);
                let c0 = rng.gen_range(0..w);
                let r1 = rng.gen_range(r0..h);
                let c1 = rng.gen_range(c0..w);
                for r in r0..=r1 {
                    for c in c0..=c1 {
                        g.set(r, c, true);
                    }
                }
            }
        }
    }
    BinaryMask {
        grid: g,
        threshold: 0.5,
    }
}

fn dumbbell() -> BinaryMask {
    let (h, w) = (64, 64);
    let mut g = Grid::filled(h, w, false);
    for r in 0..h {
        for c in 0..w {
            let (y, x) = (r as f64, c as f64);
            let left = (y - 32.0).powi(2) + (x - 16.0).powi(2) <= 100.0;
            let right = (y - 32.0).powi(2) + (x - 48.0).powi(2) <= 100.0;
            let bar = (31..=32).contains(&r) && (16..=48).contains(&c);
            g.set(r, c, left || right || bar);
        }
    }
    BinaryMask {
        grid: g,
        threshold: 0.5,
    }
}

fn watershed_partition() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    for case in 0..500 {
        let mask = random_mask(&mut rng);
        let (h, w) = mask.dims();
        let min_distance = 0.125 * h.max(w) as f64;
        let lab = watershed_regions(&mask, min_distance);
        let ids = lab.grid.as_slice();
        for (i, (&id, &fg)) in ids.iter().zip(mask.grid.as_slice()).enumerate() {
            if (id > 0) != fg || id > lab.count {
                return Err(format!("case {case}: pixel {i} has region {id}, foreground {fg}"));
            }
        }
        let areas = lab.areas();
        if areas.contains(&0) {
            return Err(format!("case {case}: an empty region id"));
        }
        let image = (w as u32 * 4, h as u32 * 4);
        for rb in regions_to_boxes(&lab, image, 0.0) {
            let (mut r0, mut c0, mut r1, mut c1) = (usize::MAX, usize::MAX, 0, 0);
            for r in 0..h {
                for c in 0..w {
                    if *lab.grid.get(r, c) == rb.region {
                        r0 = r0.min(r);
                        c0 = c0.min(c);
                        r1 = r1.max(r);
                        c1 = c1.max(c);
                    }
                }
            }
            let tight = (rb.cells.row0, rb.cells.col0, rb.cells.row1, rb.cells.col1) == (r0, c0, r1, c1)
                && rb.bbox.x0 == (c0 * 4) as f64
                && rb.bbox.y0 == (r0 * 4) as f64
                && rb.bbox.x1 == ((c1 + 1) * 4) as f64
                && rb.bbox.y1 == ((r1 + 1) * 4) as f64;
            if !tight || !rb.bbox.within(image.0 as f64, image.1 as f64) {
                return Err(format!("case {case}: region {} box {:?} not tight", rb.region, rb.bbox));
            }
        }
    }
    let d = dumbbell();
    let regions = watershed_regions(&d, 0.125 * 64.0).count;
    if regions != 2 {
        return Err(format!("dumbbell split into {regions} regions"));
    }
    Ok("500 masks partitioned exactly with tight boxes; dumbbell gives 2 regions".into())
}

// ---------------------------------------------------------------------------

fn gradient_error(model: &MlpModel, x: &Array2<f64>, t: &Array2<f64>, loss: LossKind) -> f64 {
    let (_, g) = model.loss_and_gradient(x.view(), t.view(), loss);
    let h = 1e-6;
    let (mut diff2, mut a2, mut n2) = (0.0, 0.0, 0.0);
    let mut probe = model.clone();
    let mut check = |analytic: f64, probe: &mut MlpModel, set: &dyn Fn(&mut MlpModel, f64)| {
        set(probe, h);
        let up = probe.loss(x.view(), t.view(), loss);
        set(probe, -2.0 * h);
        let down = probe.loss(x.view(), t.view(), loss);
        set(probe, h);
        let numeric = (up - down) / (2.0 * h);
        diff2 += (analytic - numeric).powi(2);
        a2 += analytic * analytic;
        n2 += numeric * numeric;
    };
    for l in 0..model.layers.len() {
        let (rows, cols) = model.layers[l].weight.dim();
        for r in 0..rows {
            for c in 0..cols {
                check(g.weight[l][[r, c]], &mut probe, &|m, d| m.layers[l].weight[[r, c]] += d);
            }
            check(g.bias[l][r], &mut probe, &|m, d| m.layers[l].bias[r] += d);
        }
    }
    let denom = a2.sqrt() + n2.sqrt();
    if denom == 0.0 {
        0.0
    } else {
        diff2.sqrt() / denom
    }
}

fn separable_set(rng: &mut ChaCha8Rng, n: usize, dim: usize, classes: usize) -> (Array2<f64>, Array2<f64>) {
    let protos: Vec<Vec<f64>> = (0..classes)
        .map(|_| {
            let v: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
            v.into_iter().map(|a| a / norm).collect()
        })
        .collect();
    let mut x = Array2::zeros((n, dim));
    let mut t = Array2::zeros((n, classes));
    for i in 0..n {
        let c = i % classes;
        let mut v: Vec<f64> = protos[c]
            .iter()
            .map(|&p| p + rng.gen_range(-0.05..0.05))
            .collect();
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        v.iter_mut().for_each(|a| *a /= norm);
        for (j, a) in v.into_iter().enumerate() {
            x[[i, j]] = a;
        }
        t[[i, c]] = 1.0;
    }
    (x, t)
}

fn mlp_numerics() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(47);
    let mut worst = 0.0f64;
    for net in 0..50 {
        for loss in [LossKind::CrossEntropy, LossKind::BinaryCrossEntropy] {
            let input = rng.gen_range(2..7);
            let hidden = rng.gen_range(2..7);
            let layers = rng.gen_range(1..=3);
            let classes: Vec<String> = (0..rng.gen_range(2..5)).map(|c| format!("k{c}")).collect();
            let n = rng.gen_range(1..6);
            let mut model =
                MlpModel::init(input, hidden, layers, classes.clone(), loss.head(), &mut rng)
                    .map_err(|e| e.to_string())?;
            for layer in &mut model.layers {
                layer.bias = Array1::from_shape_fn(layer.bias.len(), |_| rng.gen_range(-0.5..0.5));
            }
            let x = Array2::from_shape_fn((n, input), |_| rng.gen_range(-2.0..2.0));
            let t = match loss {
                LossKind::CrossEntropy => {
                    let mut t = Array2::zeros((n, classes.len()));
                    for i in 0..n {
                        t[[i, rng.gen_range(0..classes.len())]] = 1.0;
                    }
                    t
                }
                LossKind::BinaryCrossEntropy => Array2::from_shape_fn((n, classes.len()), |_| {
                    rng.gen_range(0..2) as f64
                }),
            };
            let err = gradient_error(&model, &x, &t, loss);
            worst = worst.max(err);
            if err.is_nan() || err >= 1e-6 {
                return Err(format!("network {net} ({loss:?}): relative gradient error {err:.2e}"));
            }
        }
    }

    let (x, t) = separable_set(&mut rng, 2000, 64, 10);
    let classes: Vec<String> = (0..10).map(|c| format!("k{c}")).collect();
    let config = TrainConfig {
        seed: 3,
        ..TrainConfig::artdl()
    };
    let a = train_on_arrays(x.view(), t.view(), classes.clone(), &config).map_err(|e| e.to_string())?;
    let b = train_on_arrays(x.view(), t.view(), classes, &config).map_err(|e| e.to_string())?;
    let scores = a.model.scores(x.view());
    let correct = (0..x.nrows())
        .filter(|&i| {
            let row = scores.row(i);
            let pred = (0..row.len())
                .fold(0, |best, j| if row[j] > row[best] { j } else { best });
            t[[i, pred]] == 1.0
        })
        .count();
    let accuracy = correct as f64 / x.nrows() as f64;
    let (mut bytes_a, mut bytes_b) = (Vec::new(), Vec::new());
    write_checkpoint(&a.model, &mut bytes_a).map_err(|e| e.to_string())?;
    write_checkpoint(&b.model, &mut bytes_b).map_err(|e| e.to_string())?;
    let deterministic = bytes_a == bytes_b && a.final_loss.to_bits() == b.final_loss.to_bits();
    let msg = format!(
        "worst gradient error {worst:.1e} over 100 checks, train accuracy {:.2}%, deterministic {deterministic}",
        100.0 * accuracy
    );
    if accuracy >= 0.99 && deterministic {
        Ok(msg)
    } else {
        Err(msg)
    }
}

// ---------------------------------------------------------------------------

const DIMS: [(usize, usize); 4] = [(8, 8), (4, 4), (2, 2), (8, 4)];

fn random_stack(rng: &mut ChaCha8Rng, exact: bool) -> AttentionStack {
    let timesteps = rng.gen_range(1..=4);
    let blocks: Vec<(usize, usize)> = (0..rng.gen_range(1..=4))
        .map(|_| DIMS[rng.gen_range(0..DIMS.len())])
        .collect();
    let tokens = rng.gen_range(1..=5);
    let mut spans = Vec::new();
    for (i, len) in [1usize, 2, 3].into_iter().enumerate() {
        if len <= tokens {
            let start = rng.gen_range(0..=tokens - len);
            spans.push(LabelSpan {
                label: format!("label{i}"),
                tokens: (start..start + len).collect(),
            });
        }
    }
    let header = StackHeader {
        image_id: format!("img{}", rng.gen::<u32>()),
        timesteps,
        tokens,
        blocks,
        spans,
    };
    let data = (0..header.payload_len())
        .map(|_| {
            if exact {
                // multiples of 2^-20 up to 2 so sums stay exact
                rng.gen_range(0..=(1u32 << 21)) as f32 / (1u32 << 20) as f32
            } else {
                rng.gen_range(0.0..2.0f32)
            }
        })
        .collect();
    AttentionStack::new(header, data).unwrap()
}

/// A random `(j, k)` reordering that keeps every block column at one grid size.
fn random_permutation(s: &AttentionStack, rng: &mut ChaCha8Rng) -> Vec<(usize, usize)> {
    let (jn, kn) = (s.timesteps(), s.num_blocks());
    let mut rows: Vec<usize> = (0..jn).collect();
    let mut cols: Vec<usize> = (0..kn).collect();
    rows.shuffle(rng);
    cols.shuffle(rng);
    let mut order: Vec<(usize, usize)> = rows
        .iter()
        .flat_map(|&j| cols.iter().map(move |&k| (j, k)))
        .collect();
    let mut by_dims: HashMap<(usize, usize), Vec<usize>> = HashMap::new();
    for (pos, &(_, k)) in order.iter().enumerate() {
        by_dims.entry(s.block_dims(k)).or_default().push(pos);
    }
    for positions in by_dims.values() {
        let mut sources: Vec<(usize, usize)> = positions.iter().map(|&p| order[p]).collect();
        sources.shuffle(rng);
        for (&p, src) in positions.iter().zip(sources) {
            order[p] = src;
        }
    }
    order
}

fn aggregation_algebra() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(59);
    for case in 0..1000 {
        let s = random_stack(&mut rng, true);
        let permuted = s
            .permuted(&random_permutation(&s, &mut rng))
            .map_err(|e| format!("case {case}: {e}"))?;
        let (a, b) = (align_maps(&s), align_maps(&permuted));
        for t in 0..s.tokens() {
            let x = average_token_maps(&a, t).map_err(|e| e.to_string())?;
            let y = average_token_maps(&b, t).map_err(|e| e.to_string())?;
            if x.grid != y.grid {
                return Err(format!("case {case}: token {t} changes under permutation"));
            }
            // all blocks at the target size: compare with a direct mean
            if s.header().blocks.iter().all(|&d| d == a.target()) {
                let n = (s.timesteps() * s.num_blocks()) as f64;
                for (cell, &v) in x.grid.as_slice().iter().enumerate() {
                    let mut sum = 0.0;
                    for j in 0..s.timesteps() {
                        for k in 0..s.num_blocks() {
                            sum += s.map(j, k, t)[cell] as f64;
                        }
                    }
                    if v != sum / n {
                        return Err(format!("case {case}: direct mean differs at cell {cell}"));
                    }
                }
            }
        }
        for span in &s.header().spans {
            let lm = label_map(&a, &span.label).map_err(|e| e.to_string())?;
            let lp = label_map(&b, &span.label).map_err(|e| e.to_string())?;
            if lm.grid != lp.grid {
                return Err(format!("case {case}: label {} changes under permutation", span.label));
            }
            if lm.values().iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(format!("case {case}: label map escapes [0, 1]"));
            }
            if span.tokens.len() == 1 {
                let tm = average_token_maps(&a, span.tokens[0]).map_err(|e| e.to_string())?;
                let clamped: Vec<f64> = tm.grid.as_slice().iter().map(|v| v.clamp(0.0, 1.0)).collect();
                if lm.values() != clamped.as_slice() {
                    return Err(format!("case {case}: single-token label is not its clamped token map"));
                }
            }
        }
    }
    Ok("1000 stacks: permutation invariance, single-token identity and clamp bounds exact".into())
}

// ---------------------------------------------------------------------------

fn format_round_trip() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(67);
    for case in 0..100 {
        let s = random_stack(&mut rng, false);
        let mut bytes = Vec::new();
        write_attention_stack(&s, &mut bytes).map_err(|e| e.to_string())?;
        let back = read_attention_stack(Cursor::new(&bytes)).map_err(|e| e.to_string())?;
        let same = back.header() == s.header()
            && back
                .payload()
                .iter()
                .zip(s.payload())
                .all(|(a, b)| a.to_bits() == b.to_bits())
            && back.payload().len() == s.payload().len();
        if !same {
            return Err(format!("stack {case} differs after round trip"));
        }

        let rows = rng.gen_range(1..8);
        let dim = rng.gen_range(1..16);
        let ids = (0..rows).map(|i| format!("id-{case}-{i}")).collect();
        let data = (0..rows * dim).map(|_| rng.gen_range(-1.0..1.0f32)).collect();
        let e = EmbeddingMatrix::new(ids, dim, data).map_err(|e| e.to_string())?;
        let mut bytes = Vec::new();
        write_embedding_matrix(&e, &mut bytes).map_err(|e| e.to_string())?;
        let back = read_embedding_matrix(Cursor::new(&bytes)).map_err(|e| e.to_string())?;
        if back.ids() != e.ids()
            || back.dim() != e.dim()
            || !back
                .payload()
                .iter()
                .zip(e.payload())
                .all(|(a, b)| a.to_bits() == b.to_bits())
        {
            return Err(format!("embedding matrix {case} differs after round trip"));
        }

        let head = if rng.gen() { HeadMode::SingleLabel } else { HeadMode::MultiLabel };
        let classes = (0..rng.gen_range(1..5)).map(|c| format!("class {c}")).collect();
        let mut model = MlpModel::init(
            rng.gen_range(1..10),
            rng.gen_range(1..10),
            rng.gen_range(1..4),
            classes,
            head,
            &mut rng,
        )
        .map_err(|e| e.to_string())?;
        for layer in &mut model.layers {
            layer.bias = Array1::from_shape_fn(layer.bias.len(), |_| rng.gen_range(-1.0..1.0));
        }
        let mut bytes = Vec::new();
        write_checkpoint(&model, &mut bytes).map_err(|e| e.to_string())?;
        let back = read_checkpoint(Cursor::new(&bytes)).map_err(|e| e.to_string())?;
        let bits_equal = back.layers.len() == model.layers.len()
            && back.layers.iter().zip(&model.layers).all(|(a, b)| {
                a.weight.dim() == b.weight.dim()
                    && a.weight.iter().zip(&b.weight).all(|(x, y)| x.to_bits() == y.to_bits())
                    && a.bias.iter().zip(&b.bias).all(|(x, y)| x.to_bits() == y.to_bits())
            });
        if !bits_equal || back.classes != model.classes || back.head != model.head {
            return Err(format!("checkpoint {case} differs after round trip"));
        }
    }
    Ok("100 stacks, matrices and checkpoints round-trip bit-identically".into())
}

// ---------------------------------------------------------------------------

fn transcript(kind: QueryKind, response: &str) -> VlmTranscript {
    VlmTranscript {
        image_id: "img".into(),
        kind,
        label: None,
        response: response.into(),
    }
}

fn parser_contracts() -> Result<(), String> {
    let vocab: Vec<String> = ICONART_CLASSES.iter().map(|s| s.to_string()).collect();
    let check = |ok: bool, what: &str| if ok { Ok(()) } else { Err(what.to_string()) };

    let c = zscp_parse_choice(&transcript(QueryKind::Choice, "I see an Angel and Mary."), &vocab);
    check(c.labels().eq(["angel", "mary"]), "choice labels")?;
    check(c.proposals.iter().all(|p| p.score == 1.0), "choice scores")?;
    let c = zscp_parse_choice(&transcript(QueryKind::Choice, "Nothing relevant."), &vocab);
    check(c.is_empty(), "choice without classes")?;

    let none = zscp_parse_score(&transcript(QueryKind::Score, "None"), &vocab, 0.5);
    check(none.map(|s| s.is_empty()).unwrap_or(false), "score None answer")?;
    let s = zscp_parse_score(
        &transcript(QueryKind::Score, "{'angel': 0.5, 'mary': 0.51, 'ruins': 0.49} because..."),
        &vocab,
        0.5,
    )
    .map_err(|e| e.to_string())?;
    check(s.labels().eq(["mary"]), "strict tau boundary")?;
    for bad in ["{'angel': 0.9", "{'angel' 0.9}", "{'angel': maybe}", "{'angel': NaN}"] {
        check(
            zscp_parse_score(&transcript(QueryKind::Score, bad), &vocab, 0.5).is_err(),
            &format!("malformed dictionary {bad:?} accepted"),
        )?;
    }
    let nested = zscp_parse_score(
        &transcript(QueryKind::Score, "Answer: {\"baby\": 0.8, \"note\": 1} then {\"angel\": 1}"),
        &vocab,
        0.5,
    )
    .map_err(|e| e.to_string())?;
    check(nested.labels().eq(["baby"]), "first dictionary only")?;

    check(yesno_parse(&transcript(QueryKind::YesNo, "Yes, there is.")), "yes answer")?;
    check(!yesno_parse(&transcript(QueryKind::YesNo, "No.")), "no answer")?;
    check(!yesno_parse(&transcript(QueryKind::YesNo, "eyes closed")), "yes inside a word")?;
    Ok(())
}

fn fuzz_string(rng: &mut ChaCha8Rng) -> String {
    const PIECES: &[&str] = &[
        "{", "}", "'", "\"", ":", ",", " ", "\\", "None", "yes", "angel", "mary", "0.5", "1e309",
        "-3", "NaN", "inf", "é", "🙂", "\n", "{'", "':", "[", "]", "naked person", ".", "0",
    ];
    let len = rng.gen_range(0..40);
    (0..len)
        .map(|_| {
            if rng.gen_bool(0.2) {
                char::from_u32(rng.gen_range(0..0x11000)).unwrap_or('?').to_string()
            } else {
                PIECES[rng.gen_range(0..PIECES.len())].to_string()
            }
        })
        .collect()
}

fn parser_suite() -> Outcome {
    parser_contracts()?;
    let vocab: Vec<String> = ICONART_CLASSES.iter().map(|s| s.to_string()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(71);
    let mut panics = 0;
    let mut parsed = 0;
    for _ in 0..10_000 {
        let text = fuzz_string(&mut rng);
        let r = catch_unwind(AssertUnwindSafe(|| {
            let _ = zscp_parse_choice(&transcript(QueryKind::Choice, &text), &vocab);
            let s = zscp_parse_score(&transcript(QueryKind::Score, &text), &vocab, 0.5);
            let _ = yesno_parse(&transcript(QueryKind::YesNo, &text));
            if let Ok(set) = &s {
                assert!(set.proposals.iter().all(|p| p.score > 0.5 && p.score <= 1.0));
                assert!(set.validate(&vocab).is_ok());
            }
            s.is_ok()
        }));
        match r {
            Ok(ok) => parsed += ok as usize,
            Err(_) => panics += 1,
        }
    }
    let msg = format!("contracts hold; 10000 fuzzed answers, {parsed} parsed, {panics} panics");
    if panics == 0 {
        Ok(msg)
    } else {
        Err(msg)
    }
}

// ---------------------------------------------------------------------------

fn threshold_sweep() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let dir = tmp.path();
    fixture_dir(dir)?;
    run_cli(
        &[
            "sweep", "-m", "fx/manifest.json", "-s", "fx/stacks", "-p", "fx/oracle.jsonl", "--json",
            "fx/sweep.jsonl",
        ],
        dir,
    )?;
    let rows: Vec<serde_json::Value> = std::fs::read_to_string(dir.join("fx/sweep.jsonl"))
        .map_err(|e| e.to_string())?
        .lines()
        .map(|l| serde_json::from_str(l).map_err(|e| e.to_string()))
        .collect::<Result<_, _>>()?;
    if rows.len() != 10 {
        return Err(format!("sweep emitted {} rows", rows.len()));
    }
    let ap = |r: &serde_json::Value| r["macro_ap50"].as_f64().unwrap_or(-1.0);
    let best_fixed = rows[..9].iter().map(ap).fold(f64::NEG_INFINITY, f64::max);
    let otsu = ap(&rows[9]);

    // per-image, per-label foreground area across the fixed thresholds
    let f = synth_fixture(FixtureSpec::default()).map_err(|e| e.to_string())?;
    let configs: Vec<ExtractionConfig> = sweep_thresholds()[..9]
        .iter()
        .map(|&t| ExtractionConfig::default().with_threshold(t))
        .collect();
    for (i, record) in f.manifest().images.iter().enumerate() {
        let stack = f.stack(i).map_err(|e| e.to_string())?;
        let results = detect_image_multi(
            &stack,
            record,
            &oracle_propose(record),
            &configs,
            &DetectOptions::default(),
        )
        .map_err(|e| e.to_string())?;
        for l in 0..record.gt_labels.len() {
            let areas: Vec<usize> = results.iter().map(|r| r.foreground[l].cells).collect();
            if areas.windows(2).any(|w| w[1] > w[0]) {
                return Err(format!("{}: foreground grows with threshold: {areas:?}", record.id));
            }
        }
    }
    let msg = format!("10 rows, monotone foreground, Otsu AP50 {otsu:.4} vs best fixed {best_fixed:.4}");
    if otsu >= best_fixed - 0.05 {
        Ok(msg)
    } else {
        Err(msg)
    }
}

type Criterion = (&'static str, fn() -> Outcome);

fn main() {
    let criteria: [Criterion; 9] = [
        ("fixture end-to-end oracle", end_to_end_fixture),
        ("otsu oracle equivalence", otsu_equivalence),
        ("evaluator brute-force equivalence", evaluator_equivalence),
        ("watershed partition", watershed_partition),
        ("mlp numerics", mlp_numerics),
        ("aggregation algebra", aggregation_algebra),
        ("format round trip", format_round_trip),
        ("transcript parsers", parser_suite),
        ("threshold sweep", threshold_sweep),
    ];
    let mut failed = 0;
    for (name, check) in criteria {
        let start = Instant::now();
        let outcome = catch_unwind(check).unwrap_or_else(|_| Err("panicked".into()));
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS  {name}: {detail} ({secs:.2} s)"),
            Err(detail) => {
                failed += 1;
                println!("FAIL  {name}: {detail} ({secs:.2} s)");
            }
        }
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
