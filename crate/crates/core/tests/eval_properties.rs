use nada_core::dataio::{DatasetManifest, GtBox, ImageRecord};
use nada_core::evalkit::{average_precision, classification_metrics, detection_ap50, Detection};
use nada_core::geometry::BBox;
use nada_core::proposer::{Proposal, ProposalSet};
use proptest::prelude::*;

fn arb_box() -> impl Strategy<Value = BBox> {
    (0u8..20, 0u8..20, 1u8..10, 1u8..10).prop_map(|(x, y, w, h)| {
        BBox::new(x as f64, y as f64, (x + w) as f64, (y + h) as f64).unwrap()
    })
}

const CLASSES: [&str; 3] = ["a", "b", "c"];

fn arb_instance() -> impl Strategy<Value = (DatasetManifest, Vec<Detection>)> {
    let gts = prop::collection::vec((0usize..4, 0usize..3, arb_box()), 0..8);
    let dets = prop::collection::vec((0usize..4, 0usize..3, arb_box(), 0usize..1000), 0..10);
    (gts, dets).prop_map(|(gts, dets)| {
        let mut images: Vec<ImageRecord> = (0..4)
            .map(|i| ImageRecord {
                id: format!("im{i}"),
                width: 40,
                height: 40,
                gt_labels: vec![],
                gt_boxes: vec![],
            })
            .collect();
        for (i, c, b) in gts {
            let label = CLASSES[c].to_string();
            if !images[i].gt_labels.contains(&label) {
                images[i].gt_labels.push(label.clone());
            }
            images[i].gt_boxes.push(GtBox { label, bbox: b });
        }
        let manifest = DatasetManifest {
            name: "toy".into(),
            classes: CLASSES.iter().map(|s| s.to_string()).collect(),
            images,
        };
        // distinct scores so the ranking has no ties
        let dets = dets
            .into_iter()
            .enumerate()
            .map(|(n, (i, c, b, s))| Detection {
                image_id: format!("im{i}"),
                label: CLASSES[c].into(),
                bbox: b,
                score: (s * 16 + n) as f64 / 20000.0,
            })
            .collect();
        (manifest, dets)
    })
}

proptest! {
    #[test]
    fn ap_lies_in_unit_interval(flags in prop::collection::vec(any::<bool>(), 0..30), extra in 0usize..5) {
        let tp = flags.iter().filter(|&&f| f).count();
        if let Some(ap) = average_precision(&flags, tp + extra) {
            prop_assert!((0.0..=1.0).contains(&ap));
        }
    }

    #[test]
    fn trailing_false_positive_never_helps(flags in prop::collection::vec(any::<bool>(), 0..30), extra in 0usize..5) {
        let n = flags.iter().filter(|&&f| f).count() + extra;
        let mut more = flags.clone();
        more.push(false);
        let (a, b) = (average_precision(&flags, n), average_precision(&more, n));
        prop_assert!(b.unwrap_or(0.0) <= a.unwrap_or(0.0));
    }

    #[test]
    fn ap_depends_only_on_ranking((m, dets) in arb_instance()) {
        let base = detection_ap50(&dets, &m).unwrap();
        let mapped: Vec<Detection> = dets
            .iter()
            .map(|d| Detection { score: d.score.powi(3) * 0.5 + 0.1, ..d.clone() })
            .collect();
        prop_assert_eq!(&detection_ap50(&mapped, &m).unwrap().per_class, &base.per_class);
    }

    #[test]
    fn input_order_does_not_matter((m, dets) in arb_instance(), rot in 0usize..10) {
        let base = detection_ap50(&dets, &m).unwrap();
        let mut shuffled = dets.clone();
        shuffled.reverse();
        if !shuffled.is_empty() {
            let k = rot % shuffled.len();
            shuffled.rotate_left(k);
        }
        prop_assert_eq!(detection_ap50(&shuffled, &m).unwrap(), base);
    }

    #[test]
    fn macro_is_the_mean_of_reported_classes((m, dets) in arb_instance()) {
        let r = detection_ap50(&dets, &m).unwrap();
        let present: Vec<f64> = r.per_class.iter().filter(|c| c.num_gt > 0).map(|c| c.ap50.unwrap()).collect();
        let mean = if present.is_empty() { 0.0 } else { present.iter().sum::<f64>() / present.len() as f64 };
        prop_assert!((r.macro_ap50 - mean).abs() <= 1e-12);
        prop_assert!((0.0..=1.0).contains(&r.macro_ap50));
    }

    #[test]
    fn classification_metrics_are_bounded(
        (m, _) in arb_instance(),
        picks in prop::collection::vec((0usize..4, 0usize..3, 0.0f64..=1.0), 0..12),
    ) {
        let mut sets: Vec<ProposalSet> = (0..4).map(|i| ProposalSet::empty(format!("im{i}"))).collect();
        for (i, c, s) in picks {
            if sets[i].score(CLASSES[c]).is_none() {
                sets[i].proposals.push(Proposal { label: CLASSES[c].into(), score: s });
            }
        }
        let r = classification_metrics(&sets, &m).unwrap();
        for c in &r.per_class {
            for v in [c.precision, c.recall, c.f1, c.ap.unwrap_or(0.0)] {
                prop_assert!((0.0..=1.0).contains(&v));
            }
        }
        let present: Vec<f64> = r.per_class.iter().filter(|c| c.positives > 0).map(|c| c.f1).collect();
        let mean = if present.is_empty() { 0.0 } else { present.iter().sum::<f64>() / present.len() as f64 };
        prop_assert!((r.macro_f1 - mean).abs() <= 1e-12);
    }
}
