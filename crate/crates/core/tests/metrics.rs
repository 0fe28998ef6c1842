use eedet::boxes::{BBox, Detection, GroundTruthBox};
use eedet::metrics::{
    average_precision, ee_classification_metrics, mean_average_precision, AP_IOU,
};
use proptest::prelude::*;

fn unit(x: f64) -> BBox {
    BBox::new(x, 0.0, x + 0.1, 0.1)
}

#[test]
fn precision_recall_by_hand() {
    // Three objects over two images; ranked hits T F T F T.
    let gts = [(0, unit(0.0)), (0, unit(0.5)), (1, unit(0.2))];
    let dets = [
        (0, 0.9, unit(0.0)),
        (0, 0.8, unit(0.8)),
        (1, 0.7, unit(0.2)),
        (1, 0.6, unit(0.6)),
        (0, 0.5, unit(0.5)),
    ];
    let (ap, c) = average_precision(&dets, &gts, AP_IOU);
    // Envelope precision at recall 1/3, 2/3, 1 is 1, 2/3, 3/5.
    let expect = (1.0 + 2.0 / 3.0 + 0.6) / 3.0;
    assert!((ap.unwrap() - expect).abs() < 1e-12);
    assert_eq!((c.tp, c.fp, c.fn_, c.gt), (3, 2, 0, 3));
}

#[test]
fn duplicates_count_as_false_positives() {
    let gts = [(0, unit(0.0))];
    let dets = [(0, 0.9, unit(0.0)), (0, 0.8, unit(0.01))];
    let (ap, c) = average_precision(&dets, &gts, AP_IOU);
    assert_eq!(ap, Some(1.0));
    assert_eq!((c.tp, c.fp), (1, 1));
}

#[test]
fn detections_in_other_images_never_match() {
    let gts = [(1, unit(0.0))];
    let dets = [(0, 0.9, unit(0.0))];
    let (ap, c) = average_precision(&dets, &gts, AP_IOU);
    assert_eq!(ap, Some(0.0));
    assert_eq!((c.tp, c.fp, c.fn_), (0, 1, 1));
}

#[test]
fn classes_without_ground_truth_are_excluded() {
    let gts = vec![vec![GroundTruthBox {
        class_id: 1,
        bbox: unit(0.0),
    }]];
    let dets = vec![vec![
        Detection {
            class_id: 1,
            score: 0.9,
            bbox: unit(0.0),
        },
        Detection {
            class_id: 2,
            score: 0.8,
            bbox: unit(0.5),
        },
    ]];
    let (aps, map, _) = mean_average_precision(&dets, &gts, 3);
    assert_eq!(aps, vec![Some(1.0), None]);
    assert_eq!(map, 1.0);
}

#[test]
fn confusion_on_ten_images() {
    let p = [0.95, 0.9, 0.7, 0.6, 0.4, 0.85, 0.3, 0.2, 0.75, 0.1];
    let y = [1, 1, 1, 0, 1, 1, 0, 0, 0, 0];
    let m = ee_classification_metrics(&p, &y, 0.7);
    // Predicted empty: 0.95, 0.9, 0.7, 0.85, 0.75 -> TP 4, FP 1, FN 1, TN 4.
    assert!((m.accuracy - 0.8).abs() < 1e-12);
    assert!((m.skip_rate - 0.5).abs() < 1e-12);
    assert!((m.fpr - 0.2).abs() < 1e-12);
}

fn ranked_case() -> impl Strategy<Value = (Vec<(usize, f64, BBox)>, Vec<(usize, BBox)>)> {
    let gts = prop::collection::vec((0..3usize, 0..5usize), 1..8).prop_map(|v| {
        let mut g: Vec<(usize, BBox)> = v
            .into_iter()
            .map(|(i, s)| (i, unit(s as f64 * 0.2)))
            .collect();
        g.sort_by(|a, b| (a.0, a.1.xmin).partial_cmp(&(b.0, b.1.xmin)).unwrap());
        g.dedup_by(|a, b| a.0 == b.0 && a.1 == b.1);
        g
    });
    let dets = prop::collection::vec((0..3usize, 0.0..1.0f64, 0..5usize), 0..12).prop_map(|v| {
        v.into_iter()
            .map(|(i, s, x)| (i, s, unit(x as f64 * 0.2)))
            .collect()
    });
    (dets, gts)
}

proptest! {
    #[test]
    fn ap_depends_only_on_score_order((dets, gts) in ranked_case()) {
        let (ap, _) = average_precision(&dets, &gts, AP_IOU);
        let squashed: Vec<_> = dets.iter().map(|&(i, s, b)| (i, (3.0 * s).exp() - 7.0, b)).collect();
        let (ap2, _) = average_precision(&squashed, &gts, AP_IOU);
        prop_assert_eq!(ap, ap2);
        let ap = ap.unwrap();
        prop_assert!((0.0..=1.0).contains(&ap));
    }

    #[test]
    fn perfect_detections_score_one((_, gts) in ranked_case()) {
        let dets: Vec<_> = gts.iter().enumerate().map(|(k, &(i, b))| (i, 1.0 - k as f64 * 0.01, b)).collect();
        prop_assert_eq!(average_precision(&dets, &gts, AP_IOU).0, Some(1.0));
    }

    #[test]
    fn metric_rates_are_consistent(
        pairs in prop::collection::vec((0.0..1.0f64, 0u8..2), 1..50), tau in 0.5..1.0f64
    ) {
        let (p, y): (Vec<f64>, Vec<u8>) = pairs.into_iter().unzip();
        let m = ee_classification_metrics(&p, &y, tau);
        let skipped = p.iter().filter(|&&v| v >= tau).count();
        prop_assert!((m.skip_rate - skipped as f64 / p.len() as f64).abs() < 1e-12);
        prop_assert!((0.0..=1.0).contains(&m.accuracy) && (0.0..=1.0).contains(&m.fpr));
    }
}
