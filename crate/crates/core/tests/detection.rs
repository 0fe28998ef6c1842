use eedet::anchors::{
    decode_box, encode_box, generate_anchors, match_anchors, AnchorSet, MATCH_IOU,
};
use eedet::boxes::{BBox, GroundTruthBox};
use eedet::loss::ssd_loss;
use eedet::model::SsdOutputs;
use eedet::Tensor;
use proptest::prelude::*;

fn overlap(a: &BBox, b: &BBox) -> f64 {
    let w = (a.xmax.min(b.xmax) - a.xmin.max(b.xmin)).max(0.0);
    let h = (a.ymax.min(b.ymax) - a.ymin.max(b.ymin)).max(0.0);
    let inter = w * h;
    let area = |x: &BBox| (x.xmax - x.xmin) * (x.ymax - x.ymin);
    let union = area(a) + area(b) - inter;
    if union > 0.0 {
        inter / union
    } else {
        0.0
    }
}

/// Reference matcher: full IoU table, threshold pass, then forced best
/// anchors in ground-truth order.
fn brute_force(anchors: &AnchorSet, gts: &[GroundTruthBox]) -> (Vec<usize>, Vec<Option<usize>>) {
    let table: Vec<Vec<f64>> = anchors
        .anchors
        .iter()
        .map(|a| gts.iter().map(|g| overlap(&a.bbox(), &g.bbox)).collect())
        .collect();
    let mut labels = vec![0; table.len()];
    let mut matched = vec![None; table.len()];
    for (ai, row) in table.iter().enumerate() {
        let mut best: Option<usize> = None;
        for gi in 0..row.len() {
            if best.is_none_or(|b| row[gi] > row[b]) {
                best = Some(gi);
            }
        }
        if let Some(g) = best.filter(|&g| row[g] >= MATCH_IOU) {
            labels[ai] = gts[g].class_id;
            matched[ai] = Some(g);
        }
    }
    for gi in 0..gts.len() {
        let mut best = 0;
        for ai in 0..table.len() {
            if table[ai][gi] > table[best][gi] {
                best = ai;
            }
        }
        labels[best] = gts[gi].class_id;
        matched[best] = Some(gi);
    }
    (labels, matched)
}

fn gt_strategy() -> impl Strategy<Value = Vec<GroundTruthBox>> {
    prop::collection::vec(
        (
            0.0..0.8f64,
            0.0..0.8f64,
            0.05..0.6f64,
            0.05..0.6f64,
            1..4usize,
        ),
        0..5,
    )
    .prop_map(|v| {
        v.into_iter()
            .map(|(x, y, w, h, c)| GroundTruthBox {
                class_id: c,
                bbox: BBox::new(x, y, (x + w).min(1.0), (y + h).min(1.0)),
            })
            .collect()
    })
}

proptest! {
    #[test]
    fn matching_agrees_with_brute_force(gts in gt_strategy()) {
        let anchors = generate_anchors(
            &[(4, 4), (2, 2)],
            &[vec![0.2, 0.3], vec![0.5]],
            &[1.0, 2.0, 0.5],
            0.75,
        )
        .unwrap();
        let asg = match_anchors(&anchors, &gts, MATCH_IOU);
        let (labels, matched) = brute_force(&anchors, &gts);
        prop_assert_eq!(asg.labels, labels);
        prop_assert_eq!(asg.matched, matched);
    }

    #[test]
    fn encode_decode_round_trip(
        cx in 0.1..0.9f64, cy in 0.1..0.9f64, w in 0.02..0.9f64, h in 0.02..0.9f64,
        acx in 0.1..0.9f64, acy in 0.1..0.9f64, aw in 0.05..0.5f64, ah in 0.05..0.5f64,
    ) {
        let anchor = eedet::anchors::Anchor { cx: acx, cy: acy, w: aw, h: ah };
        let gt = BBox::from_center(cx, cy, w, h);
        let back = decode_box(&encode_box(&gt, &anchor).unwrap(), &anchor).unwrap();
        for (a, b) in [(gt.xmin, back.xmin), (gt.ymin, back.ymin), (gt.xmax, back.xmax), (gt.ymax, back.ymax)] {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn every_ground_truth_gets_an_anchor() {
    let anchors = generate_anchors(&[(3, 3)], &[vec![0.3]], &[1.0], 1.0).unwrap();
    // A box far smaller than any anchor still claims its best one.
    let gts = [GroundTruthBox {
        class_id: 2,
        bbox: BBox::new(0.48, 0.48, 0.52, 0.52),
    }];
    let asg = match_anchors(&anchors, &gts, MATCH_IOU);
    assert_eq!(asg.num_positives(), 1);
    assert_eq!(asg.labels[4], 2);
}

fn quadrant_setup() -> (AnchorSet, Vec<GroundTruthBox>) {
    // Four non-overlapping quadrant anchors; the object is exactly the first.
    let anchors = generate_anchors(&[(2, 2)], &[vec![0.5]], &[1.0], 1.0).unwrap();
    let gts = vec![GroundTruthBox {
        class_id: 1,
        bbox: anchors.anchors[0].bbox(),
    }];
    (anchors, gts)
}

#[test]
fn four_anchor_loss_by_hand() {
    let (anchors, gts) = quadrant_setup();
    let asg = match_anchors(&anchors, &gts, MATCH_IOU);
    assert_eq!(asg.labels, vec![1, 0, 0, 0]);
    let logits = [0.0, 1.0, 2.0, 0.0, 0.5, 0.5, -1.0, 1.0];
    let offsets = [
        0.5, -2.0, 0.1, 0.0, //
        9.0, 9.0, 9.0, 9.0, //
        9.0, 9.0, 9.0, 9.0, //
        9.0, 9.0, 9.0, 9.0,
    ];
    let out = SsdOutputs {
        cls_logits: Tensor::from_f64(&[1, 4, 2], &logits).unwrap(),
        box_offsets: Tensor::from_f64(&[1, 4, 4], &offsets).unwrap(),
    };
    let l = ssd_loss(&out, &anchors, &[asg], &[gts]).unwrap();
    // Target offsets are zero; smooth-L1 of (0.5, -2, 0.1, 0).
    let loc = 0.125 + 1.5 + 0.005;
    // One positive plus all three negatives (3 per positive).
    let nll = |z: [f64; 2], t: usize| -(z[t].exp() / (z[0].exp() + z[1].exp())).ln();
    let cls = nll([0.0, 1.0], 1) + nll([2.0, 0.0], 0) + nll([0.5, 0.5], 0) + nll([-1.0, 1.0], 0);
    assert_eq!(l.num_pos, 1);
    assert!((l.loc - loc).abs() < 1e-6, "{} vs {loc}", l.loc);
    assert!((l.cls - cls).abs() < 1e-6, "{} vs {cls}", l.cls);
}

#[test]
fn hard_negatives_are_the_highest_loss_ones() {
    let anchors = generate_anchors(&[(2, 4)], &[vec![0.25]], &[1.0], 1.0).unwrap();
    let gts = vec![GroundTruthBox {
        class_id: 1,
        bbox: anchors.anchors[0].bbox(),
    }];
    let asg = match_anchors(&anchors, &gts, MATCH_IOU);
    assert_eq!(asg.num_positives(), 1);
    // Negative j has background margin j, so anchors 1..=3 are the hardest.
    let mut logits = vec![0.0, 0.0];
    for j in 1..8 {
        logits.extend([j as f64, 0.0]);
    }
    let out = SsdOutputs {
        cls_logits: Tensor::from_f64(&[1, 8, 2], &logits).unwrap(),
        box_offsets: Tensor::zeros(&[1, 8, 4]),
    };
    let l = ssd_loss(&out, &anchors, &[asg], &[gts]).unwrap();
    let with_grad: Vec<usize> = l
        .d_cls
        .data()
        .chunks(2)
        .enumerate()
        .filter(|(_, g)| g[0] != 0.0)
        .map(|(j, _)| j)
        .collect();
    assert_eq!(with_grad, vec![0, 1, 2, 3]);
}

#[test]
fn loss_gradients_match_finite_differences() {
    let anchors = generate_anchors(&[(2, 3)], &[vec![0.4]], &[1.0, 2.0], 1.0).unwrap();
    let gts = vec![
        GroundTruthBox {
            class_id: 1,
            bbox: BBox::new(0.05, 0.1, 0.4, 0.45),
        },
        GroundTruthBox {
            class_id: 2,
            bbox: BBox::new(0.55, 0.5, 0.95, 0.9),
        },
    ];
    let asg = match_anchors(&anchors, &gts, MATCH_IOU);
    let a = anchors.len();
    let logits: Vec<f64> = (0..a * 3)
        .map(|i| ((i * 7 % 11) as f64 - 5.0) * 0.3)
        .collect();
    let offsets: Vec<f64> = (0..a * 4)
        .map(|i| ((i * 5 % 13) as f64 - 6.0) * 0.07)
        .collect();
    let eval = |lg: &[f64], of: &[f64]| {
        let out = SsdOutputs {
            cls_logits: Tensor::from_f64(&[1, a, 3], lg).unwrap(),
            box_offsets: Tensor::from_f64(&[1, a, 4], of).unwrap(),
        };
        ssd_loss(&out, &anchors, &[asg.clone()], &[gts.clone()]).unwrap()
    };
    let base = eval(&logits, &offsets);
    let h = 1e-2;
    for i in 0..logits.len() {
        let (mut p, mut m) = (logits.clone(), logits.clone());
        p[i] += h;
        m[i] -= h;
        let fd = (eval(&p, &offsets).cls - eval(&m, &offsets).cls) / (2.0 * h);
        let g = base.d_cls.data()[i] as f64;
        assert!((fd - g).abs() < 1e-3, "logit {i}: {fd} vs {g}");
    }
    for i in 0..offsets.len() {
        let (mut p, mut m) = (offsets.clone(), offsets.clone());
        p[i] += h;
        m[i] -= h;
        let fd = (eval(&logits, &p).loc - eval(&logits, &m).loc) / (2.0 * h);
        let g = base.d_loc.data()[i] as f64;
        assert!((fd - g).abs() < 1e-3, "offset {i}: {fd} vs {g}");
    }
}
