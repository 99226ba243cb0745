//! Metric pipeline against an independent brute-force implementation, plus
//! AP properties and report export.

use bgdet_core::config::ApInterpolation;
use bgdet_core::datagen::BoxAnnotation;
use bgdet_core::detector::Detection;
use bgdet_core::eval::{
    average_precision, compute_metrics, export_report, map_at, match_detections, render_pr_plot, EvalReport, PR_THRESHOLDS,
};
use bgdet_core::geometry::BBox;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const SCENES: usize = 120;

fn brute_iou(a: &BBox, b: &BBox) -> f64 {
    let (ax1, ay1, ax2, ay2) = (a.cx - a.w / 2.0, a.cy - a.h / 2.0, a.cx + a.w / 2.0, a.cy + a.h / 2.0);
    let (bx1, by1, bx2, by2) = (b.cx - b.w / 2.0, b.cy - b.h / 2.0, b.cx + b.w / 2.0, b.cy + b.h / 2.0);
    let iw = (ax2.min(bx2) - ax1.max(bx1)).max(0.0);
    let ih = (ay2.min(by2) - ay1.max(by1)).max(0.0);
    let inter = iw * ih;
    let union = (ax2 - ax1) * (ay2 - ay1) + (bx2 - bx1) * (by2 - by1) - inter;
    if union > 0.0 {
        inter / union
    } else {
        0.0
    }
}

/// O(n²) AP: per rank, the envelope is recomputed by scanning every later rank.
fn brute_ap(mut recs: Vec<(f64, bool)>, n_gt: usize) -> f64 {
    if n_gt == 0 {
        return 0.0;
    }
    recs.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
    let n = recs.len();
    let prec_at = |k: usize| recs[..=k].iter().filter(|r| r.1).count() as f64 / (k + 1) as f64;
    let rec_at = |k: usize| recs[..=k].iter().filter(|r| r.1).count() as f64 / n_gt as f64;
    let mut ap = 0.0;
    for k in 0..n {
        let prev = if k == 0 { 0.0 } else { rec_at(k - 1) };
        let dr = rec_at(k) - prev;
        if dr > 0.0 {
            let env = (k..n).map(prec_at).fold(0.0, f64::max);
            ap += dr * env;
        }
    }
    ap
}

fn brute_map(preds: &[Vec<Detection>], gts: &[Vec<BoxAnnotation>], nc: usize, thr: f64) -> f64 {
    let mut aps = Vec::new();
    for c in 0..nc {
        let n_gt = gts.iter().flatten().filter(|g| g.class_id == c).count();
        if n_gt == 0 {
            continue;
        }
        let mut recs = Vec::new();
        for (dets, gt) in preds.iter().zip(gts) {
            let mut ds: Vec<&Detection> = dets.iter().filter(|d| d.class_id == c).collect();
            ds.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap());
            let mut used = vec![false; gt.len()];
            for d in ds {
                let mut best = (usize::MAX, -1.0);
                for (j, g) in gt.iter().enumerate() {
                    if g.class_id == c && !used[j] {
                        let v = brute_iou(&d.bbox, &g.bbox);
                        if v > best.1 {
                            best = (j, v);
                        }
                    }
                }
                let tp = best.0 != usize::MAX && best.1 >= thr;
                if tp {
                    used[best.0] = true;
                }
                recs.push((d.score, tp));
            }
        }
        aps.push(brute_ap(recs, n_gt));
    }
    if aps.is_empty() {
        0.0
    } else {
        aps.iter().sum::<f64>() / aps.len() as f64
    }
}

fn random_box(rng: &mut ChaCha8Rng) -> BBox {
    let w = rng.random_range(0.05..0.4);
    let h = rng.random_range(0.05..0.4);
    BBox::new(rng.random_range(0.2..0.8), rng.random_range(0.2..0.8), w, h)
}

/// A tiny scene: ground truth plus jittered detections and clutter, with
/// distinct scores.
fn random_scene(rng: &mut ChaCha8Rng, images: usize, nc: usize) -> (Vec<Vec<Detection>>, Vec<Vec<BoxAnnotation>>) {
    let mut preds = Vec::new();
    let mut gts = Vec::new();
    let mut score_pool: Vec<f64> = (0..1000).map(|i| (i as f64 + 0.5) / 1000.0).collect();
    for _ in 0..images {
        let gt: Vec<BoxAnnotation> = (0..rng.random_range(0..4))
            .map(|_| BoxAnnotation {
                class_id: rng.random_range(0..nc),
                bbox: random_box(rng),
            })
            .collect();
        let mut dets = Vec::new();
        for g in &gt {
            for _ in 0..rng.random_range(0..3) {
                let cx = g.bbox.cx + rng.random_range(-0.05..0.05);
                let cy = g.bbox.cy + rng.random_range(-0.05..0.05);
                let b = BBox::new(cx, cy, g.bbox.w * rng.random_range(0.7..1.3), g.bbox.h * rng.random_range(0.7..1.3));
                let class_id = if rng.random_bool(0.85) { g.class_id } else { rng.random_range(0..nc) };
                dets.push((class_id, b));
            }
        }
        for _ in 0..rng.random_range(0..3) {
            dets.push((rng.random_range(0..nc), random_box(rng)));
        }
        let dets = dets
            .into_iter()
            .map(|(class_id, bbox)| {
                let k = rng.random_range(0..score_pool.len());
                Detection {
                    class_id,
                    score: score_pool.swap_remove(k),
                    bbox,
                }
            })
            .collect();
        preds.push(dets);
        gts.push(gt);
    }
    (preds, gts)
}

#[test]
fn metrics_match_brute_force_on_random_scenes() {
    check_metrics_match_brute_force_on_random_scenes();
}

pub fn check_metrics_match_brute_force_on_random_scenes() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let thresholds: Vec<f64> = (0..10).map(|i| (50 + 5 * i) as f64 / 100.0).collect();
    for scene in 0..SCENES {
        let nc = rng.random_range(1..4);
        let images = rng.random_range(1..6);
        let (preds, gts) = random_scene(&mut rng, images, nc);
        let (m50, m5095) = map_at(&preds, &gts, nc, ApInterpolation::AllPoint);
        let o50 = brute_map(&preds, &gts, nc, 0.5);
        let o5095 = thresholds.iter().map(|&t| brute_map(&preds, &gts, nc, t)).sum::<f64>() / thresholds.len() as f64;
        assert!((m50 - o50).abs() <= 1e-9, "scene {scene}: mAP@0.5 {m50} vs {o50}");
        assert!((m5095 - o5095).abs() <= 1e-9, "scene {scene}: mAP@0.5:0.95 {m5095} vs {o5095}");
        assert!(m50 >= m5095 - 1e-12, "scene {scene}: dominance");
    }
}

#[test]
fn perfect_detector_scores_one() {
    check_perfect_detector_scores_one();
}

pub fn check_perfect_detector_scores_one() {
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    for _ in 0..20 {
        let (_, gts) = random_scene(&mut rng, 4, 3);
        let preds: Vec<Vec<Detection>> = gts
            .iter()
            .map(|g| {
                g.iter()
                    .enumerate()
                    .map(|(i, b)| Detection {
                        class_id: b.class_id,
                        score: 0.9 - i as f64 * 0.01,
                        bbox: b.bbox,
                    })
                    .collect()
            })
            .collect();
        if gts.iter().all(Vec::is_empty) {
            continue;
        }
        for interp in [ApInterpolation::AllPoint, ApInterpolation::Point101] {
            assert_eq!(map_at(&preds, &gts, 3, interp), (1.0, 1.0));
        }
    }
}

#[test]
fn matching_edge_cases() {
    check_matching_edge_cases();
}

pub fn check_matching_edge_cases() {
    let b = BBox::new(0.5, 0.5, 0.2, 0.2);
    let gt = [BoxAnnotation { class_id: 0, bbox: b }];
    let d = |s| Detection {
        class_id: 0,
        score: s,
        bbox: b,
    };
    assert_eq!(match_detections(&[d(0.9)], &gt, 0.5), [true]);
    assert_eq!(match_detections(&[d(0.9), d(0.5)], &gt, 0.5), [true, false]);
    assert_eq!(match_detections(&[d(0.9)], &[], 0.5), [false]);
}

#[test]
fn report_export_roundtrips() {
    check_report_export_roundtrips();
}

pub fn check_report_export_roundtrips() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let (preds, gts) = random_scene(&mut rng, 8, 2);
    let m = compute_metrics(&preds, &gts, 2, ApInterpolation::AllPoint);
    let cfg = bgdet_core::config::RunConfig::default();
    let mut cfg = cfg;
    cfg.dataset.classes = vec!["a b".into(), "c".into()];
    let report = bgdet_core::eval::build_report(&cfg, bgdet_core::config::InferenceMode::DetectOnly, 8, &m, 12.5);
    let json = serde_json::to_string(&report).unwrap();
    let back: EvalReport = serde_json::from_str(&json).unwrap();
    assert_eq!(back, report);
    assert!((0.0..=1.0).contains(&report.f1));
    let expect_f1 = if report.precision + report.recall > 0.0 {
        2.0 * report.precision * report.recall / (report.precision + report.recall)
    } else {
        0.0
    };
    assert!((report.f1 - expect_f1).abs() < 1e-12);

    let dir = tempfile::tempdir().unwrap();
    let files = export_report(&report, dir.path()).unwrap();
    assert!(files.iter().all(|f| f.exists()));
    for name in report.pr_points.keys() {
        let safe: String = name.chars().map(|c| if c.is_ascii_alphanumeric() { c } else { '_' }).collect();
        let csv = std::fs::read_to_string(dir.path().join(format!("pr_{safe}.csv"))).unwrap();
        let mut lines = csv.lines();
        assert_eq!(lines.next(), Some("threshold,precision,recall"));
        assert_eq!(lines.count(), PR_THRESHOLDS);
    }
    let png = std::fs::read(dir.path().join("pr_curve.png")).unwrap();
    assert!(!png.is_empty());
    let again = tempfile::tempdir().unwrap();
    export_report(&report, again.path()).unwrap();
    assert_eq!(std::fs::read(again.path().join("pr_curve.png")).unwrap(), png);
    let curves: Vec<Vec<(f64, f64)>> = report.pr_points.values().cloned().collect();
    assert_eq!(render_pr_plot(&curves), render_pr_plot(&curves));
}

fn records() -> impl Strategy<Value = (Vec<(f64, bool)>, usize)> {
    (prop::collection::vec((0.0f64..1.0, any::<bool>()), 0..30), 0usize..10).prop_map(|(mut r, extra)| {
        let tp = r.iter().filter(|x| x.1).count();
        // Distinct scores keep the ranking well defined.
        for (i, x) in r.iter_mut().enumerate() {
            x.0 = x.0 * 0.5 + i as f64 * 1e-3;
        }
        (r, tp + extra)
    })
}

proptest! {
    #[test]
    fn ap_is_invariant_to_monotone_rescaling((recs, n_gt) in records()) {
        let tp: Vec<bool> = recs.iter().map(|r| r.1).collect();
        let s: Vec<f64> = recs.iter().map(|r| r.0).collect();
        let s2: Vec<f64> = s.iter().map(|v| (3.0 * v + 1.0).powi(3)).collect();
        for interp in [ApInterpolation::AllPoint, ApInterpolation::Point101] {
            prop_assert_eq!(average_precision(&tp, &s, n_gt, interp), average_precision(&tp, &s2, n_gt, interp));
        }
    }

    #[test]
    fn low_scored_false_positive_never_raises_ap((recs, n_gt) in records()) {
        let mut tp: Vec<bool> = recs.iter().map(|r| r.1).collect();
        let mut s: Vec<f64> = recs.iter().map(|r| r.0).collect();
        let before = average_precision(&tp, &s, n_gt, ApInterpolation::AllPoint);
        tp.push(false);
        s.push(-1.0);
        prop_assert!(average_precision(&tp, &s, n_gt, ApInterpolation::AllPoint) <= before);
    }

    #[test]
    fn ap_stays_in_unit_interval((recs, n_gt) in records()) {
        let tp: Vec<bool> = recs.iter().map(|r| r.1).collect();
        let s: Vec<f64> = recs.iter().map(|r| r.0).collect();
        for interp in [ApInterpolation::AllPoint, ApInterpolation::Point101] {
            let ap = average_precision(&tp, &s, n_gt, interp);
            prop_assert!((0.0..=1.0).contains(&ap));
        }
    }
}
