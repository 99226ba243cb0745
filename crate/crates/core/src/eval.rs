//! Detection metrics, inference pipelines and report export.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use bgdet_tensor::Tensor;
use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::config::{ApInterpolation, InferenceMode, RunConfig};
use crate::datagen::{BoxAnnotation, ImageSample};
use crate::detector::{predict, DetectionLossWeights, Detection, Detector};
use crate::enhancer::{generator_forward_count, Generator};
use crate::geometry::iou;
use crate::guidance::{GuidanceWeights, TotalLossWeights};
use crate::nn::stack_images;
use crate::trainer;
use crate::{Error, Result};

/// Score thresholds of the PR curves and the operating-point search.
pub const PR_THRESHOLDS: usize = 101;

pub fn pr_threshold(i: usize) -> f64 {
    i as f64 / (PR_THRESHOLDS - 1) as f64
}

/// IoU thresholds 0.50, 0.55, …, 0.95.
pub fn coco_thresholds() -> Vec<f64> {
    (0..10).map(|i| (50 + 5 * i) as f64 / 100.0).collect()
}

/// TP flags of `dets` (sorted by score, descending) against one image's
/// ground truth. Each detection takes the unconsumed same-class box with the
/// highest IoU; it is a TP when that IoU reaches `iou_thresh`.
pub fn match_detections(dets: &[Detection], gts: &[BoxAnnotation], iou_thresh: f64) -> Vec<bool> {
    let mut used = vec![false; gts.len()];
    dets.iter()
        .map(|d| {
            let mut best: Option<(usize, f64)> = None;
            for (j, g) in gts.iter().enumerate() {
                if used[j] || g.class_id != d.class_id {
                    continue;
                }
                let v = iou(&d.bbox, &g.bbox);
                if best.is_none_or(|(_, b)| v > b) {
                    best = Some((j, v));
                }
            }
            match best {
                Some((j, v)) if v >= iou_thresh => {
                    used[j] = true;
                    true
                }
                _ => false,
            }
        })
        .collect()
}

/// AP of one class from pooled detections. Ties in score keep input order.
pub fn average_precision(tp: &[bool], scores: &[f64], n_gt: usize, interp: ApInterpolation) -> f64 {
    assert_eq!(tp.len(), scores.len(), "one score per flag");
    if n_gt == 0 {
        return 0.0;
    }
    let mut order: Vec<usize> = (0..tp.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut recall = Vec::with_capacity(order.len());
    let mut precision = Vec::with_capacity(order.len());
    let mut hits = 0usize;
    for (k, &i) in order.iter().enumerate() {
        hits += tp[i] as usize;
        recall.push(hits as f64 / n_gt as f64);
        precision.push(hits as f64 / (k + 1) as f64);
    }
    // Precision envelope: best precision at this recall or beyond.
    for k in (0..precision.len().saturating_sub(1)).rev() {
        precision[k] = precision[k].max(precision[k + 1]);
    }
    match interp {
        ApInterpolation::AllPoint => {
            let mut ap = 0.0;
            let mut prev = 0.0;
            for (r, p) in recall.iter().zip(&precision) {
                if *r > prev {
                    ap += (r - prev) * p;
                    prev = *r;
                }
            }
            ap
        }
        ApInterpolation::Point101 => {
            let mut sum = 0.0;
            for t in 0..=100 {
                let r = t as f64 / 100.0;
                // Recall is non-decreasing, so the first index reaching r carries the envelope.
                if let Some(k) = recall.iter().position(|&x| x >= r) {
                    sum += precision[k];
                }
            }
            sum / 101.0
        }
    }
}

/// Pooled detections of one class over a dataset.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ClassRecords {
    pub scores: Vec<f64>,
    pub tp: Vec<bool>,
    pub n_gt: usize,
}

pub fn collect_records(preds: &[Vec<Detection>], gts: &[Vec<BoxAnnotation>], num_classes: usize, iou_thresh: f64) -> Vec<ClassRecords> {
    assert_eq!(preds.len(), gts.len(), "one prediction list per image");
    let mut out = vec![ClassRecords::default(); num_classes];
    for (dets, gt) in preds.iter().zip(gts) {
        for g in gt {
            out[g.class_id].n_gt += 1;
        }
        let mut sorted = dets.clone();
        sorted.sort_by(|a, b| b.score.total_cmp(&a.score));
        let flags = match_detections(&sorted, gt, iou_thresh);
        for (d, f) in sorted.iter().zip(flags) {
            if d.class_id < num_classes {
                out[d.class_id].scores.push(d.score);
                out[d.class_id].tp.push(f);
            }
        }
    }
    out
}

/// Per-class AP at one IoU threshold; `None` for classes without ground truth.
pub fn class_aps(
    preds: &[Vec<Detection>],
    gts: &[Vec<BoxAnnotation>],
    num_classes: usize,
    iou_thresh: f64,
    interp: ApInterpolation,
) -> Vec<Option<f64>> {
    collect_records(preds, gts, num_classes, iou_thresh)
        .iter()
        .map(|r| (r.n_gt > 0).then(|| average_precision(&r.tp, &r.scores, r.n_gt, interp)))
        .collect()
}

fn mean_defined(v: &[Option<f64>]) -> Option<f64> {
    let d: Vec<f64> = v.iter().flatten().copied().collect();
    (!d.is_empty()).then(|| d.iter().sum::<f64>() / d.len() as f64)
}

/// Mean AP over classes with ground truth, averaged over `thresholds`.
pub fn mean_ap(
    preds: &[Vec<Detection>],
    gts: &[Vec<BoxAnnotation>],
    num_classes: usize,
    thresholds: &[f64],
    interp: ApInterpolation,
) -> f64 {
    let per: Vec<f64> = thresholds
        .iter()
        .map(|&t| mean_defined(&class_aps(preds, gts, num_classes, t, interp)).unwrap_or(0.0))
        .collect();
    if per.is_empty() {
        0.0
    } else {
        per.iter().sum::<f64>() / per.len() as f64
    }
}

/// (mAP@0.5, mAP@0.5:0.95).
pub fn map_at(preds: &[Vec<Detection>], gts: &[Vec<BoxAnnotation>], num_classes: usize, interp: ApInterpolation) -> (f64, f64) {
    (
        mean_ap(preds, gts, num_classes, &[0.5], interp),
        mean_ap(preds, gts, num_classes, &coco_thresholds(), interp),
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrPoint {
    pub threshold: f64,
    pub precision: f64,
    pub recall: f64,
}

/// Precision and recall of detections scoring at least each threshold.
/// Precision is 1 when nothing passes the threshold.
pub fn pr_curve(rec: &ClassRecords) -> Vec<PrPoint> {
    (0..PR_THRESHOLDS)
        .map(|i| {
            let t = pr_threshold(i);
            let (mut n, mut hits) = (0usize, 0usize);
            for (s, f) in rec.scores.iter().zip(&rec.tp) {
                if *s >= t {
                    n += 1;
                    hits += *f as usize;
                }
            }
            PrPoint {
                threshold: t,
                precision: if n == 0 { 1.0 } else { hits as f64 / n as f64 },
                recall: if rec.n_gt == 0 { 0.0 } else { hits as f64 / rec.n_gt as f64 },
            }
        })
        .collect()
}

pub fn f1_score(p: f64, r: f64) -> f64 {
    if p + r > 0.0 {
        2.0 * p * r / (p + r)
    } else {
        0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OperatingPoint {
    pub threshold: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Class-averaged P and R at the score threshold maximising F1.
pub fn operating_point(curves: &[Vec<PrPoint>]) -> OperatingPoint {
    let mut best = OperatingPoint {
        threshold: 0.0,
        precision: 0.0,
        recall: 0.0,
        f1: 0.0,
    };
    if curves.is_empty() {
        return best;
    }
    let k = curves.len() as f64;
    for i in 0..PR_THRESHOLDS {
        let p = curves.iter().map(|c| c[i].precision).sum::<f64>() / k;
        let r = curves.iter().map(|c| c[i].recall).sum::<f64>() / k;
        let f1 = f1_score(p, r);
        if i == 0 || f1 > best.f1 {
            best = OperatingPoint {
                threshold: pr_threshold(i),
                precision: p,
                recall: r,
                f1,
            };
        }
    }
    best
}

/// Median over `iters` timed calls of 1/latency, after `warmup` untimed calls.
pub fn fps_benchmark(warmup: usize, iters: usize, mut f: impl FnMut() -> Result<()>) -> Result<f64> {
    if iters == 0 {
        return Err(Error::Config("fps benchmark needs at least one iteration".into()));
    }
    for _ in 0..warmup {
        f()?;
    }
    let mut rates = Vec::with_capacity(iters);
    for _ in 0..iters {
        let t = Instant::now();
        f()?;
        rates.push(1.0 / t.elapsed().as_secs_f64().max(1e-9));
    }
    rates.sort_by(f64::total_cmp);
    let m = rates.len() / 2;
    Ok(if rates.len() % 2 == 1 {
        rates[m]
    } else {
        (rates[m - 1] + rates[m]) / 2.0
    })
}

/// Loaded networks of one inference mode.
pub enum Pipeline {
    DetectOnly(Detector<f32>),
    Enhanced { generator: Generator<f32>, detector: Detector<f32> },
}

impl Pipeline {
    pub fn load(cfg: &RunConfig, run_dir: &Path, mode: InferenceMode) -> Result<Self> {
        Ok(match mode {
            InferenceMode::DetectOnly => Pipeline::DetectOnly(trainer::load_detection_branch(cfg, run_dir)?),
            InferenceMode::Separate | InferenceMode::Cascaded => {
                let (generator, detector) = trainer::load_enhancer_pipeline(cfg, run_dir, mode == InferenceMode::Cascaded)?;
                Pipeline::Enhanced { generator, detector }
            }
        })
    }

    pub fn predict(&self, raw: &Tensor<f32>, conf: f64, nms_iou: f64) -> Result<Vec<Vec<Detection>>> {
        match self {
            Pipeline::DetectOnly(d) => predict(d, raw, conf, nms_iou),
            Pipeline::Enhanced { generator, detector } => predict(detector, &generator.apply(raw)?, conf, nms_iou),
        }
    }
}

/// Runs a pipeline over `samples` in small batches.
pub fn predict_all(p: &Pipeline, samples: &[ImageSample], conf: f64, nms_iou: f64) -> Result<Vec<Vec<Detection>>> {
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(16) {
        let batch = stack_images::<f32>(&chunk.iter().map(|s| &s.pixels).collect::<Vec<_>>())?;
        out.extend(p.predict(&batch, conf, nms_iou)?);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub interpolation: ApInterpolation,
    pub iou_thresholds: Vec<f64>,
    pub conf_thresh: f64,
    pub nms_iou: f64,
    pub detection_weights: DetectionLossWeights,
    pub total_weights: TotalLossWeights,
    pub guidance: GuidanceWeights,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub run_id: String,
    pub mode: InferenceMode,
    pub n_images: usize,
    /// AP@0.5 of classes present in the test split.
    pub per_class_ap: BTreeMap<String, f64>,
    pub map50: f64,
    pub map5095: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub score_threshold: f64,
    /// (recall, precision) per class at every PR threshold.
    pub pr_points: BTreeMap<String, Vec<(f64, f64)>>,
    pub fps: f64,
    pub provenance: Provenance,
}

/// Everything a report needs apart from timing and provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct Metrics {
    pub per_class_ap: Vec<Option<f64>>,
    pub map50: f64,
    pub map5095: f64,
    pub curves: Vec<Option<Vec<PrPoint>>>,
    pub op: OperatingPoint,
}

pub fn compute_metrics(preds: &[Vec<Detection>], gts: &[Vec<BoxAnnotation>], num_classes: usize, interp: ApInterpolation) -> Metrics {
    let (map50, map5095) = map_at(preds, gts, num_classes, interp);
    let recs = collect_records(preds, gts, num_classes, 0.5);
    let curves: Vec<Option<Vec<PrPoint>>> = recs.iter().map(|r| (r.n_gt > 0).then(|| pr_curve(r))).collect();
    let present: Vec<Vec<PrPoint>> = curves.iter().flatten().cloned().collect();
    Metrics {
        per_class_ap: class_aps(preds, gts, num_classes, 0.5, interp),
        map50,
        map5095,
        op: operating_point(&present),
        curves,
    }
}

pub fn build_report(cfg: &RunConfig, mode: InferenceMode, n_images: usize, m: &Metrics, fps: f64) -> EvalReport {
    let names = &cfg.dataset.classes;
    EvalReport {
        run_id: cfg.run_id.clone(),
        mode,
        n_images,
        per_class_ap: names
            .iter()
            .zip(&m.per_class_ap)
            .filter_map(|(n, ap)| ap.map(|v| (n.clone(), v)))
            .collect(),
        map50: m.map50,
        map5095: m.map5095,
        precision: m.op.precision,
        recall: m.op.recall,
        f1: m.op.f1,
        score_threshold: m.op.threshold,
        pr_points: names
            .iter()
            .zip(&m.curves)
            .filter_map(|(n, c)| c.as_ref().map(|c| (n.clone(), c.iter().map(|p| (p.recall, p.precision)).collect())))
            .collect(),
        fps,
        provenance: Provenance {
            interpolation: cfg.eval.interpolation,
            iou_thresholds: coco_thresholds(),
            conf_thresh: cfg.eval.conf_thresh,
            nms_iou: cfg.eval.nms_iou,
            detection_weights: cfg.loss.detection,
            total_weights: cfg.loss.total,
            guidance: cfg.loss.guidance.clone(),
            seed: cfg.seed(),
        },
    }
}

fn sanitize(name: &str) -> String {
    name.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' }).collect()
}

const PALETTE: [[u8; 3]; 8] = [
    [31, 119, 180],
    [255, 127, 14],
    [44, 160, 44],
    [214, 39, 40],
    [148, 103, 189],
    [140, 86, 75],
    [227, 119, 194],
    [127, 127, 127],
];

fn draw_line(img: &mut RgbImage, (x0, y0): (f64, f64), (x1, y1): (f64, f64), color: Rgb<u8>) {
    let steps = ((x1 - x0).abs().max((y1 - y0).abs()).ceil() as usize).max(1);
    for s in 0..=steps {
        let t = s as f64 / steps as f64;
        let x = (x0 + (x1 - x0) * t).round();
        let y = (y0 + (y1 - y0) * t).round();
        if x >= 0.0 && y >= 0.0 && (x as u32) < img.width() && (y as u32) < img.height() {
            img.put_pixel(x as u32, y as u32, color);
        }
    }
}

/// Renders precision over recall, one colour per class, on a 0..1 grid.
pub fn render_pr_plot(curves: &[Vec<(f64, f64)>]) -> RgbImage {
    let (w, h, m) = (480u32, 360u32, 30.0);
    let mut img = RgbImage::from_pixel(w, h, Rgb([255, 255, 255]));
    let (pw, ph) = (w as f64 - 2.0 * m, h as f64 - 2.0 * m);
    let to_px = |r: f64, p: f64| (m + r * pw, h as f64 - m - p * ph);
    let grid = Rgb([225, 225, 225]);
    for i in 1..10 {
        let v = i as f64 / 10.0;
        draw_line(&mut img, to_px(v, 0.0), to_px(v, 1.0), grid);
        draw_line(&mut img, to_px(0.0, v), to_px(1.0, v), grid);
    }
    let axis = Rgb([0, 0, 0]);
    for (a, b) in [((0.0, 0.0), (1.0, 0.0)), ((0.0, 0.0), (0.0, 1.0)), ((1.0, 0.0), (1.0, 1.0)), ((0.0, 1.0), (1.0, 1.0))] {
        draw_line(&mut img, to_px(a.0, a.1), to_px(b.0, b.1), axis);
    }
    for (k, pts) in curves.iter().enumerate() {
        let c = Rgb(PALETTE[k % PALETTE.len()]);
        let mut sorted = pts.clone();
        sorted.sort_by(|a, b| a.0.total_cmp(&b.0).then(b.1.total_cmp(&a.1)));
        for win in sorted.windows(2) {
            let (a, b) = (to_px(win[0].0, win[0].1), to_px(win[1].0, win[1].1));
            draw_line(&mut img, a, b, c);
            draw_line(&mut img, (a.0, a.1 + 1.0), (b.0, b.1 + 1.0), c);
        }
    }
    img
}

/// Writes `report.json`, `pr_<class>.csv` and `pr_curve.png` into `dir`.
pub fn export_report(report: &EvalReport, dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut written = Vec::new();
    let json_path = dir.join("report.json");
    let json = serde_json::to_string_pretty(report).expect("report serializes");
    fs::write(&json_path, json).map_err(|e| Error::io(&json_path, e))?;
    written.push(json_path);
    for (name, pts) in &report.pr_points {
        let path = dir.join(format!("pr_{}.csv", sanitize(name)));
        let mut s = String::from("threshold,precision,recall\n");
        for (i, (r, p)) in pts.iter().enumerate() {
            s.push_str(&format!("{:.2},{p:.6},{r:.6}\n", pr_threshold(i)));
        }
        fs::write(&path, s).map_err(|e| Error::io(&path, e))?;
        written.push(path);
    }
    let png = dir.join("pr_curve.png");
    let curves: Vec<Vec<(f64, f64)>> = report.pr_points.values().cloned().collect();
    render_pr_plot(&curves).save(&png).map_err(|e| Error::artifact(&png, e.to_string()))?;
    written.push(png);
    Ok(written)
}

pub fn eval_dir(run_dir: &Path, mode: InferenceMode) -> PathBuf {
    run_dir.join("eval").join(mode.as_str())
}

/// Evaluates `mode` on the test split of `cfg`, using checkpoints under `run_dir`.
pub fn evaluate(cfg: &RunConfig, run_dir: &Path, mode: InferenceMode, with_fps: bool) -> Result<EvalReport> {
    let pipeline = Pipeline::load(cfg, run_dir, mode)?;
    let test = trainer::load_test_data(cfg)?;
    let before = generator_forward_count();
    let preds = predict_all(&pipeline, &test, cfg.eval.conf_thresh, cfg.eval.nms_iou)?;
    let gts: Vec<Vec<BoxAnnotation>> = test.iter().map(|s| s.boxes.clone()).collect();
    let metrics = compute_metrics(&preds, &gts, cfg.dataset.classes.len(), cfg.eval.interpolation);
    let fps = if with_fps {
        let one = stack_images::<f32>(&[&test[0].pixels])?;
        fps_benchmark(cfg.eval.fps_warmup, cfg.eval.fps_iters, || {
            pipeline.predict(&one, cfg.eval.conf_thresh, cfg.eval.nms_iou).map(|_| ())
        })?
    } else {
        0.0
    };
    if mode == InferenceMode::DetectOnly && generator_forward_count() != before {
        return Err(Error::Contract("detect-only inference ran the enhancer".into()));
    }
    Ok(build_report(cfg, mode, test.len(), &metrics, fps))
}
