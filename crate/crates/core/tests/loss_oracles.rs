//! Every loss against a plain scalar-loop reimplementation on random inputs.

use std::f64::consts::PI;

use bgdet_core::datagen::BoxAnnotation;
use bgdet_core::detector::{detection_loss, DetectionLossWeights, HeadLayout, LocLoss, ANCHORS_PER_SCALE, STRIDES};
use bgdet_core::enhancer::{
    adversarial_loss, cycle_image_loss, perceptual_cycle_loss, total_enhancer_loss, total_enhancer_loss_var, CycleVars,
    EnhancerLossParts, EnhancerLossWeights, PerceptualExtractor, LOG_EPS,
};
use bgdet_core::geometry::BBox;
use bgdet_core::guidance::{
    feature_consistency_loss, full_guided_loss, total_loss, total_loss_var, GuidanceWeights, Normalization, TapLevel,
    TotalLossWeights,
};
use bgdet_tensor::{Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const CASES: usize = 50;
pub const TOL: f64 = 1e-5;

fn rand_vec(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_vec(shape, rand_vec(rng, n, lo, hi)).unwrap()
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (mut s, mut n) = (0.0, 0usize);
    for x in v {
        s += x;
        n += 1;
    }
    s / n as f64
}

fn close(a: f64, b: f64, what: &str) {
    assert!((a - b).abs() <= TOL, "{what}: {a} vs oracle {b}");
}

#[test]
fn adversarial_loss_matches_loop() {
    check_adversarial_loss_matches_loop();
}

pub fn check_adversarial_loss_matches_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for case in 0..CASES {
        let n = rng.random_range(1..4);
        let side = rng.random_range(1..5);
        // Occasionally saturated scores exercise the clamp.
        let (lo, hi) = if case % 5 == 0 { (0.0, 1.0) } else { (0.01, 0.99) };
        let real = rand_tensor(&mut rng, &[n, 1, side, side], lo, hi);
        let fake = rand_tensor(&mut rng, &[n, 1, side, side], lo, hi);
        let oracle = mean(real.data().iter().map(|&d| d.clamp(LOG_EPS, 1.0 - LOG_EPS).ln()))
            + mean(fake.data().iter().map(|&d| (1.0 - d).clamp(LOG_EPS, 1.0 - LOG_EPS).ln()));
        let mut tape = Tape::<f64>::new();
        let r = tape.constant(real);
        let f = tape.constant(fake);
        let l = adversarial_loss(&mut tape, r, f).unwrap();
        close(tape.item(l), oracle, "adversarial");
    }
}

fn cycle_setup(tape: &mut Tape<f64>, rng: &mut ChaCha8Rng) -> (Var, Var, CycleVars, [Tensor<f64>; 4]) {
    let shape = [rng.random_range(1..3), 3, 8, 8];
    let ts = [0, 1, 2, 3].map(|_| rand_tensor(rng, &shape, 0.0, 1.0));
    let [xu, ru, xa, ra] = ts.clone();
    let x_u = tape.constant(xu);
    let x_a = tape.constant(xa);
    let rec_u = tape.constant(ru);
    let rec_a = tape.constant(ra);
    let c = CycleVars {
        fake_a: x_a,
        rec_u,
        fake_u: x_u,
        rec_a,
    };
    (x_u, x_a, c, ts)
}

#[test]
fn cycle_image_loss_matches_loop() {
    check_cycle_image_loss_matches_loop();
}

pub fn check_cycle_image_loss_matches_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..CASES {
        let mut tape = Tape::<f64>::new();
        let (x_u, x_a, c, [xu, ru, xa, ra]) = cycle_setup(&mut tape, &mut rng);
        let oracle = mean(xu.data().iter().zip(ru.data()).map(|(a, b)| (a - b).abs()))
            + mean(xa.data().iter().zip(ra.data()).map(|(a, b)| (a - b).abs()));
        let l = cycle_image_loss(&mut tape, x_u, x_a, &c).unwrap();
        close(tape.item(l), oracle, "cycle");
    }
}

#[test]
fn perceptual_cycle_loss_matches_loop() {
    check_perceptual_cycle_loss_matches_loop();
}

pub fn check_perceptual_cycle_loss_matches_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let phi = PerceptualExtractor::<f64>::new();
    for _ in 0..CASES {
        let mut tape = Tape::<f64>::new();
        let b = phi.store.bind(&mut tape, false);
        let (x_u, x_a, c, _) = cycle_setup(&mut tape, &mut rng);
        let l = perceptual_cycle_loss(&mut tape, &phi, &b, x_u, x_a, &c).unwrap();
        let got = tape.item(l);
        let mut oracle = 0.0;
        for (orig, rec) in [(x_u, c.rec_u), (x_a, c.rec_a)] {
            let fo = phi.forward(&mut tape, &b, orig).unwrap();
            let fr = phi.forward(&mut tape, &b, rec).unwrap();
            for (p, q) in fo.iter().zip(&fr) {
                let (p, q) = (tape.value(*p).data(), tape.value(*q).data());
                oracle += mean(p.iter().zip(q).map(|(a, b)| (a - b) * (a - b)));
            }
        }
        close(got, oracle, "perceptual");
    }
}

#[test]
fn total_enhancer_loss_matches_arithmetic() {
    check_total_enhancer_loss_matches_arithmetic();
}

pub fn check_total_enhancer_loss_matches_arithmetic() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..CASES {
        let v = rand_vec(&mut rng, 4, -5.0, 5.0);
        let w = EnhancerLossWeights {
            lambda1: rng.random_range(0.0..2.0),
            lambda2: rng.random_range(0.0..2.0),
        };
        let parts = EnhancerLossParts {
            gan_u2a: v[0],
            gan_a2u: v[1],
            cycle: v[2].abs(),
            perceptual: v[3].abs(),
        };
        let oracle = v[0] + v[1] + w.lambda1 * v[2].abs() + w.lambda2 * v[3].abs();
        close(total_enhancer_loss(&parts, &w), oracle, "enhancer total");
        let mut tape = Tape::<f64>::new();
        let vars = [v[0], v[1], v[2].abs(), v[3].abs()].map(|x| tape.constant(Tensor::scalar(x)));
        let l = total_enhancer_loss_var(&mut tape, vars[0], vars[1], vars[2], vars[3], &w).unwrap();
        close(tape.item(l), oracle, "enhancer total (tape)");
    }
    // Default weights on a fixed set of parts.
    let parts = EnhancerLossParts {
        gan_u2a: -1.0,
        gan_a2u: -1.0,
        cycle: 100.0,
        perceptual: 0.5,
    };
    close(total_enhancer_loss(&parts, &EnhancerLossWeights::default()), -1.495, "defaults");
}

// ----------------------------------------------------------- detection

fn sig(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn bce(x: f64, t: f64) -> f64 {
    -(t * sig(x).ln() + (1.0 - t) * (1.0 - sig(x)).ln())
}

fn ciou(p: [f64; 4], t: [f64; 4]) -> f64 {
    let eps = 1e-7;
    let (px1, py1, px2, py2) = (p[0] - p[2] / 2.0, p[1] - p[3] / 2.0, p[0] + p[2] / 2.0, p[1] + p[3] / 2.0);
    let (tx1, ty1, tx2, ty2) = (t[0] - t[2] / 2.0, t[1] - t[3] / 2.0, t[0] + t[2] / 2.0, t[1] + t[3] / 2.0);
    let inter = (px2.min(tx2) - px1.max(tx1)).max(0.0) * (py2.min(ty2) - py1.max(ty1)).max(0.0);
    let iou = inter / (p[2] * p[3] + t[2] * t[3] - inter + eps);
    let cw = px2.max(tx2) - px1.min(tx1);
    let ch = py2.max(ty2) - py1.min(ty1);
    let rho2 = (p[0] - t[0]).powi(2) + (p[1] - t[1]).powi(2);
    let v = 4.0 / (PI * PI) * ((t[2] / t[3]).atan() - (p[2] / p[3]).atan()).powi(2);
    let alpha = v / (v - iou + 1.0 + eps);
    iou - (rho2 / (cw * cw + ch * ch + eps) + alpha * v)
}

struct Heads {
    data: [Vec<f64>; 3],
    n: usize,
    nc: usize,
    size: usize,
}

impl Heads {
    fn at(&self, s: usize, n: usize, a: usize, k: usize, gy: usize, gx: usize) -> f64 {
        let g = self.size / STRIDES[s];
        let ch = ANCHORS_PER_SCALE * (5 + self.nc);
        assert!(n < self.n);
        self.data[s][((n * ch + a * (5 + self.nc) + k) * g + gy) * g + gx]
    }
}

fn detection_oracle(h: &Heads, layout: &HeadLayout, targets: &[Vec<BoxAnnotation>], w: &DetectionLossWeights) -> [f64; 4] {
    let size = h.size as f64;
    let mut positive = std::collections::HashSet::new();
    let (mut loc, mut cls, mut m) = (0.0, 0.0, 0usize);
    for (n, boxes) in targets.iter().enumerate() {
        for b in boxes {
            let t = [b.bbox.cx * size, b.bbox.cy * size, b.bbox.w * size, b.bbox.h * size];
            for s in 0..3 {
                let st = STRIDES[s] as f64;
                let g = h.size / STRIDES[s];
                let gx = ((t[0] / st) as usize).min(g - 1);
                let gy = ((t[1] / st) as usize).min(g - 1);
                for a in 0..ANCHORS_PER_SCALE {
                    let [aw, ah] = layout.anchors[s][a];
                    let r = [t[2] / aw, aw / t[2], t[3] / ah, ah / t[3]].into_iter().fold(0.0, f64::max);
                    if r >= layout.anchor_ratio {
                        continue;
                    }
                    positive.insert((s, n, a, gy, gx));
                    let raw = |k| h.at(s, n, a, k, gy, gx);
                    let p = [
                        (2.0 * sig(raw(0)) - 0.5 + gx as f64) * st,
                        (2.0 * sig(raw(1)) - 0.5 + gy as f64) * st,
                        (2.0 * sig(raw(2))).powi(2) * aw,
                        (2.0 * sig(raw(3))).powi(2) * ah,
                    ];
                    loc += 1.0 - ciou(p, t);
                    for c in 0..h.nc {
                        cls += bce(raw(5 + c), (c == b.class_id) as u8 as f64);
                    }
                    m += 1;
                }
            }
        }
    }
    let (mut obj, mut slots) = (0.0, 0usize);
    for s in 0..3 {
        let g = h.size / STRIDES[s];
        for n in 0..h.n {
            for a in 0..ANCHORS_PER_SCALE {
                for gy in 0..g {
                    for gx in 0..g {
                        let t = positive.contains(&(s, n, a, gy, gx)) as u8 as f64;
                        obj += bce(h.at(s, n, a, 4, gy, gx), t);
                        slots += 1;
                    }
                }
            }
        }
    }
    obj /= slots as f64;
    if m > 0 {
        loc /= m as f64;
        cls /= (m * h.nc) as f64;
    }
    [obj, loc, cls, w.a * obj + w.b * loc + w.c * cls]
}

fn random_targets(rng: &mut ChaCha8Rng, n: usize, nc: usize) -> Vec<Vec<BoxAnnotation>> {
    (0..n)
        .map(|_| {
            (0..rng.random_range(0..4))
                .map(|_| {
                    let w = rng.random_range(0.05..0.6);
                    let h = rng.random_range(0.05..0.6);
                    BoxAnnotation {
                        class_id: rng.random_range(0..nc),
                        bbox: BBox::new(rng.random_range(w / 2.0..1.0 - w / 2.0), rng.random_range(h / 2.0..1.0 - h / 2.0), w, h),
                    }
                })
                .collect()
        })
        .collect()
}

#[test]
fn detection_loss_matches_loop() {
    check_detection_loss_matches_loop();
}

pub fn check_detection_loss_matches_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let anchors = bgdet_core::detector::DetectorConfig::default().anchors;
    for case in 0..CASES {
        let n = rng.random_range(1..3);
        let nc = rng.random_range(1..4);
        let size = [32, 64][case % 2];
        let layout = HeadLayout {
            anchors,
            anchor_ratio: 4.0,
            num_classes: nc,
            image_h: size,
            image_w: size,
        };
        let data = [0, 1, 2].map(|s| {
            let g = size / STRIDES[s];
            rand_vec(&mut rng, n * ANCHORS_PER_SCALE * (5 + nc) * g * g, -3.0, 3.0)
        });
        let heads = Heads { data, n, nc, size };
        let targets = random_targets(&mut rng, n, nc);
        let w = DetectionLossWeights {
            a: rng.random_range(0.1..2.0),
            b: rng.random_range(0.0..2.0),
            c: rng.random_range(0.0..2.0),
        };
        let oracle = detection_oracle(&heads, &layout, &targets, &w);
        let mut tape = Tape::<f64>::new();
        let vars = [0, 1, 2].map(|s| {
            let g = size / STRIDES[s];
            tape.constant(Tensor::from_vec(&[n, ANCHORS_PER_SCALE * (5 + nc), g, g], heads.data[s].clone()).unwrap())
        });
        let (l, comp) = detection_loss(&mut tape, &vars, &layout, &targets, &w, LocLoss::Ciou).unwrap();
        close(comp.obj, oracle[0], "obj");
        close(comp.loc, oracle[1], "loc");
        close(comp.cls, oracle[2], "cls");
        close(tape.item(l), oracle[3], "detection total");
    }
}

// ------------------------------------------------------------ guidance

#[test]
fn feature_consistency_matches_loop() {
    check_feature_consistency_matches_loop();
}

pub fn check_feature_consistency_matches_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for case in 0..CASES {
        let shape = [rng.random_range(1..3), rng.random_range(1..6), rng.random_range(1..6), rng.random_range(1..6)];
        let f = rand_tensor(&mut rng, &shape, -2.0, 2.0);
        let i = rand_tensor(&mut rng, &shape, -2.0, 2.0);
        let msd = mean(f.data().iter().zip(i.data()).map(|(a, b)| (a - b) * (a - b)));
        let (norm, oracle) = if case % 2 == 0 {
            (Normalization::ChannelMean, msd)
        } else {
            (Normalization::SpatialMean, msd * shape[1] as f64)
        };
        let mut tape = Tape::<f64>::new();
        let fv = tape.constant(f);
        let iv = tape.constant(i);
        let l = feature_consistency_loss(&mut tape, fv, iv, TapLevel::Conv1, norm).unwrap();
        close(tape.item(l), oracle, "consistency");
    }
}

#[test]
fn full_guided_loss_matches_loop() {
    check_full_guided_loss_matches_loop();
}

pub fn check_full_guided_loss_matches_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for case in 0..CASES {
        let mask = case % 7 + 1;
        let levels: Vec<TapLevel> = TapLevel::ALL.into_iter().filter(|l| mask & (1 << l.index()) != 0).collect();
        let w = GuidanceWeights {
            mu1: rng.random_range(0.0..2.0),
            mu2: rng.random_range(0.0..2.0),
            mu3: rng.random_range(0.0..2.0),
            levels,
            normalization: Normalization::ChannelMean,
        };
        let mut tape = Tape::<f64>::new();
        let mut oracle = 0.0;
        let mut f_taps = [None; 3];
        let mut i_taps = [None; 3];
        for l in TapLevel::ALL {
            let shape = [2, 2 + l.index(), 4, 4];
            let f = rand_tensor(&mut rng, &shape, -1.0, 1.0);
            let i = rand_tensor(&mut rng, &shape, -1.0, 1.0);
            if w.enabled(l) {
                oracle += w.mu(l) * mean(f.data().iter().zip(i.data()).map(|(a, b)| (a - b) * (a - b)));
            }
            f_taps[l.index()] = Some(tape.constant(f));
            i_taps[l.index()] = Some(tape.constant(i));
        }
        let (v, _) = full_guided_loss(&mut tape, &f_taps, &i_taps, &w).unwrap();
        close(tape.item(v), oracle, "guided");
    }
}

#[test]
fn total_loss_matches_arithmetic() {
    check_total_loss_matches_arithmetic();
}

pub fn check_total_loss_matches_arithmetic() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..CASES {
        let w = TotalLossWeights {
            eta1: rng.random_range(0.0..2.0),
            eta2: rng.random_range(0.0..2.0),
        };
        let (d, g) = (rng.random_range(0.0..10.0), rng.random_range(0.0..10.0));
        let oracle = w.eta1 * d + w.eta2 * g;
        close(total_loss(d, g, &w), oracle, "total");
        let mut tape = Tape::<f64>::new();
        let dv = tape.constant(Tensor::scalar(d));
        let gv = tape.constant(Tensor::scalar(g));
        let l = total_loss_var(&mut tape, dv, gv, &w).unwrap();
        close(tape.item(l), oracle, "total (tape)");
    }
}
