//! Compact three-scale single-stage detector with named shallow taps, its
//! training loss and post-processing.

use std::f64::consts::PI;

use bgdet_tensor::{Bound, ParamStore, Scalar, Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::datagen::BoxAnnotation;
use crate::geometry::{iou, BBox};
use crate::nn::{init_rng, Conv, Init};
use crate::{Error, Result};

pub const STRIDES: [usize; 3] = [8, 16, 32];
pub const ANCHORS_PER_SCALE: usize = 3;
/// Tap names in backbone order.
pub const TAP_NAMES: [&str; 3] = ["conv1", "conv2", "csp"];
const CIOU_EPS: f64 = 1e-7;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DetectorConfig {
    /// Channel widths of conv1, conv2, csp, stride-8 and stride-16 stages.
    pub widths: [usize; 5],
    pub width_multiplier: f64,
    /// Anchor `(w, h)` in pixels, per scale (strides 8, 16, 32).
    pub anchors: [[[f64; 2]; ANCHORS_PER_SCALE]; 3],
    /// A target is assigned to an anchor when every side ratio is below this.
    pub anchor_ratio: f64,
    /// Expected objects per image, used only for the objectness bias prior.
    pub prior_objects: f64,
    /// Input side length used for the objectness bias prior.
    pub prior_input_size: usize,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            widths: [16, 32, 32, 64, 128],
            width_multiplier: 1.0,
            anchors: [
                [[6.0, 6.0], [10.0, 8.0], [8.0, 12.0]],
                [[14.0, 14.0], [20.0, 16.0], [16.0, 22.0]],
                [[28.0, 28.0], [40.0, 32.0], [32.0, 44.0]],
            ],
            anchor_ratio: 4.0,
            prior_objects: 2.0,
            prior_input_size: 64,
        }
    }
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.width_multiplier.is_finite() && self.width_multiplier > 0.0) {
            return Err(Error::Config("width_multiplier must be positive".into()));
        }
        if self.widths.contains(&0) {
            return Err(Error::Config("detector widths must be positive".into()));
        }
        if self.anchors.iter().flatten().flatten().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(Error::Config("anchors must be positive".into()));
        }
        if self.anchor_ratio.is_nan() || self.anchor_ratio <= 1.0 {
            return Err(Error::Config("anchor_ratio must exceed 1".into()));
        }
        Ok(())
    }

    /// Widths after applying the multiplier (at least 2, csp width even).
    pub fn scaled_widths(&self) -> [usize; 5] {
        let mut w = self.widths.map(|c| ((c as f64 * self.width_multiplier).round() as usize).max(2));
        w[2] += w[2] % 2;
        w
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectionLossWeights {
    pub a: f64,
    pub b: f64,
    pub c: f64,
}

/// `b` is 0.05 times a scale constant of 20: a 64-pixel input has about
/// a hundred times fewer grid cells per box than the usual 640 input.
impl Default for DetectionLossWeights {
    fn default() -> Self {
        Self { a: 1.0, b: 1.0, c: 0.5 }
    }
}

impl DetectionLossWeights {
    pub fn validate(&self) -> Result<()> {
        if [self.a, self.b, self.c].iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::Config(format!("detection loss weights must be finite and >= 0: {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LocLoss {
    #[default]
    Ciou,
    Iou,
}

/// Handles into the tape for one detector forward pass.
#[derive(Debug, Clone, Copy)]
pub struct DetectorVars {
    /// conv1, conv2, csp activations.
    pub taps: [Var; 3],
    /// Raw head maps at strides 8, 16, 32: `[n, A·(5 + nc), gh, gw]`.
    pub heads: [Var; 3],
}

#[derive(Debug, Clone, PartialEq)]
pub struct Detector<T> {
    pub store: ParamStore<T>,
    pub num_classes: usize,
    anchors: [[[f64; 2]; ANCHORS_PER_SCALE]; 3],
    anchor_ratio: f64,
    conv1: Conv,
    conv2: Conv,
    csp_cv1: Conv,
    csp_b1: Conv,
    csp_b2: Conv,
    csp_cv2: Conv,
    csp_cv3: Conv,
    down3: Conv,
    down4: Conv,
    down5: Conv,
    lat5: Conv,
    fuse4: Conv,
    lat4: Conv,
    fuse3: Conv,
    heads: [Conv; 3],
}

impl<T: Scalar> Detector<T> {
    pub fn new(cfg: &DetectorConfig, num_classes: usize, seed: u64, name: &str) -> Result<Self> {
        cfg.validate()?;
        if num_classes == 0 {
            return Err(Error::Config("detector needs at least one class".into()));
        }
        let mut rng = init_rng(seed, name);
        let mut s = ParamStore::new();
        let [c1, c2, c3, c4, c5] = cfg.scaled_widths();
        let h = c3 / 2;
        let he = Init::HeUniform;
        let mut conv = |s: &mut ParamStore<T>, n: &str, i, o, k, st| Conv::new(s, &mut rng, n, i, o, k, st, true, he);
        let conv1 = conv(&mut s, "conv1", 3, c1, 3, 2);
        let conv2 = conv(&mut s, "conv2", c1, c2, 3, 2);
        let csp_cv1 = conv(&mut s, "csp.cv1", c2, h, 1, 1);
        let csp_b1 = conv(&mut s, "csp.m.cv1", h, h, 1, 1);
        let csp_b2 = conv(&mut s, "csp.m.cv2", h, h, 3, 1);
        let csp_cv2 = conv(&mut s, "csp.cv2", c2, h, 1, 1);
        let csp_cv3 = conv(&mut s, "csp.cv3", 2 * h, c3, 1, 1);
        let down3 = conv(&mut s, "down3", c3, c4, 3, 2);
        let down4 = conv(&mut s, "down4", c4, c5, 3, 2);
        let down5 = conv(&mut s, "down5", c5, c5, 3, 2);
        let lat5 = conv(&mut s, "neck.lat5", c5, c4, 1, 1);
        let fuse4 = conv(&mut s, "neck.fuse4", c4 + c5, c4, 3, 1);
        let lat4 = conv(&mut s, "neck.lat4", c4, c3, 1, 1);
        let fuse3 = conv(&mut s, "neck.fuse3", c3 + c4, c4, 3, 1);
        let out = ANCHORS_PER_SCALE * (5 + num_classes);
        let heads = [
            Conv::new(&mut s, &mut rng, "head.p3", c4, out, 1, 1, true, he),
            Conv::new(&mut s, &mut rng, "head.p4", c4, out, 1, 1, true, he),
            Conv::new(&mut s, &mut rng, "head.p5", c5, out, 1, 1, true, he),
        ];
        // Objectness starts at the prior rate of `prior_objects` per image and
        // classes near uniform.
        let per = 5 + num_classes;
        for (k, head) in heads.iter().enumerate() {
            let cells = (cfg.prior_input_size as f64 / STRIDES[k] as f64).powi(2).max(1.0);
            let obj = (cfg.prior_objects / cells).min(0.5);
            let obj_bias = (obj / (1.0 - obj)).ln();
            let cls_bias = (0.6 / (num_classes as f64 - 0.99)).ln();
            head.set_bias(&mut s, |i| match i % per {
                4 => obj_bias,
                j if j >= 5 => cls_bias,
                _ => 0.0,
            });
        }
        Ok(Self {
            store: s,
            num_classes,
            anchors: cfg.anchors,
            anchor_ratio: cfg.anchor_ratio,
            conv1,
            conv2,
            csp_cv1,
            csp_b1,
            csp_b2,
            csp_cv2,
            csp_cv3,
            down3,
            down4,
            down5,
            lat5,
            fuse4,
            lat4,
            fuse3,
            heads,
        })
    }

    pub fn anchors(&self) -> &[[[f64; 2]; ANCHORS_PER_SCALE]; 3] {
        &self.anchors
    }

    fn cbs(&self, tape: &mut Tape<T>, p: &Bound, c: &Conv, x: Var) -> Result<Var> {
        let y = c.forward(tape, p, x)?;
        Ok(tape.silu(y))
    }

    /// Backbone up to the stride-32 map: `(taps, [p3, p4, p5])`.
    pub fn backbone_forward(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<([Var; 3], [Var; 3])> {
        let (_, c, h, w) = tape.value(x).dims4()?;
        if c != 3 || h % 32 != 0 || w % 32 != 0 {
            return Err(Error::Shape(bgdet_tensor::TensorError::Shape(format!(
                "detector input must be [n, 3, h, w] with h, w divisible by 32; got {:?}",
                tape.value(x).shape()
            ))));
        }
        let t1 = self.cbs(tape, p, &self.conv1, x)?;
        let t2 = self.cbs(tape, p, &self.conv2, t1)?;
        let a = self.cbs(tape, p, &self.csp_cv1, t2)?;
        let m = self.cbs(tape, p, &self.csp_b1, a)?;
        let m = self.cbs(tape, p, &self.csp_b2, m)?;
        let a = tape.add(a, m)?;
        let b = self.cbs(tape, p, &self.csp_cv2, t2)?;
        let cat = tape.concat_channels(&[a, b])?;
        let t3 = self.cbs(tape, p, &self.csp_cv3, cat)?;
        let p3 = self.cbs(tape, p, &self.down3, t3)?;
        let p4 = self.cbs(tape, p, &self.down4, p3)?;
        let p5 = self.cbs(tape, p, &self.down5, p4)?;
        Ok(([t1, t2, t3], [p3, p4, p5]))
    }

    pub fn forward(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<DetectorVars> {
        let (taps, [p3, p4, p5]) = self.backbone_forward(tape, p, x)?;
        let l5 = self.cbs(tape, p, &self.lat5, p5)?;
        let u5 = tape.upsample2(l5)?;
        let c4 = tape.concat_channels(&[u5, p4])?;
        let n4 = self.cbs(tape, p, &self.fuse4, c4)?;
        let l4 = self.cbs(tape, p, &self.lat4, n4)?;
        let u4 = tape.upsample2(l4)?;
        let c3 = tape.concat_channels(&[u4, p3])?;
        let n3 = self.cbs(tape, p, &self.fuse3, c3)?;
        let heads = [
            self.heads[0].forward(tape, p, n3)?,
            self.heads[1].forward(tape, p, n4)?,
            self.heads[2].forward(tape, p, p5)?,
        ];
        Ok(DetectorVars { taps, heads })
    }

    /// Gradient-free head maps for a batch.
    pub fn infer(&self, x: &Tensor<T>) -> Result<[Tensor<T>; 3]> {
        let mut tape = Tape::new();
        let p = self.store.bind(&mut tape, false);
        let xv = tape.constant(x.clone());
        let out = self.forward(&mut tape, &p, xv)?;
        Ok(out.heads.map(|h| tape.value(h).clone()))
    }

    pub fn head_layout(&self, image_h: usize, image_w: usize) -> HeadLayout {
        HeadLayout {
            anchors: self.anchors,
            anchor_ratio: self.anchor_ratio,
            num_classes: self.num_classes,
            image_h,
            image_w,
        }
    }
}

/// Geometry needed to interpret head maps.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HeadLayout {
    pub anchors: [[[f64; 2]; ANCHORS_PER_SCALE]; 3],
    pub anchor_ratio: f64,
    pub num_classes: usize,
    pub image_h: usize,
    pub image_w: usize,
}

impl HeadLayout {
    pub fn per_anchor(&self) -> usize {
        5 + self.num_classes
    }

    pub fn grid(&self, scale: usize) -> (usize, usize) {
        (self.image_h / STRIDES[scale], self.image_w / STRIDES[scale])
    }

    /// Flat index of channel `k` of anchor `a` at cell `(gy, gx)` for image `n`.
    pub fn index(&self, scale: usize, n: usize, a: usize, k: usize, gy: usize, gx: usize) -> usize {
        let (gh, gw) = self.grid(scale);
        let ch = ANCHORS_PER_SCALE * self.per_anchor();
        ((n * ch + a * self.per_anchor() + k) * gh + gy) * gw + gx
    }
}

/// A prediction slot responsible for one ground-truth box.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Assignment {
    pub image: usize,
    pub scale: usize,
    pub anchor: usize,
    pub gy: usize,
    pub gx: usize,
    pub class_id: usize,
    /// Target box in pixels: `(cx, cy, w, h)`.
    pub target: [f64; 4],
}

/// Center-cell assignment: every anchor whose side ratios to the target all
/// stay below `anchor_ratio`, on every scale, in the cell holding the center.
pub fn assign_targets(layout: &HeadLayout, targets: &[Vec<BoxAnnotation>]) -> Vec<Assignment> {
    let (ih, iw) = (layout.image_h as f64, layout.image_w as f64);
    let mut out = Vec::new();
    for (image, boxes) in targets.iter().enumerate() {
        for b in boxes {
            let t = [b.bbox.cx * iw, b.bbox.cy * ih, b.bbox.w * iw, b.bbox.h * ih];
            for scale in 0..3 {
                let (gh, gw) = layout.grid(scale);
                let st = STRIDES[scale] as f64;
                let gx = ((t[0] / st).floor().max(0.0) as usize).min(gw - 1);
                let gy = ((t[1] / st).floor().max(0.0) as usize).min(gh - 1);
                for (anchor, &[aw, ah]) in layout.anchors[scale].iter().enumerate() {
                    let r = (t[2] / aw).max(aw / t[2]).max(t[3] / ah).max(ah / t[3]);
                    if r < layout.anchor_ratio {
                        out.push(Assignment {
                            image,
                            scale,
                            anchor,
                            gy,
                            gx,
                            class_id: b.class_id,
                            target: t,
                        });
                    }
                }
            }
        }
    }
    out
}

/// Forward-mode dual number with four tangent directions.
#[derive(Debug, Clone, Copy)]
struct Dual {
    v: f64,
    d: [f64; 4],
}

impl Dual {
    fn cst(v: f64) -> Self {
        Self { v, d: [0.0; 4] }
    }
    fn var(v: f64, i: usize) -> Self {
        let mut d = [0.0; 4];
        d[i] = 1.0;
        Self { v, d }
    }
    fn map(self, v: f64, dv: f64) -> Self {
        Self {
            v,
            d: self.d.map(|x| x * dv),
        }
    }
    fn add(self, o: Self) -> Self {
        Self {
            v: self.v + o.v,
            d: [0, 1, 2, 3].map(|i| self.d[i] + o.d[i]),
        }
    }
    fn sub(self, o: Self) -> Self {
        Self {
            v: self.v - o.v,
            d: [0, 1, 2, 3].map(|i| self.d[i] - o.d[i]),
        }
    }
    fn mul(self, o: Self) -> Self {
        Self {
            v: self.v * o.v,
            d: [0, 1, 2, 3].map(|i| self.d[i] * o.v + self.v * o.d[i]),
        }
    }
    fn div(self, o: Self) -> Self {
        Self {
            v: self.v / o.v,
            d: [0, 1, 2, 3].map(|i| (self.d[i] * o.v - self.v * o.d[i]) / (o.v * o.v)),
        }
    }
    fn scale(self, s: f64) -> Self {
        self.map(self.v * s, s)
    }
    fn sigmoid(self) -> Self {
        let s = sigmoid(self.v);
        self.map(s, s * (1.0 - s))
    }
    fn atan(self) -> Self {
        self.map(self.v.atan(), 1.0 / (1.0 + self.v * self.v))
    }
    fn min(self, o: Self) -> Self {
        if self.v <= o.v {
            self
        } else {
            o
        }
    }
    fn max(self, o: Self) -> Self {
        if self.v >= o.v {
            self
        } else {
            o
        }
    }
    fn relu(self) -> Self {
        if self.v > 0.0 {
            self
        } else {
            Self::cst(0.0)
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + e^x)` without overflow.
fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Binary cross-entropy on a logit.
pub fn bce_with_logits(x: f64, target: f64) -> f64 {
    softplus(x) - target * x
}

/// `(cx, cy, w, h)` in pixels from raw box logits.
fn decode_box(raw: [Dual; 4], gx: usize, gy: usize, stride: f64, anchor: [f64; 2]) -> [Dual; 4] {
    let [tx, ty, tw, th] = raw;
    let cx = tx.sigmoid().scale(2.0).add(Dual::cst(gx as f64 - 0.5)).scale(stride);
    let cy = ty.sigmoid().scale(2.0).add(Dual::cst(gy as f64 - 0.5)).scale(stride);
    let sw = tw.sigmoid().scale(2.0);
    let sh = th.sigmoid().scale(2.0);
    [cx, cy, sw.mul(sw).scale(anchor[0]), sh.mul(sh).scale(anchor[1])]
}

/// CIoU (or IoU) of a predicted box against a fixed target, with gradient
/// with respect to the four box parameters.
fn box_overlap(p: [Dual; 4], t: [f64; 4], kind: LocLoss) -> Dual {
    let half = |b: [Dual; 4]| {
        [
            b[0].sub(b[2].scale(0.5)),
            b[1].sub(b[3].scale(0.5)),
            b[0].add(b[2].scale(0.5)),
            b[1].add(b[3].scale(0.5)),
        ]
    };
    let tb = [Dual::cst(t[0]), Dual::cst(t[1]), Dual::cst(t[2]), Dual::cst(t[3])];
    let [px1, py1, px2, py2] = half(p);
    let [tx1, ty1, tx2, ty2] = half(tb);
    let iw = px2.min(tx2).sub(px1.max(tx1)).relu();
    let ih = py2.min(ty2).sub(py1.max(ty1)).relu();
    let inter = iw.mul(ih);
    let union = p[2].mul(p[3]).add(Dual::cst(t[2] * t[3])).sub(inter).add(Dual::cst(CIOU_EPS));
    let iou = inter.div(union);
    if kind == LocLoss::Iou {
        return iou;
    }
    let cw = px2.max(tx2).sub(px1.min(tx1));
    let ch = py2.max(ty2).sub(py1.min(ty1));
    let c2 = cw.mul(cw).add(ch.mul(ch)).add(Dual::cst(CIOU_EPS));
    let dx = p[0].sub(tb[0]);
    let dy = p[1].sub(tb[1]);
    let rho2 = dx.mul(dx).add(dy.mul(dy));
    let dv = Dual::cst((t[2] / t[3]).atan()).sub(p[2].div(p[3]).atan());
    let v = dv.mul(dv).scale(4.0 / (PI * PI));
    let alpha = v.div(v.sub(iou).add(Dual::cst(1.0 + CIOU_EPS)));
    iou.sub(rho2.div(c2).add(v.mul(alpha)))
}

/// Loss components for one batch.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossComponents {
    pub obj: f64,
    pub loc: f64,
    pub cls: f64,
    pub total: f64,
    pub assigned: usize,
}

/// Detection loss and its gradient with respect to each head map.
///
/// `obj`: BCE averaged over every anchor slot of every scale, target 1 on
/// assigned slots. `loc`: mean of `1 - CIoU` over assignments. `cls`: BCE
/// averaged over assignments × classes with one-hot targets.
pub fn detection_loss_values(
    heads: &[&[f64]; 3],
    batch: usize,
    layout: &HeadLayout,
    targets: &[Vec<BoxAnnotation>],
    w: &DetectionLossWeights,
    kind: LocLoss,
) -> Result<(LossComponents, [Vec<f64>; 3])> {
    if targets.len() != batch {
        return Err(Error::Contract(format!("{} target lists for batch of {batch}", targets.len())));
    }
    let nc = layout.num_classes;
    for (k, h) in heads.iter().enumerate() {
        let (gh, gw) = layout.grid(k);
        let expect = batch * ANCHORS_PER_SCALE * layout.per_anchor() * gh * gw;
        if h.len() != expect {
            return Err(Error::Shape(bgdet_tensor::TensorError::Shape(format!(
                "head {k} has {} values, expected {expect}",
                h.len()
            ))));
        }
    }
    if let Some(b) = targets.iter().flatten().find(|b| b.class_id >= nc) {
        return Err(Error::Contract(format!("class id {} outside {nc} classes", b.class_id)));
    }
    let assigned = assign_targets(layout, targets);
    let mut grads: [Vec<f64>; 3] = [0, 1, 2].map(|k| vec![0.0; heads[k].len()]);

    let mut obj_target: [Vec<bool>; 3] = [0, 1, 2].map(|k| {
        let (gh, gw) = layout.grid(k);
        vec![false; batch * ANCHORS_PER_SCALE * gh * gw]
    });
    for a in &assigned {
        let (gh, gw) = layout.grid(a.scale);
        obj_target[a.scale][((a.image * ANCHORS_PER_SCALE + a.anchor) * gh + a.gy) * gw + a.gx] = true;
    }
    let n_slots: usize = obj_target.iter().map(|v| v.len()).sum();
    let mut obj = 0.0;
    for k in 0..3 {
        let (gh, gw) = layout.grid(k);
        for n in 0..batch {
            for a in 0..ANCHORS_PER_SCALE {
                for gy in 0..gh {
                    for gx in 0..gw {
                        let t = if obj_target[k][((n * ANCHORS_PER_SCALE + a) * gh + gy) * gw + gx] { 1.0 } else { 0.0 };
                        let i = layout.index(k, n, a, 4, gy, gx);
                        let x = heads[k][i];
                        obj += bce_with_logits(x, t);
                        grads[k][i] += w.a * (sigmoid(x) - t) / n_slots as f64;
                    }
                }
            }
        }
    }
    obj /= n_slots as f64;

    let (mut loc, mut cls) = (0.0, 0.0);
    if !assigned.is_empty() {
        let m = assigned.len() as f64;
        for a in &assigned {
            let idx = |k: usize| layout.index(a.scale, a.image, a.anchor, k, a.gy, a.gx);
            let raw = [0, 1, 2, 3].map(|k| Dual::var(heads[a.scale][idx(k)], k));
            let pb = decode_box(raw, a.gx, a.gy, STRIDES[a.scale] as f64, layout.anchors[a.scale][a.anchor]);
            let ov = box_overlap(pb, a.target, kind);
            loc += 1.0 - ov.v;
            for k in 0..4 {
                grads[a.scale][idx(k)] += -w.b * ov.d[k] / m;
            }
            for c in 0..nc {
                let t = if c == a.class_id { 1.0 } else { 0.0 };
                let x = heads[a.scale][idx(5 + c)];
                cls += bce_with_logits(x, t);
                grads[a.scale][idx(5 + c)] += w.c * (sigmoid(x) - t) / (m * nc as f64);
            }
        }
        loc /= m;
        cls /= m * nc as f64;
    }
    let total = w.a * obj + w.b * loc + w.c * cls;
    if !total.is_finite() {
        return Err(Error::Numerical(format!("non-finite detection loss (obj {obj}, loc {loc}, cls {cls})")));
    }
    Ok((
        LossComponents {
            obj,
            loc,
            cls,
            total,
            assigned: assigned.len(),
        },
        grads,
    ))
}

/// Detection loss as a tape node over the three head maps.
pub fn detection_loss<T: Scalar>(
    tape: &mut Tape<T>,
    heads: &[Var; 3],
    layout: &HeadLayout,
    targets: &[Vec<BoxAnnotation>],
    w: &DetectionLossWeights,
    kind: LocLoss,
) -> Result<(Var, LossComponents)> {
    let vals: Vec<Vec<f64>> = heads.iter().map(|&h| tape.value(h).data().iter().map(|v| v.as_f64()).collect()).collect();
    let batch = tape.value(heads[0]).shape()[0];
    let refs = [&vals[0][..], &vals[1][..], &vals[2][..]];
    let (comp, grads) = detection_loss_values(&refs, batch, layout, targets, w, kind)?;
    let grad_tensors = grads
        .iter()
        .zip(heads)
        .map(|(g, &h)| Tensor::from_f64(tape.value(h).shape(), g))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let v = tape.fused_scalar(heads, T::from_f64(comp.total), grad_tensors)?;
    Ok((v, comp))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub class_id: usize,
    pub score: f64,
    pub bbox: BBox,
}

/// Candidate boxes of image `n` with `σ(obj)·max σ(cls) ≥ conf_thresh`,
/// clipped to the image.
pub fn decode(heads: &[&[f64]; 3], n: usize, layout: &HeadLayout, conf_thresh: f64) -> Vec<Detection> {
    let mut out = Vec::new();
    let (ih, iw) = (layout.image_h as f64, layout.image_w as f64);
    for k in 0..3 {
        let (gh, gw) = layout.grid(k);
        let st = STRIDES[k] as f64;
        for a in 0..ANCHORS_PER_SCALE {
            for gy in 0..gh {
                for gx in 0..gw {
                    let at = |c: usize| heads[k][layout.index(k, n, a, c, gy, gx)];
                    let obj = sigmoid(at(4));
                    let (mut best, mut best_p) = (0, f64::NEG_INFINITY);
                    for c in 0..layout.num_classes {
                        let p = at(5 + c);
                        if p > best_p {
                            best = c;
                            best_p = p;
                        }
                    }
                    let score = obj * sigmoid(best_p);
                    if score < conf_thresh {
                        continue;
                    }
                    let raw = [0, 1, 2, 3].map(|c| Dual::cst(at(c)));
                    let b = decode_box(raw, gx, gy, st, layout.anchors[k][a]);
                    let bbox = BBox::new(b[0].v / iw, b[1].v / ih, b[2].v / iw, b[3].v / ih).clipped();
                    if bbox.area() > 0.0 {
                        out.push(Detection {
                            class_id: best,
                            score,
                            bbox,
                        });
                    }
                }
            }
        }
    }
    out
}

/// Per-class greedy NMS: a box is dropped when it overlaps a kept,
/// higher-scored box of its class with IoU above `iou_thresh`. Output sorted
/// by score, descending, truncated to `max_det`.
pub fn nms(mut dets: Vec<Detection>, iou_thresh: f64, max_det: usize) -> Vec<Detection> {
    dets.sort_by(|a, b| b.score.total_cmp(&a.score));
    let mut keep: Vec<Detection> = Vec::new();
    for d in dets {
        if keep.len() >= max_det {
            break;
        }
        let suppressed = keep
            .iter()
            .any(|k| k.class_id == d.class_id && iou(&k.bbox, &d.bbox) > iou_thresh);
        if !suppressed {
            keep.push(d);
        }
    }
    keep
}

pub const MAX_DETECTIONS: usize = 300;

pub fn decode_and_nms(heads: &[&[f64]; 3], n: usize, layout: &HeadLayout, conf_thresh: f64, iou_thresh: f64) -> Vec<Detection> {
    nms(decode(heads, n, layout, conf_thresh), iou_thresh, MAX_DETECTIONS)
}

/// Runs the detector on a batch and post-processes every image.
pub fn predict(det: &Detector<f32>, batch: &Tensor<f32>, conf_thresh: f64, iou_thresh: f64) -> Result<Vec<Vec<Detection>>> {
    let (n, _, h, w) = batch.dims4()?;
    let heads = det.infer(batch)?;
    let vals: Vec<Vec<f64>> = heads.iter().map(|t| t.data().iter().map(|&v| v as f64).collect()).collect();
    let refs = [&vals[0][..], &vals[1][..], &vals[2][..]];
    let layout = det.head_layout(h, w);
    Ok((0..n).map(|i| decode_and_nms(&refs, i, &layout, conf_thresh, iou_thresh)).collect())
}
