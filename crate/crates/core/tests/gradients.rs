//! Central finite differences against analytic parameter gradients of the
//! three training objectives, on tiny f64 networks.

use bgdet_core::datagen::BoxAnnotation;
use bgdet_core::detector::{detection_loss, DetectionLossWeights, Detector, DetectorConfig, LocLoss};
use bgdet_core::enhancer::{
    adversarial_loss, cycle_forward, cycle_image_loss, perceptual_cycle_loss, total_enhancer_loss_var, DiscriminatorConfig,
    DiscriminatorPair, EnhancerLossWeights, GeneratorConfig, GeneratorPair, PerceptualExtractor,
};
use bgdet_core::geometry::BBox;
use bgdet_core::guidance::{full_guided_loss, total_loss_var, GuidanceWeights, Normalization, TapLevel, TotalLossWeights};
use bgdet_tensor::{ParamStore, Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const SAMPLES: usize = 24;
const H: f64 = 1e-6;
pub const TOL: f64 = 1e-3;

type Grads = Vec<Vec<Option<Tensor<f64>>>>;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Compares analytic gradients with central differences on `SAMPLES`
/// randomly chosen parameter elements.
fn check<N: Clone>(nets: &N, stores: fn(&mut N) -> Vec<&mut ParamStore<f64>>, run: impl Fn(&N) -> (f64, Grads), seed: u64) {
    let (_, grads) = run(nets);
    let mut probe = nets.clone();
    let sizes: Vec<Vec<usize>> = stores(&mut probe).iter().map(|s| s.iter().map(|p| p.value.numel()).collect()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..SAMPLES {
        let s = rng.random_range(0..sizes.len());
        let p = rng.random_range(0..sizes[s].len());
        let i = rng.random_range(0..sizes[s][p]);
        let eval = |delta: f64| {
            let mut n = nets.clone();
            let mut st = stores(&mut n);
            let id = bgdet_tensor::ParamId::from_index(p);
            st[s].get_mut(id).data_mut()[i] += delta;
            run(&n).0
        };
        let numeric = (eval(H) - eval(-H)) / (2.0 * H);
        let analytic = grads[s][p].as_ref().map_or(0.0, |g| g.data()[i]);
        let diff = (analytic - numeric).abs();
        let rel = diff / analytic.abs().max(numeric.abs()).max(1e-6);
        assert!(rel <= TOL, "store {s} param {p} elem {i}: analytic {analytic:e} numeric {numeric:e} (rel {rel:e})");
        worst = worst.max(rel);
    }
    eprintln!("worst relative error over {SAMPLES} samples: {worst:e}");
}

#[derive(Clone)]
struct EnhancerNets {
    gens: GeneratorPair<f64>,
    discs: DiscriminatorPair<f64>,
    phi: PerceptualExtractor<f64>,
    x_u: Tensor<f64>,
    x_a: Tensor<f64>,
}

fn enhancer_stores(n: &mut EnhancerNets) -> Vec<&mut ParamStore<f64>> {
    vec![&mut n.gens.u2a.store, &mut n.gens.a2u.store, &mut n.discs.d_a.store, &mut n.discs.d_u.store]
}

#[test]
fn total_enhancer_loss_gradients() {
    check_total_enhancer_loss_gradients();
}

pub fn check_total_enhancer_loss_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let gcfg = GeneratorConfig {
        base_width: 2,
        res_blocks: 1,
        head_init: 0.3,
    };
    let nets = EnhancerNets {
        gens: GeneratorPair::new(&gcfg, 3),
        discs: DiscriminatorPair::new(&DiscriminatorConfig { base_width: 2 }, 3),
        phi: PerceptualExtractor::new(),
        x_u: rand_tensor(&mut rng, &[1, 3, 8, 8], 0.05, 0.95),
        x_a: rand_tensor(&mut rng, &[1, 3, 8, 8], 0.05, 0.95),
    };
    // λ₁ raised so the image-cycle term is visible next to the others.
    let w = EnhancerLossWeights { lambda1: 0.5, lambda2: 1.0 };
    let run = |n: &EnhancerNets| {
        let mut tape = Tape::<f64>::new();
        let bu = n.gens.u2a.store.bind(&mut tape, true);
        let ba = n.gens.a2u.store.bind(&mut tape, true);
        let bda = n.discs.d_a.store.bind(&mut tape, true);
        let bdu = n.discs.d_u.store.bind(&mut tape, true);
        let bphi = n.phi.store.bind(&mut tape, false);
        let xu = tape.constant(n.x_u.clone());
        let xa = tape.constant(n.x_a.clone());
        let c = cycle_forward(&mut tape, &n.gens, &bu, &ba, xu, xa).unwrap();
        let ra = n.discs.d_a.forward(&mut tape, &bda, xa).unwrap();
        let fa = n.discs.d_a.forward(&mut tape, &bda, c.fake_a).unwrap();
        let ru = n.discs.d_u.forward(&mut tape, &bdu, xu).unwrap();
        let fu = n.discs.d_u.forward(&mut tape, &bdu, c.fake_u).unwrap();
        let g1 = adversarial_loss(&mut tape, ra, fa).unwrap();
        let g2 = adversarial_loss(&mut tape, ru, fu).unwrap();
        let cyc = cycle_image_loss(&mut tape, xu, xa, &c).unwrap();
        let cp = perceptual_cycle_loss(&mut tape, &n.phi, &bphi, xu, xa, &c).unwrap();
        let l = total_enhancer_loss_var(&mut tape, g1, g2, cyc, cp, &w).unwrap();
        let v = tape.item(l);
        let mut g = tape.backward(l).unwrap();
        (v, vec![bu.grads(&mut g), ba.grads(&mut g), bda.grads(&mut g), bdu.grads(&mut g)])
    };
    check(&nets, enhancer_stores, run, 1);
}

fn tiny_detector(seed: u64) -> Detector<f64> {
    let cfg = DetectorConfig {
        widths: [4, 4, 4, 8, 8],
        ..DetectorConfig::default()
    };
    Detector::new(&cfg, 2, seed, "det").unwrap()
}

fn targets() -> Vec<Vec<BoxAnnotation>> {
    vec![vec![
        BoxAnnotation {
            class_id: 0,
            bbox: BBox::new(0.3, 0.4, 0.25, 0.3),
        },
        BoxAnnotation {
            class_id: 1,
            bbox: BBox::new(0.7, 0.6, 0.4, 0.35),
        },
    ]]
}

#[derive(Clone)]
struct DetNet {
    det: Detector<f64>,
    x: Tensor<f64>,
}

fn det_stores(n: &mut DetNet) -> Vec<&mut ParamStore<f64>> {
    vec![&mut n.det.store]
}

#[test]
fn detection_loss_gradients() {
    check_detection_loss_gradients();
}

pub fn check_detection_loss_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let nets = DetNet {
        det: tiny_detector(4),
        x: rand_tensor(&mut rng, &[1, 3, 32, 32], 0.0, 1.0),
    };
    let tg = targets();
    let run = |n: &DetNet| {
        let mut tape = Tape::<f64>::new();
        let p = n.det.store.bind(&mut tape, true);
        let x = tape.constant(n.x.clone());
        let out = n.det.forward(&mut tape, &p, x).unwrap();
        let layout = n.det.head_layout(32, 32);
        let (l, _) = detection_loss(&mut tape, &out.heads, &layout, &tg, &DetectionLossWeights::default(), LocLoss::Ciou).unwrap();
        let v = tape.item(l);
        let mut g = tape.backward(l).unwrap();
        (v, vec![p.grads(&mut g)])
    };
    check(&nets, det_stores, run, 2);
}

#[test]
fn total_loss_gradients() {
    check_total_loss_gradients();
}

pub fn check_total_loss_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let teacher = tiny_detector(9);
    let raw = rand_tensor(&mut rng, &[1, 3, 32, 32], 0.0, 1.0);
    // Teacher taps on a perturbed copy stand in for the enhanced image.
    let enhanced = raw.map(|v| (v * 0.8 + 0.1).clamp(0.0, 1.0));
    let taps = {
        let mut tape = Tape::<f64>::new();
        let p = teacher.store.bind(&mut tape, false);
        let x = tape.constant(enhanced);
        let (t, _) = teacher.backbone_forward(&mut tape, &p, x).unwrap();
        t.map(|v| tape.value(v).clone())
    };
    let nets = DetNet { det: tiny_detector(4), x: raw };
    let gw = GuidanceWeights {
        mu1: 1.0,
        mu2: 0.7,
        mu3: 0.4,
        levels: TapLevel::ALL.to_vec(),
        normalization: Normalization::ChannelMean,
    };
    let tw = TotalLossWeights { eta1: 1.0, eta2: 0.5 };
    let tg = targets();
    let run = |n: &DetNet| {
        let mut tape = Tape::<f64>::new();
        let p = n.det.store.bind(&mut tape, true);
        let x = tape.constant(n.x.clone());
        let out = n.det.forward(&mut tape, &p, x).unwrap();
        let layout = n.det.head_layout(32, 32);
        let (l_det, _) = detection_loss(&mut tape, &out.heads, &layout, &tg, &DetectionLossWeights::default(), LocLoss::Ciou).unwrap();
        let i_taps = taps.clone().map(|t| Some(tape.constant(t)));
        let (l_fgm, _) = full_guided_loss(&mut tape, &out.taps.map(Some), &i_taps, &gw).unwrap();
        let l = total_loss_var(&mut tape, l_det, l_fgm, &tw).unwrap();
        let v = tape.item(l);
        let mut g = tape.backward(l).unwrap();
        (v, vec![p.grads(&mut g)])
    };
    check(&nets, det_stores, run, 3);
}
