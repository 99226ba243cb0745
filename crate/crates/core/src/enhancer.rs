//! Unpaired enhancement subnet: two generators, two patch discriminators, a
//! fixed perceptual extractor and the adversarial / cycle losses.

use std::cell::Cell;

use bgdet_tensor::{Bound, ParamStore, Scalar, Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::datagen::{Domain, ImageSample};
use crate::nn::{init_rng, stack_images, Conv, Init};
use crate::{Error, Result};

/// Clamp applied inside every log and logit.
pub const LOG_EPS: f64 = 1e-7;
const OUTPUT_EPS: f64 = 1e-3;

thread_local! {
    static GENERATOR_FORWARDS: Cell<u64> = const { Cell::new(0) };
}

/// Number of generator forward passes executed on the calling thread.
pub fn generator_forward_count() -> u64 {
    GENERATOR_FORWARDS.with(Cell::get)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorConfig {
    pub base_width: usize,
    pub res_blocks: usize,
    /// Bound of the uniform init of the output head (near-identity start).
    pub head_init: f64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            base_width: 8,
            res_blocks: 3,
            head_init: 1e-3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiscriminatorConfig {
    pub base_width: usize,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        Self { base_width: 16 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdversarialForm {
    /// Log-likelihood objective; generator maximizes `log D(G(x))`.
    NonSaturating,
    /// Log-likelihood objective; generator minimizes `log(1 - D(G(x)))`.
    Minimax,
    LeastSquares,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnhancerLossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
}

impl Default for EnhancerLossWeights {
    fn default() -> Self {
        Self {
            lambda1: 5e-5,
            lambda2: 1.0,
        }
    }
}

impl EnhancerLossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda1.is_finite() && self.lambda2.is_finite() && self.lambda1 >= 0.0 && self.lambda2 >= 0.0) {
            return Err(Error::Config(format!("enhancer loss weights must be finite and >= 0: {self:?}")));
        }
        Ok(())
    }
}

/// Encoder / residual / decoder translator whose head acts in logit space on
/// the input, so a zero head is the identity map.
#[derive(Debug, Clone, PartialEq)]
pub struct Generator<T> {
    pub store: ParamStore<T>,
    stem: Conv,
    down: [Conv; 2],
    res: Vec<(Conv, Conv)>,
    up: [Conv; 2],
    head: Conv,
}

impl<T: Scalar> Generator<T> {
    pub fn new(cfg: &GeneratorConfig, seed: u64, name: &str) -> Self {
        let mut rng = init_rng(seed, name);
        let mut s = ParamStore::new();
        let w = cfg.base_width;
        let he = Init::HeUniform;
        let stem = Conv::new(&mut s, &mut rng, "stem", 3, w, 3, 1, true, he);
        let down = [
            Conv::new(&mut s, &mut rng, "down1", w, 2 * w, 3, 2, true, he),
            Conv::new(&mut s, &mut rng, "down2", 2 * w, 4 * w, 3, 2, true, he),
        ];
        let res = (0..cfg.res_blocks)
            .map(|i| {
                let a = Conv::new(&mut s, &mut rng, &format!("res{i}.conv1"), 4 * w, 4 * w, 3, 1, true, he);
                // Second conv of each block starts small so blocks begin close to identity.
                let b = Conv::new(&mut s, &mut rng, &format!("res{i}.conv2"), 4 * w, 4 * w, 3, 1, true, Init::Uniform(0.1 * (6.0 / (36.0 * w as f64)).sqrt()));
                (a, b)
            })
            .collect();
        let up = [
            Conv::new(&mut s, &mut rng, "up1", 4 * w, 2 * w, 3, 1, true, he),
            Conv::new(&mut s, &mut rng, "up2", 2 * w, w, 3, 1, true, he),
        ];
        let head = Conv::new(&mut s, &mut rng, "head", w, 3, 3, 1, true, Init::Uniform(cfg.head_init));
        Self {
            store: s,
            stem,
            down,
            res,
            up,
            head,
        }
    }

    /// `x`: `[n, 3, h, w]` in `[0, 1]`, h and w divisible by 4.
    pub fn forward(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        let (_, c, h, w) = tape.value(x).dims4()?;
        if c != 3 || h % 4 != 0 || w % 4 != 0 {
            return Err(Error::Shape(bgdet_tensor::TensorError::Shape(format!(
                "generator input must be [n, 3, h, w] with h, w divisible by 4; got {:?}",
                tape.value(x).shape()
            ))));
        }
        GENERATOR_FORWARDS.with(|c| c.set(c.get() + 1));
        let mut y = self.stem.forward(tape, p, x)?;
        y = tape.relu(y);
        for d in &self.down {
            y = d.forward(tape, p, y)?;
            y = tape.relu(y);
        }
        for (a, b) in &self.res {
            let r = a.forward(tape, p, y)?;
            let r = tape.relu(r);
            let r = b.forward(tape, p, r)?;
            y = tape.add(y, r)?;
        }
        for u in &self.up {
            let z = tape.upsample2(y)?;
            y = u.forward(tape, p, z)?;
            y = tape.relu(y);
        }
        let head = self.head.forward(tape, p, y)?;
        Ok(tape.residual_sigmoid(x, head, T::from_f64(OUTPUT_EPS))?)
    }

    /// Gradient-free forward of a `[n, 3, h, w]` batch.
    pub fn apply(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let p = self.store.bind(&mut tape, false);
        let xv = tape.constant(x.clone());
        let y = self.forward(&mut tape, &p, xv)?;
        Ok(tape.value(y).clone())
    }
}

/// PatchGAN-style discriminator producing a grid of scores in (0, 1).
#[derive(Debug, Clone, PartialEq)]
pub struct Discriminator<T> {
    pub store: ParamStore<T>,
    convs: [Conv; 3],
}

impl<T: Scalar> Discriminator<T> {
    pub fn new(cfg: &DiscriminatorConfig, seed: u64, name: &str) -> Self {
        let mut rng = init_rng(seed, name);
        let mut s = ParamStore::new();
        let w = cfg.base_width;
        let he = Init::HeUniform;
        let convs = [
            Conv::new(&mut s, &mut rng, "conv1", 3, w, 4, 2, true, he),
            Conv::new(&mut s, &mut rng, "conv2", w, 2 * w, 4, 2, true, he),
            Conv::new(&mut s, &mut rng, "score", 2 * w, 1, 3, 1, true, he),
        ];
        Self { store: s, convs }
    }

    pub fn forward(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        let slope = T::from_f64(0.2);
        let mut y = self.convs[0].forward(tape, p, x)?;
        y = tape.leaky_relu(y, slope);
        y = self.convs[1].forward(tape, p, y)?;
        y = tape.leaky_relu(y, slope);
        y = self.convs[2].forward(tape, p, y)?;
        Ok(tape.sigmoid(y))
    }
}

/// Fixed two-level feature extractor. Level 1 holds hand-set filters
/// (luminance blur, signed Sobel pairs, Laplacian, two colour-opponent
/// channels); level 2 is a stride-2 conv with constant pseudo-random weights.
/// Never trained.
#[derive(Debug, Clone, PartialEq)]
pub struct PerceptualExtractor<T> {
    pub store: ParamStore<T>,
    level1: Conv,
    level2: Conv,
}

const PERCEPTUAL_SEED: u64 = 0x00C0_FFEE;

impl<T: Scalar> Default for PerceptualExtractor<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> PerceptualExtractor<T> {
    pub fn new() -> Self {
        let mut rng = init_rng(PERCEPTUAL_SEED, "phi");
        let mut s = ParamStore::new();
        let level1 = Conv::new(&mut s, &mut rng, "level1", 3, 8, 3, 1, false, Init::Uniform(0.0));
        let lum = [0.299, 0.587, 0.114];
        let blur = [[1.0, 2.0, 1.0], [2.0, 4.0, 2.0], [1.0, 2.0, 1.0]].map(|r| r.map(|v| v / 16.0));
        let sobel_x = [[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]].map(|r| r.map(|v| v / 4.0));
        let sobel_y = [[-1.0, -2.0, -1.0], [0.0, 0.0, 0.0], [1.0, 2.0, 1.0]].map(|r| r.map(|v| v / 4.0));
        let lap = [[0.0, 1.0, 0.0], [1.0, -4.0, 1.0], [0.0, 1.0, 0.0]].map(|r| r.map(|v| v / 4.0));
        let center = [[0.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 0.0]];
        let luminance_filters = [(blur, 1.0), (sobel_x, 1.0), (sobel_x, -1.0), (sobel_y, 1.0), (sobel_y, -1.0), (lap, 1.0)];
        let mut wv = vec![0.0f64; 8 * 3 * 9];
        for (o, (k, sign)) in luminance_filters.iter().enumerate() {
            for c in 0..3 {
                for i in 0..9 {
                    wv[(o * 3 + c) * 9 + i] = sign * lum[c] * k[i / 3][i % 3];
                }
            }
        }
        // red-green and blue-yellow opponents on the centre pixel
        let opp = [[1.0, -1.0, 0.0], [-0.5, -0.5, 1.0]];
        for (j, coef) in opp.iter().enumerate() {
            let o = 6 + j;
            for c in 0..3 {
                for i in 0..9 {
                    wv[(o * 3 + c) * 9 + i] = coef[c] * center[i / 3][i % 3];
                }
            }
        }
        *s.get_mut(level1.w) = Tensor::from_f64(&[8, 3, 3, 3], &wv).expect("sized");
        let level2 = Conv::new(&mut s, &mut rng, "level2", 8, 16, 3, 2, false, Init::HeUniform);
        Self { store: s, level1, level2 }
    }

    /// Both feature levels of `x`.
    pub fn forward(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<[Var; 2]> {
        let a = self.level1.forward(tape, p, x)?;
        let a = tape.relu(a);
        let b = self.level2.forward(tape, p, a)?;
        let b = tape.relu(b);
        Ok([a, b])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorPair<T> {
    pub u2a: Generator<T>,
    pub a2u: Generator<T>,
}

impl<T: Scalar> GeneratorPair<T> {
    pub fn new(cfg: &GeneratorConfig, seed: u64) -> Self {
        Self {
            u2a: Generator::new(cfg, seed, "g_u2a"),
            a2u: Generator::new(cfg, seed, "g_a2u"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiscriminatorPair<T> {
    /// Judges the clear domain.
    pub d_a: Discriminator<T>,
    /// Judges the underwater domain.
    pub d_u: Discriminator<T>,
}

impl<T: Scalar> DiscriminatorPair<T> {
    pub fn new(cfg: &DiscriminatorConfig, seed: u64) -> Self {
        Self {
            d_a: Discriminator::new(cfg, seed, "d_a"),
            d_u: Discriminator::new(cfg, seed, "d_u"),
        }
    }
}

/// Underwater → clear translation of one sample; boxes pass through.
pub fn enhance(g: &Generator<f32>, img: &ImageSample) -> Result<ImageSample> {
    if img.domain != Domain::Underwater {
        return Err(Error::Contract(format!("enhance expects an underwater image, got {:?} ({})", img.domain, img.id)));
    }
    let x = stack_images::<f32>(&[&img.pixels])?;
    let y = g.apply(&x)?;
    let shape = img.pixels.shape().to_vec();
    Ok(ImageSample {
        id: img.id.clone(),
        pixels: y.reshape(&shape)?,
        boxes: img.boxes.clone(),
        domain: Domain::Clear,
    })
}

fn check_scores<T: Scalar>(tape: &Tape<T>, v: Var, what: &str) -> Result<()> {
    if tape.value(v).all_finite() {
        Ok(())
    } else {
        Err(Error::Numerical(format!("non-finite discriminator scores ({what})")))
    }
}

/// `mean log D(real) + mean log(1 - D(fake))` with scores clamped to
/// `[ε, 1 - ε]`.
pub fn adversarial_loss<T: Scalar>(tape: &mut Tape<T>, real: Var, fake: Var) -> Result<Var> {
    check_scores(tape, real, "real")?;
    check_scores(tape, fake, "fake")?;
    let eps = T::from_f64(LOG_EPS);
    let lr = tape.log_clamp(real, eps);
    let lr = tape.mean(lr);
    let inv = tape.affine(fake, -T::one(), T::one());
    let lf = tape.log_clamp(inv, eps);
    let lf = tape.mean(lf);
    Ok(tape.add(lr, lf)?)
}

/// Quantity the discriminator minimizes.
pub fn discriminator_objective<T: Scalar>(tape: &mut Tape<T>, real: Var, fake: Var, form: AdversarialForm) -> Result<Var> {
    match form {
        AdversarialForm::NonSaturating | AdversarialForm::Minimax => {
            let l = adversarial_loss(tape, real, fake)?;
            Ok(tape.scale(l, -T::one()))
        }
        AdversarialForm::LeastSquares => {
            let ones = tape.constant(Tensor::full(tape.value(real).shape(), T::one()));
            let zeros = tape.constant(Tensor::zeros(tape.value(fake).shape()));
            let a = tape.mse_mean(real, ones)?;
            let b = tape.mse_mean(fake, zeros)?;
            Ok(tape.add(a, b)?)
        }
    }
}

/// Quantity a generator minimizes given the discriminator's scores on its output.
pub fn generator_objective<T: Scalar>(tape: &mut Tape<T>, fake: Var, form: AdversarialForm) -> Result<Var> {
    check_scores(tape, fake, "fake")?;
    let eps = T::from_f64(LOG_EPS);
    match form {
        AdversarialForm::NonSaturating => {
            let l = tape.log_clamp(fake, eps);
            let l = tape.mean(l);
            Ok(tape.scale(l, -T::one()))
        }
        AdversarialForm::Minimax => {
            let inv = tape.affine(fake, -T::one(), T::one());
            let l = tape.log_clamp(inv, eps);
            Ok(tape.mean(l))
        }
        AdversarialForm::LeastSquares => {
            let ones = tape.constant(Tensor::full(tape.value(fake).shape(), T::one()));
            Ok(tape.mse_mean(fake, ones)?)
        }
    }
}

/// Images produced by one pass around both cycles.
#[derive(Debug, Clone, Copy)]
pub struct CycleVars {
    pub fake_a: Var,
    pub rec_u: Var,
    pub fake_u: Var,
    pub rec_a: Var,
}

pub fn cycle_forward<T: Scalar>(
    tape: &mut Tape<T>,
    g: &GeneratorPair<T>,
    bu2a: &Bound,
    ba2u: &Bound,
    x_u: Var,
    x_a: Var,
) -> Result<CycleVars> {
    let fake_a = g.u2a.forward(tape, bu2a, x_u)?;
    let rec_u = g.a2u.forward(tape, ba2u, fake_a)?;
    let fake_u = g.a2u.forward(tape, ba2u, x_a)?;
    let rec_a = g.u2a.forward(tape, bu2a, fake_u)?;
    Ok(CycleVars {
        fake_a,
        rec_u,
        fake_u,
        rec_a,
    })
}

/// `mean|rec_u - x_u| + mean|rec_a - x_a|`.
pub fn cycle_image_loss<T: Scalar>(tape: &mut Tape<T>, x_u: Var, x_a: Var, c: &CycleVars) -> Result<Var> {
    let a = tape.l1_mean(c.rec_u, x_u)?;
    let b = tape.l1_mean(c.rec_a, x_a)?;
    Ok(tape.add(a, b)?)
}

/// Squared feature distance between originals and reconstructions: per
/// extractor level the mean over its elements, summed over levels and domains.
pub fn perceptual_cycle_loss<T: Scalar>(
    tape: &mut Tape<T>,
    phi: &PerceptualExtractor<T>,
    bphi: &Bound,
    x_u: Var,
    x_a: Var,
    c: &CycleVars,
) -> Result<Var> {
    let mut terms = Vec::new();
    for (orig, rec) in [(x_u, c.rec_u), (x_a, c.rec_a)] {
        let fo = phi.forward(tape, bphi, orig)?;
        let fr = phi.forward(tape, bphi, rec)?;
        for (a, b) in fo.into_iter().zip(fr) {
            if tape.value(a).shape() != tape.value(b).shape() {
                return Err(Error::Shape(bgdet_tensor::TensorError::Shape("perceptual feature shape mismatch".into())));
            }
            terms.push((tape.mse_mean(a, b)?, T::one()));
        }
    }
    Ok(tape.weighted_sum(&terms)?)
}

/// Scalar parts of the enhancer objective for one batch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnhancerLossParts {
    pub gan_u2a: f64,
    pub gan_a2u: f64,
    pub cycle: f64,
    pub perceptual: f64,
}

/// `L_GAN(U→A) + L_GAN(A→U) + λ₁·L_cyc + λ₂·L_cp`.
pub fn total_enhancer_loss(parts: &EnhancerLossParts, w: &EnhancerLossWeights) -> f64 {
    parts.gan_u2a + parts.gan_a2u + w.lambda1 * parts.cycle + w.lambda2 * parts.perceptual
}

/// Tape version of [`total_enhancer_loss`].
pub fn total_enhancer_loss_var<T: Scalar>(
    tape: &mut Tape<T>,
    gan_u2a: Var,
    gan_a2u: Var,
    cycle: Var,
    perceptual: Var,
    w: &EnhancerLossWeights,
) -> Result<Var> {
    Ok(tape.weighted_sum(&[
        (gan_u2a, T::one()),
        (gan_a2u, T::one()),
        (cycle, T::from_f64(w.lambda1)),
        (perceptual, T::from_f64(w.lambda2)),
    ])?)
}
