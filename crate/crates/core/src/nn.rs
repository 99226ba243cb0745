//! Parameterized layers shared by the generator, discriminator and detector.

use bgdet_tensor::{Bound, ParamId, ParamStore, Scalar, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::Result;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// Uniform in ±sqrt(6 / fan_in).
    HeUniform,
    /// Uniform in ±bound.
    Uniform(f64),
}

/// A 2-D convolution whose weights live in a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Conv {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub in_c: usize,
    pub out_c: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv {
    /// Registers `<name>.weight` (and `<name>.bias`, zero) in `store`.
    /// Padding is `kernel / 2` for odd kernels and `(kernel - stride) / 2` otherwise.
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        in_c: usize,
        out_c: usize,
        kernel: usize,
        stride: usize,
        bias: bool,
        init: Init,
    ) -> Self {
        let fan_in = (in_c * kernel * kernel) as f64;
        let bound = match init {
            Init::HeUniform => (6.0 / fan_in).sqrt(),
            Init::Uniform(b) => b,
        };
        let n = out_c * in_c * kernel * kernel;
        let vals: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..=1.0) * bound).collect();
        let w = store.add(
            format!("{name}.weight"),
            Tensor::from_f64(&[out_c, in_c, kernel, kernel], &vals).expect("sized"),
        );
        let b = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros(&[out_c])));
        let pad = if kernel % 2 == 1 { kernel / 2 } else { (kernel - stride) / 2 };
        Self {
            w,
            b,
            in_c,
            out_c,
            kernel,
            stride,
            pad,
        }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        let b = self.b.map(|id| p.var(id));
        Ok(tape.conv2d(x, p.var(self.w), b, self.stride, self.pad)?)
    }

    pub fn set_bias<T: Scalar>(&self, store: &mut ParamStore<T>, f: impl Fn(usize) -> f64) {
        if let Some(id) = self.b {
            for (i, v) in store.get_mut(id).data_mut().iter_mut().enumerate() {
                *v = T::from_f64(f(i));
            }
        }
    }
}

/// Deterministic RNG for network initialization.
pub fn init_rng(seed: u64, stream: &str) -> ChaCha8Rng {
    let mut s = seed ^ 0x5851_F42D_4C95_7F2D;
    for b in stream.bytes() {
        s = s.rotate_left(7) ^ u64::from(b);
        s = s.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    }
    ChaCha8Rng::seed_from_u64(s)
}

/// Stacks `[3, h, w]` images into a `[n, 3, h, w]` batch.
pub fn stack_images<T: Scalar>(images: &[&Tensor<f32>]) -> Result<Tensor<T>> {
    let parts: Vec<Tensor<f32>> = images
        .iter()
        .map(|t| {
            let mut shape = vec![1];
            shape.extend_from_slice(t.shape());
            (*t).clone().reshape(&shape)
        })
        .collect::<std::result::Result<_, _>>()?;
    let refs: Vec<&Tensor<f32>> = parts.iter().collect();
    let batch = Tensor::cat0(&refs)?;
    Ok(batch.cast())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conv_registers_named_params() {
        let mut store = ParamStore::<f32>::new();
        let mut rng = init_rng(1, "x");
        let c = Conv::new(&mut store, &mut rng, "stem", 3, 8, 3, 2, true, Init::HeUniform);
        assert_eq!(store.get(c.w).shape(), &[8, 3, 3, 3]);
        assert!(store.id("stem.bias").is_some());
        assert_eq!(c.pad, 1);
        let bound = (6.0f32 / 27.0).sqrt();
        assert!(store.get(c.w).data().iter().all(|v| v.abs() <= bound));
        let d = Conv::new(&mut store, &mut rng, "d", 3, 8, 4, 2, false, Init::Uniform(0.1));
        assert_eq!(d.pad, 1);
        assert!(d.b.is_none());
    }

    #[test]
    fn init_streams_differ() {
        let a: u64 = init_rng(1, "a").random();
        let b: u64 = init_rng(1, "b").random();
        let a2: u64 = init_rng(1, "a").random();
        assert_ne!(a, b);
        assert_eq!(a, a2);
    }
}
