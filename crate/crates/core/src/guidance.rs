//! Feature guided module: consistency between shallow detector features of
//! the detection branch (raw image) and the frozen enhancement branch
//! (enhanced image).

use std::fmt;

use bgdet_tensor::{Scalar, Tape, Tensor, TensorError, Var};
use serde::{Deserialize, Serialize};

use crate::detector::{Detector, TAP_NAMES};
use crate::enhancer::Generator;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TapLevel {
    Conv1,
    Conv2,
    Csp,
}

impl TapLevel {
    pub const ALL: [TapLevel; 3] = [TapLevel::Conv1, TapLevel::Conv2, TapLevel::Csp];

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for TapLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(TAP_NAMES[self.index()])
    }
}

/// How a level's squared error is averaged.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    /// Mean over channels·h·w (and batch).
    #[default]
    ChannelMean,
    /// Sum over channels, mean over h·w (and batch).
    SpatialMean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GuidanceWeights {
    pub mu1: f64,
    pub mu2: f64,
    pub mu3: f64,
    pub levels: Vec<TapLevel>,
    pub normalization: Normalization,
}

impl Default for GuidanceWeights {
    fn default() -> Self {
        Self {
            mu1: 1.0,
            mu2: 1.0,
            mu3: 1.0,
            levels: vec![TapLevel::Conv1],
            normalization: Normalization::ChannelMean,
        }
    }
}

impl GuidanceWeights {
    pub fn mu(&self, level: TapLevel) -> f64 {
        [self.mu1, self.mu2, self.mu3][level.index()]
    }

    pub fn enabled(&self, level: TapLevel) -> bool {
        self.levels.contains(&level)
    }

    pub fn validate(&self) -> Result<()> {
        if [self.mu1, self.mu2, self.mu3].iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::Config(format!("guidance weights must be finite and >= 0: {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TotalLossWeights {
    pub eta1: f64,
    pub eta2: f64,
}

impl Default for TotalLossWeights {
    fn default() -> Self {
        Self { eta1: 1.0, eta2: 0.05 }
    }
}

impl TotalLossWeights {
    pub fn validate(&self) -> Result<()> {
        if [self.eta1, self.eta2].iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::Config(format!("eta weights must be finite and >= 0: {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TapSource {
    DetectionBranch,
    EnhancementBranch,
}

/// Tap activations of one branch, indexed by level.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureTapSet {
    pub source: TapSource,
    pub taps: [Tensor<f32>; 3],
}

impl FeatureTapSet {
    pub fn get(&self, level: TapLevel) -> &Tensor<f32> {
        &self.taps[level.index()]
    }
}

/// Squared-error consistency between one pair of tap maps.
pub fn feature_consistency_loss<T: Scalar>(tape: &mut Tape<T>, f: Var, i: Var, level: TapLevel, norm: Normalization) -> Result<Var> {
    let (fs, is) = (tape.value(f).shape().to_vec(), tape.value(i).shape().to_vec());
    if fs != is {
        return Err(Error::Shape(TensorError::Shape(format!("tap {level}: detection branch {fs:?} vs enhancement branch {is:?}"))));
    }
    let m = tape.mse_mean(f, i)?;
    Ok(match norm {
        Normalization::ChannelMean => m,
        Normalization::SpatialMean => {
            let channels = if fs.len() == 4 { fs[1] } else { fs[0] };
            tape.scale(m, T::from_f64(channels as f64))
        }
    })
}

/// `Σ μ_l · L_con,l` over enabled levels. Returns the node and every
/// level's unweighted value (0 for disabled levels).
pub fn full_guided_loss<T: Scalar>(
    tape: &mut Tape<T>,
    f_taps: &[Option<Var>; 3],
    i_taps: &[Option<Var>; 3],
    w: &GuidanceWeights,
) -> Result<(Var, [f64; 3])> {
    let mut per_level = [0.0; 3];
    let mut terms = Vec::new();
    for level in TapLevel::ALL {
        if !w.enabled(level) {
            continue;
        }
        let k = level.index();
        let (Some(f), Some(i)) = (f_taps[k], i_taps[k]) else {
            return Err(Error::Contract(format!("enabled tap {level} missing from a tap set")));
        };
        let l = feature_consistency_loss(tape, f, i, level, w.normalization)?;
        per_level[k] = tape.item(l).as_f64();
        terms.push((l, T::from_f64(w.mu(level))));
    }
    let total = if terms.is_empty() {
        tape.constant(Tensor::scalar(T::zero()))
    } else {
        tape.weighted_sum(&terms)?
    };
    Ok((total, per_level))
}

/// `η₁·L_det + η₂·L_FGM`.
pub fn total_loss(l_det: f64, l_fgm: f64, w: &TotalLossWeights) -> f64 {
    w.eta1 * l_det + w.eta2 * l_fgm
}

pub fn total_loss_var<T: Scalar>(tape: &mut Tape<T>, l_det: Var, l_fgm: Var, w: &TotalLossWeights) -> Result<Var> {
    Ok(tape.weighted_sum(&[(l_det, T::from_f64(w.eta1)), (l_fgm, T::from_f64(w.eta2))])?)
}

/// Generator plus detection subnet. Once frozen it serves as the guidance
/// teacher and refuses to run unless its weights are unchanged.
#[derive(Debug, Clone, PartialEq)]
pub struct EnhancementBranch {
    pub generator: Generator<f32>,
    pub dsn: Detector<f32>,
    frozen_checksum: Option<String>,
}

impl EnhancementBranch {
    pub fn new(generator: Generator<f32>, dsn: Detector<f32>) -> Self {
        Self {
            generator,
            dsn,
            frozen_checksum: None,
        }
    }

    /// Combined checksum of generator and DSN parameters.
    pub fn checksum(&self) -> String {
        format!("{}:{}", self.generator.store.checksum(), self.dsn.store.checksum())
    }

    /// Records the current checksum; later teacher calls verify against it.
    pub fn freeze(&mut self) -> String {
        let c = self.checksum();
        self.frozen_checksum = Some(c.clone());
        c
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen_checksum.is_some()
    }

    pub fn frozen_checksum(&self) -> Option<&str> {
        self.frozen_checksum.as_deref()
    }

    /// Errors unless frozen and unchanged since freezing.
    pub fn verify_frozen(&self) -> Result<()> {
        match &self.frozen_checksum {
            None => Err(Error::Contract("enhancement branch must be frozen before guidance".into())),
            Some(c) if *c != self.checksum() => Err(Error::Contract("frozen enhancement branch parameters changed".into())),
            Some(_) => Ok(()),
        }
    }

    /// Enhanced images and DSN taps on them, for a `[n, 3, h, w]` batch of
    /// raw underwater images.
    pub fn teacher_taps(&self, raw: &Tensor<f32>) -> Result<FeatureTapSet> {
        self.verify_frozen()?;
        let enhanced = self.generator.apply(raw)?;
        let mut tape = Tape::new();
        let p = self.dsn.store.bind(&mut tape, false);
        let x = tape.constant(enhanced);
        let (taps, _) = self.dsn.backbone_forward(&mut tape, &p, x)?;
        Ok(FeatureTapSet {
            source: TapSource::EnhancementBranch,
            taps: taps.map(|t| tape.value(t).clone()),
        })
    }
}

/// `(F, I)`: detection-branch taps on the raw batch and frozen
/// enhancement-branch taps on its enhanced version.
pub fn extract_pair(det: &Detector<f32>, enh: &EnhancementBranch, raw: &Tensor<f32>) -> Result<(FeatureTapSet, FeatureTapSet)> {
    let teacher = enh.teacher_taps(raw)?;
    let mut tape = Tape::new();
    let p = det.store.bind(&mut tape, false);
    let x = tape.constant(raw.clone());
    let (taps, _) = det.backbone_forward(&mut tape, &p, x)?;
    let student = FeatureTapSet {
        source: TapSource::DetectionBranch,
        taps: taps.map(|t| tape.value(t).clone()),
    };
    Ok((student, teacher))
}
