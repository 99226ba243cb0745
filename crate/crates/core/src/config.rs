//! Run configuration: one TOML file fully determines every command.

use std::fs;
use std::path::{Path, PathBuf};

use bgdet_tensor::OptimizerKind;
use serde::{Deserialize, Serialize};

use crate::datagen::{DatasetSpec, DegradationParams, DEFAULT_CLASSES};
use crate::detector::{DetectionLossWeights, DetectorConfig, LocLoss};
use crate::enhancer::{AdversarialForm, DiscriminatorConfig, EnhancerLossWeights, GeneratorConfig};
use crate::guidance::{GuidanceWeights, TotalLossWeights};
use crate::{Error, Result};

/// Environment variable consulted when neither the command line nor the
/// config file sets a seed.
pub const SEED_ENV: &str = "BGDET_SEED";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerChoice {
    Sgd,
    Adam,
}

/// Hyperparameters of one training stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StagePlan {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerChoice,
    pub lr: f64,
    /// Final learning rate as a fraction of `lr`.
    pub lrf: f64,
    /// SGD momentum, or Adam β₁.
    pub momentum: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default)]
    pub weight_decay: f64,
    /// Linear learning-rate warmup length in optimizer steps.
    #[serde(default)]
    pub warmup_steps: usize,
    /// Precompute frozen-network outputs (stage B enhanced images, stage D
    /// teacher taps) once instead of per step.
    #[serde(default = "default_true")]
    pub cache: bool,
}

fn default_beta2() -> f64 {
    0.999
}

fn default_true() -> bool {
    true
}

impl StagePlan {
    pub fn sgd(epochs: usize, batch_size: usize, lr: f64, lrf: f64) -> Self {
        Self {
            epochs,
            batch_size,
            optimizer: OptimizerChoice::Sgd,
            lr,
            lrf,
            momentum: 0.937,
            beta2: default_beta2(),
            weight_decay: 5e-4,
            warmup_steps: 0,
            cache: true,
        }
    }

    pub fn adam(epochs: usize, batch_size: usize, lr: f64, beta1: f64) -> Self {
        Self {
            epochs,
            batch_size,
            optimizer: OptimizerChoice::Adam,
            lr,
            lrf: 1.0,
            momentum: beta1,
            beta2: default_beta2(),
            weight_decay: 0.0,
            warmup_steps: 0,
            cache: true,
        }
    }

    pub fn optimizer_kind(&self) -> OptimizerKind {
        match self.optimizer {
            OptimizerChoice::Sgd => OptimizerKind::Sgd {
                momentum: self.momentum,
                weight_decay: self.weight_decay,
            },
            OptimizerChoice::Adam => OptimizerKind::Adam {
                beta1: self.momentum,
                beta2: self.beta2,
                eps: 1e-8,
                weight_decay: self.weight_decay,
            },
        }
    }

    pub fn validate(&self, name: &str) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("stage {name}: {m}")));
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return bad("lr must be positive");
        }
        if !(self.lrf.is_finite() && self.lrf > 0.0) {
            return bad("lrf must be positive");
        }
        if !(0.0..1.0).contains(&self.momentum) || !(0.0..1.0).contains(&self.beta2) {
            return bad("momentum / beta2 must lie in [0, 1)");
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return bad("weight_decay must be >= 0");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StagesConfig {
    pub a: StagePlan,
    pub b: StagePlan,
    pub c: StagePlan,
    pub d: StagePlan,
}

impl StagesConfig {
    /// Hyperparameters used for the published runs (416×416 inputs, pretrained detectors).
    pub fn published() -> Self {
        Self {
            a: StagePlan::adam(50, 2, 1e-4, 0.5),
            b: StagePlan::sgd(300, 16, 1e-2, 1e-2),
            c: StagePlan::sgd(300, 16, 1e-3, 1e-3),
            d: StagePlan::sgd(300, 16, 1e-2, 1e-2),
        }
    }

    /// Desk-scale preset for 64×64 synthetic data trained from scratch.
    pub fn desk() -> Self {
        let det = |epochs, lr| StagePlan {
            lrf: 1e-2,
            warmup_steps: 100,
            ..StagePlan::adam(epochs, 16, lr, 0.9)
        };
        let mut s = Self {
            a: StagePlan::adam(5, 2, 2e-4, 0.5),
            b: det(30, 2e-3),
            c: det(20, 2e-4),
            d: det(30, 2e-3),
        };
        s.c.warmup_steps = 0;
        s
    }
}

impl Default for StagesConfig {
    fn default() -> Self {
        Self::desk()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub root: PathBuf,
    pub n_train: usize,
    pub n_test: usize,
    pub image_size: [usize; 2],
    pub classes: Vec<String>,
    pub objects_per_image: [usize; 2],
}

impl Default for DatasetConfig {
    fn default() -> Self {
        let spec = DatasetSpec::default();
        Self {
            root: PathBuf::from("data/synthetic"),
            n_train: spec.n_train,
            n_test: spec.n_test,
            image_size: spec.image_size,
            classes: DEFAULT_CLASSES.iter().map(|s| s.to_string()).collect(),
            objects_per_image: spec.objects_per_image,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DegradationConfig {
    pub underwater: DegradationParams,
    pub clear: DegradationParams,
}

impl Default for DegradationConfig {
    fn default() -> Self {
        Self {
            underwater: DegradationParams::underwater(),
            clear: DegradationParams::clear_water(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub generator: GeneratorConfig,
    pub discriminator: DiscriminatorConfig,
    pub detector: DetectorConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub enhancer: EnhancerLossWeights,
    pub adversarial: AdversarialForm,
    pub detection: DetectionLossWeights,
    pub loc: LocLoss,
    pub guidance: GuidanceWeights,
    pub total: TotalLossWeights,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            enhancer: EnhancerLossWeights::default(),
            adversarial: AdversarialForm::NonSaturating,
            detection: DetectionLossWeights::default(),
            loc: LocLoss::Ciou,
            guidance: GuidanceWeights::default(),
            total: TotalLossWeights::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InferenceMode {
    /// Detection branch on raw images.
    #[default]
    DetectOnly,
    /// Stage-A enhancer followed by the stage-B detector.
    Separate,
    /// Jointly optimized enhancer and detector from stage C.
    Cascaded,
}

impl InferenceMode {
    pub fn as_str(self) -> &'static str {
        match self {
            InferenceMode::DetectOnly => "detect_only",
            InferenceMode::Separate => "separate",
            InferenceMode::Cascaded => "cascaded",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ApInterpolation {
    /// Area under the precision envelope at every recall change.
    #[default]
    AllPoint,
    /// Envelope sampled at 101 recall points.
    Point101,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub conf_thresh: f64,
    pub nms_iou: f64,
    pub interpolation: ApInterpolation,
    pub fps_warmup: usize,
    pub fps_iters: usize,
    pub mode: InferenceMode,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            conf_thresh: 0.001,
            nms_iou: 0.6,
            interpolation: ApInterpolation::AllPoint,
            fps_warmup: 5,
            fps_iters: 50,
            mode: InferenceMode::DetectOnly,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "default_run_id")]
    pub run_id: String,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub dataset: DatasetConfig,
    #[serde(default)]
    pub degradation: DegradationConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub loss: LossConfig,
    #[serde(default)]
    pub stages: StagesConfig,
    #[serde(default)]
    pub eval: EvalConfig,
}

fn default_run_id() -> String {
    "desk".into()
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("runs")
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            run_id: default_run_id(),
            output_dir: default_output_dir(),
            seed: None,
            dataset: DatasetConfig::default(),
            degradation: DegradationConfig::default(),
            model: ModelConfig::default(),
            loss: LossConfig::default(),
            stages: StagesConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::Config(format!("config file {} not found", path.display())),
            _ => Error::io(path, e),
        })?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Seed precedence: explicit override, then the config file, then
    /// `BGDET_SEED`, then 0. The result is written back into `seed`.
    pub fn resolve_seed(&mut self, cli: Option<u64>) -> Result<u64> {
        let env = match std::env::var(SEED_ENV) {
            Ok(v) => Some(
                v.trim()
                    .parse::<u64>()
                    .map_err(|_| Error::Config(format!("{SEED_ENV}={v:?} is not an unsigned integer")))?,
            ),
            Err(_) => None,
        };
        let seed = cli.or(self.seed).or(env).unwrap_or(0);
        self.seed = Some(seed);
        Ok(seed)
    }

    pub fn seed(&self) -> u64 {
        self.seed.unwrap_or(0)
    }

    pub fn dataset_spec(&self) -> DatasetSpec {
        DatasetSpec {
            n_train: self.dataset.n_train,
            n_test: self.dataset.n_test,
            image_size: self.dataset.image_size,
            classes: self.dataset.classes.clone(),
            objects_per_image: self.dataset.objects_per_image,
            seed: self.seed(),
        }
    }

    pub fn run_dir(&self) -> PathBuf {
        self.output_dir.join(&self.run_id)
    }

    pub fn validate(&self) -> Result<()> {
        if self.run_id.is_empty() || self.run_id.contains(['/', '\\']) {
            return Err(Error::Config(format!("run_id {:?} must be a plain name", self.run_id)));
        }
        self.dataset_spec().validate()?;
        self.degradation.underwater.validate()?;
        self.degradation.clear.validate()?;
        self.model.detector.validate()?;
        if self.model.generator.base_width == 0 || self.model.discriminator.base_width == 0 {
            return Err(Error::Config("network widths must be positive".into()));
        }
        self.loss.enhancer.validate()?;
        self.loss.detection.validate()?;
        self.loss.guidance.validate()?;
        self.loss.total.validate()?;
        for (name, plan) in [("a", &self.stages.a), ("b", &self.stages.b), ("c", &self.stages.c), ("d", &self.stages.d)] {
            plan.validate(name)?;
        }
        let e = &self.eval;
        if !(0.0..=1.0).contains(&e.conf_thresh) || !(0.0..=1.0).contains(&e.nms_iou) {
            return Err(Error::Config("eval thresholds must lie in [0, 1]".into()));
        }
        if e.fps_iters == 0 {
            return Err(Error::Config("fps_iters must be positive".into()));
        }
        Ok(())
    }
}
