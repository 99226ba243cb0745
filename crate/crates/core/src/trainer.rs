//! The four training stages, with per-epoch checkpoints, resume and
//! parameter freezing.
//!
//! * A: enhancer (generators + discriminators) on unpaired pools.
//! * B: detection subnet on stage-A enhanced images.
//! * C: generator + detection subnet jointly, detection loss only.
//! * D: detection branch on raw images with guidance from the frozen C branch.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use bgdet_tensor::{Optimizer, ParamStore, Tape, Tensor};
use log::info;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, OptimizerState};
use crate::config::{RunConfig, StagePlan};
use crate::datagen::{self, BoxAnnotation, Domain, ImageSample, Split};
use crate::detector::{detection_loss, Detector, LossComponents};
use crate::enhancer::{
    adversarial_loss, cycle_forward, cycle_image_loss, discriminator_objective, generator_objective, perceptual_cycle_loss,
    total_enhancer_loss, DiscriminatorPair, EnhancerLossParts, Generator, GeneratorPair, PerceptualExtractor,
};
use crate::guidance::{full_guided_loss, total_loss_var, EnhancementBranch, TapLevel};
use crate::nn::stack_images;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Stage {
    A,
    B,
    C,
    D,
}

impl Stage {
    pub const ALL: [Stage; 4] = [Stage::A, Stage::B, Stage::C, Stage::D];

    /// Directory and checkpoint tag.
    pub fn name(self) -> &'static str {
        match self {
            Stage::A => "A_enhancer",
            Stage::B => "B_dsn_pretrain",
            Stage::C => "C_joint_enh_branch",
            Stage::D => "D_guided_detection",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|st| st.name().eq_ignore_ascii_case(s) || st.name()[..1].eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown stage {s:?} (expected A, B, C or D)")))
    }

    pub fn prerequisites(self) -> &'static [Stage] {
        match self {
            Stage::A => &[],
            Stage::B => &[Stage::A],
            Stage::C => &[Stage::A, Stage::B],
            Stage::D => &[Stage::C],
        }
    }

    pub fn plan(self, cfg: &RunConfig) -> &StagePlan {
        match self {
            Stage::A => &cfg.stages.a,
            Stage::B => &cfg.stages.b,
            Stage::C => &cfg.stages.c,
            Stage::D => &cfg.stages.d,
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Cosine interpolation from `lr0` at epoch 0 to `lr0·lrf` at the last epoch.
pub fn lr_schedule(lr0: f64, lrf: f64, epoch: usize, total_epochs: usize) -> f64 {
    if total_epochs <= 1 {
        return lr0;
    }
    let t = epoch as f64 / (total_epochs - 1) as f64;
    lr0 * ((1.0 - (PI * t).cos()) / 2.0 * (lrf - 1.0) + 1.0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOptions {
    /// Continue from the stage's own checkpoint.
    pub resume: bool,
    /// Stop after this many epochs in this invocation.
    pub stop_after: Option<usize>,
    /// Stage D only: build the guidance graph. With `false` the stage is a
    /// plain detection loop.
    pub attach_guidance: bool,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            resume: false,
            stop_after: None,
            attach_guidance: true,
        }
    }
}

/// Where a stage reads prerequisite checkpoints and writes its own outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct StageIo {
    pub input_dir: PathBuf,
    pub output_dir: PathBuf,
}

impl StageIo {
    pub fn single(run_dir: PathBuf) -> Self {
        Self {
            input_dir: run_dir.clone(),
            output_dir: run_dir,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub stage: Stage,
    pub checkpoint: PathBuf,
    pub epochs_done: usize,
    pub complete: bool,
    /// Parameter checksums of every saved network.
    pub checksums: BTreeMap<String, String>,
    /// Mean total loss over the last trained epoch.
    pub last_epoch_loss: Option<f64>,
}

pub fn stage_dir(run_dir: &Path, stage: Stage) -> PathBuf {
    run_dir.join(stage.name())
}

pub fn checkpoint_path(run_dir: &Path, stage: Stage) -> PathBuf {
    stage_dir(run_dir, stage).join("checkpoint.bin")
}

/// Loads a finished stage checkpoint from `run_dir`.
pub fn load_complete(run_dir: &Path, stage: Stage) -> Result<Checkpoint> {
    let path = checkpoint_path(run_dir, stage);
    if !path.exists() {
        return Err(Error::Prerequisite(format!(
            "stage {stage} has not been run (missing {})",
            path.display()
        )));
    }
    let ckpt = Checkpoint::load(&path)?;
    if ckpt.stage != stage.name() {
        return Err(Error::artifact(&path, format!("checkpoint is tagged {:?}, expected {stage}", ckpt.stage)));
    }
    if !ckpt.is_complete() {
        return Err(Error::Prerequisite(format!(
            "stage {stage} is incomplete ({}/{} epochs); resume it first",
            ckpt.epochs_done, ckpt.total_epochs
        )));
    }
    Ok(ckpt)
}

fn epoch_rng(seed: u64, stage: Stage, epoch: usize) -> ChaCha8Rng {
    let mut s = seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (stage as u64 + 1).wrapping_mul(0xD1B5_4A32_D192_ED03);
    s ^= (epoch as u64).wrapping_mul(0x8CB9_2BA7_2F3D_8DD7);
    ChaCha8Rng::seed_from_u64(s)
}

/// Training splits needed by the stages.
#[derive(Debug, Clone)]
pub struct TrainData {
    pub underwater: Vec<ImageSample>,
    pub clear: Vec<ImageSample>,
}

fn load_split(root: &Path, split: Split, domain: Domain) -> Result<Vec<ImageSample>> {
    let dir = root.join("images").join(split.as_str());
    if !dir.is_dir() {
        return Err(Error::Prerequisite(format!("dataset split {} not found; run `gen` first", dir.display())));
    }
    let samples = datagen::load_dataset(root, split, domain, None)?;
    if samples.is_empty() {
        return Err(Error::Prerequisite(format!("dataset split {} is empty", dir.display())));
    }
    Ok(samples)
}

/// Fails when the dataset on disk was generated from a different spec.
pub fn check_dataset(cfg: &RunConfig) -> Result<()> {
    let root = &cfg.dataset.root;
    if !root.join(datagen::MANIFEST_FILE).exists() {
        return Err(Error::Prerequisite(format!("no dataset at {}; run `gen` first", root.display())));
    }
    let m = datagen::read_manifest(root)?;
    if m.spec != cfg.dataset_spec() || m.underwater != cfg.degradation.underwater || m.clear != cfg.degradation.clear {
        return Err(Error::Config(format!(
            "dataset at {} was generated from a different spec or seed; rerun `gen --force`",
            root.display()
        )));
    }
    Ok(())
}

pub fn load_train_data(cfg: &RunConfig, with_clear: bool) -> Result<TrainData> {
    check_dataset(cfg)?;
    let root = &cfg.dataset.root;
    let underwater = load_split(root, Split::Train, Domain::Underwater)?;
    let clear = if with_clear {
        load_split(&datagen::clear_root(root), Split::Train, Domain::Clear)?
    } else {
        Vec::new()
    };
    let [h, w] = cfg.dataset.image_size;
    if let Some(bad) = underwater.iter().chain(&clear).find(|s| s.height() != h || s.width() != w) {
        return Err(Error::Config(format!(
            "image {} is {}x{}, config expects {h}x{w}",
            bad.id,
            bad.height(),
            bad.width()
        )));
    }
    Ok(TrainData { underwater, clear })
}

pub fn load_test_data(cfg: &RunConfig) -> Result<Vec<ImageSample>> {
    check_dataset(cfg)?;
    load_split(&cfg.dataset.root, Split::Test, Domain::Underwater)
}

/// Per-step CSV with resume-aware truncation.
struct CsvLog {
    out: BufWriter<fs::File>,
    path: PathBuf,
}

impl CsvLog {
    fn open(path: &Path, header: &str, keep_rows: Option<usize>) -> Result<Self> {
        let mut kept = Vec::new();
        if let Some(n) = keep_rows {
            if let Ok(f) = fs::File::open(path) {
                kept = BufReader::new(f)
                    .lines()
                    .skip(1)
                    .take(n)
                    .collect::<std::io::Result<Vec<_>>>()
                    .map_err(|e| Error::io(path, e))?;
            }
        }
        let f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut out = BufWriter::new(f);
        writeln!(out, "{header}").map_err(|e| Error::io(path, e))?;
        for line in kept {
            writeln!(out, "{line}").map_err(|e| Error::io(path, e))?;
        }
        Ok(Self {
            out,
            path: path.to_path_buf(),
        })
    }

    fn row(&mut self, fields: &[String]) -> Result<()> {
        writeln!(self.out, "{}", fields.join(",")).map_err(|e| Error::io(&self.path, e))
    }

    fn flush(&mut self) -> Result<()> {
        self.out.flush().map_err(|e| Error::io(&self.path, e))
    }
}

fn fmt_f(v: f64) -> String {
    format!("{v:.6e}")
}

fn check_finite(v: f64, stage: Stage, epoch: usize, step: usize, what: &str) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::Numerical(format!(
            "stage {stage}: non-finite {what} at epoch {epoch} step {step}; last finite checkpoint kept"
        )))
    }
}

/// Shared bookkeeping of one stage run.
struct StageRun<'a> {
    stage: Stage,
    plan: &'a StagePlan,
    dir: PathBuf,
    snapshot: serde_json::Value,
    start_epoch: usize,
    resumed: Option<Checkpoint>,
}

impl<'a> StageRun<'a> {
    fn begin(cfg: &'a RunConfig, stage: Stage, io: &StageIo, opts: &TrainOptions) -> Result<Self> {
        cfg.validate()?;
        let plan = stage.plan(cfg);
        let dir = stage_dir(&io.output_dir, stage);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let snapshot = serde_json::to_value(cfg).expect("config serializes");
        let mut start_epoch = 0;
        let mut resumed = None;
        if opts.resume {
            let path = dir.join("checkpoint.bin");
            if path.exists() {
                let ckpt = Checkpoint::load(&path)?;
                if ckpt.stage != stage.name() {
                    return Err(Error::artifact(&path, format!("checkpoint is tagged {:?}", ckpt.stage)));
                }
                if ckpt.config != snapshot {
                    return Err(Error::Config(format!(
                        "config differs from the one stored in {}; rerun without --resume",
                        path.display()
                    )));
                }
                start_epoch = ckpt.epochs_done.min(plan.epochs);
                resumed = Some(ckpt);
            }
        }
        let snap_path = dir.join("config.snapshot");
        fs::write(&snap_path, cfg.to_toml()).map_err(|e| Error::io(&snap_path, e))?;
        Ok(Self {
            stage,
            plan,
            dir,
            snapshot,
            start_epoch,
            resumed,
        })
    }

    fn checkpoint_path(&self) -> PathBuf {
        self.dir.join("checkpoint.bin")
    }

    fn end_epoch(&self, stop_after: Option<usize>, epoch: usize) -> bool {
        stop_after.is_some_and(|n| epoch + 1 - self.start_epoch >= n)
    }

    fn restore_store(&self, name: &str, dst: &mut ParamStore<f32>) -> Result<()> {
        if let Some(c) = &self.resumed {
            c.load_into(name, dst, &self.checkpoint_path())?;
        }
        Ok(())
    }

    fn optimizer(&self, name: &str, store: &ParamStore<f32>) -> Result<Optimizer<f32>> {
        match self.resumed.as_ref().and_then(|c| c.optimizer(name)) {
            Some(st) => st.restore(store).map_err(|e| Error::artifact(self.checkpoint_path(), e.to_string())),
            None => Ok(Optimizer::new(self.plan.optimizer_kind(), store)),
        }
    }

    fn lr(&self, epoch: usize, global_step: u64) -> f64 {
        let lr = lr_schedule(self.plan.lr, self.plan.lrf, epoch, self.plan.epochs);
        if self.plan.warmup_steps > 0 && (global_step as usize) < self.plan.warmup_steps {
            lr * (global_step + 1) as f64 / self.plan.warmup_steps as f64
        } else {
            lr
        }
    }

    fn save(
        &self,
        epochs_done: usize,
        stores: &[(&str, &ParamStore<f32>)],
        opts: &[(&str, &Optimizer<f32>)],
        meta: &BTreeMap<String, String>,
    ) -> Result<Checkpoint> {
        let mut c = Checkpoint::new(self.stage.name(), self.snapshot.clone());
        c.epochs_done = epochs_done;
        c.total_epochs = self.plan.epochs;
        c.meta = meta.clone();
        c.stores = stores.iter().map(|(n, s)| (n.to_string(), (*s).clone())).collect();
        c.optimizers = opts.iter().map(|(n, o)| (n.to_string(), OptimizerState::capture(o))).collect();
        c.save(&self.checkpoint_path())?;
        Ok(c)
    }

    fn report(&self, ckpt: &Checkpoint, last: Option<f64>) -> StageReport {
        StageReport {
            stage: self.stage,
            checkpoint: self.checkpoint_path(),
            epochs_done: ckpt.epochs_done,
            complete: ckpt.is_complete(),
            checksums: ckpt.stores.iter().map(|(n, s)| (n.clone(), s.checksum())).collect(),
            last_epoch_loss: last,
        }
    }

    fn keep_rows(&self, steps_per_epoch: usize) -> Option<usize> {
        self.resumed.as_ref().map(|_| self.start_epoch * steps_per_epoch)
    }
}

fn steps_per_epoch(n: usize, batch: usize) -> usize {
    n.div_ceil(batch)
}

/// Runs one stage reading and writing under the config's run directory.
pub fn run_stage(cfg: &RunConfig, stage: Stage, opts: &TrainOptions) -> Result<StageReport> {
    run_stage_in(cfg, stage, opts, &StageIo::single(cfg.run_dir()))
}

pub fn run_stage_in(cfg: &RunConfig, stage: Stage, opts: &TrainOptions, io: &StageIo) -> Result<StageReport> {
    cfg.validate()?;
    // Prerequisites are checked before touching data or outputs.
    let prereqs: Vec<Checkpoint> = stage
        .prerequisites()
        .iter()
        .map(|&p| load_complete(&io.input_dir, p))
        .collect::<Result<_>>()?;
    let data = load_train_data(cfg, stage == Stage::A)?;
    info!("stage {stage}: {} training images", data.underwater.len());
    match stage {
        Stage::A => stage_a(cfg, io, opts, &data),
        Stage::B => stage_b(cfg, io, opts, &data, &prereqs[0]),
        Stage::C => stage_c(cfg, io, opts, &data, &prereqs[0], &prereqs[1]),
        Stage::D => stage_d(cfg, io, opts, &data, &prereqs[0]),
    }
}

fn batch_tensor(images: &[&Tensor<f32>]) -> Result<Tensor<f32>> {
    stack_images::<f32>(images)
}

/// Images and boxes of `idx`, horizontally flipped where `flips` says so.
fn gather(samples: &[ImageSample], idx: &[usize], flips: &[bool]) -> (Vec<ImageSample>, Vec<Vec<BoxAnnotation>>) {
    let imgs: Vec<ImageSample> = idx
        .iter()
        .zip(flips)
        .map(|(&i, &f)| if f { samples[i].flipped_horizontally() } else { samples[i].clone() })
        .collect();
    let boxes = imgs.iter().map(|s| s.boxes.clone()).collect();
    (imgs, boxes)
}

/// Lazily filled per-(image, flip) cache of a frozen network's output.
struct FlipCache<V> {
    slots: Vec<[Option<V>; 2]>,
    enabled: bool,
}

impl<V: Clone> FlipCache<V> {
    fn new(n: usize, enabled: bool) -> Self {
        Self {
            slots: (0..n).map(|_| [None, None]).collect(),
            enabled,
        }
    }

    fn get(&mut self, keys: &[(usize, bool)], mut compute: impl FnMut(&[(usize, bool)]) -> Result<Vec<V>>) -> Result<Vec<V>> {
        if !self.enabled {
            return compute(keys);
        }
        let missing: Vec<(usize, bool)> = keys
            .iter()
            .copied()
            .filter(|&(i, f)| self.slots[i][f as usize].is_none())
            .collect();
        if !missing.is_empty() {
            for (k, v) in missing.iter().zip(compute(&missing)?) {
                self.slots[k.0][k.1 as usize] = Some(v);
            }
        }
        Ok(keys
            .iter()
            .map(|&(i, f)| self.slots[i][f as usize].clone().expect("filled above"))
            .collect())
    }
}

fn split_batch(t: &Tensor<f32>) -> Result<Vec<Tensor<f32>>> {
    let n = t.shape()[0];
    (0..n).map(|i| Ok(t.narrow0(i, 1)?)).collect()
}

// ---------------------------------------------------------------- stage A

#[derive(Debug, Clone, Copy)]
struct EnhancerStepLog {
    parts: EnhancerLossParts,
    total: f64,
}

struct EnhancerNets {
    gens: GeneratorPair<f32>,
    discs: DiscriminatorPair<f32>,
    phi: PerceptualExtractor<f32>,
}

fn enhancer_step(
    nets: &mut EnhancerNets,
    opts: &mut [Optimizer<f32>; 4],
    cfg: &RunConfig,
    x_u: &Tensor<f32>,
    x_a: &Tensor<f32>,
    lr: f64,
) -> Result<EnhancerStepLog> {
    let w = &cfg.loss.enhancer;
    let form = cfg.loss.adversarial;
    // Generators.
    let mut tape = Tape::new();
    let bu2a = nets.gens.u2a.store.bind(&mut tape, true);
    let ba2u = nets.gens.a2u.store.bind(&mut tape, true);
    let bda = nets.discs.d_a.store.bind(&mut tape, false);
    let bdu = nets.discs.d_u.store.bind(&mut tape, false);
    let bphi = nets.phi.store.bind(&mut tape, false);
    let xu = tape.constant(x_u.clone());
    let xa = tape.constant(x_a.clone());
    let cyc = cycle_forward(&mut tape, &nets.gens, &bu2a, &ba2u, xu, xa)?;
    let sa = nets.discs.d_a.forward(&mut tape, &bda, cyc.fake_a)?;
    let su = nets.discs.d_u.forward(&mut tape, &bdu, cyc.fake_u)?;
    let ga = generator_objective(&mut tape, sa, form)?;
    let gu = generator_objective(&mut tape, su, form)?;
    let l_cyc = cycle_image_loss(&mut tape, xu, xa, &cyc)?;
    let l_cp = perceptual_cycle_loss(&mut tape, &nets.phi, &bphi, xu, xa, &cyc)?;
    let g_total = tape.weighted_sum(&[(ga, 1.0), (gu, 1.0), (l_cyc, w.lambda1 as f32), (l_cp, w.lambda2 as f32)])?;
    if !tape.item(g_total).is_finite() {
        return Err(Error::Numerical("non-finite generator objective".into()));
    }
    let mut grads = tape.backward(g_total)?;
    opts[0].step(&mut nets.gens.u2a.store, &bu2a.grads(&mut grads), lr)?;
    opts[1].step(&mut nets.gens.a2u.store, &ba2u.grads(&mut grads), lr)?;
    let fake_a = tape.value(cyc.fake_a).clone();
    let fake_u = tape.value(cyc.fake_u).clone();
    let cycle = tape.item(l_cyc) as f64;
    let perceptual = tape.item(l_cp) as f64;
    drop(tape);

    // Discriminators on the images generated before the generator update.
    let mut tape = Tape::new();
    let bda = nets.discs.d_a.store.bind(&mut tape, true);
    let bdu = nets.discs.d_u.store.bind(&mut tape, true);
    let xu = tape.constant(x_u.clone());
    let xa = tape.constant(x_a.clone());
    let fa = tape.constant(fake_a);
    let fu = tape.constant(fake_u);
    let ra_s = nets.discs.d_a.forward(&mut tape, &bda, xa)?;
    let fa_s = nets.discs.d_a.forward(&mut tape, &bda, fa)?;
    let ru_s = nets.discs.d_u.forward(&mut tape, &bdu, xu)?;
    let fu_s = nets.discs.d_u.forward(&mut tape, &bdu, fu)?;
    let gan_u2a = adversarial_loss(&mut tape, ra_s, fa_s)?;
    let gan_a2u = adversarial_loss(&mut tape, ru_s, fu_s)?;
    let da = discriminator_objective(&mut tape, ra_s, fa_s, form)?;
    let du = discriminator_objective(&mut tape, ru_s, fu_s, form)?;
    let d_total = tape.add(da, du)?;
    let mut grads = tape.backward(d_total)?;
    opts[2].step(&mut nets.discs.d_a.store, &bda.grads(&mut grads), lr)?;
    opts[3].step(&mut nets.discs.d_u.store, &bdu.grads(&mut grads), lr)?;
    let parts = EnhancerLossParts {
        gan_u2a: tape.item(gan_u2a) as f64,
        gan_a2u: tape.item(gan_a2u) as f64,
        cycle,
        perceptual,
    };
    Ok(EnhancerStepLog {
        parts,
        total: total_enhancer_loss(&parts, w),
    })
}

fn stage_a(cfg: &RunConfig, io: &StageIo, opts: &TrainOptions, data: &TrainData) -> Result<StageReport> {
    let run = StageRun::begin(cfg, Stage::A, io, opts)?;
    let plan = run.plan;
    let seed = cfg.seed();
    let mut nets = EnhancerNets {
        gens: GeneratorPair::new(&cfg.model.generator, seed),
        discs: DiscriminatorPair::new(&cfg.model.discriminator, seed),
        phi: PerceptualExtractor::new(),
    };
    let phi_checksum = nets.phi.store.checksum();
    run.restore_store("g_u2a", &mut nets.gens.u2a.store)?;
    run.restore_store("g_a2u", &mut nets.gens.a2u.store)?;
    run.restore_store("d_a", &mut nets.discs.d_a.store)?;
    run.restore_store("d_u", &mut nets.discs.d_u.store)?;
    let mut optims = [
        run.optimizer("g_u2a", &nets.gens.u2a.store)?,
        run.optimizer("g_a2u", &nets.gens.a2u.store)?,
        run.optimizer("d_a", &nets.discs.d_a.store)?,
        run.optimizer("d_u", &nets.discs.d_u.store)?,
    ];
    let (nu, na) = (data.underwater.len(), data.clear.len());
    let spe = steps_per_epoch(nu, plan.batch_size);
    let mut csv = CsvLog::open(
        &run.dir.join("loss.csv"),
        "epoch,step,l_gan_u2a,l_gan_a2u,l_cyc,l_cp,total",
        run.keep_rows(spe),
    )?;
    let meta = BTreeMap::from([("phi_checksum".to_string(), phi_checksum.clone())]);
    let save = |optims: &[Optimizer<f32>; 4], nets: &EnhancerNets, done: usize| {
        run.save(
            done,
            &[
                ("g_u2a", &nets.gens.u2a.store),
                ("g_a2u", &nets.gens.a2u.store),
                ("d_a", &nets.discs.d_a.store),
                ("d_u", &nets.discs.d_u.store),
            ],
            &[("g_u2a", &optims[0]), ("g_a2u", &optims[1]), ("d_a", &optims[2]), ("d_u", &optims[3])],
            &meta,
        )
    };
    let mut ckpt = None;
    let mut last = None;
    for epoch in run.start_epoch..plan.epochs {
        let mut rng = epoch_rng(seed, Stage::A, epoch);
        let mut order_u: Vec<usize> = (0..nu).collect();
        order_u.shuffle(&mut rng);
        let mut order_a: Vec<usize> = (0..na).collect();
        order_a.shuffle(&mut rng);
        let mut sum = 0.0;
        for step in 0..spe {
            let lo = step * plan.batch_size;
            let hi = (lo + plan.batch_size).min(nu);
            let iu: Vec<&Tensor<f32>> = order_u[lo..hi].iter().map(|&i| &data.underwater[i].pixels).collect();
            let ia: Vec<&Tensor<f32>> = (lo..hi).map(|k| &data.clear[order_a[k % na]].pixels).collect();
            let x_u = batch_tensor(&iu)?;
            let x_a = batch_tensor(&ia)?;
            let lr = run.lr(epoch, optims[0].steps());
            let log = enhancer_step(&mut nets, &mut optims, cfg, &x_u, &x_a, lr)?;
            check_finite(log.total, Stage::A, epoch, step, "enhancer loss")?;
            sum += log.total;
            let p = log.parts;
            csv.row(&[
                epoch.to_string(),
                (epoch * spe + step).to_string(),
                fmt_f(p.gan_u2a),
                fmt_f(p.gan_a2u),
                fmt_f(p.cycle),
                fmt_f(p.perceptual),
                fmt_f(log.total),
            ])?;
        }
        csv.flush()?;
        last = Some(sum / spe as f64);
        info!("stage A epoch {}/{}: mean total {:.4}", epoch + 1, plan.epochs, sum / spe as f64);
        ckpt = Some(save(&optims, &nets, epoch + 1)?);
        if run.end_epoch(opts.stop_after, epoch) {
            break;
        }
    }
    if nets.phi.store.checksum() != phi_checksum {
        return Err(Error::Contract("perceptual extractor parameters changed during training".into()));
    }
    let ckpt = match ckpt {
        Some(c) => c,
        None => save(&optims, &nets, run.start_epoch)?,
    };
    Ok(run.report(&ckpt, last))
}

// ------------------------------------------------------- detection stages

fn new_detector(cfg: &RunConfig, name: &str) -> Result<Detector<f32>> {
    Detector::new(&cfg.model.detector, cfg.dataset.classes.len(), cfg.seed(), name)
}

fn new_generator(cfg: &RunConfig) -> Generator<f32> {
    // Same construction as stage A so parameter names and shapes match.
    GeneratorPair::<f32>::new(&cfg.model.generator, cfg.seed()).u2a
}

/// Per-epoch sample order and flip decisions.
fn epoch_plan(seed: u64, stage: Stage, epoch: usize, n: usize) -> (Vec<usize>, Vec<bool>) {
    let mut rng = epoch_rng(seed, stage, epoch);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let flips = (0..n).map(|_| rng.random_bool(0.5)).collect();
    (order, flips)
}

#[derive(Debug, Clone, Copy, Default)]
struct DetStepLog {
    comp: LossComponents,
    l_con: [f64; 3],
    l_fgm: f64,
    total: f64,
}

/// One update of a detector on `x` (stages B and D). `teacher` carries
/// the frozen-branch taps when guidance is attached.
fn detector_step(
    det: &mut Detector<f32>,
    opt: &mut Optimizer<f32>,
    cfg: &RunConfig,
    x: &Tensor<f32>,
    targets: &[Vec<BoxAnnotation>],
    teacher: Option<[Option<Tensor<f32>>; 3]>,
    lr: f64,
) -> Result<DetStepLog> {
    let (_, _, h, w) = x.dims4()?;
    let layout = det.head_layout(h, w);
    let mut tape = Tape::new();
    let p = det.store.bind(&mut tape, true);
    let xv = tape.constant(x.clone());
    let out = det.forward(&mut tape, &p, xv)?;
    let (l_det, comp) = detection_loss(&mut tape, &out.heads, &layout, targets, &cfg.loss.detection, cfg.loss.loc)?;
    let mut log = DetStepLog {
        comp,
        ..Default::default()
    };
    let total = match teacher {
        Some(t) => {
            let i_taps = t.map(|tap| tap.map(|v| tape.constant(v)));
            let f_taps = out.taps.map(Some);
            let (l_fgm, per_level) = full_guided_loss(&mut tape, &f_taps, &i_taps, &cfg.loss.guidance)?;
            log.l_con = per_level;
            log.l_fgm = tape.item(l_fgm) as f64;
            total_loss_var(&mut tape, l_det, l_fgm, &cfg.loss.total)?
        }
        None => tape.weighted_sum(&[(l_det, cfg.loss.total.eta1 as f32)])?,
    };
    log.total = tape.item(total) as f64;
    if !log.total.is_finite() {
        return Err(Error::Numerical("non-finite detection objective".into()));
    }
    let mut grads = tape.backward(total)?;
    opt.step(&mut det.store, &p.grads(&mut grads), lr)?;
    Ok(log)
}

fn det_csv_header() -> &'static str {
    "epoch,step,lr,obj,loc,cls,l_det,assigned"
}

fn det_csv_row(epoch: usize, step: usize, lr: f64, l: &DetStepLog) -> Vec<String> {
    vec![
        epoch.to_string(),
        step.to_string(),
        fmt_f(lr),
        fmt_f(l.comp.obj),
        fmt_f(l.comp.loc),
        fmt_f(l.comp.cls),
        fmt_f(l.comp.total),
        l.comp.assigned.to_string(),
    ]
}

fn stage_b(cfg: &RunConfig, io: &StageIo, opts: &TrainOptions, data: &TrainData, ckpt_a: &Checkpoint) -> Result<StageReport> {
    let run = StageRun::begin(cfg, Stage::B, io, opts)?;
    let plan = run.plan;
    let seed = cfg.seed();
    let a_path = checkpoint_path(&io.input_dir, Stage::A);
    let mut gen = new_generator(cfg);
    ckpt_a.load_into("g_u2a", &mut gen.store, &a_path)?;
    let gen_checksum = gen.store.checksum();
    let mut dsn = new_detector(cfg, "dsn")?;
    run.restore_store("dsn", &mut dsn.store)?;
    let mut opt = run.optimizer("dsn", &dsn.store)?;
    let n = data.underwater.len();
    let spe = steps_per_epoch(n, plan.batch_size);
    let mut csv = CsvLog::open(&run.dir.join("loss.csv"), det_csv_header(), run.keep_rows(spe))?;
    let mut cache = FlipCache::new(n, plan.cache);
    let meta = BTreeMap::from([("enhancer_checksum".to_string(), gen_checksum.clone())]);
    let mut ckpt = None;
    let mut last = None;
    for epoch in run.start_epoch..plan.epochs {
        let (order, flips) = epoch_plan(seed, Stage::B, epoch, n);
        let mut sum = 0.0;
        for step in 0..spe {
            let idx = &order[step * plan.batch_size..((step + 1) * plan.batch_size).min(n)];
            let fl: Vec<bool> = idx.iter().map(|&i| flips[i]).collect();
            let keys: Vec<(usize, bool)> = idx.iter().copied().zip(fl.iter().copied()).collect();
            let targets: Vec<Vec<BoxAnnotation>> = gather(&data.underwater, idx, &fl).1;
            let enhanced = cache.get(&keys, |ks| {
                let ids: Vec<usize> = ks.iter().map(|k| k.0).collect();
                let fs: Vec<bool> = ks.iter().map(|k| k.1).collect();
                let (imgs, _) = gather(&data.underwater, &ids, &fs);
                let raw = batch_tensor(&imgs.iter().map(|s| &s.pixels).collect::<Vec<_>>())?;
                split_batch(&gen.apply(&raw)?)
            })?;
            let x = Tensor::cat0(&enhanced.iter().collect::<Vec<_>>())?;
            let lr = run.lr(epoch, opt.steps());
            let log = detector_step(&mut dsn, &mut opt, cfg, &x, &targets, None, lr)?;
            check_finite(log.total, Stage::B, epoch, step, "detection loss")?;
            sum += log.total;
            csv.row(&det_csv_row(epoch, epoch * spe + step, lr, &log))?;
        }
        csv.flush()?;
        last = Some(sum / spe as f64);
        info!("stage B epoch {}/{}: mean loss {:.4}", epoch + 1, plan.epochs, sum / spe as f64);
        ckpt = Some(run.save(epoch + 1, &[("dsn", &dsn.store)], &[("dsn", &opt)], &meta)?);
        if run.end_epoch(opts.stop_after, epoch) {
            break;
        }
    }
    if gen.store.checksum() != gen_checksum {
        return Err(Error::Contract("stage-A enhancer changed during stage B".into()));
    }
    let ckpt = match ckpt {
        Some(c) => c,
        None => run.save(run.start_epoch, &[("dsn", &dsn.store)], &[("dsn", &opt)], &meta)?,
    };
    Ok(run.report(&ckpt, last))
}

fn stage_c(
    cfg: &RunConfig,
    io: &StageIo,
    opts: &TrainOptions,
    data: &TrainData,
    ckpt_a: &Checkpoint,
    ckpt_b: &Checkpoint,
) -> Result<StageReport> {
    let run = StageRun::begin(cfg, Stage::C, io, opts)?;
    let plan = run.plan;
    let seed = cfg.seed();
    let mut gen = new_generator(cfg);
    let mut dsn = new_detector(cfg, "dsn")?;
    ckpt_a.load_into("g_u2a", &mut gen.store, &checkpoint_path(&io.input_dir, Stage::A))?;
    ckpt_b.load_into("dsn", &mut dsn.store, &checkpoint_path(&io.input_dir, Stage::B))?;
    run.restore_store("g_u2a", &mut gen.store)?;
    run.restore_store("dsn", &mut dsn.store)?;
    let mut opt_g = run.optimizer("g_u2a", &gen.store)?;
    let mut opt_d = run.optimizer("dsn", &dsn.store)?;
    let n = data.underwater.len();
    let spe = steps_per_epoch(n, plan.batch_size);
    let mut csv = CsvLog::open(&run.dir.join("loss.csv"), det_csv_header(), run.keep_rows(spe))?;
    let meta = BTreeMap::new();
    let mut ckpt = None;
    let mut last = None;
    let [h, w] = cfg.dataset.image_size;
    let layout = dsn.head_layout(h, w);
    for epoch in run.start_epoch..plan.epochs {
        let (order, flips) = epoch_plan(seed, Stage::C, epoch, n);
        let mut sum = 0.0;
        for step in 0..spe {
            let idx = &order[step * plan.batch_size..((step + 1) * plan.batch_size).min(n)];
            let fl: Vec<bool> = idx.iter().map(|&i| flips[i]).collect();
            let (imgs, targets) = gather(&data.underwater, idx, &fl);
            let x = batch_tensor(&imgs.iter().map(|s| &s.pixels).collect::<Vec<_>>())?;
            let lr = run.lr(epoch, opt_d.steps());
            let mut tape = Tape::new();
            let bg = gen.store.bind(&mut tape, true);
            let bd = dsn.store.bind(&mut tape, true);
            let xv = tape.constant(x);
            let enhanced = gen.forward(&mut tape, &bg, xv)?;
            let out = dsn.forward(&mut tape, &bd, enhanced)?;
            let (loss, comp) = detection_loss(&mut tape, &out.heads, &layout, &targets, &cfg.loss.detection, cfg.loss.loc)?;
            check_finite(comp.total, Stage::C, epoch, step, "detection loss")?;
            let mut grads = tape.backward(loss)?;
            opt_g.step(&mut gen.store, &bg.grads(&mut grads), lr)?;
            opt_d.step(&mut dsn.store, &bd.grads(&mut grads), lr)?;
            sum += comp.total;
            let log = DetStepLog {
                comp,
                total: comp.total,
                ..Default::default()
            };
            csv.row(&det_csv_row(epoch, epoch * spe + step, lr, &log))?;
        }
        csv.flush()?;
        last = Some(sum / spe as f64);
        info!("stage C epoch {}/{}: mean loss {:.4}", epoch + 1, plan.epochs, sum / spe as f64);
        ckpt = Some(run.save(
            epoch + 1,
            &[("g_u2a", &gen.store), ("dsn", &dsn.store)],
            &[("g_u2a", &opt_g), ("dsn", &opt_d)],
            &meta,
        )?);
        if run.end_epoch(opts.stop_after, epoch) {
            break;
        }
    }
    let ckpt = match ckpt {
        Some(c) => c,
        None => run.save(
            run.start_epoch,
            &[("g_u2a", &gen.store), ("dsn", &dsn.store)],
            &[("g_u2a", &opt_g), ("dsn", &opt_d)],
            &meta,
        )?,
    };
    Ok(run.report(&ckpt, last))
}

/// Builds the enhancement branch from a stage-C checkpoint and freezes it.
pub fn frozen_enhancement_branch(cfg: &RunConfig, ckpt_c: &Checkpoint, path: &Path) -> Result<EnhancementBranch> {
    let mut gen = new_generator(cfg);
    let mut dsn = new_detector(cfg, "dsn")?;
    ckpt_c.load_into("g_u2a", &mut gen.store, path)?;
    ckpt_c.load_into("dsn", &mut dsn.store, path)?;
    let mut branch = EnhancementBranch::new(gen, dsn);
    branch.freeze();
    Ok(branch)
}

/// Checksums of the named parameter sets; unknown names are an error.
pub fn freeze(ckpt: &Checkpoint, sets: &[&str]) -> Result<BTreeMap<String, String>> {
    sets.iter()
        .map(|&name| {
            ckpt.store_checksum(name)
                .map(|c| (name.to_string(), c))
                .ok_or_else(|| Error::Config(format!("unknown parameter set {name:?} in {} checkpoint", ckpt.stage)))
        })
        .collect()
}

fn stage_d(cfg: &RunConfig, io: &StageIo, opts: &TrainOptions, data: &TrainData, ckpt_c: &Checkpoint) -> Result<StageReport> {
    let run = StageRun::begin(cfg, Stage::D, io, opts)?;
    let plan = run.plan;
    let seed = cfg.seed();
    let c_path = checkpoint_path(&io.input_dir, Stage::C);
    let branch = frozen_enhancement_branch(cfg, ckpt_c, &c_path)?;
    let frozen = branch.frozen_checksum().expect("frozen above").to_string();
    let mut det = new_detector(cfg, "det")?;
    run.restore_store("det", &mut det.store)?;
    let mut opt = run.optimizer("det", &det.store)?;
    let n = data.underwater.len();
    let spe = steps_per_epoch(n, plan.batch_size);
    let keep = run.keep_rows(spe);
    let mut csv = CsvLog::open(&run.dir.join("loss.csv"), det_csv_header(), keep)?;
    let mut gcsv = if opts.attach_guidance {
        Some(CsvLog::open(&run.dir.join("guidance.csv"), "step,l_con1,l_con2,l_con3,l_fgm,l_det,total", keep)?)
    } else {
        None
    };
    let enabled: [bool; 3] = TapLevel::ALL.map(|l| cfg.loss.guidance.enabled(l));
    let mut cache: FlipCache<[Option<Tensor<f32>>; 3]> = FlipCache::new(n, plan.cache);
    let meta = BTreeMap::from([
        ("enhancement_branch_checksum".to_string(), frozen.clone()),
        ("guidance_attached".to_string(), opts.attach_guidance.to_string()),
    ]);
    let mut ckpt = None;
    let mut last = None;
    for epoch in run.start_epoch..plan.epochs {
        let (order, flips) = epoch_plan(seed, Stage::D, epoch, n);
        let mut sum = 0.0;
        for step in 0..spe {
            let idx = &order[step * plan.batch_size..((step + 1) * plan.batch_size).min(n)];
            let fl: Vec<bool> = idx.iter().map(|&i| flips[i]).collect();
            let (imgs, targets) = gather(&data.underwater, idx, &fl);
            let x = batch_tensor(&imgs.iter().map(|s| &s.pixels).collect::<Vec<_>>())?;
            let teacher = if opts.attach_guidance {
                let keys: Vec<(usize, bool)> = idx.iter().copied().zip(fl.iter().copied()).collect();
                let per_image = cache.get(&keys, |ks| {
                    let ids: Vec<usize> = ks.iter().map(|k| k.0).collect();
                    let fs: Vec<bool> = ks.iter().map(|k| k.1).collect();
                    let (raw, _) = gather(&data.underwater, &ids, &fs);
                    let raw = batch_tensor(&raw.iter().map(|s| &s.pixels).collect::<Vec<_>>())?;
                    let taps = branch.teacher_taps(&raw)?;
                    let mut per: Vec<[Option<Tensor<f32>>; 3]> = vec![[None, None, None]; ks.len()];
                    for (l, t) in taps.taps.iter().enumerate() {
                        if !enabled[l] {
                            continue;
                        }
                        for (i, part) in split_batch(t)?.into_iter().enumerate() {
                            per[i][l] = Some(part);
                        }
                    }
                    Ok(per)
                })?;
                let mut batch: [Option<Tensor<f32>>; 3] = [None, None, None];
                for l in 0..3 {
                    if enabled[l] {
                        let parts: Vec<&Tensor<f32>> = per_image.iter().map(|p| p[l].as_ref().expect("enabled level cached")).collect();
                        batch[l] = Some(Tensor::cat0(&parts)?);
                    }
                }
                Some(batch)
            } else {
                None
            };
            let lr = run.lr(epoch, opt.steps());
            let log = detector_step(&mut det, &mut opt, cfg, &x, &targets, teacher, lr)?;
            check_finite(log.total, Stage::D, epoch, step, "total loss")?;
            sum += log.total;
            let global = epoch * spe + step;
            csv.row(&det_csv_row(epoch, global, lr, &log))?;
            if let Some(g) = gcsv.as_mut() {
                g.row(&[
                    global.to_string(),
                    fmt_f(log.l_con[0]),
                    fmt_f(log.l_con[1]),
                    fmt_f(log.l_con[2]),
                    fmt_f(log.l_fgm),
                    fmt_f(log.comp.total),
                    fmt_f(log.total),
                ])?;
            }
        }
        csv.flush()?;
        if let Some(g) = gcsv.as_mut() {
            g.flush()?;
        }
        branch.verify_frozen()?;
        last = Some(sum / spe as f64);
        info!("stage D epoch {}/{}: mean loss {:.4}", epoch + 1, plan.epochs, sum / spe as f64);
        ckpt = Some(run.save(epoch + 1, &[("det", &det.store)], &[("det", &opt)], &meta)?);
        if run.end_epoch(opts.stop_after, epoch) {
            break;
        }
    }
    branch.verify_frozen()?;
    let ckpt = match ckpt {
        Some(c) => c,
        None => run.save(run.start_epoch, &[("det", &det.store)], &[("det", &opt)], &meta)?,
    };
    Ok(run.report(&ckpt, last))
}

/// Loads the trained detection branch of a stage-D checkpoint.
pub fn load_detection_branch(cfg: &RunConfig, run_dir: &Path) -> Result<Detector<f32>> {
    let ckpt = load_complete(run_dir, Stage::D)?;
    let mut det = new_detector(cfg, "det")?;
    ckpt.load_into("det", &mut det.store, &checkpoint_path(run_dir, Stage::D))?;
    Ok(det)
}

/// Generator and detector of the separate (A + B) or cascaded (C) pipeline.
pub fn load_enhancer_pipeline(cfg: &RunConfig, run_dir: &Path, cascaded: bool) -> Result<(Generator<f32>, Detector<f32>)> {
    let mut gen = new_generator(cfg);
    let mut dsn = new_detector(cfg, "dsn")?;
    if cascaded {
        let c = load_complete(run_dir, Stage::C)?;
        let p = checkpoint_path(run_dir, Stage::C);
        c.load_into("g_u2a", &mut gen.store, &p)?;
        c.load_into("dsn", &mut dsn.store, &p)?;
    } else {
        let a = load_complete(run_dir, Stage::A)?;
        let b = load_complete(run_dir, Stage::B)?;
        a.load_into("g_u2a", &mut gen.store, &checkpoint_path(run_dir, Stage::A))?;
        b.load_into("dsn", &mut dsn.store, &checkpoint_path(run_dir, Stage::B))?;
    }
    Ok((gen, dsn))
}
