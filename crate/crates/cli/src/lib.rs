//! Commands behind the `bgdet` binary.

pub mod ablation;

use std::fs;
use std::path::{Path, PathBuf};

use bgdet_core::config::{InferenceMode, RunConfig};
use bgdet_core::datagen::{self, Manifest};
use bgdet_core::eval::{self, EvalReport};
use bgdet_core::trainer::{self, Stage, StageReport, TrainOptions};
use bgdet_core::{Error, Result};
use log::info;

/// Loads the config (or defaults) and resolves the seed.
pub fn load_config(path: Option<&Path>, seed: Option<u64>) -> Result<RunConfig> {
    let mut cfg = match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    cfg.resolve_seed(seed)?;
    cfg.validate()?;
    Ok(cfg)
}

/// Writes the synthetic dataset. An existing dataset is only replaced with `force`.
pub fn cmd_gen(cfg: &RunConfig, force: bool) -> Result<Manifest> {
    let root = &cfg.dataset.root;
    if root.join(datagen::MANIFEST_FILE).exists() {
        if !force {
            return Err(Error::Config(format!("dataset already exists at {}; pass --force to overwrite", root.display())));
        }
        fs::remove_dir_all(root).map_err(|e| Error::io(root, e))?;
    }
    let m = datagen::generate_dataset(&cfg.dataset_spec(), &cfg.degradation.underwater, &cfg.degradation.clear, root)?;
    info!("wrote {} train / {} test images to {}", m.counts.train, m.counts.test, root.display());
    Ok(m)
}

/// Runs `stages` in order under the config's run directory.
pub fn cmd_train(cfg: &RunConfig, stages: &[Stage], opts: &TrainOptions) -> Result<Vec<StageReport>> {
    stages.iter().map(|&s| trainer::run_stage(cfg, s, opts)).collect()
}

/// Evaluates one mode and writes the report files; `weights` overrides the run directory.
pub fn cmd_eval(cfg: &RunConfig, mode: InferenceMode, weights: Option<&Path>, with_fps: bool) -> Result<(EvalReport, PathBuf)> {
    let run_dir = weights.map(Path::to_path_buf).unwrap_or_else(|| cfg.run_dir());
    let report = eval::evaluate(cfg, &run_dir, mode, with_fps)?;
    let dir = eval::eval_dir(&run_dir, mode);
    eval::export_report(&report, &dir)?;
    Ok((report, dir))
}
