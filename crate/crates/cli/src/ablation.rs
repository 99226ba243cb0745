//! Guidance-layer and η₂ sweeps over stage D.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use bgdet_core::config::{InferenceMode, RunConfig};
use bgdet_core::eval;
use bgdet_core::guidance::TapLevel;
use bgdet_core::trainer::{self, Stage, StageIo, TrainOptions};
use bgdet_core::{Error, Result};
use log::info;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Sweep {
    Layers,
    Eta2,
}

impl Sweep {
    pub fn as_str(self) -> &'static str {
        match self {
            Sweep::Layers => "layers",
            Sweep::Eta2 => "eta2",
        }
    }
}

impl fmt::Display for Sweep {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One stage-D configuration of a sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct Arm {
    pub name: String,
    pub levels: Vec<TapLevel>,
    pub eta2: f64,
}

impl Arm {
    fn uses(&self, l: TapLevel) -> u8 {
        self.levels.contains(&l) as u8
    }

    pub fn is_baseline(&self) -> bool {
        self.levels.is_empty()
    }
}

/// η₂ of the layer sweep.
pub const LAYERS_ETA2: f64 = 1.0;
pub const ETA2_VALUES: [f64; 5] = [1.0, 0.5, 0.1, 0.05, 0.01];

pub fn arms(which: Sweep) -> Vec<Arm> {
    match which {
        Sweep::Layers => {
            let mut out = vec![Arm {
                name: "baseline".into(),
                levels: Vec::new(),
                eta2: 0.0,
            }];
            for mask in 1u8..8 {
                let levels: Vec<TapLevel> = TapLevel::ALL.into_iter().filter(|l| mask & (1 << l.index()) != 0).collect();
                let name = levels.iter().map(|l| l.to_string()).collect::<Vec<_>>().join("+");
                out.push(Arm {
                    name,
                    levels,
                    eta2: LAYERS_ETA2,
                });
            }
            // Singles first, then pairs, then all three.
            out[1..].sort_by_key(|a| a.levels.len());
            out
        }
        Sweep::Eta2 => ETA2_VALUES
            .iter()
            .map(|&e| Arm {
                name: format!("eta2_{e}"),
                levels: vec![TapLevel::Conv1],
                eta2: e,
            })
            .collect(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub arm: String,
    pub conv1: u8,
    pub conv2: u8,
    pub csp: u8,
    pub eta2: f64,
    pub map50: f64,
    pub map5095: f64,
}

pub const CSV_HEADER: &str = "arm,conv1,conv2,csp,eta2,map50,map5095";

impl AblationRow {
    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{},{:.6},{:.6}",
            self.arm, self.conv1, self.conv2, self.csp, self.eta2, self.map50, self.map5095
        )
    }
}

pub fn arm_dir(run_dir: &Path, which: Sweep, arm: &Arm) -> PathBuf {
    run_dir.join("ablate").join(which.as_str()).join(arm.name.replace('+', "_"))
}

fn arm_config(cfg: &RunConfig, arm: &Arm) -> RunConfig {
    let mut c = cfg.clone();
    c.loss.total.eta2 = arm.eta2;
    if !arm.is_baseline() {
        c.loss.guidance.levels = arm.levels.clone();
    }
    c
}

/// Trains (or resumes) one arm's stage D and evaluates it in detect-only mode.
pub fn run_arm(cfg: &RunConfig, which: Sweep, arm: &Arm) -> Result<AblationRow> {
    let run_dir = cfg.run_dir();
    let c = arm_config(cfg, arm);
    let io = StageIo {
        input_dir: run_dir.clone(),
        output_dir: arm_dir(&run_dir, which, arm),
    };
    let opts = TrainOptions {
        resume: true,
        stop_after: None,
        attach_guidance: !arm.is_baseline(),
    };
    trainer::run_stage_in(&c, Stage::D, &opts, &io)?;
    let report = eval::evaluate(&c, &io.output_dir, InferenceMode::DetectOnly, false)?;
    eval::export_report(&report, &eval::eval_dir(&io.output_dir, InferenceMode::DetectOnly))?;
    info!("ablate {which} {}: mAP@0.5 {:.4}", arm.name, report.map50);
    Ok(AblationRow {
        arm: arm.name.clone(),
        conv1: arm.uses(TapLevel::Conv1),
        conv2: arm.uses(TapLevel::Conv2),
        csp: arm.uses(TapLevel::Csp),
        eta2: arm.eta2,
        map50: report.map50,
        map5095: report.map5095,
    })
}

/// Runs every arm of the sweep on up to `jobs` threads and writes
/// `<run_dir>/ablate/<which>.csv`. Rows keep the arm order.
pub fn cmd_ablate(cfg: &RunConfig, which: Sweep, jobs: usize) -> Result<(Vec<AblationRow>, PathBuf)> {
    let run_dir = cfg.run_dir();
    for s in [Stage::A, Stage::B, Stage::C] {
        trainer::load_complete(&run_dir, s)?;
    }
    let arms = arms(which);
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<Result<AblationRow>>>> = Mutex::new((0..arms.len()).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..jobs.clamp(1, arms.len()) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= arms.len() {
                    break;
                }
                let r = run_arm(cfg, which, &arms[i]);
                results.lock().expect("no poisoned lock")[i] = Some(r);
            });
        }
    });
    let rows = results
        .into_inner()
        .expect("no poisoned lock")
        .into_iter()
        .map(|r| r.expect("every arm ran"))
        .collect::<Result<Vec<_>>>()?;
    let path = run_dir.join("ablate").join(format!("{which}.csv"));
    let mut text = format!("{CSV_HEADER}\n");
    for r in &rows {
        text.push_str(&r.to_csv());
        text.push('\n');
    }
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok((rows, path))
}

/// Parses a sweep CSV back into rows.
pub fn read_csv(path: &Path) -> Result<Vec<AblationRow>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h == CSV_HEADER => {}
        _ => {
            return Err(Error::Format {
                file: path.to_path_buf(),
                line: 1,
                reason: format!("expected header {CSV_HEADER:?}"),
            })
        }
    }
    lines
        .map(|(i, line)| {
            let bad = |reason: &str| Error::Format {
                file: path.to_path_buf(),
                line: i + 1,
                reason: reason.to_string(),
            };
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 7 {
                return Err(bad("expected 7 fields"));
            }
            let flag = |s: &str| s.parse::<u8>().map_err(|_| bad("bad layer flag"));
            let num = |s: &str| s.parse::<f64>().map_err(|_| bad("bad number"));
            Ok(AblationRow {
                arm: f[0].to_string(),
                conv1: flag(f[1])?,
                conv2: flag(f[2])?,
                csp: flag(f[3])?,
                eta2: num(f[4])?,
                map50: num(f[5])?,
                map5095: num(f[6])?,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sweep_shapes() {
        let l = arms(Sweep::Layers);
        assert_eq!(l.len(), 8);
        assert!(l[0].is_baseline());
        assert_eq!(l[1].name, "conv1");
        assert_eq!(l[7].name, "conv1+conv2+csp");
        let e = arms(Sweep::Eta2);
        assert_eq!(e.len(), 5);
        assert!(e.iter().all(|a| a.levels == [TapLevel::Conv1]));
    }
}
