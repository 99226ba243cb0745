//! The `bgdet` binary end to end on a tiny config: exit codes, reports and sweeps.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use bgdet_cli::ablation;
use bgdet_core::config::RunConfig;

fn write_config(dir: &Path) -> PathBuf {
    let mut c = RunConfig::default();
    c.dataset.root = dir.join("data");
    c.output_dir = dir.join("runs");
    c.run_id = "cli".into();
    c.seed = Some(1);
    c.dataset.n_train = 8;
    c.dataset.n_test = 4;
    c.dataset.image_size = [32, 32];
    c.model.generator.base_width = 4;
    c.model.generator.res_blocks = 1;
    c.model.discriminator.base_width = 4;
    c.model.detector.widths = [4, 8, 8, 16, 16];
    c.stages.a.epochs = 1;
    c.stages.a.batch_size = 4;
    for p in [&mut c.stages.b, &mut c.stages.c, &mut c.stages.d] {
        p.epochs = 1;
        p.batch_size = 4;
        p.warmup_steps = 0;
    }
    c.eval.fps_iters = 2;
    c.eval.fps_warmup = 1;
    let path = dir.join("run.toml");
    fs::write(&path, c.to_toml()).unwrap();
    path
}

fn bgdet(args: &[&str], config: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bgdet"))
        .args(args)
        .arg("--config")
        .arg(config)
        .env("RUST_LOG", "warn")
        .env_remove("BGDET_SEED")
        .output()
        .unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

#[test]
fn exit_codes_follow_the_contract() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());

    let bad = dir.path().join("bad.toml");
    fs::write(&bad, "seed = \"x\"\n").unwrap();
    assert_eq!(code(&bgdet(&["gen"], &bad)), 2);

    assert_eq!(code(&bgdet(&["train", "--stage", "a"], &cfg)), 3, "no dataset yet");
    assert_eq!(code(&bgdet(&["gen"], &cfg)), 0);
    assert_eq!(code(&bgdet(&["gen"], &cfg)), 2, "refuses to overwrite");
    assert_eq!(code(&bgdet(&["gen", "--force"], &cfg)), 0);
    assert_eq!(code(&bgdet(&["train", "--stage", "D"], &cfg)), 3);
    assert_eq!(code(&bgdet(&["eval", "--mode", "detect_only"], &cfg)), 3);
    assert_eq!(code(&bgdet(&["train", "--stage", "d", "--eta2", "-1"], &cfg)), 2);

    assert_eq!(code(&bgdet(&["train", "--stage", "a"], &cfg)), 0);
    let ckpt = dir.path().join("runs/cli/A_enhancer/checkpoint.bin");
    let good = fs::read(&ckpt).unwrap();
    fs::write(&ckpt, &good[..good.len() / 2]).unwrap();
    assert_eq!(code(&bgdet(&["train", "--stage", "b"], &cfg)), 4, "truncated checkpoint");
    fs::write(&ckpt, &good).unwrap();
    assert_eq!(code(&bgdet(&["train", "--stage", "b"], &cfg)), 0);
}

#[test]
fn train_eval_and_ablate() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    assert_eq!(code(&bgdet(&["gen"], &cfg)), 0);
    let out = bgdet(&["train", "--stage", "all"], &cfg);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));

    for mode in ["detect_only", "separate", "cascaded"] {
        let out = bgdet(&["eval", "--mode", mode, "--no-fps"], &cfg);
        assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
        let eval_dir = dir.path().join("runs/cli/eval").join(mode);
        let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(eval_dir.join("report.json")).unwrap()).unwrap();
        assert!(report["map50"].as_f64().unwrap() >= report["map5095"].as_f64().unwrap());
        assert!(eval_dir.join("pr_curve.png").exists());
    }

    for (which, rows) in [("eta2", 5), ("layers", 8)] {
        let out = bgdet(&["ablate", "--which", which, "--jobs", "2"], &cfg);
        assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
        let parsed = ablation::read_csv(&dir.path().join(format!("runs/cli/ablate/{which}.csv"))).unwrap();
        assert_eq!(parsed.len(), rows);
        assert!(parsed.iter().all(|r| r.map50.is_finite() && r.map5095.is_finite()));
    }
}
