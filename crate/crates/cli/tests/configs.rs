//! The shipped example configs parse and validate.

use bgdet_core::config::{OptimizerChoice, RunConfig, StagesConfig};

fn load(name: &str) -> RunConfig {
    let path = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name);
    RunConfig::load(&path).unwrap()
}

#[test]
fn desk_config_matches_defaults() {
    let c = load("desk.toml");
    let mut d = RunConfig::default();
    d.seed = Some(0);
    assert_eq!(c, d);
}

#[test]
fn published_schedule_matches_preset() {
    let c = load("published_schedule.toml");
    assert_eq!(c.stages, StagesConfig::published());
    assert_eq!(c.stages.b.optimizer, OptimizerChoice::Sgd);
}
