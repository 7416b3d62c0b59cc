use std::path::PathBuf;

use pbasr_core::config::RunConfig;

fn config(name: &str) -> RunConfig {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name);
    RunConfig::load(&path).unwrap_or_else(|e| panic!("{name}: {e}"))
}

#[test]
fn toy_config_is_the_default_run() {
    let mut cfg = config("toy.toml");
    assert_eq!(cfg.data.synthetic.take(), Some(Default::default()));
    assert_eq!(cfg, RunConfig::default());
}

#[test]
fn manifest_config_resolves_paths_next_to_the_file() {
    let cfg = config("manifests.toml");
    let general = cfg.data.general.unwrap();
    assert!(general.is_absolute());
    assert!(general.ends_with("data/general.jsonl"));
    assert_eq!(cfg.train.checkpoint_every, 2000);
}
