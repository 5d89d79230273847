//! The shipped config files stay in sync with the built-in presets.

use std::path::PathBuf;

use steerbridge::experiments::RunConfig;

fn shipped(name: &str) -> RunConfig {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../../configs")
        .join(name);
    RunConfig::load(&path).unwrap()
}

#[test]
fn default_toml_is_the_default_config() {
    assert_eq!(shipped("default.toml"), RunConfig::default());
}

#[test]
fn smoke_toml_is_the_smoke_config() {
    assert_eq!(shipped("smoke.toml"), RunConfig::smoke());
}
