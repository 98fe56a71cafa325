use std::path::PathBuf;

use flatproxy::config::{load_config, load_config_file, ConfigError};

fn shipped(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name)
}

#[test]
fn shipped_config_loads() {
    let cfg = load_config_file(&shipped("mesh.toml")).unwrap();
    assert_eq!(cfg.listeners.len(), 1);
    assert_eq!(cfg.clusters[0].endpoints.len(), 2);
    assert_eq!(cfg.chain.nodes.first().map(String::as_str), Some("toe"));
}

#[test]
fn missing_file_is_reported() {
    let err = load_config_file(&shipped("nope.toml")).unwrap_err();
    assert!(matches!(err, ConfigError::Io { .. }), "{err}");
}

#[test]
fn error_lines_point_at_the_problem() {
    let text = std::fs::read_to_string(shipped("mesh.toml")).unwrap();
    let broken = text.replacen("\"round_robin\"", "\"round_robin\"\nweights = ]", 1);
    match load_config(&broken) {
        Err(ConfigError::Parse { line, .. }) => {
            let want = broken.lines().position(|l| l.starts_with("weights")).unwrap() + 1;
            assert_eq!(line, want);
        }
        other => panic!("{other:?}"),
    }
}
