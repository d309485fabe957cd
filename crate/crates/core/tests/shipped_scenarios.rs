use std::path::PathBuf;

use mocobot::scenario::{load_scenario, presets};

fn scenarios_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../scenarios")
}

#[test]
fn shipped_files_are_the_presets_in_canonical_form() {
    for cfg in presets::all() {
        let path = scenarios_dir().join(format!("{}.toml", cfg.name));
        let loaded = load_scenario(&path).unwrap_or_else(|e| panic!("{e}"));
        assert_eq!(loaded, cfg, "{} differs from its preset; rerun the export_presets example", path.display());
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(loaded.to_toml(), text, "{} is not canonical", path.display());
    }
}

#[test]
fn every_shipped_file_has_a_preset() {
    for entry in std::fs::read_dir(scenarios_dir()).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().is_some_and(|e| e == "toml") {
            let stem = path.file_stem().unwrap().to_str().unwrap();
            assert!(presets::by_name(stem).is_some(), "no preset named {stem}");
        }
    }
}

#[test]
fn schema_errors_name_the_field_and_line() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.toml");
    let mut text = std::fs::read_to_string(scenarios_dir().join("walk_the_dog.toml")).unwrap();
    text = text.replacen("duration = 12.0", "duration = \"long\"", 1);
    std::fs::write(&path, text).unwrap();
    let msg = load_scenario(&path).unwrap_err().to_string();
    assert!(msg.contains("duration"), "{msg}");
    assert!(msg.contains("line 2"), "{msg}");
}
