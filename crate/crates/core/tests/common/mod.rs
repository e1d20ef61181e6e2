#![allow(dead_code)]

use std::path::PathBuf;

/// Compares `actual` with `tests/golden/<name>`. With `UPDATE_GOLDEN=1`
/// the file is rewritten instead.
pub fn check_golden(name: &str, actual: &str) {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/golden").join(name);
    if std::env::var_os("UPDATE_GOLDEN").is_some() {
        std::fs::write(&path, actual).unwrap();
        return;
    }
    let expected = std::fs::read_to_string(&path)
        .unwrap_or_else(|e| panic!("{}: {e} (run with UPDATE_GOLDEN=1 to create)", path.display()));
    assert!(expected == actual, "{} differs from the committed golden file", path.display());
}
