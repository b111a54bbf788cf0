//! Helpers shared by the file-level integration suites.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use feedergraph_core::config::RunConfig;

pub fn fixture_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures/toy")
}

/// The committed toy run configuration with its output redirected.
pub fn fixture_config(out_dir: &Path) -> RunConfig {
    let mut cfg = RunConfig::load(&fixture_dir().join("run.toml")).expect("fixture config loads");
    cfg.paths.out_dir = out_dir.to_path_buf();
    cfg.validate().expect("fixture config validates");
    cfg
}

/// All regular files under `root`, keyed by relative path, as bytes.
pub fn read_tree(root: &Path) -> BTreeMap<String, Vec<u8>> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<String, Vec<u8>>) {
        for entry in std::fs::read_dir(dir).expect("readable dir") {
            let path = entry.expect("dir entry").path();
            if path.is_dir() {
                walk(root, &path, out);
            } else {
                let rel = path
                    .strip_prefix(root)
                    .expect("path under root")
                    .to_string_lossy()
                    .into_owned();
                out.insert(rel, std::fs::read(&path).expect("readable file"));
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(root, root, &mut out);
    out
}

/// Byte-compares two directory trees and panics with the first mismatch.
pub fn assert_same_tree(got_root: &Path, want_root: &Path) {
    let got = read_tree(got_root);
    let want = read_tree(want_root);
    for name in want.keys() {
        assert!(got.contains_key(name), "missing output file {name}");
    }
    for name in got.keys() {
        assert!(want.contains_key(name), "unexpected output file {name}");
    }
    for (name, want_bytes) in &want {
        assert!(
            got[name] == *want_bytes,
            "{name} differs ({} vs {} bytes)",
            got[name].len(),
            want_bytes.len()
        );
    }
}
