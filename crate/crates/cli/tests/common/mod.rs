#![allow(dead_code)]

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

pub const SMALL_CONFIG: &str = r#"{
  "subjects": 2,
  "views": 4,
  "test_views": 4,
  "batch_size": 2,
  "train_views": 2,
  "ddim_steps": 3,
  "eval_views": 8,
  "init_gaussians": 80,
  "source_fit": {"iters": 15},
  "edit_fit": {"iters": 8},
  "single_view_steps": 3,
  "multi_view_steps": 3,
  "model": {"width": 8, "head_dim": 4, "blocks": 1, "mlp_hidden": 8}
}"#;

pub fn mvedit(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mvedit"))
        .args(args)
        .output()
        .expect("binary runs")
}

pub fn ok(args: &[&str]) -> Output {
    let out = mvedit(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

pub fn write_config(dir: &Path) -> PathBuf {
    let p = dir.join("small.json");
    fs::write(&p, SMALL_CONFIG).unwrap();
    p
}

pub fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Relative path → bytes for every file under `root`.
pub fn tree(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap());
            }
        }
    }
    out
}

/// synth → train → edit → reconstruct → eval under `root`.
pub fn chain(root: &Path, cfg: &Path, seed: &str) {
    let c = s(cfg);
    let d = root.join("data");
    let m = root.join("model");
    let e = root.join("edits");
    let r = root.join("recon");
    let v = root.join("eval");
    ok(&["synth", "--config", c, "--seed", seed, "--out", s(&d)]);
    ok(&["train", "--config", c, "--seed", seed, "--dataset", s(&d), "--out", s(&m)]);
    let ckpt = m.join("model.ckpt");
    ok(&["edit", "--config", c, "--seed", seed, "--checkpoint", s(&ckpt), "--dataset", s(&d), "--subject", "1", "--out", s(&e)]);
    ok(&["reconstruct", "--config", c, "--seed", seed, "--edits", s(&e), "--out", s(&r)]);
    ok(&["eval", "--config", c, "--seed", seed, "--recon", s(&r), "--edits", s(&e), "--out", s(&v)]);
}
