mod common;

use std::f64::consts::FRAC_PI_2;
use std::fs;

use common::*;
use mvedit::diffusion::{load_checkpoint, ToyDenoiser};
use mvedit::pipeline::Report;
use mvedit::splat::{save_cloud, GaussianCloud, Gaussian};
use serde_json::Value;

const SUBCOMMANDS: [&str; 6] = ["synth", "train", "edit", "reconstruct", "eval", "turntable"];

fn leaf_keys(v: &Value, prefix: &str, out: &mut Vec<String>) {
    match v {
        Value::Object(m) => {
            for (k, c) in m {
                let p = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                leaf_keys(c, &p, out);
            }
        }
        _ => out.push(prefix.to_string()),
    }
}

#[test]
fn help_documents_every_key() {
    let dir = tempfile::tempdir().unwrap();
    // the effective config echoed by a command lists every key
    let out = dir.path().join("t");
    let cloud = dir.path().join("c.gspl");
    save_cloud(&cloud, &GaussianCloud::new(vec![]).unwrap()).unwrap();
    ok(&["turntable", "--cloud", s(&cloud), "--frames", "2", "--out", s(&out)]);
    let cfg: Value = serde_json::from_str(&fs::read_to_string(out.join("turntable.json")).unwrap()).unwrap();
    let mut keys = Vec::new();
    leaf_keys(&cfg["config"], "", &mut keys);
    assert!(keys.len() > 50);
    for sub in SUBCOMMANDS {
        let o = ok(&[sub, "--help"]);
        let help = String::from_utf8(o.stdout).unwrap();
        for k in &keys {
            let doc = k.replacen("edit_fit.", "source_fit.", 1);
            assert!(help.contains(&doc), "{sub} --help lacks {doc}");
        }
    }
    ok(&["--help"]);
}

#[test]
fn synth_layout_and_rerun_identical() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    ok(&["synth", "--subjects", "2", "--views", "8", "--seed", "3", "--out", s(&a)]);
    for i in 0..2 {
        let sub = a.join(format!("subject_{i:04}"));
        let n = fs::read_dir(&sub).unwrap().count();
        // 8 views x 5 images, 8 target views, 4 garment images, rig and meta
        assert_eq!(n, 8 * 5 + 8 + 4 + 2);
        for k in ["rgb", "normal", "agnostic", "mask", "face"] {
            assert!(sub.join(format!("view_007_{k}.ppm")).is_file());
        }
        assert!(sub.join("rig.json").is_file());
    }
    assert!(a.join("config.json").is_file());
    let first = tree(&a);
    ok(&["synth", "--subjects", "2", "--views", "8", "--seed", "3", "--out", s(&a)]);
    assert_eq!(tree(&a), first);
    let b = dir.path().join("b");
    ok(&["synth", "--subjects", "2", "--views", "8", "--seed", "3", "--out", s(&b)]);
    assert_eq!(tree(&b), first);
}

#[test]
fn unwritable_output_leaves_no_subjects() {
    let dir = tempfile::tempdir().unwrap();
    let blocker = dir.path().join("file");
    fs::write(&blocker, b"x").unwrap();
    let out = blocker.join("data");
    let o = mvedit(&["synth", "--subjects", "2", "--views", "2", "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(!out.exists());
    assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 1);
}

#[test]
fn config_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("o");
    let bad = dir.path().join("bad.json");
    fs::write(&bad, r#"{"no_such_key": 1}"#).unwrap();
    let cases: Vec<Vec<&str>> = vec![
        vec!["synth", "--config", s(&bad), "--out", s(&out)],
        vec!["synth", "--set", "batch_size=12", "--out", s(&out)],
        vec!["synth", "--set", "z_threshold=0", "--out", s(&out)],
        vec!["synth", "--config", "/nonexistent.json", "--out", s(&out)],
        vec!["synth"],
        vec!["train", "--dataset", "/nonexistent", "--out", s(&out)],
        vec!["train", "--dataset", s(dir.path()), "--correlation", "diagonal", "--out", s(&out)],
        vec!["reconstruct", "--edits", "/nonexistent", "--out", s(&out)],
        vec!["eval", "--out", s(&out)],
        vec!["turntable", "--cloud", "/nonexistent.gspl", "--out", s(&out)],
        vec!["synth", "--bogus-flag"],
    ];
    for c in cases {
        assert_eq!(mvedit(&c).status.code(), Some(2), "{c:?}");
    }
    assert!(!out.exists());
    // a valid but empty dataset directory is a runtime failure
    assert_eq!(mvedit(&["train", "--dataset", s(dir.path()), "--out", s(&out)]).status.code(), Some(1));
}

#[test]
fn zero_steps_checkpoint_is_initialization() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let data = dir.path().join("data");
    let model = dir.path().join("model");
    ok(&["synth", "--config", s(&cfg), "--out", s(&data)]);
    ok(&["train", "--config", s(&cfg), "--seed", "5", "--single-view-steps", "0", "--multi-view-steps", "0", "--dataset", s(&data), "--out", s(&model)]);
    let ckpt = load_checkpoint(&model.join("model.ckpt")).unwrap();
    let init = ToyDenoiser::init(*ckpt.model.config(), 5).unwrap();
    assert_eq!(ckpt.model.params(), init.params());
    assert_eq!(fs::read_to_string(model.join("loss_trace.txt")).unwrap(), "");
}

#[test]
fn trace_length_and_resume_equivalence() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let c = s(&cfg);
    let data = dir.path().join("data");
    ok(&["synth", "--config", c, "--out", s(&data)]);
    let full = dir.path().join("full");
    ok(&["train", "--config", c, "--dataset", s(&data), "--out", s(&full)]);
    let trace = fs::read_to_string(full.join("loss_trace.txt")).unwrap();
    assert_eq!(trace.lines().count(), 6);
    for (i, line) in trace.lines().enumerate() {
        let mut parts = line.split_whitespace();
        assert_eq!(parts.next().unwrap(), i.to_string());
        assert!(parts.next().unwrap().parse::<f64>().unwrap().is_finite());
    }
    // stop inside the first stage, then inside the second, then finish
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    let z = dir.path().join("z");
    ok(&["train", "--config", c, "--single-view-steps", "2", "--multi-view-steps", "0", "--dataset", s(&data), "--out", s(&a)]);
    ok(&["train", "--config", c, "--multi-view-steps", "1", "--dataset", s(&data), "--resume", s(&a.join("model.ckpt")), "--out", s(&b)]);
    ok(&["train", "--config", c, "--dataset", s(&data), "--resume", s(&b.join("model.ckpt")), "--out", s(&z)]);
    for f in ["model.ckpt", "loss_trace.txt"] {
        assert_eq!(fs::read(z.join(f)).unwrap(), fs::read(full.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn eval_of_identical_clouds_is_zero() {
    let dir = tempfile::tempdir().unwrap();
    let cloud = dir.path().join("c.gspl");
    let g = Gaussian::isotropic([0.0, 0.1, 0.0], 0.3, 0.9, [0.8, 0.2, 0.1]).unwrap();
    save_cloud(&cloud, &GaussianCloud::new(vec![g]).unwrap()).unwrap();
    let out = dir.path().join("eval");
    ok(&["eval", "--source", s(&cloud), "--cloud", s(&cloud), "--eval-views", "12", "--out", s(&out)]);
    let report: Report = serde_json::from_str(&fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(report.clip_cons, 0.0);
    assert_eq!(report.config.eval_views, 12);
    assert!(report.dino_sim.is_none());
}

#[test]
fn turntable_of_four_frames() {
    let dir = tempfile::tempdir().unwrap();
    let cloud = dir.path().join("c.gspl");
    let g = Gaussian::isotropic([0.0, 0.0, 0.0], 0.3, 0.9, [0.8, 0.2, 0.1]).unwrap();
    save_cloud(&cloud, &GaussianCloud::new(vec![g]).unwrap()).unwrap();
    let out = dir.path().join("tt");
    ok(&["turntable", "--cloud", s(&cloud), "--frames", "4", "--out", s(&out)]);
    for i in 0..4 {
        assert!(out.join(format!("frame_{i:03}.ppm")).is_file());
    }
    assert!(!out.join("frame_004.ppm").exists());
    let meta: Value = serde_json::from_str(&fs::read_to_string(out.join("turntable.json")).unwrap()).unwrap();
    let az: Vec<f64> = meta["azimuths"].as_array().unwrap().iter().map(|v| v.as_f64().unwrap()).collect();
    assert_eq!(az.len(), 4);
    for w in az.windows(2) {
        assert_eq!(w[1] - w[0], FRAC_PI_2);
    }
    let rig = mvedit::camera::ViewRig::load(&out.join("rig.json")).unwrap();
    for (k, cam) in rig.cameras().iter().enumerate() {
        let c = cam.extrinsics.center();
        assert!((c[0].atan2(c[2]).rem_euclid(std::f64::consts::TAU) - az[k]).abs() < 1e-9);
    }
}

#[test]
fn full_chain_produces_complete_report() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    chain(dir.path(), &cfg, "11");
    let report: Report = serde_json::from_str(&fs::read_to_string(dir.path().join("eval/report.json")).unwrap()).unwrap();
    assert!(report.clip_cons.is_finite());
    assert!(!report.kept_views.is_empty());
    assert_eq!(report.kept_views.len() + report.discarded_views.len(), 4);
    assert_eq!(report.first_fit_losses.len(), 4);
    for i in 0..4 {
        assert!(dir.path().join(format!("edits/edited_{i:03}.ppm")).is_file());
    }
    assert!(dir.path().join("recon/cloud.gspl").is_file());
}
