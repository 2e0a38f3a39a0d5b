use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn convemo(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_convemo"))
        .args(args)
        .current_dir(cwd)
        .env_remove("RUST_LOG")
        .output()
        .expect("spawn convemo")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// Small XOR corpus whose config trains in a few seconds.
fn prepared(root: &Path) -> PathBuf {
    let dir = root.join("exp");
    let o = convemo(
        &["prepare", "--synthetic", "xor", "--conversations", "40", "--seed", "3", "--out", s(&dir)],
        root,
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let cfg = dir.join("experiment.toml");
    let text = fs::read_to_string(&cfg).unwrap();
    let text = text.replace("epochs = 6", "epochs = 1").replace("epochs = 4", "epochs = 1").replace("epochs = 3", "epochs = 1");
    fs::write(&cfg, text).unwrap();
    dir
}

fn snapshot(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap());
            }
        }
    }
    out
}

#[test]
fn full_run_then_csv_report() {
    let root = tempfile::tempdir().unwrap();
    let dir = prepared(root.path());
    let cfg = dir.join("experiment.toml");
    let out = dir.join("run");
    let o = convemo(&["train", "--config", s(&cfg), "--out", s(&out)], root.path());
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    for f in ["pretrain_text.ckpt", "stage1_text.ckpt", "stage1_speech.ckpt", "stage2_text.ckpt", "stage2_speech.ckpt", "stage3_fused.ckpt"] {
        assert!(out.join(f).exists(), "missing {f}");
    }
    let o = convemo(&["report", "--experiment", s(&out), "--format", "csv"], root.path());
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let csv = String::from_utf8(o.stdout).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 6, "{csv}");
    assert!(lines[0].starts_with("modality,stage"));

    let o = convemo(&["evaluate", "--config", s(&cfg), "--out", s(&out)], root.path());
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let o = convemo(&["report", "--experiment", s(&out), "--format", "table"], root.path());
    assert!(String::from_utf8(o.stdout).unwrap().contains("bit-exact"));
}

#[test]
fn stage_without_upstream_is_a_runtime_error() {
    let root = tempfile::tempdir().unwrap();
    let dir = prepared(root.path());
    let out = dir.join("fresh");
    let o = convemo(&["train", "--config", s(&dir.join("experiment.toml")), "--stage", "3", "--out", s(&out)], root.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("missing dependency"), "{}", stderr(&o));
}

#[test]
fn unknown_command_prints_usage() {
    let root = tempfile::tempdir().unwrap();
    let o = convemo(&["frobnicate"], root.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).to_lowercase().contains("usage"));
}

#[test]
fn missing_out_dir_is_a_user_error() {
    let root = tempfile::tempdir().unwrap();
    let dir = prepared(root.path());
    let o = convemo(&["train", "--config", s(&dir.join("experiment.toml"))], root.path());
    assert_eq!(o.status.code(), Some(1));
    let o = convemo(&["train", "--config", s(&root.path().join("nope.toml")), "--out", "x"], root.path());
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn annotate_writes_labels_and_reuses_cache() {
    let root = tempfile::tempdir().unwrap();
    let input = root.path().join("t.jsonl");
    fs::write(&input, "{\"id\":\"a\",\"text\":\"what a wonderful day\"}\n{\"id\":\"b\",\"text\":\"this is awful\"}\n").unwrap();
    let cache = root.path().join("cache.jsonl");
    let out = root.path().join("o");
    let args = ["annotate", "--in", s(&input), "--backend", "mock", "--cache", s(&cache), "--out", s(&out)];
    let o = convemo(&args, root.path());
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let labels = fs::read_to_string(out.join("pseudo_labels.jsonl")).unwrap();
    assert_eq!(labels.lines().count(), 2);
    assert!(String::from_utf8(o.stdout).unwrap().contains("2 backend calls"));
    let o = convemo(&args, root.path());
    assert!(String::from_utf8(o.stdout).unwrap().contains("0 backend calls"));
    assert_eq!(fs::read_to_string(out.join("pseudo_labels.jsonl")).unwrap(), labels);
}

#[test]
fn reruns_are_byte_identical_and_stay_in_out() {
    let root = tempfile::tempdir().unwrap();
    let dir = prepared(root.path());
    let cfg = dir.join("experiment.toml");
    let before = snapshot(root.path());
    let a = dir.join("a");
    let b = dir.join("b");
    for out in [&a, &b] {
        let o = convemo(&["train", "--config", s(&cfg), "--stage", "pretrain", "--out", s(out)], root.path());
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
        let o = convemo(&["train", "--config", s(&cfg), "--stage", "1", "--out", s(out)], root.path());
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    }
    assert_eq!(snapshot(&a), snapshot(&b));
    let after = snapshot(root.path());
    for path in after.keys() {
        let inside = path.starts_with("exp/a") || path.starts_with("exp/b");
        assert!(inside || before.contains_key(path), "unexpected write {}", path.display());
    }
}

#[test]
fn chart_csv_renders() {
    let root = tempfile::tempdir().unwrap();
    let csv = root.path().join("chart.csv");
    fs::write(&csv, "group,arm,value\n1,a,0.5\n1,b,0.75\n").unwrap();
    let o = convemo(&["report", "--in", s(&csv), "--format", "chart"], root.path());
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(String::from_utf8(o.stdout).unwrap().contains('#'));
}
