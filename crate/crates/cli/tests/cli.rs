use std::path::Path;
use std::process::{Command, Output};

fn dhi(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dhi"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("spawn dhi")
}

fn tree_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap().flatten() {
            let p = e.path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).unwrap().to_string_lossy().into_owned();
                out.push((rel, std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn gen(dir: &Path, count: &str, test: &str, size: &str, seed: &str) -> Output {
    dhi(&[
        "gen-data", "--count", count, "--test-count", test, "--classes", "3", "--seed", seed, "--size", size,
        "--out", dir.to_str().unwrap(),
    ])
}

#[test]
fn gen_data_is_deterministic() {
    let t = tempfile::tempdir().unwrap();
    let (a, b) = (t.path().join("a"), t.path().join("b"));
    assert!(gen(&a, "1", "0", "32", "7").status.success());
    assert!(gen(&b, "1", "0", "32", "7").status.success());
    let (ta, tb) = (tree_bytes(&a), tree_bytes(&b));
    assert!(!ta.is_empty());
    assert_eq!(ta, tb);
}

#[test]
fn zero_count_is_usage_error() {
    let t = tempfile::tempdir().unwrap();
    let o = gen(t.path(), "0", "0", "32", "1");
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn manifest_lists_every_record() {
    let t = tempfile::tempdir().unwrap();
    assert!(gen(t.path(), "200", "0", "16", "3").status.success());
    let m: serde_json::Value =
        serde_json::from_slice(&std::fs::read(t.path().join("manifest.json")).unwrap()).unwrap();
    assert_eq!(m["train"].as_array().unwrap().len(), 200);
    assert_eq!(m["classes"], 3);
}

#[test]
fn unwritable_output_fails() {
    let t = tempfile::tempdir().unwrap();
    let file = t.path().join("plain");
    std::fs::write(&file, b"x").unwrap();
    let o = gen(&file.join("sub"), "1", "0", "16", "1");
    assert!(!o.status.success());
    assert!(!o.stderr.is_empty());
}

#[test]
fn smoke_train_then_eval() {
    let t = tempfile::tempdir().unwrap();
    let data = t.path().join("data");
    let run = t.path().join("run");
    assert!(gen(&data, "20", "4", "32", "5").status.success());
    let o = dhi(&[
        "train", "--data", data.to_str().unwrap(), "--epochs", "2", "--seed", "1", "--set", "input_size=32",
        "--out", run.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = std::fs::read_to_string(run.join("loss.csv")).unwrap();
    let rows: Vec<Vec<f64>> = csv
        .lines()
        .skip(1)
        .map(|l| l.split(',').map(|v| v.parse().unwrap()).collect())
        .collect();
    assert_eq!(rows.len(), 2);
    assert!(rows[1][4] < rows[0][4], "{csv}");
    assert!(run.join("weights.dhi").exists() && run.join("model.cfg").exists());

    let w = run.join("weights.dhi");
    let o = dhi(&["eval", "--weights", w.to_str().unwrap(), "--data", data.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(run.join("eval/ap_table.csv").exists());
    assert!(run.join("eval/pr_class_0.csv").exists());

    let o = dhi(&["eval", "--weights", w.to_str().unwrap(), "--data", data.to_str().unwrap(), "--iou", "1.5"]);
    assert_eq!(o.status.code(), Some(1));
    let o = dhi(&["eval", "--weights", w.to_str().unwrap(), "--data", data.to_str().unwrap(), "--iou", "0"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn empty_test_split_reports_undefined() {
    let t = tempfile::tempdir().unwrap();
    let data = t.path().join("data");
    let run = t.path().join("run");
    assert!(gen(&data, "4", "0", "32", "2").status.success());
    let o = dhi(&[
        "train", "--data", data.to_str().unwrap(), "--epochs", "1", "--set", "input_size=32",
        "--out", run.to_str().unwrap(),
    ]);
    assert!(o.status.success());
    let w = run.join("weights.dhi");
    let o = dhi(&["eval", "--weights", w.to_str().unwrap(), "--data", data.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stdout).contains("undefined"));
}

#[test]
fn missing_dataset_is_data_error() {
    let t = tempfile::tempdir().unwrap();
    let o = dhi(&[
        "train", "--data", t.path().join("nope").to_str().unwrap(), "--out", t.path().join("o").to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn profile_emits_conv_row() {
    let t = tempfile::tempdir().unwrap();
    let o = dhi(&["profile", "--out", t.path().to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = std::fs::read_to_string(t.path().join("params_comparison.csv")).unwrap();
    let row = csv.lines().find(|l| l.starts_with("standard_convolution")).unwrap();
    let cells: Vec<&str> = row.split(',').collect();
    // Columns are F = 1, 3, 5, 7, 9.
    assert_eq!(&cells[2..5], &["216", "600", "1176"]);
    for f in ["params_comparison_bn_stats.csv", "params_published_delta.csv", "model_profile.csv", "model_profile.txt"] {
        assert!(t.path().join(f).exists(), "{f}");
    }
}

#[test]
fn profile_rejects_bad_config_key() {
    let t = tempfile::tempdir().unwrap();
    let o = dhi(&["profile", "--set", "no_such_key=1", "--out", t.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn gradcheck_passes_and_detects_fault() {
    let o = dhi(&["gradcheck", "--seed", "3"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stdout));
    let o = dhi(&["gradcheck", "--seed", "3", "--corrupt-op", "involution"]);
    assert_eq!(o.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&o.stdout).contains("FAIL"));
}
