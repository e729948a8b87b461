use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn routeprint(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_routeprint"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn tree(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let p = e.unwrap().path();
            (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap())
        })
        .collect();
    files.sort();
    files
}

#[test]
fn victim_tamper_compare_attribute_pipeline() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let o = routeprint(d, &["build-victim", "--out", "v"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).starts_with("victim 07a2805b8ac0d334 experts=5"));

    let o = routeprint(d, &["tamper", "--victim", "v/victim.json", "--op", "add-2", "--out", "s"]);
    assert!(o.status.success());
    assert!(stdout(&o).contains("experts=7"));

    let o = routeprint(
        d,
        &["compare", "--victim", "v/victim.json", "--suspect", "s/suspect.json", "--record", "s/tamper_record.json", "--out", "c"],
    );
    assert!(o.status.success());
    assert_eq!(stdout(&o).trim(), "matched=5 new=2 accuracy=1.000");

    let o = routeprint(d, &["attribute", "--report", "c/compare.json", "--out", "a"]);
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout(&o).starts_with("matched=5 new=2"));
    // A margin threshold above 1 leaves nothing matched.
    let o = routeprint(d, &["attribute", "--report", "c/compare.json", "--tau-margin", "1.5", "--out", "a"]);
    assert!(stdout(&o).starts_with("matched=0 new=7"));

    let o = routeprint(d, &["compare", "--victim", "v/victim.json", "--suspect", "v/victim.json", "--format", "both", "--out", "self"]);
    assert_eq!(stdout(&o).trim(), "matched=5 new=0");
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(d.join("self/compare.json")).unwrap()).unwrap();
    let values = report["similarity"]["values"]["data"].as_array().unwrap();
    for j in 0..5 {
        assert!((values[j * 5 + j].as_f64().unwrap() - 1.0).abs() < 1e-9);
    }
    assert!(d.join("self/compare_baselines.csv").exists());

    let o = routeprint(d, &["fingerprint", "--model", "v/victim.json", "--out", "f"]);
    assert!(o.status.success());
    let fps: serde_json::Value = serde_json::from_str(&fs::read_to_string(d.join("f/fingerprints.json")).unwrap()).unwrap();
    assert_eq!(fps.as_array().unwrap().len(), 5);
}

#[test]
fn heatmap_suite_is_byte_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    for out in ["a", "b"] {
        let o = routeprint(d, &["suite", "routing-heatmap", "--seed", "3", "--format", "both", "--out", out]);
        assert!(o.status.success());
    }
    let a = tree(&d.join("a/routing-heatmap"));
    assert!(!a.is_empty());
    assert_eq!(a, tree(&d.join("b/routing-heatmap")));
}

#[test]
fn gen_data_writes_both_formats() {
    let tmp = tempfile::tempdir().unwrap();
    let o = routeprint(tmp.path(), &["gen-data", "--format", "both", "--out", "data"]);
    assert!(o.status.success());
    for f in ["train.json", "probe.json", "train.csv", "probe.csv"] {
        assert!(tmp.path().join("data").join(f).exists(), "{f}");
    }
}

#[test]
fn failures_map_to_exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    assert_eq!(routeprint(d, &["suite", "nonsense"]).status.code(), Some(2));

    fs::write(d.join("bad.toml"), "no_such_key = 1\n").unwrap();
    assert_eq!(routeprint(d, &["gen-data", "--config", "bad.toml"]).status.code(), Some(2));

    let o = routeprint(d, &["compare", "--victim", "missing.json", "--suspect", "missing.json"]);
    assert_eq!(o.status.code(), Some(4));
    assert!(String::from_utf8_lossy(&o.stderr).starts_with("error:"));

    fs::write(d.join("hot.toml"), "finetune_lr = 1e306\n").unwrap();
    assert_eq!(routeprint(d, &["build-victim", "--config", "hot.toml"]).status.code(), Some(3));
}
