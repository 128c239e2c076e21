use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = r#"
seed = 7
[dataset]
n_train = 30
n_test = 10
[model]
preset = "tiny"
[train]
epochs = 1
"#;

fn hoiprime(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hoiprime"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(o: &Output) -> String {
    assert!(
        o.status.success(),
        "exit {:?}\nstdout:\n{}\nstderr:\n{}",
        o.status,
        String::from_utf8_lossy(&o.stdout),
        String::from_utf8_lossy(&o.stderr)
    );
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn setup() -> tempfile::TempDir {
    let d = tempfile::tempdir().unwrap();
    fs::write(d.path().join("small.toml"), SMALL).unwrap();
    d
}

fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().display().to_string(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn gen_creates_missing_dirs_and_is_deterministic() {
    let d = setup();
    ok(&hoiprime(d.path(), &["gen", "--config", "small.toml", "--out", "a/b/data"]));
    ok(&hoiprime(d.path(), &["gen", "--config", "small.toml", "--out", "again"]));
    let a = dir_bytes(&d.path().join("a/b/data"));
    assert!(a.iter().any(|(n, _)| n == "train.jsonl"));
    assert!(a.iter().any(|(n, _)| n == "gen.json"));
    assert_eq!(a, dir_bytes(&d.path().join("again")));
}

#[test]
fn gen_with_no_predicates_fails_without_writing() {
    let d = setup();
    let bad = SMALL.replace("n_test = 10", "n_test = 10\npredicates = []");
    fs::write(d.path().join("bad.toml"), bad).unwrap();
    let o = hoiprime(d.path(), &["gen", "--config", "bad.toml", "--out", "nested/data"]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("predicate"));
    assert!(!d.path().join("nested").exists());
}

#[test]
fn train_then_eval_writes_reports_with_provenance() {
    let d = setup();
    ok(&hoiprime(d.path(), &["gen", "--config", "small.toml", "--data", "data"]));
    ok(&hoiprime(d.path(), &["train", "--config", "small.toml", "--out", "run"]));
    for f in ["checkpoint.bin", "loss.csv", "model.json"] {
        assert!(d.path().join("run").join(f).exists(), "{f}");
    }
    let csv = fs::read_to_string(d.path().join("run/loss.csv")).unwrap();
    assert!(csv.starts_with("epoch,j1,j2,total,lr"));
    let table = ok(&hoiprime(d.path(), &["eval", "--config", "small.toml", "--out", "run"]));
    assert!(table.contains("Full") && table.contains("Non-rare"));
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(d.path().join("run/report.json")).unwrap()).unwrap();
    assert_eq!(report["seed"], 7);
    assert_eq!(report["config_hash"].as_str().unwrap().len(), 16);

    let first = fs::read(d.path().join("run/checkpoint.bin")).unwrap();
    ok(&hoiprime(d.path(), &["train", "--config", "small.toml", "--out", "run2"]));
    assert_eq!(first, fs::read(d.path().join("run2/checkpoint.bin")).unwrap());
}

#[test]
fn zero_shot_eval_reports_unseen_seen_all() {
    let d = setup();
    ok(&hoiprime(d.path(), &["gen", "--config", "small.toml", "--zero-shot"]));
    assert!(d.path().join("data/split.json").exists());
    ok(&hoiprime(d.path(), &["train", "--config", "small.toml", "--zero-shot"]));
    let table = ok(&hoiprime(d.path(), &["eval", "--config", "small.toml", "--zero-shot"]));
    let header: Vec<&str> = table.lines().next().unwrap().split_whitespace().collect();
    assert_eq!(header, ["Unseen", "Seen", "All"]);
}

#[test]
fn ablate_emits_one_row_per_variant_deterministically() {
    let d = setup();
    ok(&hoiprime(d.path(), &["gen", "--config", "small.toml"]));
    let args = ["ablate", "--config", "small.toml", "--variant", "standard,np,nl,nc"];
    let a = ok(&hoiprime(d.path(), &args));
    let rows: Vec<&str> = a.lines().collect();
    assert_eq!(rows.len(), 5);
    assert!(rows[0].contains("Full") && rows[0].contains("Rare"));
    assert!(rows[1].starts_with("standard") && rows[4].starts_with("nc"));
    let json = fs::read(d.path().join("run/ablation.json")).unwrap();
    let b = ok(&hoiprime(d.path(), &args));
    assert_eq!(a, b);
    assert_eq!(json, fs::read(d.path().join("run/ablation.json")).unwrap());
}

#[test]
fn unknown_variant_lists_valid_names() {
    let d = setup();
    let o = hoiprime(d.path(), &["ablate", "--config", "small.toml", "--variant", "standard,bogus"]);
    assert!(!o.status.success());
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("bogus") && err.contains("concat-larger"), "{err}");
}

#[test]
fn gradcheck_passes() {
    let d = setup();
    let out = ok(&hoiprime(d.path(), &["gradcheck", "--config", "small.toml", "--seeds", "2"]));
    assert!(out.contains("conv2d") && out.contains("lateral1"));
    assert!(!out.contains("FAIL"));
}
