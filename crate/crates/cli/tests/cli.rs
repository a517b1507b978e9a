use std::fs;
use std::path::Path;
use std::process::Command;

const TINY: &str = "\
epochs = 2
batch_size = 2

[schedule]
warmup_epochs = 1

[data]
train_samples = 4
val_samples = 2

[data.scene]
height = 32
width = 32
";

fn fuseg(args: &[&str], out: &Path, config: &Path) -> std::process::Output {
    let out = Command::new(env!("CARGO_BIN_EXE_fuseg"))
        .args(args)
        .arg("--out")
        .arg(out)
        .arg("--config")
        .arg(config)
        .output()
        .expect("binary runs");
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn json_lines(path: &Path) -> Vec<serde_json::Value> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

#[test]
fn train_then_evaluate_subsets() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("tiny.toml");
    fs::write(&config, TINY).unwrap();
    let out = dir.path().join("run");
    fuseg(&["train"], &out, &config);
    for f in ["best.bin", "best.manifest", "last.bin", "config.toml", "train.jsonl", "metrics.jsonl"] {
        assert!(out.join(f).exists(), "missing {f}");
    }
    assert_eq!(json_lines(&out.join("train.jsonl")).len(), 2);

    fuseg(&["eval-subsets"], &out, &config);
    let rows = json_lines(&out.join("subsets.jsonl"));
    assert_eq!(rows.len(), 16);
    let val = &json_lines(&out.join("metrics.jsonl"))[0];
    let full = rows.iter().find(|r| r["subset"] == "intensity+geometry+edges+material").unwrap();
    assert_eq!(full["miou"], val["miou"]);
}

#[test]
fn gradcheck_and_gen_data() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("tiny.toml");
    fs::write(&config, TINY).unwrap();
    fuseg(&["gradcheck", "--coords", "1"], dir.path(), &config);
    let rows = json_lines(&dir.path().join("gradcheck.jsonl"));
    assert!(!rows.is_empty());
    assert!(rows.iter().all(|r| r["max_rel_err"].as_f64().unwrap() < 1e-4));

    fuseg(&["gen-data"], dir.path(), &config);
    assert!(dir.path().join("train").is_dir() && dir.path().join("val").is_dir());
}

#[test]
fn unknown_modality_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let status = Command::new(env!("CARGO_BIN_EXE_fuseg"))
        .args(["train", "--subset", "sonar", "--out"])
        .arg(dir.path())
        .output()
        .unwrap();
    assert!(!status.status.success());
    assert!(String::from_utf8_lossy(&status.stderr).contains("sonar"));
}
