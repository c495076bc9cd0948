use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use ilora::experiment::{load_config, parse_config, serialize_config};

fn ilora(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ilora")).args(args).output().expect("binary runs")
}

fn quick_config() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("configs/quick.conf")
}

fn run_to(out: &Path, extra: &[&str]) -> Output {
    let config = quick_config();
    let mut args = vec!["run", "--config", config.to_str().unwrap(), "--out", out.to_str().unwrap()];
    args.extend_from_slice(extra);
    ilora(&args)
}

#[test]
fn run_writes_one_record_per_round() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("metrics.jsonl");
    let status = run_to(&out, &["--rounds", "2", "--method", "full_stack"]);
    assert!(status.status.success(), "{}", String::from_utf8_lossy(&status.stderr));
    let text = std::fs::read_to_string(&out).unwrap();
    let lines: Vec<serde_json::Value> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 2);
    for (i, rec) in lines.iter().enumerate() {
        assert_eq!(rec["round"].as_u64(), Some(i as u64 + 1));
        assert_eq!(rec["method"], "full_stack");
        assert_eq!(rec["seed"].as_u64(), Some(7));
        for key in ["train_loss", "holdout_accuracy", "truncation_error", "drift", "bytes_down", "bytes_up"] {
            assert!(rec[key].is_number(), "missing {key}");
        }
    }
}

#[test]
fn reruns_are_byte_identical_and_seed_sensitive() {
    let dir = tempfile::tempdir().unwrap();
    let paths: Vec<PathBuf> = ["a", "b", "c"].iter().map(|n| dir.path().join(n)).collect();
    assert!(run_to(&paths[0], &[]).status.success());
    assert!(run_to(&paths[1], &[]).status.success());
    assert!(run_to(&paths[2], &["--seed", "8"]).status.success());
    let read = |p: &PathBuf| std::fs::read(p).unwrap();
    assert_eq!(read(&paths[0]), read(&paths[1]));
    assert_ne!(read(&paths[0]), read(&paths[2]));
}

#[test]
fn stdout_is_the_default_sink() {
    let config = quick_config();
    let out = ilora(&["run", "--config", config.to_str().unwrap(), "--rounds", "3"]);
    assert!(out.status.success());
    assert_eq!(String::from_utf8(out.stdout).unwrap().lines().count(), 3);
}

#[test]
fn bias_suite_passes() {
    let out = ilora(&["verify", "--suite", "bias"]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("PASS") && !text.contains("FAIL"), "{text}");
}

#[test]
fn unknown_suite_and_bad_config_are_rejected() {
    let out = ilora(&["verify", "--suite", "nonsense"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("nonsense"));

    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.conf");
    std::fs::write(&bad, "federation.rounds = many\n").unwrap();
    let out = ilora(&["run", "--config", bad.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 1"));

    let out = ilora(&["run", "--config", dir.path().join("missing.conf").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn shipped_configs_load_and_round_trip() {
    for name in ["quick", "canonical", "paper_hetero"] {
        let path = Path::new(env!("CARGO_MANIFEST_DIR")).join(format!("configs/{name}.conf"));
        let spec = load_config(&path).unwrap();
        let again = parse_config(&serialize_config(&spec)).unwrap();
        assert_eq!(spec, again, "{name}");
    }
}
