use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/fixtures")
}

fn fever(work: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fever"))
        .arg("--config")
        .arg(fixtures().join("config.json"))
        .arg("--work-dir")
        .arg(work)
        .args(args)
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn full_chain_then_cache_hits() {
    let dir = tempfile::tempdir().unwrap();
    for stage in ["ingest", "index", "retrieve", "select", "aggregate", "evaluate"] {
        let o = fever(dir.path(), &[stage]);
        assert_eq!(o.status.code(), Some(0), "{stage}: {}", String::from_utf8_lossy(&o.stderr));
        assert!(stdout(&o).starts_with(&format!("{stage} [done]")), "{}", stdout(&o));
    }
    let again = fever(dir.path(), &["evaluate"]);
    assert!(stdout(&again).starts_with("evaluate [cached]"));
    let metrics = std::fs::read_dir(dir.path().join("evaluate")).unwrap().next().unwrap().unwrap().path();
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(metrics.join("metrics.json")).unwrap()).unwrap();
    assert_eq!(report["n_claims"], 12);
}

#[test]
fn missing_upstream_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let o = fever(dir.path(), &["select"]);
    assert_eq!(o.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&o.stderr).contains("retrieve"));
}

#[test]
fn usage_errors_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(fever(dir.path(), &["frobnicate"]).status.code(), Some(1));
    assert_eq!(fever(dir.path(), &["--scorer", "neural", "ingest"]).status.code(), Some(1));
    assert_eq!(fever(dir.path(), &["--k", "many", "ingest"]).status.code(), Some(1));
    let help = fever(dir.path(), &["--help"]);
    assert_eq!(help.status.code(), Some(0));
    for sub in ["tune-tfidf", "tune-gbdt", "ablate", "export-training"] {
        assert!(stdout(&help).contains(sub), "{sub}");
    }
}

#[test]
fn bad_data_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_fever"))
        .args(["--work-dir"])
        .arg(dir.path())
        .args(["--corpus"])
        .arg(dir.path().join("absent.jsonl"))
        .arg("ingest")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));

    let cfg = dir.path().join("cfg.json");
    std::fs::write(&cfg, "{ not json").unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_fever")).arg("--config").arg(&cfg).arg("ingest").output().unwrap();
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn flags_change_the_cache_key() {
    let dir = tempfile::tempdir().unwrap();
    for stage in ["ingest", "index", "retrieve"] {
        assert_eq!(fever(dir.path(), &[stage]).status.code(), Some(0));
    }
    let o = fever(dir.path(), &["--no-fuzzy", "retrieve"]);
    assert!(stdout(&o).starts_with("retrieve [done]"));
    let o = fever(dir.path(), &["--k", "4", "retrieve"]);
    assert!(stdout(&o).starts_with("retrieve [done]"));
    assert_eq!(std::fs::read_dir(dir.path().join("retrieve")).unwrap().count(), 3);
    // Odd k cannot be split between the title and body indices.
    assert_eq!(fever(dir.path(), &["--k", "3", "retrieve"]).status.code(), Some(2));
}

#[test]
fn ablate_prints_six_rows() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(fever(dir.path(), &["ingest"]).status.code(), Some(0));
    let o = fever(dir.path(), &["--seed", "3", "ablate"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let out = stdout(&o);
    assert!(out.contains("6 rows"));
    assert_eq!(out.matches("+ fuzzy string search").count(), 2);
    assert_eq!(out.matches("+ document re-retrieval").count(), 2);
}

#[test]
fn bridge_scorer_over_a_subprocess() {
    let dir = tempfile::tempdir().unwrap();
    // Answers every request with a fixed ternary triple per sentence.
    let script = dir.path().join("mock.py");
    std::fs::write(
        &script,
        r#"import json, sys
for line in sys.stdin:
    req = json.loads(line)
    rows = 1 if req["kind"] == "claim_concat" else len(req["sentences"])
    print(json.dumps({"id": req["id"], "probs": [[0.25, 0.5, 0.25]] * rows}), flush=True)
"#,
    )
    .unwrap();
    if Command::new("python3").arg("--version").output().is_err() {
        return;
    }
    let scorer = format!("bridge:python3 {}", script.display());
    for stage in ["ingest", "index", "retrieve", "select"] {
        let o = fever(dir.path(), &["--scorer", &scorer, stage]);
        assert_eq!(o.status.code(), Some(0), "{stage}: {}", String::from_utf8_lossy(&o.stderr));
    }
    let broken = "bridge:sh -c 'read x; echo not-json'";
    let o = fever(dir.path(), &["--scorer", broken, "--seed", "9", "select"]);
    assert_eq!(o.status.code(), Some(2), "{}", String::from_utf8_lossy(&o.stderr));
}
