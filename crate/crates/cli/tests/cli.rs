//! End-to-end runs of the `biolink` binary: exit codes, help text and the
//! toy pipeline.

#[path = "../../core/tests/support/http.rs"]
mod http;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use biolink::evalharness::EvalReport;
use biolink::teacher::UsageLedger;
use http::{prompt_candidates, user_prompt, FakeServer, Reply};

fn root() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn bin() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_biolink"));
    cmd.env_remove("OPENAI_API_KEY");
    cmd
}

fn toy(args: &[&str]) -> Output {
    bin().arg("--config").arg(root().join("configs/toy.toml")).args(args).output().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

#[track_caller]
fn assert_code(o: &Output, want: i32) {
    assert_eq!(code(o), want, "stdout: {}\nstderr: {}", stdout(o), stderr(o));
}

#[test]
fn help_lists_defaults_for_every_subcommand() {
    let top = bin().arg("--help").output().unwrap();
    assert_code(&top, 0);
    for (sub, defaults) in [
        ("ingest", &["[default: train]"][..]),
        ("retrieve", &["[default: 6]", "[default: dot]"][..]),
        ("mine-negatives", &["[default: 15]", "[default: 0.10]", "[default: 42]"][..]),
        ("generate", &["[default: remote]", "[default: 0]", "[default: 512]", "[default: drop-unparseable-only]"][..]),
        ("evaluate", &["[default: student]", "[default: 1,5]", "[default: 256]"][..]),
        ("validate-dataset", &[][..]),
        ("import-embeddings", &[][..]),
        ("cost-report", &[][..]),
    ] {
        assert!(stdout(&top).contains(sub), "{sub} missing from top-level help");
        let o = bin().args([sub, "--help"]).output().unwrap();
        assert_code(&o, 0);
        for d in defaults {
            assert!(stdout(&o).contains(d), "{sub} --help lacks {d}:\n{}", stdout(&o));
        }
    }
}

#[test]
fn usage_errors_exit_2() {
    assert_code(&bin().arg("frobnicate").output().unwrap(), 2);
    assert_code(&bin().args(["evaluate", "--k", "six"]).output().unwrap(), 2);
    assert_code(&bin().output().unwrap(), 2);
}

#[test]
fn missing_embeddings_exit_2_and_name_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let o = toy(&[
        "evaluate",
        "--backend",
        "mock:identity",
        "--entity-embeddings",
        s(&dir.path().join("nope.json")),
        "--out-dir",
        s(dir.path()),
    ]);
    assert_code(&o, 2);
    assert!(stderr(&o).contains("paths.entity_embeddings"), "{}", stderr(&o));

    // Without a config nothing is set; the first missing input is named.
    let o = bin().args(["evaluate", "--backend", "mock:identity"]).output().unwrap();
    assert_code(&o, 2);
    assert!(stderr(&o).contains("paths.kb"), "{}", stderr(&o));
}

#[test]
fn bad_limits_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    for limit in ["0", "9"] {
        let o = toy(&["generate", "--backend", "mock:identity", "--no-cache", "--limit", limit, "--out-dir", s(dir.path())]);
        assert_code(&o, 2);
    }
    assert!(!dir.path().join("dataset.jsonl").exists());
}

#[test]
fn unknown_config_key_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.toml");
    fs::write(&cfg, "[generation]\napi_key = \"sk-secret\"\n").unwrap();
    let o = bin().arg("--config").arg(&cfg).args(["cost-report", "--ledger", "x"]).output().unwrap();
    assert_code(&o, 2);
}

#[test]
fn remote_without_key_or_endpoint_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let o = toy(&["generate", "--out-dir", s(dir.path()), "--no-cache"]);
    assert_code(&o, 2);
    assert!(stderr(&o).contains("generation.endpoint"), "{}", stderr(&o));
    let o = toy(&["generate", "--endpoint", "http://127.0.0.1:9/v1", "--out-dir", s(dir.path()), "--no-cache"]);
    assert_code(&o, 2);
    assert!(stderr(&o).contains("OPENAI_API_KEY"), "{}", stderr(&o));
}

#[test]
fn rejected_key_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let server = FakeServer::start(|_, _| Reply::status(401, r#"{"error":{"message":"bad key"}}"#));
    let o = bin()
        .env("OPENAI_API_KEY", "sk-wrong")
        .arg("--config")
        .arg(root().join("configs/toy.toml"))
        .args(["generate", "--endpoint", &server.url, "--no-cache", "--out-dir", s(dir.path())])
        .output()
        .unwrap();
    assert_code(&o, 3);
    // Auth failures are not retried and every mention stops at the first one.
    assert!(server.count() <= 4, "{} requests", server.count());
    assert!(!dir.path().join("dataset.jsonl").exists());
}

#[test]
fn toy_pipeline_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();

    let o = toy(&["ingest", "--split", "test", "--report", s(&d.join("ingest.json"))]);
    assert_code(&o, 0);
    assert!(d.join("ingest.json").exists());

    let o = toy(&["retrieve", "--out", s(&d.join("cands.jsonl"))]);
    assert_code(&o, 0);
    assert!(stdout(&o).contains("recall@6 = 0.875"), "{}", stdout(&o));
    assert_eq!(fs::read_to_string(d.join("cands.jsonl")).unwrap().lines().count(), 8);

    let o = toy(&["mine-negatives", "--out", s(&d.join("pairs.tsv"))]);
    assert_code(&o, 0);
    let pairs = fs::read_to_string(d.join("pairs.tsv")).unwrap();
    assert_eq!(pairs.lines().filter(|l| !l.starts_with('#') && !l.starts_with("mention_uid")).count(), 40);

    let gen = d.join("gen");
    let o = toy(&["generate", "--backend", "mock:oracle", "--cache-dir", s(&d.join("cache")), "--out-dir", s(&gen)]);
    assert_code(&o, 0);
    assert_eq!(fs::read_to_string(gen.join("dataset.jsonl")).unwrap().lines().count(), 8);
    assert_eq!(fs::read_to_string(gen.join("audit.jsonl")).unwrap().lines().count(), 8);

    let o = bin().arg("validate-dataset").arg(gen.join("dataset.jsonl")).output().unwrap();
    assert_code(&o, 0);
    assert!(stdout(&o).contains("PASS"));

    for (backend, acc1, acc5) in [("mock:identity", 0.375, 0.75), ("mock:oracle", 0.875, 0.875), ("mock:reverse", 0.125, 0.5)] {
        let out = d.join(backend.replace(':', "_"));
        let o = toy(&["evaluate", "--backend", backend, "--no-cache", "--out-dir", s(&out)]);
        assert_code(&o, 0);
        let report: EvalReport = serde_json::from_str(&fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
        assert_eq!(report.acc_at[&1], acc1, "{backend}");
        assert_eq!(report.acc_at[&5], acc5, "{backend}");
        assert_eq!(report.recall_at_k_candidates, 0.875);
        assert_eq!(report.n_evaluated, 8);
        assert_eq!(fs::read_to_string(out.join("trace.jsonl")).unwrap().lines().count(), 8);
        assert!(out.join("ledger.evaluate.json").exists());
    }

    let o = toy(&["cost-report", "--ledger", s(&gen.join("ledger.generate.json")), "--json", s(&d.join("cost.json"))]);
    assert_code(&o, 0);
    let cost: serde_json::Value = serde_json::from_str(&fs::read_to_string(d.join("cost.json")).unwrap()).unwrap();
    assert_eq!(cost["total_usd"], 0.0);
}

#[test]
fn damaged_dataset_fails_validation() {
    let dir = tempfile::tempdir().unwrap();
    let gen = dir.path().join("gen");
    assert_code(&toy(&["generate", "--backend", "mock:identity", "--no-cache", "--out-dir", s(&gen)]), 0);
    let path = gen.join("dataset.jsonl");
    let text = fs::read_to_string(&path).unwrap();
    let mut lines: Vec<String> = text.lines().map(String::from).collect();
    let mut rec: serde_json::Value = serde_json::from_str(&lines[2]).unwrap();
    let out = rec["output"].as_str().unwrap().lines().skip(1).collect::<Vec<_>>().join("\n");
    rec["output"] = out.into();
    lines[2] = rec.to_string();
    fs::write(&path, lines.join("\n") + "\n").unwrap();
    let o = bin().arg("validate-dataset").arg(&path).output().unwrap();
    assert_code(&o, 1);
    assert!(format!("{}{}", stdout(&o), stderr(&o)).contains("line 3"));

    let o = bin().arg("validate-dataset").arg(dir.path().join("missing.jsonl")).output().unwrap();
    assert_code(&o, 2);
}

#[test]
fn import_embeddings_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("e.json");
    let o = bin()
        .args(["import-embeddings", "--input"])
        .arg(root().join("fixtures/toy/entity_vectors.txt"))
        .arg("--out")
        .arg(&out)
        .arg("--kb")
        .arg(root().join("fixtures/toy/kb.tsv"))
        .output()
        .unwrap();
    assert_code(&o, 0);
    assert_eq!(fs::read(dir.path().join("e.emb")).unwrap(), fs::read(root().join("fixtures/toy/emb/entities.emb")).unwrap());

    fs::write(dir.path().join("short.txt"), "H00.0\t1 0\n").unwrap();
    let o = bin()
        .args(["import-embeddings", "--input"])
        .arg(dir.path().join("short.txt"))
        .arg("--out")
        .arg(dir.path().join("s.json"))
        .arg("--kb")
        .arg(root().join("fixtures/toy/kb.tsv"))
        .output()
        .unwrap();
    assert_code(&o, 1);
}

/// A served student speaking the chat-completion protocol: greedy decoding
/// means the same answer for the same prompt.
#[test]
fn evaluate_against_student_endpoint() {
    let dir = tempfile::tempdir().unwrap();
    let server = FakeServer::start(|_, seen| {
        let prompt = user_prompt(&seen.body);
        Reply::completion(&biolink::promptkit::numbered_list(&prompt_candidates(&prompt)), 80, 20)
    });
    let mut reports = Vec::new();
    for run in ["a", "b"] {
        let out = dir.path().join(run);
        let o = toy(&["evaluate", "--backend", "student", "--endpoint", &server.url, "--no-cache", "--out-dir", s(&out)]);
        assert_code(&o, 0);
        reports.push(fs::read_to_string(out.join("trace.jsonl")).unwrap());
        let ledger = UsageLedger::load(out.join("ledger.evaluate.json")).unwrap();
        assert_eq!(ledger.remote_calls(), 8);
    }
    assert_eq!(reports[0], reports[1]);
    assert_eq!(server.count(), 16);
    for seen in server.requests() {
        assert_eq!(seen.path, "/v1/chat/completions");
        assert_eq!(seen.body["temperature"], 0.0);
        assert!(seen.authorization.is_none());
    }
    let body = &server.requests()[0].body;
    assert_eq!(body["model"], "student");
    assert_eq!(body["messages"][0]["role"], "user");
    // Student prompts carry no worked examples.
    assert!(!user_prompt(body).contains("Example"));
}
