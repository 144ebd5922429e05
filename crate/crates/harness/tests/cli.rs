use std::path::Path;
use std::process::{Command, Output};

use maestro_core::memory::{MemoryConfig, MemoryItem, MemoryStore};

fn maestro(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_maestro")).args(args).output().unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn records(dir: &Path) -> (std::path::PathBuf, Vec<MemoryItem>) {
    let store = MemoryStore::new("cli", MemoryConfig::default(), 5);
    let q = MemoryItem::text(store.next_id(), "text", 1, "what flowers are here", vec!["query".into()]);
    let a = MemoryItem::text(store.next_id(), "text", 1, "roses", vec!["response".into()])
        .with_references(vec![q.id.clone()]);
    let path = dir.join("mem.jsonl");
    let items = vec![q, a];
    let text: String = items.iter().map(|i| i.to_json_line() + "\n").collect();
    std::fs::write(&path, text).unwrap();
    (path, items)
}

#[test]
fn scenario_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let out = maestro(&["scenario", "run", "garden"]);
    assert_eq!(code(&out), 0, "{}", stdout(&out));
    assert!(stdout(&out).contains("garden: PASS"));

    let failing = maestro_harness::GARDEN_SCENARIO
        .replace("backend_calls = { vision = 1 }", "backend_calls = { vision = 2 }");
    let path = dir.path().join("bad.scenario");
    std::fs::write(&path, failing).unwrap();
    let out = maestro(&["scenario", "run", path.to_str().unwrap()]);
    assert_eq!(code(&out), 1);
    assert!(stdout(&out).contains("FAIL"));

    let path = dir.path().join("broken.scenario");
    std::fs::write(&path, "name = ").unwrap();
    assert_eq!(code(&maestro(&["scenario", "run", path.to_str().unwrap()])), 2);
    assert_eq!(code(&maestro(&["scenario", "run", "/no/such/file.scenario"])), 2);

    let out = maestro(&["scenario", "run", "interrupt", "--json"]);
    assert_eq!(code(&out), 0);
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(report["passed"], true);
}

#[test]
fn usage_errors_exit_two() {
    assert_eq!(code(&maestro(&[])), 2);
    assert_eq!(code(&maestro(&["frobnicate"])), 2);
    assert_eq!(code(&maestro(&["bench", "tts", "--workers", "lots"])), 2);
}

#[test]
fn memory_validate_and_dump() {
    let dir = tempfile::tempdir().unwrap();
    let (path, items) = records(dir.path());
    let p = path.to_str().unwrap();
    let out = maestro(&["memory", "validate", p]);
    assert_eq!(code(&out), 0, "{}", stdout(&out));
    assert!(stdout(&out).contains("2 records, 0 violations, 0 warnings"));
    let out = maestro(&["memory", "dump", p]);
    assert_eq!(code(&out), 0);
    assert!(stdout(&out).contains(&items[0].id));

    let bad = items[1].clone().with_priority(1.5);
    std::fs::write(&path, format!("{}\n{}\n", items[0].to_json_line(), bad.to_json_line())).unwrap();
    let out = maestro(&["memory", "validate", p]);
    assert_eq!(code(&out), 1);
    assert!(stdout(&out).contains("priority out of [0,1]"));

    let orphan = items[1].clone();
    std::fs::write(&path, format!("{}\n", orphan.to_json_line())).unwrap();
    let out = maestro(&["memory", "validate", p, "--json"]);
    assert_eq!(code(&out), 0);
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["reports"][0]["warnings"].as_array().unwrap().len(), 1);

    assert_eq!(code(&maestro(&["memory", "validate", "/no/such.jsonl"])), 2);
    assert_eq!(code(&maestro(&["memory", "dump", "/no/such.jsonl"])), 2);
}

#[test]
fn bench_reports_both_modes() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("corpus.txt");
    std::fs::write(&corpus, "# two utterances\nThe first one is here. And it continues for a while, then stops.\nHello.\n").unwrap();
    let out = maestro(&["bench", "tts", corpus.to_str().unwrap(), "--json"]);
    assert_eq!(code(&out), 0);
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["sequential"]["mode"], "sequential");
    assert_eq!(v["parallel"]["mode"], "parallel-batch");
    assert_eq!(v["parallel"]["n"], 2);

    let out = maestro(&["bench", "tts", "--seed", "42"]);
    assert_eq!(code(&out), 0);
    assert!(stdout(&out).contains("mean reduction"));

    let empty = dir.path().join("empty.txt");
    std::fs::write(&empty, "\n").unwrap();
    assert_eq!(code(&maestro(&["bench", "tts", empty.to_str().unwrap()])), 2);
}

#[test]
fn mock_check() {
    let dir = tempfile::tempdir().unwrap();
    let good = dir.path().join("good.toml");
    std::fs::write(&good, "[[entries]]\nmatch = \"^hi\"\nrespond = \"[S.speak] hello\"\n\n[[entries]]\nmatch = \".*\"\nrespond = \"what?\"\n").unwrap();
    let out = maestro(&["mock", "check", good.to_str().unwrap(), "--query", "hi there"]);
    assert_eq!(code(&out), 0);
    assert!(stdout(&out).contains("-> [S.speak] hello"));

    let no_catch_all = dir.path().join("bad.toml");
    std::fs::write(&no_catch_all, "[[entries]]\nmatch = \"^hi\"\nrespond = \"x\"\n").unwrap();
    assert_eq!(code(&maestro(&["mock", "check", no_catch_all.to_str().unwrap()])), 1);
    let bad_regex = dir.path().join("regex.toml");
    std::fs::write(&bad_regex, "[[entries]]\nmatch = \"(\"\nrespond = \"x\"\n").unwrap();
    assert_eq!(code(&maestro(&["mock", "check", bad_regex.to_str().unwrap()])), 1);
    assert_eq!(code(&maestro(&["mock", "check", "/no/such.toml"])), 2);
}
