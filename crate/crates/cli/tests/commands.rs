use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use fscs_core::episode::{load_dataset, read_descriptors_jsonl, LayoutConfig};
use fscs_core::hashing::content_hash;
use fscs_core::{visual_prompts, AgentConfig};
use serde_json::Value;

fn fixture() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/fixtures/mini")
}

fn fscs(out: &Path, args: &[&str]) -> Output {
    let root = format!("dataset.root={}", serde_json::to_string(&fixture()).unwrap());
    Command::new(env!("CARGO_BIN_EXE_fscs"))
        .args(["--set", &root, "--output", out.to_str().unwrap()])
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn ok(o: Output) -> Output {
    assert!(o.status.success(), "status {:?}\n{}\n{}", o.status, stdout(&o), String::from_utf8_lossy(&o.stderr));
    o
}

#[test]
fn sample_writes_deterministic_episode_list() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let args = ["--set", "episodes.count=10", "--set", "episodes.seed=4", "sample"];
    let o = ok(fscs(&a, &args));
    assert!(stdout(&o).contains("sampled 10 episodes"));
    ok(fscs(&b, &args));
    let first = fs::read(a.join("episodes.jsonl")).unwrap();
    assert_eq!(first, fs::read(b.join("episodes.jsonl")).unwrap());
    assert_eq!(String::from_utf8(first).unwrap().lines().count(), 10);
}

#[test]
fn bad_dataset_root_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let o = fscs(dir.path(), &["--set", "dataset.root=/nonexistent/data", "sample"]);
    assert_eq!(o.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&o.stderr).contains("missing manifest"));
}

#[test]
fn config_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(fscs(dir.path(), &["--set", "agent.no_such_key=1", "sample"]).status.code(), Some(2));
    let cfg = dir.path().join("bad.json");
    fs::write(&cfg, r#"{"parallelism": 0}"#).unwrap();
    assert_eq!(fscs(dir.path(), &["--config", cfg.to_str().unwrap(), "sample"]).status.code(), Some(2));
}

#[test]
fn config_precedence() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    fs::write(&cfg, r#"{"parallelism": 3, "episodes": {"count": 2, "seed": 9}, "oracle": {"judge_threshold": 0.8}}"#)
        .unwrap();
    let out = dir.path().join("out");
    ok(fscs(&out, &["--config", cfg.to_str().unwrap(), "--set", "parallelism=2", "run"]));
    let manifest: Value = serde_json::from_slice(&fs::read(out.join("run_manifest.json")).unwrap()).unwrap();
    let c = &manifest["config"];
    assert_eq!(c["parallelism"], 2);
    assert_eq!(c["episodes"]["count"], 2);
    assert_eq!(c["oracle"]["judge_threshold"], 0.8);
    assert_eq!(c["agent"]["max_refinements_per_class"], 3);
}

#[test]
fn oracle_run_then_replay_then_eval() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("oracle");
    ok(fscs(&out, &["--set", "episodes.count=10", "sample"]));
    let list = out.join("episodes.jsonl");
    let o = ok(fscs(&out, &["--set", "parallelism=4", "run", "--episodes", list.to_str().unwrap()]));
    assert!(stdout(&o).contains("ran 10 episodes"));
    let transcripts = out.join("transcripts");
    assert_eq!(fs::read_dir(&transcripts).unwrap().count(), 10);
    let manifest: Value = serde_json::from_slice(&fs::read(out.join("run_manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["failure_count"], 0);
    assert_eq!(manifest["episode_count"], 10);
    assert_eq!(manifest["dataset_fingerprint"].as_str().unwrap().len(), 16);

    let replay = dir.path().join("replay");
    let replay_dir = format!("replay_dir={}", serde_json::to_string(&transcripts).unwrap());
    ok(fscs(
        &replay,
        &[
            "--set", &replay_dir,
            "--set", "backends.chat=replay", "--set", "backends.vision=replay", "--set", "backends.segment=replay",
            "run", "--episodes", list.to_str().unwrap(),
        ],
    ));
    assert_eq!(fs::read(out.join("predictions.jsonl")).unwrap(), fs::read(replay.join("predictions.jsonl")).unwrap());

    let o = ok(fscs(&out, &["eval"]));
    let table = stdout(&o);
    assert!(table.contains("100.0"), "{table}");
    assert!(table.contains("1-way 1-shot"));
    for ext in ["txt", "json", "csv"] {
        assert!(out.join(format!("report.{ext}")).is_file());
    }
    let report: Value = serde_json::from_slice(&fs::read(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["average"]["exact_ratio_pct"], 100.0);
}

#[test]
fn unreachable_live_endpoint_exits_4() {
    let dir = tempfile::tempdir().unwrap();
    let o = fscs(
        dir.path(),
        &[
            "--set", "episodes.count=2",
            "--set", "backends.chat=live", "--set", "live.chat.endpoint=http://127.0.0.1:9",
            "--set", "agent.budget.max_retries=0", "--set", "agent.planner_mode=llm",
            "run",
        ],
    );
    assert_eq!(o.status.code(), Some(4), "{}", String::from_utf8_lossy(&o.stderr));
    let manifest: Value = serde_json::from_slice(&fs::read(dir.path().join("run_manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["failure_count"], 2);
}

#[test]
fn render_writes_the_agent_prompts() {
    let dir = tempfile::tempdir().unwrap();
    let args = ["--set", "episodes.n_way=2", "--set", "episodes.k_shot=3", "--set", "episodes.count=3"];
    ok(fscs(dir.path(), &[&args[..], &["sample"]].concat()));
    let list = fs::read_to_string(dir.path().join("episodes.jsonl")).unwrap();
    let d = &read_descriptors_jsonl(&list).unwrap()[1];
    ok(fscs(dir.path(), &[&args[..], &["render", &d.episode_id]].concat()));

    let rendered = dir.path().join("render").join(&d.episode_id);
    let index = load_dataset(&fixture(), &LayoutConfig::default()).unwrap();
    let expected = visual_prompts(&index.materialize(d).unwrap(), &AgentConfig::default()).unwrap();
    assert_eq!(expected.len(), 7);
    assert_eq!(fs::read_dir(&rendered).unwrap().count(), 7);
    for (name, png) in expected {
        let got = fs::read(rendered.join(format!("{name}.png"))).unwrap();
        assert_eq!(content_hash(&got), content_hash(&png), "{name}");
    }
}

#[test]
fn render_unknown_episode_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(fscs(dir.path(), &["render", "0000000000000000"]).status.code(), Some(3));
}

#[test]
fn eval_empty_dir_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let empty = dir.path().join("empty");
    fs::create_dir(&empty).unwrap();
    assert_eq!(fscs(dir.path(), &["eval", "--transcripts", empty.to_str().unwrap()]).status.code(), Some(3));
}
