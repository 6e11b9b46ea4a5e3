use std::path::{Path, PathBuf};
use std::process::Command;

use gui_agent::datalab::read_jsonl;
use gui_agent::evolve::{read_records, write_records, QueryRecord};
use gui_agent::executor::Trajectory;

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures")
}

fn agent(dir: &Path, args: &[&str]) -> String {
    let out = Command::new(env!("CARGO_BIN_EXE_gui-agent"))
        .current_dir(dir)
        .env("GUI_AGENT_DATA_DIR", dir.join("data"))
        .args(args)
        .output()
        .unwrap();
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn fx(rel: &str) -> String {
    fixtures().join(rel).display().to_string()
}

#[test]
fn run_prints_events_and_writes_trajectories() {
    let dir = tempfile::tempdir().unwrap();
    let out = agent(
        dir.path(),
        &[
            "run",
            "--scenario",
            &fx("scenarios/food.toml"),
            "--task",
            "order-burger",
            "--script",
            &fx("scripts/burger.toml"),
            "--answer",
            "Spicy Chicken",
            "--events",
            "--out",
            "t.jsonl",
        ],
    );
    assert!(out.lines().last().unwrap().starts_with("outcome: Success"));
    assert_eq!(out.lines().filter(|l| l.contains(r#""kind":"ask""#)).count(), 1);
    let trajs: Vec<Trajectory> = read_records(&std::fs::read_to_string(dir.path().join("t.jsonl")).unwrap()).unwrap();
    assert_eq!(trajs.len(), 1);
    assert!(trajs[0].origin.is_some());

    // No answers to give: the run is cancelled at the question.
    let out = agent(
        dir.path(),
        &["run", "--scenario", &fx("scenarios/food.toml"), "--task", "order-burger", "--script", &fx("scripts/burger.toml")],
    );
    assert!(out.contains("cancelled"), "{out}");
}

#[test]
fn data_commands_chain() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let scenario = fx("scenarios/device-basics.toml");
    let golden = fx("scripts/golden-bench.toml");
    agent(d, &["run", "--scenario", &scenario, "--task", "write-note", "--script", &golden, "--out", "t.jsonl"]);
    let out = agent(d, &["datagen-split", "--input", "t.jsonl", "--out", "s.jsonl"]);
    assert_eq!(out.trim(), "6 samples from 1 trajectories");
    agent(d, &["datagen-augment", "--scenario", &scenario, "--input", "s.jsonl", "--out", "a.jsonl"]);
    let (_, samples) = read_jsonl(&std::fs::read_to_string(d.join("a.jsonl")).unwrap()).unwrap();
    assert_eq!(samples.len(), 6);

    // Every gold action, replied in the right layout, earns the full reward.
    let replies: Vec<String> = samples
        .iter()
        .map(|s| format!("<thinking>-</thinking><summary>-</summary><action>{}</action>", serde_json::to_string(&s.gold).unwrap()))
        .collect();
    std::fs::write(d.join("r.jsonl"), write_records(&replies)).unwrap();
    let scores = agent(d, &["score", "--samples", "a.jsonl", "--responses", "r.jsonl"]);
    assert_eq!(scores.lines().count(), 6);
    assert!(scores.lines().all(|l| l.contains(r#""r_final":1.2"#)), "{scores}");

    let out = agent(d, &["datagen-filter", "--input", "a.jsonl", "--out", "f.jsonl", "--policy-script", &golden]);
    assert!(out.starts_with("kept "), "{out}");

    std::fs::write(d.join("g.jsonl"), "{\"rewards\":[1,0,1,1,0]}\n{\"rewards\":[1.2,0.2],\"ratios\":[2,0.5]}\n").unwrap();
    let evals = agent(d, &["grpo-eval", "--input", "g.jsonl"]);
    let second: serde_json::Value = serde_json::from_str(evals.lines().nth(1).unwrap()).unwrap();
    let adv: Vec<f64> = serde_json::from_value(second["advantages"].clone()).unwrap();
    assert!((adv[0] - 1.0).abs() < 1e-12 && (adv[1] + 1.0).abs() < 1e-12);
    // Both ratios leave [0.8, 1.2]: (1.2 * 1 + 0.8 * -1) / 2.
    assert!((second["objective"].as_f64().unwrap() - 0.2).abs() < 1e-12);

    let actions = "{\"action\":\"open\",\"text\":\"Clock\"}\n";
    std::fs::write(d.join("actions.jsonl"), actions).unwrap();
    let h1 = agent(d, &["sim-replay", "--scenario", &scenario, "--task", "open-clock", "--actions", "actions.jsonl"]);
    let h2 = agent(d, &["sim-replay", "--scenario", &scenario, "--task", "open-clock", "--actions", "actions.jsonl"]);
    assert_eq!(h1, h2);
}

#[test]
fn evolve_commands_queue_correct_and_export() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let pool = write_records(&[QueryRecord::seed("q-priority", "Open the high priority item in the Tasks app", "high-priority-task")]);
    std::fs::write(d.join("pool.jsonl"), pool).unwrap();
    let cfg = format!("scenarios_dir = {:?}\n", fixtures().join("scenarios").display().to_string());
    std::fs::write(d.join("gui-agent.toml"), cfg).unwrap();
    let config = d.join("gui-agent.toml").display().to_string();
    let redundancy = fx("scripts/redundancy.toml");

    agent(
        d,
        &["--config", &config, "evolve-rollout", "--scenario", "device-basics", "--pool", "pool.jsonl", "--script", &redundancy, "--out", "roll.jsonl"],
    );
    let out = agent(d, &["--config", &config, "evolve-gate", "--input", "roll.jsonl", "--finetune", "ft.jsonl", "--queue", "queue.jsonl"]);
    assert_eq!(out.trim(), "0 accepted, 1 queued for correction");
    let out = agent(
        d,
        &["--config", &config, "evolve-correct", "--queue", "queue.jsonl", "--patch", &fx("patches/redundancy.jsonl"), "--finetune", "ft.jsonl"],
    );
    assert_eq!(out.trim(), "1 corrected and accepted, 0 still rejected");
    let out = agent(d, &["evolve-export", "--input", "ft.jsonl", "--out", "export.jsonl"]);
    assert_eq!(out.trim(), "3 samples exported");
    let (_, samples) = read_jsonl(&std::fs::read_to_string(d.join("export.jsonl")).unwrap()).unwrap();
    assert!(samples.iter().all(|s| s.corrected));
}

#[test]
fn persona_and_knowledge_commands() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let mut history = String::new();
    for (i, answer) in ["Spicy Chicken", "Spicy Chicken", "Veggie"].iter().enumerate() {
        let file = format!("h{i}.jsonl");
        agent(
            d,
            &["run", "--scenario", &fx("scenarios/food.toml"), "--task", "order-burger", "--script", &fx("scripts/burger.toml"), "--answer", answer, "--out", &file],
        );
        let mut t: Vec<Trajectory> = read_records(&std::fs::read_to_string(d.join(&file)).unwrap()).unwrap();
        t[0].id = format!("h{i}");
        history.push_str(&write_records(&t));
    }
    std::fs::write(d.join("history.jsonl"), history).unwrap();
    let out = agent(d, &["persona-build", "--history", "history.jsonl", "--user", "alice", "--store", "persona"]);
    assert_eq!(out.trim(), "1 SOPs, 1 preferences");
    let out = agent(d, &["persona-apply", "--user", "alice", "--store", "persona", "--query", "Order a hamburger"]);
    assert!(out.contains("Order a hamburger (hamburger flavor: Spicy Chicken)"), "{out}");
    let out = agent(d, &["persona-apply", "--user", "bob", "--store", "persona", "--query", "Order a hamburger"]);
    let pq: serde_json::Value = serde_json::from_str(&out).unwrap();
    assert_eq!(pq["rewritten"], "Order a hamburger");

    let out = agent(d, &["kb-import", "--from", &fx("knowledge"), "--into", "kb"]);
    assert_eq!(out.trim(), "4 documents imported, 4 in store");
}

#[test]
fn bench_table_is_stable() {
    let dir = tempfile::tempdir().unwrap();
    let a = agent(dir.path(), &["bench", &fx("bench/device-basics.toml")]);
    let b = agent(dir.path(), &["bench", &fx("bench/device-basics.toml")]);
    assert_eq!(a, b);
    assert_eq!(a.lines().count(), 13);
    assert_eq!(a.lines().last().unwrap(), "success rate: 10/10 (100.0%)");
}
