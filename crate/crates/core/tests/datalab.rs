use std::path::PathBuf;
use std::sync::Arc;

use gui_agent::action::{Action, SystemButton};
use gui_agent::datalab::{
    augment_multipath, count_correct, read_jsonl, score_accuracy, split_trajectory, write_jsonl, DatasetHeader,
    RewardConfig, StepSample,
};
use gui_agent::executor::{run_task, ExecutorConfig, RunContext, Trajectory};
use gui_agent::gateway::{Role, Rule, Script, ScriptedBackend};
use gui_agent::sim::{replay, Environment, Scenario};

fn fixtures() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fixtures")
}

fn scenario(name: &str) -> Arc<Scenario> {
    Arc::new(Scenario::load_path(&fixtures().join("scenarios").join(name)).unwrap())
}

fn golden(task: &str) -> Trajectory {
    let s = scenario("device-basics.toml");
    let gw = ScriptedBackend::new(Script::load_path(&fixtures().join("scripts/golden-bench.toml")).unwrap());
    let cfg = ExecutorConfig::bare();
    let mut env = Environment::new(Arc::clone(&s));
    env.reset(task, 0).unwrap();
    let instruction = s.task(task).unwrap().instruction.clone();
    let mut t = run_task(&instruction, &mut env, &RunContext::new(&gw, &cfg)).unwrap();
    t.id = format!("{task}-r0");
    t
}

#[test]
fn split_counts_and_history_prefixes() {
    let t = golden("write-note");
    let samples = split_trajectory(&t).unwrap();
    assert_eq!(samples.len(), t.executed_actions().len());
    assert_eq!(samples.len(), 6);
    let summaries: Vec<String> = t.steps.iter().map(|s| s.response.as_ref().unwrap().action_summary.clone()).collect();
    for (i, s) in samples.iter().enumerate() {
        assert_eq!(s.history.entries, summaries[..i].to_vec());
        assert_eq!(s.trajectory_id, "write-note-r0");
    }

    // Replaying the gold actions reproduces every sample's screen.
    let actions: Vec<Action> = samples.iter().map(|s| s.gold.clone()).collect();
    let mut env = Environment::new(scenario("device-basics.toml"));
    let log = replay(&mut env, "write-note", 0, &actions).unwrap();
    let mut env = Environment::new(scenario("device-basics.toml"));
    let start = env.reset("write-note", 0).unwrap();
    assert_eq!(samples[0].snapshot, start);
    for (s, prev) in samples[1..].iter().zip(log.records()) {
        assert_eq!(s.snapshot.hash(), prev.snapshot_hash);
    }
}

#[test]
fn coordinate_gold_gets_the_widget_box() {
    let samples = split_trajectory(&golden("open-clock")).unwrap();
    assert_eq!(samples[0].gold_bbox.map(<[u32; 4]>::from), Some([520, 300, 720, 500]));
    assert_eq!(samples[1].gold_bbox, None);
}

fn shop_sample(gold: Action, screen: &[Action]) -> StepSample {
    let mut env = Environment::new(scenario("shopping-three-apps.toml"));
    let mut snap = env.reset("compare-and-buy", 0).unwrap();
    for a in screen {
        snap = env.step(a).unwrap().0;
    }
    StepSample::new("x", snap, gold)
}

#[test]
fn equivalences_add_open_and_back_alternates() {
    let s = scenario("shopping-three-apps.toml");
    let open = shop_sample(Action::open("ShopA"), &[]);
    let aug = augment_multipath(&open, &s, None).value;
    assert_eq!(aug.alternates.len(), 1);
    assert_eq!(aug.alternates[0].action, Action::click(140, 400));
    let cfg = RewardConfig::default();
    assert_eq!(score_accuracy(&Action::click(100, 350), &aug, &cfg).acc, 1);

    // The icon click is gold; open is the alternate.
    let icon = augment_multipath(&shop_sample(Action::click(140, 400), &[]), &s, None).value;
    assert_eq!(icon.alternates[0].action, Action::open("ShopA"));

    let to_detail = [Action::open("ShopA"), Action::click(540, 400)];
    let back = Action::SystemButton { button: SystemButton::Back };
    let aug = augment_multipath(&shop_sample(back.clone(), &to_detail), &s, None).value;
    assert_eq!(aug.alternates.len(), 1);
    assert_eq!(aug.alternates[0].bbox.map(<[u32; 4]>::from), Some([20, 120, 140, 240]));
    let arrow = augment_multipath(&shop_sample(Action::click(80, 180), &to_detail), &s, None).value;
    assert_eq!(arrow.alternates[0].action, back);

    // Nothing declared for the ShopB detail screen.
    let other = [Action::open("ShopB"), Action::click(540, 400)];
    assert!(augment_multipath(&shop_sample(back, &other), &s, None).value.alternates.is_empty());
}

#[test]
fn judge_alternates_and_failures() {
    let s = scenario("shopping-three-apps.toml");
    let sample = shop_sample(Action::click(540, 400), &[Action::open("ShopA")]);
    let judge = ScriptedBackend::new(
        Script::new(
            vec![Rule::for_role(Role::MultipathJudge, [r#"<alternate>{"action":"long_press","coordinate":[540,400],"time":1}</alternate><alternate>not json</alternate>"#])],
            None,
        )
        .unwrap(),
    );
    let judged = augment_multipath(&sample, &s, Some(&judge));
    assert_eq!(judged.value.alternates.len(), 1);
    assert!(judged.warning.is_some());
    let failed = augment_multipath(&sample, &s, Some(&gui_agent::gateway::FailingBackend));
    assert!(failed.value.alternates.is_empty());
    assert!(failed.warning.is_some());
}

#[test]
fn difficulty_counts_from_a_policy() {
    let t = golden("open-clock");
    let sample = split_trajectory(&t).unwrap().remove(0);
    let right = "<thinking>-</thinking><summary>tap</summary><action>{\"action\":\"click\",\"coordinate\":[600,400]}</action>";
    let wrong = "<thinking>-</thinking><summary>tap</summary><action>{\"action\":\"click\",\"coordinate\":[10,10]}</action>";
    let rule = Rule { mode: gui_agent::gateway::Mode::Cycle, ..Rule::for_role(Role::Executor, [right, wrong, wrong, wrong]) };
    let policy = ScriptedBackend::new(Script::new(vec![rule], None).unwrap());
    assert_eq!(count_correct(&sample, &policy, 8, 1.0), 2);
}

#[test]
fn dataset_file_round_trip() {
    let samples = split_trajectory(&golden("web-search")).unwrap();
    let text = write_jsonl(&DatasetHeader::new("golden"), &samples);
    assert_eq!(read_jsonl(&text).unwrap().1, samples);
}
