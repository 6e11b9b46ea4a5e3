use std::path::PathBuf;
use std::sync::Arc;

use gui_agent::action::Action;
use gui_agent::events::RunEvent;
use gui_agent::executor::{run_task, ExecError, ExecutorConfig, RunContext, StepError, TaskRun};
use gui_agent::gateway::{Backend, FailingBackend, Role, RoleRouter, Rule, Script, ScriptedBackend};
use gui_agent::knowledge::{read_dir_docs, KnowledgeStore};
use gui_agent::reflection::longest_repeat;
use gui_agent::sim::{Environment, OutcomeStatus, Scenario};

fn fixtures() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fixtures")
}

fn scenario(name: &str) -> Arc<Scenario> {
    Arc::new(Scenario::load_path(&fixtures().join("scenarios").join(name)).unwrap())
}

fn script(name: &str) -> ScriptedBackend {
    ScriptedBackend::new(Script::load_path(&fixtures().join("scripts").join(name)).unwrap())
}

fn env_for(name: &str, task: &str) -> Environment {
    let mut env = Environment::new(scenario(name));
    env.reset(task, 0).unwrap();
    env
}

const DONE: &str = r#"{"action":"terminate","status":"success"}"#;

fn turn(summary: &str, action: &str) -> String {
    format!("<thinking>-</thinking><summary>{summary}</summary><action>{action}</action>")
}

fn instruction(env: &Environment) -> String {
    env.task().unwrap().instruction.clone()
}

#[test]
fn golden_script_solves_every_bench_task() {
    let s = scenario("device-basics.toml");
    for task in s.tasks.iter().filter(|t| t.id != "wifi-and-brightness") {
        let gw = script("golden-bench.toml");
        let cfg = ExecutorConfig::default();
        let mut env = Environment::new(Arc::clone(&s));
        env.reset(&task.id, 0).unwrap();
        let t = run_task(&task.instruction, &mut env, &RunContext::new(&gw, &cfg)).unwrap();
        assert!(t.outcome.is_success(), "{}: {:?}", task.id, t.outcome);
        for step in t.steps.iter().filter(|s| s.executed()) {
            assert_eq!(step.snapshot_after.step_index, step.snapshot_before.step_index + 1);
        }
    }
}

#[test]
fn unparseable_reply_is_reprompted_once() {
    let rules = vec![
        Rule::for_role(Role::Executor, ["no tags here", &turn("open", r#"{"action":"open","text":"Clock"}"#), &turn("done", DONE)]),
    ];
    let gw = ScriptedBackend::new(Script::new(rules, None).unwrap());
    let cfg = ExecutorConfig::bare();
    let mut env = env_for("device-basics.toml", "open-clock");
    let t = run_task("Open the Clock app", &mut env, &RunContext::new(&gw, &cfg)).unwrap();
    assert!(t.outcome.is_success());
    assert_eq!(t.steps.len(), 2);
    assert!(gw.calls_for(Role::Executor)[1].prompt.contains("## Format error"));
}

#[test]
fn second_parse_failure_records_a_failed_step() {
    let rules = vec![Rule::for_role(Role::Executor, ["garbage", "more garbage"])];
    let gw = ScriptedBackend::new(Script::new(rules, Some(turn("give up", r#"{"action":"terminate","status":"failure"}"#))).unwrap());
    let cfg = ExecutorConfig::bare();
    let mut env = env_for("device-basics.toml", "open-clock");
    let t = run_task("Open the Clock app", &mut env, &RunContext::new(&gw, &cfg)).unwrap();
    assert!(matches!(t.steps[0].error, Some(StepError::Parse(_))));
    assert_eq!(t.steps[0].raw_response.as_deref(), Some("more garbage"));
    assert_eq!(t.steps[0].snapshot_after, t.steps[0].snapshot_before);
    assert_eq!(t.history().entries, vec!["give up".to_string()]);
    assert_eq!(t.outcome.status, OutcomeStatus::Failure);
}

#[test]
fn policy_ask_is_rejected_with_a_notice() {
    let rules = vec![Rule::for_role(
        Role::Executor,
        [
            &turn("ask", r#"{"action":"ask","text":"Which clock?"}"#),
            &turn("open", r#"{"action":"open","text":"Clock"}"#),
            &turn("done", DONE),
        ],
    )];
    let gw = ScriptedBackend::new(Script::new(rules, None).unwrap());
    let cfg = ExecutorConfig::bare();
    let mut env = env_for("device-basics.toml", "open-clock");
    let t = run_task("Open the Clock app", &mut env, &RunContext::new(&gw, &cfg)).unwrap();
    assert!(matches!(t.steps[0].error, Some(StepError::Rejected(_))));
    assert!(gw.calls_for(Role::Executor)[1].prompt.contains("ask action was not sent"));
    assert!(env.pending_question().is_none());
    assert!(t.outcome.is_success());
}

#[test]
fn policy_backend_failure_returns_partial_trajectory() {
    let cfg = ExecutorConfig::bare();
    let mut env = env_for("device-basics.toml", "open-clock");
    let err = run_task("Open the Clock app", &mut env, &RunContext::new(&FailingBackend, &cfg)).unwrap_err();
    let ExecError::Backend { trajectory, .. } = err else { panic!("{err:?}") };
    assert!(trajectory.steps.is_empty());
}

#[test]
fn step_budget_ends_the_run() {
    let gw = script("loop.toml");
    let cfg = ExecutorConfig { max_steps: 4, ..ExecutorConfig::bare() };
    let mut env = env_for("device-basics.toml", "web-search");
    let t = run_task("Search the web for weather", &mut env, &RunContext::new(&gw, &cfg)).unwrap();
    assert_eq!(t.steps.len(), 4);
    assert!(t.outcome.reason.starts_with("MaxStepsExceeded"));
}

fn loop_run(window: Option<usize>) -> gui_agent::executor::Trajectory {
    let gw = script("loop.toml");
    let cfg = ExecutorConfig { max_steps: 12, trajectory_window: window, ..ExecutorConfig::default() };
    let mut env = env_for("device-basics.toml", "web-search");
    run_task("Search the web for weather", &mut env, &RunContext::new(&gw, &cfg)).unwrap()
}

#[test]
fn trajectory_reflection_breaks_the_loop() {
    let off = loop_run(None);
    let on = loop_run(Some(3));
    assert!(!off.outcome.is_success());
    assert!(on.outcome.is_success(), "{:?}", on.outcome);
    assert!(longest_repeat(&on.steps) < longest_repeat(&off.steps));
}

fn premature_run(global: bool) -> gui_agent::executor::Trajectory {
    let gw = script("premature-terminate.toml");
    let cfg = ExecutorConfig { global_reflection: global, ..ExecutorConfig::default() };
    let mut env = env_for("device-basics.toml", "brightness-high");
    run_task("Set the screen brightness to high", &mut env, &RunContext::new(&gw, &cfg)).unwrap()
}

#[test]
fn global_reflection_rescues_premature_terminate() {
    assert_eq!(premature_run(false).outcome.status, OutcomeStatus::Failure);
    let t = premature_run(true);
    assert!(t.outcome.is_success(), "{:?}", t.outcome);
    let terminates = t.steps.iter().filter(|s| matches!(s.action, Some(Action::Terminate { .. }))).count();
    assert_eq!(terminates, 2);
}

#[test]
fn resume_budget_is_enforced() {
    let rules = vec![
        Rule::for_role(Role::GlobalReflector, ["<verdict>not_ok</verdict><diagnosis>not done</diagnosis>"]).repeating(),
        Rule::for_role(Role::Executor, [turn("stop", DONE)]).repeating(),
    ];
    let gw = ScriptedBackend::new(Script::new(rules, Some("<verdict>ok</verdict>".into())).unwrap());
    let cfg = ExecutorConfig { ask: false, ..ExecutorConfig::default() };
    let mut env = env_for("device-basics.toml", "wifi-on");
    let t = run_task("Turn on Wi-Fi", &mut env, &RunContext::new(&gw, &cfg)).unwrap();
    assert_eq!(t.steps.len(), 3);
    assert_eq!(t.outcome.reason, "GlobalReflectorBudget");
}

#[test]
fn reflector_failures_degrade_without_aborting() {
    let golden: Arc<dyn Backend> = Arc::new(script("golden-bench.toml"));
    let failing: Arc<dyn Backend> = Arc::new(FailingBackend);
    let gw = RoleRouter::new(golden)
        .route(Role::ActionReflector, Arc::clone(&failing))
        .route(Role::TrajectoryReflector, Arc::clone(&failing))
        .route(Role::GlobalReflector, Arc::clone(&failing))
        .route(Role::TrustAssessor, failing);
    let cfg = ExecutorConfig::default();
    let mut env = env_for("device-basics.toml", "write-note");
    let mut events = Vec::new();
    let mut sink = |e: RunEvent| events.push(e);
    let mut run = TaskRun::start(0, "t", instruction(&env), None, &cfg, &mut sink).unwrap();
    let outcome = run.run_to_end(&mut env, &RunContext::new(&gw, &cfg), &mut sink, &mut |_| None).unwrap();
    assert!(outcome.is_success());
    let warnings = events.iter().filter(|e| matches!(e, RunEvent::Warning { .. })).count();
    assert!(warnings >= 3);
}

#[test]
fn retrieved_knowledge_reaches_the_prompt() {
    let store = KnowledgeStore::with_docs(read_dir_docs(&fixtures().join("knowledge")).unwrap()).unwrap();
    let gw = script("golden-bench.toml");
    let cfg = ExecutorConfig::bare();
    let mut env = env_for("device-basics.toml", "high-priority-task");
    let ctx = RunContext::new(&gw, &cfg).with_knowledge(&store);
    let t = run_task("Open the high priority item in the Tasks app", &mut env, &ctx).unwrap();
    assert!(t.outcome.is_success());
    assert_eq!(t.knowledge_used.first().map(String::as_str), Some("tasks-priority"));
    assert!(gw.calls_for(Role::Executor)[0].prompt.contains("red represents high priority"));
}
