use std::path::PathBuf;
use std::sync::Arc;

use gui_agent::action::Action;
use gui_agent::ask::interleave_training_samples;
use gui_agent::events::RunEvent;
use gui_agent::executor::{Advance, ExecutorConfig, RunContext, TaskRun};
use gui_agent::gateway::{Script, ScriptedBackend};
use gui_agent::sim::{Environment, Scenario, StateValue};

fn fixtures() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fixtures")
}

#[test]
fn burger_order_asks_once_and_follows_the_answer() {
    let s = Scenario::load_path(&fixtures().join("scenarios/food.toml")).unwrap();
    let mut env = Environment::new(Arc::new(s));
    env.reset("order-burger", 0).unwrap();
    let gw = ScriptedBackend::new(Script::load_path(&fixtures().join("scripts/burger.toml")).unwrap());
    let cfg = ExecutorConfig::default();
    let ctx = RunContext::new(&gw, &cfg);
    let mut events = Vec::new();
    let mut sink = |e: RunEvent| events.push(e);
    let mut run = TaskRun::start(0, "burger", "Order a hamburger", None, &cfg, &mut sink).unwrap();

    let first = run.advance(&mut env, &ctx, &mut sink).unwrap();
    assert_eq!(first, Advance::AwaitingUser("Which hamburger flavor would you like?".into()));
    assert_eq!(env.step_index(), 0);
    // Nothing moves until the user answers.
    assert!(matches!(run.advance(&mut env, &ctx, &mut sink).unwrap(), Advance::AwaitingUser(_)));

    run.answer("Spicy Chicken", &mut env, &mut sink).unwrap();
    let outcome = run.run_to_end(&mut env, &ctx, &mut sink, &mut |_| None).unwrap();
    assert!(outcome.is_success(), "{outcome:?}");
    assert_eq!(env.state()["selection"], StateValue::Str("Spicy Chicken".into()));

    let t = run.trajectory();
    assert_eq!(t.steps.iter().filter(|s| s.is_ask()).count(), 1);
    assert_eq!(events.iter().filter(|e| matches!(e, RunEvent::Ask { .. })).count(), 1);
    let qa = t.steps[0].qa.as_ref().unwrap();
    assert_eq!(qa.answer, "Spicy Chicken");
}

#[test]
fn ask_step_splits_into_two_samples() {
    let s = Scenario::load_path(&fixtures().join("scenarios/food.toml")).unwrap();
    let mut env = Environment::new(Arc::new(s));
    env.reset("order-burger", 0).unwrap();
    let gw = ScriptedBackend::new(Script::load_path(&fixtures().join("scripts/burger.toml")).unwrap());
    let cfg = ExecutorConfig::default();
    let ctx = RunContext::new(&gw, &cfg);
    let mut sink = |_e: RunEvent| {};
    let mut run = TaskRun::start(0, "burger", "Order a hamburger", None, &cfg, &mut sink).unwrap();
    run.run_to_end(&mut env, &ctx, &mut sink, &mut |_| Some("Veggie".into())).unwrap();
    let t = run.trajectory();
    let ask = &t.steps[0];
    let next = &t.steps[1];
    let annotated = gui_agent::ask::AnnotatedStep {
        instruction: t.instruction.clone(),
        history: vec![],
        snapshot: ask.snapshot_before.clone(),
        gold: next.action.clone().unwrap(),
        needs_ask: true,
        question: Some("Which hamburger flavor would you like?".into()),
        qa: ask.qa.clone().map(|q| vec![q]),
    };
    let [a, b] = interleave_training_samples(&annotated).unwrap();
    assert!(matches!(a.gold, Action::Ask { .. }));
    assert!(a.qa_history.is_empty());
    assert_eq!(b.gold, next.action.clone().unwrap());
    assert_eq!(b.qa_history.len(), 1);
    assert_eq!(b.qa_history[0].answer, "Veggie");
}
