use std::path::PathBuf;
use std::sync::Arc;

use gui_agent::action::{parse_action, Action, SystemButton};
use gui_agent::sim::{replay, EnvError, Environment, OutcomeStatus, Scenario, StateValue};

fn scenario(name: &str) -> Arc<Scenario> {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fixtures/scenarios").join(name);
    Arc::new(Scenario::load_path(&path).unwrap())
}

fn act(s: &str) -> Action {
    parse_action(s).unwrap()
}

#[test]
fn every_fixture_scenario_loads() {
    for name in ["device-basics.toml", "shopping-three-apps.toml", "food.toml", "expenses.toml"] {
        let s = scenario(name);
        assert!(!s.tasks.is_empty(), "{name}");
    }
}

#[test]
fn reset_restores_initial_state() {
    let mut env = Environment::new(scenario("device-basics.toml"));
    env.reset("wifi-on", 1).unwrap();
    env.step(&act(r#"{"action":"open","text":"Settings"}"#)).unwrap();
    env.step(&Action::click(540, 360)).unwrap();
    assert_eq!(env.state()["wifi"], StateValue::Bool(true));
    let snap = env.reset("wifi-on", 1).unwrap();
    assert_eq!(env.state()["wifi"], StateValue::Bool(false));
    assert_eq!(env.step_index(), 0);
    assert_eq!(snap.screen_ref().to_string(), "Launcher/home");
}

#[test]
fn task_reset_overrides_camera_mode() {
    let mut env = Environment::new(scenario("device-basics.toml"));
    env.reset("take-photo", 0).unwrap();
    assert_eq!(env.state()["camera_mode"], StateValue::Str("video".into()));
    env.reset("camera-video", 0).unwrap();
    assert_eq!(env.state()["camera_mode"], StateValue::Str("photo".into()));
}

#[test]
fn click_follows_declared_transition() {
    let mut env = Environment::new(scenario("shopping-three-apps.toml"));
    env.reset("compare-and-buy", 0).unwrap();
    env.step(&act(r#"{"action":"open","text":"shopa"}"#)).unwrap();
    let (snap, _) = env.step(&Action::click(540, 200)).unwrap();
    assert_eq!(snap.screen_ref().to_string(), "ShopA/search");
    let (snap, _) = env.step(&Action::SystemButton { button: SystemButton::Back }).unwrap();
    assert_eq!(snap.screen_ref().to_string(), "ShopA/home");
}

#[test]
fn typing_without_focus_fails_and_counts() {
    let mut env = Environment::new(scenario("device-basics.toml"));
    env.reset("set-alarm", 0).unwrap();
    env.step(&act(r#"{"action":"open","text":"Clock"}"#)).unwrap();
    let err = env.step(&Action::type_text("07:30")).unwrap_err();
    assert_eq!(err, EnvError::NoFocusedField);
    assert_eq!(env.step_index(), 2);
    assert_eq!(env.errors().len(), 1);
    assert_eq!(env.state()["alarm_time"], StateValue::Str(String::new()));
    env.step(&Action::click(540, 360)).unwrap();
    env.step(&Action::type_text("07:30")).unwrap();
    assert_eq!(env.state()["alarm_time"], StateValue::Str("07:30".into()));
}

#[test]
fn unknown_app_is_an_error() {
    let mut env = Environment::new(scenario("device-basics.toml"));
    env.reset("open-clock", 0).unwrap();
    assert!(matches!(env.step(&Action::open("Calculator")), Err(EnvError::UnknownApp(_))));
}

#[test]
fn terminate_freezes_and_judges() {
    let mut env = Environment::new(scenario("device-basics.toml"));
    env.reset("open-clock", 0).unwrap();
    env.step(&Action::open("Clock")).unwrap();
    assert_eq!(env.outcome().status, OutcomeStatus::Success);
    let (_, outcome) = env.step(&Action::terminate(true)).unwrap();
    assert!(outcome.is_success());
    assert_eq!(env.step(&Action::click(1, 1)), Err(EnvError::Frozen));
    env.reopen();
    assert!(env.step(&Action::click(1, 1)).is_ok());
}

#[test]
fn false_claim_of_success_is_a_failure() {
    let mut env = Environment::new(scenario("device-basics.toml"));
    env.reset("wifi-on", 0).unwrap();
    let (_, outcome) = env.step(&Action::terminate(true)).unwrap();
    assert_eq!(outcome.status, OutcomeStatus::Failure);
}

#[test]
fn ask_does_not_consume_a_step() {
    let mut env = Environment::new(scenario("food.toml"));
    env.reset("order-burger", 0).unwrap();
    env.step(&Action::ask("Which flavor?")).unwrap();
    assert_eq!(env.step_index(), 0);
    assert_eq!(env.pending_question(), Some("Which flavor?"));
}

#[test]
fn replay_is_deterministic_in_process() {
    let s = scenario("device-basics.toml");
    let actions = vec![Action::open("Camera"), Action::click(340, 1850), Action::click(540, 2100), Action::terminate(true)];
    let a = replay(&mut Environment::new(Arc::clone(&s)), "take-photo", 7, &actions).unwrap();
    let b = replay(&mut Environment::new(s), "take-photo", 7, &actions).unwrap();
    assert_eq!(a.hash(), b.hash());
    assert_eq!(a.records().len(), 4);
}
