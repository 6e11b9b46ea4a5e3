use std::path::PathBuf;
use std::sync::Arc;

use gui_agent::events::RunEvent;
use gui_agent::executor::{ExecutorConfig, Origin, RunContext, TaskRun, Trajectory};
use gui_agent::gateway::{FailingBackend, Role, Rule, Script, ScriptedBackend};
use gui_agent::persona::{extract_intention_flows, personalize, PersonaStore, UserProfile};
use gui_agent::sim::{Environment, Scenario};

fn fixtures() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fixtures")
}

fn burger_script() -> ScriptedBackend {
    ScriptedBackend::new(Script::load_path(&fixtures().join("scripts/burger.toml")).unwrap())
}

/// One burger order where the user answers the flavor question with `answer`.
fn order(id: &str, instruction: &str, answer: &str) -> Trajectory {
    let s = Arc::new(Scenario::load_path(&fixtures().join("scenarios/food.toml")).unwrap());
    let mut env = Environment::new(Arc::clone(&s));
    env.reset("order-burger", 0).unwrap();
    let gw = burger_script();
    let cfg = ExecutorConfig::default();
    let ctx = RunContext::new(&gw, &cfg);
    let mut sink = |_e: RunEvent| {};
    let origin = Origin { scenario: s.name.clone(), task_id: "order-burger".into(), seed: 0, start: None };
    let mut run = TaskRun::start(0, id, instruction, Some(origin), &cfg, &mut sink).unwrap();
    run.run_to_end(&mut env, &ctx, &mut sink, &mut |_| Some(answer.to_string())).unwrap();
    run.into_trajectory()
}

fn history() -> Vec<Trajectory> {
    vec![
        order("h1", "Order a hamburger", "Spicy Chicken"),
        order("h2", "Order a hamburger", "Spicy Chicken"),
        order("h3", "Order a hamburger", "Veggie"),
    ]
}

#[test]
fn repeated_choice_becomes_a_preference() {
    let h = history();
    let flows = extract_intention_flows(&h, "alice", &FailingBackend);
    assert_eq!(flows.warnings.len(), 1);
    let prefs = &flows.profile.preferences;
    assert_eq!(prefs.len(), 1);
    assert_eq!(prefs[0].topic, "hamburger flavor");
    assert_eq!(prefs[0].value, "Spicy Chicken");
    assert_eq!(prefs[0].evidence, ["h1", "h2"]);

    // One distinct request, distilled from h1: open, pick, place. The ask
    // step and the closing terminate do not count.
    assert_eq!(flows.sops.len(), 1);
    assert_eq!(flows.sops[0].source_trajectory_id, "h1");
    assert_eq!(flows.sops[0].sop, ["Open Burger", "Pick Spicy Chicken", "Place the order"]);
}

#[test]
fn analyzer_reply_is_used_and_unknown_evidence_dropped() {
    let h = history();
    let reply = r#"<preferences>[{"topic":"burger","value":"Veggie","evidence":["h3","h9"]},{"topic":"x","value":"y","evidence":["nope"]}]</preferences>"#;
    let gw = ScriptedBackend::new(Script { rules: vec![Rule::for_role(Role::ProfileAnalyzer, [reply])], default: None });
    let flows = extract_intention_flows(&h, "alice", &gw);
    assert!(flows.warnings.is_empty());
    assert_eq!(flows.profile.preferences.len(), 1);
    assert_eq!(flows.profile.preferences[0].evidence, ["h3"]);
}

#[test]
fn personalized_order_needs_no_question() {
    let dir = tempfile::tempdir().unwrap();
    let store = PersonaStore::new(dir.path());
    let h = history();
    store.save(&extract_intention_flows(&h, "alice", &FailingBackend)).unwrap();
    let (sops, profile) = store.load("alice").unwrap();
    assert_eq!(sops.len(), 1);

    let (pq, _) = personalize("Order a hamburger", &sops, &profile, &FailingBackend);
    assert_eq!(pq.rewritten, "Order a hamburger (hamburger flavor: Spicy Chicken)");
    assert_eq!(pq.matched_record_id.as_deref(), Some("alice-sop1"));
    assert_eq!(pq.sop.len(), 3);
    let ids: Vec<&str> = h.iter().map(|t| t.id.as_str()).collect();
    assert!(pq.preferences_used.iter().all(|p| p.evidence.iter().all(|e| ids.contains(&e.as_str()))));

    let t = order("p1", &pq.instruction(), "Veggie");
    assert!(t.outcome.is_success(), "{:?}", t.outcome);
    assert_eq!(t.steps.iter().filter(|s| s.is_ask()).count(), 0);
}

#[test]
fn rewriter_and_sop_extractor_replies_are_used() {
    let h = history();
    let flows = extract_intention_flows(&h, "alice", &FailingBackend);
    let gw = ScriptedBackend::new(Script {
        rules: vec![
            Rule::for_role(Role::SopExtractor, ["<sop><step>Open Burger</step><step>Pick Spicy Chicken</step></sop>"]),
            Rule::for_role(Role::QueryRewriter, ["<query>Order a Spicy Chicken hamburger</query>"]),
        ],
        default: None,
    });
    let (pq, w) = personalize("Order a hamburger", &flows.sops, &flows.profile, &gw);
    assert!(w.is_empty());
    assert_eq!(pq.rewritten, "Order a Spicy Chicken hamburger");
    assert_eq!(pq.sop.len(), 2);
}

#[test]
fn unknown_user_is_identity() {
    let dir = tempfile::tempdir().unwrap();
    let (sops, profile) = PersonaStore::new(dir.path()).load("bob").unwrap();
    assert_eq!(profile, UserProfile::empty("bob"));
    let (pq, _) = personalize("Order a hamburger", &sops, &profile, &FailingBackend);
    assert_eq!(pq.rewritten, "Order a hamburger");
    assert!(pq.sop.is_empty() && pq.matched_record_id.is_none());
}
