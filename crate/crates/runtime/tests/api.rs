use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use serde_json::{json, Value};
use tower::ServiceExt;

use gui_agent::events::{RunEvent, SessionStatus};
use gui_agent::knowledge::KnowledgeStore;
use gui_agent_runtime::api::router;
use gui_agent_runtime::catalog::Catalog;
use gui_agent_runtime::config::RuntimeConfig;
use gui_agent_runtime::session::{RunSession, SeqEvent, SessionManager};

const WAIT: Duration = Duration::from_secs(20);

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures")
}

fn config(data: &Path) -> RuntimeConfig {
    RuntimeConfig {
        scenarios_dir: fixtures().join("scenarios"),
        scripts_dir: Some(fixtures().join("scripts")),
        data_dir: data.to_path_buf(),
        ..RuntimeConfig::default()
    }
}

fn open(cfg: RuntimeConfig) -> Arc<SessionManager> {
    let catalog = Catalog::load_dir(&cfg.scenarios_dir).unwrap();
    Arc::new(SessionManager::open(cfg, catalog, Arc::new(KnowledgeStore::new()), None).unwrap())
}

async fn call(app: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let req = Request::builder().method(method).uri(uri).header("content-type", "application/json");
    let req = req.body(body.map_or_else(Body::empty, |b| Body::from(b.to_string()))).unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = axum::body::to_bytes(resp.into_body(), usize::MAX).await.unwrap();
    (status, serde_json::from_slice(&bytes).unwrap_or(Value::Null))
}

fn session(v: Value) -> RunSession {
    serde_json::from_value(v).unwrap()
}

fn wait(m: &SessionManager, id: &str, done: impl Fn(&RunSession) -> bool) -> RunSession {
    let r = m.get(id).unwrap().wait_for(WAIT, &done);
    assert!(done(&r), "timed out: {r:?}");
    r
}

fn statuses(events: &[SeqEvent]) -> Vec<SessionStatus> {
    events
        .iter()
        .filter_map(|e| match &e.event {
            RunEvent::Status { status } => Some(*status),
            _ => None,
        })
        .collect()
}

fn assert_legal(events: &[SeqEvent]) {
    let s = statuses(events);
    assert_eq!(s.first(), Some(&SessionStatus::Planning));
    for w in s.windows(2) {
        assert!(w[0].can_transition(w[1]), "{} -> {}", w[0], w[1]);
    }
    for w in events.windows(2) {
        assert!(w[1].seq > w[0].seq);
    }
}

fn burger() -> Value {
    json!({"scenario": "food", "task": "order-burger", "script": "burger.toml"})
}

#[tokio::test(flavor = "multi_thread")]
async fn create_rejects_bad_requests() {
    let dir = tempfile::tempdir().unwrap();
    let app = router(open(config(dir.path())));
    let (s, v) = call(&app, "GET", "/api/scenarios", None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v.as_array().unwrap().len(), 4);

    let (s, v) = call(&app, "POST", "/api/sessions", Some(json!({"scenario": "food", "task": "nope"}))).await;
    assert_eq!((s, v["error"].as_str()), (StatusCode::NOT_FOUND, Some("unknown_task")));
    let (s, v) = call(&app, "POST", "/api/sessions", Some(json!({"scenario": "nope", "task": "x"}))).await;
    assert_eq!((s, v["error"].as_str()), (StatusCode::NOT_FOUND, Some("unknown_scenario")));
    let bad_override = json!({"scenario": "food", "task": "order-burger", "script": "burger.toml", "executor": {"max_step": 3}});
    let (s, v) = call(&app, "POST", "/api/sessions", Some(bad_override)).await;
    assert_eq!((s, v["error"].as_str()), (StatusCode::BAD_REQUEST, Some("validation_error")));
    let (s, _) = call(&app, "POST", "/api/sessions", Some(json!({"scenario": "food", "task": "order-burger", "script": "../x"}))).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    let (s, v) = call(&app, "GET", "/api/sessions/s-9999", None).await;
    assert_eq!((s, v["error"].as_str()), (StatusCode::NOT_FOUND, Some("unknown_session")));
}

#[tokio::test(flavor = "multi_thread")]
async fn burger_question_is_answered_over_http() {
    let dir = tempfile::tempdir().unwrap();
    let m = open(config(dir.path()));
    let app = router(Arc::clone(&m));
    let (s, v) = call(&app, "POST", "/api/sessions", Some(burger())).await;
    assert_eq!(s, StatusCode::CREATED);
    let created = session(v);
    assert_eq!(created.status, SessionStatus::Planning);
    let id = created.session_id;

    let waiting = wait(&m, &id, |r| r.status == SessionStatus::AwaitingUser);
    assert!(waiting.pending_question.as_deref().unwrap().contains("flavor"));
    let (s, v) = call(&app, "POST", &format!("/api/sessions/{id}/answer"), Some(json!({"answer": "Spicy Chicken"}))).await;
    assert_eq!(s, StatusCode::OK);
    let answered = session(v);
    assert_ne!(answered.status, SessionStatus::AwaitingUser);
    assert!(answered.pending_question.is_none());
    assert_eq!(answered.qa.len(), 1);
    assert_eq!(answered.qa[0].answer, "Spicy Chicken");

    // The same answer again changes nothing; a different one is refused.
    let (s, v) = call(&app, "POST", &format!("/api/sessions/{id}/answer"), Some(json!({"answer": "Spicy Chicken"}))).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(session(v).qa.len(), 1);
    let (s, v) = call(&app, "POST", &format!("/api/sessions/{id}/answer"), Some(json!({"answer": "Veggie"}))).await;
    assert_eq!((s, v["error"].as_str()), (StatusCode::CONFLICT, Some("no_pending_question")));

    let done = wait(&m, &id, |r| r.status.is_terminal());
    assert_eq!(done.status, SessionStatus::DoneSuccess);
    assert!(done.outcome.unwrap().reason.contains("Spicy Chicken"));

    let (_, v) = call(&app, "GET", &format!("/api/sessions/{id}/events"), None).await;
    let events: Vec<SeqEvent> = serde_json::from_value(v).unwrap();
    assert_legal(&events);
    assert_eq!(events.iter().filter(|e| matches!(e.event, RunEvent::Ask { .. })).count(), 1);
    let (_, v) = call(&app, "GET", &format!("/api/sessions/{id}/events?after=3"), None).await;
    assert_eq!(v.as_array().unwrap()[0]["seq"], 4);

    // Replaying the log gives exactly what the run persisted.
    let (_, v) = call(&app, "GET", &format!("/api/sessions/{id}/trajectories"), None).await;
    let replayed: Vec<gui_agent::executor::Trajectory> = serde_json::from_value(v).unwrap();
    let persisted = m.store().read_trajectories(&id).unwrap().unwrap();
    assert_eq!(replayed, persisted);
    assert_eq!(serde_json::to_string(&replayed).unwrap(), serde_json::to_string(&persisted).unwrap());
}

#[tokio::test(flavor = "multi_thread")]
async fn pause_holds_steps_until_resume() {
    let dir = tempfile::tempdir().unwrap();
    let m = open(config(dir.path()));
    let app = router(Arc::clone(&m));
    let req = json!({"scenario": "device-basics", "task": "write-note", "script": "golden-bench.toml", "start_paused": true});
    let (_, v) = call(&app, "POST", "/api/sessions", Some(req)).await;
    let id = session(v).session_id;
    let paused = wait(&m, &id, |r| r.status == SessionStatus::Paused);
    std::thread::sleep(Duration::from_millis(200));
    let still = m.get(&id).unwrap().record();
    assert_eq!(still.status, SessionStatus::Paused);
    assert_eq!(still.steps, paused.steps);
    assert_eq!(still.last_seq, paused.last_seq);

    let (s, v) = call(&app, "POST", &format!("/api/sessions/{id}/control"), Some(json!({"command": "resume"}))).await;
    assert_eq!(s, StatusCode::OK);
    assert_ne!(session(v).status, SessionStatus::Paused);
    let done = wait(&m, &id, |r| r.status.is_terminal());
    assert_eq!(done.status, SessionStatus::DoneSuccess);
    assert!(done.steps > paused.steps);
    assert_legal(&m.get(&id).unwrap().events_after(0));

    let (s, v) = call(&app, "POST", &format!("/api/sessions/{id}/control"), Some(json!({"command": "resume"}))).await;
    assert_eq!((s, v["error"].as_str()), (StatusCode::CONFLICT, Some("invalid_transition")));
}

#[tokio::test(flavor = "multi_thread")]
async fn cancel_finishes_as_cancelled_failure() {
    let dir = tempfile::tempdir().unwrap();
    let m = open(config(dir.path()));
    let app = router(Arc::clone(&m));
    let req = json!({"scenario": "device-basics", "task": "wifi-on", "script": "golden-bench.toml", "start_paused": true});
    let (_, v) = call(&app, "POST", "/api/sessions", Some(req)).await;
    let id = session(v).session_id;
    wait(&m, &id, |r| r.status == SessionStatus::Paused);
    let (s, v) = call(&app, "POST", &format!("/api/sessions/{id}/control"), Some(json!({"command": "cancel"}))).await;
    assert_eq!(s, StatusCode::OK);
    let r = session(v);
    assert_eq!(r.status, SessionStatus::DoneFailure);
    assert_eq!(r.outcome.unwrap().reason, "cancelled");
    let (s, _) = call(&app, "POST", &format!("/api/sessions/{id}/control"), Some(json!({"command": "cancel"}))).await;
    assert_eq!(s, StatusCode::CONFLICT);
    let (s, _) = call(&app, "POST", &format!("/api/sessions/{id}/control"), Some(json!({"command": "stop"}))).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
}

#[tokio::test(flavor = "multi_thread")]
async fn composite_instruction_gets_a_multi_task_plan() {
    let dir = tempfile::tempdir().unwrap();
    let m = open(config(dir.path()));
    let app = router(Arc::clone(&m));
    let req = json!({"scenario": "shopping-three-apps", "task": "compare-and-buy", "script": "price-compare.toml"});
    let (_, v) = call(&app, "POST", "/api/sessions", Some(req)).await;
    let id = session(v).session_id;
    let done = wait(&m, &id, |r| r.status.is_terminal());
    assert!(done.plan.len() >= 2, "{:?}", done.plan);
    assert_eq!(done.status, SessionStatus::DoneSuccess);
    let trajectories = m.get(&id).unwrap().trajectories();
    assert_eq!(trajectories.len(), done.plan.len());
    assert_eq!(Some(trajectories), m.store().read_trajectories(&id).unwrap());
}

#[tokio::test(flavor = "multi_thread")]
async fn event_stream_delivers_the_log_in_order() {
    let dir = tempfile::tempdir().unwrap();
    let m = open(config(dir.path()));
    let app = router(Arc::clone(&m));
    let req = json!({"scenario": "device-basics", "task": "open-clock", "script": "golden-bench.toml"});
    let (_, v) = call(&app, "POST", "/api/sessions", Some(req)).await;
    let id = session(v).session_id;

    // Subscribing while the run is live still yields every event and then ends.
    let req = Request::builder().uri(format!("/api/sessions/{id}/stream")).body(Body::empty()).unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    assert_eq!(resp.headers()["content-type"], "text/event-stream");
    let text = String::from_utf8(axum::body::to_bytes(resp.into_body(), usize::MAX).await.unwrap().to_vec()).unwrap();
    let ids: Vec<u64> = text.lines().filter_map(|l| l.strip_prefix("id: ")).map(|n| n.parse().unwrap()).collect();
    let last = m.get(&id).unwrap().record().last_seq;
    assert_eq!(ids, (1..=last).collect::<Vec<_>>());
    assert!(text.contains("event: step"));

    let req = Request::builder()
        .uri(format!("/api/sessions/{id}/stream"))
        .header("last-event-id", (last - 2).to_string())
        .body(Body::empty())
        .unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let text = String::from_utf8(axum::body::to_bytes(resp.into_body(), usize::MAX).await.unwrap().to_vec()).unwrap();
    let ids: Vec<u64> = text.lines().filter_map(|l| l.strip_prefix("id: ")).map(|n| n.parse().unwrap()).collect();
    assert_eq!(ids, vec![last - 1, last]);
}

#[tokio::test(flavor = "multi_thread")]
async fn reload_restores_finished_and_waiting_sessions() {
    let dir = tempfile::tempdir().unwrap();
    let (done_id, waiting_id, paused_id, before) = {
        let m = open(config(dir.path()));
        let app = router(Arc::clone(&m));
        let (_, v) = call(&app, "POST", "/api/sessions", Some(burger())).await;
        let done_id = session(v).session_id;
        wait(&m, &done_id, |r| r.status == SessionStatus::AwaitingUser);
        m.get(&done_id).unwrap().post_answer("Veggie").unwrap();
        wait(&m, &done_id, |r| r.status.is_terminal());
        let (_, v) = call(&app, "POST", "/api/sessions", Some(burger())).await;
        let waiting_id = session(v).session_id;
        wait(&m, &waiting_id, |r| r.status == SessionStatus::AwaitingUser);
        let mut paused = burger();
        paused["start_paused"] = json!(true);
        let (_, v) = call(&app, "POST", "/api/sessions", Some(paused)).await;
        let paused_id = session(v).session_id;
        wait(&m, &paused_id, |r| r.status == SessionStatus::Paused);
        (done_id, waiting_id, paused_id, m.list())
    };

    let m = open(config(dir.path()));
    let find = |list: &[RunSession], id: &str| list.iter().find(|r| r.session_id == id).cloned().unwrap();
    let after = m.list();
    assert_eq!(find(&after, &done_id), find(&before, &done_id));
    assert_eq!(find(&after, &waiting_id), find(&before, &waiting_id));
    let interrupted = find(&after, &paused_id);
    assert_eq!(interrupted.status, SessionStatus::DoneFailure);
    assert_eq!(interrupted.outcome.unwrap().reason, "interrupted");

    let app = router(Arc::clone(&m));
    let (s, v) = call(&app, "POST", &format!("/api/sessions/{waiting_id}/answer"), Some(json!({"answer": "Veggie"}))).await;
    assert_eq!((s, v["error"].as_str()), (StatusCode::CONFLICT, Some("detached")));
    let (_, v) = call(&app, "POST", "/api/sessions", Some(burger())).await;
    let fresh = session(v).session_id;
    assert!(![&done_id, &waiting_id, &paused_id].contains(&&fresh));
}

#[tokio::test(flavor = "multi_thread")]
async fn token_guards_every_route() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = RuntimeConfig { token: Some("sesame".into()), ..config(dir.path()) };
    let app = router(open(cfg));
    let (s, v) = call(&app, "GET", "/api/scenarios", None).await;
    assert_eq!((s, v["error"].as_str()), (StatusCode::UNAUTHORIZED, Some("unauthorized")));
    let req = Request::builder().uri("/api/scenarios").header("authorization", "Bearer sesame").body(Body::empty()).unwrap();
    assert_eq!(app.clone().oneshot(req).await.unwrap().status(), StatusCode::OK);
}

#[tokio::test(flavor = "multi_thread")]
async fn knowledge_ingest_is_saved() {
    let dir = tempfile::tempdir().unwrap();
    let kb_dir = dir.path().join("kb");
    let cfg = RuntimeConfig { knowledge_dir: Some(kb_dir.clone()), ..config(&dir.path().join("data")) };
    let m = open(cfg);
    let app = router(Arc::clone(&m));
    let doc = json!({"id": "alarm-tips", "title": "Alarms", "body": "Alarms are set in the Clock app."});
    let (s, v) = call(&app, "POST", "/api/knowledge", Some(doc)).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v["ingested"], 1);
    let many = json!({"docs": [{"id": "a", "body": "first"}, {"id": "b", "body": "second"}]});
    let (_, v) = call(&app, "POST", "/api/knowledge", Some(many)).await;
    assert_eq!(v["total"], 3);
    assert_eq!(KnowledgeStore::load_dir(&kb_dir).unwrap().len(), 3);
    assert_eq!(m.knowledge().retrieve("clock alarm", 1)[0].doc.id, "alarm-tips");
    let (s, _) = call(&app, "POST", "/api/knowledge", Some(json!({"title": "no id"}))).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
}
