use std::collections::BTreeSet;
use std::path::Path;
use std::sync::Arc;

use axum::body::Body;
use axum::http::{header, Method, Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

use tdg_core::amenability::GateVerdict;
use tdg_core::augment::{AugmentConfig, Generator};
use tdg_core::data::LabeledExample;
use tdg_core::discovery::RepresentationKind;
use tdg_core::error::TdgError;
use tdg_core::run::*;
use tdg_core::synthetic::{PlantedConfig, NEG, POS};
use tdg_server::*;

const TOKEN: &str = "test-token";
const SEED: u64 = 5;

fn run_config(dir: &Path) -> RunConfig {
    let mut c = RunConfig {
        output_dir: dir.to_path_buf(),
        seeds: vec![SEED],
        data: DataConfig::Planted(PlantedConfig {
            n_train: 500,
            n_validation: 600,
            subgroup_fraction: 0.1,
            seed: SEED,
            ..Default::default()
        }),
        ..Default::default()
    };
    c.backend.dim = 512;
    c.discovery.k = 6;
    c.discovery.n_runs = 2;
    c.discovery.representations = vec![RepresentationKind::Agnostic, RepresentationKind::TaskLabel];
    // Accept whatever wins so sessions can open.
    c.estimate.estimator.ic_gate = 1.0;
    c.augment.session = AugmentConfig {
        max_proposals: 60,
        max_labels: 40,
        batch: 6,
        max_global_updates: 3,
        ..Default::default()
    };
    c
}

struct Harness {
    _dir: tempfile::TempDir,
    pipeline: Pipeline,
}

impl Harness {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let pipeline = Pipeline::new(run_config(dir.path())).unwrap();
        pipeline.run_range(Stage::Ingest, Stage::Select, false).unwrap();
        Harness { _dir: dir, pipeline }
    }

    fn live(&self) -> LiveContext {
        self.pipeline.live_context(SEED).unwrap()
    }

    fn state_with(&self, live: LiveContext) -> Arc<AppState> {
        AppState::open(
            live,
            self.pipeline.live_dir(),
            ServerConfig {
                token: TOKEN.into(),
                time_budget_minutes: 90,
            },
        )
        .unwrap()
    }

    fn app(&self) -> (Arc<AppState>, Router) {
        let state = self.state_with(self.live());
        (state.clone(), router(state))
    }
}

async fn call_with(app: &Router, method: Method, uri: &str, body: Option<Value>, token: Option<&str>) -> (StatusCode, Value) {
    let mut req = Request::builder().method(method).uri(uri);
    if let Some(t) = token {
        req = req.header(header::AUTHORIZATION, format!("Bearer {t}"));
    }
    let req = match body {
        Some(b) => req
            .header(header::CONTENT_TYPE, "application/json")
            .body(Body::from(b.to_string()))
            .unwrap(),
        None => req.body(Body::empty()).unwrap(),
    };
    let res = app.clone().oneshot(req).await.unwrap();
    let status = res.status();
    let bytes = res.into_body().collect().await.unwrap().to_bytes();
    let v = serde_json::from_slice(&bytes).unwrap_or(Value::String(String::from_utf8_lossy(&bytes).into_owned()));
    (status, v)
}

async fn call(app: &Router, method: Method, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    call_with(app, method, uri, body, Some(TOKEN)).await
}

fn selected(live: &LiveContext) -> usize {
    assert_eq!(live.selection.verdict, GateVerdict::Augment);
    live.selection.clusters[0]
}

fn opposite(label: &str) -> &'static str {
    if label == POS {
        NEG
    } else {
        POS
    }
}

async fn open_session(app: &Router, cluster: usize) -> String {
    let (st, v) = call(app, Method::POST, "/sessions", Some(json!({ "cluster_id": cluster }))).await;
    assert_eq!(st, StatusCode::CREATED, "{v}");
    v["session_id"].as_str().unwrap().to_owned()
}

/// Accept the first pending candidate by labeling it against the global model.
async fn accept_one(app: &Router, id: &str) -> Value {
    let (st, s) = call(app, Method::GET, &format!("/sessions/{id}/suggestions?n=4"), None).await;
    assert_eq!(st, StatusCode::OK, "{s}");
    let c = &s["candidates"][0];
    let label = opposite(c["global_pred"]["label"].as_str().unwrap());
    let (st, d) = call(
        app,
        Method::POST,
        &format!("/sessions/{id}/decisions"),
        Some(json!({ "candidate_id": c["id"], "label": label })),
    )
    .await;
    assert_eq!(st, StatusCode::OK, "{d}");
    assert_ne!(d["status"], "rejected");
    d
}

#[tokio::test]
async fn token_is_required_except_for_health() {
    let h = Harness::new();
    let (_, app) = h.app();
    assert_eq!(call_with(&app, Method::GET, "/health", None, None).await.0, StatusCode::OK);
    assert_eq!(call_with(&app, Method::GET, "/sessions", None, None).await.0, StatusCode::UNAUTHORIZED);
    assert_eq!(call_with(&app, Method::GET, "/sessions", None, Some("nope")).await.0, StatusCode::UNAUTHORIZED);
    assert_eq!(call(&app, Method::GET, "/sessions", None).await.0, StatusCode::OK);
}

#[tokio::test]
async fn creation_follows_selection() {
    let h = Harness::new();
    let (_, app) = h.app();
    let live = h.live();
    let cluster = selected(&live);
    let unselected = (0..live.discovery.clusters.k).find(|c| !live.selection.clusters.contains(c)).unwrap();

    let (st, _) = call(&app, Method::POST, "/sessions", Some(json!({ "cluster_id": 999 }))).await;
    assert_eq!(st, StatusCode::NOT_FOUND);
    let (st, _) = call(&app, Method::POST, "/sessions", Some(json!({ "cluster_id": unselected }))).await;
    assert_eq!(st, StatusCode::CONFLICT);

    let (st, v) = call(&app, Method::POST, "/sessions", Some(json!({ "cluster_id": cluster }))).await;
    assert_eq!(st, StatusCode::CREATED);
    assert_eq!(v["status"], "active");
    assert!(!v["prompt_pool"].as_array().unwrap().is_empty());
    assert_eq!(v["time_budget_minutes"], 90);
    assert_eq!(v["actions"]["update_local"], false);

    let (st, e) = call(&app, Method::POST, "/sessions", Some(json!({ "cluster_id": cluster }))).await;
    assert_eq!(st, StatusCode::CONFLICT);
    assert!(e["message"].as_str().unwrap().contains("active session"));

    let (_, list) = call(&app, Method::GET, "/sessions", None).await;
    assert_eq!(list.as_array().unwrap().len(), 1);
    let (st, sel) = call(&app, Method::GET, "/selection", None).await;
    assert_eq!(st, StatusCode::OK);
    assert_eq!(sel["clusters"].as_array().unwrap().len(), live.selection.clusters.len());
}

#[tokio::test]
async fn gate_rejection_refuses_sessions() {
    let h = Harness::new();
    let mut live = h.live();
    let cluster = selected(&live);
    live.selection.verdict = GateVerdict::RejectHighInterference;
    live.selection.clusters.clear();
    let app = router(h.state_with(live));
    let (st, e) = call(&app, Method::POST, "/sessions", Some(json!({ "cluster_id": cluster }))).await;
    assert_eq!(st, StatusCode::CONFLICT);
    assert!(e["message"].as_str().unwrap().contains("high interference"), "{e}");
}

#[tokio::test]
async fn suggestion_decision_update_cycle() {
    let h = Harness::new();
    let (_, app) = h.app();
    let id = open_session(&app, selected(&h.live())).await;

    let (st, _) = call(&app, Method::GET, "/sessions/nope", None).await;
    assert_eq!(st, StatusCode::NOT_FOUND);
    let (st, _) = call(&app, Method::POST, &format!("/sessions/{id}/updates"), Some(json!({ "scope": "local" }))).await;
    assert_eq!(st, StatusCode::CONFLICT, "empty accepted set");

    let (st, s1) = call(&app, Method::GET, &format!("/sessions/{id}/suggestions?n=5"), None).await;
    assert_eq!(st, StatusCode::OK);
    let cands = s1["candidates"].as_array().unwrap();
    assert!(!cands.is_empty() && cands.len() <= 5);
    let flags: Vec<bool> = cands.iter().map(|c| c["creative"].as_bool().unwrap()).collect();
    assert!(flags.windows(2).all(|w| w[0] >= w[1]), "creative first");
    let (_, s2) = call(&app, Method::GET, &format!("/sessions/{id}/suggestions?n=5"), None).await;
    assert_eq!(s1, s2, "idempotent without state change");

    let uri = format!("/sessions/{id}/decisions");
    let (st, _) = call(&app, Method::POST, &uri, Some(json!({ "candidate_id": "missing", "label": POS }))).await;
    assert_eq!(st, StatusCode::NOT_FOUND);
    let (st, _) = call(&app, Method::POST, &uri, Some(json!({ "candidate_id": cands[0]["id"], "label": "maybe" }))).await;
    assert_eq!(st, StatusCode::BAD_REQUEST);
    let label = opposite(cands[0]["global_pred"]["label"].as_str().unwrap());
    let (st, d) = call(&app, Method::POST, &uri, Some(json!({ "candidate_id": cands[0]["id"], "label": label }))).await;
    assert_eq!(st, StatusCode::OK);
    assert_ne!(d["status"], "rejected");
    assert_eq!(d["session"]["accepted"].as_array().unwrap().len(), 1);
    assert_eq!(d["session"]["actions"]["update_local"], true);
    let (st, _) = call(&app, Method::POST, &uri, Some(json!({ "candidate_id": cands[0]["id"], "label": label }))).await;
    assert_eq!(st, StatusCode::CONFLICT);
    let pool_before = d["session"]["prompt_pool"].as_array().unwrap().len();
    let (st, a) = call(&app, Method::POST, &uri, Some(json!({ "candidate_id": cands[1]["id"], "label": null }))).await;
    assert_eq!(st, StatusCode::OK);
    assert_eq!(a["status"], "rejected");
    assert_eq!(a["session"]["prompt_pool"].as_array().unwrap().len(), pool_before);

    let (st, u) = call(&app, Method::POST, &format!("/sessions/{id}/updates"), Some(json!({ "scope": "global" }))).await;
    assert_eq!(st, StatusCode::OK, "{u}");
    let gv = u["version_id"].as_str().unwrap();
    assert_eq!(u["session"]["global_version"], gv);
    assert_eq!(u["session"]["stopping"]["budget_used"]["global_updates"], 1);
    let (_, s3) = call(&app, Method::GET, &format!("/sessions/{id}/suggestions?n=5"), None).await;
    assert_eq!(s3["global_version"], gv, "flags are computed against the served versions");
    let (_, view) = call(&app, Method::GET, &format!("/sessions/{id}"), None).await;
    assert_eq!(view["pending"], s3["candidates"]);
}

#[tokio::test]
async fn second_update_while_one_is_in_flight_is_refused() {
    let h = Harness::new();
    let (state, app) = h.app();
    let id = open_session(&app, selected(&h.live())).await;
    accept_one(&app, &id).await;

    let slot = state.slot(&id).unwrap();
    let held = slot.begin_update().unwrap();
    assert!(slot.begin_update().is_none());
    let (_, view) = call(&app, Method::GET, &format!("/sessions/{id}"), None).await;
    assert_eq!(view["update_in_flight"], true);
    assert_eq!(view["actions"]["update_local"], false);
    let (st, _) = call(&app, Method::POST, &format!("/sessions/{id}/updates"), Some(json!({ "scope": "local" }))).await;
    assert_eq!(st, StatusCode::CONFLICT);
    drop(held);
    let (st, _) = call(&app, Method::POST, &format!("/sessions/{id}/updates"), Some(json!({ "scope": "local" }))).await;
    assert_eq!(st, StatusCode::OK);
}

#[tokio::test]
async fn concurrent_decisions_are_all_applied() {
    let h = Harness::new();
    let (_, app) = h.app();
    let id = open_session(&app, selected(&h.live())).await;
    let (_, s) = call(&app, Method::GET, &format!("/sessions/{id}/suggestions?n=6"), None).await;
    let cands = s["candidates"].as_array().unwrap().clone();
    let mut tasks = Vec::new();
    for c in &cands {
        let app = app.clone();
        let uri = format!("/sessions/{id}/decisions");
        let body = json!({ "candidate_id": c["id"], "label": opposite(c["global_pred"]["label"].as_str().unwrap()) });
        tasks.push(tokio::spawn(async move { call(&app, Method::POST, &uri, Some(body)).await }));
    }
    let mut accepted = 0;
    for t in tasks {
        let (st, d) = t.await.unwrap();
        assert_eq!(st, StatusCode::OK);
        if d["status"] != "rejected" {
            accepted += 1;
        }
    }
    let (_, view) = call(&app, Method::GET, &format!("/sessions/{id}"), None).await;
    assert_eq!(view["accepted"].as_array().unwrap().len(), accepted);
    assert_eq!(view["stopping"]["budget_used"]["labels"], cands.len());
    assert!(view["pending"].as_array().unwrap().is_empty());
}

#[tokio::test]
async fn rename_persists_and_shows_in_names() {
    let h = Harness::new();
    let (_, app) = h.app();
    let id = open_session(&app, selected(&h.live())).await;
    let uri = format!("/sessions/{id}/name");
    let (st, _) = call(&app, Method::PATCH, &uri, Some(json!({ "name": "" }))).await;
    assert_eq!(st, StatusCode::BAD_REQUEST);
    call(&app, Method::PATCH, &uri, Some(json!({ "name": "first" }))).await;
    let (st, v) = call(&app, Method::PATCH, &uri, Some(json!({ "name": "Formal vs Casual Tone" }))).await;
    assert_eq!(st, StatusCode::OK);
    assert_eq!(v["name"], "Formal vs Casual Tone");
    assert_eq!(h.pipeline.cluster_names().unwrap()[&id], "Formal vs Casual Tone");
}

#[tokio::test]
async fn restart_restores_sessions_from_logs() {
    let h = Harness::new();
    let id;
    let before;
    {
        let (_, app) = h.app();
        id = open_session(&app, selected(&h.live())).await;
        accept_one(&app, &id).await;
        call(&app, Method::POST, &format!("/sessions/{id}/updates"), Some(json!({ "scope": "local" }))).await;
        call(&app, Method::PATCH, &format!("/sessions/{id}/name"), Some(json!({ "name": "kept" }))).await;
        before = call(&app, Method::GET, &format!("/sessions/{id}"), None).await.1;
    }
    assert!(h.pipeline.live_dir().join(format!("{id}.snapshot.json")).exists());
    let (_, app) = h.app();
    let (st, after) = call(&app, Method::GET, &format!("/sessions/{id}"), None).await;
    assert_eq!(st, StatusCode::OK);
    assert_eq!(before, after);
    // The restored session keeps logging.
    accept_one(&app, &id).await;
    let (_, app) = h.app();
    let (_, again) = call(&app, Method::GET, &format!("/sessions/{id}"), None).await;
    assert_eq!(again["accepted"].as_array().unwrap().len(), 2);
}

struct Broken;

impl Generator for Broken {
    fn name(&self) -> &str {
        "broken"
    }
    fn propose(&self, _: &[LabeledExample], _: usize, _: u64) -> tdg_core::error::Result<Vec<Vec<String>>> {
        Err(TdgError::Generator("upstream timed out".into()))
    }
}

#[tokio::test]
async fn generator_failure_is_a_retryable_502() {
    let h = Harness::new();
    let mut live = h.live();
    let cluster = selected(&live);
    live.generator = Box::new(Broken);
    let app = router(h.state_with(live));
    let id = open_session(&app, cluster).await;
    let req = Request::get(format!("/sessions/{id}/suggestions?n=3"))
        .header(header::AUTHORIZATION, format!("Bearer {TOKEN}"))
        .body(Body::empty())
        .unwrap();
    let res = app.clone().oneshot(req).await.unwrap();
    assert_eq!(res.status(), StatusCode::BAD_GATEWAY);
    assert!(res.headers().contains_key(header::RETRY_AFTER));
    let body: Value = serde_json::from_slice(&res.into_body().collect().await.unwrap().to_bytes()).unwrap();
    assert_eq!(body["retry"], true);
    let (_, view) = call(&app, Method::GET, &format!("/sessions/{id}"), None).await;
    assert_eq!(view["status"], "active");
}

#[tokio::test]
async fn live_sessions_feed_the_augment_stage() {
    let h = Harness::new();
    let (_, app) = h.app();
    let id = open_session(&app, selected(&h.live())).await;
    accept_one(&app, &id).await;
    accept_one(&app, &id).await;

    let mut cfg = run_config(h.pipeline.root.as_path());
    cfg.augment.source = SessionSource::Live;
    let p = Pipeline::new(cfg).unwrap();
    p.run_stage(Stage::AugmentOracle, false).unwrap();
    let sessions = p.sessions().unwrap();
    let got = &sessions[&SEED];
    assert_eq!(got.len(), 1);
    assert_eq!(got[0].session_id, id);
    assert_eq!(got[0].accepted.len(), 2);

    // New labels change the stage's inputs.
    accept_one(&app, &id).await;
    assert!(matches!(p.sessions(), Err(TdgError::Stale(_))));
}

fn schema_keys(doc: &Value, name: &str) -> BTreeSet<String> {
    doc["components"]["schemas"][name]["properties"]
        .as_object()
        .unwrap()
        .keys()
        .cloned()
        .collect()
}

fn value_keys(v: &Value) -> BTreeSet<String> {
    v.as_object().unwrap().keys().cloned().collect()
}

#[tokio::test]
async fn openapi_document_matches_the_wire_format() {
    let doc: Value = serde_json::from_str(include_str!("../openapi.json")).unwrap();
    for p in [
        "/sessions",
        "/sessions/{id}",
        "/sessions/{id}/suggestions",
        "/sessions/{id}/decisions",
        "/sessions/{id}/updates",
        "/sessions/{id}/name",
        "/selection",
        "/health",
    ] {
        assert!(doc["paths"].get(p).is_some(), "{p} undocumented");
    }
    let h = Harness::new();
    let (_, app) = h.app();
    let id = open_session(&app, selected(&h.live())).await;
    let d = accept_one(&app, &id).await;
    assert_eq!(value_keys(&d), schema_keys(&doc, "DecisionResponse"));
    assert_eq!(value_keys(&d["session"]), schema_keys(&doc, "SessionResponse"));
    assert_eq!(value_keys(&d["session"]["actions"]), schema_keys(&doc, "Actions"));
    assert_eq!(value_keys(&d["session"]["stopping"]), schema_keys(&doc, "StoppingState"));
    assert_eq!(value_keys(&d["session"]["accepted"][0]), schema_keys(&doc, "LabeledExample"));
    let (_, s) = call(&app, Method::GET, &format!("/sessions/{id}/suggestions?n=2"), None).await;
    assert_eq!(value_keys(&s), schema_keys(&doc, "SuggestionsResponse"));
    assert_eq!(value_keys(&s["candidates"][0]), schema_keys(&doc, "Candidate"));
    let (_, e) = call(&app, Method::GET, "/sessions/none", None).await;
    assert_eq!(value_keys(&e), schema_keys(&doc, "ErrorBody"));
    let (_, l) = call(&app, Method::GET, "/sessions", None).await;
    assert_eq!(value_keys(&l[0]), schema_keys(&doc, "SessionSummary"));
}
