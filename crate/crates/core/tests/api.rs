mod common;

use std::fs;
use std::path::Path;

use axum::http::StatusCode;
use axum::Router;
use confguide::api::{router, AppState, ServiceOptions, DECISIONS_FILE};
use confguide::pipeline::{self, RunConfig, StageOptions};
use confguide::{LabelSchema, PredictionSet};
use serde_json::{json, Value};

use common::{call, copy_demo};

struct Fixture {
    _tmp: tempfile::TempDir,
    cfg: RunConfig,
    schema: LabelSchema,
    sets: Vec<PredictionSet>,
}

fn fixture(with_guidance: bool) -> Fixture {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = RunConfig::load(&copy_demo(tmp.path())).unwrap();
    let opts = StageOptions::default();
    pipeline::run_calibrate(&cfg, opts).unwrap();
    pipeline::run_predict(&cfg, opts).unwrap();
    if with_guidance {
        pipeline::run_guide(&cfg, opts).unwrap();
    }
    let inputs = pipeline::load_review_inputs(&cfg, opts).unwrap();
    Fixture {
        schema: inputs.schema.clone(),
        sets: inputs.sets.clone(),
        _tmp: tmp,
        cfg,
    }
}

impl Fixture {
    fn app_with_token(&self, token: Option<&str>) -> Router {
        let inputs = pipeline::load_review_inputs(&self.cfg, StageOptions::default()).unwrap();
        let state = AppState::new(
            inputs,
            ServiceOptions {
                out_dir: self.cfg.output_dir.clone(),
                image_base: self.cfg.images_dir(),
                view: self.cfg.view,
                seed: self.cfg.seed,
                token: token.map(str::to_string),
            },
        )
        .unwrap();
        router(state)
    }

    fn app(&self) -> Router {
        self.app_with_token(None)
    }

    fn flagged_case(&self) -> &PredictionSet {
        self.sets
            .iter()
            .find(|s| !s.is_empty() && s.len() < self.schema.k())
            .expect("demo has a partially flagged case")
    }

    fn all_present(&self, set: &PredictionSet) -> Value {
        let verdicts: serde_json::Map<String, Value> = set
            .members
            .iter()
            .map(|&m| (self.schema.name(m).to_string(), json!("present")))
            .collect();
        json!({ "verdicts": verdicts })
    }
}

async fn open_session(app: &Router, config: &str) -> String {
    let (status, body) = call(app, "POST", "/sessions", Some(json!({"reviewer_id": "dr-a", "config": config}))).await;
    assert_eq!(status, StatusCode::CREATED, "{body}");
    body["session_id"].as_str().unwrap().to_string()
}

#[tokio::test]
async fn session_creation_validates_config() {
    let f = fixture(false);
    let app = f.app();
    for (config, status) in [
        ("crc", StatusCode::UNPROCESSABLE_ENTITY),
        ("standard", StatusCode::UNPROCESSABLE_ENTITY),
        ("bogus", StatusCode::UNPROCESSABLE_ENTITY),
        ("confguide", StatusCode::CONFLICT),
        ("crc_plus_plus", StatusCode::CREATED),
    ] {
        let (got, body) = call(&app, "POST", "/sessions", Some(json!({"reviewer_id": "r", "config": config}))).await;
        assert_eq!(got, status, "{config}: {body}");
        if got != StatusCode::CREATED {
            assert!(body["code"].is_string() && body["message"].is_string());
        }
    }
    let (got, _) = call(&app, "POST", "/sessions", Some(json!({"reviewer": "r"}))).await;
    assert_eq!(got, StatusCode::UNPROCESSABLE_ENTITY);
}

#[tokio::test]
async fn queue_is_a_seeded_permutation_of_test_cases() {
    let f = fixture(false);
    let app = f.app();
    let sid = open_session(&app, "crc_plus_plus").await;
    let (status, body) = call(&app, "GET", &format!("/sessions/{sid}/cases"), None).await;
    assert_eq!(status, StatusCode::OK);
    let mut queue: Vec<String> = body["cases"]
        .as_array()
        .unwrap()
        .iter()
        .map(|c| c["case_id"].as_str().unwrap().to_string())
        .collect();
    let first_order = queue.clone();
    queue.sort();
    let mut expected: Vec<String> = f.sets.iter().map(|s| s.case_id.clone()).collect();
    expected.sort();
    assert_eq!(queue, expected);

    fs::remove_file(f.cfg.output_dir.join("review_sessions.json")).unwrap();
    let fresh = f.app();
    let sid2 = open_session(&fresh, "crc_plus_plus").await;
    assert_eq!(sid2, sid);
    let (_, body) = call(&fresh, "GET", &format!("/sessions/{sid2}/cases"), None).await;
    let again: Vec<String> = body["cases"]
        .as_array()
        .unwrap()
        .iter()
        .map(|c| c["case_id"].as_str().unwrap().to_string())
        .collect();
    assert_eq!(again, first_order);
}

#[tokio::test]
async fn case_payload_shows_guidance_only_for_confguide_and_never_labels() {
    let f = fixture(true);
    let app = f.app();
    let set = f.flagged_case();
    let guided = open_session(&app, "confguide").await;
    let plain = open_session(&app, "crc_plus_plus").await;

    let (status, body) = call(&app, "GET", &format!("/cases/{}?session={guided}", set.case_id), None).await;
    assert_eq!(status, StatusCode::OK, "{body}");
    let flagged = body["flagged"].as_array().unwrap();
    assert_eq!(flagged.len(), set.len());
    for (entry, &m) in flagged.iter().zip(&set.members) {
        assert_eq!(entry["label"], f.schema.name(m));
        assert!(entry["guidance"]["favor"].as_str().is_some_and(|s| !s.is_empty()));
        assert!(entry["guidance"]["against"].as_str().is_some_and(|s| !s.is_empty()));
    }
    assert_eq!(body["image_url"], format!("/images/{}", set.case_id));
    for forbidden in ["labels", "truth", "decisions", "scores"] {
        assert!(body.get(forbidden).is_none(), "payload exposes {forbidden}");
    }

    let (_, body) = call(&app, "GET", &format!("/cases/{}?session={plain}", set.case_id), None).await;
    assert!(body["flagged"].as_array().unwrap().iter().all(|e| e.get("guidance").is_none()));
}

#[tokio::test]
async fn unknown_session_or_case_is_404() {
    let f = fixture(false);
    let app = f.app();
    let sid = open_session(&app, "crc_plus_plus").await;
    let cid = &f.flagged_case().case_id;
    let body = Some(f.all_present(f.flagged_case()));
    for (method, uri, body) in [
        ("GET", "/sessions/nope/cases".to_string(), None),
        ("GET", format!("/cases/nope?session={sid}"), None),
        ("GET", format!("/cases/{cid}?session=nope"), None),
        ("GET", "/progress/nope".to_string(), None),
        ("GET", "/images/nope".to_string(), None),
        ("POST", format!("/sessions/nope/cases/{cid}/decision"), body.clone()),
        ("POST", format!("/sessions/{sid}/cases/nope/decision"), body),
    ] {
        let (status, _) = call(&app, method, &uri, body).await;
        assert_eq!(status, StatusCode::NOT_FOUND, "{method} {uri}");
    }
}

#[tokio::test]
async fn submission_rules() {
    let f = fixture(false);
    let app = f.app();
    let sid = open_session(&app, "crc_plus_plus").await;
    let set = f.flagged_case();
    let uri = format!("/sessions/{sid}/cases/{}/decision", set.case_id);

    // missing one flagged label
    let mut partial = f.all_present(set);
    partial["verdicts"]
        .as_object_mut()
        .unwrap()
        .remove(f.schema.name(set.members[0]));
    let (status, body) = call(&app, "POST", &uri, Some(partial)).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY, "{body}");

    let mut unknown = f.all_present(set);
    unknown["verdicts"]["Not A Label"] = json!("absent");
    let (status, _) = call(&app, "POST", &uri, Some(unknown)).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);

    let mut bad_value = f.all_present(set);
    bad_value["verdicts"][f.schema.name(set.members[0])] = json!("maybe");
    let (status, _) = call(&app, "POST", &uri, Some(bad_value)).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);

    let mut absent = f.all_present(set);
    absent["verdicts"][f.schema.name(set.members[0])] = json!("absent");
    let (status, record) = call(&app, "POST", &uri, Some(absent)).await;
    assert_eq!(status, StatusCode::CREATED, "{record}");
    assert_eq!(record["decisions"][set.members[0]], 0);
    assert_eq!(record["provenance"][set.members[0]], "reviewed_absent");
    assert_eq!(record["reviewer_id"], "dr-a");
    assert_eq!(record["config"], "crc_plus_plus");

    // completed cases are immutable
    let (status, body) = call(&app, "POST", &uri, Some(f.all_present(set))).await;
    assert_eq!(status, StatusCode::CONFLICT);
    assert_eq!(body["code"], "already_decided");

    let (_, progress) = call(&app, "GET", &format!("/progress/{sid}"), None).await;
    assert_eq!(progress["completed"], 1);
    assert_eq!(progress["total"], f.sets.len());

    let log = fs::read_to_string(f.cfg.output_dir.join(DECISIONS_FILE)).unwrap();
    assert_eq!(log.lines().count(), 1);
    let line: Value = serde_json::from_str(log.lines().next().unwrap()).unwrap();
    assert_eq!(line["session_id"], sid.as_str());
    assert_eq!(line["decisions"][set.members[0]], 0);
}

#[tokio::test]
async fn metrics_follow_submissions_per_config_and_session() {
    let f = fixture(false);
    let app = f.app();
    let sid = open_session(&app, "crc_plus_plus").await;
    let (status, before) = call(&app, "GET", "/metrics?config=crc_plus_plus", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(before["n_cases"], 0);

    let mut done = 0;
    for set in f.sets.iter() {
        let uri = format!("/sessions/{sid}/cases/{}/decision", set.case_id);
        let (status, _) = call(&app, "POST", &uri, Some(f.all_present(set))).await;
        assert_eq!(status, StatusCode::CREATED);
        done += 1;
        let (_, m) = call(&app, "GET", &format!("/metrics?config=crc_plus_plus&session={sid}"), None).await;
        assert_eq!(m["n_cases"], done);
    }
    // accepting every flagged label reproduces the CRC sets exactly
    let (_, m) = call(&app, "GET", "/metrics?config=crc_plus_plus", None).await;
    let summary: Value =
        serde_json::from_str(&fs::read_to_string(f.cfg.output_dir.join(pipeline::PREDICT_SUMMARY_FILE)).unwrap()).unwrap();
    assert_eq!(m["empirical_fnr"], summary["empirical_fnr"]);

    let (status, _) = call(&app, "GET", &format!("/metrics?config=confguide&session={sid}"), None).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    let (_, other) = call(&app, "GET", "/metrics?config=confguide", None).await;
    assert_eq!(other["n_cases"], 0);
}

#[tokio::test]
async fn sessions_survive_restart() {
    let f = fixture(false);
    let app = f.app();
    let sid = open_session(&app, "crc_plus_plus").await;
    let set = f.flagged_case();
    let uri = format!("/sessions/{sid}/cases/{}/decision", set.case_id);
    assert_eq!(call(&app, "POST", &uri, Some(f.all_present(set))).await.0, StatusCode::CREATED);

    let restarted = f.app();
    let (_, progress) = call(&restarted, "GET", &format!("/progress/{sid}"), None).await;
    assert_eq!(progress["completed"], 1);
    assert_eq!(call(&restarted, "POST", &uri, Some(f.all_present(set))).await.0, StatusCode::CONFLICT);
    let next = open_session(&restarted, "crc_plus_plus").await;
    assert_ne!(next, sid);
}

#[tokio::test]
async fn images_are_served_with_content_type() {
    let f = fixture(false);
    let app = f.app();
    let cid = &f.sets[0].case_id;
    let response = tower::ServiceExt::oneshot(
        app,
        axum::http::Request::get(format!("/images/{cid}")).body(axum::body::Body::empty()).unwrap(),
    )
    .await
    .unwrap();
    assert_eq!(response.status(), StatusCode::OK);
    assert_eq!(response.headers()["content-type"], "image/png");
    let bytes = http_body_util::BodyExt::collect(response.into_body()).await.unwrap().to_bytes();
    let on_disk = fs::read(Path::new(&f.cfg.images_dir()).join(format!("images/{cid}.png"))).unwrap();
    assert_eq!(bytes.as_ref(), on_disk.as_slice());
}

#[tokio::test]
async fn bearer_token_is_enforced_when_configured() {
    let f = fixture(false);
    let app = f.app_with_token(Some("s3cret"));
    let (status, body) = call(&app, "GET", "/metrics?config=crc", None).await;
    assert_eq!(status, StatusCode::UNAUTHORIZED);
    assert_eq!(body["code"], "unauthorized");

    let response = tower::ServiceExt::oneshot(
        app,
        axum::http::Request::get("/metrics?config=crc_plus_plus")
            .header("authorization", "Bearer s3cret")
            .body(axum::body::Body::empty())
            .unwrap(),
    )
    .await
    .unwrap();
    assert_eq!(response.status(), StatusCode::OK);
}
