use std::sync::Arc;

use axum::body::Body;
use axum::http::{header, Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use probe_annotate::{router, ErrorBody, HitManifest, ServiceConfig};
use probe_core::annotation::{
    build_discovery_hit, AssetWriter, Choice, ClassMetadata, DiscoveryHit, Hit, HitStatus, HitStore, HitSummary,
    LedgerExport, SubmitReceipt, ValidationHit, Verdict, WorkerResponse,
};
use probe_core::cache::CacheRecord;
use probe_core::dataset::Dataset;
use probe_core::saliency::AttackConfig;
use probe_core::synthetic::{generate_planted_dataset, tiny_reference_model, write_planted_dataset, PlantConfig};
use probe_core::ImageSource;
use serde::de::DeserializeOwned;
use tempfile::TempDir;
use tower::ServiceExt;

fn metadata(class: usize) -> ClassMetadata {
    ClassMetadata {
        class_index: class,
        object_names: vec![format!("class {class}")],
        supercategory: "synthetic".into(),
        definition: String::new(),
        wiki_links: Vec::new(),
        validation_image_ids: Vec::new(),
    }
}

fn discovery(class: usize, feature: usize) -> Hit {
    Hit::Discovery(DiscoveryHit {
        hit_id: DiscoveryHit::id_for(class, feature),
        class_index: class,
        feature_index: feature,
        visual_panel: Vec::new(),
        class_panel: metadata(class),
    })
}

fn validation(class: usize, feature: usize) -> Hit {
    Hit::Validation(ValidationHit {
        hit_id: ValidationHit::id_for(class, feature),
        class_index: class,
        feature_index: feature,
        section_a: Vec::new(),
        section_b: Vec::new(),
    })
}

fn app_with(hits: Vec<Hit>, config: ServiceConfig) -> Router {
    let store = HitStore::new(5).unwrap();
    for hit in hits {
        store.add_hit(hit).unwrap();
    }
    router(Arc::new(store), config)
}

fn app() -> Router {
    app_with(vec![discovery(0, 3), discovery(0, 7), validation(0, 3)], ServiceConfig::default())
}

fn answer(hit: &str, worker: &str, choice: Choice) -> WorkerResponse {
    WorkerResponse {
        hit_id: hit.into(),
        worker_id: worker.into(),
        choice,
        reason: "the highlighted region".into(),
        confidence: 4,
    }
}

async fn call(app: &Router, request: Request<Body>) -> (StatusCode, Vec<u8>) {
    let response = app.clone().oneshot(request).await.unwrap();
    let status = response.status();
    let body = response.into_body().collect().await.unwrap().to_bytes().to_vec();
    (status, body)
}

async fn get<T: DeserializeOwned>(app: &Router, uri: &str) -> (StatusCode, T) {
    let (status, body) = call(app, Request::get(uri).body(Body::empty()).unwrap()).await;
    (status, serde_json::from_slice(&body).unwrap_or_else(|e| panic!("{uri}: {e}")))
}

fn post_request(hit: &str, body: String, token: Option<&str>) -> Request<Body> {
    let mut request = Request::post(format!("/hits/{hit}/responses")).header(header::CONTENT_TYPE, "application/json");
    if let Some(token) = token {
        request = request.header(header::AUTHORIZATION, format!("Bearer {token}"));
    }
    request.body(Body::from(body)).unwrap()
}

async fn post(app: &Router, response: &WorkerResponse) -> (StatusCode, Vec<u8>) {
    call(app, post_request(&response.hit_id, serde_json::to_string(response).unwrap(), None)).await
}

#[tokio::test]
async fn scripted_votes_show_up_in_the_ledger() {
    let app = app();
    let votes = [
        ("w1", Choice::SeparateObjects),
        ("w2", Choice::SeparateObjects),
        ("w3", Choice::Background),
        ("w4", Choice::MainObject),
        ("w5", Choice::MainObject),
    ];
    for (k, (worker, choice)) in votes.iter().enumerate() {
        let (status, body) = post(&app, &answer("d-0-3", worker, *choice)).await;
        assert_eq!(status, StatusCode::CREATED);
        let receipt: SubmitReceipt = serde_json::from_slice(&body).unwrap();
        assert_eq!(receipt.responses, k + 1);
        assert_eq!(receipt.outcome.is_some(), k == 4);
    }
    let (status, ledger): (_, LedgerExport) = get(&app, "/ledger").await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(ledger.records.len(), 1);
    let record = &ledger.records[0];
    assert_eq!((record.class, record.feature, record.verdict), (0, 3, Verdict::Spurious));
    assert_eq!(record.votes[&Choice::SeparateObjects], 2);
    assert_eq!(record.votes[&Choice::Background], 1);
    assert_eq!(record.votes[&Choice::MainObject], 2);
    assert_eq!(record.validated, None);

    // the raw JSON uses the documented field names
    let (_, raw): (_, serde_json::Value) = get(&app, "/ledger").await;
    let first = &raw["records"][0];
    for key in ["class", "feature", "verdict", "votes", "validated"] {
        assert!(first.get(key).is_some(), "missing {key}");
    }
    assert_eq!(first["verdict"], "spurious");
    assert_eq!(first["votes"]["separate_objects"], 2);

    // quorum reached: further answers conflict
    let (status, body) = post(&app, &answer("d-0-3", "w6", Choice::MainObject)).await;
    assert_eq!(status, StatusCode::CONFLICT);
    let error: ErrorBody = serde_json::from_slice(&body).unwrap();
    assert_eq!(error.error, "hit_closed");

    // validation closes and attaches to the verdict
    for worker in ["a", "b", "c", "d", "e"] {
        let choice = if worker < "d" { Choice::Same } else { Choice::Different };
        assert_eq!(post(&app, &answer("v-0-3", worker, choice)).await.0, StatusCode::CREATED);
    }
    let (_, ledger): (_, LedgerExport) = get(&app, "/ledger").await;
    assert_eq!(ledger.records[0].validated, Some(true));
}

#[tokio::test]
async fn listing_filters_by_status() {
    let app = app();
    let (status, all): (_, Vec<HitSummary>) = get(&app, "/hits").await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(all.len(), 3);
    for worker in ["a", "b", "c", "d", "e"] {
        post(&app, &answer("d-0-7", worker, Choice::MainObject)).await;
    }
    post(&app, &answer("d-0-3", "a", Choice::MainObject)).await;
    let (_, open): (_, Vec<HitSummary>) = get(&app, "/hits?status=open").await;
    let ids: Vec<&str> = open.iter().map(|h| h.hit_id.as_str()).collect();
    assert_eq!(ids, vec!["d-0-3", "v-0-3"]);
    assert_eq!(open[0].responses, 1);
    let (_, closed): (_, Vec<HitSummary>) = get(&app, "/hits?status=closed").await;
    assert_eq!(closed.len(), 1);
    assert_eq!(closed[0].status, HitStatus::Closed);
    let (status, error): (_, ErrorBody) = get(&app, "/hits?status=pending").await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_eq!(error.error, "invalid_query");
}

#[tokio::test]
async fn bad_submissions_are_rejected_with_the_right_status() {
    let app = app();
    let (status, body) = post(&app, &answer("d-9-9", "w", Choice::MainObject)).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    assert_eq!(serde_json::from_slice::<ErrorBody>(&body).unwrap().error, "unknown_hit");

    let mut shaky = answer("d-0-3", "w", Choice::MainObject);
    shaky.confidence = 6;
    assert_eq!(post(&app, &shaky).await.0, StatusCode::BAD_REQUEST);
    // a validation option on a discovery HIT
    assert_eq!(post(&app, &answer("d-0-3", "w", Choice::Same)).await.0, StatusCode::BAD_REQUEST);
    // body addressed to another HIT
    let misrouted = answer("d-0-7", "w", Choice::MainObject);
    let (status, _) = call(&app, post_request("d-0-3", serde_json::to_string(&misrouted).unwrap(), None)).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    for body in ["not json", "{}", r#"{"hit_id":"d-0-3","worker_id":"w","choice":"maybe","reason":"","confidence":3}"#] {
        let (status, body) = call(&app, post_request("d-0-3", body.into(), None)).await;
        assert_eq!(status, StatusCode::BAD_REQUEST);
        assert_eq!(serde_json::from_slice::<ErrorBody>(&body).unwrap().error, "invalid_response");
    }
    // nothing above was recorded
    let (_, manifest): (_, HitManifest) = get(&app, "/hits/d-0-3").await;
    assert_eq!(manifest.responses, 0);
}

#[tokio::test]
async fn bearer_token_guards_submissions_only() {
    let config = ServiceConfig {
        token: Some("s3cret".into()),
        ..ServiceConfig::default()
    };
    let app = app_with(vec![discovery(1, 1)], config);
    let body = serde_json::to_string(&answer("d-1-1", "w", Choice::Background)).unwrap();
    let (status, _) = call(&app, post_request("d-1-1", body.clone(), None)).await;
    assert_eq!(status, StatusCode::UNAUTHORIZED);
    let (status, _) = call(&app, post_request("d-1-1", body.clone(), Some("wrong"))).await;
    assert_eq!(status, StatusCode::UNAUTHORIZED);
    let (status, _) = call(&app, post_request("d-1-1", body, Some("s3cret"))).await;
    assert_eq!(status, StatusCode::CREATED);
    let (status, _): (_, Vec<HitSummary>) = get(&app, "/hits").await;
    assert_eq!(status, StatusCode::OK);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn concurrent_posts_close_each_hit_once() {
    let hits: Vec<Hit> = (0..6).map(|f| discovery(2, f)).collect();
    let app = app_with(hits, ServiceConfig::default());
    let mut tasks = Vec::new();
    for f in 0..6 {
        for w in 0..9 {
            let app = app.clone();
            tasks.push(tokio::spawn(async move {
                let id = DiscoveryHit::id_for(2, f);
                let (status, body) = post(&app, &answer(&id, &format!("w{w}"), Choice::Background)).await;
                let closed_it = status == StatusCode::CREATED
                    && serde_json::from_slice::<SubmitReceipt>(&body).unwrap().outcome.is_some();
                (f, status, closed_it)
            }));
        }
    }
    let mut created = [0; 6];
    let mut conflicts = [0; 6];
    let mut closers = [0; 6];
    for task in tasks {
        let (f, status, closed_it) = task.await.unwrap();
        match status {
            StatusCode::CREATED => created[f] += 1,
            StatusCode::CONFLICT => conflicts[f] += 1,
            other => panic!("unexpected {other}"),
        }
        closers[f] += usize::from(closed_it);
    }
    assert_eq!(created, [5; 6]);
    assert_eq!(conflicts, [4; 6]);
    assert_eq!(closers, [1; 6]);
    let (_, ledger): (_, LedgerExport) = get(&app, "/ledger").await;
    assert_eq!(ledger.records.len(), 6);
    assert!(ledger.records.iter().all(|r| r.verdict == Verdict::Spurious));
}

#[tokio::test]
async fn discovery_manifest_links_all_fifteen_assets() {
    let dir = TempDir::new().unwrap();
    let config = PlantConfig {
        num_classes: 2,
        images_per_class: 8,
        validation_per_class: 3,
        ..PlantConfig::default()
    };
    write_planted_dataset(&generate_planted_dataset(&config).unwrap(), &dir.path().join("data")).unwrap();
    let dataset = Dataset::open(&dir.path().join("data")).unwrap();
    let model = tiny_reference_model(0);
    let records: Vec<CacheRecord> = dataset
        .labels(Some("train"))
        .into_keys()
        .map(|id| {
            let forward = model.forward(&id, dataset.load(&id).unwrap().view()).unwrap();
            CacheRecord {
                image_id: id,
                predicted: 0,
                predicted_logit: 0.0,
                vector: forward.feature_vector.iter().map(|&v| v as f32).collect(),
            }
        })
        .collect();
    let assets = AssetWriter::new(dir.path().join("assets"));
    let class_panel = dataset.manifest().classes[0].clone();
    let attack = AttackConfig {
        iterations: 2,
        ..AttackConfig::default()
    };
    let hit = build_discovery_hit(0, 2, &records, &model, &dataset, &class_panel, &attack, &assets).unwrap();
    let app = app_with(
        vec![Hit::Discovery(hit)],
        ServiceConfig {
            asset_roots: vec![dir.path().join("elsewhere"), assets.root().to_path_buf()],
            token: None,
        },
    );

    let (status, manifest): (_, HitManifest) = get(&app, "/hits/d-0-2").await;
    assert_eq!(status, StatusCode::OK);
    let labels: Vec<&str> = manifest.options.iter().map(|o| o.label.as_str()).collect();
    assert_eq!(labels, ["main object", "separate objects", "background"]);
    let Hit::Discovery(hit) = &manifest.hit else {
        panic!("expected a discovery hit");
    };
    let mut urls = Vec::new();
    for panel in &hit.visual_panel {
        urls.extend([panel.image.clone(), panel.heatmap.clone(), panel.attack.clone().unwrap()]);
    }
    assert_eq!(urls.len(), 15);
    assert_eq!(manifest.class_images.len(), 3);
    for url in urls.iter().chain(&manifest.class_images) {
        let request = Request::get(url.as_str()).body(Body::empty()).unwrap();
        let response = app.clone().oneshot(request).await.unwrap();
        assert_eq!(response.status(), StatusCode::OK, "{url}");
        assert_eq!(response.headers()[header::CONTENT_TYPE], "image/png");
        let bytes = response.into_body().collect().await.unwrap().to_bytes();
        assert!(bytes.starts_with(b"\x89PNG"));
    }

    let (status, _) = call(&app, Request::get("/assets/images/none.png").body(Body::empty()).unwrap()).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    let (status, _) = call(&app, Request::get("/assets/images/..%2F..%2Fdata%2Fmanifest.json").body(Body::empty()).unwrap()).await;
    assert_ne!(status, StatusCode::OK);
    let (status, _) = call(&app, Request::get("/assets/../data/manifest.json").body(Body::empty()).unwrap()).await;
    assert_ne!(status, StatusCode::OK);
}

#[tokio::test]
async fn validation_manifest_offers_the_validation_options() {
    let app = app();
    let (status, manifest): (_, HitManifest) = get(&app, "/hits/v-0-3").await;
    assert_eq!(status, StatusCode::OK);
    let labels: Vec<&str> = manifest.options.iter().map(|o| o.label.as_str()).collect();
    assert_eq!(labels, ["same", "different", "Section A is unclear", "Section B is unclear"]);
    assert_eq!((manifest.status, manifest.quorum), (HitStatus::Open, 5));
    let (status, error): (_, ErrorBody) = get(&app, "/hits/v-9-9").await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    assert_eq!(error.error, "unknown_hit");
}
