use std::path::Path;
use std::sync::Arc;

use axum::body::{to_bytes, Body};
use axum::http::{Request, StatusCode};
use image::RgbImage;
use lesionforge_core::candidates::{extract_candidates, Selection};
use lesionforge_core::imaging::LabelMap;
use lesionforge_server::{
    bind, router, CandidateGallery, ErrorBody, ImageSummary, Progress, ServedImage, ServerError, Session,
    SessionConfig,
};
use serde_json::{json, Value};
use tower::ServiceExt;

/// 64x64 image split into a left half (cluster 0) and right half (cluster 1).
fn served(id: &str) -> ServedImage {
    let labels = LabelMap::new(64, 64, (0..4096).map(|i| u32::from(i % 64 >= 32)).collect()).unwrap();
    let image = RgbImage::from_fn(64, 64, |x, _| image::Rgb([if x < 32 { 40 } else { 200 }; 3]));
    ServedImage { id: id.to_string(), image, candidates: extract_candidates(&labels).unwrap() }
}

fn open(dir: &Path, ids: &[&str]) -> Arc<Session> {
    let config = SessionConfig {
        run_id: "t".into(),
        journal_path: dir.join("journal.jsonl"),
        selections_path: dir.join("selections.json"),
        static_dir: None,
    };
    Session::open(config, ids.iter().map(|id| served(id)).collect()).unwrap()
}

async fn call(s: &Arc<Session>, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Vec<u8>) {
    let req = Request::builder().method(method).uri(uri);
    let req = match body {
        Some(v) => req.header("content-type", "application/json").body(Body::from(v.to_string())),
        None => req.body(Body::empty()),
    }
    .unwrap();
    let resp = router(Arc::clone(s)).oneshot(req).await.unwrap();
    let status = resp.status();
    (status, to_bytes(resp.into_body(), usize::MAX).await.unwrap().to_vec())
}

#[tokio::test]
async fn lists_images_with_status() {
    let dir = tempfile::tempdir().unwrap();
    let s = open(dir.path(), &["a", "b"]);
    let (st, body) = call(&s, "GET", "/api/images", None).await;
    assert_eq!(st, StatusCode::OK);
    let list: Vec<ImageSummary> = serde_json::from_slice(&body).unwrap();
    assert_eq!(list.iter().map(|i| i.id.as_str()).collect::<Vec<_>>(), vec!["a", "b"]);
    assert!(list.iter().all(|i| !i.selected && i.candidate_count == 2));
}

#[tokio::test]
async fn gallery_matches_candidates_and_overlays_resolve() {
    let dir = tempfile::tempdir().unwrap();
    let s = open(dir.path(), &["a"]);
    let (st, body) = call(&s, "GET", "/api/images/a/candidates", None).await;
    assert_eq!(st, StatusCode::OK);
    let g: CandidateGallery = serde_json::from_slice(&body).unwrap();
    let expected = &s.images()[0].candidates;
    assert_eq!(g.candidates.len(), expected.len());
    for (view, cand) in g.candidates.iter().zip(expected) {
        assert_eq!((view.cluster_id, view.size), (cand.cluster_id, cand.size));
        assert!(view.size > 1000 && view.size < 4096 - 1000);
        let (st, png) = call(&s, "GET", &view.overlay_url, None).await;
        assert_eq!(st, StatusCode::OK);
        let decoded = image::load_from_memory(&png).unwrap().to_rgb8();
        assert_eq!(decoded.dimensions(), (64, 64));
    }
    let (st, _) = call(&s, "GET", "/api/images/a/overlay/7.png", None).await;
    assert_eq!(st, StatusCode::NOT_FOUND);
    let (st, _) = call(&s, "GET", "/api/images/zz/candidates", None).await;
    assert_eq!(st, StatusCode::NOT_FOUND);
    let (st, _) = call(&s, "GET", "/api/images/a/image.png", None).await;
    assert_eq!(st, StatusCode::OK);
}

#[tokio::test]
async fn click_outside_cluster_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let s = open(dir.path(), &["a"]);
    // cluster 0 is the left half; x = 50 is on the right
    let (st, body) = call(&s, "POST", "/api/images/a/selection", Some(json!({"cluster_id": 0, "x": 50, "y": 3}))).await;
    assert_eq!(st, StatusCode::UNPROCESSABLE_ENTITY);
    let err: ErrorBody = serde_json::from_slice(&body).unwrap();
    assert!(err.error.contains("outside cluster 0"), "{}", err.error);
    let (st, _) = call(&s, "POST", "/api/images/a/selection", Some(json!({"cluster_id": 9, "x": 1, "y": 1}))).await;
    assert_eq!(st, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(s.progress().selected, 0);
}

#[tokio::test]
async fn finalize_requires_every_image_and_is_idempotent() {
    let dir = tempfile::tempdir().unwrap();
    let s = open(dir.path(), &["a", "b"]);
    let (st, _) = call(&s, "POST", "/api/images/a/selection", Some(json!({"cluster_id": 1, "x": 40, "y": 10}))).await;
    assert_eq!(st, StatusCode::OK);

    let (st, body) = call(&s, "POST", "/api/finalize", None).await;
    assert_eq!(st, StatusCode::CONFLICT);
    let err: ErrorBody = serde_json::from_slice(&body).unwrap();
    assert_eq!(err.unselected, vec!["b".to_string()]);

    let (_, body) = call(&s, "GET", "/api/progress", None).await;
    let p: Progress = serde_json::from_slice(&body).unwrap();
    assert_eq!((p.selected, p.total, p.complete), (1, 2, false));

    call(&s, "POST", "/api/images/b/selection", Some(json!({"cluster_id": 0, "x": 3, "y": 60}))).await;
    let (st, _) = call(&s, "POST", "/api/finalize", None).await;
    assert_eq!(st, StatusCode::OK);
    let path = dir.path().join("selections.json");
    let first = std::fs::read(&path).unwrap();
    let rows: Vec<Selection> = serde_json::from_slice(&first).unwrap();
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[0], Selection { image_id: "a".into(), chosen_cluster_id: 1, click_x: 40, click_y: 10 });

    call(&s, "POST", "/api/finalize", None).await;
    assert_eq!(std::fs::read(&path).unwrap(), first);

    // re-selecting one image changes only its row
    call(&s, "POST", "/api/images/b/selection", Some(json!({"cluster_id": 0, "x": 5, "y": 5}))).await;
    call(&s, "POST", "/api/finalize", None).await;
    let after: Vec<Selection> = serde_json::from_slice(&std::fs::read(&path).unwrap()).unwrap();
    assert_eq!(after[0], rows[0]);
    assert_eq!((after[1].click_x, after[1].click_y, after[1].chosen_cluster_id), (5, 5, 0));
}

#[tokio::test]
async fn journal_survives_restart() {
    let dir = tempfile::tempdir().unwrap();
    {
        let s = open(dir.path(), &["a", "b"]);
        call(&s, "POST", "/api/images/a/selection", Some(json!({"cluster_id": 0, "x": 2, "y": 2}))).await;
        call(&s, "POST", "/api/images/a/selection", Some(json!({"cluster_id": 1, "x": 33, "y": 2}))).await;
    }
    // a torn final line from a crash is skipped
    let journal = dir.path().join("journal.jsonl");
    let mut text = std::fs::read_to_string(&journal).unwrap();
    text.push_str("{\"image_id\":\"b\",\"chos");
    std::fs::write(&journal, text).unwrap();

    let s = open(dir.path(), &["a", "b"]);
    let rec = s.selection("a").unwrap();
    assert_eq!((rec.chosen_cluster_id, rec.click.x), (1, 33));
    assert!(s.selection("b").is_none());
    let (_, body) = call(&s, "GET", "/api/images", None).await;
    let list: Vec<ImageSummary> = serde_json::from_slice(&body).unwrap();
    assert!(list[0].selected && !list[1].selected);
}

#[tokio::test]
async fn occupied_port_is_an_error() {
    let held = bind(0).await.unwrap();
    let port = held.local_addr().unwrap().port();
    assert!(matches!(bind(port).await, Err(ServerError::PortInUse { port: p }) if p == port));
}

#[tokio::test]
async fn root_serves_a_page() {
    let dir = tempfile::tempdir().unwrap();
    let s = open(dir.path(), &["a"]);
    let (st, body) = call(&s, "GET", "/", None).await;
    assert_eq!(st, StatusCode::OK);
    assert!(String::from_utf8(body).unwrap().contains("/api/images"));
}
