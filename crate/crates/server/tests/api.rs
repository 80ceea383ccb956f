use axum::body::Body;
use axum::http::{Request, StatusCode};
use base64::engine::general_purpose::{STANDARD, URL_SAFE_NO_PAD};
use base64::Engine;
use eraser_core::clients::{ClientError, SegmenterClient};
use eraser_core::panoptic::{Segment, SegmentKind, SegmentRecord};
use eraser_core::raster::{decode_png, encode_png, Mask, Rgb8Image};
use eraser_core::rle::Rle;
use eraser_core::service::{EraseConfig, Eraser, EraserClients, EraserModel, JobService, ServiceOptions};
use eraser_core::toy::{toy_panoptic_scene, toy_scene, PaletteSegmenter};
use eraser_core::tuning::ToyUnetConfig;
use eraser_server::{router, AppState};
use http_body_util::BodyExt;
use image::Rgb;
use serde_json::{json, Value};
use std::sync::Arc;
use std::time::Duration;
use tower::ServiceExt;

struct Harness {
    app: axum::Router,
    jobs: Arc<JobService>,
    _dir: tempfile::TempDir,
}

fn harness_with(segmenter: Arc<dyn SegmenterClient>, opts: ServiceOptions) -> Harness {
    let dir = tempfile::tempdir().unwrap();
    let eraser = Eraser::new(EraserModel::toy(ToyUnetConfig::default(), 0), EraserClients::toy());
    let jobs = Arc::new(JobService::open(eraser, dir.path(), opts).unwrap());
    let app = router(AppState { jobs: jobs.clone(), segmenter });
    Harness { app, jobs, _dir: dir }
}

fn harness() -> Harness {
    harness_with(Arc::new(PaletteSegmenter::default()), ServiceOptions::default())
}

async fn call(app: &axum::Router, req: Request<Body>) -> (StatusCode, Value) {
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    let body = if bytes.is_empty() { Value::Null } else { serde_json::from_slice(&bytes).unwrap() };
    (status, body)
}

fn get(uri: &str) -> Request<Body> {
    Request::get(uri).body(Body::empty()).unwrap()
}

fn post_json(uri: &str, body: &Value) -> Request<Body> {
    Request::post(uri)
        .header("content-type", "application/json")
        .body(Body::from(serde_json::to_vec(body).unwrap()))
        .unwrap()
}

fn segments_uri(img: &Rgb8Image) -> String {
    format!("/v1/segments?image={}", URL_SAFE_NO_PAD.encode(encode_png(img).unwrap()))
}

fn erase_body(img: &Rgb8Image, mask: &Mask, config: &EraseConfig) -> Value {
    json!({
        "image_b64": STANDARD.encode(encode_png(img).unwrap()),
        "mask_rle": Rle::encode(mask),
        "config": config,
    })
}

fn fast_config() -> EraseConfig {
    EraseConfig { inference_steps: 10, ..Default::default() }
}

#[tokio::test]
async fn healthz_reports_ok() {
    let h = harness();
    let (status, body) = call(&h.app, get("/v1/healthz")).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body["status"], "ok");
    assert_eq!(body["queued"], 0);
}

#[tokio::test]
async fn uniform_image_is_one_stuff_segment() {
    let h = harness();
    let img = Rgb8Image::from_pixel(20, 12, Rgb([60, 150, 50]));
    let (status, body) = call(&h.app, get(&segments_uri(&img))).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!((body["width"].as_u64(), body["height"].as_u64()), (Some(20), Some(12)));
    let segs: Vec<SegmentRecord> = serde_json::from_value(body["segments"].clone()).unwrap();
    assert_eq!(segs.len(), 1);
    assert_eq!(segs[0].kind, SegmentKind::Stuff);
    assert_eq!(segs[0].category, "grass");
    assert_eq!(segs[0].rle_mask.area(), 240);
}

#[tokio::test]
async fn segments_tile_the_image_and_match_the_segmenter() {
    let h = harness();
    for seed in 0..4 {
        let scene = toy_panoptic_scene(seed, 48, 40);
        let (status, body) = call(&h.app, get(&segments_uri(&scene.image))).await;
        assert_eq!(status, StatusCode::OK);
        let records: Vec<SegmentRecord> = serde_json::from_value(body["segments"].clone()).unwrap();
        let decoded: Vec<Segment> = records.iter().map(|r| Segment::try_from(r).unwrap()).collect();
        // every pixel owned by exactly one segment
        let mut owners = vec![0u32; 48 * 40];
        for s in &decoded {
            for (o, &v) in owners.iter_mut().zip(s.mask.data()) {
                *o += v as u32;
            }
        }
        assert!(owners.iter().all(|&o| o == 1), "seed {seed}");
        assert_eq!(decoded, scene.segments, "seed {seed}");
    }
}

#[tokio::test]
async fn segments_accepts_standard_alphabet() {
    let h = harness();
    let img = toy_scene(3, 16, 16);
    let encoded = STANDARD.encode(encode_png(&img).unwrap());
    // percent-encode the characters a query string would otherwise mangle
    let query = encoded.replace('+', "%2B").replace('/', "%2F").replace('=', "%3D");
    let (status, _) = call(&h.app, get(&format!("/v1/segments?image={query}"))).await;
    assert_eq!(status, StatusCode::OK);
}

#[tokio::test]
async fn segments_bad_payloads() {
    let h = harness();
    let (status, body) = call(&h.app, get("/v1/segments?image=not-a-png")).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_eq!(body["error"], "BadRequest");
    let (status, _) = call(&h.app, get("/v1/segments")).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
}

struct Offline;
impl SegmenterClient for Offline {
    fn panoptic(&self, _: &Rgb8Image) -> Result<Vec<Segment>, ClientError> {
        Err(ClientError::Unavailable("no backend".into()))
    }
}

#[tokio::test]
async fn segmenter_outage_is_503() {
    let h = harness_with(Arc::new(Offline), ServiceOptions::default());
    let img = toy_scene(0, 16, 16);
    let (status, body) = call(&h.app, get(&segments_uri(&img))).await;
    assert_eq!(status, StatusCode::SERVICE_UNAVAILABLE);
    assert_eq!(body["error"], "SegmenterUnavailable");
}

#[tokio::test]
async fn erase_then_poll_until_done() {
    let h = harness();
    let img = toy_scene(5, 64, 64);
    let mask = Mask::from_fn(64, 64, |y, x| (20..40).contains(&y) && (24..44).contains(&x));
    let cfg = fast_config();
    let (status, body) = call(&h.app, post_json("/v1/erase", &erase_body(&img, &mask, &cfg))).await;
    assert_eq!(status, StatusCode::ACCEPTED);
    let id = body["job_id"].as_str().unwrap().to_string();
    assert!(matches!(body["status"].as_str(), Some("queued" | "running" | "done")));

    let jobs = h.jobs.clone();
    let idle = tokio::task::spawn_blocking(move || jobs.wait_idle(Duration::from_secs(120))).await.unwrap();
    assert!(idle);
    let (status, job) = call(&h.app, get(&format!("/v1/jobs/{id}"))).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(job["id"], id.as_str());
    assert_eq!(job["status"], "done");
    assert_eq!(job["config"]["inference_steps"], 10);
    assert!(job["timings"]["run_ms"].is_u64());

    let result = decode_png(&STANDARD.decode(job["result_b64"].as_str().unwrap()).unwrap()).unwrap();
    let direct = h.jobs.eraser().erase(&img, &mask, &cfg).unwrap();
    assert_eq!(result, direct);
}

#[tokio::test]
async fn queued_job_has_no_result() {
    let h = harness_with(
        Arc::new(PaletteSegmenter::default()),
        ServiceOptions { start_paused: true, ..Default::default() },
    );
    let img = toy_scene(1, 32, 32);
    let mask = Mask::from_fn(32, 32, |y, x| y < 8 && x < 8);
    let (_, body) = call(&h.app, post_json("/v1/erase", &erase_body(&img, &mask, &fast_config()))).await;
    assert_eq!(body["status"], "queued");
    let (status, job) = call(&h.app, get(&format!("/v1/jobs/{}", body["job_id"].as_str().unwrap()))).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(job["status"], "queued");
    assert!(job.get("result_b64").is_none());
    let (_, health) = call(&h.app, get("/v1/healthz")).await;
    assert_eq!(health["queued"], 1);
}

#[tokio::test]
async fn unknown_job_is_404() {
    let h = harness();
    let (status, body) = call(&h.app, get("/v1/jobs/job-99999999")).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    assert_eq!(body["error"], "NotFound");
}

#[tokio::test]
async fn empty_mask_is_422() {
    let h = harness();
    let img = toy_scene(2, 32, 32);
    let (status, body) = call(&h.app, post_json("/v1/erase", &erase_body(&img, &Mask::zeros(32, 32), &fast_config()))).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(body["error"], "EmptyMask");
    assert!(h.jobs.list().is_empty());
}

#[tokio::test]
async fn invalid_config_and_shape_are_422() {
    let h = harness();
    let img = toy_scene(2, 32, 32);
    let mask = Mask::ones(32, 32);
    let bad = EraseConfig { strength: 1.5, ..Default::default() };
    let (status, body) = call(&h.app, post_json("/v1/erase", &erase_body(&img, &mask, &bad))).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(body["error"], "InvalidConfig");
    let (status, body) = call(&h.app, post_json("/v1/erase", &erase_body(&img, &Mask::ones(16, 32), &fast_config()))).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(body["error"], "ShapeMismatch");
}

#[tokio::test]
async fn malformed_requests_are_400() {
    let h = harness();
    let body = json!({ "image_b64": "@@@", "mask_rle": { "height": 1, "width": 1, "counts": [0, 1] } });
    let (status, _) = call(&h.app, post_json("/v1/erase", &body)).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);

    let img = toy_scene(2, 8, 8);
    let body = json!({
        "image_b64": STANDARD.encode(encode_png(&img).unwrap()),
        "mask_rle": { "height": 8, "width": 8, "counts": [3, 4] },
    });
    let (status, body) = call(&h.app, post_json("/v1/erase", &body)).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert!(body["message"].as_str().unwrap().contains("mask_rle"));
}

#[tokio::test]
async fn full_queue_is_429() {
    let h = harness_with(
        Arc::new(PaletteSegmenter::default()),
        ServiceOptions { capacity: 1, start_paused: true, ..Default::default() },
    );
    let img = toy_scene(4, 16, 16);
    let mask = Mask::ones(16, 16);
    let (status, _) = call(&h.app, post_json("/v1/erase", &erase_body(&img, &mask, &fast_config()))).await;
    assert_eq!(status, StatusCode::ACCEPTED);
    let (status, body) = call(&h.app, post_json("/v1/erase", &erase_body(&img, &mask, &fast_config()))).await;
    assert_eq!(status, StatusCode::TOO_MANY_REQUESTS);
    assert_eq!(body["error"], "QueueFull");
}
