mod common;

use axum::body::Body;
use axum::http::{header, Method, Request, StatusCode};
use axum::Router;
use base64::Engine;
use ghnerf_cli::commands::{render, RenderArgs, RenderCameras};
use ghnerf_cli::scene::{CameraSpec, LayerData};
use ghnerf_cli::service::{meta, router, ErrorBody, Meta, ServiceConfig};
use ghnerf_cli::{RenderResponse, Scene};
use ghnerf_core::model::HumanSource;
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

fn app(scene: Scene) -> Router {
    router(scene, &ServiceConfig::default()).unwrap()
}

async fn send(app: &Router, req: Request<Body>) -> (StatusCode, axum::http::HeaderMap, Vec<u8>) {
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let headers = resp.headers().clone();
    let body = resp.into_body().collect().await.unwrap().to_bytes().to_vec();
    (status, headers, body)
}

fn post_json(body: impl Into<Body>) -> Request<Body> {
    Request::builder()
        .method(Method::POST)
        .uri("/render")
        .header(header::CONTENT_TYPE, "application/json")
        .body(body.into())
        .unwrap()
}

fn dataset_camera(scene: &Scene, i: usize) -> Value {
    serde_json::to_value(scene.dataset.cameras[i].to_record()).unwrap()
}

fn png_size(b64: &str) -> (u32, u32) {
    let bytes = base64::engine::general_purpose::STANDARD.decode(b64).unwrap();
    assert_eq!(&bytes[..8], b"\x89PNG\r\n\x1a\n");
    let w = u32::from_be_bytes(bytes[16..20].try_into().unwrap());
    let h = u32::from_be_bytes(bytes[20..24].try_into().unwrap());
    (w, h)
}

#[tokio::test]
async fn healthz_answers_ok() {
    let dir = tempfile::tempdir().unwrap();
    let app = app(common::scene_with(dir.path(), |_| {}));
    let (status, _, body) = send(&app, Request::get("/healthz").body(Body::empty()).unwrap()).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body, b"ok");
}

#[tokio::test]
async fn meta_describes_joints_subjects_and_cameras() {
    let dir = tempfile::tempdir().unwrap();
    let scene = common::scene_with(dir.path(), |_| {});
    let expected = meta(&scene);
    let app = app(scene);
    let (status, headers, body) = send(&app, Request::get("/meta").body(Body::empty()).unwrap()).await;
    assert_eq!(status, StatusCode::OK);
    assert!(headers[header::CONTENT_TYPE].to_str().unwrap().starts_with("application/json"));
    let raw: Value = serde_json::from_slice(&body).unwrap();
    assert_eq!(raw["J"], 14);
    assert_eq!(raw["joint_names"].as_array().unwrap().len(), 14);
    let m: Meta = serde_json::from_value(raw).unwrap();
    assert_eq!(m, expected);
    assert_eq!(m.subjects.len(), 2);
    assert_eq!(m.subjects.iter().filter(|s| s.held_out).count(), 1);
    assert_eq!(m.default_cameras.len(), 5);
    assert_eq!((m.image.default_width, m.image.default_height), (16, 16));
    assert!(m.torso_pair.0 < 14 && m.torso_pair.1 < 14);
}

#[tokio::test]
async fn render_returns_every_requested_layer() {
    let dir = tempfile::tempdir().unwrap();
    let scene = common::scene_with(dir.path(), |_| {});
    let cam = dataset_camera(&scene, 0);
    let app = app(scene);
    let req = json!({
        "camera": cam, "width": 12, "height": 10,
        "layers": ["rgb", "depth", "heatmap:3", "keypoints"],
    });
    let (status, _, body) = send(&app, post_json(req.to_string())).await;
    assert_eq!(status, StatusCode::OK, "{}", String::from_utf8_lossy(&body));
    let resp: RenderResponse = serde_json::from_slice(&body).unwrap();
    assert_eq!((resp.width, resp.height), (12, 10));
    assert!(resp.errors.is_empty());
    assert_eq!(resp.layers.len(), 4);
    for name in ["rgb", "depth", "heatmap:3"] {
        match &resp.layers[name] {
            LayerData::Png(s) => assert_eq!(png_size(s), (12, 10)),
            other => panic!("{name} is {other:?}"),
        }
    }
    let LayerData::Keypoints(kps) = &resp.layers["keypoints"] else {
        panic!("keypoints layer is not a list")
    };
    for k in kps {
        assert!(k.id < 14);
        assert!(!k.name.is_empty());
        assert!((0.0..=1.0).contains(&k.confidence));
    }
    assert!(resp.render_ms >= 0.0);
}

#[tokio::test]
async fn look_at_camera_is_accepted() {
    let dir = tempfile::tempdir().unwrap();
    let app = app(common::scene_with(dir.path(), |_| {}));
    let req = json!({
        "camera": {"position": [0.0, 1.0, 3.0], "look_at": [0.0, 1.0, 0.0], "fov_deg": 40.0},
        "width": 8, "height": 8, "subject": 1, "frame": 0, "source_views": [0, 2],
    });
    let (status, _, body) = send(&app, post_json(req.to_string())).await;
    assert_eq!(status, StatusCode::OK, "{}", String::from_utf8_lossy(&body));
    let resp: RenderResponse = serde_json::from_slice(&body).unwrap();
    assert_eq!(resp.layers.keys().collect::<Vec<_>>(), ["rgb"]);
}

async fn expect_400(app: &Router, body: String) -> ErrorBody {
    let (status, _, bytes) = send(app, post_json(body)).await;
    assert_eq!(status, StatusCode::BAD_REQUEST, "{}", String::from_utf8_lossy(&bytes));
    serde_json::from_slice(&bytes).unwrap()
}

#[tokio::test]
async fn malformed_requests_are_400_with_the_offending_input_named() {
    let dir = tempfile::tempdir().unwrap();
    let scene = common::scene_with(dir.path(), |_| {});
    let cam = dataset_camera(&scene, 0);
    let app = app(scene);

    let e = expect_400(&app, json!({"camera": cam, "width": 8, "height": 8, "layers": ["rgb", "normals"]}).to_string()).await;
    assert_eq!(e.field.as_deref(), Some("layers"));
    assert!(e.error.contains("normals"), "{}", e.error);

    let e = expect_400(&app, json!({"camera": cam, "width": 8, "height": 8, "layers": ["heatmap:14"]}).to_string()).await;
    assert!(e.error.contains("heatmap:14"), "{}", e.error);

    let e = expect_400(&app, json!({"camera": cam, "width": 8, "height": 8, "frame": 9}).to_string()).await;
    assert_eq!(e.field.as_deref(), Some("frame"));

    let e = expect_400(&app, json!({"camera": cam, "width": 8, "height": 8, "source_views": [99]}).to_string()).await;
    assert_eq!(e.field.as_deref(), Some("source_views"));

    let e = expect_400(&app, json!({"camera": cam, "width": 0, "height": 8}).to_string()).await;
    assert_eq!(e.field.as_deref(), Some("width"));

    let e = expect_400(&app, json!({"camera": cam, "width": 8, "height": 8, "colour": true}).to_string()).await;
    assert!(e.error.contains("colour"), "{}", e.error);

    let e = expect_400(
        &app,
        json!({"camera": {"position": [0.0, 1.0, 0.0], "look_at": [0.0, 1.0, 0.0], "fov_deg": 40.0}, "width": 8, "height": 8})
            .to_string(),
    )
    .await;
    assert_eq!(e.field.as_deref(), Some("camera"));

    expect_400(&app, "{\"camera\":".into()).await;
}

#[tokio::test]
async fn oversized_images_and_bodies_are_413() {
    let dir = tempfile::tempdir().unwrap();
    let scene = common::scene_with(dir.path(), |_| {});
    let cam = dataset_camera(&scene, 0);
    let app = app(scene);
    let (status, _, body) = send(&app, post_json(json!({"camera": cam, "width": 129, "height": 128}).to_string())).await;
    assert_eq!(status, StatusCode::PAYLOAD_TOO_LARGE);
    let e: ErrorBody = serde_json::from_slice(&body).unwrap();
    assert!(e.error.contains("129x128"), "{}", e.error);

    let padding = " ".repeat(2 << 20);
    let huge = format!("{{\"camera\": {cam}, \"width\": 8, \"height\": 8{padding}}}");
    let (status, _, _) = send(&app, post_json(huge)).await;
    assert_eq!(status, StatusCode::PAYLOAD_TOO_LARGE);
}

#[tokio::test]
async fn render_failures_inside_the_model_are_500() {
    let dir = tempfile::tempdir().unwrap();
    let mut scene = common::scene_with(dir.path(), |m| m.human = HumanSource::External);
    for frame in &mut scene.dataset.frames {
        for view in &mut frame.views {
            view.features = None;
        }
    }
    let cam = dataset_camera(&scene, 0);
    let app = app(scene);
    let (status, _, body) = send(&app, post_json(json!({"camera": cam, "width": 8, "height": 8}).to_string())).await;
    assert_eq!(status, StatusCode::INTERNAL_SERVER_ERROR);
    let e: ErrorBody = serde_json::from_slice(&body).unwrap();
    assert!(e.error.contains("external features"), "{}", e.error);
}

#[tokio::test]
async fn cors_preflight_and_simple_requests_carry_allow_origin() {
    let dir = tempfile::tempdir().unwrap();
    let app = app(common::scene_with(dir.path(), |_| {}));
    let preflight = Request::builder()
        .method(Method::OPTIONS)
        .uri("/render")
        .header(header::ORIGIN, "http://localhost:5173")
        .header(header::ACCESS_CONTROL_REQUEST_METHOD, "POST")
        .header(header::ACCESS_CONTROL_REQUEST_HEADERS, "content-type")
        .body(Body::empty())
        .unwrap();
    let (status, headers, _) = send(&app, preflight).await;
    assert!(status.is_success());
    assert_eq!(headers[header::ACCESS_CONTROL_ALLOW_ORIGIN], "*");
    let allowed = headers[header::ACCESS_CONTROL_ALLOW_METHODS].to_str().unwrap().to_string();
    assert!(allowed.contains("POST"), "{allowed}");

    let get = Request::get("/meta").header(header::ORIGIN, "http://example.test").body(Body::empty()).unwrap();
    let (_, headers, _) = send(&app, get).await;
    assert_eq!(headers[header::ACCESS_CONTROL_ALLOW_ORIGIN], "*");
}

#[tokio::test]
async fn cors_can_be_pinned_to_one_origin() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ServiceConfig {
        cors_origin: Some("http://viewer.test".into()),
        workers: 1,
    };
    let app = router(common::scene_with(dir.path(), |_| {}), &cfg).unwrap();
    let ok = Request::get("/meta").header(header::ORIGIN, "http://viewer.test").body(Body::empty()).unwrap();
    let (_, headers, _) = send(&app, ok).await;
    assert_eq!(headers[header::ACCESS_CONTROL_ALLOW_ORIGIN], "http://viewer.test");
    let other = Request::get("/meta").header(header::ORIGIN, "http://evil.test").body(Body::empty()).unwrap();
    let (_, headers, _) = send(&app, other).await;
    assert!(headers.get(header::ACCESS_CONTROL_ALLOW_ORIGIN).is_none());
}

#[tokio::test]
async fn service_and_render_command_produce_identical_pixels() {
    let dir = tempfile::tempdir().unwrap();
    let scene = common::scene_with(dir.path(), |_| {});
    let out = tempfile::tempdir().unwrap();
    let args = RenderArgs {
        cameras: RenderCameras::Dataset(1),
        width: 16,
        height: 16,
        subject: 0,
        frame: 0,
        fov_deg: 40.0,
    };
    let stems = render(&scene, &args, out.path()).unwrap();
    assert_eq!(stems, ["view"]);
    for suffix in [".rgb.png", ".depth.png", ".heatmaps.png", ".keypoints.png", ".heat.ghtf", ".keypoints.json"] {
        assert!(out.path().join(format!("view{suffix}")).is_file(), "missing {suffix}");
    }
    let file_png = std::fs::read(out.path().join("view.rgb.png")).unwrap();
    let file_kps: Value = serde_json::from_slice(&std::fs::read(out.path().join("view.keypoints.json")).unwrap()).unwrap();

    let cam = dataset_camera(&scene, 1);
    let app = app(scene);
    let req = json!({"camera": cam, "width": 16, "height": 16, "layers": ["rgb", "keypoints"]});
    let (status, _, body) = send(&app, post_json(req.to_string())).await;
    assert_eq!(status, StatusCode::OK);
    let resp: Value = serde_json::from_slice(&body).unwrap();
    let served = base64::engine::general_purpose::STANDARD
        .decode(resp["layers"]["rgb"].as_str().unwrap())
        .unwrap();
    assert_eq!(served, file_png);
    assert_eq!(resp["layers"]["keypoints"], file_kps);
}

#[test]
fn orbit_render_writes_one_set_per_camera() {
    let dir = tempfile::tempdir().unwrap();
    let scene = common::scene_with(dir.path(), |_| {});
    let out = tempfile::tempdir().unwrap();
    let args = RenderArgs {
        cameras: RenderCameras::Orbit(3),
        width: 8,
        height: 8,
        subject: 1,
        frame: 0,
        fov_deg: 40.0,
    };
    let stems = render(&scene, &args, out.path()).unwrap();
    assert_eq!(stems, ["orbit_000", "orbit_001", "orbit_002"]);
    let spec = RenderArgs {
        cameras: RenderCameras::Spec(CameraSpec::LookAt {
            position: [2.0, 1.0, 2.0],
            look_at: [0.0, 1.0, 0.0],
            up: [0.0, 1.0, 0.0],
            fov_deg: 50.0,
        }),
        ..args
    };
    assert_eq!(render(&scene, &spec, out.path()).unwrap(), ["view"]);
}
