//! HTTP render service consumed by the browser viewer.

use std::sync::Arc;

use axum::extract::rejection::JsonRejection;
use axum::extract::{DefaultBodyLimit, State};
use axum::http::{HeaderValue, Method, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use ghnerf_core::geometry::{Aabb, CameraRecord};
use serde::{Deserialize, Serialize};
use tokio::sync::Semaphore;
use tower_http::cors::{AllowOrigin, CorsLayer};

use crate::scene::{RenderRequest, RequestError, Scene};

#[derive(Debug, Clone)]
pub struct ServiceConfig {
    /// Allowed CORS origin; `None` allows any.
    pub cors_origin: Option<String>,
    /// Renders allowed to run at once.
    pub workers: usize,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            cors_origin: None,
            workers: 2,
        }
    }
}

struct AppState {
    scene: Scene,
    permits: Semaphore,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectMeta {
    pub id: usize,
    pub name: String,
    pub held_out: bool,
    pub frames: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageLimits {
    pub max_pixels: u64,
    pub default_width: u32,
    pub default_height: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Meta {
    #[serde(rename = "J")]
    pub num_joints: usize,
    pub joint_names: Vec<String>,
    pub torso_pair: (usize, usize),
    pub subjects: Vec<SubjectMeta>,
    pub scene_box: Aabb,
    pub default_cameras: Vec<CameraRecord>,
    pub image: ImageLimits,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub field: Option<String>,
}

fn error_response(status: StatusCode, error: String, field: Option<String>) -> Response {
    (status, Json(ErrorBody { error, field })).into_response()
}

impl IntoResponse for RequestError {
    fn into_response(self) -> Response {
        match self {
            RequestError::Invalid { field, message } => {
                error_response(StatusCode::BAD_REQUEST, format!("{field}: {message}"), Some(field))
            }
            RequestError::TooLarge(msg) => error_response(StatusCode::PAYLOAD_TOO_LARGE, msg, Some("width".into())),
            RequestError::Render(e) => error_response(StatusCode::INTERNAL_SERVER_ERROR, format!("render failed: {e}"), None),
        }
    }
}

pub fn meta(scene: &Scene) -> Meta {
    let m = &scene.dataset.manifest;
    Meta {
        num_joints: m.num_joints,
        joint_names: m.joint_names.clone(),
        torso_pair: m.torso_pair,
        subjects: m
            .subjects
            .iter()
            .enumerate()
            .map(|(id, s)| SubjectMeta {
                id,
                name: s.name.clone(),
                held_out: s.held_out,
                frames: s.frames.iter().map(|f| f.index).collect(),
            })
            .collect(),
        scene_box: m.scene_box,
        default_cameras: m.cameras.iter().map(|c| c.camera.clone()).collect(),
        image: ImageLimits {
            max_pixels: scene.max_pixels,
            default_width: m.width,
            default_height: m.height,
        },
    }
}

async fn get_meta(State(state): State<Arc<AppState>>) -> Json<Meta> {
    Json(meta(&state.scene))
}

async fn healthz() -> &'static str {
    "ok"
}

async fn post_render(State(state): State<Arc<AppState>>, body: Result<Json<RenderRequest>, JsonRejection>) -> Response {
    let req = match body {
        Ok(Json(r)) => r,
        Err(rej) => {
            let status = match rej.status() {
                StatusCode::PAYLOAD_TOO_LARGE => StatusCode::PAYLOAD_TOO_LARGE,
                _ => StatusCode::BAD_REQUEST,
            };
            return error_response(status, rej.body_text(), None);
        }
    };
    let _permit = match state.permits.acquire().await {
        Ok(p) => p,
        Err(_) => return error_response(StatusCode::INTERNAL_SERVER_ERROR, "service is shutting down".into(), None),
    };
    let worker = Arc::clone(&state);
    match tokio::task::spawn_blocking(move || worker.scene.handle(&req)).await {
        Ok(Ok(resp)) => Json(resp).into_response(),
        Ok(Err(e)) => e.into_response(),
        Err(e) => error_response(StatusCode::INTERNAL_SERVER_ERROR, format!("render task failed: {e}"), None),
    }
}

pub fn router(scene: Scene, config: &ServiceConfig) -> anyhow::Result<Router> {
    let origin = match &config.cors_origin {
        None => AllowOrigin::any(),
        Some(o) => {
            let allowed = HeaderValue::from_str(o)?;
            AllowOrigin::predicate(move |origin, _| *origin == allowed)
        }
    };
    let cors = CorsLayer::new()
        .allow_origin(origin)
        .allow_methods([Method::GET, Method::POST, Method::OPTIONS])
        .allow_headers([axum::http::header::CONTENT_TYPE]);
    let state = Arc::new(AppState {
        scene,
        permits: Semaphore::new(config.workers.max(1)),
    });
    Ok(Router::new()
        .route("/meta", get(get_meta))
        .route("/healthz", get(healthz))
        .route("/render", post(post_render))
        .layer(DefaultBodyLimit::max(1 << 20))
        .layer(cors)
        .with_state(state))
}

/// Serve until Ctrl-C; in-flight renders finish before returning.
pub async fn serve(scene: Scene, bind: &str, config: &ServiceConfig) -> anyhow::Result<()> {
    let app = router(scene, config)?;
    let listener = tokio::net::TcpListener::bind(bind).await?;
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, app)
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}
