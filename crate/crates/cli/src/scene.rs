//! A loaded checkpoint plus dataset, and the render path shared by the
//! `render` command and the HTTP service.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use base64::Engine;
use ghnerf_core::geometry::{Camera, CameraRecord, Vec3};
use ghnerf_core::imaging::{colormap, RgbImage};
use ghnerf_core::keypoints::{extract_keypoints_2d, ExtractionParams, JointSet2D};
use ghnerf_core::model::{Model, RenderOutput, SamplingMode};
use ghnerf_core::synthdata::Dataset;
use ghnerf_core::trainer::{load_checkpoint, render_frame_view};
use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum RequestError {
    #[error("{field}: {message}")]
    Invalid { field: String, message: String },
    #[error("{0}")]
    TooLarge(String),
    #[error("render failed: {0}")]
    Render(#[from] ghnerf_core::Error),
}

fn invalid(field: &str, message: impl Into<String>) -> RequestError {
    RequestError::Invalid {
        field: field.to_string(),
        message: message.into(),
    }
}

/// Camera given either by a look-at rig or as a full record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum CameraSpec {
    LookAt {
        position: [f64; 3],
        look_at: [f64; 3],
        #[serde(default = "default_up")]
        up: [f64; 3],
        fov_deg: f64,
    },
    Record(CameraRecord),
}

fn default_up() -> [f64; 3] {
    [0.0, 1.0, 0.0]
}

fn default_layers() -> Vec<String> {
    vec!["rgb".into()]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RenderRequest {
    pub camera: CameraSpec,
    pub width: u32,
    pub height: u32,
    #[serde(default = "default_layers")]
    pub layers: Vec<String>,
    #[serde(default)]
    pub subject: usize,
    #[serde(default)]
    pub frame: usize,
    /// Camera indices to condition on; nearest training cameras when
    /// absent.
    #[serde(default)]
    pub source_views: Option<Vec<usize>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Layer {
    Rgb,
    Depth,
    Heatmap(usize),
    Keypoints,
}

impl Layer {
    pub fn parse(name: &str, joints: usize) -> Result<Layer, RequestError> {
        match name {
            "rgb" => Ok(Layer::Rgb),
            "depth" => Ok(Layer::Depth),
            "keypoints" => Ok(Layer::Keypoints),
            _ => {
                let j = name
                    .strip_prefix("heatmap:")
                    .and_then(|s| s.parse::<usize>().ok())
                    .ok_or_else(|| invalid("layers", format!("unknown layer {name:?}")))?;
                if j >= joints {
                    return Err(invalid("layers", format!("layer {name:?}: joint {j} out of range (J = {joints})")));
                }
                Ok(Layer::Heatmap(j))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Keypoint {
    pub id: usize,
    pub name: String,
    pub u: f64,
    pub v: f64,
    pub confidence: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum LayerData {
    /// Base64-encoded PNG.
    Png(String),
    Keypoints(Vec<Keypoint>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RenderResponse {
    pub width: u32,
    pub height: u32,
    pub layers: BTreeMap<String, LayerData>,
    /// Per-layer failures; a layer appears in exactly one of the maps.
    pub errors: BTreeMap<String, String>,
    pub render_ms: f64,
}

/// Result of rendering one camera, before encoding.
#[derive(Debug, Clone)]
pub struct RenderedView {
    pub camera: Camera,
    pub output: RenderOutput,
    pub keypoints: JointSet2D,
}

pub struct Scene {
    pub model: Model<f32>,
    pub dataset: Dataset,
    pub source_views: usize,
    pub mode: SamplingMode,
    pub extraction: ExtractionParams,
    /// Largest accepted `width · height`.
    pub max_pixels: u64,
}

impl Scene {
    pub fn load(checkpoint: &Path, dataset: &Path) -> anyhow::Result<Self> {
        let ckpt = load_checkpoint(checkpoint)
            .map_err(|e| anyhow::anyhow!("loading checkpoint {}: {e}", checkpoint.display()))?;
        let dataset = Dataset::open(dataset).map_err(|e| anyhow::anyhow!("opening dataset {}: {e}", dataset.display()))?;
        let model = ckpt.model()?;
        if model.heat_channels() != dataset.num_joints() {
            anyhow::bail!(ghnerf_core::Error::Incompatible(format!(
                "checkpoint renders {} heatmaps, dataset has {} joints",
                model.heat_channels(),
                dataset.num_joints()
            )));
        }
        Ok(Self::new(model, dataset))
    }

    pub fn new(model: Model<f32>, dataset: Dataset) -> Self {
        Self {
            model,
            dataset,
            source_views: 3,
            mode: SamplingMode::Guided,
            extraction: ExtractionParams::default(),
            max_pixels: 128 * 128,
        }
    }

    pub fn joint_names(&self) -> &[String] {
        &self.dataset.manifest.joint_names
    }

    pub fn camera_for(&self, req: &RenderRequest) -> Result<Camera, RequestError> {
        if req.width == 0 || req.height == 0 {
            return Err(invalid("width", "width and height must be positive"));
        }
        if req.width as u64 * req.height as u64 > self.max_pixels {
            return Err(RequestError::TooLarge(format!(
                "{}x{} exceeds the budget of {} pixels",
                req.width, req.height, self.max_pixels
            )));
        }
        match &req.camera {
            CameraSpec::LookAt {
                position,
                look_at,
                up,
                fov_deg,
            } => Camera::look_at(Vec3(*position), Vec3(*look_at), Vec3(*up), *fov_deg, req.width, req.height)
                .map_err(|e| invalid("camera", e.to_string())),
            CameraSpec::Record(rec) => {
                let cam = Camera::try_from(rec).map_err(|e| invalid("camera", e.to_string()))?;
                if (cam.width(), cam.height()) == (req.width, req.height) {
                    Ok(cam)
                } else {
                    cam.resized(req.width, req.height).map_err(|e| invalid("camera", e.to_string()))
                }
            }
        }
    }

    pub fn render(&self, req: &RenderRequest) -> Result<RenderedView, RequestError> {
        let camera = self.camera_for(req)?;
        let index = self
            .dataset
            .frames
            .iter()
            .position(|f| f.subject == req.subject && f.frame == req.frame)
            .ok_or_else(|| invalid("frame", format!("no frame {} for subject {}", req.frame, req.subject)))?;
        let frame = &self.dataset.frames[index];
        if let Some(src) = &req.source_views {
            if src.is_empty() {
                return Err(invalid("source_views", "at least one source view is required"));
            }
            if let Some(bad) = src.iter().find(|&&c| c >= self.dataset.cameras.len()) {
                return Err(invalid("source_views", format!("unknown camera {bad}")));
            }
        }
        let output = render_frame_view(
            &self.model,
            &self.dataset,
            frame,
            &camera,
            req.source_views.as_deref(),
            self.source_views,
            self.mode,
        )?;
        let keypoints = extract_keypoints_2d(&output.heatmaps, &self.extraction)?.joints;
        Ok(RenderedView {
            camera,
            output,
            keypoints,
        })
    }

    pub fn keypoint_list(&self, joints: &JointSet2D) -> Vec<Keypoint> {
        joints
            .joints
            .iter()
            .enumerate()
            .filter_map(|(id, j)| {
                j.map(|j| Keypoint {
                    id,
                    name: self.joint_names().get(id).cloned().unwrap_or_default(),
                    u: j.u,
                    v: j.v,
                    confidence: j.confidence,
                })
            })
            .collect()
    }

    /// Validate, render and encode every requested layer.
    pub fn handle(&self, req: &RenderRequest) -> Result<RenderResponse, RequestError> {
        let start = Instant::now();
        let joints = self.dataset.num_joints();
        if req.layers.is_empty() {
            return Err(invalid("layers", "no layers requested"));
        }
        let layers: Vec<(String, Layer)> = req
            .layers
            .iter()
            .map(|n| Layer::parse(n, joints).map(|l| (n.clone(), l)))
            .collect::<Result<_, _>>()?;
        let view = self.render(req)?;
        let mut out = BTreeMap::new();
        let mut errors = BTreeMap::new();
        for (name, layer) in layers {
            let data = match layer {
                Layer::Rgb => Ok(LayerData::Png(b64(&view.output.rgb.to_png_bytes()))),
                Layer::Depth => Ok(LayerData::Png(b64(&depth_image(&view.output).to_png_bytes()))),
                Layer::Heatmap(j) => heatmap_image(&view.output, j).map(|img| LayerData::Png(b64(&img.to_png_bytes()))),
                Layer::Keypoints => Ok(LayerData::Keypoints(self.keypoint_list(&view.keypoints))),
            };
            match data {
                Ok(d) => {
                    out.insert(name, d);
                }
                Err(e) => {
                    errors.insert(name, e.to_string());
                }
            }
        }
        Ok(RenderResponse {
            width: req.width,
            height: req.height,
            layers: out,
            errors,
            render_ms: start.elapsed().as_secs_f64() * 1e3,
        })
    }
}

fn b64(bytes: &[u8]) -> String {
    base64::engine::general_purpose::STANDARD.encode(bytes)
}

/// Colormapped depth, normalised over the foreground; background black.
pub fn depth_image(out: &RenderOutput) -> RgbImage {
    let (w, h) = (out.rgb.width, out.rgb.height);
    let fg: Vec<f32> = (0..w * h).filter(|&i| out.mask.data[i] == 255).map(|i| out.depth[i]).collect();
    let lo = fg.iter().copied().fold(f32::INFINITY, f32::min);
    let hi = fg.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let span = (hi - lo).max(1e-6);
    let mut img = RgbImage::black(w, h);
    for i in 0..w * h {
        if out.mask.data[i] == 255 {
            img.set_pixel(i % w, i / w, colormap(1.0 - (out.depth[i] - lo) / span));
        }
    }
    img
}

pub fn heatmap_image(out: &RenderOutput, j: usize) -> ghnerf_core::Result<RgbImage> {
    let hm = &out.heatmaps;
    if j >= hm.channels {
        return Err(ghnerf_core::Error::Argument(format!("heatmap channel {j} of {}", hm.channels)));
    }
    let (w, h) = (hm.width, hm.height);
    let mut img = RgbImage::black(w, h);
    for (i, v) in hm.channel(j).iter().enumerate() {
        img.set_pixel(i % w, i / w, colormap(*v));
    }
    Ok(img)
}

/// RGB blended with the colormapped per-pixel maximum over all heatmap
/// channels, using the heat value as opacity.
pub fn heatmap_overlay(out: &RenderOutput) -> RgbImage {
    let hm = &out.heatmaps;
    let (w, h) = (hm.width, hm.height);
    let mut img = out.rgb.clone();
    for i in 0..w * h {
        let m = (0..hm.channels).map(|c| hm.data[c * w * h + i]).fold(0.0f32, f32::max);
        let a = m.clamp(0.0, 1.0);
        let base = out.rgb.pixel(i % w, i / w);
        let c = colormap(m);
        img.set_pixel(i % w, i / w, [0, 1, 2].map(|k| base[k] * (1.0 - a) + c[k] * a));
    }
    img
}

/// RGB with a small cross at each detected joint.
pub fn keypoint_image(out: &RenderOutput, joints: &JointSet2D) -> RgbImage {
    let mut img = out.rgb.clone();
    let (w, h) = (img.width as i64, img.height as i64);
    for (id, j) in joints.joints.iter().enumerate() {
        let Some(j) = j else { continue };
        let color = colormap(id as f32 / joints.len().max(1) as f32);
        let (cx, cy) = (j.u.floor() as i64, j.v.floor() as i64);
        for d in -1..=1i64 {
            for (x, y) in [(cx + d, cy), (cx, cy + d)] {
                if (0..w).contains(&x) && (0..h).contains(&y) {
                    img.set_pixel(x as usize, y as usize, color);
                }
            }
        }
    }
    img
}

/// `n` cameras on a horizontal ring around the scene centre at the
/// radius and height of the first dataset camera.
pub fn orbit_cameras(dataset: &Dataset, n: usize, width: u32, height: u32, fov_deg: f64) -> ghnerf_core::Result<Vec<Camera>> {
    let first = dataset
        .cameras
        .first()
        .ok_or_else(|| ghnerf_core::Error::Argument("dataset has no cameras".into()))?;
    let center = dataset.manifest.scene_box.center();
    let c0 = first.center();
    let radius = ((c0[0] - center[0]).powi(2) + (c0[2] - center[2]).powi(2)).sqrt();
    (0..n)
        .map(|i| {
            let a = std::f64::consts::TAU * i as f64 / n as f64;
            let pos = Vec3::new(center[0] + radius * a.sin(), c0[1], center[2] + radius * a.cos());
            Camera::look_at(pos, center, Vec3::new(0.0, 1.0, 0.0), fov_deg, width, height)
        })
        .collect()
}

