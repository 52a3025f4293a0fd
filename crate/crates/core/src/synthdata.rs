//! Procedural articulated figures, an analytic capsule ray tracer and
//! the multi-view dataset written from them.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diffmath::Tensor;
use crate::error::{Error, Result};
use crate::field::FieldOutput;
use crate::geometry::{Aabb, Camera, CameraRecord, Mat3, Rigid, Vec3};
use crate::ghtf;
use crate::imaging::{Mask, RgbImage};
use crate::keypoints::{splat_gt_heatmap, HeatmapStack, JointSet2D};
use crate::rendering::AnalyticField;

pub const NUM_JOINTS: usize = 14;

pub const JOINT_NAMES: [&str; NUM_JOINTS] = [
    "pelvis",
    "head",
    "left_shoulder",
    "left_elbow",
    "left_wrist",
    "right_shoulder",
    "right_elbow",
    "right_wrist",
    "left_hip",
    "left_knee",
    "left_ankle",
    "right_hip",
    "right_knee",
    "right_ankle",
];

pub const PARENTS: [Option<usize>; NUM_JOINTS] = [
    None,
    Some(0),
    Some(0),
    Some(2),
    Some(3),
    Some(0),
    Some(5),
    Some(6),
    Some(0),
    Some(8),
    Some(9),
    Some(0),
    Some(11),
    Some(12),
];

/// Left shoulder and right hip.
pub const TORSO_PAIR: (usize, usize) = (2, 11);

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Capsule {
    pub a: usize,
    pub b: usize,
    pub radius: f64,
    pub albedo: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArticulatedFigure {
    pub parents: Vec<Option<usize>>,
    /// Offset of each joint from its parent in the rest pose; for the
    /// root, its rest position.
    pub offsets: Vec<Vec3>,
    pub limbs: Vec<Capsule>,
}

/// Limb templates: joints, radius, and the albedo range each channel is
/// drawn from. Left limbs run warm and right limbs cool so the two
/// sides stay distinguishable in every view.
const LIMBS: [(usize, usize, f64, [(f64, f64); 3]); 15] = [
    (0, 2, 0.085, [(0.3, 0.5), (0.6, 0.8), (0.3, 0.5)]),
    (0, 5, 0.085, [(0.3, 0.5), (0.6, 0.8), (0.3, 0.5)]),
    (2, 5, 0.07, [(0.3, 0.5), (0.6, 0.8), (0.3, 0.5)]),
    (0, 8, 0.085, [(0.5, 0.7), (0.5, 0.7), (0.2, 0.4)]),
    (0, 11, 0.085, [(0.5, 0.7), (0.5, 0.7), (0.2, 0.4)]),
    (1, 1, 0.1, [(0.8, 0.95), (0.7, 0.85), (0.6, 0.75)]),
    (2, 3, 0.045, [(0.8, 1.0), (0.2, 0.4), (0.1, 0.3)]),
    (3, 4, 0.04, [(0.9, 1.0), (0.5, 0.7), (0.1, 0.3)]),
    (5, 6, 0.045, [(0.1, 0.3), (0.3, 0.5), (0.8, 1.0)]),
    (6, 7, 0.04, [(0.1, 0.3), (0.6, 0.8), (0.9, 1.0)]),
    (8, 9, 0.06, [(0.7, 0.9), (0.1, 0.3), (0.4, 0.6)]),
    (9, 10, 0.05, [(0.9, 1.0), (0.3, 0.5), (0.6, 0.8)]),
    (11, 12, 0.06, [(0.2, 0.4), (0.1, 0.3), (0.7, 0.9)]),
    (12, 13, 0.05, [(0.3, 0.5), (0.3, 0.5), (0.9, 1.0)]),
    (0, 1, 0.05, [(0.8, 0.95), (0.7, 0.85), (0.6, 0.75)]),
];

/// Rest offsets before per-figure jitter and body scale.
const REST: [[f64; 3]; NUM_JOINTS] = [
    [0.0, 0.95, 0.0],
    [0.0, 0.68, 0.0],
    [0.19, 0.48, 0.0],
    [0.0, -0.28, 0.0],
    [0.0, -0.25, 0.0],
    [-0.19, 0.48, 0.0],
    [0.0, -0.28, 0.0],
    [0.0, -0.25, 0.0],
    [0.1, -0.05, 0.0],
    [0.0, -0.42, 0.0],
    [0.0, -0.4, 0.0],
    [-0.1, -0.05, 0.0],
    [0.0, -0.42, 0.0],
    [0.0, -0.4, 0.0],
];

pub fn make_figure(seed: u64, body_scale: f64) -> Result<ArticulatedFigure> {
    if !(body_scale > 0.0) || !body_scale.is_finite() {
        return Err(Error::Argument(format!("body scale {body_scale} must be positive")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let offsets = REST
        .iter()
        .map(|r| {
            let f = rng.gen_range(0.92..1.08);
            Vec3::new(r[0], r[1], r[2]) * (f * body_scale)
        })
        .collect();
    let limbs = LIMBS
        .iter()
        .map(|&(a, b, radius, ranges)| Capsule {
            a,
            b,
            radius: radius * rng.gen_range(0.9..1.1) * body_scale,
            albedo: ranges.map(|(lo, hi)| rng.gen_range(lo..hi)),
        })
        .collect();
    Ok(ArticulatedFigure {
        parents: PARENTS.to_vec(),
        offsets,
        limbs,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoseSpec {
    /// Local axis-angle rotation per joint; it turns the joint's
    /// children.
    pub rotations: Vec<Vec3>,
    pub translation: Vec3,
}

impl PoseSpec {
    pub fn rest() -> Self {
        Self {
            rotations: vec![Vec3::ZERO; NUM_JOINTS],
            translation: Vec3::ZERO,
        }
    }

    /// A plausible random pose: arm and leg swings, bent elbows and
    /// knees, arbitrary facing, small drift.
    pub fn random(rng: &mut impl Rng) -> Self {
        let mut r = vec![Vec3::ZERO; NUM_JOINTS];
        r[0] = Vec3::new(0.0, rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI), 0.0);
        for (sh, el, side) in [(2usize, 3usize, 1.0), (5, 6, -1.0)] {
            r[sh] = Vec3::new(rng.gen_range(-0.9..0.9), 0.0, side * rng.gen_range(0.1..1.1));
            r[el] = Vec3::new(-rng.gen_range(0.0..1.3), 0.0, 0.0);
        }
        for (hip, knee) in [(8usize, 9usize), (11, 12)] {
            r[hip] = Vec3::new(rng.gen_range(-0.5..0.5), 0.0, rng.gen_range(-0.15..0.15));
            r[knee] = Vec3::new(rng.gen_range(0.0..0.9), 0.0, 0.0);
        }
        Self {
            rotations: r,
            translation: Vec3::new(rng.gen_range(-0.1..0.1), 0.0, rng.gen_range(-0.1..0.1)),
        }
    }

    fn validate(&self, joints: usize) -> Result<()> {
        if self.rotations.len() != joints {
            return Err(Error::Shape(format!("{} rotations for {joints} joints", self.rotations.len())));
        }
        if !self.translation.is_finite() || self.rotations.iter().any(|r| !r.is_finite() || r.norm() > std::f64::consts::PI + 1e-12) {
            return Err(Error::Argument("pose must be finite with rotation angles at most π".into()));
        }
        Ok(())
    }
}

/// Forward kinematics: world joint positions.
pub fn pose_figure(figure: &ArticulatedFigure, pose: &PoseSpec) -> Result<Vec<Vec3>> {
    let n = figure.parents.len();
    pose.validate(n)?;
    let mut global: Vec<Option<Rigid>> = vec![None; n];
    let mut pos = vec![Vec3::ZERO; n];
    for j in 0..n {
        let local_rot = Mat3::from_axis_angle(pose.rotations[j]);
        let (p, frame) = match figure.parents[j] {
            None => {
                let p = figure.offsets[j] + pose.translation;
                (p, local_rot)
            }
            Some(parent) => {
                let pg = global[parent]
                    .ok_or_else(|| Error::Argument(format!("joint {j} precedes its parent {parent}")))?;
                let p = pos[parent] + pg.rotation.mul_vec(figure.offsets[j]);
                (p, pg.rotation.mul_mat(&local_rot))
            }
        };
        pos[j] = p;
        global[j] = Some(Rigid {
            rotation: frame,
            translation: p,
        });
    }
    Ok(pos)
}

/// Nearest positive ray parameter where the ray meets the capsule
/// around segment `a→b`.
pub fn ray_capsule(origin: Vec3, dir: Vec3, a: Vec3, b: Vec3, r: f64) -> Option<f64> {
    let ba = b - a;
    let oa = origin - a;
    let baba = ba.dot(ba);
    let bard = ba.dot(dir);
    let baoa = ba.dot(oa);
    let rdoa = dir.dot(oa);
    let oaoa = oa.dot(oa);
    let mut best: Option<f64> = None;
    let mut keep = |t: f64| {
        if t > 1e-9 && best.is_none_or(|b| t < b) {
            best = Some(t);
        }
    };
    if baba > 1e-18 {
        let qa = baba - bard * bard;
        let qb = baba * rdoa - baoa * bard;
        let qc = baba * oaoa - baoa * baoa - r * r * baba;
        if qa.abs() > 1e-18 {
            let disc = qb * qb - qa * qc;
            if disc >= 0.0 {
                let s = disc.sqrt();
                for t in [(-qb - s) / qa, (-qb + s) / qa] {
                    let y = baoa + t * bard;
                    if y > 0.0 && y < baba {
                        keep(t);
                    }
                }
            }
        }
    }
    for c in [a, b] {
        let oc = origin - c;
        let hb = dir.dot(oc);
        let disc = hb * hb - (oc.dot(oc) - r * r);
        if disc >= 0.0 {
            let s = disc.sqrt();
            keep(-hb - s);
            keep(-hb + s);
        }
    }
    best
}

fn closest_on_segment(p: Vec3, a: Vec3, b: Vec3) -> Vec3 {
    let ba = b - a;
    let l = ba.dot(ba);
    if l <= 1e-18 {
        return a;
    }
    let h = ((p - a).dot(ba) / l).clamp(0.0, 1.0);
    a + ba * h
}

/// Fixed key light, from above and in front.
pub fn light_direction() -> Vec3 {
    Vec3::new(0.3, 0.8, 0.5).normalized().expect("non-zero")
}

const AMBIENT: f64 = 0.35;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hit {
    pub t: f64,
    pub limb: usize,
    pub point: Vec3,
    pub normal: Vec3,
}

pub fn trace_ray(figure: &ArticulatedFigure, joints: &[Vec3], origin: Vec3, dir: Vec3) -> Option<Hit> {
    let mut best: Option<Hit> = None;
    for (i, limb) in figure.limbs.iter().enumerate() {
        let (a, b) = (joints[limb.a], joints[limb.b]);
        if let Some(t) = ray_capsule(origin, dir, a, b, limb.radius) {
            if best.is_none_or(|h| t < h.t) {
                let point = origin + dir * t;
                let normal = (point - closest_on_segment(point, a, b)).normalized().unwrap_or(-dir);
                best = Some(Hit {
                    t,
                    limb: i,
                    point,
                    normal,
                });
            }
        }
    }
    best
}

pub fn shade(figure: &ArticulatedFigure, hit: &Hit, shading: bool) -> [f64; 3] {
    let albedo = figure.limbs[hit.limb].albedo;
    if !shading {
        return albedo;
    }
    let lambert = hit.normal.dot(light_direction()).max(0.0);
    albedo.map(|a| a * (AMBIENT + (1.0 - AMBIENT) * lambert))
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceResult {
    pub image: RgbImage,
    pub mask: Mask,
    /// Ray distance to the surface; infinite where nothing was hit.
    pub depth: Vec<f64>,
    /// Limb index per pixel.
    pub limb: Vec<Option<usize>>,
    /// Position along the limb axis in `[0, 1]` per pixel.
    pub along: Vec<f64>,
}

pub fn trace_render(figure: &ArticulatedFigure, joints: &[Vec3], camera: &Camera, shading: bool) -> Result<TraceResult> {
    let (w, h) = (camera.width() as usize, camera.height() as usize);
    let mut image = RgbImage::black(w, h);
    let mut mask = Mask::filled(w, h, 0);
    let mut depth = vec![f64::INFINITY; w * h];
    let mut limb = vec![None; w * h];
    let mut along = vec![0.0; w * h];
    let origin = camera.center();
    for y in 0..h {
        for x in 0..w {
            let dir = camera.pixel_direction(x as f64 + 0.5, y as f64 + 0.5);
            if let Some(hit) = trace_ray(figure, joints, origin, dir) {
                let i = y * w + x;
                image.set_pixel(x, y, shade(figure, &hit, shading).map(|c| c as f32));
                mask.data[i] = 255;
                depth[i] = hit.t;
                limb[i] = Some(hit.limb);
                let l = &figure.limbs[hit.limb];
                let (a, b) = (joints[l.a], joints[l.b]);
                let ba = b - a;
                let len2 = ba.dot(ba);
                along[i] = if len2 > 0.0 {
                    ((hit.point - a).dot(ba) / len2).clamp(0.0, 1.0)
                } else {
                    0.5
                };
            }
        }
    }
    Ok(TraceResult {
        image,
        mask,
        depth,
        limb,
        along,
    })
}

/// Box around every capsule of a posed figure.
pub fn figure_bounds(figure: &ArticulatedFigure, joints: &[Vec3], margin: f64) -> Aabb {
    let mut pts = Vec::new();
    for l in &figure.limbs {
        for j in [l.a, l.b] {
            pts.push(joints[j] - Vec3::new(1.0, 1.0, 1.0) * l.radius);
            pts.push(joints[j] + Vec3::new(1.0, 1.0, 1.0) * l.radius);
        }
    }
    Aabb::from_points(pts).expect("figure has limbs").padded(margin)
}

/// A soft-walled version of a posed figure as an analytic radiance
/// field: density rises smoothly across each capsule surface.
pub struct SoftFigureField<'a> {
    pub figure: &'a ArticulatedFigure,
    pub joints: &'a [Vec3],
    pub max_density: f64,
    /// Width of the density transition at the surface (meters).
    pub softness: f64,
}

impl AnalyticField for SoftFigureField<'_> {
    fn query(&self, x: Vec3, _dir: Vec3) -> FieldOutput<f64> {
        let mut best = (f64::INFINITY, 0usize, Vec3::ZERO);
        for (i, l) in self.figure.limbs.iter().enumerate() {
            let c = closest_on_segment(x, self.joints[l.a], self.joints[l.b]);
            let d = (x - c).norm() - l.radius;
            if d < best.0 {
                best = (d, i, c);
            }
        }
        let (d, limb, c) = best;
        let occupancy = 1.0 / (1.0 + (d / self.softness).exp());
        let normal = (x - c).normalized().unwrap_or(Vec3::new(0.0, 1.0, 0.0));
        let hit = Hit {
            t: 0.0,
            limb,
            point: x,
            normal,
        };
        FieldOutput {
            sigma: self.max_density * occupancy,
            color: shade(self.figure, &hit, true),
            heatmap: vec![],
            coord: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetConfig {
    pub subjects: usize,
    /// How many of the subjects (the last ones) are held out.
    pub held_out_subjects: usize,
    pub frames: usize,
    pub cameras_on_ring: usize,
    pub held_out_cameras: usize,
    pub resolution: u32,
    pub seed: u64,
    /// Ground-truth heatmap σ in pixels at 64×64; scaled with resolution.
    pub heatmap_sigma: f64,
    pub shading: bool,
    /// Write per-view dense surface-embedding files.
    pub external_features: bool,
    pub camera_radius: f64,
    pub fov_deg: f64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            subjects: 3,
            held_out_subjects: 1,
            frames: 6,
            cameras_on_ring: 8,
            held_out_cameras: 2,
            resolution: 64,
            seed: 0,
            heatmap_sigma: 3.0,
            shading: true,
            external_features: true,
            camera_radius: 3.2,
            fov_deg: 40.0,
        }
    }
}

impl DatasetConfig {
    fn validate(&self) -> Result<()> {
        if self.subjects == 0 || self.frames == 0 || self.cameras_on_ring == 0 || self.resolution == 0 {
            return Err(Error::Argument("subject, frame, camera and resolution counts must be at least 1".into()));
        }
        if self.held_out_subjects > self.subjects {
            return Err(Error::Argument("more held-out subjects than subjects".into()));
        }
        if !(self.heatmap_sigma > 0.0) || !(self.camera_radius > 0.0) || !(self.fov_deg > 0.0 && self.fov_deg < 180.0) {
            return Err(Error::Argument("heatmap sigma, camera radius and field of view must be positive".into()));
        }
        Ok(())
    }

    pub fn scaled_sigma(&self) -> f64 {
        self.heatmap_sigma * self.resolution as f64 / 64.0
    }
}

/// Channels of the dense surface-embedding files.
pub const EMBEDDING_CHANNELS: usize = 4;

pub const MANIFEST_VERSION: u16 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraEntry {
    pub name: String,
    pub held_out: bool,
    pub camera: CameraRecord,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViewEntry {
    pub camera: usize,
    pub image: String,
    pub mask: String,
    pub heatmap: Option<String>,
    pub features: Option<String>,
    /// Projected joints in pixels; `None` when outside the image.
    pub joints2d: Vec<Option<[f64; 2]>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameEntry {
    pub index: usize,
    pub joints3d: Vec<[f64; 3]>,
    /// Box around the posed figure.
    pub bounds: Aabb,
    pub views: Vec<ViewEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectEntry {
    pub name: String,
    pub held_out: bool,
    pub body_scale: f64,
    pub frames: Vec<FrameEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u16,
    pub num_joints: usize,
    pub joint_names: Vec<String>,
    pub torso_pair: (usize, usize),
    pub scene_box: Aabb,
    pub width: u32,
    pub height: u32,
    pub heatmap_sigma: f64,
    pub feature_channels: usize,
    pub cameras: Vec<CameraEntry>,
    pub subjects: Vec<SubjectEntry>,
    pub config: DatasetConfig,
}

fn ring_cameras(cfg: &DatasetConfig) -> Result<Vec<CameraEntry>> {
    let target = Vec3::new(0.0, 0.9, 0.0);
    let up = Vec3::new(0.0, 1.0, 0.0);
    let mut out = Vec::new();
    let n = cfg.cameras_on_ring;
    let res = cfg.resolution;
    for i in 0..n {
        let a = std::f64::consts::TAU * i as f64 / n as f64;
        let height = if i % 2 == 0 { 1.1 } else { 1.5 };
        let pos = Vec3::new(cfg.camera_radius * a.sin(), height, cfg.camera_radius * a.cos());
        out.push(CameraEntry {
            name: format!("cam{i:02}"),
            held_out: false,
            camera: Camera::look_at(pos, target, up, cfg.fov_deg, res, res)?.to_record(),
        });
    }
    for k in 0..cfg.held_out_cameras {
        let a = std::f64::consts::TAU * (k as f64 + 0.3) / cfg.held_out_cameras as f64 + std::f64::consts::PI / n as f64;
        let pos = Vec3::new(cfg.camera_radius * a.sin(), 1.3, cfg.camera_radius * a.cos());
        out.push(CameraEntry {
            name: format!("held{k:02}"),
            held_out: true,
            camera: Camera::look_at(pos, target, up, cfg.fov_deg, res, res)?.to_record(),
        });
    }
    Ok(out)
}

fn embedding(trace: &TraceResult, limbs: usize) -> Tensor<f32> {
    let n = trace.depth.len();
    let mut data = vec![0.0f32; n * EMBEDDING_CHANNELS];
    for i in 0..n {
        if let Some(l) = trace.limb[i] {
            let th = std::f64::consts::TAU * l as f64 / limbs as f64;
            data[i * EMBEDDING_CHANNELS..(i + 1) * EMBEDDING_CHANNELS].copy_from_slice(&[
                (0.5 + 0.5 * th.cos()) as f32,
                (0.5 + 0.5 * th.sin()) as f32,
                trace.along[i] as f32,
                1.0,
            ]);
        }
    }
    let (h, w) = (trace.image.height, trace.image.width);
    Tensor::new(vec![h, w, EMBEDDING_CHANNELS], data).expect("sized above")
}

/// Render every subject, frame and camera to `root` and write the
/// manifest last.
pub fn generate_dataset(cfg: &DatasetConfig, root: &Path) -> Result<DatasetManifest> {
    cfg.validate()?;
    std::fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    let cameras = ring_cameras(cfg)?;
    let cams: Vec<Camera> = cameras.iter().map(|c| Camera::try_from(&c.camera)).collect::<Result<_>>()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let sigma = cfg.scaled_sigma();

    struct Job {
        subject: usize,
        frame: usize,
        joints: Vec<Vec3>,
    }
    let mut figures = Vec::new();
    let mut jobs = Vec::new();
    let mut subjects = Vec::new();
    for s in 0..cfg.subjects {
        let scale = rng.gen_range(0.9..1.1);
        let figure = make_figure(rng.gen(), scale)?;
        let mut frames = Vec::new();
        for f in 0..cfg.frames {
            let pose = PoseSpec::random(&mut rng);
            let joints = pose_figure(&figure, &pose)?;
            frames.push(FrameEntry {
                index: f,
                joints3d: joints.iter().map(|j| j.0).collect(),
                bounds: figure_bounds(&figure, &joints, 0.02),
                views: Vec::new(),
            });
            jobs.push(Job {
                subject: s,
                frame: f,
                joints,
            });
        }
        subjects.push(SubjectEntry {
            name: format!("subject{s}"),
            held_out: s >= cfg.subjects - cfg.held_out_subjects,
            body_scale: scale,
            frames,
        });
        figures.push(figure);
    }

    let tasks: Vec<(usize, usize)> = (0..jobs.len()).flat_map(|j| (0..cams.len()).map(move |c| (j, c))).collect();
    let views: Vec<Result<(usize, usize, ViewEntry)>> = tasks
        .par_iter()
        .map(|&(j, c)| {
            let job = &jobs[j];
            let cam = &cams[c];
            let figure = &figures[job.subject];
            let trace = trace_render(figure, &job.joints, cam, cfg.shading)?;
            let dir = format!("{}/{:03}", subjects[job.subject].name, job.frame);
            std::fs::create_dir_all(root.join(&dir)).map_err(|e| Error::io(root.join(&dir), e))?;
            let stem = format!("{dir}/{}", cameras[c].name);
            let joints2d: Vec<Option<[f64; 2]>> = job
                .joints
                .iter()
                .map(|&x| {
                    cam.project(x).ok().and_then(|(u, v, _)| {
                        (u >= 0.0 && v >= 0.0 && u < cam.width() as f64 && v < cam.height() as f64).then_some([u, v])
                    })
                })
                .collect();
            let set = JointSet2D {
                joints: joints2d
                    .iter()
                    .map(|p| {
                        p.map(|[u, v]| crate::keypoints::Joint2D {
                            u,
                            v,
                            confidence: 1.0,
                        })
                    })
                    .collect(),
            };
            let heat = splat_gt_heatmap(&set, sigma, trace.image.width, trace.image.height)?;
            trace.image.save_png(&root.join(format!("{stem}.png")))?;
            trace.mask.save_png(&root.join(format!("{stem}.mask.png")))?;
            save_heatmaps(&root.join(format!("{stem}.heat.ghtf")), &heat)?;
            let features = if cfg.external_features {
                let path = format!("{stem}.feat.ghtf");
                ghtf::save_tensor(&root.join(&path), &embedding(&trace, figure.limbs.len()))?;
                Some(path)
            } else {
                None
            };
            Ok((
                j,
                c,
                ViewEntry {
                    camera: c,
                    image: format!("{stem}.png"),
                    mask: format!("{stem}.mask.png"),
                    heatmap: Some(format!("{stem}.heat.ghtf")),
                    features,
                    joints2d,
                },
            ))
        })
        .collect();
    for v in views {
        let (j, _, entry) = v?;
        let job = &jobs[j];
        subjects[job.subject].frames[job.frame].views.push(entry);
    }

    let scene_box = subjects
        .iter()
        .flat_map(|s| s.frames.iter().map(|f| f.bounds))
        .reduce(|a, b| Aabb {
            min: a.min.min(b.min),
            max: a.max.max(b.max),
        })
        .expect("at least one frame")
        .inflated(0.05);
    let manifest = DatasetManifest {
        version: MANIFEST_VERSION,
        num_joints: NUM_JOINTS,
        joint_names: JOINT_NAMES.iter().map(|s| s.to_string()).collect(),
        torso_pair: TORSO_PAIR,
        scene_box,
        width: cfg.resolution,
        height: cfg.resolution,
        heatmap_sigma: sigma,
        feature_channels: if cfg.external_features { EMBEDDING_CHANNELS } else { 0 },
        cameras,
        subjects,
        config: cfg.clone(),
    };
    let text = serde_json::to_vec_pretty(&manifest).expect("manifest serialises");
    ghtf::write_atomic(&root.join("manifest.json"), &text)?;
    Ok(manifest)
}

pub fn save_heatmaps(path: &Path, heat: &HeatmapStack) -> Result<()> {
    let t = Tensor::new(vec![heat.channels, heat.height, heat.width], heat.data.clone())?;
    ghtf::save_tensor(path, &t)
}

pub fn load_heatmaps(path: &Path) -> Result<HeatmapStack> {
    let t: Tensor<f32> = ghtf::load_tensor(path)?;
    let [c, h, w] = t.shape()[..] else {
        return Err(Error::Format(format!("{}: heatmaps must be [J, H, W], got {:?}", path.display(), t.shape())));
    };
    HeatmapStack::new(w, h, c, t.into_data())
}

/// One loaded view of a frame.
#[derive(Debug, Clone)]
pub struct ViewData {
    pub camera: Camera,
    pub camera_index: usize,
    pub held_out_camera: bool,
    pub image: RgbImage,
    pub mask: Mask,
    pub heatmaps: Option<HeatmapStack>,
    pub features: Option<Tensor<f32>>,
    pub joints2d: JointSet2D,
}

#[derive(Debug, Clone)]
pub struct FrameData {
    pub subject: usize,
    pub frame: usize,
    pub held_out_subject: bool,
    pub bounds: Aabb,
    pub joints3d: Vec<Vec3>,
    pub views: Vec<ViewData>,
}

impl FrameData {
    pub fn view(&self, camera: usize) -> Option<&ViewData> {
        self.views.iter().find(|v| v.camera_index == camera)
    }
}

/// A dataset read fully into memory.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: DatasetManifest,
    pub cameras: Vec<Camera>,
    pub frames: Vec<FrameData>,
    index: HashMap<(usize, usize), usize>,
}

impl Dataset {
    pub fn open(root: &Path) -> Result<Self> {
        let path = root.join("manifest.json");
        let text = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: DatasetManifest = serde_json::from_slice(&text).map_err(|e| Error::json(&path, e))?;
        if manifest.version != MANIFEST_VERSION {
            return Err(Error::Version {
                found: manifest.version,
                expected: MANIFEST_VERSION,
            });
        }
        let cameras: Vec<Camera> = manifest.cameras.iter().map(|c| Camera::try_from(&c.camera)).collect::<Result<_>>()?;
        let mut tasks = Vec::new();
        for (s, subj) in manifest.subjects.iter().enumerate() {
            for (f, frame) in subj.frames.iter().enumerate() {
                tasks.push((s, f, frame));
            }
        }
        let frames: Vec<FrameData> = tasks
            .par_iter()
            .map(|&(s, f, frame)| load_frame(root, &manifest, &cameras, s, f, frame))
            .collect::<Result<_>>()?;
        let index = frames.iter().enumerate().map(|(i, f)| ((f.subject, f.frame), i)).collect();
        Ok(Self {
            root: root.to_path_buf(),
            manifest,
            cameras,
            frames,
            index,
        })
    }

    pub fn frame(&self, subject: usize, frame: usize) -> Option<&FrameData> {
        self.index.get(&(subject, frame)).map(|&i| &self.frames[i])
    }

    pub fn num_joints(&self) -> usize {
        self.manifest.num_joints
    }

    pub fn training_cameras(&self) -> Vec<usize> {
        (0..self.cameras.len()).filter(|&c| !self.manifest.cameras[c].held_out).collect()
    }

    pub fn held_out_cameras(&self) -> Vec<usize> {
        (0..self.cameras.len()).filter(|&c| self.manifest.cameras[c].held_out).collect()
    }

    pub fn training_frames(&self) -> Vec<usize> {
        (0..self.frames.len()).filter(|&i| !self.frames[i].held_out_subject).collect()
    }
}

fn load_frame(
    root: &Path,
    manifest: &DatasetManifest,
    cameras: &[Camera],
    s: usize,
    f: usize,
    frame: &FrameEntry,
) -> Result<FrameData> {
    let mut views = Vec::new();
    for v in &frame.views {
        let cam = *cameras
            .get(v.camera)
            .ok_or_else(|| Error::Format(format!("view refers to unknown camera {}", v.camera)))?;
        let image = RgbImage::load_png(&root.join(&v.image))?;
        let mask = Mask::load_png(&root.join(&v.mask))?;
        if (image.width, image.height) != (cam.width() as usize, cam.height() as usize) || (mask.width, mask.height) != (image.width, image.height) {
            return Err(Error::Format(format!("{}: size disagrees with its camera", v.image)));
        }
        let heatmaps = v.heatmap.as_ref().map(|p| load_heatmaps(&root.join(p))).transpose()?;
        let features = v.features.as_ref().map(|p| ghtf::load_tensor::<f32>(&root.join(p))).transpose()?;
        if v.joints2d.len() != manifest.num_joints {
            return Err(Error::Format(format!("{}: {} joints, expected {}", v.image, v.joints2d.len(), manifest.num_joints)));
        }
        views.push(ViewData {
            camera: cam,
            camera_index: v.camera,
            held_out_camera: manifest.cameras[v.camera].held_out,
            image,
            mask,
            heatmaps,
            features,
            joints2d: JointSet2D {
                joints: v
                    .joints2d
                    .iter()
                    .map(|p| {
                        p.map(|[u, v]| crate::keypoints::Joint2D {
                            u,
                            v,
                            confidence: 1.0,
                        })
                    })
                    .collect(),
            },
        });
    }
    Ok(FrameData {
        subject: s,
        frame: f,
        held_out_subject: manifest.subjects[s].held_out,
        bounds: frame.bounds,
        joints3d: frame.joints3d.iter().map(|&j| Vec3(j)).collect(),
        views,
    })
}
