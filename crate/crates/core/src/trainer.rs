//! Composite loss, ray-batch sampling, the training loop, checkpoints
//! and held-out evaluation.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffmath::{halve_lr_schedule, AdamState, ParamStore, Real, Tape, Var};
use crate::error::{Error, Result};
use crate::geometry::{Aabb, Camera, Ray};
use crate::ghtf::{self, TensorData};
use crate::imaging::Mask;
use crate::keypoints::{extract_keypoints_2d, ExtractionParams, HeatmapStack};
use crate::metrics::{heatmap_mse, pck, psnr, ssim, Psnr};
use crate::model::{nearest_views, Model, ModelConfig, RayRender, RenderOutput, SamplingMode, SourceView};
use crate::rendering::Jitter;
use crate::synthdata::{Dataset, FrameData, ViewData};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub lambda_p: f64,
    pub lambda_h: f64,
    pub lambda_c: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_p: 0.01,
            lambda_h: 0.5,
            lambda_c: 0.01,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("lambda_p", self.lambda_p), ("lambda_h", self.lambda_h), ("lambda_c", self.lambda_c)] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Argument(format!("{name} = {v} must be finite and non-negative")));
            }
        }
        Ok(())
    }
}

/// Predicted quantities feeding the loss, as tape handles.
#[derive(Debug, Clone, Copy)]
pub struct Prediction {
    /// Fine-pass colors `[r, 3]`.
    pub color: Var,
    /// Coarse-pass colors `[r, 3]`, supervised with the same targets.
    pub coarse_color: Option<Var>,
    /// Composited heatmaps `[r, J]`.
    pub heat: Option<Var>,
    /// Colors of patch rays `[patches·p·p, 3]`, patch-major.
    pub patch: Option<Var>,
    /// Sample weights `[r, s]` and coordinate-head output `[r·s, 3]`.
    pub coord: Option<(Var, Var)>,
}

#[derive(Debug, Clone, Copy)]
pub struct Targets<'a, T> {
    pub color: &'a [T],
    pub heat: Option<&'a [T]>,
    pub patch: Option<&'a [T]>,
    /// Normalised sample positions `[r·s, 3]`.
    pub coord: Option<&'a [T]>,
}

/// Tape handles of every loss term; absent terms are zero.
#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub total: Var,
    pub l_col: Var,
    pub l_perc: Option<Var>,
    pub l_heat: Option<Var>,
    pub l_coord: Option<Var>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossValues {
    pub total: f64,
    pub l_col: f64,
    pub l_perc: f64,
    pub l_heat: f64,
    pub l_coord: f64,
}

impl LossVars {
    pub fn values<T: Real>(&self, tape: &Tape<T>) -> LossValues {
        let get = |v: Option<Var>| v.map_or(0.0, |v| tape.value(v).data()[0].as_f64());
        LossValues {
            total: get(Some(self.total)),
            l_col: get(Some(self.l_col)),
            l_perc: get(self.l_perc),
            l_heat: get(self.l_heat),
            l_coord: get(self.l_coord),
        }
    }
}

/// `l_col + λ_p·l_perc + λ_h·l_heat + λ_c·l_coord`. Terms are present
/// exactly when both prediction and target are.
pub fn compute_losses<T: Real>(
    tape: &mut Tape<T>,
    pred: &Prediction,
    gt: &Targets<'_, T>,
    w: &LossWeights,
    patch_size: usize,
) -> Result<LossVars> {
    w.validate()?;
    fn paired<A, B>(name: &str, a: Option<A>, b: Option<B>) -> Result<Option<(A, B)>> {
        match (a, b) {
            (Some(a), Some(b)) => Ok(Some((a, b))),
            (None, None) => Ok(None),
            _ => Err(Error::Shape(format!("{name}: prediction and target must both be present"))),
        }
    }
    let mut l_col = tape.mse(pred.color, gt.color)?;
    if let Some(c) = pred.coarse_color {
        let coarse = tape.mse(c, gt.color)?;
        l_col = tape.add(l_col, coarse)?;
    }
    let l_heat = paired("heatmap", pred.heat, gt.heat)?
        .map(|(p, t)| tape.mse(p, t))
        .transpose()?;
    let l_perc = paired("patch", pred.patch, gt.patch)?
        .map(|(p, t)| tape.grad_diff_mse(p, t, patch_size))
        .transpose()?;
    let l_coord = paired("coordinate", pred.coord, gt.coord)?
        .map(|((wts, c), t)| tape.weighted_sq_err(wts, c, t))
        .transpose()?;
    let mut terms = vec![(l_col, T::one())];
    for (v, lambda) in [(l_perc, w.lambda_p), (l_heat, w.lambda_h), (l_coord, w.lambda_c)] {
        if let Some(v) = v {
            terms.push((v, T::lit(lambda)));
        }
    }
    let total = tape.weighted_sum(&terms)?;
    Ok(LossVars {
        total,
        l_col,
        l_perc,
        l_heat,
        l_coord,
    })
}

/// Which pixels rays are drawn from.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum RaySampling {
    /// Only foreground-mask pixels.
    Foreground,
    /// Pixels whose rays cross the frame's subject box, with a share
    /// forced onto the foreground.
    Box { foreground_fraction: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub dataset: PathBuf,
    pub model: ModelConfig,
    pub source_views: usize,
    pub rays: usize,
    pub patch_size: usize,
    /// Patches per batch for the patch loss, rendered on top of `rays`.
    pub patches: usize,
    pub steps: u64,
    pub lr: f64,
    pub lr_halving_period: u64,
    pub seed: u64,
    pub loss: LossWeights,
    pub coord_loss: bool,
    pub perceptual_loss: bool,
    /// Supervise the heat head with the per-view dense embedding files
    /// instead of joint heatmaps.
    pub dense_feature_mode: bool,
    pub coarse_color_loss: bool,
    pub sampling: RaySampling,
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            dataset: PathBuf::from("data"),
            model: ModelConfig::default(),
            source_views: 3,
            rays: 512,
            patch_size: 8,
            patches: 1,
            steps: 20_000,
            lr: 5e-4,
            lr_halving_period: 5_000,
            seed: 0,
            loss: LossWeights::default(),
            coord_loss: false,
            perceptual_loss: true,
            dense_feature_mode: false,
            coarse_color_loss: true,
            sampling: RaySampling::Box {
                foreground_fraction: 0.5,
            },
            checkpoint_every: 1_000,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, dataset: &Dataset) -> Result<()> {
        self.loss.validate()?;
        if self.source_views == 0 || self.rays == 0 || self.steps == 0 || self.lr_halving_period == 0 {
            return Err(Error::Argument("source views, rays, steps and lr period must be positive".into()));
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::Argument(format!("learning rate {} must be positive", self.lr)));
        }
        if self.perceptual_loss && self.patches > 0 && self.patch_size < 2 {
            return Err(Error::Argument("patch size must be at least 2".into()));
        }
        if let RaySampling::Box { foreground_fraction } = self.sampling {
            if !(0.0..=1.0).contains(&foreground_fraction) {
                return Err(Error::Argument(format!("foreground fraction {foreground_fraction} outside [0, 1]")));
            }
        }
        let cams = dataset.training_cameras().len();
        if self.source_views + 1 > cams {
            return Err(Error::Argument(format!(
                "{} source views need at least {} training cameras, dataset has {cams}",
                self.source_views,
                self.source_views + 1
            )));
        }
        if dataset.training_frames().is_empty() {
            return Err(Error::Argument("dataset has no training frames".into()));
        }
        if self.dense_feature_mode && dataset.manifest.feature_channels == 0 {
            return Err(Error::Argument("dense feature mode needs a dataset with embedding files".into()));
        }
        Ok(())
    }

    /// The model settings with every dataset-dependent width filled in.
    pub fn resolved_model(&self, dataset: &Dataset) -> ModelConfig {
        let mut m = self.model.clone();
        m.field.bounds = dataset.manifest.scene_box;
        m.field.coord_head = m.field.coord_head || self.coord_loss;
        if self.dense_feature_mode {
            m.field.heat_channels = dataset.manifest.feature_channels;
            m.field.heat_sigmoid = false;
        } else {
            m.field.heat_channels = dataset.num_joints();
        }
        if m.human == crate::model::HumanSource::External {
            m.external_channels = dataset.manifest.feature_channels;
        }
        m
    }
}

/// Rays of one target view plus their supervision.
#[derive(Debug, Clone, PartialEq)]
pub struct RayBatch {
    /// Single rays first, then `patches` windows of `patch_size²` rays
    /// each in row-major order.
    pub pixels: Vec<(usize, usize)>,
    pub rays: Vec<Ray>,
    /// `[n, 3]`.
    pub colors: Vec<f32>,
    /// `[n, J]`.
    pub heat: Vec<f32>,
    pub heat_channels: usize,
    pub singles: usize,
    pub patch_size: usize,
}

impl RayBatch {
    pub fn patches(&self) -> usize {
        if self.patch_size == 0 {
            0
        } else {
            (self.rays.len() - self.singles) / (self.patch_size * self.patch_size)
        }
    }
}

/// Pixels whose centre ray crosses `bounds`.
pub fn box_mask(camera: &Camera, bounds: &Aabb) -> Result<Mask> {
    let (w, h) = (camera.width() as usize, camera.height() as usize);
    let mut m = Mask::filled(w, h, 0);
    for y in 0..h {
        for x in 0..w {
            if camera.pixel_ray_in_box(x as u32, y as u32, bounds)?.is_some() {
                m.data[y * w + x] = 255;
            }
        }
    }
    Ok(m)
}

/// Top-left corners of every `p×p` window lying entirely inside `region`.
pub fn patch_origins(region: &Mask, p: usize) -> Vec<(usize, usize)> {
    let (w, h) = (region.width, region.height);
    if p == 0 || p > w || p > h {
        return Vec::new();
    }
    let mut sum = vec![0usize; (w + 1) * (h + 1)];
    for y in 0..h {
        for x in 0..w {
            let v = usize::from(region.data[y * w + x] == 255);
            sum[(y + 1) * (w + 1) + x + 1] = v + sum[y * (w + 1) + x + 1] + sum[(y + 1) * (w + 1) + x] - sum[y * (w + 1) + x];
        }
    }
    let mut out = Vec::new();
    for y in 0..=h - p {
        for x in 0..=w - p {
            let s = sum[(y + p) * (w + 1) + x + p] + sum[y * (w + 1) + x] - sum[y * (w + 1) + x + p] - sum[(y + p) * (w + 1) + x];
            if s == p * p {
                out.push((x, y));
            }
        }
    }
    out
}

fn pixels_of(mask: &Mask) -> Vec<(usize, usize)> {
    (0..mask.data.len())
        .filter(|&i| mask.data[i] == 255)
        .map(|i| (i % mask.width, i / mask.width))
        .collect()
}

/// Per-pixel supervision channels for a view: the joint heatmaps, or the
/// dense embedding in dense mode.
fn supervision(view: &ViewData, dense: bool) -> Result<HeatmapStack> {
    if dense {
        let f = view
            .features
            .as_ref()
            .ok_or_else(|| Error::Argument("view has no embedding file".into()))?;
        let [h, w, c] = f.shape()[..] else {
            return Err(Error::Shape(format!("embedding shape {:?}", f.shape())));
        };
        let mut stack = HeatmapStack::zeros(w, h, c);
        for (i, v) in f.data().iter().enumerate() {
            let (pix, ch) = (i / c, i % c);
            stack.data[ch * w * h + pix] = *v;
        }
        Ok(stack)
    } else {
        view.heatmaps
            .clone()
            .ok_or_else(|| Error::Argument("view has no heatmap file".into()))
    }
}

/// Draw `n_rays` single rays and `patches` mask-interior windows from one
/// target view. Rays are clipped to the frame's subject box.
pub fn sample_ray_batch(
    frame: &FrameData,
    view: &ViewData,
    n_rays: usize,
    patches: usize,
    patch_size: usize,
    sampling: RaySampling,
    dense: bool,
    rng: &mut impl Rng,
) -> Result<RayBatch> {
    let fg = pixels_of(&view.mask);
    if fg.is_empty() {
        return Err(Error::Argument("target view has an empty mask".into()));
    }
    let mut pixels = Vec::with_capacity(n_rays + patches * patch_size * patch_size);
    match sampling {
        RaySampling::Foreground => {
            for _ in 0..n_rays {
                pixels.push(fg[rng.gen_range(0..fg.len())]);
            }
        }
        RaySampling::Box { foreground_fraction } => {
            let inside = pixels_of(&box_mask(&view.camera, &frame.bounds)?);
            let n_fg = (n_rays as f64 * foreground_fraction).round() as usize;
            for i in 0..n_rays {
                let pool = if i < n_fg || inside.is_empty() { &fg } else { &inside };
                pixels.push(pool[rng.gen_range(0..pool.len())]);
            }
        }
    }
    let singles = pixels.len();
    if patches > 0 {
        let origins = patch_origins(&view.mask, patch_size);
        if !origins.is_empty() {
            for _ in 0..patches {
                let (x0, y0) = origins[rng.gen_range(0..origins.len())];
                for dy in 0..patch_size {
                    for dx in 0..patch_size {
                        pixels.push((x0 + dx, y0 + dy));
                    }
                }
            }
        }
    }
    let sup = supervision(view, dense)?;
    let j = sup.channels;
    let mut rays = Vec::with_capacity(pixels.len());
    let mut kept = Vec::with_capacity(pixels.len());
    for &(x, y) in &pixels[..singles] {
        if let Some(ray) = view.camera.pixel_ray_in_box(x as u32, y as u32, &frame.bounds)? {
            rays.push(ray);
            kept.push((x, y));
        }
    }
    let kept_singles = kept.len();
    if patches > 0 {
        for window in pixels[singles..].chunks(patch_size * patch_size) {
            let found: Vec<Ray> = window
                .iter()
                .map(|&(x, y)| view.camera.pixel_ray_in_box(x as u32, y as u32, &frame.bounds))
                .collect::<Result<Option<_>>>()?
                .unwrap_or_default();
            if found.len() == window.len() {
                rays.extend(found);
                kept.extend_from_slice(window);
            }
        }
    }
    let mut colors = Vec::with_capacity(kept.len() * 3);
    let mut heat = Vec::with_capacity(kept.len() * j);
    for &(x, y) in &kept {
        colors.extend_from_slice(&view.image.pixel(x, y));
        heat.extend((0..j).map(|c| sup.get(c, x, y)));
    }
    Ok(RayBatch {
        pixels: kept,
        rays,
        colors,
        heat,
        heat_channels: j,
        singles: kept_singles,
        patch_size: if patches > 0 { patch_size } else { 0 },
    })
}

/// The `n` training cameras nearest to `target`, never `target` itself.
pub fn choose_sources(dataset: &Dataset, target: &Camera, n: usize) -> Vec<usize> {
    let train = dataset.training_cameras();
    let cams: Vec<Camera> = train.iter().map(|&c| dataset.cameras[c]).collect();
    nearest_views(target, &cams, n).into_iter().map(|i| train[i]).collect()
}

pub fn source_views<'a>(frame: &'a FrameData, cameras: &[usize]) -> Result<Vec<SourceView<'a>>> {
    cameras
        .iter()
        .map(|&c| {
            let v = frame
                .view(c)
                .ok_or_else(|| Error::Argument(format!("frame has no view for camera {c}")))?;
            Ok(SourceView {
                image: &v.image,
                camera: &v.camera,
                external: v.features.as_ref(),
            })
        })
        .collect()
}

fn slice_targets<T: Real>(v: &[f32]) -> Vec<T> {
    v.iter().map(|&x| T::lit(x as f64)).collect()
}

/// Build the whole loss graph of one batch on `tape`.
pub fn batch_loss<T: Real>(
    model: &Model<T>,
    tape: &mut Tape<T>,
    sources: &[SourceView<'_>],
    batch: &RayBatch,
    cfg: &TrainConfig,
    mode: SamplingMode,
    jitter: &mut Jitter<'_>,
) -> Result<LossVars> {
    let views = model.encode_views(tape, sources)?;
    let split = batch.singles;
    let mut renders: Vec<RayRender> = Vec::new();
    if split > 0 {
        renders.push(model.render_rays(tape, &views, &batch.rays[..split], mode, jitter)?);
    }
    let has_patches = batch.rays.len() > split;
    if has_patches {
        renders.push(model.render_rays(tape, &views, &batch.rays[split..], mode, jitter)?);
    }
    let cat = |tape: &mut Tape<T>, vars: Vec<Var>| -> Result<Var> {
        if vars.len() == 1 {
            Ok(vars[0])
        } else {
            tape.concat_rows(&vars)
        }
    };
    let color = cat(tape, renders.iter().map(|r| r.fine.color).collect())?;
    let coarse_color = if cfg.coarse_color_loss && renders.iter().all(|r| r.coarse.is_some()) {
        Some(cat(tape, renders.iter().map(|r| r.coarse.as_ref().expect("checked").color).collect())?)
    } else {
        None
    };
    let heat = cat(tape, renders.iter().map(|r| r.fine.heat.expect("fine pass renders heat")).collect())?;
    let patch = (cfg.perceptual_loss && has_patches).then(|| renders.last().expect("patch render").fine.color);
    let coord = if cfg.coord_loss {
        let w = cat(tape, renders.iter().map(|r| r.fine.weights).collect())?;
        let c = cat(
            tape,
            renders
                .iter()
                .map(|r| r.fine.field.coord.ok_or_else(|| Error::State("coordinate head missing".into())))
                .collect::<Result<_>>()?,
        )?;
        Some((w, c))
    } else {
        None
    };
    let coord_target: Option<Vec<T>> = cfg.coord_loss.then(|| {
        let fc = model.field().config();
        renders
            .iter()
            .flat_map(|r| r.fine.points.iter())
            .flat_map(|&x| {
                let n = fc.normalize(x);
                [0, 1, 2].map(|k| T::lit(((n[k] + 1.0) * 0.5).clamp(0.0, 1.0)))
            })
            .collect()
    });
    let colors: Vec<T> = slice_targets(&batch.colors);
    let heat_t: Vec<T> = slice_targets(&batch.heat);
    let patch_t: Option<Vec<T>> = patch.map(|_| slice_targets(&batch.colors[split * 3..]));
    compute_losses(
        tape,
        &Prediction {
            color,
            coarse_color,
            heat: Some(heat),
            patch,
            coord,
        },
        &Targets {
            color: &colors,
            heat: Some(&heat_t),
            patch: patch_t.as_deref(),
            coord: coord_target.as_deref(),
        },
        &cfg.loss,
        batch.patch_size,
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: u64,
    pub lr: f64,
    pub l_col: f64,
    pub l_perc: f64,
    pub l_heat: f64,
    pub l_coord: f64,
    pub total: f64,
}

/// Trained parameters with the state needed to resume.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub store: ParamStore<f32>,
    pub optimizer: Option<AdamState<f32>>,
    pub step: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CheckpointMeta {
    step: u64,
    config_hash: String,
    config: ModelConfig,
    optimizer: Option<OptimizerMeta>,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
struct OptimizerMeta {
    step: u64,
    lr: f64,
    base_lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

const META: &str = "meta";
const PARAM: &str = "param:";
const FIRST: &str = "adam.m:";
const SECOND: &str = "adam.v:";

impl Checkpoint {
    pub fn model(&self) -> Result<Model<f32>> {
        Model::from_store(&self.config, self.store.clone())
    }

    pub fn config_hash(&self) -> String {
        self.config.hash()
    }

    /// Error unless the checkpoint was trained with `expected`.
    pub fn ensure_compatible(&self, expected: &ModelConfig) -> Result<()> {
        if self.config.hash() != expected.hash() {
            return Err(Error::Incompatible(format!(
                "checkpoint config hash {} differs from expected {}",
                self.config.hash(),
                expected.hash()
            )));
        }
        Ok(())
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let meta = CheckpointMeta {
        step: ckpt.step,
        config_hash: ckpt.config.hash(),
        config: ckpt.config.clone(),
        optimizer: ckpt.optimizer.as_ref().map(|a| OptimizerMeta {
            step: a.step,
            lr: a.lr,
            base_lr: a.base_lr,
            beta1: a.beta1,
            beta2: a.beta2,
            eps: a.eps,
        }),
    };
    let text = serde_json::to_vec(&meta).expect("metadata serialises");
    let mut records: Vec<(String, TensorData)> = vec![(
        META.to_string(),
        TensorData::U8 {
            shape: vec![text.len()],
            data: text,
        },
    )];
    for (_, name, t) in ckpt.store.iter() {
        records.push((format!("{PARAM}{name}"), TensorData::F32(t.clone())));
    }
    if let Some(adam) = &ckpt.optimizer {
        for ((_, name, _), (m, v)) in ckpt.store.iter().zip(adam.first.iter().zip(&adam.second)) {
            records.push((format!("{FIRST}{name}"), TensorData::F32(m.clone())));
            records.push((format!("{SECOND}{name}"), TensorData::F32(v.clone())));
        }
    }
    ghtf::save_records(path, records.iter().map(|(n, d)| (Some(n.as_str()), d)))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let records = ghtf::load_records(path)?;
    let bad = |msg: &str| Error::Format(format!("{}: {msg}", path.display()));
    let meta_rec = records
        .iter()
        .find(|r| r.name.as_deref() == Some(META))
        .ok_or_else(|| bad("no metadata record"))?;
    let TensorData::U8 { data, .. } = &meta_rec.data else {
        return Err(bad("metadata record is not bytes"));
    };
    let meta: CheckpointMeta = serde_json::from_slice(data).map_err(|e| Error::json(path, e))?;
    if meta.config.hash() != meta.config_hash {
        return Err(Error::Incompatible(format!(
            "{}: stored config hash {} does not match its config ({})",
            path.display(),
            meta.config_hash,
            meta.config.hash()
        )));
    }
    let mut store = ParamStore::new();
    let mut first = Vec::new();
    let mut second = Vec::new();
    for r in &records {
        let Some(name) = &r.name else { continue };
        if let Some(p) = name.strip_prefix(PARAM) {
            store.add(p, r.data.clone().into_exact::<f32>()?)?;
        } else if name.starts_with(FIRST) {
            first.push(r.data.clone().into_exact::<f32>()?);
        } else if name.starts_with(SECOND) {
            second.push(r.data.clone().into_exact::<f32>()?);
        }
    }
    let optimizer = match meta.optimizer {
        Some(o) => {
            if first.len() != store.len() || second.len() != store.len() {
                return Err(bad("optimizer moments do not cover every parameter"));
            }
            Some(AdamState {
                first,
                second,
                step: o.step,
                beta1: o.beta1,
                beta2: o.beta2,
                eps: o.eps,
                lr: o.lr,
                base_lr: o.base_lr,
            })
        }
        None => None,
    };
    // binding validates names and shapes against the config
    Model::from_store(&meta.config, store.clone())?;
    Ok(Checkpoint {
        config: meta.config,
        store,
        optimizer,
        step: meta.step,
    })
}

/// Stateful training over an in-memory dataset.
pub struct Trainer<'d> {
    cfg: TrainConfig,
    dataset: &'d Dataset,
    model: Model<f32>,
    adam: AdamState<f32>,
    step: u64,
    train_frames: Vec<usize>,
    train_cams: Vec<usize>,
}

impl<'d> Trainer<'d> {
    pub fn new(cfg: &TrainConfig, dataset: &'d Dataset) -> Result<Self> {
        cfg.validate(dataset)?;
        let model = Model::new(&cfg.resolved_model(dataset), cfg.seed)?;
        let adam = AdamState::new(&model.store, cfg.lr);
        Self::assemble(cfg, dataset, model, adam, 0)
    }

    /// Continue from a checkpoint written by a run with the same config.
    pub fn resume(cfg: &TrainConfig, dataset: &'d Dataset, ckpt: &Checkpoint) -> Result<Self> {
        cfg.validate(dataset)?;
        ckpt.ensure_compatible(&cfg.resolved_model(dataset))?;
        let model = ckpt.model()?;
        let adam = ckpt
            .optimizer
            .clone()
            .ok_or_else(|| Error::Incompatible("checkpoint carries no optimizer state".into()))?;
        Self::assemble(cfg, dataset, model, adam, ckpt.step)
    }

    fn assemble(cfg: &TrainConfig, dataset: &'d Dataset, model: Model<f32>, adam: AdamState<f32>, step: u64) -> Result<Self> {
        Ok(Self {
            cfg: cfg.clone(),
            dataset,
            model,
            adam,
            step,
            train_frames: dataset.training_frames(),
            train_cams: dataset.training_cameras(),
        })
    }

    pub fn model(&self) -> &Model<f32> {
        &self.model
    }

    pub fn steps_done(&self) -> u64 {
        self.step
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.model.config().clone(),
            store: self.model.store.clone(),
            optimizer: Some(self.adam.clone()),
            step: self.step,
        }
    }

    /// Randomness of step `s` depends only on the seed and `s`, so
    /// resumed runs replay the same batches.
    fn step_rng(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed);
        rng.set_stream(self.step + 1);
        rng
    }

    /// One optimisation step. Parameters are untouched when it fails.
    pub fn step(&mut self) -> Result<StepLog> {
        halve_lr_schedule(&mut self.adam, self.step, self.cfg.lr_halving_period)?;
        let mut rng = self.step_rng();
        let (frame, view, batch) = loop {
            let frame = &self.dataset.frames[self.train_frames[rng.gen_range(0..self.train_frames.len())]];
            let cam = self.train_cams[rng.gen_range(0..self.train_cams.len())];
            let Some(view) = frame.view(cam) else { continue };
            match sample_ray_batch(
                frame,
                view,
                self.cfg.rays,
                if self.cfg.perceptual_loss { self.cfg.patches } else { 0 },
                self.cfg.patch_size,
                self.cfg.sampling,
                self.cfg.dense_feature_mode,
                &mut rng,
            ) {
                Ok(b) if !b.rays.is_empty() => break (frame, view, b),
                Ok(_) => log::warn!("no usable rays in subject {} frame {} camera {cam}", frame.subject, frame.frame),
                Err(Error::Argument(msg)) => log::warn!("skipping subject {} frame {}: {msg}", frame.subject, frame.frame),
                Err(e) => return Err(e),
            }
        };
        let sources = choose_sources(self.dataset, &view.camera, self.cfg.source_views);
        let sources = source_views(frame, &sources)?;
        let mut tape = Tape::new();
        let mut jitter = Jitter::On(&mut rng);
        let loss = batch_loss(&self.model, &mut tape, &sources, &batch, &self.cfg, SamplingMode::Guided, &mut jitter)?;
        let values = loss.values(&tape);
        if !values.total.is_finite() {
            return Err(Error::Numeric(format!("loss is not finite at step {}", self.step)));
        }
        let grads = tape.backward(loss.total, None)?;
        self.adam.step(&mut self.model.store, &grads)?;
        let log = StepLog {
            step: self.step,
            lr: self.adam.lr,
            l_col: values.l_col,
            l_perc: values.l_perc,
            l_heat: values.l_heat,
            l_coord: values.l_coord,
            total: values.total,
        };
        self.step += 1;
        Ok(log)
    }
}

/// Result of a full training run.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub log: Vec<StepLog>,
}

pub const CHECKPOINT_FILE: &str = "checkpoint.ghtf";
pub const METRICS_FILE: &str = "metrics.jsonl";

/// Run `cfg.steps` steps. With an output directory, the per-step log is
/// written as JSON lines and a checkpoint is saved periodically and at
/// the end; a non-finite loss saves the last good state and aborts.
pub fn train_on(cfg: &TrainConfig, dataset: &Dataset, out_dir: Option<&Path>, mut on_step: impl FnMut(&StepLog)) -> Result<TrainOutcome> {
    let mut trainer = Trainer::new(cfg, dataset)?;
    let mut writer = match out_dir {
        Some(d) => {
            std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
            let p = d.join(METRICS_FILE);
            Some((BufWriter::new(File::create(&p).map_err(|e| Error::io(&p, e))?), p))
        }
        None => None,
    };
    let mut log = Vec::with_capacity(cfg.steps as usize);
    while trainer.steps_done() < cfg.steps {
        let entry = match trainer.step() {
            Ok(entry) => entry,
            Err(e @ Error::Numeric(_)) => {
                if let Some(d) = out_dir {
                    save_checkpoint(&trainer.checkpoint(), &d.join(CHECKPOINT_FILE))?;
                }
                return Err(e);
            }
            Err(e) => return Err(e),
        };
        if let Some((w, p)) = writer.as_mut() {
            let line = serde_json::to_string(&entry).expect("log entry serialises");
            writeln!(w, "{line}").map_err(|e| Error::io(p.as_path(), e))?;
        }
        on_step(&entry);
        log.push(entry);
        let done = trainer.steps_done();
        if let Some(d) = out_dir {
            if cfg.checkpoint_every > 0 && done % cfg.checkpoint_every == 0 && done < cfg.steps {
                save_checkpoint(&trainer.checkpoint(), &d.join(CHECKPOINT_FILE))?;
            }
        }
    }
    if let Some((mut w, p)) = writer {
        w.flush().map_err(|e| Error::io(p, e))?;
    }
    let checkpoint = trainer.checkpoint();
    if let Some(d) = out_dir {
        save_checkpoint(&checkpoint, &d.join(CHECKPOINT_FILE))?;
    }
    Ok(TrainOutcome { checkpoint, log })
}

/// Open `cfg.dataset` and train on it.
pub fn train(cfg: &TrainConfig, out_dir: Option<&Path>) -> Result<TrainOutcome> {
    let dataset = Dataset::open(&cfg.dataset)?;
    train_on(cfg, &dataset, out_dir, |_| {})
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    /// Training subjects seen from cameras never used in training.
    HeldOutCameras,
    /// Unseen subjects seen from the held-out cameras.
    HeldOutSubjects,
    /// Training subjects and cameras.
    Train,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalOptions {
    pub split: Split,
    pub source_views: usize,
    pub mode: SamplingMode,
    pub pck_alpha: f64,
    pub extraction: ExtractionParams,
    /// Cap on the number of evaluated images, taken in order.
    pub max_images: Option<usize>,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            split: Split::HeldOutCameras,
            source_views: 3,
            mode: SamplingMode::Guided,
            pck_alpha: 0.2,
            extraction: ExtractionParams::default(),
            max_images: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageEval {
    pub subject: usize,
    pub frame: usize,
    pub camera: usize,
    pub psnr_db: Psnr,
    pub ssim: f64,
    pub heatmap_mse: f64,
    pub pck: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub split: Split,
    pub images: usize,
    /// Mean over images with finite PSNR.
    pub psnr_db: f64,
    pub ssim: f64,
    pub heatmap_mse: f64,
    pub pck: f64,
    /// Not computed: it needs a pretrained network.
    pub lpips: String,
    pub samples_per_ray: usize,
    pub per_frame: Vec<ImageEval>,
}

/// Render one view of `frame` from nearby training cameras, with rays
/// clipped to the frame's subject box.
pub fn render_frame_view(
    model: &Model<f32>,
    dataset: &Dataset,
    frame: &FrameData,
    target: &Camera,
    sources: Option<&[usize]>,
    n_sources: usize,
    mode: SamplingMode,
) -> Result<RenderOutput> {
    let chosen = match sources {
        Some(s) => s.to_vec(),
        None => choose_sources(dataset, target, n_sources),
    };
    let views = source_views(frame, &chosen)?;
    let encoded = model.encode_views_detached(&views)?;
    model.render_image(&encoded, target, &frame.bounds, mode)
}

pub fn eval_targets(dataset: &Dataset, split: Split) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for (i, f) in dataset.frames.iter().enumerate() {
        let cams = match split {
            Split::HeldOutCameras if !f.held_out_subject => dataset.held_out_cameras(),
            Split::HeldOutSubjects if f.held_out_subject => dataset.held_out_cameras(),
            Split::Train if !f.held_out_subject => dataset.training_cameras(),
            _ => continue,
        };
        out.extend(cams.into_iter().map(|c| (i, c)));
    }
    out
}

pub fn evaluate(model: &Model<f32>, dataset: &Dataset, opts: &EvalOptions) -> Result<EvalReport> {
    if model.heat_channels() != dataset.num_joints() {
        return Err(Error::Incompatible(format!(
            "model renders {} heatmaps, dataset has {} joints",
            model.heat_channels(),
            dataset.num_joints()
        )));
    }
    let mut targets = eval_targets(dataset, opts.split);
    if let Some(m) = opts.max_images {
        targets.truncate(m);
    }
    if targets.is_empty() {
        return Err(Error::Argument(format!("split {:?} has no images", opts.split)));
    }
    let mut per_frame = Vec::with_capacity(targets.len());
    let mut samples_per_ray = 0;
    for (fi, cam) in targets {
        let frame = &dataset.frames[fi];
        let view = frame
            .view(cam)
            .ok_or_else(|| Error::Format(format!("frame lacks camera {cam}")))?;
        let sources = choose_sources(dataset, &view.camera, opts.source_views);
        let out = render_frame_view(model, dataset, frame, &view.camera, Some(&sources), opts.source_views, opts.mode)?;
        samples_per_ray = out.samples_per_ray;
        let region = box_mask(&view.camera, &frame.bounds)?;
        let gt_heat = view
            .heatmaps
            .as_ref()
            .ok_or_else(|| Error::Argument("evaluation view has no heatmaps".into()))?;
        let pred = extract_keypoints_2d(&out.heatmaps, &opts.extraction)?;
        per_frame.push(ImageEval {
            subject: frame.subject,
            frame: frame.frame,
            camera: cam,
            psnr_db: psnr(&out.rgb, &view.image, &region)?,
            ssim: ssim(&out.rgb, &view.image, Some(&region))?,
            heatmap_mse: heatmap_mse(&out.heatmaps, gt_heat)?,
            pck: pck(&pred.joints, &view.joints2d, opts.pck_alpha, dataset.manifest.torso_pair)?,
        });
    }
    let n = per_frame.len() as f64;
    let finite: Vec<f64> = per_frame.iter().map(|e| e.psnr_db.db()).filter(|v| v.is_finite()).collect();
    Ok(EvalReport {
        split: opts.split,
        images: per_frame.len(),
        psnr_db: if finite.is_empty() {
            f64::INFINITY
        } else {
            finite.iter().sum::<f64>() / finite.len() as f64
        },
        ssim: per_frame.iter().map(|e| e.ssim).sum::<f64>() / n,
        heatmap_mse: per_frame.iter().map(|e| e.heatmap_mse).sum::<f64>() / n,
        pck: per_frame.iter().map(|e| e.pck).sum::<f64>() / n,
        lpips: "n/a".into(),
        samples_per_ray,
        per_frame,
    })
}

#[cfg(test)]
mod tests;
