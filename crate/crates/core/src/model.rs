//! The conditioned radiance field as a whole: source-view encoding,
//! pixel-aligned feature pooling, coarse/fine ray passes, and full image
//! and volume rendering.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::diffmath::{OutOfBounds, ParamStore, Real, Tape, Tensor, Var};
use crate::encoder::{Encoder, EncoderConfig, FeatureMap};
use crate::error::{Error, Result};
use crate::field::{Field, FieldBatch, FieldConfig, FieldVars};
use crate::geometry::{Aabb, Camera, Ray, Vec3};
use crate::imaging::{Mask, RgbImage};
use crate::keypoints::{GridSpec, HeatmapStack, HeatmapVolume};
use crate::rendering::{depth_moments, fine_window, stratified, Jitter, RaySamples, SamplingConfig};

/// Where the features fed to the heatmap head come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HumanSource {
    /// A second trainable encoder.
    Encoder,
    /// The same pooled features the trunk receives.
    Tied,
    /// Precomputed per-view feature files.
    External,
    /// No human features; the head sees only the trunk output.
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub human_encoder: EncoderConfig,
    /// Condition the trunk on pooled image features.
    pub condition_image: bool,
    pub human: HumanSource,
    /// Channel count of external feature files.
    pub external_channels: usize,
    /// Field settings; the two feature widths are derived from the
    /// encoder settings by [`ModelConfig::field_config`].
    pub field: FieldConfig,
    pub sampling: SamplingConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            human_encoder: EncoderConfig {
                channels: vec![16, 32, 32],
                strides: vec![2, 1, 1],
                rgb_skip: true,
            },
            condition_image: true,
            human: HumanSource::Encoder,
            external_channels: 0,
            field: FieldConfig::default(),
            sampling: SamplingConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn field_config(&self) -> Result<FieldConfig> {
        let mut f = self.field.clone();
        f.img_channels = if self.condition_image {
            2 * self.encoder.out_channels()
        } else {
            0
        };
        f.human_channels = match self.human {
            HumanSource::Encoder => 2 * self.human_encoder.out_channels(),
            HumanSource::Tied if !self.condition_image => {
                return Err(Error::Argument("tied human features need image conditioning".into()))
            }
            HumanSource::Tied => f.img_channels,
            HumanSource::External if self.external_channels == 0 => {
                return Err(Error::Argument("external human features need a channel count".into()))
            }
            HumanSource::External => 2 * self.external_channels,
            HumanSource::None => 0,
        };
        Ok(f)
    }

    /// Stable digest of the architecture-relevant settings.
    pub fn hash(&self) -> String {
        let text = serde_json::to_string(self).expect("config serialises");
        Sha256::digest(text.as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// One conditioning view.
#[derive(Debug, Clone, Copy)]
pub struct SourceView<'a> {
    pub image: &'a RgbImage,
    pub camera: &'a Camera,
    /// Channels-last `[h, w, c]` external features for this view.
    pub external: Option<&'a Tensor<f32>>,
}

/// Feature maps of the source views, ready for lookups.
#[derive(Debug, Clone)]
pub struct EncodedViews<T> {
    cameras: Vec<Camera>,
    img: Vec<FeatureMap<T>>,
    human: Vec<FeatureMap<T>>,
    reference: Vec3,
    depth_offset: f64,
    depth_scale: f64,
}

impl<T: Real> EncodedViews<T> {
    pub fn len(&self) -> usize {
        self.cameras.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cameras.is_empty()
    }

    pub fn cameras(&self) -> &[Camera] {
        &self.cameras
    }

    /// Copy every tape-backed map into constants so the views can be
    /// shared by independent tapes.
    pub fn detach(&self, tape: &Tape<T>) -> Self {
        Self {
            cameras: self.cameras.clone(),
            img: self.img.iter().map(|m| m.detach(tape)).collect(),
            human: self.human.iter().map(|m| m.detach(tape)).collect(),
            reference: self.reference,
            depth_offset: self.depth_offset,
            depth_scale: self.depth_scale,
        }
    }

    /// Distance of `x` from the first source camera, shifted and scaled
    /// so the scene box spans roughly `[-1, 1]`.
    pub fn normalized_depth(&self, x: Vec3) -> f64 {
        ((x - self.reference).norm() - self.depth_offset) / self.depth_scale
    }

    fn pooled(&self, maps: &[FeatureMap<T>], tape: &mut Tape<T>, coords: &[Vec<(T, T)>]) -> Result<Var> {
        let per_view = maps
            .iter()
            .zip(coords)
            .map(|(m, c)| m.sample(tape, c, OutOfBounds::Zero))
            .collect::<Result<Vec<_>>>()?;
        tape.pool_mean_var(&per_view)
    }
}

/// Tape handles of one batched pass over `rays × samples`.
#[derive(Debug, Clone)]
pub struct PassVars {
    pub rays: usize,
    pub samples: usize,
    pub field: FieldVars,
    /// Quadrature weights `[rays, samples]`.
    pub weights: Var,
    /// Composited color `[rays, 3]`.
    pub color: Var,
    /// Composited heatmaps `[rays, J]` when requested.
    pub heat: Option<Var>,
    /// Sample positions, ray-major.
    pub points: Vec<Vec3>,
    pub t: Vec<f64>,
}

/// Coarse and fine passes of a batch of rays on one tape.
#[derive(Debug, Clone)]
pub struct RayRender {
    pub coarse: Option<PassVars>,
    pub fine: PassVars,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SamplingMode {
    /// Uniform coarse pass, then a fine pass around the coarse depth.
    Guided,
    /// A single uniform pass with this many samples.
    Uniform(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VolumeMode {
    /// Heat head value at each grid centre.
    Direct,
    /// Heat scaled by the opacity of a voxel-sized step.
    DensityWeighted,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RenderOutput {
    pub rgb: RgbImage,
    pub heatmaps: HeatmapStack,
    pub depth: Vec<f32>,
    pub mask: Mask,
    pub weight_sum: Vec<f32>,
    /// Field evaluations per ray that hit the scene box.
    pub samples_per_ray: usize,
}

const TILE: usize = 256;
const BEHIND: f64 = -1.0e6;

#[derive(Debug, Clone)]
pub struct Model<T> {
    config: ModelConfig,
    field_config: FieldConfig,
    pub store: ParamStore<T>,
    img_encoder: Option<Encoder>,
    human_encoder: Option<Encoder>,
    field: Field,
}

impl<T: Real> Model<T> {
    pub fn new(config: &ModelConfig, seed: u64) -> Result<Self> {
        let field_config = config.field_config()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let img_encoder = if config.condition_image {
            Some(Encoder::new(&mut store, "img_encoder", &config.encoder, &mut rng)?)
        } else {
            None
        };
        let human_encoder = if config.human == HumanSource::Encoder {
            Some(Encoder::new(&mut store, "human_encoder", &config.human_encoder, &mut rng)?)
        } else {
            None
        };
        let field = Field::new(&mut store, "field", &field_config, &mut rng)?;
        Ok(Self {
            config: config.clone(),
            field_config,
            store,
            img_encoder,
            human_encoder,
            field,
        })
    }

    /// Attach a model structure to existing parameters.
    pub fn from_store(config: &ModelConfig, store: ParamStore<T>) -> Result<Self> {
        let field_config = config.field_config()?;
        let img_encoder = if config.condition_image {
            Some(Encoder::bind(&store, "img_encoder", &config.encoder)?)
        } else {
            None
        };
        let human_encoder = if config.human == HumanSource::Encoder {
            Some(Encoder::bind(&store, "human_encoder", &config.human_encoder)?)
        } else {
            None
        };
        let field = Field::bind(&store, "field", &field_config)?;
        Ok(Self {
            config: config.clone(),
            field_config,
            store,
            img_encoder,
            human_encoder,
            field,
        })
    }

    pub fn cast<U: Real>(&self) -> Result<Model<U>> {
        Model::from_store(&self.config, self.store.cast())
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn field(&self) -> &Field {
        &self.field
    }

    pub fn heat_channels(&self) -> usize {
        self.field_config.heat_channels
    }

    pub fn scene_bounds(&self) -> Aabb {
        self.field_config.bounds
    }

    pub fn encode_views(&self, tape: &mut Tape<T>, views: &[SourceView<'_>]) -> Result<EncodedViews<T>> {
        let first = views
            .first()
            .ok_or_else(|| Error::Argument("at least one source view is required".into()))?;
        let mut img = Vec::new();
        let mut human = Vec::new();
        for v in views {
            if let Some(enc) = &self.img_encoder {
                img.push(enc.encode(&self.store, tape, v.image)?);
            }
            match self.config.human {
                HumanSource::Encoder => {
                    let enc = self.human_encoder.as_ref().expect("built with the config");
                    human.push(enc.encode(&self.store, tape, v.image)?);
                }
                HumanSource::External => {
                    let t = v
                        .external
                        .ok_or_else(|| Error::Argument("source view lacks external features".into()))?;
                    let shape = t.shape();
                    if shape != [v.image.height, v.image.width, self.config.external_channels] {
                        return Err(Error::Shape(format!(
                            "external features {shape:?} for a {}x{} view with {} channels",
                            v.image.width, v.image.height, self.config.external_channels
                        )));
                    }
                    human.push(FeatureMap::constant(t.cast())?);
                }
                HumanSource::Tied | HumanSource::None => {}
            }
        }
        let reference = first.camera.center();
        let bounds = self.field_config.bounds;
        Ok(EncodedViews {
            cameras: views.iter().map(|v| *v.camera).collect(),
            img,
            human,
            reference,
            depth_offset: (bounds.center() - reference).norm(),
            depth_scale: 0.5 * bounds.diameter(),
        })
    }

    /// Encode views without keeping a tape, for inference.
    pub fn encode_views_detached(&self, views: &[SourceView<'_>]) -> Result<EncodedViews<T>> {
        let mut tape = Tape::new();
        let enc = self.encode_views(&mut tape, views)?;
        Ok(enc.detach(&tape))
    }

    /// Field evaluation at arbitrary points with pooled conditioning.
    pub fn query(
        &self,
        tape: &mut Tape<T>,
        views: &EncodedViews<T>,
        points: &[Vec3],
        dirs: &[Vec3],
        want_heat: bool,
    ) -> Result<FieldVars> {
        let need_coords = !views.img.is_empty() || !views.human.is_empty();
        let coords: Vec<Vec<(T, T)>> = if need_coords {
            views
                .cameras
                .iter()
                .map(|cam| {
                    points
                        .iter()
                        .map(|&x| match cam.project(x) {
                            Ok((u, v, _)) => (T::lit(u), T::lit(v)),
                            Err(_) => (T::lit(BEHIND), T::lit(BEHIND)),
                        })
                        .collect()
                })
                .collect()
        } else {
            Vec::new()
        };
        let img = if views.img.is_empty() {
            None
        } else {
            Some(views.pooled(&views.img, tape, &coords)?)
        };
        let human = match self.config.human {
            HumanSource::None => None,
            HumanSource::Tied => img,
            _ if !want_heat => None,
            _ => Some(views.pooled(&views.human, tape, &coords)?),
        };
        let depths: Vec<f64> = points.iter().map(|&x| views.normalized_depth(x)).collect();
        self.field.forward(
            &self.store,
            tape,
            &FieldBatch {
                points,
                dirs,
                depths: &depths,
                img,
                human,
            },
            want_heat,
        )
    }

    /// One pass over equally sized sample sets.
    pub fn pass(
        &self,
        tape: &mut Tape<T>,
        views: &EncodedViews<T>,
        rays: &[Ray],
        samples: &[RaySamples],
        want_heat: bool,
    ) -> Result<PassVars> {
        let r = rays.len();
        if r == 0 || samples.len() != r {
            return Err(Error::Shape(format!("{} sample sets for {r} rays", samples.len())));
        }
        let s = samples[0].len();
        if samples.iter().any(|x| x.len() != s) {
            return Err(Error::Shape("rays in one pass need equal sample counts".into()));
        }
        let mut points = Vec::with_capacity(r * s);
        let mut dirs = Vec::with_capacity(r * s);
        let mut t = Vec::with_capacity(r * s);
        let mut deltas = Vec::with_capacity(r * s);
        for (ray, smp) in rays.iter().zip(samples) {
            points.extend(smp.points(ray));
            dirs.extend(std::iter::repeat_n(ray.dir, s));
            t.extend_from_slice(&smp.t);
            deltas.extend(smp.delta.iter().map(|&d| T::lit(d)));
        }
        let field = self.query(tape, views, &points, &dirs, want_heat)?;
        let sigma = tape.reshape(field.sigma, &[r, s])?;
        let weights = tape.render_weights(sigma, &deltas)?;
        let color = tape.ray_weighted_sum(weights, field.color)?;
        let heat = match field.heat {
            Some(h) => Some(tape.ray_weighted_sum(weights, h)?),
            None => None,
        };
        Ok(PassVars {
            rays: r,
            samples: s,
            field,
            weights,
            color,
            heat,
            points,
            t,
        })
    }

    /// Coarse uniform pass followed by a depth-guided fine pass; heatmaps
    /// come from the fine pass only.
    pub fn render_rays(
        &self,
        tape: &mut Tape<T>,
        views: &EncodedViews<T>,
        rays: &[Ray],
        mode: SamplingMode,
        jitter: &mut Jitter<'_>,
    ) -> Result<RayRender> {
        let cfg = &self.config.sampling;
        let uniform = |n: usize, jitter: &mut Jitter<'_>| -> Result<Vec<RaySamples>> {
            rays.iter().map(|ray| stratified(ray.t_near, ray.t_far, n, jitter)).collect()
        };
        match mode {
            SamplingMode::Uniform(n) => {
                let samples = uniform(n, jitter)?;
                let fine = self.pass(tape, views, rays, &samples, true)?;
                Ok(RayRender { coarse: None, fine })
            }
            SamplingMode::Guided => {
                let samples = uniform(cfg.n_coarse, jitter)?;
                let coarse = self.pass(tape, views, rays, &samples, false)?;
                let min_width = cfg.min_window_frac * self.field_config.bounds.diameter();
                let w = tape.value(coarse.weights).data();
                let mut fine_samples = Vec::with_capacity(rays.len());
                for (i, ray) in rays.iter().enumerate() {
                    let row: Vec<f64> = w[i * coarse.samples..(i + 1) * coarse.samples].iter().map(|x| x.as_f64()).collect();
                    let (sum, mean, var) = depth_moments(&samples[i].t, &row);
                    fine_samples.push(match fine_window(sum, mean, var, ray, cfg.k, min_width) {
                        Some((lo, hi)) => stratified(lo, hi, cfg.n_fine, jitter)?,
                        None => stratified(ray.t_near, ray.t_far, cfg.n_fine, jitter)?,
                    });
                }
                let fine = self.pass(tape, views, rays, &fine_samples, true)?;
                Ok(RayRender {
                    coarse: Some(coarse),
                    fine,
                })
            }
        }
    }

    /// Render a full image. Rays are clipped to `bounds`; pixels whose
    /// rays miss it stay black with mask 0.
    pub fn render_image(
        &self,
        views: &EncodedViews<T>,
        target: &Camera,
        bounds: &Aabb,
        mode: SamplingMode,
    ) -> Result<RenderOutput> {
        if views.is_empty() {
            return Err(Error::Argument("at least one source view is required".into()));
        }
        let (w, h) = (target.width() as usize, target.height() as usize);
        let j = self.heat_channels();
        let mut rays = Vec::new();
        for row in 0..h {
            for col in 0..w {
                if let Some(ray) = target.pixel_ray_in_box(col as u32, row as u32, bounds)? {
                    rays.push((row * w + col, ray));
                }
            }
        }
        let tiles: Vec<Result<Vec<(usize, [f32; 3], Vec<f32>, f32, f32)>>> = rays
            .par_chunks(TILE)
            .map(|chunk| {
                let mut tape = Tape::new();
                let rs: Vec<Ray> = chunk.iter().map(|(_, r)| *r).collect();
                let out = self.render_rays(&mut tape, views, &rs, mode, &mut Jitter::Off)?;
                let fine = &out.fine;
                let color = tape.value(fine.color).data();
                let heat = fine.heat.map(|v| tape.value(v).data());
                let wts = tape.value(fine.weights).data();
                Ok(chunk
                    .iter()
                    .enumerate()
                    .map(|(i, (pix, _))| {
                        let row: Vec<f64> = wts[i * fine.samples..(i + 1) * fine.samples].iter().map(|x| x.as_f64()).collect();
                        let (sum, mean, _) = depth_moments(&fine.t[i * fine.samples..(i + 1) * fine.samples], &row);
                        let rgb = [0, 1, 2].map(|c| color[i * 3 + c].as_f64() as f32);
                        let hv = heat.map_or_else(|| vec![0.0; j], |hd| hd[i * j..(i + 1) * j].iter().map(|x| x.as_f64() as f32).collect());
                        (*pix, rgb, hv, sum as f32, mean as f32)
                    })
                    .collect())
            })
            .collect();
        let mut rgb = RgbImage::black(w, h);
        let mut heatmaps = HeatmapStack::zeros(w, h, j);
        let mut depth = vec![0.0f32; w * h];
        let mut weight_sum = vec![0.0f32; w * h];
        let mut mask = Mask::filled(w, h, 0);
        for tile in tiles {
            for (pix, c, hv, sum, mean) in tile? {
                let (x, y) = (pix % w, pix / w);
                rgb.set_pixel(x, y, c);
                for (k, v) in hv.iter().enumerate() {
                    heatmaps.data[(k * h + y) * w + x] = v.clamp(0.0, 1.0);
                }
                weight_sum[pix] = sum;
                if sum > 0.5 {
                    mask.data[pix] = 255;
                    depth[pix] = mean;
                }
            }
        }
        let samples_per_ray = match mode {
            SamplingMode::Guided => self.config.sampling.n_coarse + self.config.sampling.n_fine,
            SamplingMode::Uniform(n) => n,
        };
        Ok(RenderOutput {
            rgb,
            heatmaps,
            depth,
            mask,
            weight_sum,
            samples_per_ray,
        })
    }

    /// Heatmap head evaluated directly at every grid centre.
    pub fn render_volume_heatmap(&self, views: &EncodedViews<T>, grid: &GridSpec, mode: VolumeMode) -> Result<HeatmapVolume> {
        let grid = GridSpec::new(grid.bounds, grid.dims)?;
        if views.is_empty() {
            return Err(Error::Argument("at least one source view is required".into()));
        }
        let j = self.heat_channels();
        let centers = grid.centers();
        let p = grid.pitch();
        let step = (p[0] + p[1] + p[2]) / 3.0;
        let chunks: Vec<Result<Vec<f32>>> = centers
            .par_chunks(1024)
            .map(|chunk| {
                let dirs: Vec<Vec3> = chunk
                    .iter()
                    .map(|&x| (x - views.reference).normalized().unwrap_or(Vec3::new(0.0, 0.0, -1.0)))
                    .collect();
                let mut tape = Tape::new();
                let vars = self.query(&mut tape, views, chunk, &dirs, true)?;
                let heat = tape.value(vars.heat.expect("heat requested")).data();
                let sigma = tape.value(vars.sigma).data();
                let mut out = Vec::with_capacity(chunk.len() * j);
                for i in 0..chunk.len() {
                    let scale = match mode {
                        VolumeMode::Direct => 1.0,
                        VolumeMode::DensityWeighted => -(-sigma[i].as_f64() * step).exp_m1(),
                    };
                    out.extend(heat[i * j..(i + 1) * j].iter().map(|v| (v.as_f64() * scale).clamp(0.0, 1.0) as f32));
                }
                Ok(out)
            })
            .collect();
        let n = grid.len();
        let mut data = vec![0.0f32; n * j];
        let mut base = 0;
        for chunk in chunks {
            let chunk = chunk?;
            let count = chunk.len() / j;
            for i in 0..count {
                for c in 0..j {
                    data[c * n + base + i] = chunk[i * j + c];
                }
            }
            base += count;
        }
        Ok(HeatmapVolume {
            grid,
            channels: j,
            data,
        })
    }
}

/// The `n` cameras closest to `target` (by centre distance), skipping
/// any that coincide with it. Ties keep input order.
pub fn nearest_views(target: &Camera, candidates: &[Camera], n: usize) -> Vec<usize> {
    let c = target.center();
    let mut order: Vec<(f64, usize)> = candidates
        .iter()
        .enumerate()
        .map(|(i, cam)| ((cam.center() - c).norm(), i))
        .filter(|(d, _)| *d > 1e-9)
        .collect();
    order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    order.into_iter().take(n).map(|(_, i)| i).collect()
}
