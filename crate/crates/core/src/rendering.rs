//! Ray sampling and the discrete volume-rendering quadrature.
//!
//! Along a ray with samples `t_1 < … < t_N` and spacings `δ_i`, each
//! sample contributes `w_i = T_i · (1 − exp(−σ_i δ_i))` where
//! `T_i = exp(−Σ_{j<i} σ_j δ_j)`. Colors and heatmaps are the
//! `w`-weighted sums of the per-sample values; the background is black.

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::FieldOutput;
use crate::geometry::{Ray, Vec3};

/// Sample positions along one ray and their quadrature spacings.
#[derive(Debug, Clone, PartialEq)]
pub struct RaySamples {
    pub t: Vec<f64>,
    pub delta: Vec<f64>,
}

impl RaySamples {
    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }

    /// Spacing `t_{i+1} − t_i`, closing the last interval at `end`.
    pub fn from_positions(t: Vec<f64>, end: f64) -> Self {
        let delta = (0..t.len())
            .map(|i| {
                let next = t.get(i + 1).copied().unwrap_or(end);
                (next - t[i]).max(0.0)
            })
            .collect();
        Self { t, delta }
    }

    pub fn points(&self, ray: &Ray) -> Vec<Vec3> {
        self.t.iter().map(|&t| ray.point_at(t)).collect()
    }
}

/// Where inside each stratification bin a sample lands.
pub enum Jitter<'a> {
    /// Bin midpoints; deterministic evaluation mode.
    Off,
    /// One uniform draw per bin.
    On(&'a mut dyn RngCore),
}

/// `n` stratified samples over `[lo, hi]`.
pub fn stratified(lo: f64, hi: f64, n: usize, jitter: &mut Jitter<'_>) -> Result<RaySamples> {
    if n == 0 {
        return Err(Error::Argument("at least one sample per ray is required".into()));
    }
    if !(hi > lo) || !lo.is_finite() || !hi.is_finite() {
        return Err(Error::Argument(format!("empty sampling interval [{lo}, {hi}]")));
    }
    let width = (hi - lo) / n as f64;
    let t = (0..n)
        .map(|i| {
            let f = match jitter {
                Jitter::Off => 0.5,
                Jitter::On(rng) => rng.gen::<f64>(),
            };
            lo + (i as f64 + f) * width
        })
        .collect();
    Ok(RaySamples::from_positions(t, hi))
}

pub fn sample_uniform(ray: &Ray, n: usize, jitter: &mut Jitter<'_>) -> Result<RaySamples> {
    stratified(ray.t_near, ray.t_far, n, jitter)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompositeResult {
    pub color: [f64; 3],
    pub heatmap: Vec<f64>,
    pub weight_sum: f64,
    pub expected_depth: f64,
    pub depth_variance: f64,
    pub weights: Vec<f64>,
}

impl CompositeResult {
    /// Result for a ray that never touches the scene.
    pub fn empty(channels: usize) -> Self {
        Self {
            color: [0.0; 3],
            heatmap: vec![0.0; channels],
            weight_sum: 0.0,
            expected_depth: 0.0,
            depth_variance: 0.0,
            weights: Vec::new(),
        }
    }
}

/// Quadrature weights for densities `sigma` and spacings `delta`.
pub fn quadrature_weights(sigma: &[f64], delta: &[f64]) -> Result<Vec<f64>> {
    if sigma.len() != delta.len() {
        return Err(Error::Shape(format!("{} densities for {} spacings", sigma.len(), delta.len())));
    }
    let mut optical = 0.0f64;
    let mut out = Vec::with_capacity(sigma.len());
    for (&s, &d) in sigma.iter().zip(delta) {
        if !s.is_finite() {
            return Err(Error::Numeric(format!("density {s}")));
        }
        if s < 0.0 || !(d >= 0.0) {
            return Err(Error::Argument(format!("negative density {s} or spacing {d}")));
        }
        let a = s * d;
        out.push((-optical).exp() * -(-a).exp_m1());
        optical += a;
    }
    Ok(out)
}

/// Weighted mean and variance of sample depths, normalised by the
/// total weight.
pub fn depth_moments(t: &[f64], weights: &[f64]) -> (f64, f64, f64) {
    let sum: f64 = weights.iter().sum();
    if !(sum > 0.0) {
        return (0.0, 0.0, 0.0);
    }
    let mean = t.iter().zip(weights).map(|(t, w)| t * w).sum::<f64>() / sum;
    let var = t.iter().zip(weights).map(|(t, w)| w * (t - mean).powi(2)).sum::<f64>() / sum;
    (sum, mean, var.max(0.0))
}

/// Composite per-sample field outputs along one ray.
pub fn composite(samples: &RaySamples, outputs: &[FieldOutput<f64>]) -> Result<CompositeResult> {
    if outputs.len() != samples.len() {
        return Err(Error::Shape(format!("{} outputs for {} samples", outputs.len(), samples.len())));
    }
    let sigma: Vec<f64> = outputs.iter().map(|o| o.sigma).collect();
    let weights = quadrature_weights(&sigma, &samples.delta)?;
    let channels = outputs.first().map_or(0, |o| o.heatmap.len());
    let mut color = [0.0; 3];
    let mut heatmap = vec![0.0; channels];
    for (w, o) in weights.iter().zip(outputs) {
        for c in 0..3 {
            color[c] += w * o.color[c];
        }
        if o.heatmap.len() != channels {
            return Err(Error::Shape("heatmap width varies along the ray".into()));
        }
        for (h, v) in heatmap.iter_mut().zip(&o.heatmap) {
            *h += w * v;
        }
    }
    let (weight_sum, expected_depth, depth_variance) = depth_moments(&samples.t, &weights);
    Ok(CompositeResult {
        color,
        heatmap,
        weight_sum,
        expected_depth,
        depth_variance,
        weights,
    })
}

/// A closed-form radiance field, used as a quadrature oracle.
pub trait AnalyticField {
    fn query(&self, x: Vec3, dir: Vec3) -> FieldOutput<f64>;
}

/// Composite `n_dense` deterministic stratified samples of an analytic
/// field.
pub fn dense_reference_composite(ray: &Ray, field: &dyn AnalyticField, n_dense: usize) -> Result<CompositeResult> {
    let samples = sample_uniform(ray, n_dense, &mut Jitter::Off)?;
    composite_analytic(ray, field, &samples)
}

pub fn composite_analytic(ray: &Ray, field: &dyn AnalyticField, samples: &RaySamples) -> Result<CompositeResult> {
    let outputs: Vec<FieldOutput<f64>> = samples.points(ray).into_iter().map(|p| field.query(p, ray.dir)).collect();
    composite(samples, &outputs)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplingConfig {
    pub n_coarse: usize,
    pub n_fine: usize,
    /// Half-width of the fine window in coarse depth standard deviations.
    pub k: f64,
    /// Minimum fine window width as a fraction of the scene diameter.
    pub min_window_frac: f64,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self {
            n_coarse: 32,
            n_fine: 8,
            k: 3.0,
            min_window_frac: 0.02,
        }
    }
}

/// Fine-pass interval around the coarse depth estimate, or `None` when
/// the coarse pass saw nothing (or the window collapses) and the caller
/// should fall back to uniform sampling.
pub fn fine_window(
    weight_sum: f64,
    mean: f64,
    variance: f64,
    ray: &Ray,
    k: f64,
    min_width: f64,
) -> Option<(f64, f64)> {
    if !(weight_sum > 1e-6) || !mean.is_finite() || !variance.is_finite() {
        return None;
    }
    let half = (k * variance.sqrt()).max(0.5 * min_width);
    let lo = (mean - half).max(ray.t_near);
    let hi = (mean + half).min(ray.t_far);
    (hi - lo > 1e-9).then_some((lo, hi))
}

pub fn depth_guided_samples(
    coarse: &CompositeResult,
    ray: &Ray,
    n_fine: usize,
    k: f64,
    min_width: f64,
    jitter: &mut Jitter<'_>,
) -> Result<RaySamples> {
    match fine_window(coarse.weight_sum, coarse.expected_depth, coarse.depth_variance, ray, k, min_width) {
        Some((lo, hi)) => stratified(lo, hi, n_fine, jitter),
        None => sample_uniform(ray, n_fine, jitter),
    }
}

/// Coarse-then-fine rendering of an analytic field.
pub fn render_analytic_guided(
    ray: &Ray,
    field: &dyn AnalyticField,
    cfg: &SamplingConfig,
    min_width: f64,
) -> Result<CompositeResult> {
    let coarse_s = sample_uniform(ray, cfg.n_coarse, &mut Jitter::Off)?;
    let coarse = composite_analytic(ray, field, &coarse_s)?;
    let fine_s = depth_guided_samples(&coarse, ray, cfg.n_fine, cfg.k, min_width, &mut Jitter::Off)?;
    composite_analytic(ray, field, &fine_s)
}
