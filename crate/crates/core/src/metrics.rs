//! Image, heatmap and keypoint quality metrics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{Mask, RgbImage};
use crate::keypoints::{HeatmapStack, JointSet2D};

/// Peak signal-to-noise ratio; identical inputs have no finite value.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Psnr {
    Db(f64),
    Exact,
}

impl Psnr {
    /// The dB value, with `Exact` mapped to positive infinity.
    pub fn db(self) -> f64 {
        match self {
            Psnr::Db(v) => v,
            Psnr::Exact => f64::INFINITY,
        }
    }
}

impl Serialize for Psnr {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Psnr::Db(v) => s.serialize_f64(*v),
            Psnr::Exact => s.serialize_str("exact"),
        }
    }
}

impl<'de> Deserialize<'de> for Psnr {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Text(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(v) => Ok(Psnr::Db(v)),
            Raw::Text(t) if t == "exact" => Ok(Psnr::Exact),
            Raw::Text(t) => Err(serde::de::Error::custom(format!("unexpected PSNR value {t:?}"))),
        }
    }
}

fn check_same(pred: &RgbImage, gt: &RgbImage) -> Result<()> {
    if pred.width != gt.width || pred.height != gt.height {
        return Err(Error::Shape(format!(
            "image sizes differ: {}x{} vs {}x{}",
            pred.width, pred.height, gt.width, gt.height
        )));
    }
    Ok(())
}

fn check_mask(mask: &Mask, width: usize, height: usize) -> Result<()> {
    if mask.width != width || mask.height != height {
        return Err(Error::Shape(format!(
            "{}x{} mask for a {width}x{height} image",
            mask.width, mask.height
        )));
    }
    Ok(())
}

/// Mean squared error over the masked pixels (all three channels).
pub fn masked_mse(pred: &RgbImage, gt: &RgbImage, mask: &Mask) -> Result<f64> {
    check_same(pred, gt)?;
    check_mask(mask, pred.width, pred.height)?;
    let n = mask.count();
    if n == 0 {
        return Err(Error::Argument("empty evaluation mask".into()));
    }
    let sum: f64 = mask
        .data
        .iter()
        .enumerate()
        .filter(|(_, &m)| m >= 128)
        .flat_map(|(i, _)| (0..3).map(move |c| 3 * i + c))
        .map(|k| (pred.data[k] as f64 - gt.data[k] as f64).powi(2))
        .sum();
    Ok(sum / (3 * n) as f64)
}

pub fn psnr(pred: &RgbImage, gt: &RgbImage, mask: &Mask) -> Result<Psnr> {
    let mse = masked_mse(pred, gt, mask)?;
    Ok(if mse == 0.0 {
        Psnr::Exact
    } else {
        Psnr::Db(-10.0 * mse.log10())
    })
}

const SSIM_RADIUS: usize = 5;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

/// Gaussian-weighted local mean of a single-channel plane. The window is
/// truncated at the border and its weights renormalised over the part
/// that falls inside the image.
fn local_mean(plane: &[f64], w: usize, h: usize) -> Vec<f64> {
    let taps: Vec<f64> = (0..=2 * SSIM_RADIUS)
        .map(|i| {
            let d = i as f64 - SSIM_RADIUS as f64;
            (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()
        })
        .collect();
    let pass = |src: &[f64], len: usize, stride: usize, lines: usize, line_stride: usize| {
        let mut out = vec![0.0; src.len()];
        for line in 0..lines {
            for p in 0..len {
                let (mut acc, mut norm) = (0.0, 0.0);
                for (t, &g) in taps.iter().enumerate() {
                    let q = p as isize + t as isize - SSIM_RADIUS as isize;
                    if q >= 0 && (q as usize) < len {
                        acc += g * src[line * line_stride + q as usize * stride];
                        norm += g;
                    }
                }
                out[line * line_stride + p * stride] = acc / norm;
            }
        }
        out
    };
    let rows = pass(plane, w, 1, h, w);
    pass(&rows, h, w, w, 1)
}

/// Per-pixel SSIM map of one channel.
fn ssim_map(x: &[f64], y: &[f64], w: usize, h: usize) -> Vec<f64> {
    let mx = local_mean(x, w, h);
    let my = local_mean(y, w, h);
    let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
    let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
    let xy: Vec<f64> = x.iter().zip(y).map(|(a, b)| a * b).collect();
    let (exx, eyy, exy) = (local_mean(&xx, w, h), local_mean(&yy, w, h), local_mean(&xy, w, h));
    (0..w * h)
        .map(|i| {
            let vx = exx[i] - mx[i] * mx[i];
            let vy = eyy[i] - my[i] * my[i];
            let cxy = exy[i] - mx[i] * my[i];
            ((2.0 * mx[i] * my[i] + SSIM_C1) * (2.0 * cxy + SSIM_C2))
                / ((mx[i] * mx[i] + my[i] * my[i] + SSIM_C1) * (vx + vy + SSIM_C2))
        })
        .collect()
}

/// Windowed SSIM (11×11 Gaussian, σ = 1.5) averaged over channels and
/// over the masked pixels, or over every pixel without a mask.
pub fn ssim(pred: &RgbImage, gt: &RgbImage, mask: Option<&Mask>) -> Result<f64> {
    check_same(pred, gt)?;
    let (w, h) = (pred.width, pred.height);
    if let Some(m) = mask {
        check_mask(m, w, h)?;
        if m.count() == 0 {
            return Err(Error::Argument("empty evaluation mask".into()));
        }
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for c in 0..3 {
        let x: Vec<f64> = pred.data.iter().skip(c).step_by(3).map(|&v| v as f64).collect();
        let y: Vec<f64> = gt.data.iter().skip(c).step_by(3).map(|&v| v as f64).collect();
        for (i, s) in ssim_map(&x, &y, w, h).into_iter().enumerate() {
            if mask.is_none_or(|m| m.data[i] >= 128) {
                total += s;
                count += 1;
            }
        }
    }
    Ok(total / count as f64)
}

pub fn heatmap_mse(pred: &HeatmapStack, gt: &HeatmapStack) -> Result<f64> {
    if (pred.width, pred.height, pred.channels) != (gt.width, gt.height, gt.channels) {
        return Err(Error::Shape(format!(
            "heatmap shapes differ: {}x{}x{} vs {}x{}x{}",
            pred.channels, pred.height, pred.width, gt.channels, gt.height, gt.width
        )));
    }
    if pred.data.is_empty() {
        return Err(Error::Argument("empty heatmap stack".into()));
    }
    let sum: f64 = pred
        .data
        .iter()
        .zip(&gt.data)
        .map(|(&a, &b)| (a as f64 - b as f64).powi(2))
        .sum();
    Ok(sum / pred.data.len() as f64)
}

/// Fraction of ground-truth joints predicted within
/// `alpha · ‖gt[a] − gt[b]‖` (strictly); missing predictions are misses.
pub fn pck(pred: &JointSet2D, gt: &JointSet2D, alpha: f64, torso_pair: (usize, usize)) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(Error::Shape(format!("{} predicted joints for {} ground-truth joints", pred.len(), gt.len())));
    }
    let (a, b) = torso_pair;
    let (Some(ja), Some(jb)) = (gt.joints.get(a).copied().flatten(), gt.joints.get(b).copied().flatten()) else {
        return Err(Error::Argument(format!("ground truth lacks torso joints {a} and {b}")));
    };
    let torso = (ja.u - jb.u).hypot(ja.v - jb.v);
    if !(torso > 0.0) {
        return Err(Error::Argument("torso joints coincide".into()));
    }
    let radius = alpha * torso;
    let mut total = 0usize;
    let mut hits = 0usize;
    for (p, g) in pred.joints.iter().zip(&gt.joints) {
        let Some(g) = g else { continue };
        total += 1;
        if let Some(p) = p {
            if (p.u - g.u).hypot(p.v - g.v) < radius {
                hits += 1;
            }
        }
    }
    Ok(hits as f64 / total as f64)
}
