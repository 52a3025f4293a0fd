//! Convolutional image encoder, pixel-aligned feature lookup and
//! multi-view pooling.
//!
//! An encoder runs a short stack of 3×3 convolutions at reduced
//! resolution and bilinearly upsamples the result back to the source
//! image size. Feature maps are stored channels-last so that a lookup at
//! a projected point is one contiguous read per bilinear tap.

use std::path::Path;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffmath::{Activation, OutOfBounds, ParamId, ParamStore, Real, Tape, Tensor, Var};
use crate::error::{shape_err, Error, Result};
use crate::ghtf;
use crate::imaging::RgbImage;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub channels: Vec<usize>,
    pub strides: Vec<usize>,
    /// Append the raw RGB of the source image to the learned channels.
    pub rgb_skip: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            channels: vec![16, 32, 64, 64],
            strides: vec![2, 1, 2, 1],
            rgb_skip: true,
        }
    }
}

impl EncoderConfig {
    pub fn out_channels(&self) -> usize {
        self.channels.last().copied().unwrap_or(0) + if self.rgb_skip { 3 } else { 0 }
    }

    fn validate(&self) -> Result<()> {
        if self.channels.is_empty() || self.channels.len() != self.strides.len() {
            return Err(Error::Argument(format!(
                "encoder needs matching channel and stride lists, got {:?} / {:?}",
                self.channels, self.strides
            )));
        }
        if self.channels.contains(&0) || self.strides.contains(&0) {
            return Err(Error::Argument("encoder widths and strides must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct ConvLayer {
    weight: ParamId,
    bias: ParamId,
    stride: usize,
}

#[derive(Debug, Clone)]
pub struct Encoder {
    layers: Vec<ConvLayer>,
    config: EncoderConfig,
}

impl Encoder {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        prefix: &str,
        config: &EncoderConfig,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        config.validate()?;
        let mut layers = Vec::new();
        let mut cin = 3;
        for (i, (&cout, &stride)) in config.channels.iter().zip(&config.strides).enumerate() {
            let limit = (6.0 / (cin * 9) as f64).sqrt();
            let w = (0..cout * cin * 9)
                .map(|_| T::lit(rng.gen_range(-limit..limit)))
                .collect();
            let weight = store.add(format!("{prefix}.conv{i}.weight"), Tensor::new(vec![cout, cin, 3, 3], w)?)?;
            let bias = store.add(format!("{prefix}.conv{i}.bias"), Tensor::zeros(&[cout]))?;
            layers.push(ConvLayer { weight, bias, stride });
            cin = cout;
        }
        Ok(Self {
            layers,
            config: config.clone(),
        })
    }

    pub fn bind<T: Real>(store: &ParamStore<T>, prefix: &str, config: &EncoderConfig) -> Result<Self> {
        config.validate()?;
        let mut layers = Vec::new();
        let mut cin = 3;
        for (i, (&cout, &stride)) in config.channels.iter().zip(&config.strides).enumerate() {
            let find = |suffix: &str| {
                store
                    .id_of(&format!("{prefix}.conv{i}.{suffix}"))
                    .ok_or_else(|| Error::Incompatible(format!("missing {prefix}.conv{i}.{suffix}")))
            };
            let weight = find("weight")?;
            let bias = find("bias")?;
            if store.get(weight).shape() != [cout, cin, 3, 3] {
                return Err(Error::Incompatible(format!(
                    "{prefix}.conv{i}.weight has shape {:?}",
                    store.get(weight).shape()
                )));
            }
            layers.push(ConvLayer { weight, bias, stride });
            cin = cout;
        }
        Ok(Self {
            layers,
            config: config.clone(),
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn out_channels(&self) -> usize {
        self.config.out_channels()
    }

    /// Encode one image into a full-resolution feature map recorded on
    /// `tape`.
    pub fn encode<T: Real>(
        &self,
        store: &ParamStore<T>,
        tape: &mut Tape<T>,
        image: &RgbImage,
    ) -> Result<FeatureMap<T>> {
        let (w, h) = (image.width, image.height);
        let mut chw = vec![T::zero(); 3 * h * w];
        for (p, px) in image.data.chunks_exact(3).enumerate() {
            for c in 0..3 {
                chw[c * h * w + p] = T::lit(px[c] as f64);
            }
        }
        let mut x = tape.leaf(Tensor::new(vec![3, h, w], chw)?);
        for layer in &self.layers {
            let wv = tape.param(store, layer.weight);
            let bv = tape.param(store, layer.bias);
            x = tape.conv2d(x, wv, bv, layer.stride)?;
            x = tape.activation(x, Activation::Relu)?;
        }
        let learned = tape.upsample_hwc(x, h, w)?;
        let mut map = FeatureMap {
            width: w,
            height: h,
            parts: vec![MapPart::Tape {
                var: learned,
                channels: *self.config.channels.last().unwrap(),
            }],
        };
        if self.config.rgb_skip {
            map.parts.push(MapPart::Const(Arc::new(rgb_tensor(image)?)));
        }
        Ok(map)
    }
}

fn rgb_tensor<T: Real>(image: &RgbImage) -> Result<Tensor<T>> {
    Tensor::new(
        vec![image.height, image.width, 3],
        image.data.iter().map(|&x| T::lit(x as f64)).collect(),
    )
}

#[derive(Debug, Clone)]
enum MapPart<T> {
    Tape { var: Var, channels: usize },
    Const(Arc<Tensor<T>>),
}

/// A channels-last feature grid aligned with its source image. Parts
/// are either live tape values (trainable) or shared constants.
#[derive(Debug, Clone)]
pub struct FeatureMap<T> {
    width: usize,
    height: usize,
    parts: Vec<MapPart<T>>,
}

impl<T: Real> FeatureMap<T> {
    /// Wrap a constant `[h, w, c]` tensor.
    pub fn constant(hwc: Tensor<T>) -> Result<Self> {
        let [h, w, _] = hwc.shape()[..] else {
            return Err(shape_err!("feature map must be [h, w, c], got {:?}", hwc.shape()));
        };
        Ok(Self {
            width: w,
            height: h,
            parts: vec![MapPart::Const(Arc::new(hwc))],
        })
    }

    /// Wrap a raw image as a three-channel constant map.
    pub fn from_image(image: &RgbImage) -> Result<Self> {
        Self::constant(rgb_tensor(image)?)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.parts
            .iter()
            .map(|p| match p {
                MapPart::Tape { channels, .. } => *channels,
                MapPart::Const(t) => t.shape()[2],
            })
            .sum()
    }

    pub fn is_constant(&self) -> bool {
        self.parts.iter().all(|p| matches!(p, MapPart::Const(_)))
    }

    /// Freeze tape-backed parts into shared constants so the map can be
    /// reused across tapes (inference).
    pub fn detach(&self, tape: &Tape<T>) -> Self {
        Self {
            width: self.width,
            height: self.height,
            parts: self
                .parts
                .iter()
                .map(|p| match p {
                    MapPart::Tape { var, .. } => MapPart::Const(Arc::new(tape.value(*var).clone())),
                    MapPart::Const(t) => MapPart::Const(t.clone()),
                })
                .collect(),
        }
    }

    /// Append another map's channels.
    pub fn concat(mut self, other: FeatureMap<T>) -> Result<Self> {
        if (self.width, self.height) != (other.width, other.height) {
            return Err(shape_err!(
                "feature maps {}x{} and {}x{} cannot be stacked",
                self.width,
                self.height,
                other.width,
                other.height
            ));
        }
        self.parts.extend(other.parts);
        Ok(self)
    }

    /// Dense `[h·w, c]` copy of the map's current values.
    pub fn values(&self, tape: Option<&Tape<T>>) -> Result<Tensor<T>> {
        let n = self.width * self.height;
        let tensors: Vec<&Tensor<T>> = self
            .parts
            .iter()
            .map(|p| match p {
                MapPart::Tape { var, .. } => tape
                    .map(|t| t.value(*var))
                    .ok_or_else(|| Error::State("tape-backed feature map read without its tape".into())),
                MapPart::Const(t) => Ok(t.as_ref()),
            })
            .collect::<Result<_>>()?;
        let widths: Vec<usize> = tensors.iter().map(|t| t.shape()[2]).collect();
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(n * total);
        for p in 0..n {
            for (t, &c) in tensors.iter().zip(&widths) {
                out.extend_from_slice(&t.data()[p * c..(p + 1) * c]);
            }
        }
        Tensor::new(vec![n, total], out)
    }

    /// Pixel-aligned lookup at continuous image coordinates (pixel
    /// centres at integer + 0.5); returns `[points, c]`.
    pub fn sample(&self, tape: &mut Tape<T>, coords: &[(T, T)], policy: OutOfBounds) -> Result<Var> {
        if coords.is_empty() {
            return Err(Error::Argument("no lookup coordinates".into()));
        }
        let mut cols = Vec::with_capacity(self.parts.len());
        for part in &self.parts {
            cols.push(match part {
                MapPart::Tape { var, .. } => tape.gather_bilinear(*var, coords, policy)?,
                MapPart::Const(t) => tape.gather_bilinear_const(t, coords, policy)?,
            });
        }
        if cols.len() == 1 {
            Ok(cols[0])
        } else {
            tape.concat_cols(&cols)
        }
    }
}

/// Single-point convenience around [`FeatureMap::sample`].
pub fn sample_feature<T: Real>(
    map: &FeatureMap<T>,
    tape: &mut Tape<T>,
    u: T,
    v: T,
    policy: OutOfBounds,
) -> Result<Vec<T>> {
    let var = map.sample(tape, &[(u, v)], policy)?;
    Ok(tape.value(var).data().to_vec())
}

/// Elementwise mean and population variance across views.
#[derive(Debug, Clone, PartialEq)]
pub struct PooledFeature<T> {
    pub mean: Vec<T>,
    pub variance: Vec<T>,
}

impl<T: Real> PooledFeature<T> {
    /// `mean ‖ variance`, the layout the field consumes.
    pub fn concatenated(&self) -> Vec<T> {
        self.mean.iter().chain(&self.variance).copied().collect()
    }
}

pub fn pool_views<T: Real>(per_view: &[&[T]]) -> Result<PooledFeature<T>> {
    let Some(first) = per_view.first() else {
        return Err(Error::Argument("pooling needs at least one view".into()));
    };
    let c = first.len();
    if per_view.iter().any(|v| v.len() != c) {
        return Err(shape_err!("pooled views differ in length"));
    }
    let n = T::lit(per_view.len() as f64);
    let mean: Vec<T> = (0..c)
        .map(|i| per_view.iter().map(|v| v[i]).fold(T::zero(), |a, b| a + b) / n)
        .collect();
    let variance = (0..c)
        .map(|i| {
            per_view
                .iter()
                .map(|v| (v[i] - mean[i]) * (v[i] - mean[i]))
                .fold(T::zero(), |a, b| a + b)
                / n
        })
        .collect();
    Ok(PooledFeature { mean, variance })
}

/// Load an externally computed `C×H×W` feature tensor. When `expected`
/// is given, the stored shape must match it.
pub fn load_feature_file<T: Real>(path: &Path, expected: Option<[usize; 3]>) -> Result<FeatureMap<T>> {
    let chw: Tensor<T> = ghtf::load_tensor(path)?;
    let [c, h, w] = chw.shape()[..] else {
        return Err(Error::Format(format!(
            "{}: feature tensor must be C×H×W, found {:?}",
            path.display(),
            chw.shape()
        )));
    };
    if let Some(exp) = expected {
        if exp != [c, h, w] {
            return Err(Error::Format(format!(
                "{}: manifest declares {exp:?} but file holds {:?}",
                path.display(),
                [c, h, w]
            )));
        }
    }
    let src = chw.data();
    let mut hwc = vec![T::zero(); c * h * w];
    for ch in 0..c {
        for p in 0..h * w {
            hwc[p * c + ch] = src[ch * h * w + p];
        }
    }
    FeatureMap::constant(Tensor::new(vec![h, w, c], hwc)?)
}
