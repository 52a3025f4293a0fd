//! Heatmap containers, ground-truth splatting and keypoint extraction.
//!
//! Pixel coordinates follow the image convention used everywhere else:
//! pixel `(x, y)` covers `[x, x+1) × [y, y+1)` and its centre sits at
//! `(x + 0.5, y + 0.5)`.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Aabb, Vec3};

/// `channels × height × width` image-space heatmaps.
#[derive(Debug, Clone, PartialEq)]
pub struct HeatmapStack {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

impl HeatmapStack {
    pub fn zeros(width: usize, height: usize, channels: usize) -> Self {
        Self {
            width,
            height,
            channels,
            data: vec![0.0; width * height * channels],
        }
    }

    pub fn new(width: usize, height: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != width * height * channels {
            return Err(Error::Shape(format!(
                "{} values for {channels}x{height}x{width} heatmaps",
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn channel(&self, j: usize) -> &[f32] {
        let n = self.width * self.height;
        &self.data[j * n..(j + 1) * n]
    }

    pub fn channel_mut(&mut self, j: usize) -> &mut [f32] {
        let n = self.width * self.height;
        &mut self.data[j * n..(j + 1) * n]
    }

    pub fn get(&self, j: usize, x: usize, y: usize) -> f32 {
        self.data[(j * self.height + y) * self.width + x]
    }
}

/// Axis-aligned voxel grid; voxel `(i, j, k)` is centred at
/// `min + (idx + 0.5) · pitch`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub bounds: Aabb,
    pub dims: [usize; 3],
}

impl GridSpec {
    pub fn new(bounds: Aabb, dims: [usize; 3]) -> Result<Self> {
        if dims.iter().any(|&d| d < 2) {
            return Err(Error::Argument(format!("grid resolution {dims:?} must be at least 2 per axis")));
        }
        let e = bounds.extent();
        if (0..3).any(|i| !(e[i] > 0.0) || !e[i].is_finite()) {
            return Err(Error::Argument(format!("degenerate grid box {bounds:?}")));
        }
        Ok(Self { bounds, dims })
    }

    pub fn pitch(&self) -> Vec3 {
        let e = self.bounds.extent();
        Vec3::new(
            e[0] / self.dims[0] as f64,
            e[1] / self.dims[1] as f64,
            e[2] / self.dims[2] as f64,
        )
    }

    pub fn len(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Flat index, x-major: `(i · ny + j) · nz + k`.
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        (i * self.dims[1] + j) * self.dims[2] + k
    }

    /// World position of a (possibly fractional) voxel coordinate.
    pub fn world(&self, idx: [f64; 3]) -> Vec3 {
        let p = self.pitch();
        let m = self.bounds.min;
        Vec3::new(
            m[0] + (idx[0] + 0.5) * p[0],
            m[1] + (idx[1] + 0.5) * p[1],
            m[2] + (idx[2] + 0.5) * p[2],
        )
    }

    pub fn centers(&self) -> Vec<Vec3> {
        let mut out = Vec::with_capacity(self.len());
        for i in 0..self.dims[0] {
            for j in 0..self.dims[1] {
                for k in 0..self.dims[2] {
                    out.push(self.world([i as f64, j as f64, k as f64]));
                }
            }
        }
        out
    }
}

/// Per-channel volumes, `channels × nx × ny × nz`.
#[derive(Debug, Clone, PartialEq)]
pub struct HeatmapVolume {
    pub grid: GridSpec,
    pub channels: usize,
    pub data: Vec<f32>,
}

impl HeatmapVolume {
    pub fn channel(&self, j: usize) -> &[f32] {
        let n = self.grid.len();
        &self.data[j * n..(j + 1) * n]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Joint2D {
    pub u: f64,
    pub v: f64,
    pub confidence: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Joint3D {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub confidence: f64,
}

/// One optional location per joint; absent joints are `None`, never a
/// placeholder coordinate.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct JointSet<J> {
    pub joints: Vec<Option<J>>,
}

pub type JointSet2D = JointSet<Joint2D>;
pub type JointSet3D = JointSet<Joint3D>;

impl<J> JointSet<J> {
    pub fn absent(n: usize) -> Self {
        Self {
            joints: (0..n).map(|_| None).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.joints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.joints.is_empty()
    }

    pub fn present(&self) -> usize {
        self.joints.iter().filter(|j| j.is_some()).count()
    }
}

impl JointSet2D {
    /// Ground-truth set from pixel coordinates with full confidence.
    pub fn from_points(points: &[[f64; 2]]) -> Self {
        Self {
            joints: points
                .iter()
                .map(|p| {
                    Some(Joint2D {
                        u: p[0],
                        v: p[1],
                        confidence: 1.0,
                    })
                })
                .collect(),
        }
    }
}

#[derive(Serialize, Deserialize)]
struct IdJoint<J> {
    id: usize,
    #[serde(flatten)]
    joint: J,
}

#[derive(Serialize, Deserialize)]
struct JointsJson<J> {
    joints: Vec<IdJoint<J>>,
}

impl<J: Serialize + Clone> Serialize for JointSet<J> {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        JointsJson {
            joints: self
                .joints
                .iter()
                .enumerate()
                .filter_map(|(id, j)| j.clone().map(|joint| IdJoint { id, joint }))
                .collect(),
        }
        .serialize(s)
    }
}

impl<J> JointSet<J> {
    /// Rebuild from the serialised form, which omits absent joints.
    pub fn from_json(value: &str, count: usize) -> Result<Self>
    where
        J: for<'de> Deserialize<'de>,
    {
        let parsed: JointsJson<J> =
            serde_json::from_str(value).map_err(|e| Error::Argument(format!("joint JSON: {e}")))?;
        let mut set = Self::absent(count);
        for IdJoint { id, joint } in parsed.joints {
            if id >= count {
                return Err(Error::Argument(format!("joint id {id} out of range for {count} joints")));
            }
            set.joints[id] = Some(joint);
        }
        Ok(set)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExtractionParams {
    pub gaussian_sigma: f64,
    pub threshold: f64,
    pub min_region_size: usize,
}

impl Default for ExtractionParams {
    fn default() -> Self {
        Self {
            gaussian_sigma: 2.0,
            threshold: 0.3,
            min_region_size: 4,
        }
    }
}

impl ExtractionParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.gaussian_sigma > 0.0) || !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::Argument(format!("invalid extraction parameters {self:?}")));
        }
        Ok(())
    }
}

/// Render one Gaussian per present joint, peak 1 at the joint.
pub fn splat_gt_heatmap(joints: &JointSet2D, sigma_px: f64, width: usize, height: usize) -> Result<HeatmapStack> {
    if !(sigma_px > 0.0) {
        return Err(Error::Argument(format!("splat sigma {sigma_px} must be positive")));
    }
    let mut out = HeatmapStack::zeros(width, height, joints.len());
    let inv = 1.0 / (2.0 * sigma_px * sigma_px);
    for (j, joint) in joints.joints.iter().enumerate() {
        let Some(p) = joint else { continue };
        let chan = out.channel_mut(j);
        for y in 0..height {
            let dy = y as f64 + 0.5 - p.v;
            for x in 0..width {
                let dx = x as f64 + 0.5 - p.u;
                chan[y * width + x] = (-(dx * dx + dy * dy) * inv).exp() as f32;
            }
        }
    }
    Ok(out)
}

/// Normalised 1-D Gaussian taps with radius `ceil(3σ)`.
fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil() as isize;
    let mut k: Vec<f64> = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Separable blur of an N-d grid (row-major, last axis fastest) with
/// edge replication.
fn blur(values: &[f64], dims: &[usize], sigma: f64) -> Vec<f64> {
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as isize;
    let mut cur = values.to_vec();
    for axis in 0..dims.len() {
        let stride: usize = dims[axis + 1..].iter().product();
        let n = dims[axis] as isize;
        let mut next = vec![0.0; cur.len()];
        for (idx, out) in next.iter_mut().enumerate() {
            let pos = ((idx / stride) % dims[axis]) as isize;
            let base = idx as isize - pos * stride as isize;
            let mut acc = 0.0;
            for (t, w) in k.iter().enumerate() {
                let q = (pos + t as isize - r).clamp(0, n - 1);
                acc += w * cur[(base + q * stride as isize) as usize];
            }
            *out = acc;
        }
        cur = next;
    }
    cur
}

/// Connected regions of `mask` (row-major over `dims`), using full
/// neighbourhood connectivity (8 in 2-D, 26 in 3-D).
fn regions(mask: &[bool], dims: &[usize]) -> Vec<Vec<usize>> {
    let nd = dims.len();
    let mut offsets: Vec<Vec<isize>> = vec![vec![]];
    for _ in 0..nd {
        offsets = offsets
            .into_iter()
            .flat_map(|o| [-1isize, 0, 1].map(|d| [o.clone(), vec![d]].concat()))
            .collect();
    }
    offsets.retain(|o| o.iter().any(|&d| d != 0));
    let strides: Vec<usize> = (0..nd).map(|a| dims[a + 1..].iter().product()).collect();
    let coord = |idx: usize| -> Vec<isize> { (0..nd).map(|a| ((idx / strides[a]) % dims[a]) as isize).collect() };

    let mut seen = vec![false; mask.len()];
    let mut out = Vec::new();
    for start in 0..mask.len() {
        if !mask[start] || seen[start] {
            continue;
        }
        seen[start] = true;
        let mut queue = VecDeque::from([start]);
        let mut members = Vec::new();
        while let Some(i) = queue.pop_front() {
            members.push(i);
            let c = coord(i);
            'next: for o in &offsets {
                let mut j = 0usize;
                for a in 0..nd {
                    let q = c[a] + o[a];
                    if q < 0 || q >= dims[a] as isize {
                        continue 'next;
                    }
                    j += q as usize * strides[a];
                }
                if mask[j] && !seen[j] {
                    seen[j] = true;
                    queue.push_back(j);
                }
            }
        }
        out.push(members);
    }
    out
}

/// Sub-voxel offset of a peak from three samples along one axis, from a
/// parabola through their logarithms (exact for Gaussian profiles).
fn log_parabola_offset(left: f64, centre: f64, right: f64) -> f64 {
    if left <= 0.0 || centre <= 0.0 || right <= 0.0 {
        return 0.0;
    }
    let (l, c, r) = (left.ln(), centre.ln(), right.ln());
    let denom = l - 2.0 * c + r;
    if denom >= -1e-12 {
        return 0.0;
    }
    (0.5 * (l - r) / denom).clamp(-0.5, 0.5)
}

/// A detected peak: fractional grid coordinate, the raw value at the
/// peak cell and the smoothed score used for ranking.
#[derive(Debug, Clone, PartialEq)]
pub struct Peak {
    pub coord: Vec<f64>,
    pub value: f64,
    pub score: f64,
}

/// Smooth, threshold, label, and return one peak per region, best
/// first.
pub fn find_peaks(values: &[f32], dims: &[usize], params: &ExtractionParams) -> Result<Vec<Peak>> {
    params.validate()?;
    let raw: Vec<f64> = values.iter().map(|&v| v as f64).collect();
    let smooth = blur(&raw, dims, params.gaussian_sigma);
    let mask: Vec<bool> = smooth.iter().map(|&v| v > params.threshold).collect();
    let nd = dims.len();
    let strides: Vec<usize> = (0..nd).map(|a| dims[a + 1..].iter().product()).collect();
    let mut peaks: Vec<Peak> = regions(&mask, dims)
        .into_iter()
        .filter(|r| r.len() >= params.min_region_size)
        .map(|r| {
            let best = *r
                .iter()
                .max_by(|&&a, &&b| smooth[a].total_cmp(&smooth[b]).then(b.cmp(&a)))
                .expect("regions are non-empty");
            let coord = (0..nd)
                .map(|a| {
                    let pos = (best / strides[a]) % dims[a];
                    let off = if pos > 0 && pos + 1 < dims[a] {
                        log_parabola_offset(smooth[best - strides[a]], smooth[best], smooth[best + strides[a]])
                    } else {
                        0.0
                    };
                    pos as f64 + off
                })
                .collect();
            Peak {
                coord,
                value: raw[best].clamp(0.0, 1.0),
                score: smooth[best],
            }
        })
        .collect();
    peaks.sort_by(|a, b| b.score.total_cmp(&a.score));
    Ok(peaks)
}

/// Per-joint best peak plus every region's peak as a candidate list.
#[derive(Debug, Clone, PartialEq)]
pub struct Extraction2D {
    pub joints: JointSet2D,
    pub candidates: Vec<Vec<Joint2D>>,
}

pub fn extract_keypoints_2d(heatmaps: &HeatmapStack, params: &ExtractionParams) -> Result<Extraction2D> {
    let dims = [heatmaps.height, heatmaps.width];
    let mut joints = JointSet2D::absent(heatmaps.channels);
    let mut candidates = Vec::with_capacity(heatmaps.channels);
    for j in 0..heatmaps.channels {
        let found: Vec<Joint2D> = find_peaks(heatmaps.channel(j), &dims, params)?
            .into_iter()
            .map(|p| Joint2D {
                u: p.coord[1] + 0.5,
                v: p.coord[0] + 0.5,
                confidence: p.value,
            })
            .collect();
        joints.joints[j] = found.first().copied();
        candidates.push(found);
    }
    Ok(Extraction2D { joints, candidates })
}

pub fn extract_keypoints_3d(volume: &HeatmapVolume, params: &ExtractionParams) -> Result<JointSet3D> {
    let dims = volume.grid.dims;
    let mut out = JointSet3D::absent(volume.channels);
    for j in 0..volume.channels {
        if let Some(p) = find_peaks(volume.channel(j), &dims, params)?.into_iter().next() {
            let w = volume.grid.world([p.coord[0], p.coord[1], p.coord[2]]);
            out.joints[j] = Some(Joint3D {
                x: w[0],
                y: w[1],
                z: w[2],
                confidence: p.value,
            });
        }
    }
    Ok(out)
}
