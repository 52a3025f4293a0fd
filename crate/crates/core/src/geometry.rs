//! Pinhole cameras, rays and scene bounds.
//!
//! Conventions: right-handed world, camera looks along its local −z
//! axis with +x to the right of the image and +y towards the top. Pixel
//! `(u, v)` is (column, row) with `v` growing downwards; the centre of
//! pixel `(i, j)` sits at `(i + 0.5, j + 0.5)`.

use std::ops::{Add, Index, Mul, Neg, Sub};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Vec3(pub [f64; 3]);

impl Vec3 {
    pub const ZERO: Vec3 = Vec3([0.0; 3]);

    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        Vec3([x, y, z])
    }

    pub fn x(self) -> f64 {
        self.0[0]
    }

    pub fn y(self) -> f64 {
        self.0[1]
    }

    pub fn z(self) -> f64 {
        self.0[2]
    }

    pub fn dot(self, o: Vec3) -> f64 {
        self.0[0] * o.0[0] + self.0[1] * o.0[1] + self.0[2] * o.0[2]
    }

    pub fn cross(self, o: Vec3) -> Vec3 {
        Vec3([
            self.0[1] * o.0[2] - self.0[2] * o.0[1],
            self.0[2] * o.0[0] - self.0[0] * o.0[2],
            self.0[0] * o.0[1] - self.0[1] * o.0[0],
        ])
    }

    pub fn norm(self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn normalized(self) -> Option<Vec3> {
        let n = self.norm();
        (n > 1e-12 && n.is_finite()).then(|| self * (1.0 / n))
    }

    pub fn map(self, f: impl Fn(f64) -> f64) -> Vec3 {
        Vec3(self.0.map(f))
    }

    pub fn min(self, o: Vec3) -> Vec3 {
        Vec3([self.0[0].min(o.0[0]), self.0[1].min(o.0[1]), self.0[2].min(o.0[2])])
    }

    pub fn max(self, o: Vec3) -> Vec3 {
        Vec3([self.0[0].max(o.0[0]), self.0[1].max(o.0[1]), self.0[2].max(o.0[2])])
    }

    pub fn is_finite(self) -> bool {
        self.0.iter().all(|x| x.is_finite())
    }
}

impl Add for Vec3 {
    type Output = Vec3;
    fn add(self, o: Vec3) -> Vec3 {
        Vec3([self.0[0] + o.0[0], self.0[1] + o.0[1], self.0[2] + o.0[2]])
    }
}

impl Sub for Vec3 {
    type Output = Vec3;
    fn sub(self, o: Vec3) -> Vec3 {
        Vec3([self.0[0] - o.0[0], self.0[1] - o.0[1], self.0[2] - o.0[2]])
    }
}

impl Mul<f64> for Vec3 {
    type Output = Vec3;
    fn mul(self, s: f64) -> Vec3 {
        Vec3(self.0.map(|x| x * s))
    }
}

impl Neg for Vec3 {
    type Output = Vec3;
    fn neg(self) -> Vec3 {
        self * -1.0
    }
}

impl Index<usize> for Vec3 {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

/// 3×3 rotation stored row-major.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Mat3(pub [[f64; 3]; 3]);

impl Mat3 {
    pub const IDENTITY: Mat3 = Mat3([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]);

    pub fn from_cols(a: Vec3, b: Vec3, c: Vec3) -> Self {
        Mat3([[a[0], b[0], c[0]], [a[1], b[1], c[1]], [a[2], b[2], c[2]]])
    }

    pub fn col(&self, j: usize) -> Vec3 {
        Vec3([self.0[0][j], self.0[1][j], self.0[2][j]])
    }

    pub fn mul_vec(&self, v: Vec3) -> Vec3 {
        let r = &self.0;
        Vec3([
            r[0][0] * v[0] + r[0][1] * v[1] + r[0][2] * v[2],
            r[1][0] * v[0] + r[1][1] * v[1] + r[1][2] * v[2],
            r[2][0] * v[0] + r[2][1] * v[1] + r[2][2] * v[2],
        ])
    }

    pub fn transpose(&self) -> Mat3 {
        let r = &self.0;
        Mat3([
            [r[0][0], r[1][0], r[2][0]],
            [r[0][1], r[1][1], r[2][1]],
            [r[0][2], r[1][2], r[2][2]],
        ])
    }

    pub fn mul_mat(&self, o: &Mat3) -> Mat3 {
        let mut out = [[0.0; 3]; 3];
        for (i, row) in out.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = (0..3).map(|k| self.0[i][k] * o.0[k][j]).sum();
            }
        }
        Mat3(out)
    }

    /// Rodrigues rotation from an axis-angle vector (radians).
    pub fn from_axis_angle(aa: Vec3) -> Mat3 {
        let theta = aa.norm();
        if theta < 1e-15 {
            return Mat3::IDENTITY;
        }
        let k = aa * (1.0 / theta);
        let (s, c) = theta.sin_cos();
        let t = 1.0 - c;
        let (x, y, z) = (k[0], k[1], k[2]);
        Mat3([
            [c + x * x * t, x * y * t - z * s, x * z * t + y * s],
            [y * x * t + z * s, c + y * y * t, y * z * t - x * s],
            [z * x * t - y * s, z * y * t + x * s, c + z * z * t],
        ])
    }

    /// Largest deviation of `R·Rᵀ` from the identity.
    pub fn orthonormality_error(&self) -> f64 {
        let p = self.mul_mat(&self.transpose());
        let mut worst: f64 = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                let e = if i == j { 1.0 } else { 0.0 };
                worst = worst.max((p.0[i][j] - e).abs());
            }
        }
        worst
    }

    pub fn determinant(&self) -> f64 {
        let r = &self.0;
        r[0][0] * (r[1][1] * r[2][2] - r[1][2] * r[2][1])
            - r[0][1] * (r[1][0] * r[2][2] - r[1][2] * r[2][0])
            + r[0][2] * (r[1][0] * r[2][1] - r[1][1] * r[2][0])
    }
}

/// Rotation + translation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rigid {
    pub rotation: Mat3,
    pub translation: Vec3,
}

impl Rigid {
    pub const IDENTITY: Rigid = Rigid {
        rotation: Mat3::IDENTITY,
        translation: Vec3::ZERO,
    };

    pub fn apply(&self, p: Vec3) -> Vec3 {
        self.rotation.mul_vec(p) + self.translation
    }

    pub fn apply_dir(&self, d: Vec3) -> Vec3 {
        self.rotation.mul_vec(d)
    }

    pub fn compose(&self, inner: &Rigid) -> Rigid {
        Rigid {
            rotation: self.rotation.mul_mat(&inner.rotation),
            translation: self.rotation.mul_vec(inner.translation) + self.translation,
        }
    }

    pub fn inverse(&self) -> Rigid {
        let rt = self.rotation.transpose();
        Rigid {
            rotation: rt,
            translation: -rt.mul_vec(self.translation),
        }
    }
}

/// Axis-aligned box.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aabb {
    pub min: Vec3,
    pub max: Vec3,
}

impl Aabb {
    pub fn new(min: Vec3, max: Vec3) -> Result<Self> {
        if (0..3).any(|i| !(min[i] < max[i])) {
            return Err(Error::Degenerate(format!("box {min:?}..{max:?} has no volume")));
        }
        Ok(Self { min, max })
    }

    pub fn from_points(points: impl IntoIterator<Item = Vec3>) -> Option<Self> {
        let mut it = points.into_iter();
        let first = it.next()?;
        let (lo, hi) = it.fold((first, first), |(lo, hi), p| (lo.min(p), hi.max(p)));
        Some(Self { min: lo, max: hi })
    }

    pub fn center(&self) -> Vec3 {
        (self.min + self.max) * 0.5
    }

    pub fn extent(&self) -> Vec3 {
        self.max - self.min
    }

    pub fn diameter(&self) -> f64 {
        self.extent().norm()
    }

    /// Grow each half-extent by `fraction` (0.05 = 5%).
    pub fn inflated(&self, fraction: f64) -> Aabb {
        let c = self.center();
        let half = self.extent() * (0.5 * (1.0 + fraction));
        Aabb {
            min: c - half,
            max: c + half,
        }
    }

    /// Grow each side by an absolute margin.
    pub fn padded(&self, margin: f64) -> Aabb {
        let m = Vec3::new(margin, margin, margin);
        Aabb {
            min: self.min - m,
            max: self.max + m,
        }
    }

    pub fn contains(&self, p: Vec3) -> bool {
        (0..3).all(|i| p[i] >= self.min[i] && p[i] <= self.max[i])
    }

    pub fn corners(&self) -> [Vec3; 8] {
        let (a, b) = (self.min, self.max);
        [
            Vec3::new(a[0], a[1], a[2]),
            Vec3::new(b[0], a[1], a[2]),
            Vec3::new(a[0], b[1], a[2]),
            Vec3::new(b[0], b[1], a[2]),
            Vec3::new(a[0], a[1], b[2]),
            Vec3::new(b[0], a[1], b[2]),
            Vec3::new(a[0], b[1], b[2]),
            Vec3::new(b[0], b[1], b[2]),
        ]
    }

    /// Slab test; returns the parametric interval clipped to `t ≥ 0`.
    pub fn ray_interval(&self, origin: Vec3, dir: Vec3) -> Option<(f64, f64)> {
        let mut t0 = 0.0f64;
        let mut t1 = f64::INFINITY;
        for i in 0..3 {
            if dir[i].abs() < 1e-15 {
                if origin[i] < self.min[i] || origin[i] > self.max[i] {
                    return None;
                }
                continue;
            }
            let inv = 1.0 / dir[i];
            let (mut a, mut b) = ((self.min[i] - origin[i]) * inv, (self.max[i] - origin[i]) * inv);
            if a > b {
                std::mem::swap(&mut a, &mut b);
            }
            t0 = t0.max(a);
            t1 = t1.min(b);
        }
        (t0 < t1).then_some((t0, t1))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ray {
    pub origin: Vec3,
    pub dir: Vec3,
    pub t_near: f64,
    pub t_far: f64,
}

impl Ray {
    pub fn new(origin: Vec3, dir: Vec3, t_near: f64, t_far: f64) -> Result<Self> {
        let dir = dir
            .normalized()
            .ok_or_else(|| Error::Degenerate("zero ray direction".into()))?;
        if !(t_near >= 0.0 && t_near < t_far && t_far.is_finite()) {
            return Err(Error::Argument(format!("ray interval [{t_near}, {t_far}]")));
        }
        Ok(Self {
            origin,
            dir,
            t_near,
            t_far,
        })
    }

    pub fn point_at(&self, t: f64) -> Vec3 {
        self.origin + self.dir * t
    }

    /// Restrict the interval to a box; `None` when the ray misses it.
    pub fn clipped_to(&self, aabb: &Aabb) -> Option<Ray> {
        let (a, b) = aabb.ray_interval(self.origin, self.dir)?;
        let (a, b) = (a.max(self.t_near), b.min(self.t_far));
        (a < b).then_some(Ray {
            t_near: a,
            t_far: b,
            ..*self
        })
    }
}

/// Default far bound for rays not yet clipped to a scene box.
pub const UNBOUNDED_FAR: f64 = 1.0e4;

/// Pinhole camera.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Camera {
    intrinsics: [[f64; 3]; 3],
    world_from_camera: Rigid,
    width: u32,
    height: u32,
}

impl Camera {
    pub fn new(
        intrinsics: [[f64; 3]; 3],
        world_from_camera: Rigid,
        width: u32,
        height: u32,
    ) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Argument("camera resolution must be positive".into()));
        }
        let k = &intrinsics;
        if !(k[0][0] > 0.0 && k[1][1] > 0.0) {
            return Err(Error::Argument("focal lengths must be positive".into()));
        }
        if !(k[0][2] >= 0.0 && k[0][2] <= width as f64 && k[1][2] >= 0.0 && k[1][2] <= height as f64)
        {
            return Err(Error::Argument("principal point outside the image".into()));
        }
        let r = &world_from_camera.rotation;
        if r.orthonormality_error() > 1e-9 || r.determinant() < 0.0 {
            return Err(Error::Argument("camera rotation is not a proper rotation".into()));
        }
        if !world_from_camera.translation.is_finite() {
            return Err(Error::Argument("camera translation is not finite".into()));
        }
        Ok(Self {
            intrinsics,
            world_from_camera,
            width,
            height,
        })
    }

    pub fn from_focal(
        focal: f64,
        principal: (f64, f64),
        world_from_camera: Rigid,
        width: u32,
        height: u32,
    ) -> Result<Self> {
        let k = [[focal, 0.0, principal.0], [0.0, focal, principal.1], [0.0, 0.0, 1.0]];
        Self::new(k, world_from_camera, width, height)
    }

    /// Camera at `position` looking at `target`; `fov_deg` spans the
    /// image width.
    pub fn look_at(
        position: Vec3,
        target: Vec3,
        up: Vec3,
        fov_deg: f64,
        width: u32,
        height: u32,
    ) -> Result<Self> {
        let forward = (target - position)
            .normalized()
            .ok_or_else(|| Error::Degenerate("camera position equals target".into()))?;
        let right = forward
            .cross(up)
            .normalized()
            .ok_or_else(|| Error::Degenerate("up vector parallel to viewing direction".into()))?;
        let true_up = right.cross(forward);
        if !(fov_deg > 0.0 && fov_deg < 180.0) {
            return Err(Error::Argument(format!("field of view {fov_deg}°")));
        }
        let focal = (width as f64 / 2.0) / (fov_deg.to_radians() / 2.0).tan();
        let rotation = Mat3::from_cols(right, true_up, -forward);
        Self::from_focal(
            focal,
            (width as f64 / 2.0, height as f64 / 2.0),
            Rigid {
                rotation,
                translation: position,
            },
            width,
            height,
        )
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn intrinsics(&self) -> &[[f64; 3]; 3] {
        &self.intrinsics
    }

    pub fn world_from_camera(&self) -> &Rigid {
        &self.world_from_camera
    }

    pub fn center(&self) -> Vec3 {
        self.world_from_camera.translation
    }

    /// World-space viewing direction (camera −z).
    pub fn forward(&self) -> Vec3 {
        -self.world_from_camera.rotation.col(2)
    }

    pub fn focal(&self) -> (f64, f64) {
        (self.intrinsics[0][0], self.intrinsics[1][1])
    }

    pub fn principal_point(&self) -> (f64, f64) {
        (self.intrinsics[0][2], self.intrinsics[1][2])
    }

    /// Same intrinsics re-targeted to another resolution.
    pub fn resized(&self, width: u32, height: u32) -> Result<Self> {
        let sx = width as f64 / self.width as f64;
        let sy = height as f64 / self.height as f64;
        let mut k = self.intrinsics;
        k[0][0] *= sx;
        k[0][2] *= sx;
        k[1][1] *= sy;
        k[1][2] *= sy;
        Self::new(k, self.world_from_camera, width, height)
    }

    pub fn transformed(&self, world: &Rigid) -> Result<Self> {
        Self::new(
            self.intrinsics,
            world.compose(&self.world_from_camera),
            self.width,
            self.height,
        )
    }

    /// Unit direction through continuous pixel coordinates.
    pub fn pixel_direction(&self, u: f64, v: f64) -> Vec3 {
        let (fx, fy) = self.focal();
        let (cx, cy) = self.principal_point();
        let local = Vec3::new((u - cx) / fx, -(v - cy) / fy, -1.0);
        self.world_from_camera
            .apply_dir(local)
            .normalized()
            .expect("finite pixel direction")
    }

    /// Ray through continuous pixel coordinates `(u, v)`.
    pub fn pixel_to_ray(&self, u: f64, v: f64, t_near: f64, t_far: f64) -> Result<Ray> {
        if !(u >= 0.0 && u < self.width as f64 && v >= 0.0 && v < self.height as f64) {
            return Err(Error::PixelBounds {
                u,
                v,
                width: self.width,
                height: self.height,
            });
        }
        Ray::new(self.center(), self.pixel_direction(u, v), t_near, t_far)
    }

    /// Ray through the centre of pixel `(col, row)` clipped to `bounds`;
    /// `None` when it misses the box.
    pub fn pixel_ray_in_box(&self, col: u32, row: u32, bounds: &Aabb) -> Result<Option<Ray>> {
        let ray = self.pixel_to_ray(col as f64 + 0.5, row as f64 + 0.5, 0.0, UNBOUNDED_FAR)?;
        Ok(ray.clipped_to(bounds))
    }

    /// World point → `(u, v, depth)` with depth measured along the
    /// viewing axis.
    pub fn project(&self, x: Vec3) -> Result<(f64, f64, f64)> {
        let local = self.world_from_camera.inverse().apply(x);
        let depth = -local[2];
        if !(depth > 0.0) {
            return Err(Error::BehindCamera(depth));
        }
        let (fx, fy) = self.focal();
        let (cx, cy) = self.principal_point();
        Ok((fx * local[0] / depth + cx, -fy * local[1] / depth + cy, depth))
    }

    pub fn to_record(&self) -> CameraRecord {
        let k = &self.intrinsics;
        let r = &self.world_from_camera.rotation.0;
        let t = self.world_from_camera.translation;
        CameraRecord {
            intrinsics: [
                k[0][0], k[0][1], k[0][2], k[1][0], k[1][1], k[1][2], k[2][0], k[2][1], k[2][2],
            ],
            world_from_camera: [
                r[0][0], r[0][1], r[0][2], t[0], r[1][0], r[1][1], r[1][2], t[1], r[2][0],
                r[2][1], r[2][2], t[2],
            ],
            width: self.width,
            height: self.height,
        }
    }
}

/// JSON form of a camera: row-major 3×3 intrinsics and 3×4 pose.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraRecord {
    pub intrinsics: [f64; 9],
    pub world_from_camera: [f64; 12],
    pub width: u32,
    pub height: u32,
}

impl TryFrom<&CameraRecord> for Camera {
    type Error = Error;

    fn try_from(rec: &CameraRecord) -> Result<Camera> {
        let k = &rec.intrinsics;
        let p = &rec.world_from_camera;
        Camera::new(
            [[k[0], k[1], k[2]], [k[3], k[4], k[5]], [k[6], k[7], k[8]]],
            Rigid {
                rotation: Mat3([[p[0], p[1], p[2]], [p[4], p[5], p[6]], [p[8], p[9], p[10]]]),
                translation: Vec3::new(p[3], p[7], p[11]),
            },
            rec.width,
            rec.height,
        )
    }
}

impl Serialize for Camera {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.to_record().serialize(s)
    }
}

impl<'de> Deserialize<'de> for Camera {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let rec = CameraRecord::deserialize(d)?;
        Camera::try_from(&rec).map_err(serde::de::Error::custom)
    }
}
