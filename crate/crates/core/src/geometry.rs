//! Rigid transforms, the pinhole depth camera, and depth images.
//!
//! Tangent vectors of SE(3) are ordered `(ω, ρ)`: three rotation components
//! followed by three translation components.

use nalgebra::{Matrix3, Matrix6, Point3, Quaternion, UnitQuaternion, Vector3, Vector6};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Rotation angles at or beyond `PI - LOG_SINGULARITY_MARGIN` are rejected by [`se3_log`].
pub const LOG_SINGULARITY_MARGIN: f64 = 1e-6;

/// A rigid transform in SE(3): unit quaternion plus translation in meters.
///
/// Applied to a point `p` it yields `R p + t`, i.e. it maps camera-frame
/// coordinates into the world frame when used as a camera pose.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub rotation: UnitQuaternion<f64>,
    pub translation: Vector3<f64>,
}

impl Default for Pose {
    fn default() -> Self {
        Self::identity()
    }
}

impl Pose {
    pub fn identity() -> Self {
        Self {
            rotation: UnitQuaternion::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn new(rotation: UnitQuaternion<f64>, translation: Vector3<f64>) -> Self {
        Self {
            rotation: tidy(rotation),
            translation,
        }
    }

    pub fn from_translation(x: f64, y: f64, z: f64) -> Self {
        Self::new(UnitQuaternion::identity(), Vector3::new(x, y, z))
    }

    /// Builds a pose from a raw `(qx, qy, qz, qw)` quaternion, renormalizing it.
    ///
    /// Quaternions already unit to within a few ulps are kept bit-for-bit so
    /// that text round-trips stay exact.
    pub fn from_parts(translation: Vector3<f64>, qx: f64, qy: f64, qz: f64, qw: f64) -> Result<Self> {
        let q = Quaternion::new(qw, qx, qy, qz);
        let n2 = q.norm_squared();
        if !n2.is_finite() || n2 < 1e-24 || !translation.iter().all(|v| v.is_finite()) {
            return Err(Error::Degenerate(format!(
                "non-finite or zero quaternion ({qx}, {qy}, {qz}, {qw})"
            )));
        }
        Ok(Self::new(UnitQuaternion::new_unchecked(q), translation))
    }

    /// `(qx, qy, qz, qw)` in canonical sign (`qw >= 0`).
    pub fn quaternion_xyzw(&self) -> [f64; 4] {
        let q = self.rotation.quaternion();
        let s = if q.w < 0.0 { -1.0 } else { 1.0 };
        [s * q.i, s * q.j, s * q.k, s * q.w]
    }

    /// `self ∘ other`: applies `other` first, then `self`.
    pub fn compose(&self, other: &Pose) -> Pose {
        Pose {
            rotation: tidy(self.rotation * other.rotation),
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> Pose {
        let r_inv = self.rotation.inverse();
        Pose {
            rotation: r_inv,
            translation: -(r_inv * self.translation),
        }
    }

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    pub fn transform_vector(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * v
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        self.rotation.to_rotation_matrix().into_inner()
    }

    /// Rotation angle in `[0, π]`.
    pub fn angle(&self) -> f64 {
        self.rotation.angle()
    }

    /// Adjoint in `(ω, ρ)` ordering: `Ad(T) = [[R, 0], [t^ R, R]]`.
    pub fn adjoint(&self) -> Matrix6<f64> {
        let r = self.rotation_matrix();
        let tr = skew(&self.translation) * r;
        let mut ad = Matrix6::zeros();
        ad.fixed_view_mut::<3, 3>(0, 0).copy_from(&r);
        ad.fixed_view_mut::<3, 3>(3, 0).copy_from(&tr);
        ad.fixed_view_mut::<3, 3>(3, 3).copy_from(&r);
        ad
    }
}

const UNIT_TOL: f64 = 4.0 * f64::EPSILON;

/// Renormalizes only when the squared norm has drifted past a few ulps, so
/// quaternions that are already unit keep their exact bits. Poses built by
/// long compositions therefore still round-trip exactly through text.
fn tidy(q: UnitQuaternion<f64>) -> UnitQuaternion<f64> {
    let mut q = q.into_inner();
    for _ in 0..3 {
        if (q.norm_squared() - 1.0).abs() <= UNIT_TOL {
            break;
        }
        q /= q.norm();
    }
    UnitQuaternion::new_unchecked(q)
}

impl std::ops::Mul for Pose {
    type Output = Pose;
    fn mul(self, rhs: Pose) -> Pose {
        self.compose(&rhs)
    }
}

impl std::ops::Mul<&Pose> for &Pose {
    type Output = Pose;
    fn mul(self, rhs: &Pose) -> Pose {
        self.compose(rhs)
    }
}

pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// `(1 - cos θ) / θ²`
fn coeff_a(theta: f64) -> f64 {
    if theta < 1e-2 {
        let t2 = theta * theta;
        0.5 - t2 / 24.0 + t2 * t2 / 720.0
    } else {
        (1.0 - theta.cos()) / (theta * theta)
    }
}

/// `(θ - sin θ) / θ³`
fn coeff_b(theta: f64) -> f64 {
    if theta < 1e-2 {
        let t2 = theta * theta;
        1.0 / 6.0 - t2 / 120.0 + t2 * t2 / 5040.0
    } else {
        (theta - theta.sin()) / (theta * theta * theta)
    }
}

/// `1/θ² - (1 + cos θ) / (2 θ sin θ)`
fn coeff_inv(theta: f64) -> f64 {
    if theta < 1e-2 {
        let t2 = theta * theta;
        1.0 / 12.0 + t2 / 720.0 + t2 * t2 / 30240.0
    } else {
        1.0 / (theta * theta) - (1.0 + theta.cos()) / (2.0 * theta * theta.sin())
    }
}

/// Left Jacobian of SO(3); also the `V` matrix mapping ρ to translation in `exp`.
pub fn so3_left_jacobian(omega: &Vector3<f64>) -> Matrix3<f64> {
    let theta = omega.norm();
    let w = skew(omega);
    Matrix3::identity() + coeff_a(theta) * w + coeff_b(theta) * w * w
}

pub fn so3_left_jacobian_inv(omega: &Vector3<f64>) -> Matrix3<f64> {
    let theta = omega.norm();
    let w = skew(omega);
    Matrix3::identity() - 0.5 * w + coeff_inv(theta) * w * w
}

/// Coupling block of the SE(3) left Jacobian.
fn se3_q_block(omega: &Vector3<f64>, rho: &Vector3<f64>) -> Matrix3<f64> {
    let theta = omega.norm();
    let t2 = theta * theta;
    let (c1, c2, c3) = if theta < 0.1 {
        (
            1.0 / 6.0 - t2 / 120.0 + t2 * t2 / 5040.0,
            1.0 / 24.0 - t2 / 720.0 + t2 * t2 / 40320.0,
            1.0 / 120.0 - t2 / 2520.0 + t2 * t2 / 120960.0,
        )
    } else {
        let (s, c) = theta.sin_cos();
        (
            (theta - s) / (t2 * theta),
            (t2 + 2.0 * c - 2.0) / (2.0 * t2 * t2),
            (2.0 * theta - 3.0 * s + theta * c) / (2.0 * t2 * t2 * theta),
        )
    };
    let p = skew(omega);
    let r = skew(rho);
    let pr = p * r;
    let rp = r * p;
    let prp = pr * p;
    let pp = p * p;
    0.5 * r + c1 * (pr + rp + prp) + c2 * (pp * r + rp * p - 3.0 * prp) + c3 * (prp * p + p * prp)
}

/// Inverse of the SE(3) left Jacobian, `(ω, ρ)` ordering.
pub fn se3_left_jacobian_inv(xi: &Vector6<f64>) -> Matrix6<f64> {
    let omega = xi.fixed_rows::<3>(0).into_owned();
    let rho = xi.fixed_rows::<3>(3).into_owned();
    let j_inv = so3_left_jacobian_inv(&omega);
    let q = se3_q_block(&omega, &rho);
    let mut out = Matrix6::zeros();
    out.fixed_view_mut::<3, 3>(0, 0).copy_from(&j_inv);
    out.fixed_view_mut::<3, 3>(3, 3).copy_from(&j_inv);
    out.fixed_view_mut::<3, 3>(3, 0).copy_from(&(-(j_inv * q * j_inv)));
    out
}

/// Inverse right Jacobian: `log(exp(ξ) exp(δ)) ≈ ξ + Jr⁻¹(ξ) δ`.
pub fn se3_right_jacobian_inv(xi: &Vector6<f64>) -> Matrix6<f64> {
    se3_left_jacobian_inv(&(-xi))
}

/// Exponential map from `(ω, ρ)` to a pose.
pub fn se3_exp(xi: &Vector6<f64>) -> Pose {
    let omega = xi.fixed_rows::<3>(0).into_owned();
    let rho = xi.fixed_rows::<3>(3).into_owned();
    let rotation = UnitQuaternion::from_scaled_axis(omega);
    let translation = so3_left_jacobian(&omega) * rho;
    Pose::new(rotation, translation)
}

/// Logarithm map to `(ω, ρ)`. Fails for rotation angles within
/// [`LOG_SINGULARITY_MARGIN`] of π.
pub fn se3_log(pose: &Pose) -> Result<Vector6<f64>> {
    let q = pose.rotation.quaternion();
    let (w, v) = if q.w < 0.0 {
        (-q.w, -q.imag())
    } else {
        (q.w, q.imag())
    };
    let s = v.norm();
    let theta = 2.0 * s.atan2(w);
    if theta >= std::f64::consts::PI - LOG_SINGULARITY_MARGIN {
        return Err(Error::LogSingularity(theta));
    }
    let omega = if s < 1e-12 {
        v * (2.0 / w)
    } else {
        v * (theta / s)
    };
    let rho = so3_left_jacobian_inv(&omega) * pose.translation;
    Ok(Vector6::new(omega.x, omega.y, omega.z, rho.x, rho.y, rho.z))
}

/// Pinhole depth-camera intrinsics with the sensor's valid depth range.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    pub depth_min: f64,
    pub depth_max: f64,
}

impl Intrinsics {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        width: usize,
        height: usize,
        depth_min: f64,
        depth_max: f64,
    ) -> Result<Self> {
        let k = Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
            depth_min,
            depth_max,
        };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidIntrinsics(m));
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return bad(format!("focal lengths must be positive (fx={}, fy={})", self.fx, self.fy));
        }
        if self.width == 0 || self.height == 0 {
            return bad("image size must be non-zero".into());
        }
        if !(self.cx >= 0.0 && self.cx < self.width as f64 && self.cy >= 0.0 && self.cy < self.height as f64) {
            return bad(format!(
                "principal point ({}, {}) outside {}x{} image",
                self.cx, self.cy, self.width, self.height
            ));
        }
        if !(self.depth_min > 0.0 && self.depth_min < self.depth_max) {
            return bad(format!(
                "depth range must satisfy 0 < min < max (got {}..{})",
                self.depth_min, self.depth_max
            ));
        }
        Ok(())
    }

    pub fn in_depth_range(&self, z: f64) -> bool {
        z >= self.depth_min && z <= self.depth_max
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    /// Camera-frame ray direction through a pixel, scaled so that `z = 1`.
    pub fn ray(&self, u: f64, v: f64) -> Vector3<f64> {
        Vector3::new((u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0)
    }
}

/// Projects a camera-frame point to a continuous pixel `(u, v)` and its depth.
pub fn project(p: &Vector3<f64>, k: &Intrinsics) -> Result<(f64, f64, f64)> {
    if !(p.z > 0.0) {
        return Err(Error::BehindCamera(p.z));
    }
    Ok((k.cx + k.fx * (p.x / p.z), k.cy + k.fy * (p.y / p.z), p.z))
}

/// Lifts a pixel with depth `z` back into the camera frame.
pub fn backproject(u: f64, v: f64, z: f64, k: &Intrinsics) -> Result<Vector3<f64>> {
    if !(z.is_finite() && k.in_depth_range(z)) {
        return Err(Error::InvalidDepth(z));
    }
    if !(u >= -0.5 && u <= k.width as f64 && v >= -0.5 && v <= k.height as f64) {
        return Err(Error::InvalidConfig(format!("pixel ({u}, {v}) outside image")));
    }
    Ok(Vector3::new((u - k.cx) / k.fx * z, (v - k.cy) / k.fy * z, z))
}

/// The integer cell a continuous pixel coordinate lands in (round to nearest).
pub fn pixel_cell(u: f64, v: f64, k: &Intrinsics) -> Option<(usize, usize)> {
    let (iu, iv) = (u.round(), v.round());
    if iu < 0.0 || iv < 0.0 || iu >= k.width as f64 || iv >= k.height as f64 {
        return None;
    }
    Some((iu as usize, iv as usize))
}

/// A depth image in meters; `None` marks an invalid (missing) sample.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthImage {
    width: usize,
    height: usize,
    samples: Vec<Option<f64>>,
}

impl DepthImage {
    pub fn invalid(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            samples: vec![None; width * height],
        }
    }

    pub fn from_samples(width: usize, height: usize, samples: Vec<Option<f64>>) -> Result<Self> {
        if samples.len() != width * height {
            return Err(Error::Format(format!(
                "expected {} samples for {width}x{height}, got {}",
                width * height,
                samples.len()
            )));
        }
        Ok(Self {
            width,
            height,
            samples,
        })
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> Option<f64>) -> Self {
        let mut samples = Vec::with_capacity(width * height);
        for v in 0..height {
            for u in 0..width {
                samples.push(f(u, v));
            }
        }
        Self {
            width,
            height,
            samples,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn get(&self, u: usize, v: usize) -> Option<f64> {
        self.samples[v * self.width + u]
    }

    pub fn set(&mut self, u: usize, v: usize, depth: Option<f64>) {
        self.samples[v * self.width + u] = depth;
    }

    /// Row-major samples.
    pub fn samples(&self) -> &[Option<f64>] {
        &self.samples
    }

    pub fn valid_count(&self) -> usize {
        self.samples.iter().filter(|s| s.is_some()).count()
    }

    /// Marks every sample outside the intrinsics' depth range (or non-finite) invalid.
    pub fn filtered(mut self, k: &Intrinsics) -> Self {
        for s in &mut self.samples {
            if let Some(d) = *s {
                if !(d.is_finite() && k.in_depth_range(d)) {
                    *s = None;
                }
            }
        }
        self
    }

    pub fn matches(&self, k: &Intrinsics) -> bool {
        self.width == k.width && self.height == k.height
    }
}

pub type Point = Point3<f64>;
