//! Rigid transforms, coefficient-weighted pose blending and the smoothstep kernel.
//!
//! Rotations are unit quaternions everywhere (storage, optimization and
//! blending). The quaternion helpers operating on plain `[f64; 4]` arrays
//! (`w, x, y, z` order) are the building blocks of the differentiable
//! deformation kernel in [`crate::losses`].

use nalgebra::{Matrix3, Matrix4, Quaternion, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Below this summed-quaternion norm a blend is considered degenerate.
pub const DEGENERATE_BLEND_NORM: f64 = 1e-8;

/// An SE(3) rigid transform `x ↦ R·x + t`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pose {
    pub rotation: UnitQuaternion<f64>,
    pub translation: Vector3<f64>,
}

impl Default for Pose {
    fn default() -> Self {
        Pose::identity()
    }
}

impl Pose {
    pub fn identity() -> Self {
        Pose {
            rotation: UnitQuaternion::identity(),
            translation: Vector3::zeros(),
        }
    }

    /// Builds a pose from a `w, x, y, z` quaternion (normalized here) and a translation.
    pub fn new(wxyz: [f64; 4], translation: [f64; 3]) -> Self {
        let [w, x, y, z] = wxyz;
        Pose {
            rotation: UnitQuaternion::from_quaternion(Quaternion::new(w, x, y, z)),
            translation: Vector3::from(translation),
        }
    }

    pub fn from_translation(t: [f64; 3]) -> Self {
        Pose {
            rotation: UnitQuaternion::identity(),
            translation: Vector3::from(t),
        }
    }

    /// Rotation of `angle` radians about `axis` (need not be normalized), then translation `t`.
    pub fn from_axis_angle(axis: [f64; 3], angle: f64, t: [f64; 3]) -> Self {
        let axis = Vector3::from(axis);
        let rotation = if axis.norm() == 0.0 {
            UnitQuaternion::identity()
        } else {
            UnitQuaternion::from_axis_angle(&nalgebra::Unit::new_normalize(axis), angle)
        };
        Pose {
            rotation,
            translation: Vector3::from(t),
        }
    }

    /// Quaternion coefficients in `w, x, y, z` order.
    pub fn wxyz(&self) -> [f64; 4] {
        let q = self.rotation.quaternion();
        [q.w, q.i, q.j, q.k]
    }

    pub fn translation_array(&self) -> [f64; 3] {
        [self.translation.x, self.translation.y, self.translation.z]
    }

    /// The transform applying `other` first, then `self`.
    pub fn compose(&self, other: &Pose) -> Pose {
        Pose {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> Pose {
        let inv = self.rotation.inverse();
        Pose {
            rotation: inv,
            translation: -(inv * self.translation),
        }
    }

    pub fn apply(&self, x: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * x + self.translation
    }

    pub fn apply_array(&self, x: [f64; 3]) -> [f64; 3] {
        let y = self.apply(&Vector3::from(x));
        [y.x, y.y, y.z]
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        self.rotation.to_rotation_matrix().into_inner()
    }

    /// Homogeneous 4×4 matrix form.
    pub fn to_homogeneous(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation_matrix());
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }
}

pub fn compose(a: &Pose, b: &Pose) -> Pose {
    a.compose(b)
}

pub fn inverse(p: &Pose) -> Pose {
    p.inverse()
}

pub fn apply(p: &Pose, x: &Vector3<f64>) -> Vector3<f64> {
    p.apply(x)
}

// Serialized as `{ "rotation": [w, x, y, z], "translation": [x, y, z] }`.
#[derive(Serialize, Deserialize)]
struct PoseRepr {
    rotation: [f64; 4],
    translation: [f64; 3],
}

impl Serialize for Pose {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        PoseRepr {
            rotation: self.wxyz(),
            translation: self.translation_array(),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for Pose {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let repr = PoseRepr::deserialize(d)?;
        let n = repr.rotation.iter().map(|c| c * c).sum::<f64>().sqrt();
        if !n.is_finite() || n < DEGENERATE_BLEND_NORM {
            return Err(serde::de::Error::custom("pose rotation quaternion has zero norm"));
        }
        if (n - 1.0).abs() < 1e-12 {
            // Already unit: keep the stored bits.
            let [w, x, y, z] = repr.rotation;
            return Ok(Pose {
                rotation: UnitQuaternion::new_unchecked(Quaternion::new(w, x, y, z)),
                translation: Vector3::from(repr.translation),
            });
        }
        Ok(Pose::new(repr.rotation, repr.translation))
    }
}

/// Convex weights over `K` motion bases.
#[derive(Clone, Debug, PartialEq)]
pub struct BlendWeights(Vec<f64>);

impl BlendWeights {
    /// Validates nonnegativity and unit sum (within 1e-9).
    pub fn new(w: Vec<f64>) -> Result<Self> {
        if w.is_empty() {
            return Err(Error::Domain("blend weights must be nonempty".into()));
        }
        if w.iter().any(|&x| !(x >= 0.0) || !x.is_finite()) {
            return Err(Error::Domain("blend weights must be finite and nonnegative".into()));
        }
        let sum: f64 = w.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Domain(format!("blend weights sum to {sum}, expected 1")));
        }
        Ok(BlendWeights(w))
    }

    /// One-hot weights selecting basis `k` out of `len`.
    pub fn one_hot(len: usize, k: usize) -> Self {
        let mut w = vec![0.0; len];
        w[k] = 1.0;
        BlendWeights(w)
    }

    pub(crate) fn from_raw_unchecked(w: Vec<f64>) -> Self {
        BlendWeights(w)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

/// Index of the largest weight, lowest index on ties.
pub fn dominant_index(w: &[f64]) -> usize {
    let mut best = 0;
    for (k, &x) in w.iter().enumerate().skip(1) {
        if x > w[best] {
            best = k;
        }
    }
    best
}

/// Blends `poses` with convex weights `w`.
///
/// Translations are averaged linearly. Quaternions are sign-aligned to the
/// quaternion of the dominant weight, summed with their weights and
/// renormalized.
pub fn blend(w: &BlendWeights, poses: &[Pose]) -> Result<Pose> {
    let w = w.as_slice();
    if w.len() != poses.len() {
        return Err(Error::Domain(format!(
            "blend got {} weights for {} poses",
            w.len(),
            poses.len()
        )));
    }
    let reference = poses[dominant_index(w)].wxyz();
    let mut q = [0.0; 4];
    let mut t = [0.0; 3];
    for (&wk, pose) in w.iter().zip(poses) {
        let qk = pose.wxyz();
        let s = if dot4(&qk, &reference) >= 0.0 { wk } else { -wk };
        for c in 0..4 {
            q[c] += s * qk[c];
        }
        let tk = pose.translation_array();
        for c in 0..3 {
            t[c] += wk * tk[c];
        }
    }
    let norm = dot4(&q, &q).sqrt();
    if !(norm >= DEGENERATE_BLEND_NORM) {
        return Err(Error::DegenerateBlend { norm });
    }
    Ok(Pose::new(q, t))
}

/// The cubic smoothstep `3u² − 2u³` on `[tau0, tau1]`, clamped to 0 below and 1 above.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Smoothstep {
    tau0: f64,
    tau1: f64,
}

impl Smoothstep {
    pub fn new(tau0: f64, tau1: f64) -> Result<Self> {
        if !(tau0 < tau1) || !tau0.is_finite() || !tau1.is_finite() {
            return Err(Error::Config(format!(
                "smoothstep requires tau0 < tau1, got tau0 = {tau0}, tau1 = {tau1}"
            )));
        }
        Ok(Smoothstep { tau0, tau1 })
    }

    pub fn tau0(&self) -> f64 {
        self.tau0
    }

    pub fn tau1(&self) -> f64 {
        self.tau1
    }

    pub fn eval(&self, delta: f64) -> f64 {
        if delta < self.tau0 {
            0.0
        } else if delta >= self.tau1 {
            1.0
        } else {
            // 3u² − 2u³ rewritten around the midpoint, v = u − ½, so that the
            // midpoint evaluates to exactly ½.
            let v = (2.0 * delta - (self.tau0 + self.tau1)) / (2.0 * (self.tau1 - self.tau0));
            0.5 + v * (1.5 - 2.0 * v * v)
        }
    }
}

pub fn smoothstep(delta: f64, tau0: f64, tau1: f64) -> Result<f64> {
    Ok(Smoothstep::new(tau0, tau1)?.eval(delta))
}

// ---------------------------------------------------------------------------
// Array-level quaternion helpers for the differentiable kernel.

#[inline]
pub(crate) fn dot4(a: &[f64; 4], b: &[f64; 4]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2] + a[3] * b[3]
}

#[inline]
pub(crate) fn dot3(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

#[inline]
pub(crate) fn cross3(a: &[f64; 3], b: &[f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

#[inline]
pub(crate) fn sub3(a: &[f64; 3], b: &[f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

#[inline]
pub(crate) fn norm3(a: &[f64; 3]) -> f64 {
    dot3(a, a).sqrt()
}

/// `R(q)·v` via the quadratic form `(w² − |u|²)v + 2(u·v)u + 2w(u×v)`, exact for unit `q`.
#[inline]
pub(crate) fn quat_rotate(q: &[f64; 4], v: &[f64; 3]) -> [f64; 3] {
    let w = q[0];
    let u = [q[1], q[2], q[3]];
    let a = w * w - dot3(&u, &u);
    let b = 2.0 * dot3(&u, v);
    let c = cross3(&u, v);
    [
        a * v[0] + b * u[0] + 2.0 * w * c[0],
        a * v[1] + b * u[1] + 2.0 * w * c[1],
        a * v[2] + b * u[2] + 2.0 * w * c[2],
    ]
}

/// Vector-Jacobian product of [`quat_rotate`]: given `g = ∂L/∂(R(q)v)`,
/// returns `(∂L/∂q, ∂L/∂v)` treating the quadratic form as a polynomial in `q`.
#[inline]
pub(crate) fn quat_rotate_vjp(q: &[f64; 4], v: &[f64; 3], g: &[f64; 3]) -> ([f64; 4], [f64; 3]) {
    let w = q[0];
    let u = [q[1], q[2], q[3]];
    let ug = dot3(&u, g);
    let uv = dot3(&u, v);
    let vg = dot3(v, g);
    let uxv = cross3(&u, v);
    let vxg = cross3(v, g);
    let dw = 2.0 * w * vg + 2.0 * dot3(&uxv, g);
    let mut du = [0.0; 3];
    for c in 0..3 {
        du[c] = -2.0 * u[c] * vg + 2.0 * v[c] * ug + 2.0 * uv * g[c] + 2.0 * w * vxg[c];
    }
    // Rᵀ g for the point gradient.
    let qc = [w, -u[0], -u[1], -u[2]];
    let dv = quat_rotate(&qc, g);
    ([dw, du[0], du[1], du[2]], dv)
}

/// Vector-Jacobian product of `q ↦ q/|q|`.
#[inline]
pub(crate) fn normalize_vjp(q: &[f64; 4], dn: &[f64; 4]) -> [f64; 4] {
    let norm = dot4(q, q).sqrt();
    let n = [q[0] / norm, q[1] / norm, q[2] / norm, q[3] / norm];
    let p = dot4(&n, dn);
    [
        (dn[0] - n[0] * p) / norm,
        (dn[1] - n[1] * p) / norm,
        (dn[2] - n[2] * p) / norm,
        (dn[3] - n[3] * p) / norm,
    ]
}

/// Rotation matrix of a unit quaternion, row-major.
pub(crate) fn quat_matrix(q: &[f64; 4]) -> [[f64; 3]; 3] {
    let c0 = quat_rotate(q, &[1.0, 0.0, 0.0]);
    let c1 = quat_rotate(q, &[0.0, 1.0, 0.0]);
    let c2 = quat_rotate(q, &[0.0, 0.0, 1.0]);
    [
        [c0[0], c1[0], c2[0]],
        [c0[1], c1[1], c2[1]],
        [c0[2], c1[2], c2[2]],
    ]
}

pub(crate) fn normalize4(q: &[f64; 4]) -> [f64; 4] {
    let n = dot4(q, q).sqrt();
    [q[0] / n, q[1] / n, q[2] / n, q[3] / n]
}
