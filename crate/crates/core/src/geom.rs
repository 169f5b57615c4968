//! Unit quaternions as the Lie group S³ and their algebra.
//!
//! Algebra elements use half-angle coordinates: `exp_map(v)` is the quaternion
//! `(cos|v|, sin|v| v/|v|)`, which rotates vectors by `2|v|`. A physical body
//! rate `w` in rad/s therefore corresponds to the algebra element `w / 2`.

use std::ops::{Add, Mul, Neg, Sub};

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Below this norm `exp_map`/`log_map` switch to their Taylor series.
pub const SMALL_ANGLE: f64 = 1e-8;

/// Angular distance from the antipode at which `log_map` refuses to answer.
pub const ANTIPODE_TOL: f64 = 1e-9;

/// Hamilton quaternion of unit norm, scalar first.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 4]", into = "[f64; 4]")]
pub struct UnitQuat {
    w: f64,
    x: f64,
    y: f64,
    z: f64,
}

/// Pure-imaginary quaternion, i.e. an element of the Lie algebra of S³.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ImQuat3(pub Vector3<f64>);

impl UnitQuat {
    pub const IDENTITY: UnitQuat = UnitQuat {
        w: 1.0,
        x: 0.0,
        y: 0.0,
        z: 0.0,
    };

    /// Normalizes `(w, x, y, z)`. Returns `None` for a zero or non-finite input.
    pub fn try_new(w: f64, x: f64, y: f64, z: f64) -> Option<Self> {
        let n = (w * w + x * x + y * y + z * z).sqrt();
        if !n.is_finite() || n < f64::EPSILON {
            return None;
        }
        Some(Self {
            w: w / n,
            x: x / n,
            y: y / n,
            z: z / n,
        })
    }

    /// Normalizing constructor.
    ///
    /// Panics when the input has zero norm; use [`UnitQuat::try_new`] for
    /// untrusted data.
    pub fn new(w: f64, x: f64, y: f64, z: f64) -> Self {
        Self::try_new(w, x, y, z).expect("quaternion with zero or non-finite norm")
    }

    /// Rotation by `angle` radians about `axis` (normalized internally).
    pub fn from_axis_angle(axis: &Vector3<f64>, angle: f64) -> Self {
        let n = axis.norm();
        if n < f64::EPSILON {
            return Self::IDENTITY;
        }
        exp_map(ImQuat3(axis * (0.5 * angle / n)))
    }

    pub fn w(&self) -> f64 {
        self.w
    }
    pub fn x(&self) -> f64 {
        self.x
    }
    pub fn y(&self) -> f64 {
        self.y
    }
    pub fn z(&self) -> f64 {
        self.z
    }

    pub fn vec(&self) -> Vector3<f64> {
        Vector3::new(self.x, self.y, self.z)
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.w, self.x, self.y, self.z]
    }

    pub fn norm(&self) -> f64 {
        (self.w * self.w + self.x * self.x + self.y * self.y + self.z * self.z).sqrt()
    }

    pub fn inverse(&self) -> Self {
        quat_inv(*self)
    }

    /// Representative of the same rotation with `w >= 0`.
    pub fn canonical(&self) -> Self {
        if self.w < 0.0 {
            -*self
        } else {
            *self
        }
    }

    /// Rotation matrix mapping body-frame vectors to the world frame.
    pub fn to_rotation_matrix(&self) -> Matrix3<f64> {
        let (w, x, y, z) = (self.w, self.x, self.y, self.z);
        Matrix3::new(
            1.0 - 2.0 * (y * y + z * z),
            2.0 * (x * y - w * z),
            2.0 * (x * z + w * y),
            2.0 * (x * y + w * z),
            1.0 - 2.0 * (x * x + z * z),
            2.0 * (y * z - w * x),
            2.0 * (x * z - w * y),
            2.0 * (y * z + w * x),
            1.0 - 2.0 * (x * x + y * y),
        )
    }

    pub fn rotate(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.to_rotation_matrix() * v
    }

    /// Rotation angle in radians, in `[0, 2pi]`.
    pub fn angle(&self) -> f64 {
        2.0 * self.vec().norm().atan2(self.w)
    }

    /// Distance on S³ modulo sign, i.e. the rotation angle between the two.
    pub fn rotation_distance(&self, other: &UnitQuat) -> f64 {
        let d = (self.inverse() * *other).canonical();
        2.0 * d.vec().norm().atan2(d.w)
    }
}

impl Default for UnitQuat {
    fn default() -> Self {
        Self::IDENTITY
    }
}

impl TryFrom<[f64; 4]> for UnitQuat {
    type Error = String;

    fn try_from(a: [f64; 4]) -> std::result::Result<Self, String> {
        UnitQuat::try_new(a[0], a[1], a[2], a[3])
            .ok_or_else(|| "quaternion must have finite, non-zero norm".to_string())
    }
}

impl From<UnitQuat> for [f64; 4] {
    fn from(q: UnitQuat) -> Self {
        q.to_array()
    }
}

impl Mul for UnitQuat {
    type Output = UnitQuat;

    fn mul(self, rhs: UnitQuat) -> UnitQuat {
        quat_mul(self, rhs)
    }
}

impl Neg for UnitQuat {
    type Output = UnitQuat;

    fn neg(self) -> UnitQuat {
        UnitQuat {
            w: -self.w,
            x: -self.x,
            y: -self.y,
            z: -self.z,
        }
    }
}

impl ImQuat3 {
    pub fn new(x: f64, y: f64, z: f64) -> Self {
        Self(Vector3::new(x, y, z))
    }

    pub fn zero() -> Self {
        Self(Vector3::zeros())
    }

    pub fn norm(&self) -> f64 {
        self.0.norm()
    }

    /// Algebra element corresponding to a physical body rate in rad/s.
    pub fn from_body_rate(omega: &Vector3<f64>) -> Self {
        Self(omega * 0.5)
    }

    /// Physical body rate in rad/s corresponding to this algebra element.
    pub fn to_body_rate(&self) -> Vector3<f64> {
        self.0 * 2.0
    }
}

impl From<Vector3<f64>> for ImQuat3 {
    fn from(v: Vector3<f64>) -> Self {
        Self(v)
    }
}

impl Add for ImQuat3 {
    type Output = ImQuat3;
    fn add(self, rhs: ImQuat3) -> ImQuat3 {
        ImQuat3(self.0 + rhs.0)
    }
}

impl Sub for ImQuat3 {
    type Output = ImQuat3;
    fn sub(self, rhs: ImQuat3) -> ImQuat3 {
        ImQuat3(self.0 - rhs.0)
    }
}

impl Neg for ImQuat3 {
    type Output = ImQuat3;
    fn neg(self) -> ImQuat3 {
        ImQuat3(-self.0)
    }
}

impl Mul<f64> for ImQuat3 {
    type Output = ImQuat3;
    fn mul(self, s: f64) -> ImQuat3 {
        ImQuat3(self.0 * s)
    }
}

/// Hamilton product, renormalized.
pub fn quat_mul(a: UnitQuat, b: UnitQuat) -> UnitQuat {
    let w = a.w * b.w - a.x * b.x - a.y * b.y - a.z * b.z;
    let x = a.w * b.x + a.x * b.w + a.y * b.z - a.z * b.y;
    let y = a.w * b.y - a.x * b.z + a.y * b.w + a.z * b.x;
    let z = a.w * b.z + a.x * b.y - a.y * b.x + a.z * b.w;
    UnitQuat::new(w, x, y, z)
}

pub fn quat_inv(q: UnitQuat) -> UnitQuat {
    UnitQuat {
        w: q.w,
        x: -q.x,
        y: -q.y,
        z: -q.z,
    }
}

pub fn exp_map(v: ImQuat3) -> UnitQuat {
    let th = v.norm();
    if th < SMALL_ANGLE {
        return UnitQuat::new(1.0 - 0.5 * th * th, v.0.x, v.0.y, v.0.z);
    }
    let s = th.sin() / th;
    UnitQuat::new(th.cos(), s * v.0.x, s * v.0.y, s * v.0.z)
}

/// Principal logarithm, `|log_map(q)| < pi`.
///
/// No sign canonicalization is applied: `q` and `-q` map to different algebra
/// elements, which is what lets the log cover half-angles up to pi (full turns).
pub fn log_map(q: UnitQuat) -> Result<ImQuat3> {
    let vn = q.vec().norm();
    let half_angle = vn.atan2(q.w);
    if std::f64::consts::PI - half_angle < ANTIPODE_TOL {
        return Err(Error::Antipode { tol: ANTIPODE_TOL });
    }
    if half_angle < SMALL_ANGLE {
        // sin(a)/a ~ 1 - a^2/6, so v ~ vec * (1 + a^2/6)
        return Ok(ImQuat3(q.vec() * (1.0 + half_angle * half_angle / 6.0)));
    }
    Ok(ImQuat3(q.vec() * (half_angle / vn)))
}

/// Euclidean projection onto the algebra: the imaginary part of `q`.
pub fn im_part(q: UnitQuat) -> ImQuat3 {
    ImQuat3(q.vec())
}

/// `ab - ba` for pure-imaginary quaternions, equal to `2 (a x b)`.
pub fn lie_bracket(a: ImQuat3, b: ImQuat3) -> ImQuat3 {
    ImQuat3(2.0 * a.0.cross(&b.0))
}

/// One Lie-Euler step `q exp(w h)` with `w` in algebra coordinates.
pub fn lie_euler_step(q: UnitQuat, w: ImQuat3, h: f64) -> UnitQuat {
    if w.0 == Vector3::zeros() {
        return q;
    }
    q * exp_map(w * h)
}

/// Geodesic interpolation `a exp(t log(a^-1 b))`, exact at both ends.
pub fn quat_interp(a: UnitQuat, b: UnitQuat, t: f64) -> Result<UnitQuat> {
    let d = log_map(a.inverse() * b)?;
    if t == 0.0 {
        return Ok(a);
    }
    if t == 1.0 {
        return Ok(b);
    }
    Ok(a * exp_map(d * t))
}

/// Inverse of the left-trivialized differential of `exp`, truncated after the
/// second bracket: `w - [u, w]/2 + [u, [u, w]]/12`.
pub fn dexp_inv(u: ImQuat3, w: ImQuat3) -> ImQuat3 {
    let c1 = lie_bracket(u, w);
    let c2 = lie_bracket(u, c1);
    w - c1 * 0.5 + c2 * (1.0 / 12.0)
}
