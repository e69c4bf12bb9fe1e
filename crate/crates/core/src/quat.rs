//! Unit-quaternion algebra on SO(3).
//!
//! Quaternions are stored as a real part `r` and an imaginary 3-vector `q`.
//! Tangent vectors ([`RotVec3`]) follow the half-angle convention: `exp(w)`
//! is a rotation by `2‖w‖` about `w`, so orientation errors throughout the
//! crate are written `2 * log(a ∘ b*)`.

use std::fmt;
use std::ops::Mul;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Vec3 = Vector3<f64>;

/// Below this norm the log/exp ratio formulas are replaced by their limits.
pub const SMALL_ANGLE: f64 = 1e-8;

/// Maximum tolerated deviation from unit norm when constructing from raw parts.
pub const UNIT_TOLERANCE: f64 = 1e-6;

#[derive(Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(into = "[f64; 4]", try_from = "[f64; 4]")]
pub struct UnitQuaternion {
    r: f64,
    q: Vec3,
}

/// Element of so(3), half-angle convention.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RotVec3(pub Vec3);

impl UnitQuaternion {
    pub fn identity() -> Self {
        UnitQuaternion {
            r: 1.0,
            q: Vec3::zeros(),
        }
    }

    /// Validating constructor; rejects inputs whose norm is off by more than
    /// [`UNIT_TOLERANCE`] and renormalizes the rest.
    pub fn new(r: f64, q: Vec3) -> Result<Self> {
        let norm = (r * r + q.norm_squared()).sqrt();
        if !norm.is_finite() || (norm - 1.0).abs() > UNIT_TOLERANCE {
            return Err(Error::validation(format!(
                "quaternion ({r}, {}, {}, {}) has norm {norm}",
                q.x, q.y, q.z
            )));
        }
        // Already unit to machine precision: keep the exact input.
        if (norm - 1.0).abs() <= 2.0 * f64::EPSILON {
            return Ok(UnitQuaternion { r, q });
        }
        Ok(UnitQuaternion {
            r: r / norm,
            q: q / norm,
        })
    }

    /// Normalizes an arbitrary non-zero 4-vector.
    pub fn normalize(r: f64, q: Vec3) -> Result<Self> {
        let norm = (r * r + q.norm_squared()).sqrt();
        if !(norm > 0.0) || !norm.is_finite() {
            return Err(Error::validation("cannot normalize a zero quaternion"));
        }
        Ok(UnitQuaternion {
            r: r / norm,
            q: q / norm,
        })
    }

    pub fn from_array(a: [f64; 4]) -> Result<Self> {
        Self::new(a[0], Vec3::new(a[1], a[2], a[3]))
    }

    /// Rotation by `angle` radians about `axis` (need not be normalized).
    pub fn from_axis_angle(axis: &Vec3, angle: f64) -> Self {
        let n = axis.norm();
        if n < SMALL_ANGLE {
            return Self::identity();
        }
        quat_exp(RotVec3(axis * (0.5 * angle / n)))
    }

    pub fn r(&self) -> f64 {
        self.r
    }

    pub fn q(&self) -> &Vec3 {
        &self.q
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.r, self.q.x, self.q.y, self.q.z]
    }

    pub fn norm(&self) -> f64 {
        (self.r * self.r + self.q.norm_squared()).sqrt()
    }

    pub fn conjugate(&self) -> Self {
        conjugate(self)
    }

    /// Picks the representative with `r >= 0` of the double cover.
    pub fn canonical(self) -> Self {
        if self.r < 0.0 {
            UnitQuaternion {
                r: -self.r,
                q: -self.q,
            }
        } else {
            self
        }
    }

    /// Re-projects onto the unit sphere after accumulated floating-point drift.
    pub fn renormalized(self) -> Self {
        let n = self.norm();
        UnitQuaternion {
            r: self.r / n,
            q: self.q / n,
        }
    }

    /// `2 log(self ∘ other*)`: the rotation vector (full angle) taking `other`
    /// to `self`. The product is taken on the `r >= 0` cover, so this is the
    /// shortest rotation and continuous across sign flips of either side.
    pub fn error_to(&self, other: &UnitQuaternion) -> Vec3 {
        quat_log(&compose(self, &other.conjugate()).canonical()).0 * 2.0
    }

    /// Angular distance in radians between two orientations.
    pub fn angle_to(&self, other: &UnitQuaternion) -> f64 {
        self.error_to(other).norm()
    }
}

impl Default for UnitQuaternion {
    fn default() -> Self {
        Self::identity()
    }
}

impl fmt::Debug for UnitQuaternion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "Q({:.6}, [{:.6}, {:.6}, {:.6}])",
            self.r, self.q.x, self.q.y, self.q.z
        )
    }
}

impl From<UnitQuaternion> for [f64; 4] {
    fn from(q: UnitQuaternion) -> Self {
        q.to_array()
    }
}

impl TryFrom<[f64; 4]> for UnitQuaternion {
    type Error = Error;

    fn try_from(a: [f64; 4]) -> Result<Self> {
        UnitQuaternion::from_array(a)
    }
}

impl Mul for UnitQuaternion {
    type Output = UnitQuaternion;

    fn mul(self, rhs: UnitQuaternion) -> UnitQuaternion {
        compose(&self, &rhs)
    }
}

/// Hamilton product `a ∘ b`, written out as the 4×4 left-multiplication
/// matrix of `a` applied to `b`.
pub fn compose(a: &UnitQuaternion, b: &UnitQuaternion) -> UnitQuaternion {
    let (ra, qa) = (a.r, &a.q);
    let (rb, qb) = (b.r, &b.q);
    let r = ra * rb - qa.x * qb.x - qa.y * qb.y - qa.z * qb.z;
    let x = qa.x * rb + ra * qb.x - qa.z * qb.y + qa.y * qb.z;
    let y = qa.y * rb + qa.z * qb.x + ra * qb.y - qa.x * qb.z;
    let z = qa.z * rb - qa.y * qb.x + qa.x * qb.y + ra * qb.z;
    UnitQuaternion {
        r,
        q: Vec3::new(x, y, z),
    }
}

pub fn conjugate(a: &UnitQuaternion) -> UnitQuaternion {
    UnitQuaternion { r: a.r, q: -a.q }
}

/// Logarithm map SO(3) → so(3).
///
/// `arccos(r) / sin(arccos(r))` is evaluated as `atan2(‖q‖, r) / ‖q‖`, which
/// is the same quantity on the unit sphere but stays accurate near the
/// identity, where `arccos` loses half the significant digits.
pub fn quat_log(a: &UnitQuaternion) -> RotVec3 {
    let n = a.q.norm();
    if n < SMALL_ANGLE {
        // Near ±identity; the sign keeps the result on the r >= 0 cover.
        return RotVec3(if a.r >= 0.0 { a.q } else { -a.q });
    }
    let r = a.r.clamp(-1.0, 1.0);
    RotVec3(a.q * (n.atan2(r) / n))
}

/// Exponential map so(3) → SO(3).
pub fn quat_exp(w: RotVec3) -> UnitQuaternion {
    let n = w.0.norm();
    if n < SMALL_ANGLE {
        // sin(n)/n = 1 - n²/6 + O(n⁴)
        return UnitQuaternion {
            r: n.cos(),
            q: w.0 * (1.0 - n * n / 6.0),
        }
        .renormalized();
    }
    UnitQuaternion {
        r: n.cos(),
        q: w.0 * (n.sin() / n),
    }
}
