use nalgebra::{Matrix3, UnitQuaternion};

use super::{GeomError, Vec3};

/// Unit quaternion, used for serialization in (w, x, y, z) order.
pub type Quat = UnitQuaternion<f64>;

/// Number of compositions after which a rotation is projected back onto SO(3).
const RENORMALIZE_EVERY: u32 = 64;

/// A proper rotation stored as an orthonormal 3×3 matrix.
///
/// Composition tracks how many products a matrix has been through and
/// re-orthonormalizes (polar projection) every 64 of them, which bounds
/// floating-point drift for long kinematic chains.
#[derive(Debug, Clone, Copy)]
pub struct Rotation {
    m: Matrix3<f64>,
    depth: u32,
}

/// Equality of the matrices; the composition counter is bookkeeping.
impl PartialEq for Rotation {
    fn eq(&self, other: &Self) -> bool {
        self.m == other.m
    }
}

impl Default for Rotation {
    fn default() -> Self {
        Self::identity()
    }
}

impl Rotation {
    pub fn identity() -> Self {
        Self { m: Matrix3::identity(), depth: 0 }
    }

    /// Validates orthonormality and orientation to within `1e-9`.
    pub fn from_matrix(m: Matrix3<f64>) -> Result<Self, GeomError> {
        let r = Self { m, depth: 0 };
        if !m.iter().all(|v| v.is_finite()) {
            return Err(GeomError::InvalidRotation("non-finite entry".into()));
        }
        let err = r.orthonormality_error();
        if err > 1e-9 {
            return Err(GeomError::InvalidRotation(format!("|RᵀR - I| = {err:e}")));
        }
        let det = m.determinant();
        if (det - 1.0).abs() > 1e-9 {
            return Err(GeomError::InvalidRotation(format!("det = {det}")));
        }
        Ok(r)
    }

    /// Rotation by `angle` radians about `axis` (need not be normalized).
    pub fn from_axis_angle(axis: &Vec3, angle: f64) -> Self {
        let n = axis.norm();
        if n == 0.0 || angle == 0.0 {
            return Self::identity();
        }
        let k = axis / n;
        let (s, c) = angle.sin_cos();
        let t = 1.0 - c;
        let m = Matrix3::new(
            t * k.x * k.x + c,
            t * k.x * k.y - s * k.z,
            t * k.x * k.z + s * k.y,
            t * k.x * k.y + s * k.z,
            t * k.y * k.y + c,
            t * k.y * k.z - s * k.x,
            t * k.x * k.z - s * k.y,
            t * k.y * k.z + s * k.x,
            t * k.z * k.z + c,
        );
        Self { m, depth: 0 }
    }

    /// Rotation about the vertical (z) axis.
    pub fn about_up(angle: f64) -> Self {
        Self::from_axis_angle(&super::UP, angle)
    }

    pub fn from_quat(q: &Quat) -> Self {
        Self { m: *q.to_rotation_matrix().matrix(), depth: 0 }
    }

    /// Nearest unit quaternion, canonicalized to `w >= 0`.
    pub fn to_quat(&self) -> Quat {
        let q = UnitQuaternion::from_matrix(&self.m);
        if q.w < 0.0 {
            UnitQuaternion::new_unchecked(-q.into_inner())
        } else {
            q
        }
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.m
    }

    pub fn apply(&self, v: &Vec3) -> Vec3 {
        self.m * v
    }

    pub fn inverse(&self) -> Self {
        Self { m: self.m.transpose(), depth: self.depth }
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &Rotation) -> Self {
        let r = Self { m: self.m * other.m, depth: self.depth + other.depth + 1 };
        if r.depth >= RENORMALIZE_EVERY {
            r.renormalized()
        } else {
            r
        }
    }

    /// Orthogonal (polar) projection onto SO(3).
    pub fn renormalized(&self) -> Self {
        let svd = self.m.svd(true, true);
        let (u, vt) = (svd.u.unwrap(), svd.v_t.unwrap());
        let mut m = u * vt;
        if m.determinant() < 0.0 {
            let mut u = u;
            u.column_mut(2).neg_mut();
            m = u * vt;
        }
        Self { m, depth: 0 }
    }

    /// `max |RᵀR − I|` entrywise.
    pub fn orthonormality_error(&self) -> f64 {
        (self.m.transpose() * self.m - Matrix3::identity()).amax()
    }

    /// Rotation angle in `[0, π]`.
    pub fn angle(&self) -> f64 {
        ((self.m.trace() - 1.0) * 0.5).clamp(-1.0, 1.0).acos()
    }

    pub fn is_identity(&self, tol: f64) -> bool {
        (self.m - Matrix3::identity()).amax() <= tol
    }
}

/// `x ↦ R·x + t`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct RigidTransform {
    pub rotation: Rotation,
    pub translation: Vec3,
}

impl RigidTransform {
    pub fn identity() -> Self {
        Self::default()
    }

    pub fn new(rotation: Rotation, translation: Vec3) -> Self {
        Self { rotation, translation }
    }

    pub fn from_translation(t: Vec3) -> Self {
        Self { rotation: Rotation::identity(), translation: t }
    }

    /// Rotation about the point `pivot`: `x ↦ R(x − pivot) + pivot`,
    /// i.e. the block `[R, (I − R)·pivot; 0, 1]`.
    pub fn about_pivot(rotation: Rotation, pivot: &Vec3) -> Self {
        let translation = pivot - rotation.apply(pivot);
        Self { rotation, translation }
    }

    pub fn apply(&self, p: &Vec3) -> Vec3 {
        self.rotation.apply(p) + self.translation
    }

    pub fn apply_vector(&self, v: &Vec3) -> Vec3 {
        self.rotation.apply(v)
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &RigidTransform) -> Self {
        Self {
            rotation: self.rotation.compose(&other.rotation),
            translation: self.rotation.apply(&other.translation) + self.translation,
        }
    }

    pub fn inverse(&self) -> Self {
        let r = self.rotation.inverse();
        Self { translation: -r.apply(&self.translation), rotation: r }
    }
}
