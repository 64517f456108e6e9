//! Analytic inverse kinematics, forward kinematics, linear blend skinning
//! and retargeting of extracted models.

mod clip;

pub use clip::{drift_clip, Clip, ClipDoc};

use nalgebra::Matrix3;
use thiserror::Error;

use crate::character::{CharacterError, Pose, Skeleton};
use crate::extraction::AnimatableModel;
use crate::geom::{RigidTransform, Rotation, TriangleMesh, Vec3, UP};
use crate::par;

#[derive(Debug, Error)]
pub enum AnimationError {
    #[error("expected unit vector, got norm {0}")]
    NonUnit(f64),
    #[error("skeleton topology mismatch: {0}")]
    TopologyMismatch(String),
    #[error("zero-length target bone between joint {joint} and child {child}")]
    ZeroLengthBone { joint: usize, child: usize },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("skinning row {row} sums to {sum}")]
    NonSimplexRow { row: usize, sum: f64 },
    #[error(transparent)]
    Character(#[from] CharacterError),
}

/// Minimal rotation taking unit `a` onto unit `b`.
///
/// For antiparallel inputs the result is a half turn about the component of
/// the up axis orthogonal to `a` (the x axis when `a` is vertical).
pub fn shortest_arc_rotation(a: &Vec3, b: &Vec3) -> Result<Rotation, AnimationError> {
    for v in [a, b] {
        let n = v.norm();
        if !(n.is_finite() && (n - 1.0).abs() <= 1e-6) {
            return Err(AnimationError::NonUnit(n));
        }
    }
    Ok(shortest_arc_unchecked(&a.normalize(), &b.normalize()))
}

fn shortest_arc_unchecked(a: &Vec3, b: &Vec3) -> Rotation {
    let c = a.dot(b);
    if c >= 0.0 {
        return rodrigues(a, b, c);
    }
    // Obtuse: half turn about an axis orthogonal to a (taking a to −a),
    // then the acute arc from −a to b.
    let u = if c < -1.0 + 1e-9 { half_turn_axis(a) } else { a.cross(b).normalize() };
    let half = Matrix3::from_fn(|i, j| 2.0 * u[i] * u[j] - if i == j { 1.0 } else { 0.0 });
    let half = Rotation::from_matrix(half).expect("half turn about a unit axis");
    rodrigues(&-a, b, -c).compose(&half)
}

fn half_turn_axis(a: &Vec3) -> Vec3 {
    let axis = if (a - UP * a.dot(&UP)).norm() <= 1e-6 { Vec3::x() } else { UP };
    (axis - a * a.dot(&axis)).normalize()
}

/// `I + [v]× + [v]×²/(1 + c)` with `v = a × b`, `c = a · b ≥ 0`.
fn rodrigues(a: &Vec3, b: &Vec3, c: f64) -> Rotation {
    let v = a.cross(b);
    let k = Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0);
    Rotation::from_matrix(Matrix3::identity() + k + k * k / (1.0 + c)).expect("unit inputs give an orthonormal matrix")
}

/// World transforms `T_k = T_parent(k) ∘ F_k` with
/// `F_k(p) = Θ_k (p − j_k) + j_k`, the root translation applied last.
///
/// Panics if `pose` does not have one rotation per joint; call
/// [`Pose::check`] first for untrusted input.
pub fn forward_kinematics(skeleton: &Skeleton, pose: &Pose) -> Vec<RigidTransform> {
    assert_eq!(pose.len(), skeleton.len(), "pose length must match skeleton");
    let joints = skeleton.joints();
    let mut out: Vec<RigidTransform> = Vec::with_capacity(joints.len());
    for (k, j) in joints.iter().enumerate() {
        let local = RigidTransform::about_pivot(pose.rotation(k), &j.rest);
        let t = match j.parent {
            None => RigidTransform::from_translation(pose.root_translation()).compose(&local),
            Some(p) => out[p].compose(&local),
        };
        out.push(t);
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct IkSolution {
    pub pose: Pose,
    /// Per joint: largest angle between a posed rest bone and its target
    /// bone, over all child bones. Zero for leaves.
    pub residuals: Vec<f64>,
}

impl IkSolution {
    pub fn max_residual(&self) -> f64 {
        self.residuals.iter().copied().fold(0.0, f64::max)
    }
}

/// Analytic IK: in topological order each non-leaf joint gets the shortest
/// arc aligning its ancestor-rotated primary bone with the target bone.
/// The root translation makes the root joints coincide.
pub fn solve_ik(source: &Skeleton, target: &[Vec3]) -> Result<IkSolution, AnimationError> {
    let k_count = source.len();
    if target.len() != k_count {
        return Err(AnimationError::TopologyMismatch(format!("{} target joints for {} skeleton joints", target.len(), k_count)));
    }
    let rest = source.rest_positions();
    let target_dir = |k: usize, c: usize| -> Result<Vec3, AnimationError> {
        let d = target[c] - target[k];
        let n = d.norm();
        if !(n > 1e-9 && n.is_finite()) {
            return Err(AnimationError::ZeroLengthBone { joint: k, child: c });
        }
        Ok(d / n)
    };

    let mut local = vec![Rotation::identity(); k_count];
    let mut global = vec![Rotation::identity(); k_count];
    for k in 0..k_count {
        let parent_global = source.parent(k).map_or_else(Rotation::identity, |p| global[p]);
        if let Some(c) = source.primary_child(k) {
            let b = (rest[c] - rest[k]).normalize();
            let want = parent_global.inverse().apply(&target_dir(k, c)?);
            local[k] = shortest_arc_unchecked(&b, &want.normalize());
        }
        global[k] = parent_global.compose(&local[k]);
    }

    let mut residuals = vec![0.0; k_count];
    for k in 0..k_count {
        for &c in source.children(k) {
            let posed = global[k].apply(&(rest[c] - rest[k]).normalize());
            residuals[k] = f64::max(residuals[k], angle_between(&posed, &target_dir(k, c)?));
        }
    }
    let pose = Pose::from_rotations(&local, target[0] - rest[0]);
    Ok(IkSolution { pose, residuals })
}

fn angle_between(a: &Vec3, b: &Vec3) -> f64 {
    // atan2 form stays accurate near 0 and π.
    a.cross(b).norm().atan2(a.dot(b))
}

/// Dense `N×K` row-major skinning matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct SkinningWeights {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
}

impl SkinningWeights {
    pub fn new(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self, AnimationError> {
        if cols == 0 || values.len() != rows * cols {
            return Err(AnimationError::Shape(format!("{} values for {rows}x{cols}", values.len())));
        }
        Ok(Self { rows, cols, values })
    }

    /// Builds from rows, checking that each lies on the simplex within `tol`.
    pub fn from_rows(rows: &[Vec<f64>], tol: f64) -> Result<Self, AnimationError> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(AnimationError::Shape("ragged skinning rows".into()));
        }
        let w = Self::new(rows.len(), cols, rows.concat())?;
        w.check_simplex(tol)?;
        Ok(w)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.cols..(i + 1) * self.cols]
    }

    pub fn check_simplex(&self, tol: f64) -> Result<(), AnimationError> {
        for i in 0..self.rows {
            let row = self.row(i);
            let sum: f64 = row.iter().sum();
            if !(sum - 1.0).abs().le(&tol) || row.iter().any(|&w| !(w >= -tol)) {
                return Err(AnimationError::NonSimplexRow { row: i, sum });
            }
        }
        Ok(())
    }
}

/// Linear blend skinning `v̄ = Σ_k w_k T_k(v)`, evaluated as
/// `v + Σ_k (w_k / Σw)(T_k(v) − v)` so identity transforms reproduce the
/// input exactly.
pub fn lbs_deform(
    mesh: &TriangleMesh,
    weights: &SkinningWeights,
    transforms: &[RigidTransform],
) -> Result<TriangleMesh, AnimationError> {
    if weights.rows() != mesh.vertices().len() {
        return Err(AnimationError::Shape(format!("{} weight rows for {} vertices", weights.rows(), mesh.vertices().len())));
    }
    if weights.cols() != transforms.len() {
        return Err(AnimationError::Shape(format!("{} weight columns for {} transforms", weights.cols(), transforms.len())));
    }
    weights.check_simplex(1e-4)?;
    let vertices = par::map_range(mesh.vertices().len(), |i| {
        let v = mesh.vertices()[i];
        let row = weights.row(i);
        let total: f64 = row.iter().sum();
        let mut d = Vec3::zeros();
        for (w, t) in row.iter().zip(transforms) {
            if *w != 0.0 {
                d += (t.apply(&v) - v) * (w / total);
            }
        }
        v + d
    });
    Ok(mesh.with_vertices(vertices))
}

/// IK to `target`, FK, then LBS of the model's mesh.
pub fn retarget(model: &AnimatableModel, target: &[Vec3]) -> Result<TriangleMesh, AnimationError> {
    let ik = solve_ik(model.skeleton(), target)?;
    let transforms = forward_kinematics(model.skeleton(), &ik.pose);
    lbs_deform(model.mesh(), model.weights(), &transforms)
}
