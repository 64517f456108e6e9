use nalgebra::{Quaternion, UnitQuaternion};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::CharacterError;
use crate::geom::{Quat, Rotation, Vec3};

#[derive(Debug, Clone, PartialEq)]
pub struct Joint {
    pub name: String,
    pub parent: Option<usize>,
    pub rest: Vec3,
}

/// Joint tree in topological order: joint 0 is the single root and every
/// parent index is smaller than its child's.
#[derive(Debug, Clone, PartialEq)]
pub struct Skeleton {
    name: String,
    joints: Vec<Joint>,
    children: Vec<Vec<usize>>,
}

impl Skeleton {
    pub fn new(name: impl Into<String>, joints: Vec<Joint>) -> Result<Self, CharacterError> {
        if joints.len() < 2 {
            return Err(CharacterError::InvalidSkeleton(format!("{} joints, need at least 2", joints.len())));
        }
        let mut children = vec![Vec::new(); joints.len()];
        for (k, j) in joints.iter().enumerate() {
            match (k, j.parent) {
                (0, None) => {}
                (0, Some(_)) => return Err(CharacterError::InvalidSkeleton("joint 0 must be the root".into())),
                (_, None) => return Err(CharacterError::InvalidSkeleton(format!("second root at joint {k}"))),
                (_, Some(p)) if p >= k => {
                    return Err(CharacterError::InvalidSkeleton(format!("joint {k} has parent {p} >= {k}")))
                }
                (_, Some(p)) => {
                    if (j.rest - joints[p].rest).norm() < 1e-9 {
                        return Err(CharacterError::ZeroLengthBone { joint: p, child: k });
                    }
                    children[p].push(k);
                }
            }
            if !crate::geom::is_finite(&j.rest) {
                return Err(CharacterError::InvalidSkeleton(format!("joint {k} has non-finite rest position")));
            }
        }
        Ok(Self { name: name.into(), joints, children })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn len(&self) -> usize {
        self.joints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.joints.is_empty()
    }

    pub fn joints(&self) -> &[Joint] {
        &self.joints
    }

    pub fn parent(&self, k: usize) -> Option<usize> {
        self.joints[k].parent
    }

    pub fn parents(&self) -> Vec<Option<usize>> {
        self.joints.iter().map(|j| j.parent).collect()
    }

    pub fn children(&self, k: usize) -> &[usize] {
        &self.children[k]
    }

    pub fn is_leaf(&self, k: usize) -> bool {
        self.children[k].is_empty()
    }

    /// The child that defines joint `k`'s bone direction: the lowest-index
    /// child. `None` for leaves.
    pub fn primary_child(&self, k: usize) -> Option<usize> {
        self.children[k].first().copied()
    }

    pub fn rest_positions(&self) -> Vec<Vec3> {
        self.joints.iter().map(|j| j.rest).collect()
    }

    /// Unit rest direction from joint `k` to its primary child.
    pub fn bone_direction(&self, k: usize) -> Option<Vec3> {
        self.primary_child(k).map(|c| (self.joints[c].rest - self.joints[k].rest).normalize())
    }

    pub fn same_topology(&self, other: &Skeleton) -> bool {
        self.len() == other.len() && self.joints.iter().zip(&other.joints).all(|(a, b)| a.parent == b.parent)
    }

    /// Same names and topology with new rest positions.
    pub fn with_rest_positions(&self, rest: &[Vec3]) -> Result<Self, CharacterError> {
        if rest.len() != self.len() {
            return Err(CharacterError::JointCount { expected: self.len(), got: rest.len() });
        }
        let joints = self.joints.iter().zip(rest).map(|(j, r)| Joint { rest: *r, ..j.clone() }).collect();
        Self::new(self.name.clone(), joints)
    }

    pub fn to_doc(&self) -> SkeletonDoc {
        SkeletonDoc {
            name: self.name.clone(),
            joints: self
                .joints
                .iter()
                .map(|j| JointDoc { name: j.name.clone(), parent: j.parent, rest_position: j.rest.into() })
                .collect(),
        }
    }

    pub fn from_doc(doc: &SkeletonDoc) -> Result<Self, CharacterError> {
        let joints = doc
            .joints
            .iter()
            .map(|j| Joint { name: j.name.clone(), parent: j.parent, rest: Vec3::from(j.rest_position) })
            .collect();
        Self::new(doc.name.clone(), joints)
    }
}

/// `{name, joints: [{name, parent, rest_position: [x, y, z]}]}`; the root's
/// parent is `null`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkeletonDoc {
    pub name: String,
    pub joints: Vec<JointDoc>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointDoc {
    pub name: String,
    pub parent: Option<usize>,
    pub rest_position: [f64; 3],
}

/// Per-joint rotations relative to the parent plus a root translation.
///
/// Rotations are held as unit quaternions so that a pose survives
/// serialization bit-for-bit.
#[derive(Debug, Clone, PartialEq)]
pub struct Pose {
    rotations: Vec<Quat>,
    root_translation: Vec3,
}

impl Pose {
    pub fn identity(joints: usize) -> Self {
        Self { rotations: vec![Quat::identity(); joints], root_translation: Vec3::zeros() }
    }

    pub fn new(rotations: Vec<Quat>, root_translation: Vec3) -> Self {
        Self { rotations, root_translation }
    }

    pub fn from_rotations(rotations: &[Rotation], root_translation: Vec3) -> Self {
        Self { rotations: rotations.iter().map(Rotation::to_quat).collect(), root_translation }
    }

    pub fn len(&self) -> usize {
        self.rotations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rotations.is_empty()
    }

    pub fn quat(&self, k: usize) -> &Quat {
        &self.rotations[k]
    }

    pub fn rotation(&self, k: usize) -> Rotation {
        Rotation::from_quat(&self.rotations[k])
    }

    pub fn root_translation(&self) -> Vec3 {
        self.root_translation
    }

    pub fn with_root_translation(mut self, t: Vec3) -> Self {
        self.root_translation = t;
        self
    }

    pub fn check(&self, skeleton: &Skeleton) -> Result<(), CharacterError> {
        if self.len() != skeleton.len() {
            return Err(CharacterError::JointCount { expected: skeleton.len(), got: self.len() });
        }
        Ok(())
    }

    pub fn to_doc(&self) -> PoseDoc {
        PoseDoc {
            rotations_wxyz: self.rotations.iter().map(|q| [q.w, q.i, q.j, q.k]).collect(),
            root_translation: self.root_translation.into(),
        }
    }

    pub fn from_doc(doc: &PoseDoc) -> Result<Self, CharacterError> {
        let rotations = doc
            .rotations_wxyz
            .iter()
            .map(|&[w, x, y, z]| {
                let q = Quaternion::new(w, x, y, z);
                let n = q.norm();
                if !(n.is_finite() && (n - 1.0).abs() < 1e-6) {
                    return Err(CharacterError::InvalidPose(format!("quaternion norm {n}")));
                }
                // Keep stored bits when already unit, so files round-trip.
                Ok(if (n - 1.0).abs() < 1e-12 {
                    UnitQuaternion::new_unchecked(q)
                } else {
                    UnitQuaternion::from_quaternion(q)
                })
            })
            .collect::<Result<_, _>>()?;
        Ok(Self { rotations, root_translation: Vec3::from(doc.root_translation) })
    }
}

/// Per-joint unit quaternions `(w, x, y, z)` and the root translation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoseDoc {
    pub rotations_wxyz: Vec<[f64; 4]>,
    pub root_translation: [f64; 3],
}

/// Random rotation about an axis perpendicular to `bone`, with angle drawn
/// uniformly from `[-max_angle, max_angle]`. Such rotations carry no roll
/// about the bone.
pub fn random_swing(bone: &Vec3, max_angle: f64, rng: &mut impl Rng) -> Rotation {
    let axis = swing_axis(bone, rng.gen_range(0.0..std::f64::consts::TAU));
    Rotation::from_axis_angle(&axis, rng.gen_range(-max_angle..=max_angle))
}

/// Unit axis perpendicular to `bone`, at `phase` radians around it.
pub fn swing_axis(bone: &Vec3, phase: f64) -> Vec3 {
    let b = bone.normalize();
    let helper = if b.x.abs() < 0.9 { Vec3::x() } else { Vec3::y() };
    let e1 = b.cross(&helper).normalize();
    let e2 = b.cross(&e1);
    e1 * phase.cos() + e2 * phase.sin()
}

/// Roll-free random pose: each non-leaf joint swings its primary bone by up
/// to `max_angle` (the root by up to `max_root_angle`); leaves stay at
/// identity.
pub fn random_pose(skeleton: &Skeleton, max_angle: f64, max_root_angle: f64, rng: &mut impl Rng) -> Pose {
    let rotations: Vec<Rotation> = (0..skeleton.len())
        .map(|k| match skeleton.bone_direction(k) {
            Some(b) => random_swing(&b, if k == 0 { max_root_angle } else { max_angle }, rng),
            None => Rotation::identity(),
        })
        .collect();
    Pose::from_rotations(&rotations, Vec3::zeros())
}
