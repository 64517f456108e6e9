//! Procedural rigged "capsule humans" with closed-form ground truth.
//!
//! Every body part is a tapered capsule rigidly attached to one bone, so
//! occupancy, skinning weights and joint positions all have exact oracles,
//! and the surface is invariant to roll about any bone axis.

mod capsule;
mod skeleton;

pub use capsule::{round_cone_sdf, Capsule};
pub use skeleton::{random_pose, random_swing, swing_axis, Joint, JointDoc, Pose, PoseDoc, Skeleton, SkeletonDoc};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::animation::forward_kinematics;
use crate::extraction::marching_cubes;
use crate::geom::{RigidTransform, TriangleMesh, Vec3, VoxelGrid};

#[derive(Debug, Error)]
pub enum CharacterError {
    #[error("invalid skeleton: {0}")]
    InvalidSkeleton(String),
    #[error("zero-length bone between joint {joint} and child {child}")]
    ZeroLengthBone { joint: usize, child: usize },
    #[error("expected {expected} joints, got {got}")]
    JointCount { expected: usize, got: usize },
    #[error("invalid pose: {0}")]
    InvalidPose(String),
    #[error("invalid capsule: {0}")]
    InvalidCapsule(String),
    #[error("invalid character config: {0}")]
    InvalidConfig(String),
}

/// The default humanoid topology with the given rest positions.
pub fn humanoid_skeleton(name: impl Into<String>, rest: &[Vec3]) -> Result<Skeleton, CharacterError> {
    if rest.len() != HUMANOID_JOINTS.len() {
        return Err(CharacterError::JointCount { expected: HUMANOID_JOINTS.len(), got: rest.len() });
    }
    let joints = HUMANOID_JOINTS
        .iter()
        .zip(HUMANOID_PARENTS)
        .zip(rest)
        .map(|((name, parent), r)| Joint { name: name.to_string(), parent, rest: *r })
        .collect();
    Skeleton::new(name, joints)
}

/// Default skinning sharpness, in m⁻².
pub const DEFAULT_BETA: f64 = 200.0;

/// Names of the default 15-joint humanoid, in topological order.
pub const HUMANOID_JOINTS: [&str; 15] = [
    "pelvis", "spine", "head", "l_shoulder", "l_elbow", "l_wrist", "r_shoulder", "r_elbow", "r_wrist",
    "l_hip", "l_knee", "l_ankle", "r_hip", "r_knee", "r_ankle",
];
const HUMANOID_PARENTS: [Option<usize>; 15] = [
    None,
    Some(0),
    Some(1),
    Some(1),
    Some(3),
    Some(4),
    Some(1),
    Some(6),
    Some(7),
    Some(0),
    Some(9),
    Some(10),
    Some(0),
    Some(12),
    Some(13),
];

/// Body-proportion controls for [`build_character`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Proportions {
    pub min_height: f64,
    pub max_height: f64,
    /// Relative jitter applied to segment lengths.
    pub length_jitter: f64,
    /// Relative jitter applied to capsule radii.
    pub radius_jitter: f64,
    /// Rest-pose arm angle from vertical, degrees (A-pose).
    pub arm_angle_deg: f64,
    pub beta: f64,
}

impl Default for Proportions {
    fn default() -> Self {
        Self {
            min_height: 1.5,
            max_height: 1.9,
            length_jitter: 0.05,
            radius_jitter: 0.1,
            arm_angle_deg: 35.0,
            beta: DEFAULT_BETA,
        }
    }
}

impl Proportions {
    pub fn validate(&self) -> Result<(), CharacterError> {
        let bad = |m: &str| Err(CharacterError::InvalidConfig(m.to_string()));
        if !(self.min_height > 0.0 && self.max_height >= self.min_height) {
            return bad("heights must satisfy 0 < min_height <= max_height");
        }
        if !(0.0..0.3).contains(&self.length_jitter) || !(0.0..0.3).contains(&self.radius_jitter) {
            return bad("jitter must lie in [0, 0.3)");
        }
        if !(0.0..=80.0).contains(&self.arm_angle_deg) {
            return bad("arm angle must lie in [0, 80] degrees");
        }
        if !(self.beta > 0.0) {
            return bad("beta must be positive");
        }
        Ok(())
    }
}

/// Serialized character: skeleton document, capsules and skinning
/// sharpness.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CharacterDoc {
    pub skeleton: SkeletonDoc,
    pub capsules: Vec<Capsule>,
    pub beta: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RiggedCharacter {
    skeleton: Skeleton,
    capsules: Vec<Capsule>,
    beta: f64,
}

impl RiggedCharacter {
    pub fn new(skeleton: Skeleton, capsules: Vec<Capsule>, beta: f64) -> Result<Self, CharacterError> {
        if !(beta > 0.0) {
            return Err(CharacterError::InvalidConfig(format!("beta = {beta}")));
        }
        for c in &capsules {
            if !(c.radius_head > 0.0 && c.radius_tail > 0.0) {
                return Err(CharacterError::InvalidCapsule(format!("non-positive radius on joint {}", c.joint)));
            }
            if c.child >= skeleton.len() || skeleton.parent(c.child) != Some(c.joint) {
                return Err(CharacterError::InvalidCapsule(format!(
                    "joint {} has no child {}",
                    c.joint, c.child
                )));
            }
            let len = (skeleton.joints()[c.child].rest - skeleton.joints()[c.joint].rest).norm();
            if (c.radius_head - c.radius_tail).abs() >= len {
                return Err(CharacterError::InvalidCapsule(format!("taper exceeds length on joint {}", c.joint)));
            }
        }
        for k in 0..skeleton.len() {
            if !skeleton.is_leaf(k) && !capsules.iter().any(|c| c.joint == k) {
                return Err(CharacterError::InvalidCapsule(format!("non-leaf joint {k} has no capsule")));
            }
        }
        Ok(Self { skeleton, capsules, beta })
    }

    pub fn skeleton(&self) -> &Skeleton {
        &self.skeleton
    }

    pub fn capsules(&self) -> &[Capsule] {
        &self.capsules
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn joint_count(&self) -> usize {
        self.skeleton.len()
    }

    pub fn to_doc(&self) -> CharacterDoc {
        CharacterDoc { skeleton: self.skeleton.to_doc(), capsules: self.capsules.clone(), beta: self.beta }
    }

    pub fn from_doc(doc: &CharacterDoc) -> Result<Self, CharacterError> {
        Self::new(Skeleton::from_doc(&doc.skeleton)?, doc.capsules.clone(), doc.beta)
    }

    /// Capsules moved rigidly with their bones.
    pub fn posed(&self, pose: &Pose) -> Result<PosedBody, CharacterError> {
        pose.check(&self.skeleton)?;
        let transforms = forward_kinematics(&self.skeleton, pose);
        Ok(self.body_from_transforms(&transforms))
    }

    pub fn rest_body(&self) -> PosedBody {
        self.body_from_transforms(&vec![RigidTransform::identity(); self.skeleton.len()])
    }

    fn body_from_transforms(&self, transforms: &[RigidTransform]) -> PosedBody {
        let joints = self.skeleton.joints();
        let parts = self
            .capsules
            .iter()
            .map(|c| {
                let t = &transforms[c.joint];
                PosedCapsule {
                    joint: c.joint,
                    a: t.apply(&joints[c.joint].rest),
                    b: t.apply(&joints[c.child].rest),
                    ra: c.radius_head,
                    rb: c.radius_tail,
                }
            })
            .collect();
        PosedBody { parts }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PosedCapsule {
    pub joint: usize,
    pub a: Vec3,
    pub b: Vec3,
    pub ra: f64,
    pub rb: f64,
}

impl PosedCapsule {
    pub fn sdf(&self, p: &Vec3) -> f64 {
        round_cone_sdf(p, &self.a, &self.b, self.ra, self.rb)
    }

    pub fn bounds(&self) -> (Vec3, Vec3) {
        let ra = Vec3::repeat(self.ra);
        let rb = Vec3::repeat(self.rb);
        ((self.a - ra).inf(&(self.b - rb)), (self.a + ra).sup(&(self.b + rb)))
    }
}

/// Union of posed capsules.
#[derive(Debug, Clone, PartialEq)]
pub struct PosedBody {
    pub parts: Vec<PosedCapsule>,
}

impl PosedBody {
    /// Signed distance to the union: exact outside, a bound inside.
    pub fn sdf(&self, p: &Vec3) -> f64 {
        self.parts.iter().map(|c| c.sdf(p)).fold(f64::INFINITY, f64::min)
    }

    pub fn contains(&self, p: &Vec3) -> bool {
        self.sdf(p) <= 0.0
    }

    pub fn bounds(&self) -> (Vec3, Vec3) {
        self.parts.iter().map(PosedCapsule::bounds).fold(
            (Vec3::repeat(f64::INFINITY), Vec3::repeat(f64::NEG_INFINITY)),
            |(lo, hi), (a, b)| (lo.inf(&a), hi.sup(&b)),
        )
    }
}

/// Deterministic humanoid from `seed`: 15 joints rooted at the pelvis,
/// standing on z = 0 in an A-pose, total height drawn from the configured
/// range.
pub fn build_character(seed: u64, config: &Proportions) -> Result<RiggedCharacter, CharacterError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let h = if config.max_height > config.min_height {
        rng.gen_range(config.min_height..=config.max_height)
    } else {
        config.min_height
    };
    let mut len = |x: f64| x * h * (1.0 + config.length_jitter * rng.gen_range(-1.0..=1.0));
    // Fractions of body height, roughly following standard anthropometry.
    let pelvis_z = len(0.53);
    let spine_z = pelvis_z + len(0.29);
    let shoulder_dx = len(0.11);
    let shoulder_drop = len(0.015);
    let upper_arm = len(0.17);
    let forearm = len(0.15);
    let hip_dx = len(0.05);
    let thigh_frac = 0.47 + 0.03 * rng.gen_range(-1.0..=1.0);

    let mut rad = |x: f64| x * h * (1.0 + config.radius_jitter * rng.gen_range(-1.0..=1.0));
    let r_torso_low = rad(0.075);
    let r_torso_high = rad(0.07);
    let r_neck = rad(0.03);
    let r_head = rad(0.058);
    let r_clav = rad(0.035);
    let r_shoulder = rad(0.03);
    let r_elbow = rad(0.024);
    let r_forearm = rad(0.022);
    let r_wrist = rad(0.018);
    let r_hip = rad(0.055);
    let r_thigh = rad(0.045);
    let r_knee = rad(0.032);
    let r_shin = rad(0.03);
    let r_ankle = rad(0.024);

    let head_z = h - r_head;
    let ankle_z = r_ankle;
    let knee_z = ankle_z + (pelvis_z - ankle_z) * thigh_frac;
    let arm = config.arm_angle_deg.to_radians();
    let arm_dir = |side: f64| Vec3::new(side * arm.sin(), 0.0, -arm.cos());

    let mut rest = vec![Vec3::zeros(); 15];
    rest[0] = Vec3::new(0.0, 0.0, pelvis_z);
    rest[1] = Vec3::new(0.0, 0.0, spine_z);
    rest[2] = Vec3::new(0.0, 0.0, head_z);
    for (side, base) in [(1.0, 3), (-1.0, 6)] {
        rest[base] = Vec3::new(side * shoulder_dx, 0.0, spine_z - shoulder_drop);
        rest[base + 1] = rest[base] + arm_dir(side) * upper_arm;
        rest[base + 2] = rest[base + 1] + arm_dir(side) * forearm;
    }
    for (side, base) in [(1.0, 9), (-1.0, 12)] {
        rest[base] = Vec3::new(side * hip_dx, 0.0, pelvis_z);
        rest[base + 1] = Vec3::new(side * hip_dx * 1.1, 0.0, knee_z);
        rest[base + 2] = Vec3::new(side * hip_dx * 1.2, 0.0, ankle_z);
    }
    let skeleton = humanoid_skeleton(format!("humanoid-{seed}"), &rest)?;

    let cap = |joint, child, ra, rb| Capsule { joint, child, radius_head: ra, radius_tail: rb };
    let capsules = vec![
        cap(0, 1, r_torso_low, r_torso_high),
        cap(0, 9, r_hip, r_hip),
        cap(0, 12, r_hip, r_hip),
        cap(1, 2, r_neck, r_head),
        cap(1, 3, r_clav, r_shoulder),
        cap(1, 6, r_clav, r_shoulder),
        cap(3, 4, r_shoulder, r_elbow),
        cap(4, 5, r_forearm, r_wrist),
        cap(6, 7, r_shoulder, r_elbow),
        cap(7, 8, r_forearm, r_wrist),
        cap(9, 10, r_thigh, r_knee),
        cap(10, 11, r_shin, r_ankle),
        cap(12, 13, r_thigh, r_knee),
        cap(13, 14, r_shin, r_ankle),
    ];
    RiggedCharacter::new(skeleton, capsules, config.beta)
}

/// 1 inside the union of posed capsules (boundary included), else 0.
pub fn analytic_occupancy(character: &RiggedCharacter, pose: &Pose, p: &Vec3) -> Result<u8, CharacterError> {
    Ok(character.posed(pose)?.contains(p) as u8)
}

/// Rest-pose skinning weights: `s_k ∝ exp(−β·d_k²)` with `d_k` the distance
/// from `p` to the surface of joint `k`'s capsules (0 inside). Leaf joints
/// get weight 0.
pub fn analytic_skinning(character: &RiggedCharacter, p: &Vec3) -> Vec<f64> {
    skinning_from_body(&character.rest_body(), character.joint_count(), character.beta, p)
}

pub(crate) fn skinning_from_body(body: &PosedBody, joints: usize, beta: f64, p: &Vec3) -> Vec<f64> {
    let mut d = vec![f64::INFINITY; joints];
    for c in &body.parts {
        d[c.joint] = d[c.joint].min(c.sdf(p).max(0.0));
    }
    let logits: Vec<f64> = d.iter().map(|&dk| if dk.is_finite() { -beta * dk * dk } else { f64::NEG_INFINITY }).collect();
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut w: Vec<f64> = logits.iter().map(|&l| if l.is_finite() { (l - max).exp() } else { 0.0 }).collect();
    let total: f64 = w.iter().sum();
    w.iter_mut().for_each(|x| *x /= total);
    w
}

/// World positions of every joint under `pose`.
pub fn analytic_joints(character: &RiggedCharacter, pose: &Pose) -> Result<Vec<Vec3>, CharacterError> {
    pose.check(&character.skeleton)?;
    let transforms = forward_kinematics(&character.skeleton, pose);
    Ok(character.skeleton.joints().iter().zip(&transforms).map(|(j, t)| t.apply(&j.rest)).collect())
}

/// Closed surface of the posed character: marching cubes at iso 0.5 over a
/// cube of `resolution³` cells around the body, sampling the soft
/// occupancy `clamp(0.5 − sdf / cell, 0, 1)` whose 0.5 level set is exactly
/// the capsule boundary.
pub fn character_mesh(character: &RiggedCharacter, pose: &Pose, resolution: usize) -> Result<TriangleMesh, CharacterError> {
    if resolution < 16 {
        return Err(CharacterError::InvalidConfig(format!("mesh resolution {resolution} < 16")));
    }
    let body = character.posed(pose)?;
    Ok(body_mesh(&body, resolution))
}

pub(crate) fn body_mesh(body: &PosedBody, resolution: usize) -> TriangleMesh {
    let (lo, hi) = body.bounds();
    let side = (hi - lo).max() * 1.1;
    let grid = VoxelGrid::cube((lo + hi) * 0.5, side, resolution, 1).expect("positive extent");
    let cell = grid.cell_size();
    let n = resolution;
    let mut sdf = vec![f64::INFINITY; grid.cell_count()];
    for part in &body.parts {
        let (plo, phi) = part.bounds();
        let o = grid.origin();
        // cells whose centres lie within one cell of the capsule's box
        let range = |a: usize, lo: f64, hi: f64| {
            let first = ((lo - o[a]) / cell - 1.5).floor().max(0.0) as usize;
            let last = (((hi - o[a]) / cell + 0.5).ceil().max(0.0) as usize).min(n - 1);
            first..=last
        };
        for k in range(2, plo.z, phi.z) {
            for j in range(1, plo.y, phi.y) {
                for i in range(0, plo.x, phi.x) {
                    let lin = grid.linear_index(i, j, k);
                    sdf[lin] = sdf[lin].min(part.sdf(&grid.cell_center(i, j, k)));
                }
            }
        }
    }
    let values = sdf.iter().map(|d| (0.5 - d / cell).clamp(0.0, 1.0)).collect();
    marching_cubes(&grid.with_values(1, values), 0.5)
}
