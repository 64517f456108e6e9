use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::character::{swing_axis, CharacterError, Pose, PoseDoc, Skeleton};
use crate::geom::{Rotation, Vec3};

/// A sequence of poses for one skeleton.
#[derive(Debug, Clone, PartialEq)]
pub struct Clip {
    pub skeleton: String,
    pub frame_rate: f64,
    pub frames: Vec<Pose>,
}

/// `{skeleton, frame_rate, frames: [{rotations_wxyz, root_translation}]}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClipDoc {
    pub skeleton: String,
    pub frame_rate: f64,
    pub frames: Vec<PoseDoc>,
}

impl Clip {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn check(&self, skeleton: &Skeleton) -> Result<(), CharacterError> {
        self.frames.iter().try_for_each(|f| f.check(skeleton))
    }

    pub fn to_doc(&self) -> ClipDoc {
        ClipDoc {
            skeleton: self.skeleton.clone(),
            frame_rate: self.frame_rate,
            frames: self.frames.iter().map(Pose::to_doc).collect(),
        }
    }

    pub fn from_doc(doc: &ClipDoc) -> Result<Self, CharacterError> {
        if !(doc.frame_rate > 0.0) {
            return Err(CharacterError::InvalidPose(format!("frame rate {}", doc.frame_rate)));
        }
        let frames = doc.frames.iter().map(Pose::from_doc).collect::<Result<_, _>>()?;
        Ok(Self { skeleton: doc.skeleton.clone(), frame_rate: doc.frame_rate, frames })
    }
}

/// Clip whose every non-leaf joint swings about a fixed random axis
/// (orthogonal to its bone) by an angle growing linearly from a random
/// start, so pose distance between frames grows with their offset.
/// Per-joint drift is drawn from `[-max_drift, max_drift]` radians per frame.
pub fn drift_clip(skeleton: &Skeleton, frames: usize, max_start: f64, max_drift: f64, seed: u64) -> Clip {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tracks: Vec<Option<(Vec3, f64, f64)>> = (0..skeleton.len())
        .map(|k| {
            skeleton.bone_direction(k).map(|b| {
                let axis = swing_axis(&b, rng.gen_range(0.0..std::f64::consts::TAU));
                (axis, rng.gen_range(-max_start..=max_start), rng.gen_range(-max_drift..=max_drift))
            })
        })
        .collect();
    let frames = (0..frames)
        .map(|f| {
            let rotations: Vec<Rotation> = tracks
                .iter()
                .map(|t| match t {
                    Some((axis, start, rate)) => Rotation::from_axis_angle(axis, start + rate * f as f64),
                    None => Rotation::identity(),
                })
                .collect();
            Pose::from_rotations(&rotations, Vec3::zeros())
        })
        .collect();
    Clip { skeleton: skeleton.name().to_string(), frame_rate: 30.0, frames }
}
