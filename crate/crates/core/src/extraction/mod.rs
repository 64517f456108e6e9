//! From a trained field to an explicit animatable model: dense grid
//! evaluation, marching cubes, heatmap argmax and per-vertex skinning.

mod mc;

pub use mc::marching_cubes;

use std::io::{Read, Write};

use thiserror::Error;

use crate::animation::{AnimationError, SkinningWeights};
use crate::character::{analytic_joints, analytic_skinning, character_mesh, humanoid_skeleton, skinning_from_body, CharacterError, Pose, RiggedCharacter, Skeleton};
use crate::fields::{encode, eval_points, FieldError, FieldInput, FieldParams, Heads};
use crate::geom::{TriangleMesh, Vec3, VoxelGrid};
use crate::par;
use crate::sensorsim::SensorSample;

#[derive(Debug, Error)]
pub enum ExtractionError {
    #[error("empty reconstruction: no cell reaches the iso level {iso}")]
    EmptyReconstruction { iso: f64 },
    #[error("invalid model: {0}")]
    InvalidModel(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error(transparent)]
    Character(#[from] CharacterError),
    #[error(transparent)]
    Animation(#[from] AnimationError),
    #[error(transparent)]
    Field(#[from] FieldError),
    #[error("skinning sidecar: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Mesh, skeleton (rest positions are the model's joints) and per-vertex
/// skinning weights.
#[derive(Debug, Clone, PartialEq)]
pub struct AnimatableModel {
    mesh: TriangleMesh,
    skeleton: Skeleton,
    weights: SkinningWeights,
}

impl AnimatableModel {
    /// Checks: one weight row per vertex, one column per joint, rows on the
    /// simplex within 1e-6, finite joints and a watertight mesh.
    pub fn new(mesh: TriangleMesh, skeleton: Skeleton, weights: SkinningWeights) -> Result<Self, ExtractionError> {
        let bad = |m: String| Err(ExtractionError::InvalidModel(m));
        if weights.rows() != mesh.vertices().len() {
            return bad(format!("{} weight rows for {} vertices", weights.rows(), mesh.vertices().len()));
        }
        if weights.cols() != skeleton.len() {
            return bad(format!("{} weight columns for {} joints", weights.cols(), skeleton.len()));
        }
        weights.check_simplex(1e-6)?;
        if !mesh.all_finite() || !mesh.is_watertight() {
            return bad("mesh is not a finite closed surface".into());
        }
        Ok(Self { mesh, skeleton, weights })
    }

    pub fn mesh(&self) -> &TriangleMesh {
        &self.mesh
    }

    pub fn skeleton(&self) -> &Skeleton {
        &self.skeleton
    }

    pub fn joints(&self) -> Vec<Vec3> {
        self.skeleton.rest_positions()
    }

    pub fn weights(&self) -> &SkinningWeights {
        &self.weights
    }
}

/// Model built from the analytic oracles: rest-pose capsule mesh at
/// `resolution`, exact joints and exact skinning at every vertex.
pub fn ground_truth_model(character: &RiggedCharacter, resolution: usize) -> Result<AnimatableModel, ExtractionError> {
    let mesh = character_mesh(character, &Pose::identity(character.joint_count()), resolution)?;
    let k = character.joint_count();
    let rows = par::map(mesh.vertices(), |v| analytic_skinning(character, v));
    let weights = SkinningWeights::new(mesh.vertices().len(), k, rows.concat())?;
    AnimatableModel::new(mesh, character.skeleton().clone(), weights)
}

/// Ground-truth model of the character held at `pose`: posed mesh, posed
/// joints as the rest skeleton and skinning of the posed body.
pub fn posed_ground_truth_model(character: &RiggedCharacter, pose: &Pose, resolution: usize) -> Result<AnimatableModel, ExtractionError> {
    let mesh = character_mesh(character, pose, resolution)?;
    let body = character.posed(pose)?;
    let k = character.joint_count();
    let rows = par::map(mesh.vertices(), |v| skinning_from_body(&body, k, character.beta(), v));
    let weights = SkinningWeights::new(mesh.vertices().len(), k, rows.concat())?;
    let skeleton = character.skeleton().with_rest_positions(&analytic_joints(character, pose)?)?;
    AnimatableModel::new(mesh, skeleton, weights)
}

/// Per-channel argmax cell centre; ties go to the smallest linear index.
pub fn extract_joints(heatmaps: &VoxelGrid) -> Vec<Vec3> {
    let c = heatmaps.channels();
    let values = heatmaps.values();
    (0..c)
        .map(|ch| {
            let mut best = (f64::NEG_INFINITY, 0);
            for lin in 0..heatmaps.cell_count() {
                let v = values[lin * c + ch];
                if v > best.0 {
                    best = (v, lin);
                }
            }
            let [i, j, k] = heatmaps.cell_coords(best.1);
            heatmaps.cell_center(i, j, k)
        })
        .collect()
}

/// Occupancy and joint heatmaps on one cell-centred grid.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldGrids {
    pub occupancy: VoxelGrid,
    pub heatmaps: VoxelGrid,
}

/// Evaluates occupancy and heatmaps at every cell centre of a
/// `resolution`³ cube of side `extent` around the canonical origin.
/// Encoders run once.
pub fn evaluate_field_grid(params: &FieldParams, sample: &SensorSample, resolution: usize, extent: f64) -> Result<FieldGrids, ExtractionError> {
    if resolution < 8 || !(extent > 0.0) {
        return Err(ExtractionError::InvalidArgument(format!("resolution {resolution} (need >= 8), extent {extent}")));
    }
    let input = FieldInput::from_sample(sample, &params.config)?;
    evaluate_grid_on(params, &input, resolution, extent)
}

pub(crate) fn evaluate_grid_on(params: &FieldParams, input: &FieldInput, resolution: usize, extent: f64) -> Result<FieldGrids, ExtractionError> {
    let shape = VoxelGrid::cube(input.volume().0, extent, resolution, 1).map_err(FieldError::from)?;
    let centers: Vec<Vec3> = (0..shape.cell_count())
        .map(|lin| {
            let [i, j, k] = shape.cell_coords(lin);
            shape.cell_center(i, j, k)
        })
        .collect();
    let feats = encode(params, input)?;
    let heads = Heads { occupancy: true, pose: true, skinning: false };
    let out = eval_points(params, input, &feats, &centers, heads)?;
    Ok(FieldGrids {
        heatmaps: shape.with_values(params.config.joints, out.pose),
        occupancy: shape.with_values(1, out.occupancy),
    })
}

/// Skinning head at each vertex, one row per vertex.
pub fn extract_skinning(params: &FieldParams, sample: &SensorSample, vertices: &[Vec3]) -> Result<SkinningWeights, ExtractionError> {
    let input = FieldInput::from_sample(sample, &params.config)?;
    skinning_on(params, &input, vertices)
}

fn skinning_on(params: &FieldParams, input: &FieldInput, vertices: &[Vec3]) -> Result<SkinningWeights, ExtractionError> {
    if vertices.is_empty() {
        return Err(ExtractionError::InvalidArgument("no vertices".into()));
    }
    let feats = encode(params, input)?;
    let heads = Heads { occupancy: false, pose: false, skinning: true };
    let out = eval_points(params, input, &feats, vertices, heads)?;
    Ok(SkinningWeights::new(vertices.len(), params.config.bones, out.skinning)?)
}

/// Grid evaluation over the voxelization cube, marching cubes at `iso`,
/// heatmap argmax joints on the humanoid topology and per-vertex skinning.
/// Everything is in the canonical frame of `sample`.
pub fn extract_animatable_model(params: &FieldParams, sample: &SensorSample, resolution: usize, iso: f64) -> Result<AnimatableModel, ExtractionError> {
    let (input, mesh, joints) = extract_geometry_on(params, sample, resolution, iso)?;
    let skeleton = humanoid_skeleton("reconstruction", &joints)?;
    let weights = skinning_on(params, &input, mesh.vertices())?;
    AnimatableModel::new(mesh, skeleton, weights)
}

/// Mesh and argmax joints without building a rig, so joints that coincide
/// (a degenerate skeleton) still leave the surface scoreable.
pub fn extract_geometry(params: &FieldParams, sample: &SensorSample, resolution: usize, iso: f64) -> Result<(TriangleMesh, Vec<Vec3>), ExtractionError> {
    let (_, mesh, joints) = extract_geometry_on(params, sample, resolution, iso)?;
    Ok((mesh, joints))
}

fn extract_geometry_on(params: &FieldParams, sample: &SensorSample, resolution: usize, iso: f64) -> Result<(FieldInput, TriangleMesh, Vec<Vec3>), ExtractionError> {
    if !(iso > 0.0 && iso < 1.0) {
        return Err(ExtractionError::InvalidArgument(format!("iso {iso} outside (0, 1)")));
    }
    let input = FieldInput::from_sample(sample, &params.config)?;
    let grids = evaluate_grid_on(params, &input, resolution, params.config.voxel_extent)?;
    // a surface needs at least one value strictly above iso
    if !grids.occupancy.values().iter().any(|&v| v > iso) {
        return Err(ExtractionError::EmptyReconstruction { iso });
    }
    let mesh = marching_cubes(&grids.occupancy, iso);
    if mesh.faces().is_empty() {
        return Err(ExtractionError::EmptyReconstruction { iso });
    }
    let joints = extract_joints(&grids.heatmaps);
    Ok((input, mesh, joints))
}

const SKIN_MAGIC: &[u8; 4] = b"S3SW";

/// Skinning sidecar: `S3SW`, u32 N, u32 K, then N×K little-endian f32 in
/// row order.
pub fn write_skinning<W: Write>(weights: &SkinningWeights, mut w: W) -> Result<(), ExtractionError> {
    let n = u32::try_from(weights.rows()).map_err(|_| ExtractionError::Format("too many rows".into()))?;
    let k = u32::try_from(weights.cols()).map_err(|_| ExtractionError::Format("too many columns".into()))?;
    let mut buf = Vec::with_capacity(12 + weights.values().len() * 4);
    buf.extend_from_slice(SKIN_MAGIC);
    buf.extend_from_slice(&n.to_le_bytes());
    buf.extend_from_slice(&k.to_le_bytes());
    for &v in weights.values() {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn read_skinning<R: Read>(mut r: R) -> Result<SkinningWeights, ExtractionError> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    if bytes.len() < 12 || &bytes[..4] != SKIN_MAGIC {
        return Err(ExtractionError::Format("missing S3SW header".into()));
    }
    let word = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as usize;
    let (n, k) = (word(4), word(8));
    let expected = n.checked_mul(k).and_then(|x| x.checked_mul(4)).and_then(|x| x.checked_add(12));
    if expected != Some(bytes.len()) {
        return Err(ExtractionError::Format(format!("{} bytes for {n}x{k} weights", bytes.len())));
    }
    let values = bytes[12..].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64).collect();
    Ok(SkinningWeights::new(n, k, values)?)
}
