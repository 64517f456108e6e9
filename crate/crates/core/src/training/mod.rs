//! Query-point samplers, the three MSE losses and their weighted sum,
//! exact reverse-mode gradients through heads and encoders, RMSProp, and
//! the training loop.

use std::io::{BufRead, Write};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::character::{analytic_joints, character_mesh, skinning_from_body, CharacterError, PosedBody, Pose, RiggedCharacter};
use crate::fields::nn::{Mat, MlpParams};
use crate::fields::{
    encode_points, feature_map, image_plan, volumetric_plan, FieldConfig, FieldError, FieldInput, FieldParams, Lookup,
};
use crate::geom::{SurfaceSampler, TriangleMesh, Vec3};
use crate::par;
use crate::sensorsim::SensorSample;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("empty batch for the {0} head")]
    EmptyBatch(&'static str),
    #[error("invalid batch: {0}")]
    InvalidBatch(String),
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("loss history: {0}")]
    Format(String),
    #[error(transparent)]
    Field(#[from] FieldError),
    #[error(transparent)]
    Character(#[from] CharacterError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub occ: f64,
    pub pose: f64,
    pub skin: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { occ: 1.0, pose: 1.0, skin: 1.0 }
    }
}

/// Which query-point populations the occupancy and pose samplers draw.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum SamplerMode {
    /// Uniform points only.
    Uniform,
    /// Near-surface / near-joint points only.
    Biased,
    /// The configured mix of both.
    #[default]
    Both,
}

impl SamplerMode {
    pub fn name(&self) -> &'static str {
        match self {
            Self::Uniform => "uniform",
            Self::Biased => "biased",
            Self::Both => "both",
        }
    }

    fn mix(&self, configured: f64) -> f64 {
        match self {
            Self::Uniform => 0.0,
            Self::Biased => 1.0,
            Self::Both => configured,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplingConfig {
    pub occ_points: usize,
    pub pose_points: usize,
    pub skin_points: usize,
    /// Fraction of occupancy points drawn near the surface.
    pub occ_mix: f64,
    /// Fraction of pose points drawn near joints.
    pub pose_mix: f64,
    pub sigma_surface: f64,
    pub sigma_joint: f64,
    /// Width of the Gaussian heatmap targets.
    pub sigma_heatmap: f64,
    pub mode: SamplerMode,
    /// Marching-cubes resolution of the surface that near-surface points
    /// are drawn from.
    pub surface_resolution: usize,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self {
            occ_points: 512,
            pose_points: 512,
            skin_points: 512,
            occ_mix: 0.9,
            pose_mix: 0.8,
            sigma_surface: 0.03,
            sigma_joint: 0.10,
            sigma_heatmap: 0.05,
            mode: SamplerMode::Both,
            surface_resolution: 64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub seed: u64,
    pub steps: usize,
    pub learning_rate: f64,
    pub rho: f64,
    pub epsilon: f64,
    /// Steps at which the learning rate is divided by 10.
    pub decay_steps: Vec<usize>,
    pub weights: LossWeights,
    pub sampling: SamplingConfig,
    pub field: FieldConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            steps: 2000,
            learning_rate: 1e-3,
            rho: 0.99,
            epsilon: 1e-8,
            decay_steps: Vec::new(),
            weights: LossWeights::default(),
            sampling: SamplingConfig::default(),
            field: FieldConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::InvalidConfig(m.to_string()));
        let s = &self.sampling;
        if !(self.learning_rate >= 0.0 && (0.0..1.0).contains(&self.rho) && self.epsilon > 0.0) {
            return bad("need learning_rate >= 0, 0 <= rho < 1, epsilon > 0");
        }
        let w = &self.weights;
        if !(w.occ >= 0.0 && w.pose >= 0.0 && w.skin >= 0.0) {
            return bad("loss weights must be >= 0");
        }
        if !((0.0..=1.0).contains(&s.occ_mix) && (0.0..=1.0).contains(&s.pose_mix)) {
            return bad("mix fractions must lie in [0, 1]");
        }
        if !(s.sigma_surface >= 0.0 && s.sigma_joint >= 0.0 && s.sigma_heatmap > 0.0) {
            return bad("sigmas must be >= 0 (heatmap > 0)");
        }
        if s.surface_resolution < 16 {
            return bad("surface_resolution must be >= 16");
        }
        self.field.validate()?;
        Ok(())
    }
}

/// One training example: a character, its pose and the sensed sample.
/// `id` fixes the example's place in the shuffle independent of the order
/// in which examples are passed.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainScene {
    pub id: u64,
    pub character: RiggedCharacter,
    pub pose: Pose,
    pub sample: SensorSample,
}

/// Everything the samplers and losses need from a scene, in the canonical
/// frame.
#[derive(Debug, Clone)]
pub struct PreparedScene {
    pub id: u64,
    pub input: FieldInput,
    pub body: PosedBody,
    pub joints: Vec<Vec3>,
    pub mesh: TriangleMesh,
    pub beta: f64,
    pub bones: usize,
    pub volume: (Vec3, f64),
}

impl PreparedScene {
    pub fn new(scene: &TrainScene, field: &FieldConfig, surface_resolution: usize) -> Result<Self, TrainError> {
        let input = FieldInput::from_sample(&scene.sample, field)?;
        let volume = input.volume();
        Ok(Self {
            id: scene.id,
            body: scene.character.posed(&scene.pose)?,
            joints: analytic_joints(&scene.character, &scene.pose)?,
            mesh: character_mesh(&scene.character, &scene.pose, surface_resolution)?,
            beta: scene.character.beta(),
            bones: scene.character.joint_count(),
            input,
            volume,
        })
    }
}

fn uniform_in<R: Rng>(volume: &(Vec3, f64), rng: &mut R) -> Vec3 {
    let (c, e) = volume;
    c + Vec3::new(rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5) * *e
}

fn gaussian<R: Rng>(sigma: f64, rng: &mut R) -> Vec3 {
    Vec3::new(rng.sample(StandardNormal), rng.sample(StandardNormal), rng.sample(StandardNormal)) * sigma
}

fn near_surface<R: Rng>(mesh: &TriangleMesh, n: usize, sigma: f64, rng: &mut R) -> Vec<Vec3> {
    let Some(s) = SurfaceSampler::new(mesh) else {
        return Vec::new();
    };
    (0..n).map(|_| s.sample(rng).0 + gaussian(sigma, rng)).collect()
}

/// `⌈mix·n⌉` surface points perturbed by N(0, σ²I), the rest uniform in
/// the scene volume; targets are exact occupancy.
pub fn sample_occupancy_points(scene: &PreparedScene, n: usize, mix: f64, sigma: f64, seed: u64) -> (Vec<Vec3>, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let biased = ((mix * n as f64).ceil() as usize).min(n);
    let mut pts = near_surface(&scene.mesh, biased, sigma, &mut rng);
    while pts.len() < n {
        pts.push(uniform_in(&scene.volume, &mut rng));
    }
    let targets = pts.iter().map(|p| scene.body.contains(p) as u8 as f64).collect();
    (pts, targets)
}

/// Heatmap value `exp(−d²/(2σ_h²))` for every joint, point-major.
pub fn heatmap_targets(points: &[Vec3], joints: &[Vec3], sigma_heatmap: f64) -> Vec<f64> {
    let s2 = 2.0 * sigma_heatmap * sigma_heatmap;
    points.iter().flat_map(|p| joints.iter().map(move |j| (-(p - j).norm_squared() / s2).exp())).collect()
}

/// `⌈mix·n⌉` points from N(joint_k, σ_joint²I), joints taken round-robin,
/// the rest uniform; targets are Gaussian heatmaps of width σ_h.
pub fn sample_pose_points(
    joints: &[Vec3],
    volume: &(Vec3, f64),
    n: usize,
    mix: f64,
    sigma_joint: f64,
    sigma_heatmap: f64,
    seed: u64,
) -> (Vec<Vec3>, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let biased = ((mix * n as f64).ceil() as usize).min(n);
    let mut pts: Vec<Vec3> = (0..biased).map(|i| joints[i % joints.len()] + gaussian(sigma_joint, &mut rng)).collect();
    while pts.len() < n {
        pts.push(uniform_in(volume, &mut rng));
    }
    let targets = heatmap_targets(&pts, joints, sigma_heatmap);
    (pts, targets)
}

/// Near-surface points of the posed body with exact skinning targets.
pub fn sample_skinning_points(scene: &PreparedScene, n: usize, sigma: f64, seed: u64) -> (Vec<Vec3>, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pts = near_surface(&scene.mesh, n, sigma, &mut rng);
    let targets = pts.iter().flat_map(|p| skinning_from_body(&scene.body, scene.bones, scene.beta, p)).collect();
    (pts, targets)
}

/// Query points and targets for the three heads. Targets are point-major.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainBatch {
    pub occ_points: Vec<Vec3>,
    pub occ_targets: Vec<f64>,
    pub pose_points: Vec<Vec3>,
    pub pose_targets: Vec<f64>,
    pub skin_points: Vec<Vec3>,
    pub skin_targets: Vec<f64>,
}

impl TrainBatch {
    pub fn sample(scene: &PreparedScene, cfg: &SamplingConfig, seed: u64) -> Self {
        let sub = |k: u64| seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(k);
        let (occ_points, occ_targets) =
            sample_occupancy_points(scene, cfg.occ_points, cfg.mode.mix(cfg.occ_mix), cfg.sigma_surface, sub(1));
        let (pose_points, pose_targets) = sample_pose_points(
            &scene.joints,
            &scene.volume,
            cfg.pose_points,
            cfg.mode.mix(cfg.pose_mix),
            cfg.sigma_joint,
            cfg.sigma_heatmap,
            sub(2),
        );
        let (skin_points, skin_targets) = sample_skinning_points(scene, cfg.skin_points, cfg.sigma_surface, sub(3));
        Self { occ_points, occ_targets, pose_points, pose_targets, skin_points, skin_targets }
    }

    pub fn validate(&self, config: &FieldConfig) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::InvalidBatch(m));
        if self.occ_targets.len() != self.occ_points.len() {
            return bad("occupancy targets do not match points".into());
        }
        if self.pose_targets.len() != self.pose_points.len() * config.joints {
            return bad(format!("pose targets need {} values per point", config.joints));
        }
        if self.skin_targets.len() != self.skin_points.len() * config.bones {
            return bad(format!("skinning targets need {} values per point", config.bones));
        }
        if self.pose_targets.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return bad("heatmap targets must lie in [0, 1]".into());
        }
        for row in self.skin_targets.chunks(config.bones) {
            if (row.iter().sum::<f64>() - 1.0).abs() > 1e-9 || row.iter().any(|&v| v < 0.0) {
                return bad("skinning targets must lie on the simplex".into());
            }
        }
        Ok(())
    }
}

/// Per-head mean squared errors and their weighted total.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossParts {
    pub occ: f64,
    pub pose: f64,
    pub skin: f64,
    pub total: f64,
}

const CHUNK: usize = 256;

/// Head loss (sum of squared errors / n) and, when `scale` ≠ 0, the head
/// parameter gradient plus `d loss/d φ` per chunk.
struct HeadPass {
    loss: f64,
    grad: Option<MlpParams>,
    dphi: Vec<(Mat, Vec<Lookup>)>,
}

fn add_mlp(a: &mut MlpParams, b: &MlpParams) {
    for (la, lb) in a.layers.iter_mut().zip(&b.layers) {
        la.w.iter_mut().zip(&lb.w).for_each(|(x, y)| *x += y);
        la.b.iter_mut().zip(&lb.b).for_each(|(x, y)| *x += y);
    }
}

fn zero_mlp(m: &MlpParams) -> MlpParams {
    let mut z = m.clone();
    for l in &mut z.layers {
        l.w.iter_mut().for_each(|v| *v = 0.0);
        l.b.iter_mut().for_each(|v| *v = 0.0);
    }
    z
}

fn head_pass(
    head: &MlpParams,
    params: &FieldParams,
    input: &FieldInput,
    feats: &crate::fields::Features,
    points: &[Vec3],
    targets: &[f64],
    weight: f64,
) -> Result<HeadPass, TrainError> {
    let n = points.len();
    if n == 0 {
        return Ok(HeadPass { loss: 0.0, grad: None, dphi: Vec::new() });
    }
    let dim = head.output_dim();
    let scale = 2.0 * weight / n as f64;
    let chunks: Vec<usize> = (0..n.div_ceil(CHUNK)).collect();
    let parts = par::map(&chunks, |&c| -> Result<_, TrainError> {
        let range = c * CHUNK..((c + 1) * CHUNK).min(n);
        let (phi, lookups) = encode_points(&points[range.clone()], input, feats, &params.config)?;
        let cache = head.forward_cached(&phi);
        let y = cache.output.to_point_major();
        let t = &targets[range.start * dim..range.end * dim];
        let diff: Vec<f64> = y.iter().zip(t).map(|(a, b)| a - b).collect();
        let sq: f64 = diff.iter().map(|d| d * d).sum();
        if weight == 0.0 {
            return Ok((sq, None));
        }
        let dy = Mat::from_point_major(dim, &diff.iter().map(|d| d * scale).collect::<Vec<_>>());
        let mut g = zero_mlp(head);
        let dphi = head.backward(&cache, &dy, &mut g);
        Ok((sq, Some((g, dphi, lookups))))
    });
    let mut loss = 0.0;
    let mut grads = Vec::new();
    let mut dphi = Vec::new();
    for part in parts {
        let (sq, rest) = part?;
        loss += sq;
        if let Some((g, d, l)) = rest {
            grads.push(g);
            dphi.push((d, l));
        }
    }
    let grad = par::tree_reduce(grads, |mut a, b| {
        add_mlp(&mut a, &b);
        a
    });
    Ok(HeadPass { loss: loss / n as f64, grad, dphi })
}

fn forward_backward(
    batch: &TrainBatch,
    params: &FieldParams,
    input: &FieldInput,
    weights: &LossWeights,
    want_grad: bool,
) -> Result<(LossParts, Option<FieldParams>), TrainError> {
    batch.validate(&params.config)?;
    let cfg = &params.config;
    let vox_in = Mat::from_point_major(input.voxels.channels(), input.voxels.values());
    let img_in = Mat::from_point_major(input.image.channels(), input.image.values());
    let (vplan, iplan) = (volumetric_plan(&input.voxels), image_plan(&input.image));
    let vcache = params.vox.forward_cached(&vox_in, &vplan);
    let icache = params.image.forward_cached(&img_in, &iplan);
    let (vfeat, ifeat) = (vcache.output(), icache.output());
    let feats = crate::fields::Features {
        vox: input.voxels.with_values(cfg.vox_channels, vfeat.to_point_major()),
        image: feature_map(input.image.width(), input.image.height(), cfg.image_channels, ifeat.to_point_major())?,
    };
    let w = |x: f64| if want_grad { x } else { 0.0 };
    let occ = head_pass(&params.occ, params, input, &feats, &batch.occ_points, &batch.occ_targets, w(weights.occ))?;
    let pose = head_pass(&params.pose, params, input, &feats, &batch.pose_points, &batch.pose_targets, w(weights.pose))?;
    let skin = head_pass(&params.skin, params, input, &feats, &batch.skin_points, &batch.skin_targets, w(weights.skin))?;
    let total = weights.occ * occ.loss + weights.pose * pose.loss + weights.skin * skin.loss;
    let parts = LossParts { occ: occ.loss, pose: pose.loss, skin: skin.loss, total };
    if !want_grad {
        return Ok((parts, None));
    }

    let mut grads = params.zeros_like();
    let (cv, ci) = (cfg.vox_channels, cfg.image_channels);
    let mut dvox = vec![0.0; feats.vox.values().len()];
    let mut dimg = vec![0.0; feats.image.values().len()];
    for (pass, slot) in [(&occ, &mut grads.occ), (&pose, &mut grads.pose), (&skin, &mut grads.skin)] {
        if let Some(g) = &pass.grad {
            add_mlp(slot, g);
        }
        for (dphi, lookups) in &pass.dphi {
            for (c, l) in lookups.iter().enumerate() {
                for (cell, wt) in l.vox.iter() {
                    for ch in 0..cv {
                        dvox[cell * cv + ch] += wt * dphi.get(ch, c);
                    }
                }
                for t in 0..l.pix_n {
                    for ch in 0..ci {
                        dimg[l.pix[t] * ci + ch] += l.pix_w[t] * dphi.get(cv + ch, c);
                    }
                }
            }
        }
    }
    params.vox.backward(&vcache, &Mat::from_point_major(cv, &dvox), &vplan, &mut grads.vox);
    params.image.backward(&icache, &Mat::from_point_major(ci, &dimg), &iplan, &mut grads.image);
    Ok((parts, Some(grads)))
}

fn single(parts: LossParts, n: usize, name: &'static str, pick: fn(&LossParts) -> f64) -> Result<f64, TrainError> {
    if n == 0 {
        return Err(TrainError::EmptyBatch(name));
    }
    Ok(pick(&parts))
}

pub fn loss_occ(batch: &TrainBatch, params: &FieldParams, input: &FieldInput) -> Result<f64, TrainError> {
    let (parts, _) = forward_backward(batch, params, input, &LossWeights::default(), false)?;
    single(parts, batch.occ_points.len(), "occupancy", |p| p.occ)
}

pub fn loss_pose(batch: &TrainBatch, params: &FieldParams, input: &FieldInput) -> Result<f64, TrainError> {
    let (parts, _) = forward_backward(batch, params, input, &LossWeights::default(), false)?;
    single(parts, batch.pose_points.len(), "pose", |p| p.pose)
}

pub fn loss_skin(batch: &TrainBatch, params: &FieldParams, input: &FieldInput) -> Result<f64, TrainError> {
    let (parts, _) = forward_backward(batch, params, input, &LossWeights::default(), false)?;
    single(parts, batch.skin_points.len(), "skinning", |p| p.skin)
}

/// `λ_occ·L_occ + λ_pose·L_pose + λ_skin·L_skin`; heads without points
/// contribute 0.
pub fn loss_total(batch: &TrainBatch, params: &FieldParams, input: &FieldInput, weights: &LossWeights) -> Result<LossParts, TrainError> {
    Ok(forward_backward(batch, params, input, weights, false)?.0)
}

/// Losses and the gradient of the weighted total with respect to every
/// parameter (same layout as `params`).
pub fn backward(
    batch: &TrainBatch,
    params: &FieldParams,
    input: &FieldInput,
    weights: &LossWeights,
) -> Result<(LossParts, FieldParams), TrainError> {
    let (parts, grads) = forward_backward(batch, params, input, weights, true)?;
    Ok((parts, grads.expect("requested")))
}

/// RMSProp state: one running mean of squared gradients per parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimState {
    pub mean_square: Vec<Vec<f64>>,
    pub rho: f64,
    pub epsilon: f64,
    pub learning_rate: f64,
    pub decay_steps: Vec<usize>,
    pub step: usize,
}

impl OptimState {
    pub fn new(params: &FieldParams, learning_rate: f64, rho: f64, epsilon: f64, decay_steps: Vec<usize>) -> Self {
        Self {
            mean_square: params.tensors().iter().map(|t| vec![0.0; t.len()]).collect(),
            rho,
            epsilon,
            learning_rate,
            decay_steps,
            step: 0,
        }
    }

    /// Learning rate at the current step: divided by 10 at every decay
    /// boundary already reached.
    pub fn current_lr(&self) -> f64 {
        let passed = self.decay_steps.iter().filter(|&&s| s <= self.step).count();
        self.learning_rate * 0.1f64.powi(passed as i32)
    }
}

/// `v ← ρv + (1−ρ)g²`, `θ ← θ − lr·g/(√v + ε)` on flat tensors.
pub fn rmsprop_update(theta: &mut [f64], grad: &[f64], v: &mut [f64], rho: f64, epsilon: f64, lr: f64) {
    for ((t, g), v) in theta.iter_mut().zip(grad).zip(v.iter_mut()) {
        *v = rho * *v + (1.0 - rho) * g * g;
        *t -= lr * g / (v.sqrt() + epsilon);
    }
}

pub fn rmsprop_step(params: &mut FieldParams, grads: &FieldParams, state: &mut OptimState) -> Result<(), TrainError> {
    let g = grads.tensors();
    let mut p = params.tensors_mut();
    if g.len() != p.len() || state.mean_square.len() != p.len() || p.iter().zip(&g).zip(&state.mean_square).any(|((a, b), c)| a.len() != b.len() || a.len() != c.len()) {
        return Err(TrainError::Shape("parameters, gradients and optimizer state differ".into()));
    }
    let lr = state.current_lr();
    for ((t, g), v) in p.iter_mut().zip(&g).zip(state.mean_square.iter_mut()) {
        rmsprop_update(t, g, v, state.rho, state.epsilon, lr);
    }
    state.step += 1;
    Ok(())
}

/// One row of the loss history (losses before the step's update).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossRecord {
    pub step: usize,
    pub parts: LossParts,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub params: FieldParams,
    pub history: Vec<LossRecord>,
}

fn step_seed(seed: u64, step: u64) -> u64 {
    // splitmix64 finalizer over (seed, step)
    let mut z = seed ^ step.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Scene visited at each step: scenes sorted by id, then reshuffled every
/// pass with a generator seeded from `(seed, pass)`.
pub fn visit_order(ids: &[u64], steps: usize, seed: u64) -> Vec<usize> {
    let mut sorted: Vec<usize> = (0..ids.len()).collect();
    sorted.sort_by_key(|&i| ids[i]);
    let mut order = Vec::with_capacity(steps);
    let mut pass = 0u64;
    while order.len() < steps && !sorted.is_empty() {
        let mut perm = sorted.clone();
        perm.shuffle(&mut ChaCha8Rng::seed_from_u64(step_seed(seed, u64::MAX - pass)));
        order.extend(perm.into_iter().take(steps - order.len()));
        pass += 1;
    }
    order
}

/// Trains from a seeded initialization. Each step draws one scene and a
/// fresh batch, then applies one RMSProp update; parameters are kept at
/// f32 precision.
pub fn train(dataset: &[TrainScene], cfg: &TrainConfig) -> Result<TrainOutcome, TrainError> {
    train_with(dataset, cfg, |_, _| {})
}

/// [`train`] with a per-step callback `(step, losses)`.
pub fn train_with<F: FnMut(usize, &LossParts)>(dataset: &[TrainScene], cfg: &TrainConfig, mut on_step: F) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(TrainError::InvalidConfig("empty dataset".into()));
    }
    let scenes = dataset
        .iter()
        .map(|s| PreparedScene::new(s, &cfg.field, cfg.sampling.surface_resolution))
        .collect::<Result<Vec<_>, _>>()?;
    let mut params = FieldParams::random(&cfg.field, cfg.seed)?;
    let mut state = OptimState::new(&params, cfg.learning_rate, cfg.rho, cfg.epsilon, cfg.decay_steps.clone());
    let ids: Vec<u64> = scenes.iter().map(|s| s.id).collect();
    let mut history = Vec::with_capacity(cfg.steps);
    for (step, &idx) in visit_order(&ids, cfg.steps, cfg.seed).iter().enumerate() {
        let scene = &scenes[idx];
        let batch = TrainBatch::sample(scene, &cfg.sampling, step_seed(cfg.seed, step as u64));
        let (parts, grads) = backward(&batch, &params, &scene.input, &cfg.weights)?;
        rmsprop_step(&mut params, &grads, &mut state)?;
        params.quantize();
        on_step(step, &parts);
        history.push(LossRecord { step, parts });
    }
    Ok(TrainOutcome { params, history })
}

const CSV_HEADER: &str = "step,L_occ,L_pose,L_skin,L_total";

/// `step,L_occ,L_pose,L_skin,L_total`, shortest round-trip float format.
pub fn write_loss_csv<W: Write>(history: &[LossRecord], mut w: W) -> Result<(), TrainError> {
    let mut s = format!("{CSV_HEADER}\n");
    for r in history {
        let p = &r.parts;
        s += &format!("{},{:e},{:e},{:e},{:e}\n", r.step, p.occ, p.pose, p.skin, p.total);
    }
    w.write_all(s.as_bytes())?;
    Ok(())
}

pub fn read_loss_csv<R: BufRead>(r: R) -> Result<Vec<LossRecord>, TrainError> {
    let mut lines = r.lines();
    match lines.next() {
        Some(Ok(h)) if h == CSV_HEADER => {}
        _ => return Err(TrainError::Format("missing header".into())),
    }
    let mut out = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line?;
        let f: Vec<&str> = line.split(',').collect();
        let bad = || TrainError::Format(format!("bad row {}", i + 2));
        if f.len() != 5 {
            return Err(bad());
        }
        let num = |s: &str| s.parse::<f64>().map_err(|_| bad());
        out.push(LossRecord {
            step: f[0].parse().map_err(|_| bad())?,
            parts: LossParts { occ: num(f[1])?, pose: num(f[2])?, skin: num(f[3])?, total: num(f[4])? },
        });
    }
    Ok(out)
}

/// Central-difference gradient of the total loss for every parameter, in
/// [`FieldParams::tensors`] order.
pub fn finite_difference_gradient(
    batch: &TrainBatch,
    params: &FieldParams,
    input: &FieldInput,
    weights: &LossWeights,
    h: f64,
) -> Result<Vec<Vec<f64>>, TrainError> {
    let shapes: Vec<usize> = params.tensors().iter().map(|t| t.len()).collect();
    let mut out = Vec::with_capacity(shapes.len());
    let mut probe = params.clone();
    for (ti, &len) in shapes.iter().enumerate() {
        let mut g = vec![0.0; len];
        for (i, gi) in g.iter_mut().enumerate() {
            let orig = probe.tensors()[ti][i];
            probe.tensors_mut()[ti][i] = orig + h;
            let up = loss_total(batch, &probe, input, weights)?.total;
            probe.tensors_mut()[ti][i] = orig - h;
            let down = loss_total(batch, &probe, input, weights)?.total;
            probe.tensors_mut()[ti][i] = orig;
            *gi = (up - down) / (2.0 * h);
        }
        out.push(g);
    }
    Ok(out)
}

/// Largest `|a − f| / max(|a|, |f|)` over parameters whose absolute
/// difference exceeds `floor`.
pub fn max_relative_error(analytic: &FieldParams, numeric: &[Vec<f64>], floor: f64) -> f64 {
    let mut worst = 0.0f64;
    for (a, f) in analytic.tensors().iter().zip(numeric) {
        for (x, y) in a.iter().zip(f) {
            let d = (x - y).abs();
            if d > floor {
                worst = worst.max(d / x.abs().max(y.abs()));
            }
        }
    }
    worst
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::character::{build_character, Proportions};
    use crate::fields::tests::{tiny_config, toy_input};
    use crate::fields::{encode, eval_occupancy, eval_pose, eval_skinning, point_encoding};
    use crate::sensorsim::{capture, Placement, ViewConfig};

    fn random_batch(cfg: &FieldConfig, n: usize, seed: u64) -> TrainBatch {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pt = |rng: &mut ChaCha8Rng| Vec3::new(rng.gen_range(-0.6..0.6), rng.gen_range(-0.6..0.6), rng.gen_range(-0.6..0.6));
        let occ_points: Vec<Vec3> = (0..n).map(|_| pt(&mut rng)).collect();
        let occ_targets = (0..n).map(|_| rng.gen_range(0..2) as f64).collect();
        let pose_points: Vec<Vec3> = (0..n).map(|_| pt(&mut rng)).collect();
        let pose_targets = (0..n * cfg.joints).map(|_| rng.gen::<f64>()).collect();
        let skin_points: Vec<Vec3> = (0..n).map(|_| pt(&mut rng)).collect();
        let mut skin_targets = Vec::new();
        for _ in 0..n {
            let raw: Vec<f64> = (0..cfg.bones).map(|_| rng.gen::<f64>()).collect();
            let s: f64 = raw.iter().sum();
            skin_targets.extend(raw.iter().map(|v| v / s));
        }
        TrainBatch { occ_points, occ_targets, pose_points, pose_targets, skin_points, skin_targets }
    }

    /// Loss recomputed element by element from the public per-point API.
    fn naive_losses(batch: &TrainBatch, params: &FieldParams, input: &FieldInput) -> [f64; 3] {
        let feats = encode(params, input).unwrap();
        let cfg = &params.config;
        let phi = |p: &Vec3| point_encoding(p, input, &feats, cfg).unwrap().concat();
        let mut occ = 0.0;
        for (p, t) in batch.occ_points.iter().zip(&batch.occ_targets) {
            occ += (t - eval_occupancy(&phi(p), params).unwrap()).powi(2);
        }
        let mut pose = 0.0;
        for (i, p) in batch.pose_points.iter().enumerate() {
            for (k, y) in eval_pose(&phi(p), params).unwrap().iter().enumerate() {
                pose += (batch.pose_targets[i * cfg.joints + k] - y).powi(2);
            }
        }
        let mut skin = 0.0;
        for (i, p) in batch.skin_points.iter().enumerate() {
            for (k, y) in eval_skinning(&phi(p), params).unwrap().iter().enumerate() {
                skin += (batch.skin_targets[i * cfg.bones + k] - y).powi(2);
            }
        }
        let n = |v: &Vec<Vec3>| v.len() as f64;
        [occ / n(&batch.occ_points), pose / n(&batch.pose_points), skin / n(&batch.skin_points)]
    }

    #[test]
    fn losses_match_naive_accumulation() {
        let cfg = tiny_config();
        let params = FieldParams::random(&cfg, 11).unwrap();
        let input = toy_input(&cfg, 16, 12);
        let batch = random_batch(&cfg, 30, 13);
        let [o, p, s] = naive_losses(&batch, &params, &input);
        assert!((loss_occ(&batch, &params, &input).unwrap() - o).abs() < 1e-12);
        assert!((loss_pose(&batch, &params, &input).unwrap() - p).abs() < 1e-12);
        assert!((loss_skin(&batch, &params, &input).unwrap() - s).abs() < 1e-12);
        let total = loss_total(&batch, &params, &input, &LossWeights::default()).unwrap().total;
        assert!((total - (o + p + s)).abs() < 1e-12);
        let only_occ = LossWeights { occ: 1.0, pose: 0.0, skin: 0.0 };
        assert_eq!(loss_total(&batch, &params, &input, &only_occ).unwrap().total, loss_occ(&batch, &params, &input).unwrap());
        let zero = LossWeights { occ: 0.0, pose: 0.0, skin: 0.0 };
        assert_eq!(loss_total(&batch, &params, &input, &zero).unwrap().total, 0.0);
    }

    #[test]
    fn hand_computed_losses() {
        let cfg = tiny_config();
        let params = FieldParams::zeros(&cfg).unwrap();
        let input = toy_input(&cfg, 16, 1);
        let mut batch = random_batch(&cfg, 1, 2);
        batch.occ_targets = vec![1.0];
        batch.pose_targets = vec![0.5; 3];
        batch.skin_targets = vec![0.25; 4];
        assert_eq!(loss_occ(&batch, &params, &input).unwrap(), 0.25);
        assert_eq!(loss_pose(&batch, &params, &input).unwrap(), 0.0);
        assert_eq!(loss_skin(&batch, &params, &input).unwrap(), 0.0);
        let empty = TrainBatch { occ_points: vec![], occ_targets: vec![], ..batch };
        assert!(matches!(loss_occ(&empty, &params, &input), Err(TrainError::EmptyBatch(_))));
    }

    #[test]
    fn gradients_match_finite_differences() {
        let cfg = tiny_config();
        let input = toy_input(&cfg, 16, 21);
        let batch = random_batch(&cfg, 20, 22);
        let mut params = FieldParams::random(&cfg, 23).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(24);
        for t in params.tensors_mut() {
            t.iter_mut().for_each(|v| *v += rng.gen_range(-0.1..0.1));
        }
        let w = LossWeights { occ: 1.0, pose: 0.7, skin: 1.3 };
        let (_, g) = backward(&batch, &params, &input, &w).unwrap();
        let fd = finite_difference_gradient(&batch, &params, &input, &w, 1e-4).unwrap();
        let err = max_relative_error(&g, &fd, 1e-8);
        assert!(err < 1e-4, "max relative error {err}");
        // every tensor gets some gradient
        assert!(g.tensors().iter().all(|t| t.iter().any(|&v| v != 0.0)));
    }

    #[test]
    fn gradient_scales_with_weights() {
        let cfg = tiny_config();
        let input = toy_input(&cfg, 16, 31);
        let batch = random_batch(&cfg, 10, 32);
        let params = FieldParams::random(&cfg, 33).unwrap();
        let (_, g0) = backward(&batch, &params, &input, &LossWeights { occ: 0.0, pose: 0.0, skin: 0.0 }).unwrap();
        assert!(g0.tensors().iter().all(|t| t.iter().all(|&v| v == 0.0)));
        let (_, g1) = backward(&batch, &params, &input, &LossWeights::default()).unwrap();
        let (_, g3) = backward(&batch, &params, &input, &LossWeights { occ: 3.0, pose: 3.0, skin: 3.0 }).unwrap();
        for (a, b) in g1.tensors().iter().zip(g3.tensors()) {
            for (x, y) in a.iter().zip(b) {
                assert!((3.0 * x - y).abs() <= 1e-12 * y.abs().max(1e-6));
            }
        }
    }

    #[test]
    fn rmsprop_scalar_example() {
        let (mut theta, mut v) = ([1.0], [0.0]);
        rmsprop_update(&mut theta, &[2.0], &mut v, 0.99, 1e-8, 1e-3);
        assert!((v[0] - 0.04).abs() < 1e-15);
        assert!((theta[0] - (1.0 - 1e-3 * 2.0 / (0.2 + 1e-8))).abs() < 1e-15);
        assert!((theta[0] - 0.99).abs() < 1e-7);
        let (mut theta, mut v) = ([1.5], [0.3]);
        rmsprop_update(&mut theta, &[0.0], &mut v, 0.99, 1e-8, 1e-3);
        assert_eq!(theta[0], 1.5);
    }

    #[test]
    fn learning_rate_decays_at_boundaries() {
        let params = FieldParams::zeros(&tiny_config()).unwrap();
        let mut s = OptimState::new(&params, 1e-3, 0.99, 1e-8, vec![2, 4]);
        let lrs: Vec<f64> = (0..5)
            .map(|i| {
                s.step = i;
                s.current_lr()
            })
            .collect();
        assert_eq!(lrs[..2], [1e-3, 1e-3]);
        assert!((lrs[2] - 1e-4).abs() < 1e-18 && (lrs[4] - 1e-5).abs() < 1e-18);
    }

    #[test]
    fn visit_order_ignores_input_order() {
        let a = visit_order(&[5, 9, 2], 10, 7);
        let b = visit_order(&[9, 2, 5], 10, 7);
        let ids_a: Vec<u64> = a.iter().map(|&i| [5, 9, 2][i]).collect();
        let ids_b: Vec<u64> = b.iter().map(|&i| [9, 2, 5][i]).collect();
        assert_eq!(ids_a, ids_b);
        // each pass visits every scene once
        let mut first: Vec<u64> = ids_a[..3].to_vec();
        first.sort();
        assert_eq!(first, vec![2, 5, 9]);
    }

    pub(crate) fn small_scene(id: u64, yaw: f64) -> TrainScene {
        let character = build_character(1, &Proportions::default()).unwrap();
        let pose = Pose::identity(15);
        let view = ViewConfig { image_size: 64, mesh_resolution: 48, ..Default::default() };
        let (sample, _) = capture(&character, &pose, &Placement::facing(10.0, 0.2, yaw), &view, id).unwrap();
        TrainScene { id, character, pose, sample }
    }

    #[test]
    fn samplers() {
        let scene = PreparedScene::new(&small_scene(0, 0.5), &FieldConfig::default(), 32).unwrap();
        let (c, e) = scene.volume;
        let (pts, t) = sample_occupancy_points(&scene, 1000, 0.0, 0.03, 1);
        assert!(pts.iter().all(|p| (p - c).amax() <= e / 2.0));
        let (pts2, t2) = sample_occupancy_points(&scene, 1000, 0.0, 0.03, 1);
        assert_eq!((pts, t), (pts2, t2));
        let (_, near) = sample_occupancy_points(&scene, 1000, 1.0, 0.03, 2);
        let inside = near.iter().filter(|&&v| v == 1.0).count();
        assert!(inside > 100 && inside < 900, "{inside}");

        let sigma_h = 0.05;
        let j = &scene.joints;
        let tg = heatmap_targets(&[j[3], j[3] + Vec3::new(sigma_h, 0.0, 0.0), Vec3::new(50.0, 0.0, 0.0)], j, sigma_h);
        assert_eq!(tg[3], 1.0);
        assert!((tg[15 + 3] - (-0.5f64).exp()).abs() < 1e-12 && (tg[15 + 3] - 0.60653).abs() < 1e-5);
        assert!(tg[30..].iter().all(|&v| v < 1e-6));

        let (sp, st) = sample_skinning_points(&scene, 200, 0.03, 3);
        assert_eq!(st.len(), 200 * 15);
        for row in st.chunks(15) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
        assert_eq!(sample_skinning_points(&scene, 200, 0.03, 3).0, sp);
        // a point on the left forearm surface, mid-bone
        let mid = (j[4] + j[5]) * 0.5;
        let cap = scene.body.parts.iter().find(|c| c.joint == 4).unwrap();
        let off = (j[5] - j[4]).cross(&Vec3::z()).normalize() * (cap.ra + cap.rb) * 0.5;
        let w = skinning_from_body(&scene.body, 15, scene.beta, &(mid + off));
        let arg = w.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap().0;
        assert_eq!(arg, 4);
    }

    #[test]
    fn biased_fraction_matches_mix() {
        // χ² on the biased/uniform split: counts are exact by construction
        let joints = vec![Vec3::new(0.0, 0.0, 1.0)];
        let vol = (Vec3::new(0.0, 0.0, 1.0), 2.0);
        let (pts, _) = sample_pose_points(&joints, &vol, 10_000, 0.8, 0.0, 0.05, 4);
        let at_joint = pts.iter().filter(|p| **p == joints[0]).count();
        assert_eq!(at_joint, 8000);
    }

    #[test]
    fn training_reduces_loss_and_is_deterministic() {
        let data = vec![small_scene(0, 0.3)];
        let cfg = TrainConfig {
            steps: 60,
            learning_rate: 3e-3,
            sampling: SamplingConfig { occ_points: 128, pose_points: 128, skin_points: 128, surface_resolution: 32, ..Default::default() },
            field: FieldConfig { hidden_width: 32, vox_channels: 8, image_channels: 8, ..Default::default() },
            ..Default::default()
        };
        let a = train(&data, &cfg).unwrap();
        let b = train(&data, &cfg).unwrap();
        assert_eq!(a, b);
        let first = a.history[..5].iter().map(|r| r.parts.total).sum::<f64>();
        let last = a.history[55..].iter().map(|r| r.parts.total).sum::<f64>();
        assert!(last < first, "{first} -> {last}");

        let frozen = train(&data, &TrainConfig { learning_rate: 0.0, steps: 3, ..cfg.clone() }).unwrap();
        assert_eq!(frozen.params, FieldParams::random(&cfg.field, cfg.seed).unwrap());

        let mut csv = Vec::new();
        write_loss_csv(&a.history, &mut csv).unwrap();
        let back = read_loss_csv(&csv[..]).unwrap();
        assert_eq!(back, a.history);
        let mut again = Vec::new();
        write_loss_csv(&back, &mut again).unwrap();
        assert_eq!(csv, again);
    }
}
