//! The neural field: volumetric and image encoders, per-point feature
//! encoding, and three unshared MLP heads (occupancy, joint heatmaps,
//! skinning).

pub mod nn;

use std::io::{Read, Write};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geom::{perspective_project, Camera, FeatureMap2D, GeomError, TrilinearStencil, Vec3, VoxelGrid};
use crate::par;
use crate::sensorsim::{voxelize, SensorError, SensorSample};
use nn::{EncoderParams, EncoderPlan, Layer, Mat, MlpParams, OutputActivation, CONV_FROM_LEVEL, ENCODER_LEVELS};

/// Channels of the volumetric encoder input: log(1 + points per cell).
pub const VOXEL_INPUTS: usize = 1;
/// Channels of the image encoder input: silhouette, silhouette-masked
/// depth relative to the canonical origin.
pub const IMAGE_INPUTS: usize = 2;
/// Image features are computed at this fraction of the input resolution.
pub const IMAGE_STRIDE: usize = 4;

const VIEW_CENTER_POLICY: &str = "lidar_centroid_else_canonical_origin";

#[derive(Debug, Error)]
pub enum FieldError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("image size {0}x{1} is not divisible by 4")]
    IndivisibleImage(usize, usize),
    #[error("viewing ray has zero length")]
    ZeroRay,
    #[error("invalid field config: {0}")]
    InvalidConfig(String),
    #[error("checkpoint: {0}")]
    Format(String),
    #[error(transparent)]
    Geom(#[from] GeomError),
    #[error(transparent)]
    Sensor(#[from] SensorError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Architecture and input-grid settings stored with every checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FieldConfig {
    pub voxel_resolution: usize,
    /// Side of the voxelization cube (m), centred at the canonical origin.
    pub voxel_extent: f64,
    pub vox_channels: usize,
    pub image_channels: usize,
    pub hidden_width: usize,
    /// Linear layers per head, output layer included.
    pub head_layers: usize,
    pub joints: usize,
    pub bones: usize,
    pub view_feature: bool,
    pub voxel_feature: bool,
}

impl Default for FieldConfig {
    fn default() -> Self {
        Self {
            voxel_resolution: 32,
            voxel_extent: 2.2,
            vox_channels: 16,
            image_channels: 16,
            hidden_width: 128,
            head_layers: 5,
            joints: 15,
            bones: 15,
            view_feature: true,
            voxel_feature: true,
        }
    }
}

impl FieldConfig {
    pub fn encoding_dim(&self) -> usize {
        self.vox_channels + self.image_channels + 1
    }

    pub fn validate(&self) -> Result<(), FieldError> {
        let bad = |m: &str| Err(FieldError::InvalidConfig(m.to_string()));
        if self.voxel_resolution < 2 || !(self.voxel_extent > 0.0) {
            return bad("voxel grid needs resolution >= 2 and positive extent");
        }
        if self.vox_channels == 0 || self.image_channels == 0 || self.hidden_width == 0 {
            return bad("channel counts and hidden width must be positive");
        }
        if self.head_layers < 2 {
            return bad("heads need at least 2 layers");
        }
        if self.joints == 0 || self.bones < 2 {
            return bad("need at least one joint and two bones");
        }
        Ok(())
    }

    fn head_sizes(&self, out: usize) -> Vec<usize> {
        let mut s = vec![self.encoding_dim()];
        s.extend(std::iter::repeat(self.hidden_width).take(self.head_layers - 1));
        s.push(out);
        s
    }
}

/// All learned parameters. Heads share no weights.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldParams {
    pub config: FieldConfig,
    pub vox: EncoderParams,
    pub image: EncoderParams,
    pub occ: MlpParams,
    pub pose: MlpParams,
    pub skin: MlpParams,
}

impl FieldParams {
    /// Seeded random initialization, rounded to f32.
    pub fn random(config: &FieldConfig, seed: u64) -> Result<Self, FieldError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = Self {
            config: config.clone(),
            vox: EncoderParams::random(VOXEL_INPUTS, config.vox_channels, 3, &mut rng),
            image: EncoderParams::random(IMAGE_INPUTS, config.image_channels, 2, &mut rng),
            occ: MlpParams::random(&config.head_sizes(1), OutputActivation::Sigmoid, &mut rng),
            pose: MlpParams::random(&config.head_sizes(config.joints), OutputActivation::Sigmoid, &mut rng),
            skin: MlpParams::random(&config.head_sizes(config.bones), OutputActivation::Softmax, &mut rng),
        };
        p.quantize();
        Ok(p)
    }

    pub fn zeros(config: &FieldConfig) -> Result<Self, FieldError> {
        config.validate()?;
        Ok(Self {
            config: config.clone(),
            vox: EncoderParams::zeros(VOXEL_INPUTS, config.vox_channels, 3),
            image: EncoderParams::zeros(IMAGE_INPUTS, config.image_channels, 2),
            occ: MlpParams::zeros(&config.head_sizes(1), OutputActivation::Sigmoid),
            pose: MlpParams::zeros(&config.head_sizes(config.joints), OutputActivation::Sigmoid),
            skin: MlpParams::zeros(&config.head_sizes(config.bones), OutputActivation::Softmax),
        })
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.tensors_mut().into_iter().for_each(|t| t.iter_mut().for_each(|v| *v = 0.0));
        z
    }

    fn layers(&self) -> Vec<&Layer> {
        let mut v: Vec<&Layer> = self.vox.layers().into_iter().chain(self.image.layers()).collect();
        for head in [&self.occ, &self.pose, &self.skin] {
            v.extend(head.layers.iter());
        }
        v
    }

    fn layers_mut(&mut self) -> Vec<&mut Layer> {
        let mut v: Vec<&mut Layer> = self.vox.layers_mut().into_iter().chain(self.image.layers_mut()).collect();
        for head in [&mut self.occ, &mut self.pose, &mut self.skin] {
            v.extend(head.layers.iter_mut());
        }
        v
    }

    /// Every parameter array in checkpoint order: volumetric encoder, image
    /// encoder, occupancy, pose and skinning heads; each layer as weights
    /// (row-major) then biases.
    pub fn tensors(&self) -> Vec<&[f64]> {
        self.layers().into_iter().flat_map(|l| l.tensors()).collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        self.layers_mut().into_iter().flat_map(|l| l.tensors_mut()).collect()
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    /// Rounds every parameter to the nearest f32.
    pub fn quantize(&mut self) {
        for t in self.tensors_mut() {
            t.iter_mut().for_each(|v| *v = *v as f32 as f64);
        }
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|v| v.is_finite()))
    }

    fn check_dims(&self) -> Result<(), FieldError> {
        let c = &self.config;
        let bad = |m: String| Err(FieldError::Dimension(m));
        for (name, e, inp, ch, rank) in [("voxel", &self.vox, VOXEL_INPUTS, c.vox_channels, 3), ("image", &self.image, IMAGE_INPUTS, c.image_channels, 2)] {
            if !e.has_shape(inp, ch, rank) {
                return bad(format!("{name} encoder layers do not match {ch} channels"));
            }
        }
        for (name, h, out, act) in [
            ("occupancy", &self.occ, 1, OutputActivation::Sigmoid),
            ("pose", &self.pose, c.joints, OutputActivation::Sigmoid),
            ("skinning", &self.skin, c.bones, OutputActivation::Softmax),
        ] {
            if h.sizes() != c.head_sizes(out) || h.output != act {
                return bad(format!("{name} head sizes {:?}", h.sizes()));
            }
            for w in h.layers.windows(2) {
                if w[0].out != w[1].inp {
                    return bad(format!("{name} head layers do not chain"));
                }
            }
        }
        Ok(())
    }
}

/// Encoder inputs and camera geometry for one sample, all in the canonical
/// frame.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldInput {
    pub voxels: VoxelGrid,
    pub image: FeatureMap2D,
    pub camera: Camera,
    pub view_center: Vec3,
    pub view_ray: Vec3,
}

impl FieldInput {
    pub fn from_sample(sample: &SensorSample, config: &FieldConfig) -> Result<Self, FieldError> {
        let (w, h) = (sample.image.width(), sample.image.height());
        if w % IMAGE_STRIDE != 0 || h % IMAGE_STRIDE != 0 {
            return Err(FieldError::IndivisibleImage(w, h));
        }
        let origin = sample.canonical_origin();
        let mut voxels =
            voxelize(&sample.canonical_points(), config.voxel_resolution, config.voxel_extent, &origin)?;
        voxels.values_mut().iter_mut().for_each(|v| *v = v.ln_1p());

        let camera = sample.canonical_camera();
        let z_ref = camera.to_camera(&origin).z;
        let mut image = FeatureMap2D::zeros(w, h, IMAGE_INPUTS)?;
        for y in 0..h {
            for x in 0..w {
                let px = sample.image.pixel(x, y);
                let (depth, mask) = (px[0], px[1]);
                image.pixel_mut(x, y).copy_from_slice(&[mask, if mask > 0.5 { depth - z_ref } else { 0.0 }]);
            }
        }
        Ok(Self { voxels, image, camera, view_center: sample.view_center(), view_ray: sample.view_ray() })
    }

    /// Grid on which the field is supervised and extracted by default.
    pub fn volume(&self) -> (Vec3, f64) {
        let [n, _, _] = self.voxels.resolution();
        let extent = self.voxels.cell_size() * n as f64;
        (self.voxels.origin() + Vec3::repeat(extent * 0.5), extent)
    }
}

/// Encoder outputs for one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Features {
    pub vox: VoxelGrid,
    pub image: FeatureMap2D,
}

/// Per-point encoding `[φ_vox, φ_im, φ_view]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PointEncoding {
    pub vox: Vec<f64>,
    pub image: Vec<f64>,
    pub view: f64,
}

impl PointEncoding {
    pub fn concat(&self) -> Vec<f64> {
        let mut v = self.vox.clone();
        v.extend_from_slice(&self.image);
        v.push(self.view);
        v
    }
}

pub(crate) fn volumetric_plan(grid: &VoxelGrid) -> EncoderPlan {
    EncoderPlan::new(&grid.resolution(), 1)
}

pub(crate) fn image_plan(image: &FeatureMap2D) -> EncoderPlan {
    EncoderPlan::new(&[image.width(), image.height()], IMAGE_STRIDE)
}

/// Same-resolution volumetric features.
pub fn encode_volumetric(grid: &VoxelGrid, params: &EncoderParams) -> Result<VoxelGrid, FieldError> {
    if !grid.is_cubical() {
        return Err(FieldError::Dimension("voxel grid must be cubical".into()));
    }
    if grid.channels() != params.input_dim() {
        return Err(FieldError::Dimension(format!("{} grid channels for {} encoder inputs", grid.channels(), params.input_dim())));
    }
    let out = params.forward(&Mat::from_point_major(grid.channels(), grid.values()), &volumetric_plan(grid));
    Ok(grid.with_values(params.channels(), out.to_point_major()))
}

/// Image features at 1/4 resolution, mapped back to input pixel
/// coordinates.
pub fn encode_image(image: &FeatureMap2D, params: &EncoderParams) -> Result<FeatureMap2D, FieldError> {
    let (w, h) = (image.width(), image.height());
    if w % IMAGE_STRIDE != 0 || h % IMAGE_STRIDE != 0 {
        return Err(FieldError::IndivisibleImage(w, h));
    }
    if image.channels() != params.input_dim() {
        return Err(FieldError::Dimension(format!("{} image channels for {} encoder inputs", image.channels(), params.input_dim())));
    }
    let out = params.forward(&Mat::from_point_major(image.channels(), image.values()), &image_plan(image));
    feature_map(w, h, params.channels(), out.to_point_major())
}

pub(crate) fn feature_map(w: usize, h: usize, channels: usize, values: Vec<f64>) -> Result<FeatureMap2D, FieldError> {
    let s = IMAGE_STRIDE as f64;
    Ok(FeatureMap2D::from_values(w / IMAGE_STRIDE, h / IMAGE_STRIDE, channels, values)?.with_mapping(s, (s - 1.0) * 0.5))
}

pub fn encode(params: &FieldParams, input: &FieldInput) -> Result<Features, FieldError> {
    Ok(Features { vox: encode_volumetric(&input.voxels, &params.vox)?, image: encode_image(&input.image, &params.image)? })
}

/// `(p − c)·r/‖r‖`.
pub fn viewpoint_feature(p: &Vec3, c: &Vec3, r: &Vec3) -> Result<f64, FieldError> {
    let n = r.norm();
    if !(n > 0.0) {
        return Err(FieldError::ZeroRay);
    }
    Ok((p - c).dot(r) / n)
}

/// Where a point's encoding reads from: trilinear cells, bilinear pixels.
#[derive(Debug, Clone, Copy, Default)]
pub(crate) struct Lookup {
    pub vox: TrilinearStencil,
    pub pix: [usize; 4],
    pub pix_w: [f64; 4],
    pub pix_n: usize,
}

impl Lookup {
    fn new(p: &Vec3, input: &FieldInput, feats: &Features, config: &FieldConfig) -> Self {
        let mut l = Self::default();
        if config.voxel_feature {
            l.vox = TrilinearStencil::new(&feats.vox, p);
        }
        // points behind the camera get no image evidence
        if let Ok(proj) = perspective_project(p, &input.camera) {
            (l.pix, l.pix_w, l.pix_n) = feats.image.bilinear_stencil(proj.uv);
        }
        l
    }
}

pub fn point_encoding(p: &Vec3, input: &FieldInput, feats: &Features, config: &FieldConfig) -> Result<PointEncoding, FieldError> {
    let l = Lookup::new(p, input, feats, config);
    let mut vox = vec![0.0; feats.vox.channels()];
    l.vox.gather(&feats.vox, &mut vox);
    let c = feats.image.channels();
    let mut image = vec![0.0; c];
    for t in 0..l.pix_n {
        let px = &feats.image.values()[l.pix[t] * c..(l.pix[t] + 1) * c];
        for (o, v) in image.iter_mut().zip(px) {
            *o += l.pix_w[t] * v;
        }
    }
    let view = if config.view_feature { viewpoint_feature(p, &input.view_center, &input.view_ray)? } else { 0.0 };
    Ok(PointEncoding { vox, image, view })
}

/// Encodings of many points as a channel-major matrix, plus the lookups
/// used (for the reverse pass).
pub(crate) fn encode_points(
    points: &[Vec3],
    input: &FieldInput,
    feats: &Features,
    config: &FieldConfig,
) -> Result<(Mat, Vec<Lookup>), FieldError> {
    if config.view_feature && !(input.view_ray.norm() > 0.0) {
        return Err(FieldError::ZeroRay);
    }
    let dim = config.encoding_dim();
    let mut phi = Vec::with_capacity(points.len() * dim);
    let mut lookups = Vec::with_capacity(points.len());
    for p in points {
        phi.extend(point_encoding(p, input, feats, config)?.concat());
        lookups.push(Lookup::new(p, input, feats, config));
    }
    Ok((Mat::from_point_major(dim, &phi), lookups))
}

fn check_phi(phi: &[f64], params: &FieldParams) -> Result<(), FieldError> {
    let d = params.config.encoding_dim();
    if phi.len() != d {
        return Err(FieldError::Dimension(format!("encoding of length {} for heads taking {d}", phi.len())));
    }
    Ok(())
}

pub fn eval_occupancy(phi: &[f64], params: &FieldParams) -> Result<f64, FieldError> {
    check_phi(phi, params)?;
    Ok(params.occ.forward(&Mat::from_point_major(phi.len(), phi)).data[0])
}

pub fn eval_pose(phi: &[f64], params: &FieldParams) -> Result<Vec<f64>, FieldError> {
    check_phi(phi, params)?;
    Ok(params.pose.forward(&Mat::from_point_major(phi.len(), phi)).data)
}

pub fn eval_skinning(phi: &[f64], params: &FieldParams) -> Result<Vec<f64>, FieldError> {
    check_phi(phi, params)?;
    Ok(params.skin.forward(&Mat::from_point_major(phi.len(), phi)).data)
}

/// Which heads to run in a batched evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Heads {
    pub occupancy: bool,
    pub pose: bool,
    pub skinning: bool,
}

impl Heads {
    pub const ALL: Heads = Heads { occupancy: true, pose: true, skinning: true };
}

/// Point-major head outputs; empty for heads not requested.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct FieldOutputs {
    pub occupancy: Vec<f64>,
    pub pose: Vec<f64>,
    pub skinning: Vec<f64>,
}

const EVAL_CHUNK: usize = 1024;

/// Batched evaluation, parallel over fixed-size chunks. Each point's
/// outputs are bit-identical to evaluating it alone.
pub fn eval_points(
    params: &FieldParams,
    input: &FieldInput,
    feats: &Features,
    points: &[Vec3],
    heads: Heads,
) -> Result<FieldOutputs, FieldError> {
    let chunks: Vec<&[Vec3]> = points.chunks(EVAL_CHUNK).collect();
    let parts = par::map(&chunks, |chunk| -> Result<FieldOutputs, FieldError> {
        let (phi, _) = encode_points(chunk, input, feats, &params.config)?;
        let run = |on: bool, head: &MlpParams| if on { head.forward(&phi).to_point_major() } else { Vec::new() };
        Ok(FieldOutputs {
            occupancy: run(heads.occupancy, &params.occ),
            pose: run(heads.pose, &params.pose),
            skinning: run(heads.skinning, &params.skin),
        })
    });
    let mut out = FieldOutputs::default();
    for part in parts {
        let part = part?;
        out.occupancy.extend(part.occupancy);
        out.pose.extend(part.pose);
        out.skinning.extend(part.skinning);
    }
    Ok(out)
}

const CHECKPOINT_MAGIC: &str = "S3F1";

/// `S3F1` and a text header (one `key values…` line each, closed by
/// `end`), then every parameter as little-endian f32 in [`FieldParams::tensors`]
/// order.
pub fn write_checkpoint<W: Write>(params: &FieldParams, mut w: W) -> Result<(), FieldError> {
    let c = &params.config;
    let sizes = |h: &MlpParams| h.sizes().iter().map(|s| s.to_string()).collect::<Vec<_>>().join(" ");
    let mut header = format!("{CHECKPOINT_MAGIC}\n");
    header += &format!("voxel_resolution {}\nvoxel_extent {}\n", c.voxel_resolution, c.voxel_extent);
    header += &format!("voxel_inputs {VOXEL_INPUTS}\nvoxel_channels {}\n", c.vox_channels);
    header += &format!("image_inputs {IMAGE_INPUTS}\nimage_channels {}\n", c.image_channels);
    header += &format!("encoder_levels {ENCODER_LEVELS} {CONV_FROM_LEVEL}\n");
    header += &format!("joints {}\nbones {}\n", c.joints, c.bones);
    header += &format!("occ_layers {} {}\n", sizes(&params.occ), params.occ.output.name());
    header += &format!("pose_layers {} {}\n", sizes(&params.pose), params.pose.output.name());
    header += &format!("skin_layers {} {}\n", sizes(&params.skin), params.skin.output.name());
    header += &format!("view_feature {}\nvoxel_feature {}\n", c.view_feature as u8, c.voxel_feature as u8);
    header += &format!("view_center {VIEW_CENTER_POLICY}\nend\n");
    let mut buf = header.into_bytes();
    for t in params.tensors() {
        for v in t {
            buf.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<FieldParams, FieldError> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    let bad = |m: String| FieldError::Format(m);
    let end = bytes.windows(5).position(|w| w == b"\nend\n").ok_or_else(|| bad("header not terminated".into()))? + 5;
    let text = std::str::from_utf8(&bytes[..end]).map_err(|_| bad("header is not UTF-8".into()))?;
    let mut lines = text.lines();
    if lines.next() != Some(CHECKPOINT_MAGIC) {
        return Err(bad("missing S3F1 magic".into()));
    }
    let mut kv = std::collections::BTreeMap::new();
    for line in lines {
        if line == "end" {
            break;
        }
        let (k, v) = line.split_once(' ').ok_or_else(|| bad(format!("bad header line {line:?}")))?;
        kv.insert(k, v);
    }
    let get = |k: &str| kv.get(k).copied().ok_or_else(|| bad(format!("missing header key {k}")));
    let num = |k: &str| -> Result<usize, FieldError> { get(k)?.parse().map_err(|_| bad(format!("bad value for {k}"))) };
    let flag = |k: &str| -> Result<bool, FieldError> {
        match get(k)? {
            "0" => Ok(false),
            "1" => Ok(true),
            v => Err(bad(format!("bad flag {k} = {v}"))),
        }
    };
    if num("voxel_inputs")? != VOXEL_INPUTS || num("image_inputs")? != IMAGE_INPUTS {
        return Err(bad("unsupported encoder inputs".into()));
    }
    if get("encoder_levels")? != format!("{ENCODER_LEVELS} {CONV_FROM_LEVEL}") {
        return Err(bad("unsupported encoder levels".into()));
    }
    if get("view_center")? != VIEW_CENTER_POLICY {
        return Err(bad("unknown view centre policy".into()));
    }
    let layers = |k: &str| -> Result<(Vec<usize>, OutputActivation), FieldError> {
        let mut parts: Vec<&str> = get(k)?.split(' ').collect();
        let act = parts.pop().and_then(OutputActivation::parse).ok_or_else(|| bad(format!("bad activation in {k}")))?;
        let sizes = parts.iter().map(|s| s.parse().map_err(|_| bad(format!("bad size in {k}")))).collect::<Result<Vec<usize>, _>>()?;
        Ok((sizes, act))
    };
    let (occ, occ_act) = layers("occ_layers")?;
    if occ.len() < 3 {
        return Err(bad("occupancy head too shallow".into()));
    }
    let config = FieldConfig {
        voxel_resolution: num("voxel_resolution")?,
        voxel_extent: get("voxel_extent")?.parse().map_err(|_| bad("bad voxel_extent".into()))?,
        vox_channels: num("voxel_channels")?,
        image_channels: num("image_channels")?,
        hidden_width: occ[1],
        head_layers: occ.len() - 1,
        joints: num("joints")?,
        bones: num("bones")?,
        view_feature: flag("view_feature")?,
        voxel_feature: flag("voxel_feature")?,
    };
    config.validate()?;
    let mut params = FieldParams::zeros(&config)?;
    for (k, head, act) in [("occ_layers", &params.occ, occ_act), ("pose_layers", &params.pose, layers("pose_layers")?.1), ("skin_layers", &params.skin, layers("skin_layers")?.1)] {
        if layers(k)?.0 != head.sizes() || act != head.output {
            return Err(FieldError::Dimension(format!("{k} do not chain with the declared dimensions")));
        }
    }
    let expected = params.param_count() * 4;
    if bytes.len() - end != expected {
        return Err(bad(format!("{} payload bytes, expected {expected}", bytes.len() - end)));
    }
    let mut words = bytes[end..].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64);
    for t in params.tensors_mut() {
        t.iter_mut().for_each(|v| *v = words.next().unwrap());
    }
    params.check_dims()?;
    if !params.all_finite() {
        return Err(bad("non-finite parameters".into()));
    }
    Ok(params)
}
