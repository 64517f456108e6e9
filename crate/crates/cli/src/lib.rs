//! Dataset generation, training, reconstruction, animation, evaluation and
//! ablation runs over on-disk experiment files.

pub mod config;
pub mod dataset;

use std::fs;
use std::io::BufReader;
use std::path::Path;

use thiserror::Error;

use s3_core::animation::{forward_kinematics, retarget, AnimationError, Clip, ClipDoc, SkinningWeights};
use s3_core::character::{analytic_joints, character_mesh, CharacterError, Skeleton, SkeletonDoc};
use s3_core::extraction::{extract_animatable_model, extract_geometry, read_skinning, write_skinning, AnimatableModel, ExtractionError};
use s3_core::fields::{read_checkpoint, write_checkpoint, FieldError, FieldParams};
use s3_core::geom::{read_obj, write_obj, GeomError, TriangleMesh};
use s3_core::metrics::{chamfer, format_sig6, mpjpe, normal_consistency, p2s, retarget_error, MetricsError, MetricsReport};
use s3_core::sensorsim::SensorError;
use s3_core::training::{train_with, write_loss_csv, TrainError, TrainOutcome, TrainScene};

use config::{ExperimentConfig, MetricsConfig};
use dataset::{json, open, parse_json, write_file, Scene, SceneRecord};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Validation(String),
    #[error("degenerate result: {0}")]
    Degenerate(String),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error(transparent)]
    Geom(#[from] GeomError),
    #[error(transparent)]
    Character(#[from] CharacterError),
    #[error(transparent)]
    Sensor(#[from] SensorError),
    #[error(transparent)]
    Field(#[from] FieldError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Extraction(#[from] ExtractionError),
    #[error(transparent)]
    Animation(#[from] AnimationError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io { path: path.display().to_string(), source }
    }

    fn is_degenerate(&self) -> bool {
        match self {
            Self::Degenerate(_) => true,
            Self::Extraction(ExtractionError::EmptyReconstruction { .. }) => true,
            Self::Extraction(ExtractionError::Character(CharacterError::ZeroLengthBone { .. })) => true,
            Self::Animation(AnimationError::ZeroLengthBone { .. }) => true,
            Self::Metrics(MetricsError::Animation(AnimationError::ZeroLengthBone { .. })) => true,
            _ => false,
        }
    }

    /// 0 success, 1 I/O failure, 2 invalid input, 3 degenerate result.
    pub fn exit_code(&self) -> i32 {
        if self.is_degenerate() {
            3
        } else if matches!(self, Self::Io { .. }) {
            1
        } else {
            2
        }
    }
}

pub const CONFIG_ECHO: &str = "config.toml";

fn create_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

/// Records the effective configuration next to a command's outputs.
pub fn write_config_echo(cfg: &ExperimentConfig, out: &Path) -> Result<(), CliError> {
    create_dir(out)?;
    write_file(&out.join(CONFIG_ECHO), cfg.to_toml()?.as_bytes())
}

pub fn load_config(path: Option<&Path>) -> Result<ExperimentConfig, CliError> {
    match path {
        Some(p) => ExperimentConfig::from_toml(&fs::read_to_string(p).map_err(|e| CliError::io(p, e))?),
        None => Ok(ExperimentConfig::default()),
    }
}

pub fn gen_data(cfg: &ExperimentConfig, out: &Path) -> Result<Vec<SceneRecord>, CliError> {
    let scenes = dataset::generate(cfg)?;
    dataset::write_dataset(out, &scenes)?;
    write_config_echo(cfg, out)?;
    Ok(scenes.into_iter().map(|(r, _)| r).collect())
}

/// Training examples in manifest order, identified by manifest position.
pub fn train_scenes(scenes: &[(SceneRecord, Scene)]) -> Vec<TrainScene> {
    scenes
        .iter()
        .enumerate()
        .map(|(i, (_, s))| TrainScene { id: i as u64, character: s.character.clone(), pose: s.pose.clone(), sample: s.sample.clone() })
        .collect()
}

pub fn train(cfg: &ExperimentConfig, dataset_dir: &Path, out: &Path) -> Result<TrainOutcome, CliError> {
    cfg.validate()?;
    let scenes = dataset::read_dataset(dataset_dir)?;
    let outcome = train_with(&train_scenes(&scenes), &cfg.train, |_, _| {})?;
    create_dir(out)?;
    let mut buf = Vec::new();
    write_checkpoint(&outcome.params, &mut buf)?;
    write_file(&out.join("checkpoint.s3f"), &buf)?;
    buf.clear();
    write_loss_csv(&outcome.history, &mut buf)?;
    write_file(&out.join("loss.csv"), &buf)?;
    write_config_echo(cfg, out)?;
    Ok(outcome)
}

pub fn load_checkpoint(path: &Path) -> Result<FieldParams, CliError> {
    Ok(read_checkpoint(open(path)?)?)
}

pub fn reconstruct(params: &FieldParams, scene: &Scene, resolution: usize, iso: f64) -> Result<AnimatableModel, CliError> {
    Ok(extract_animatable_model(params, &scene.sample, resolution, iso)?)
}

/// `mesh.obj`, `skeleton.json` and `skinning.s3sw`.
pub fn write_model(model: &AnimatableModel, dir: &Path) -> Result<(), CliError> {
    create_dir(dir)?;
    let mut buf = Vec::new();
    write_obj(model.mesh(), &mut buf)?;
    write_file(&dir.join("mesh.obj"), &buf)?;
    write_file(&dir.join("skeleton.json"), json(&model.skeleton().to_doc())?.as_bytes())?;
    buf.clear();
    write_skinning(model.weights(), &mut buf)?;
    write_file(&dir.join("skinning.s3sw"), &buf)
}

pub fn read_model(dir: &Path) -> Result<AnimatableModel, CliError> {
    let mesh = read_obj(open(&dir.join("mesh.obj"))?)?;
    let skeleton = Skeleton::from_doc(&parse_json::<SkeletonDoc>(&dir.join("skeleton.json"))?)?;
    let weights: SkinningWeights = read_skinning(open(&dir.join("skinning.s3sw"))?)?;
    Ok(AnimatableModel::new(mesh, skeleton, weights)?)
}

pub fn read_clip(path: &Path) -> Result<Clip, CliError> {
    Ok(Clip::from_doc(&parse_json::<ClipDoc>(path)?)?)
}

/// The model retargeted to its own skeleton posed by each selected clip
/// frame (all frames when `frames` is `None`).
pub fn animate(model: &AnimatableModel, clip: &Clip, frames: Option<&[usize]>) -> Result<Vec<(usize, TriangleMesh)>, CliError> {
    clip.check(model.skeleton())?;
    let all: Vec<usize> = (0..clip.len()).collect();
    let frames = frames.unwrap_or(&all);
    let rest = model.joints();
    frames
        .iter()
        .map(|&f| {
            let pose = clip.frames.get(f).ok_or_else(|| CliError::Validation(format!("clip has no frame {f}")))?;
            let t = forward_kinematics(model.skeleton(), pose);
            let target: Vec<_> = t.iter().zip(&rest).map(|(t, r)| t.apply(r)).collect();
            Ok((f, retarget(model, &target)?))
        })
        .collect()
}

pub fn write_frames(meshes: &[(usize, TriangleMesh)], out: &Path) -> Result<(), CliError> {
    create_dir(out)?;
    for (f, m) in meshes {
        let mut buf = Vec::new();
        write_obj(m, &mut buf)?;
        write_file(&out.join(format!("frame_{f:04}.obj")), &buf)?;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Metric {
    Chamfer,
    P2s,
    Normal,
    Mpjpe,
    Retarget,
}

impl Metric {
    pub const ALL: [Metric; 5] = [Self::Chamfer, Self::P2s, Self::Normal, Self::Mpjpe, Self::Retarget];

    pub fn parse_list(s: &str) -> Result<Vec<Self>, CliError> {
        s.split(',')
            .map(|m| match m.trim() {
                "chamfer" => Ok(Self::Chamfer),
                "p2s" => Ok(Self::P2s),
                "normal" => Ok(Self::Normal),
                "mpjpe" => Ok(Self::Mpjpe),
                "retarget" => Ok(Self::Retarget),
                other => Err(CliError::Validation(format!("unknown metric {other:?}"))),
            })
            .collect()
    }
}

pub fn parse_usize_list(s: &str) -> Result<Vec<usize>, CliError> {
    s.split(',').map(|v| v.trim().parse().map_err(|_| CliError::Validation(format!("bad list entry {v:?}")))).collect()
}

/// Metrics of `model` against the scene's character at the scene's pose,
/// plus retarget error to clip frames `frame + offset`.
pub fn evaluate(model: &AnimatableModel, scene: &Scene, metrics: &[Metric], cfg: &MetricsConfig) -> Result<MetricsReport, CliError> {
    let (n, seed) = (cfg.samples, cfg.seed);
    let mut rep = MetricsReport { samples: n, seed, ..Default::default() };
    let surface = [Metric::Chamfer, Metric::P2s, Metric::Normal];
    if metrics.iter().any(|m| surface.contains(m)) {
        let gt = character_mesh(&scene.character, &scene.pose, cfg.gt_resolution)?;
        if metrics.contains(&Metric::Chamfer) {
            rep.chamfer_cm = Some(chamfer(model.mesh(), &gt, n, seed)?);
        }
        if metrics.contains(&Metric::P2s) {
            rep.p2s_cm = Some(p2s(model.mesh(), &gt, n, seed)?);
        }
        if metrics.contains(&Metric::Normal) {
            rep.normal_consistency = Some(normal_consistency(model.mesh(), &gt, n, seed)?);
        }
    }
    if metrics.contains(&Metric::Mpjpe) {
        rep.mpjpe_cm = Some(mpjpe(&model.joints(), &analytic_joints(&scene.character, &scene.pose)?)?);
    }
    if metrics.contains(&Metric::Retarget) {
        for &k in &cfg.offsets {
            let f = scene.frame + k;
            let pose = scene
                .clip
                .frames
                .get(f)
                .ok_or_else(|| CliError::Validation(format!("offset +{k} reaches frame {f} of a {}-frame clip", scene.clip.len())))?;
            let e = retarget_error(model, &scene.character, pose, cfg.gt_resolution, n, seed)?;
            rep.retarget_error_cm.push((k as i64, e));
        }
    }
    Ok(rep)
}

pub fn write_report(rep: &MetricsReport, out: &Path) -> Result<(), CliError> {
    create_dir(out)?;
    let mut buf = Vec::new();
    rep.write_csv(&mut buf)?;
    write_file(&out.join("metrics.csv"), &buf)?;
    buf.clear();
    rep.write_text(&mut buf)?;
    write_file(&out.join("metrics.txt"), &buf)
}

pub fn read_report(path: &Path) -> Result<MetricsReport, CliError> {
    Ok(MetricsReport::read_csv(BufReader::new(fs::File::open(path).map_err(|e| CliError::io(path, e))?))?)
}

/// Mean surface and joint metrics of one trained variant; NaN where the
/// reconstruction was degenerate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AblationScores {
    pub chamfer_cm: f64,
    pub p2s_cm: f64,
    pub normal_consistency: f64,
    pub mpjpe_cm: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub variant: String,
    pub seed: u64,
    pub scores: AblationScores,
}

/// Reconstructs each scene and averages its metrics.
/// Mean metrics over `scenes`, scored from the mesh and argmax joints so
/// a degenerate skeleton does not hide the surface. An empty reconstruction
/// makes the mean NaN.
pub fn score(params: &FieldParams, scenes: &[&Scene], resolution: usize, iso: f64, cfg: &MetricsConfig) -> Result<AblationScores, CliError> {
    let mut sum = [0.0; 4];
    for scene in scenes {
        let v = match extract_geometry(params, &scene.sample, resolution, iso) {
            Ok((mesh, joints)) => {
                let (n, seed) = (cfg.samples, cfg.seed);
                let gt = character_mesh(&scene.character, &scene.pose, cfg.gt_resolution)?;
                let gt_joints = analytic_joints(&scene.character, &scene.pose)?;
                [chamfer(&mesh, &gt, n, seed)?, p2s(&mesh, &gt, n, seed)?, normal_consistency(&mesh, &gt, n, seed)?, mpjpe(&joints, &gt_joints)?]
            }
            Err(e) => {
                let e = CliError::from(e);
                if !e.is_degenerate() {
                    return Err(e);
                }
                [f64::NAN; 4]
            }
        };
        sum.iter_mut().zip(v).for_each(|(s, x)| *s += x);
    }
    let n = scenes.len() as f64;
    Ok(AblationScores { chamfer_cm: sum[0] / n, p2s_cm: sum[1] / n, normal_consistency: sum[2] / n, mpjpe_cm: sum[3] / n })
}

/// Trains every variant with every seed on the same scenes and scores the
/// first `eval_scenes` scenes.
pub fn ablate(cfg: &ExperimentConfig, scenes: &[(SceneRecord, Scene)]) -> Result<Vec<AblationRow>, CliError> {
    ablate_with(cfg, scenes, |_| {})
}

/// [`ablate`] with a callback after each trained variant.
pub fn ablate_with<F: FnMut(&AblationRow)>(cfg: &ExperimentConfig, scenes: &[(SceneRecord, Scene)], mut done: F) -> Result<Vec<AblationRow>, CliError> {
    cfg.validate()?;
    let a = &cfg.ablation;
    let data = train_scenes(scenes);
    let take = if a.eval_scenes == 0 { scenes.len() } else { a.eval_scenes.min(scenes.len()) };
    let eval: Vec<&Scene> = scenes[..take].iter().map(|(_, s)| s).collect();
    let mut rows = Vec::new();
    for v in &a.variants {
        for &seed in &a.seeds {
            let mut t = v.apply(&cfg.train);
            t.seed = seed;
            if let Some(steps) = a.steps {
                t.steps = steps;
            }
            let outcome = train_with(&data, &t, |_, _| {})?;
            let scores = score(&outcome.params, &eval, a.resolution, cfg.extract.iso, &cfg.metrics)?;
            let row = AblationRow { variant: v.name.clone(), seed, scores };
            done(&row);
            rows.push(row);
        }
    }
    Ok(rows)
}

/// Median over seeds, NaN-aware (NaN sorts last).
pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    if v.is_empty() {
        return f64::NAN;
    }
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

/// Per-variant medians over seeds, in first-appearance order.
pub fn ablation_medians(rows: &[AblationRow]) -> Vec<(String, AblationScores)> {
    let mut names: Vec<&str> = Vec::new();
    for r in rows {
        if !names.contains(&r.variant.as_str()) {
            names.push(&r.variant);
        }
    }
    names
        .into_iter()
        .map(|n| {
            let of = |f: fn(&AblationScores) -> f64| median(&rows.iter().filter(|r| r.variant == n).map(|r| f(&r.scores)).collect::<Vec<_>>());
            let s = AblationScores {
                chamfer_cm: of(|s| s.chamfer_cm),
                p2s_cm: of(|s| s.p2s_cm),
                normal_consistency: of(|s| s.normal_consistency),
                mpjpe_cm: of(|s| s.mpjpe_cm),
            };
            (n.to_string(), s)
        })
        .collect()
}

fn sig(x: f64) -> String {
    if x.is_nan() {
        "nan".into()
    } else {
        format_sig6(x)
    }
}

/// `variant,seed,chamfer_cm,p2s_cm,normal_consistency,mpjpe_cm`; one row
/// per run, then one `median` row per variant.
pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut s = String::from("variant,seed,chamfer_cm,p2s_cm,normal_consistency,mpjpe_cm\n");
    let line = |name: &str, seed: &str, c: &AblationScores| {
        format!("{name},{seed},{},{},{},{}\n", sig(c.chamfer_cm), sig(c.p2s_cm), sig(c.normal_consistency), sig(c.mpjpe_cm))
    };
    for r in rows {
        s += &line(&r.variant, &r.seed.to_string(), &r.scores);
    }
    for (name, m) in ablation_medians(rows) {
        s += &line(&name, "median", &m);
    }
    s
}

pub fn write_checkpoint_file(params: &FieldParams, path: &Path) -> Result<(), CliError> {
    let mut buf = Vec::new();
    write_checkpoint(params, &mut buf)?;
    write_file(path, &buf)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes() {
        assert_eq!(CliError::Validation("x".into()).exit_code(), 2);
        assert_eq!(CliError::Extraction(ExtractionError::EmptyReconstruction { iso: 0.5 }).exit_code(), 3);
        assert_eq!(CliError::io(Path::new("a"), std::io::Error::other("x")).exit_code(), 1);
        assert_eq!(CliError::Field(FieldError::ZeroRay).exit_code(), 2);
    }

    #[test]
    fn medians_and_lists() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0]), 2.5);
        assert_eq!(median(&[1.0, f64::NAN, 0.5]), 1.0);
        assert_eq!(parse_usize_list("3, 5,10").unwrap(), vec![3, 5, 10]);
        assert!(parse_usize_list("3,x").is_err());
        assert_eq!(Metric::parse_list("chamfer,retarget").unwrap(), vec![Metric::Chamfer, Metric::Retarget]);
        assert!(Metric::parse_list("iou").is_err());
    }
}
