use std::fs;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use s3_core::animation::{drift_clip, Clip, ClipDoc};
use s3_core::character::{build_character, CharacterDoc, Pose, PoseDoc, RiggedCharacter};
use s3_core::geom::{Camera, CameraDoc};
use s3_core::sensorsim::{
    capture, read_depth_silhouette, read_point_cloud, write_depth_pfm, write_mask_pgm, write_point_cloud, Placement,
    SensorSample,
};

use crate::config::ExperimentConfig;
use crate::CliError;

pub const MANIFEST: &str = "manifest.txt";
const MANIFEST_HEADER: &str = "# path seed character pose view frame";

/// Seed for a node of the generation tree: splitmix64 folded over the path.
pub fn derive_seed(seed: u64, path: &[u64]) -> u64 {
    let mix = |mut z: u64| {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    };
    path.iter().fold(mix(seed), |acc, &p| mix(acc ^ mix(p)))
}

/// One manifest line.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SceneRecord {
    /// Scene directory relative to the dataset root.
    pub path: String,
    pub seed: u64,
    pub character: usize,
    pub pose: usize,
    pub view: usize,
    /// Clip frame the scene's pose was taken from.
    pub frame: usize,
}

pub fn write_manifest(records: &[SceneRecord]) -> String {
    let mut s = format!("{MANIFEST_HEADER}\n");
    for r in records {
        s += &format!("{} {} {} {} {} {}\n", r.path, r.seed, r.character, r.pose, r.view, r.frame);
    }
    s
}

pub fn read_manifest(text: &str) -> Result<Vec<SceneRecord>, CliError> {
    let mut lines = text.lines();
    if lines.next() != Some(MANIFEST_HEADER) {
        return Err(CliError::Validation("manifest: missing header".into()));
    }
    lines
        .enumerate()
        .map(|(i, line)| {
            let bad = || CliError::Validation(format!("manifest line {}: {line:?}", i + 2));
            let f: Vec<&str> = line.split(' ').collect();
            if f.len() != 6 || f[0].is_empty() || f[0].contains("..") || f[0].starts_with('/') {
                return Err(bad());
            }
            let n = |s: &str| s.parse::<usize>().map_err(|_| bad());
            Ok(SceneRecord {
                path: f[0].to_string(),
                seed: f[1].parse().map_err(|_| bad())?,
                character: n(f[2])?,
                pose: n(f[3])?,
                view: n(f[4])?,
                frame: n(f[5])?,
            })
        })
        .collect()
}

/// Camera and canonical-frame parameters of a scene.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ViewDoc {
    pub camera: CameraDoc,
    pub yaw: f64,
    pub center: [f64; 3],
    pub placement: Placement,
    pub frame: usize,
}

/// A scene as stored on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub character: RiggedCharacter,
    pub pose: Pose,
    pub clip: Clip,
    pub frame: usize,
    pub placement: Placement,
    pub sample: SensorSample,
}

pub(crate) fn json<T: Serialize>(value: &T) -> Result<String, CliError> {
    Ok(serde_json::to_string_pretty(value).map_err(|e| CliError::Validation(e.to_string()))? + "\n")
}

pub(crate) fn parse_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    fs::write(path, bytes).map_err(|e| CliError::io(path, e))
}

pub(crate) fn open(path: &Path) -> Result<BufReader<fs::File>, CliError> {
    Ok(BufReader::new(fs::File::open(path).map_err(|e| CliError::io(path, e))?))
}

impl Scene {
    pub fn write(&self, dir: &Path) -> Result<(), CliError> {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
        let s = &self.sample;
        let view = ViewDoc {
            camera: s.camera.to_doc(),
            yaw: s.yaw,
            center: [s.center.x, s.center.y, s.center.z],
            placement: self.placement,
            frame: self.frame,
        };
        write_file(&dir.join("character.json"), json(&self.character.to_doc())?.as_bytes())?;
        write_file(&dir.join("pose.json"), json(&self.pose.to_doc())?.as_bytes())?;
        write_file(&dir.join("clip.json"), json(&self.clip.to_doc())?.as_bytes())?;
        write_file(&dir.join("view.json"), json(&view)?.as_bytes())?;
        let mut buf = Vec::new();
        write_point_cloud(&s.points, &mut buf)?;
        write_file(&dir.join("points.s3pc"), &buf)?;
        buf.clear();
        write_depth_pfm(&s.image, &mut buf)?;
        write_file(&dir.join("depth.pfm"), &buf)?;
        buf.clear();
        write_mask_pgm(&s.image, &mut buf)?;
        write_file(&dir.join("mask.pgm"), &buf)
    }

    pub fn read(dir: &Path) -> Result<Self, CliError> {
        let character = RiggedCharacter::from_doc(&parse_json::<CharacterDoc>(&dir.join("character.json"))?)?;
        let pose = Pose::from_doc(&parse_json::<PoseDoc>(&dir.join("pose.json"))?)?;
        pose.check(character.skeleton())?;
        let clip = Clip::from_doc(&parse_json::<ClipDoc>(&dir.join("clip.json"))?)?;
        clip.check(character.skeleton())?;
        let view: ViewDoc = parse_json(&dir.join("view.json"))?;
        let points = read_point_cloud(open(&dir.join("points.s3pc"))?)?;
        let image = read_depth_silhouette(open(&dir.join("depth.pfm"))?, open(&dir.join("mask.pgm"))?)?;
        let camera = Camera::from_doc(&view.camera)?;
        if (camera.width, camera.height) != (image.width(), image.height()) {
            return Err(CliError::Validation(format!("{}: camera and image sizes differ", dir.display())));
        }
        let [x, y, z] = view.center;
        let sample = SensorSample { points, image, camera, yaw: view.yaw, center: s3_core::geom::Vec3::new(x, y, z) };
        Ok(Self { character, pose, clip, frame: view.frame, placement: view.placement, sample })
    }
}

/// Generates every scene of the configured dataset in manifest order.
pub fn generate(cfg: &ExperimentConfig) -> Result<Vec<(SceneRecord, Scene)>, CliError> {
    cfg.validate()?;
    let d = &cfg.data;
    let mut out = Vec::new();
    for c in 0..d.characters {
        let character = build_character(derive_seed(cfg.seed, &[0, c as u64]), &d.proportions)?;
        let clip = drift_clip(character.skeleton(), d.clip_frames, d.max_start, d.max_drift, derive_seed(cfg.seed, &[1, c as u64]));
        for p in 0..d.poses {
            let frame = p * d.pose_stride;
            let pose = clip.frames[frame].clone();
            for v in 0..d.views {
                let seed = derive_seed(cfg.seed, &[2, c as u64, p as u64, v as u64]);
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let azimuth = if d.max_azimuth > 0.0 { rng.gen_range(-d.max_azimuth..=d.max_azimuth) } else { 0.0 };
                let yaw = rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI);
                let placement = Placement::facing(cfg.view.distance, azimuth, yaw);
                let (sample, _) = capture(&character, &pose, &placement, &cfg.view, seed)?;
                let record = SceneRecord { path: format!("scene_{c:03}_{p:03}_{v:02}"), seed, character: c, pose: p, view: v, frame };
                out.push((record, Scene { character: character.clone(), pose: pose.clone(), clip: clip.clone(), frame, placement, sample }));
            }
        }
    }
    Ok(out)
}

pub fn write_dataset(dir: &Path, scenes: &[(SceneRecord, Scene)]) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    for (r, s) in scenes {
        s.write(&dir.join(&r.path))?;
    }
    let records: Vec<SceneRecord> = scenes.iter().map(|(r, _)| r.clone()).collect();
    write_file(&dir.join(MANIFEST), write_manifest(&records).as_bytes())
}

pub fn read_dataset(dir: &Path) -> Result<Vec<(SceneRecord, Scene)>, CliError> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| CliError::io(&path, e))?;
    let records = read_manifest(&text)?;
    if records.is_empty() {
        return Err(CliError::Validation("manifest lists no scenes".into()));
    }
    records
        .into_iter()
        .map(|r| {
            let scene = Scene::read(&scene_dir(dir, &r))?;
            Ok((r, scene))
        })
        .collect()
}

pub fn scene_dir(root: &Path, r: &SceneRecord) -> PathBuf {
    root.join(&r.path)
}
