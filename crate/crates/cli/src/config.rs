use serde::{Deserialize, Serialize};

use s3_core::character::Proportions;
use s3_core::sensorsim::ViewConfig;
use s3_core::training::{SamplerMode, TrainConfig};

use crate::CliError;

/// Everything an experiment needs besides its input files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub view: ViewConfig,
    pub train: TrainConfig,
    pub extract: ExtractConfig,
    pub metrics: MetricsConfig,
    pub ablation: AblationConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            data: DataConfig::default(),
            view: ViewConfig::default(),
            train: TrainConfig::default(),
            extract: ExtractConfig::default(),
            metrics: MetricsConfig::default(),
            ablation: AblationConfig::default(),
        }
    }
}

/// Dataset shape. Each character gets one drift clip; pose `p` is clip
/// frame `p · pose_stride`, and each pose is seen from `views` random
/// placements.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub characters: usize,
    pub poses: usize,
    pub views: usize,
    pub proportions: Proportions,
    pub clip_frames: usize,
    pub pose_stride: usize,
    /// Largest initial swing per joint, radians.
    pub max_start: f64,
    /// Largest swing rate per joint, radians per frame.
    pub max_drift: f64,
    /// Placements are seen from azimuths in `[-max_azimuth, max_azimuth]`.
    pub max_azimuth: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            characters: 1,
            poses: 4,
            views: 2,
            proportions: Proportions::default(),
            clip_frames: 160,
            pose_stride: 10,
            max_start: 0.5,
            max_drift: 0.01,
            max_azimuth: 0.6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExtractConfig {
    pub resolution: usize,
    pub iso: f64,
}

impl Default for ExtractConfig {
    fn default() -> Self {
        Self { resolution: 128, iso: 0.5 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricsConfig {
    pub samples: usize,
    pub seed: u64,
    /// Resolution of the analytic reference meshes.
    pub gt_resolution: usize,
    pub offsets: Vec<usize>,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        Self { samples: s3_core::metrics::DEFAULT_SAMPLES, seed: 0, gt_resolution: 128, offsets: vec![3, 5, 10, 20, 100] }
    }
}

/// Which heads are trained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadSet {
    Occ,
    Pose,
    Both,
}

/// One ablation variant: overrides applied to the base training config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Variant {
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub view_feature: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub voxel_feature: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sampler: Option<SamplerMode>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub heads: Option<HeadSet>,
}

impl Variant {
    pub fn named(name: &str) -> Self {
        Self { name: name.into(), view_feature: None, voxel_feature: None, sampler: None, heads: None }
    }

    pub fn apply(&self, base: &TrainConfig) -> TrainConfig {
        let mut t = base.clone();
        if let Some(v) = self.view_feature {
            t.field.view_feature = v;
        }
        if let Some(v) = self.voxel_feature {
            t.field.voxel_feature = v;
        }
        if let Some(m) = self.sampler {
            t.sampling.mode = m;
        }
        match self.heads {
            Some(HeadSet::Occ) => t.weights.pose = 0.0,
            Some(HeadSet::Pose) => t.weights.occ = 0.0,
            Some(HeadSet::Both) | None => {}
        }
        t
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationConfig {
    pub seeds: Vec<u64>,
    /// Training steps per variant; the base config's count when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub steps: Option<usize>,
    pub resolution: usize,
    /// Scenes evaluated per variant (the first ones in the manifest); 0 for all.
    pub eval_scenes: usize,
    pub variants: Vec<Variant>,
}

impl Default for AblationConfig {
    fn default() -> Self {
        let sampler = |name: &str, m| Variant { sampler: Some(m), ..Variant::named(name) };
        Self {
            seeds: vec![0, 1, 2],
            steps: None,
            resolution: 64,
            eval_scenes: 0,
            variants: vec![
                sampler("both", SamplerMode::Both),
                sampler("uniform", SamplerMode::Uniform),
                sampler("biased", SamplerMode::Biased),
            ],
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        let cfg: Self = toml::from_str(text).map_err(|e| CliError::Validation(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String, CliError> {
        toml::to_string(self).map_err(|e| CliError::Validation(format!("config: {e}")))
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |m: String| Err(CliError::Validation(m));
        let d = &self.data;
        if d.characters == 0 || d.poses == 0 || d.views == 0 {
            return bad("data: characters, poses and views must be positive".into());
        }
        if d.pose_stride * (d.poses - 1) >= d.clip_frames {
            return bad(format!("data: pose frame {} outside a {}-frame clip", d.pose_stride * (d.poses - 1), d.clip_frames));
        }
        if !(d.max_start >= 0.0 && d.max_drift >= 0.0 && d.max_azimuth >= 0.0) {
            return bad("data: angles must be >= 0".into());
        }
        d.proportions.validate()?;
        self.view.lidar.validate()?;
        self.train.validate()?;
        let e = &self.extract;
        if e.resolution < 8 || !(e.iso > 0.0 && e.iso < 1.0) {
            return bad(format!("extract: resolution {} (need >= 8), iso {} (need 0 < iso < 1)", e.resolution, e.iso));
        }
        if self.metrics.samples == 0 || self.metrics.gt_resolution < 16 {
            return bad("metrics: need samples > 0 and gt_resolution >= 16".into());
        }
        let a = &self.ablation;
        if a.seeds.is_empty() || a.variants.is_empty() || a.resolution < 8 {
            return bad("ablation: need seeds, variants and resolution >= 8".into());
        }
        let mut names: Vec<&str> = a.variants.iter().map(|v| v.name.as_str()).collect();
        names.sort();
        names.dedup();
        if names.len() != a.variants.len() || names.iter().any(|n| n.is_empty() || n.contains(',')) {
            return bad("ablation: variant names must be unique, non-empty and comma-free".into());
        }
        Ok(())
    }
}
