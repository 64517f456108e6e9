//! Simulated single-view inputs: a spinning LiDAR and a depth + silhouette
//! camera, plus the canonical-frame normalization and voxelization applied
//! before feature encoding.

mod io;
mod raycast;

pub use io::{read_depth_silhouette, read_point_cloud, write_depth_pfm, write_mask_pgm, write_point_cloud};
pub use raycast::{cast_all, ray_triangle, MeshIndex, Raycast, Sphere};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::character::{character_mesh, CharacterError, Pose, RiggedCharacter};
use crate::geom::{Camera, FeatureMap2D, GeomError, RigidTransform, Rotation, TriangleMesh, Vec3, VoxelGrid, UP};
use crate::par;

#[derive(Debug, Error)]
pub enum SensorError {
    #[error("invalid sensor config: {0}")]
    InvalidConfig(String),
    #[error("format error: {0}")]
    Format(String),
    #[error(transparent)]
    Geom(#[from] GeomError),
    #[error(transparent)]
    Character(#[from] CharacterError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LidarConfig {
    pub azimuth_interval_deg: f64,
    /// Highest beam elevation.
    pub elevation_max_deg: f64,
    /// Lowest beam elevation.
    pub elevation_min_deg: f64,
    pub elevation_interval_deg: f64,
    pub drop_rate: f64,
    pub noise_sigma: f64,
    pub origin: [f64; 3],
}

impl Default for LidarConfig {
    fn default() -> Self {
        Self {
            azimuth_interval_deg: 0.18,
            elevation_max_deg: 2.0,
            elevation_min_deg: -24.0,
            elevation_interval_deg: 0.4,
            drop_rate: 0.10,
            noise_sigma: 0.01,
            origin: [0.0; 3],
        }
    }
}

impl LidarConfig {
    pub fn validate(&self) -> Result<(), SensorError> {
        let bad = |m: &str| Err(SensorError::InvalidConfig(m.to_string()));
        if !(self.azimuth_interval_deg > 0.0 && self.elevation_interval_deg > 0.0) {
            return bad("angular intervals must be positive");
        }
        if !(self.elevation_max_deg >= self.elevation_min_deg) {
            return bad("elevation_max_deg must be >= elevation_min_deg");
        }
        if !(0.0..1.0).contains(&self.drop_rate) && self.drop_rate != 1.0 {
            return bad("drop_rate must lie in [0, 1]");
        }
        if !(self.noise_sigma >= 0.0) {
            return bad("noise_sigma must be >= 0");
        }
        Ok(())
    }

    pub fn azimuth_count(&self) -> usize {
        ((360.0 / self.azimuth_interval_deg) - 1e-9).ceil() as usize
    }

    pub fn elevation_count(&self) -> usize {
        ((self.elevation_max_deg - self.elevation_min_deg) / self.elevation_interval_deg + 1e-9).floor() as usize + 1
    }

    /// Unit direction of ray `index = elevation_index · azimuth_count + azimuth_index`.
    pub fn ray_direction(&self, index: usize) -> Vec3 {
        let n_az = self.azimuth_count();
        let (e, a) = (index / n_az, index % n_az);
        let el = (self.elevation_max_deg - e as f64 * self.elevation_interval_deg).to_radians();
        let az = (a as f64 * self.azimuth_interval_deg).to_radians();
        Vec3::new(el.cos() * az.cos(), el.cos() * az.sin(), el.sin())
    }
}

/// Sweeps every (azimuth, elevation) ray against `target`, keeps the nearest
/// hit, drops it with probability `drop_rate` and perturbs the range by
/// N(0, σ²). Randomness for ray `i` comes from stream `i` of a ChaCha8
/// generator seeded with `seed`, so results do not depend on evaluation
/// order. Output is in ray order.
pub fn simulate_lidar_on(target: &dyn Raycast, cfg: &LidarConfig, seed: u64) -> Result<Vec<Vec3>, SensorError> {
    cfg.validate()?;
    let origin = Vec3::from(cfg.origin);
    let n = cfg.azimuth_count() * cfg.elevation_count();
    let returns = par::map_range(n, |i| {
        let dir = cfg.ray_direction(i);
        let t = target.raycast(&origin, &dir)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(i as u64);
        if rng.gen::<f64>() < cfg.drop_rate {
            return None;
        }
        let noise: f64 = if cfg.noise_sigma > 0.0 { rng.sample::<f64, _>(StandardNormal) * cfg.noise_sigma } else { 0.0 };
        Some(origin + dir * (t + noise))
    });
    Ok(returns.into_iter().flatten().collect())
}

pub fn simulate_lidar(mesh: &TriangleMesh, cfg: &LidarConfig, seed: u64) -> Result<Vec<Vec3>, SensorError> {
    simulate_lidar_on(&MeshIndex::new(mesh), cfg, seed)
}

/// Two-channel image `[depth, silhouette]` from rays through pixel centres.
/// Depth is camera-space Z of the nearest hit, 0 where the ray misses.
pub fn render_depth_silhouette_on(target: &dyn Raycast, cam: &Camera) -> FeatureMap2D {
    let (w, h) = (cam.width, cam.height);
    let forward = cam.extrinsic.rotation.inverse().apply(&Vec3::z());
    let pixels = par::map_range(w * h, |i| {
        let (origin, dir) = cam.pixel_ray([(i % w) as f64, (i / w) as f64]);
        match target.raycast(&origin, &dir) {
            Some(t) => [t * dir.dot(&forward), 1.0],
            None => [0.0, 0.0],
        }
    });
    FeatureMap2D::from_values(w, h, 2, pixels.concat()).expect("size from a valid camera")
}

pub fn render_depth_silhouette(mesh: &TriangleMesh, cam: &Camera) -> FeatureMap2D {
    render_depth_silhouette_on(&MeshIndex::new(mesh), cam)
}

/// Rotates by −`yaw` about the up axis after moving the horizontal part of
/// `center` onto that axis. Heights are unchanged.
pub fn normalize_frame(points: &[Vec3], yaw: f64, center: &Vec3) -> Vec<Vec3> {
    let t = canonical_transform(yaw, center);
    points.iter().map(|p| t.apply(p)).collect()
}

/// Inverse of [`normalize_frame`].
pub fn denormalize_frame(points: &[Vec3], yaw: f64, center: &Vec3) -> Vec<Vec3> {
    let t = canonical_transform(yaw, center).inverse();
    points.iter().map(|p| t.apply(p)).collect()
}

/// World → canonical.
pub fn canonical_transform(yaw: f64, center: &Vec3) -> RigidTransform {
    let r = Rotation::about_up(-yaw);
    let shift = Vec3::new(center.x, center.y, 0.0);
    RigidTransform::new(r, -r.apply(&shift))
}

/// Point counts on a `resolution³` cube grid of side `extent` centred at
/// `center`. Points outside are ignored.
pub fn voxelize(points: &[Vec3], resolution: usize, extent: f64, center: &Vec3) -> Result<VoxelGrid, SensorError> {
    let mut grid = VoxelGrid::cube(*center, extent, resolution, 1)?;
    for p in points {
        if let Some([i, j, k]) = grid.cell_of(p) {
            let lin = grid.linear_index(i, j, k);
            grid.values_mut()[lin] += 1.0;
        }
    }
    Ok(grid)
}

/// Sensor placement and imaging parameters for one view.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ViewConfig {
    /// Horizontal distance from the sensor to the character.
    pub distance: f64,
    pub sensor_height: f64,
    pub image_size: usize,
    /// Fraction of the image height covered by a `fill_height` tall subject.
    pub fill: f64,
    pub fill_height: f64,
    pub lidar: LidarConfig,
    /// Marching-cubes resolution of the ground-truth mesh that is sensed.
    pub mesh_resolution: usize,
}

impl Default for ViewConfig {
    fn default() -> Self {
        Self {
            distance: 10.0,
            sensor_height: 1.7,
            image_size: 256,
            fill: 0.9,
            fill_height: 1.9,
            lidar: LidarConfig::default(),
            mesh_resolution: 128,
        }
    }
}

/// Where a character stands in the world: yaw about the up axis, then a
/// horizontal translation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Placement {
    pub yaw: f64,
    pub translation: [f64; 2],
}

impl Placement {
    /// Character frame → world.
    pub fn transform(&self) -> RigidTransform {
        RigidTransform::new(Rotation::about_up(self.yaw), Vec3::new(self.translation[0], self.translation[1], 0.0))
    }

    /// Character at `distance` in front of a sensor at the origin, seen from
    /// azimuth `azimuth`, facing `yaw`.
    pub fn facing(distance: f64, azimuth: f64, yaw: f64) -> Self {
        Self { yaw, translation: [distance * azimuth.cos(), distance * azimuth.sin()] }
    }
}

/// One view of one posed character: the network input plus the
/// canonical-frame parameters supplied with it.
#[derive(Debug, Clone, PartialEq)]
pub struct SensorSample {
    /// LiDAR returns, world frame.
    pub points: Vec<Vec3>,
    /// `[depth, silhouette]`.
    pub image: FeatureMap2D,
    pub camera: Camera,
    pub yaw: f64,
    /// Canonical origin (pelvis) in the world frame; its horizontal part is
    /// the normalization centre.
    pub center: Vec3,
}

impl SensorSample {
    pub fn to_canonical(&self) -> RigidTransform {
        canonical_transform(self.yaw, &self.center)
    }

    pub fn to_world(&self) -> RigidTransform {
        self.to_canonical().inverse()
    }

    pub fn canonical_points(&self) -> Vec<Vec3> {
        normalize_frame(&self.points, self.yaw, &self.center)
    }

    /// Canonical origin in canonical coordinates (on the up axis).
    pub fn canonical_origin(&self) -> Vec3 {
        Vec3::new(0.0, 0.0, self.center.z)
    }

    /// Unit viewing ray in canonical coordinates, from the camera towards
    /// the canonical origin.
    pub fn view_ray(&self) -> Vec3 {
        let cam = self.to_canonical().apply(&self.camera.center());
        (self.canonical_origin() - cam).normalize()
    }

    /// Camera with the canonical frame as its world frame.
    pub fn canonical_camera(&self) -> Camera {
        let mut cam = self.camera.clone();
        cam.extrinsic = self.camera.extrinsic.compose(&self.to_world());
        cam
    }

    /// Reference point for the viewpoint feature: the centre of the LiDAR
    /// points when there are any, else the canonical origin.
    pub fn view_center(&self) -> Vec3 {
        if self.points.is_empty() {
            return self.canonical_origin();
        }
        let pts = self.canonical_points();
        pts.iter().sum::<Vec3>() / pts.len() as f64
    }
}

/// Focal length making a `height`-tall subject at `distance` span `fill` of
/// an image `pixels` high.
pub fn focal_for(distance: f64, height: f64, fill: f64, pixels: usize) -> f64 {
    fill * pixels as f64 * distance / height
}

/// Poses and places the character, senses it from a sensor at the world
/// origin (height `sensor_height`) and returns the sample plus the world
/// mesh that was sensed.
pub fn capture(
    character: &RiggedCharacter,
    pose: &Pose,
    placement: &Placement,
    cfg: &ViewConfig,
    seed: u64,
) -> Result<(SensorSample, TriangleMesh), SensorError> {
    if cfg.image_size == 0 || cfg.image_size % 4 != 0 {
        return Err(SensorError::InvalidConfig(format!("image size {} must be a positive multiple of 4", cfg.image_size)));
    }
    if !(cfg.distance > 0.0 && cfg.fill > 0.0 && cfg.fill_height > 0.0) {
        return Err(SensorError::InvalidConfig("distance, fill and fill_height must be positive".into()));
    }
    let to_world = placement.transform();
    let mesh = character_mesh(character, pose, cfg.mesh_resolution)?.transformed(&to_world);
    let pelvis = crate::character::analytic_joints(character, pose)?[0];
    let center = to_world.apply(&Vec3::new(0.0, 0.0, pelvis.z));

    let eye = Vec3::new(0.0, 0.0, cfg.sensor_height);
    let focal = focal_for(cfg.distance, cfg.fill_height, cfg.fill, cfg.image_size);
    let camera = Camera::look_at(eye, center, UP, focal, cfg.image_size, cfg.image_size)?;
    let index = MeshIndex::new(&mesh);
    let image = render_depth_silhouette_on(&index, &camera);
    let lidar = LidarConfig { origin: eye.into(), ..cfg.lidar.clone() };
    let points = simulate_lidar_on(&index, &lidar, seed)?;
    Ok((SensorSample { points, image, camera, yaw: placement.yaw, center }, mesh))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::character::{build_character, Proportions};
    use std::f64::consts::FRAC_PI_2;

    fn exact_cfg() -> LidarConfig {
        LidarConfig { drop_rate: 0.0, noise_sigma: 0.0, ..Default::default() }
    }

    #[test]
    fn default_lidar_geometry() {
        let c = LidarConfig::default();
        assert_eq!(c.azimuth_count(), 2000);
        assert_eq!(c.elevation_count(), 66);
        assert!((c.ray_direction(0) - Vec3::new(2f64.to_radians().cos(), 0.0, 2f64.to_radians().sin())).norm() < 1e-15);
    }

    #[test]
    fn lidar_returns_lie_on_sphere() {
        let s = Sphere { center: Vec3::new(10.0, 0.0, 0.0), radius: 1.0 };
        let pts = simulate_lidar_on(&s, &exact_cfg(), 3).unwrap();
        assert!(pts.len() > 100);
        for p in &pts {
            assert!(((p - s.center).norm() - 1.0).abs() < 1e-9);
        }
        // exact settings ignore the seed
        assert_eq!(pts, simulate_lidar_on(&s, &exact_cfg(), 99).unwrap());
    }

    #[test]
    fn full_drop_gives_nothing() {
        let s = Sphere { center: Vec3::new(10.0, 0.0, 0.0), radius: 1.0 };
        let cfg = LidarConfig { drop_rate: 1.0, ..Default::default() };
        assert!(simulate_lidar_on(&s, &cfg, 0).unwrap().is_empty());
    }

    #[test]
    fn range_noise_matches_sigma() {
        // large wall at x = 5
        let v = vec![
            Vec3::new(5.0, -100.0, -50.0),
            Vec3::new(5.0, 100.0, -50.0),
            Vec3::new(5.0, 100.0, 50.0),
            Vec3::new(5.0, -100.0, 50.0),
        ];
        let wall = TriangleMesh::new(v, vec![[0, 1, 2], [0, 2, 3]]).unwrap();
        let cfg = LidarConfig { drop_rate: 0.0, noise_sigma: 0.01, ..Default::default() };
        let pts = simulate_lidar(&wall, &cfg, 7).unwrap();
        assert!(pts.len() >= 10_000);
        let errors: Vec<f64> = pts[..10_000]
            .iter()
            .map(|p| {
                let d = p.normalize();
                p.norm() - 5.0 / d.x
            })
            .collect();
        let mean = errors.iter().sum::<f64>() / errors.len() as f64;
        let var = errors.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / (errors.len() - 1) as f64;
        let std = var.sqrt();
        assert!((0.009..=0.011).contains(&std), "std {std}");
    }

    #[test]
    fn lidar_is_seed_deterministic() {
        let s = Sphere { center: Vec3::new(0.0, 8.0, 0.0), radius: 1.5 };
        let cfg = LidarConfig::default();
        assert_eq!(simulate_lidar_on(&s, &cfg, 5).unwrap(), simulate_lidar_on(&s, &cfg, 5).unwrap());
        assert_ne!(simulate_lidar_on(&s, &cfg, 5).unwrap(), simulate_lidar_on(&s, &cfg, 6).unwrap());
    }

    #[test]
    fn silhouette_disc_and_depth() {
        let cam = Camera::new(300.0, 300.0, 63.5, 63.5, 128, 128, RigidTransform::identity()).unwrap();
        let (z, r) = (10.0, 1.0);
        let s = Sphere { center: Vec3::new(0.0, 0.0, z), radius: r };
        let img = render_depth_silhouette_on(&s, &cam);
        let count: f64 = (0..128 * 128).map(|i| img.values()[i * 2 + 1]).sum();
        // exact projected outline of a sphere: radius f·r/√(z² − r²)
        let rp = 300.0 * r / (z * z - r * r).sqrt();
        let area = std::f64::consts::PI * rp * rp;
        assert!(((count - area) / area).abs() < 0.03, "{count} vs {area}");
        let c = img.pixel(64, 64);
        assert_eq!(c[1], 1.0);
        assert!((c[0] - (z - r)).abs() < 0.01);
        let behind = Sphere { center: Vec3::new(0.0, 0.0, -10.0), radius: 1.0 };
        assert!(render_depth_silhouette_on(&behind, &cam).values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn normalize_frame_examples() {
        let pts = vec![Vec3::new(1.0, 2.0, 3.0), Vec3::new(-4.0, 0.5, 0.0), Vec3::new(3.0, 4.0, 1.0)];
        assert_eq!(normalize_frame(&pts, 0.0, &Vec3::zeros()), pts);
        let moved = normalize_frame(&pts, 0.0, &Vec3::new(3.0, 4.0, 9.0));
        for (m, p) in moved.iter().zip(&pts) {
            assert_eq!(*m, p - Vec3::new(3.0, 4.0, 0.0));
        }
        let c = Vec3::new(0.3, -2.0, 1.0);
        let back = denormalize_frame(&normalize_frame(&pts, FRAC_PI_2, &c), FRAC_PI_2, &c);
        for (b, p) in back.iter().zip(&pts) {
            assert!((b - p).norm() < 1e-9);
        }
        // rigid: pairwise distances preserved
        let n = normalize_frame(&pts, 0.7, &c);
        for i in 0..3 {
            for j in 0..3 {
                assert!(((n[i] - n[j]).norm() - (pts[i] - pts[j]).norm()).abs() < 1e-12);
            }
        }
        // the centre itself lands on the up axis at its own height
        let on_axis = normalize_frame(&[c], 1.1, &c)[0];
        assert!(on_axis.xy().norm() < 1e-12 && on_axis.z == c.z);
    }

    #[test]
    fn voxelize_counts() {
        let g = voxelize(&[Vec3::new(0.01, 0.01, 0.01)], 4, 1.0, &Vec3::zeros()).unwrap();
        assert_eq!(g.values().iter().filter(|&&v| v != 0.0).count(), 1);
        assert_eq!(g.values().iter().sum::<f64>(), 1.0);
        let g = voxelize(&[Vec3::new(0.1, 0.1, 0.1); 2], 4, 1.0, &Vec3::zeros()).unwrap();
        assert_eq!(g.values().iter().copied().fold(0.0, f64::max), 2.0);
    }

    proptest::proptest! {
        #[test]
        fn voxel_total_equals_in_extent_count(seed in 0u64..500) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let pts: Vec<Vec3> = (0..200).map(|_| Vec3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))).collect();
            let g = voxelize(&pts, 8, 1.2, &Vec3::zeros()).unwrap();
            let inside = pts.iter().filter(|p| g.cell_of(p).is_some()).count();
            proptest::prop_assert_eq!(g.values().iter().sum::<f64>(), inside as f64);
        }
    }

    #[test]
    fn capture_points_lie_on_sensor_rays() {
        let c = build_character(0, &Proportions::default()).unwrap();
        let cfg = ViewConfig { image_size: 64, mesh_resolution: 48, lidar: exact_cfg(), ..Default::default() };
        let placement = Placement::facing(10.0, 0.3, 1.0);
        let (s, mesh) = capture(&c, &Pose::identity(15), &placement, &cfg, 1).unwrap();
        assert!(s.points.len() > 50);
        let index = MeshIndex::new(&mesh);
        let eye = Vec3::new(0.0, 0.0, cfg.sensor_height);
        for p in &s.points {
            let d = (p - eye).normalize();
            let t = index.raycast(&eye, &d).unwrap();
            assert!((eye + d * t - p).norm() < 1e-9);
        }
        // the silhouette sees the character and the canonical frame undoes the placement
        assert!(s.image.values().iter().skip(1).step_by(2).any(|&m| m == 1.0));
        let canon = s.canonical_points();
        let body = c.posed(&Pose::identity(15)).unwrap();
        for p in &canon {
            assert!(body.sdf(p).abs() < 0.03);
        }
        assert!((s.view_ray().norm() - 1.0).abs() < 1e-12);
    }
}
