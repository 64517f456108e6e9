//! Surface and joint metrics in centimetres: Chamfer, point-to-surface,
//! normal consistency, MPJPE and retarget error.

use std::fmt::Write as _;
use std::io::{BufRead, Write};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::animation::{retarget, AnimationError};
use crate::character::{analytic_joints, character_mesh, CharacterError, Pose, RiggedCharacter};
use crate::extraction::AnimatableModel;
use crate::geom::{SurfaceSampler, TriangleMesh, Vec3};
use crate::par;

pub const DEFAULT_SAMPLES: usize = 10_000;
const CM: f64 = 100.0;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("mesh has no surface area")]
    EmptyMesh,
    #[error("mesh is not consistently oriented")]
    Unoriented,
    #[error("need at least one sample")]
    NoSamples,
    #[error("joint lists differ in length: {0} vs {1}")]
    JointCount(usize, usize),
    #[error("metrics report: {0}")]
    Format(String),
    #[error(transparent)]
    Character(#[from] CharacterError),
    #[error(transparent)]
    Animation(#[from] AnimationError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Closest point to `p` on triangle `abc` (Voronoi-region walk).
pub fn closest_point_on_triangle(p: &Vec3, a: &Vec3, b: &Vec3, c: &Vec3) -> Vec3 {
    let (ab, ac, ap) = (b - a, c - a, p - a);
    let (d1, d2) = (ab.dot(&ap), ac.dot(&ap));
    if d1 <= 0.0 && d2 <= 0.0 {
        return *a;
    }
    let bp = p - b;
    let (d3, d4) = (ab.dot(&bp), ac.dot(&bp));
    if d3 >= 0.0 && d4 <= d3 {
        return *b;
    }
    let vc = d1 * d4 - d3 * d2;
    if vc <= 0.0 && d1 >= 0.0 && d3 <= 0.0 {
        return a + ab * (d1 / (d1 - d3));
    }
    let cp = p - c;
    let (d5, d6) = (ab.dot(&cp), ac.dot(&cp));
    if d6 >= 0.0 && d5 <= d6 {
        return *c;
    }
    let vb = d5 * d2 - d1 * d6;
    if vb <= 0.0 && d2 >= 0.0 && d6 <= 0.0 {
        return a + ac * (d2 / (d2 - d6));
    }
    let va = d3 * d6 - d5 * d4;
    if va <= 0.0 && (d4 - d3) >= 0.0 && (d5 - d6) >= 0.0 {
        return b + (c - b) * ((d4 - d3) / ((d4 - d3) + (d5 - d6)));
    }
    let denom = 1.0 / (va + vb + vc);
    a + ab * (vb * denom) + ac * (vc * denom)
}

/// Uniform grid over a mesh's non-degenerate faces for exact
/// nearest-surface queries.
pub struct SurfaceIndex<'a> {
    mesh: &'a TriangleMesh,
    lo: Vec3,
    cell: f64,
    dims: [usize; 3],
    cells: Vec<Vec<u32>>,
}

/// Nearest surface point, its distance and the face it lies on.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Nearest {
    pub point: Vec3,
    pub distance: f64,
    pub face: usize,
}

impl<'a> SurfaceIndex<'a> {
    pub fn new(mesh: &'a TriangleMesh) -> Result<Self, MetricsError> {
        let faces: Vec<usize> = (0..mesh.faces().len()).filter(|&f| mesh.face_area(f) > 0.0).collect();
        if faces.is_empty() {
            return Err(MetricsError::EmptyMesh);
        }
        let (lo, hi) = mesh.bounds().ok_or(MetricsError::EmptyMesh)?;
        let size = (hi - lo).add_scalar(1e-9);
        // about two faces per occupied cell on a surface
        let target = (faces.len() as f64 / 2.0).max(1.0);
        let area = 2.0 * (size.x * size.y + size.y * size.z + size.z * size.x);
        let cell = (area / target).sqrt().max(size.max() / 256.0);
        let dims = [0, 1, 2].map(|a| ((size[a] / cell).ceil() as usize).max(1));
        let mut cells = vec![Vec::new(); dims[0] * dims[1] * dims[2]];
        let coord = |v: f64, a: usize| (((v - lo[a]) / cell).floor().max(0.0) as usize).min(dims[a] - 1);
        for &f in &faces {
            let t = mesh.triangle(f);
            let bmin = t[0].inf(&t[1]).inf(&t[2]);
            let bmax = t[0].sup(&t[1]).sup(&t[2]);
            for k in coord(bmin.z, 2)..=coord(bmax.z, 2) {
                for j in coord(bmin.y, 1)..=coord(bmax.y, 1) {
                    for i in coord(bmin.x, 0)..=coord(bmax.x, 0) {
                        cells[i + dims[0] * (j + dims[1] * k)].push(f as u32);
                    }
                }
            }
        }
        Ok(Self { mesh, lo, cell, dims, cells })
    }

    /// Exact nearest point: rings of cells around the query's (clamped)
    /// cell are searched until no unsearched cell can be closer.
    pub fn nearest(&self, p: &Vec3) -> Nearest {
        let home = [0, 1, 2].map(|a| (((p[a] - self.lo[a]) / self.cell).floor().max(0.0) as usize).min(self.dims[a] - 1) as i64);
        let mut best = Nearest { point: *p, distance: f64::INFINITY, face: usize::MAX };
        let max_ring = *self.dims.iter().max().unwrap() as i64;
        for r in 0..=max_ring {
            for dk in -r..=r {
                for dj in -r..=r {
                    for di in -r..=r {
                        if di.abs().max(dj.abs()).max(dk.abs()) != r {
                            continue;
                        }
                        let c = [home[0] + di, home[1] + dj, home[2] + dk];
                        if (0..3).any(|a| c[a] < 0 || c[a] >= self.dims[a] as i64) {
                            continue;
                        }
                        let lin = c[0] as usize + self.dims[0] * (c[1] as usize + self.dims[1] * c[2] as usize);
                        for &f in &self.cells[lin] {
                            let [a, b, cc] = self.mesh.triangle(f as usize);
                            let q = closest_point_on_triangle(p, &a, &b, &cc);
                            let d = (q - p).norm();
                            if d < best.distance || (d == best.distance && (f as usize) < best.face) {
                                best = Nearest { point: q, distance: d, face: f as usize };
                            }
                        }
                    }
                }
            }
            // cells in ring r + 1 are at least r cells away
            if best.distance <= r as f64 * self.cell {
                break;
            }
        }
        best
    }
}

/// `n` area-uniform surface samples with the faces they lie on; sample `i`
/// draws from its own stream of the seeded generator.
pub fn surface_samples(mesh: &TriangleMesh, n: usize, seed: u64) -> Result<Vec<(Vec3, usize)>, MetricsError> {
    if n == 0 {
        return Err(MetricsError::NoSamples);
    }
    let sampler = SurfaceSampler::new(mesh).ok_or(MetricsError::EmptyMesh)?;
    Ok(par::map_range(n, |i| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(i as u64);
        sampler.sample(&mut rng)
    }))
}

/// Mean distance from samples on `pred` to the surface of `gt`, in cm.
pub fn p2s(pred: &TriangleMesh, gt: &TriangleMesh, n: usize, seed: u64) -> Result<f64, MetricsError> {
    let samples = surface_samples(pred, n, seed)?;
    let index = SurfaceIndex::new(gt)?;
    let d = par::map(&samples, |(p, _)| index.nearest(p).distance);
    Ok(par::sum(&d) / n as f64 * CM)
}

/// Mean of the two directional point-to-surface distances, in cm.
pub fn chamfer(a: &TriangleMesh, b: &TriangleMesh, n: usize, seed: u64) -> Result<f64, MetricsError> {
    Ok(0.5 * (p2s(a, b, n, seed)? + p2s(b, a, n, seed)?))
}

fn normal_accuracy(pred: &TriangleMesh, gt: &TriangleMesh, n: usize, seed: u64) -> Result<f64, MetricsError> {
    let samples = surface_samples(pred, n, seed)?;
    let index = SurfaceIndex::new(gt)?;
    let cos = par::map(&samples, |(p, f)| pred.face_normal(*f).dot(&gt.face_normal(index.nearest(p).face)));
    Ok(par::sum(&cos) / n as f64)
}

/// Mean of normal accuracy (pred samples against nearest gt normals) and
/// completeness (roles swapped). Both meshes must be consistently oriented.
pub fn normal_consistency(pred: &TriangleMesh, gt: &TriangleMesh, n: usize, seed: u64) -> Result<f64, MetricsError> {
    if !pred.is_consistently_oriented() || !gt.is_consistently_oriented() {
        return Err(MetricsError::Unoriented);
    }
    let v = 0.5 * (normal_accuracy(pred, gt, n, seed)? + normal_accuracy(gt, pred, n, seed)?);
    Ok(v.clamp(-1.0, 1.0))
}

/// Mean per-joint Euclidean error, in cm.
pub fn mpjpe(pred: &[Vec3], gt: &[Vec3]) -> Result<f64, MetricsError> {
    if pred.len() != gt.len() {
        return Err(MetricsError::JointCount(pred.len(), gt.len()));
    }
    if pred.is_empty() {
        return Ok(0.0);
    }
    Ok(pred.iter().zip(gt).map(|(a, b)| (a - b).norm()).sum::<f64>() / pred.len() as f64 * CM)
}

/// Chamfer between the model retargeted to the character's joints at
/// `pose` and the character's own posed mesh at `resolution`, in cm.
pub fn retarget_error(
    model: &AnimatableModel,
    gt: &RiggedCharacter,
    pose: &Pose,
    resolution: usize,
    n: usize,
    seed: u64,
) -> Result<f64, MetricsError> {
    let target = analytic_joints(gt, pose)?;
    let posed = retarget(model, &target)?;
    let reference = character_mesh(gt, pose, resolution)?;
    chamfer(&posed, &reference, n, seed)
}

/// `x` with six significant digits, trailing zeros trimmed.
pub fn format_sig6(x: f64) -> String {
    if x == 0.0 || !x.is_finite() {
        return if x == 0.0 { "0".into() } else { format!("{x}") };
    }
    let sci = format!("{x:.5e}");
    let (mant, exp) = sci.split_once('e').unwrap();
    let e: i32 = exp.parse().unwrap();
    let trim = |s: &str| -> String {
        if s.contains('.') {
            s.trim_end_matches('0').trim_end_matches('.').to_string()
        } else {
            s.to_string()
        }
    };
    if (-4..6).contains(&e) {
        trim(&format!("{x:.*}", (5 - e) as usize))
    } else {
        format!("{}e{e}", trim(mant))
    }
}

/// Requested metrics (absent ones are `None`) plus the sampling settings.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct MetricsReport {
    pub chamfer_cm: Option<f64>,
    pub p2s_cm: Option<f64>,
    pub normal_consistency: Option<f64>,
    pub mpjpe_cm: Option<f64>,
    /// `(frame offset, error)` rows.
    pub retarget_error_cm: Vec<(i64, f64)>,
    pub samples: usize,
    pub seed: u64,
}

const REPORT_HEADER: &str = "metric,frame_offset,value";

impl MetricsReport {
    fn rows(&self) -> Vec<(&'static str, String, String)> {
        let mut rows = Vec::new();
        for (name, v) in [
            ("chamfer_cm", self.chamfer_cm),
            ("p2s_cm", self.p2s_cm),
            ("normal_consistency", self.normal_consistency),
            ("mpjpe_cm", self.mpjpe_cm),
        ] {
            if let Some(v) = v {
                rows.push((name, String::new(), format_sig6(v)));
            }
        }
        for (off, v) in &self.retarget_error_cm {
            rows.push(("retarget_error_cm", format!("{off:+}"), format_sig6(*v)));
        }
        rows.push(("samples", String::new(), self.samples.to_string()));
        rows.push(("seed", String::new(), self.seed.to_string()));
        rows
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<(), MetricsError> {
        let mut s = format!("{REPORT_HEADER}\n");
        for (name, off, v) in self.rows() {
            let _ = writeln!(s, "{name},{off},{v}");
        }
        w.write_all(s.as_bytes())?;
        Ok(())
    }

    /// One `name = value` line per metric, retarget rows as
    /// `retarget_error_cm[+k] = value`.
    pub fn write_text<W: Write>(&self, mut w: W) -> Result<(), MetricsError> {
        let mut s = String::new();
        for (name, off, v) in self.rows() {
            if off.is_empty() {
                let _ = writeln!(s, "{name} = {v}");
            } else {
                let _ = writeln!(s, "{name}[{off}] = {v}");
            }
        }
        w.write_all(s.as_bytes())?;
        Ok(())
    }

    pub fn read_csv<R: BufRead>(r: R) -> Result<Self, MetricsError> {
        let mut lines = r.lines();
        match lines.next() {
            Some(Ok(h)) if h == REPORT_HEADER => {}
            _ => return Err(MetricsError::Format("missing header".into())),
        }
        let mut rep = Self::default();
        for line in lines {
            let line = line?;
            let bad = || MetricsError::Format(format!("bad row {line:?}"));
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 3 {
                return Err(bad());
            }
            let num = || f[2].parse::<f64>().map_err(|_| bad());
            match f[0] {
                "chamfer_cm" => rep.chamfer_cm = Some(num()?),
                "p2s_cm" => rep.p2s_cm = Some(num()?),
                "normal_consistency" => rep.normal_consistency = Some(num()?),
                "mpjpe_cm" => rep.mpjpe_cm = Some(num()?),
                "retarget_error_cm" => rep.retarget_error_cm.push((f[1].parse().map_err(|_| bad())?, num()?)),
                "samples" => rep.samples = f[2].parse().map_err(|_| bad())?,
                "seed" => rep.seed = f[2].parse().map_err(|_| bad())?,
                _ => return Err(bad()),
            }
        }
        Ok(rep)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::character::{build_character, random_pose, Proportions};
    use crate::extraction::ground_truth_model;
    use crate::geom::{RigidTransform, Rotation};
    use proptest::prelude::*;
    use rand::Rng;

    fn sphere(r: f64, c: Vec3, res: usize) -> TriangleMesh {
        let g = crate::geom::VoxelGrid::cube(c, 2.0 * r + 0.4, res, 1).unwrap();
        let mut g = g;
        for lin in 0..g.cell_count() {
            let [i, j, k] = g.cell_coords(lin);
            let d = (g.cell_center(i, j, k) - c).norm() - r;
            g.values_mut()[lin] = 1.0 / (1.0 + (d / 0.01).exp());
        }
        crate::extraction::marching_cubes(&g, 0.5)
    }

    fn triangle(z: f64) -> TriangleMesh {
        let v = vec![Vec3::new(0.0, 0.0, z), Vec3::new(1.0, 0.0, z), Vec3::new(0.0, 1.0, z)];
        TriangleMesh::new(v, vec![[0, 1, 2]]).unwrap()
    }

    /// Barycentric grid search, independent of the region walk.
    fn dense_closest(p: &Vec3, t: &[Vec3; 3]) -> f64 {
        let n = 400;
        let mut best = f64::INFINITY;
        for i in 0..=n {
            for j in 0..=(n - i) {
                let (u, v) = (i as f64 / n as f64, j as f64 / n as f64);
                best = best.min((t[0] * (1.0 - u - v) + t[1] * u + t[2] * v - p).norm());
            }
        }
        best
    }

    #[test]
    fn closest_point_regions() {
        let t = [Vec3::new(0.0, 0.0, 0.0), Vec3::new(1.0, 0.0, 0.0), Vec3::new(0.0, 1.0, 0.0)];
        let cases = [
            (Vec3::new(0.2, 0.2, 0.5), Vec3::new(0.2, 0.2, 0.0)),
            (Vec3::new(-1.0, -1.0, 0.0), t[0]),
            (Vec3::new(2.0, -0.1, 0.0), t[1]),
            (Vec3::new(-0.1, 3.0, 1.0), t[2]),
            (Vec3::new(0.5, -1.0, 0.0), Vec3::new(0.5, 0.0, 0.0)),
            (Vec3::new(-1.0, 0.5, 0.3), Vec3::new(0.0, 0.5, 0.0)),
            (Vec3::new(1.0, 1.0, 0.0), Vec3::new(0.5, 0.5, 0.0)),
        ];
        for (p, want) in cases {
            assert!((closest_point_on_triangle(&p, &t[0], &t[1], &t[2]) - want).norm() < 1e-12, "{p:?}");
        }
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..30 {
            let r = |rng: &mut ChaCha8Rng| Vec3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
            let tri = [r(&mut rng), r(&mut rng), r(&mut rng)];
            let p = r(&mut rng) * 1.5;
            let d = (closest_point_on_triangle(&p, &tri[0], &tri[1], &tri[2]) - p).norm();
            let oracle = dense_closest(&p, &tri);
            assert!(d <= oracle + 1e-12 && oracle - d < 1e-2, "{d} vs {oracle}");
        }
    }

    #[test]
    fn index_matches_brute_force() {
        let m = sphere(0.5, Vec3::zeros(), 24);
        let index = SurfaceIndex::new(&m).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..300 {
            let p = Vec3::new(rng.gen_range(-1.5..1.5), rng.gen_range(-1.5..1.5), rng.gen_range(-1.5..1.5));
            let brute = (0..m.faces().len())
                .map(|f| {
                    let [a, b, c] = m.triangle(f);
                    (closest_point_on_triangle(&p, &a, &b, &c) - p).norm()
                })
                .fold(f64::INFINITY, f64::min);
            assert_eq!(index.nearest(&p).distance, brute);
        }
    }

    #[test]
    fn constant_offset_triangles() {
        let (a, b) = (triangle(0.0), triangle(0.01));
        assert!((chamfer(&a, &b, 500, 1).unwrap() - 1.0).abs() < 1e-9);
        assert!((p2s(&a, &b, 500, 1).unwrap() - 1.0).abs() < 1e-9);
        assert!(chamfer(&a, &TriangleMesh::empty(), 10, 1).is_err());
        assert!(p2s(&a, &b, 0, 1).is_err());
    }

    #[test]
    fn offset_spheres_match_dense_brute_force() {
        let a = sphere(0.5, Vec3::zeros(), 32);
        let b = sphere(0.5, Vec3::new(0.02, 0.0, 0.0), 32);
        let got = chamfer(&a, &b, 2000, 4).unwrap();
        // brute force over every face, 10⁵ samples per direction
        let brute = |x: &TriangleMesh, y: &TriangleMesh| {
            let s = surface_samples(x, 100_000, 77).unwrap();
            let d = par::map(&s, |(p, _)| {
                (0..y.faces().len())
                    .map(|f| {
                        let [a, b, c] = y.triangle(f);
                        (closest_point_on_triangle(p, &a, &b, &c) - p).norm()
                    })
                    .fold(f64::INFINITY, f64::min)
            });
            d.iter().sum::<f64>() / d.len() as f64 * 100.0
        };
        let oracle = 0.5 * (brute(&a, &b) + brute(&b, &a));
        assert!((got - oracle).abs() < 0.05 * oracle, "{got} vs {oracle}");
        let nc = normal_consistency(&a, &b, 2000, 4).unwrap();
        assert!(nc > 0.99 && nc <= 1.0, "{nc}");
    }

    #[test]
    fn identities() {
        let m = sphere(0.4, Vec3::new(0.1, 0.2, 0.3), 20);
        assert!(chamfer(&m, &m, 1000, 2).unwrap() < 1e-6);
        assert!(p2s(&m, &m, 1000, 2).unwrap() < 1e-6);
        assert!((normal_consistency(&m, &m, 1000, 2).unwrap() - 1.0).abs() < 1e-6);
        assert!((normal_consistency(&m.flipped(), &m, 1000, 2).unwrap() + 1.0).abs() < 1e-6);
        let c = chamfer(&m, &sphere(0.45, Vec3::zeros(), 20), 700, 5).unwrap();
        let d1 = p2s(&m, &sphere(0.45, Vec3::zeros(), 20), 700, 5).unwrap();
        let d2 = p2s(&sphere(0.45, Vec3::zeros(), 20), &m, 700, 5).unwrap();
        assert_eq!(c, 0.5 * (d1 + d2));
    }

    #[test]
    fn mpjpe_cases() {
        let a = vec![Vec3::new(0.0, 0.0, 0.0), Vec3::new(1.0, 2.0, 3.0)];
        assert_eq!(mpjpe(&a, &a).unwrap(), 0.0);
        let shifted: Vec<Vec3> = a.iter().map(|p| p + Vec3::new(0.0, 0.01, 0.0)).collect();
        assert!((mpjpe(&a, &shifted).unwrap() - 1.0).abs() < 1e-9);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let r: Vec<Vec3> = (0..7).map(|_| Vec3::new(rng.gen(), rng.gen(), rng.gen())).collect();
        let s: Vec<Vec3> = (0..7).map(|_| Vec3::new(rng.gen(), rng.gen(), rng.gen())).collect();
        let mut hand = 0.0;
        for k in 0..7 {
            let d = [r[k].x - s[k].x, r[k].y - s[k].y, r[k].z - s[k].z];
            hand += (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
        }
        assert!((mpjpe(&r, &s).unwrap() - hand / 7.0 * 100.0).abs() < 1e-12);
        assert!(mpjpe(&r, &s[..3]).is_err());
    }

    #[test]
    fn retarget_error_of_ground_truth_model() {
        let c = build_character(2, &Proportions::default()).unwrap();
        let model = ground_truth_model(&c, 64).unwrap();
        let rest = Pose::identity(15);
        // same mesh up to the IK round trip
        assert!(retarget_error(&model, &c, &rest, 64, 2000, 1).unwrap() < 1e-6);
        let pose = random_pose(c.skeleton(), 0.6, 0.3, &mut ChaCha8Rng::seed_from_u64(4));
        let e = retarget_error(&model, &c, &pose, 64, 2000, 1).unwrap();
        assert!(e < 2.0, "{e}");
    }

    #[test]
    fn report_round_trip_and_format() {
        assert_eq!(format_sig6(1.23456789), "1.23457");
        assert_eq!(format_sig6(0.5), "0.5");
        assert_eq!(format_sig6(123456789.0), "1.23457e8");
        assert_eq!(format_sig6(9.9999999), "10");
        assert_eq!(format_sig6(-0.000012345678), "-1.23457e-5");
        let rep = MetricsReport {
            chamfer_cm: Some(0.6612345678),
            p2s_cm: None,
            normal_consistency: Some(0.91),
            mpjpe_cm: Some(2.051),
            retarget_error_cm: vec![(3, 1.5), (100, 4.25)],
            samples: 10_000,
            seed: 7,
        };
        let mut a = Vec::new();
        rep.write_csv(&mut a).unwrap();
        let text = String::from_utf8(a.clone()).unwrap();
        assert!(text.contains("chamfer_cm,,0.661235\n") && text.contains("retarget_error_cm,+100,4.25\n"));
        let back = MetricsReport::read_csv(&a[..]).unwrap();
        let mut b = Vec::new();
        back.write_csv(&mut b).unwrap();
        assert_eq!(a, b);
        let mut t = Vec::new();
        rep.write_text(&mut t).unwrap();
        assert!(String::from_utf8(t).unwrap().contains("retarget_error_cm[+3] = 1.5\n"));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(8))]
        #[test]
        fn distances_invariant_under_rigid_motion(yaw in -3.0f64..3.0, tx in -2.0f64..2.0, tz in -2.0f64..2.0) {
            let a = sphere(0.4, Vec3::zeros(), 14);
            let b = sphere(0.35, Vec3::new(0.05, 0.0, 0.0), 14);
            let t = RigidTransform::new(Rotation::about_up(yaw), Vec3::new(tx, 0.3, tz));
            let c0 = chamfer(&a, &b, 300, 3).unwrap();
            let c1 = chamfer(&a.transformed(&t), &b.transformed(&t), 300, 3).unwrap();
            prop_assert!((c0 - c1).abs() < 1e-9);
            let n1 = normal_consistency(&a.transformed(&t), &b.transformed(&t), 300, 3).unwrap();
            let n0 = normal_consistency(&a, &b, 300, 3).unwrap();
            // nearest-face ties at shared edges may resolve differently after rounding
            prop_assert!((n0 - n1).abs() < 1e-3, "{} vs {}", n0, n1);
        }
    }
}
