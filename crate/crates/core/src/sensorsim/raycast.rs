use crate::geom::{TriangleMesh, Vec3};
use crate::par;

/// Anything a ray can hit.
pub trait Raycast: Sync {
    /// Distance along unit `dir` to the nearest hit with `t > 0`.
    fn raycast(&self, origin: &Vec3, dir: &Vec3) -> Option<f64>;
}

/// Analytic sphere; exact intersections for tests.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sphere {
    pub center: Vec3,
    pub radius: f64,
}

impl Raycast for Sphere {
    fn raycast(&self, origin: &Vec3, dir: &Vec3) -> Option<f64> {
        let oc = origin - self.center;
        let b = oc.dot(dir);
        let c = oc.norm_squared() - self.radius * self.radius;
        let disc = b * b - c;
        if disc < 0.0 {
            return None;
        }
        let s = disc.sqrt();
        // numerically stable pair of roots
        let q = if b > 0.0 { -b - s } else { -b + s };
        let (t0, t1) = if q == 0.0 { (0.0, 0.0) } else { (q, c / q) };
        let (near, far) = (t0.min(t1), t0.max(t1));
        if near > 0.0 {
            Some(near)
        } else if far > 0.0 {
            Some(far)
        } else {
            None
        }
    }
}

/// Triangle mesh with a uniform-grid acceleration structure.
#[derive(Debug, Clone)]
pub struct MeshIndex<'a> {
    mesh: &'a TriangleMesh,
    lo: Vec3,
    hi: Vec3,
    cell: Vec3,
    res: [usize; 3],
    /// CSR layout: triangles of cell `c` are `items[starts[c]..starts[c + 1]]`.
    starts: Vec<u32>,
    items: Vec<u32>,
}

impl<'a> MeshIndex<'a> {
    pub fn new(mesh: &'a TriangleMesh) -> Self {
        let (lo, hi) = mesh.bounds().unwrap_or((Vec3::zeros(), Vec3::zeros()));
        let pad = (hi - lo).max() * 1e-6 + 1e-9;
        let (lo, hi) = (lo - Vec3::repeat(pad), hi + Vec3::repeat(pad));
        let size = hi - lo;
        // about two triangles per occupied cell
        let target = (mesh.faces().len() as f64 / 2.0).max(1.0);
        let unit = (size.x * size.y * size.z / target).cbrt().max(size.max() / 256.0);
        let res = [0, 1, 2].map(|a| ((size[a] / unit).ceil() as usize).clamp(1, 256));
        let cell = Vec3::new(size.x / res[0] as f64, size.y / res[1] as f64, size.z / res[2] as f64);

        let clampi = |a: usize, x: f64| (((x - lo[a]) / cell[a]).floor().max(0.0) as usize).min(res[a] - 1);
        let ranges: Vec<[std::ops::RangeInclusive<usize>; 3]> = (0..mesh.faces().len())
            .map(|f| {
                let [a, b, c] = mesh.triangle(f);
                let tlo = a.inf(&b).inf(&c);
                let thi = a.sup(&b).sup(&c);
                [0, 1, 2].map(|ax| clampi(ax, tlo[ax])..=clampi(ax, thi[ax]))
            })
            .collect();
        let ncell = res[0] * res[1] * res[2];
        let mut counts = vec![0u32; ncell + 1];
        let lin = |i: usize, j: usize, k: usize| i + res[0] * (j + res[1] * k);
        for r in &ranges {
            for k in r[2].clone() {
                for j in r[1].clone() {
                    for i in r[0].clone() {
                        counts[lin(i, j, k) + 1] += 1;
                    }
                }
            }
        }
        for c in 0..ncell {
            counts[c + 1] += counts[c];
        }
        let starts = counts.clone();
        let mut fill = counts;
        let mut items = vec![0u32; starts[ncell] as usize];
        for (f, r) in ranges.iter().enumerate() {
            for k in r[2].clone() {
                for j in r[1].clone() {
                    for i in r[0].clone() {
                        let c = lin(i, j, k);
                        items[fill[c] as usize] = f as u32;
                        fill[c] += 1;
                    }
                }
            }
        }
        Self { mesh, lo, hi, cell, res, starts, items }
    }

    fn slab(&self, origin: &Vec3, dir: &Vec3) -> Option<(f64, f64)> {
        let (mut t0, mut t1) = (0.0f64, f64::INFINITY);
        for a in 0..3 {
            if dir[a] == 0.0 {
                if origin[a] < self.lo[a] || origin[a] > self.hi[a] {
                    return None;
                }
                continue;
            }
            let inv = 1.0 / dir[a];
            let (mut n, mut f) = ((self.lo[a] - origin[a]) * inv, (self.hi[a] - origin[a]) * inv);
            if n > f {
                std::mem::swap(&mut n, &mut f);
            }
            t0 = t0.max(n);
            t1 = t1.min(f);
        }
        (t0 <= t1).then_some((t0, t1))
    }
}

impl Raycast for MeshIndex<'_> {
    fn raycast(&self, origin: &Vec3, dir: &Vec3) -> Option<f64> {
        if self.mesh.faces().is_empty() {
            return None;
        }
        let (t_enter, t_exit) = self.slab(origin, dir)?;
        // 3D-DDA from the entry point
        let p = origin + dir * t_enter;
        let mut idx = [0usize; 3];
        let mut step = [0isize; 3];
        let mut t_next = [f64::INFINITY; 3];
        let mut t_delta = [f64::INFINITY; 3];
        for a in 0..3 {
            let c = (((p[a] - self.lo[a]) / self.cell[a]).floor().max(0.0) as usize).min(self.res[a] - 1);
            idx[a] = c;
            if dir[a] > 0.0 {
                step[a] = 1;
                t_next[a] = t_enter + ((self.lo[a] + (c + 1) as f64 * self.cell[a]) - p[a]) / dir[a];
                t_delta[a] = self.cell[a] / dir[a];
            } else if dir[a] < 0.0 {
                step[a] = -1;
                t_next[a] = t_enter + ((self.lo[a] + c as f64 * self.cell[a]) - p[a]) / dir[a];
                t_delta[a] = -self.cell[a] / dir[a];
            }
        }
        let mut best = f64::INFINITY;
        loop {
            let c = idx[0] + self.res[0] * (idx[1] + self.res[1] * idx[2]);
            for &f in &self.items[self.starts[c] as usize..self.starts[c + 1] as usize] {
                let tri = self.mesh.triangle(f as usize);
                if let Some(t) = ray_triangle(origin, dir, &tri) {
                    best = best.min(t);
                }
            }
            let a = if t_next[0] <= t_next[1] && t_next[0] <= t_next[2] {
                0
            } else if t_next[1] <= t_next[2] {
                1
            } else {
                2
            };
            // hits inside this cell cannot be beaten by later cells
            if best <= t_next[a] || t_next[a] > t_exit {
                break;
            }
            let n = idx[a] as isize + step[a];
            if n < 0 || n >= self.res[a] as isize {
                break;
            }
            idx[a] = n as usize;
            t_next[a] += t_delta[a];
        }
        best.is_finite().then_some(best)
    }
}

/// Watertight ray/triangle test (shear to ray space, signed edge
/// functions with shared-edge consistency). Returns `t > 0`.
pub fn ray_triangle(origin: &Vec3, dir: &Vec3, tri: &[Vec3; 3]) -> Option<f64> {
    let kz = dir.iamax();
    let mut kx = (kz + 1) % 3;
    let mut ky = (kx + 1) % 3;
    if dir[kz] < 0.0 {
        std::mem::swap(&mut kx, &mut ky);
    }
    let sx = dir[kx] / dir[kz];
    let sy = dir[ky] / dir[kz];
    let sz = 1.0 / dir[kz];
    let [a, b, c] = tri.map(|v| v - origin);
    let ax = a[kx] - sx * a[kz];
    let ay = a[ky] - sy * a[kz];
    let bx = b[kx] - sx * b[kz];
    let by = b[ky] - sy * b[kz];
    let cx = c[kx] - sx * c[kz];
    let cy = c[ky] - sy * c[kz];
    let u = cx * by - cy * bx;
    let v = ax * cy - ay * cx;
    let w = bx * ay - by * ax;
    if (u < 0.0 || v < 0.0 || w < 0.0) && (u > 0.0 || v > 0.0 || w > 0.0) {
        return None;
    }
    let det = u + v + w;
    if det == 0.0 {
        return None;
    }
    let t = (u * sz * a[kz] + v * sz * b[kz] + w * sz * c[kz]) / det;
    (t > 0.0).then_some(t)
}

/// Casts every ray in parallel; results are in ray order.
pub fn cast_all(target: &dyn Raycast, origin: &Vec3, dirs: &[Vec3]) -> Vec<Option<f64>> {
    par::map(dirs, |d| target.raycast(origin, d))
}
