use std::collections::HashMap;
use std::io::{BufRead, Write};

use rand::Rng;

use super::{is_finite, GeomError, RigidTransform, Vec3};

/// Indexed triangle mesh. Faces are counter-clockwise when viewed from the
/// outside, so face normals point outwards.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TriangleMesh {
    vertices: Vec<Vec3>,
    faces: Vec<[u32; 3]>,
    normals: Option<Vec<Vec3>>,
}

/// Faces with area below this are dropped at construction.
const DEGENERATE_AREA: f64 = 1e-12;

impl TriangleMesh {
    /// Validates indices and drops degenerate faces (repeated indices or
    /// area below `1e-12`).
    pub fn new(vertices: Vec<Vec3>, faces: Vec<[u32; 3]>) -> Result<Self, GeomError> {
        let count = vertices.len();
        for (fi, f) in faces.iter().enumerate() {
            for &index in f {
                if index as usize >= count {
                    return Err(GeomError::FaceIndexOutOfRange { face: fi, index, count });
                }
            }
        }
        let mut mesh = Self { vertices, faces, normals: None };
        mesh.faces.retain(|f| {
            f[0] != f[1] && f[1] != f[2] && f[0] != f[2] && {
                let [a, b, c] = f.map(|i| mesh.vertices[i as usize]);
                0.5 * (b - a).cross(&(c - a)).norm() >= DEGENERATE_AREA
            }
        });
        Ok(mesh)
    }

    pub fn empty() -> Self {
        Self::default()
    }

    pub fn with_normals(mut self, normals: Vec<Vec3>) -> Self {
        assert_eq!(normals.len(), self.vertices.len());
        self.normals = Some(normals);
        self
    }

    pub fn vertices(&self) -> &[Vec3] {
        &self.vertices
    }

    pub fn faces(&self) -> &[[u32; 3]] {
        &self.faces
    }

    pub fn normals(&self) -> Option<&[Vec3]> {
        self.normals.as_deref()
    }

    pub fn is_empty(&self) -> bool {
        self.faces.is_empty()
    }

    pub fn triangle(&self, f: usize) -> [Vec3; 3] {
        self.faces[f].map(|i| self.vertices[i as usize])
    }

    /// Unit face normal from the winding order.
    pub fn face_normal(&self, f: usize) -> Vec3 {
        let [a, b, c] = self.triangle(f);
        (b - a).cross(&(c - a)).normalize()
    }

    pub fn face_area(&self, f: usize) -> f64 {
        let [a, b, c] = self.triangle(f);
        0.5 * (b - a).cross(&(c - a)).norm()
    }

    pub fn area(&self) -> f64 {
        (0..self.faces.len()).map(|f| self.face_area(f)).sum()
    }

    pub fn bounds(&self) -> Option<(Vec3, Vec3)> {
        let first = *self.vertices.first()?;
        Some(self.vertices.iter().fold((first, first), |(lo, hi), v| (lo.inf(v), hi.sup(v))))
    }

    pub fn all_finite(&self) -> bool {
        self.vertices.iter().all(is_finite)
    }

    /// Every undirected edge is shared by exactly two faces.
    pub fn is_watertight(&self) -> bool {
        let mut counts: HashMap<(u32, u32), u32> = HashMap::new();
        for f in &self.faces {
            for e in 0..3 {
                let (a, b) = (f[e], f[(e + 1) % 3]);
                *counts.entry((a.min(b), a.max(b))).or_default() += 1;
            }
        }
        !self.faces.is_empty() && counts.values().all(|&c| c == 2)
    }

    /// No directed edge is used by more than one face, i.e. neighbouring
    /// faces agree on winding.
    pub fn is_consistently_oriented(&self) -> bool {
        let mut seen: HashMap<(u32, u32), ()> = HashMap::new();
        for f in &self.faces {
            for e in 0..3 {
                if seen.insert((f[e], f[(e + 1) % 3]), ()).is_some() {
                    return false;
                }
            }
        }
        true
    }

    /// Signed enclosed volume (positive for outward-facing closed meshes).
    pub fn signed_volume(&self) -> f64 {
        (0..self.faces.len())
            .map(|f| {
                let [a, b, c] = self.triangle(f);
                a.dot(&b.cross(&c)) / 6.0
            })
            .sum()
    }

    pub fn transformed(&self, t: &RigidTransform) -> Self {
        Self {
            vertices: self.vertices.iter().map(|v| t.apply(v)).collect(),
            faces: self.faces.clone(),
            normals: self.normals.as_ref().map(|n| n.iter().map(|v| t.apply_vector(v)).collect()),
        }
    }

    /// Same faces, new vertex positions.
    pub fn with_vertices(&self, vertices: Vec<Vec3>) -> Self {
        assert_eq!(vertices.len(), self.vertices.len());
        Self { vertices, faces: self.faces.clone(), normals: None }
    }

    /// Reverses every face's winding.
    pub fn flipped(&self) -> Self {
        Self {
            vertices: self.vertices.clone(),
            faces: self.faces.iter().map(|f| [f[0], f[2], f[1]]).collect(),
            normals: self.normals.as_ref().map(|n| n.iter().map(|v| -v).collect()),
        }
    }
}

/// Area-uniform sampling of a mesh surface.
#[derive(Debug, Clone)]
pub struct SurfaceSampler<'a> {
    mesh: &'a TriangleMesh,
    cumulative: Vec<f64>,
}

impl<'a> SurfaceSampler<'a> {
    /// `None` for meshes without area.
    pub fn new(mesh: &'a TriangleMesh) -> Option<Self> {
        let mut total = 0.0;
        let cumulative: Vec<f64> = (0..mesh.faces().len())
            .map(|f| {
                total += mesh.face_area(f);
                total
            })
            .collect();
        (total > 0.0).then_some(Self { mesh, cumulative })
    }

    /// A point and the face it lies on.
    pub fn sample<R: Rng>(&self, rng: &mut R) -> (Vec3, usize) {
        let total = *self.cumulative.last().unwrap();
        let x = rng.gen::<f64>() * total;
        let f = self.cumulative.partition_point(|&c| c <= x).min(self.cumulative.len() - 1);
        let (r1, r2): (f64, f64) = (rng.gen(), rng.gen());
        let s = r1.sqrt();
        let [a, b, c] = self.mesh.triangle(f);
        (a * (1.0 - s) + b * (s * (1.0 - r2)) + c * (s * r2), f)
    }
}

/// Writes `v x y z` and 1-based `f i j k` lines. Coordinates use the
/// shortest round-tripping decimal form.
pub fn write_obj<W: Write>(mesh: &TriangleMesh, mut w: W) -> Result<(), GeomError> {
    for v in &mesh.vertices {
        writeln!(w, "v {} {} {}", v.x, v.y, v.z)?;
    }
    if let Some(normals) = &mesh.normals {
        for n in normals {
            writeln!(w, "vn {} {} {}", n.x, n.y, n.z)?;
        }
        for f in &mesh.faces {
            writeln!(w, "f {0}//{0} {1}//{1} {2}//{2}", f[0] + 1, f[1] + 1, f[2] + 1)?;
        }
    } else {
        for f in &mesh.faces {
            writeln!(w, "f {} {} {}", f[0] + 1, f[1] + 1, f[2] + 1)?;
        }
    }
    Ok(())
}

pub fn read_obj<R: BufRead>(r: R) -> Result<TriangleMesh, GeomError> {
    let mut vertices = Vec::new();
    let mut normals = Vec::new();
    let mut faces = Vec::new();
    for (n, line) in r.lines().enumerate() {
        let line = line?;
        let err = |msg: &str| GeomError::Obj { line: n + 1, msg: msg.to_string() };
        let mut it = line.split_whitespace();
        match it.next() {
            Some("v") | Some("vn") => {
                let xyz: Vec<f64> = it
                    .take(3)
                    .map(|s| s.parse::<f64>())
                    .collect::<Result<_, _>>()
                    .map_err(|_| err("bad coordinate"))?;
                if xyz.len() != 3 {
                    return Err(err("expected 3 coordinates"));
                }
                let v = Vec3::new(xyz[0], xyz[1], xyz[2]);
                if line.starts_with("vn") {
                    normals.push(v);
                } else {
                    vertices.push(v);
                }
            }
            Some("f") => {
                let idx: Vec<u32> = it
                    .map(|s| s.split('/').next().unwrap_or("").parse::<u32>())
                    .collect::<Result<_, _>>()
                    .map_err(|_| err("bad face index"))?;
                if idx.len() != 3 || idx.contains(&0) {
                    return Err(err("only 1-based triangles are supported"));
                }
                faces.push([idx[0] - 1, idx[1] - 1, idx[2] - 1]);
            }
            _ => {}
        }
    }
    let mesh = TriangleMesh::new(vertices, faces)?;
    if normals.is_empty() {
        Ok(mesh)
    } else if normals.len() == mesh.vertices.len() {
        Ok(mesh.with_normals(normals))
    } else {
        Err(GeomError::Obj { line: 0, msg: "normal count differs from vertex count".into() })
    }
}
