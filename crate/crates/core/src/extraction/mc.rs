//! Marching cubes over cell-centred samples with one cell of zero padding.
//!
//! The triangle table is derived at first use from per-face contour
//! segments rather than copied from a reference table. Every face of the
//! cube is contoured on its own: the crossing segments separate inside
//! corners (value ≥ iso) from outside ones, and on ambiguous faces (two
//! diagonal inside corners) each inside corner is cut off separately.
//! Because the two cubes sharing a face see the same four values they build
//! the same segments, which makes the output watertight.

use std::sync::OnceLock;

use crate::geom::{TriangleMesh, Vec3, VoxelGrid};
use crate::par;

/// Crossings are kept at least this far (in edge parameter) from a corner,
/// so no two vertices coincide and no face collapses when samples sit
/// exactly on the iso level.
const MARGIN: f64 = 1e-3;

/// Edge `e` joins corner `EDGES[e].0` to that corner plus one step along
/// axis `EDGES[e].1`. Corner `c` sits at `(c & 1, c >> 1 & 1, c >> 2 & 1)`.
const EDGES: [(usize, usize); 12] = [
    (0, 0), (2, 0), (4, 0), (6, 0),
    (0, 1), (1, 1), (4, 1), (5, 1),
    (0, 2), (1, 2), (2, 2), (3, 2),
];

fn edge_between(a: usize, b: usize) -> usize {
    let (lo, hi) = (a.min(b), a.max(b));
    let axis = (hi ^ lo).trailing_zeros() as usize;
    EDGES.iter().position(|&e| e == (lo, axis)).expect("corners share an edge")
}

/// Corners of each face, counter-clockwise seen from outside the cube.
fn faces() -> [[usize; 4]; 6] {
    let mut out = [[0; 4]; 6];
    for axis in 0..3 {
        let (u, v) = ((axis + 1) % 3, (axis + 2) % 3);
        for side in 0..2 {
            let corner = |du: usize, dv: usize| (side << axis) | (du << u) | (dv << v);
            let mut ring = [corner(0, 0), corner(1, 0), corner(1, 1), corner(0, 1)];
            if side == 0 {
                ring.reverse();
            }
            out[axis * 2 + side] = ring;
        }
    }
    out
}

/// Triangulation of one corner case. Triangle indices below 12 are cube
/// edges; `12 + c` is the centroid of the edge loop `centres[c]`.
#[derive(Debug, Default)]
struct Case {
    tris: Vec<[u8; 3]>,
    centres: Vec<Vec<u8>>,
}

fn table() -> &'static [Case] {
    static TABLE: OnceLock<Vec<Case>> = OnceLock::new();
    TABLE.get_or_init(|| {
        let faces = faces();
        let mut cases: Vec<Case> = (0..256).map(|case| triangulate_case(case, &faces)).collect();
        // Orient so the lone-corner case faces away from its inside corner.
        let [a, b, c] = cases[1].tris[0].map(|e| edge_midpoint(e as usize));
        if (b - a).cross(&(c - a)).dot(&Vec3::repeat(1.0)) < 0.0 {
            for case in &mut cases {
                case.tris.iter_mut().for_each(|t| t.swap(1, 2));
            }
        }
        cases
    })
}

/// Whether two cube edges lie on a common face.
fn share_face(a: usize, b: usize) -> bool {
    let on = |e: usize| {
        let (c, axis) = EDGES[e];
        (0..3).filter(move |&f| f != axis).map(move |f| (f, c >> f & 1))
    };
    on(a).any(|fa| on(b).any(|fb| fa == fb))
}

fn edge_midpoint(e: usize) -> Vec3 {
    let (c, axis) = EDGES[e];
    let mut p = Vec3::new((c & 1) as f64, (c >> 1 & 1) as f64, (c >> 2 & 1) as f64);
    p[axis] += 0.5;
    p
}

fn triangulate_case(case: usize, faces: &[[usize; 4]; 6]) -> Case {
    let inside = |c: usize| case >> c & 1 == 1;
    // next[e] = edge where the segment starting at e ends
    let mut next = [usize::MAX; 12];
    for ring in faces {
        let ins = ring.map(inside);
        let count = ins.iter().filter(|&&x| x).count();
        if count == 0 || count == 4 {
            continue;
        }
        let diagonal = count == 2 && ins[0] == ins[2];
        for b in 0..4 {
            // b ends an inside run when the next corner is outside
            if !ins[b] || ins[(b + 1) % 4] {
                continue;
            }
            let mut a = b;
            if !diagonal {
                while ins[(a + 3) % 4] {
                    a = (a + 3) % 4;
                }
            }
            let start = edge_between(ring[b], ring[(b + 1) % 4]);
            let end = edge_between(ring[(a + 3) % 4], ring[a]);
            debug_assert_eq!(next[start], usize::MAX);
            next[start] = end;
        }
    }
    let mut out = Case::default();
    let mut seen = [false; 12];
    for first in 0..12 {
        if next[first] == usize::MAX || seen[first] {
            continue;
        }
        let mut ring = vec![first];
        seen[first] = true;
        let mut e = next[first];
        while e != first {
            seen[e] = true;
            ring.push(e);
            e = next[e];
        }
        // Fan from an apex whose diagonals stay off the cube faces; a
        // diagonal on a face could be emitted by the neighbouring cube too.
        let n = ring.len();
        let apex = (0..n).find(|&a| (2..n - 1).all(|i| !share_face(ring[a], ring[(a + i) % n])));
        match apex {
            Some(a) => {
                for i in 1..n - 1 {
                    out.tris.push([ring[a] as u8, ring[(a + i) % n] as u8, ring[(a + i + 1) % n] as u8]);
                }
            }
            None => {
                let centre = 12 + out.centres.len() as u8;
                for i in 0..n {
                    out.tris.push([centre, ring[i] as u8, ring[(i + 1) % n] as u8]);
                }
                out.centres.push(ring.iter().map(|&e| e as u8).collect());
            }
        }
    }
    out
}

/// Iso-surface of channel 0 of `grid` at level `iso`.
///
/// Samples sit at cell centres and the grid is padded with one layer of
/// zeros, so any surface closes at the boundary. Values equal to `iso` count
/// as inside. Vertices are linear interpolants along crossing edges,
/// ordered by edge index; faces are ordered by cube index and wound
/// counter-clockwise seen from the outside (lower values).
pub fn marching_cubes(grid: &VoxelGrid, iso: f64) -> TriangleMesh {
    let [nx, ny, nz] = grid.resolution();
    let dims = [nx + 2, ny + 2, nz + 2];
    let lin = |i: usize, j: usize, k: usize| i + dims[0] * (j + dims[1] * k);
    let channels = grid.channels();
    let values = grid.values();
    let padded: Vec<f64> = {
        let mut v = vec![0.0; dims[0] * dims[1] * dims[2]];
        for k in 0..nz {
            for j in 0..ny {
                for i in 0..nx {
                    v[lin(i + 1, j + 1, k + 1)] = values[grid.linear_index(i, j, k) * channels];
                }
            }
        }
        v
    };
    let inside = |l: usize| padded[l] >= iso;
    let origin = grid.origin();
    let cell = grid.cell_size();
    let position = |i: usize, j: usize, k: usize| {
        origin + Vec3::new(i as f64 - 0.5, j as f64 - 0.5, k as f64 - 0.5) * cell
    };
    let strides = [1, dims[0], dims[0] * dims[1]];

    // (edge key, vertex position) for every crossing edge, in key order
    let slabs = par::map_range(dims[2], |k| {
        let mut out = Vec::new();
        for j in 0..dims[1] {
            for i in 0..dims[0] {
                let l = lin(i, j, k);
                let ijk = [i, j, k];
                for axis in 0..3 {
                    if ijk[axis] + 1 >= dims[axis] {
                        continue;
                    }
                    let m = l + strides[axis];
                    if inside(l) == inside(m) {
                        continue;
                    }
                    let (va, vb) = (padded[l], padded[m]);
                    let t = ((iso - va) / (vb - va)).clamp(MARGIN, 1.0 - MARGIN);
                    let mut p = position(i, j, k);
                    p[axis] += t * cell;
                    let record = ((l * 4 + axis) as u64, p);
                    out.push(record);
                }
            }
        }
        out
    });
    let edges: Vec<(u64, Vec3)> = slabs.concat();
    if edges.is_empty() {
        return TriangleMesh::empty();
    }
    let lookup = |key: u64| -> u32 {
        edges.binary_search_by_key(&key, |&(e, _)| e).expect("crossing edge recorded") as u32
    };

    let table = table();
    // Centroid vertices are numbered per slab from the top of the index
    // range and renumbered after the slabs are joined.
    let slabs = par::map_range(dims[2] - 1, |k| {
        let mut faces = Vec::new();
        let mut centres: Vec<Vec3> = Vec::new();
        for j in 0..dims[1] - 1 {
            for i in 0..dims[0] - 1 {
                let base = lin(i, j, k);
                let corner = |c: usize| base + (c & 1) * strides[0] + (c >> 1 & 1) * strides[1] + (c >> 2 & 1) * strides[2];
                let case = &table[(0..8).fold(0, |acc, c| acc | (inside(corner(c)) as usize) << c)];
                let vertex = |e: u8| {
                    let (c, axis) = EDGES[e as usize];
                    lookup((corner(c) * 4 + axis) as u64)
                };
                let first_centre = centres.len();
                for ring in &case.centres {
                    let sum = ring.iter().fold(Vec3::zeros(), |acc, &e| acc + edges[vertex(e) as usize].1);
                    centres.push(sum / ring.len() as f64);
                }
                for tri in &case.tris {
                    faces.push(tri.map(|e| {
                        if e < 12 {
                            vertex(e)
                        } else {
                            u32::MAX - (first_centre + (e - 12) as usize) as u32
                        }
                    }));
                }
            }
        }
        (faces, centres)
    });
    let mut vertices: Vec<Vec3> = edges.iter().map(|&(_, p)| p).collect();
    let mut faces = Vec::new();
    for (slab_faces, centres) in slabs {
        let offset = vertices.len() as u32;
        faces.extend(slab_faces.into_iter().map(|f| f.map(|v| if v >= offset { offset + (u32::MAX - v) } else { v })));
        vertices.extend(centres);
    }
    TriangleMesh::new(vertices, faces).expect("indices come from the vertex table")
}
