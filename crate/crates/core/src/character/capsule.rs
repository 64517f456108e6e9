use serde::{Deserialize, Serialize};

use crate::geom::Vec3;

/// Tapered capsule ("round cone") on the bone from `joint` to `child`:
/// the convex hull of a sphere of radius `radius_head` at the joint and one
/// of radius `radius_tail` at the child.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Capsule {
    pub joint: usize,
    pub child: usize,
    pub radius_head: f64,
    pub radius_tail: f64,
}

impl Capsule {
    pub fn uniform(joint: usize, child: usize, radius: f64) -> Self {
        Self { joint, child, radius_head: radius, radius_tail: radius }
    }
}

/// Exact signed distance from `p` to the round cone with sphere centres
/// `a`, `b` and radii `ra`, `rb`. Requires `|ra − rb| < |b − a|`.
pub fn round_cone_sdf(p: &Vec3, a: &Vec3, b: &Vec3, ra: f64, rb: f64) -> f64 {
    let ba = b - a;
    let l2 = ba.norm_squared();
    let rr = ra - rb;
    let a2 = l2 - rr * rr;
    let il2 = 1.0 / l2;

    let pa = p - a;
    let y = pa.dot(&ba);
    let z = y - l2;
    let x2 = (pa * l2 - ba * y).norm_squared();
    let y2 = y * y * l2;
    let z2 = z * z * l2;

    // Which sphere (or the cone side) is closest, decided in squared form.
    let k = rr.signum() * rr * rr * x2;
    if z.signum() * a2 * z2 > k {
        return (x2 + z2).sqrt() * il2 - rb;
    }
    if y.signum() * a2 * y2 < k {
        return (x2 + y2).sqrt() * il2 - ra;
    }
    ((x2 * a2 * il2).sqrt() + y * rr) * il2 - ra
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Distance to the union of spheres swept along the segment, by dense
    /// sampling of the sweep parameter.
    fn swept_sphere_distance(p: &Vec3, a: &Vec3, b: &Vec3, ra: f64, rb: f64) -> f64 {
        let n = 20_000;
        (0..=n)
            .map(|i| {
                let t = i as f64 / n as f64;
                (p - (a + (b - a) * t)).norm() - (ra + (rb - ra) * t)
            })
            .fold(f64::INFINITY, f64::min)
    }

    #[test]
    fn uniform_capsule_side_and_caps() {
        let a = Vec3::zeros();
        let b = Vec3::new(0.0, 0.0, 1.0);
        let d = round_cone_sdf(&Vec3::new(0.3, 0.0, 0.5), &a, &b, 0.1, 0.1);
        assert!((d - 0.2).abs() < 1e-12);
        let d = round_cone_sdf(&Vec3::new(0.0, 0.0, 1.5), &a, &b, 0.1, 0.1);
        assert!((d - 0.4).abs() < 1e-12);
        let d = round_cone_sdf(&Vec3::new(0.0, 0.0, 0.5), &a, &b, 0.1, 0.1);
        assert!((d + 0.1).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn outside_distance_matches_swept_spheres(
            px in -1.0f64..1.0, py in -1.0f64..1.0, pz in -1.0f64..2.0,
            ra in 0.05f64..0.3, rb in 0.05f64..0.3, bx in -0.3f64..0.3,
        ) {
            let a = Vec3::zeros();
            let b = Vec3::new(bx, 0.1, 1.0);
            let p = Vec3::new(px, py, pz);
            let exact = round_cone_sdf(&p, &a, &b, ra, rb);
            let brute = swept_sphere_distance(&p, &a, &b, ra, rb);
            if brute > 0.0 {
                prop_assert!((exact - brute).abs() < 1e-6, "exact {} brute {}", exact, brute);
            } else {
                prop_assert!(exact <= 1e-9);
            }
        }
    }
}
