use nalgebra::Matrix3;
use serde::{Deserialize, Serialize};

use super::{GeomError, RigidTransform, Rotation, Vec3};

/// Pinhole camera. Camera space is x right, y down, z forward; pixel
/// `(u, v)` has its centre at integer coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct Camera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    /// World → camera.
    pub extrinsic: RigidTransform,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projection {
    pub uv: [f64; 2],
    pub depth: f64,
}

impl Camera {
    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        width: usize,
        height: usize,
        extrinsic: RigidTransform,
    ) -> Result<Self, GeomError> {
        if !(fx > 0.0 && fy > 0.0) {
            return Err(GeomError::InvalidCamera(format!("focal lengths {fx}, {fy}")));
        }
        if width == 0 || height == 0 {
            return Err(GeomError::InvalidCamera(format!("image size {width}x{height}")));
        }
        Rotation::from_matrix(*extrinsic.rotation.matrix())
            .map_err(|e| GeomError::InvalidCamera(e.to_string()))?;
        Ok(Self { fx, fy, cx, cy, width, height, extrinsic })
    }

    /// Camera at `eye` looking at `target`, with `up` pointing to the top of
    /// the image.
    pub fn look_at(
        eye: Vec3,
        target: Vec3,
        up: Vec3,
        focal: f64,
        width: usize,
        height: usize,
    ) -> Result<Self, GeomError> {
        let forward = (target - eye).normalize();
        let right = forward.cross(&up);
        if right.norm() < 1e-12 {
            return Err(GeomError::InvalidCamera("view direction parallel to up".into()));
        }
        let right = right.normalize();
        let down = forward.cross(&right);
        let r = Matrix3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
        let rotation = Rotation::from_matrix(r)?;
        let extrinsic = RigidTransform::new(rotation, -rotation.apply(&eye));
        let cx = (width as f64 - 1.0) * 0.5;
        let cy = (height as f64 - 1.0) * 0.5;
        Self::new(focal, focal, cx, cy, width, height, extrinsic)
    }

    pub fn center(&self) -> Vec3 {
        self.extrinsic.inverse().translation
    }

    pub fn to_camera(&self, p: &Vec3) -> Vec3 {
        self.extrinsic.apply(p)
    }

    /// World-space origin and unit direction of the ray through pixel `uv`.
    pub fn pixel_ray(&self, uv: [f64; 2]) -> (Vec3, Vec3) {
        let d = Vec3::new((uv[0] - self.cx) / self.fx, (uv[1] - self.cy) / self.fy, 1.0);
        let dir = self.extrinsic.rotation.inverse().apply(&d).normalize();
        (self.center(), dir)
    }

    /// Projects a camera-space point.
    pub fn project_camera_space(&self, q: &Vec3) -> Result<Projection, GeomError> {
        if !(q.z > 0.0) {
            return Err(GeomError::BehindCamera(q.z));
        }
        Ok(Projection {
            uv: [self.fx * q.x / q.z + self.cx, self.fy * q.y / q.z + self.cy],
            depth: q.z,
        })
    }

    pub fn to_doc(&self) -> CameraDoc {
        let m = self.extrinsic.rotation.matrix();
        CameraDoc {
            fx: self.fx,
            fy: self.fy,
            cx: self.cx,
            cy: self.cy,
            width: self.width,
            height: self.height,
            rotation: [0, 1, 2].map(|r| [m[(r, 0)], m[(r, 1)], m[(r, 2)]]),
            translation: self.extrinsic.translation.into(),
        }
    }

    pub fn from_doc(doc: &CameraDoc) -> Result<Self, GeomError> {
        let r = doc.rotation;
        let m = Matrix3::new(r[0][0], r[0][1], r[0][2], r[1][0], r[1][1], r[1][2], r[2][0], r[2][1], r[2][2]);
        let extrinsic = RigidTransform::new(Rotation::from_matrix(m)?, Vec3::from(doc.translation));
        Self::new(doc.fx, doc.fy, doc.cx, doc.cy, doc.width, doc.height, extrinsic)
    }
}

/// On-disk camera description (JSON document).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraDoc {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    /// World → camera rotation matrix, row major.
    pub rotation: [[f64; 3]; 3],
    pub translation: [f64; 3],
}

/// `uv = (fx·X/Z + cx, fy·Y/Z + cy)`, `depth = Z`, in camera coordinates.
pub fn perspective_project(p: &Vec3, cam: &Camera) -> Result<Projection, GeomError> {
    cam.project_camera_space(&cam.to_camera(p))
}
