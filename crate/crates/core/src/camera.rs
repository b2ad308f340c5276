//! Pinhole cameras with a world-to-camera rigid extrinsic.
//!
//! Pixel `(x, y)` has its center at integer coordinates; depth is the
//! camera-frame `z`, positive in front of the camera.

use nalgebra::{Matrix2x3, Matrix3, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rotation::is_rotation;

/// Points closer than this to the image plane count as behind the camera.
pub const MIN_DEPTH: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "CameraRaw", into = "CameraRaw")]
pub struct CameraModel {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    /// World-to-camera rotation.
    pub rotation: Matrix3<f64>,
    /// World-to-camera translation.
    pub translation: Vector3<f64>,
    pub width: usize,
    pub height: usize,
    pub frame_index: usize,
}

/// Result of projecting a point that lies in front of the camera.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projection {
    pub pixel: Vector2<f64>,
    pub depth: f64,
}

impl CameraModel {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        rotation: Matrix3<f64>,
        translation: Vector3<f64>,
        width: usize,
        height: usize,
        frame_index: usize,
    ) -> Result<Self> {
        let cam = Self {
            fx,
            fy,
            cx,
            cy,
            rotation,
            translation,
            width,
            height,
            frame_index,
        };
        cam.validate()?;
        Ok(cam)
    }

    /// Camera at `eye` looking at `target`, with `up` roughly vertical in the
    /// image (image y points down).
    #[allow(clippy::too_many_arguments)]
    pub fn look_at(
        eye: Vector3<f64>,
        target: Vector3<f64>,
        up: Vector3<f64>,
        focal: f64,
        width: usize,
        height: usize,
        frame_index: usize,
    ) -> Result<Self> {
        let forward = (target - eye).normalize();
        let right = forward.cross(&up).normalize();
        let down = forward.cross(&right);
        // rows are the camera axes expressed in world coordinates
        let rotation = Matrix3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
        let translation = -(rotation * eye);
        Self::new(
            focal,
            focal,
            (width as f64 - 1.0) / 2.0,
            (height as f64 - 1.0) / 2.0,
            rotation,
            translation,
            width,
            height,
            frame_index,
        )
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidCamera(m));
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return bad(format!("focal lengths must be positive ({}, {})", self.fx, self.fy));
        }
        if self.width == 0 || self.height == 0 {
            return bad("image size must be non-zero".into());
        }
        if !(self.cx > 0.0 && self.cx < self.width as f64 && self.cy > 0.0 && self.cy < self.height as f64) {
            return bad(format!("principal point ({}, {}) outside image", self.cx, self.cy));
        }
        if !is_rotation(&self.rotation, 1e-6) {
            return bad("extrinsic rotation is not orthonormal with determinant +1".into());
        }
        if !self.translation.iter().all(|v| v.is_finite()) {
            return bad("non-finite translation".into());
        }
        Ok(())
    }

    pub fn to_camera(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    pub fn to_world(&self, p_cam: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.transpose() * (p_cam - self.translation)
    }

    /// Camera center in world coordinates.
    pub fn center(&self) -> Vector3<f64> {
        -(self.rotation.transpose() * self.translation)
    }

    /// Projects a camera-frame point; `None` when it is behind the camera.
    pub fn project_camera(&self, pc: &Vector3<f64>) -> Option<Projection> {
        if pc.z <= MIN_DEPTH {
            return None;
        }
        Some(Projection {
            pixel: Vector2::new(self.fx * pc.x / pc.z + self.cx, self.fy * pc.y / pc.z + self.cy),
            depth: pc.z,
        })
    }

    /// Projects a world point; `None` when it is behind the camera.
    pub fn project_point(&self, p: &Vector3<f64>) -> Option<Projection> {
        self.project_camera(&self.to_camera(p))
    }

    /// Jacobian of the pixel coordinates with respect to the camera-frame point.
    pub fn projection_jacobian(&self, pc: &Vector3<f64>) -> Matrix2x3<f64> {
        let iz = 1.0 / pc.z;
        Matrix2x3::new(
            self.fx * iz,
            0.0,
            -self.fx * pc.x * iz * iz,
            0.0,
            self.fy * iz,
            -self.fy * pc.y * iz * iz,
        )
    }

    /// Back-projects a pixel at camera-frame depth `depth` into world space.
    pub fn unproject(&self, pixel: &Vector2<f64>, depth: f64) -> Vector3<f64> {
        let pc = Vector3::new(
            (pixel.x - self.cx) / self.fx * depth,
            (pixel.y - self.cy) / self.fy * depth,
            depth,
        );
        self.to_world(&pc)
    }

    /// Whether a continuous pixel position lies on the sampled pixel grid.
    pub fn in_image(&self, pixel: &Vector2<f64>) -> bool {
        pixel.x >= 0.0 && pixel.y >= 0.0 && pixel.x <= (self.width - 1) as f64 && pixel.y <= (self.height - 1) as f64
    }
}

#[derive(Serialize, Deserialize)]
struct CameraRaw {
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
    /// Row-major world-to-camera rotation.
    rotation: [[f64; 3]; 3],
    translation: [f64; 3],
    width: usize,
    height: usize,
    frame_index: usize,
}

impl TryFrom<CameraRaw> for CameraModel {
    type Error = Error;

    fn try_from(r: CameraRaw) -> Result<Self> {
        let m = r.rotation;
        CameraModel::new(
            r.fx,
            r.fy,
            r.cx,
            r.cy,
            Matrix3::new(
                m[0][0], m[0][1], m[0][2], m[1][0], m[1][1], m[1][2], m[2][0], m[2][1], m[2][2],
            ),
            Vector3::from(r.translation),
            r.width,
            r.height,
            r.frame_index,
        )
    }
}

impl From<CameraModel> for CameraRaw {
    fn from(c: CameraModel) -> Self {
        let m = c.rotation;
        CameraRaw {
            fx: c.fx,
            fy: c.fy,
            cx: c.cx,
            cy: c.cy,
            rotation: [
                [m[(0, 0)], m[(0, 1)], m[(0, 2)]],
                [m[(1, 0)], m[(1, 1)], m[(1, 2)]],
                [m[(2, 0)], m[(2, 1)], m[(2, 2)]],
            ],
            translation: c.translation.into(),
            width: c.width,
            height: c.height,
            frame_index: c.frame_index,
        }
    }
}
