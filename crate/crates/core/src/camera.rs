//! Pinhole camera with a world-to-camera rigid transform (OpenCV axes:
//! x right, y down, z forward).

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Camera {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    pub time: f64,
}

impl Camera {
    /// Camera at `eye` looking at `target`; `up` is the world direction that
    /// appears upward in the image.
    #[allow(clippy::too_many_arguments)]
    pub fn look_at(
        eye: Vector3<f64>,
        target: Vector3<f64>,
        up: Vector3<f64>,
        fx: f64,
        fy: f64,
        width: usize,
        height: usize,
        time: f64,
    ) -> Result<Self> {
        let z = (target - eye)
            .try_normalize(1e-12)
            .ok_or_else(|| Error::InvalidParameter("camera eye equals target".into()))?;
        let y = (-up + z * up.dot(&z))
            .try_normalize(1e-12)
            .ok_or_else(|| Error::InvalidParameter("camera up is parallel to view axis".into()))?;
        let x = y.cross(&z);
        let rotation = Matrix3::from_rows(&[x.transpose(), y.transpose(), z.transpose()]);
        let cam = Self {
            rotation,
            translation: -(rotation * eye),
            fx,
            fy,
            cx: width as f64 / 2.0,
            cy: height as f64 / 2.0,
            width,
            height,
            time,
        };
        cam.validate()?;
        Ok(cam)
    }

    pub fn validate(&self) -> Result<()> {
        let err = (self.rotation.transpose() * self.rotation - Matrix3::identity()).abs().max();
        if err > 1e-8 {
            return Err(Error::InvalidParameter(format!("camera rotation not orthonormal (error {err:e})")));
        }
        if (self.rotation.determinant() - 1.0).abs() > 1e-8 {
            return Err(Error::InvalidParameter("camera rotation is a reflection".into()));
        }
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(Error::InvalidParameter("focal lengths must be positive".into()));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::InvalidParameter("image size must be nonzero".into()));
        }
        if !(0.0..=1.0).contains(&self.time) {
            return Err(Error::InvalidParameter(format!("camera time {} outside [0, 1]", self.time)));
        }
        Ok(())
    }

    /// Camera center `p_v = -Rᵀ t` in world coordinates.
    pub fn center(&self) -> Vector3<f64> {
        -(self.rotation.transpose() * self.translation)
    }

    /// World-space optical axis.
    pub fn forward(&self) -> Vector3<f64> {
        self.rotation.row(2).transpose()
    }

    pub fn with_time(&self, time: f64) -> Self {
        Self { time, ..*self }
    }

    pub fn intrinsics(&self) -> Intrinsics {
        Intrinsics { fx: self.fx, fy: self.fy, cx: self.cx, cy: self.cy, width: self.width, height: self.height }
    }

    /// Row-major 3×4 `[R | t]`.
    pub fn world_to_camera_rows(&self) -> [f64; 12] {
        let mut out = [0.0; 12];
        for r in 0..3 {
            for c in 0..3 {
                out[r * 4 + c] = self.rotation[(r, c)];
            }
            out[r * 4 + 3] = self.translation[r];
        }
        out
    }

    pub fn from_parts(intr: Intrinsics, world_to_camera: &[f64], time: f64) -> Result<Self> {
        if world_to_camera.len() != 12 && world_to_camera.len() != 16 {
            return Err(Error::InvalidParameter(format!(
                "world_to_camera needs 12 or 16 entries, got {}",
                world_to_camera.len()
            )));
        }
        let m = |r: usize, c: usize| world_to_camera[r * 4 + c];
        let rotation = Matrix3::from_fn(m);
        let translation = Vector3::new(m(0, 3), m(1, 3), m(2, 3));
        let cam = Self {
            rotation,
            translation,
            fx: intr.fx,
            fy: intr.fy,
            cx: intr.cx,
            cy: intr.cy,
            width: intr.width,
            height: intr.height,
            time,
        };
        cam.validate()?;
        Ok(cam)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}
