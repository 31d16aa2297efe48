use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::DepthMap;

/// Points closer than this to the image plane are treated as behind the camera.
pub const NEAR_PLANE: f64 = 1e-2;

/// Rigid transform `x ↦ R x + t`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RigidTransform {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl RigidTransform {
    pub fn identity() -> Self {
        RigidTransform {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        RigidTransform {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    pub fn compose(&self, other: &RigidTransform) -> RigidTransform {
        RigidTransform {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }
}

/// Pinhole camera. Camera frame is x right, y down, z forward; pixel
/// centres sit at integer coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    pub world_to_camera: RigidTransform,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projection {
    pub u: f64,
    pub v: f64,
    pub depth: f64,
    /// Camera-frame z is at or behind the near plane.
    pub culled: bool,
}

impl Camera {
    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        width: usize,
        height: usize,
        world_to_camera: RigidTransform,
    ) -> Result<Self> {
        let cam = Camera {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
            world_to_camera,
        };
        cam.validate()?;
        Ok(cam)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(Error::Domain(format!(
                "focal lengths must be positive (fx={}, fy={})",
                self.fx, self.fy
            )));
        }
        if !(self.cx >= 0.0 && self.cx < self.width as f64)
            || !(self.cy >= 0.0 && self.cy < self.height as f64)
        {
            return Err(Error::Domain(format!(
                "principal point ({}, {}) outside {}x{} image",
                self.cx, self.cy, self.width, self.height
            )));
        }
        let r = &self.world_to_camera.rotation;
        let err = (r * r.transpose() - Matrix3::identity()).abs().max();
        if err > 1e-9 || (r.determinant() - 1.0).abs() > 1e-9 {
            return Err(Error::Domain("camera rotation is not orthonormal".into()));
        }
        Ok(())
    }

    /// Camera at `eye` looking at `target`, with `up` roughly opposite image y.
    pub fn look_at(
        eye: Vector3<f64>,
        target: Vector3<f64>,
        up: Vector3<f64>,
        fx: f64,
        fy: f64,
        width: usize,
        height: usize,
    ) -> Result<Self> {
        let forward = (target - eye).normalize();
        let right = forward.cross(&up);
        if right.norm() < 1e-12 {
            return Err(Error::DegenerateInput("look-at up vector parallel to view".into()));
        }
        let right = right.normalize();
        let down = forward.cross(&right);
        let rotation = Matrix3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
        let translation = -(rotation * eye);
        Camera::new(
            fx,
            fy,
            (width / 2) as f64,
            (height / 2) as f64,
            width,
            height,
            RigidTransform {
                rotation,
                translation,
            },
        )
    }

    pub fn center(&self) -> Vector3<f64> {
        self.world_to_camera.inverse().translation
    }

    pub fn to_camera(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.world_to_camera.apply(p)
    }

    pub fn to_world(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.world_to_camera.rotation.transpose() * (p - self.world_to_camera.translation)
    }

    pub fn project_point(&self, world: &Vector3<f64>) -> Projection {
        let p = self.to_camera(world);
        if !(p.z > NEAR_PLANE) {
            return Projection {
                u: f64::NAN,
                v: f64::NAN,
                depth: p.z,
                culled: true,
            };
        }
        Projection {
            u: self.fx * p.x / p.z + self.cx,
            v: self.fy * p.y / p.z + self.cy,
            depth: p.z,
            culled: false,
        }
    }

    /// Camera-frame point seen at pixel coordinate `(u, v)` and depth `d`.
    pub fn unproject(&self, u: f64, v: f64, d: f64) -> Vector3<f64> {
        Vector3::new((u - self.cx) / self.fx * d, (v - self.cy) / self.fy * d, d)
    }
}

/// Camera-frame point cloud with one point per pixel of positive depth.
pub fn inverse_project(depth: &DepthMap, cam: &Camera) -> Result<Vec<Vector3<f64>>> {
    if depth.width() != cam.width || depth.height() != cam.height {
        return Err(Error::Shape(format!(
            "depth raster {}x{} does not match camera {}x{}",
            depth.width(),
            depth.height(),
            cam.width,
            cam.height
        )));
    }
    let mut out = Vec::new();
    for v in 0..depth.height() {
        for u in 0..depth.width() {
            let d = depth[(u, v)];
            if d > 0.0 {
                out.push(cam.unproject(u as f64, v as f64, d));
            }
        }
    }
    Ok(out)
}
