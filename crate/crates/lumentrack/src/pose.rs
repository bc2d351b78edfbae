//! Rigid camera pose in tree coordinates.
//!
//! Convention: the camera looks along its local +z axis, image +x points
//! right, image +y points down. `orientation` rotates camera-frame vectors
//! into the tree frame.

use nalgebra::{Point3, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub position: Point3<f64>,
    pub orientation: UnitQuaternion<f64>,
}

impl Pose {
    pub fn new(position: Point3<f64>, orientation: UnitQuaternion<f64>) -> Self {
        Self {
            position,
            orientation,
        }
    }

    pub fn identity() -> Self {
        Self {
            position: Point3::origin(),
            orientation: UnitQuaternion::identity(),
        }
    }

    /// Viewing direction (camera +z) in tree coordinates.
    pub fn forward(&self) -> Vector3<f64> {
        self.orientation * Vector3::z()
    }

    /// Image-right direction (camera +x) in tree coordinates.
    pub fn right(&self) -> Vector3<f64> {
        self.orientation * Vector3::x()
    }

    /// Image-down direction (camera +y) in tree coordinates.
    pub fn down(&self) -> Vector3<f64> {
        self.orientation * Vector3::y()
    }

    pub fn camera_to_world(&self, p_cam: &Point3<f64>) -> Point3<f64> {
        self.position + self.orientation * p_cam.coords
    }

    pub fn world_to_camera(&self, p_world: &Point3<f64>) -> Point3<f64> {
        Point3::from(self.orientation.inverse() * (p_world - self.position))
    }

    /// Rotates a camera-frame direction into the tree frame.
    pub fn direction_to_world(&self, d_cam: &Vector3<f64>) -> Vector3<f64> {
        self.orientation * d_cam
    }

    /// Geodesic angle between the orientations of two poses, in radians.
    pub fn angular_distance(&self, other: &Pose) -> f64 {
        self.orientation.angle_to(&other.orientation)
    }

    pub fn translational_distance(&self, other: &Pose) -> f64 {
        (self.position - other.position).norm()
    }
}
