//! Quasi-static rest poses from convex-hull facets.

use nalgebra::{Isometry3, Point3, Translation3, Unit, UnitQuaternion, Vector3};

use super::hull::hull_facets;
use super::mesh::TriMesh;

/// A rigid placement of the object on the table plane `z = 0`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RestPose {
    pub rotation: UnitQuaternion<f64>,
    pub translation: Vector3<f64>,
    /// Outward facet normal (object frame) that rests on the table.
    pub support_normal: Vector3<f64>,
}

impl RestPose {
    pub fn isometry(&self) -> Isometry3<f64> {
        Isometry3::from_parts(Translation3::from(self.translation), self.rotation)
    }

    /// `[x, y, z, qw, qx, qy, qz]`.
    pub fn to_array(&self) -> [f64; 7] {
        let q = self.rotation.quaternion();
        [self.translation.x, self.translation.y, self.translation.z, q.w, q.i, q.j, q.k]
    }
}

/// One pose per hull facet whose plane projection of `center_of_mass`
/// falls strictly inside the facet polygon. Each pose turns that facet
/// normal to `-z` and lifts the hull so its lowest point sits on `z = 0`.
pub fn stable_rest_poses(hull: &TriMesh, center_of_mass: &Point3<f64>) -> Vec<RestPose> {
    let scale = hull.bounding_box().extent().norm();
    let margin = 1e-9 * scale;
    let mut poses = Vec::new();
    for f in hull_facets(hull) {
        let d = f.normal.dot(&center_of_mass.coords) - f.offset;
        let proj = center_of_mass - f.normal * d;
        if !f.contains_strictly(&proj, margin) {
            continue;
        }
        let down = -Vector3::z();
        let rotation = UnitQuaternion::rotation_between(&f.normal, &down).unwrap_or_else(|| {
            UnitQuaternion::from_axis_angle(&Unit::new_normalize(Vector3::x()), std::f64::consts::PI)
        });
        let min_z = hull.vertices.iter().map(|v| (rotation * v).z).fold(f64::INFINITY, f64::min);
        poses.push(RestPose { rotation, translation: Vector3::new(0.0, 0.0, -min_z), support_normal: f.normal });
    }
    poses
}
