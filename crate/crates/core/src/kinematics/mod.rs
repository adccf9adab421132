//! Hand model, forward kinematics, fingertip Jacobians and collision
//! distances for the 22-DoF hand.

pub mod ik;
mod model;

use nalgebra::{Isometry3, Matrix3, Point3, Rotation3, SMatrix, SVector, Translation3, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{Environment, SurfaceModel};
pub use ik::{solve_ik, IkOptions, IkSolution};
pub use model::{CollisionSphere, Finger, Fingertip, HandModel, Joint, Link};

/// Configuration dimension: wrist translation, wrist rotation, 16 joints.
pub const NQ: usize = 22;
pub const N_WRIST: usize = 6;
pub const N_JOINTS: usize = 16;

pub type Jacobian3 = SMatrix<f64, 3, NQ>;
pub type QVector = SVector<f64, NQ>;

#[derive(Debug, Error)]
pub enum KinematicsError {
    #[error("hand description parse error: {0}")]
    Parse(String),
    #[error("invalid hand model: {0}")]
    InvalidModel(String),
    #[error("joint {joint} value {value} outside [{lower}, {upper}]")]
    JointLimit { joint: usize, value: f64, lower: f64, upper: f64 },
    #[error("configuration must have {NQ} entries, got {0}")]
    Dimension(usize),
    #[error("no IK solution after {restarts} restarts (best fingertip error {best_error:.4} m)")]
    NoSolution { restarts: usize, best_error: f64 },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// `q = [wrist translation (m); wrist rotation (exponential coordinates);
/// 16 finger joints (rad)]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct HandConfiguration {
    pub q: [f64; NQ],
}

impl HandConfiguration {
    pub fn zeros() -> Self {
        HandConfiguration { q: [0.0; NQ] }
    }

    pub fn from_slice(q: &[f64]) -> Result<Self, KinematicsError> {
        if q.len() != NQ {
            return Err(KinematicsError::Dimension(q.len()));
        }
        let mut out = [0.0; NQ];
        out.copy_from_slice(q);
        Ok(HandConfiguration { q: out })
    }

    /// Builds a configuration and checks the joint limits with a 1e-9
    /// tolerance.
    pub fn new(q: &[f64], hand: &HandModel) -> Result<Self, KinematicsError> {
        let c = Self::from_slice(q)?;
        c.validate(hand, 1e-9)?;
        Ok(c)
    }

    pub fn from_parts(translation: Vector3<f64>, rotation: Vector3<f64>, joints: &[f64; N_JOINTS]) -> Self {
        let mut q = [0.0; NQ];
        q[..3].copy_from_slice(translation.as_slice());
        q[3..6].copy_from_slice(rotation.as_slice());
        q[6..].copy_from_slice(joints);
        HandConfiguration { q }
    }

    pub fn validate(&self, hand: &HandModel, tol: f64) -> Result<(), KinematicsError> {
        for (j, joint) in hand.joints.iter().enumerate() {
            let v = self.q[N_WRIST + j];
            if !(v >= joint.lower - tol && v <= joint.upper + tol) {
                return Err(KinematicsError::JointLimit { joint: j, value: v, lower: joint.lower, upper: joint.upper });
            }
        }
        Ok(())
    }

    pub fn translation(&self) -> Vector3<f64> {
        Vector3::new(self.q[0], self.q[1], self.q[2])
    }

    pub fn rotation_vector(&self) -> Vector3<f64> {
        Vector3::new(self.q[3], self.q[4], self.q[5])
    }

    pub fn joints(&self) -> &[f64] {
        &self.q[N_WRIST..]
    }

    pub fn joints_mut(&mut self) -> &mut [f64] {
        &mut self.q[N_WRIST..]
    }

    pub fn wrist_pose(&self) -> Isometry3<f64> {
        Isometry3::from_parts(
            Translation3::from(self.translation()),
            UnitQuaternion::from_scaled_axis(self.rotation_vector()),
        )
    }

    /// Same configuration with the wrist pose replaced.
    pub fn with_wrist_pose(&self, pose: &Isometry3<f64>) -> Self {
        let mut out = *self;
        let w = pose.rotation.scaled_axis();
        out.q[..3].copy_from_slice(pose.translation.vector.as_slice());
        out.q[3..6].copy_from_slice(w.as_slice());
        out
    }

    /// Rescales the rotation vector into the ball of radius π (same
    /// rotation).
    pub fn canonicalize(&mut self) {
        let w = canonical_rotation_vector(&self.rotation_vector());
        self.q[3..6].copy_from_slice(w.as_slice());
    }

    pub fn as_vector(&self) -> QVector {
        QVector::from_row_slice(&self.q)
    }

    pub fn from_vector(v: &QVector) -> Self {
        let mut q = [0.0; NQ];
        q.copy_from_slice(v.as_slice());
        HandConfiguration { q }
    }
}

/// Maps `ω` with `‖ω‖ > π` to the equivalent vector `ω (1 − 2π/‖ω‖)`.
pub fn canonical_rotation_vector(w: &Vector3<f64>) -> Vector3<f64> {
    let t = w.norm();
    if t > std::f64::consts::PI {
        w * (1.0 - 2.0 * std::f64::consts::PI / t)
    } else {
        *w
    }
}

/// Left Jacobian of SO(3): `d exp(ω) = [J_l(ω) dω]× exp(ω)`.
pub fn so3_left_jacobian(w: &Vector3<f64>) -> Matrix3<f64> {
    let t = w.norm();
    let k = w.cross_matrix();
    let (a, b) = if t < 1e-5 {
        (0.5 - t * t / 24.0, 1.0 / 6.0 - t * t / 120.0)
    } else {
        ((1.0 - t.cos()) / (t * t), (t - t.sin()) / (t * t * t))
    };
    Matrix3::identity() + k * a + k * k * b
}

#[derive(Debug, Clone, PartialEq)]
pub struct FkResult {
    /// World pose of every link, in model order.
    pub link_poses: Vec<Isometry3<f64>>,
    /// Thumb, index and middle contact points.
    pub fingertips: [Point3<f64>; 3],
}

pub fn forward_kinematics(hand: &HandModel, q: &HandConfiguration) -> FkResult {
    let wrist = q.wrist_pose();
    let mut poses: Vec<Isometry3<f64>> = Vec::with_capacity(hand.links.len());
    for link in &hand.links {
        let parent = match link.parent {
            Some(p) => poses[p],
            None => wrist,
        };
        let mut pose = parent * link.origin;
        if let Some(j) = link.joint {
            let joint = &hand.joints[j];
            pose *= UnitQuaternion::from_axis_angle(&joint.axis, q.q[N_WRIST + j]);
        }
        poses.push(pose);
    }
    let fingertips = [0, 1, 2].map(|i| {
        let ft = &hand.fingertips[i];
        poses[ft.link] * ft.offset
    });
    FkResult { link_poses: poses, fingertips }
}

/// Jacobian of the world point `x` rigidly attached to `link`.
pub fn point_jacobian(hand: &HandModel, q: &HandConfiguration, fk: &FkResult, link: usize, x: &Point3<f64>) -> Jacobian3 {
    let mut jac = Jacobian3::zeros();
    jac.fixed_view_mut::<3, 3>(0, 0).copy_from(&Matrix3::identity());
    let r = x.coords - q.translation();
    let rot_block = -r.cross_matrix() * so3_left_jacobian(&q.rotation_vector());
    jac.fixed_view_mut::<3, 3>(0, 3).copy_from(&rot_block);
    for &j in &hand.chain_joints[link] {
        let l = hand.joints[j].child;
        let pose = &fk.link_poses[l];
        let axis = pose.rotation * hand.joints[j].axis.into_inner();
        let origin = pose.translation.vector;
        let col = axis.cross(&(x.coords - origin));
        jac.fixed_view_mut::<3, 1>(0, N_WRIST + j).copy_from(&col);
    }
    jac
}

/// `∇_q K_i` for fingertip `i` (0 thumb, 1 index, 2 middle).
pub fn fingertip_jacobian(hand: &HandModel, q: &HandConfiguration, fk: &FkResult, i: usize) -> Jacobian3 {
    point_jacobian(hand, q, fk, hand.fingertips[i].link, &fk.fingertips[i])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Primitive {
    Object,
    Table,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CollisionDistance {
    pub sphere: usize,
    pub link: usize,
    pub primitive: Primitive,
    pub distance: f64,
}

/// Per-sphere clearance: the smaller of object and table clearance, with
/// fingertip spheres exempt from the object term.
pub fn collision_distances(
    hand: &HandModel,
    q: &HandConfiguration,
    model: &SurfaceModel,
    env: &Environment,
) -> Vec<CollisionDistance> {
    let fk = forward_kinematics(hand, q);
    sphere_clearances(hand, &fk, model, env)
        .into_iter()
        .map(|c| {
            let (primitive, distance) = match c.object {
                Some(d) if d < c.table => (Primitive::Object, d),
                _ => (Primitive::Table, c.table),
            };
            CollisionDistance { sphere: c.sphere, link: hand.collision_spheres[c.sphere].link, primitive, distance }
        })
        .collect()
}

/// Object and table clearances of one collision sphere.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SphereClearance {
    pub sphere: usize,
    pub center: Point3<f64>,
    pub object: Option<f64>,
    pub table: f64,
}

pub fn sphere_clearances(hand: &HandModel, fk: &FkResult, model: &SurfaceModel, env: &Environment) -> Vec<SphereClearance> {
    hand.collision_spheres
        .iter()
        .enumerate()
        .map(|(s, sp)| {
            let center = fk.link_poses[sp.link] * sp.center;
            let object = (!sp.fingertip).then(|| model.signed_distance(&center) - sp.radius);
            SphereClearance { sphere: s, center, object, table: env.height(&center) - sp.radius }
        })
        .collect()
}

/// Clearance gradients with respect to q.
#[derive(Debug, Clone, PartialEq)]
pub struct SphereClearanceGrad {
    pub clearance: SphereClearance,
    pub object_grad: Option<QVector>,
    pub table_grad: QVector,
}

pub fn sphere_clearances_with_gradients(
    hand: &HandModel,
    q: &HandConfiguration,
    fk: &FkResult,
    model: &SurfaceModel,
    env: &Environment,
) -> Vec<SphereClearanceGrad> {
    sphere_clearances(hand, fk, model, env)
        .into_iter()
        .map(|c| {
            let sp = &hand.collision_spheres[c.sphere];
            let jac = point_jacobian(hand, q, fk, sp.link, &c.center);
            let object_grad = c.object.map(|_| {
                let (_, g) = model.signed_distance_with_gradient(&c.center);
                jac.transpose() * g
            });
            let table_grad = jac.transpose() * env.table_normal;
            SphereClearanceGrad { clearance: c, object_grad, table_grad }
        })
        .collect()
}

/// Rigid transform of the wrist: `G · T_wrist`.
pub fn transform_wrist(q: &HandConfiguration, g: &Isometry3<f64>) -> HandConfiguration {
    q.with_wrist_pose(&(g * q.wrist_pose()))
}

/// Rotation of the wrist frame.
pub fn wrist_rotation(q: &HandConfiguration) -> Rotation3<f64> {
    Rotation3::new(q.rotation_vector())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::TriMesh;
    use nalgebra::{Matrix4, Unit};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn random_q(hand: &HandModel, rng: &mut ChaCha8Rng) -> HandConfiguration {
        let mut q = [0.0; NQ];
        for v in q.iter_mut().take(3) {
            *v = rng.gen_range(-0.5..0.5);
        }
        let w: Vector3<f64> = Vector3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
        let w = w * (rng.gen_range(0.0..3.0_f64) / w.norm());
        q[3..6].copy_from_slice(w.as_slice());
        for (j, joint) in hand.joints.iter().enumerate() {
            q[N_WRIST + j] = rng.gen_range(joint.lower..joint.upper);
        }
        HandConfiguration { q }
    }

    #[test]
    fn reference_pose_matches_file() {
        let hand = HandModel::default_hand();
        let fk = forward_kinematics(&hand, &HandConfiguration::zeros());
        for i in 0..3 {
            assert!((fk.fingertips[i] - hand.fingertips[i].reference_position).norm() <= 1e-12);
        }
    }

    #[test]
    fn wrist_translation_transports_fingertips() {
        let hand = HandModel::default_hand();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let q = random_q(&hand, &mut rng);
        let d = Vector3::new(0.3, -0.2, 0.7);
        let mut q2 = q;
        for k in 0..3 {
            q2.q[k] += d[k];
        }
        let a = forward_kinematics(&hand, &q);
        let b = forward_kinematics(&hand, &q2);
        for i in 0..3 {
            assert!((b.fingertips[i] - a.fingertips[i] - d).norm() <= 1e-12);
        }
    }

    /// Independent chain of 4×4 homogeneous matrices.
    fn naive_fk(hand: &HandModel, q: &HandConfiguration) -> [Point3<f64>; 3] {
        let homo = |r: Matrix3<f64>, t: Vector3<f64>| {
            let mut m = Matrix4::identity();
            m.fixed_view_mut::<3, 3>(0, 0).copy_from(&r);
            m.fixed_view_mut::<3, 1>(0, 3).copy_from(&t);
            m
        };
        let rodrigues = |axis: Vector3<f64>, a: f64| {
            let k = axis.cross_matrix();
            Matrix3::identity() + k * a.sin() + k * k * (1.0 - a.cos())
        };
        let w = q.rotation_vector();
        let wt = w.norm();
        let wr = if wt > 0.0 { rodrigues(w / wt, wt) } else { Matrix3::identity() };
        let base = homo(wr, q.translation());
        [0, 1, 2].map(|i| {
            let ft = &hand.fingertips[i];
            let mut chain = vec![ft.link];
            while let Some(p) = hand.links[*chain.last().unwrap()].parent {
                chain.push(p);
            }
            let mut m = base;
            for &l in chain.iter().rev() {
                let link = &hand.links[l];
                m *= link.origin.to_homogeneous();
                if let Some(j) = link.joint {
                    m *= homo(rodrigues(hand.joints[j].axis.into_inner(), q.q[N_WRIST + j]), Vector3::zeros());
                }
            }
            let p = m * ft.offset.to_homogeneous();
            Point3::new(p.x, p.y, p.z)
        })
    }

    #[test]
    fn fk_matches_naive_matrix_chain() {
        let hand = HandModel::default_hand();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..100 {
            let q = random_q(&hand, &mut rng);
            let fk = forward_kinematics(&hand, &q);
            let naive = naive_fk(&hand, &q);
            for i in 0..3 {
                assert!((fk.fingertips[i] - naive[i]).norm() <= 1e-12);
            }
        }
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let hand = HandModel::default_hand();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let h = 1e-6;
        for _ in 0..100 {
            let q = random_q(&hand, &mut rng);
            let fk = forward_kinematics(&hand, &q);
            for i in 0..3 {
                let jac = fingertip_jacobian(&hand, &q, &fk, i);
                for k in 0..NQ {
                    let mut qp = q;
                    let mut qm = q;
                    qp.q[k] += h;
                    qm.q[k] -= h;
                    let fd = (forward_kinematics(&hand, &qp).fingertips[i] - forward_kinematics(&hand, &qm).fingertips[i])
                        / (2.0 * h);
                    assert!((fd - jac.column(k)).amax() <= 1e-6, "tip {i} col {k}");
                }
            }
        }
    }

    #[test]
    fn jacobian_structure() {
        let hand = HandModel::default_hand();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let q = random_q(&hand, &mut rng);
        let fk = forward_kinematics(&hand, &q);
        for i in 0..3 {
            let jac = fingertip_jacobian(&hand, &q, &fk, i);
            assert_eq!(jac.fixed_view::<3, 3>(0, 0).into_owned(), Matrix3::identity());
            let chain = &hand.chain_joints[hand.fingertips[i].link];
            for j in 0..N_JOINTS {
                if !chain.contains(&j) {
                    assert_eq!(jac.column(N_WRIST + j).norm(), 0.0);
                }
            }
        }
    }

    #[test]
    fn jacobian_second_order_remainder() {
        let hand = HandModel::default_hand();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let q = random_q(&hand, &mut rng);
        let fk = forward_kinematics(&hand, &q);
        let dir = QVector::from_fn(|_, _| rng.gen_range(-1.0..1.0)).normalize();
        let jac = fingertip_jacobian(&hand, &q, &fk, 1);
        let rem = |s: f64| {
            let qd = HandConfiguration::from_vector(&(q.as_vector() + dir * s));
            (forward_kinematics(&hand, &qd).fingertips[1] - fk.fingertips[1] - jac * (dir * s)).norm()
        };
        let (r3, r4, r5) = (rem(1e-3), rem(1e-4), rem(1e-5));
        assert!(r3 / r4 > 50.0 && r4 / r5 > 50.0, "{r3} {r4} {r5}");
    }

    #[test]
    fn rotation_rescaling_preserves_pose() {
        let w = Vector3::new(2.0, -2.5, 1.0);
        let c = canonical_rotation_vector(&w);
        assert!(c.norm() <= std::f64::consts::PI);
        assert!((Rotation3::new(w).matrix() - Rotation3::new(c).matrix()).amax() < 1e-12);
    }

    #[test]
    fn collision_examples() {
        let hand = HandModel::default_hand();
        let model = SurfaceModel::from_mesh(TriMesh::cuboid(Vector3::repeat(0.02)), 32).unwrap();
        let env = Environment::table_at_height(-0.02);
        let mut q = HandConfiguration::zeros();
        q.q[2] = 1.0;
        let d = collision_distances(&hand, &q, &model, &env);
        assert_eq!(d.len(), hand.collision_spheres.len());
        assert!(d.iter().all(|c| c.distance > 0.5));

        // Put the first palm sphere center at the object center.
        let sp = &hand.collision_spheres[0];
        assert_eq!(hand.links[sp.link].name, "palm");
        let mut q = HandConfiguration::zeros();
        q.q[..3].copy_from_slice((-sp.center.coords).as_slice());
        let d = collision_distances(&hand, &q, &model, &env);
        assert!(d[0].distance < 0.0 && d[0].primitive == Primitive::Object);
    }

    #[test]
    fn collision_matches_dense_sampling() {
        let hand = HandModel::default_hand();
        let mesh = TriMesh::icosphere(0.04, 3);
        let model = SurfaceModel::from_mesh(mesh.clone(), 64).unwrap();
        let env = Environment::table_at_height(-0.5);
        let h = model.grid_spacing();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        // Dense surface samples.
        let mut samples = Vec::new();
        for t in 0..mesh.triangles.len() {
            let [a, b, c] = mesh.triangle(t);
            for _ in 0..8 {
                let (mut u, mut v): (f64, f64) = (rng.gen(), rng.gen());
                if u + v > 1.0 {
                    u = 1.0 - u;
                    v = 1.0 - v;
                }
                samples.push(a + (b - a) * u + (c - a) * v);
            }
        }
        for _ in 0..10 {
            let mut q = random_q(&hand, &mut rng);
            for k in 0..3 {
                q.q[k] = rng.gen_range(-0.15..0.15);
            }
            let fk = forward_kinematics(&hand, &q);
            for c in sphere_clearances(&hand, &fk, &model, &env) {
                let Some(obj) = c.object else { continue };
                let r = hand.collision_spheres[c.sphere].radius;
                let near = samples.iter().map(|s| (s - c.center).norm()).fold(f64::INFINITY, f64::min);
                let inside = c.center.coords.norm() < 0.04;
                let brute = if inside { -near } else { near } - r;
                assert!((obj - brute).abs() <= 2.0 * h, "{obj} vs {brute}");
            }
        }
    }

    #[test]
    fn clearance_gradients_match_finite_differences() {
        let hand = HandModel::default_hand();
        let model = SurfaceModel::from_mesh(TriMesh::icosphere(0.04, 3), 48).unwrap();
        let env = Environment::new(Point3::new(0.0, 0.0, -0.3), Vector3::new(0.1, 0.2, 1.0)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let q = random_q(&hand, &mut rng);
        let fk = forward_kinematics(&hand, &q);
        let grads = sphere_clearances_with_gradients(&hand, &q, &fk, &model, &env);
        let h = 1e-6;
        for k in 0..NQ {
            let mut qp = q;
            let mut qm = q;
            qp.q[k] += h;
            qm.q[k] -= h;
            let cp = sphere_clearances(&hand, &forward_kinematics(&hand, &qp), &model, &env);
            let cm = sphere_clearances(&hand, &forward_kinematics(&hand, &qm), &model, &env);
            for (s, g) in grads.iter().enumerate() {
                let fd = (cp[s].table - cm[s].table) / (2.0 * h);
                assert!((fd - g.table_grad[k]).abs() <= 1e-6);
            }
        }
    }

    #[test]
    fn inflating_radius_shifts_distance_exactly() {
        let mut hand = HandModel::default_hand();
        let model = SurfaceModel::from_mesh(TriMesh::icosphere(0.04, 2), 32).unwrap();
        let env = Environment::table_at_height(-0.1);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let q = random_q(&hand, &mut rng);
        let before = collision_distances(&hand, &q, &model, &env);
        let r = 0.0037;
        for s in &mut hand.collision_spheres {
            s.radius += r;
        }
        let after = collision_distances(&hand, &q, &model, &env);
        for (a, b) in before.iter().zip(&after) {
            assert!((a.distance - r - b.distance).abs() <= 1e-15);
        }
    }

    proptest! {
        #[test]
        fn fk_is_wrist_equivariant(
            seed in 0u64..1000,
            ax in -1.0f64..1.0, ay in -1.0f64..1.0, az in -1.0f64..1.0,
            angle in -3.0f64..3.0,
            tx in -1.0f64..1.0, ty in -1.0f64..1.0, tz in -1.0f64..1.0,
        ) {
            let hand = HandModel::default_hand();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let q = random_q(&hand, &mut rng);
            let axis = Vector3::new(ax, ay, az);
            prop_assume!(axis.norm() > 1e-3);
            let g = Isometry3::from_parts(
                Translation3::new(tx, ty, tz),
                UnitQuaternion::from_axis_angle(&Unit::new_normalize(axis), angle),
            );
            let a = forward_kinematics(&hand, &q);
            let b = forward_kinematics(&hand, &transform_wrist(&q, &g));
            for i in 0..3 {
                prop_assert!((b.fingertips[i] - g * a.fingertips[i]).norm() <= 1e-12);
            }
        }
    }
}
