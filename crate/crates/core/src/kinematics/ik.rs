//! Seeding inverse kinematics: place the three fingertips near target
//! surface points while keeping the rest of the hand clear of the object
//! and the table.

use nalgebra::{DMatrix, DVector, Point3, Unit, UnitQuaternion, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{
    canonical_rotation_vector, fingertip_jacobian, forward_kinematics, sphere_clearances,
    sphere_clearances_with_gradients, HandConfiguration, HandModel, KinematicsError, N_JOINTS, N_WRIST, NQ,
};
use crate::geometry::{Environment, SurfaceModel};

/// Default IK tolerance on fingertip-to-target distance (m).
pub const DEFAULT_EPSILON: f64 = 0.005;
/// Fingertip penetration band: `D(K_i) ∈ [D_MIN, D_MAX]`.
pub const D_MIN: f64 = -0.0068;
pub const D_MAX: f64 = -0.0032;

/// Finger posture the restarts start from: fingers and thumb half closed
/// toward each other.
pub const PREGRASP: [f64; N_JOINTS] = [
    0.0, 0.65, 0.6, 0.6, // index
    0.0, 0.65, 0.6, 0.6, // middle
    -0.3, 0.0, 0.0, 0.0, // ring (locked)
    0.0, 0.3, 0.3, 0.2, // thumb
];

#[derive(Debug, Clone, PartialEq)]
pub struct IkOptions {
    pub epsilon: f64,
    pub d_min: f64,
    pub d_max: f64,
    pub n_orientation_inits: usize,
    pub rng_seed: u64,
    pub max_iterations: usize,
    /// Clearance the collision penalty aims for; the check itself uses 0.
    pub collision_margin: f64,
}

impl Default for IkOptions {
    fn default() -> Self {
        IkOptions {
            epsilon: DEFAULT_EPSILON,
            d_min: D_MIN,
            d_max: D_MAX,
            n_orientation_inits: 6,
            rng_seed: 0,
            max_iterations: 150,
            collision_margin: 0.002,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IkSolution {
    pub config: HandConfiguration,
    /// `‖K_i(q) − p′_i‖` for thumb, index, middle.
    pub target_errors: [f64; 3],
    pub fingertip_depths: [f64; 3],
    pub min_clearance: f64,
    /// Restart that produced the solution.
    pub restart: usize,
    pub iterations: usize,
}

/// Outcome of checking IK post-conditions from scratch.
#[derive(Debug, Clone, PartialEq)]
pub struct IkCheck {
    pub target_errors: [f64; 3],
    pub fingertip_depths: [f64; 3],
    pub min_clearance: f64,
    pub within_limits: bool,
}

impl IkCheck {
    pub fn passes(&self, opts: &IkOptions) -> bool {
        self.within_limits
            && self.target_errors.iter().all(|&e| e <= opts.epsilon)
            && self.fingertip_depths.iter().all(|&d| d >= opts.d_min && d <= opts.d_max)
            && self.min_clearance >= 0.0
    }
}

pub fn check_ik(
    hand: &HandModel,
    q: &HandConfiguration,
    targets: &[Point3<f64>; 3],
    model: &SurfaceModel,
    env: &Environment,
) -> IkCheck {
    let fk = forward_kinematics(hand, q);
    let target_errors = [0, 1, 2].map(|i| (fk.fingertips[i] - targets[i]).norm());
    let fingertip_depths = [0, 1, 2].map(|i| model.signed_distance(&fk.fingertips[i]));
    let min_clearance = sphere_clearances(hand, &fk, model, env)
        .iter()
        .map(|c| c.object.unwrap_or(f64::INFINITY).min(c.table))
        .fold(f64::INFINITY, f64::min);
    IkCheck { target_errors, fingertip_depths, min_clearance, within_limits: q.validate(hand, 1e-9).is_ok() }
}

/// Free coordinates: the wrist and every unlocked joint.
fn free_indices(hand: &HandModel) -> Vec<usize> {
    (0..N_WRIST).chain(hand.joints.iter().enumerate().filter(|(_, j)| j.locked.is_none()).map(|(j, _)| N_WRIST + j)).collect()
}

fn clamp_to_limits(hand: &HandModel, q: &mut HandConfiguration) {
    for j in 0..N_JOINTS {
        let (lo, hi) = hand.effective_limits(j);
        q.q[N_WRIST + j] = q.q[N_WRIST + j].clamp(lo, hi);
    }
    q.canonicalize();
}

struct Problem<'a> {
    hand: &'a HandModel,
    model: &'a SurfaceModel,
    env: &'a Environment,
    aims: [Point3<f64>; 3],
    band: (f64, f64),
    margin: f64,
    free: Vec<usize>,
}

const W_BAND: f64 = 3.0;
const W_COLLISION: f64 = 3.0;

impl Problem<'_> {
    /// Residual vector and its Jacobian over the free coordinates.
    fn residuals(&self, q: &HandConfiguration, with_jacobian: bool) -> (DVector<f64>, DMatrix<f64>) {
        let fk = forward_kinematics(self.hand, q);
        let mut r: Vec<f64> = Vec::with_capacity(64);
        let mut rows: Vec<nalgebra::SVector<f64, NQ>> = Vec::new();
        for i in 0..3 {
            let e = fk.fingertips[i] - self.aims[i];
            r.extend_from_slice(e.as_slice());
            if with_jacobian {
                let jac = fingertip_jacobian(self.hand, q, &fk, i);
                for k in 0..3 {
                    rows.push(jac.row(k).transpose());
                }
            }
            let (d, g) = self.model.signed_distance_with_gradient(&fk.fingertips[i]);
            let (lo, hi) = self.band;
            let (v, s) = if d > hi {
                (d - hi, 1.0)
            } else if d < lo {
                (lo - d, -1.0)
            } else {
                (0.0, 0.0)
            };
            r.push(W_BAND * v);
            if with_jacobian {
                let jac = fingertip_jacobian(self.hand, q, &fk, i);
                rows.push(jac.transpose() * g * (W_BAND * s));
            }
        }
        if with_jacobian {
            for c in sphere_clearances_with_gradients(self.hand, q, &fk, self.model, self.env) {
                let obj = c.clearance.object.unwrap_or(f64::INFINITY);
                r.push(W_COLLISION * (self.margin - obj).max(0.0));
                rows.push(match c.object_grad {
                    Some(g) if obj < self.margin => -g * W_COLLISION,
                    _ => nalgebra::SVector::zeros(),
                });
                let t = c.clearance.table;
                r.push(W_COLLISION * (self.margin - t).max(0.0));
                rows.push(if t < self.margin { -c.table_grad * W_COLLISION } else { nalgebra::SVector::zeros() });
            }
        } else {
            for c in sphere_clearances(self.hand, &fk, self.model, self.env) {
                let obj = c.object.unwrap_or(f64::INFINITY);
                r.push(W_COLLISION * (self.margin - obj).max(0.0));
                r.push(W_COLLISION * (self.margin - c.table).max(0.0));
            }
        }
        let jac = if with_jacobian {
            DMatrix::from_fn(rows.len(), self.free.len(), |i, k| rows[i][self.free[k]])
        } else {
            DMatrix::zeros(0, 0)
        };
        (DVector::from_vec(r), jac)
    }

    fn cost(&self, q: &HandConfiguration) -> f64 {
        self.residuals(q, false).0.norm_squared()
    }

    /// Projected Levenberg-Marquardt; stops as soon as `done` holds.
    fn solve(
        &self,
        mut q: HandConfiguration,
        max_iter: usize,
        done: impl Fn(&HandConfiguration) -> bool,
    ) -> (HandConfiguration, usize, bool) {
        let mut lambda = 1e-3;
        let (mut r, mut jac) = self.residuals(&q, true);
        let mut cost = r.norm_squared();
        for it in 0..max_iter {
            if done(&q) {
                return (q, it, true);
            }
            let jtj = jac.transpose() * &jac;
            let jtr = jac.transpose() * &r;
            let mut accepted = false;
            for _ in 0..12 {
                let mut a = jtj.clone();
                for k in 0..a.nrows() {
                    a[(k, k)] += lambda * (a[(k, k)] + 1e-6);
                }
                let Some(step) = a.cholesky().map(|c| c.solve(&(-&jtr))) else {
                    lambda *= 10.0;
                    continue;
                };
                let mut trial = q;
                for (k, &idx) in self.free.iter().enumerate() {
                    trial.q[idx] += step[k];
                }
                clamp_to_limits(self.hand, &mut trial);
                let c = self.cost(&trial);
                if c < cost {
                    q = trial;
                    lambda = (lambda / 3.0).max(1e-9);
                    accepted = true;
                    break;
                }
                lambda *= 4.0;
            }
            if !accepted {
                return (q, it, done(&q));
            }
            (r, jac) = self.residuals(&q, true);
            cost = r.norm_squared();
        }
        let ok = done(&q);
        (q, max_iter, ok)
    }
}

/// Wrist orientations tried by the restarts: the hand's opposition axis
/// (thumb toward the index/middle pair) is turned onto the targets'
/// opposition axis, then spun about it in even steps.
fn restart_wrists(
    hand: &HandModel,
    posture: &HandConfiguration,
    aims: &[Point3<f64>; 3],
    n: usize,
    phase: f64,
) -> Vec<HandConfiguration> {
    let fk = forward_kinematics(hand, posture);
    let tips = fk.fingertips;
    let axis_hand = (tips[1].coords + tips[2].coords) * 0.5 - tips[0].coords;
    let axis_world = (aims[1].coords + aims[2].coords) * 0.5 - aims[0].coords;
    let base = UnitQuaternion::rotation_between(&axis_hand, &axis_world)
        .unwrap_or_else(|| UnitQuaternion::from_axis_angle(&Vector3::x_axis(), std::f64::consts::PI));
    let spin_axis = Unit::try_new(axis_world, 1e-12).unwrap_or(Vector3::z_axis());
    let c_hand = (tips[0].coords + tips[1].coords + tips[2].coords) / 3.0;
    let c_world = (aims[0].coords + aims[1].coords + aims[2].coords) / 3.0;
    (0..n)
        .map(|k| {
            let angle = phase + 2.0 * std::f64::consts::PI * k as f64 / n as f64;
            let rot = UnitQuaternion::from_axis_angle(&spin_axis, angle) * base;
            let mut q = *posture;
            let t = c_world - rot * c_hand;
            q.q[..3].copy_from_slice(t.as_slice());
            let w = canonical_rotation_vector(&rot.scaled_axis());
            q.q[3..6].copy_from_slice(w.as_slice());
            q
        })
        .collect()
}

/// Finds `q` with every fingertip within `epsilon` of its target, inside
/// the penetration band, and every collision sphere clear of object and
/// table. Targets are in thumb, index, middle order.
pub fn solve_ik(
    hand: &HandModel,
    targets: &[Point3<f64>; 3],
    model: &SurfaceModel,
    env: &Environment,
    opts: &IkOptions,
) -> Result<IkSolution, KinematicsError> {
    let depth = 0.5 * (opts.d_min + opts.d_max);
    let aims = [0, 1, 2].map(|i| match model.surface_normal(&targets[i]) {
        Ok(n) => targets[i] + n * depth,
        Err(_) => targets[i],
    });
    let shrink = 0.0003_f64.min(0.25 * (opts.d_max - opts.d_min));
    let problem = Problem {
        hand,
        model,
        env,
        aims,
        band: (opts.d_min + shrink, opts.d_max - shrink),
        margin: opts.collision_margin,
        free: free_indices(hand),
    };

    let mut rng = ChaCha8Rng::seed_from_u64(opts.rng_seed);
    let mut posture = HandConfiguration::zeros();
    posture.joints_mut().copy_from_slice(&PREGRASP);
    clamp_to_limits(hand, &mut posture);
    let phase = rng.gen_range(-0.1..0.1);
    let mut starts = restart_wrists(hand, &posture, &aims, opts.n_orientation_inits.max(1), phase);
    // Try orientations that keep the palm high above the table first.
    let palm_height = |q: &HandConfiguration| env.height(&forward_kinematics(hand, q).link_poses[0].translation.vector.into());
    let mut order: Vec<usize> = (0..starts.len()).collect();
    let heights: Vec<f64> = starts.iter().map(palm_height).collect();
    order.sort_by(|&a, &b| heights[b].total_cmp(&heights[a]).then(a.cmp(&b)));

    let mut best = f64::INFINITY;
    for &k in &order {
        let start = &mut starts[k];
        for j in 0..N_JOINTS {
            if hand.joints[j].locked.is_none() {
                start.q[N_WRIST + j] += rng.gen_range(-0.02..0.02);
            }
        }
        clamp_to_limits(hand, start);
        let passes = |q: &HandConfiguration| check_ik(hand, q, targets, model, env).passes(opts);
        let (q, iterations, ok) = problem.solve(*start, opts.max_iterations, passes);
        let check = check_ik(hand, &q, targets, model, env);
        if ok && check.passes(opts) {
            return Ok(IkSolution {
                config: q,
                target_errors: check.target_errors,
                fingertip_depths: check.fingertip_depths,
                min_clearance: check.min_clearance,
                restart: k,
                iterations,
            });
        }
        best = best.min(check.target_errors.iter().copied().fold(0.0, f64::max));
    }
    Err(KinematicsError::NoSolution { restarts: starts.len(), best_error: best })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::TriMesh;

    fn cylinder() -> (SurfaceModel, Environment) {
        let mesh = TriMesh::cylinder(0.04, 0.12, 48).translated(&Vector3::new(0.0, 0.0, 0.06));
        (SurfaceModel::from_mesh(mesh, 48).unwrap(), Environment::table_at_height(0.0))
    }

    fn tripod(r: f64, z: f64) -> [Point3<f64>; 3] {
        [0.0_f64, 2.2, -2.2].map(|a| Point3::new(r * a.cos(), r * a.sin(), z))
    }

    #[test]
    fn cylinder_tripod() {
        let (model, env) = cylinder();
        let hand = HandModel::default_hand();
        let targets = tripod(0.04, 0.07);
        let opts = IkOptions::default();
        let sol = solve_ik(&hand, &targets, &model, &env, &opts).unwrap();
        assert!(check_ik(&hand, &sol.config, &targets, &model, &env).passes(&opts));
    }

    #[test]
    fn unreachable_targets() {
        let (model, env) = cylinder();
        let hand = HandModel::default_hand();
        let targets = [Point3::new(10.0, 0.0, 0.0), Point3::new(-10.0, 0.0, 0.0), Point3::new(0.0, 10.0, 0.0)];
        assert!(matches!(
            solve_ik(&hand, &targets, &model, &env, &IkOptions { max_iterations: 30, ..Default::default() }),
            Err(KinematicsError::NoSolution { .. })
        ));
    }
}
