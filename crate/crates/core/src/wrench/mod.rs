//! Friction pyramids, the dynamic-feasibility QP and its value function.

pub mod qp;

use nalgebra::{DMatrix, DVector, Matrix3, Point3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{pivot_margin, tangent_basis_jacobian, ContactPoint};
pub use qp::{solve_qp, KktResiduals, QpError, QpOptions, QpProblem, QpSolution};

/// Feasibility threshold on J, in squared wrench units with `f_min = 1 N`.
pub const DEFAULT_TOL_DYN: f64 = 1e-6;

/// Rows per contact: one normal-force row and four pyramid facets.
pub const ROWS_PER_CONTACT: usize = 5;

#[derive(Debug, Error)]
pub enum WrenchError {
    #[error("invalid friction parameters: {0}")]
    InvalidParams(String),
    #[error("invalid contact triple: {0}")]
    InvalidTriple(String),
    #[error("QP solver failure: {0}")]
    Solver(#[from] QpError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FrictionParams {
    pub mu: f64,
    pub f_min: f64,
}

impl Default for FrictionParams {
    fn default() -> Self {
        FrictionParams { mu: 0.5, f_min: 1.0 }
    }
}

impl FrictionParams {
    pub fn new(mu: f64, f_min: f64) -> Result<Self, WrenchError> {
        if !(mu > 0.0 && mu.is_finite()) {
            return Err(WrenchError::InvalidParams(format!("mu must be positive, got {mu}")));
        }
        if !(f_min > 0.0 && f_min.is_finite()) {
            return Err(WrenchError::InvalidParams(format!("f_min must be positive, got {f_min}")));
        }
        Ok(FrictionParams { mu, f_min })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Proposed,
    Projected,
    FromFk,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ContactTriple {
    pub contacts: [ContactPoint; 3],
    pub provenance: Provenance,
}

impl ContactTriple {
    pub fn new(contacts: [ContactPoint; 3], provenance: Provenance) -> Result<Self, WrenchError> {
        for (i, c) in contacts.iter().enumerate() {
            if !c.is_valid(1e-9) {
                return Err(WrenchError::InvalidTriple(format!("contact {i} frame is not orthonormal")));
            }
        }
        for i in 0..3 {
            for j in i + 1..3 {
                if (contacts[i].position - contacts[j].position).norm() < 1e-6 {
                    return Err(WrenchError::InvalidTriple(format!("contacts {i} and {j} coincide")));
                }
            }
        }
        Ok(ContactTriple { contacts, provenance })
    }

    pub fn centroid(&self) -> Point3<f64> {
        Point3::from(self.contacts.iter().map(|c| c.position.coords).sum::<Vector3<f64>>() / 3.0)
    }

    /// Same contacts in the order given by `perm`.
    pub fn permuted(&self, perm: [usize; 3]) -> ContactTriple {
        ContactTriple { contacts: perm.map(|i| self.contacts[i]), provenance: self.provenance }
    }
}

/// The five inequality rows `a·f ≥ b` of one contact's friction pyramid.
pub fn friction_pyramid_constraints(contact: &ContactPoint, params: &FrictionParams) -> [(Vector3<f64>, f64); 5] {
    let n = contact.normal;
    let mu = params.mu;
    [
        (-n, params.f_min),
        (-n * mu - contact.t1, 0.0),
        (-n * mu + contact.t1, 0.0),
        (-n * mu - contact.t2, 0.0),
        (-n * mu + contact.t2, 0.0),
    ]
}

/// Whether `f` satisfies every pyramid row of `contact` within `tol`.
pub fn in_friction_pyramid(f: &Vector3<f64>, contact: &ContactPoint, params: &FrictionParams, tol: f64) -> bool {
    friction_pyramid_constraints(contact, params).iter().all(|(a, b)| a.dot(f) >= b - tol)
}

/// Exact Coulomb cone: tangential magnitude at most `mu` times the
/// compressive normal component.
pub fn in_friction_cone(f: &Vector3<f64>, normal: &Vector3<f64>, mu: f64, tol: f64) -> bool {
    let fn_ = -f.dot(normal);
    let ft = (f + normal * fn_).norm();
    ft <= mu * fn_ + tol
}

/// Wrench map `[I I I; [r1]× [r2]× [r3]×]` with positions about the
/// contact centroid.
fn wrench_matrix(triple: &ContactTriple) -> DMatrix<f64> {
    let c = triple.centroid();
    let mut a = DMatrix::zeros(6, 9);
    for (i, ct) in triple.contacts.iter().enumerate() {
        let r = ct.position - c;
        a.view_mut((0, 3 * i), (3, 3)).copy_from(&Matrix3::identity());
        a.view_mut((3, 3 * i), (3, 3)).copy_from(&r.cross_matrix());
    }
    a
}

/// The dynamic-feasibility QP of a triple: `H = 2 AᵀA`, no linear term,
/// fifteen pyramid rows.
pub fn dynamic_qp_problem(triple: &ContactTriple, params: &FrictionParams) -> QpProblem {
    let a = wrench_matrix(triple);
    let h = a.transpose() * &a * 2.0;
    let mut rows = DMatrix::zeros(15, 9);
    let mut b = DVector::zeros(15);
    for (i, c) in triple.contacts.iter().enumerate() {
        for (k, (row, rhs)) in friction_pyramid_constraints(c, params).iter().enumerate() {
            let r = ROWS_PER_CONTACT * i + k;
            for d in 0..3 {
                rows[(r, 3 * i + d)] = row[d];
            }
            b[r] = *rhs;
        }
    }
    QpProblem { h, g: DVector::zeros(9), c: 0.0, a: rows, b }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QpStatus {
    Optimal,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WrenchQPResult {
    /// ‖Σ f_i‖² + ‖Σ (p_i − c) × f_i‖² at the optimum.
    pub value: f64,
    pub forces: [Vector3<f64>; 3],
    pub duals: [f64; 15],
    pub slacks: [f64; 15],
    pub active_set: Vec<usize>,
    pub status: QpStatus,
    pub iterations: usize,
}

impl WrenchQPResult {
    pub fn force_sum(&self) -> Vector3<f64> {
        self.forces.iter().sum()
    }
}

/// Solves the dynamic-feasibility QP from the feasible start
/// `f_i = −f_min n_i`.
///
/// The problem is homogeneous in `f_min`: it is solved at `f_min = 1` and
/// forces, duals and slacks are scaled by `f_min`, the value by `f_min²`.
pub fn solve_dynamic_qp(triple: &ContactTriple, params: &FrictionParams) -> Result<WrenchQPResult, WrenchError> {
    let unit = FrictionParams { mu: params.mu, f_min: 1.0 };
    let problem = dynamic_qp_problem(triple, &unit);
    let mut x0 = DVector::zeros(9);
    for (i, c) in triple.contacts.iter().enumerate() {
        x0.rows_mut(3 * i, 3).copy_from(&(-c.normal));
    }
    let sol = solve_qp(&problem, &QpOptions { start: Some(x0), ..QpOptions::default() })?;
    let s = params.f_min;
    let x = &sol.x * s;
    let forces = [0, 1, 2].map(|i| Vector3::new(x[3 * i], x[3 * i + 1], x[3 * i + 2]));
    let value = (wrench_matrix(triple) * &x).norm_squared();
    let mut duals = [0.0; 15];
    let mut slacks = [0.0; 15];
    for i in 0..15 {
        duals[i] = sol.duals[i] * s;
        slacks[i] = sol.slacks[i] * s;
    }
    Ok(WrenchQPResult {
        value,
        forces,
        duals,
        slacks,
        active_set: sol.active_set,
        status: QpStatus::Optimal,
        iterations: sol.iterations,
    })
}

pub fn is_dynamically_feasible(triple: &ContactTriple, params: &FrictionParams, tol_dyn: f64) -> Result<bool, WrenchError> {
    Ok(solve_dynamic_qp(triple, params)?.value <= tol_dyn)
}

/// Partial derivatives of J with respect to contact positions and normals.
/// Tangent dependence is folded into the normal derivative through the
/// pivot-rule basis.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ParamGradient {
    pub d_position: [Vector3<f64>; 3],
    pub d_normal: [Vector3<f64>; 3],
    /// Strict complementarity fails on some row.
    pub degenerate_active_set: bool,
    /// Some normal sits within 1e-6 of a tangent pivot switch.
    pub pivot_tie: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ValueGradient {
    pub gradient: DVector<f64>,
    pub degenerate_active_set: bool,
    pub pivot_tie: bool,
}

impl ValueGradient {
    pub fn flagged(&self) -> bool {
        self.degenerate_active_set || self.pivot_tie
    }
}

/// Envelope-theorem derivatives of J at the QP solution.
pub fn value_gradient_params(triple: &ContactTriple, params: &FrictionParams, result: &WrenchQPResult) -> ParamGradient {
    let f = result.forces;
    let total = result.force_sum();
    let c = triple.centroid();
    let tau: Vector3<f64> = (0..3).map(|i| (triple.contacts[i].position - c).cross(&f[i])).sum();
    let lam = &result.duals;

    let lam_max = lam.iter().fold(0.0f64, |m, &l| m.max(l));
    let zero_value = result.value <= 1e-14 * params.f_min * params.f_min;
    let mut degenerate = false;
    if !zero_value {
        let slack_tol = 1e-9 * params.f_min;
        let lam_tol = 1e-7 * lam_max;
        for i in 0..15 {
            if result.slacks[i].abs() <= slack_tol && lam[i] <= lam_tol {
                degenerate = true;
            }
        }
    }

    let mut d_position = [Vector3::zeros(); 3];
    let mut d_normal = [Vector3::zeros(); 3];
    let mut pivot_tie = false;
    for k in 0..3 {
        let ct = &triple.contacts[k];
        let gk = f[k] - total / 3.0;
        d_position[k] = 2.0 * gk.cross(&tau);
        let l = &lam[ROWS_PER_CONTACT * k..ROWS_PER_CONTACT * (k + 1)];
        let dn = f[k] * (l[0] + params.mu * (l[1] + l[2] + l[3] + l[4]));
        let dt1 = f[k] * (l[1] - l[2]);
        let dt2 = f[k] * (l[3] - l[4]);
        let (j1, j2) = tangent_basis_jacobian(&ct.normal);
        d_normal[k] = dn + j1.transpose() * dt1 + j2.transpose() * dt2;
        if !zero_value && pivot_margin(&ct.normal) < 1e-6 {
            pivot_tie = true;
        }
    }
    if zero_value {
        d_position = [Vector3::zeros(); 3];
        d_normal = [Vector3::zeros(); 3];
    }
    ParamGradient { d_position, d_normal, degenerate_active_set: degenerate, pivot_tie }
}

/// ∇_q J from per-contact position Jacobians `∂p_i/∂q` (3×nq) and, unless
/// normals are frozen, normal Jacobians `∂n_i/∂q`.
pub fn value_gradient(
    triple: &ContactTriple,
    params: &FrictionParams,
    result: &WrenchQPResult,
    position_jacobians: &[DMatrix<f64>; 3],
    normal_jacobians: Option<&[DMatrix<f64>; 3]>,
) -> ValueGradient {
    let pg = value_gradient_params(triple, params, result);
    let nq = position_jacobians[0].ncols();
    let mut grad = DVector::zeros(nq);
    for k in 0..3 {
        let dp = DVector::from_column_slice(pg.d_position[k].as_slice());
        grad += position_jacobians[k].transpose() * dp;
        if let Some(nj) = normal_jacobians {
            let dn = DVector::from_column_slice(pg.d_normal[k].as_slice());
            grad += nj[k].transpose() * dn;
        }
    }
    ValueGradient { gradient: grad, degenerate_active_set: pg.degenerate_active_set, pivot_tie: pg.pivot_tie }
}

/// Certified lower bound on J from a separating direction.
///
/// If every normal makes an angle with `v` steep enough that no pyramid
/// force can have a positive component along `v`, each contact pushes at
/// least `f_min (n_i·v − √2 μ ‖n_i × v‖)` against `v`, and the net force
/// cannot vanish. Candidate directions are the normals, their pairwise
/// sums and their mean; the best bound is returned (0 when none applies).
pub fn half_space_lower_bound(triple: &ContactTriple, params: &FrictionParams) -> f64 {
    let n = triple.contacts.map(|c| c.normal);
    let mut dirs = vec![n[0], n[1], n[2], n[0] + n[1], n[0] + n[2], n[1] + n[2], n[0] + n[1] + n[2]];
    dirs.retain(|d| d.norm() > 1e-9);
    let slope = std::f64::consts::SQRT_2 * params.mu;
    let mut best = 0.0f64;
    for d in dirs {
        let v = d.normalize();
        let mut push = 0.0;
        let mut ok = true;
        for ni in &n {
            let c = ni.dot(&v) - slope * ni.cross(&v).norm();
            if c <= 0.0 {
                ok = false;
                break;
            }
            push += c;
        }
        if ok {
            best = best.max((params.f_min * push).powi(2));
        }
    }
    best
}

/// Force and torque ratios in percent; `None` marks an undefined ratio
/// (vanishing denominator with a non-vanishing numerator).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WrenchRatios {
    pub force_ratio: Option<f64>,
    pub torque_ratio: Option<f64>,
}

fn ratio(num: f64, den: f64) -> Option<f64> {
    if den < 1e-12 {
        (num < 1e-12).then_some(0.0)
    } else {
        Some(num / den * 100.0)
    }
}

/// `‖Σf‖ / (⅓Σ‖f_i‖)` and `‖Σr×f‖ / (⅓Σ‖r_i×f_i‖)`, in percent, with
/// lever arms `r_i` taken about the contact centroid.
pub fn force_torque_ratios(triple: &ContactTriple, forces: &[Vector3<f64>; 3]) -> WrenchRatios {
    let c = triple.centroid();
    let f_sum: Vector3<f64> = forces.iter().sum();
    let f_mean = forces.iter().map(|f| f.norm()).sum::<f64>() / 3.0;
    let torques: Vec<Vector3<f64>> = (0..3).map(|i| (triple.contacts[i].position - c).cross(&forces[i])).collect();
    let t_sum: Vector3<f64> = torques.iter().sum();
    let t_mean = torques.iter().map(|t| t.norm()).sum::<f64>() / 3.0;
    WrenchRatios { force_ratio: ratio(f_sum.norm(), f_mean), torque_ratio: ratio(t_sum.norm(), t_mean) }
}
