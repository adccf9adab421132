//! Upper-level refinement: drive `J(q)` to zero while keeping fingertips
//! in the surface band and the hand clear of object and table.

use std::io::Write;

use nalgebra::{DMatrix, Point3};
use serde::{Deserialize, Serialize};

use crate::geometry::{ContactPoint, Environment, SurfaceModel};
use crate::kinematics::ik::{D_MAX, D_MIN};
use crate::kinematics::{
    fingertip_jacobian, forward_kinematics, sphere_clearances_with_gradients, HandConfiguration, HandModel, QVector,
    N_JOINTS, N_WRIST, NQ,
};
use crate::wrench::{
    solve_dynamic_qp, value_gradient, ContactTriple, FrictionParams, Provenance, WrenchQPResult, DEFAULT_TOL_DYN,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefineOptions {
    pub friction: FrictionParams,
    pub tol_dyn: f64,
    pub tol_surface: f64,
    pub tol_collision: f64,
    pub d_min: f64,
    pub d_max: f64,
    pub max_outer_iterations: usize,
    pub max_inner_iterations: usize,
    pub initial_penalty: f64,
    pub penalty_growth: f64,
    /// Starting multiplier on J.
    pub initial_dyn_multiplier: f64,
    pub step_tolerance: f64,
    pub armijo: f64,
    pub max_backtracks: usize,
    /// Friction coefficient used internally, as a fraction of `friction.mu`.
    pub mu_margin: f64,
    /// Internal shrink of the surface band on each side (m).
    pub band_shrink: f64,
    /// Internal clearance target (m).
    pub collision_margin: f64,
    /// Drop the J row entirely (kinematics-only refinement).
    pub dynamics: bool,
    /// Ignore the normals' dependence on q in the gradient of J.
    pub freeze_normals: bool,
    /// Value of J under the internal friction margin, in units of
    /// `f_min²`, at which refinement stops early.
    pub dyn_target: f64,
}

impl Default for RefineOptions {
    fn default() -> Self {
        RefineOptions {
            friction: FrictionParams::default(),
            tol_dyn: DEFAULT_TOL_DYN,
            tol_surface: 0.001,
            tol_collision: 0.001,
            d_min: D_MIN,
            d_max: D_MAX,
            max_outer_iterations: 8,
            max_inner_iterations: 200,
            initial_penalty: 10.0,
            penalty_growth: 5.0,
            initial_dyn_multiplier: 100.0,
            step_tolerance: 1e-10,
            armijo: 1e-4,
            max_backtracks: 40,
            mu_margin: 0.8,
            band_shrink: 0.0004,
            collision_margin: 0.0005,
            dynamics: true,
            freeze_normals: false,
            dyn_target: 1e-12,
        }
    }
}

impl RefineOptions {
    pub fn validate(&self) -> Result<(), String> {
        let positive = [self.tol_dyn, self.dyn_target, self.tol_surface, self.tol_collision, self.initial_penalty, self.step_tolerance];
        if positive.iter().any(|v| !(*v > 0.0)) {
            return Err("tolerances and penalty must be positive".into());
        }
        if !(self.penalty_growth > 1.0) {
            return Err("penalty growth must exceed 1".into());
        }
        if !(self.d_min < self.d_max) {
            return Err("d_min must be below d_max".into());
        }
        if !(self.mu_margin > 0.0 && self.mu_margin <= 1.0) {
            return Err("mu_margin must lie in (0, 1]".into());
        }
        Ok(())
    }
}

/// What the constraint rows are measured against.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConstraintParams {
    pub friction: FrictionParams,
    pub d_min: f64,
    pub d_max: f64,
    /// Clearance below which `r_col` is positive.
    pub collision_margin: f64,
    /// Treat contact normals as constant when differentiating J.
    pub freeze_normals: bool,
}

impl ConstraintParams {
    /// The constraints exactly as certified.
    pub fn exact(opts: &RefineOptions) -> Self {
        ConstraintParams {
            friction: opts.friction,
            d_min: opts.d_min,
            d_max: opts.d_max,
            collision_margin: 0.0,
            freeze_normals: opts.freeze_normals,
        }
    }

    /// The tightened set the optimizer works on.
    fn internal(opts: &RefineOptions) -> Self {
        let shrink = opts.band_shrink.min(0.25 * (opts.d_max - opts.d_min));
        ConstraintParams {
            friction: FrictionParams { mu: opts.friction.mu * opts.mu_margin, f_min: opts.friction.f_min },
            d_min: opts.d_min + shrink,
            d_max: opts.d_max - shrink,
            collision_margin: opts.collision_margin,
            freeze_normals: opts.freeze_normals,
        }
    }
}

/// Residuals and their gradients with respect to q.
#[derive(Debug, Clone, PartialEq)]
pub struct ConstraintEval {
    pub r_dyn: f64,
    pub r_surf: [f64; 3],
    /// Two rows per collision sphere: object, then table.
    pub r_col: Vec<f64>,
    pub r_lim: [f64; N_JOINTS],
    pub grad_dyn: QVector,
    pub grad_surf: [QVector; 3],
    pub grad_col: Vec<QVector>,
    /// The dynamic row's gradient is not trustworthy (degenerate active
    /// set, tangent pivot tie or degenerate normal).
    pub dyn_flagged: bool,
    pub fingertips: [Point3<f64>; 3],
    pub depths: [f64; 3],
    pub contacts: Option<ContactTriple>,
    pub qp: Option<WrenchQPResult>,
}

impl ConstraintEval {
    pub fn max_surf(&self) -> f64 {
        self.r_surf.iter().copied().fold(0.0, f64::max)
    }

    pub fn max_col(&self) -> f64 {
        self.r_col.iter().copied().fold(0.0, f64::max)
    }

    pub fn max_lim(&self) -> f64 {
        self.r_lim.iter().copied().fold(0.0, f64::max)
    }
}

/// Contacts at the fingertips with field normals there, plus the normal
/// Jacobians with respect to the fingertip positions.
fn fingertip_contacts(model: &SurfaceModel, tips: &[Point3<f64>; 3]) -> Option<(ContactTriple, [nalgebra::Matrix3<f64>; 3])> {
    let mut contacts = Vec::with_capacity(3);
    let mut jacs = [nalgebra::Matrix3::zeros(); 3];
    for (i, p) in tips.iter().enumerate() {
        let (n, j) = model.surface_normal_with_jacobian(p).ok()?;
        contacts.push(ContactPoint::new(*p, n).ok()?);
        jacs[i] = j;
    }
    let triple = ContactTriple::new([contacts[0], contacts[1], contacts[2]], Provenance::FromFk).ok()?;
    Some((triple, jacs))
}

/// Worst-case value used when the QP cannot be set up (same-normal bound).
fn fallback_dyn(f: &FrictionParams) -> f64 {
    9.0 * f.f_min * f.f_min
}

pub fn evaluate_constraints(
    hand: &HandModel,
    model: &SurfaceModel,
    env: &Environment,
    q: &HandConfiguration,
    params: &ConstraintParams,
) -> ConstraintEval {
    evaluate(hand, model, env, q, params, true)
}

fn evaluate(
    hand: &HandModel,
    model: &SurfaceModel,
    env: &Environment,
    q: &HandConfiguration,
    params: &ConstraintParams,
    dynamics: bool,
) -> ConstraintEval {
    let fk = forward_kinematics(hand, q);
    let tip_jacs = [0, 1, 2].map(|i| fingertip_jacobian(hand, q, &fk, i));

    let mut r_surf = [0.0; 3];
    let mut grad_surf = [QVector::zeros(); 3];
    let mut depths = [0.0; 3];
    for i in 0..3 {
        let (d, g) = model.signed_distance_with_gradient(&fk.fingertips[i]);
        depths[i] = d;
        if d > params.d_max {
            r_surf[i] = d - params.d_max;
            grad_surf[i] = tip_jacs[i].transpose() * g;
        } else if d < params.d_min {
            r_surf[i] = params.d_min - d;
            grad_surf[i] = -(tip_jacs[i].transpose() * g);
        }
    }

    let mut r_col = Vec::new();
    let mut grad_col = Vec::new();
    for c in sphere_clearances_with_gradients(hand, q, &fk, model, env) {
        match (c.clearance.object, c.object_grad) {
            (Some(d), Some(g)) if d < params.collision_margin => {
                r_col.push(params.collision_margin - d);
                grad_col.push(-g);
            }
            _ => {
                r_col.push(0.0);
                grad_col.push(QVector::zeros());
            }
        }
        if c.clearance.table < params.collision_margin {
            r_col.push(params.collision_margin - c.clearance.table);
            grad_col.push(-c.table_grad);
        } else {
            r_col.push(0.0);
            grad_col.push(QVector::zeros());
        }
    }

    let mut r_lim = [0.0; N_JOINTS];
    for (j, joint) in hand.joints.iter().enumerate() {
        let v = q.q[N_WRIST + j];
        r_lim[j] = (joint.lower - v).max(v - joint.upper).max(0.0);
    }

    let mut r_dyn = 0.0;
    let mut grad_dyn = QVector::zeros();
    let mut dyn_flagged = false;
    let mut contacts = None;
    let mut qp = None;
    if dynamics {
        match fingertip_contacts(model, &fk.fingertips) {
            Some((triple, njac)) => match solve_dynamic_qp(&triple, &params.friction) {
                Ok(res) => {
                    let pos: [DMatrix<f64>; 3] = tip_jacs.map(|j| DMatrix::from_column_slice(3, NQ, j.as_slice()));
                    let nrm: [DMatrix<f64>; 3] = [0, 1, 2].map(|i| {
                        let m = njac[i] * tip_jacs[i];
                        DMatrix::from_column_slice(3, NQ, m.as_slice())
                    });
                    let vg = value_gradient(&triple, &params.friction, &res, &pos, (!params.freeze_normals).then_some(&nrm));
                    r_dyn = res.value;
                    grad_dyn = QVector::from_column_slice(vg.gradient.as_slice());
                    dyn_flagged = vg.flagged();
                    contacts = Some(triple);
                    qp = Some(res);
                }
                Err(_) => {
                    r_dyn = fallback_dyn(&params.friction);
                    dyn_flagged = true;
                    contacts = Some(triple);
                }
            },
            None => {
                r_dyn = fallback_dyn(&params.friction);
                dyn_flagged = true;
            }
        }
    }

    ConstraintEval {
        r_dyn,
        r_surf,
        r_col,
        r_lim,
        grad_dyn,
        grad_surf,
        grad_col,
        dyn_flagged,
        fingertips: fk.fingertips,
        depths,
        contacts,
        qp,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RefineStatus {
    Feasible,
    Infeasible,
    MaxIterations,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResidualKind {
    Dynamic,
    Surface,
    Collision,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub r_dyn: f64,
    pub max_r_surf: f64,
    pub max_r_col: f64,
    /// Residual with the largest value relative to its tolerance.
    pub dominating: ResidualKind,
    pub dominating_ratio: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub outer: usize,
    pub inner: usize,
    pub merit: f64,
    pub r_dyn: f64,
    pub max_r_surf: f64,
    pub max_r_col: f64,
    pub step_norm: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RefineOutcome {
    pub status: RefineStatus,
    /// `q*` when feasible, otherwise the best iterate.
    pub q: HandConfiguration,
    pub diagnostics: Diagnostics,
    pub trace: Vec<TraceRow>,
}

pub fn write_trace_csv(trace: &[TraceRow], mut out: impl Write) -> std::io::Result<()> {
    writeln!(out, "outer,inner,merit,r_dyn,max_r_surf,max_r_col,step_norm")?;
    for r in trace {
        writeln!(
            out,
            "{},{},{:e},{:e},{:e},{:e},{:e}",
            r.outer, r.inner, r.merit, r.r_dyn, r.max_r_surf, r.max_r_col, r.step_norm
        )?;
    }
    Ok(())
}

fn diagnostics(e: &ConstraintEval, opts: &RefineOptions) -> Diagnostics {
    let levels = [
        (ResidualKind::Dynamic, if opts.dynamics { e.r_dyn / opts.tol_dyn } else { 0.0 }),
        (ResidualKind::Surface, e.max_surf() / opts.tol_surface),
        (ResidualKind::Collision, e.max_col() / opts.tol_collision),
    ];
    let (mut dominating, mut ratio) = (ResidualKind::None, 0.0);
    for (k, v) in levels {
        if v > ratio {
            dominating = k;
            ratio = v;
        }
    }
    Diagnostics { r_dyn: e.r_dyn, max_r_surf: e.max_surf(), max_r_col: e.max_col(), dominating, dominating_ratio: ratio }
}

/// Independent check of the certified constraint set: fresh FK, SDF and QP.
/// With `strict`, the band and clearance must hold without tolerance.
pub fn satisfies_constraints(
    hand: &HandModel,
    model: &SurfaceModel,
    env: &Environment,
    q: &HandConfiguration,
    opts: &RefineOptions,
    strict: bool,
) -> bool {
    let e = evaluate(hand, model, env, q, &ConstraintParams::exact(opts), opts.dynamics);
    let (ts, tc) = if strict { (0.0, 0.0) } else { (opts.tol_surface, opts.tol_collision) };
    let dyn_ok = !opts.dynamics || (e.qp.is_some() && e.r_dyn <= opts.tol_dyn);
    dyn_ok && e.max_surf() <= ts && e.max_col() <= tc && e.max_lim() <= 1e-9
}

/// Early-exit test: the certified set holds without tolerance and the
/// internal J has reached its target.
fn converged(
    hand: &HandModel,
    model: &SurfaceModel,
    env: &Environment,
    q: &HandConfiguration,
    internal_eval: &ConstraintEval,
    opts: &RefineOptions,
) -> bool {
    let target = opts.dyn_target * opts.friction.f_min * opts.friction.f_min;
    (!opts.dynamics || (internal_eval.qp.is_some() && internal_eval.r_dyn <= target))
        && satisfies_constraints(hand, model, env, q, opts, true)
}

/// Multipliers and penalty of the augmented Lagrangian.
struct Merit {
    rho: f64,
    lam_dyn: f64,
    lam_surf: [f64; 3],
    lam_col: Vec<f64>,
}

impl Merit {
    fn value(&self, e: &ConstraintEval, opts: &RefineOptions) -> f64 {
        let term = |lam: f64, s: f64| lam * s + 0.5 * self.rho * s * s;
        let mut m = 0.0;
        if opts.dynamics {
            m += term(self.lam_dyn, e.r_dyn);
        }
        for i in 0..3 {
            m += term(self.lam_surf[i], e.r_surf[i] / opts.tol_surface);
        }
        for (k, r) in e.r_col.iter().enumerate() {
            m += term(self.lam_col[k], r / opts.tol_collision);
        }
        m
    }

    fn gradient(&self, e: &ConstraintEval, opts: &RefineOptions) -> QVector {
        let mut g = QVector::zeros();
        if opts.dynamics {
            g += e.grad_dyn * (self.lam_dyn + self.rho * e.r_dyn);
        }
        for i in 0..3 {
            let s = e.r_surf[i] / opts.tol_surface;
            g += e.grad_surf[i] * ((self.lam_surf[i] + self.rho * s) / opts.tol_surface);
        }
        for (k, r) in e.r_col.iter().enumerate() {
            let s = r / opts.tol_collision;
            if s > 0.0 {
                g += e.grad_col[k] * ((self.lam_col[k] + self.rho * s) / opts.tol_collision);
            }
        }
        g
    }

    fn update(&mut self, e: &ConstraintEval, opts: &RefineOptions) {
        self.lam_dyn += self.rho * e.r_dyn;
        for i in 0..3 {
            self.lam_surf[i] += self.rho * e.r_surf[i] / opts.tol_surface;
        }
        for (k, r) in e.r_col.iter().enumerate() {
            self.lam_col[k] += self.rho * r / opts.tol_collision;
        }
        self.rho *= opts.penalty_growth;
    }
}

struct Space {
    free: Vec<usize>,
    lower: Vec<f64>,
    upper: Vec<f64>,
}

impl Space {
    fn new(hand: &HandModel) -> Self {
        let mut free = Vec::new();
        let mut lower = Vec::new();
        let mut upper = Vec::new();
        for k in 0..N_WRIST {
            free.push(k);
            lower.push(f64::NEG_INFINITY);
            upper.push(f64::INFINITY);
        }
        for (j, joint) in hand.joints.iter().enumerate() {
            if joint.locked.is_none() {
                free.push(N_WRIST + j);
                lower.push(joint.lower);
                upper.push(joint.upper);
            }
        }
        Space { free, lower, upper }
    }

    fn project(&self, q: &HandConfiguration, step: &[f64], alpha: f64) -> HandConfiguration {
        let mut out = *q;
        for (k, &idx) in self.free.iter().enumerate() {
            out.q[idx] = (q.q[idx] + alpha * step[k]).clamp(self.lower[k], self.upper[k]);
        }
        out.canonicalize();
        out
    }

    fn reduce(&self, g: &QVector) -> Vec<f64> {
        self.free.iter().map(|&i| g[i]).collect()
    }

    /// Zeroes gradient entries whose descent direction leaves the box.
    fn mask(&self, q: &HandConfiguration, g: &mut [f64]) {
        for (k, &idx) in self.free.iter().enumerate() {
            let x = q.q[idx];
            if (x <= self.lower[k] && g[k] > 0.0) || (x >= self.upper[k] && g[k] < 0.0) {
                g[k] = 0.0;
            }
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Augmented-Lagrangian refinement with a projected BFGS inner loop.
pub fn refine_grasp(
    hand: &HandModel,
    model: &SurfaceModel,
    env: &Environment,
    seed: &HandConfiguration,
    opts: &RefineOptions,
) -> RefineOutcome {
    let exact = ConstraintParams::exact(opts);
    let internal = ConstraintParams::internal(opts);
    let space = Space::new(hand);
    let mut q = *seed;
    q.canonicalize();
    let mut trace = Vec::new();

    let report = |q: &HandConfiguration, status: RefineStatus, trace: Vec<TraceRow>| {
        let e = evaluate(hand, model, env, q, &exact, opts.dynamics);
        RefineOutcome { status, q: *q, diagnostics: diagnostics(&e, opts), trace }
    };
    let mut e = evaluate(hand, model, env, &q, &internal, opts.dynamics);
    if converged(hand, model, env, &q, &e, opts) {
        return report(&q, RefineStatus::Feasible, trace);
    }
    let mut merit = Merit {
        rho: opts.initial_penalty,
        lam_dyn: opts.initial_dyn_multiplier,
        lam_surf: [0.0; 3],
        lam_col: vec![0.0; e.r_col.len()],
    };
    let mut round_levels: Vec<f64> = Vec::new();
    let n = space.free.len();

    for outer in 0..opts.max_outer_iterations {
        let mut m = merit.value(&e, opts);
        let mut g = space.reduce(&merit.gradient(&e, opts));
        space.mask(&q, &mut g);
        let mut h: Option<DMatrix<f64>> = None;
        trace.push(TraceRow {
            outer,
            inner: 0,
            merit: m,
            r_dyn: e.r_dyn,
            max_r_surf: e.max_surf(),
            max_r_col: e.max_col(),
            step_norm: 0.0,
        });
        for inner in 1..=opts.max_inner_iterations {
            let gnorm = dot(&g, &g).sqrt();
            if gnorm == 0.0 {
                break;
            }
            let hm = h.get_or_insert_with(|| DMatrix::identity(n, n) * (0.01 / gnorm));
            let gv = nalgebra::DVector::from_column_slice(&g);
            let mut d: Vec<f64> = (-(&*hm * &gv)).iter().copied().collect();
            space.mask(&q, &mut d);
            if dot(&d, &g) >= 0.0 {
                *hm = DMatrix::identity(n, n) * (0.01 / gnorm);
                d = g.iter().map(|x| -x * 0.01 / gnorm).collect();
            }
            let mut alpha = if e.dyn_flagged { 0.5 } else { 1.0 };
            let mut accepted = None;
            for _ in 0..opts.max_backtracks {
                let trial = space.project(&q, &d, alpha);
                let dq: Vec<f64> = space.free.iter().map(|&i| trial.q[i] - q.q[i]).collect();
                let te = evaluate(hand, model, env, &trial, &internal, opts.dynamics);
                let tm = merit.value(&te, opts);
                if tm <= m + opts.armijo * dot(&g, &dq) && tm < m {
                    accepted = Some((trial, te, tm, dq));
                    break;
                }
                alpha *= 0.5;
            }
            let Some((trial, te, tm, dq)) = accepted else { break };
            let step_norm = dot(&dq, &dq).sqrt();
            let mut g_new = space.reduce(&merit.gradient(&te, opts));
            space.mask(&trial, &mut g_new);
            let y: Vec<f64> = g_new.iter().zip(&g).map(|(a, b)| a - b).collect();
            let sy = dot(&dq, &y);
            if sy > 1e-12 * dot(&dq, &dq).sqrt() * dot(&y, &y).sqrt() && sy > 0.0 {
                let s = nalgebra::DVector::from_column_slice(&dq);
                let yv = nalgebra::DVector::from_column_slice(&y);
                let hy = &*hm * &yv;
                let rho_b = 1.0 / sy;
                let yhy = yv.dot(&hy);
                *hm += (&s * s.transpose()) * (rho_b * (1.0 + rho_b * yhy))
                    - (&hy * s.transpose() + &s * hy.transpose()) * rho_b;
            }
            q = trial;
            e = te;
            m = tm;
            g = g_new;
            trace.push(TraceRow {
                outer,
                inner,
                merit: m,
                r_dyn: e.r_dyn,
                max_r_surf: e.max_surf(),
                max_r_col: e.max_col(),
                step_norm,
            });
            if converged(hand, model, env, &q, &e, opts) {
                return report(&q, RefineStatus::Feasible, trace);
            }
            if step_norm < opts.step_tolerance {
                break;
            }
        }
        let exact_eval = evaluate(hand, model, env, &q, &exact, opts.dynamics);
        round_levels.push(diagnostics(&exact_eval, opts).dominating_ratio);
        merit.update(&e, opts);
    }

    if satisfies_constraints(hand, model, env, &q, opts, false) {
        return report(&q, RefineStatus::Feasible, trace);
    }
    let out = report(&q, RefineStatus::MaxIterations, trace);
    let k = round_levels.len();
    let stalled = k >= 3 && {
        let (a, b) = (round_levels[k - 3], round_levels[k - 1]);
        a <= 0.0 || (a - b) / a < 0.01
    };
    if out.diagnostics.dominating_ratio > 10.0 && stalled {
        return RefineOutcome { status: RefineStatus::Infeasible, ..out };
    }
    out
}
