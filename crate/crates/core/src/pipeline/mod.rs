//! End-to-end grasp planning: propose, project, IK, refine, certify.

pub mod cli;

use std::path::Path;

use nalgebra::{Isometry3, Point3, Quaternion, Translation3, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bilevel::{evaluate_constraints, refine_grasp, ConstraintParams, RefineOptions, RefineStatus, TraceRow};
use crate::geometry::io::{load_geometry, LoadedGeometry};
use crate::geometry::{
    default_poisson_radius, poisson_disk_sample, ContactPoint, Environment, GeometryError, SurfaceModel, TriMesh,
    DEFAULT_GRID_RESOLUTION,
};
use crate::kinematics::ik::{D_MAX, D_MIN, DEFAULT_EPSILON};
use crate::kinematics::{
    fingertip_jacobian, forward_kinematics, solve_ik, HandConfiguration, HandModel, IkOptions, KinematicsError,
    N_JOINTS, N_WRIST,
};
use crate::proposal::{assign_fingers, propose_contact_triples, Proposal, ProposalConfig, ProposalError, ASSIGNMENTS};
use crate::wrench::{force_torque_ratios, ContactTriple, FrictionParams, Provenance};

pub const PLAN_VERSION: &str = "gf_plan_v1";
pub const DEFAULT_SQUEEZE_STIFFNESS: f64 = 0.02;
pub const DEFAULT_MAX_REJECTIONS: usize = 32;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("no usable geometry: {0}")]
    NoGeometry(String),
    #[error("no certified grasp after {} rejected proposals", .0.rejected)]
    Exhausted(RejectionCounts),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Kinematics(#[from] KinematicsError),
    #[error(transparent)]
    Proposal(#[from] ProposalError),
    #[error("plan file: {0}")]
    Plan(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub friction: FrictionParams,
    pub epsilon: f64,
    pub d_min: f64,
    pub d_max: f64,
    /// Squeeze stiffness (rad per N·m of transposed-Jacobian force).
    pub squeeze_k: f64,
    pub proposal: ProposalConfig,
    pub refine: RefineOptions,
    pub rng_seed: u64,
    pub max_rejections: usize,
    pub n_grasps: usize,
    pub n_orientation_inits: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            friction: FrictionParams::default(),
            epsilon: DEFAULT_EPSILON,
            d_min: D_MIN,
            d_max: D_MAX,
            squeeze_k: DEFAULT_SQUEEZE_STIFFNESS,
            proposal: ProposalConfig::default(),
            refine: RefineOptions::default(),
            rng_seed: 0,
            max_rejections: DEFAULT_MAX_REJECTIONS,
            n_grasps: 1,
            n_orientation_inits: 6,
        }
    }
}

impl PipelineConfig {
    pub fn with_seed(seed: u64) -> Self {
        PipelineConfig { rng_seed: seed, ..Default::default() }
    }

    /// Copies the shared parameters into the embedded stage configs.
    pub fn resolved(&self) -> Result<PipelineConfig, PipelineError> {
        if self.max_rejections < 1 || self.n_grasps < 1 {
            return Err(PipelineError::InvalidConfig("max_rejections and n_grasps must be at least 1".into()));
        }
        if !(self.epsilon > 0.0) || !(self.d_min < self.d_max) || !(self.squeeze_k >= 0.0) {
            return Err(PipelineError::InvalidConfig("bad epsilon, band or squeeze stiffness".into()));
        }
        FrictionParams::new(self.friction.mu, self.friction.f_min)
            .map_err(|e| PipelineError::InvalidConfig(e.to_string()))?;
        let mut c = self.clone();
        c.proposal.friction = c.friction;
        c.proposal.rng_seed = c.rng_seed;
        c.refine.friction = c.friction;
        c.refine.d_min = c.d_min;
        c.refine.d_max = c.d_max;
        c.proposal.tol_dyn = c.refine.tol_dyn;
        c.proposal.validate()?;
        c.refine.validate().map_err(PipelineError::InvalidConfig)?;
        Ok(c)
    }

    fn ik_options(&self, seed: u64) -> IkOptions {
        IkOptions {
            epsilon: self.epsilon,
            d_min: self.d_min,
            d_max: self.d_max,
            n_orientation_inits: self.n_orientation_inits,
            rng_seed: seed,
            ..IkOptions::default()
        }
    }
}

/// Proposal-loop bookkeeping. `proposals = certified + rejected`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RejectionCounts {
    pub proposals: usize,
    pub certified: usize,
    pub rejected: usize,
    pub projection_failures: usize,
    pub ik_solves: usize,
    pub ik_failures: usize,
    pub refinements: usize,
    pub refine_infeasible: usize,
    pub refine_max_iterations: usize,
    pub certification_failures: usize,
    /// Diverse-grasp mode: proposals skipped for sharing contacts.
    pub overlap_skipped: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlanContact {
    pub p: [f64; 3],
    pub n: [f64; 3],
    pub f: [f64; 3],
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PassFlags {
    pub band: bool,
    pub ratios_finite: bool,
    pub dynamics: bool,
    pub collision: bool,
    pub limits: bool,
}

impl PassFlags {
    pub fn all(&self) -> bool {
        self.band && self.ratios_finite && self.dynamics && self.collision && self.limits
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CertificationReport {
    pub signed_distances: [f64; 3],
    pub max_band_violation: f64,
    /// Percent; `null` when undefined.
    pub force_ratio: Option<f64>,
    pub torque_ratio: Option<f64>,
    #[serde(rename = "J")]
    pub j: f64,
    pub min_collision_distance: f64,
    pub pass: PassFlags,
    pub passed: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlanStatus {
    Certified,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraspPlan {
    pub version: String,
    pub q: Vec<f64>,
    /// Thumb, index, middle.
    pub contacts: [PlanContact; 3],
    /// Proposal contact assigned to thumb, index, middle.
    pub assignment: [usize; 3],
    pub proposal_index: usize,
    /// Candidate indices of the proposal triple.
    pub proposal_contacts: [usize; 3],
    pub report: CertificationReport,
    pub status: PlanStatus,
    pub seed: u64,
}

impl GraspPlan {
    pub fn config(&self) -> Result<HandConfiguration, PipelineError> {
        HandConfiguration::from_slice(&self.q).map_err(|e| PipelineError::Plan(e.to_string()))
    }

    pub fn forces(&self) -> [Vector3<f64>; 3] {
        self.contacts.map(|c| Vector3::from(c.f))
    }

    pub fn to_json(&self) -> String {
        canonical_json(self)
    }

    pub fn from_json(text: &str) -> Result<GraspPlan, PipelineError> {
        serde_json::from_str(text).map_err(|e| PipelineError::Plan(e.to_string()))
    }
}

/// Pretty JSON with object keys sorted and floats in shortest round-trip
/// form.
pub fn canonical_json<T: Serialize>(value: &T) -> String {
    let v = serde_json::to_value(value).expect("plan types serialize");
    let mut s = serde_json::to_string_pretty(&v).expect("values serialize");
    s.push('\n');
    s
}

/// Independent certification: everything is recomputed from `q*` alone.
pub fn certify(
    plan_q: &HandConfiguration,
    model: &SurfaceModel,
    env: &Environment,
    hand: &HandModel,
    config: &PipelineConfig,
) -> (CertificationReport, [PlanContact; 3]) {
    let opts = &config.refine;
    let params = ConstraintParams {
        friction: config.friction,
        d_min: config.d_min,
        d_max: config.d_max,
        collision_margin: 0.0,
        freeze_normals: false,
    };
    let e = evaluate_constraints(hand, model, env, plan_q, &params);
    let min_collision_distance = crate::kinematics::collision_distances(hand, plan_q, model, env)
        .iter()
        .map(|c| c.distance)
        .fold(f64::INFINITY, f64::min);
    let (ratios, j, forces, normals) = match (&e.contacts, &e.qp) {
        (Some(t), Some(r)) => (force_torque_ratios(t, &r.forces), r.value, r.forces, t.contacts.map(|c| c.normal)),
        _ => (
            crate::wrench::WrenchRatios { force_ratio: None, torque_ratio: None },
            f64::INFINITY,
            [Vector3::zeros(); 3],
            [Vector3::zeros(); 3],
        ),
    };
    let max_band_violation = e.max_surf();
    let pass = PassFlags {
        band: max_band_violation <= opts.tol_surface,
        ratios_finite: ratios.force_ratio.is_some_and(f64::is_finite) && ratios.torque_ratio.is_some_and(f64::is_finite),
        dynamics: e.qp.is_some() && j <= opts.tol_dyn,
        collision: min_collision_distance >= -opts.tol_collision,
        limits: plan_q.validate(hand, 1e-9).is_ok(),
    };
    let contacts = [0, 1, 2].map(|i| PlanContact {
        p: e.fingertips[i].coords.into(),
        n: normals[i].into(),
        f: forces[i].into(),
    });
    let report = CertificationReport {
        signed_distances: e.depths,
        max_band_violation,
        force_ratio: ratios.force_ratio,
        torque_ratio: ratios.torque_ratio,
        j,
        min_collision_distance,
        pass,
        passed: pass.all(),
    };
    (report, contacts)
}

/// Recertifies a stored plan and reports whether stored and recomputed
/// values agree within `tol`.
pub fn recertify(
    plan: &GraspPlan,
    model: &SurfaceModel,
    env: &Environment,
    hand: &HandModel,
    config: &PipelineConfig,
    tol: f64,
) -> Result<(CertificationReport, bool), PipelineError> {
    let q = plan.config()?;
    let (report, contacts) = certify(&q, model, env, hand, config);
    let close = |a: f64, b: f64| (a - b).abs() <= tol || (a == b);
    let opt_close = |a: Option<f64>, b: Option<f64>| match (a, b) {
        (Some(x), Some(y)) => close(x, y),
        (None, None) => true,
        _ => false,
    };
    let s = &plan.report;
    let mut agree = (0..3).all(|i| close(s.signed_distances[i], report.signed_distances[i]))
        && close(s.max_band_violation, report.max_band_violation)
        && opt_close(s.force_ratio, report.force_ratio)
        && opt_close(s.torque_ratio, report.torque_ratio)
        && close(s.j, report.j)
        && close(s.min_collision_distance, report.min_collision_distance)
        && s.pass == report.pass;
    for i in 0..3 {
        for k in 0..3 {
            agree &= close(plan.contacts[i].p[k], contacts[i].p[k])
                && close(plan.contacts[i].n[k], contacts[i].n[k])
                && close(plan.contacts[i].f[k], contacts[i].f[k]);
        }
    }
    Ok((report, agree))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SqueezeCommand {
    pub theta: [f64; N_JOINTS],
    /// Unclamped `θ* + k Σ Jᵀ f`.
    pub raw: [f64; N_JOINTS],
    /// Joints that hit a limit.
    pub clamped: Vec<usize>,
}

/// `θ_cmd = θ* + k Σ_i (finger columns of ∇_q K_i)ᵀ f_i`, clamped to the
/// joint limits.
pub fn squeeze_command(hand: &HandModel, q: &HandConfiguration, forces: &[Vector3<f64>; 3], k: f64) -> SqueezeCommand {
    let fk = forward_kinematics(hand, q);
    let mut raw = [0.0; N_JOINTS];
    raw.copy_from_slice(q.joints());
    for (i, f) in forces.iter().enumerate() {
        let jac = fingertip_jacobian(hand, q, &fk, i);
        let tau = jac.transpose() * f;
        for j in 0..N_JOINTS {
            raw[j] += k * tau[N_WRIST + j];
        }
    }
    let mut theta = raw;
    let mut clamped = Vec::new();
    for (j, joint) in hand.joints.iter().enumerate() {
        let c = raw[j].clamp(joint.lower, joint.upper);
        if c != raw[j] {
            clamped.push(j);
        }
        theta[j] = c;
    }
    SqueezeCommand { theta, raw, clamped }
}

/// Table plane under the lowest point of the object.
pub fn table_under(model: &SurfaceModel) -> Environment {
    Environment::table_at_height(model.bounding_box.min.z)
}

/// Parses `x,y,z,qw,qx,qy,qz`.
pub fn parse_pose(text: &str) -> Result<Isometry3<f64>, PipelineError> {
    let v: Vec<f64> = text
        .split(',')
        .map(|s| s.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .map_err(|e| PipelineError::InvalidConfig(format!("pose: {e}")))?;
    if v.len() != 7 {
        return Err(PipelineError::InvalidConfig(format!("pose needs 7 numbers, got {}", v.len())));
    }
    let q = Quaternion::new(v[3], v[4], v[5], v[6]);
    if !(q.norm() > 1e-12) {
        return Err(PipelineError::InvalidConfig("pose quaternion is zero".into()));
    }
    Ok(Isometry3::from_parts(Translation3::new(v[0], v[1], v[2]), UnitQuaternion::from_quaternion(q)))
}

/// Builds the surface model of a posed object. Point clouds are wrapped by
/// their convex hull.
pub fn build_model(geometry: &LoadedGeometry, pose: &Isometry3<f64>, grid: usize) -> Result<SurfaceModel, PipelineError> {
    match geometry {
        LoadedGeometry::Mesh(m) => {
            if m.triangles.is_empty() || m.surface_area() <= 0.0 {
                return Err(PipelineError::NoGeometry("mesh has no surface".into()));
            }
            Ok(SurfaceModel::from_mesh(m.transformed(pose), grid)?)
        }
        LoadedGeometry::Cloud(points) => {
            if points.len() < 4 {
                return Err(PipelineError::NoGeometry(format!("point cloud has {} points", points.len())));
            }
            let posed: Vec<Point3<f64>> = points.iter().map(|p| pose * p).collect();
            SurfaceModel::from_point_cloud(&posed, grid).map_err(|e| PipelineError::NoGeometry(e.to_string()))
        }
    }
}

pub fn load_model(path: &Path, pose: &Isometry3<f64>) -> Result<SurfaceModel, PipelineError> {
    build_model(&load_geometry(path)?, pose, DEFAULT_GRID_RESOLUTION)
}

/// Result of a planning run.
#[derive(Debug, Clone, PartialEq)]
pub struct PlanningResult {
    pub plans: Vec<GraspPlan>,
    pub counts: RejectionCounts,
    /// Refinement trace of the last certified plan.
    pub trace: Vec<TraceRow>,
}

fn to_targets(t: &ContactTriple) -> [Point3<f64>; 3] {
    t.contacts.map(|c| c.position)
}

fn project_triple(model: &SurfaceModel, t: &ContactTriple) -> Option<ContactTriple> {
    let mut out = Vec::with_capacity(3);
    for c in &t.contacts {
        let p = model.project_to_surface(&c.position).ok()?.point;
        out.push(ContactPoint::new(p, model.surface_normal(&p).ok()?).ok()?);
    }
    ContactTriple::new([out[0], out[1], out[2]], Provenance::Projected).ok()
}

/// Rejection-sampling loop. Returns up to `n_grasps` certified plans from
/// proposals that pairwise share at most one contact, or `Exhausted` when
/// none is found before `max_rejections` proposals are rejected.
pub fn plan_grasp(
    model: &SurfaceModel,
    env: &Environment,
    hand: &HandModel,
    config: &PipelineConfig,
) -> Result<PlanningResult, PipelineError> {
    let config = config.resolved()?;
    if model.mesh.triangles.is_empty() {
        return Err(PipelineError::NoGeometry("empty mesh".into()));
    }
    let radius = config
        .proposal
        .poisson_radius
        .unwrap_or_else(|| default_poisson_radius(model.mesh.surface_area(), config.proposal.n_candidates));
    let candidates = poisson_disk_sample(model, config.proposal.n_candidates, radius, config.rng_seed, Some(env))
        .map_err(|e| match e {
            GeometryError::InsufficientSamples { found } => {
                PipelineError::NoGeometry(format!("only {found} contact candidates above the table"))
            }
            e => e.into(),
        })?;
    let mut counts = RejectionCounts::default();
    let proposals = match propose_contact_triples(&candidates, &config.proposal) {
        Ok((p, _)) => p,
        Err(ProposalError::NoFeasibleTriple { .. }) => return Err(PipelineError::Exhausted(counts)),
        Err(e) => return Err(e.into()),
    };

    let mut plans: Vec<GraspPlan> = Vec::new();
    let mut used: Vec<&Proposal> = Vec::new();
    let mut trace = Vec::new();
    for (pi, prop) in proposals.iter().enumerate() {
        if plans.len() >= config.n_grasps || counts.rejected >= config.max_rejections {
            break;
        }
        if used.iter().any(|u| u.shared_contacts(prop) > 1) {
            counts.overlap_skipped += 1;
            continue;
        }
        counts.proposals += 1;
        match try_proposal(model, env, hand, &config, prop, pi, &mut counts) {
            Some((plan, t)) => {
                counts.certified += 1;
                plans.push(plan);
                used.push(prop);
                trace = t;
            }
            None => counts.rejected += 1,
        }
    }
    if plans.is_empty() {
        return Err(PipelineError::Exhausted(counts));
    }
    Ok(PlanningResult { plans, counts, trace })
}

fn try_proposal(
    model: &SurfaceModel,
    env: &Environment,
    hand: &HandModel,
    config: &PipelineConfig,
    prop: &Proposal,
    index: usize,
    counts: &mut RejectionCounts,
) -> Option<(GraspPlan, Vec<TraceRow>)> {
    let Some(projected) = project_triple(model, &prop.triple) else {
        counts.projection_failures += 1;
        return None;
    };
    for (ai, placed) in assign_fingers(&projected).iter().enumerate() {
        counts.ik_solves += 1;
        let ik_seed = config.rng_seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ ((index as u64) << 8) ^ ai as u64;
        let targets = to_targets(placed);
        let Ok(sol) = solve_ik(hand, &targets, model, env, &config.ik_options(ik_seed)) else {
            counts.ik_failures += 1;
            continue;
        };
        counts.refinements += 1;
        let out = refine_grasp(hand, model, env, &sol.config, &config.refine);
        match out.status {
            RefineStatus::Feasible => {}
            RefineStatus::Infeasible => {
                counts.refine_infeasible += 1;
                continue;
            }
            RefineStatus::MaxIterations => {
                counts.refine_max_iterations += 1;
                continue;
            }
        }
        let (report, contacts) = certify(&out.q, model, env, hand, config);
        if !report.passed {
            counts.certification_failures += 1;
            continue;
        }
        let plan = GraspPlan {
            version: PLAN_VERSION.into(),
            q: out.q.q.to_vec(),
            contacts,
            assignment: ASSIGNMENTS[ai],
            proposal_index: index,
            proposal_contacts: prop.indices,
            report,
            status: PlanStatus::Certified,
            seed: config.rng_seed,
        };
        return Some((plan, out.trace));
    }
    None
}

/// Axis-aligned box resting on the table plane `z = 0`.
pub fn box_on_table(half_extents: Vector3<f64>) -> TriMesh {
    TriMesh::cuboid(half_extents).translated(&Vector3::new(0.0, 0.0, half_extents.z))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::OnceLock;

    fn cube() -> &'static SurfaceModel {
        static M: OnceLock<SurfaceModel> = OnceLock::new();
        M.get_or_init(|| SurfaceModel::from_mesh(box_on_table(Vector3::repeat(0.04)), 48).unwrap())
    }

    fn cube_plan() -> &'static PlanningResult {
        static P: OnceLock<PlanningResult> = OnceLock::new();
        P.get_or_init(|| {
            let model = cube();
            plan_grasp(model, &table_under(model), &HandModel::default_hand(), &PipelineConfig::with_seed(3)).unwrap()
        })
    }

    #[test]
    fn cube_plan_certifies() {
        let res = cube_plan();
        let plan = &res.plans[0];
        assert_eq!(plan.status, PlanStatus::Certified);
        assert!(plan.report.passed);
        let model = cube();
        let (report, agree) =
            recertify(plan, model, &table_under(model), &HandModel::default_hand(), &PipelineConfig::with_seed(3), 1e-9)
                .unwrap();
        assert!(agree && report.passed);
        let c = res.counts;
        assert_eq!(c.proposals, c.certified + c.rejected);
    }

    #[test]
    fn plan_json_round_trips() {
        let plan = &cube_plan().plans[0];
        let text = plan.to_json();
        let back = GraspPlan::from_json(&text).unwrap();
        assert_eq!(&back, plan);
        assert_eq!(back.to_json(), text);
    }

    #[test]
    fn perturbed_wrist_fails_certification() {
        let plan = &cube_plan().plans[0];
        let model = cube();
        let mut q = plan.config().unwrap();
        q.q[0] += 0.02;
        let (report, _) = certify(&q, model, &table_under(model), &HandModel::default_hand(), &PipelineConfig::default());
        assert!(!report.pass.band || !report.pass.collision);
        assert!(!report.passed);
    }

    #[test]
    fn squeeze_examples() {
        let hand = HandModel::default_hand();
        let plan = &cube_plan().plans[0];
        let q = plan.config().unwrap();
        let f = plan.forces();
        let theta: Vec<f64> = q.joints().to_vec();
        assert_eq!(squeeze_command(&hand, &q, &f, 0.0).theta.to_vec(), theta);
        assert_eq!(squeeze_command(&hand, &q, &[Vector3::zeros(); 3], 0.02).theta.to_vec(), theta);
        let a = squeeze_command(&hand, &q, &f, 0.01);
        let b = squeeze_command(&hand, &q, &f, 0.02);
        for j in 0..N_JOINTS {
            let (da, db) = (a.raw[j] - theta[j], b.raw[j] - theta[j]);
            assert!((db - 2.0 * da).abs() <= 1e-15 * (1.0 + db.abs()));
        }
        assert!((0..N_JOINTS).any(|j| a.raw[j] != theta[j]));
    }

    #[test]
    fn pose_parsing() {
        let p = parse_pose("0,0,0.1,1,0,0,0").unwrap();
        assert_eq!(p.translation.vector, Vector3::new(0.0, 0.0, 0.1));
        assert!(parse_pose("1,2,3").is_err());
    }

    #[test]
    fn empty_cloud_is_no_geometry() {
        let g = LoadedGeometry::Cloud(Vec::new());
        assert!(matches!(build_model(&g, &Isometry3::identity(), 32), Err(PipelineError::NoGeometry(_))));
    }
}
