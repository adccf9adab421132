//! Analytic grasp proposals: contact triples drawn from Poisson-disk
//! candidates and screened by the dynamic-feasibility QP, finger
//! assignments, and dataset generation.

use std::collections::HashMap;
use std::io::Write;

use nalgebra::{Point3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{
    default_poisson_radius, poisson_disk_sample, ContactPoint, Environment, GeometryError, SurfaceModel,
    DEFAULT_GRID_RESOLUTION,
};
use crate::kinematics::ik::check_ik;
use crate::kinematics::{solve_ik, HandModel, IkOptions};
use crate::wrench::{
    half_space_lower_bound, solve_dynamic_qp, ContactTriple, FrictionParams, Provenance, DEFAULT_TOL_DYN,
};

/// Largest contact spacing the default hand can span (m).
pub const MAX_FINGER_SPREAD: f64 = 0.15;

/// J values in the same bucket of this width rank as equal.
const J_TIE: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum ProposalError {
    #[error("no dynamically feasible triple among {evaluated} evaluated")]
    NoFeasibleTriple { evaluated: usize },
    #[error("invalid proposal config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProposalConfig {
    pub n_candidates: usize,
    /// `None` derives the radius from the surface area.
    pub poisson_radius: Option<f64>,
    pub max_triples_evaluated: usize,
    pub max_proposals_returned: usize,
    pub rng_seed: u64,
    pub friction: FrictionParams,
    pub tol_dyn: f64,
    /// Reach bounds on pairwise contact distance (m).
    pub min_contact_spacing: f64,
    pub max_contact_spread: f64,
}

impl Default for ProposalConfig {
    fn default() -> Self {
        ProposalConfig {
            n_candidates: 256,
            poisson_radius: None,
            max_triples_evaluated: 8192,
            max_proposals_returned: 256,
            rng_seed: 0,
            friction: FrictionParams::default(),
            tol_dyn: DEFAULT_TOL_DYN,
            min_contact_spacing: 0.015,
            max_contact_spread: MAX_FINGER_SPREAD,
        }
    }
}

impl ProposalConfig {
    pub fn validate(&self) -> Result<(), ProposalError> {
        if self.n_candidates < 3 {
            return Err(ProposalError::InvalidConfig("n_candidates must be at least 3".into()));
        }
        if self.max_triples_evaluated < 1 || self.max_proposals_returned < 1 {
            return Err(ProposalError::InvalidConfig("limits must be at least 1".into()));
        }
        if let Some(r) = self.poisson_radius {
            if !(r > 0.0) {
                return Err(ProposalError::InvalidConfig("poisson_radius must be positive".into()));
            }
        }
        Ok(())
    }
}

/// A feasible triple with its QP value and candidate indices.
#[derive(Debug, Clone, PartialEq)]
pub struct Proposal {
    pub triple: ContactTriple,
    pub indices: [usize; 3],
    pub value: f64,
    pub min_spacing: f64,
}

impl Proposal {
    pub fn shared_contacts(&self, other: &Proposal) -> usize {
        self.indices.iter().filter(|i| other.indices.contains(i)).count()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ProposalStats {
    pub drawn: usize,
    pub reach_rejected: usize,
    pub prefilter_rejected: usize,
    pub evaluated: usize,
    pub feasible: usize,
}

fn pair_distances(t: &[ContactPoint; 3]) -> [f64; 3] {
    [
        (t[0].position - t[1].position).norm(),
        (t[0].position - t[2].position).norm(),
        (t[1].position - t[2].position).norm(),
    ]
}

/// Unranks the `r`-th index triple `i < j < k` of `n` items in
/// lexicographic order.
fn unrank_triple(mut r: u64, n: usize) -> [usize; 3] {
    let choose2 = |m: u64| m * m.saturating_sub(1) / 2;
    let mut i = 0;
    loop {
        let rest = (n - i - 1) as u64;
        if r < choose2(rest) {
            break;
        }
        r -= choose2(rest);
        i += 1;
    }
    let mut j = i + 1;
    loop {
        let rest = (n - j - 1) as u64;
        if r < rest {
            break;
        }
        r -= rest;
        j += 1;
    }
    [i, j, j + 1 + r as usize]
}

/// Draws triples in a seed-shuffled order, screens them by reach and the
/// half-space bound, and keeps those with `J ≤ tol_dyn`.
///
/// The result starts with a greedy selection in which no two triples share
/// more than one contact, followed by the remaining feasible triples. Both
/// parts are ranked by J, then by decreasing minimum contact spacing.
pub fn propose_contact_triples(
    candidates: &[ContactPoint],
    config: &ProposalConfig,
) -> Result<(Vec<Proposal>, ProposalStats), ProposalError> {
    config.validate()?;
    let n = candidates.len();
    if n < 3 {
        return Err(ProposalError::InvalidConfig(format!("need at least 3 candidates, got {n}")));
    }
    let total = (n as u64) * (n as u64 - 1) * (n as u64 - 2) / 6;
    let mut rng = ChaCha8Rng::seed_from_u64(config.rng_seed);
    // Lazy Fisher-Yates over triple ranks.
    let mut swapped: HashMap<u64, u64> = HashMap::new();
    let mut stats = ProposalStats::default();
    let mut feasible = Vec::new();
    let mut pos = 0u64;
    while pos < total && stats.evaluated < config.max_triples_evaluated {
        let pick = rng.gen_range(pos..total);
        let r = *swapped.get(&pick).unwrap_or(&pick);
        let at_pos = *swapped.get(&pos).unwrap_or(&pos);
        swapped.insert(pick, at_pos);
        pos += 1;
        stats.drawn += 1;

        let indices = unrank_triple(r, n);
        let contacts = indices.map(|i| candidates[i]);
        let d = pair_distances(&contacts);
        let (dmin, dmax) = (d.iter().copied().fold(f64::INFINITY, f64::min), d.iter().copied().fold(0.0, f64::max));
        if dmin < config.min_contact_spacing || dmax > config.max_contact_spread {
            stats.reach_rejected += 1;
            continue;
        }
        let Ok(triple) = ContactTriple::new(contacts, Provenance::Proposed) else {
            stats.reach_rejected += 1;
            continue;
        };
        if half_space_lower_bound(&triple, &config.friction) > config.tol_dyn {
            stats.prefilter_rejected += 1;
            continue;
        }
        stats.evaluated += 1;
        let Ok(res) = solve_dynamic_qp(&triple, &config.friction) else { continue };
        if res.value <= config.tol_dyn {
            feasible.push(Proposal { triple, indices, value: res.value, min_spacing: dmin });
        }
    }
    stats.feasible = feasible.len();
    if feasible.is_empty() {
        return Err(ProposalError::NoFeasibleTriple { evaluated: stats.evaluated });
    }
    feasible.sort_by(|a, b| {
        let bucket = |v: f64| (v / J_TIE).floor() as i64;
        bucket(a.value).cmp(&bucket(b.value)).then(b.min_spacing.total_cmp(&a.min_spacing)).then(a.indices.cmp(&b.indices))
    });

    let mut diverse: Vec<Proposal> = Vec::new();
    let mut rest = Vec::new();
    for p in feasible {
        if diverse.iter().all(|q| p.shared_contacts(q) <= 1) {
            diverse.push(p);
        } else {
            rest.push(p);
        }
    }
    diverse.extend(rest);
    diverse.truncate(config.max_proposals_returned);
    Ok((diverse, stats))
}

/// Finger permutations in lexicographic order; entry `k` lists which
/// triple contact goes to the thumb, index and middle finger.
pub const ASSIGNMENTS: [[usize; 3]; 6] = [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]];

/// All six (thumb, index, middle) placements of a triple.
pub fn assign_fingers(triple: &ContactTriple) -> [ContactTriple; 6] {
    ASSIGNMENTS.map(|perm| triple.permuted(perm))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Augmentation {
    pub translation: [f64; 3],
    pub yaw: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointCloud {
    pub points: Vec<[f64; 3]>,
    pub normals: Vec<[f64; 3]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetRecord {
    pub object_id: String,
    /// `[x, y, z, qw, qx, qy, qz]`.
    pub rest_pose: [f64; 7],
    pub cloud: PointCloud,
    pub q: Vec<f64>,
    /// Contact positions in thumb, index, middle order.
    pub placement: [[f64; 3]; 3],
    #[serde(rename = "J")]
    pub j: f64,
    /// Triple contact assigned to thumb, index, middle.
    pub assignment: [usize; 3],
    pub augmentation: Vec<Augmentation>,
}

pub struct DatasetObject {
    pub id: String,
    pub model: SurfaceModel,
    pub center_of_mass: Point3<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetConfig {
    pub proposal: ProposalConfig,
    pub ik: IkOptions,
    pub grid_resolution: usize,
    pub max_proposals_per_pose: usize,
    pub max_records_per_pose: usize,
    pub augmentations_per_record: usize,
    /// Table-plane offsets drawn for augmentation are within ± this (m).
    pub augmentation_shift: f64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            proposal: ProposalConfig::default(),
            ik: IkOptions::default(),
            grid_resolution: DEFAULT_GRID_RESOLUTION,
            max_proposals_per_pose: 8,
            max_records_per_pose: 2,
            augmentations_per_record: 4,
            augmentation_shift: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectSummary {
    pub object_id: String,
    pub rest_poses: usize,
    /// Records per rest pose.
    pub records: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub records: Vec<DatasetRecord>,
    pub summaries: Vec<ObjectSummary>,
}

impl Dataset {
    /// One canonical JSON object per line.
    pub fn write_jsonl(&self, mut out: impl Write) -> Result<(), ProposalError> {
        for r in &self.records {
            let v = serde_json::to_value(r).map_err(std::io::Error::other)?;
            writeln!(out, "{}", serde_json::to_string(&v).map_err(std::io::Error::other)?)?;
        }
        Ok(())
    }
}

fn to_arr(v: &Vector3<f64>) -> [f64; 3] {
    [v.x, v.y, v.z]
}

/// Runs the dataset procedure on every object: rest poses, Poisson-disk
/// candidates without table points, feasible triples, six finger
/// assignments and IK. Each emitted record is re-validated before it is
/// kept.
pub fn generate_dataset(
    objects: &[DatasetObject],
    hand: &HandModel,
    config: &DatasetConfig,
) -> Result<Dataset, ProposalError> {
    config.proposal.validate()?;
    let env = Environment::table_at_height(0.0);
    let mut rng = ChaCha8Rng::seed_from_u64(config.proposal.rng_seed);
    let mut records = Vec::new();
    let mut summaries = Vec::new();
    for obj in objects {
        let poses = obj.model.rest_poses(&obj.center_of_mass);
        let mut counts = Vec::with_capacity(poses.len());
        for (pi, pose) in poses.iter().enumerate() {
            let seed = rng.gen::<u64>();
            let before = records.len();
            let mesh = obj.model.mesh.transformed(&pose.isometry());
            let Ok(model) = SurfaceModel::from_mesh(mesh, config.grid_resolution) else {
                counts.push(0);
                continue;
            };
            let radius = config
                .proposal
                .poisson_radius
                .unwrap_or_else(|| default_poisson_radius(model.mesh.surface_area(), config.proposal.n_candidates));
            let Ok(cloud) = poisson_disk_sample(&model, config.proposal.n_candidates, radius, seed, Some(&env)) else {
                counts.push(0);
                continue;
            };
            let pconf = ProposalConfig { rng_seed: seed, ..config.proposal.clone() };
            let proposals = match propose_contact_triples(&cloud, &pconf) {
                Ok((p, _)) => p,
                Err(ProposalError::NoFeasibleTriple { .. }) => Vec::new(),
                Err(e) => return Err(e),
            };
            let point_cloud = PointCloud {
                points: cloud.iter().map(|c| to_arr(&c.position.coords)).collect(),
                normals: cloud.iter().map(|c| to_arr(&c.normal)).collect(),
            };
            'proposals: for prop in proposals.iter().take(config.max_proposals_per_pose) {
                for (ai, placed) in assign_fingers(&prop.triple).iter().enumerate() {
                    let targets = placed.contacts.map(|c| c.position);
                    let ik = IkOptions { rng_seed: seed ^ (pi as u64) ^ ((ai as u64) << 32), ..config.ik.clone() };
                    let Ok(sol) = solve_ik(hand, &targets, &model, &env, &ik) else { continue };
                    // Independent re-validation.
                    if !check_ik(hand, &sol.config, &targets, &model, &env).passes(&ik) {
                        continue;
                    }
                    let Ok(res) = solve_dynamic_qp(placed, &config.proposal.friction) else { continue };
                    if res.value > config.proposal.tol_dyn {
                        continue;
                    }
                    let augmentation = (0..config.augmentations_per_record)
                        .map(|_| Augmentation {
                            translation: [
                                rng.gen_range(-config.augmentation_shift..=config.augmentation_shift),
                                rng.gen_range(-config.augmentation_shift..=config.augmentation_shift),
                                0.0,
                            ],
                            yaw: rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI),
                        })
                        .collect();
                    records.push(DatasetRecord {
                        object_id: obj.id.clone(),
                        rest_pose: pose.to_array(),
                        cloud: point_cloud.clone(),
                        q: sol.config.q.to_vec(),
                        placement: targets.map(|p| to_arr(&p.coords)),
                        j: res.value,
                        assignment: ASSIGNMENTS[ai],
                        augmentation,
                    });
                    if records.len() - before >= config.max_records_per_pose {
                        break 'proposals;
                    }
                }
            }
            counts.push(records.len() - before);
        }
        summaries.push(ObjectSummary { object_id: obj.id.clone(), rest_poses: poses.len(), records: counts });
    }
    Ok(Dataset { records, summaries })
}
