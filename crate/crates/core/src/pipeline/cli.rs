//! Command-line front end.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use nalgebra::Isometry3;

use super::{
    build_model, canonical_json, parse_pose, plan_grasp, recertify, squeeze_command, table_under, GraspPlan,
    PipelineConfig, PipelineError,
};
use crate::bilevel::write_trace_csv;
use crate::geometry::io::load_geometry;
use crate::geometry::{default_poisson_radius, poisson_disk_sample, DEFAULT_GRID_RESOLUTION};
use crate::kinematics::HandModel;
use crate::proposal::{generate_dataset, propose_contact_triples, DatasetConfig, DatasetObject};
use crate::wrench::FrictionParams;

const SCHEMA_HELP: &str = "\
Plan file (gf_plan_v1):
  {version, q[22], contacts[3]{p[3], n[3], f[3]}, assignment[3],
   proposal_index, proposal_contacts[3], report{...}, status, seed}
Lengths in meters, angles in radians, forces in newtons.
Exit codes: 0 success, 1 exhausted or failed thresholds, 2 input error.";

#[derive(Parser, Debug)]
#[command(name = "graspforge", version, about = "Dexterous grasp planning and certification", after_help = SCHEMA_HELP)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(ValueEnum, Debug, Clone, Copy)]
enum Units {
    M,
    Cm,
}

impl Units {
    fn factor(self) -> f64 {
        match self {
            Units::M => 1.0,
            Units::Cm => 0.01,
        }
    }
}

#[derive(Args, Debug, Clone)]
struct ObjectArgs {
    /// Object geometry (.obj or .ply).
    #[arg(long)]
    object: PathBuf,
    /// Length unit of the geometry file and pose translation.
    #[arg(long, value_enum, default_value = "m")]
    units: Units,
    /// Object pose x,y,z,qw,qx,qy,qz; the table sits under its lowest point.
    #[arg(long)]
    pose: Option<String>,
    /// Hand description JSON, or `default`.
    #[arg(long, default_value = "default")]
    hand: String,
    #[arg(long, default_value_t = 0.5)]
    mu: f64,
    #[arg(long, default_value_t = 1.0)]
    fmin: f64,
    /// SDF grid resolution along the longest axis.
    #[arg(long, default_value_t = DEFAULT_GRID_RESOLUTION)]
    grid: usize,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Plan certified grasps.
    Plan {
        #[command(flatten)]
        obj: ObjectArgs,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long = "n-grasps", default_value_t = 1)]
        n_grasps: usize,
        #[arg(long = "max-rejections", default_value_t = super::DEFAULT_MAX_REJECTIONS)]
        max_rejections: usize,
        #[arg(long)]
        out: PathBuf,
        /// Refinement trace CSV of the last certified plan.
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Recompute a plan's certification report.
    Certify {
        #[arg(long)]
        plan: PathBuf,
        #[command(flatten)]
        obj: ObjectArgs,
    },
    /// List dynamically feasible contact triples.
    Propose {
        #[command(flatten)]
        obj: ObjectArgs,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long = "n-candidates", default_value_t = 256)]
        n_candidates: usize,
        #[arg(long, default_value_t = 20)]
        limit: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate a grasp dataset (JSON lines) over the objects' rest poses.
    Dataset {
        /// Object geometry files; repeat for several objects.
        #[arg(long, required = true)]
        object: Vec<PathBuf>,
        #[arg(long, value_enum, default_value = "m")]
        units: Units,
        #[arg(long, default_value = "default")]
        hand: String,
        #[arg(long, default_value_t = 0.5)]
        mu: f64,
        #[arg(long, default_value_t = 1.0)]
        fmin: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long = "records-per-pose", default_value_t = 2)]
        records_per_pose: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print a summary of the hand model.
    HandInfo {
        #[arg(long, default_value = "default")]
        hand: String,
    },
}

enum Failure {
    Input(String),
    Threshold(String),
}

impl From<PipelineError> for Failure {
    fn from(e: PipelineError) -> Self {
        match e {
            PipelineError::Exhausted(c) => Failure::Threshold(format!(
                "exhausted: {} proposals, {} IK failures of {} solves, {} infeasible and {} unfinished refinements, {} failed certifications",
                c.proposals, c.ik_failures, c.ik_solves, c.refine_infeasible, c.refine_max_iterations, c.certification_failures
            )),
            e => Failure::Input(e.to_string()),
        }
    }
}

fn input<E: std::fmt::Display>(e: E) -> Failure {
    Failure::Input(e.to_string())
}

fn load_object(obj: &ObjectArgs) -> Result<(crate::geometry::SurfaceModel, HandModel, PipelineConfig), Failure> {
    let mut pose = match &obj.pose {
        Some(p) => parse_pose(p)?,
        None => Isometry3::identity(),
    };
    pose.translation.vector *= obj.units.factor();
    let geometry = load_geometry(&obj.object).map_err(input)?.scaled(obj.units.factor());
    let model = build_model(&geometry, &pose, obj.grid)?;
    let hand = HandModel::load(&obj.hand).map_err(input)?;
    let friction = FrictionParams::new(obj.mu, obj.fmin).map_err(input)?;
    Ok((model, hand, PipelineConfig { friction, ..Default::default() }))
}

fn write_file(path: &Path, text: &str) -> Result<(), Failure> {
    std::fs::write(path, text).map_err(|e| Failure::Input(format!("{}: {e}", path.display())))
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Plan { obj, seed, n_grasps, max_rejections, out, trace } => {
            let (model, hand, base) = load_object(&obj)?;
            let env = table_under(&model);
            let config = PipelineConfig { rng_seed: seed, n_grasps, max_rejections, ..base };
            let res = plan_grasp(&model, &env, &hand, &config)?;
            let text = if n_grasps == 1 { res.plans[0].to_json() } else { canonical_json(&res.plans) };
            write_file(&out, &text)?;
            if let Some(path) = trace {
                let f = File::create(&path).map_err(input)?;
                write_trace_csv(&res.trace, BufWriter::new(f)).map_err(input)?;
            }
            eprintln!(
                "{} certified plan(s); {} proposals, {} rejected",
                res.plans.len(),
                res.counts.proposals,
                res.counts.rejected
            );
            if res.plans.len() < n_grasps {
                return Err(Failure::Threshold(format!("only {} of {} grasps certified", res.plans.len(), n_grasps)));
            }
            Ok(())
        }
        Command::Certify { plan, obj } => {
            let (model, hand, config) = load_object(&obj)?;
            let env = table_under(&model);
            let text = std::fs::read_to_string(&plan).map_err(input)?;
            let plans: Vec<GraspPlan> = match GraspPlan::from_json(&text) {
                Ok(p) => vec![p],
                Err(_) => serde_json::from_str(&text).map_err(input)?,
            };
            let mut ok = true;
            let mut reports = Vec::new();
            for p in &plans {
                let (report, agree) = recertify(p, &model, &env, &hand, &config, 1e-9)?;
                let q = p.config()?;
                let squeeze = squeeze_command(&hand, &q, &p.forces(), config.squeeze_k);
                ok &= report.passed && agree;
                reports.push(serde_json::json!({ "report": report, "matches_stored": agree, "squeeze": squeeze }));
            }
            print!("{}", canonical_json(&reports));
            if ok {
                Ok(())
            } else {
                Err(Failure::Threshold("certification thresholds failed".into()))
            }
        }
        Command::Propose { obj, seed, n_candidates, limit, out } => {
            let (model, _, config) = load_object(&obj)?;
            let env = table_under(&model);
            let radius = default_poisson_radius(model.mesh.surface_area(), n_candidates);
            let cands = poisson_disk_sample(&model, n_candidates, radius, seed, Some(&env)).map_err(input)?;
            let pconf = crate::proposal::ProposalConfig {
                n_candidates,
                rng_seed: seed,
                friction: config.friction,
                max_proposals_returned: limit.max(1),
                ..Default::default()
            };
            let (props, stats) = propose_contact_triples(&cands, &pconf).map_err(|e| Failure::Threshold(e.to_string()))?;
            let rows: Vec<_> = props
                .iter()
                .map(|p| {
                    serde_json::json!({
                        "indices": p.indices,
                        "J": p.value,
                        "contacts": p.triple.contacts.iter().map(|c| serde_json::json!({
                            "p": [c.position.x, c.position.y, c.position.z],
                            "n": [c.normal.x, c.normal.y, c.normal.z],
                        })).collect::<Vec<_>>(),
                    })
                })
                .collect();
            let text = canonical_json(&serde_json::json!({ "stats": stats, "proposals": rows }));
            match out {
                Some(path) => write_file(&path, &text),
                None => {
                    print!("{text}");
                    Ok(())
                }
            }
        }
        Command::Dataset { object, units, hand, mu, fmin, seed, records_per_pose, out } => {
            let hand = HandModel::load(&hand).map_err(input)?;
            let friction = FrictionParams::new(mu, fmin).map_err(input)?;
            let mut objects = Vec::new();
            for path in &object {
                let geometry = load_geometry(path).map_err(input)?.scaled(units.factor());
                let model = build_model(&geometry, &Isometry3::identity(), DEFAULT_GRID_RESOLUTION)?;
                let center_of_mass = model.centroid();
                let id = path.file_stem().and_then(|s| s.to_str()).unwrap_or("object").to_string();
                objects.push(DatasetObject { id, model, center_of_mass });
            }
            let mut config = DatasetConfig { max_records_per_pose: records_per_pose, ..Default::default() };
            config.proposal.rng_seed = seed;
            config.proposal.friction = friction;
            let data = generate_dataset(&objects, &hand, &config).map_err(input)?;
            let f = File::create(&out).map_err(input)?;
            let mut w = BufWriter::new(f);
            data.write_jsonl(&mut w).map_err(input)?;
            w.flush().map_err(input)?;
            for s in &data.summaries {
                eprintln!("{}: {} rest poses, records per pose {:?}", s.object_id, s.rest_poses, s.records);
            }
            Ok(())
        }
        Command::HandInfo { hand } => {
            let hand = HandModel::load(&hand).map_err(input)?;
            let info = serde_json::json!({
                "name": hand.name,
                "dof": hand.dof(),
                "links": hand.links.iter().map(|l| l.name.clone()).collect::<Vec<_>>(),
                "joints": hand.joints.iter().map(|j| serde_json::json!({
                    "name": j.name, "lower": j.lower, "upper": j.upper, "locked": j.locked,
                })).collect::<Vec<_>>(),
                "fingertips": hand.fingertips.iter().map(|f| serde_json::json!({
                    "finger": f.finger.name(),
                    "link": hand.links[f.link].name,
                    "reference_position": [f.reference_position.x, f.reference_position.y, f.reference_position.z],
                })).collect::<Vec<_>>(),
                "collision_spheres": hand.collision_spheres.len(),
            });
            print!("{}", canonical_json(&info));
            Ok(())
        }
    }
}

/// Runs the CLI on `argv` (program name first) and returns the exit code.
pub fn run_cli<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            if code == 2 {
                eprintln!("\n{SCHEMA_HELP}");
            }
            return code;
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(Failure::Threshold(msg)) => {
            eprintln!("error: {msg}");
            1
        }
        Err(Failure::Input(msg)) => {
            eprintln!("error: {msg}");
            2
        }
    }
}
