//! Hand description file (`gf_hand_v1`) and its validated in-memory form.

use std::collections::HashMap;
use std::path::Path;

use nalgebra::{Isometry3, Point3, Translation3, Unit, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};

use super::{KinematicsError, N_JOINTS};

const DEFAULT_HAND: &str = include_str!("../../assets/default_hand.json");
pub const SCHEMA: &str = "gf_hand_v1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Finger {
    Thumb,
    Index,
    Middle,
}

impl Finger {
    pub const ALL: [Finger; 3] = [Finger::Thumb, Finger::Index, Finger::Middle];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Finger::Thumb => "thumb",
            Finger::Index => "index",
            Finger::Middle => "middle",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct OriginFile {
    xyz: [f64; 3],
    #[serde(default)]
    rpy: [f64; 3],
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct LinkFile {
    name: String,
    parent: Option<String>,
    origin: OriginFile,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct JointFile {
    name: String,
    child: String,
    axis: [f64; 3],
    lower: f64,
    upper: f64,
    #[serde(default)]
    locked: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct FingertipFile {
    finger: Finger,
    link: String,
    offset: [f64; 3],
    reference_position: [f64; 3],
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct SphereFile {
    link: String,
    center: [f64; 3],
    radius: f64,
    #[serde(default)]
    fingertip: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct HandFile {
    schema: String,
    #[serde(default)]
    name: String,
    links: Vec<LinkFile>,
    joints: Vec<JointFile>,
    fingertips: Vec<FingertipFile>,
    collision_spheres: Vec<SphereFile>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Link {
    pub name: String,
    /// Parent index; always smaller than this link's index.
    pub parent: Option<usize>,
    pub origin: Isometry3<f64>,
    pub joint: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Joint {
    pub name: String,
    pub child: usize,
    pub axis: Unit<Vector3<f64>>,
    pub lower: f64,
    pub upper: f64,
    /// Fixed value for joints held still by the solvers.
    pub locked: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Fingertip {
    pub finger: Finger,
    pub link: usize,
    pub offset: Point3<f64>,
    pub reference_position: Point3<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CollisionSphere {
    pub link: usize,
    pub center: Point3<f64>,
    pub radius: f64,
    /// Contact pad spheres, exempt from the object clearance.
    pub fingertip: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HandModel {
    pub name: String,
    /// Topologically ordered (parents first).
    pub links: Vec<Link>,
    pub joints: Vec<Joint>,
    /// Thumb, index, middle.
    pub fingertips: [Fingertip; 3],
    pub collision_spheres: Vec<CollisionSphere>,
    /// For each link, the joints on its chain from the root.
    pub chain_joints: Vec<Vec<usize>>,
}

fn vec3(a: [f64; 3]) -> Vector3<f64> {
    Vector3::new(a[0], a[1], a[2])
}

fn invalid(msg: impl Into<String>) -> KinematicsError {
    KinematicsError::InvalidModel(msg.into())
}

impl HandModel {
    /// The shipped 22-DoF hand.
    pub fn default_hand() -> HandModel {
        Self::from_json(DEFAULT_HAND).expect("shipped hand description is valid")
    }

    /// `"default"` selects the shipped hand; anything else is a file path.
    pub fn load(source: &str) -> Result<HandModel, KinematicsError> {
        if source == "default" {
            return Ok(Self::default_hand());
        }
        Self::load_path(Path::new(source))
    }

    pub fn load_path(path: &Path) -> Result<HandModel, KinematicsError> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text)
    }

    pub fn from_json(text: &str) -> Result<HandModel, KinematicsError> {
        let file: HandFile = serde_json::from_str(text).map_err(|e| KinematicsError::Parse(e.to_string()))?;
        Self::from_file(file)
    }

    pub fn dof(&self) -> usize {
        6 + self.joints.len()
    }

    pub fn fingertip(&self, finger: Finger) -> &Fingertip {
        &self.fingertips[finger.index()]
    }

    /// Joint limits as `(lower, upper)`; locked joints collapse to their value.
    pub fn effective_limits(&self, j: usize) -> (f64, f64) {
        let joint = &self.joints[j];
        match joint.locked {
            Some(v) => (v, v),
            None => (joint.lower, joint.upper),
        }
    }

    fn from_file(file: HandFile) -> Result<HandModel, KinematicsError> {
        if file.schema != SCHEMA {
            return Err(invalid(format!("schema {:?}, expected {SCHEMA:?}", file.schema)));
        }
        let mut by_name: HashMap<&str, usize> = HashMap::new();
        for (i, l) in file.links.iter().enumerate() {
            if by_name.insert(l.name.as_str(), i).is_some() {
                return Err(invalid(format!("duplicate link {}", l.name)));
            }
        }
        let lookup = |name: &str| by_name.get(name).copied().ok_or_else(|| invalid(format!("unknown link {name}")));

        let mut parent_of = vec![None; file.links.len()];
        for (i, l) in file.links.iter().enumerate() {
            if let Some(p) = &l.parent {
                parent_of[i] = Some(lookup(p)?);
            }
        }
        let roots: Vec<usize> = (0..file.links.len()).filter(|&i| parent_of[i].is_none()).collect();
        if roots.len() != 1 {
            return Err(invalid(format!("expected exactly one root link, found {}", roots.len())));
        }

        // Kahn ordering; anything left over sits on a cycle.
        let mut children: Vec<Vec<usize>> = vec![Vec::new(); file.links.len()];
        for (i, p) in parent_of.iter().enumerate() {
            if let Some(p) = p {
                children[*p].push(i);
            }
        }
        let mut order = vec![roots[0]];
        let mut head = 0;
        while head < order.len() {
            let l = order[head];
            head += 1;
            order.extend(children[l].iter().copied());
        }
        if order.len() != file.links.len() {
            return Err(invalid("link parent references form a cycle"));
        }
        let mut new_index = vec![0; file.links.len()];
        for (k, &old) in order.iter().enumerate() {
            new_index[old] = k;
        }

        let mut links: Vec<Link> = order
            .iter()
            .map(|&old| {
                let l = &file.links[old];
                let r = l.origin.rpy;
                Link {
                    name: l.name.clone(),
                    parent: parent_of[old].map(|p| new_index[p]),
                    origin: Isometry3::from_parts(
                        Translation3::from(vec3(l.origin.xyz)),
                        UnitQuaternion::from_euler_angles(r[0], r[1], r[2]),
                    ),
                    joint: None,
                }
            })
            .collect();

        if file.joints.len() != N_JOINTS {
            return Err(invalid(format!("expected {N_JOINTS} joints, found {}", file.joints.len())));
        }
        let mut joints = Vec::with_capacity(file.joints.len());
        for (j, jf) in file.joints.iter().enumerate() {
            let child = new_index[lookup(&jf.child)?];
            if links[child].joint.is_some() {
                return Err(invalid(format!("link {} has two joints", jf.child)));
            }
            if links[child].parent.is_none() {
                return Err(invalid("the root link cannot carry a joint"));
            }
            if !(jf.lower < jf.upper) {
                return Err(invalid(format!("joint {} has lower >= upper", jf.name)));
            }
            let axis = vec3(jf.axis);
            if !(axis.norm() > 1e-12) {
                return Err(invalid(format!("joint {} has a zero axis", jf.name)));
            }
            if let Some(v) = jf.locked {
                if v < jf.lower || v > jf.upper {
                    return Err(invalid(format!("joint {} locked outside its limits", jf.name)));
                }
            }
            links[child].joint = Some(j);
            joints.push(Joint {
                name: jf.name.clone(),
                child,
                axis: Unit::new_normalize(axis),
                lower: jf.lower,
                upper: jf.upper,
                locked: jf.locked,
            });
        }

        if file.fingertips.len() != 3 {
            return Err(invalid(format!("expected 3 fingertips, found {}", file.fingertips.len())));
        }
        let mut tips: [Option<Fingertip>; 3] = [None, None, None];
        for ft in &file.fingertips {
            let slot = &mut tips[ft.finger.index()];
            if slot.is_some() {
                return Err(invalid(format!("fingertip {} given twice", ft.finger.name())));
            }
            *slot = Some(Fingertip {
                finger: ft.finger,
                link: new_index[lookup(&ft.link)?],
                offset: Point3::from(vec3(ft.offset)),
                reference_position: Point3::from(vec3(ft.reference_position)),
            });
        }
        let fingertips = tips.map(|t| t.expect("three distinct fingers"));

        let mut collision_spheres = Vec::with_capacity(file.collision_spheres.len());
        for s in &file.collision_spheres {
            if !(s.radius > 0.0) {
                return Err(invalid("collision sphere radius must be positive"));
            }
            collision_spheres.push(CollisionSphere {
                link: new_index[lookup(&s.link)?],
                center: Point3::from(vec3(s.center)),
                radius: s.radius,
                fingertip: s.fingertip,
            });
        }

        let mut chain_joints: Vec<Vec<usize>> = Vec::with_capacity(links.len());
        for l in &links {
            let mut chain = l.parent.map(|p| chain_joints[p].clone()).unwrap_or_default();
            if let Some(j) = l.joint {
                chain.push(j);
            }
            chain_joints.push(chain);
        }

        let hand = HandModel { name: file.name, links, joints, fingertips, collision_spheres, chain_joints };
        if hand.dof() != 22 {
            return Err(invalid("hand must have 22 degrees of freedom"));
        }
        Ok(hand)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn edit(f: impl FnOnce(&mut serde_json::Value)) -> String {
        let mut v: serde_json::Value = serde_json::from_str(DEFAULT_HAND).unwrap();
        f(&mut v);
        v.to_string()
    }

    #[test]
    fn default_hand_shape() {
        let hand = HandModel::default_hand();
        assert_eq!(hand.dof(), 22);
        assert_eq!(hand.fingertips.map(|f| f.finger), Finger::ALL);
        assert!(hand.joints.iter().filter(|j| j.locked.is_some()).count() == 4);
        for (i, l) in hand.links.iter().enumerate() {
            assert!(l.parent.map_or(true, |p| p < i));
        }
    }

    #[test]
    fn load_default_by_name() {
        assert_eq!(HandModel::load("default").unwrap(), HandModel::default_hand());
    }

    #[test]
    fn cyclic_parents_rejected() {
        let text = edit(|v| {
            v["links"][1]["parent"] = "index_link_2".into();
        });
        assert!(matches!(HandModel::from_json(&text), Err(KinematicsError::InvalidModel(_))));
    }

    #[test]
    fn two_fingertips_rejected() {
        let text = edit(|v| {
            v["fingertips"].as_array_mut().unwrap().pop();
        });
        assert!(matches!(HandModel::from_json(&text), Err(KinematicsError::InvalidModel(_))));
    }

    #[test]
    fn bad_limits_rejected() {
        let text = edit(|v| {
            v["joints"][2]["lower"] = 2.0.into();
        });
        assert!(matches!(HandModel::from_json(&text), Err(KinematicsError::InvalidModel(_))));
    }

    #[test]
    fn garbage_is_parse_error() {
        assert!(matches!(HandModel::from_json("{not json"), Err(KinematicsError::Parse(_))));
    }
}
