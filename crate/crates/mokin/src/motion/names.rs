//! Joint-name resolution onto the canonical 22-joint humanoid.
//!
//! Two mechanisms cover the ingestion paths: a built-in alias table
//! (`data/joint_aliases.json`) recognizes common rig names such as
//! `Hips` or `mixamorig:LeftForeArm`, and a user-supplied [`JointMap`]
//! assigns one source joint to each canonical joint explicitly. The map
//! may reuse a source joint for several canonical joints — the standard
//! trick for feeding 17-joint pose estimates into a 22-joint model —
//! which creates bones of zero length.

use std::collections::BTreeMap;
use std::sync::OnceLock;

use crate::error::{Error, Result};
use crate::kinematics::{canonical_parents, Skeleton, CANONICAL_JOINTS};
use crate::quat::Vec3;

/// Lowercases and strips separators and the Mixamo rig prefix, so that
/// `mixamorig:LeftUpLeg`, `left_up_leg`, and `LeftUpLeg` all coincide.
fn normalize(name: &str) -> String {
    let mut folded: String = name
        .chars()
        .filter(|c| c.is_ascii_alphanumeric())
        .map(|c| c.to_ascii_lowercase())
        .collect();
    if let Some(rest) = folded.strip_prefix("mixamorig") {
        folded = rest.to_string();
    }
    folded
}

fn alias_table() -> &'static BTreeMap<String, &'static str> {
    static TABLE: OnceLock<BTreeMap<String, &'static str>> = OnceLock::new();
    TABLE.get_or_init(|| {
        let raw: BTreeMap<String, Vec<String>> =
            serde_json::from_str(include_str!("../../data/joint_aliases.json"))
                .expect("bundled alias table is valid JSON");
        let mut table = BTreeMap::new();
        for (canonical, aliases) in &raw {
            let canonical: &'static str = CANONICAL_JOINTS
                .iter()
                .find(|j| *j == canonical)
                .expect("alias table keys are canonical joints");
            for alias in aliases {
                table.insert(normalize(alias), canonical);
            }
        }
        table
    })
}

/// Resolves a foreign joint name to its canonical equivalent, if any.
pub fn canonical_joint(name: &str) -> Option<&'static str> {
    alias_table().get(&normalize(name)).copied()
}

/// Index of a canonical joint name in [`CANONICAL_JOINTS`].
pub fn canonical_index(name: &str) -> Option<usize> {
    CANONICAL_JOINTS.iter().position(|j| *j == name)
}

/// Explicit canonical-joint → source-joint assignment.
#[derive(Clone, Debug)]
pub struct JointMap {
    sources: Vec<String>,
}

impl JointMap {
    /// Parses a JSON object mapping every canonical joint name to a
    /// source joint name. All 22 canonical joints must be assigned.
    pub fn parse_json(text: &str) -> Result<JointMap> {
        let raw: BTreeMap<String, String> = serde_json::from_str(text)?;
        let mut sources = Vec::with_capacity(CANONICAL_JOINTS.len());
        for joint in CANONICAL_JOINTS {
            let source = raw.get(joint).ok_or_else(|| {
                Error::Dataset(format!("joint map does not assign {joint:?}"))
            })?;
            sources.push(source.clone());
        }
        for key in raw.keys() {
            if canonical_index(key).is_none() {
                return Err(Error::Dataset(format!(
                    "joint map key {key:?} is not a canonical joint"
                )));
            }
        }
        Ok(JointMap { sources })
    }

    /// The bundled assignment for 17-joint sources that lack separate
    /// spine, shoulder, and toe joints; duplicated sources yield
    /// zero-length bones.
    pub fn bundled_sparse() -> JointMap {
        JointMap::parse_json(include_str!("../../data/sparse_joint_map.json"))
            .expect("bundled sparse joint map is valid")
    }

    /// Source joint assigned to each canonical joint, in canonical order.
    pub fn sources(&self) -> &[String] {
        &self.sources
    }

    /// Rebuilds a skeleton and position frames on the canonical joint
    /// set by looking up each assigned source joint. Rotations do not
    /// survive remapping; the result is position-only.
    pub fn apply(
        &self,
        skeleton: &Skeleton,
        positions: &[Vec<Vec3>],
    ) -> Result<(Skeleton, Vec<Vec<Vec3>>)> {
        let mut indices = Vec::with_capacity(self.sources.len());
        for source in &self.sources {
            let idx = skeleton.joint_index(source).ok_or_else(|| {
                Error::Dataset(format!(
                    "joint map source {source:?} not in skeleton {:?}",
                    skeleton.name()
                ))
            })?;
            indices.push(idx);
        }
        let tpose = indices.iter().map(|&i| skeleton.tpose()[i]).collect();
        let joints = CANONICAL_JOINTS
            .iter()
            .zip(canonical_parents())
            .map(|(n, p)| (n.to_string(), p))
            .collect();
        let mapped = Skeleton::new(skeleton.name(), joints, tpose)?;
        let frames = positions
            .iter()
            .map(|frame| {
                if frame.len() != skeleton.n_joints() {
                    return Err(Error::ArityMismatch {
                        expected: skeleton.n_joints(),
                        got: frame.len(),
                    });
                }
                Ok(indices.iter().map(|&i| frame[i]).collect())
            })
            .collect::<Result<Vec<_>>>()?;
        Ok((mapped, frames))
    }
}
