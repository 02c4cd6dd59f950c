//! Motion clips, datasets, and the file formats that carry them.
//!
//! A motion is stored decomposed: per-frame *local* poses (joint positions
//! relative to the root, heading removed) plus a *global* track of root
//! velocities and yaw increments. [`preprocess`] produces the
//! decomposition from absolute joint positions;
//! [`crate::kinematics::apply_global`] inverts it. [`bvh`] ingests
//! standard motion-capture files, [`json`] is the native lossless format,
//! and [`names`] maps foreign joint names onto the canonical 22-joint set.

pub mod bvh;
pub mod json;
pub mod names;
mod preprocess;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kinematics::Skeleton;
use crate::quat::{Quat, Vec3};

pub use preprocess::preprocess;

/// One frame of root motion: displacement to the next frame expressed in
/// the current heading frame (cm), and the heading change (degrees).
pub type GlobalRow = [f64; 4];

/// A motion in decomposed form, tied to a skeleton by name.
///
/// `local[t]` holds joint positions relative to the root with the heading
/// rotated out, so the root is pinned at the origin in all three axes and
/// root height changes live in the y-velocity of `global[t]`.
/// `initial_root` and `initial_yaw_deg` anchor the clip in world space so
/// the decomposition is invertible. `rotations`, when present, are
/// per-joint local quaternions whose forward kinematics reproduce
/// `local`; synthetic data and rotation-bearing capture files carry them,
/// position-only sources do not.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MotionClip {
    pub name: String,
    pub skeleton_id: String,
    pub fps: f64,
    pub initial_root: Vec3,
    pub initial_yaw_deg: f64,
    pub local: Vec<Vec<Vec3>>,
    pub global: Vec<GlobalRow>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rotations: Option<Vec<Vec<Quat>>>,
}

/// Slack allowed on the root-at-origin invariant; preprocessing pins the
/// root exactly, the tolerance only absorbs foreign files.
const ROOT_PIN_TOL: f64 = 1e-6;

impl MotionClip {
    pub fn n_frames(&self) -> usize {
        self.local.len()
    }

    pub fn n_joints(&self) -> usize {
        self.local.first().map_or(0, |f| f.len())
    }

    /// Checks every structural invariant; deserialized or hand-built
    /// clips must pass through here before use.
    pub fn validate(&self) -> Result<()> {
        if self.local.len() < 2 {
            return Err(Error::Clip(format!(
                "{:?} has {} frames, need at least 2",
                self.name,
                self.local.len()
            )));
        }
        if self.global.len() != self.local.len() {
            return Err(Error::LengthMismatch(format!(
                "clip {:?}: {} local frames vs {} global rows",
                self.name,
                self.local.len(),
                self.global.len()
            )));
        }
        if !self.fps.is_finite() || self.fps <= 0.0 {
            return Err(Error::Clip(format!("{:?}: fps {} invalid", self.name, self.fps)));
        }
        if !self.initial_root.iter().all(|x| x.is_finite())
            || !self.initial_yaw_deg.is_finite()
        {
            return Err(Error::NonFinite(format!("clip {:?} anchor", self.name)));
        }
        let joints = self.n_joints();
        if joints == 0 {
            return Err(Error::Clip(format!("{:?} has no joints", self.name)));
        }
        for (t, frame) in self.local.iter().enumerate() {
            if frame.len() != joints {
                return Err(Error::ArityMismatch { expected: joints, got: frame.len() });
            }
            if frame.iter().any(|p| !p.iter().all(|x| x.is_finite())) {
                return Err(Error::NonFinite(format!("clip {:?} frame {t}", self.name)));
            }
            if frame[0].iter().any(|x| x.abs() > ROOT_PIN_TOL) {
                return Err(Error::Clip(format!(
                    "{:?} frame {t}: root not at origin ({:?})",
                    self.name, frame[0]
                )));
            }
        }
        for (t, row) in self.global.iter().enumerate() {
            if !row.iter().all(|x| x.is_finite()) {
                return Err(Error::NonFinite(format!(
                    "clip {:?} global row {t}",
                    self.name
                )));
            }
            if row[3].abs() >= 180.0 {
                return Err(Error::Clip(format!(
                    "{:?} frame {t}: |yaw increment| {} >= 180",
                    self.name,
                    row[3].abs()
                )));
            }
        }
        if let Some(rot) = &self.rotations {
            if rot.len() != self.local.len() {
                return Err(Error::LengthMismatch(format!(
                    "clip {:?}: {} rotation frames vs {} local frames",
                    self.name,
                    rot.len(),
                    self.local.len()
                )));
            }
            for frame in rot {
                if frame.len() != joints {
                    return Err(Error::ArityMismatch { expected: joints, got: frame.len() });
                }
                for q in frame {
                    q.validated()?;
                }
            }
        }
        Ok(())
    }

    /// World-space joint positions, recombining local and global motion.
    pub fn to_world(&self) -> Result<Vec<Vec<Vec3>>> {
        crate::kinematics::apply_global(
            &self.local,
            &self.global,
            self.initial_root,
            self.initial_yaw_deg,
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Split {
    Train,
    Test,
}

/// Test regimes from crossing motion novelty with character novelty.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scenario {
    KnownMotionKnownCharacter,
    KnownMotionNewCharacter,
    NewMotionKnownCharacter,
    NewMotionNewCharacter,
}

impl Scenario {
    pub fn all() -> [Scenario; 4] {
        [
            Scenario::KnownMotionKnownCharacter,
            Scenario::KnownMotionNewCharacter,
            Scenario::NewMotionKnownCharacter,
            Scenario::NewMotionNewCharacter,
        ]
    }

    pub fn label(self) -> &'static str {
        match self {
            Scenario::KnownMotionKnownCharacter => "known motion / known character",
            Scenario::KnownMotionNewCharacter => "known motion / new character",
            Scenario::NewMotionKnownCharacter => "new motion / known character",
            Scenario::NewMotionNewCharacter => "new motion / new character",
        }
    }

    pub fn slug(self) -> &'static str {
        match self {
            Scenario::KnownMotionKnownCharacter => "known-motion-known-character",
            Scenario::KnownMotionNewCharacter => "known-motion-new-character",
            Scenario::NewMotionKnownCharacter => "new-motion-known-character",
            Scenario::NewMotionNewCharacter => "new-motion-new-character",
        }
    }
}

/// A clip plus its dataset role.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ClipEntry {
    pub clip: MotionClip,
    pub split: Split,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scenario: Option<Scenario>,
}

/// An immutable collection of skeletons and tagged clips.
#[derive(Clone, Debug, Default)]
pub struct Dataset {
    pub skeletons: BTreeMap<String, Skeleton>,
    pub entries: Vec<ClipEntry>,
}

impl Dataset {
    /// Validates every clip and checks that each resolves to a skeleton
    /// of matching arity.
    pub fn validate(&self) -> Result<()> {
        if self.entries.is_empty() {
            return Err(Error::Dataset("no clips".into()));
        }
        for entry in &self.entries {
            entry.clip.validate()?;
            let skeleton = self.skeleton_of(&entry.clip)?;
            if skeleton.n_joints() != entry.clip.n_joints() {
                return Err(Error::ArityMismatch {
                    expected: skeleton.n_joints(),
                    got: entry.clip.n_joints(),
                });
            }
            if entry.split == Split::Test && entry.scenario.is_none() {
                return Err(Error::Dataset(format!(
                    "test clip {:?} has no scenario tag",
                    entry.clip.name
                )));
            }
        }
        Ok(())
    }

    pub fn skeleton_of(&self, clip: &MotionClip) -> Result<&Skeleton> {
        self.skeletons.get(&clip.skeleton_id).ok_or_else(|| {
            Error::Dataset(format!(
                "clip {:?} references unknown skeleton {:?}",
                clip.name, clip.skeleton_id
            ))
        })
    }

    pub fn train_entries(&self) -> impl Iterator<Item = &ClipEntry> {
        self.entries.iter().filter(|e| e.split == Split::Train)
    }

    pub fn test_entries(&self) -> impl Iterator<Item = &ClipEntry> {
        self.entries.iter().filter(|e| e.split == Split::Test)
    }
}
