//! Synthetic character families with ground-truth retargettings, and the
//! evaluation protocols measured over them: height-normalized MSE with a
//! per-scenario breakdown, movement-variance binning, and end-effector
//! trajectory export.
//!
//! Ground truth uses rotation-copy semantics: one scripted rotation track
//! per motion is played through every character's skeleton, and the global
//! track scales with character height. The copy baseline is therefore
//! exact on this data by construction — it is the ceiling the learned
//! models are measured against, while held-out characters probe whether a
//! model generalizes.

use std::collections::{BTreeMap, BTreeSet};
use std::f64::consts::TAU;
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kinematics::{canonical_parents, fk_forward, Composition, Skeleton, CANONICAL_JOINTS};
use crate::motion::{ClipEntry, Dataset, MotionClip, Scenario, Split};
use crate::quat::{add3, scale3, Quat, Vec3};

pub const SYNTHETIC_FPS: f64 = 30.0;
/// Per-bone-group scale factors stay inside this band.
pub const SCALE_RANGE: (f64, f64) = (0.6, 1.6);
/// Scripted rotations keep |y-twist| at or below this angle, safely inside
/// the feasible set the twist penalty carves out.
pub const TWIST_CAP_DEG: f64 = 45.0;
/// Lower edges of the movement-variance histogram; the last bin is
/// unbounded. Units: mean per-axis world-position variance (cm²) divided
/// by character height (cm).
pub const VARIANCE_BIN_EDGES: [f64; 5] = [0.0, 2.5, 5.0, 10.0, 20.0];
/// Symmetric bone groups sharing one scale factor per character.
pub const N_SCALE_GROUPS: usize = 10;

const CLIP_FRAMES: usize = 96;

// Canonical joint indices the motion scripts drive.
const ROOT: usize = 0;
const SPINE: usize = 1;
const SPINE1: usize = 2;
const SPINE2: usize = 3;
const NECK: usize = 4;
const L_LEG: usize = 7;
const L_FOOT: usize = 8;
const R_LEG: usize = 11;
const R_FOOT: usize = 12;
const L_FOREARM: usize = 16;
const L_HAND: usize = 17;
const R_FOREARM: usize = 20;
const R_HAND: usize = 21;

/// The rest pose every synthetic character is scaled from (cm). Left
/// joints sit at negative x so the hip-line heading of the rest pose is
/// exactly zero and the body faces +z.
pub fn template_skeleton() -> Skeleton {
    let tpose = vec![
        [0.0, 95.0, 0.0],   // Root
        [0.0, 105.0, 0.0],  // Spine
        [0.0, 115.0, 0.0],  // Spine1
        [0.0, 125.0, 0.0],  // Spine2
        [0.0, 140.0, 0.0],  // Neck
        [0.0, 152.0, 0.0],  // Head
        [-9.0, 90.0, 0.0],  // LeftUpLeg
        [-9.0, 50.0, 0.0],  // LeftLeg
        [-9.0, 8.0, 0.0],   // LeftFoot
        [-9.0, 2.0, 13.0],  // LeftToeBase
        [9.0, 90.0, 0.0],   // RightUpLeg
        [9.0, 50.0, 0.0],   // RightLeg
        [9.0, 8.0, 0.0],    // RightFoot
        [9.0, 2.0, 13.0],   // RightToeBase
        [-8.0, 133.0, 0.0], // LeftShoulder
        [-20.0, 133.0, 0.0], // LeftArm
        [-46.0, 133.0, 0.0], // LeftForeArm
        [-71.0, 133.0, 0.0], // LeftHand
        [8.0, 133.0, 0.0],  // RightShoulder
        [20.0, 133.0, 0.0], // RightArm
        [46.0, 133.0, 0.0], // RightForeArm
        [71.0, 133.0, 0.0], // RightHand
    ];
    Skeleton::canonical("template", tpose).expect("template is a valid canonical skeleton")
}

/// Which scale group a canonical joint's bone belongs to (root has none).
fn scale_group(joint: usize) -> Option<usize> {
    match joint {
        0 => None,
        1..=3 => Some(0),    // spine
        4 | 5 => Some(1),    // neck, head
        6 | 10 => Some(2),   // pelvis
        7 | 11 => Some(3),   // thigh
        8 | 12 => Some(4),   // shin
        9 | 13 => Some(5),   // foot
        14 | 18 => Some(6),  // clavicle
        15 | 19 => Some(7),  // upper arm
        16 | 20 => Some(8),  // forearm
        17 | 21 => Some(9),  // hand
        _ => None,
    }
}

/// Builds a character by scaling each template bone by its group factor.
/// The rebuilt T-pose keeps the root on the y-axis with the lowest joint
/// on the ground plane.
pub fn scaled_character(name: &str, scales: &[f64; N_SCALE_GROUPS]) -> Result<Skeleton> {
    let (lo, hi) = SCALE_RANGE;
    if scales.iter().any(|s| !s.is_finite() || *s < lo || *s > hi) {
        return Err(Error::Config(format!(
            "bone scales for {name:?} must lie in [{lo}, {hi}], got {scales:?}"
        )));
    }
    let template = template_skeleton();
    let parents = canonical_parents();
    let mut tpose = vec![[0.0; 3]; CANONICAL_JOINTS.len()];
    for j in 1..tpose.len() {
        let p = parents[j].expect("non-root joint has a parent");
        let s = scales[scale_group(j).expect("non-root joint has a scale group")];
        tpose[j] = add3(tpose[p], scale3(template.offset(j), s));
    }
    let min_y = tpose.iter().map(|p| p[1]).fold(f64::MAX, f64::min);
    for p in &mut tpose {
        p[1] -= min_y;
    }
    Skeleton::canonical(name, tpose)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum MotionKind {
    Walk,
    ArmWave,
    IdleSway,
    Turn,
}

impl MotionKind {
    fn all() -> [MotionKind; 4] {
        [MotionKind::Walk, MotionKind::ArmWave, MotionKind::IdleSway, MotionKind::Turn]
    }

    fn slug(self) -> &'static str {
        match self {
            MotionKind::Walk => "walk",
            MotionKind::ArmWave => "arm-wave",
            MotionKind::IdleSway => "idle-sway",
            MotionKind::Turn => "turn",
        }
    }
}

/// One parametric motion: a rotation track scripted at template scale plus
/// a global root-motion track. Realizing the script on a skeleton plays
/// the same rotations through that skeleton's offsets and scales the
/// global track by the height ratio.
#[derive(Clone, Debug)]
pub struct MotionScript {
    pub name: String,
    pub frames: usize,
    kind: MotionKind,
    omega: f64, // radians per frame
    amp_deg: f64,
    phase: f64,
    speed: f64, // cm per frame at template scale
    twist_deg: f64,
    bounce: f64, // root-height oscillation amplitude, cm
    turn_rate: f64, // degrees per frame
}

impl MotionScript {
    /// Samples one script. Draw count is fixed regardless of kind so the
    /// stream stays aligned across kinds.
    fn sample(kind: MotionKind, index: usize, rng: &mut ChaCha8Rng) -> MotionScript {
        let u: [f64; 7] = std::array::from_fn(|_| rng.gen_range(0.0..1.0));
        let lerp = |lo: f64, hi: f64, t: f64| lo + (hi - lo) * t;
        let (period, amp_deg, speed, twist_deg, bounce, turn_rate) = match kind {
            MotionKind::Walk => (
                lerp(20.0, 40.0, u[0]),
                lerp(15.0, 35.0, u[1]),
                lerp(1.2, 3.5, u[3]),
                lerp(5.0, 15.0, u[4]),
                lerp(1.0, 3.0, u[5]),
                0.0,
            ),
            MotionKind::ArmWave => (
                lerp(16.0, 30.0, u[0]),
                lerp(20.0, 50.0, u[1]),
                0.0,
                lerp(0.0, 8.0, u[4]),
                lerp(0.2, 1.0, u[5]),
                0.0,
            ),
            MotionKind::IdleSway => (
                lerp(40.0, 80.0, u[0]),
                lerp(3.0, 8.0, u[1]),
                0.0,
                lerp(2.0, 6.0, u[4]),
                lerp(0.3, 1.2, u[5]),
                0.0,
            ),
            MotionKind::Turn => (
                lerp(18.0, 36.0, u[0]),
                lerp(6.0, 14.0, u[1]),
                0.0,
                lerp(0.0, 8.0, u[4]),
                lerp(0.5, 1.5, u[5]),
                lerp(0.5, 2.0, u[6]) * if u[6] < 0.5 { -1.0 } else { 1.0 },
            ),
        };
        MotionScript {
            name: format!("{}-{index:02}", kind.slug()),
            frames: CLIP_FRAMES,
            kind,
            omega: TAU / period,
            amp_deg,
            phase: u[2] * TAU,
            speed,
            twist_deg,
            bounce,
            turn_rate,
        }
    }

    /// Per-joint local rotations for frame `t`, identity except the
    /// scripted joints. Swings use x/z axes (zero y-twist); the only
    /// y-axis components are spine twist and walk arm swing, both far
    /// below [`TWIST_CAP_DEG`].
    fn rotations(&self, t: usize) -> Vec<Quat> {
        const X: Vec3 = [1.0, 0.0, 0.0];
        const Y: Vec3 = [0.0, 1.0, 0.0];
        const Z: Vec3 = [0.0, 0.0, 1.0];
        let mut q = vec![Quat::IDENTITY; CANONICAL_JOINTS.len()];
        let th = self.omega * t as f64 + self.phase;
        let s = th.sin();
        let a = self.amp_deg.to_radians();
        let tw = self.twist_deg.to_radians();
        match self.kind {
            MotionKind::Walk => {
                q[L_LEG] = Quat::from_axis_angle(X, a * s);
                q[R_LEG] = Quat::from_axis_angle(X, -a * s);
                let knee = 0.8 * a;
                q[L_FOOT] = Quat::from_axis_angle(X, knee * 0.5 * (1.0 + th.cos()));
                q[R_FOOT] = Quat::from_axis_angle(X, knee * 0.5 * (1.0 - th.cos()));
                let arm = 0.5 * a;
                q[L_FOREARM] = Quat::from_axis_angle(Y, arm * s);
                q[R_FOREARM] = Quat::from_axis_angle(Y, -arm * s);
                q[SPINE] = Quat::from_axis_angle(Y, tw * s);
            }
            MotionKind::ArmWave => {
                q[L_FOREARM] = Quat::from_axis_angle(Z, -a * (0.4 + 0.6 * s));
                q[R_FOREARM] =
                    Quat::from_axis_angle(Z, a * (0.4 + 0.6 * (th + 1.9).sin()));
                q[L_HAND] = Quat::from_axis_angle(Z, 0.5 * a * (2.0 * th).sin());
                q[R_HAND] = Quat::from_axis_angle(Z, 0.5 * a * (2.0 * th + 0.8).cos());
                q[SPINE1] = Quat::from_axis_angle(Y, tw * (0.5 * th).sin());
            }
            MotionKind::IdleSway => {
                q[SPINE] = Quat::from_axis_angle(Z, a * s);
                q[SPINE1] = Quat::from_axis_angle(Z, 0.6 * a * (th + 0.4).sin());
                q[NECK] = Quat::from_axis_angle(Z, 0.4 * a * (th + 0.9).sin());
                q[SPINE2] = Quat::from_axis_angle(Y, tw * (0.5 * th + 0.3).sin());
                q[ROOT] = Quat::from_axis_angle(Z, 0.25 * a * (0.5 * th).sin());
            }
            MotionKind::Turn => {
                q[L_LEG] = Quat::from_axis_angle(X, a * s);
                q[R_LEG] = Quat::from_axis_angle(X, -a * s);
                let knee = 0.7 * a;
                q[L_FOOT] = Quat::from_axis_angle(X, knee * 0.5 * (1.0 + th.cos()));
                q[R_FOOT] = Quat::from_axis_angle(X, knee * 0.5 * (1.0 - th.cos()));
                q[SPINE] = Quat::from_axis_angle(Y, tw * (0.7 * th).sin());
            }
        }
        q
    }

    /// Template-scale global row for frame `t`: forward speed along the
    /// heading, a breathing/bounce term on y, and the turn rate.
    fn global_row(&self, t: usize) -> [f64; 4] {
        let height = |k: usize| self.bounce * (2.0 * self.omega * k as f64 + self.phase).sin();
        [0.0, height(t + 1) - height(t), self.speed, self.turn_rate]
    }

    /// Plays the script through a skeleton. Linear velocities and the
    /// root anchor scale with the skeleton's height relative to the
    /// template; heading changes are scale-free.
    pub fn realize(
        &self,
        skeleton: &Skeleton,
        template: &Skeleton,
        keep_rotations: bool,
    ) -> Result<MotionClip> {
        let ratio = skeleton.height() / template.height();
        let mut local = Vec::with_capacity(self.frames);
        let mut rotations = Vec::with_capacity(self.frames);
        let mut global = Vec::with_capacity(self.frames);
        for t in 0..self.frames {
            let q = self.rotations(t);
            local.push(fk_forward(skeleton, &q, Composition::Hierarchical)?);
            rotations.push(q);
            let g = self.global_row(t);
            global.push([g[0] * ratio, g[1] * ratio, g[2] * ratio, g[3]]);
        }
        let clip = MotionClip {
            name: format!("{}@{}", self.name, skeleton.name()),
            skeleton_id: skeleton.name().to_string(),
            fps: SYNTHETIC_FPS,
            initial_root: scale3(template.tpose()[0], ratio),
            initial_yaw_deg: 0.0,
            local,
            global,
            rotations: keep_rotations.then_some(rotations),
        };
        clip.validate()?;
        Ok(clip)
    }
}

/// A reproducible cast of scaled characters plus a library of scripted
/// motions, all derived from one seed.
pub struct SyntheticFamily {
    pub template: Skeleton,
    pub characters: Vec<Skeleton>,
    pub scales: Vec<[f64; N_SCALE_GROUPS]>,
    pub motions: Vec<MotionScript>,
}

impl SyntheticFamily {
    pub fn new(n_characters: usize, n_motions: usize, seed: u64) -> Result<SyntheticFamily> {
        if n_characters < 2 {
            return Err(Error::Config(format!(
                "need at least 2 characters to retarget between, got {n_characters}"
            )));
        }
        if n_motions < 2 {
            return Err(Error::Config(format!(
                "need at least 2 motions to hold one out, got {n_motions}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (lo, hi) = SCALE_RANGE;
        let mut characters = Vec::with_capacity(n_characters);
        let mut scales = Vec::with_capacity(n_characters);
        for i in 0..n_characters {
            let s: [f64; N_SCALE_GROUPS] = std::array::from_fn(|_| rng.gen_range(lo..hi));
            characters.push(scaled_character(&format!("char-{i:02}"), &s)?);
            scales.push(s);
        }
        let motions = (0..n_motions)
            .map(|i| MotionScript::sample(MotionKind::all()[i % 4], i, &mut rng))
            .collect();
        Ok(SyntheticFamily { template: template_skeleton(), characters, scales, motions })
    }

    /// How many of `n` characters or motions are held out of training:
    /// the last third, and always at least one.
    pub fn held_out(n: usize) -> usize {
        (n / 3).max(1)
    }

    /// Assembles the train/test dataset with ground-truth retargettings.
    ///
    /// Character 0 is the canonical source: its clips carry rotations and
    /// serve as retarget inputs. Train entries cover (train motion, train
    /// character) pairs — every motion on character 0 plus one rotating
    /// other train character. Test entries are ground-truth targets tagged
    /// by scenario; for held-out motions the character-0 clip is included
    /// as an input-only test entry. Clip names are `{motion}@{character}`.
    pub fn dataset(&self) -> Result<Dataset> {
        let n_c = self.characters.len();
        let n_m = self.motions.len();
        let tr_c = n_c - Self::held_out(n_c);
        let tr_m = n_m - Self::held_out(n_m);

        let mut entries = Vec::new();
        let mut emit = |script: &MotionScript,
                        character: usize,
                        rotations: bool,
                        split: Split,
                        scenario: Option<Scenario>|
         -> Result<()> {
            entries.push(ClipEntry {
                clip: script.realize(&self.characters[character], &self.template, rotations)?,
                split,
                scenario,
            });
            Ok(())
        };

        for (i, script) in self.motions.iter().enumerate() {
            if i < tr_m {
                let extra = (tr_c >= 2).then(|| 1 + i % (tr_c - 1));
                emit(script, 0, true, Split::Train, None)?;
                if let Some(c) = extra {
                    emit(script, c, false, Split::Train, None)?;
                }
                // Known motion, known character, unseen pair.
                let unseen: Vec<usize> = (1..tr_c).filter(|c| Some(*c) != extra).collect();
                if !unseen.is_empty() {
                    let c = unseen[i % unseen.len()];
                    emit(
                        script,
                        c,
                        false,
                        Split::Test,
                        Some(Scenario::KnownMotionKnownCharacter),
                    )?;
                }
                let held = tr_c + i % (n_c - tr_c);
                emit(
                    script,
                    held,
                    false,
                    Split::Test,
                    Some(Scenario::KnownMotionNewCharacter),
                )?;
            } else {
                let k = i - tr_m;
                // The input-only source clip for a held-out motion.
                emit(
                    script,
                    0,
                    true,
                    Split::Test,
                    Some(Scenario::NewMotionKnownCharacter),
                )?;
                if tr_c >= 2 {
                    emit(
                        script,
                        1 + k % (tr_c - 1),
                        false,
                        Split::Test,
                        Some(Scenario::NewMotionKnownCharacter),
                    )?;
                }
                let held = tr_c + k % (n_c - tr_c);
                emit(
                    script,
                    held,
                    false,
                    Split::Test,
                    Some(Scenario::NewMotionNewCharacter),
                )?;
            }
        }

        let skeletons: BTreeMap<String, Skeleton> = self
            .characters
            .iter()
            .map(|c| (c.name().to_string(), c.clone()))
            .collect();
        let dataset = Dataset { skeletons, entries };

        // Held-out splits are disjoint by construction; assert it.
        let mut names = BTreeSet::new();
        for entry in &dataset.entries {
            assert!(names.insert(&entry.clip.name), "duplicate clip {:?}", entry.clip.name);
        }
        for entry in dataset.train_entries() {
            let ci = self
                .characters
                .iter()
                .position(|c| c.name() == entry.clip.skeleton_id)
                .expect("train clip references a family character");
            let motion = entry.clip.name.rsplit_once('@').expect("generated name").0;
            let mi = self
                .motions
                .iter()
                .position(|m| m.name == motion)
                .expect("train clip references a family motion");
            assert!(ci < tr_c, "held-out character {ci} leaked into the train split");
            assert!(mi < tr_m, "held-out motion {mi} leaked into the train split");
        }

        dataset.validate()?;
        Ok(dataset)
    }
}

/// Builds the synthetic dataset: `n_characters` scaled characters (at
/// least 2), `n_motions` scripted motions, ground-truth cross-retargets,
/// and the four held-out test scenarios. Bit-reproducible per seed.
pub fn generate_dataset(n_characters: usize, n_motions: usize, seed: u64) -> Result<Dataset> {
    SyntheticFamily::new(n_characters, n_motions, seed)?.dataset()
}

/// One retarget to measure: the rotation-bearing source clip of a motion
/// and a ground-truth target clip on another character.
pub struct EvalCase<'a> {
    pub input: &'a MotionClip,
    pub truth: &'a MotionClip,
    pub scenario: Scenario,
}

/// Pairs every ground-truth test clip with its retarget input. Within a
/// motion (clips named `{motion}@{character}`) exactly one clip carries
/// rotations; that clip is the input all the others are measured against,
/// and rotation-bearing test entries themselves are input-only.
pub fn evaluation_cases(dataset: &Dataset) -> Result<Vec<EvalCase<'_>>> {
    fn motion_of(clip: &MotionClip) -> Result<&str> {
        clip.name.rsplit_once('@').map(|(m, _)| m).ok_or_else(|| {
            Error::Dataset(format!(
                "clip name {:?} is not of the form motion@character",
                clip.name
            ))
        })
    }

    let mut inputs: BTreeMap<&str, &MotionClip> = BTreeMap::new();
    for entry in &dataset.entries {
        if entry.clip.rotations.is_some() {
            let motion = motion_of(&entry.clip)?;
            if inputs.insert(motion, &entry.clip).is_some() {
                return Err(Error::Dataset(format!(
                    "motion {motion:?} has more than one rotation-bearing clip"
                )));
            }
        }
    }

    let mut cases = Vec::new();
    for entry in dataset.test_entries() {
        if entry.clip.rotations.is_some() {
            continue;
        }
        let motion = motion_of(&entry.clip)?;
        let input = *inputs.get(motion).ok_or_else(|| {
            Error::Dataset(format!("motion {motion:?} has no rotation-bearing input clip"))
        })?;
        let scenario = entry.scenario.ok_or_else(|| {
            Error::Dataset(format!("test clip {:?} lacks a scenario tag", entry.clip.name))
        })?;
        cases.push(EvalCase { input, truth: &entry.clip, scenario });
    }
    Ok(cases)
}

/// Height-normalized mean squared error between two clips on the same
/// skeleton: world positions are reconstructed from local + global
/// motion, divided by the target character height, and the squared
/// per-joint error (summed over xyz) is averaged over frames and joints.
/// A constant offset of one height in x gives exactly 1.
pub fn mse(pred: &MotionClip, truth: &MotionClip, target_height: f64) -> Result<f64> {
    if pred.n_frames() != truth.n_frames() {
        return Err(Error::LengthMismatch(format!(
            "{} predicted frames vs {} ground-truth frames",
            pred.n_frames(),
            truth.n_frames()
        )));
    }
    if pred.n_joints() != truth.n_joints() {
        return Err(Error::ArityMismatch { expected: truth.n_joints(), got: pred.n_joints() });
    }
    if pred.skeleton_id != truth.skeleton_id {
        return Err(Error::Dataset(format!(
            "comparing clips on different skeletons: {:?} vs {:?}",
            pred.skeleton_id, truth.skeleton_id
        )));
    }
    if !(target_height > 0.0) {
        return Err(Error::Config(format!("non-positive height {target_height}")));
    }
    let wp = pred.to_world()?;
    let wt = truth.to_world()?;
    let mut acc = 0.0;
    for (fp, ft) in wp.iter().zip(&wt) {
        for (p, q) in fp.iter().zip(ft) {
            for axis in 0..3 {
                let d = (p[axis] - q[axis]) / target_height;
                acc += d * d;
            }
        }
    }
    Ok(acc / (pred.n_frames() * pred.n_joints()) as f64)
}

/// Movement intensity of a clip: per-axis world-position variance over
/// time (population convention), averaged over joints and axes, divided
/// by character height. This is the quantity the histogram bins.
pub fn movement_variance(clip: &MotionClip, height: f64) -> Result<f64> {
    if !(height > 0.0) {
        return Err(Error::Config(format!("non-positive height {height}")));
    }
    let world = clip.to_world()?;
    let frames = world.len() as f64;
    let n = clip.n_joints();
    let mut acc = 0.0;
    for j in 0..n {
        for axis in 0..3 {
            let mean: f64 = world.iter().map(|f| f[j][axis]).sum::<f64>() / frames;
            acc += world.iter().map(|f| (f[j][axis] - mean).powi(2)).sum::<f64>() / frames;
        }
    }
    Ok(acc / (3 * n) as f64 / height)
}

/// One evaluated clip.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClipScore {
    pub name: String,
    pub scenario: Option<Scenario>,
    pub mse: f64,
    /// Ground-truth movement variance, used for binning.
    pub variance: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioRow {
    pub scenario: Scenario,
    pub count: usize,
    pub mean_mse: Option<f64>,
}

/// One histogram bin: `[lo, hi)`, unbounded when `hi` is absent.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BinRow {
    pub lo: f64,
    pub hi: Option<f64>,
    pub count: usize,
    pub mean_mse: Option<f64>,
}

/// Buckets clips by ground-truth movement variance and aggregates MSE per
/// bin. Every clip lands in exactly one bin.
pub fn variance_binned_report(scores: &[ClipScore]) -> Vec<BinRow> {
    let edges = VARIANCE_BIN_EDGES;
    let mut count = [0usize; VARIANCE_BIN_EDGES.len()];
    let mut sum = [0.0f64; VARIANCE_BIN_EDGES.len()];
    for score in scores {
        let bin = edges.iter().rposition(|&lo| score.variance >= lo).unwrap_or(0);
        count[bin] += 1;
        sum[bin] += score.mse;
    }
    (0..edges.len())
        .map(|b| BinRow {
            lo: edges[b],
            hi: edges.get(b + 1).copied(),
            count: count[b],
            mean_mse: (count[b] > 0).then(|| sum[b] / count[b] as f64),
        })
        .collect()
}

/// Per-clip scores plus the aggregate, per-scenario, and per-bin views.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub clips: Vec<ClipScore>,
    pub aggregate_mse: Option<f64>,
    pub scenarios: Vec<ScenarioRow>,
    pub bins: Vec<BinRow>,
}

impl EvalReport {
    pub fn from_scores(clips: Vec<ClipScore>) -> EvalReport {
        let aggregate_mse = (!clips.is_empty())
            .then(|| clips.iter().map(|c| c.mse).sum::<f64>() / clips.len() as f64);
        let scenarios = Scenario::all()
            .into_iter()
            .map(|scenario| {
                let hits: Vec<f64> = clips
                    .iter()
                    .filter(|c| c.scenario == Some(scenario))
                    .map(|c| c.mse)
                    .collect();
                ScenarioRow {
                    scenario,
                    count: hits.len(),
                    mean_mse: (!hits.is_empty())
                        .then(|| hits.iter().sum::<f64>() / hits.len() as f64),
                }
            })
            .collect();
        let bins = variance_binned_report(&clips);
        EvalReport { clips, aggregate_mse, scenarios, bins }
    }

    /// The human-readable summary the CLI prints; the variance-bin
    /// section is opt-in.
    pub fn render_table(&self, include_bins: bool) -> String {
        let fmt = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |x| format!("{x:.6}"));
        let mut out = String::new();
        let _ = writeln!(out, "clips evaluated: {}", self.clips.len());
        let _ = writeln!(out, "aggregate MSE:   {}", fmt(self.aggregate_mse));
        let _ = writeln!(out);
        let _ = writeln!(out, "{:<34} {:>6} {:>12}", "scenario", "clips", "MSE");
        for row in &self.scenarios {
            let _ = writeln!(
                out,
                "{:<34} {:>6} {:>12}",
                row.scenario.label(),
                row.count,
                fmt(row.mean_mse)
            );
        }
        if include_bins {
            let _ = writeln!(out);
            let _ = writeln!(out, "{:<34} {:>6} {:>12}", "variance bin", "clips", "MSE");
            for bin in &self.bins {
                let label = match bin.hi {
                    Some(hi) => format!("[{}, {})", bin.lo, hi),
                    None => format!("[{}, inf)", bin.lo),
                };
                let _ =
                    writeln!(out, "{:<34} {:>6} {:>12}", label, bin.count, fmt(bin.mean_mse));
            }
        }
        out
    }
}

/// Resolves the four end-effector columns: hands, then feet, left before
/// right; feet fall back to toe joints on skeletons without foot joints.
pub fn end_effector_joints(skeleton: &Skeleton) -> Result<Vec<(String, usize)>> {
    [
        ("LeftHand", None),
        ("RightHand", None),
        ("LeftFoot", Some("LeftToeBase")),
        ("RightFoot", Some("RightToeBase")),
    ]
    .into_iter()
    .map(|(primary, fallback)| {
        if let Some(idx) = skeleton.joint_index(primary) {
            return Ok((primary.to_string(), idx));
        }
        if let Some(name) = fallback {
            if let Some(idx) = skeleton.joint_index(name) {
                return Ok((name.to_string(), idx));
            }
        }
        Err(Error::Dataset(format!(
            "skeleton {:?} has no {primary} joint{}",
            skeleton.name(),
            fallback.map_or_else(String::new, |f| format!(" (nor {f})"))
        )))
    })
    .collect()
}

/// Per-frame end-effector heights (y of the local motion), one series per
/// resolved joint in stable column order.
pub fn end_effector_heights(
    skeleton: &Skeleton,
    clip: &MotionClip,
) -> Result<Vec<(String, Vec<f64>)>> {
    if skeleton.n_joints() != clip.n_joints() {
        return Err(Error::ArityMismatch {
            expected: skeleton.n_joints(),
            got: clip.n_joints(),
        });
    }
    Ok(end_effector_joints(skeleton)?
        .into_iter()
        .map(|(name, idx)| (name, clip.local.iter().map(|f| f[idx][1]).collect()))
        .collect())
}

/// CSV of end-effector height trajectories: a frame column plus one
/// column per joint from [`end_effector_joints`]. Values print as
/// shortest exact decimals, so parsing the file back is lossless.
pub fn export_end_effector_csv(skeleton: &Skeleton, clip: &MotionClip) -> Result<String> {
    let series = end_effector_heights(skeleton, clip)?;
    let mut out = String::from("frame");
    for (name, _) in &series {
        out.push(',');
        out.push_str(name);
    }
    out.push('\n');
    for t in 0..clip.n_frames() {
        let _ = write!(out, "{t}");
        for (_, values) in &series {
            let _ = write!(out, ",{}", values[t]);
        }
        out.push('\n');
    }
    Ok(out)
}

/// Total variation of a series: the summed absolute frame-to-frame
/// change. The denoising analysis compares this between a jittered input
/// and the model's output.
pub fn total_variation(series: &[f64]) -> f64 {
    series.windows(2).map(|w| (w[1] - w[0]).abs()).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::motion::preprocess;
    use crate::quat::twist_angle_y_deg;

    fn max_world_diff(a: &[Vec<Vec3>], b: &[Vec<Vec3>]) -> f64 {
        a.iter()
            .flatten()
            .flatten()
            .zip(b.iter().flatten().flatten())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max)
    }

    #[test]
    fn family_respects_its_invariants() {
        let family = SyntheticFamily::new(4, 8, 42).unwrap();
        assert_eq!(family.template.joint_names(), &CANONICAL_JOINTS.map(String::from));

        // Rest heading is zero: hips horizontal, left at negative x.
        let t = family.template.tpose();
        let (l, r) = (t[6], t[10]);
        assert!(l[0] < 0.0 && r[0] > 0.0 && l[1] == r[1] && l[2] == r[2]);

        let (lo, hi) = SCALE_RANGE;
        let template_lengths = family.template.bone_lengths();
        for (skeleton, scales) in family.characters.iter().zip(&family.scales) {
            assert!(scales.iter().all(|s| (lo..=hi).contains(s)));
            let lengths = skeleton.bone_lengths();
            for j in 1..skeleton.n_joints() {
                let expect = template_lengths[j] * scales[scale_group(j).unwrap()];
                assert!((lengths[j] - expect).abs() < 1e-12 * (1.0 + expect));
            }
        }

        for script in &family.motions {
            for t in 0..script.frames {
                for q in script.rotations(t) {
                    let twist = twist_angle_y_deg(q).abs();
                    assert!(twist <= TWIST_CAP_DEG + 1e-9, "{}: twist {twist}", script.name);
                }
            }
        }
    }

    #[test]
    fn identical_bone_scales_give_identical_ground_truth() {
        let scales = [1.1; N_SCALE_GROUPS];
        let a = scaled_character("twin-a", &scales).unwrap();
        let b = scaled_character("twin-b", &scales).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let script = MotionScript::sample(MotionKind::Walk, 0, &mut rng);
        let template = template_skeleton();
        let ca = script.realize(&a, &template, true).unwrap();
        let cb = script.realize(&b, &template, true).unwrap();
        assert_eq!(ca.local, cb.local);
        assert_eq!(ca.global, cb.global);
        assert_eq!(ca.rotations, cb.rotations);
        assert_eq!(ca.initial_root, cb.initial_root);
    }

    #[test]
    fn generated_clips_survive_the_world_round_trip() {
        let family = SyntheticFamily::new(3, 4, 7).unwrap();
        for script in &family.motions {
            for skeleton in &family.characters {
                let clip = script.realize(skeleton, &family.template, false).unwrap();
                let world = clip.to_world().unwrap();
                let again = preprocess(skeleton, "rt", clip.fps, &world, None).unwrap();
                let rebuilt = again.to_world().unwrap();
                let diff = max_world_diff(&world, &rebuilt);
                assert!(diff < 1e-5, "{}@{}: {diff}", script.name, skeleton.name());
            }
        }
    }

    #[test]
    fn dataset_generation_is_bit_reproducible() {
        let a = generate_dataset(3, 5, 77).unwrap();
        let b = generate_dataset(3, 5, 77).unwrap();
        assert_eq!(a.entries.len(), b.entries.len());
        for (ea, eb) in a.entries.iter().zip(&b.entries) {
            assert_eq!(
                serde_json::to_string(ea).unwrap(),
                serde_json::to_string(eb).unwrap()
            );
        }
        let c = generate_dataset(3, 5, 78).unwrap();
        let differs = a
            .entries
            .iter()
            .zip(&c.entries)
            .any(|(ea, ec)| serde_json::to_string(ea).unwrap() != serde_json::to_string(ec).unwrap());
        assert!(differs, "different seeds produced identical datasets");
    }

    #[test]
    fn splits_are_disjoint_and_cases_cover_all_scenarios() {
        let dataset = generate_dataset(6, 12, 9).unwrap();
        let held_chars = ["char-04", "char-05"];
        let train_motions = 8; // 12 - max(1, 12/3)

        for entry in dataset.train_entries() {
            assert!(!held_chars.contains(&entry.clip.skeleton_id.as_str()));
            let motion = entry.clip.name.rsplit_once('@').unwrap().0;
            let index: usize = motion.rsplit_once('-').unwrap().1.parse().unwrap();
            assert!(index < train_motions, "held-out motion {motion} in train split");
        }

        let cases = evaluation_cases(&dataset).unwrap();
        assert_eq!(cases.len(), 24); // 8 train motions x 2 targets + 4 held x 2
        let mut seen = BTreeSet::new();
        for case in &cases {
            assert!(case.input.rotations.is_some());
            assert!(case.truth.rotations.is_none());
            assert_eq!(case.input.skeleton_id, "char-00");
            assert_ne!(case.truth.skeleton_id, "char-00");
            let (im, _) = case.input.name.rsplit_once('@').unwrap();
            let (tm, tc) = case.truth.name.rsplit_once('@').unwrap();
            assert_eq!(im, tm);
            let index: usize = tm.rsplit_once('-').unwrap().1.parse().unwrap();
            let expected = match (index < train_motions, !held_chars.contains(&tc)) {
                (true, true) => Scenario::KnownMotionKnownCharacter,
                (true, false) => Scenario::KnownMotionNewCharacter,
                (false, true) => Scenario::NewMotionKnownCharacter,
                (false, false) => Scenario::NewMotionNewCharacter,
            };
            assert_eq!(case.scenario, expected, "{tm}@{tc}");
            seen.insert(case.scenario);
        }
        assert_eq!(seen.len(), 4, "some scenario has no cases");
    }

    #[test]
    fn copying_rotations_reproduces_the_ground_truth() {
        let family = SyntheticFamily::new(3, 4, 21).unwrap();
        let (src, dst) = (&family.characters[0], &family.characters[2]);
        for script in &family.motions {
            let input = script.realize(src, &family.template, true).unwrap();
            let truth = script.realize(dst, &family.template, false).unwrap();
            let copied = crate::baselines::copy_retarget(
                &input,
                src,
                dst,
                Composition::Hierarchical,
            )
            .unwrap();
            assert_eq!(copied.skeleton_id, dst.name());
            let err = mse(&copied, &truth, dst.height()).unwrap();
            assert!(err <= 1e-10, "{}: copy baseline MSE {err}", script.name);
        }
    }

    #[test]
    fn mse_is_zero_on_identical_and_one_on_a_height_offset() {
        let family = SyntheticFamily::new(2, 2, 5).unwrap();
        let clip = family.motions[0]
            .realize(&family.characters[0], &family.template, false)
            .unwrap();
        let h = family.characters[0].height();
        assert!(mse(&clip, &clip, h).unwrap() <= 1e-12);

        let mut shifted = clip.clone();
        shifted.initial_root[0] += h;
        let value = mse(&shifted, &clip, h).unwrap();
        assert!((value - 1.0).abs() < 1e-12, "offset by one height gave {value}");

        let mut jittered = clip.clone();
        jittered.local[3][5][1] += 0.5;
        assert!(mse(&jittered, &clip, h).unwrap() > 0.0);
    }

    #[test]
    fn mse_is_invariant_under_a_shared_yaw() {
        let family = SyntheticFamily::new(2, 3, 11).unwrap();
        let truth = family.motions[0]
            .realize(&family.characters[0], &family.template, false)
            .unwrap();
        let h = family.characters[0].height();
        let mut pred = truth.clone();
        for frame in &mut pred.local {
            for joint in frame.iter_mut().skip(1) {
                joint[0] += 1.5;
                joint[2] -= 0.75;
            }
        }
        let base = mse(&pred, &truth, h).unwrap();
        for phi in [-135.0, -30.0, 45.0, 170.0] {
            let mut p = pred.clone();
            let mut t = truth.clone();
            p.initial_yaw_deg += phi;
            t.initial_yaw_deg += phi;
            let rotated = mse(&p, &t, h).unwrap();
            assert!(
                (rotated - base).abs() < 1e-9 * (1.0 + base),
                "yaw {phi}: {rotated} vs {base}"
            );
        }
    }

    #[test]
    fn mse_rejects_mismatched_clips() {
        let family = SyntheticFamily::new(2, 2, 1).unwrap();
        let a = family.motions[0]
            .realize(&family.characters[0], &family.template, false)
            .unwrap();
        let b = family.motions[0]
            .realize(&family.characters[1], &family.template, false)
            .unwrap();
        assert!(matches!(mse(&a, &b, 100.0), Err(Error::Dataset(_))));
        let mut short = a.clone();
        short.local.truncate(10);
        short.global.truncate(10);
        assert!(matches!(mse(&short, &a, 100.0), Err(Error::LengthMismatch(_))));
    }

    /// A two-joint rig of height one with the probe oscillating a full
    /// number of sine periods has closed-form variance 1/2, diluted by
    /// the documented joint/axis averaging to 1/12.
    #[test]
    fn movement_variance_matches_the_closed_form_oracle() {
        let skeleton = Skeleton::new(
            "probe",
            vec![("Root".into(), None), ("Probe".into(), Some(0))],
            vec![[0.0, 0.0, 0.0], [0.0, 1.0, 0.0]],
        )
        .unwrap();
        let frames = 96;
        let local: Vec<Vec<Vec3>> = (0..frames)
            .map(|t| {
                let x = (TAU * t as f64 / 24.0).sin();
                vec![[0.0, 0.0, 0.0], [x, 1.0, 0.0]]
            })
            .collect();
        let clip = MotionClip {
            name: "osc".into(),
            skeleton_id: "probe".into(),
            fps: 30.0,
            initial_root: [0.0, 0.0, 0.0],
            initial_yaw_deg: 0.0,
            local,
            global: vec![[0.0; 4]; frames],
            rotations: None,
        };
        clip.validate().unwrap();
        let v = movement_variance(&clip, skeleton.height()).unwrap();
        let expected = 0.5 / 6.0;
        assert!((v - expected).abs() < 1e-6, "variance {v}, closed form {expected}");

        let still = MotionClip {
            local: vec![vec![[0.0, 0.0, 0.0], [0.3, 1.0, 0.0]]; 4],
            global: vec![[0.0; 4]; 4],
            ..clip
        };
        assert_eq!(movement_variance(&still, 1.0).unwrap(), 0.0);
    }

    #[test]
    fn every_clip_lands_in_exactly_one_bin() {
        let score = |variance: f64, mse: f64| ClipScore {
            name: format!("v{variance}"),
            scenario: None,
            mse,
            variance,
        };
        let scores = vec![
            score(0.0, 1.0),
            score(2.4, 2.0),
            score(2.5, 3.0),
            score(7.0, 4.0),
            score(19.99, 5.0),
            score(20.0, 6.0),
            score(1000.0, 8.0),
        ];
        let bins = variance_binned_report(&scores);
        assert_eq!(bins.len(), VARIANCE_BIN_EDGES.len());
        assert!(bins.windows(2).all(|w| w[0].lo < w[1].lo));
        assert_eq!(bins.iter().map(|b| b.count).sum::<usize>(), scores.len());
        assert_eq!(bins.iter().map(|b| b.count).collect::<Vec<_>>(), vec![2, 1, 1, 1, 2]);
        assert_eq!(bins[0].mean_mse, Some(1.5));
        assert_eq!(bins[4].mean_mse, Some(7.0));
        assert_eq!(bins[4].hi, None);
    }

    #[test]
    fn report_aggregates_and_survives_json() {
        let mk = |name: &str, scenario, mse: f64, variance: f64| ClipScore {
            name: name.into(),
            scenario,
            mse,
            variance,
        };
        let report = EvalReport::from_scores(vec![
            mk("a", Some(Scenario::KnownMotionNewCharacter), 0.5, 1.0),
            mk("b", Some(Scenario::KnownMotionNewCharacter), 1.5, 3.0),
            mk("c", Some(Scenario::NewMotionNewCharacter), 2.0, 12.0),
        ]);
        assert_eq!(report.aggregate_mse, Some(4.0 / 3.0));
        let known_new = &report.scenarios[1];
        assert_eq!(known_new.scenario, Scenario::KnownMotionNewCharacter);
        assert_eq!(known_new.count, 2);
        assert_eq!(known_new.mean_mse, Some(1.0));
        assert_eq!(report.scenarios[0].mean_mse, None);

        let json = serde_json::to_string(&report).unwrap();
        let back: EvalReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back, report);

        let table = report.render_table(true);
        assert!(table.contains("aggregate MSE"));
        for row in &report.scenarios {
            assert!(table.contains(row.scenario.label()));
        }
        assert!(table.contains("[20, inf)"));
        assert!(!report.render_table(false).contains("variance bin"));
    }

    #[test]
    fn end_effector_csv_is_stable_and_lossless() {
        let template = template_skeleton();
        let rest = template.tpose_local();
        let frames = 5;
        let clip = MotionClip {
            name: "tpose".into(),
            skeleton_id: template.name().into(),
            fps: 30.0,
            initial_root: [0.0, 95.0, 0.0],
            initial_yaw_deg: 0.0,
            local: vec![rest.clone(); frames],
            global: vec![[0.0; 4]; frames],
            rotations: None,
        };
        let csv = export_end_effector_csv(&template, &clip).unwrap();
        let mut lines = csv.lines();
        assert_eq!(lines.next().unwrap(), "frame,LeftHand,RightHand,LeftFoot,RightFoot");
        let expected: Vec<f64> = ["LeftHand", "RightHand", "LeftFoot", "RightFoot"]
            .iter()
            .map(|n| rest[template.joint_index(n).unwrap()][1])
            .collect();
        for (t, line) in lines.enumerate() {
            let mut fields = line.split(',');
            assert_eq!(fields.next().unwrap().parse::<usize>().unwrap(), t);
            let values: Vec<f64> =
                fields.map(|f| f.parse().unwrap()).collect();
            assert_eq!(values, expected, "constant T-pose heights");
        }

        // Lossless round trip on non-trivial values.
        let family = SyntheticFamily::new(2, 2, 13).unwrap();
        let moving = family.motions[0]
            .realize(&family.characters[0], &family.template, false)
            .unwrap();
        let skeleton = &family.characters[0];
        let csv = export_end_effector_csv(skeleton, &moving).unwrap();
        let series = end_effector_heights(skeleton, &moving).unwrap();
        for (t, line) in csv.lines().skip(1).enumerate() {
            for (k, field) in line.split(',').skip(1).enumerate() {
                let parsed: f64 = field.parse().unwrap();
                assert_eq!(parsed.to_bits(), series[k].1[t].to_bits());
            }
        }
    }

    #[test]
    fn feet_fall_back_to_toes_when_absent() {
        let skeleton = Skeleton::new(
            "handsy",
            vec![
                ("Root".into(), None),
                ("LeftHand".into(), Some(0)),
                ("RightHand".into(), Some(0)),
                ("LeftToeBase".into(), Some(0)),
                ("RightToeBase".into(), Some(0)),
            ],
            vec![
                [0.0, 50.0, 0.0],
                [-20.0, 50.0, 0.0],
                [20.0, 50.0, 0.0],
                [-5.0, 0.0, 0.0],
                [5.0, 0.0, 0.0],
            ],
        )
        .unwrap();
        let joints = end_effector_joints(&skeleton).unwrap();
        let names: Vec<&str> = joints.iter().map(|(n, _)| n.as_str()).collect();
        assert_eq!(names, ["LeftHand", "RightHand", "LeftToeBase", "RightToeBase"]);

        let armless = Skeleton::new(
            "armless",
            vec![("Root".into(), None), ("LeftFoot".into(), Some(0))],
            vec![[0.0, 50.0, 0.0], [0.0, 0.0, 0.0]],
        )
        .unwrap();
        assert!(matches!(end_effector_joints(&armless), Err(Error::Dataset(_))));
    }

    #[test]
    fn total_variation_sums_absolute_steps() {
        assert_eq!(total_variation(&[1.0, 1.0, 1.0]), 0.0);
        assert_eq!(total_variation(&[0.0, 1.0, 0.0, 1.0]), 3.0);
        assert_eq!(total_variation(&[2.0]), 0.0);
        let smooth: Vec<f64> = (0..10).map(|t| t as f64 / 10.0).collect();
        assert!((total_variation(&smooth) - 0.9).abs() < 1e-12);
    }
}
