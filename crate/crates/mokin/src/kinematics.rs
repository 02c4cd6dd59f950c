//! Skeletons and differentiable forward kinematics.
//!
//! A [`Skeleton`] is a topologically ordered joint table with T-pose
//! positions; bone offsets are derived once at construction. The forward
//! pass [`fk_forward`] turns per-joint unit quaternions into local joint
//! positions (root pinned at the origin) by rotating each bone offset:
//!
//! ```text
//! p[n] = p[parent(n)] + W[n] * offset[n]
//! ```
//!
//! where `W[n]` is either the hierarchically composed rotation
//! `W[parent] * R[n]` (default) or just `R[n]` when every quaternion is
//! read as a world-frame rotation. Because `W[n]` is orthonormal, bone
//! lengths equal the T-pose offsets by construction in both modes; no
//! training signal can stretch a bone.
//!
//! [`fk_backward`] is the hand-derived adjoint of the same recursion and
//! is checked against finite differences in the tests. [`apply_global`]
//! re-applies accumulated heading and root translation to recover world
//! coordinates from a local pose sequence plus per-frame root velocities.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quat::{self, add3, sub3, Mat3, Quat, Vec3};

/// Joint order used by the synthetic characters, the BVH mapping, and the
/// CLI tools. Index 0 is the root; parents always precede children.
pub const CANONICAL_JOINTS: [&str; 22] = [
    "Root",
    "Spine",
    "Spine1",
    "Spine2",
    "Neck",
    "Head",
    "LeftUpLeg",
    "LeftLeg",
    "LeftFoot",
    "LeftToeBase",
    "RightUpLeg",
    "RightLeg",
    "RightFoot",
    "RightToeBase",
    "LeftShoulder",
    "LeftArm",
    "LeftForeArm",
    "LeftHand",
    "RightShoulder",
    "RightArm",
    "RightForeArm",
    "RightHand",
];

/// Parent of each canonical joint (root has none).
pub fn canonical_parents() -> [Option<usize>; 22] {
    [
        None,
        Some(0),
        Some(1),
        Some(2),
        Some(3),
        Some(4),
        Some(0),
        Some(6),
        Some(7),
        Some(8),
        Some(0),
        Some(10),
        Some(11),
        Some(12),
        Some(3),
        Some(14),
        Some(15),
        Some(16),
        Some(3),
        Some(18),
        Some(19),
        Some(20),
    ]
}

/// How per-joint rotations compose along the hierarchy.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Composition {
    /// `W[n] = W[parent] * R[n]`; a joint's rotation carries its whole
    /// subtree, as in a conventional rig.
    #[default]
    Hierarchical,
    /// `W[n] = R[n]`; each quaternion orients its bone directly in the
    /// root frame. The root quaternion is unused (the root has no bone).
    PerJointWorld,
}

impl Composition {
    pub fn parse(s: &str) -> Option<Composition> {
        match s {
            "hierarchical" => Some(Composition::Hierarchical),
            "per-joint-world" => Some(Composition::PerJointWorld),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Composition::Hierarchical => "hierarchical",
            Composition::PerJointWorld => "per-joint-world",
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct SkeletonData {
    name: String,
    joints: Vec<JointData>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct JointData {
    name: String,
    parent: Option<usize>,
    tpose: Vec3,
}

/// Joint table with T-pose positions and derived bone offsets.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(try_from = "SkeletonData", into = "SkeletonData")]
pub struct Skeleton {
    name: String,
    joint_names: Vec<String>,
    parents: Vec<Option<usize>>,
    tpose: Vec<Vec3>,
    offsets: Vec<Vec3>,
}

impl Skeleton {
    /// Builds a skeleton from `(name, parent)` pairs and T-pose world
    /// positions. Joints must be ordered parent-before-child with exactly
    /// one root at index 0.
    pub fn new(
        name: impl Into<String>,
        joints: Vec<(String, Option<usize>)>,
        tpose: Vec<Vec3>,
    ) -> Result<Skeleton> {
        if joints.len() != tpose.len() {
            return Err(Error::LengthMismatch(format!(
                "{} joints vs {} T-pose positions",
                joints.len(),
                tpose.len()
            )));
        }
        if joints.is_empty() {
            return Err(Error::InvalidHierarchy { joint: 0, parent: 0 });
        }
        for (idx, (_, parent)) in joints.iter().enumerate() {
            match parent {
                None if idx == 0 => {}
                Some(p) if idx > 0 && *p < idx => {}
                _ => {
                    return Err(Error::InvalidHierarchy {
                        joint: idx,
                        parent: parent.unwrap_or(idx),
                    })
                }
            }
        }
        let offsets = joints
            .iter()
            .enumerate()
            .map(|(idx, (_, parent))| match parent {
                Some(p) => sub3(tpose[idx], tpose[*p]),
                None => [0.0; 3],
            })
            .collect();
        Ok(Skeleton {
            name: name.into(),
            joint_names: joints.iter().map(|(n, _)| n.clone()).collect(),
            parents: joints.iter().map(|(_, p)| *p).collect(),
            tpose,
            offsets,
        })
    }

    /// The canonical 22-joint humanoid with caller-provided T-pose.
    pub fn canonical(name: impl Into<String>, tpose: Vec<Vec3>) -> Result<Skeleton> {
        let joints = CANONICAL_JOINTS
            .iter()
            .zip(canonical_parents())
            .map(|(n, p)| (n.to_string(), p))
            .collect();
        Skeleton::new(name, joints, tpose)
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn n_joints(&self) -> usize {
        self.joint_names.len()
    }

    pub fn joint_names(&self) -> &[String] {
        &self.joint_names
    }

    pub fn parent(&self, joint: usize) -> Option<usize> {
        self.parents[joint]
    }

    pub fn tpose(&self) -> &[Vec3] {
        &self.tpose
    }

    pub fn offset(&self, joint: usize) -> Vec3 {
        self.offsets[joint]
    }

    pub fn offsets(&self) -> &[Vec3] {
        &self.offsets
    }

    pub fn joint_index(&self, name: &str) -> Option<usize> {
        self.joint_names.iter().position(|n| n == name)
    }

    /// Head-to-toe extent of the T-pose (cm), floored to stay usable as a
    /// normalizer for degenerate test skeletons.
    pub fn height(&self) -> f64 {
        let max = self.tpose.iter().map(|p| p[1]).fold(f64::MIN, f64::max);
        let min = self.tpose.iter().map(|p| p[1]).fold(f64::MAX, f64::min);
        (max - min).max(1e-6)
    }

    /// Bone lengths indexed by joint; the root entry is zero.
    pub fn bone_lengths(&self) -> Vec<f64> {
        self.offsets.iter().map(|o| quat::norm3(*o)).collect()
    }

    /// T-pose positions with the root moved to the origin, i.e. the local
    /// pose produced by identity rotations.
    pub fn tpose_local(&self) -> Vec<Vec3> {
        let root = self.tpose[0];
        self.tpose.iter().map(|p| sub3(*p, root)).collect()
    }
}

impl TryFrom<SkeletonData> for Skeleton {
    type Error = Error;

    fn try_from(data: SkeletonData) -> Result<Skeleton> {
        let tpose = data.joints.iter().map(|j| j.tpose).collect();
        let joints = data
            .joints
            .into_iter()
            .map(|j| (j.name, j.parent))
            .collect();
        Skeleton::new(data.name, joints, tpose)
    }
}

impl From<Skeleton> for SkeletonData {
    fn from(s: Skeleton) -> SkeletonData {
        SkeletonData {
            name: s.name,
            joints: s
                .joint_names
                .into_iter()
                .zip(s.parents)
                .zip(s.tpose)
                .map(|((name, parent), tpose)| JointData { name, parent, tpose })
                .collect(),
        }
    }
}

/// Per-frame FK products kept for the backward pass.
pub struct FkCache {
    /// Local rotation matrix of each joint.
    pub rot: Vec<Mat3>,
    /// Composed world rotation of each joint.
    pub world: Vec<Mat3>,
    /// Output positions (root at origin).
    pub positions: Vec<Vec3>,
}

fn validate_quats(skeleton: &Skeleton, quats: &[Quat]) -> Result<()> {
    if quats.len() != skeleton.n_joints() {
        return Err(Error::ArityMismatch {
            expected: skeleton.n_joints(),
            got: quats.len(),
        });
    }
    for q in quats {
        q.validated()?;
    }
    Ok(())
}

/// Forward kinematics with cached intermediates.
pub fn fk_forward_cached(
    skeleton: &Skeleton,
    quats: &[Quat],
    mode: Composition,
) -> Result<FkCache> {
    validate_quats(skeleton, quats)?;
    let n = skeleton.n_joints();
    let mut rot: Vec<Mat3> = Vec::with_capacity(n);
    let mut world: Vec<Mat3> = Vec::with_capacity(n);
    let mut positions = vec![[0.0; 3]; n];
    for joint in 0..n {
        let local = quats[joint].to_rotmat();
        let composed = match (mode, skeleton.parent(joint)) {
            (Composition::Hierarchical, Some(p)) => world[p].mul(&local),
            _ => local,
        };
        if let Some(p) = skeleton.parent(joint) {
            positions[joint] = add3(positions[p], composed.mul_vec(skeleton.offset(joint)));
        }
        rot.push(local);
        world.push(composed);
    }
    Ok(FkCache { rot, world, positions })
}

/// Joint positions for one frame of rotations; root pinned at the origin.
pub fn fk_forward(skeleton: &Skeleton, quats: &[Quat], mode: Composition) -> Result<Vec<Vec3>> {
    Ok(fk_forward_cached(skeleton, quats, mode)?.positions)
}

fn outer3(a: Vec3, b: Vec3) -> Mat3 {
    let mut m = [[0.0; 3]; 3];
    for (row, mrow) in m.iter_mut().enumerate() {
        for (col, cell) in mrow.iter_mut().enumerate() {
            *cell = a[row] * b[col];
        }
    }
    Mat3(m)
}

fn mat_add_assign(dst: &mut Mat3, src: &Mat3) {
    for row in 0..3 {
        for col in 0..3 {
            dst.0[row][col] += src.0[row][col];
        }
    }
}

/// Adjoint of [`fk_forward`]: gradient of a scalar loss with respect to
/// each quaternion component, given gradients with respect to the output
/// positions. Walks joints in reverse order, accumulating position
/// gradients into parents and rotation gradients through the composition.
pub fn fk_backward(
    skeleton: &Skeleton,
    quats: &[Quat],
    cache: &FkCache,
    d_positions: &[Vec3],
    mode: Composition,
) -> Vec<[f64; 4]> {
    let n = skeleton.n_joints();
    assert_eq!(d_positions.len(), n, "position gradient arity");
    let zero = Mat3([[0.0; 3]; 3]);
    let mut d_pos: Vec<Vec3> = d_positions.to_vec();
    let mut d_world = vec![zero; n];
    let mut d_quats = vec![[0.0; 4]; n];
    for joint in (0..n).rev() {
        let d_rot = match skeleton.parent(joint) {
            Some(p) => {
                // p[joint] = p[parent] + W[joint] * offset
                d_pos[p] = add3(d_pos[p], d_pos[joint]);
                mat_add_assign(
                    &mut d_world[joint],
                    &outer3(d_pos[joint], skeleton.offset(joint)),
                );
                match mode {
                    Composition::Hierarchical => {
                        // W[joint] = W[parent] * R[joint]
                        let d_w = d_world[joint];
                        let d_parent = d_w.mul(&cache.rot[joint].transpose());
                        mat_add_assign(&mut d_world[p], &d_parent);
                        cache.world[p].transpose().mul(&d_w)
                    }
                    Composition::PerJointWorld => d_world[joint],
                }
            }
            None => match mode {
                // Root world rotation is its own local rotation; it moved
                // no bone directly, but descendants accumulated into it.
                Composition::Hierarchical => d_world[joint],
                Composition::PerJointWorld => zero,
            },
        };
        d_quats[joint] = quat::to_rotmat_grad(quats[joint], &d_rot);
    }
    d_quats
}

/// Recovers world positions from local poses and per-frame root motion.
///
/// `global` rows are `(vx, vy, vz, dyaw_deg)`: the root displacement to
/// the next frame expressed in the current heading frame, and the heading
/// change in degrees. The inverse of motion preprocessing: frame `t` is
/// placed by yaw-rotating the local pose and translating by the
/// integrated root, then the root state advances using row `t`.
pub fn apply_global(
    local: &[Vec<Vec3>],
    global: &[[f64; 4]],
    initial_root: Vec3,
    initial_yaw_deg: f64,
) -> Result<Vec<Vec<Vec3>>> {
    if local.len() != global.len() {
        return Err(Error::LengthMismatch(format!(
            "{} local frames vs {} global rows",
            local.len(),
            global.len()
        )));
    }
    let mut out = Vec::with_capacity(local.len());
    let mut yaw = initial_yaw_deg;
    let mut root = initial_root;
    for (pose, g) in local.iter().zip(global) {
        let heading = Mat3::yaw_deg(yaw);
        out.push(
            pose.iter()
                .map(|p| add3(root, heading.mul_vec(*p)))
                .collect(),
        );
        root = add3(root, heading.mul_vec([g[0], g[1], g[2]]));
        yaw += g[3];
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{assert_grad_close, FD_STEP};
    use crate::quat::normalize;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Relative bone-length tolerance; FK preserves lengths to roundoff,
    /// the looser bound here is the documented contract.
    const BONE_LEN_REL_TOL: f64 = 1e-6;

    fn chain3() -> Skeleton {
        Skeleton::new(
            "chain3",
            vec![
                ("root".into(), None),
                ("a".into(), Some(0)),
                ("b".into(), Some(1)),
            ],
            vec![[0.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 2.0, 0.0]],
        )
        .unwrap()
    }

    /// A canonical-skeleton T-pose used by several tests. Roughly humanoid
    /// proportions in cm; exact values are irrelevant to the invariants.
    pub(crate) fn test_humanoid() -> Skeleton {
        let mut tpose = vec![[0.0; 3]; 22];
        tpose[0] = [0.0, 95.0, 0.0];
        tpose[1] = [0.0, 105.0, 0.0];
        tpose[2] = [0.0, 115.0, 0.0];
        tpose[3] = [0.0, 125.0, 0.0];
        tpose[4] = [0.0, 140.0, 0.0];
        tpose[5] = [0.0, 152.0, 0.0];
        tpose[6] = [9.0, 90.0, 0.0];
        tpose[7] = [9.0, 50.0, 0.0];
        tpose[8] = [9.0, 8.0, 0.0];
        tpose[9] = [9.0, 2.0, 13.0];
        tpose[10] = [-9.0, 90.0, 0.0];
        tpose[11] = [-9.0, 50.0, 0.0];
        tpose[12] = [-9.0, 8.0, 0.0];
        tpose[13] = [-9.0, 2.0, 13.0];
        tpose[14] = [8.0, 133.0, 0.0];
        tpose[15] = [20.0, 133.0, 0.0];
        tpose[16] = [46.0, 133.0, 0.0];
        tpose[17] = [71.0, 133.0, 0.0];
        tpose[18] = [-8.0, 133.0, 0.0];
        tpose[19] = [-20.0, 133.0, 0.0];
        tpose[20] = [-46.0, 133.0, 0.0];
        tpose[21] = [-71.0, 133.0, 0.0];
        Skeleton::canonical("test-humanoid", tpose).unwrap()
    }

    fn random_unit_quats(rng: &mut ChaCha8Rng, n: usize) -> Vec<Quat> {
        (0..n)
            .map(|_| {
                normalize([
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                ])
                .unwrap_or(Quat::IDENTITY)
            })
            .collect()
    }

    /// Independent oracle: per-joint ancestor-chain product, recomputed
    /// from scratch for every joint without shared accumulation.
    fn fk_oracle(skeleton: &Skeleton, quats: &[Quat], mode: Composition) -> Vec<Vec3> {
        let n = skeleton.n_joints();
        let mut positions = vec![[0.0; 3]; n];
        for joint in 1..n {
            // Collect the root-to-joint path.
            let mut path = vec![joint];
            while let Some(p) = skeleton.parent(*path.last().unwrap()) {
                path.push(p);
            }
            path.reverse();
            // Sum rotated offsets along the path.
            let mut pos = [0.0; 3];
            for (depth, &node) in path.iter().enumerate() {
                let world = match mode {
                    Composition::PerJointWorld => quats[node].to_rotmat(),
                    Composition::Hierarchical => {
                        let mut acc = Mat3::identity();
                        for &anc in &path[..=depth] {
                            acc = acc.mul(&quats[anc].to_rotmat());
                        }
                        acc
                    }
                };
                pos = add3(pos, world.mul_vec(skeleton.offset(node)));
            }
            positions[joint] = pos;
        }
        positions
    }

    #[test]
    fn identity_rotations_reproduce_tpose() {
        let skel = test_humanoid();
        let quats = vec![Quat::IDENTITY; 22];
        for mode in [Composition::Hierarchical, Composition::PerJointWorld] {
            let pos = fk_forward(&skel, &quats, mode).unwrap();
            for (got, want) in pos.iter().zip(skel.tpose_local()) {
                for c in 0..3 {
                    assert!((got[c] - want[c]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn rotated_root_swings_whole_chain() {
        let skel = chain3();
        let mut quats = vec![Quat::IDENTITY; 3];
        quats[0] = Quat::from_axis_angle([0.0, 0.0, 1.0], 90f64.to_radians());
        let pos = fk_forward(&skel, &quats, Composition::Hierarchical).unwrap();
        // In this crate's convention the z quarter turn maps +y to +x.
        assert!((pos[1][0] - 1.0).abs() < 1e-12 && pos[1][1].abs() < 1e-12);
        assert!((pos[2][0] - 2.0).abs() < 1e-12 && pos[2][1].abs() < 1e-12);
        // World mode reads child quaternions directly: identity children
        // leave their bones unrotated, and the root quaternion is unused.
        let world = fk_forward(&skel, &quats, Composition::PerJointWorld).unwrap();
        assert!((world[1][1] - 1.0).abs() < 1e-12);
        assert!((world[2][1] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn forward_matches_chain_product_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let skel = test_humanoid();
        for mode in [Composition::Hierarchical, Composition::PerJointWorld] {
            for _ in 0..20 {
                let quats = random_unit_quats(&mut rng, 22);
                let got = fk_forward(&skel, &quats, mode).unwrap();
                let want = fk_oracle(&skel, &quats, mode);
                for (g, w) in got.iter().zip(&want) {
                    for c in 0..3 {
                        assert!((g[c] - w[c]).abs() < 1e-9, "mode {mode:?}");
                    }
                }
            }
        }
    }

    #[test]
    fn bone_lengths_are_conserved() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let skel = test_humanoid();
        let lengths = skel.bone_lengths();
        for mode in [Composition::Hierarchical, Composition::PerJointWorld] {
            for _ in 0..200 {
                let quats = random_unit_quats(&mut rng, 22);
                let pos = fk_forward(&skel, &quats, mode).unwrap();
                for joint in 1..22 {
                    let parent = skel.parent(joint).unwrap();
                    let got = quat::norm3(sub3(pos[joint], pos[parent]));
                    assert!(
                        (got - lengths[joint]).abs() <= BONE_LEN_REL_TOL * lengths[joint],
                        "joint {joint}: {got} vs {}",
                        lengths[joint]
                    );
                }
            }
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let skel = test_humanoid();
        for mode in [Composition::Hierarchical, Composition::PerJointWorld] {
            for _ in 0..5 {
                let quats = random_unit_quats(&mut rng, 22);
                let upstream: Vec<Vec3> = (0..22)
                    .map(|_| {
                        [
                            rng.gen_range(-1.0..1.0),
                            rng.gen_range(-1.0..1.0),
                            rng.gen_range(-1.0..1.0),
                        ]
                    })
                    .collect();
                let cache = fk_forward_cached(&skel, &quats, mode).unwrap();
                let analytic: Vec<f64> = fk_backward(&skel, &quats, &cache, &upstream, mode)
                    .into_iter()
                    .flatten()
                    .collect();
                let flat: Vec<f64> = quats.iter().flat_map(|q| q.as_array()).collect();
                let f = |x: &[f64]| {
                    let qs: Vec<Quat> = x
                        .chunks(4)
                        .map(|c| Quat::new(c[0], c[1], c[2], c[3]))
                        .collect();
                    let pos = fk_forward(&skel, &qs, mode).unwrap();
                    pos.iter()
                        .zip(&upstream)
                        .map(|(p, u)| p[0] * u[0] + p[1] * u[1] + p[2] * u[2])
                        .sum()
                };
                assert_grad_close(f, &flat, &analytic, FD_STEP, 1e-5, 1e-5);
            }
        }
    }

    #[test]
    fn arity_and_finiteness_are_enforced() {
        let skel = chain3();
        match fk_forward(&skel, &[Quat::IDENTITY; 2], Composition::Hierarchical) {
            Err(Error::ArityMismatch { expected: 3, got: 2 }) => {}
            other => panic!("expected arity error, got {other:?}"),
        }
        let mut quats = vec![Quat::IDENTITY; 3];
        quats[1] = Quat::new(f64::NAN, 0.0, 0.0, 0.0);
        match fk_forward(&skel, &quats, Composition::Hierarchical) {
            Err(Error::NonFiniteQuaternion(..)) => {}
            other => panic!("expected non-finite error, got {other:?}"),
        }
    }

    #[test]
    fn skeleton_construction_validates_order() {
        let bad = Skeleton::new(
            "bad",
            vec![("root".into(), None), ("a".into(), Some(1))],
            vec![[0.0; 3], [0.0, 1.0, 0.0]],
        );
        assert!(matches!(bad, Err(Error::InvalidHierarchy { joint: 1, parent: 1 })));
        let two_roots = Skeleton::new(
            "bad2",
            vec![("root".into(), None), ("r2".into(), None)],
            vec![[0.0; 3], [0.0, 1.0, 0.0]],
        );
        assert!(two_roots.is_err());
    }

    #[test]
    fn skeleton_serde_round_trip() {
        let skel = test_humanoid();
        let json = serde_json::to_string(&skel).unwrap();
        let back: Skeleton = serde_json::from_str(&json).unwrap();
        assert_eq!(back.n_joints(), skel.n_joints());
        assert_eq!(back.joint_names(), skel.joint_names());
        for j in 0..22 {
            assert_eq!(back.parent(j), skel.parent(j));
            assert_eq!(back.tpose()[j], skel.tpose()[j]);
            assert_eq!(back.offset(j), skel.offset(j));
        }
        assert!((back.height() - skel.height()).abs() < 1e-12);
    }

    #[test]
    fn apply_global_integrates_heading_and_translation() {
        // One joint at the local origin; verify the root path by hand.
        let local = vec![vec![[0.0, 0.0, 0.0]]; 3];
        // Move 1 cm forward (+z in the heading frame) each frame while
        // yawing 90 degrees per frame.
        let global = vec![[0.0, 0.0, 1.0, 90.0]; 3];
        let out = apply_global(&local, &global, [0.0; 3], 0.0).unwrap();
        assert!((out[0][0][2]).abs() < 1e-12);
        // After frame 0: root advanced along +z (yaw 0).
        assert!((out[1][0][2] - 1.0).abs() < 1e-12 && out[1][0][0].abs() < 1e-12);
        // After frame 1: yaw 90, heading +x.
        assert!((out[2][0][0] - 1.0).abs() < 1e-12 && (out[2][0][2] - 1.0).abs() < 1e-12);

        // A nonzero local offset is rotated by the accumulated yaw.
        let local = vec![vec![[0.0, 0.0, 2.0]]; 2];
        let global = vec![[0.0, 0.0, 0.0, 0.0]; 2];
        let out = apply_global(&local, &global, [0.0; 3], 90.0).unwrap();
        // Yaw 90 maps +z to +x in this convention.
        assert!((out[0][0][0] - 2.0).abs() < 1e-12 && out[0][0][2].abs() < 1e-12);
        assert!((out[1][0][0] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn apply_global_rejects_mismatched_lengths() {
        let local = vec![vec![[0.0; 3]]; 3];
        let global = vec![[0.0; 4]; 2];
        assert!(matches!(
            apply_global(&local, &global, [0.0; 3], 0.0),
            Err(Error::LengthMismatch(_))
        ));
    }
}
