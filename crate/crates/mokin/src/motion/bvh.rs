//! Read-only BVH ingestion: hierarchy, channels, and per-frame forward
//! kinematics evaluated with the file's own conventions.
//!
//! Joints are renamed onto the canonical set via [`super::names`];
//! unrecognized joints still participate in the file's kinematics but are
//! dropped from the output, with their mapped descendants re-parented to
//! the nearest mapped ancestor. When the file is rotation-only beyond the
//! root and no joints were dropped between mapped ones, per-joint
//! quaternions in this crate's convention are recovered as well, which is
//! what the rotation-copy baseline consumes.

use crate::error::{Error, Result};
use crate::kinematics::Skeleton;
use crate::quat::{add3, Mat3, Quat, Vec3};

use super::names::{canonical_index, canonical_joint};

/// Result of parsing one BVH file.
pub struct BvhMotion {
    /// Mapped joints renamed to canonical names, T-pose from the OFFSET
    /// tree.
    pub skeleton: Skeleton,
    /// Frames per second, from `Frame Time`.
    pub fps: f64,
    /// Per-frame world positions of the mapped joints.
    pub positions: Vec<Vec<Vec3>>,
    /// Local quaternions reproducing the pose relative to the root, when
    /// recoverable exactly (rotation-only file, no dropped joints inside
    /// mapped chains).
    pub rotations: Option<Vec<Vec<Quat>>>,
}

#[derive(Clone, Copy, PartialEq, Debug)]
enum Channel {
    XPos,
    YPos,
    ZPos,
    XRot,
    YRot,
    ZRot,
}

impl Channel {
    fn parse(token: &str) -> Option<Channel> {
        match token.to_ascii_lowercase().as_str() {
            "xposition" => Some(Channel::XPos),
            "yposition" => Some(Channel::YPos),
            "zposition" => Some(Channel::ZPos),
            "xrotation" => Some(Channel::XRot),
            "yrotation" => Some(Channel::YRot),
            "zrotation" => Some(Channel::ZRot),
            _ => None,
        }
    }

    fn is_rotation(self) -> bool {
        matches!(self, Channel::XRot | Channel::YRot | Channel::ZRot)
    }
}

/// Active rotation about one axis by `deg` degrees, applied in the order
/// the file lists its channels (first listed is outermost).
fn axis_rot_deg(axis: Channel, deg: f64) -> Mat3 {
    let (s, c) = deg.to_radians().sin_cos();
    match axis {
        Channel::XRot => Mat3([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]]),
        Channel::YRot => Mat3([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]]),
        Channel::ZRot => Mat3([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]]),
        _ => unreachable!("translation channel has no rotation matrix"),
    }
}

struct Node {
    name: String,
    parent: Option<usize>,
    offset: Vec3,
    channels: Vec<Channel>,
    line: usize,
}

struct Tokens<'a> {
    items: Vec<(&'a str, usize)>,
    pos: usize,
}

impl<'a> Tokens<'a> {
    fn new(text: &'a str) -> Tokens<'a> {
        let mut items = Vec::new();
        for (idx, line) in text.lines().enumerate() {
            for tok in line.split_whitespace() {
                items.push((tok, idx + 1));
            }
        }
        Tokens { items, pos: 0 }
    }

    fn line(&self) -> usize {
        self.items
            .get(self.pos.min(self.items.len().saturating_sub(1)))
            .map_or(0, |(_, l)| *l)
    }

    fn err(&self, msg: impl Into<String>) -> Error {
        Error::Parse { line: self.line(), msg: msg.into() }
    }

    fn peek(&self) -> Option<&'a str> {
        self.items.get(self.pos).map(|(t, _)| *t)
    }

    fn next(&mut self, what: &str) -> Result<&'a str> {
        match self.items.get(self.pos) {
            Some((t, _)) => {
                self.pos += 1;
                Ok(t)
            }
            None => Err(Error::Parse {
                line: self.items.last().map_or(0, |(_, l)| *l),
                msg: format!("unexpected end of file, expected {what}"),
            }),
        }
    }

    fn expect(&mut self, token: &str) -> Result<()> {
        let got = self.next(token)?;
        if got.eq_ignore_ascii_case(token) {
            Ok(())
        } else {
            self.pos -= 1;
            Err(self.err(format!("expected {token:?}, found {got:?}")))
        }
    }

    fn float(&mut self, what: &str) -> Result<f64> {
        let tok = self.next(what)?;
        let value: f64 = tok.parse().map_err(|_| {
            self.pos -= 1;
            self.err(format!("{what}: {tok:?} is not a number"))
        })?;
        if !value.is_finite() {
            self.pos -= 1;
            return Err(self.err(format!("{what}: non-finite value {tok:?}")));
        }
        Ok(value)
    }

    fn integer(&mut self, what: &str) -> Result<usize> {
        let tok = self.next(what)?;
        tok.parse().map_err(|_| {
            self.pos -= 1;
            self.err(format!("{what}: {tok:?} is not a count"))
        })
    }
}

fn parse_joint_body(
    tokens: &mut Tokens,
    nodes: &mut Vec<Node>,
    this: usize,
    depth: usize,
) -> Result<()> {
    if depth > 64 {
        return Err(tokens.err("joint nesting deeper than 64"));
    }
    tokens.expect("{")?;
    tokens.expect("OFFSET")?;
    let offset = [
        tokens.float("offset x")?,
        tokens.float("offset y")?,
        tokens.float("offset z")?,
    ];
    nodes[this].offset = offset;
    tokens.expect("CHANNELS")?;
    let count = tokens.integer("channel count")?;
    if count != 3 && count != 6 {
        return Err(tokens.err(format!("joint has {count} channels, expected 3 or 6")));
    }
    for _ in 0..count {
        let tok = tokens.next("channel name")?;
        let channel = Channel::parse(tok)
            .ok_or_else(|| tokens.err(format!("unknown channel {tok:?}")))?;
        nodes[this].channels.push(channel);
    }
    loop {
        match tokens.peek() {
            Some(t) if t.eq_ignore_ascii_case("JOINT") => {
                tokens.next("JOINT")?;
                let name = tokens.next("joint name")?.to_string();
                let line = tokens.line();
                nodes.push(Node {
                    name,
                    parent: Some(this),
                    offset: [0.0; 3],
                    channels: Vec::new(),
                    line,
                });
                let child = nodes.len() - 1;
                parse_joint_body(tokens, nodes, child, depth + 1)?;
            }
            Some(t) if t.eq_ignore_ascii_case("End") => {
                tokens.next("End")?;
                tokens.expect("Site")?;
                tokens.expect("{")?;
                tokens.expect("OFFSET")?;
                tokens.float("end-site offset x")?;
                tokens.float("end-site offset y")?;
                tokens.float("end-site offset z")?;
                tokens.expect("}")?;
            }
            Some("}") => {
                tokens.next("}")?;
                return Ok(());
            }
            Some(t) => return Err(tokens.err(format!("unexpected token {t:?} in joint"))),
            None => return Err(tokens.err("unterminated joint block")),
        }
    }
}

/// Parses a BVH document and evaluates its motion.
pub fn parse_bvh(text: &str) -> Result<BvhMotion> {
    let mut tokens = Tokens::new(text);
    tokens.expect("HIERARCHY")?;
    tokens.expect("ROOT")?;
    let root_name = tokens.next("root joint name")?.to_string();
    let root_line = tokens.line();
    let mut nodes = vec![Node {
        name: root_name,
        parent: None,
        offset: [0.0; 3],
        channels: Vec::new(),
        line: root_line,
    }];
    parse_joint_body(&mut tokens, &mut nodes, 0, 0)?;

    tokens.expect("MOTION")?;
    tokens.expect("Frames:")?;
    let n_frames = tokens.integer("frame count")?;
    tokens.expect("Frame")?;
    tokens.expect("Time:")?;
    let frame_time = tokens.float("frame time")?;
    if frame_time <= 0.0 {
        return Err(tokens.err(format!("frame time {frame_time} not positive")));
    }
    let fps = (1e6 / frame_time).round() / 1e6;

    let total_channels: usize = nodes.iter().map(|n| n.channels.len()).sum();
    let mut frames = Vec::with_capacity(n_frames);
    for frame in 0..n_frames {
        let mut row = Vec::with_capacity(total_channels);
        for c in 0..total_channels {
            row.push(
                tokens.float(&format!("frame {frame} channel {c} (of {total_channels})"))?,
            );
        }
        frames.push(row);
    }
    if let Some(extra) = tokens.peek() {
        return Err(tokens.err(format!(
            "trailing data {extra:?} after {n_frames} frames"
        )));
    }

    // Joint-name mapping; duplicates are an error, unmapped joints only
    // serve as kinematic pass-through.
    let mut mapped: Vec<(usize, usize)> = Vec::new(); // (canonical idx, node idx)
    for (idx, node) in nodes.iter().enumerate() {
        if let Some(joint) = canonical_joint(&node.name) {
            let canon = canonical_index(joint).expect("alias table is canonical");
            if let Some(&(_, prev)) = mapped.iter().find(|(c, _)| *c == canon) {
                return Err(Error::Parse {
                    line: node.line,
                    msg: format!(
                        "joints {:?} and {:?} both map to {joint:?}",
                        nodes[prev].name, node.name
                    ),
                });
            }
            mapped.push((canon, idx));
        }
    }
    if mapped.is_empty() {
        return Err(Error::Parse {
            line: root_line,
            msg: "no joint maps to a canonical name".into(),
        });
    }
    mapped.sort();
    let node_to_mapped: Vec<Option<usize>> = {
        let mut lut = vec![None; nodes.len()];
        for (slot, &(_, node)) in mapped.iter().enumerate() {
            lut[node] = Some(slot);
        }
        lut
    };
    // Nearest mapped ancestor in the BVH tree becomes the parent.
    let mut joints = Vec::with_capacity(mapped.len());
    let mut parent_slots = Vec::with_capacity(mapped.len());
    for &(canon, node) in &mapped {
        let mut anc = nodes[node].parent;
        let mut parent_slot = None;
        while let Some(a) = anc {
            if let Some(slot) = node_to_mapped[a] {
                parent_slot = Some(slot);
                break;
            }
            anc = nodes[a].parent;
        }
        if parent_slot.is_none() && !joints.is_empty() {
            return Err(Error::Parse {
                line: nodes[node].line,
                msg: format!(
                    "mapped joints do not form a single tree: {:?} has no mapped ancestor",
                    nodes[node].name
                ),
            });
        }
        joints.push((
            crate::kinematics::CANONICAL_JOINTS[canon].to_string(),
            parent_slot,
        ));
        parent_slots.push(parent_slot);
    }

    // T-pose: zero-channel world positions, i.e. accumulated offsets.
    let mut tpose_all = vec![[0.0; 3]; nodes.len()];
    for (idx, node) in nodes.iter().enumerate() {
        tpose_all[idx] = match node.parent {
            Some(p) => add3(tpose_all[p], node.offset),
            None => node.offset,
        };
    }
    let tpose: Vec<Vec3> = mapped.iter().map(|&(_, node)| tpose_all[node]).collect();
    let skeleton = Skeleton::new(nodes[0].name.clone(), joints, tpose)?;

    // Per-frame FK with the file's own semantics: translations add to the
    // offset in the parent frame, rotations compose in channel order.
    let rotation_only = nodes
        .iter()
        .skip(1)
        .all(|n| n.channels.iter().all(|c| c.is_rotation()));
    let chain_exact = mapped.iter().enumerate().all(|(slot, &(_, node))| {
        match parent_slots[slot] {
            Some(ps) => nodes[node].parent == Some(mapped[ps].1),
            None => true,
        }
    });
    let recover_rotations = rotation_only && chain_exact;

    let mut positions = Vec::with_capacity(n_frames);
    let mut rotations: Vec<Vec<Quat>> = Vec::with_capacity(n_frames);
    for row in &frames {
        let mut world_rot: Vec<Mat3> = Vec::with_capacity(nodes.len());
        let mut world_pos: Vec<Vec3> = Vec::with_capacity(nodes.len());
        let mut cursor = 0;
        for node in &nodes {
            let mut local = Mat3::identity();
            let mut trans = node.offset;
            for channel in &node.channels {
                let value = row[cursor];
                cursor += 1;
                match channel {
                    Channel::XPos => trans[0] += value,
                    Channel::YPos => trans[1] += value,
                    Channel::ZPos => trans[2] += value,
                    rot => local = local.mul(&axis_rot_deg(*rot, value)),
                }
            }
            match node.parent {
                Some(p) => {
                    world_pos.push(add3(world_pos[p], world_rot[p].mul_vec(trans)));
                    world_rot.push(world_rot[p].mul(&local));
                }
                None => {
                    world_pos.push(trans);
                    world_rot.push(local);
                }
            }
        }
        positions.push(
            mapped
                .iter()
                .map(|&(_, node)| world_pos[node])
                .collect::<Vec<Vec3>>(),
        );
        if recover_rotations {
            // In this crate's kinematics a bone is carried by its child
            // joint's composed rotation, so the world rotation feeding
            // joint n is the file's world rotation of n's parent node;
            // locals follow by peeling off the mapped parent.
            let mut ours_world: Vec<Mat3> = Vec::with_capacity(mapped.len());
            let mut frame_quats = Vec::with_capacity(mapped.len());
            for (slot, &(_, node)) in mapped.iter().enumerate() {
                match parent_slots[slot] {
                    None => {
                        ours_world.push(Mat3::identity());
                        frame_quats.push(Quat::IDENTITY);
                    }
                    Some(ps) => {
                        let target = world_rot[nodes[node].parent.expect("non-root")];
                        let local = ours_world[ps].transpose().mul(&target);
                        ours_world.push(target);
                        frame_quats.push(Quat::from_rotmat(&local));
                    }
                }
            }
            rotations.push(frame_quats);
        }
    }

    Ok(BvhMotion {
        skeleton,
        fps,
        positions,
        rotations: recover_rotations.then_some(rotations),
    })
}
