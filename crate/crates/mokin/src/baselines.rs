//! Comparison methods the retargetting network is measured against:
//! copying rotations onto the target skeleton, and two direct-coordinate
//! networks (recurrent and feedforward) that predict joint positions
//! without a kinematic layer.
//!
//! The direct networks share the feature space, conditioning, and
//! training loop of the main model but their pose heads emit xyz
//! coordinates, so nothing constrains their outputs to realizable
//! poses: trained cross-skeleton they stretch and shrink bones, which is
//! the property the kinematic layer removes by construction. Since the
//! root is pinned at the origin in every clip, the heads predict only
//! the non-root joints and the root row is a structural zero.

use std::path::Path;

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::kinematics::{fk_forward, Composition, Skeleton};
use crate::model::{
    read_checkpoint_doc, restore_params, write_checkpoint_doc, CondNodes, Condition,
    ModelManifest, DYAW_SCALE,
};
use crate::motion::MotionClip;
use crate::neural::gru::gru_stack_step;
use crate::neural::init::uniform_fan_in;
use crate::neural::{GruStack, GruStackNodes, NamedTensors, Node, Tape, Tensor};
use crate::quat::wrap_deg;

/// Architecture tags stored in baseline checkpoints.
pub const ARCH_RNN_DIRECT: &str = "rnn-direct";
pub const ARCH_MLP_DIRECT: &str = "mlp-direct";

/// Fixed depth of the feedforward baseline's hidden stack.
pub const MLP_LAYERS: usize = 2;

// ---- rotation copying ----

/// Retargets by applying the input's per-joint rotations to the target
/// skeleton and scaling the travel by the height ratio. Exact on
/// same-skeleton inputs (ratio 1) and on ground truth generated with
/// the same rotation-copy semantics; requires rotation-bearing input.
pub fn copy_retarget(
    input: &MotionClip,
    source: &Skeleton,
    target: &Skeleton,
    composition: Composition,
) -> Result<MotionClip> {
    if input.skeleton_id != source.name() {
        return Err(Error::Dataset(format!(
            "clip {:?} belongs to skeleton {:?}, not {:?}",
            input.name,
            input.skeleton_id,
            source.name()
        )));
    }
    if source.n_joints() != target.n_joints() {
        return Err(Error::ArityMismatch {
            expected: source.n_joints(),
            got: target.n_joints(),
        });
    }
    let rotations = input.rotations.as_ref().ok_or_else(|| {
        Error::Clip(format!(
            "clip {:?} carries no rotations; the copy baseline needs rotation-bearing input",
            input.name
        ))
    })?;
    let ratio = target.height() / source.height();
    let mut local = Vec::with_capacity(rotations.len());
    for frame in rotations {
        local.push(fk_forward(target, frame, composition)?);
    }
    let global = input
        .global
        .iter()
        .map(|g| [g[0] * ratio, g[1] * ratio, g[2] * ratio, g[3]])
        .collect();
    let clip = MotionClip {
        name: input.name.clone(),
        skeleton_id: target.name().to_string(),
        fps: input.fps,
        initial_root: input.initial_root.map(|x| x * ratio),
        initial_yaw_deg: input.initial_yaw_deg,
        local,
        global,
        rotations: Some(rotations.clone()),
    };
    clip.validate()?;
    Ok(clip)
}

// ---- shared pieces of the direct-coordinate heads ----

/// Width of the heads' position output: every joint except the root.
fn pose_width(n_joints: usize) -> usize {
    3 * (n_joints - 1)
}

/// Assembles a normalized output frame `[0 0 0, positions, velocity]`
/// with the root row structurally zero.
fn direct_xhat(tape: &mut Tape, zero3: Node, h: Node, heads: &HeadNodes) -> Result<Node> {
    let p_lin = tape.matmul(h, heads.w_p)?;
    let pos = tape.add_bias(p_lin, heads.b_p)?;
    let v_lin = tape.matmul(h, heads.w_v)?;
    let vel = tape.add_bias(v_lin, heads.b_v)?;
    tape.concat(&[zero3, pos, vel])
}

#[derive(Clone, Debug)]
struct Heads {
    w_p: Tensor,
    b_p: Tensor,
    w_v: Tensor,
    b_v: Tensor,
}

impl Heads {
    fn zeros(hidden: usize, n_joints: usize) -> Heads {
        Heads {
            w_p: Tensor::zeros(&[hidden, pose_width(n_joints)]),
            b_p: Tensor::zeros(&[pose_width(n_joints)]),
            w_v: Tensor::zeros(&[hidden, 4]),
            b_v: Tensor::zeros(&[4]),
        }
    }

    fn init(hidden: usize, n_joints: usize, rng: &mut ChaCha8Rng) -> Heads {
        Heads {
            w_p: uniform_fan_in(rng, hidden, pose_width(n_joints)),
            b_p: Tensor::zeros(&[pose_width(n_joints)]),
            w_v: uniform_fan_in(rng, hidden, 4),
            b_v: Tensor::zeros(&[4]),
        }
    }

    fn visit<'a>(&'a self, f: &mut impl FnMut(String, &'a Tensor)) {
        f("head.wp".into(), &self.w_p);
        f("head.bp".into(), &self.b_p);
        f("head.wv".into(), &self.w_v);
        f("head.bv".into(), &self.b_v);
    }

    fn visit_mut(&mut self, f: &mut impl FnMut(String, &mut Tensor)) {
        f("head.wp".into(), &mut self.w_p);
        f("head.bp".into(), &mut self.b_p);
        f("head.wv".into(), &mut self.w_v);
        f("head.bv".into(), &mut self.b_v);
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.w_p, &mut self.b_p, &mut self.w_v, &mut self.b_v]
    }

    fn bind(&self, tape: &mut Tape, trainable: bool) -> HeadNodes {
        HeadNodes {
            w_p: tape.leaf(self.w_p.clone(), trainable),
            b_p: tape.leaf(self.b_p.clone(), trainable),
            w_v: tape.leaf(self.w_v.clone(), trainable),
            b_v: tape.leaf(self.b_v.clone(), trainable),
        }
    }
}

struct HeadNodes {
    w_p: Node,
    b_p: Node,
    w_v: Node,
    b_v: Node,
}

impl HeadNodes {
    fn param_nodes(&self) -> [Node; 4] {
        [self.w_p, self.b_p, self.w_v, self.b_v]
    }
}

/// Extracts plain clip data from synthesized normalized frames.
pub(crate) fn frames_to_clip(
    tape: &Tape,
    xhats: &[Node],
    input: &MotionClip,
    cond: &Condition,
    initial_root: crate::quat::Vec3,
) -> Result<MotionClip> {
    let n = cond.skeleton().n_joints();
    let h = cond.height();
    let mut local = Vec::with_capacity(xhats.len());
    let mut global = Vec::with_capacity(xhats.len());
    for &node in xhats {
        let x = tape.value(node);
        let mut frame = vec![[0.0; 3]; n];
        for j in 1..n {
            for a in 0..3 {
                frame[j][a] = x.data[3 * j + a] * h;
            }
        }
        local.push(frame);
        // Unconstrained heads can emit any heading rate; wrapping keeps
        // the clip invariant and leaves world reconstruction unchanged.
        global.push([
            x.data[3 * n] * h,
            x.data[3 * n + 1] * h,
            x.data[3 * n + 2] * h,
            wrap_deg(x.data[3 * n + 3] * DYAW_SCALE),
        ]);
    }
    let clip = MotionClip {
        name: input.name.clone(),
        skeleton_id: cond.skeleton().name().to_string(),
        fps: input.fps,
        initial_root,
        initial_yaw_deg: input.initial_yaw_deg,
        local,
        global,
        rotations: None,
    };
    clip.validate()?;
    Ok(clip)
}

// ---- recurrent direct-coordinate baseline ----

/// The main model's encoder/decoder recurrence with the kinematic layer
/// removed: the pose head writes joint coordinates directly.
#[derive(Clone, Debug)]
pub struct DirectRnn {
    pub encoder: GruStack,
    pub decoder: GruStack,
    heads: Heads,
    n_joints: usize,
    hidden: usize,
    layers: usize,
}

impl DirectRnn {
    pub fn new(n_joints: usize, hidden: usize, layers: usize, rng: &mut ChaCha8Rng) -> DirectRnn {
        assert!(n_joints >= 2 && hidden >= 1 && layers >= 1);
        let frame = 3 * n_joints + 4;
        DirectRnn {
            encoder: GruStack::init(frame, hidden, layers, rng),
            decoder: GruStack::init(frame + hidden + pose_width(n_joints), hidden, layers, rng),
            heads: Heads::init(hidden, n_joints, rng),
            n_joints,
            hidden,
            layers,
        }
    }

    pub fn zeros(n_joints: usize, hidden: usize, layers: usize) -> DirectRnn {
        assert!(n_joints >= 2 && hidden >= 1 && layers >= 1);
        let frame = 3 * n_joints + 4;
        DirectRnn {
            encoder: GruStack::zeros(frame, hidden, layers),
            decoder: GruStack::zeros(frame + hidden + pose_width(n_joints), hidden, layers),
            heads: Heads::zeros(hidden, n_joints),
            n_joints,
            hidden,
            layers,
        }
    }

    pub fn n_joints(&self) -> usize {
        self.n_joints
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn layers(&self) -> usize {
        self.layers
    }

    pub fn visit<'a>(&'a self, f: &mut impl FnMut(String, &'a Tensor)) {
        self.encoder.visit("encoder", f);
        self.decoder.visit("decoder", f);
        self.heads.visit(f);
    }

    pub fn visit_mut(&mut self, f: &mut impl FnMut(String, &mut Tensor)) {
        self.encoder.visit_mut("encoder", f);
        self.decoder.visit_mut("decoder", f);
        self.heads.visit_mut(f);
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for stack in [&mut self.encoder, &mut self.decoder] {
            for layer in &mut stack.layers {
                out.extend([
                    &mut layer.wz,
                    &mut layer.uz,
                    &mut layer.bz,
                    &mut layer.wr,
                    &mut layer.ur,
                    &mut layer.br,
                    &mut layer.wn,
                    &mut layer.un,
                    &mut layer.bn,
                ]);
            }
        }
        out.extend(self.heads.params_mut());
        out
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> DirectRnnNodes {
        DirectRnnNodes {
            encoder: self.encoder.bind(tape, trainable),
            decoder: self.decoder.bind(tape, trainable),
            heads: self.heads.bind(tape, trainable),
            n_joints: self.n_joints,
            hidden: self.hidden,
            layers: self.layers,
        }
    }

    pub fn manifest(&self, joint_names: &[String]) -> ModelManifest {
        ModelManifest {
            architecture: ARCH_RNN_DIRECT.into(),
            n_joints: self.n_joints,
            joint_names: joint_names.to_vec(),
            hidden: self.hidden,
            layers: self.layers,
            composition: Composition::Hierarchical.name().into(),
            dyaw_scale: DYAW_SCALE,
        }
    }

    pub fn save_checkpoint(&self, path: &Path, joint_names: &[String]) -> Result<()> {
        let mut tensors = NamedTensors::default();
        let mut pairs = Vec::new();
        self.visit(&mut |name, t| pairs.push((name, t)));
        for (name, t) in pairs {
            tensors.insert(&name, t)?;
        }
        write_checkpoint_doc(path, &self.manifest(joint_names), &tensors)
    }

    pub fn load_checkpoint(path: &Path) -> Result<(DirectRnn, ModelManifest)> {
        let (manifest, tensors) = read_checkpoint_doc(path)?;
        let model = DirectRnn::restore_from_parts(&manifest, &tensors)?;
        Ok((model, manifest))
    }

    pub(crate) fn restore_from_parts(
        manifest: &ModelManifest,
        tensors: &NamedTensors,
    ) -> Result<DirectRnn> {
        check_direct_manifest(manifest, ARCH_RNN_DIRECT)?;
        let mut model = DirectRnn::zeros(manifest.n_joints, manifest.hidden, manifest.layers);
        restore_params(tensors, |f| model.visit_mut(&mut |name, t| f(name, t)))?;
        Ok(model)
    }
}

pub struct DirectRnnNodes {
    encoder: GruStackNodes,
    decoder: GruStackNodes,
    heads: HeadNodes,
    n_joints: usize,
    hidden: usize,
    layers: usize,
}

impl DirectRnnNodes {
    pub fn param_nodes(&self) -> Vec<Node> {
        let mut out = Vec::new();
        for stack in [&self.encoder, &self.decoder] {
            for layer in &stack.layers {
                out.extend([
                    layer.wz, layer.uz, layer.bz, layer.wr, layer.ur, layer.br, layer.wn,
                    layer.un, layer.bn,
                ]);
            }
        }
        out.extend(self.heads.param_nodes());
        out
    }

    /// Normalized output frames for normalized inputs, mirroring the
    /// main model's recurrence with a coordinate head.
    pub fn synthesize(
        &self,
        tape: &mut Tape,
        inputs: &[Node],
        cond: &CondNodes,
    ) -> Result<Vec<Node>> {
        if inputs.len() < 2 {
            return Err(Error::Clip("fewer than two frames".into()));
        }
        if cond.skeleton.n_joints() != self.n_joints {
            return Err(Error::ArityMismatch {
                expected: self.n_joints,
                got: cond.skeleton.n_joints(),
            });
        }
        let zero3 = tape.constant(Tensor::zeros(&[3]));
        let zero_state: Vec<Node> = (0..self.layers)
            .map(|_| tape.constant(Tensor::zeros(&[self.hidden])))
            .collect();
        let mut enc_state = zero_state.clone();
        let mut dec_state = zero_state;
        let mut xhat_prev = cond.seed;
        let mut xhats = Vec::with_capacity(inputs.len());
        for &x in inputs {
            let v = tape.value(x);
            if v.rank() != 1 || v.numel() != 3 * self.n_joints + 4 {
                return Err(Error::ArityMismatch {
                    expected: 3 * self.n_joints + 4,
                    got: v.numel(),
                });
            }
            enc_state = gru_stack_step(tape, &self.encoder, x, &enc_state)?;
            let h_enc = *enc_state.last().expect("at least one layer");
            let dec_in = tape.concat(&[xhat_prev, h_enc, cond.sbar])?;
            dec_state = gru_stack_step(tape, &self.decoder, dec_in, &dec_state)?;
            let h = *dec_state.last().expect("at least one layer");
            let xhat = direct_xhat(tape, zero3, h, &self.heads)?;
            xhat_prev = xhat;
            xhats.push(xhat);
        }
        Ok(xhats)
    }
}

// ---- feedforward direct-coordinate baseline ----

/// A per-frame map with no recurrence: each output frame is a function
/// of the current input frame and the target's bone offsets only.
#[derive(Clone, Debug)]
pub struct DirectMlp {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
    heads: Heads,
    n_joints: usize,
    hidden: usize,
}

impl DirectMlp {
    pub fn new(n_joints: usize, hidden: usize, rng: &mut ChaCha8Rng) -> DirectMlp {
        assert!(n_joints >= 2 && hidden >= 1);
        let in_dim = 3 * n_joints + 4 + pose_width(n_joints);
        DirectMlp {
            w1: uniform_fan_in(rng, in_dim, hidden),
            b1: Tensor::zeros(&[hidden]),
            w2: uniform_fan_in(rng, hidden, hidden),
            b2: Tensor::zeros(&[hidden]),
            heads: Heads::init(hidden, n_joints, rng),
            n_joints,
            hidden,
        }
    }

    pub fn zeros(n_joints: usize, hidden: usize) -> DirectMlp {
        assert!(n_joints >= 2 && hidden >= 1);
        let in_dim = 3 * n_joints + 4 + pose_width(n_joints);
        DirectMlp {
            w1: Tensor::zeros(&[in_dim, hidden]),
            b1: Tensor::zeros(&[hidden]),
            w2: Tensor::zeros(&[hidden, hidden]),
            b2: Tensor::zeros(&[hidden]),
            heads: Heads::zeros(hidden, n_joints),
            n_joints,
            hidden,
        }
    }

    pub fn n_joints(&self) -> usize {
        self.n_joints
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn visit<'a>(&'a self, f: &mut impl FnMut(String, &'a Tensor)) {
        f("mlp.0.w".into(), &self.w1);
        f("mlp.0.b".into(), &self.b1);
        f("mlp.1.w".into(), &self.w2);
        f("mlp.1.b".into(), &self.b2);
        self.heads.visit(f);
    }

    pub fn visit_mut(&mut self, f: &mut impl FnMut(String, &mut Tensor)) {
        f("mlp.0.w".into(), &mut self.w1);
        f("mlp.0.b".into(), &mut self.b1);
        f("mlp.1.w".into(), &mut self.w2);
        f("mlp.1.b".into(), &mut self.b2);
        self.heads.visit_mut(f);
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2];
        out.extend(self.heads.params_mut());
        out
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> DirectMlpNodes {
        DirectMlpNodes {
            w1: tape.leaf(self.w1.clone(), trainable),
            b1: tape.leaf(self.b1.clone(), trainable),
            w2: tape.leaf(self.w2.clone(), trainable),
            b2: tape.leaf(self.b2.clone(), trainable),
            heads: self.heads.bind(tape, trainable),
            n_joints: self.n_joints,
        }
    }

    pub fn manifest(&self, joint_names: &[String]) -> ModelManifest {
        ModelManifest {
            architecture: ARCH_MLP_DIRECT.into(),
            n_joints: self.n_joints,
            joint_names: joint_names.to_vec(),
            hidden: self.hidden,
            layers: MLP_LAYERS,
            composition: Composition::Hierarchical.name().into(),
            dyaw_scale: DYAW_SCALE,
        }
    }

    pub fn save_checkpoint(&self, path: &Path, joint_names: &[String]) -> Result<()> {
        let mut tensors = NamedTensors::default();
        let mut pairs = Vec::new();
        self.visit(&mut |name, t| pairs.push((name, t)));
        for (name, t) in pairs {
            tensors.insert(&name, t)?;
        }
        write_checkpoint_doc(path, &self.manifest(joint_names), &tensors)
    }

    pub fn load_checkpoint(path: &Path) -> Result<(DirectMlp, ModelManifest)> {
        let (manifest, tensors) = read_checkpoint_doc(path)?;
        let model = DirectMlp::restore_from_parts(&manifest, &tensors)?;
        Ok((model, manifest))
    }

    pub(crate) fn restore_from_parts(
        manifest: &ModelManifest,
        tensors: &NamedTensors,
    ) -> Result<DirectMlp> {
        check_direct_manifest(manifest, ARCH_MLP_DIRECT)?;
        if manifest.layers != MLP_LAYERS {
            return Err(Error::CheckpointMismatch(format!(
                "feedforward baseline always has {MLP_LAYERS} layers, checkpoint says {}",
                manifest.layers
            )));
        }
        let mut model = DirectMlp::zeros(manifest.n_joints, manifest.hidden);
        restore_params(tensors, |f| model.visit_mut(&mut |name, t| f(name, t)))?;
        Ok(model)
    }
}

pub struct DirectMlpNodes {
    w1: Node,
    b1: Node,
    w2: Node,
    b2: Node,
    heads: HeadNodes,
    n_joints: usize,
}

impl DirectMlpNodes {
    pub fn param_nodes(&self) -> Vec<Node> {
        let mut out = vec![self.w1, self.b1, self.w2, self.b2];
        out.extend(self.heads.param_nodes());
        out
    }

    pub fn synthesize(
        &self,
        tape: &mut Tape,
        inputs: &[Node],
        cond: &CondNodes,
    ) -> Result<Vec<Node>> {
        if inputs.len() < 2 {
            return Err(Error::Clip("fewer than two frames".into()));
        }
        if cond.skeleton.n_joints() != self.n_joints {
            return Err(Error::ArityMismatch {
                expected: self.n_joints,
                got: cond.skeleton.n_joints(),
            });
        }
        let zero3 = tape.constant(Tensor::zeros(&[3]));
        let mut xhats = Vec::with_capacity(inputs.len());
        for &x in inputs {
            let v = tape.value(x);
            if v.rank() != 1 || v.numel() != 3 * self.n_joints + 4 {
                return Err(Error::ArityMismatch {
                    expected: 3 * self.n_joints + 4,
                    got: v.numel(),
                });
            }
            let x_in = tape.concat(&[x, cond.sbar])?;
            let a1 = tape.matmul(x_in, self.w1)?;
            let a1 = tape.add_bias(a1, self.b1)?;
            let h1 = tape.tanh(a1);
            let a2 = tape.matmul(h1, self.w2)?;
            let a2 = tape.add_bias(a2, self.b2)?;
            let h2 = tape.tanh(a2);
            xhats.push(direct_xhat(tape, zero3, h2, &self.heads)?);
        }
        Ok(xhats)
    }
}

fn check_direct_manifest(manifest: &ModelManifest, arch: &str) -> Result<()> {
    if manifest.architecture != arch {
        return Err(Error::CheckpointMismatch(format!(
            "architecture {:?} where {arch:?} was expected",
            manifest.architecture
        )));
    }
    if manifest.dyaw_scale != DYAW_SCALE {
        return Err(Error::CheckpointMismatch(format!(
            "heading-rate scale {} differs from built-in {DYAW_SCALE}",
            manifest.dyaw_scale
        )));
    }
    if manifest.joint_names.len() != manifest.n_joints {
        return Err(Error::CheckpointMismatch(format!(
            "{} joint names for {} joints",
            manifest.joint_names.len(),
            manifest.n_joints
        )));
    }
    if manifest.n_joints < 2 || manifest.hidden == 0 || manifest.layers == 0 {
        return Err(Error::CheckpointMismatch("zero-sized architecture".into()));
    }
    Ok(())
}
