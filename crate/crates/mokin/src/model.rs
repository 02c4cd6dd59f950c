//! The retargetting network: a recurrent encoder over the source motion
//! and a recurrent decoder conditioned on the target skeleton, with a
//! quaternion head driving forward kinematics and an affine head for
//! root velocity.
//!
//! Feature scaling: positions and linear velocities are divided by the
//! source character's height on the way in, and the heading rate by
//! [`DYAW_SCALE`]. The decoder works in the target character's
//! normalized space; its position output is the FK pose (real units)
//! and the composite frame it feeds back to itself stays normalized.
//! The decoder input at step `t` is the concatenation
//! `[xhat_{t-1}, h_enc_t, s_bar]`, where `xhat_{t-1}` is the network's
//! own previous output frame (no teacher forcing) and `s_bar` is the
//! target skeleton's flattened bone offsets divided by its height.
//! `xhat_0` is the target T-pose with zero velocity.
//!
//! The quaternion head starts at zero weights with a unit-quaternion
//! bias, so an untrained model emits the target T-pose exactly; the
//! velocity head starts at zero. Synthesis is causal — frame `t`
//! depends only on input frames `1..=t` — which [`Synthesizer`]
//! exploits to emit frames one at a time from a live stream.

use std::io::{BufReader, BufWriter, Write};
use std::path::Path;
use std::rc::Rc;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kinematics::{Composition, Skeleton};
use crate::motion::{GlobalRow, MotionClip};
use crate::neural::checkpoint::CHECKPOINT_VERSION;
use crate::neural::gru::gru_stack_step;
use crate::neural::{GruStack, GruStackNodes, NamedTensors, Node, Tape, Tensor};
use crate::quat::{Quat, Vec3};

/// Decoder width used by the full-size model.
pub const DEFAULT_HIDDEN: usize = 512;
pub const DEFAULT_LAYERS: usize = 2;

/// Heading-rate normalizer: the velocity head's yaw output is trained
/// in units of this many degrees per frame.
pub const DYAW_SCALE: f64 = 90.0;

/// Architecture tag stored in checkpoints written by [`RetargetModel`].
pub const ARCH_FK_RNN: &str = "fk-rnn";

// ---- target-skeleton conditioning ----

/// Precomputed conditioning features for one target skeleton: the
/// normalized bone-offset vector `s_bar` and the seed frame `xhat_0`.
pub struct Condition {
    skeleton: Rc<Skeleton>,
    height: f64,
    sbar: Tensor,
    seed: Tensor,
}

impl Condition {
    pub fn new(skeleton: &Skeleton) -> Condition {
        let n = skeleton.n_joints();
        let height = skeleton.height();
        let mut sbar = Vec::with_capacity(3 * (n - 1));
        for offset in &skeleton.offsets()[1..] {
            sbar.extend(offset.iter().map(|c| c / height));
        }
        let mut seed = Vec::with_capacity(3 * n + 4);
        for p in skeleton.tpose_local() {
            seed.extend(p.iter().map(|c| c / height));
        }
        seed.extend([0.0; 4]);
        Condition {
            skeleton: Rc::new(skeleton.clone()),
            height,
            sbar: Tensor { shape: vec![3 * (n - 1)], data: sbar },
            seed: Tensor { shape: vec![3 * n + 4], data: seed },
        }
    }

    pub fn skeleton(&self) -> &Skeleton {
        &self.skeleton
    }

    pub fn height(&self) -> f64 {
        self.height
    }

    /// Normalized bone-offset feature vector, `3(N-1)` wide.
    pub fn sbar(&self) -> &Tensor {
        &self.sbar
    }

    /// Copies the conditioning constants onto a tape.
    pub fn bind(&self, tape: &mut Tape) -> CondNodes {
        CondNodes {
            skeleton: self.skeleton.clone(),
            height: self.height,
            sbar: tape.constant(self.sbar.clone()),
            seed: tape.constant(self.seed.clone()),
        }
    }
}

/// Tape handles for one target skeleton's conditioning features.
pub struct CondNodes {
    pub skeleton: Rc<Skeleton>,
    pub height: f64,
    pub sbar: Node,
    pub seed: Node,
}

// ---- the model ----

/// Parameters of the retargetting network. The quaternion head maps the
/// decoder state to `4N` values (normalized per joint downstream); the
/// velocity head maps it to 4.
#[derive(Clone, Debug)]
pub struct RetargetModel {
    pub encoder: GruStack,
    pub decoder: GruStack,
    pub w_p: Tensor,
    pub b_p: Tensor,
    pub w_v: Tensor,
    pub b_v: Tensor,
    n_joints: usize,
    hidden: usize,
    layers: usize,
    composition: Composition,
}

impl RetargetModel {
    /// Initialized model: orthogonal recurrent weights, zero quaternion
    /// head with identity-rotation bias, zero velocity head. Until
    /// trained, the model therefore emits the target T-pose at rest.
    pub fn new(
        n_joints: usize,
        hidden: usize,
        layers: usize,
        composition: Composition,
        rng: &mut ChaCha8Rng,
    ) -> RetargetModel {
        let mut model = RetargetModel::zeros(n_joints, hidden, layers, composition);
        model.encoder = GruStack::init(model.frame_arity(), hidden, layers, rng);
        model.decoder = GruStack::init(model.decoder_arity(), hidden, layers, rng);
        model
    }

    /// All-zero parameters except the identity-quaternion bias; the
    /// starting point for checkpoint restores.
    pub fn zeros(
        n_joints: usize,
        hidden: usize,
        layers: usize,
        composition: Composition,
    ) -> RetargetModel {
        assert!(n_joints >= 1 && hidden >= 1 && layers >= 1);
        let frame = 3 * n_joints + 4;
        let decoder_in = frame + hidden + 3 * (n_joints - 1);
        let mut b_p = Tensor::zeros(&[4 * n_joints]);
        for joint in 0..n_joints {
            b_p.data[4 * joint] = 1.0;
        }
        RetargetModel {
            encoder: GruStack::zeros(frame, hidden, layers),
            decoder: GruStack::zeros(decoder_in, hidden, layers),
            w_p: Tensor::zeros(&[hidden, 4 * n_joints]),
            b_p,
            w_v: Tensor::zeros(&[hidden, 4]),
            b_v: Tensor::zeros(&[4]),
            n_joints,
            hidden,
            layers,
            composition,
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

    pub fn composition(&self) -> Composition {
        self.composition
    }

    /// Width of one composite frame: `3N` positions plus 4 velocities.
    pub fn frame_arity(&self) -> usize {
        3 * self.n_joints + 4
    }

    fn decoder_arity(&self) -> usize {
        self.frame_arity() + self.hidden + 3 * (self.n_joints - 1)
    }

    pub fn visit<'a>(&'a self, f: &mut impl FnMut(String, &'a Tensor)) {
        self.encoder.visit("encoder", f);
        self.decoder.visit("decoder", f);
        f("head.wp".into(), &self.w_p);
        f("head.bp".into(), &self.b_p);
        f("head.wv".into(), &self.w_v);
        f("head.bv".into(), &self.b_v);
    }

    pub fn visit_mut(&mut self, f: &mut impl FnMut(String, &mut Tensor)) {
        self.encoder.visit_mut("encoder", f);
        self.decoder.visit_mut("decoder", f);
        f("head.wp".into(), &mut self.w_p);
        f("head.bp".into(), &mut self.b_p);
        f("head.wv".into(), &mut self.w_v);
        f("head.bv".into(), &mut self.b_v);
    }

    /// Mutable parameter list in [`Self::visit`] order, for optimizers.
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
        out.extend([&mut self.w_p, &mut self.b_p, &mut self.w_v, &mut self.b_v]);
        out
    }

    /// Copies the parameters onto a tape; `trainable` marks them as
    /// gradient-bearing leaves.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> ModelNodes {
        ModelNodes {
            encoder: self.encoder.bind(tape, trainable),
            decoder: self.decoder.bind(tape, trainable),
            w_p: tape.leaf(self.w_p.clone(), trainable),
            b_p: tape.leaf(self.b_p.clone(), trainable),
            w_v: tape.leaf(self.w_v.clone(), trainable),
            b_v: tape.leaf(self.b_v.clone(), trainable),
            n_joints: self.n_joints,
            hidden: self.hidden,
            layers: self.layers,
            composition: self.composition,
        }
    }

    /// Runs the whole clip through a private tape and returns plain
    /// values. `input_height` is the source character's height.
    pub fn synthesize(
        &self,
        local: &[Vec<Vec3>],
        global: &[GlobalRow],
        input_height: f64,
        cond: &Condition,
    ) -> Result<SynthesisOutput> {
        if local.len() != global.len() {
            return Err(Error::LengthMismatch(format!(
                "{} local frames vs {} global rows",
                local.len(),
                global.len()
            )));
        }
        if local.len() < 2 {
            return Err(Error::Clip("fewer than two frames".into()));
        }
        let mut synth = Synthesizer::new(self, input_height, cond)?;
        let mut out = SynthesisOutput {
            quats: Vec::with_capacity(local.len()),
            local: Vec::with_capacity(local.len()),
            global: Vec::with_capacity(local.len()),
            enc_state: Vec::new(),
            dec_state: Vec::new(),
        };
        for (pose, g) in local.iter().zip(global) {
            let frame = synth.step(pose, *g)?;
            out.quats.push(frame.quats);
            out.local.push(frame.local);
            out.global.push(frame.velocity);
        }
        out.enc_state = synth.enc_state;
        out.dec_state = synth.dec_state;
        Ok(out)
    }
}

/// Tape handles for the model parameters plus the shape bookkeeping the
/// step functions need.
pub struct ModelNodes {
    pub encoder: GruStackNodes,
    pub decoder: GruStackNodes,
    pub w_p: Node,
    pub b_p: Node,
    pub w_v: Node,
    pub b_v: Node,
    n_joints: usize,
    hidden: usize,
    layers: usize,
    composition: Composition,
}

/// One synthesized frame on the tape. `local` is the FK pose in real
/// units; `xhat` is the normalized composite fed to the next decoder
/// step and to the losses.
pub struct FrameNodes {
    pub quats: Node,
    pub local: Node,
    pub velocity: Node,
    pub xhat: Node,
}

/// A full differentiable synthesis pass.
pub struct TapeSynthesis {
    pub frames: Vec<FrameNodes>,
    pub enc_state: Vec<Node>,
    pub dec_state: Vec<Node>,
}

impl ModelNodes {
    /// Parameter handles in [`RetargetModel::visit`] order, for pairing
    /// gradients with [`RetargetModel::params_mut`].
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
        out.extend([self.w_p, self.b_p, self.w_v, self.b_v]);
        out
    }

    fn zero_state(&self, tape: &mut Tape) -> Vec<Node> {
        (0..self.layers)
            .map(|_| tape.constant(Tensor::zeros(&[self.hidden])))
            .collect()
    }

    /// Advances the encoder by one input frame. The encoder never sees
    /// the target skeleton.
    pub fn encode_step(&self, tape: &mut Tape, x: Node, state: &[Node]) -> Result<Vec<Node>> {
        let v = tape.value(x);
        if v.rank() != 1 || v.numel() != 3 * self.n_joints + 4 {
            return Err(Error::ArityMismatch {
                expected: 3 * self.n_joints + 4,
                got: v.numel(),
            });
        }
        gru_stack_step(tape, &self.encoder, x, state)
    }

    /// Advances the decoder by one step and applies both heads; the
    /// pose goes through FK on the target skeleton.
    pub fn decode_step(
        &self,
        tape: &mut Tape,
        xhat_prev: Node,
        h_enc: Node,
        cond: &CondNodes,
        state: &[Node],
    ) -> Result<(FrameNodes, Vec<Node>)> {
        if cond.skeleton.n_joints() != self.n_joints {
            return Err(Error::ArityMismatch {
                expected: self.n_joints,
                got: cond.skeleton.n_joints(),
            });
        }
        let prev = tape.value(xhat_prev);
        if prev.rank() != 1 || prev.numel() != 3 * self.n_joints + 4 {
            return Err(Error::ArityMismatch {
                expected: 3 * self.n_joints + 4,
                got: prev.numel(),
            });
        }
        let dec_in = tape.concat(&[xhat_prev, h_enc, cond.sbar])?;
        let state = gru_stack_step(tape, &self.decoder, dec_in, state)?;
        let h = *state.last().expect("at least one layer");

        let q_lin = tape.matmul(h, self.w_p)?;
        let q_raw = tape.add_bias(q_lin, self.b_p)?;
        let q_rows = tape.reshape(q_raw, &[self.n_joints, 4])?;
        let quats = tape.normalize_rows(q_rows)?;
        let local = tape.fk(quats, cond.skeleton.clone(), self.composition)?;

        let v_lin = tape.matmul(h, self.w_v)?;
        let v_norm = tape.add_bias(v_lin, self.b_v)?;
        let v_xyz = tape.slice_rows(v_norm, 0, 3)?;
        let v_xyz = tape.scale(v_xyz, cond.height);
        let v_yaw = tape.slice_rows(v_norm, 3, 1)?;
        let v_yaw = tape.scale(v_yaw, DYAW_SCALE);
        let velocity = tape.concat(&[v_xyz, v_yaw])?;

        let local_flat = tape.reshape(local, &[3 * self.n_joints])?;
        let local_norm = tape.scale(local_flat, 1.0 / cond.height);
        let xhat = tape.concat(&[local_norm, v_norm])?;
        Ok((FrameNodes { quats, local, velocity, xhat }, state))
    }

    /// Differentiable synthesis over normalized input frames (see
    /// [`input_nodes`]); the cycle pass feeds one synthesis' `xhat`
    /// nodes straight back in as the next one's inputs.
    pub fn synthesize(
        &self,
        tape: &mut Tape,
        inputs: &[Node],
        cond: &CondNodes,
    ) -> Result<TapeSynthesis> {
        if inputs.len() < 2 {
            return Err(Error::Clip("fewer than two frames".into()));
        }
        let mut enc_state = self.zero_state(tape);
        let mut dec_state = self.zero_state(tape);
        let mut xhat_prev = cond.seed;
        let mut frames = Vec::with_capacity(inputs.len());
        for &x in inputs {
            enc_state = self.encode_step(tape, x, &enc_state)?;
            let h_enc = *enc_state.last().expect("at least one layer");
            let (frame, next) = self.decode_step(tape, xhat_prev, h_enc, cond, &dec_state)?;
            dec_state = next;
            xhat_prev = frame.xhat;
            frames.push(frame);
        }
        Ok(TapeSynthesis { frames, enc_state, dec_state })
    }
}

/// Flattens one motion frame into the normalized network feature vector
/// `[positions / height, vx vy vz / height, dyaw / DYAW_SCALE]`.
pub fn normalized_frame(
    local: &[Vec3],
    global: GlobalRow,
    height: f64,
    n_joints: usize,
) -> Result<Tensor> {
    if local.len() != n_joints {
        return Err(Error::ArityMismatch { expected: n_joints, got: local.len() });
    }
    if !(height.is_finite() && height > 0.0) {
        return Err(Error::NonFinite(format!("character height {height}")));
    }
    let mut data = Vec::with_capacity(3 * n_joints + 4);
    for p in local {
        data.extend(p.iter().map(|c| c / height));
    }
    data.extend([
        global[0] / height,
        global[1] / height,
        global[2] / height,
        global[3] / DYAW_SCALE,
    ]);
    let out = Tensor { shape: vec![3 * n_joints + 4], data };
    if !out.is_finite() {
        return Err(Error::NonFinite("motion frame".into()));
    }
    Ok(out)
}

/// Normalized input frames as tape constants, one node per frame.
pub fn input_nodes(
    tape: &mut Tape,
    local: &[Vec<Vec3>],
    global: &[GlobalRow],
    height: f64,
    n_joints: usize,
) -> Result<Vec<Node>> {
    if local.len() != global.len() {
        return Err(Error::LengthMismatch(format!(
            "{} local frames vs {} global rows",
            local.len(),
            global.len()
        )));
    }
    local
        .iter()
        .zip(global)
        .map(|(pose, g)| Ok(tape.constant(normalized_frame(pose, *g, height, n_joints)?)))
        .collect()
}

// ---- streaming inference ----

/// One frame of plain synthesis output.
pub struct SynthFrame {
    pub quats: Vec<Quat>,
    pub local: Vec<Vec3>,
    pub velocity: GlobalRow,
}

/// Frame-at-a-time inference. Parameters are bound to an internal tape
/// once; each [`Synthesizer::step`] appends one model step, extracts
/// plain values, and rewinds, so memory stays constant over the stream.
pub struct Synthesizer {
    tape: Tape,
    nodes: ModelNodes,
    cond: CondNodes,
    base_len: usize,
    enc_state: Vec<Tensor>,
    dec_state: Vec<Tensor>,
    xhat_prev: Tensor,
    input_height: f64,
}

impl Synthesizer {
    pub fn new(model: &RetargetModel, input_height: f64, cond: &Condition) -> Result<Synthesizer> {
        if cond.skeleton.n_joints() != model.n_joints {
            return Err(Error::ArityMismatch {
                expected: model.n_joints,
                got: cond.skeleton.n_joints(),
            });
        }
        if !(input_height.is_finite() && input_height > 0.0) {
            return Err(Error::NonFinite(format!("character height {input_height}")));
        }
        let mut tape = Tape::new();
        let nodes = model.bind(&mut tape, false);
        let cond_nodes = cond.bind(&mut tape);
        let base_len = tape.len();
        Ok(Synthesizer {
            tape,
            nodes,
            cond: cond_nodes,
            base_len,
            enc_state: vec![Tensor::zeros(&[model.hidden]); model.layers],
            dec_state: vec![Tensor::zeros(&[model.hidden]); model.layers],
            xhat_prev: cond.seed.clone(),
            input_height,
        })
    }

    /// Consumes one source frame and emits the retargetted frame.
    pub fn step(&mut self, local: &[Vec3], global: GlobalRow) -> Result<SynthFrame> {
        let x_t = normalized_frame(local, global, self.input_height, self.nodes.n_joints)?;
        let tape = &mut self.tape;
        let x = tape.constant(x_t);
        let enc_in: Vec<Node> = self.enc_state.iter().map(|t| tape.constant(t.clone())).collect();
        let dec_in: Vec<Node> = self.dec_state.iter().map(|t| tape.constant(t.clone())).collect();
        let xhat_prev = tape.constant(self.xhat_prev.clone());

        let enc_state = self.nodes.encode_step(tape, x, &enc_in)?;
        let h_enc = *enc_state.last().expect("at least one layer");
        let (frame, dec_state) =
            self.nodes.decode_step(tape, xhat_prev, h_enc, &self.cond, &dec_in)?;

        let quats = tape
            .value(frame.quats)
            .data
            .chunks(4)
            .map(|r| Quat::new(r[0], r[1], r[2], r[3]))
            .collect();
        let local_out = tape
            .value(frame.local)
            .data
            .chunks(3)
            .map(|r| [r[0], r[1], r[2]])
            .collect();
        let v = &tape.value(frame.velocity).data;
        let velocity = [v[0], v[1], v[2], v[3]];
        self.enc_state = enc_state.iter().map(|n| tape.value(*n).clone()).collect();
        self.dec_state = dec_state.iter().map(|n| tape.value(*n).clone()).collect();
        self.xhat_prev = tape.value(frame.xhat).clone();
        self.tape.rewind(self.base_len);
        Ok(SynthFrame { quats, local: local_out, velocity })
    }
}

/// Plain-value synthesis result for a whole clip.
pub struct SynthesisOutput {
    pub quats: Vec<Vec<Quat>>,
    pub local: Vec<Vec<Vec3>>,
    pub global: Vec<GlobalRow>,
    pub enc_state: Vec<Tensor>,
    pub dec_state: Vec<Tensor>,
}

impl SynthesisOutput {
    /// Packages the output as a decomposed motion clip anchored at the
    /// given root state; validates the result.
    pub fn into_clip(
        self,
        name: impl Into<String>,
        skeleton_id: impl Into<String>,
        fps: f64,
        initial_root: Vec3,
        initial_yaw_deg: f64,
    ) -> Result<MotionClip> {
        let clip = MotionClip {
            name: name.into(),
            skeleton_id: skeleton_id.into(),
            fps,
            initial_root,
            initial_yaw_deg,
            local: self.local,
            global: self.global,
            rotations: Some(self.quats),
        };
        clip.validate()?;
        Ok(clip)
    }
}

// ---- checkpoints ----

/// Sidecar facts a checkpoint carries so consumers need not guess:
/// joint layout, widths, and the feature-scaling constants.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelManifest {
    pub architecture: String,
    pub n_joints: usize,
    pub joint_names: Vec<String>,
    pub hidden: usize,
    pub layers: usize,
    pub composition: String,
    pub dyaw_scale: f64,
}

#[derive(Serialize)]
struct CheckpointDocRef<'a> {
    manifest: &'a ModelManifest,
    tensors: &'a NamedTensors,
}

#[derive(Deserialize)]
struct CheckpointDoc {
    manifest: ModelManifest,
    tensors: NamedTensors,
}

pub(crate) fn write_checkpoint_doc(
    path: &Path,
    manifest: &ModelManifest,
    tensors: &NamedTensors,
) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut writer = BufWriter::new(file);
    serde_json::to_writer(&mut writer, &CheckpointDocRef { manifest, tensors })?;
    writer.flush()?;
    Ok(())
}

pub(crate) fn read_checkpoint_doc(path: &Path) -> Result<(ModelManifest, NamedTensors)> {
    let file = std::fs::File::open(path)?;
    let doc: CheckpointDoc = serde_json::from_reader(BufReader::new(file))?;
    if doc.tensors.version != CHECKPOINT_VERSION {
        return Err(Error::SchemaVersion {
            found: doc.tensors.version,
            supported: CHECKPOINT_VERSION,
        });
    }
    Ok((doc.manifest, doc.tensors))
}

/// Restores a parameter set from named tensors, requiring exact
/// name and shape coverage in both directions.
pub(crate) fn restore_params(
    tensors: &NamedTensors,
    visit_mut: impl FnOnce(&mut dyn FnMut(String, &mut Tensor)),
) -> Result<()> {
    let mut first_err = None;
    let mut consumed = 0usize;
    visit_mut(&mut |name, dst| {
        if first_err.is_none() {
            match tensors.take_into(&name, dst) {
                Ok(()) => consumed += 1,
                Err(e) => first_err = Some(e),
            }
        }
    });
    if let Some(e) = first_err {
        return Err(e);
    }
    if consumed != tensors.tensors.len() {
        return Err(Error::CheckpointMismatch(format!(
            "checkpoint stores {} tensors, model consumes {}",
            tensors.tensors.len(),
            consumed
        )));
    }
    Ok(())
}

impl RetargetModel {
    pub fn manifest(&self, joint_names: &[String]) -> ModelManifest {
        ModelManifest {
            architecture: ARCH_FK_RNN.into(),
            n_joints: self.n_joints,
            joint_names: joint_names.to_vec(),
            hidden: self.hidden,
            layers: self.layers,
            composition: self.composition.name().into(),
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

    pub fn load_checkpoint(path: &Path) -> Result<(RetargetModel, ModelManifest)> {
        let (manifest, tensors) = read_checkpoint_doc(path)?;
        let model = RetargetModel::restore_from_parts(&manifest, &tensors)?;
        Ok((model, manifest))
    }

    pub(crate) fn restore_from_parts(
        manifest: &ModelManifest,
        tensors: &NamedTensors,
    ) -> Result<RetargetModel> {
        if manifest.architecture != ARCH_FK_RNN {
            return Err(Error::CheckpointMismatch(format!(
                "architecture {:?} where {ARCH_FK_RNN:?} was expected",
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
        if manifest.n_joints == 0 || manifest.hidden == 0 || manifest.layers == 0 {
            return Err(Error::CheckpointMismatch("zero-sized architecture".into()));
        }
        let composition = Composition::parse(&manifest.composition).ok_or_else(|| {
            Error::CheckpointMismatch(format!(
                "unknown composition mode {:?}",
                manifest.composition
            ))
        })?;
        let mut model =
            RetargetModel::zeros(manifest.n_joints, manifest.hidden, manifest.layers, composition);
        restore_params(tensors, |f| model.visit_mut(&mut |name, t| f(name, t)))?;
        Ok(model)
    }
}
