//! Unsupervised training: cycle-consistent retargetting with an optional
//! adversarial realism term.
//!
//! Each step samples a batch of (source clip window, target skeleton)
//! pairs from the training split. The generator retargets the window
//! onto the target, retargets the result back onto the source, and
//! minimizes `cycle + recon + lambda * twist + omega * smooth`, where
//! `recon` is a square loss when the target happens to be the source
//! skeleton and an adversarial term otherwise. The discriminator then
//! trains on the (detached) fake windows against independently sampled
//! real windows of the same target skeleton, skipping its update while
//! it is already winning.
//!
//! All sampling derives from a per-step seed, so a run is reproducible
//! from its config and a resumed run continues the exact schedule.

pub mod discriminator;
pub mod losses;

pub use discriminator::{Discriminator, DEFAULT_WIDTH};
pub use losses::LossWeights;

use std::collections::BTreeMap;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::baselines::{
    frames_to_clip, DirectMlp, DirectMlpNodes, DirectRnn, DirectRnnNodes, ARCH_MLP_DIRECT,
    ARCH_RNN_DIRECT,
};
use crate::error::{Error, Result};
use crate::kinematics::{Composition, Skeleton};
use crate::model::{
    input_nodes, read_checkpoint_doc, Condition, CondNodes, ModelManifest, ModelNodes,
    RetargetModel, ARCH_FK_RNN,
};
use crate::motion::{ClipEntry, Dataset, MotionClip};
use crate::neural::checkpoint::CHECKPOINT_VERSION;
use crate::neural::{clip_global_norm, Adam, AdamState, Node, Tape, Tensor};
use discriminator::{fake_input, real_input};
use losses::{
    cycle_loss, discriminator_loss, generator_adversarial_loss, smoothing_loss,
    sum_squared_frames, twist_loss,
};

pub const DEFAULT_STEPS: u64 = 2000;
pub const DEFAULT_BATCH: usize = 16;
pub const DEFAULT_WINDOW: usize = 60;
pub const DEFAULT_LR: f64 = 1e-4;
/// Global-norm budget for generator gradients; the discriminator is
/// updated unclipped.
pub const DEFAULT_CLIP_NORM: f64 = 25.0;
/// Discriminator updates pause while its mean score on fakes is below
/// this, keeping the two players roughly balanced.
pub const DEFAULT_BALANCE_THRESHOLD: f64 = 0.3;
/// Shortest window whose difference sequence still reaches the
/// discriminator's final valid convolution (four columns after three
/// stride-2 halvings).
pub const MIN_ADV_WINDOW: usize = 50;

pub const MODEL_FILE: &str = "model.json";
pub const DISC_FILE: &str = "discriminator.json";
pub const OPTIM_FILE: &str = "optimizer.json";

/// Which objective terms are active.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TrainMode {
    /// Target skeleton always equals the source: pure reconstruction.
    Autoencoder,
    /// Random targets with cycle consistency, no discriminator.
    Cycle,
    /// Cycle consistency plus the adversarial realism term.
    AdvCycle,
}

impl TrainMode {
    pub fn parse(s: &str) -> Result<TrainMode> {
        match s {
            "auto" => Ok(TrainMode::Autoencoder),
            "cycle" => Ok(TrainMode::Cycle),
            "adv-cycle" => Ok(TrainMode::AdvCycle),
            other => Err(Error::Config(format!(
                "unknown training mode {other:?} (expected auto, cycle, or adv-cycle)"
            ))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            TrainMode::Autoencoder => "auto",
            TrainMode::Cycle => "cycle",
            TrainMode::AdvCycle => "adv-cycle",
        }
    }

    fn adversarial(self) -> bool {
        self == TrainMode::AdvCycle
    }
}

#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub mode: TrainMode,
    pub steps: u64,
    pub batch_size: usize,
    /// Frames per sampled training window; clips shorter than this are
    /// used whole (adversarial mode requires full windows).
    pub window: usize,
    pub lr: f64,
    pub clip_norm: f64,
    pub weights: LossWeights,
    /// Train the generator on `beta * log(1 - r)` instead of the
    /// gradient-friendly `-beta * log r`.
    pub literal_adversarial: bool,
    pub balance_threshold: f64,
    pub seed: u64,
    /// Save every this many steps into `checkpoint_dir`; 0 disables.
    pub checkpoint_every: u64,
    pub checkpoint_dir: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            mode: TrainMode::AdvCycle,
            steps: DEFAULT_STEPS,
            batch_size: DEFAULT_BATCH,
            window: DEFAULT_WINDOW,
            lr: DEFAULT_LR,
            clip_norm: DEFAULT_CLIP_NORM,
            weights: LossWeights::default(),
            literal_adversarial: false,
            balance_threshold: DEFAULT_BALANCE_THRESHOLD,
            seed: 0,
            checkpoint_every: 0,
            checkpoint_dir: None,
        }
    }
}

impl TrainConfig {
    /// Rejects configs that cannot run on `dataset` before any work
    /// starts. Adversarial training needs a second character to
    /// retarget onto and windows long enough for the discriminator.
    pub fn validate(&self, dataset: &Dataset) -> Result<()> {
        self.weights.validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if self.window < 2 {
            return Err(Error::Config(format!("window {} too short, need >= 2", self.window)));
        }
        for (name, v) in [("learning rate", self.lr), ("clip norm", self.clip_norm)] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if !self.balance_threshold.is_finite() || self.balance_threshold < 0.0 {
            return Err(Error::Config(format!(
                "balance threshold must be non-negative, got {}",
                self.balance_threshold
            )));
        }
        dataset.validate()?;
        let train: Vec<&ClipEntry> = dataset.train_entries().collect();
        if train.is_empty() {
            return Err(Error::Dataset("no training clips".into()));
        }
        if self.mode.adversarial() {
            let mut ids: Vec<&str> =
                train.iter().map(|e| e.clip.skeleton_id.as_str()).collect();
            ids.sort_unstable();
            ids.dedup();
            if ids.len() < 2 {
                return Err(Error::Config(
                    "adversarial cycle training needs at least two training characters \
                     (use mode \"cycle\" or \"auto\" for a single character)"
                        .into(),
                ));
            }
            if self.window < MIN_ADV_WINDOW {
                return Err(Error::Config(format!(
                    "window {} too short for the discriminator, need >= {MIN_ADV_WINDOW}",
                    self.window
                )));
            }
            for entry in &train {
                if entry.clip.n_frames() < self.window {
                    return Err(Error::Config(format!(
                        "training clip {:?} has {} frames, shorter than the window {}",
                        entry.clip.name,
                        entry.clip.n_frames(),
                        self.window
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Per-step loss and discriminator diagnostics. Loss terms are batch
/// means of the raw sums; `recon_gen` is the term as weighted into the
/// objective (the adversarial form carries `beta`). Discriminator
/// fields are zero on steps without adversarial pairs.
#[derive(Clone, Debug, PartialEq)]
pub struct StepMetrics {
    pub step: u64,
    pub cycle: f64,
    pub recon_gen: f64,
    pub recon_disc: f64,
    pub twist: f64,
    pub smooth: f64,
    pub real_prob_mean: f64,
    pub fake_prob_mean: f64,
}

pub const CSV_HEADER: &str =
    "step,cycle,recon_gen,recon_disc,twist,smooth,real_prob_mean,fake_prob_mean";

impl StepMetrics {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.step,
            self.cycle,
            self.recon_gen,
            self.recon_disc,
            self.twist,
            self.smooth,
            self.real_prob_mean,
            self.fake_prob_mean
        )
    }

    /// The generator objective this step, reassembled from the parts.
    pub fn generator_total(&self, weights: &LossWeights) -> f64 {
        self.cycle
            + self.recon_gen
            + weights.lambda * self.twist
            + weights.omega * self.smooth
    }
}

// ---- the trainable generator architectures ----

/// A trainable motion generator: the kinematic model or one of the
/// direct-coordinate baselines. All three share the feature space, the
/// target-skeleton conditioning, the checkpoint format, and this
/// module's training loop; they differ in how a pose leaves the network.
pub enum Generator {
    Fk(RetargetModel),
    Rnn(DirectRnn),
    Mlp(DirectMlp),
}

impl Generator {
    /// Builds a fresh generator from an architecture name: `fk-rnn`
    /// (quaternions through forward kinematics), `rnn` (direct
    /// coordinates, recurrent), or `mlp` (direct coordinates,
    /// feedforward; `layers` is fixed and ignored).
    pub fn create(
        arch: &str,
        n_joints: usize,
        hidden: usize,
        layers: usize,
        composition: Composition,
        rng: &mut ChaCha8Rng,
    ) -> Result<Generator> {
        match arch {
            "fk-rnn" => Ok(Generator::Fk(RetargetModel::new(
                n_joints,
                hidden,
                layers,
                composition,
                rng,
            ))),
            "rnn" => Ok(Generator::Rnn(DirectRnn::new(n_joints, hidden, layers, rng))),
            "mlp" => Ok(Generator::Mlp(DirectMlp::new(n_joints, hidden, rng))),
            other => Err(Error::Config(format!(
                "unknown architecture {other:?} (expected fk-rnn, rnn, or mlp)"
            ))),
        }
    }

    pub fn architecture(&self) -> &'static str {
        match self {
            Generator::Fk(_) => ARCH_FK_RNN,
            Generator::Rnn(_) => ARCH_RNN_DIRECT,
            Generator::Mlp(_) => ARCH_MLP_DIRECT,
        }
    }

    pub fn n_joints(&self) -> usize {
        match self {
            Generator::Fk(m) => m.n_joints(),
            Generator::Rnn(m) => m.n_joints(),
            Generator::Mlp(m) => m.n_joints(),
        }
    }

    pub fn visit<'a>(&'a self, f: &mut impl FnMut(String, &'a Tensor)) {
        match self {
            Generator::Fk(m) => m.visit(f),
            Generator::Rnn(m) => m.visit(f),
            Generator::Mlp(m) => m.visit(f),
        }
    }

    pub fn visit_mut(&mut self, f: &mut impl FnMut(String, &mut Tensor)) {
        match self {
            Generator::Fk(m) => m.visit_mut(f),
            Generator::Rnn(m) => m.visit_mut(f),
            Generator::Mlp(m) => m.visit_mut(f),
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        match self {
            Generator::Fk(m) => m.params_mut(),
            Generator::Rnn(m) => m.params_mut(),
            Generator::Mlp(m) => m.params_mut(),
        }
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> GenNodes {
        match self {
            Generator::Fk(m) => GenNodes::Fk(m.bind(tape, trainable)),
            Generator::Rnn(m) => GenNodes::Rnn(m.bind(tape, trainable)),
            Generator::Mlp(m) => GenNodes::Mlp(m.bind(tape, trainable)),
        }
    }

    pub fn save_checkpoint(&self, path: &Path, joint_names: &[String]) -> Result<()> {
        match self {
            Generator::Fk(m) => m.save_checkpoint(path, joint_names),
            Generator::Rnn(m) => m.save_checkpoint(path, joint_names),
            Generator::Mlp(m) => m.save_checkpoint(path, joint_names),
        }
    }

    /// Loads whichever architecture the checkpoint's manifest declares.
    pub fn load_checkpoint(path: &Path) -> Result<(Generator, ModelManifest)> {
        let (manifest, tensors) = read_checkpoint_doc(path)?;
        let generator = match manifest.architecture.as_str() {
            ARCH_FK_RNN => Generator::Fk(RetargetModel::restore_from_parts(&manifest, &tensors)?),
            ARCH_RNN_DIRECT => Generator::Rnn(DirectRnn::restore_from_parts(&manifest, &tensors)?),
            ARCH_MLP_DIRECT => Generator::Mlp(DirectMlp::restore_from_parts(&manifest, &tensors)?),
            other => {
                return Err(Error::CheckpointMismatch(format!(
                    "unknown architecture {other:?}"
                )))
            }
        };
        Ok((generator, manifest))
    }

    /// Retargets a preprocessed clip onto the conditioned skeleton. The
    /// output keeps the input's anchor scaled by the height ratio, so
    /// same-skeleton retargetting preserves the anchor.
    pub fn retarget(
        &self,
        input: &MotionClip,
        source: &Skeleton,
        cond: &Condition,
    ) -> Result<MotionClip> {
        if input.skeleton_id != source.name() {
            return Err(Error::Dataset(format!(
                "clip {:?} belongs to skeleton {:?}, not {:?}",
                input.name,
                input.skeleton_id,
                source.name()
            )));
        }
        let ratio = cond.height() / source.height();
        let anchor = input.initial_root.map(|x| x * ratio);
        match self {
            Generator::Fk(m) => {
                let out = m.synthesize(&input.local, &input.global, source.height(), cond)?;
                out.into_clip(
                    input.name.clone(),
                    cond.skeleton().name(),
                    input.fps,
                    anchor,
                    input.initial_yaw_deg,
                )
            }
            _ => {
                let mut tape = Tape::new();
                let nodes = self.bind(&mut tape, false);
                let cond_nodes = cond.bind(&mut tape);
                let inputs = input_nodes(
                    &mut tape,
                    &input.local,
                    &input.global,
                    source.height(),
                    self.n_joints(),
                )?;
                let out = nodes.synthesize(&mut tape, &inputs, &cond_nodes)?;
                frames_to_clip(&tape, &out.xhats, input, cond, anchor)
            }
        }
    }
}

/// Tape handles for a [`Generator`].
pub enum GenNodes {
    Fk(ModelNodes),
    Rnn(DirectRnnNodes),
    Mlp(DirectMlpNodes),
}

/// One differentiable synthesis pass in the shared normalized feature
/// space. Rotation frames exist only for the kinematic architecture;
/// the twist penalty is skipped when they are absent.
pub struct GenSynthesis {
    pub xhats: Vec<Node>,
    pub quats: Option<Vec<Node>>,
}

impl GenNodes {
    pub fn param_nodes(&self) -> Vec<Node> {
        match self {
            GenNodes::Fk(m) => m.param_nodes(),
            GenNodes::Rnn(m) => m.param_nodes(),
            GenNodes::Mlp(m) => m.param_nodes(),
        }
    }

    pub fn synthesize(
        &self,
        tape: &mut Tape,
        inputs: &[Node],
        cond: &CondNodes,
    ) -> Result<GenSynthesis> {
        match self {
            GenNodes::Fk(m) => {
                let out = m.synthesize(tape, inputs, cond)?;
                Ok(GenSynthesis {
                    xhats: out.frames.iter().map(|f| f.xhat).collect(),
                    quats: Some(out.frames.iter().map(|f| f.quats).collect()),
                })
            }
            GenNodes::Rnn(m) => {
                Ok(GenSynthesis { xhats: m.synthesize(tape, inputs, cond)?, quats: None })
            }
            GenNodes::Mlp(m) => {
                Ok(GenSynthesis { xhats: m.synthesize(tape, inputs, cond)?, quats: None })
            }
        }
    }
}

#[derive(Serialize, Deserialize)]
struct OptimDoc {
    version: u32,
    step: u64,
    gen: AdamState,
    disc: AdamState,
}

/// Everything that evolves during training; serializable as a directory
/// of three files so runs can pause and resume exactly.
pub struct TrainState {
    pub model: Generator,
    pub disc: Discriminator,
    pub gen_opt: Adam,
    pub disc_opt: Adam,
    pub step: u64,
}

impl TrainState {
    pub fn new(model: Generator, disc: Discriminator, lr: f64) -> TrainState {
        TrainState { model, disc, gen_opt: Adam::new(lr), disc_opt: Adam::new(lr), step: 0 }
    }

    pub fn save(&self, dir: &Path, joint_names: &[String]) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        self.model.save_checkpoint(&dir.join(MODEL_FILE), joint_names)?;
        self.disc.save(&dir.join(DISC_FILE))?;
        let doc = OptimDoc {
            version: CHECKPOINT_VERSION,
            step: self.step,
            gen: self.gen_opt.state().clone(),
            disc: self.disc_opt.state().clone(),
        };
        let file = std::fs::File::create(dir.join(OPTIM_FILE))?;
        let mut writer = BufWriter::new(file);
        serde_json::to_writer(&mut writer, &doc)?;
        writer.flush()?;
        Ok(())
    }

    pub fn load(dir: &Path, lr: f64) -> Result<(TrainState, ModelManifest)> {
        let (model, manifest) = Generator::load_checkpoint(&dir.join(MODEL_FILE))?;
        let disc = Discriminator::load(&dir.join(DISC_FILE))?;
        let file = std::fs::File::open(dir.join(OPTIM_FILE))?;
        let doc: OptimDoc = serde_json::from_reader(BufReader::new(file))?;
        if doc.version != CHECKPOINT_VERSION {
            return Err(Error::SchemaVersion {
                found: doc.version,
                supported: CHECKPOINT_VERSION,
            });
        }
        let mut state = TrainState::new(model, disc, lr);
        state.gen_opt.restore(doc.gen);
        state.disc_opt.restore(doc.disc);
        state.step = doc.step;
        Ok((state, manifest))
    }
}

/// Decorrelates the run seed from the step index; resuming at step `k`
/// regenerates the same sampling stream an uninterrupted run would use.
fn step_rng(seed: u64, step: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(step))
}

fn batch_mean(tape: &mut Tape, terms: &[Node]) -> Result<Node> {
    let stacked = tape.concat(terms)?;
    Ok(tape.mean(stacked))
}

fn finite(value: f64, term: &str, step: u64) -> Result<f64> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(Error::NonFinite(format!("{term} loss at step {step}")))
    }
}

/// Runs `config.steps` training steps, mutating `state` in place and
/// reporting metrics after each step.
pub fn train(
    state: &mut TrainState,
    dataset: &Dataset,
    config: &TrainConfig,
    mut on_step: impl FnMut(&StepMetrics),
) -> Result<()> {
    config.validate(dataset)?;
    let n = state.model.n_joints();
    let train: Vec<&ClipEntry> = dataset.train_entries().collect();

    let mut conditions: BTreeMap<&str, Condition> = BTreeMap::new();
    let mut by_skel: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (idx, entry) in train.iter().enumerate() {
        let id = entry.clip.skeleton_id.as_str();
        if !conditions.contains_key(id) {
            let skeleton = dataset.skeleton_of(&entry.clip)?;
            if skeleton.n_joints() != n {
                return Err(Error::ArityMismatch { expected: n, got: skeleton.n_joints() });
            }
            conditions.insert(id, Condition::new(skeleton));
        }
        by_skel.entry(id).or_default().push(idx);
    }
    let ids: Vec<&str> = conditions.keys().copied().collect();
    let joint_names = conditions[ids[0]].skeleton().joint_names().to_vec();

    for _ in 0..config.steps {
        let mut rng = step_rng(config.seed, state.step);

        // ---- generator pass ----
        let mut tape = Tape::new();
        let gen = state.model.bind(&mut tape, true);
        let disc = config.mode.adversarial().then(|| state.disc.bind(&mut tape, false));
        let mut cond_nodes: BTreeMap<&str, CondNodes> = BTreeMap::new();
        for (&id, cond) in &conditions {
            cond_nodes.insert(id, cond.bind(&mut tape));
        }

        let mut c_terms = Vec::with_capacity(config.batch_size);
        let mut r_terms = Vec::with_capacity(config.batch_size);
        let mut j_terms = Vec::with_capacity(config.batch_size);
        let mut s_terms = Vec::with_capacity(config.batch_size);
        // Detached fake windows, kept for the discriminator pass.
        let mut fakes: Vec<(Tensor, &str)> = Vec::new();

        for _ in 0..config.batch_size {
            let entry = train[rng.gen_range(0..train.len())];
            let a_id = entry.clip.skeleton_id.as_str();
            let t = entry.clip.n_frames();
            let len = config.window.min(t);
            let start = rng.gen_range(0..=(t - len));
            let b_id = match config.mode {
                TrainMode::Autoencoder => a_id,
                _ => ids[rng.gen_range(0..ids.len())],
            };

            let h_a = conditions[a_id].height();
            let inputs = input_nodes(
                &mut tape,
                &entry.clip.local[start..start + len],
                &entry.clip.global[start..start + len],
                h_a,
                n,
            )?;
            let out = gen.synthesize(&mut tape, &inputs, &cond_nodes[b_id])?;
            let back = gen.synthesize(&mut tape, &out.xhats, &cond_nodes[a_id])?;

            c_terms.push(cycle_loss(&mut tape, &back.xhats, &inputs)?);
            if b_id == a_id {
                r_terms.push(sum_squared_frames(&mut tape, &out.xhats, &inputs)?);
            } else if let Some(disc) = &disc {
                let fake = fake_input(&mut tape, &out.xhats, n, cond_nodes[b_id].sbar)?;
                let r_fake = disc.score(&mut tape, fake, Some(&mut rng))?;
                r_terms.push(generator_adversarial_loss(
                    &mut tape,
                    r_fake,
                    config.weights.beta,
                    config.literal_adversarial,
                ));
                fakes.push((tape.value(fake).clone(), b_id));
            } else {
                r_terms.push(tape.constant(Tensor::scalar(0.0)));
            }

            j_terms.push(match (&out.quats, &back.quats) {
                (Some(qo), Some(qb)) => {
                    twist_loss(&mut tape, qo, qb, config.weights.alpha_deg)?
                }
                _ => tape.constant(Tensor::scalar(0.0)),
            });

            let vel = |tape: &mut Tape, xhats: &[Node]| {
                xhats
                    .iter()
                    .map(|&x| tape.slice_rows(x, 3 * n, 4))
                    .collect::<Result<Vec<Node>>>()
            };
            let vel_out = vel(&mut tape, &out.xhats)?;
            let vel_back = vel(&mut tape, &back.xhats)?;
            s_terms.push(smoothing_loss(&mut tape, &vel_out, &vel_back)?);
        }

        let c_mean = batch_mean(&mut tape, &c_terms)?;
        let r_mean = batch_mean(&mut tape, &r_terms)?;
        let j_mean = batch_mean(&mut tape, &j_terms)?;
        let s_mean = batch_mean(&mut tape, &s_terms)?;
        let c_val = finite(tape.value(c_mean).data[0], "cycle", state.step)?;
        let r_val = finite(tape.value(r_mean).data[0], "reconstruction", state.step)?;
        let j_val = finite(tape.value(j_mean).data[0], "twist", state.step)?;
        let s_val = finite(tape.value(s_mean).data[0], "smoothing", state.step)?;

        let cr = tape.add(c_mean, r_mean)?;
        let jw = tape.scale(j_mean, config.weights.lambda);
        let sw = tape.scale(s_mean, config.weights.omega);
        let cj = tape.add(cr, jw)?;
        let total = tape.add(cj, sw)?;
        let total_val = tape.value(total).data[0];
        debug_assert!(
            (total_val
                - (c_val + r_val + config.weights.lambda * j_val + config.weights.omega * s_val))
                .abs()
                <= 1e-9 * (1.0 + total_val.abs()),
            "objective drifted from its parts"
        );

        tape.backward(total)?;
        let mut grads: Vec<Tensor> =
            gen.param_nodes().iter().map(|&p| tape.grad_tensor(p)).collect();
        clip_global_norm(&mut grads, config.clip_norm)?;
        let mut params = state.model.params_mut();
        state.gen_opt.step(&mut params, &grads)?;

        // ---- discriminator pass ----
        let mut recon_disc = 0.0;
        let mut real_prob_mean = 0.0;
        let mut fake_prob_mean = 0.0;
        if !fakes.is_empty() {
            let mut dtape = Tape::new();
            let dnodes = state.disc.bind(&mut dtape, true);
            let mut d_terms = Vec::with_capacity(fakes.len());
            let mut r_reals = Vec::with_capacity(fakes.len());
            let mut r_fakes = Vec::with_capacity(fakes.len());
            for (fake_window, b_id) in &fakes {
                let fake = dtape.constant(fake_window.clone());
                let peers = &by_skel[b_id];
                let entry = train[peers[rng.gen_range(0..peers.len())]];
                let t = entry.clip.n_frames();
                let len = (fake_window.shape[1] + 1).min(t);
                let start = rng.gen_range(0..=(t - len));
                let cond = &conditions[b_id];
                let real = real_input(
                    &mut dtape,
                    &entry.clip.local[start..start + len],
                    &entry.clip.global[start..start + len],
                    cond.height(),
                    cond.sbar(),
                )?;
                let r_fake = dnodes.score(&mut dtape, fake, Some(&mut rng))?;
                let r_real = dnodes.score(&mut dtape, real, Some(&mut rng))?;
                r_fakes.push(dtape.value(r_fake).data[0]);
                r_reals.push(dtape.value(r_real).data[0]);
                d_terms.push(discriminator_loss(&mut dtape, r_real, r_fake)?);
            }
            let d_mean = batch_mean(&mut dtape, &d_terms)?;
            recon_disc = finite(dtape.value(d_mean).data[0], "discriminator", state.step)?;
            real_prob_mean = r_reals.iter().sum::<f64>() / r_reals.len() as f64;
            fake_prob_mean = r_fakes.iter().sum::<f64>() / r_fakes.len() as f64;
            if fake_prob_mean >= config.balance_threshold {
                dtape.backward(d_mean)?;
                let dgrads: Vec<Tensor> =
                    dnodes.param_nodes().iter().map(|&p| dtape.grad_tensor(p)).collect();
                let mut dparams = state.disc.params_mut();
                state.disc_opt.step(&mut dparams, &dgrads)?;
            }
        }

        let metrics = StepMetrics {
            step: state.step,
            cycle: c_val,
            recon_gen: r_val,
            recon_disc,
            twist: j_val,
            smooth: s_val,
            real_prob_mean,
            fake_prob_mean,
        };
        state.step += 1;
        on_step(&metrics);

        if let Some(dir) = &config.checkpoint_dir {
            if config.checkpoint_every > 0 && state.step % config.checkpoint_every == 0 {
                state.save(dir, &joint_names)?;
            }
        }
    }
    Ok(())
}
