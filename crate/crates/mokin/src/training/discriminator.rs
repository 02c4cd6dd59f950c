//! Sequence realism discriminator: a five-layer 1-D convolution stack
//! over per-frame pose differences, root velocities, and skeleton
//! features tiled along time, ending in a sigmoid probability.
//!
//! Layers 1-4 use kernel 4, stride 2, "same" padding, a 0.2 leaky
//! rectifier, and (in training mode) dropout with keep probability 0.7;
//! layers 2-4 are additionally instance-normalized with learned affine
//! parameters. Layer 5 is a linear "valid" convolution. A 60-column
//! input therefore shrinks through lengths 30, 15, 8, 4, 1; shorter
//! inputs must still leave layer 4 at least [`KERNEL`] columns wide.

use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{self, DYAW_SCALE};
use crate::motion::GlobalRow;
use crate::neural::checkpoint::CHECKPOINT_VERSION;
use crate::neural::{NamedTensors, Node, Padding, Tape, Tensor};
use crate::quat::Vec3;

pub const KERNEL: usize = 4;
pub const LEAKY_SLOPE: f64 = 0.2;
pub const DROPOUT_KEEP: f64 = 0.7;
pub const DEFAULT_WIDTH: usize = 64;
const NORM_EPS: f64 = 1e-5;
const STRIDES: [usize; 4] = [2, 2, 2, 2];

/// Architecture tag stored in discriminator checkpoints.
pub const ARCH_CONV_DISC: &str = "conv-disc";

#[derive(Clone, Debug)]
struct ConvParams {
    w: Tensor,
    b: Tensor,
}

#[derive(Clone, Debug)]
struct NormParams {
    gain: Tensor,
    bias: Tensor,
}

/// Parameters of the realism scorer. Hidden layers share one `width`.
#[derive(Clone, Debug)]
pub struct Discriminator {
    convs: Vec<ConvParams>,
    norms: Vec<NormParams>,
    in_channels: usize,
    width: usize,
}

impl Discriminator {
    /// Channel width of the assembled input for an `n_joints` skeleton:
    /// pose deltas, velocity row, and bone-offset features.
    pub fn input_channels(n_joints: usize) -> usize {
        3 * n_joints + 4 + 3 * (n_joints - 1)
    }

    pub fn zeros(in_channels: usize, width: usize) -> Discriminator {
        assert!(in_channels >= 1 && width >= 1);
        let channels = [in_channels, width, width, width, width, 1];
        let convs = (0..5)
            .map(|i| ConvParams {
                w: Tensor::zeros(&[channels[i + 1], channels[i], KERNEL]),
                b: Tensor::zeros(&[channels[i + 1]]),
            })
            .collect();
        let norms = (0..3)
            .map(|_| NormParams {
                gain: Tensor::zeros(&[width]),
                bias: Tensor::zeros(&[width]),
            })
            .collect();
        Discriminator { convs, norms, in_channels, width }
    }

    /// Fan-in uniform conv weights, zero biases, unit norm gains.
    pub fn new(in_channels: usize, width: usize, rng: &mut ChaCha8Rng) -> Discriminator {
        let mut d = Discriminator::zeros(in_channels, width);
        for conv in &mut d.convs {
            let fan_in = conv.w.shape[1] * KERNEL;
            let bound = 1.0 / (fan_in as f64).sqrt();
            for x in &mut conv.w.data {
                *x = rng.gen_range(-bound..bound);
            }
        }
        for norm in &mut d.norms {
            norm.gain.data.fill(1.0);
        }
        d
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn visit<'a>(&'a self, f: &mut impl FnMut(String, &'a Tensor)) {
        for (i, conv) in self.convs.iter().enumerate() {
            f(format!("conv{}.w", i + 1), &conv.w);
            f(format!("conv{}.b", i + 1), &conv.b);
        }
        for (i, norm) in self.norms.iter().enumerate() {
            f(format!("norm{}.gain", i + 2), &norm.gain);
            f(format!("norm{}.bias", i + 2), &norm.bias);
        }
    }

    pub fn visit_mut(&mut self, f: &mut impl FnMut(String, &mut Tensor)) {
        for (i, conv) in self.convs.iter_mut().enumerate() {
            f(format!("conv{}.w", i + 1), &mut conv.w);
            f(format!("conv{}.b", i + 1), &mut conv.b);
        }
        for (i, norm) in self.norms.iter_mut().enumerate() {
            f(format!("norm{}.gain", i + 2), &mut norm.gain);
            f(format!("norm{}.bias", i + 2), &mut norm.bias);
        }
    }

    /// Mutable parameter list in [`Self::visit`] order, for optimizers.
    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = Vec::new();
        for conv in &mut self.convs {
            out.push(&mut conv.w);
            out.push(&mut conv.b);
        }
        for norm in &mut self.norms {
            out.push(&mut norm.gain);
            out.push(&mut norm.bias);
        }
        out
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> DiscNodes {
        DiscNodes {
            convs: self
                .convs
                .iter()
                .map(|c| (tape.leaf(c.w.clone(), trainable), tape.leaf(c.b.clone(), trainable)))
                .collect(),
            norms: self
                .norms
                .iter()
                .map(|n| {
                    (tape.leaf(n.gain.clone(), trainable), tape.leaf(n.bias.clone(), trainable))
                })
                .collect(),
            in_channels: self.in_channels,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut tensors = NamedTensors::default();
        let mut pairs = Vec::new();
        self.visit(&mut |name, t| pairs.push((name, t)));
        for (name, t) in pairs {
            tensors.insert(&name, t)?;
        }
        let manifest = DiscManifest {
            architecture: ARCH_CONV_DISC.into(),
            in_channels: self.in_channels,
            width: self.width,
        };
        let file = std::fs::File::create(path)?;
        let mut writer = BufWriter::new(file);
        serde_json::to_writer(&mut writer, &DiscDocRef { manifest: &manifest, tensors: &tensors })?;
        writer.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Discriminator> {
        let file = std::fs::File::open(path)?;
        let doc: DiscDoc = serde_json::from_reader(BufReader::new(file))?;
        if doc.tensors.version != CHECKPOINT_VERSION {
            return Err(Error::SchemaVersion {
                found: doc.tensors.version,
                supported: CHECKPOINT_VERSION,
            });
        }
        if doc.manifest.architecture != ARCH_CONV_DISC {
            return Err(Error::CheckpointMismatch(format!(
                "architecture {:?} where {ARCH_CONV_DISC:?} was expected",
                doc.manifest.architecture
            )));
        }
        if doc.manifest.in_channels == 0 || doc.manifest.width == 0 {
            return Err(Error::CheckpointMismatch("zero-sized architecture".into()));
        }
        let mut disc = Discriminator::zeros(doc.manifest.in_channels, doc.manifest.width);
        model::restore_params(&doc.tensors, |f| disc.visit_mut(&mut |name, t| f(name, t)))?;
        Ok(disc)
    }
}

#[derive(Serialize, Deserialize)]
struct DiscManifest {
    architecture: String,
    in_channels: usize,
    width: usize,
}

#[derive(Serialize)]
struct DiscDocRef<'a> {
    manifest: &'a DiscManifest,
    tensors: &'a NamedTensors,
}

#[derive(Deserialize)]
struct DiscDoc {
    manifest: DiscManifest,
    tensors: NamedTensors,
}

/// Tape handles for the discriminator parameters.
pub struct DiscNodes {
    convs: Vec<(Node, Node)>,
    norms: Vec<(Node, Node)>,
    in_channels: usize,
}

impl DiscNodes {
    /// Parameter handles in [`Discriminator::visit`] order, for pairing
    /// gradients with [`Discriminator::params_mut`].
    pub fn param_nodes(&self) -> Vec<Node> {
        let mut out = Vec::new();
        for (w, b) in &self.convs {
            out.extend([*w, *b]);
        }
        for (g, b) in &self.norms {
            out.extend([*g, *b]);
        }
        out
    }

    /// Realism probability in (0,1) for one assembled `[C, L]` input.
    /// Passing a generator enables training-mode dropout.
    pub fn score(
        &self,
        tape: &mut Tape,
        input: Node,
        dropout_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Node> {
        Ok(self.score_traced(tape, input, dropout_rng)?.0)
    }

    /// As [`Self::score`], also reporting each layer's output length.
    pub fn score_traced(
        &self,
        tape: &mut Tape,
        input: Node,
        mut dropout_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<(Node, Vec<usize>)> {
        let shape = tape.value(input).shape.clone();
        if shape.len() != 2 || shape[0] != self.in_channels {
            return Err(Error::ShapeMismatch {
                op: "discriminate",
                detail: format!("need [{}, L], got {shape:?}", self.in_channels),
            });
        }
        let mut lengths = Vec::with_capacity(5);
        let mut h = input;
        for (layer, stride) in STRIDES.iter().enumerate() {
            let (w, b) = self.convs[layer];
            h = tape.conv1d(h, w, b, *stride, Padding::Same)?;
            if layer >= 1 {
                let (gain, bias) = self.norms[layer - 1];
                h = tape.instance_norm_1d(h, NORM_EPS)?;
                h = tape.mul_chan(h, gain)?;
                h = tape.add_chan(h, bias)?;
            }
            h = tape.leaky_relu(h, LEAKY_SLOPE);
            if let Some(rng) = dropout_rng.as_deref_mut() {
                h = tape.dropout(h, DROPOUT_KEEP, rng);
            }
            lengths.push(tape.value(h).shape[1]);
        }
        let (w, b) = self.convs[4];
        h = tape.conv1d(h, w, b, 1, Padding::Valid)?;
        lengths.push(tape.value(h).shape[1]);
        let probs = tape.sigmoid(h);
        // A 60-column input reduces to one score; anything longer is
        // averaged over positions.
        Ok((tape.mean(probs), lengths))
    }
}

/// Discriminator input from live synthesized frames (the normalized
/// `xhat` composites): column `t-1` holds the pose difference
/// `p_t - p_{t-1}`, the velocity of frame `t-1`, and the skeleton
/// features.
pub fn fake_input(
    tape: &mut Tape,
    xhats: &[Node],
    n_joints: usize,
    sbar: Node,
) -> Result<Node> {
    if xhats.len() < 2 {
        return Err(Error::Clip("fewer than two frames".into()));
    }
    let mut cols = Vec::with_capacity(xhats.len() - 1);
    for t in 1..xhats.len() {
        let p_cur = tape.slice_rows(xhats[t], 0, 3 * n_joints)?;
        let p_prev = tape.slice_rows(xhats[t - 1], 0, 3 * n_joints)?;
        let dp = tape.sub(p_cur, p_prev)?;
        let v = tape.slice_rows(xhats[t - 1], 3 * n_joints, 4)?;
        cols.push(tape.concat(&[dp, v, sbar])?);
    }
    tape.stack_cols(&cols)
}

/// The same assembly from stored clip data, normalized here and entered
/// as a single constant (real samples carry no gradient).
pub fn real_input(
    tape: &mut Tape,
    local: &[Vec<Vec3>],
    global: &[GlobalRow],
    height: f64,
    sbar: &Tensor,
) -> Result<Node> {
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
    let n_joints = local[0].len();
    if sbar.numel() != 3 * (n_joints - 1) {
        return Err(Error::ArityMismatch { expected: 3 * (n_joints - 1), got: sbar.numel() });
    }
    if !(height.is_finite() && height > 0.0) {
        return Err(Error::NonFinite(format!("character height {height}")));
    }
    let channels = Discriminator::input_channels(n_joints);
    let cols = local.len() - 1;
    let mut data = vec![0.0; channels * cols];
    for col in 0..cols {
        let mut row = 0;
        for joint in 0..n_joints {
            for axis in 0..3 {
                data[row * cols + col] =
                    (local[col + 1][joint][axis] - local[col][joint][axis]) / height;
                row += 1;
            }
        }
        for axis in 0..3 {
            data[row * cols + col] = global[col][axis] / height;
            row += 1;
        }
        data[row * cols + col] = global[col][3] / DYAW_SCALE;
        row += 1;
        for &s in &sbar.data {
            data[row * cols + col] = s;
            row += 1;
        }
    }
    let tensor = Tensor { shape: vec![channels, cols], data };
    if !tensor.is_finite() {
        return Err(Error::NonFinite("discriminator input".into()));
    }
    Ok(tape.constant(tensor))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kinematics::{Composition, Skeleton};
    use crate::model::{input_nodes, Condition, RetargetModel};
    use rand::SeedableRng;

    fn random_input(rng: &mut ChaCha8Rng, channels: usize, len: usize) -> Tensor {
        let data = (0..channels * len).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Tensor { shape: vec![channels, len], data }
    }

    #[test]
    fn conv_pyramid_reduces_sixty_columns_to_one_score() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let disc = Discriminator::new(10, 8, &mut rng);
        let mut tape = Tape::new();
        let nodes = disc.bind(&mut tape, false);
        let input = tape.constant(random_input(&mut rng, 10, 60));
        let (prob, lengths) = nodes.score_traced(&mut tape, input, None).unwrap();
        assert_eq!(lengths, vec![30, 15, 8, 4, 1]);
        let p = tape.value(prob).data[0];
        assert!(p > 0.0 && p < 1.0);
    }

    #[test]
    fn untrained_scores_hover_near_one_half() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for seed in 0..10 {
            let disc = Discriminator::new(12, 16, &mut ChaCha8Rng::seed_from_u64(seed));
            let mut tape = Tape::new();
            let nodes = disc.bind(&mut tape, false);
            let input = tape.constant(random_input(&mut rng, 12, 60));
            let prob = nodes.score(&mut tape, input, None).unwrap();
            let p = tape.value(prob).data[0];
            assert!((p - 0.5).abs() < 0.2, "seed {seed}: {p}");
        }
    }

    #[test]
    fn dropout_only_fires_in_training_mode() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let disc = Discriminator::new(6, 8, &mut rng);
        let input_data = random_input(&mut rng, 6, 60);

        let mut tape = Tape::new();
        let nodes = disc.bind(&mut tape, false);
        let input = tape.constant(input_data.clone());
        let a = nodes.score(&mut tape, input, None).unwrap();
        let b = nodes.score(&mut tape, input, None).unwrap();
        assert_eq!(tape.value(a).data, tape.value(b).data);

        let mut d1 = ChaCha8Rng::seed_from_u64(4);
        let mut d2 = ChaCha8Rng::seed_from_u64(5);
        let c = nodes.score(&mut tape, input, Some(&mut d1)).unwrap();
        let d = nodes.score(&mut tape, input, Some(&mut d2)).unwrap();
        assert_ne!(tape.value(c).data, tape.value(d).data);
    }

    #[test]
    fn every_parameter_receives_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut disc = Discriminator::new(6, 8, &mut rng);
        // Kick biases off zero so their gradients are generic.
        disc.visit_mut(&mut |_, t| {
            for x in &mut t.data {
                *x += rng.gen_range(-0.05..0.05);
            }
        });
        let mut tape = Tape::new();
        let nodes = disc.bind(&mut tape, true);
        let input = tape.constant(random_input(&mut rng, 6, 60));
        let prob = nodes.score(&mut tape, input, None).unwrap();
        let loss = tape.square(prob);
        tape.backward(loss).unwrap();

        let mut names = Vec::new();
        disc.visit(&mut |name, _| names.push(name));
        for (name, node) in names.iter().zip(nodes.param_nodes()) {
            let g = tape.grad_tensor(node);
            assert!(g.data.iter().any(|x| *x != 0.0), "no gradient reached {name}");
        }
    }

    #[test]
    fn short_inputs_are_rejected_by_the_valid_layer() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let disc = Discriminator::new(5, 8, &mut rng);
        let mut tape = Tape::new();
        let nodes = disc.bind(&mut tape, false);
        let input = tape.constant(random_input(&mut rng, 5, 20));
        assert!(nodes.score(&mut tape, input, None).is_err());
    }

    /// The live-synthesis and stored-clip input assemblies must agree
    /// column for column.
    #[test]
    fn fake_and_real_assemblies_match_on_the_same_motion() {
        let skeleton = Skeleton::new(
            "probe",
            vec![
                ("Root".into(), None),
                ("Spine".into(), Some(0)),
                ("Head".into(), Some(1)),
                ("LeftUpLeg".into(), Some(0)),
            ],
            vec![
                [0.0, 100.0, 0.0],
                [0.0, 125.0, 0.0],
                [3.0, 150.0, 0.0],
                [-9.0, 93.0, 0.0],
            ],
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut model = RetargetModel::new(4, 8, 2, Composition::Hierarchical, &mut rng);
        model.visit_mut(&mut |_, t| {
            for x in &mut t.data {
                *x += rng.gen_range(-0.3..0.3);
            }
        });
        let cond = Condition::new(&skeleton);
        let local: Vec<Vec<crate::quat::Vec3>> = (0..6)
            .map(|_| {
                (0..4)
                    .map(|j| {
                        if j == 0 {
                            [0.0; 3]
                        } else {
                            [
                                rng.gen_range(-40.0..40.0),
                                rng.gen_range(0.0..120.0),
                                rng.gen_range(-40.0..40.0),
                            ]
                        }
                    })
                    .collect()
            })
            .collect();
        let global: Vec<GlobalRow> = (0..6)
            .map(|_| {
                [
                    rng.gen_range(-2.0..2.0),
                    rng.gen_range(-2.0..2.0),
                    rng.gen_range(-2.0..2.0),
                    rng.gen_range(-5.0..5.0),
                ]
            })
            .collect();

        let mut tape = Tape::new();
        let nodes = model.bind(&mut tape, false);
        let cond_nodes = cond.bind(&mut tape);
        let inputs = input_nodes(&mut tape, &local, &global, 150.0, 4).unwrap();
        let synth = nodes.synthesize(&mut tape, &inputs, &cond_nodes).unwrap();
        let xhats: Vec<Node> = synth.frames.iter().map(|f| f.xhat).collect();
        let fake = fake_input(&mut tape, &xhats, 4, cond_nodes.sbar).unwrap();

        let plain = model.synthesize(&local, &global, 150.0, &cond).unwrap();
        let real = real_input(&mut tape, &plain.local, &plain.global, cond.height(), cond.sbar())
            .unwrap();

        assert_eq!(tape.value(fake).shape, tape.value(real).shape);
        for (a, b) in tape.value(fake).data.iter().zip(&tape.value(real).data) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn checkpoint_round_trip_and_tamper_rejection() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let disc = Discriminator::new(7, 8, &mut rng);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("disc.json");
        disc.save(&path).unwrap();

        let loaded = Discriminator::load(&path).unwrap();
        let mut before = Vec::new();
        disc.visit(&mut |name, t| before.push((name, t.data.clone())));
        let mut after = Vec::new();
        loaded.visit(&mut |name, t| after.push((name, t.data.clone())));
        assert_eq!(before, after);

        let text = std::fs::read_to_string(&path).unwrap();
        std::fs::write(&path, text.replacen(ARCH_CONV_DISC, "fk-rnn", 1)).unwrap();
        assert!(matches!(
            Discriminator::load(&path),
            Err(Error::CheckpointMismatch(_))
        ));
    }
}
