//! The four training objectives: cycle reconstruction, the
//! adversarial-or-square-loss switch, joint twist limits, and global
//! velocity smoothing.
//!
//! All terms are plain sums over frames and components (no per-frame
//! averaging); the loop averages over the batch. Positions and
//! velocities arrive in the network's height-normalized feature space;
//! twist angles are in degrees throughout, matching the degree-valued
//! limit `alpha_deg`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::neural::{Node, Tape, Tensor};

/// Probabilities are clamped to `[PROB_CLAMP, 1 - PROB_CLAMP]` before
/// any logarithm.
pub const PROB_CLAMP: f64 = 1e-7;

/// Objective weights; the defaults are load-bearing reference values.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    /// Scale of the generator's adversarial term.
    pub beta: f64,
    /// Per-joint y-twist allowance in degrees.
    pub alpha_deg: f64,
    /// Weight of the twist penalty.
    pub lambda: f64,
    /// Weight of the velocity smoothing penalty.
    pub omega: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { beta: 0.001, alpha_deg: 100.0, lambda: 10.0, omega: 0.01 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("beta", self.beta),
            ("alpha_deg", self.alpha_deg),
            ("lambda", self.lambda),
            ("omega", self.omega),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Config(format!("loss weight {name} must be positive, got {v}")));
            }
        }
        Ok(())
    }
}

/// Sum of squared differences between two equal-length frame sequences.
pub fn sum_squared_frames(tape: &mut Tape, a: &[Node], b: &[Node]) -> Result<Node> {
    if a.len() != b.len() {
        return Err(Error::LengthMismatch(format!(
            "{} frames vs {}",
            a.len(),
            b.len()
        )));
    }
    let mut terms = Vec::with_capacity(a.len());
    for (&x, &y) in a.iter().zip(b) {
        let d = tape.sub(x, y)?;
        let sq = tape.square(d);
        terms.push(tape.sum(sq));
    }
    let stacked = tape.concat(&terms)?;
    Ok(tape.sum(stacked))
}

/// Round-trip consistency: the retargetted motion mapped back onto its
/// own skeleton must reproduce the input.
pub fn cycle_loss(tape: &mut Tape, xhat_back: &[Node], x_input: &[Node]) -> Result<Node> {
    sum_squared_frames(tape, xhat_back, x_input)
}

/// Generator-side adversarial term. `literal` selects the saturating
/// form `beta * log(1 - r)`; the default `-beta * log r` has the same
/// fixed point but keeps gradients alive when the discriminator wins.
pub fn generator_adversarial_loss(tape: &mut Tape, r_fake: Node, beta: f64, literal: bool) -> Node {
    let r = tape.clamp(r_fake, PROB_CLAMP, 1.0 - PROB_CLAMP);
    if literal {
        let neg = tape.scale(r, -1.0);
        let one_minus = tape.add_scalar(neg, 1.0);
        let ln = tape.ln(one_minus);
        tape.scale(ln, beta)
    } else {
        let ln = tape.ln(r);
        tape.scale(ln, -beta)
    }
}

/// What the discriminator minimizes: the negated log-likelihood of
/// calling real real and fake fake.
pub fn discriminator_loss(tape: &mut Tape, r_real: Node, r_fake: Node) -> Result<Node> {
    let rr = tape.clamp(r_real, PROB_CLAMP, 1.0 - PROB_CLAMP);
    let rf = tape.clamp(r_fake, PROB_CLAMP, 1.0 - PROB_CLAMP);
    let ln_real = tape.ln(rr);
    let neg = tape.scale(rf, -1.0);
    let one_minus = tape.add_scalar(neg, 1.0);
    let ln_fake = tape.ln(one_minus);
    let total = tape.add(ln_real, ln_fake)?;
    Ok(tape.scale(total, -1.0))
}

/// Quadratic penalty, in squared degrees, on per-joint y-twist
/// magnitudes beyond `alpha_deg`, summed over both synthesis passes.
pub fn twist_loss(
    tape: &mut Tape,
    quats_out: &[Node],
    quats_back: &[Node],
    alpha_deg: f64,
) -> Result<Node> {
    let mut terms = Vec::with_capacity(quats_out.len() + quats_back.len());
    for &frame in quats_out.iter().chain(quats_back) {
        let twist = tape.twist_y(frame)?;
        let mag = tape.abs(twist);
        let over = tape.add_scalar(mag, -alpha_deg);
        let active = tape.relu(over);
        let sq = tape.square(active);
        terms.push(tape.sum(sq));
    }
    let stacked = tape.concat(&terms)?;
    Ok(tape.sum(stacked))
}

/// Sum of squared frame-to-frame changes in the root velocity rows,
/// for both synthesis passes.
pub fn smoothing_loss(tape: &mut Tape, vel_out: &[Node], vel_back: &[Node]) -> Result<Node> {
    let mut terms = Vec::new();
    for seq in [vel_out, vel_back] {
        for pair in seq.windows(2) {
            let d = tape.sub(pair[1], pair[0])?;
            let sq = tape.square(d);
            terms.push(tape.sum(sq));
        }
    }
    if terms.is_empty() {
        return Ok(tape.constant(Tensor::scalar(0.0)));
    }
    let stacked = tape.concat(&terms)?;
    Ok(tape.sum(stacked))
}
