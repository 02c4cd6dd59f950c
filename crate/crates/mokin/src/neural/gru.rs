//! Gated recurrent units, written against the tape.
//!
//! Update equations (reset gate applied to the hidden state before the
//! candidate transform, update gate gating the previous hidden state):
//!
//! ```text
//! z = sigmoid(x Wz + h Uz + bz)
//! r = sigmoid(x Wr + h Ur + br)
//! n = tanh(x Wn + (r . h) Un + bn)
//! h' = z . h + (1 - z) . n
//! ```
//!
//! With all-zero parameters every gate is 0.5 and the candidate is 0, so
//! `h' = 0.5 h`; the tests pin that. Because `h'` is a convex blend of
//! `h` and a tanh output, hidden norms cannot diverge.

use rand_chacha::ChaCha8Rng;

use crate::error::Result;

use super::init::{orthogonal, uniform_fan_in};
use super::tape::{Node, Tape};
use super::tensor::Tensor;

/// One GRU layer's parameters. Weight naming: `w*` input, `u*` recurrent.
#[derive(Clone, Debug)]
pub struct GruLayer {
    pub in_dim: usize,
    pub hidden: usize,
    pub wz: Tensor,
    pub uz: Tensor,
    pub bz: Tensor,
    pub wr: Tensor,
    pub ur: Tensor,
    pub br: Tensor,
    pub wn: Tensor,
    pub un: Tensor,
    pub bn: Tensor,
}

/// Tape handles for one layer's parameters.
#[derive(Clone, Copy)]
pub struct GruLayerNodes {
    pub wz: Node,
    pub uz: Node,
    pub bz: Node,
    pub wr: Node,
    pub ur: Node,
    pub br: Node,
    pub wn: Node,
    pub un: Node,
    pub bn: Node,
}

impl GruLayer {
    pub fn zeros(in_dim: usize, hidden: usize) -> GruLayer {
        GruLayer {
            in_dim,
            hidden,
            wz: Tensor::zeros(&[in_dim, hidden]),
            uz: Tensor::zeros(&[hidden, hidden]),
            bz: Tensor::zeros(&[hidden]),
            wr: Tensor::zeros(&[in_dim, hidden]),
            ur: Tensor::zeros(&[hidden, hidden]),
            br: Tensor::zeros(&[hidden]),
            wn: Tensor::zeros(&[in_dim, hidden]),
            un: Tensor::zeros(&[hidden, hidden]),
            bn: Tensor::zeros(&[hidden]),
        }
    }

    pub fn init(in_dim: usize, hidden: usize, rng: &mut ChaCha8Rng) -> GruLayer {
        GruLayer {
            in_dim,
            hidden,
            wz: uniform_fan_in(rng, in_dim, hidden),
            uz: orthogonal(rng, hidden),
            bz: Tensor::zeros(&[hidden]),
            wr: uniform_fan_in(rng, in_dim, hidden),
            ur: orthogonal(rng, hidden),
            br: Tensor::zeros(&[hidden]),
            wn: uniform_fan_in(rng, in_dim, hidden),
            un: orthogonal(rng, hidden),
            bn: Tensor::zeros(&[hidden]),
        }
    }

    /// Visits parameters as `(suffix, tensor)` in a fixed order.
    pub fn visit<'a>(&'a self, f: &mut impl FnMut(&'static str, &'a Tensor)) {
        f("wz", &self.wz);
        f("uz", &self.uz);
        f("bz", &self.bz);
        f("wr", &self.wr);
        f("ur", &self.ur);
        f("br", &self.br);
        f("wn", &self.wn);
        f("un", &self.un);
        f("bn", &self.bn);
    }

    pub fn visit_mut(&mut self, f: &mut impl FnMut(&'static str, &mut Tensor)) {
        f("wz", &mut self.wz);
        f("uz", &mut self.uz);
        f("bz", &mut self.bz);
        f("wr", &mut self.wr);
        f("ur", &mut self.ur);
        f("br", &mut self.br);
        f("wn", &mut self.wn);
        f("un", &mut self.un);
        f("bn", &mut self.bn);
    }

    /// Copies parameters onto a tape as gradient-bearing leaves.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> GruLayerNodes {
        GruLayerNodes {
            wz: tape.leaf(self.wz.clone(), trainable),
            uz: tape.leaf(self.uz.clone(), trainable),
            bz: tape.leaf(self.bz.clone(), trainable),
            wr: tape.leaf(self.wr.clone(), trainable),
            ur: tape.leaf(self.ur.clone(), trainable),
            br: tape.leaf(self.br.clone(), trainable),
            wn: tape.leaf(self.wn.clone(), trainable),
            un: tape.leaf(self.un.clone(), trainable),
            bn: tape.leaf(self.bn.clone(), trainable),
        }
    }
}

/// One timestep: `[in] x [hidden] -> [hidden]`.
pub fn gru_step(tape: &mut Tape, p: &GruLayerNodes, x: Node, h: Node) -> Result<Node> {
    let xz = tape.matmul(x, p.wz)?;
    let hz = tape.matmul(h, p.uz)?;
    let zsum = tape.add(xz, hz)?;
    let zb = tape.add_bias(zsum, p.bz)?;
    let z = tape.sigmoid(zb);

    let xr = tape.matmul(x, p.wr)?;
    let hr = tape.matmul(h, p.ur)?;
    let rsum = tape.add(xr, hr)?;
    let rb = tape.add_bias(rsum, p.br)?;
    let r = tape.sigmoid(rb);

    let xn = tape.matmul(x, p.wn)?;
    let rh = tape.mul(r, h)?;
    let hn = tape.matmul(rh, p.un)?;
    let nsum = tape.add(xn, hn)?;
    let nb = tape.add_bias(nsum, p.bn)?;
    let n = tape.tanh(nb);

    let zh = tape.mul(z, h)?;
    let one_minus_z = {
        let neg = tape.scale(z, -1.0);
        tape.add_scalar(neg, 1.0)
    };
    let zn = tape.mul(one_minus_z, n)?;
    tape.add(zh, zn)
}

/// A stack of GRU layers; layer `i` feeds layer `i + 1`.
#[derive(Clone, Debug)]
pub struct GruStack {
    pub layers: Vec<GruLayer>,
}

pub struct GruStackNodes {
    pub layers: Vec<GruLayerNodes>,
}

impl GruStack {
    pub fn zeros(in_dim: usize, hidden: usize, n_layers: usize) -> GruStack {
        let layers = (0..n_layers)
            .map(|i| GruLayer::zeros(if i == 0 { in_dim } else { hidden }, hidden))
            .collect();
        GruStack { layers }
    }

    pub fn init(in_dim: usize, hidden: usize, n_layers: usize, rng: &mut ChaCha8Rng) -> GruStack {
        let layers = (0..n_layers)
            .map(|i| GruLayer::init(if i == 0 { in_dim } else { hidden }, hidden, rng))
            .collect();
        GruStack { layers }
    }

    pub fn hidden(&self) -> usize {
        self.layers[0].hidden
    }

    pub fn visit<'a>(&'a self, prefix: &str, f: &mut impl FnMut(String, &'a Tensor)) {
        for (idx, layer) in self.layers.iter().enumerate() {
            layer.visit(&mut |suffix, t| f(format!("{prefix}.{idx}.{suffix}"), t));
        }
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut impl FnMut(String, &mut Tensor)) {
        for (idx, layer) in self.layers.iter_mut().enumerate() {
            layer.visit_mut(&mut |suffix, t| f(format!("{prefix}.{idx}.{suffix}"), t));
        }
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> GruStackNodes {
        GruStackNodes {
            layers: self.layers.iter().map(|l| l.bind(tape, trainable)).collect(),
        }
    }

    /// Zero initial hidden state per layer.
    pub fn zero_state(&self, tape: &mut Tape) -> Vec<Node> {
        self.layers
            .iter()
            .map(|l| tape.constant(Tensor::zeros(&[l.hidden])))
            .collect()
    }
}

/// Advances the whole stack one timestep; returns the new per-layer
/// hidden states (the last entry is the stack output).
pub fn gru_stack_step(
    tape: &mut Tape,
    params: &GruStackNodes,
    x: Node,
    state: &[Node],
) -> Result<Vec<Node>> {
    let mut new_state = Vec::with_capacity(state.len());
    let mut input = x;
    for (layer, h) in params.layers.iter().zip(state) {
        let h_new = gru_step(tape, layer, input, *h)?;
        new_state.push(h_new);
        input = h_new;
    }
    Ok(new_state)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{finite_diff, max_rel_err, FD_STEP};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_parameters_halve_the_hidden_state() {
        let layer = GruLayer::zeros(3, 4);
        let mut tape = Tape::new();
        let nodes = layer.bind(&mut tape, false);
        let x = tape.constant(Tensor::from_vec(&[3], vec![0.3, -1.0, 2.0]).unwrap());
        let h = tape.constant(Tensor::from_vec(&[4], vec![1.0, -2.0, 0.5, 4.0]).unwrap());
        let out = gru_step(&mut tape, &nodes, x, h).unwrap();
        assert_eq!(tape.value(out).data, vec![0.5, -1.0, 0.25, 2.0]);
    }

    #[test]
    fn hidden_norm_stays_bounded_on_long_sequences() {
        let mut rng = ChaCha8Rng::seed_from_u64(60);
        let stack = GruStack::init(8, 16, 2, &mut rng);
        let mut tape = Tape::new();
        let nodes = stack.bind(&mut tape, false);
        let mut state = stack.zero_state(&mut tape);
        let mut max_abs: f64 = 0.0;
        for _ in 0..120 {
            let x: Vec<f64> = (0..8).map(|_| standard_ish(&mut rng)).collect();
            let xn = tape.constant(Tensor::from_vec(&[8], x).unwrap());
            state = gru_stack_step(&mut tape, &nodes, xn, &state).unwrap();
            for s in &state {
                for v in &tape.value(*s).data {
                    max_abs = max_abs.max(v.abs());
                }
            }
        }
        // Convex blending with tanh keeps every coordinate inside [-1, 1]
        // once the initial state is zero.
        assert!(max_abs <= 1.0 + 1e-12, "hidden state escaped: {max_abs}");
    }

    fn standard_ish(rng: &mut ChaCha8Rng) -> f64 {
        let u1: f64 = rng.gen_range(1e-12..1.0);
        let u2: f64 = rng.gen();
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }

    #[test]
    fn gru_step_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(61);
        let layer = GruLayer::init(3, 4, &mut rng);
        let x0: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let h0: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let upstream: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();

        // Flatten all parameters plus x and h into one vector.
        let mut flat = Vec::new();
        layer.visit(&mut |_, t| flat.extend_from_slice(&t.data));
        flat.extend_from_slice(&x0);
        flat.extend_from_slice(&h0);

        let eval = |v: &[f64]| -> (f64, Vec<f64>) {
            let mut l = layer.clone();
            let mut offset = 0;
            l.visit_mut(&mut |_, t| {
                let n = t.numel();
                t.data.copy_from_slice(&v[offset..offset + n]);
                offset += n;
            });
            let x = &v[offset..offset + 3];
            let h = &v[offset + 3..offset + 7];
            let mut tape = Tape::new();
            let nodes = l.bind(&mut tape, true);
            let xn = tape.leaf(Tensor::from_vec(&[3], x.to_vec()).unwrap(), true);
            let hn = tape.leaf(Tensor::from_vec(&[4], h.to_vec()).unwrap(), true);
            let out = gru_step(&mut tape, &nodes, xn, hn).unwrap();
            let u = tape.constant(Tensor::from_vec(&[4], upstream.clone()).unwrap());
            let prod = tape.mul(out, u).unwrap();
            let loss = tape.sum(prod);
            let value = tape.value(loss).data[0];
            tape.backward(loss).unwrap();
            let mut grads = Vec::new();
            for node in [
                nodes.wz, nodes.uz, nodes.bz, nodes.wr, nodes.ur, nodes.br, nodes.wn,
                nodes.un, nodes.bn, xn, hn,
            ] {
                grads.extend(tape.grad_tensor(node).data);
            }
            (value, grads)
        };

        let (_, analytic) = eval(&flat);
        let numeric = finite_diff(|v| eval(v).0, &flat, FD_STEP);
        let err = max_rel_err(&analytic, &numeric, 1e-5);
        assert!(err < 1e-5, "gru gradcheck: {err:e}");
    }
}
