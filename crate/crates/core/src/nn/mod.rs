//! A small fully connected network with tanh hidden units and explicit
//! reverse-mode tapes. Enough machinery to train the MBR allocation and
//! payment networks and nothing more.

mod serialize;

pub use serialize::{read_networks, write_networks, MAGIC};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum OutputActivation {
    None,
    /// Softmax over consecutive blocks of `group` outputs.
    SoftmaxRows { group: usize },
    /// Softmax over the whole output.
    SoftmaxVector,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    inputs: usize,
    outputs: usize,
    /// Row-major `outputs x inputs`.
    weights: Vec<f64>,
    bias: Vec<f64>,
}

impl Dense {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            inputs,
            outputs,
            weights: vec![0.0; inputs * outputs],
            bias: vec![0.0; outputs],
        }
    }

    /// Uniform on `[-r, r]` with `r = sqrt(6 / (fan_in + fan_out))`, zero bias.
    pub fn glorot<R: Rng + ?Sized>(inputs: usize, outputs: usize, rng: &mut R) -> Self {
        let r = (6.0 / (inputs + outputs) as f64).sqrt();
        let weights = (0..inputs * outputs)
            .map(|_| r * (2.0 * rng.random::<f64>() - 1.0))
            .collect();
        Self {
            inputs,
            outputs,
            weights,
            bias: vec![0.0; outputs],
        }
    }

    pub fn from_parts(inputs: usize, outputs: usize, weights: Vec<f64>, bias: Vec<f64>) -> Result<Self> {
        if weights.len() != inputs * outputs {
            return Err(Error::DimensionMismatch {
                context: "dense weights",
                expected: inputs * outputs,
                actual: weights.len(),
            });
        }
        if bias.len() != outputs {
            return Err(Error::DimensionMismatch {
                context: "dense bias",
                expected: outputs,
                actual: bias.len(),
            });
        }
        if weights.iter().chain(&bias).any(|v| !v.is_finite()) {
            return Err(Error::Format("non-finite parameter".into()));
        }
        Ok(Self {
            inputs,
            outputs,
            weights,
            bias,
        })
    }

    pub fn inputs(&self) -> usize {
        self.inputs
    }

    pub fn outputs(&self) -> usize {
        self.outputs
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    fn affine(&self, x: &[f64]) -> Vec<f64> {
        self.weights
            .chunks_exact(self.inputs)
            .zip(&self.bias)
            .map(|(row, b)| b + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>())
            .collect()
    }

    /// `W^T delta`
    fn transpose_mul(&self, delta: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.inputs];
        for (row, d) in self.weights.chunks_exact(self.inputs).zip(delta) {
            if *d != 0.0 {
                for (o, w) in out.iter_mut().zip(row) {
                    *o += w * d;
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseNetwork {
    layers: Vec<Dense>,
    output: OutputActivation,
}

/// Activations recorded by one forward pass. Consumed by [`DenseNetwork::backward`].
#[derive(Debug)]
pub struct GradientTape {
    /// `activations[k]` is the input of layer `k`; the last entry is the
    /// network output after the output activation.
    activations: Vec<Vec<f64>>,
}

impl GradientTape {
    pub fn output(&self) -> &[f64] {
        self.activations.last().expect("tape always holds the output")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkGradients {
    layers: Vec<(Vec<f64>, Vec<f64>)>,
}

impl NetworkGradients {
    pub fn add_assign(&mut self, other: &NetworkGradients) {
        self.add_scaled(other, 1.0);
    }

    pub fn add_scaled(&mut self, other: &NetworkGradients, scale: f64) {
        for ((w, b), (ow, ob)) in self.layers.iter_mut().zip(&other.layers) {
            for (a, o) in w.iter_mut().zip(ow) {
                *a += scale * o;
            }
            for (a, o) in b.iter_mut().zip(ob) {
                *a += scale * o;
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for (w, b) in &mut self.layers {
            w.iter_mut().chain(b.iter_mut()).for_each(|v| *v *= s);
        }
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.layers
            .iter()
            .flat_map(|(w, b)| w.iter().chain(b).copied())
            .collect()
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|(w, b)| w.iter().chain(b).all(|v| v.is_finite()))
    }

    /// Weight and bias gradients of layer `k`.
    pub fn layer(&self, k: usize) -> (&[f64], &[f64]) {
        let (w, b) = &self.layers[k];
        (w, b)
    }
}

impl DenseNetwork {
    pub fn new(layers: Vec<Dense>, output: OutputActivation) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Config("network needs at least one layer".into()));
        }
        for pair in layers.windows(2) {
            if pair[0].outputs != pair[1].inputs {
                return Err(Error::DimensionMismatch {
                    context: "layer chaining",
                    expected: pair[0].outputs,
                    actual: pair[1].inputs,
                });
            }
        }
        let out = layers.last().map(|l| l.outputs).unwrap_or(0);
        if let OutputActivation::SoftmaxRows { group } = output {
            if group == 0 || !out.is_multiple_of(group) {
                return Err(Error::Config(format!(
                    "output width {out} is not a multiple of softmax group {group}"
                )));
            }
        }
        Ok(Self { layers, output })
    }

    /// Glorot-initialized network `sizes[0] -> sizes[1] -> ... -> sizes[last]`.
    pub fn glorot<R: Rng + ?Sized>(sizes: &[usize], output: OutputActivation, rng: &mut R) -> Result<Self> {
        if sizes.len() < 2 {
            return Err(Error::Config("network needs input and output sizes".into()));
        }
        let layers = sizes
            .windows(2)
            .map(|w| Dense::glorot(w[0], w[1], rng))
            .collect();
        Self::new(layers, output)
    }

    pub fn zeros(sizes: &[usize], output: OutputActivation) -> Result<Self> {
        if sizes.len() < 2 {
            return Err(Error::Config("network needs input and output sizes".into()));
        }
        Self::new(sizes.windows(2).map(|w| Dense::zeros(w[0], w[1])).collect(), output)
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn output_activation(&self) -> OutputActivation {
        self.output
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].inputs
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map(|l| l.outputs).unwrap_or(0)
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    pub fn zero_gradients(&self) -> NetworkGradients {
        NetworkGradients {
            layers: self
                .layers
                .iter()
                .map(|l| (vec![0.0; l.weights.len()], vec![0.0; l.bias.len()]))
                .collect(),
        }
    }

    pub fn params_flat(&self) -> Vec<f64> {
        self.layers
            .iter()
            .flat_map(|l| l.weights.iter().chain(&l.bias).copied())
            .collect()
    }

    pub fn set_params_flat(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.param_count() {
            return Err(Error::DimensionMismatch {
                context: "flat parameters",
                expected: self.param_count(),
                actual: params.len(),
            });
        }
        let mut rest = params;
        for l in &mut self.layers {
            let (w, tail) = rest.split_at(l.weights.len());
            let (b, tail) = tail.split_at(l.bias.len());
            l.weights.copy_from_slice(w);
            l.bias.copy_from_slice(b);
            rest = tail;
        }
        Ok(())
    }

    fn check_input(&self, input: &[f64]) -> Result<()> {
        if input.len() != self.input_dim() {
            return Err(Error::DimensionMismatch {
                context: "network input",
                expected: self.input_dim(),
                actual: input.len(),
            });
        }
        Ok(())
    }

    pub fn forward(&self, input: &[f64]) -> Result<(Vec<f64>, GradientTape)> {
        self.check_input(input)?;
        let mut activations = Vec::with_capacity(self.layers.len() + 1);
        activations.push(input.to_vec());
        let last = self.layers.len() - 1;
        for (k, layer) in self.layers.iter().enumerate() {
            let mut h = layer.affine(&activations[k]);
            if k < last {
                h.iter_mut().for_each(|v| *v = v.tanh());
            } else {
                apply_output(self.output, &mut h);
            }
            activations.push(h);
        }
        let out = activations.last().cloned().unwrap_or_default();
        Ok((out, GradientTape { activations }))
    }

    /// Output only, without keeping a tape.
    pub fn predict(&self, input: &[f64]) -> Result<Vec<f64>> {
        self.check_input(input)?;
        let last = self.layers.len() - 1;
        let mut x = input.to_vec();
        for (k, layer) in self.layers.iter().enumerate() {
            x = layer.affine(&x);
            if k < last {
                x.iter_mut().for_each(|v| *v = v.tanh());
            } else {
                apply_output(self.output, &mut x);
            }
        }
        Ok(x)
    }

    /// Gradients of `upstream . output` with respect to every parameter and
    /// to the input.
    pub fn backward(&self, tape: GradientTape, upstream: &[f64]) -> Result<(NetworkGradients, Vec<f64>)> {
        let mut grads = self.zero_gradients();
        let input_grad = self.backward_into(tape, upstream, &mut grads)?;
        Ok((grads, input_grad))
    }

    /// Like [`backward`](Self::backward) but accumulates into `grads`.
    pub fn backward_into(
        &self,
        tape: GradientTape,
        upstream: &[f64],
        grads: &mut NetworkGradients,
    ) -> Result<Vec<f64>> {
        self.backprop(tape, upstream, Some(grads))
    }

    /// Input gradient only; skips the parameter gradients.
    pub fn input_gradient(&self, tape: GradientTape, upstream: &[f64]) -> Result<Vec<f64>> {
        self.backprop(tape, upstream, None)
    }

    fn backprop(
        &self,
        tape: GradientTape,
        upstream: &[f64],
        mut grads: Option<&mut NetworkGradients>,
    ) -> Result<Vec<f64>> {
        if upstream.len() != self.output_dim() {
            return Err(Error::DimensionMismatch {
                context: "upstream gradient",
                expected: self.output_dim(),
                actual: upstream.len(),
            });
        }
        if tape.activations.len() != self.layers.len() + 1 {
            return Err(Error::DimensionMismatch {
                context: "gradient tape",
                expected: self.layers.len() + 1,
                actual: tape.activations.len(),
            });
        }
        let acts = tape.activations;
        let last = self.layers.len() - 1;
        let mut delta = output_backward(self.output, &acts[last + 1], upstream);
        for k in (0..=last).rev() {
            let layer = &self.layers[k];
            if k < last {
                // acts[k + 1] = tanh(pre-activation)
                for (d, a) in delta.iter_mut().zip(&acts[k + 1]) {
                    *d *= 1.0 - a * a;
                }
            }
            if let Some(g) = grads.as_deref_mut() {
                let (gw, gb) = &mut g.layers[k];
                let x = &acts[k];
                for ((row, d), b) in gw.chunks_exact_mut(layer.inputs).zip(&delta).zip(gb.iter_mut()) {
                    *b += d;
                    if *d != 0.0 {
                        for (w, v) in row.iter_mut().zip(x) {
                            *w += d * v;
                        }
                    }
                }
            }
            delta = layer.transpose_mul(&delta);
        }
        Ok(delta)
    }

    /// `params - lr * grads`.
    pub fn sgd_step(&mut self, grads: &NetworkGradients, lr: f64) -> Result<()> {
        if grads.layers.len() != self.layers.len()
            || grads
                .layers
                .iter()
                .zip(&self.layers)
                .any(|((w, b), l)| w.len() != l.weights.len() || b.len() != l.bias.len())
        {
            return Err(Error::DimensionMismatch {
                context: "sgd step",
                expected: self.param_count(),
                actual: grads.layers.iter().map(|(w, b)| w.len() + b.len()).sum(),
            });
        }
        for (l, (gw, gb)) in self.layers.iter_mut().zip(&grads.layers) {
            for (p, g) in l.weights.iter_mut().zip(gw) {
                *p -= lr * g;
            }
            for (p, g) in l.bias.iter_mut().zip(gb) {
                *p -= lr * g;
            }
        }
        Ok(())
    }
}

pub fn sgd_step(net: &mut DenseNetwork, grads: &NetworkGradients, lr: f64) -> Result<()> {
    net.sgd_step(grads, lr)
}

fn softmax_in_place(x: &mut [f64]) {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in x.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    x.iter_mut().for_each(|v| *v /= total);
}

fn apply_output(act: OutputActivation, x: &mut [f64]) {
    match act {
        OutputActivation::None => {}
        OutputActivation::SoftmaxVector => softmax_in_place(x),
        OutputActivation::SoftmaxRows { group } => x.chunks_exact_mut(group).for_each(softmax_in_place),
    }
}

/// Softmax Jacobian-vector product `y * (dy - <dy, y>)`, per group.
fn softmax_backward(y: &[f64], dy: &[f64]) -> Vec<f64> {
    let dot: f64 = y.iter().zip(dy).map(|(a, b)| a * b).sum();
    y.iter().zip(dy).map(|(a, b)| a * (b - dot)).collect()
}

fn output_backward(act: OutputActivation, y: &[f64], dy: &[f64]) -> Vec<f64> {
    match act {
        OutputActivation::None => dy.to_vec(),
        OutputActivation::SoftmaxVector => softmax_backward(y, dy),
        OutputActivation::SoftmaxRows { group } => y
            .chunks_exact(group)
            .zip(dy.chunks_exact(group))
            .flat_map(|(yy, dd)| softmax_backward(yy, dd))
            .collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_network_outputs_zero() {
        let net = DenseNetwork::zeros(&[3, 4, 2], OutputActivation::None).unwrap();
        assert_eq!(net.predict(&[1.0, -2.0, 0.5]).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn softmax_heads_at_equal_logits() {
        let v = DenseNetwork::zeros(&[1, 2], OutputActivation::SoftmaxVector).unwrap();
        assert_eq!(v.predict(&[3.0]).unwrap(), vec![0.5, 0.5]);
        let rows = DenseNetwork::zeros(&[1, 4], OutputActivation::SoftmaxRows { group: 2 }).unwrap();
        assert_eq!(rows.predict(&[3.0]).unwrap(), vec![0.5; 4]);
    }

    #[test]
    fn rejects_mismatched_shapes() {
        let net = DenseNetwork::zeros(&[3, 2], OutputActivation::None).unwrap();
        assert!(net.forward(&[1.0]).is_err());
        assert!(DenseNetwork::new(vec![Dense::zeros(2, 3), Dense::zeros(4, 1)], OutputActivation::None).is_err());
        assert!(DenseNetwork::zeros(&[2, 3], OutputActivation::SoftmaxRows { group: 2 }).is_err());
        let (_, tape) = net.forward(&[0.0; 3]).unwrap();
        assert!(net.backward(tape, &[1.0]).is_err());
    }

    #[test]
    fn linear_layer_weight_gradient_is_outer_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let net = DenseNetwork::glorot(&[3, 2], OutputActivation::None, &mut rng).unwrap();
        let x = [0.5, -1.0, 2.0];
        let up = [0.3, -0.7];
        let (_, tape) = net.forward(&x).unwrap();
        let (g, dx) = net.backward(tape, &up).unwrap();
        let (gw, gb) = g.layer(0);
        for r in 0..2 {
            for c in 0..3 {
                assert_relative_eq!(gw[r * 3 + c], up[r] * x[c]);
            }
        }
        assert_eq!(gb, &up);
        let w = net.layers()[0].weights();
        for c in 0..3 {
            assert_relative_eq!(dx[c], up[0] * w[c] + up[1] * w[3 + c]);
        }
    }

    #[test]
    fn softmax_input_gradient_is_orthogonal_to_ones() {
        // identity layer feeding a softmax at a uniform point
        let layer = Dense::from_parts(3, 3, vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0], vec![0.0; 3]).unwrap();
        let net = DenseNetwork::new(vec![layer], OutputActivation::SoftmaxVector).unwrap();
        let (_, tape) = net.forward(&[0.2, 0.2, 0.2]).unwrap();
        let (_, dx) = net.backward(tape, &[1.0, -2.0, 0.5]).unwrap();
        assert!(dx.iter().sum::<f64>().abs() < 1e-15);
    }

    #[test]
    fn sgd_examples() {
        let mut net = DenseNetwork::new(
            vec![Dense::from_parts(1, 1, vec![1.0], vec![1.0]).unwrap()],
            OutputActivation::None,
        )
        .unwrap();
        let (tape_out, tape) = net.forward(&[1.0]).unwrap();
        assert_eq!(tape_out, vec![2.0]);
        // d(out)/dw = x = 1, d(out)/db = 1
        let (g, _) = net.backward(tape, &[1.0]).unwrap();
        let before = net.clone();
        net.sgd_step(&g, 0.0).unwrap();
        assert_eq!(net, before);
        net.sgd_step(&g, 0.001).unwrap();
        assert_relative_eq!(net.layers()[0].weights()[0], 0.999);

        let mut twice = before.clone();
        twice.sgd_step(&g, 0.01).unwrap();
        twice.sgd_step(&g, 0.01).unwrap();
        let mut once = before.clone();
        once.sgd_step(&g, 0.02).unwrap();
        assert_relative_eq!(twice.params_flat()[0], once.params_flat()[0], epsilon = 1e-15);

        let other = DenseNetwork::zeros(&[2, 1], OutputActivation::None).unwrap();
        assert!(net.sgd_step(&other.zero_gradients(), 0.1).is_err());
    }

    #[test]
    fn forward_is_bit_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let net = DenseNetwork::glorot(&[4, 8, 6], OutputActivation::SoftmaxRows { group: 3 }, &mut rng).unwrap();
        let x = [0.1, 0.2, -0.3, 0.9];
        assert_eq!(net.predict(&x).unwrap(), net.predict(&x).unwrap());
        assert_eq!(net.forward(&x).unwrap().0, net.predict(&x).unwrap());
    }

    #[test]
    fn flat_params_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut net = DenseNetwork::glorot(&[3, 4, 2], OutputActivation::None, &mut rng).unwrap();
        let p = net.params_flat();
        assert_eq!(p.len(), net.param_count());
        let shifted: Vec<f64> = p.iter().map(|v| v + 1.0).collect();
        net.set_params_flat(&shifted).unwrap();
        assert_eq!(net.params_flat(), shifted);
        assert!(net.set_params_flat(&p[1..]).is_err());
    }
}
