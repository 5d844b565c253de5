//! Fully connected conditioning network with tanh hidden activations and a
//! linear output layer, plus its hand-written backward pass.

use crate::numerics::{gemm, Rng};

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Dense {
    pub(crate) in_dim: usize,
    pub(crate) out_dim: usize,
    /// `in_dim × out_dim`, row-major, so a batch maps as `x · W + b`.
    pub(crate) weight: Vec<f64>,
    pub(crate) bias: Vec<f64>,
}

impl Dense {
    fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Self {
            in_dim,
            out_dim,
            weight: vec![0.0; in_dim * out_dim],
            bias: vec![0.0; out_dim],
        }
    }

    fn forward(&self, input: &[f64], batch: usize) -> Vec<f64> {
        let mut out = Vec::with_capacity(batch * self.out_dim);
        for _ in 0..batch {
            out.extend_from_slice(&self.bias);
        }
        gemm(
            batch,
            self.in_dim,
            self.out_dim,
            1.0,
            input,
            false,
            &self.weight,
            false,
            1.0,
            &mut out,
        );
        out
    }
}

/// MLP mapping `[passive coordinates, conditioner]` to `[log-scale, shift]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditioningNet {
    pub(crate) layers: Vec<Dense>,
}

/// Activations kept from a forward pass for backpropagation: the network
/// input followed by every hidden post-activation.
pub(crate) struct NetTape {
    pub(crate) activations: Vec<Vec<f64>>,
}

impl ConditioningNet {
    /// Hidden layers draw weights from `N(0, 1/fan_in)`; the output layer is
    /// zero so a fresh network emits zero scale and shift.
    pub(crate) fn new(widths: &[usize], rng: &mut Rng) -> Self {
        let n = widths.len() - 1;
        let layers = (0..n)
            .map(|i| {
                let mut layer = Dense::zeros(widths[i], widths[i + 1]);
                if i + 1 < n {
                    let std = (1.0 / widths[i].max(1) as f64).sqrt();
                    for w in &mut layer.weight {
                        *w = std * rng.standard_normal();
                    }
                }
                layer
            })
            .collect();
        Self { layers }
    }

    pub(crate) fn from_layers(layers: Vec<Dense>) -> Self {
        Self { layers }
    }

    /// Layer widths, input first.
    pub fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.layers[0].in_dim];
        w.extend(self.layers.iter().map(|l| l.out_dim));
        w
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.out_dim)
    }

    pub(crate) fn forward(&self, input: Vec<f64>, batch: usize, tape: Option<&mut NetTape>) -> Vec<f64> {
        let last = self.layers.len() - 1;
        let mut acts = Vec::new();
        let mut h = input;
        for (i, layer) in self.layers.iter().enumerate() {
            let mut z = layer.forward(&h, batch);
            if i < last {
                z.iter_mut().for_each(|v| *v = v.tanh());
            }
            acts.push(std::mem::replace(&mut h, z));
        }
        if let Some(tape) = tape {
            tape.activations = acts;
        }
        h
    }

    /// Accumulates parameter gradients into `grads` (weight, bias per layer)
    /// and returns the gradient with respect to the network input.
    pub(crate) fn backward(
        &self,
        tape: &NetTape,
        grad_out: Vec<f64>,
        batch: usize,
        grads: &mut [Vec<f64>],
    ) -> Vec<f64> {
        let mut g = grad_out;
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let input = &tape.activations[i];
            let (gw, rest) = grads[2 * i..].split_first_mut().expect("grad slot");
            let gb = &mut rest[0];
            gemm(
                layer.in_dim,
                batch,
                layer.out_dim,
                1.0,
                input,
                true,
                &g,
                false,
                1.0,
                gw,
            );
            for row in g.chunks_exact(layer.out_dim.max(1)).take(batch) {
                for (b, v) in gb.iter_mut().zip(row) {
                    *b += v;
                }
            }
            let mut g_in = vec![0.0; batch * layer.in_dim];
            gemm(
                batch,
                layer.out_dim,
                layer.in_dim,
                1.0,
                &g,
                false,
                &layer.weight,
                true,
                0.0,
                &mut g_in,
            );
            if i > 0 {
                // input to this layer is tanh output of the previous one
                for (gv, a) in g_in.iter_mut().zip(input) {
                    *gv *= 1.0 - a * a;
                }
            }
            g = g_in;
        }
        g
    }
}
