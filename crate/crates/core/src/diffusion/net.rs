//! Fully connected epsilon-prediction network with hand-written
//! backpropagation and an Adam optimizer.
//!
//! The network is small enough (three 128-unit hidden layers) that layer-local
//! forward/backward passes keep the crate free of an autodiff dependency.

use rand::Rng;
use rand_distr::StandardNormal;

/// One dense layer, weights stored row-major `[out][in]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Linear {
    fn init(in_dim: usize, out_dim: usize, rng: &mut impl Rng) -> Self {
        // He initialization keeps SiLU activations in range.
        let scale = (2.0 / in_dim as f64).sqrt();
        let weight = (0..in_dim * out_dim)
            .map(|_| rng.sample::<f64, _>(StandardNormal) * scale)
            .collect();
        Self {
            in_dim,
            out_dim,
            weight,
            bias: vec![0.0; out_dim],
        }
    }

    fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Self {
            in_dim,
            out_dim,
            weight: vec![0.0; in_dim * out_dim],
            bias: vec![0.0; out_dim],
        }
    }

    fn forward(&self, x: &[f64], out: &mut Vec<f64>) {
        out.clear();
        for o in 0..self.out_dim {
            let row = &self.weight[o * self.in_dim..(o + 1) * self.in_dim];
            let mut acc = self.bias[o];
            for (w, xi) in row.iter().zip(x.iter()) {
                acc += w * xi;
            }
            out.push(acc);
        }
    }
}

fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

fn silu_grad(x: f64) -> f64 {
    let s = 1.0 / (1.0 + (-x).exp());
    s * (1.0 + x * (1.0 - s))
}

/// Multilayer perceptron: `dims[0] -> ... -> dims.last()`, SiLU between
/// layers, linear output.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    pub fn init(dims: &[usize], rng: &mut impl Rng) -> Self {
        assert!(dims.len() >= 2);
        let layers = dims
            .windows(2)
            .map(|w| Linear::init(w[0], w[1], rng))
            .collect();
        Self { layers }
    }

    /// All-zero network; predicts zero everywhere (used by tests).
    pub fn zeros(dims: &[usize]) -> Self {
        let layers = dims.windows(2).map(|w| Linear::zeros(w[0], w[1])).collect();
        Self { layers }
    }

    pub fn dims(&self) -> Vec<usize> {
        let mut dims = vec![self.layers[0].in_dim];
        dims.extend(self.layers.iter().map(|l| l.out_dim));
        dims
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().unwrap().out_dim
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.len() + l.bias.len())
            .sum()
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.in_dim());
        let mut cur = x.to_vec();
        let mut next = Vec::new();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            layer.forward(&cur, &mut next);
            if i != last {
                for v in next.iter_mut() {
                    *v = silu(*v);
                }
            }
            std::mem::swap(&mut cur, &mut next);
        }
        cur
    }

    /// Forward pass keeping pre-activations for the backward pass.
    fn forward_cached(&self, x: &[f64]) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut cur = x.to_vec();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            inputs.push(cur.clone());
            let mut z = Vec::new();
            layer.forward(&cur, &mut z);
            pre.push(z.clone());
            if i != last {
                for v in z.iter_mut() {
                    *v = silu(*v);
                }
            }
            cur = z;
        }
        inputs.push(cur); // final output
        (inputs, pre)
    }

    /// Accumulate parameter gradients for one sample into `grads`; returns
    /// nothing, the output-layer error `dout` is d(loss)/d(output).
    fn backward(&self, inputs: &[Vec<f64>], pre: &[Vec<f64>], dout: &[f64], grads: &mut Grads) {
        let mut delta = dout.to_vec();
        for (li, layer) in self.layers.iter().enumerate().rev() {
            if li != self.layers.len() - 1 {
                for (d, z) in delta.iter_mut().zip(pre[li].iter()) {
                    *d *= silu_grad(*z);
                }
            }
            let x = &inputs[li];
            let g = &mut grads.layers[li];
            for (o, &d) in delta.iter().enumerate() {
                g.bias[o] += d;
                let row = &mut g.weight[o * layer.in_dim..(o + 1) * layer.in_dim];
                for (gw, xi) in row.iter_mut().zip(x.iter()) {
                    *gw += d * xi;
                }
            }
            if li > 0 {
                let mut prev = vec![0.0; layer.in_dim];
                for (o, &d) in delta.iter().enumerate() {
                    let row = &layer.weight[o * layer.in_dim..(o + 1) * layer.in_dim];
                    for (p, w) in prev.iter_mut().zip(row.iter()) {
                        *p += d * w;
                    }
                }
                delta = prev;
            }
        }
    }
}

/// Gradient accumulator shaped like an [`Mlp`].
pub struct Grads {
    layers: Vec<Linear>,
}

impl Grads {
    pub fn zeros_like(net: &Mlp) -> Self {
        Self {
            layers: net
                .layers
                .iter()
                .map(|l| Linear::zeros(l.in_dim, l.out_dim))
                .collect(),
        }
    }

    pub fn reset(&mut self) {
        for l in self.layers.iter_mut() {
            l.weight.iter_mut().for_each(|v| *v = 0.0);
            l.bias.iter_mut().for_each(|v| *v = 0.0);
        }
    }
}

/// Adam state and update.
///
/// Per parameter w with gradient g:
///   m <- b1*m + (1-b1)*g
///   v <- b2*v + (1-b2)*g^2
///   w <- w - lr * (m / (1-b1^s)) / (sqrt(v / (1-b2^s)) + eps)
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: u64,
    m: Vec<Linear>,
    v: Vec<Linear>,
}

impl Adam {
    pub fn new(net: &Mlp, lr: f64) -> Self {
        let zeros = || -> Vec<Linear> {
            net.layers
                .iter()
                .map(|l| Linear::zeros(l.in_dim, l.out_dim))
                .collect()
        };
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn apply(&mut self, net: &mut Mlp, grads: &Grads) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (li, layer) in net.layers.iter_mut().enumerate() {
            let g = &grads.layers[li];
            let m = &mut self.m[li];
            let v = &mut self.v[li];
            for i in 0..layer.weight.len() {
                let grad = g.weight[i];
                m.weight[i] = self.beta1 * m.weight[i] + (1.0 - self.beta1) * grad;
                v.weight[i] = self.beta2 * v.weight[i] + (1.0 - self.beta2) * grad * grad;
                layer.weight[i] -=
                    self.lr * (m.weight[i] / bc1) / ((v.weight[i] / bc2).sqrt() + self.eps);
            }
            for i in 0..layer.bias.len() {
                let grad = g.bias[i];
                m.bias[i] = self.beta1 * m.bias[i] + (1.0 - self.beta1) * grad;
                v.bias[i] = self.beta2 * v.bias[i] + (1.0 - self.beta2) * grad * grad;
                layer.bias[i] -=
                    self.lr * (m.bias[i] / bc1) / ((v.bias[i] / bc2).sqrt() + self.eps);
            }
        }
    }
}

/// One training step on a batch of (input, target) pairs with squared-error
/// loss averaged over coordinates and batch. Returns the batch loss.
pub fn sgd_batch(
    net: &mut Mlp,
    adam: &mut Adam,
    grads: &mut Grads,
    batch: &[(Vec<f64>, Vec<f64>)],
) -> f64 {
    grads.reset();
    let mut loss = 0.0;
    let denom = (batch.len() * net.out_dim()) as f64;
    for (input, target) in batch {
        let (inputs, pre) = net.forward_cached(input);
        let out = inputs.last().unwrap();
        let mut dout = vec![0.0; out.len()];
        for i in 0..out.len() {
            let err = out[i] - target[i];
            loss += err * err;
            dout[i] = 2.0 * err / denom;
        }
        net.backward(&inputs, &pre, &dout, grads);
    }
    adam.apply(net, grads);
    loss / denom
}
