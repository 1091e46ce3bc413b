//! Small dense networks with hand-written backpropagation, Adam and a running
//! observation normalizer.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
    Relu,
    Identity,
}

impl Activation {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Relu => x.max(0.0),
            Activation::Identity => x,
        }
    }

    /// Derivative expressed through the activation's output `y`.
    #[inline]
    fn derivative_at_output(self, y: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - y * y,
            Activation::Relu => {
                if y > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }
}

/// Feed-forward network. Parameters live in one flat vector, layer by layer,
/// each layer as a row-major `out x in` weight matrix followed by its bias.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    sizes: Vec<usize>,
    hidden: Activation,
    output: Activation,
    params: Vec<f64>,
}

/// Post-activation values of every layer, input first.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    activations: Vec<Vec<f64>>,
}

impl ForwardCache {
    pub fn output(&self) -> &[f64] {
        self.activations.last().expect("cache holds at least the input")
    }
}

fn param_count(sizes: &[usize]) -> usize {
    sizes.windows(2).map(|w| w[1] * (w[0] + 1)).sum()
}

impl Mlp {
    /// Uniform `±1/sqrt(fan_in)` initialization for weights and biases.
    pub fn new(sizes: &[usize], hidden: Activation, output: Activation, rng: &mut impl Rng) -> Self {
        assert!(sizes.len() >= 2, "an MLP needs input and output sizes");
        let mut params = Vec::with_capacity(param_count(sizes));
        for w in sizes.windows(2) {
            let bound = 1.0 / (w[0].max(1) as f64).sqrt();
            for _ in 0..w[1] * (w[0] + 1) {
                params.push(rng.random_range(-bound..=bound));
            }
        }
        Mlp {
            sizes: sizes.to_vec(),
            hidden,
            output,
            params,
        }
    }

    pub fn zeros(sizes: &[usize], hidden: Activation, output: Activation) -> Self {
        Mlp {
            sizes: sizes.to_vec(),
            hidden,
            output,
            params: vec![0.0; param_count(sizes)],
        }
    }

    pub fn from_params(sizes: &[usize], hidden: Activation, output: Activation, params: Vec<f64>) -> Result<Self> {
        let expected = param_count(sizes);
        if params.len() != expected {
            return Err(Error::Dimension {
                what: "network parameters",
                expected,
                got: params.len(),
            });
        }
        Ok(Mlp {
            sizes: sizes.to_vec(),
            hidden,
            output,
            params,
        })
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn is_finite(&self) -> bool {
        self.params.iter().all(|p| p.is_finite())
    }

    /// Multiplies the last layer's weights and biases by `factor`.
    pub fn scale_output_layer(&mut self, factor: f64) {
        let n = self.sizes.len();
        let last = self.sizes[n - 1] * (self.sizes[n - 2] + 1);
        let len = self.params.len();
        self.params[len - last..].iter_mut().for_each(|p| *p *= factor);
    }

    fn activation(&self, layer: usize) -> Activation {
        if layer + 2 == self.sizes.len() {
            self.output
        } else {
            self.hidden
        }
    }

    fn check_input(&self, len: usize) -> Result<()> {
        if len != self.input_dim() {
            return Err(Error::Dimension {
                what: "network input",
                expected: self.input_dim(),
                got: len,
            });
        }
        Ok(())
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward_cached(x)?.activations.pop().unwrap())
    }

    pub fn forward_cached(&self, x: &[f64]) -> Result<ForwardCache> {
        self.check_input(x.len())?;
        let mut activations = Vec::with_capacity(self.sizes.len());
        activations.push(x.to_vec());
        let mut offset = 0;
        for l in 0..self.sizes.len() - 1 {
            let (n_in, n_out) = (self.sizes[l], self.sizes[l + 1]);
            let w = &self.params[offset..offset + n_out * n_in];
            let b = &self.params[offset + n_out * n_in..offset + n_out * (n_in + 1)];
            let act = self.activation(l);
            let input = activations.last().unwrap();
            let out: Vec<f64> = (0..n_out)
                .map(|o| {
                    let row = &w[o * n_in..(o + 1) * n_in];
                    let z = b[o] + row.iter().zip(input).map(|(a, b)| a * b).sum::<f64>();
                    act.apply(z)
                })
                .collect();
            activations.push(out);
            offset += n_out * (n_in + 1);
        }
        Ok(ForwardCache { activations })
    }

    /// Evaluates `n` row-major inputs at once with a blocked matrix product.
    pub fn forward_batch(&self, x: &[f64], n: usize) -> Result<Vec<f64>> {
        if x.len() != n * self.input_dim() {
            return Err(Error::Dimension {
                what: "batched network input",
                expected: n * self.input_dim(),
                got: x.len(),
            });
        }
        let mut current = x.to_vec();
        let mut offset = 0;
        for l in 0..self.sizes.len() - 1 {
            let (n_in, n_out) = (self.sizes[l], self.sizes[l + 1]);
            let w = &self.params[offset..offset + n_out * n_in];
            let b = &self.params[offset + n_out * n_in..offset + n_out * (n_in + 1)];
            let mut next = vec![0.0; n * n_out];
            for row in next.chunks_exact_mut(n_out) {
                row.copy_from_slice(b);
            }
            // next (n x out) += current (n x in) * W^T (in x out)
            unsafe {
                matrixmultiply::dgemm(
                    n,
                    n_in,
                    n_out,
                    1.0,
                    current.as_ptr(),
                    n_in as isize,
                    1,
                    w.as_ptr(),
                    1,
                    n_in as isize,
                    1.0,
                    next.as_mut_ptr(),
                    n_out as isize,
                    1,
                );
            }
            let act = self.activation(l);
            if act != Activation::Identity {
                next.iter_mut().for_each(|v| *v = act.apply(*v));
            }
            current = next;
            offset += n_out * (n_in + 1);
        }
        Ok(current)
    }

    /// Backpropagates `grad_out` (dL/d output) through a cached forward pass,
    /// adding dL/d params into `grad` and returning dL/d input.
    pub fn backward(&self, cache: &ForwardCache, grad_out: &[f64], grad: &mut [f64]) -> Vec<f64> {
        debug_assert_eq!(grad.len(), self.params.len());
        let n_layers = self.sizes.len() - 1;
        let mut offsets = Vec::with_capacity(n_layers);
        let mut off = 0;
        for l in 0..n_layers {
            offsets.push(off);
            off += self.sizes[l + 1] * (self.sizes[l] + 1);
        }
        let mut delta: Vec<f64> = grad_out
            .iter()
            .zip(cache.output())
            .map(|(g, y)| g * self.output.derivative_at_output(*y))
            .collect();
        for l in (0..n_layers).rev() {
            let (n_in, n_out) = (self.sizes[l], self.sizes[l + 1]);
            let o = offsets[l];
            let input = &cache.activations[l];
            let w = &self.params[o..o + n_out * n_in];
            let (gw, gb) = grad[o..o + n_out * (n_in + 1)].split_at_mut(n_out * n_in);
            let mut prev = vec![0.0; n_in];
            for (j, &d) in delta.iter().enumerate() {
                if d == 0.0 {
                    continue;
                }
                gb[j] += d;
                let row = &w[j * n_in..(j + 1) * n_in];
                let grow = &mut gw[j * n_in..(j + 1) * n_in];
                for i in 0..n_in {
                    grow[i] += d * input[i];
                    prev[i] += d * row[i];
                }
            }
            if l > 0 {
                let act = self.hidden;
                for (p, y) in prev.iter_mut().zip(input) {
                    *p *= act.derivative_at_output(*y);
                }
            }
            delta = prev;
        }
        delta
    }

    /// `target <- tau * online + (1 - tau) * target`.
    pub fn soft_update_from(&mut self, online: &Mlp, tau: f64) {
        for (t, o) in self.params.iter_mut().zip(&online.params) {
            *t = tau * o + (1.0 - tau) * *t;
        }
    }

    pub fn copy_from(&mut self, online: &Mlp) {
        self.params.copy_from_slice(&online.params);
    }
}

/// Adam with bias correction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Adam {
    pub fn new(n_params: usize, lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Descends along `grad`.
    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grad[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
            let m_hat = self.m[i] / c1;
            let v_hat = self.v[i] / c2;
            params[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
    }
}

/// Rescales `grad` in place so its Euclidean norm is at most `max_norm`.
pub fn clip_grad_norm(grad: &mut [f64], max_norm: f64) -> f64 {
    let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        grad.iter_mut().for_each(|g| *g *= s);
    }
    norm
}

/// Per-coordinate running mean and variance (Welford), applied as a
/// clipped z-score. Updates stop once frozen.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunningNorm {
    count: f64,
    mean: Vec<f64>,
    m2: Vec<f64>,
    frozen: bool,
    clip: f64,
}

impl RunningNorm {
    pub fn new(dim: usize) -> Self {
        RunningNorm {
            count: 0.0,
            mean: vec![0.0; dim],
            m2: vec![0.0; dim],
            frozen: false,
            clip: 10.0,
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn unfreeze(&mut self) {
        self.frozen = false;
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn update(&mut self, x: &[f64]) {
        if self.frozen {
            return;
        }
        self.count += 1.0;
        for i in 0..x.len() {
            let d = x[i] - self.mean[i];
            self.mean[i] += d / self.count;
            self.m2[i] += d * (x[i] - self.mean[i]);
        }
    }

    pub fn normalize_into(&self, x: &[f64], out: &mut [f64]) {
        for i in 0..x.len() {
            let var = if self.count > 1.0 {
                self.m2[i] / (self.count - 1.0)
            } else {
                1.0
            };
            let z = (x[i] - self.mean[i]) / (var + 1e-8).sqrt();
            out[i] = z.clamp(-self.clip, self.clip);
        }
    }

    pub fn normalize(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; x.len()];
        self.normalize_into(x, &mut out);
        out
    }
}
