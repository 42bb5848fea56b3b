//! Small fully connected networks with smooth activations and exact backprop.
//!
//! Parameters are stored flat, layer by layer: the `out x in` weight matrix
//! (row-major) followed by the `out` biases. Hidden layers use the configured
//! activation; the output head is linear.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Flat parameter vector with the layer sizes of the network it belongs to.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamVector {
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

impl ParamVector {
    pub fn zeros(shape: &[usize]) -> Self {
        ParamVector {
            shape: shape.to_vec(),
            values: vec![0.0; param_count(shape)],
        }
    }

    pub fn from_values(shape: &[usize], values: Vec<f64>) -> Result<Self> {
        let expected = param_count(shape);
        if values.len() != expected {
            return Err(Error::ShapeMismatch {
                expected,
                got: values.len(),
            });
        }
        Ok(ParamVector {
            shape: shape.to_vec(),
            values,
        })
    }

    /// Plain vector not tied to a network layout (empty shape).
    pub fn flat(values: Vec<f64>) -> Self {
        ParamVector {
            shape: Vec::new(),
            values,
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn norm_sq(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum()
    }

    pub fn norm(&self) -> f64 {
        self.norm_sq().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// `self += alpha * other`.
    pub fn axpy(&mut self, alpha: f64, other: &ParamVector) {
        debug_assert_eq!(self.len(), other.len());
        for (x, y) in self.values.iter_mut().zip(&other.values) {
            *x += alpha * y;
        }
    }

    pub fn scale(&mut self, alpha: f64) {
        for x in &mut self.values {
            *x *= alpha;
        }
    }

    pub fn sub(&self, other: &ParamVector) -> ParamVector {
        ParamVector {
            shape: self.shape.clone(),
            values: self
                .values
                .iter()
                .zip(&other.values)
                .map(|(a, b)| a - b)
                .collect(),
        }
    }

    pub fn distance(&self, other: &ParamVector) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }

    /// Projects onto the ball of radius `bound`. Returns whether it had to.
    pub fn clamp_norm(&mut self, bound: f64) -> bool {
        let n = self.norm();
        if n > bound {
            self.scale(bound / n);
            true
        } else {
            false
        }
    }
}

pub fn param_count(shape: &[usize]) -> usize {
    shape.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
    Softplus,
}

impl Activation {
    #[inline]
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Softplus => {
                if x > 30.0 {
                    x + (-x).exp().ln_1p()
                } else {
                    x.exp().ln_1p()
                }
            }
        }
    }

    /// Derivative at pre-activation `x` given the activation value `y`.
    #[inline]
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - y * y,
            Activation::Softplus => 1.0 / (1.0 + (-x).exp()),
        }
    }
}

/// Multi-layer perceptron description. Holds no parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Network {
    sizes: Vec<usize>,
    activation: Activation,
}

/// Intermediate values of a forward pass, reused by [`Network::accumulate_backward`].
#[derive(Clone, Debug)]
pub struct ForwardTrace {
    /// Layer inputs: `acts[0]` is the network input, `acts[l]` the output of layer `l`.
    acts: Vec<Vec<f64>>,
    pre: Vec<Vec<f64>>,
}

impl ForwardTrace {
    pub fn output(&self) -> &[f64] {
        self.acts.last().expect("trace has an output")
    }
}

impl Network {
    pub fn new(sizes: &[usize], activation: Activation) -> Result<Self> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(Error::Config(format!("invalid layer sizes {sizes:?}")));
        }
        Ok(Network {
            sizes: sizes.to_vec(),
            activation,
        })
    }

    /// `input -> hidden... -> output` with the given hidden widths.
    pub fn mlp(input: usize, hidden: &[usize], output: usize, activation: Activation) -> Result<Self> {
        let mut sizes = vec![input];
        sizes.extend_from_slice(hidden);
        sizes.push(output);
        Network::new(&sizes, activation)
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    pub fn num_params(&self) -> usize {
        param_count(&self.sizes)
    }

    pub fn zeros(&self) -> ParamVector {
        ParamVector::zeros(&self.sizes)
    }

    /// Every parameter drawn uniformly from `[-scale, scale]`.
    pub fn init_uniform<R: Rng + ?Sized>(&self, rng: &mut R, scale: f64) -> ParamVector {
        let values = (0..self.num_params())
            .map(|_| rng.random_range(-scale..=scale))
            .collect();
        ParamVector {
            shape: self.sizes.clone(),
            values,
        }
    }

    fn check(&self, params: &ParamVector, input: &[f64]) -> Result<()> {
        if params.len() != self.num_params() {
            return Err(Error::ShapeMismatch {
                expected: self.num_params(),
                got: params.len(),
            });
        }
        if input.len() != self.input_dim() {
            return Err(Error::ShapeMismatch {
                expected: self.input_dim(),
                got: input.len(),
            });
        }
        Ok(())
    }

    pub fn forward(&self, params: &ParamVector, input: &[f64]) -> Result<Vec<f64>> {
        self.check(params, input)?;
        Ok(self.trace(&params.values, input).acts.pop().unwrap())
    }

    /// Gradient of `<output, cotangent>` with respect to the parameters.
    pub fn backward(
        &self,
        params: &ParamVector,
        input: &[f64],
        cotangent: &[f64],
    ) -> Result<ParamVector> {
        self.check(params, input)?;
        if cotangent.len() != self.output_dim() {
            return Err(Error::ShapeMismatch {
                expected: self.output_dim(),
                got: cotangent.len(),
            });
        }
        let trace = self.trace(&params.values, input);
        let mut grad = self.zeros();
        self.accumulate_backward(&params.values, &trace, cotangent, &mut grad.values);
        Ok(grad)
    }

    /// Unchecked forward pass keeping intermediates. Zero inputs are skipped,
    /// which makes one-hot encodings cheap.
    pub fn trace(&self, params: &[f64], input: &[f64]) -> ForwardTrace {
        let depth = self.sizes.len() - 1;
        let mut acts = Vec::with_capacity(depth + 1);
        let mut pre = Vec::with_capacity(depth);
        acts.push(input.to_vec());
        let mut offset = 0;
        for l in 0..depth {
            let (n_in, n_out) = (self.sizes[l], self.sizes[l + 1]);
            let w = &params[offset..offset + n_in * n_out];
            let b = &params[offset + n_in * n_out..offset + n_in * n_out + n_out];
            offset += n_in * n_out + n_out;
            let x = &acts[l];
            let mut z = b.to_vec();
            for (j, &xj) in x.iter().enumerate() {
                if xj != 0.0 {
                    for (i, zi) in z.iter_mut().enumerate() {
                        *zi += w[i * n_in + j] * xj;
                    }
                }
            }
            let y = if l + 1 == depth {
                z.clone()
            } else {
                z.iter().map(|&v| self.activation.apply(v)).collect()
            };
            pre.push(z);
            acts.push(y);
        }
        ForwardTrace { acts, pre }
    }

    /// Adds the gradient of `<output, cotangent>` into `grad`.
    pub fn accumulate_backward(
        &self,
        params: &[f64],
        trace: &ForwardTrace,
        cotangent: &[f64],
        grad: &mut [f64],
    ) {
        let depth = self.sizes.len() - 1;
        let mut offsets = Vec::with_capacity(depth);
        let mut offset = 0;
        for l in 0..depth {
            offsets.push(offset);
            offset += self.sizes[l] * self.sizes[l + 1] + self.sizes[l + 1];
        }
        let mut delta = cotangent.to_vec();
        for l in (0..depth).rev() {
            let (n_in, n_out) = (self.sizes[l], self.sizes[l + 1]);
            if l + 1 != depth {
                for i in 0..n_out {
                    delta[i] *= self
                        .activation
                        .derivative(trace.pre[l][i], trace.acts[l + 1][i]);
                }
            }
            let off = offsets[l];
            let x = &trace.acts[l];
            {
                let gw = &mut grad[off..off + n_in * n_out];
                for (i, &d) in delta.iter().enumerate() {
                    if d != 0.0 {
                        let row = &mut gw[i * n_in..(i + 1) * n_in];
                        for (j, &xj) in x.iter().enumerate() {
                            if xj != 0.0 {
                                row[j] += d * xj;
                            }
                        }
                    }
                }
                let gb = &mut grad[off + n_in * n_out..off + n_in * n_out + n_out];
                for (g, d) in gb.iter_mut().zip(&delta) {
                    *g += d;
                }
            }
            if l > 0 {
                let w = &params[off..off + n_in * n_out];
                let mut prev = vec![0.0; n_in];
                for (i, &d) in delta.iter().enumerate() {
                    if d != 0.0 {
                        for (j, p) in prev.iter_mut().enumerate() {
                            *p += w[i * n_in + j] * d;
                        }
                    }
                }
                delta = prev;
            }
        }
    }
}

/// Central-difference gradient estimate.
pub fn finite_diff_gradient<F>(loss: F, params: &ParamVector, step: f64) -> ParamVector
where
    F: Fn(&ParamVector) -> f64,
{
    assert!(step > 0.0, "finite-difference step must be positive");
    let mut probe = params.clone();
    let mut grad = ParamVector {
        shape: params.shape.clone(),
        values: vec![0.0; params.len()],
    };
    for i in 0..params.len() {
        let x = params.values[i];
        probe.values[i] = x + step;
        let up = loss(&probe);
        probe.values[i] = x - step;
        let down = loss(&probe);
        probe.values[i] = x;
        grad.values[i] = (up - down) / (2.0 * step);
    }
    grad
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)`, zero when both vanish.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let scale = na.max(nb);
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}
