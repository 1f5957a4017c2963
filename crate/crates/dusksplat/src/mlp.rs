//! Minimal fully-connected network: forward evaluation with cached
//! activations, exact backward pass, and Adam updates. This is the substrate
//! for the four color-model networks; it is not a general autodiff graph.

use nalgebra::{DMatrix, DVector, Vector3};

use crate::error::{Error, Result};
use crate::math::{d_softplus, sigmoid, softplus};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Number of sin/cos frequency octaves in `positional_encoding`.
pub const ENCODING_FREQS: usize = 6;
/// Output length of `positional_encoding` for a 3-vector.
pub const ENCODING_DIM: usize = 3 + 2 * 3 * ENCODING_FREQS;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Sigmoid,
    Softplus,
    Linear,
}

impl Activation {
    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Sigmoid => sigmoid(z),
            Activation::Softplus => softplus(z),
            Activation::Linear => z,
        }
    }

    /// Derivative at pre-activation z.
    #[inline]
    fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Sigmoid => {
                let s = sigmoid(z);
                s * (1.0 - s)
            }
            Activation::Softplus => d_softplus(z),
            Activation::Linear => 1.0,
        }
    }

    pub fn tag(self) -> u8 {
        match self {
            Activation::Relu => 0,
            Activation::Sigmoid => 1,
            Activation::Softplus => 2,
            Activation::Linear => 3,
        }
    }

    pub fn from_tag(tag: u8) -> Result<Self> {
        Ok(match tag {
            0 => Activation::Relu,
            1 => Activation::Sigmoid,
            2 => Activation::Softplus,
            3 => Activation::Linear,
            other => {
                return Err(Error::InvalidParameter(format!(
                    "unknown activation tag {other}"
                )))
            }
        })
    }
}

#[derive(Debug, Clone)]
pub struct Layer {
    /// out×in weight matrix.
    pub weight: DMatrix<f64>,
    pub bias: DVector<f64>,
    pub activation: Activation,
}

#[derive(Debug, Clone)]
pub struct MlpParams {
    pub layers: Vec<Layer>,
}

impl MlpParams {
    /// Weights uniform in ±1/sqrt(fan_in), biases zero.
    pub fn init<R: rand::Rng>(spec: &[(usize, usize, Activation)], rng: &mut R) -> Self {
        let layers = spec
            .iter()
            .map(|&(fan_in, fan_out, activation)| {
                let bound = 1.0 / (fan_in as f64).sqrt();
                Layer {
                    weight: DMatrix::from_fn(fan_out, fan_in, |_, _| {
                        rng.random_range(-bound..bound)
                    }),
                    bias: DVector::zeros(fan_out),
                    activation,
                }
            })
            .collect();
        let params = Self { layers };
        debug_assert!(params.dims_chain());
        params
    }

    pub fn input_dim(&self) -> usize {
        self.layers.first().map_or(0, |l| l.weight.ncols())
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.weight.nrows())
    }

    /// Consecutive layer dimensions chain (in_{i+1} = out_i).
    pub fn dims_chain(&self) -> bool {
        self.layers
            .windows(2)
            .all(|w| w[1].weight.ncols() == w[0].weight.nrows())
            && self.layers.iter().all(|l| l.bias.len() == l.weight.nrows())
    }

    pub fn all_finite(&self) -> bool {
        self.layers.iter().all(|l| {
            l.weight.iter().all(|v| v.is_finite()) && l.bias.iter().all(|v| v.is_finite())
        })
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.len() + l.bias.len())
            .sum()
    }
}

/// Per-layer inputs and pre-activations recorded by `mlp_forward`.
#[derive(Debug, Clone)]
pub struct MlpCache {
    pub inputs: Vec<DVector<f64>>,
    pub pre_activations: Vec<DVector<f64>>,
}

/// Gradient buffers shaped like `MlpParams`.
#[derive(Debug, Clone)]
pub struct MlpGrads {
    pub weights: Vec<DMatrix<f64>>,
    pub biases: Vec<DVector<f64>>,
}

impl MlpGrads {
    pub fn zeros_like(params: &MlpParams) -> Self {
        Self {
            weights: params
                .layers
                .iter()
                .map(|l| DMatrix::zeros(l.weight.nrows(), l.weight.ncols()))
                .collect(),
            biases: params
                .layers
                .iter()
                .map(|l| DVector::zeros(l.bias.len()))
                .collect(),
        }
    }

    pub fn accumulate(&mut self, other: &MlpGrads) {
        for (a, b) in self.weights.iter_mut().zip(&other.weights) {
            *a += b;
        }
        for (a, b) in self.biases.iter_mut().zip(&other.biases) {
            *a += b;
        }
    }
}

pub fn mlp_forward(params: &MlpParams, input: &DVector<f64>) -> Result<(DVector<f64>, MlpCache)> {
    if input.len() != params.input_dim() {
        return Err(Error::InvalidParameter(format!(
            "mlp input length {} does not match first layer width {}",
            input.len(),
            params.input_dim()
        )));
    }
    let mut inputs = Vec::with_capacity(params.layers.len());
    let mut pre_activations = Vec::with_capacity(params.layers.len());
    let mut x = input.clone();
    for layer in &params.layers {
        let z = &layer.weight * &x + &layer.bias;
        let a = z.map(|v| layer.activation.apply(v));
        inputs.push(x);
        pre_activations.push(z);
        x = a;
    }
    Ok((
        x,
        MlpCache {
            inputs,
            pre_activations,
        },
    ))
}

/// Exact gradients of `mlp_forward` given the cache from a matching call.
/// Returns (parameter gradients, input gradient).
pub fn mlp_backward(
    params: &MlpParams,
    cache: &MlpCache,
    upstream: &DVector<f64>,
) -> Result<(MlpGrads, DVector<f64>)> {
    if cache.inputs.len() != params.layers.len() {
        return Err(Error::InvalidState(
            "mlp cache layer count does not match parameters".into(),
        ));
    }
    if upstream.len() != params.output_dim() {
        return Err(Error::InvalidState(format!(
            "upstream length {} does not match output width {}",
            upstream.len(),
            params.output_dim()
        )));
    }
    let mut grads = MlpGrads::zeros_like(params);
    let mut da = upstream.clone();
    for (i, layer) in params.layers.iter().enumerate().rev() {
        let z = &cache.pre_activations[i];
        let x = &cache.inputs[i];
        if z.len() != layer.bias.len() || x.len() != layer.weight.ncols() {
            return Err(Error::InvalidState(
                "mlp cache shape does not match parameters".into(),
            ));
        }
        let dz = DVector::from_fn(z.len(), |r, _| da[r] * layer.activation.derivative(z[r]));
        grads.weights[i] = &dz * x.transpose();
        grads.biases[i] = dz.clone();
        da = layer.weight.transpose() * dz;
    }
    Ok((grads, da))
}

/// Adam moments for one flat parameter tensor.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
    pub lr: f64,
    /// Updates skipped because a gradient was non-finite.
    pub skipped: u64,
}

impl AdamState {
    pub fn new(len: usize, lr: f64) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
            lr,
            skipped: 0,
        }
    }

    /// Rebuild moment buffers after cloud surgery. `map[i]` names the old slot
    /// backing new slot i, or None for freshly created parameters.
    pub fn remap(&mut self, map: &[Option<usize>], stride: usize) {
        let mut m = vec![0.0; map.len() * stride];
        let mut v = vec![0.0; map.len() * stride];
        for (new, old) in map.iter().enumerate() {
            if let Some(old) = old {
                for k in 0..stride {
                    m[new * stride + k] = self.m[old * stride + k];
                    v[new * stride + k] = self.v[old * stride + k];
                }
            }
        }
        self.m = m;
        self.v = v;
    }
}

/// One Adam update with bias correction. A non-finite gradient anywhere in
/// the tensor skips the whole update and bumps the skip counter.
pub fn adam_step(params: &mut [f64], grads: &[f64], state: &mut AdamState) {
    assert_eq!(params.len(), grads.len(), "adam shape mismatch");
    assert_eq!(params.len(), state.m.len(), "adam state shape mismatch");
    if grads.iter().any(|g| !g.is_finite()) {
        state.skipped += 1;
        log::warn!("adam: skipping update for tensor with non-finite gradient");
        return;
    }
    state.step += 1;
    let t = state.step as f64;
    let bc1 = 1.0 - ADAM_BETA1.powf(t);
    let bc2 = 1.0 - ADAM_BETA2.powf(t);
    for i in 0..params.len() {
        state.m[i] = ADAM_BETA1 * state.m[i] + (1.0 - ADAM_BETA1) * grads[i];
        state.v[i] = ADAM_BETA2 * state.v[i] + (1.0 - ADAM_BETA2) * grads[i] * grads[i];
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        params[i] -= state.lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
    }
}

/// Adam moments for every tensor of an MLP (weights and biases separately).
#[derive(Debug, Clone)]
pub struct MlpAdam {
    pub weights: Vec<AdamState>,
    pub biases: Vec<AdamState>,
}

impl MlpAdam {
    pub fn new(params: &MlpParams, lr: f64) -> Self {
        Self {
            weights: params
                .layers
                .iter()
                .map(|l| AdamState::new(l.weight.len(), lr))
                .collect(),
            biases: params
                .layers
                .iter()
                .map(|l| AdamState::new(l.bias.len(), lr))
                .collect(),
        }
    }

    pub fn step(&mut self, params: &mut MlpParams, grads: &MlpGrads) {
        for (i, layer) in params.layers.iter_mut().enumerate() {
            adam_step(
                layer.weight.as_mut_slice(),
                grads.weights[i].as_slice(),
                &mut self.weights[i],
            );
            adam_step(
                layer.bias.as_mut_slice(),
                grads.biases[i].as_slice(),
                &mut self.biases[i],
            );
        }
    }

    pub fn skipped(&self) -> u64 {
        self.weights.iter().chain(&self.biases).map(|s| s.skipped).sum()
    }
}

/// Concatenates p with sin/cos of p at frequencies 2^0..2^(L-1) per axis.
pub fn positional_encoding(p: &Vector3<f64>) -> DVector<f64> {
    let mut out = DVector::zeros(ENCODING_DIM);
    out[0] = p[0];
    out[1] = p[1];
    out[2] = p[2];
    let mut idx = 3;
    for k in 0..ENCODING_FREQS {
        let f = (1u64 << k) as f64;
        for a in 0..3 {
            out[idx] = (f * p[a]).sin();
            out[idx + 1] = (f * p[a]).cos();
            idx += 2;
        }
    }
    out
}

/// Maps dL/d(encoding) back to dL/dp.
pub fn positional_encoding_backward(p: &Vector3<f64>, upstream: &DVector<f64>) -> Vector3<f64> {
    assert_eq!(upstream.len(), ENCODING_DIM);
    let mut dp = Vector3::new(upstream[0], upstream[1], upstream[2]);
    let mut idx = 3;
    for k in 0..ENCODING_FREQS {
        let f = (1u64 << k) as f64;
        for a in 0..3 {
            dp[a] += upstream[idx] * f * (f * p[a]).cos();
            dp[a] -= upstream[idx + 1] * f * (f * p[a]).sin();
            idx += 2;
        }
    }
    dp
}
