//! Fully-connected networks: parameter tuples, forward/backward passes,
//! empirical risk, gradients and the Hessian split `H = H⁽¹⁾ + H⁽²⁾`.
//!
//! Layers are numbered `1..=L` as in the usual math notation; layer `0` is
//! the input. The vectorization of a parameter tuple is layer-major and,
//! within each layer, the weight matrix row-major followed by the bias.
//! The first `upper_param_count()` coordinates therefore hold the
//! parameters of layers `1..L-1`.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::{
    self, central_diff_hessian, inertia_of, pairwise_sum, pairwise_sum_rows, pairwise_sum_vectors,
    sym_eigen, DenseMatrix, Inertia, NumericsError, FD_HESSIAN_STEP,
};

#[derive(Debug, Error)]
pub enum NetworkError {
    #[error("invalid network shape: {0}")]
    Shape(String),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("activation `{activation}` does not support {operation}")]
    Unsupported {
        activation: Activation,
        operation: &'static str,
    },
    #[error("unknown {kind} `{name}`")]
    UnknownName { kind: &'static str, name: String },
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

/// Layer widths `(m_0, …, m_L)` with `L ≥ 2`.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "Vec<usize>", into = "Vec<usize>")]
pub struct NetShape {
    widths: Vec<usize>,
}

impl TryFrom<Vec<usize>> for NetShape {
    type Error = NetworkError;
    fn try_from(widths: Vec<usize>) -> Result<Self, Self::Error> {
        NetShape::new(widths)
    }
}

impl From<NetShape> for Vec<usize> {
    fn from(s: NetShape) -> Self {
        s.widths
    }
}

impl fmt::Display for NetShape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.widths.iter().map(usize::to_string).collect();
        write!(f, "({})", parts.join(","))
    }
}

impl NetShape {
    pub fn new(widths: Vec<usize>) -> Result<Self, NetworkError> {
        if widths.len() < 3 {
            return Err(NetworkError::Shape(format!(
                "need at least 3 widths (L >= 2), got {}",
                widths.len()
            )));
        }
        if let Some(pos) = widths.iter().position(|&w| w == 0) {
            return Err(NetworkError::Shape(format!("width at layer {pos} is zero")));
        }
        Ok(NetShape { widths })
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    /// Width `m_l` of layer `l ∈ [0, L]`.
    pub fn width(&self, l: usize) -> usize {
        self.widths[l]
    }

    /// Number of weight layers `L`.
    pub fn depth(&self) -> usize {
        self.widths.len() - 1
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn output_dim(&self) -> usize {
        self.widths[self.depth()]
    }

    /// `(m_{l-1} + 1) m_l` for layer `l ∈ [1, L]`.
    pub fn layer_param_count(&self, l: usize) -> usize {
        (self.widths[l - 1] + 1) * self.widths[l]
    }

    /// Total parameter count `M`.
    pub fn param_count(&self) -> usize {
        (1..=self.depth()).map(|l| self.layer_param_count(l)).sum()
    }

    /// Parameter count of layers `1..L-1`, the leading block of the vectorization.
    pub fn upper_param_count(&self) -> usize {
        (1..self.depth()).map(|l| self.layer_param_count(l)).sum()
    }

    /// Offset of layer `l`'s block in the vectorization.
    pub fn layer_offset(&self, l: usize) -> usize {
        (1..l).map(|k| self.layer_param_count(k)).sum()
    }

    /// Vector index of `W^[l]_{ij}` (0-based `i`, `j`).
    pub fn weight_index(&self, l: usize, i: usize, j: usize) -> usize {
        self.layer_offset(l) + i * self.widths[l - 1] + j
    }

    /// Vector index of `b^[l]_i` (0-based `i`).
    pub fn bias_index(&self, l: usize, i: usize) -> usize {
        self.layer_offset(l) + self.widths[l] * self.widths[l - 1] + i
    }

    /// Number of hidden neurons `Σ_{l=1}^{L-1} m_l`.
    pub fn hidden_neurons(&self) -> usize {
        self.widths[1..self.depth()].iter().sum()
    }

    /// True when `wide` has the same depth, input and output widths and is
    /// at least as wide at every hidden layer.
    pub fn is_narrower_than(&self, wide: &NetShape) -> bool {
        self.widths.len() == wide.widths.len()
            && self.input_dim() == wide.input_dim()
            && self.output_dim() == wide.output_dim()
            && self.widths.iter().zip(&wide.widths).all(|(a, b)| a <= b)
    }
}

/// One layer `(W^[l], b^[l])`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    #[serde(rename = "W")]
    pub weight: DenseMatrix,
    #[serde(rename = "b")]
    pub bias: Vec<f64>,
}

/// The `2L`-tuple `(W^[1], b^[1], …, W^[L], b^[L])`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ParamTuple {
    layers: Vec<Layer>,
    #[serde(skip)]
    shape: NetShape,
}

impl ParamTuple {
    pub fn new(layers: Vec<Layer>) -> Result<Self, NetworkError> {
        let first = layers
            .first()
            .ok_or_else(|| NetworkError::Shape("no layers".into()))?;
        let mut widths = vec![first.weight.cols()];
        for (k, layer) in layers.iter().enumerate() {
            let prev = *widths.last().unwrap();
            if layer.weight.cols() != prev {
                return Err(NetworkError::Shape(format!(
                    "layer {} weight has {} columns, expected {prev}",
                    k + 1,
                    layer.weight.cols()
                )));
            }
            if layer.bias.len() != layer.weight.rows() {
                return Err(NetworkError::Shape(format!(
                    "layer {} bias has {} entries for {} rows",
                    k + 1,
                    layer.bias.len(),
                    layer.weight.rows()
                )));
            }
            widths.push(layer.weight.rows());
        }
        let shape = NetShape::new(widths)?;
        Ok(ParamTuple { layers, shape })
    }

    pub fn zeros(shape: &NetShape) -> Self {
        let layers = (1..=shape.depth())
            .map(|l| Layer {
                weight: DenseMatrix::zeros(shape.width(l), shape.width(l - 1)),
                bias: vec![0.0; shape.width(l)],
            })
            .collect();
        ParamTuple {
            layers,
            shape: shape.clone(),
        }
    }

    /// i.i.d. `N(0, scale²)` entries.
    pub fn random_normal<R: Rng + ?Sized>(shape: &NetShape, scale: f64, rng: &mut R) -> Self {
        let v: Vec<f64> = (0..shape.param_count())
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                scale * z
            })
            .collect::<Vec<f64>>();
        Self::from_vector(shape, &v).expect("length matches shape")
    }

    pub fn from_vector(shape: &NetShape, v: &[f64]) -> Result<Self, NetworkError> {
        if v.len() != shape.param_count() {
            return Err(NetworkError::Dimension(format!(
                "vector of length {} for shape {shape} with M = {}",
                v.len(),
                shape.param_count()
            )));
        }
        let mut layers = Vec::with_capacity(shape.depth());
        let mut off = 0;
        for l in 1..=shape.depth() {
            let (rows, cols) = (shape.width(l), shape.width(l - 1));
            let weight = DenseMatrix::from_vec(rows, cols, v[off..off + rows * cols].to_vec())?;
            off += rows * cols;
            let bias = v[off..off + rows].to_vec();
            off += rows;
            layers.push(Layer { weight, bias });
        }
        Ok(ParamTuple {
            layers,
            shape: shape.clone(),
        })
    }

    pub fn to_vector(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.shape.param_count());
        for layer in &self.layers {
            v.extend_from_slice(layer.weight.as_slice());
            v.extend_from_slice(&layer.bias);
        }
        v
    }

    pub fn shape(&self) -> &NetShape {
        &self.shape
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    /// Layers in order; index `k` holds layer `k + 1`.
    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    /// `W^[l]` for `l ∈ [1, L]`.
    pub fn weight(&self, l: usize) -> &DenseMatrix {
        &self.layers[l - 1].weight
    }

    pub fn weight_mut(&mut self, l: usize) -> &mut DenseMatrix {
        &mut self.layers[l - 1].weight
    }

    /// `b^[l]` for `l ∈ [1, L]`.
    pub fn bias(&self, l: usize) -> &[f64] {
        &self.layers[l - 1].bias
    }

    pub fn bias_mut(&mut self, l: usize) -> &mut Vec<f64> {
        &mut self.layers[l - 1].bias
    }

    pub fn into_layers(self) -> Vec<Layer> {
        self.layers
    }
}

impl<'de> Deserialize<'de> for ParamTuple {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        struct Raw {
            layers: Vec<Layer>,
        }
        let raw = Raw::deserialize(deserializer)?;
        ParamTuple::new(raw.layers).map_err(serde::de::Error::custom)
    }
}

/// On-disk parameter file: `{"widths": [...], "activation": "tanh", "layers": [{"W": [[...]], "b": [...]}, ...]}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamFile {
    pub widths: NetShape,
    pub activation: Activation,
    pub layers: Vec<Layer>,
}

impl ParamFile {
    pub fn new(theta: &ParamTuple, activation: Activation) -> Self {
        ParamFile {
            widths: theta.shape().clone(),
            activation,
            layers: theta.layers().to_vec(),
        }
    }

    /// Checks the layers against `widths`.
    pub fn into_parts(self) -> Result<(ParamTuple, Activation), NetworkError> {
        let theta = ParamTuple::new(self.layers)?;
        if theta.shape() != &self.widths {
            return Err(NetworkError::Shape(format!(
                "layers describe {} but widths say {}",
                theta.shape(),
                self.widths
            )));
        }
        Ok((theta, self.activation))
    }
}

/// Scalar activation `σ`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Sigmoid,
    Softplus,
    /// Forward and gradient work only; rejected wherever a Hessian is needed.
    Relu,
}

impl Activation {
    pub const ALL: [Activation; 4] = [
        Activation::Tanh,
        Activation::Sigmoid,
        Activation::Softplus,
        Activation::Relu,
    ];
    pub const SMOOTH: [Activation; 3] =
        [Activation::Tanh, Activation::Sigmoid, Activation::Softplus];

    pub fn name(self) -> &'static str {
        match self {
            Activation::Tanh => "tanh",
            Activation::Sigmoid => "sigmoid",
            Activation::Softplus => "softplus",
            Activation::Relu => "relu",
        }
    }

    pub fn value(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Sigmoid => sigmoid(x),
            Activation::Softplus => {
                if x > 30.0 {
                    x + (-x).exp().ln_1p()
                } else {
                    x.exp().ln_1p()
                }
            }
            Activation::Relu => x.max(0.0),
        }
    }

    /// `(σ(x), σ'(x))`, sharing work where the derivative is a function of the value.
    pub fn value_and_derivative(self, x: f64) -> (f64, f64) {
        match self {
            Activation::Tanh => {
                let t = x.tanh();
                (t, 1.0 - t * t)
            }
            Activation::Sigmoid => {
                let s = sigmoid(x);
                (s, s * (1.0 - s))
            }
            _ => (self.value(x), self.derivative(x)),
        }
    }

    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => {
                let t = x.tanh();
                1.0 - t * t
            }
            Activation::Sigmoid => {
                let s = sigmoid(x);
                s * (1.0 - s)
            }
            Activation::Softplus => sigmoid(x),
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }

    /// `σ''(x)`; `None` for activations that are not twice differentiable.
    pub fn second_derivative(self, x: f64) -> Option<f64> {
        match self {
            Activation::Tanh => {
                let t = x.tanh();
                Some(-2.0 * t * (1.0 - t * t))
            }
            Activation::Sigmoid => {
                let s = sigmoid(x);
                Some(s * (1.0 - s) * (1.0 - 2.0 * s))
            }
            Activation::Softplus => {
                let s = sigmoid(x);
                Some(s * (1.0 - s))
            }
            Activation::Relu => None,
        }
    }

    pub fn is_twice_differentiable(self) -> bool {
        !matches!(self, Activation::Relu)
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Activation {
    type Err = NetworkError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Activation::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| NetworkError::UnknownName {
                kind: "activation",
                name: s.into(),
            })
    }
}

/// Per-sample loss `ℓ(y, y*)`, differentiated in its first argument.
pub trait Loss: Send + Sync {
    fn name(&self) -> &str;
    fn value(&self, output: &[f64], target: &[f64]) -> f64;
    /// `∇ℓ` with respect to the output.
    fn gradient(&self, output: &[f64], target: &[f64]) -> Vec<f64>;
    /// `∂_{ij}ℓ` with respect to the output.
    fn hessian(&self, output: &[f64], target: &[f64]) -> DenseMatrix;
}

/// `ℓ(y, y*) = ‖y − y*‖²`.
#[derive(Clone, Copy, Debug, Default)]
pub struct Mse;

impl Loss for Mse {
    fn name(&self) -> &str {
        "mse"
    }

    fn value(&self, output: &[f64], target: &[f64]) -> f64 {
        output
            .iter()
            .zip(target)
            .map(|(y, t)| (y - t) * (y - t))
            .sum()
    }

    fn gradient(&self, output: &[f64], target: &[f64]) -> Vec<f64> {
        output
            .iter()
            .zip(target)
            .map(|(y, t)| 2.0 * (y - t))
            .collect()
    }

    fn hessian(&self, output: &[f64], _target: &[f64]) -> DenseMatrix {
        DenseMatrix::identity(output.len()).scale(2.0)
    }
}

/// `c · ℓ` for a positive constant `c`.
#[derive(Clone, Copy, Debug)]
pub struct ScaledLoss<L> {
    pub inner: L,
    pub factor: f64,
}

impl<L: Loss> Loss for ScaledLoss<L> {
    fn name(&self) -> &str {
        self.inner.name()
    }

    fn value(&self, output: &[f64], target: &[f64]) -> f64 {
        self.factor * self.inner.value(output, target)
    }

    fn gradient(&self, output: &[f64], target: &[f64]) -> Vec<f64> {
        self.inner
            .gradient(output, target)
            .into_iter()
            .map(|g| self.factor * g)
            .collect()
    }

    fn hessian(&self, output: &[f64], target: &[f64]) -> DenseMatrix {
        self.inner.hessian(output, target).scale(self.factor)
    }
}

/// Looks a loss up by name (`"mse"`).
pub fn loss_by_name(name: &str) -> Result<Box<dyn Loss>, NetworkError> {
    match name {
        "mse" => Ok(Box::new(Mse)),
        other => Err(NetworkError::UnknownName {
            kind: "loss",
            name: other.into(),
        }),
    }
}

/// Training set `S = {(x_i, y_i)}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub inputs: Vec<Vec<f64>>,
    pub targets: Vec<Vec<f64>>,
}

impl Dataset {
    pub fn new(inputs: Vec<Vec<f64>>, targets: Vec<Vec<f64>>) -> Result<Self, NetworkError> {
        let d = Dataset { inputs, targets };
        d.validate()?;
        Ok(d)
    }

    pub fn validate(&self) -> Result<(), NetworkError> {
        if self.inputs.is_empty() {
            return Err(NetworkError::EmptyDataset);
        }
        if self.inputs.len() != self.targets.len() {
            return Err(NetworkError::Dimension(format!(
                "{} inputs but {} targets",
                self.inputs.len(),
                self.targets.len()
            )));
        }
        let (din, dout) = (self.inputs[0].len(), self.targets[0].len());
        if self.inputs.iter().any(|x| x.len() != din)
            || self.targets.iter().any(|y| y.len() != dout)
        {
            return Err(NetworkError::Dimension("ragged dataset".into()));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.inputs.first().map_or(0, Vec::len)
    }

    pub fn output_dim(&self) -> usize {
        self.targets.first().map_or(0, Vec::len)
    }

    pub fn samples(&self) -> impl Iterator<Item = (&[f64], &[f64])> {
        self.inputs
            .iter()
            .zip(&self.targets)
            .map(|(x, y)| (x.as_slice(), y.as_slice()))
    }

    fn check_against(&self, shape: &NetShape) -> Result<(), NetworkError> {
        if self.is_empty() {
            return Err(NetworkError::EmptyDataset);
        }
        if self.input_dim() != shape.input_dim() || self.output_dim() != shape.output_dim() {
            return Err(NetworkError::Dimension(format!(
                "dataset dims ({}, {}) against shape {shape}",
                self.input_dim(),
                self.output_dim()
            )));
        }
        Ok(())
    }
}

/// Per-layer quantities of one sample, indexed by layer `0..=L`.
///
/// `features[l] = f^[l]`, `feature_grads[l] = g^[l]`, `errors[l] = z^[l]` and
/// `hadamard[l] = e^[l] = z^[l] ∘ g^[l]`. At the input layer `g^[0] ≡ 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardTrace {
    pub features: Vec<Vec<f64>>,
    pub feature_grads: Vec<Vec<f64>>,
    pub errors: Vec<Vec<f64>>,
    pub hadamard: Vec<Vec<f64>>,
}

impl ForwardTrace {
    pub fn output(&self) -> &[f64] {
        self.features.last().expect("trace has layers")
    }
}

fn check_input(theta: &ParamTuple, x: &[f64]) -> Result<(), NetworkError> {
    if x.len() != theta.shape().input_dim() {
        return Err(NetworkError::Dimension(format!(
            "input of length {} for shape {}",
            x.len(),
            theta.shape()
        )));
    }
    Ok(())
}

/// Features `f^[0..=L]` and feature gradients `g^[0..=L]` of one input.
fn forward_pass(
    theta: &ParamTuple,
    sigma: Activation,
    x: &[f64],
) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let depth = theta.depth();
    let mut features = Vec::with_capacity(depth + 1);
    let mut grads = Vec::with_capacity(depth + 1);
    features.push(x.to_vec());
    grads.push(vec![1.0; x.len()]);
    for l in 1..=depth {
        let w = theta.weight(l);
        let b = theta.bias(l);
        let prev = &features[l - 1];
        let pre: Vec<f64> = (0..w.rows())
            .map(|i| numerics::dot(w.row(i), prev) + b[i])
            .collect();
        if l == depth {
            grads.push(vec![1.0; pre.len()]);
            features.push(pre);
        } else {
            grads.push(pre.iter().map(|&u| sigma.derivative(u)).collect());
            features.push(pre.iter().map(|&u| sigma.value(u)).collect());
        }
    }
    (features, grads)
}

/// Propagates `z^[L]` back through the network.
fn backward_pass(
    theta: &ParamTuple,
    grads: &[Vec<f64>],
    top_error: Vec<f64>,
) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let depth = theta.depth();
    let mut errors = vec![Vec::new(); depth + 1];
    let mut hadamard = vec![Vec::new(); depth + 1];
    hadamard[depth] = top_error
        .iter()
        .zip(&grads[depth])
        .map(|(z, g)| z * g)
        .collect();
    errors[depth] = top_error;
    for l in (0..depth).rev() {
        let z = theta
            .weight(l + 1)
            .tr_matvec(&hadamard[l + 1])
            .expect("consistent dims");
        hadamard[l] = z.iter().zip(&grads[l]).map(|(z, g)| z * g).collect();
        errors[l] = z;
    }
    (errors, hadamard)
}

/// Network output `f_θ(x)`.
pub fn forward(theta: &ParamTuple, sigma: Activation, x: &[f64]) -> Result<Vec<f64>, NetworkError> {
    check_input(theta, x)?;
    let (mut features, _) = forward_pass(theta, sigma, x);
    Ok(features.pop().expect("at least one layer"))
}

/// All feature vectors `f^[0..=L]` of one input.
pub fn features(
    theta: &ParamTuple,
    sigma: Activation,
    x: &[f64],
) -> Result<Vec<Vec<f64>>, NetworkError> {
    check_input(theta, x)?;
    Ok(forward_pass(theta, sigma, x).0)
}

pub fn forward_trace(
    theta: &ParamTuple,
    sigma: Activation,
    loss: &dyn Loss,
    x: &[f64],
    y: &[f64],
) -> Result<ForwardTrace, NetworkError> {
    check_input(theta, x)?;
    if y.len() != theta.shape().output_dim() {
        return Err(NetworkError::Dimension(format!(
            "target of length {} for shape {}",
            y.len(),
            theta.shape()
        )));
    }
    let (features, feature_grads) = forward_pass(theta, sigma, x);
    let top = loss.gradient(features.last().unwrap(), y);
    let (errors, hadamard) = backward_pass(theta, &feature_grads, top);
    Ok(ForwardTrace {
        features,
        feature_grads,
        errors,
        hadamard,
    })
}

/// `∇_{W^[l]} = e^[l] (f^[l-1])ᵀ`, `∇_{b^[l]} = e^[l]`, vectorized.
fn assemble_gradient(shape: &NetShape, features: &[Vec<f64>], hadamard: &[Vec<f64>]) -> Vec<f64> {
    let mut g = Vec::with_capacity(shape.param_count());
    for l in 1..=shape.depth() {
        for &e in &hadamard[l] {
            g.extend(features[l - 1].iter().map(|f| e * f));
        }
        g.extend_from_slice(&hadamard[l]);
    }
    g
}

/// Reusable per-layer buffers for the risk and gradient loops.
struct Workspace {
    features: Vec<Vec<f64>>,
    grads: Vec<Vec<f64>>,
    hadamard: Vec<Vec<f64>>,
}

impl Workspace {
    fn new(shape: &NetShape) -> Self {
        let bufs = || {
            shape
                .widths()
                .iter()
                .map(|&m| vec![0.0; m])
                .collect::<Vec<_>>()
        };
        Workspace {
            features: bufs(),
            grads: bufs(),
            hadamard: bufs(),
        }
    }

    fn output(&self) -> &[f64] {
        self.features.last().expect("at least one layer")
    }

    fn forward(&mut self, theta: &ParamTuple, sigma: Activation, x: &[f64]) {
        let depth = theta.depth();
        self.features[0].copy_from_slice(x);
        for l in 1..=depth {
            let w = theta.weight(l);
            let b = theta.bias(l);
            let (prev, rest) = self.features.split_at_mut(l);
            let prev = &prev[l - 1];
            let out = &mut rest[0];
            let g = &mut self.grads[l];
            for i in 0..w.rows() {
                let u = numerics::dot(w.row(i), prev) + b[i];
                if l == depth {
                    out[i] = u;
                    g[i] = 1.0;
                } else {
                    (out[i], g[i]) = sigma.value_and_derivative(u);
                }
            }
        }
    }

    /// Fills `hadamard[1..=L]` from `z^[L] = top`.
    fn backward(&mut self, theta: &ParamTuple, top: &[f64]) {
        let depth = theta.depth();
        for (h, (z, g)) in self.hadamard[depth]
            .iter_mut()
            .zip(top.iter().zip(&self.grads[depth]))
        {
            *h = z * g;
        }
        for l in (1..depth).rev() {
            let w = theta.weight(l + 1);
            let (lo, hi) = self.hadamard.split_at_mut(l + 1);
            let cur = &mut lo[l];
            let next = &hi[0];
            cur.iter_mut().for_each(|c| *c = 0.0);
            for (i, &e) in next.iter().enumerate() {
                if e == 0.0 {
                    continue;
                }
                for (c, a) in cur.iter_mut().zip(w.row(i)) {
                    *c += e * a;
                }
            }
            for (c, g) in cur.iter_mut().zip(&self.grads[l]) {
                *c *= g;
            }
        }
    }

    fn assemble(&self, out: &mut [f64]) {
        let mut k = 0;
        for l in 1..self.features.len() {
            for &e in &self.hadamard[l] {
                for f in &self.features[l - 1] {
                    out[k] = e * f;
                    k += 1;
                }
            }
            for &e in &self.hadamard[l] {
                out[k] = e;
                k += 1;
            }
        }
    }
}

/// Jacobian of the output with respect to the vectorized parameters (`m_L × M`).
pub fn output_jacobian(
    theta: &ParamTuple,
    sigma: Activation,
    x: &[f64],
) -> Result<DenseMatrix, NetworkError> {
    check_input(theta, x)?;
    let shape = theta.shape();
    let (features, grads) = forward_pass(theta, sigma, x);
    let out = shape.output_dim();
    let mut jac = DenseMatrix::zeros(out, shape.param_count());
    for i in 0..out {
        let mut unit = vec![0.0; out];
        unit[i] = 1.0;
        let (_, hadamard) = backward_pass(theta, &grads, unit);
        jac.row_mut(i)
            .copy_from_slice(&assemble_gradient(shape, &features, &hadamard));
    }
    Ok(jac)
}

/// How the full Hessian is obtained.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HessianMode {
    /// Analytic `H⁽¹⁾`; `H` by central differences of the analytic gradient.
    AnalyticH1Fd,
    /// Analytic `H⁽¹⁾`; `H` by second differences of the risk itself.
    FullFd,
}

#[derive(Clone, Copy, Debug)]
pub struct HessianOptions {
    pub mode: HessianMode,
    pub step: f64,
    pub zero_tol: f64,
}

impl Default for HessianOptions {
    fn default() -> Self {
        HessianOptions {
            mode: HessianMode::AnalyticH1Fd,
            step: FD_HESSIAN_STEP,
            zero_tol: 1e-6,
        }
    }
}

/// Hessian of the empirical risk with its `H⁽¹⁾ / H⁽²⁾` split.
///
/// The `*_upper` blocks are the principal sub-blocks on the coordinates of
/// layers `1..L-1` (the first `upper_dim` entries of the vectorization).
#[derive(Clone, Debug, Serialize)]
pub struct HessianReport {
    pub h: DenseMatrix,
    pub h1: DenseMatrix,
    pub h2: DenseMatrix,
    pub upper_dim: usize,
    pub h_upper: DenseMatrix,
    pub h1_upper: DenseMatrix,
    pub h2_upper: DenseMatrix,
    pub eigenvalues: Vec<f64>,
    pub inertia: Inertia,
}

impl HessianReport {
    pub fn min_eigenvalue(&self) -> f64 {
        self.eigenvalues.first().copied().unwrap_or(0.0)
    }

    /// Recomputes the inertia of `H` at another tolerance.
    pub fn inertia_at(&self, zero_tol: f64) -> Inertia {
        inertia_of(&self.eigenvalues, zero_tol)
    }
}

fn leading_block(m: &DenseMatrix, k: usize) -> DenseMatrix {
    let idx: Vec<usize> = (0..k).collect();
    m.principal_submatrix(&idx)
}

/// The empirical risk `R_S(θ) = E_S ℓ(f_θ(x), y)` for a fixed activation,
/// loss and dataset.
#[derive(Clone, Copy)]
pub struct EmpiricalRisk<'a> {
    pub activation: Activation,
    pub loss: &'a dyn Loss,
    pub data: &'a Dataset,
}

impl<'a> EmpiricalRisk<'a> {
    pub fn new(activation: Activation, loss: &'a dyn Loss, data: &'a Dataset) -> Self {
        EmpiricalRisk {
            activation,
            loss,
            data,
        }
    }

    pub fn risk(&self, theta: &ParamTuple) -> Result<f64, NetworkError> {
        self.data.check_against(theta.shape())?;
        let mut ws = Workspace::new(theta.shape());
        let losses: Vec<f64> = self
            .data
            .samples()
            .map(|(x, y)| {
                ws.forward(theta, self.activation, x);
                self.loss.value(ws.output(), y)
            })
            .collect();
        Ok(pairwise_sum(&losses) / self.data.len() as f64)
    }

    pub fn risk_at(&self, shape: &NetShape, v: &[f64]) -> Result<f64, NetworkError> {
        self.risk(&ParamTuple::from_vector(shape, v)?)
    }

    /// `∇_θ R_S`, vectorized.
    pub fn gradient(&self, theta: &ParamTuple) -> Result<Vec<f64>, NetworkError> {
        Ok(self.risk_and_gradient(theta)?.1)
    }

    pub fn gradient_at(&self, shape: &NetShape, v: &[f64]) -> Result<Vec<f64>, NetworkError> {
        self.gradient(&ParamTuple::from_vector(shape, v)?)
    }

    /// Risk and gradient in one pass.
    pub fn risk_and_gradient(&self, theta: &ParamTuple) -> Result<(f64, Vec<f64>), NetworkError> {
        self.data.check_against(theta.shape())?;
        let shape = theta.shape();
        let m = shape.param_count();
        let n = self.data.len();
        let mut ws = Workspace::new(shape);
        let mut losses = Vec::with_capacity(n);
        let mut buf = vec![0.0; n * m];
        for (k, (x, y)) in self.data.samples().enumerate() {
            ws.forward(theta, self.activation, x);
            losses.push(self.loss.value(ws.output(), y));
            let top = self.loss.gradient(ws.output(), y);
            ws.backward(theta, &top);
            ws.assemble(&mut buf[k * m..(k + 1) * m]);
        }
        let nf = n as f64;
        let grad = pairwise_sum_rows(&mut buf, n, m)
            .into_iter()
            .map(|g| g / nf)
            .collect();
        Ok((pairwise_sum(&losses) / nf, grad))
    }

    /// `v_S(θ) = Σ_i E_S ∂_iℓ ∇_θ(f_θ)_i`, assembled from output Jacobians.
    pub fn gradient_via_jacobian(&self, theta: &ParamTuple) -> Result<Vec<f64>, NetworkError> {
        self.data.check_against(theta.shape())?;
        let mut per_sample = Vec::with_capacity(self.data.len());
        for (x, y) in self.data.samples() {
            let jac = output_jacobian(theta, self.activation, x)?;
            let out = forward(theta, self.activation, x)?;
            let dl = self.loss.gradient(&out, y);
            per_sample.push(jac.tr_matvec(&dl)?);
        }
        let n = self.data.len() as f64;
        Ok(pairwise_sum_vectors(&per_sample)
            .into_iter()
            .map(|g| g / n)
            .collect())
    }

    /// `H⁽¹⁾ = Σ_{ij} E_S ∂_{ij}ℓ ∇(f)_i ∇(f)_jᵀ`.
    pub fn gauss_newton(&self, theta: &ParamTuple) -> Result<DenseMatrix, NetworkError> {
        self.data.check_against(theta.shape())?;
        let m = theta.shape().param_count();
        let mut per_sample = Vec::with_capacity(self.data.len());
        for (x, y) in self.data.samples() {
            let jac = output_jacobian(theta, self.activation, x)?;
            let out = forward(theta, self.activation, x)?;
            let d2 = self.loss.hessian(&out, y);
            let dj = d2.matmul(&jac)?;
            per_sample.push(jac.transpose().matmul(&dj)?.into_vec());
        }
        let n = self.data.len() as f64;
        let sum: Vec<f64> = pairwise_sum_vectors(&per_sample)
            .into_iter()
            .map(|v| v / n)
            .collect();
        Ok(DenseMatrix::from_vec(m, m, sum)?.symmetrized()?)
    }

    /// `H u` by central differences of the analytic gradient along `u`.
    pub fn hessian_vector_product(
        &self,
        theta: &ParamTuple,
        u: &[f64],
        step: f64,
    ) -> Result<Vec<f64>, NetworkError> {
        let shape = theta.shape();
        let base = theta.to_vector();
        if u.len() != base.len() {
            return Err(NetworkError::Dimension(format!(
                "direction of length {} for M = {}",
                u.len(),
                base.len()
            )));
        }
        let plus: Vec<f64> = base.iter().zip(u).map(|(t, d)| t + step * d).collect();
        let minus: Vec<f64> = base.iter().zip(u).map(|(t, d)| t - step * d).collect();
        let gp = self.gradient_at(shape, &plus)?;
        let gm = self.gradient_at(shape, &minus)?;
        Ok(gp
            .iter()
            .zip(&gm)
            .map(|(a, b)| (a - b) / (2.0 * step))
            .collect())
    }

    /// `uᵀ H u` through [`Self::hessian_vector_product`] with step
    /// `1e-5 · (1 + ‖θ‖)`.
    pub fn quadratic_form(&self, theta: &ParamTuple, u: &[f64]) -> Result<f64, NetworkError> {
        let step = 1e-5 * (1.0 + numerics::norm2(&theta.to_vector()));
        let hu = self.hessian_vector_product(theta, u, step)?;
        Ok(numerics::dot(u, &hu))
    }

    /// Full Hessian `H` only, by the selected finite-difference route.
    pub fn hessian_matrix(
        &self,
        theta: &ParamTuple,
        mode: HessianMode,
        step: f64,
    ) -> Result<DenseMatrix, NetworkError> {
        if !self.activation.is_twice_differentiable() {
            return Err(NetworkError::Unsupported {
                activation: self.activation,
                operation: "Hessian computation",
            });
        }
        self.data.check_against(theta.shape())?;
        let shape = theta.shape();
        let base = theta.to_vector();
        let m = base.len();
        let h = match mode {
            HessianMode::AnalyticH1Fd => {
                let columns: Result<Vec<Vec<f64>>, NetworkError> = (0..m)
                    .into_par_iter()
                    .map(|k| {
                        let mut probe = base.clone();
                        probe[k] = base[k] + step;
                        let gp = self.gradient_at(shape, &probe)?;
                        probe[k] = base[k] - step;
                        let gm = self.gradient_at(shape, &probe)?;
                        Ok(gp
                            .iter()
                            .zip(&gm)
                            .map(|(a, b)| (a - b) / (2.0 * step))
                            .collect())
                    })
                    .collect();
                let columns = columns?;
                let mut h = DenseMatrix::zeros(m, m);
                for (k, col) in columns.iter().enumerate() {
                    for (r, v) in col.iter().enumerate() {
                        h[(r, k)] = *v;
                    }
                }
                h
            }
            HessianMode::FullFd => {
                central_diff_hessian(|v| self.risk_at(shape, v).unwrap_or(f64::NAN), &base, step)?
            }
        };
        Ok(h.symmetrized()?)
    }

    pub fn hessian(
        &self,
        theta: &ParamTuple,
        opts: HessianOptions,
    ) -> Result<HessianReport, NetworkError> {
        let h = self.hessian_matrix(theta, opts.mode, opts.step)?;
        let h1 = self.gauss_newton(theta)?;
        let h2 = h.sub(&h1)?;
        let upper_dim = theta.shape().upper_param_count();
        let eig = sym_eigen(&h, 1e-9)?;
        let inertia = inertia_of(&eig.values, opts.zero_tol);
        Ok(HessianReport {
            h_upper: leading_block(&h, upper_dim),
            h1_upper: leading_block(&h1, upper_dim),
            h2_upper: leading_block(&h2, upper_dim),
            h,
            h1,
            h2,
            upper_dim,
            eigenvalues: eig.values,
            inertia,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{central_diff_gradient, max_abs, max_abs_diff, seeded_rng};
    use crate::testutil::{dataset_a, theta_a};
    use rand::Rng;

    #[test]
    fn shape_validation_and_counts() {
        assert!(NetShape::new(vec![1, 2]).is_err());
        assert!(NetShape::new(vec![1, 0, 1]).is_err());
        let s = NetShape::new(vec![2, 3, 4, 1]).unwrap();
        assert_eq!(s.depth(), 3);
        assert_eq!(s.param_count(), 3 * 3 + 4 * 4 + 5);
        assert_eq!(s.upper_param_count(), 9 + 16);
        assert_eq!(s.weight_index(2, 1, 2), 9 + 5);
        assert_eq!(s.bias_index(2, 0), 9 + 12);
    }

    #[test]
    fn vector_round_trip() {
        let shape = NetShape::new(vec![2, 3, 1]).unwrap();
        let theta = ParamTuple::random_normal(&shape, 1.0, &mut seeded_rng(4));
        let back = ParamTuple::from_vector(&shape, &theta.to_vector()).unwrap();
        assert_eq!(back, theta);
        assert!(ParamTuple::from_vector(&shape, &[0.0; 3]).is_err());
    }

    #[test]
    fn rejects_inconsistent_layers() {
        let l1 = Layer {
            weight: DenseMatrix::zeros(2, 1),
            bias: vec![0.0; 2],
        };
        let l2 = Layer {
            weight: DenseMatrix::zeros(1, 3),
            bias: vec![0.0],
        };
        assert!(ParamTuple::new(vec![l1, l2]).is_err());
    }

    #[test]
    fn activation_derivatives_match_differences() {
        let mut rng = seeded_rng(9);
        for act in Activation::SMOOTH {
            for _ in 0..100 {
                let x: f64 = rng.random_range(-4.0..4.0);
                let h = 1e-5;
                let d1 = (act.value(x + h) - act.value(x - h)) / (2.0 * h);
                let d2 = (act.derivative(x + h) - act.derivative(x - h)) / (2.0 * h);
                assert!((d1 - act.derivative(x)).abs() < 1e-6, "{act} σ' at {x}");
                assert!(
                    (d2 - act.second_derivative(x).unwrap()).abs() < 1e-6,
                    "{act} σ'' at {x}"
                );
            }
        }
        assert_eq!(Activation::Relu.second_derivative(1.0), None);
        assert_eq!(
            "softplus".parse::<Activation>().unwrap(),
            Activation::Softplus
        );
        assert!("gelu".parse::<Activation>().is_err());
    }

    #[test]
    fn mse_derivatives_match_differences() {
        let y = [0.3, -1.1];
        let t = [0.5, 0.2];
        let g = central_diff_gradient(|v| Mse.value(v, &t), &y, 1e-5).unwrap();
        assert!(max_abs_diff(&g, &Mse.gradient(&y, &t)) < 1e-6);
        let h = Mse.hessian(&y, &t);
        assert_eq!(h, DenseMatrix::identity(2).scale(2.0));
    }

    #[test]
    fn forward_examples() {
        let shape = NetShape::new(vec![1, 2, 1]).unwrap();
        let zero = ParamTuple::zeros(&shape);
        assert_eq!(forward(&zero, Activation::Tanh, &[0.7]).unwrap(), vec![0.0]);
        let th = theta_a();
        assert_eq!(forward(&th, Activation::Tanh, &[0.0]).unwrap(), vec![0.5]);
        let expected = 1f64.tanh() - 2f64.tanh() + 0.5;
        let got = forward(&th, Activation::Tanh, &[1.0]).unwrap()[0];
        assert!((got - expected).abs() < 1e-15);
        assert!(forward(&th, Activation::Tanh, &[1.0, 2.0]).is_err());
    }

    #[test]
    fn trace_zero_parameters() {
        let shape = NetShape::new(vec![2, 3, 2]).unwrap();
        let zero = ParamTuple::zeros(&shape);
        let tr = forward_trace(&zero, Activation::Tanh, &Mse, &[0.4, 1.0], &[0.0, 0.0]).unwrap();
        assert_eq!(tr.output(), &[0.0, 0.0]);
        assert!(tr.errors[2].iter().all(|&z| z == 0.0));
        assert!(tr.hadamard.iter().flatten().all(|&e| e == 0.0));
    }

    #[test]
    fn trace_zero_residual_sample() {
        let tr = forward_trace(&theta_a(), Activation::Tanh, &Mse, &[0.0], &[0.5]).unwrap();
        assert_eq!(tr.errors[2], vec![0.0]);
        assert_eq!(tr.hadamard[1], vec![0.0, 0.0]);
    }

    #[test]
    fn trace_matches_perturbed_activations() {
        // z^[l] = ∂ℓ/∂f^[l], checked by perturbing f^[1] and re-running the top layer.
        let th = theta_a();
        let (x, y) = ([1.0], [0.3]);
        let tr = forward_trace(&th, Activation::Tanh, &Mse, &x, &y).unwrap();
        let top = |f1: &[f64]| {
            let out = numerics::dot(th.weight(2).row(0), f1) + th.bias(2)[0];
            Mse.value(&[out], &y)
        };
        let z1 = central_diff_gradient(top, &tr.features[1], 1e-6).unwrap();
        assert!(max_abs_diff(&z1, &tr.errors[1]) < 1e-8);
        let z2 = central_diff_gradient(|o| Mse.value(o, &y), &tr.features[2], 1e-6).unwrap();
        assert!(max_abs_diff(&z2, &tr.errors[2]) < 1e-8);
        // g^[1] = σ'(W x + b) against differences of the activation
        for i in 0..2 {
            let pre = th.weight(1)[(i, 0)] * x[0] + th.bias(1)[i];
            let fd = ((pre + 1e-6).tanh() - (pre - 1e-6).tanh()) / 2e-6;
            assert!((fd - tr.feature_grads[1][i]).abs() < 1e-8);
        }
    }

    #[test]
    fn error_recursion_holds() {
        let shape = NetShape::new(vec![2, 4, 3, 2]).unwrap();
        let mut rng = seeded_rng(12);
        for act in Activation::ALL {
            let th = ParamTuple::random_normal(&shape, 1.0, &mut rng);
            let tr = forward_trace(&th, act, &Mse, &[0.2, -0.9], &[1.0, 0.0]).unwrap();
            for l in 1..shape.depth() {
                let back = th.weight(l + 1).tr_matvec(&tr.hadamard[l + 1]).unwrap();
                let rec: Vec<f64> = back
                    .iter()
                    .zip(&tr.feature_grads[l])
                    .map(|(a, g)| a * g)
                    .collect();
                assert!(max_abs_diff(&rec, &tr.hadamard[l]) <= 1e-12);
            }
        }
    }

    #[test]
    fn risk_examples() {
        let data = dataset_a();
        let r = EmpiricalRisk::new(Activation::Tanh, &Mse, &data);
        let out1 = 1f64.tanh() - 2f64.tanh() + 0.5;
        let expected = (0.0 + (out1 - 0.3) * (out1 - 0.3)) / 2.0;
        assert!((r.risk(&theta_a()).unwrap() - expected).abs() < 1e-15);

        let one = Dataset::new(vec![vec![1.0]], vec![vec![0.3]]).unwrap();
        let far = Dataset::new(vec![vec![1.0]], vec![vec![2.0 * 0.3 - out1]]).unwrap();
        let r1 = EmpiricalRisk::new(Activation::Tanh, &Mse, &one)
            .risk(&theta_a())
            .unwrap();
        let r2 = EmpiricalRisk::new(Activation::Tanh, &Mse, &far)
            .risk(&theta_a())
            .unwrap();
        assert!((r2 - 4.0 * r1).abs() < 1e-14);

        let fit = Dataset::new(vec![vec![0.0]], vec![vec![0.5]]).unwrap();
        let rf = EmpiricalRisk::new(Activation::Tanh, &Mse, &fit);
        assert_eq!(rf.risk(&theta_a()).unwrap(), 0.0);
        assert!(max_abs(&rf.gradient(&theta_a()).unwrap()) == 0.0);

        let empty = Dataset {
            inputs: vec![],
            targets: vec![],
        };
        let re = EmpiricalRisk::new(Activation::Tanh, &Mse, &empty);
        assert!(matches!(
            re.risk(&theta_a()),
            Err(NetworkError::EmptyDataset)
        ));
    }

    #[test]
    fn gradient_matches_central_differences() {
        let data = dataset_a();
        let r = EmpiricalRisk::new(Activation::Tanh, &Mse, &data);
        let th = theta_a();
        let shape = th.shape().clone();
        let fd = central_diff_gradient(|v| r.risk_at(&shape, v).unwrap(), &th.to_vector(), 1e-5)
            .unwrap();
        assert!(max_abs_diff(&fd, &r.gradient(&th).unwrap()) < 1e-6);
    }

    #[test]
    fn single_sample_gradient_is_per_sample_gradient() {
        let th = theta_a();
        let one = Dataset::new(vec![vec![1.0]], vec![vec![0.3]]).unwrap();
        let r = EmpiricalRisk::new(Activation::Tanh, &Mse, &one);
        let tr = forward_trace(&th, Activation::Tanh, &Mse, &[1.0], &[0.3]).unwrap();
        let direct = assemble_gradient(th.shape(), &tr.features, &tr.hadamard);
        assert_eq!(r.gradient(&th).unwrap(), direct);
    }

    #[test]
    fn jacobian_structure_and_differences() {
        let th = theta_a();
        let jac = output_jacobian(&th, Activation::Tanh, &[1.0]).unwrap();
        let shape = th.shape();
        let f1 = features(&th, Activation::Tanh, &[1.0]).unwrap()[1].clone();
        assert_eq!(jac[(0, shape.bias_index(2, 0))], 1.0);
        for j in 0..2 {
            assert_eq!(jac[(0, shape.weight_index(2, 0, j))], f1[j]);
        }
        let fd = central_diff_gradient(
            |v| {
                let p = ParamTuple::from_vector(shape, v).unwrap();
                forward(&p, Activation::Tanh, &[1.0]).unwrap()[0]
            },
            &th.to_vector(),
            1e-5,
        )
        .unwrap();
        assert!(max_abs_diff(&fd, jac.row(0)) < 1e-6);
    }

    #[test]
    fn jacobian_last_layer_blocks_multi_output() {
        let shape = NetShape::new(vec![2, 3, 2]).unwrap();
        let th = ParamTuple::random_normal(&shape, 1.0, &mut seeded_rng(2));
        let x = [0.1, -0.4];
        let jac = output_jacobian(&th, Activation::Sigmoid, &x).unwrap();
        let f1 = features(&th, Activation::Sigmoid, &x).unwrap()[1].clone();
        for i in 0..2 {
            for k in 0..2 {
                let expect = if i == k { 1.0 } else { 0.0 };
                assert_eq!(jac[(i, shape.bias_index(2, k))], expect);
                for j in 0..3 {
                    let expect = if i == k { f1[j] } else { 0.0 };
                    assert_eq!(jac[(i, shape.weight_index(2, k, j))], expect);
                }
            }
        }
    }

    #[test]
    fn hessian_of_reference_instance() {
        let data = dataset_a();
        let r = EmpiricalRisk::new(Activation::Tanh, &Mse, &data);
        let th = theta_a();
        let rep = r.hessian(&th, HessianOptions::default()).unwrap();
        let asym = rep.h.sub(&rep.h.transpose()).unwrap().max_abs();
        assert!(asym <= 1e-8);
        let shape = th.shape().clone();
        let oracle =
            central_diff_hessian(|v| r.risk_at(&shape, v).unwrap(), &th.to_vector(), 1e-4).unwrap();
        assert!(rep.h.sub(&oracle).unwrap().max_abs() < 1e-4);
        let split = rep.h.sub(&rep.h1.add(&rep.h2).unwrap()).unwrap().max_abs();
        assert!(split <= 1e-8 * (1.0 + rep.h.max_abs()));
        // outputs are affine in (W^[L], b^[L]): those rows of H2 vanish
        for k in shape.upper_param_count()..shape.param_count() {
            for c in shape.upper_param_count()..shape.param_count() {
                assert!(
                    rep.h2[(k, c)].abs() < 1e-6,
                    "H2[{k},{c}] = {}",
                    rep.h2[(k, c)]
                );
            }
            assert!(rep.h2[(shape.bias_index(2, 0), k)].abs() < 1e-6);
        }
        let full = r
            .hessian(
                &th,
                HessianOptions {
                    mode: HessianMode::FullFd,
                    ..Default::default()
                },
            )
            .unwrap();
        assert!(full.h.sub(&rep.h).unwrap().max_abs() < 1e-4);
    }

    #[test]
    fn hessian_at_exact_fit_is_gauss_newton() {
        let data = Dataset::new(vec![vec![0.0]], vec![vec![0.5]]).unwrap();
        let r = EmpiricalRisk::new(Activation::Tanh, &Mse, &data);
        let rep = r.hessian(&theta_a(), HessianOptions::default()).unwrap();
        assert!(rep.h2.max_abs() < 1e-7, "{}", rep.h2.max_abs());
        assert!(rep.h.sub(&rep.h1).unwrap().max_abs() < 1e-7);
    }

    #[test]
    fn hessian_rejects_relu() {
        let data = dataset_a();
        let r = EmpiricalRisk::new(Activation::Relu, &Mse, &data);
        let err = r
            .hessian(&theta_a(), HessianOptions::default())
            .unwrap_err();
        assert!(matches!(err, NetworkError::Unsupported { .. }));
        // gradients still work
        assert!(r.gradient(&theta_a()).is_ok());
    }

    #[test]
    fn gradient_via_jacobian_agrees() {
        let shape = NetShape::new(vec![2, 3, 2, 2]).unwrap();
        let mut rng = seeded_rng(17);
        let th = ParamTuple::random_normal(&shape, 0.8, &mut rng);
        let data = Dataset::new(
            (0..5)
                .map(|_| vec![rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)])
                .collect(),
            (0..5)
                .map(|_| vec![rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)])
                .collect(),
        )
        .unwrap();
        let r = EmpiricalRisk::new(Activation::Softplus, &Mse, &data);
        let a = r.gradient(&th).unwrap();
        let b = r.gradient_via_jacobian(&th).unwrap();
        assert!(max_abs_diff(&a, &b) <= 1e-8);
        let (risk, g) = r.risk_and_gradient(&th).unwrap();
        assert_eq!(g, a);
        assert_eq!(risk, r.risk(&th).unwrap());
    }

    #[test]
    fn gauss_newton_is_psd_for_mse() {
        let shape = NetShape::new(vec![1, 4, 1]).unwrap();
        let mut rng = seeded_rng(5);
        let th = ParamTuple::random_normal(&shape, 1.0, &mut rng);
        let data = Dataset::new(
            (0..4).map(|i| vec![i as f64 * 0.5 - 1.0]).collect(),
            (0..4).map(|i| vec![(i as f64).sin()]).collect(),
        )
        .unwrap();
        let r = EmpiricalRisk::new(Activation::Tanh, &Mse, &data);
        let h1 = r.gauss_newton(&th).unwrap();
        let e = sym_eigen(&h1, 1e-10).unwrap();
        assert!(e.values[0] >= -1e-8);
    }

    #[test]
    fn quadratic_form_matches_assembled_hessian() {
        let data = dataset_a();
        let r = EmpiricalRisk::new(Activation::Tanh, &Mse, &data);
        let th = theta_a();
        let rep = r.hessian(&th, HessianOptions::default()).unwrap();
        let u = [0.3, -0.2, 0.5, 0.1, 1.0, -0.7, 0.4];
        let direct = rep.h.quadratic_form(&u).unwrap();
        let hvp = r.quadratic_form(&th, &u).unwrap();
        assert!((direct - hvp).abs() < 1e-6, "{direct} vs {hvp}");
    }

    #[test]
    fn param_file_round_trip_and_mismatch() {
        let file = ParamFile::new(&theta_a(), Activation::Tanh);
        let text = serde_json::to_string(&file).unwrap();
        assert!(text.starts_with(r#"{"widths":[1,2,1],"activation":"tanh","layers":[{"W":[["#));
        let back: ParamFile = serde_json::from_str(&text).unwrap();
        assert_eq!(serde_json::to_string(&back).unwrap(), text);
        let (th, act) = back.clone().into_parts().unwrap();
        assert_eq!(th, theta_a());
        assert_eq!(act, Activation::Tanh);
        let bad = ParamFile {
            widths: NetShape::new(vec![1, 3, 1]).unwrap(),
            ..back
        };
        assert!(matches!(bad.into_parts(), Err(NetworkError::Shape(_))));
    }
}
