//! Critical embeddings from a narrow network into a wider one.
//!
//! Neuron indices inside index mappings and embedding steps are 1-based,
//! with `0` reserved for null neurons, so that `s` and `𝕀_l(i)` read the
//! same way as in the math. Wide-net positions passed to accessors such as
//! [`IndexMapping::target`] are 0-based array positions.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::network::{
    features, forward_trace, Activation, Dataset, Layer, Loss, NetShape, NetworkError, ParamTuple,
};
use crate::numerics::{
    least_squares_solve, max_abs, norm2, seeded_rng, DenseMatrix, NumericsError,
};

#[derive(Debug, Error)]
pub enum EmbeddingError {
    #[error("layer {l} is not a hidden layer of a depth-{depth} network")]
    LayerOutOfRange { l: usize, depth: usize },
    #[error("neuron {s} is out of range for layer {l} of width {width}")]
    NeuronOutOfRange { l: usize, s: usize, width: usize },
    #[error("step {index}: {source}")]
    Step {
        index: usize,
        source: Box<EmbeddingError>,
    },
    #[error("invalid index mapping: {0}")]
    IndexMap(String),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("missing certificate data: {0}")]
    MissingCertificate(String),
    #[error("compatibility system infeasible at layer {layer} (residual {residual:.3e})")]
    Infeasible { layer: usize, residual: f64 },
    #[error("embedding is not affine (residual {residual:.3e})")]
    NotAffine { residual: f64 },
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

type Result<T> = std::result::Result<T, EmbeddingError>;

fn check_hidden(l: usize, depth: usize) -> Result<()> {
    if l == 0 || l >= depth {
        return Err(EmbeddingError::LayerOutOfRange { l, depth });
    }
    Ok(())
}

/// One-step null embedding `T^α_{l,0}`: appends a neuron to layer `l` with
/// zero incoming weights, bias `α` and zero outgoing weights.
pub fn null_embed(theta: &ParamTuple, l: usize, alpha: f64) -> Result<ParamTuple> {
    check_hidden(l, theta.depth())?;
    let mut layers = theta.layers().to_vec();
    let w = &layers[l - 1].weight;
    layers[l - 1].weight = append_row(w, &vec![0.0; w.cols()]);
    layers[l - 1].bias.push(alpha);
    let next = &layers[l].weight;
    layers[l].weight = append_column(next, &vec![0.0; next.rows()]);
    Ok(ParamTuple::new(layers)?)
}

/// One-step splitting embedding `T^α_{l,s}` (`s` 1-based): the new neuron
/// copies the incoming weights and bias of neuron `s`; the outgoing column
/// of `s` is split into `(1 − α)` and `α` parts.
pub fn split_embed(theta: &ParamTuple, l: usize, s: usize, alpha: f64) -> Result<ParamTuple> {
    check_hidden(l, theta.depth())?;
    let width = theta.shape().width(l);
    if s == 0 || s > width {
        return Err(EmbeddingError::NeuronOutOfRange { l, s, width });
    }
    let mut layers = theta.layers().to_vec();
    let row = layers[l - 1].weight.row(s - 1).to_vec();
    layers[l - 1].weight = append_row(&layers[l - 1].weight, &row);
    let b = layers[l - 1].bias[s - 1];
    layers[l - 1].bias.push(b);
    let next = &layers[l].weight;
    let col = next.column(s - 1);
    let mut scaled = next.clone();
    for (r, c) in col.iter().enumerate() {
        scaled.as_mut_slice()[r * next.cols() + s - 1] = (1.0 - alpha) * c;
    }
    let appended: Vec<f64> = col.iter().map(|c| alpha * c).collect();
    layers[l].weight = append_column(&scaled, &appended);
    Ok(ParamTuple::new(layers)?)
}

fn append_row(m: &DenseMatrix, row: &[f64]) -> DenseMatrix {
    let mut data = m.as_slice().to_vec();
    data.extend_from_slice(row);
    DenseMatrix::from_vec(m.rows() + 1, m.cols(), data).expect("row length matches")
}

fn append_column(m: &DenseMatrix, col: &[f64]) -> DenseMatrix {
    let mut data = Vec::with_capacity(m.rows() * (m.cols() + 1));
    for (r, &c) in col.iter().enumerate() {
        data.extend_from_slice(m.row(r));
        data.push(c);
    }
    DenseMatrix::from_vec(m.rows(), m.cols() + 1, data).expect("column length matches")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StepKind {
    Null,
    Split,
}

/// One step of a K-step composition: layer `l`, source neuron `s`
/// (1-based, ignored for null steps) and the step parameter `α`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingStep {
    pub kind: StepKind,
    pub l: usize,
    #[serde(default)]
    pub s: usize,
    pub alpha: f64,
}

impl EmbeddingStep {
    pub fn null(l: usize, alpha: f64) -> Self {
        EmbeddingStep {
            kind: StepKind::Null,
            l,
            s: 0,
            alpha,
        }
    }

    pub fn split(l: usize, s: usize, alpha: f64) -> Self {
        EmbeddingStep {
            kind: StepKind::Split,
            l,
            s,
            alpha,
        }
    }

    pub fn apply(&self, theta: &ParamTuple) -> Result<ParamTuple> {
        match self.kind {
            StepKind::Null => null_embed(theta, self.l, self.alpha),
            StepKind::Split => split_embed(theta, self.l, self.s, self.alpha),
        }
    }
}

/// Applies the steps in order against the running shape.
pub fn compose(theta: &ParamTuple, steps: &[EmbeddingStep]) -> Result<ParamTuple> {
    let mut cur = theta.clone();
    for (index, step) in steps.iter().enumerate() {
        cur = step.apply(&cur).map_err(|e| EmbeddingError::Step {
            index,
            source: Box::new(e),
        })?;
    }
    Ok(cur)
}

/// Three-fold global splitting embedding: every hidden layer is tripled,
/// last-layer weights become `[W, W, −W]`.
pub fn global_threefold(theta: &ParamTuple) -> ParamTuple {
    let depth = theta.depth();
    let mut layers = Vec::with_capacity(depth);
    for l in 1..=depth {
        let w = theta.weight(l);
        let b = theta.bias(l);
        let (rows, cols) = (w.rows(), w.cols());
        let layer = if l == 1 {
            let mut data = Vec::with_capacity(3 * rows * cols);
            for _ in 0..3 {
                data.extend_from_slice(w.as_slice());
            }
            Layer {
                weight: DenseMatrix::from_vec(3 * rows, cols, data).unwrap(),
                bias: b.repeat(3),
            }
        } else if l < depth {
            let mut m = DenseMatrix::zeros(3 * rows, 3 * cols);
            for c in 0..3 {
                for i in 0..rows {
                    for j in 0..cols {
                        m.as_mut_slice()[(c * rows + i) * 3 * cols + c * cols + j] = w[(i, j)];
                    }
                }
            }
            Layer {
                weight: m,
                bias: b.repeat(3),
            }
        } else {
            let mut data = Vec::with_capacity(3 * rows * cols);
            for i in 0..rows {
                data.extend_from_slice(w.row(i));
                data.extend_from_slice(w.row(i));
                data.extend(w.row(i).iter().map(|v| -v));
            }
            Layer {
                weight: DenseMatrix::from_vec(rows, 3 * cols, data).unwrap(),
                bias: b.to_vec(),
            }
        };
        layers.push(layer);
    }
    ParamTuple::new(layers).expect("tripled layers chain")
}

/// Shape produced by [`global_threefold`].
pub fn threefold_shape(narrow: &NetShape) -> NetShape {
    let depth = narrow.depth();
    let widths = narrow
        .widths()
        .iter()
        .enumerate()
        .map(|(l, &m)| if l == 0 || l == depth { m } else { 3 * m })
        .collect();
    NetShape::new(widths).expect("valid tripled widths")
}

/// Wide-net vector index of copy `c ∈ {0, 1, 2}` of narrow coordinate `p`
/// under the three-fold embedding. `p` must lie in the `θ^{[L−1]}` range or
/// in the `W^[L]` block; the output bias has no copies.
pub fn threefold_copy_index(narrow: &NetShape, p: usize, c: usize) -> Option<usize> {
    assert!(c < 3, "copy index out of range");
    let depth = narrow.depth();
    let wide = threefold_shape(narrow);
    for l in 1..=depth {
        let off = narrow.layer_offset(l);
        let (rows, cols) = (narrow.width(l), narrow.width(l - 1));
        if p >= off + narrow.layer_param_count(l) {
            continue;
        }
        let q = p - off;
        if q < rows * cols {
            let (i, j) = (q / cols, q % cols);
            return Some(match l {
                1 => wide.weight_index(1, c * rows + i, j),
                l if l < depth => wide.weight_index(l, c * rows + i, c * cols + j),
                _ => wide.weight_index(l, i, c * cols + j),
            });
        }
        let i = q - rows * cols;
        return if l < depth {
            Some(wide.bias_index(l, c * rows + i))
        } else {
            None
        };
    }
    None
}

/// Total pull-back index mapping `𝕀 = {𝕀_l}_{l=0}^{L}`.
///
/// `maps[l][i]` is the narrow neuron (1-based) that wide neuron `i` of
/// layer `l` is pulled back to, or `0` for a null neuron. The narrow width
/// of each hidden layer is the largest value appearing in its map.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Vec<usize>>", into = "Vec<Vec<usize>>")]
pub struct IndexMapping {
    maps: Vec<Vec<usize>>,
}

impl TryFrom<Vec<Vec<usize>>> for IndexMapping {
    type Error = EmbeddingError;
    fn try_from(maps: Vec<Vec<usize>>) -> Result<Self> {
        IndexMapping::new(maps)
    }
}

impl From<IndexMapping> for Vec<Vec<usize>> {
    fn from(m: IndexMapping) -> Self {
        m.maps
    }
}

impl IndexMapping {
    pub fn new(maps: Vec<Vec<usize>>) -> Result<Self> {
        if maps.len() < 3 {
            return Err(EmbeddingError::IndexMap(format!(
                "{} layers, need at least 3",
                maps.len()
            )));
        }
        let depth = maps.len() - 1;
        for l in [0, depth] {
            let identity = maps[l].iter().enumerate().all(|(i, &t)| t == i + 1);
            if !identity || maps[l].is_empty() {
                return Err(EmbeddingError::IndexMap(format!(
                    "layer {l} must be the identity"
                )));
            }
        }
        for (l, map) in maps.iter().enumerate().take(depth).skip(1) {
            let width = map.iter().copied().max().unwrap_or(0);
            if width == 0 {
                return Err(EmbeddingError::IndexMap(format!(
                    "layer {l} has no effective neuron"
                )));
            }
            let mut seen = vec![false; width];
            for &t in map.iter().filter(|&&t| t > 0) {
                seen[t - 1] = true;
            }
            if let Some(s) = seen.iter().position(|&hit| !hit) {
                return Err(EmbeddingError::IndexMap(format!(
                    "not total: neuron {} of layer {l} has an empty preimage",
                    s + 1
                )));
            }
        }
        Ok(IndexMapping { maps })
    }

    pub fn identity(shape: &NetShape) -> Self {
        IndexMapping {
            maps: shape.widths().iter().map(|&m| (1..=m).collect()).collect(),
        }
    }

    pub fn depth(&self) -> usize {
        self.maps.len() - 1
    }

    pub fn maps(&self) -> &[Vec<usize>] {
        &self.maps
    }

    pub fn wide_shape(&self) -> NetShape {
        NetShape::new(self.maps.iter().map(Vec::len).collect()).expect("validated mapping")
    }

    pub fn narrow_shape(&self) -> NetShape {
        NetShape::new(
            self.maps
                .iter()
                .map(|m| m.iter().copied().max().unwrap_or(0))
                .collect(),
        )
        .expect("validated mapping")
    }

    /// `𝕀_l(i)` for the 0-based wide position `i`.
    pub fn target(&self, l: usize, i: usize) -> usize {
        self.maps[l][i]
    }

    pub fn is_null(&self, l: usize, i: usize) -> bool {
        self.maps[l][i] == 0
    }

    /// `𝕀_l⁻¹(s)` as 0-based wide positions (`s = 0` gives the null set).
    pub fn preimage(&self, l: usize, s: usize) -> Vec<usize> {
        self.maps[l]
            .iter()
            .enumerate()
            .filter(|(_, &t)| t == s)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn nulls(&self, l: usize) -> Vec<usize> {
        self.preimage(l, 0)
    }

    /// Number of null neurons over all hidden layers.
    pub fn null_count(&self) -> usize {
        (1..self.depth()).map(|l| self.nulls(l).len()).sum()
    }

    /// `K_l = m'_l − m_l` for `l ∈ [0, L]`.
    pub fn added(&self) -> Vec<usize> {
        let narrow = self.narrow_shape();
        self.maps
            .iter()
            .enumerate()
            .map(|(l, m)| m.len() - narrow.width(l))
            .collect()
    }

    pub fn check_narrow(&self, narrow: &NetShape) -> Result<()> {
        if &self.narrow_shape() != narrow {
            return Err(EmbeddingError::Dimension(format!(
                "index mapping pulls back to {} but parameters have shape {narrow}",
                self.narrow_shape()
            )));
        }
        Ok(())
    }

    /// `𝕀_first ∘ 𝕀_second`: wide neurons of `second` mapped through both.
    pub fn then(&self, second: &IndexMapping) -> Result<IndexMapping> {
        second.check_narrow(&self.wide_shape())?;
        let maps = second
            .maps
            .iter()
            .enumerate()
            .map(|(l, m)| {
                m.iter()
                    .map(|&t| if t == 0 { 0 } else { self.maps[l][t - 1] })
                    .collect()
            })
            .collect();
        IndexMapping::new(maps)
    }
}

/// The tuple `α = {α^[l], α_b^[l]}_{l=1}^{L}` of a general embedding.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlphaSpec {
    #[serde(rename = "W")]
    pub weights: Vec<DenseMatrix>,
    #[serde(rename = "b")]
    pub biases: Vec<Vec<f64>>,
}

impl AlphaSpec {
    /// `α^[l]` for `l ∈ [1, L]`.
    pub fn weight(&self, l: usize) -> &DenseMatrix {
        &self.weights[l - 1]
    }

    pub fn bias(&self, l: usize) -> &[f64] {
        &self.biases[l - 1]
    }

    fn check(&self, wide: &NetShape) -> Result<()> {
        let depth = wide.depth();
        let ok = self.weights.len() == depth
            && self.biases.len() == depth
            && (1..=depth).all(|l| {
                self.weight(l).rows() == wide.width(l)
                    && self.weight(l).cols() == wide.width(l - 1)
                    && self.bias(l).len() == wide.width(l)
            });
        if ok {
            Ok(())
        } else {
            Err(EmbeddingError::Dimension(format!(
                "alpha does not match wide shape {wide}"
            )))
        }
    }
}

/// Auxiliary variables `β^[l]_j` for layers `0..=L`, one entry per wide
/// neuron. Entries at null neurons are ignored.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct BetaCertificate {
    pub values: Vec<Vec<f64>>,
}

impl BetaCertificate {
    pub fn ones(shape: &NetShape) -> Self {
        BetaCertificate {
            values: shape.widths().iter().map(|&m| vec![1.0; m]).collect(),
        }
    }
}

/// Effective bias `(b*^[l])_i` of one null neuron (`i` 1-based).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NullBias {
    pub l: usize,
    pub i: usize,
    pub value: f64,
}

/// `B*`: effective biases of all null neurons.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EffectiveBiases {
    pub entries: Vec<NullBias>,
}

impl EffectiveBiases {
    /// Effective bias of the 0-based wide position `i` in layer `l`.
    pub fn get(&self, l: usize, i: usize) -> Option<f64> {
        self.entries
            .iter()
            .find(|e| e.l == l && e.i == i + 1)
            .map(|e| e.value)
    }

    fn require(&self, l: usize, i: usize) -> Result<f64> {
        self.get(l, i).ok_or_else(|| {
            EmbeddingError::MissingCertificate(format!(
                "no effective bias for null neuron {} of layer {l}",
                i + 1
            ))
        })
    }
}

/// A general embedding `T^α_𝕀` together with its compatibility certificate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneralEmbedding {
    pub index_map: IndexMapping,
    pub alpha: AlphaSpec,
    pub beta: BetaCertificate,
    #[serde(default)]
    pub b_star: EffectiveBiases,
}

impl GeneralEmbedding {
    pub fn apply(&self, theta: &ParamTuple) -> Result<ParamTuple> {
        general_apply(theta, &self.index_map, &self.alpha)
    }

    pub fn identity(shape: &NetShape) -> Self {
        let depth = shape.depth();
        GeneralEmbedding {
            index_map: IndexMapping::identity(shape),
            alpha: AlphaSpec {
                weights: (1..=depth)
                    .map(|l| DenseMatrix::filled(shape.width(l), shape.width(l - 1), 1.0))
                    .collect(),
                biases: (1..=depth).map(|l| vec![0.0; shape.width(l)]).collect(),
            },
            beta: BetaCertificate::ones(shape),
            b_star: EffectiveBiases::default(),
        }
    }

    /// Presentation of the three-fold global splitting embedding.
    pub fn threefold(narrow: &NetShape) -> Self {
        let depth = narrow.depth();
        let wide = threefold_shape(narrow);
        let copy = |l: usize, i: usize| i / narrow.width(l);
        let maps = (0..=depth)
            .map(|l| {
                let m = narrow.width(l);
                (0..wide.width(l)).map(|i| i % m + 1).collect()
            })
            .collect();
        let mut weights = Vec::with_capacity(depth);
        for l in 1..=depth {
            let (rows, cols) = (wide.width(l), wide.width(l - 1));
            let mut a = DenseMatrix::zeros(rows, cols);
            for i in 0..rows {
                for j in 0..cols {
                    let v = if l == 1 {
                        1.0
                    } else if l < depth {
                        if copy(l, i) == copy(l - 1, j) {
                            1.0
                        } else {
                            0.0
                        }
                    } else if copy(l - 1, j) == 2 {
                        -1.0
                    } else {
                        1.0
                    };
                    a.as_mut_slice()[i * cols + j] = v;
                }
            }
            weights.push(a);
        }
        let beta = BetaCertificate {
            values: (0..=depth)
                .map(|l| {
                    (0..wide.width(l))
                        .map(|j| {
                            if l > 0 && l < depth && copy(l, j) == 2 {
                                -1.0
                            } else {
                                1.0
                            }
                        })
                        .collect()
                })
                .collect(),
        };
        GeneralEmbedding {
            index_map: IndexMapping { maps },
            alpha: AlphaSpec {
                weights,
                biases: (1..=depth).map(|l| vec![0.0; wide.width(l)]).collect(),
            },
            beta,
            b_star: EffectiveBiases::default(),
        }
    }

    /// Presentation of a K-step composition as one general embedding.
    pub fn from_steps(narrow: &NetShape, steps: &[EmbeddingStep]) -> Result<Self> {
        let mut emb = GeneralEmbedding::identity(narrow);
        for (index, step) in steps.iter().enumerate() {
            emb.push_step(step).map_err(|e| EmbeddingError::Step {
                index,
                source: Box::new(e),
            })?;
        }
        Ok(emb)
    }

    fn push_step(&mut self, step: &EmbeddingStep) -> Result<()> {
        let depth = self.index_map.depth();
        let l = step.l;
        check_hidden(l, depth)?;
        let width = self.index_map.maps[l].len();
        let a = step.alpha;
        let new = width + 1;
        // outgoing weights of layer l live in the columns of α^[l+1]
        let next = self.alpha.weights[l].clone();
        match step.kind {
            StepKind::Null => {
                let prev = self.alpha.weights[l - 1].cols();
                self.alpha.weights[l - 1] =
                    append_row(&self.alpha.weights[l - 1], &vec![0.0; prev]);
                self.alpha.biases[l - 1].push(a);
                self.alpha.weights[l] = append_column(&next, &vec![0.0; next.rows()]);
                self.index_map.maps[l].push(0);
                self.beta.values[l].push(0.0);
                self.b_star.entries.push(NullBias {
                    l,
                    i: new,
                    value: a,
                });
            }
            StepKind::Split => {
                let s = step.s;
                if s == 0 || s > width {
                    return Err(EmbeddingError::NeuronOutOfRange { l, s, width });
                }
                let row = self.alpha.weights[l - 1].row(s - 1).to_vec();
                self.alpha.weights[l - 1] = append_row(&self.alpha.weights[l - 1], &row);
                let b = self.alpha.biases[l - 1][s - 1];
                self.alpha.biases[l - 1].push(b);
                let col = next.column(s - 1);
                let mut scaled = next.clone();
                for (r, c) in col.iter().enumerate() {
                    scaled.as_mut_slice()[r * next.cols() + s - 1] = (1.0 - a) * c;
                }
                let appended: Vec<f64> = col.iter().map(|c| a * c).collect();
                self.alpha.weights[l] = append_column(&scaled, &appended);
                let target = self.index_map.maps[l][s - 1];
                self.index_map.maps[l].push(target);
                let bs = self.beta.values[l][s - 1];
                if target == 0 {
                    self.beta.values[l].push(0.0);
                    let value = self.b_star.get(l, s - 1).expect("null neurons carry b*");
                    self.b_star.entries.push(NullBias { l, i: new, value });
                } else {
                    self.beta.values[l][s - 1] = (1.0 - a) * bs;
                    self.beta.values[l].push(a * bs);
                }
            }
        }
        Ok(())
    }

    /// Presentation of `second ∘ self`, where `second` embeds the wide
    /// network of `self` further.
    pub fn then(&self, second: &GeneralEmbedding) -> Result<GeneralEmbedding> {
        let index_map = self.index_map.then(&second.index_map)?;
        let wide = index_map.wide_shape();
        let depth = wide.depth();
        let mid = &second.index_map;
        let mut weights = Vec::with_capacity(depth);
        let mut biases = Vec::with_capacity(depth);
        for l in 1..=depth {
            let (rows, cols) = (wide.width(l), wide.width(l - 1));
            let inner = self.alpha.weight(l);
            let outer = second.alpha.weight(l);
            let mut a = DenseMatrix::zeros(rows, cols);
            for i in 0..rows {
                let ii = mid.target(l, i);
                for j in 0..cols {
                    let jj = mid.target(l - 1, j);
                    let base = if ii == 0 || jj == 0 {
                        1.0
                    } else {
                        inner[(ii - 1, jj - 1)]
                    };
                    a.as_mut_slice()[i * cols + j] = outer[(i, j)] * base;
                }
            }
            weights.push(a);
            biases.push(
                (0..rows)
                    .map(|i| {
                        let ii = mid.target(l, i);
                        let inner_b = if ii == 0 {
                            0.0
                        } else {
                            self.alpha.bias(l)[ii - 1]
                        };
                        second.alpha.bias(l)[i] + inner_b
                    })
                    .collect(),
            );
        }
        let mut b_star = EffectiveBiases::default();
        let beta = BetaCertificate {
            values: (0..=depth)
                .map(|l| {
                    (0..wide.width(l))
                        .map(|i| {
                            let ii = mid.target(l, i);
                            if ii == 0 {
                                0.0
                            } else {
                                second.beta.values[l][i] * self.beta.values[l][ii - 1]
                            }
                        })
                        .collect()
                })
                .collect(),
        };
        for l in 1..depth {
            for i in 0..wide.width(l) {
                let ii = mid.target(l, i);
                let value = if ii == 0 {
                    Some(second.b_star.require(l, i)?)
                } else if self.index_map.is_null(l, ii - 1) {
                    Some(self.b_star.require(l, ii - 1)?)
                } else {
                    None
                };
                if let Some(value) = value {
                    b_star.entries.push(NullBias { l, i: i + 1, value });
                }
            }
        }
        Ok(GeneralEmbedding {
            index_map,
            alpha: AlphaSpec { weights, biases },
            beta,
            b_star,
        })
    }
}

/// `W'^[l]_{ij} = α^[l]_{ij} (W_narr)_{𝕀_l(i), 𝕀_{l−1}(j)}` and
/// `b'^[l]_i = (α_b^[l])_i + (b_narr)_{𝕀_l(i)}`, with
/// `(W_narr)_{0j} = (W_narr)_{i0} = 1` and `(b_narr)_0 = 0`.
pub fn general_apply(
    theta: &ParamTuple,
    map: &IndexMapping,
    alpha: &AlphaSpec,
) -> Result<ParamTuple> {
    map.check_narrow(theta.shape())?;
    let wide = map.wide_shape();
    alpha.check(&wide)?;
    let mut layers = Vec::with_capacity(wide.depth());
    for l in 1..=wide.depth() {
        let (rows, cols) = (wide.width(l), wide.width(l - 1));
        let w = theta.weight(l);
        let b = theta.bias(l);
        let a = alpha.weight(l);
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            let ii = map.target(l, i);
            for j in 0..cols {
                let jj = map.target(l - 1, j);
                let narrow = if ii == 0 || jj == 0 {
                    1.0
                } else {
                    w[(ii - 1, jj - 1)]
                };
                data.push(a[(i, j)] * narrow);
            }
        }
        let bias = (0..rows)
            .map(|i| {
                let ii = map.target(l, i);
                alpha.bias(l)[i] + if ii == 0 { 0.0 } else { b[ii - 1] }
            })
            .collect();
        layers.push(Layer {
            weight: DenseMatrix::from_vec(rows, cols, data)?,
            bias,
        });
    }
    Ok(ParamTuple::new(layers)?)
}

/// Max-abs residuals of each compatibility condition.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CompatibilityReport {
    /// Group sums of `β` (and `β^[L] = 1`).
    pub beta: f64,
    pub forward_effective: f64,
    pub forward_null: f64,
    pub backward_effective: f64,
    pub backward_null: f64,
    pub bias_effective: f64,
    pub null_to_null: f64,
    pub null_to_effective: f64,
    pub tol: f64,
    pub passed: bool,
}

impl CompatibilityReport {
    pub fn max_residual(&self) -> f64 {
        [
            self.beta,
            self.forward_effective,
            self.forward_null,
            self.backward_effective,
            self.backward_null,
            self.bias_effective,
            self.null_to_null,
            self.null_to_effective,
        ]
        .into_iter()
        .fold(0.0, f64::max)
    }
}

fn check_certificate_dims(emb: &GeneralEmbedding) -> Result<NetShape> {
    let wide = emb.index_map.wide_shape();
    emb.alpha.check(&wide)?;
    let ok = emb.beta.values.len() == wide.depth() + 1
        && emb
            .beta
            .values
            .iter()
            .zip(wide.widths())
            .all(|(b, &m)| b.len() == m);
    if !ok {
        return Err(EmbeddingError::MissingCertificate(format!(
            "beta does not match wide shape {wide}"
        )));
    }
    Ok(wide)
}

/// Checks Conditions I and II for `(𝕀, α)` with certificate `(β, B*)`.
pub fn validate_compatibility(
    emb: &GeneralEmbedding,
    sigma: Activation,
    tol: f64,
) -> Result<CompatibilityReport> {
    let wide = check_certificate_dims(emb)?;
    let map = &emb.index_map;
    let narrow = map.narrow_shape();
    let depth = wide.depth();
    let beta = &emb.beta.values;
    let mut rep = CompatibilityReport {
        tol,
        ..Default::default()
    };
    let upd = |slot: &mut f64, v: f64| {
        let v = v.abs();
        *slot = if v.is_nan() {
            f64::INFINITY
        } else {
            slot.max(v)
        }
    };

    for l in 0..=depth {
        for s in 1..=narrow.width(l) {
            let sum: f64 = map.preimage(l, s).iter().map(|&i| beta[l][i]).sum();
            upd(&mut rep.beta, sum - 1.0);
        }
    }
    for v in &beta[depth] {
        upd(&mut rep.beta, v - 1.0);
    }

    let mut sigma_star: Vec<Vec<f64>> = Vec::with_capacity(depth + 1);
    for l in 0..=depth {
        let mut row = vec![0.0; wide.width(l)];
        for j in map.nulls(l) {
            row[j] = sigma.value(emb.b_star.require(l, j)?);
        }
        sigma_star.push(row);
    }

    for l in 1..=depth {
        let a = emb.alpha.weight(l);
        let ab = emb.alpha.bias(l);
        let prev_nulls = map.nulls(l - 1);
        for i in 0..wide.width(l) {
            let null_i = map.is_null(l, i);
            for s in 1..=narrow.width(l - 1) {
                let sum: f64 = map.preimage(l - 1, s).iter().map(|&j| a[(i, j)]).sum();
                if null_i {
                    upd(&mut rep.forward_null, sum);
                } else {
                    upd(&mut rep.forward_effective, sum - 1.0);
                }
            }
            let from_nulls: f64 = prev_nulls
                .iter()
                .map(|&j| a[(i, j)] * sigma_star[l - 1][j])
                .sum();
            if null_i {
                let target = emb.b_star.require(l, i)?;
                upd(&mut rep.null_to_null, from_nulls + ab[i] - target);
            } else {
                upd(&mut rep.bias_effective, ab[i]);
                upd(&mut rep.null_to_effective, from_nulls + ab[i]);
            }
        }
        for j in 0..wide.width(l - 1) {
            let null_j = map.is_null(l - 1, j);
            for k in 1..=narrow.width(l) {
                let sum: f64 = map
                    .preimage(l, k)
                    .iter()
                    .map(|&i| beta[l][i] * a[(i, j)])
                    .sum();
                if null_j {
                    upd(&mut rep.backward_null, sum);
                } else {
                    upd(&mut rep.backward_effective, sum - beta[l - 1][j]);
                }
            }
        }
    }
    rep.passed = rep.max_residual() <= tol;
    Ok(rep)
}

/// Linear system on the entries of `α^[l]` (row-major unknowns) for fixed
/// `β` and `B*`: forward conditions for every `(i, s)`, backward conditions
/// for every `(j, k)`, and the null-to-effective rows that apply once
/// `α_b` vanishes on effective neurons.
pub fn alpha_system(
    map: &IndexMapping,
    beta: &BetaCertificate,
    b_star: &EffectiveBiases,
    sigma: Activation,
    l: usize,
) -> Result<(DenseMatrix, Vec<f64>)> {
    let wide = map.wide_shape();
    let narrow = map.narrow_shape();
    let (rows, cols) = (wide.width(l), wide.width(l - 1));
    let unknowns = rows * cols;
    let mut eqs: Vec<Vec<f64>> = Vec::new();
    let mut rhs = Vec::new();
    for i in 0..rows {
        for s in 1..=narrow.width(l - 1) {
            let mut row = vec![0.0; unknowns];
            for j in map.preimage(l - 1, s) {
                row[i * cols + j] = 1.0;
            }
            eqs.push(row);
            rhs.push(if map.is_null(l, i) { 0.0 } else { 1.0 });
        }
    }
    for j in 0..cols {
        for k in 1..=narrow.width(l) {
            let mut row = vec![0.0; unknowns];
            for i in map.preimage(l, k) {
                row[i * cols + j] = beta.values[l][i];
            }
            eqs.push(row);
            rhs.push(if map.is_null(l - 1, j) {
                0.0
            } else {
                beta.values[l - 1][j]
            });
        }
    }
    let prev_nulls = map.nulls(l - 1);
    if !prev_nulls.is_empty() {
        for i in (0..rows).filter(|&i| !map.is_null(l, i)) {
            let mut row = vec![0.0; unknowns];
            for &j in &prev_nulls {
                row[i * cols + j] = sigma.value(b_star.require(l - 1, j)?);
            }
            eqs.push(row);
            rhs.push(0.0);
        }
    }
    Ok((DenseMatrix::from_rows(&eqs)?, rhs))
}

/// Draws a generic `β`: positive entries per group, normalized to sum to 1.
pub fn sample_beta<R: Rng + ?Sized>(map: &IndexMapping, rng: &mut R) -> BetaCertificate {
    let wide = map.wide_shape();
    let narrow = map.narrow_shape();
    let depth = wide.depth();
    let mut values: Vec<Vec<f64>> = wide.widths().iter().map(|&m| vec![0.0; m]).collect();
    values[0] = vec![1.0; wide.width(0)];
    values[depth] = vec![1.0; wide.width(depth)];
    for l in 1..depth {
        for s in 1..=narrow.width(l) {
            let group = map.preimage(l, s);
            loop {
                let draws: Vec<f64> = group.iter().map(|_| rng.random_range(0.1..1.0)).collect();
                let total: f64 = draws.iter().sum();
                let normalized: Vec<f64> = draws.iter().map(|d| d / total).collect();
                if normalized.iter().all(|b| b.abs() >= 1e-3) {
                    for (&i, b) in group.iter().zip(normalized) {
                        values[l][i] = b;
                    }
                    break;
                }
            }
        }
    }
    BetaCertificate { values }
}

/// Samples `(α, β, B*)` satisfying Conditions I and II for `𝕀`.
pub fn sample_compatible(
    map: &IndexMapping,
    sigma: Activation,
    seed: u64,
) -> Result<GeneralEmbedding> {
    let mut rng = seeded_rng(seed);
    let wide = map.wide_shape();
    let depth = wide.depth();
    let beta = sample_beta(map, &mut rng);
    let mut b_star = EffectiveBiases::default();
    for l in 1..depth {
        for i in map.nulls(l) {
            b_star.entries.push(NullBias {
                l,
                i: i + 1,
                value: rng.random_range(-1.0..1.0),
            });
        }
    }
    let mut weights = Vec::with_capacity(depth);
    let mut biases = Vec::with_capacity(depth);
    for l in 1..=depth {
        let (a, rhs) = alpha_system(map, &beta, &b_star, sigma, l)?;
        let base = least_squares_solve(&a, &rhs)?.solution;
        let r: Vec<f64> = (0..a.cols())
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                0.5 * z
            })
            .collect();
        let ar = a.matvec(&r)?;
        let proj = least_squares_solve(&a, &ar)?.solution;
        let x: Vec<f64> = base
            .iter()
            .zip(r.iter().zip(&proj))
            .map(|(b, (r, p))| b + r - p)
            .collect();
        let ax = a.matvec(&x)?;
        let residual = ax
            .iter()
            .zip(&rhs)
            .map(|(u, v)| (u - v).abs())
            .fold(0.0, f64::max);
        if residual > 1e-9 {
            return Err(EmbeddingError::Infeasible { layer: l, residual });
        }
        let (rows, cols) = (wide.width(l), wide.width(l - 1));
        let alpha_l = DenseMatrix::from_vec(rows, cols, x)?;
        let prev_nulls = map.nulls(l - 1);
        let mut ab = vec![0.0; rows];
        for i in map.nulls(l) {
            let from_nulls: f64 = prev_nulls
                .iter()
                .map(|&j| alpha_l[(i, j)] * sigma.value(b_star.get(l - 1, j).unwrap()))
                .sum();
            ab[i] = b_star.get(l, i).unwrap() - from_nulls;
        }
        weights.push(alpha_l);
        biases.push(ab);
    }
    Ok(GeneralEmbedding {
        index_map: map.clone(),
        alpha: AlphaSpec { weights, biases },
        beta,
        b_star,
    })
}

/// Any embedding operator, as read from an embedding spec file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum EmbeddingSpec {
    Identity,
    Steps { steps: Vec<EmbeddingStep> },
    General(GeneralEmbedding),
    Threefold,
}

impl EmbeddingSpec {
    pub fn apply(&self, theta: &ParamTuple) -> Result<ParamTuple> {
        match self {
            EmbeddingSpec::Identity => Ok(theta.clone()),
            EmbeddingSpec::Steps { steps } => compose(theta, steps),
            EmbeddingSpec::General(g) => g.apply(theta),
            EmbeddingSpec::Threefold => Ok(global_threefold(theta)),
        }
    }

    /// The same operator as a general embedding with its certificate.
    pub fn presentation(&self, narrow: &NetShape) -> Result<GeneralEmbedding> {
        match self {
            EmbeddingSpec::Identity => Ok(GeneralEmbedding::identity(narrow)),
            EmbeddingSpec::Steps { steps } => GeneralEmbedding::from_steps(narrow, steps),
            EmbeddingSpec::General(g) => {
                g.index_map.check_narrow(narrow)?;
                Ok(g.clone())
            }
            EmbeddingSpec::Threefold => Ok(GeneralEmbedding::threefold(narrow)),
        }
    }

    pub fn wide_shape(&self, narrow: &NetShape) -> Result<NetShape> {
        Ok(self.presentation(narrow)?.index_map.wide_shape())
    }
}

/// `𝔗(θ) = Aθ + c` in vectorized coordinates.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AffineMap {
    pub a: DenseMatrix,
    pub c: Vec<f64>,
}

impl AffineMap {
    pub fn apply(&self, v: &[f64]) -> Result<Vec<f64>> {
        let mut out = self.a.matvec(v)?;
        for (o, c) in out.iter_mut().zip(&self.c) {
            *o += c;
        }
        Ok(out)
    }
}

/// Recovers `(A, c)` from an embedding closure by probing unit vectors and
/// checks affinity on five random parameter tuples.
pub fn affine_extract<F>(embed: F, narrow: &NetShape, seed: u64) -> Result<AffineMap>
where
    F: Fn(&ParamTuple) -> Result<ParamTuple>,
{
    let m = narrow.param_count();
    let c = embed(&ParamTuple::zeros(narrow))?.to_vector();
    let mut a = DenseMatrix::zeros(c.len(), m);
    let mut unit = vec![0.0; m];
    for k in 0..m {
        unit[k] = 1.0;
        let col = embed(&ParamTuple::from_vector(narrow, &unit)?)?.to_vector();
        if col.len() != c.len() {
            return Err(EmbeddingError::Dimension(
                "embedding changes output size".into(),
            ));
        }
        for (r, (v, c0)) in col.iter().zip(&c).enumerate() {
            a.as_mut_slice()[r * m + k] = v - c0;
        }
        unit[k] = 0.0;
    }
    let map = AffineMap { a, c };
    let mut rng = seeded_rng(seed);
    for _ in 0..5 {
        let theta = ParamTuple::random_normal(narrow, 1.0, &mut rng);
        let direct = embed(&theta)?.to_vector();
        let via = map.apply(&theta.to_vector())?;
        let residual = direct
            .iter()
            .zip(&via)
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max);
        if residual > 1e-10 * (1.0 + max_abs(&direct)) {
            return Err(EmbeddingError::NotAffine { residual });
        }
    }
    Ok(map)
}

/// Residuals of the certificate check on every sample.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CertificateTraceReport {
    /// `(f_wide)_j − (f_narr)_{𝕀(j)}` over effective neurons.
    pub feature: f64,
    /// `(e_wide)_j − β_j (e_narr)_{𝕀(j)}` over effective neurons.
    pub error: f64,
    /// Deviation of null-neuron features from `σ(b*_j)`.
    pub null_feature: f64,
    /// Largest `|(e_wide)_j|` over null neurons.
    pub null_error: f64,
    pub tol: f64,
    pub passed: bool,
}

/// Verifies the feature/error structure a general compatible embedding
/// guarantees, sample by sample.
#[allow(clippy::too_many_arguments)]
pub fn check_certificate_trace(
    narrow: &ParamTuple,
    wide: &ParamTuple,
    emb: &GeneralEmbedding,
    sigma: Activation,
    loss: &dyn Loss,
    data: &Dataset,
    tol: f64,
) -> Result<CertificateTraceReport> {
    let map = &emb.index_map;
    map.check_narrow(narrow.shape())?;
    if &map.wide_shape() != wide.shape() {
        return Err(EmbeddingError::Dimension(
            "wide parameters do not match index mapping".into(),
        ));
    }
    let mut rep = CertificateTraceReport {
        tol,
        ..Default::default()
    };
    for (x, y) in data.samples() {
        let tn = forward_trace(narrow, sigma, loss, x, y)?;
        let tw = forward_trace(wide, sigma, loss, x, y)?;
        for l in 0..=map.depth() {
            for j in 0..wide.shape().width(l) {
                let t = map.target(l, j);
                if t == 0 {
                    let expect = sigma.value(emb.b_star.require(l, j)?);
                    rep.null_feature = rep.null_feature.max((tw.features[l][j] - expect).abs());
                    rep.null_error = rep.null_error.max(tw.hadamard[l][j].abs());
                } else {
                    let df = (tw.features[l][j] - tn.features[l][t - 1]).abs();
                    let de =
                        (tw.hadamard[l][j] - emb.beta.values[l][j] * tn.hadamard[l][t - 1]).abs();
                    rep.feature = rep.feature.max(df);
                    rep.error = rep.error.max(de);
                }
            }
        }
    }
    let worst = rep
        .feature
        .max(rep.error)
        .max(rep.null_feature)
        .max(rep.null_error);
    rep.passed = worst <= tol;
    Ok(rep)
}

/// Largest least-squares residual when reproducing, at every hidden layer,
/// each narrow feature column from the wide feature columns plus a constant,
/// and each wide column from the narrow ones.
pub fn representation_residual(
    narrow: &ParamTuple,
    wide: &ParamTuple,
    sigma: Activation,
    data: &Dataset,
) -> Result<f64> {
    let n = data.len();
    let fn_: Vec<Vec<Vec<f64>>> = data
        .inputs
        .iter()
        .map(|x| features(narrow, sigma, x))
        .collect::<std::result::Result<_, _>>()?;
    let fw: Vec<Vec<Vec<f64>>> = data
        .inputs
        .iter()
        .map(|x| features(wide, sigma, x))
        .collect::<std::result::Result<_, _>>()?;
    let column = |f: &[Vec<Vec<f64>>], l: usize, j: usize| -> Vec<f64> {
        (0..n).map(|k| f[k][l][j]).collect()
    };
    let basis = |f: &[Vec<Vec<f64>>], l: usize, width: usize| -> Result<DenseMatrix> {
        let mut m = DenseMatrix::zeros(n, width + 1);
        for k in 0..n {
            for j in 0..width {
                m.as_mut_slice()[k * (width + 1) + j] = f[k][l][j];
            }
            m.as_mut_slice()[k * (width + 1) + width] = 1.0;
        }
        Ok(m)
    };
    let mut worst: f64 = 0.0;
    for l in 1..narrow.depth() {
        let (mn, mw) = (narrow.shape().width(l), wide.shape().width(l));
        let bw = basis(&fw, l, mw)?;
        let bn = basis(&fn_, l, mn)?;
        for j in 0..mn {
            let target = column(&fn_, l, j);
            let fit = least_squares_solve(&bw, &target)?;
            worst = worst.max(fit.residual_norm / (1.0 + norm2(&target)));
        }
        for j in 0..mw {
            let target = column(&fw, l, j);
            let fit = least_squares_solve(&bn, &target)?;
            worst = worst.max(fit.residual_norm / (1.0 + norm2(&target)));
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{forward, EmpiricalRisk, Mse};
    use crate::numerics::{max_abs_diff, numeric_rank};
    use crate::testutil::{dataset_a, theta_a};

    fn random_inputs(rng: &mut impl Rng, count: usize, dim: usize) -> Vec<Vec<f64>> {
        (0..count)
            .map(|_| (0..dim).map(|_| rng.random_range(-2.0..2.0)).collect())
            .collect()
    }

    fn assert_same_outputs(a: &ParamTuple, b: &ParamTuple, sigma: Activation, seed: u64) {
        let mut rng = seeded_rng(seed);
        for x in random_inputs(&mut rng, 20, a.shape().input_dim()) {
            let ya = forward(a, sigma, &x).unwrap();
            let yb = forward(b, sigma, &x).unwrap();
            assert!(
                max_abs_diff(&ya, &yb) <= 1e-12 * (1.0 + max_abs(&ya)),
                "{ya:?} vs {yb:?}"
            );
        }
    }

    #[test]
    fn null_embed_reference() {
        let w = null_embed(&theta_a(), 1, 0.7).unwrap();
        assert_eq!(w.shape().widths(), &[1, 3, 1]);
        assert_eq!(w.weight(1).to_rows(), vec![vec![1.0], vec![2.0], vec![0.0]]);
        assert_eq!(w.bias(1), &[0.0, 0.0, 0.7]);
        assert_eq!(w.weight(2).to_rows(), vec![vec![1.0, -1.0, 0.0]]);
        assert_same_outputs(&theta_a(), &w, Activation::Tanh, 1);
        assert!(null_embed(&theta_a(), 2, 0.1).is_err());
        assert!(null_embed(&theta_a(), 0, 0.1).is_err());
    }

    #[test]
    fn split_embed_reference() {
        let w = split_embed(&theta_a(), 1, 2, 0.25).unwrap();
        assert_eq!(w.weight(2).to_rows(), vec![vec![1.0, -0.75, -0.25]]);
        assert_eq!(w.weight(1).to_rows(), vec![vec![1.0], vec![2.0], vec![2.0]]);
        assert_same_outputs(&theta_a(), &w, Activation::Tanh, 2);
        let z = split_embed(&theta_a(), 1, 1, 0.0).unwrap();
        assert_eq!(z.weight(2).to_rows(), vec![vec![1.0, -1.0, 0.0]]);
        assert!(matches!(
            split_embed(&theta_a(), 1, 3, 0.5),
            Err(EmbeddingError::NeuronOutOfRange { .. })
        ));
    }

    #[test]
    fn appended_trace_entries() {
        let th = theta_a();
        let (x, y) = ([1.0], [0.3]);
        let tn = forward_trace(&th, Activation::Tanh, &Mse, &x, &y).unwrap();
        let a = 0.7;
        let wn = null_embed(&th, 1, a).unwrap();
        let tw = forward_trace(&wn, Activation::Tanh, &Mse, &x, &y).unwrap();
        assert_eq!(tw.features[1][..2], tn.features[1][..]);
        assert!((tw.features[1][2] - a.tanh()).abs() <= 1e-12);
        assert!((tw.feature_grads[1][2] - Activation::Tanh.derivative(a)).abs() <= 1e-12);
        assert_eq!(tw.errors[1][2], 0.0);

        let ws = split_embed(&th, 1, 2, 0.25).unwrap();
        let tw = forward_trace(&ws, Activation::Tanh, &Mse, &x, &y).unwrap();
        assert_eq!(tw.features[1][2], tn.features[1][1]);
        assert_eq!(tw.feature_grads[1][2], tn.feature_grads[1][1]);
        assert!((tw.errors[1][1] - 0.75 * tn.errors[1][1]).abs() <= 1e-12);
        assert!((tw.errors[1][2] - 0.25 * tn.errors[1][1]).abs() <= 1e-12);
    }

    #[test]
    fn compose_examples() {
        let th = theta_a();
        assert_eq!(compose(&th, &[]).unwrap(), th);
        let steps = [EmbeddingStep::null(1, 1.0), EmbeddingStep::split(1, 1, 0.5)];
        let w = compose(&th, &steps).unwrap();
        assert_eq!(w.shape().widths(), &[1, 4, 1]);
        assert_same_outputs(&th, &w, Activation::Tanh, 3);
        let bad = [
            EmbeddingStep::split(1, 1, 0.5),
            EmbeddingStep::split(1, 9, 0.5),
        ];
        match compose(&th, &bad) {
            Err(EmbeddingError::Step { index, .. }) => assert_eq!(index, 1),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn threefold_reference() {
        let w = global_threefold(&theta_a());
        assert_eq!(w.shape().widths(), &[1, 6, 1]);
        assert_eq!(
            w.weight(2).to_rows(),
            vec![vec![1.0, -1.0, 1.0, -1.0, -1.0, 1.0]]
        );
        let y = forward(&w, Activation::Tanh, &[1.0]).unwrap()[0];
        assert!((y - (1f64.tanh() - 2f64.tanh() + 0.5)).abs() < 1e-14);
        let zero = ParamTuple::zeros(&NetShape::new(vec![2, 3, 2, 1]).unwrap());
        let mut z = zero.clone();
        z.bias_mut(1)[0] = 0.4;
        z.bias_mut(3)[0] = -0.2;
        let wz = global_threefold(&z);
        assert_eq!(wz.bias(1), &[0.4, 0.0, 0.0, 0.4, 0.0, 0.0, 0.4, 0.0, 0.0]);
        assert_eq!(
            forward(&wz, Activation::Tanh, &[0.3, 0.1]).unwrap(),
            vec![-0.2]
        );
    }

    #[test]
    fn general_apply_reproduces_special_cases() {
        let shape = NetShape::new(vec![2, 3, 2, 1]).unwrap();
        let th = ParamTuple::random_normal(&shape, 1.0, &mut seeded_rng(8));
        let id = GeneralEmbedding::identity(&shape);
        assert_eq!(id.apply(&th).unwrap(), th);

        let steps = [
            EmbeddingStep::split(2, 1, 0.3),
            EmbeddingStep::null(1, -0.4),
            EmbeddingStep::split(1, 4, 0.6),
            EmbeddingStep::split(1, 2, -0.5),
        ];
        let pres = GeneralEmbedding::from_steps(&shape, &steps).unwrap();
        let via = pres.apply(&th).unwrap();
        let direct = compose(&th, &steps).unwrap();
        assert!(max_abs_diff(&via.to_vector(), &direct.to_vector()) <= 1e-15);

        let tf = GeneralEmbedding::threefold(&shape);
        assert_eq!(tf.apply(&th).unwrap(), global_threefold(&th));
    }

    #[test]
    fn index_mapping_validation() {
        assert!(IndexMapping::new(vec![vec![1], vec![1, 0, 2], vec![1]]).is_ok());
        assert!(IndexMapping::new(vec![vec![1], vec![1, 0, 3], vec![1]]).is_err());
        assert!(IndexMapping::new(vec![vec![1], vec![0, 0], vec![1]]).is_err());
        assert!(IndexMapping::new(vec![vec![2], vec![1], vec![1]]).is_err());
        let m = IndexMapping::new(vec![vec![1], vec![2, 1, 0, 2], vec![1]]).unwrap();
        assert_eq!(m.narrow_shape().widths(), &[1, 2, 1]);
        assert_eq!(m.wide_shape().widths(), &[1, 4, 1]);
        assert_eq!(m.preimage(1, 2), vec![0, 3]);
        assert_eq!(m.nulls(1), vec![2]);
        assert_eq!(m.added(), vec![0, 2, 0]);
        let th = theta_a();
        let bad = NetShape::new(vec![1, 3, 1]).unwrap();
        assert!(m.check_narrow(th.shape()).is_ok());
        assert!(m.check_narrow(&bad).is_err());
    }

    #[test]
    fn certificates_validate() {
        let shape = NetShape::new(vec![1, 2, 1]).unwrap();
        let id = GeneralEmbedding::identity(&shape);
        let rep = validate_compatibility(&id, Activation::Tanh, 1e-12).unwrap();
        assert!(rep.passed && rep.max_residual() == 0.0);

        let split =
            GeneralEmbedding::from_steps(&shape, &[EmbeddingStep::split(1, 2, 0.25)]).unwrap();
        assert_eq!(split.beta.values[1], vec![1.0, 0.75, 0.25]);
        assert!(
            validate_compatibility(&split, Activation::Tanh, 1e-12)
                .unwrap()
                .passed
        );

        let deep = NetShape::new(vec![2, 2, 3, 1]).unwrap();
        let tf = GeneralEmbedding::threefold(&deep);
        assert_eq!(tf.beta.values[1], vec![1.0, 1.0, 1.0, 1.0, -1.0, -1.0]);
        assert!(
            validate_compatibility(&tf, Activation::Sigmoid, 1e-12)
                .unwrap()
                .passed
        );

        let mut broken = split.clone();
        broken.beta.values[1][2] = 0.3;
        let rep = validate_compatibility(&broken, Activation::Tanh, 1e-12).unwrap();
        assert!(!rep.passed);
        assert!(rep.beta > 0.01);
    }

    #[test]
    fn null_certificate_and_missing_bias() {
        let shape = NetShape::new(vec![1, 2, 2, 1]).unwrap();
        let steps = [
            EmbeddingStep::null(1, 0.3),
            EmbeddingStep::split(1, 3, 0.4),
            EmbeddingStep::null(2, -1.0),
        ];
        let pres = GeneralEmbedding::from_steps(&shape, &steps).unwrap();
        for act in Activation::ALL {
            assert!(
                validate_compatibility(&pres, act, 1e-12).unwrap().passed,
                "{act}"
            );
        }
        let mut missing = pres.clone();
        missing.b_star.entries.clear();
        assert!(matches!(
            validate_compatibility(&missing, Activation::Tanh, 1e-12),
            Err(EmbeddingError::MissingCertificate(_))
        ));
    }

    #[test]
    fn sampled_identity_is_identity() {
        let shape = NetShape::new(vec![2, 3, 2]).unwrap();
        let s = sample_compatible(&IndexMapping::identity(&shape), Activation::Tanh, 5).unwrap();
        let id = GeneralEmbedding::identity(&shape);
        assert!(
            max_abs_diff(
                &s.alpha.weights[0].clone().into_vec(),
                id.alpha.weights[0].as_slice()
            ) < 1e-12
        );
        assert!(
            max_abs_diff(
                &s.alpha.weights[1].clone().into_vec(),
                id.alpha.weights[1].as_slice()
            ) < 1e-12
        );
    }

    #[test]
    fn sampled_two_way_split_is_split_family() {
        let map = IndexMapping::new(vec![vec![1], vec![1, 2, 2], vec![1]]).unwrap();
        for seed in 0..5 {
            let s = sample_compatible(&map, Activation::Tanh, seed).unwrap();
            let b = &s.beta.values[1];
            let a = b[2];
            assert!((b[1] - (1.0 - a)).abs() < 1e-12);
            let direct = split_embed(&theta_a(), 1, 2, a).unwrap();
            let via = s.apply(&theta_a()).unwrap();
            assert!(max_abs_diff(&via.to_vector(), &direct.to_vector()) < 1e-10);
        }
    }

    #[test]
    fn sampled_deep_embedding_preserves_outputs() {
        let map = IndexMapping::new(vec![vec![1], vec![1, 2, 2], vec![2, 1, 1], vec![1]]).unwrap();
        let narrow = map.narrow_shape();
        let mut rng = seeded_rng(13);
        for seed in 0..5 {
            let emb = sample_compatible(&map, Activation::Tanh, seed).unwrap();
            assert!(
                validate_compatibility(&emb, Activation::Tanh, 1e-8)
                    .unwrap()
                    .passed
            );
            let th = ParamTuple::random_normal(&narrow, 1.0, &mut rng);
            let w = emb.apply(&th).unwrap();
            for x in random_inputs(&mut rng, 20, 1) {
                let a = forward(&th, Activation::Tanh, &x).unwrap()[0];
                let b = forward(&w, Activation::Tanh, &x).unwrap()[0];
                assert!((a - b).abs() <= 1e-10 * (1.0 + a.abs()));
            }
        }
    }

    #[test]
    fn sampled_with_nulls_validates_and_traces() {
        let map =
            IndexMapping::new(vec![vec![1], vec![1, 0, 2, 1], vec![0, 1, 2, 0], vec![1]]).unwrap();
        let narrow = map.narrow_shape();
        let th = ParamTuple::random_normal(&narrow, 1.0, &mut seeded_rng(3));
        let data = Dataset::new(
            vec![vec![-1.0], vec![0.2], vec![1.5]],
            vec![vec![0.1], vec![0.7], vec![-0.3]],
        )
        .unwrap();
        for act in Activation::SMOOTH {
            let emb = sample_compatible(&map, act, 11).unwrap();
            assert!(validate_compatibility(&emb, act, 1e-8).unwrap().passed);
            let w = emb.apply(&th).unwrap();
            let rep = check_certificate_trace(&th, &w, &emb, act, &Mse, &data, 1e-8).unwrap();
            assert!(rep.passed, "{act}: {rep:?}");
        }
    }

    #[test]
    fn composed_presentations_validate() {
        let shape = NetShape::new(vec![1, 2, 2, 1]).unwrap();
        let first = GeneralEmbedding::from_steps(
            &shape,
            &[EmbeddingStep::null(2, 0.5), EmbeddingStep::split(1, 1, 0.3)],
        )
        .unwrap();
        let mid = first.index_map.wide_shape();
        let second = GeneralEmbedding::threefold(&mid);
        let both = first.then(&second).unwrap();
        assert!(
            validate_compatibility(&both, Activation::Tanh, 1e-12)
                .unwrap()
                .passed
        );
        let th = ParamTuple::random_normal(&shape, 1.0, &mut seeded_rng(21));
        let direct = global_threefold(&first.apply(&th).unwrap());
        assert!(max_abs_diff(&both.apply(&th).unwrap().to_vector(), &direct.to_vector()) < 1e-14);

        let sampled_map = IndexMapping::new(vec![
            vec![1],
            vec![1, 2, 3, 3, 0],
            vec![1, 2, 3, 1],
            vec![1],
        ])
        .unwrap();
        let sampled = sample_compatible(&sampled_map, Activation::Tanh, 2).unwrap();
        let chain = first.then(&sampled).unwrap();
        assert!(
            validate_compatibility(&chain, Activation::Tanh, 1e-8)
                .unwrap()
                .passed
        );
        let direct = sampled.apply(&first.apply(&th).unwrap()).unwrap();
        assert!(max_abs_diff(&chain.apply(&th).unwrap().to_vector(), &direct.to_vector()) < 1e-12);
    }

    #[test]
    fn affine_extraction() {
        let shape = NetShape::new(vec![1, 2, 1]).unwrap();
        let id = affine_extract(|t| Ok(t.clone()), &shape, 0).unwrap();
        assert_eq!(id.a, DenseMatrix::identity(shape.param_count()));
        assert!(id.c.iter().all(|&c| c == 0.0));

        let null = affine_extract(|t| null_embed(t, 1, 0.7), &shape, 0).unwrap();
        let nz: Vec<usize> = (0..null.c.len()).filter(|&k| null.c[k] != 0.0).collect();
        let wide = NetShape::new(vec![1, 3, 1]).unwrap();
        assert_eq!(nz, vec![wide.bias_index(1, 2)]);
        assert_eq!(null.c[nz[0]], 0.7);

        for map in [
            affine_extract(|t| split_embed(t, 1, 1, 0.4), &shape, 1).unwrap(),
            affine_extract(|t| Ok(global_threefold(t)), &shape, 2).unwrap(),
        ] {
            assert_eq!(numeric_rank(&map.a, 1e-12), shape.param_count());
        }

        let square = |t: &ParamTuple| {
            let v: Vec<f64> = t.to_vector().iter().map(|x| x * x).collect();
            Ok(ParamTuple::from_vector(t.shape(), &v)?)
        };
        assert!(matches!(
            affine_extract(square, &shape, 3),
            Err(EmbeddingError::NotAffine { .. })
        ));
    }

    #[test]
    fn threefold_copy_indices_land_on_copies() {
        let narrow = NetShape::new(vec![2, 2, 3, 1]).unwrap();
        let th = ParamTuple::random_normal(&narrow, 1.0, &mut seeded_rng(6));
        let w = global_threefold(&th).to_vector();
        let v = th.to_vector();
        let last_w = narrow.layer_offset(3) + narrow.width(2);
        for p in 0..narrow.param_count() {
            for c in 0..3 {
                match threefold_copy_index(&narrow, p, c) {
                    Some(q) if p < narrow.upper_param_count() => assert_eq!(w[q], v[p]),
                    Some(q) => {
                        assert!(p < last_w);
                        let sign = if c == 2 { -1.0 } else { 1.0 };
                        assert_eq!(w[q], sign * v[p]);
                    }
                    None => assert_eq!(p, narrow.param_count() - 1),
                }
            }
        }
    }

    #[test]
    fn representation_and_criticality_on_reference() {
        let data = dataset_a();
        let th = theta_a();
        for w in [
            null_embed(&th, 1, 0.2).unwrap(),
            split_embed(&th, 1, 1, 0.7).unwrap(),
            global_threefold(&th),
        ] {
            assert!(representation_residual(&th, &w, Activation::Tanh, &data).unwrap() < 1e-8);
        }
        let r = EmpiricalRisk::new(Activation::Tanh, &Mse, &data);
        let g = r.gradient(&th).unwrap();
        let w = split_embed(&th, 1, 1, 0.7).unwrap();
        let gw = r.gradient(&w).unwrap();
        // gradient of the copied neuron's weights are split by (1-α, α)
        assert!((gw[0] - 0.3 * g[0]).abs() < 1e-14);
        assert!((gw[2] - 0.7 * g[0]).abs() < 1e-14);
    }
}
