//! Feed-forward network representation: loading, validation, evaluation, and
//! splitting into sub-networks.
//!
//! A network is an ordered list of affine layers `x \mapsto W x + b` with one
//! shared scalar activation applied between consecutive layers (but not after
//! the last one). `ell` denotes the number of hidden activation layers; an
//! `ell = 0` network is a pure affine map.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::DenseMatrix;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("network document parse error: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("network has no layers")]
    EmptyLayerList,
    #[error("layer {layer} weight is ragged or empty")]
    MalformedWeight { layer: usize },
    #[error("layer {layer}: weight has {cols} columns but previous layer produced {expected} outputs")]
    LayerMismatch { layer: usize, cols: usize, expected: usize },
    #[error("layer {layer}: bias length {got} does not match {expected} weight rows")]
    BiasLength { layer: usize, got: usize, expected: usize },
    #[error("layer {layer}: non-finite entry")]
    NonFiniteEntry { layer: usize },
    #[error("invalid sector bounds: alpha = {alpha}, beta = {beta} (need 0 <= alpha < beta < inf)")]
    InvalidSector { alpha: f64, beta: f64 },
    #[error("sector override requires both alpha and beta")]
    PartialSectorOverride,
    #[error("unknown activation name {0:?}")]
    UnknownActivation(String),
    #[error("leaky_relu requires a negative_slope in (0, 1), got {0:?}")]
    InvalidLeakySlope(Option<f64>),
    #[error("input length {got} does not match network input dimension {expected}")]
    InputLength { expected: usize, got: usize },
    #[error("split chunk must be at least 1")]
    InvalidChunk,
}

/// Sector bounds `(alpha, beta)` on the slopes of the activation's chords,
/// with `0 <= alpha < beta < inf`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SectorBounds {
    pub alpha: f64,
    pub beta: f64,
}

impl SectorBounds {
    pub fn new(alpha: f64, beta: f64) -> Result<Self, ModelError> {
        if !(alpha >= 0.0 && alpha < beta && beta.is_finite()) {
            return Err(ModelError::InvalidSector { alpha, beta });
        }
        Ok(Self { alpha, beta })
    }
}

/// The concrete scalar activation applied component-wise at hidden layers.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "name")]
pub enum ActivationKind {
    Relu,
    Tanh,
    Sigmoid,
    LeakyRelu { negative_slope: f64 },
}

impl ActivationKind {
    pub fn apply(&self, x: f64) -> f64 {
        match self {
            ActivationKind::Relu => x.max(0.0),
            ActivationKind::Tanh => x.tanh(),
            ActivationKind::Sigmoid => 1.0 / (1.0 + (-x).exp()),
            ActivationKind::LeakyRelu { negative_slope } => {
                if x >= 0.0 {
                    x
                } else {
                    negative_slope * x
                }
            }
        }
    }

    /// `true` when the activation is piecewise linear, in which case the
    /// network's Jacobian is constant on each activation pattern.
    pub fn is_piecewise_linear(&self) -> bool {
        matches!(self, ActivationKind::Relu | ActivationKind::LeakyRelu { .. })
    }

    /// Slope of the active linear piece at pre-activation `x`; only
    /// meaningful for piecewise-linear activations.
    pub fn piece_slope(&self, x: f64) -> f64 {
        match self {
            ActivationKind::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            ActivationKind::LeakyRelu { negative_slope } => {
                if x > 0.0 {
                    1.0
                } else {
                    *negative_slope
                }
            }
            _ => f64::NAN,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            ActivationKind::Relu => "relu",
            ActivationKind::Tanh => "tanh",
            ActivationKind::Sigmoid => "sigmoid",
            ActivationKind::LeakyRelu { .. } => "leaky_relu",
        }
    }
}

/// Activation choice plus an optional explicit sector override.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Activation {
    pub kind: ActivationKind,
    pub sector_override: Option<SectorBounds>,
}

impl Activation {
    pub fn new(kind: ActivationKind) -> Self {
        Self { kind, sector_override: None }
    }

    pub fn with_override(kind: ActivationKind, sector: SectorBounds) -> Self {
        Self { kind, sector_override: Some(sector) }
    }
}

/// Sector bounds for an activation: the built-in table unless an explicit
/// override is present.
///
/// ReLU, tanh, and sigmoid all use the sector `(0, 1)`; leaky ReLU with
/// negative slope `a` uses `(a, 1)`. The sigmoid default is deliberately the
/// loose `(0, 1)` rather than the tighter `(0, 1/4)`; callers wanting the
/// tight sector can set the override.
pub fn sector_for(activation: &Activation) -> Result<SectorBounds, ModelError> {
    if let Some(sector) = activation.sector_override {
        return SectorBounds::new(sector.alpha, sector.beta);
    }
    match activation.kind {
        ActivationKind::Relu | ActivationKind::Tanh | ActivationKind::Sigmoid => {
            SectorBounds::new(0.0, 1.0)
        }
        ActivationKind::LeakyRelu { negative_slope } => {
            if !(negative_slope > 0.0 && negative_slope < 1.0) {
                return Err(ModelError::InvalidLeakySlope(Some(negative_slope)));
            }
            SectorBounds::new(negative_slope, 1.0)
        }
    }
}

/// One affine layer: `weight` has shape `n_out x n_in`, `bias` length `n_out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub weight: DenseMatrix,
    pub bias: Vec<f64>,
}

impl Layer {
    pub fn new(weight: DenseMatrix, bias: Vec<f64>) -> Result<Self, ModelError> {
        if bias.len() != weight.rows() {
            return Err(ModelError::BiasLength { layer: 0, got: bias.len(), expected: weight.rows() });
        }
        Ok(Self { weight, bias })
    }

    fn output_dim(&self) -> usize {
        self.weight.rows()
    }
}

/// A validated feed-forward network. Immutable after construction.
#[derive(Debug, Clone, PartialEq)]
pub struct FeedForwardNetwork {
    layers: Vec<Layer>,
    activation: Activation,
    sector: SectorBounds,
    dims: Vec<usize>,
    hidden_total: usize,
}

impl FeedForwardNetwork {
    pub fn new(layers: Vec<Layer>, activation: Activation) -> Result<Self, ModelError> {
        if layers.is_empty() {
            return Err(ModelError::EmptyLayerList);
        }
        for (k, layer) in layers.iter().enumerate() {
            if layer.weight.rows() == 0 || layer.weight.cols() == 0 {
                return Err(ModelError::MalformedWeight { layer: k });
            }
            if layer.bias.len() != layer.weight.rows() {
                return Err(ModelError::BiasLength {
                    layer: k,
                    got: layer.bias.len(),
                    expected: layer.weight.rows(),
                });
            }
            if layer.bias.iter().any(|b| !b.is_finite()) {
                return Err(ModelError::NonFiniteEntry { layer: k });
            }
            if k > 0 && layer.weight.cols() != layers[k - 1].output_dim() {
                return Err(ModelError::LayerMismatch {
                    layer: k,
                    cols: layer.weight.cols(),
                    expected: layers[k - 1].output_dim(),
                });
            }
        }
        let sector = sector_for(&activation)?;
        let mut dims = Vec::with_capacity(layers.len() + 1);
        dims.push(layers[0].weight.cols());
        dims.extend(layers.iter().map(Layer::output_dim));
        let hidden_total = dims[1..dims.len() - 1].iter().sum();
        Ok(Self { layers, activation, sector, dims, hidden_total })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn activation(&self) -> &Activation {
        &self.activation
    }

    pub fn sector(&self) -> SectorBounds {
        self.sector
    }

    /// Layer widths `(n_0, ..., n_{ell+1})`.
    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    /// Number of hidden activation layers.
    pub fn ell(&self) -> usize {
        self.layers.len() - 1
    }

    /// Total number of hidden neurons `n = n_1 + ... + n_ell`.
    pub fn hidden_total(&self) -> usize {
        self.hidden_total
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.dims.last().unwrap()
    }

    /// The network with its final weight scaled by `factor` (bias kept).
    pub fn with_scaled_final_layer(&self, factor: f64) -> FeedForwardNetwork {
        self.with_scaled_layer(self.layers.len() - 1, factor)
    }

    /// The network with its first weight scaled by `factor` (bias kept).
    pub fn with_scaled_first_layer(&self, factor: f64) -> FeedForwardNetwork {
        self.with_scaled_layer(0, factor)
    }

    fn with_scaled_layer(&self, index: usize, factor: f64) -> FeedForwardNetwork {
        let mut layers = self.layers.clone();
        layers[index].weight = layers[index].weight.scaled(factor);
        FeedForwardNetwork {
            layers,
            activation: self.activation,
            sector: self.sector,
            dims: self.dims.clone(),
            hidden_total: self.hidden_total,
        }
    }
}

/// Evaluates the network at `x`.
pub fn forward(net: &FeedForwardNetwork, x: &[f64]) -> Result<Vec<f64>, ModelError> {
    if x.len() != net.input_dim() {
        return Err(ModelError::InputLength { expected: net.input_dim(), got: x.len() });
    }
    let mut signal = x.to_vec();
    let ell = net.ell();
    for (k, layer) in net.layers.iter().enumerate() {
        let mut pre = layer.weight.matvec(&signal);
        for (p, b) in pre.iter_mut().zip(&layer.bias) {
            *p += b;
        }
        if k < ell {
            for p in pre.iter_mut() {
                *p = net.activation.kind.apply(*p);
            }
        }
        signal = pre;
    }
    Ok(signal)
}

/// Evaluates the network and returns the activation signals
/// `(x^0, ..., x^ell)` along with the output.
pub fn forward_trace(
    net: &FeedForwardNetwork,
    x: &[f64],
) -> Result<(Vec<Vec<f64>>, Vec<f64>), ModelError> {
    if x.len() != net.input_dim() {
        return Err(ModelError::InputLength { expected: net.input_dim(), got: x.len() });
    }
    let ell = net.ell();
    let mut stack = Vec::with_capacity(ell + 1);
    stack.push(x.to_vec());
    for layer in &net.layers[..ell] {
        let current = stack.last().unwrap();
        let mut pre = layer.weight.matvec(current);
        for (p, b) in pre.iter_mut().zip(&layer.bias) {
            *p = net.activation.kind.apply(*p + b);
        }
        stack.push(pre);
    }
    let last = &net.layers[ell];
    let mut out = last.weight.matvec(stack.last().unwrap());
    for (o, b) in out.iter_mut().zip(&last.bias) {
        *o += b;
    }
    Ok((stack, out))
}

/// Splits the network at activation outputs every `chunk` activation layers.
///
/// Every sub-network except the last gets an appended identity output layer
/// (zero bias) so it matches the standard shape; the last keeps the original
/// final layer. Composing the pieces reproduces `forward` exactly. A chunk of
/// `ell` or more returns the network unchanged as a singleton.
pub fn split_network(
    net: &FeedForwardNetwork,
    chunk: usize,
) -> Result<Vec<FeedForwardNetwork>, ModelError> {
    if chunk == 0 {
        return Err(ModelError::InvalidChunk);
    }
    let ell = net.ell();
    if chunk >= ell {
        return Ok(vec![net.clone()]);
    }
    let mut parts = Vec::new();
    let mut start = 0usize; // index of the first linear layer of the part
    while start + chunk < ell {
        let hidden: Vec<Layer> = net.layers[start..start + chunk].to_vec();
        let width = hidden.last().unwrap().output_dim();
        let mut layers = hidden;
        layers.push(Layer { weight: DenseMatrix::identity(width), bias: vec![0.0; width] });
        parts.push(FeedForwardNetwork::new(layers, net.activation)?);
        start += chunk;
    }
    parts.push(FeedForwardNetwork::new(net.layers[start..].to_vec(), net.activation)?);
    Ok(parts)
}

// --- document schema ------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
struct NetworkDoc {
    layers: Vec<LayerDoc>,
    activation: ActivationDoc,
}

#[derive(Debug, Serialize, Deserialize)]
struct LayerDoc {
    weight: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    bias: Option<Vec<f64>>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ActivationDoc {
    name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    negative_slope: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    alpha: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    beta: Option<f64>,
}

/// Parses and validates a network document (JSON, see the schema in the
/// repository README). Weights are row-major `n_out x n_in`; a missing bias
/// is treated as zero.
pub fn load_network(bytes: &[u8]) -> Result<FeedForwardNetwork, ModelError> {
    let doc: NetworkDoc = serde_json::from_slice(bytes)?;
    if doc.layers.is_empty() {
        return Err(ModelError::EmptyLayerList);
    }

    let kind = match doc.activation.name.as_str() {
        "relu" => ActivationKind::Relu,
        "tanh" => ActivationKind::Tanh,
        "sigmoid" => ActivationKind::Sigmoid,
        "leaky_relu" => match doc.activation.negative_slope {
            Some(a) if a > 0.0 && a < 1.0 => ActivationKind::LeakyRelu { negative_slope: a },
            other => return Err(ModelError::InvalidLeakySlope(other)),
        },
        other => return Err(ModelError::UnknownActivation(other.to_string())),
    };
    let sector_override = match (doc.activation.alpha, doc.activation.beta) {
        (None, None) => None,
        (Some(alpha), Some(beta)) => Some(SectorBounds::new(alpha, beta)?),
        _ => return Err(ModelError::PartialSectorOverride),
    };
    let activation = Activation { kind, sector_override };

    let mut layers = Vec::with_capacity(doc.layers.len());
    for (k, layer_doc) in doc.layers.into_iter().enumerate() {
        let rows = layer_doc.weight.len();
        let cols = layer_doc.weight.first().map_or(0, Vec::len);
        if rows == 0 || cols == 0 || layer_doc.weight.iter().any(|r| r.len() != cols) {
            return Err(ModelError::MalformedWeight { layer: k });
        }
        let weight = DenseMatrix::from_rows(&layer_doc.weight)
            .map_err(|_| ModelError::NonFiniteEntry { layer: k })?;
        let bias = match layer_doc.bias {
            Some(b) => {
                if b.len() != rows {
                    return Err(ModelError::BiasLength { layer: k, got: b.len(), expected: rows });
                }
                b
            }
            None => vec![0.0; rows],
        };
        layers.push(Layer { weight, bias });
    }
    FeedForwardNetwork::new(layers, activation)
}

/// Serializes a network back into the document schema. Loading the result
/// reproduces the network field-for-field.
pub fn to_json(net: &FeedForwardNetwork) -> String {
    let layers = net
        .layers
        .iter()
        .map(|layer| LayerDoc {
            weight: (0..layer.weight.rows()).map(|i| layer.weight.row(i).to_vec()).collect(),
            bias: Some(layer.bias.clone()),
        })
        .collect();
    let (alpha, beta) = match net.activation.sector_override {
        Some(s) => (Some(s.alpha), Some(s.beta)),
        None => (None, None),
    };
    let negative_slope = match net.activation.kind {
        ActivationKind::LeakyRelu { negative_slope } => Some(negative_slope),
        _ => None,
    };
    let doc = NetworkDoc {
        layers,
        activation: ActivationDoc {
            name: net.activation.kind.name().to_string(),
            negative_slope,
            alpha,
            beta,
        },
    };
    serde_json::to_string_pretty(&doc).expect("network document serialization cannot fail")
}

/// Builds a reproducible random network: weights are zero-mean normal with
/// standard deviation `scale` (default `1/sqrt(fan_in)` per layer), biases
/// zero. Identical arguments produce identical networks.
pub fn random_network(
    dims: &[usize],
    activation: Activation,
    scale: Option<f64>,
    seed: u64,
) -> Result<FeedForwardNetwork, ModelError> {
    if dims.len() < 2 {
        return Err(ModelError::EmptyLayerList);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut layers = Vec::with_capacity(dims.len() - 1);
    for k in 0..dims.len() - 1 {
        let (n_in, n_out) = (dims[k], dims[k + 1]);
        let sigma = scale.unwrap_or(1.0 / (n_in as f64).sqrt());
        let entries: Vec<f64> =
            (0..n_in * n_out).map(|_| sigma * rng.sample::<f64, _>(StandardNormal)).collect();
        let weight = DenseMatrix::new(n_out, n_in, entries)
            .map_err(|_| ModelError::NonFiniteEntry { layer: k })?;
        layers.push(Layer { weight, bias: vec![0.0; n_out] });
    }
    FeedForwardNetwork::new(layers, activation)
}
