//! Linear-probe and MLP-K classification heads with explicit forward and
//! backward passes, plus SGD with momentum, weight decay and global
//! gradient-norm clipping.

use std::fmt;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;
use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::DenseMatrix;
use crate::rng::{stream, Purpose};

/// Hidden-layer nonlinearity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Activation {
    #[default]
    Relu,
    Tanh,
}

impl Activation {
    #[inline]
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
        }
    }

    /// Derivative expressed through the activation's output `y`.
    #[inline]
    fn derivative_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Relu => {
                if y > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - y * y,
        }
    }

    fn code(self) -> u32 {
        match self {
            Activation::Relu => 1,
            Activation::Tanh => 2,
        }
    }

    fn from_code(code: u32) -> Option<Option<Self>> {
        match code {
            0 => Some(None),
            1 => Some(Some(Activation::Relu)),
            2 => Some(Some(Activation::Tanh)),
            _ => None,
        }
    }
}

impl FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "relu" => Ok(Activation::Relu),
            "tanh" => Ok(Activation::Tanh),
            other => Err(Error::invalid(format!("unknown activation `{other}`"))),
        }
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Activation::Relu => "relu",
            Activation::Tanh => "tanh",
        })
    }
}

/// Head architecture.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Arch {
    /// A single affine layer (linear probing).
    Linear,
    /// `depth` affine layers, the first `depth − 1` followed by `activation`.
    Mlp {
        depth: usize,
        hidden: usize,
        activation: Activation,
    },
}

impl Arch {
    pub fn mlp(depth: usize, hidden: usize) -> Self {
        Arch::Mlp {
            depth,
            hidden,
            activation: Activation::Relu,
        }
    }
}

impl fmt::Display for Arch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Arch::Linear => f.write_str("linear"),
            Arch::Mlp {
                depth,
                hidden,
                activation,
            } => write!(f, "mlp-{depth}x{hidden}-{activation}"),
        }
    }
}

/// One affine layer: `out = act(in · weight + bias)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    /// `fan_in × fan_out`.
    pub weight: DenseMatrix,
    pub bias: Vec<f64>,
    /// `None` on the output layer.
    pub activation: Option<Activation>,
}

impl Layer {
    pub fn fan_in(&self) -> usize {
        self.weight.rows()
    }

    pub fn fan_out(&self) -> usize {
        self.weight.cols()
    }
}

static NEXT_VERSION: AtomicU64 = AtomicU64::new(1);

fn fresh_version() -> u64 {
    NEXT_VERSION.fetch_add(1, Ordering::Relaxed)
}

/// Parameters of a classification head.
///
/// Every mutation through [`sgd_step`] assigns a new version, so a
/// [`ForwardCache`] taken before the update is detected as stale.
#[derive(Debug, Clone)]
pub struct ModelParams {
    layers: Vec<Layer>,
    version: u64,
}

impl PartialEq for ModelParams {
    fn eq(&self, other: &Self) -> bool {
        self.layers == other.layers
    }
}

impl ModelParams {
    pub fn from_layers(layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::invalid("a model needs at least one layer"));
        }
        for (i, l) in layers.iter().enumerate() {
            if l.bias.len() != l.fan_out() {
                return Err(Error::invalid(format!(
                    "layer {i}: bias length {} for fan_out {}",
                    l.bias.len(),
                    l.fan_out()
                )));
            }
            if let Some(next) = layers.get(i + 1) {
                if next.fan_in() != l.fan_out() {
                    return Err(Error::invalid(format!(
                        "layer {} expects {} inputs, layer {i} produces {}",
                        i + 1,
                        next.fan_in(),
                        l.fan_out()
                    )));
                }
            }
            if !l.weight.is_finite() || l.bias.iter().any(|b| !b.is_finite()) {
                return Err(Error::invalid(format!("layer {i} has non-finite parameters")));
            }
        }
        if layers.last().is_some_and(|l| l.activation.is_some()) {
            return Err(Error::invalid("the output layer has no activation"));
        }
        Ok(Self {
            layers,
            version: fresh_version(),
        })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].fan_in()
    }

    pub fn num_classes(&self) -> usize {
        self.layers[self.layers.len() - 1].fan_out()
    }

    pub fn num_parameters(&self) -> usize {
        self.layers.iter().map(|l| l.weight.as_slice().len() + l.bias.len()).sum()
    }

    /// All parameters, layer by layer, weights (row-major) before biases.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_parameters());
        for l in &self.layers {
            out.extend_from_slice(l.weight.as_slice());
            out.extend_from_slice(&l.bias);
        }
        out
    }

    /// Inverse of [`flatten`](Self::flatten).
    pub fn set_flat(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.num_parameters() {
            return Err(Error::invalid(format!(
                "{} values for {} parameters",
                values.len(),
                self.num_parameters()
            )));
        }
        let mut offset = 0;
        for l in &mut self.layers {
            let w = l.weight.as_mut_slice();
            w.copy_from_slice(&values[offset..offset + w.len()]);
            offset += w.len();
            let nb = l.bias.len();
            l.bias.copy_from_slice(&values[offset..offset + nb]);
            offset += nb;
        }
        self.version = fresh_version();
        Ok(())
    }

    fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weight.is_finite() && l.bias.iter().all(|b| b.is_finite()))
    }
}

/// Builds a head with weights drawn from `U(−1/√fan_in, 1/√fan_in)` and zero
/// biases.
pub fn init_params(arch: Arch, input_dim: usize, num_classes: usize, seed: u64) -> Result<ModelParams> {
    if input_dim == 0 {
        return Err(Error::invalid("input_dim must be >= 1"));
    }
    if num_classes < 2 {
        return Err(Error::invalid("need at least 2 classes"));
    }
    let (widths, activation) = match arch {
        Arch::Linear => (vec![input_dim, num_classes], Activation::Relu),
        Arch::Mlp {
            depth,
            hidden,
            activation,
        } => {
            if depth == 0 || hidden == 0 {
                return Err(Error::invalid("mlp depth and hidden width must be >= 1"));
            }
            let mut w = vec![input_dim];
            w.extend(std::iter::repeat_n(hidden, depth - 1));
            w.push(num_classes);
            (w, activation)
        }
    };
    let mut rng = stream(seed, Purpose::Init, 0);
    let last = widths.len() - 2;
    let layers = widths
        .windows(2)
        .enumerate()
        .map(|(i, pair)| {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let bound = 1.0 / (fan_in as f64).sqrt();
            let values = (0..fan_in * fan_out)
                .map(|_| rng.random_range(-bound..bound))
                .collect();
            Layer {
                weight: DenseMatrix::from_vec_unchecked(fan_in, fan_out, values),
                bias: vec![0.0; fan_out],
                activation: (i != last).then_some(activation),
            }
        })
        .collect();
    ModelParams::from_layers(layers)
}

/// Activations saved by [`forward`] for the matching [`backward`].
#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// `inputs[l]` is the input of layer `l`; the last entry is the logits.
    inputs: Vec<DenseMatrix>,
    version: u64,
}

impl ForwardCache {
    pub fn logits(&self) -> &DenseMatrix {
        self.inputs.last().expect("cache holds at least input and logits")
    }
}

/// Logits for every row of `x`; row `i` depends only on `x` row `i`.
pub fn forward(params: &ModelParams, x: &DenseMatrix) -> Result<(DenseMatrix, ForwardCache)> {
    if x.cols() != params.input_dim() {
        return Err(Error::invalid(format!(
            "input has {} features, model expects {}",
            x.cols(),
            params.input_dim()
        )));
    }
    let mut inputs = Vec::with_capacity(params.layers.len() + 1);
    inputs.push(x.clone());
    for layer in &params.layers {
        let mut out = inputs.last().expect("non-empty").matmul(&layer.weight)?;
        let width = layer.fan_out();
        for row in out.as_mut_slice().chunks_exact_mut(width) {
            for (v, b) in row.iter_mut().zip(&layer.bias) {
                *v += b;
            }
            if let Some(act) = layer.activation {
                row.iter_mut().for_each(|v| *v = act.apply(*v));
            }
        }
        inputs.push(out);
    }
    let logits = inputs.last().expect("non-empty").clone();
    Ok((
        logits,
        ForwardCache {
            inputs,
            version: params.version,
        },
    ))
}

/// Logits only, without keeping activations.
pub fn predict_logits(params: &ModelParams, x: &DenseMatrix) -> Result<DenseMatrix> {
    let mut current = x.matmul(&params.layers[0].weight).map_err(|_| {
        Error::invalid(format!(
            "input has {} features, model expects {}",
            x.cols(),
            params.input_dim()
        ))
    })?;
    for (i, layer) in params.layers.iter().enumerate() {
        if i > 0 {
            current = current.matmul(&layer.weight)?;
        }
        for row in current.as_mut_slice().chunks_exact_mut(layer.fan_out()) {
            for (v, b) in row.iter_mut().zip(&layer.bias) {
                *v += b;
            }
            if let Some(act) = layer.activation {
                row.iter_mut().for_each(|v| *v = act.apply(*v));
            }
        }
    }
    Ok(current)
}

/// Gradient of one layer's parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrad {
    pub weight: DenseMatrix,
    pub bias: Vec<f64>,
}

/// Parameter gradients, shaped like [`ModelParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<LayerGrad>,
}

impl Gradients {
    pub fn zeros_like(params: &ModelParams) -> Self {
        Self {
            layers: params
                .layers
                .iter()
                .map(|l| LayerGrad {
                    weight: DenseMatrix::zeros(l.fan_in(), l.fan_out()),
                    bias: vec![0.0; l.fan_out()],
                })
                .collect(),
        }
    }

    fn values(&self) -> impl Iterator<Item = &f64> {
        self.layers
            .iter()
            .flat_map(|l| l.weight.as_slice().iter().chain(&l.bias))
    }

    fn values_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.layers
            .iter_mut()
            .flat_map(|l| l.weight.as_mut_slice().iter_mut().chain(l.bias.iter_mut()))
    }

    pub fn global_norm(&self) -> f64 {
        self.values().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.values().all(|v| v.is_finite())
    }

    /// Same layout as [`ModelParams::flatten`].
    pub fn flatten(&self) -> Vec<f64> {
        self.values().copied().collect()
    }
}

/// Back-propagates `grad_logits` (the gradient of a scalar with respect to
/// the logits of the cached forward pass) to every parameter.
///
/// The upstream gradient is used as given: if the scalar is a batch mean,
/// the `1/n` is expected to be inside `grad_logits` already.
pub fn backward(
    params: &ModelParams,
    cache: &ForwardCache,
    grad_logits: &DenseMatrix,
) -> Result<Gradients> {
    if cache.version != params.version || cache.inputs.len() != params.layers.len() + 1 {
        return Err(Error::invalid("forward cache does not belong to these parameters"));
    }
    if grad_logits.shape() != cache.logits().shape() {
        return Err(Error::invalid(format!(
            "logit gradient shape {:?}, logits {:?}",
            grad_logits.shape(),
            cache.logits().shape()
        )));
    }
    let mut grads: Vec<LayerGrad> = Vec::with_capacity(params.layers.len());
    let mut upstream = grad_logits.clone();
    for (l, layer) in params.layers.iter().enumerate().rev() {
        let input = &cache.inputs[l];
        let weight = input.t_matmul(&upstream)?;
        let mut bias = vec![0.0; layer.fan_out()];
        for row in upstream.iter_rows() {
            for (b, g) in bias.iter_mut().zip(row) {
                *b += g;
            }
        }
        grads.push(LayerGrad { weight, bias });
        if l > 0 {
            let mut down = upstream.matmul_t(&layer.weight)?;
            let act = params.layers[l - 1]
                .activation
                .expect("hidden layers carry an activation");
            for (d, &y) in down.as_mut_slice().iter_mut().zip(input.as_slice()) {
                *d *= act.derivative_from_output(y);
            }
            upstream = down;
        }
    }
    grads.reverse();
    Ok(Gradients { layers: grads })
}

/// Rescales all gradients so their joint L2 norm is at most `clip_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut Gradients, clip_norm: f64) -> Result<f64> {
    if clip_norm.is_nan() || clip_norm <= 0.0 {
        return Err(Error::invalid(format!("clip_norm must be > 0, got {clip_norm}")));
    }
    let norm = grads.global_norm();
    if norm > clip_norm {
        let scale = clip_norm / norm;
        grads.values_mut().for_each(|v| *v *= scale);
    }
    Ok(norm)
}

/// SGD hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub nesterov: bool,
    pub weight_decay: f64,
    pub clip_norm: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            lr: 0.001,
            momentum: 0.9,
            nesterov: false,
            weight_decay: 1e-3,
            clip_norm: 5.0,
        }
    }
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::invalid(format!("lr must be > 0, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::invalid(format!(
                "momentum must be in [0, 1), got {}",
                self.momentum
            )));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::invalid(format!(
                "weight_decay must be >= 0, got {}",
                self.weight_decay
            )));
        }
        if self.clip_norm.is_nan() || self.clip_norm <= 0.0 {
            return Err(Error::invalid(format!(
                "clip_norm must be > 0, got {}",
                self.clip_norm
            )));
        }
        Ok(())
    }
}

/// Optimizer hyperparameters plus one momentum buffer per parameter.
#[derive(Debug, Clone)]
pub struct OptimState {
    pub config: SgdConfig,
    buffers: Gradients,
}

impl OptimState {
    pub fn new(config: SgdConfig, params: &ModelParams) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            buffers: Gradients::zeros_like(params),
        })
    }

    pub fn momentum_buffers(&self) -> &Gradients {
        &self.buffers
    }
}

/// One SGD update:
/// `g ← grad + wd·θ; b ← μ·b + g; θ ← θ − lr·(nesterov ? g + μ·b : b)`.
///
/// Clipping is not applied here; call [`clip_global_norm`] first. A
/// non-finite gradient or update yields [`Error::Divergence`] with zeroed
/// position fields; the training loop fills them in.
pub fn sgd_step(params: &mut ModelParams, state: &mut OptimState, grads: &Gradients) -> Result<()> {
    if grads.layers.len() != params.layers.len()
        || grads
            .layers
            .iter()
            .zip(&params.layers)
            .any(|(g, p)| g.weight.shape() != p.weight.shape() || g.bias.len() != p.bias.len())
    {
        return Err(Error::invalid("gradient shapes do not match parameters"));
    }
    if !grads.is_finite() {
        return Err(Error::Divergence {
            epoch: 0,
            batch: 0,
            reason: "non-finite gradient".into(),
        });
    }
    let SgdConfig {
        lr,
        momentum,
        nesterov,
        weight_decay,
        ..
    } = state.config;

    let update = |theta: &mut f64, grad: f64, buf: &mut f64| {
        let g = if weight_decay != 0.0 {
            grad + weight_decay * *theta
        } else {
            grad
        };
        let step = if momentum != 0.0 {
            *buf = momentum * *buf + g;
            if nesterov {
                g + momentum * *buf
            } else {
                *buf
            }
        } else {
            g
        };
        *theta -= lr * step;
    };

    for ((layer, grad), buf) in params
        .layers
        .iter_mut()
        .zip(&grads.layers)
        .zip(state.buffers.layers.iter_mut())
    {
        for ((theta, &g), b) in layer
            .weight
            .as_mut_slice()
            .iter_mut()
            .zip(grad.weight.as_slice())
            .zip(buf.weight.as_mut_slice())
        {
            update(theta, g, b);
        }
        for ((theta, &g), b) in layer.bias.iter_mut().zip(&grad.bias).zip(buf.bias.iter_mut()) {
            update(theta, g, b);
        }
    }
    params.version = fresh_version();
    if !params.is_finite() {
        return Err(Error::Divergence {
            epoch: 0,
            batch: 0,
            reason: "non-finite parameters after update".into(),
        });
    }
    Ok(())
}

const CHECKPOINT_MAGIC: &[u8; 4] = b"NLMP";
const CHECKPOINT_VERSION: u32 = 1;

/// Writes a parameter checkpoint. Layout (all little-endian):
///
/// ```text
/// magic "NLMP" | version u32 = 1 | num_layers u32
/// per layer:   fan_in u64 | fan_out u64 | activation u32 (0 none, 1 relu, 2 tanh)
/// per layer:   fan_in·fan_out f64 weights (row-major) | fan_out f64 biases
/// ```
pub fn save_checkpoint(params: &ModelParams, path: &Path) -> Result<()> {
    let mut buf = Vec::with_capacity(16 + params.num_parameters() * 8);
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(params.layers.len() as u32).to_le_bytes());
    for l in &params.layers {
        buf.extend_from_slice(&(l.fan_in() as u64).to_le_bytes());
        buf.extend_from_slice(&(l.fan_out() as u64).to_le_bytes());
        buf.extend_from_slice(&l.activation.map_or(0, Activation::code).to_le_bytes());
    }
    for v in params.flatten() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&buf).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<ModelParams> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    let bad = |reason: &str| Error::format(path, reason);
    let mut cur = crate::data::ByteCursor::new(&bytes);
    if cur.take(4).ok_or_else(|| bad("truncated magic"))? != CHECKPOINT_MAGIC {
        return Err(bad("bad magic"));
    }
    if cur.u32_le().ok_or_else(|| bad("truncated header"))? != CHECKPOINT_VERSION {
        return Err(bad("unsupported version"));
    }
    let num_layers = cur.u32_le().ok_or_else(|| bad("truncated header"))? as usize;
    let mut shapes = Vec::with_capacity(num_layers.min(1024));
    for _ in 0..num_layers {
        let fan_in = cur.u64_le().ok_or_else(|| bad("truncated layer header"))? as usize;
        let fan_out = cur.u64_le().ok_or_else(|| bad("truncated layer header"))? as usize;
        let act = cur.u32_le().ok_or_else(|| bad("truncated layer header"))?;
        let act = Activation::from_code(act).ok_or_else(|| bad("unknown activation code"))?;
        shapes.push((fan_in, fan_out, act));
    }
    let mut layers = Vec::with_capacity(shapes.len());
    for (fan_in, fan_out, activation) in shapes {
        let count = fan_in
            .checked_mul(fan_out)
            .ok_or_else(|| bad("layer too large"))?;
        let weight = cur.f64s_le(count).ok_or_else(|| bad("truncated weights"))?;
        let bias = cur.f64s_le(fan_out).ok_or_else(|| bad("truncated biases"))?;
        layers.push(Layer {
            weight: DenseMatrix::from_vec_unchecked(fan_in, fan_out, weight),
            bias,
            activation,
        });
    }
    if !cur.is_empty() {
        return Err(bad("trailing bytes"));
    }
    ModelParams::from_layers(layers).map_err(|e| Error::format(path, e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::{regularized_batch_loss, LossKind, LossSpec};
    use crate::numerics::{
        finite_diff_gradient, gradient_relative_error, softmax, softmax_backward, LabelVector,
        DEFAULT_FD_STEP,
    };

    fn shapes(p: &ModelParams) -> Vec<(usize, usize)> {
        p.layers().iter().map(|l| l.weight.shape()).collect()
    }

    #[test]
    fn init_shapes() {
        let p = init_params(Arch::Linear, 4, 3, 0).unwrap();
        assert_eq!(shapes(&p), vec![(4, 3)]);
        assert_eq!(p.layers()[0].bias, vec![0.0; 3]);

        let p = init_params(Arch::mlp(3, 64), 10, 5, 0).unwrap();
        assert_eq!(shapes(&p), vec![(10, 64), (64, 64), (64, 5)]);
        assert_eq!(p.layers()[0].activation, Some(Activation::Relu));
        assert_eq!(p.layers()[2].activation, None);

        let bound = 1.0 / 10f64.sqrt();
        assert!(p.layers()[0].weight.as_slice().iter().all(|w| w.abs() < bound));
    }

    #[test]
    fn init_is_seeded() {
        let a = init_params(Arch::mlp(2, 8), 5, 3, 9).unwrap();
        let b = init_params(Arch::mlp(2, 8), 5, 3, 9).unwrap();
        let c = init_params(Arch::mlp(2, 8), 5, 3, 10).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn init_rejects_bad_dims() {
        assert!(init_params(Arch::Linear, 0, 3, 0).is_err());
        assert!(init_params(Arch::Linear, 3, 1, 0).is_err());
        assert!(init_params(Arch::mlp(0, 4), 3, 2, 0).is_err());
        assert!(init_params(Arch::mlp(2, 0), 3, 2, 0).is_err());
    }

    #[test]
    fn zero_model_gives_uniform_predictions() {
        let mut p = init_params(Arch::mlp(2, 6), 3, 4, 0).unwrap();
        let n = p.num_parameters();
        p.set_flat(&vec![0.0; n]).unwrap();
        let x = DenseMatrix::from_rows(&[vec![1.0, -2.0, 0.5], vec![3.0, 0.0, 1.0]]).unwrap();
        let (logits, _) = forward(&p, &x).unwrap();
        assert!(logits.as_slice().iter().all(|&v| v == 0.0));
        let probs = softmax(&logits).unwrap();
        assert!(probs.matrix().as_slice().iter().all(|&v| v == 0.25));
    }

    #[test]
    fn linear_head_on_identity_rows_returns_weights_plus_bias() {
        let weight = DenseMatrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]])
            .unwrap();
        let p = ModelParams::from_layers(vec![Layer {
            weight: weight.clone(),
            bias: vec![0.5, -0.5],
            activation: None,
        }])
        .unwrap();
        let eye = DenseMatrix::from_rows(&[
            vec![1.0, 0.0, 0.0],
            vec![0.0, 1.0, 0.0],
            vec![0.0, 0.0, 1.0],
        ])
        .unwrap();
        let (logits, _) = forward(&p, &eye).unwrap();
        for i in 0..3 {
            assert_eq!(logits.row(i), &[weight.get(i, 0) + 0.5, weight.get(i, 1) - 0.5]);
        }
    }

    #[test]
    fn forward_rejects_wrong_width() {
        let p = init_params(Arch::Linear, 4, 3, 0).unwrap();
        assert!(forward(&p, &DenseMatrix::zeros(2, 5)).is_err());
        assert!(predict_logits(&p, &DenseMatrix::zeros(2, 5)).is_err());
    }

    #[test]
    fn forward_rows_are_independent() {
        let p = init_params(Arch::mlp(3, 7), 4, 3, 1).unwrap();
        let rows = vec![vec![0.1, 0.2, -0.3, 0.4], vec![1.0, -1.0, 0.5, 0.0], vec![0.0; 4]];
        let x = DenseMatrix::from_rows(&rows).unwrap();
        let (all, _) = forward(&p, &x).unwrap();
        let reversed: Vec<Vec<f64>> = rows.iter().rev().cloned().collect();
        let (rev, _) = forward(&p, &DenseMatrix::from_rows(&reversed).unwrap()).unwrap();
        for i in 0..3 {
            assert_eq!(all.row(i), rev.row(2 - i));
        }
        assert_eq!(predict_logits(&p, &x).unwrap(), all);
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let p = init_params(Arch::mlp(3, 5), 4, 3, 2).unwrap();
        let x = DenseMatrix::from_rows(&[vec![0.3, -0.1, 0.8, 0.2]]).unwrap();
        let (logits, cache) = forward(&p, &x).unwrap();
        let g = backward(&p, &cache, &DenseMatrix::zeros(logits.rows(), 3)).unwrap();
        assert_eq!(g, Gradients::zeros_like(&p));
    }

    #[test]
    fn single_linear_sample_weight_grad_is_outer_product() {
        let p = init_params(Arch::Linear, 3, 2, 4).unwrap();
        let x = vec![0.5, -1.0, 2.0];
        let g = vec![0.25, -0.75];
        let (_, cache) = forward(&p, &DenseMatrix::from_rows(std::slice::from_ref(&x)).unwrap()).unwrap();
        let grads = backward(&p, &cache, &DenseMatrix::from_rows(std::slice::from_ref(&g)).unwrap()).unwrap();
        for i in 0..3 {
            for j in 0..2 {
                assert_eq!(grads.layers[0].weight.get(i, j), x[i] * g[j]);
            }
        }
        assert_eq!(grads.layers[0].bias, g);
    }

    #[test]
    fn stale_cache_is_rejected() {
        let mut p = init_params(Arch::Linear, 2, 2, 0).unwrap();
        let x = DenseMatrix::from_rows(&[vec![1.0, 1.0]]).unwrap();
        let (_, cache) = forward(&p, &x).unwrap();
        let mut state = OptimState::new(SgdConfig::default(), &p).unwrap();
        let g = Gradients::zeros_like(&p);
        sgd_step(&mut p, &mut state, &g).unwrap();
        assert!(backward(&p, &cache, &DenseMatrix::zeros(1, 2)).is_err());

        let other = init_params(Arch::Linear, 2, 2, 0).unwrap();
        let (_, cache) = forward(&other, &x).unwrap();
        assert!(backward(&p, &cache, &DenseMatrix::zeros(1, 2)).is_err());
    }

    fn pipeline_check(arch: Arch, activation_seed: u64) {
        // loss ∘ softmax ∘ forward against central differences on every parameter
        let params = init_params(arch, 5, 3, activation_seed).unwrap();
        let x = DenseMatrix::from_rows(&[
            vec![0.5, -1.2, 0.3, 2.0, -0.7],
            vec![1.1, 0.4, -0.9, 0.0, 0.8],
            vec![-0.3, 0.6, 1.5, -1.0, 0.2],
            vec![0.9, -0.4, 0.1, 0.7, -1.6],
        ])
        .unwrap();
        let labels = LabelVector::new(vec![0, 2, 1, 2], 3).unwrap();
        let spec = LossSpec::plain(LossKind::Ce);
        let lambda = 0.2;

        let objective = |flat: &[f64]| {
            let mut p = params.clone();
            p.set_flat(flat).unwrap();
            let (logits, _) = forward(&p, &x).unwrap();
            let probs = softmax(&logits).unwrap();
            regularized_batch_loss(&spec, &probs, &labels, lambda).unwrap().0
        };

        let (logits, cache) = forward(&params, &x).unwrap();
        let probs = softmax(&logits).unwrap();
        let (_, gp) = regularized_batch_loss(&spec, &probs, &labels, lambda).unwrap();
        let gz = softmax_backward(&probs, &gp).unwrap();
        let analytic = backward(&params, &cache, &gz).unwrap().flatten();
        let numeric = finite_diff_gradient(objective, &params.flatten(), DEFAULT_FD_STEP).unwrap();
        let err = gradient_relative_error(&analytic, &numeric);
        assert!(err < 1e-6, "{arch}: {err}");
    }

    #[test]
    fn full_pipeline_gradient_matches_finite_differences() {
        pipeline_check(Arch::Linear, 3);
        pipeline_check(Arch::mlp(2, 4), 3);
        pipeline_check(
            Arch::Mlp {
                depth: 3,
                hidden: 4,
                activation: Activation::Tanh,
            },
            5,
        );
    }

    fn grads_with(values: &[f64]) -> Gradients {
        Gradients {
            layers: vec![LayerGrad {
                weight: DenseMatrix::from_vec_unchecked(values.len() - 1, 1, values[1..].to_vec()),
                bias: vec![values[0]],
            }],
        }
    }

    #[test]
    fn clip_examples() {
        // norm 10
        let mut g = Gradients {
            layers: vec![LayerGrad {
                weight: DenseMatrix::from_vec_unchecked(1, 2, vec![6.0, 0.0]),
                bias: vec![0.0, 8.0],
            }],
        };
        assert_eq!(clip_global_norm(&mut g, 5.0).unwrap(), 10.0);
        assert_eq!(g.layers[0].weight.as_slice(), &[3.0, 0.0]);
        assert_eq!(g.layers[0].bias, vec![0.0, 4.0]);

        let mut g = grads_with(&[0.0, 3.0]);
        let before = g.clone();
        clip_global_norm(&mut g, 5.0).unwrap();
        assert_eq!(g, before);

        let mut g = grads_with(&[0.0, 0.0, 0.0]);
        clip_global_norm(&mut g, 5.0).unwrap();
        assert_eq!(g, grads_with(&[0.0, 0.0, 0.0]));
        assert!(clip_global_norm(&mut g, 0.0).is_err());
    }

    fn scalar_model(theta: f64) -> ModelParams {
        ModelParams::from_layers(vec![Layer {
            weight: DenseMatrix::from_vec_unchecked(1, 1, vec![theta]),
            bias: vec![0.0],
            activation: None,
        }])
        .unwrap()
    }

    fn unit_grad() -> Gradients {
        Gradients {
            layers: vec![LayerGrad {
                weight: DenseMatrix::from_vec_unchecked(1, 1, vec![1.0]),
                bias: vec![0.0],
            }],
        }
    }

    #[test]
    fn sgd_momentum_recurrence() {
        let mut p = scalar_model(0.0);
        let cfg = SgdConfig {
            lr: 1.0,
            momentum: 0.9,
            nesterov: false,
            weight_decay: 0.0,
            clip_norm: 5.0,
        };
        let mut s = OptimState::new(cfg, &p).unwrap();
        sgd_step(&mut p, &mut s, &unit_grad()).unwrap();
        assert_eq!(p.layers()[0].weight.get(0, 0), -1.0);
        sgd_step(&mut p, &mut s, &unit_grad()).unwrap();
        assert!((p.layers()[0].weight.get(0, 0) + 2.9).abs() < 1e-15);
    }

    #[test]
    fn sgd_nesterov_looks_ahead() {
        let mut p = scalar_model(0.0);
        let cfg = SgdConfig {
            lr: 1.0,
            momentum: 0.5,
            nesterov: true,
            weight_decay: 0.0,
            clip_norm: 5.0,
        };
        let mut s = OptimState::new(cfg, &p).unwrap();
        // b = 1, step = 1 + 0.5 = 1.5; then b = 1.5, step = 1 + 0.75
        sgd_step(&mut p, &mut s, &unit_grad()).unwrap();
        assert_eq!(p.layers()[0].weight.get(0, 0), -1.5);
        sgd_step(&mut p, &mut s, &unit_grad()).unwrap();
        assert_eq!(p.layers()[0].weight.get(0, 0), -3.25);
    }

    #[test]
    fn weight_decay_alone_shrinks_parameters() {
        let mut p = scalar_model(2.0);
        let cfg = SgdConfig {
            lr: 1.0,
            momentum: 0.0,
            nesterov: false,
            weight_decay: 0.1,
            clip_norm: 5.0,
        };
        let mut s = OptimState::new(cfg, &p).unwrap();
        let zero = Gradients::zeros_like(&p);
        sgd_step(&mut p, &mut s, &zero).unwrap();
        assert!((p.layers()[0].weight.get(0, 0) - 1.8).abs() < 1e-15);
    }

    #[test]
    fn sgd_rejects_non_finite_gradient() {
        let mut p = scalar_model(0.0);
        let mut s = OptimState::new(SgdConfig::default(), &p).unwrap();
        let mut g = unit_grad();
        g.layers[0].bias[0] = f64::NAN;
        assert!(matches!(sgd_step(&mut p, &mut s, &g), Err(Error::Divergence { .. })));
    }

    #[test]
    fn optimizer_config_validation() {
        let p = scalar_model(0.0);
        let bad = |f: fn(&mut SgdConfig)| {
            let mut c = SgdConfig::default();
            f(&mut c);
            OptimState::new(c, &p).is_err()
        };
        assert!(bad(|c| c.lr = 0.0));
        assert!(bad(|c| c.momentum = 1.0));
        assert!(bad(|c| c.weight_decay = -1.0));
        assert!(bad(|c| c.clip_norm = 0.0));
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.bin");
        let p = init_params(Arch::mlp(3, 6), 4, 3, 12).unwrap();
        save_checkpoint(&p, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(&bytes[..4], b"NLMP");
        assert_eq!(bytes.len(), 12 + 3 * 20 + p.num_parameters() * 8);
        assert_eq!(load_checkpoint(&path).unwrap(), p);

        std::fs::write(&path, &bytes[..bytes.len() - 1]).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Format { .. })));
        let mut wrong = bytes.clone();
        wrong[0] = b'X';
        std::fs::write(&path, &wrong).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Format { .. })));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn clipped_norm_is_bounded_and_direction_kept(
                values in prop::collection::vec(-100.0f64..100.0, 2..20),
                clip in 0.01f64..50.0,
            ) {
                let mut g = grads_with(&values);
                let before = g.flatten();
                clip_global_norm(&mut g, clip).unwrap();
                let after = g.flatten();
                prop_assert!(g.global_norm() <= clip + 1e-12);
                let scale = after.iter().zip(&before).find(|(_, b)| b.abs() > 1e-9).map(|(a, b)| a / b);
                if let Some(s) = scale {
                    prop_assert!(s > 0.0);
                    for (a, b) in after.iter().zip(&before) {
                        prop_assert!((a - s * b).abs() <= 1e-9 * (1.0 + b.abs()));
                    }
                }
            }

            #[test]
            fn lr_only_sgd_is_plain_gradient_descent(
                theta in prop::collection::vec(-10.0f64..10.0, 3),
                grad in prop::collection::vec(-10.0f64..10.0, 3),
                lr in 1e-4f64..1.0,
            ) {
                let mut p = ModelParams::from_layers(vec![Layer {
                    weight: DenseMatrix::from_vec_unchecked(2, 1, theta[1..].to_vec()),
                    bias: vec![theta[0]],
                    activation: None,
                }]).unwrap();
                let cfg = SgdConfig { lr, momentum: 0.0, nesterov: false, weight_decay: 0.0, clip_norm: 1.0 };
                let mut s = OptimState::new(cfg, &p).unwrap();
                let g = grads_with(&grad);
                let expected: Vec<f64> = p.flatten().iter().zip(g.flatten()).map(|(t, g)| t - lr * g).collect();
                sgd_step(&mut p, &mut s, &g).unwrap();
                let got = p.flatten();
                for (a, b) in got.iter().zip(&expected) {
                    prop_assert_eq!(a.to_bits(), b.to_bits());
                }
            }
        }
    }
}
