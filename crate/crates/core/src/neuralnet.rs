//! Fully-connected networks: float training and bit-exact fixed-point inference.
//!
//! Weights are stored `[out × in]`, row-major. Batched data is `[batch × dim]`.

use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fixedpoint::{self, FixedTensor, QFormat};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Linear,
}

impl Activation {
    /// Relu on every hidden layer, linear output.
    pub fn plan(depth: usize) -> Vec<Activation> {
        (0..depth)
            .map(|i| {
                if i + 1 == depth {
                    Activation::Linear
                } else {
                    Activation::Relu
                }
            })
            .collect()
    }

    pub fn name(&self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Linear => "linear",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        match name {
            "relu" => Some(Activation::Relu),
            "linear" => Some(Activation::Linear),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossKind {
    Mse,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DenseLayer {
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
    pub activation: Activation,
}

impl DenseLayer {
    pub fn new(weights: Array2<f64>, bias: Array1<f64>, activation: Activation) -> Result<Self> {
        if weights.nrows() != bias.len() {
            return Err(Error::DimensionMismatch {
                expected: weights.nrows(),
                actual: bias.len(),
            });
        }
        if weights.iter().chain(bias.iter()).any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameters("non-finite layer parameter".into()));
        }
        Ok(DenseLayer {
            weights,
            bias,
            activation,
        })
    }

    pub fn in_dim(&self) -> usize {
        self.weights.ncols()
    }

    pub fn out_dim(&self) -> usize {
        self.weights.nrows()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FcNet {
    layers: Vec<DenseLayer>,
}

/// Post-activation output of every layer for one input; the last entry is the
/// network output.
#[derive(Clone, Debug, PartialEq)]
pub struct FloatTrace {
    pub per_layer: Vec<Vec<f64>>,
}

impl FloatTrace {
    pub fn output(&self) -> &[f64] {
        self.per_layer.last().map(Vec::as_slice).unwrap_or(&[])
    }
}

/// Activations of a batched forward pass: `acts[0]` is the input, `acts[l + 1]`
/// the output of layer `l`.
#[derive(Clone, Debug)]
pub struct BatchTrace {
    pub acts: Vec<Array2<f64>>,
}

impl BatchTrace {
    pub fn output(&self) -> &Array2<f64> {
        self.acts.last().expect("trace holds at least the input")
    }
}

impl FcNet {
    pub fn new(layers: Vec<DenseLayer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::EmptyDims);
        }
        for pair in layers.windows(2) {
            if pair[0].out_dim() != pair[1].in_dim() {
                return Err(Error::DimensionMismatch {
                    expected: pair[0].out_dim(),
                    actual: pair[1].in_dim(),
                });
            }
        }
        Ok(FcNet { layers })
    }

    /// He-normal weights `N(0, 2 / fan_in)`, zero biases.
    pub fn init_he(dims: &[usize], activations: &[Activation], seed: u64) -> Result<Self> {
        if dims.len() < 2 {
            return Err(Error::EmptyDims);
        }
        if activations.len() != dims.len() - 1 {
            return Err(Error::DimensionMismatch {
                expected: dims.len() - 1,
                actual: activations.len(),
            });
        }
        if dims.contains(&0) {
            return Err(Error::InvalidParameters("zero-width layer".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = dims
            .windows(2)
            .zip(activations)
            .map(|(d, &activation)| {
                let (fan_in, fan_out) = (d[0], d[1]);
                let std = (2.0 / fan_in as f64).sqrt();
                let weights = Array2::from_shape_simple_fn((fan_out, fan_in), || {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    z * std
                });
                DenseLayer {
                    weights,
                    bias: Array1::zeros(fan_out),
                    activation,
                }
            })
            .collect();
        FcNet::new(layers)
    }

    pub fn layers(&self) -> &[DenseLayer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [DenseLayer] {
        &mut self.layers
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim()
    }

    /// Layer widths including the input, e.g. `[32, 512, 32]`.
    pub fn dims(&self) -> Vec<usize> {
        std::iter::once(self.input_dim())
            .chain(self.layers.iter().map(DenseLayer::out_dim))
            .collect()
    }

    pub fn activations(&self) -> Vec<Activation> {
        self.layers.iter().map(|l| l.activation).collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    /// All parameters in layer order: each layer's weights row-major, then its
    /// bias.
    pub fn parameters(&self) -> impl Iterator<Item = f64> + '_ {
        self.layers
            .iter()
            .flat_map(|l| l.weights.iter().chain(l.bias.iter()).copied())
    }

    /// Applies `f` to every weight and bias in place.
    pub fn map_parameters(&mut self, mut f: impl FnMut(f64) -> f64) {
        for layer in &mut self.layers {
            layer.weights.mapv_inplace(&mut f);
            layer.bias.mapv_inplace(&mut f);
        }
    }

    /// Scales hidden layer `l`'s output by `c > 0` and compensates in layer
    /// `l + 1`. ReLU and linear activations are positively homogeneous, so
    /// the network function is unchanged; only activation ranges move.
    pub fn rescale_hidden(&mut self, l: usize, c: f64) -> Result<()> {
        if l + 1 >= self.layers.len() || !(c > 0.0 && c.is_finite()) {
            return Err(Error::InvalidParameters(format!(
                "cannot rescale layer {l} of {} by {c}",
                self.layers.len()
            )));
        }
        self.layers[l].weights *= c;
        self.layers[l].bias *= c;
        self.layers[l + 1].weights /= c;
        Ok(())
    }

    pub fn forward_float(&self, x: &[f64]) -> Result<FloatTrace> {
        if x.len() != self.input_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.input_dim(),
                actual: x.len(),
            });
        }
        let mut per_layer = Vec::with_capacity(self.depth());
        let mut a = Array1::from(x.to_vec());
        for layer in &self.layers {
            let mut z = layer.weights.dot(&a) + &layer.bias;
            if layer.activation == Activation::Relu {
                z.mapv_inplace(|v| v.max(0.0));
            }
            per_layer.push(z.to_vec());
            a = z;
        }
        Ok(FloatTrace { per_layer })
    }

    pub fn forward_batch(&self, x: ArrayView2<f64>) -> Result<BatchTrace> {
        if x.ncols() != self.input_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.input_dim(),
                actual: x.ncols(),
            });
        }
        let mut acts = Vec::with_capacity(self.depth() + 1);
        acts.push(x.to_owned());
        for layer in &self.layers {
            let prev = acts.last().expect("non-empty");
            let mut z = prev.dot(&layer.weights.t());
            z += &layer.bias;
            if layer.activation == Activation::Relu {
                z.mapv_inplace(|v| v.max(0.0));
            }
            acts.push(z);
        }
        Ok(BatchTrace { acts })
    }

    /// Backpropagates `d_out` (dLoss/dOutput, `[batch × out]`) through a trace
    /// produced by [`FcNet::forward_batch`]. Returns parameter gradients summed
    /// over the batch and dLoss/dInput.
    pub fn backward_batch(&self, trace: &BatchTrace, d_out: &Array2<f64>) -> Result<(Gradients, Array2<f64>)> {
        if trace.acts.len() != self.depth() + 1 || d_out.dim() != trace.output().dim() {
            return Err(Error::ShapeMismatch(format!(
                "gradient {:?} vs output {:?}",
                d_out.dim(),
                trace.output().dim()
            )));
        }
        let mut grads = Vec::with_capacity(self.depth());
        let mut delta = d_out.clone();
        for (l, layer) in self.layers.iter().enumerate().rev() {
            if layer.activation == Activation::Relu {
                Zip::from(&mut delta).and(&trace.acts[l + 1]).for_each(|d, &a| {
                    if a <= 0.0 {
                        *d = 0.0;
                    }
                });
            }
            let weights = delta.t().dot(&trace.acts[l]);
            let bias = delta.sum_axis(Axis(0));
            delta = delta.dot(&layer.weights);
            grads.push(LayerGrad { weights, bias });
        }
        grads.reverse();
        Ok((Gradients { layers: grads }, delta))
    }

    /// Gradients of `loss(forward(x), target)` with respect to every parameter.
    pub fn backward(&self, x: &[f64], target: &[f64], loss: LossKind) -> Result<Gradients> {
        if target.len() != self.output_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.output_dim(),
                actual: target.len(),
            });
        }
        let input = ArrayView2::from_shape((1, x.len()), x).map_err(|e| Error::ShapeMismatch(e.to_string()))?;
        let trace = self.forward_batch(input)?;
        let n = target.len() as f64;
        let d_out = match loss {
            LossKind::Mse => Array2::from_shape_fn((1, target.len()), |(_, j)| {
                2.0 * (trace.output()[[0, j]] - target[j]) / n
            }),
        };
        Ok(self.backward_batch(&trace, &d_out)?.0)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerGrad {
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub layers: Vec<LayerGrad>,
}

impl Gradients {
    pub fn zeros_like(net: &FcNet) -> Self {
        Gradients {
            layers: net
                .layers()
                .iter()
                .map(|l| LayerGrad {
                    weights: Array2::zeros(l.weights.raw_dim()),
                    bias: Array1::zeros(l.bias.len()),
                })
                .collect(),
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for g in &mut self.layers {
            g.weights *= factor;
            g.bias *= factor;
        }
    }

    pub fn values(&self) -> impl Iterator<Item = f64> + '_ {
        self.layers
            .iter()
            .flat_map(|g| g.weights.iter().chain(g.bias.iter()).copied())
    }

    fn matches(&self, net: &FcNet) -> bool {
        self.layers.len() == net.depth()
            && self
                .layers
                .iter()
                .zip(net.layers())
                .all(|(g, l)| g.weights.dim() == l.weights.dim() && g.bias.len() == l.bias.len())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Synthetic data has no natural epoch; this many mini-batches make one.
    pub batches_per_epoch: usize,
    pub optimizer: OptimizerKind,
    pub seed: u64,
    /// Training SNR is drawn uniformly from `[lo, hi]` dB per sample.
    pub snr_db: [f64; 2],
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            batch_size: 64,
            epochs: 20,
            batches_per_epoch: 100,
            optimizer: OptimizerKind::Adam,
            seed: 1,
            snr_db: [5.0, 25.0],
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return fail("learning_rate must be positive");
        }
        if self.batch_size == 0 || self.batches_per_epoch == 0 {
            return fail("batch_size and batches_per_epoch must be at least 1");
        }
        let [lo, hi] = self.snr_db;
        if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
            return fail("snr_db range must be finite with lo <= hi");
        }
        Ok(())
    }
}

/// Optimizer moments for one network.
#[derive(Clone, Debug)]
pub struct OptimizerState {
    step: u64,
    first: Gradients,
    second: Gradients,
}

impl OptimizerState {
    pub fn new(net: &FcNet) -> Self {
        OptimizerState {
            step: 0,
            first: Gradients::zeros_like(net),
            second: Gradients::zeros_like(net),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// One Adam or SGD update of `net` with `grads`.
pub fn optimizer_step(net: &mut FcNet, grads: &Gradients, state: &mut OptimizerState, cfg: &TrainConfig) -> Result<()> {
    if !grads.matches(net) || !state.first.matches(net) {
        return Err(Error::ShapeMismatch("gradients do not match the network".into()));
    }
    let lr = cfg.learning_rate;
    state.step += 1;
    match cfg.optimizer {
        OptimizerKind::Sgd => {
            for (layer, g) in net.layers.iter_mut().zip(&grads.layers) {
                layer.weights.scaled_add(-lr, &g.weights);
                layer.bias.scaled_add(-lr, &g.bias);
            }
        }
        OptimizerKind::Adam => {
            let t = state.step as i32;
            let c1 = 1.0 - ADAM_BETA1.powi(t);
            let c2 = 1.0 - ADAM_BETA2.powi(t);
            let update = |p: &mut f64, &g: &f64, m: &mut f64, v: &mut f64| {
                *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
                *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
                let m_hat = *m / c1;
                let v_hat = *v / c2;
                *p -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
            };
            for (((layer, g), m), v) in net
                .layers
                .iter_mut()
                .zip(&grads.layers)
                .zip(&mut state.first.layers)
                .zip(&mut state.second.layers)
            {
                Zip::from(&mut layer.weights)
                    .and(&g.weights)
                    .and(&mut m.weights)
                    .and(&mut v.weights)
                    .for_each(update);
                Zip::from(&mut layer.bias)
                    .and(&g.bias)
                    .and(&mut m.bias)
                    .and(&mut v.bias)
                    .for_each(update);
            }
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct FixedLayer {
    /// `[out, in]` raw weights.
    pub weights: FixedTensor,
    /// `[out]` raw biases.
    pub bias: FixedTensor,
    pub activation: Activation,
}

/// A network whose parameters live on a fixed-point grid, evaluated with the
/// bit-exact MAC datapath.
#[derive(Clone, Debug, PartialEq)]
pub struct FixedNet {
    layers: Vec<FixedLayer>,
    format: QFormat,
}

/// Fixed-point output of every layer for one input.
#[derive(Clone, Debug, PartialEq)]
pub struct FixedTrace {
    pub per_layer: Vec<FixedTensor>,
}

impl FixedTrace {
    pub fn output(&self) -> &FixedTensor {
        self.per_layer.last().expect("at least one layer")
    }
}

impl FixedNet {
    /// Converts a network whose every parameter is already on `q`'s grid.
    pub fn from_grid(net: &FcNet, q: QFormat) -> Result<Self> {
        let to_raw = |values: &mut dyn Iterator<Item = f64>| -> Result<Vec<i32>> {
            values
                .map(|x| {
                    if !q.is_on_grid(x) {
                        return Err(Error::OffGrid {
                            value: x,
                            format: q.to_string(),
                        });
                    }
                    Ok(fixedpoint::quantize(x, q)?.raw())
                })
                .collect()
        };
        let layers = net
            .layers()
            .iter()
            .map(|l| {
                fixedpoint::check_accumulator(l.in_dim())?;
                let w = to_raw(&mut l.weights.iter().copied())?;
                let b = to_raw(&mut l.bias.iter().copied())?;
                Ok(FixedLayer {
                    weights: FixedTensor::from_raw_unchecked(vec![l.out_dim(), l.in_dim()], w, q),
                    bias: FixedTensor::from_raw_unchecked(vec![l.out_dim()], b, q),
                    activation: l.activation,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(FixedNet { layers, format: q })
    }

    pub fn format(&self) -> QFormat {
        self.format
    }

    pub fn layers(&self) -> &[FixedLayer] {
        &self.layers
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weights.shape()[1]
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].weights.shape()[0]
    }

    /// Quantizes `x` once, then runs every neuron through the MAC datapath.
    pub fn forward_fixed(&self, x: &[f64]) -> Result<FixedTrace> {
        let input = FixedTensor::vector(x, self.format)?;
        self.forward_fixed_tensor(&input)
    }

    pub fn forward_fixed_tensor(&self, input: &FixedTensor) -> Result<FixedTrace> {
        if input.format() != self.format {
            return Err(Error::FormatMismatch(
                input.format().to_string(),
                self.format.to_string(),
            ));
        }
        if input.len() != self.input_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.input_dim(),
                actual: input.len(),
            });
        }
        let q = self.format;
        let mut per_layer: Vec<FixedTensor> = Vec::with_capacity(self.depth());
        for layer in &self.layers {
            let a = per_layer.last().unwrap_or(input).raw();
            let in_dim = a.len();
            let out: Vec<i32> = layer
                .weights
                .raw()
                .chunks_exact(in_dim)
                .zip(layer.bias.raw())
                .map(|(row, &b)| {
                    let v = fixedpoint::mac(row, a, b, q);
                    match layer.activation {
                        Activation::Relu => v.max(0),
                        Activation::Linear => v,
                    }
                })
                .collect();
            per_layer.push(FixedTensor::from_raw_unchecked(vec![out.len()], out, q));
        }
        Ok(FixedTrace { per_layer })
    }
}
