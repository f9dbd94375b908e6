//! Fully connected classifier networks: layer specs, initialization, the
//! forward pass (traced and untraced), and the loss and error metrics.

use std::collections::HashSet;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{softmax_xent_forward, GradTape, Var};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::pruning::PruneMask;
use crate::rng::rng_for;
use crate::tensor::{self, Elementwise, Tensor};

/// Rows per chunk when evaluating loss or error over a whole dataset.
const EVAL_CHUNK: usize = 1000;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Tanh,
    Sigmoid,
    #[default]
    None,
}

impl Activation {
    fn elementwise(self) -> Option<Elementwise> {
        match self {
            Activation::Relu => Some(Elementwise::Relu),
            Activation::Tanh => Some(Elementwise::Tanh),
            Activation::Sigmoid => Some(Elementwise::Sigmoid),
            Activation::None => None,
        }
    }

    pub(crate) fn code(self) -> u8 {
        match self {
            Activation::None => 0,
            Activation::Relu => 1,
            Activation::Tanh => 2,
            Activation::Sigmoid => 3,
        }
    }

    pub(crate) fn from_code(code: u8) -> Option<Self> {
        Some(match code {
            0 => Activation::None,
            1 => Activation::Relu,
            2 => Activation::Tanh,
            3 => Activation::Sigmoid,
            _ => return None,
        })
    }
}

fn default_true() -> bool {
    true
}

/// Declarative description of one layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LayerSpec {
    FullyConnected {
        name: String,
        in_dim: usize,
        out_dim: usize,
        #[serde(default)]
        activation: Activation,
        #[serde(default = "default_true")]
        prunable: bool,
    },
    Dropout {
        name: String,
        drop_prob: f64,
    },
}

impl LayerSpec {
    pub fn dense(name: &str, in_dim: usize, out_dim: usize, activation: Activation) -> Self {
        LayerSpec::FullyConnected {
            name: name.to_string(),
            in_dim,
            out_dim,
            activation,
            prunable: true,
        }
    }

    pub fn dropout(name: &str, drop_prob: f64) -> Self {
        LayerSpec::Dropout {
            name: name.to_string(),
            drop_prob,
        }
    }

    pub fn name(&self) -> &str {
        match self {
            LayerSpec::FullyConnected { name, .. } | LayerSpec::Dropout { name, .. } => name,
        }
    }

    pub fn prunable(&self) -> bool {
        matches!(self, LayerSpec::FullyConnected { prunable: true, .. })
    }
}

/// ReLU multilayer perceptron over `widths` with a linear output layer.
/// Layers are named `fc1`, `fc2`, ...
pub fn mlp(widths: &[usize]) -> Vec<LayerSpec> {
    let last = widths.len().saturating_sub(2);
    widths
        .windows(2)
        .enumerate()
        .map(|(i, w)| {
            let act = if i == last {
                Activation::None
            } else {
                Activation::Relu
            };
            LayerSpec::dense(&format!("fc{}", i + 1), w[0], w[1], act)
        })
        .collect()
}

/// Checks dimension chaining, unique names, and dropout ranges.
pub fn validate_layers(specs: &[LayerSpec]) -> Result<()> {
    let mut names = HashSet::new();
    let mut prev_out: Option<usize> = None;
    let mut dense = 0;
    for spec in specs {
        if spec.name().is_empty() {
            return Err(Error::Config("layer name must be nonempty".into()));
        }
        if !names.insert(spec.name()) {
            return Err(Error::Config(format!(
                "duplicate layer name {:?}",
                spec.name()
            )));
        }
        match spec {
            LayerSpec::FullyConnected {
                name,
                in_dim,
                out_dim,
                ..
            } => {
                if *in_dim == 0 || *out_dim == 0 {
                    return Err(Error::Config(format!(
                        "layer {name}: dimensions must be positive"
                    )));
                }
                if let Some(prev) = prev_out {
                    if prev != *in_dim {
                        return Err(Error::Config(format!(
                            "layer {name}: in_dim {in_dim} does not match previous out_dim {prev}"
                        )));
                    }
                }
                prev_out = Some(*out_dim);
                dense += 1;
            }
            LayerSpec::Dropout { name, drop_prob } => {
                if !(0.0..1.0).contains(drop_prob) {
                    return Err(Error::Config(format!(
                        "layer {name}: drop_prob {drop_prob} outside [0, 1)"
                    )));
                }
            }
        }
    }
    if dense == 0 {
        return Err(Error::Config(
            "network needs at least one fully_connected layer".into(),
        ));
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitScheme {
    /// Weights ~ N(0, scale²).
    Gaussian,
    /// Weights ~ N(0, (scale / sqrt(in_dim))²).
    ScaledGaussian,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitSpec {
    pub scheme: InitScheme,
    /// Standard deviation for `gaussian`, scale numerator for `scaled_gaussian`.
    pub scale: f64,
    pub seed: u64,
}

impl InitSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.scale > 0.0 && self.scale.is_finite()) {
            return Err(Error::Config(format!(
                "init scale/std must be positive, got {}",
                self.scale
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DenseLayer {
    pub name: String,
    pub activation: Activation,
    pub prunable: bool,
    /// `[in_dim, out_dim]`, applied as `x · W`.
    pub weight: Tensor,
    pub bias: Tensor,
    pub mask: Option<PruneMask>,
}

impl DenseLayer {
    pub fn in_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.shape()[1]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DropoutLayer {
    pub name: String,
    pub drop_prob: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Layer {
    Dense(DenseLayer),
    Dropout(DropoutLayer),
}

impl Layer {
    pub fn name(&self) -> &str {
        match self {
            Layer::Dense(d) => &d.name,
            Layer::Dropout(d) => &d.name,
        }
    }

    pub fn spec(&self) -> LayerSpec {
        match self {
            Layer::Dense(d) => LayerSpec::FullyConnected {
                name: d.name.clone(),
                in_dim: d.in_dim(),
                out_dim: d.out_dim(),
                activation: d.activation,
                prunable: d.prunable,
            },
            Layer::Dropout(d) => LayerSpec::dropout(&d.name, d.drop_prob),
        }
    }
}

/// Forward-pass mode. Dropout is active only in training mode, with masks
/// drawn from `dropout_seed`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train { dropout_seed: u64 },
    Eval,
}

/// Gradients for one fully connected layer, in [`Network::dense`] order.
#[derive(Clone, Debug)]
pub struct LayerGrads {
    pub weight: Tensor,
    pub bias: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    layers: Vec<Layer>,
}

impl Network {
    /// Builds a network with zero parameters; call [`Network::init`] next.
    pub fn new(specs: &[LayerSpec]) -> Result<Self> {
        validate_layers(specs)?;
        let layers = specs
            .iter()
            .map(|spec| match spec {
                LayerSpec::FullyConnected {
                    name,
                    in_dim,
                    out_dim,
                    activation,
                    prunable,
                } => Layer::Dense(DenseLayer {
                    name: name.clone(),
                    activation: *activation,
                    prunable: *prunable,
                    weight: Tensor::zeros(&[*in_dim, *out_dim]),
                    bias: Tensor::zeros(&[*out_dim]),
                    mask: None,
                }),
                LayerSpec::Dropout { name, drop_prob } => Layer::Dropout(DropoutLayer {
                    name: name.clone(),
                    drop_prob: *drop_prob,
                }),
            })
            .collect();
        Ok(Network { layers })
    }

    pub fn build(specs: &[LayerSpec], init: &InitSpec) -> Result<Self> {
        let mut net = Self::new(specs)?;
        net.init(init)?;
        Ok(net)
    }

    pub(crate) fn from_layers(layers: Vec<Layer>) -> Result<Self> {
        let specs: Vec<LayerSpec> = layers.iter().map(Layer::spec).collect();
        validate_layers(&specs)?;
        Ok(Network { layers })
    }

    /// Draws i.i.d. Gaussian weights per layer and zeroes biases and masks.
    /// Each layer uses its own stream keyed by `(seed, layer index)`.
    pub fn init(&mut self, init: &InitSpec) -> Result<()> {
        init.validate()?;
        for (i, layer) in self.layers.iter_mut().enumerate() {
            let Layer::Dense(d) = layer else { continue };
            let std = match init.scheme {
                InitScheme::Gaussian => init.scale,
                InitScheme::ScaledGaussian => init.scale / (d.in_dim() as f64).sqrt(),
            };
            let normal = Normal::new(0.0, std)
                .map_err(|e| Error::Config(format!("layer {}: {e}", d.name)))?;
            let mut rng = rng_for(init.seed, &[i as u64]);
            d.weight
                .data_mut()
                .iter_mut()
                .for_each(|w| *w = normal.sample(&mut rng));
            d.bias.data_mut().fill(0.0);
            d.mask = None;
        }
        Ok(())
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn specs(&self) -> Vec<LayerSpec> {
        self.layers.iter().map(Layer::spec).collect()
    }

    pub fn dense(&self) -> impl Iterator<Item = &DenseLayer> {
        self.layers.iter().filter_map(|l| match l {
            Layer::Dense(d) => Some(d),
            Layer::Dropout(_) => None,
        })
    }

    pub fn dense_mut(&mut self) -> impl Iterator<Item = &mut DenseLayer> {
        self.layers.iter_mut().filter_map(|l| match l {
            Layer::Dense(d) => Some(d),
            Layer::Dropout(_) => None,
        })
    }

    pub fn dense_by_name(&self, name: &str) -> Option<&DenseLayer> {
        self.dense().find(|d| d.name == name)
    }

    pub fn dense_by_name_mut(&mut self, name: &str) -> Option<&mut DenseLayer> {
        self.dense_mut().find(|d| d.name == name)
    }

    pub fn input_dim(&self) -> usize {
        self.dense().next().map(DenseLayer::in_dim).unwrap_or(0)
    }

    pub fn class_count(&self) -> usize {
        self.dense().last().map(DenseLayer::out_dim).unwrap_or(0)
    }

    pub fn param_count(&self) -> usize {
        self.dense().map(|d| d.weight.len() + d.bias.len()).sum()
    }

    pub fn has_masks(&self) -> bool {
        self.dense().any(|d| d.mask.is_some())
    }

    pub fn clear_masks(&mut self) {
        self.dense_mut().for_each(|d| d.mask = None);
    }

    /// Multiplies every masked weight matrix by its mask.
    pub fn apply_masks(&mut self) {
        for d in self.dense_mut() {
            if let Some(mask) = &d.mask {
                mask.apply_in_place(&mut d.weight);
            }
        }
    }

    fn check_input(&self, batch: &Tensor) -> Result<()> {
        let (_, d) = batch.dims2()?;
        if d != self.input_dim() {
            return Err(Error::Dimension(format!(
                "batch feature dim {d} does not match network input dim {}",
                self.input_dim()
            )));
        }
        Ok(())
    }

    /// Untraced forward pass producing logits `[batch, classes]`.
    pub fn forward(&self, batch: &Tensor, mode: Mode) -> Result<Tensor> {
        self.check_input(batch)?;
        let mut x = batch.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            x = match layer {
                Layer::Dense(d) => {
                    let z = tensor::add_bias(&tensor::matmul(&x, &d.weight)?, &d.bias)?;
                    match d.activation.elementwise() {
                        Some(op) => tensor::elementwise(op, &z, None)?,
                        None => z,
                    }
                }
                Layer::Dropout(d) => match dropout_factors(d, i, x.shape(), mode) {
                    Some(f) => tensor::elementwise(Elementwise::Mul, &x, Some(&f))?,
                    None => x,
                },
            };
        }
        Ok(x)
    }

    /// Records the forward pass on `tape`; returns the logits and the
    /// `(weight, bias)` variables of each dense layer.
    pub fn forward_traced(
        &self,
        tape: &mut GradTape,
        batch: &Tensor,
        mode: Mode,
    ) -> Result<(Var, Vec<(Var, Var)>)> {
        self.check_input(batch)?;
        let mut x = tape.constant(batch.clone());
        let mut params = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            x = match layer {
                Layer::Dense(d) => {
                    let w = tape.param(d.weight.clone());
                    let b = tape.param(d.bias.clone());
                    params.push((w, b));
                    let xw = tape.matmul(x, w)?;
                    let z = tape.add_bias(xw, b)?;
                    match d.activation.elementwise() {
                        Some(op) => tape.elementwise(op, z, None)?,
                        None => z,
                    }
                }
                Layer::Dropout(d) => match dropout_factors(d, i, tape.value(x).shape(), mode) {
                    Some(f) => tape.scale_by(x, f)?,
                    None => x,
                },
            };
        }
        Ok((x, params))
    }

    /// Mean cross-entropy of a minibatch and its parameter gradients.
    pub fn loss_and_grads(
        &self,
        batch: &Tensor,
        labels: &[usize],
        mode: Mode,
    ) -> Result<(f64, Vec<LayerGrads>)> {
        let mut tape = GradTape::new();
        let (logits, params) = self.forward_traced(&mut tape, batch, mode)?;
        let loss = tape.softmax_cross_entropy(logits, labels)?;
        let loss_value = tape.value(loss).data()[0];
        let mut grads = tape.backward(loss)?;
        let layer_grads = params
            .into_iter()
            .map(|(w, b)| LayerGrads {
                weight: grads.take(w).expect("weight gradient"),
                bias: grads.take(b).expect("bias gradient"),
            })
            .collect();
        Ok((loss_value, layer_grads))
    }

    /// Mean eval-mode cross-entropy over a dataset.
    pub fn loss(&self, data: &Dataset) -> Result<f64> {
        data.check_nonempty()?;
        let mut total = 0.0;
        for (start, end) in chunks(data.len()) {
            let idx: Vec<usize> = (start..end).collect();
            let logits = self.forward(&data.features().select_rows(&idx)?, Mode::Eval)?;
            total +=
                softmax_cross_entropy(&logits, &data.labels()[start..end])? * (end - start) as f64;
        }
        Ok(total / data.len() as f64)
    }

    /// Predicted class per example (argmax, ties to the lowest index).
    pub fn predict(&self, data: &Dataset) -> Result<Vec<usize>> {
        let mut out = Vec::with_capacity(data.len());
        for (start, end) in chunks(data.len()) {
            let idx: Vec<usize> = (start..end).collect();
            let logits = self.forward(&data.features().select_rows(&idx)?, Mode::Eval)?;
            out.extend((0..end - start).map(|r| argmax(logits.row(r))));
        }
        Ok(out)
    }
}

fn chunks(n: usize) -> impl Iterator<Item = (usize, usize)> {
    (0..n)
        .step_by(EVAL_CHUNK)
        .map(move |s| (s, (s + EVAL_CHUNK).min(n)))
}

fn dropout_factors(d: &DropoutLayer, index: usize, shape: &[usize], mode: Mode) -> Option<Tensor> {
    let Mode::Train { dropout_seed } = mode else {
        return None;
    };
    if d.drop_prob == 0.0 {
        return None;
    }
    let keep = 1.0 - d.drop_prob;
    let mut rng = rng_for(dropout_seed, &[index as u64]);
    let mut f = Tensor::zeros(shape);
    for v in f.data_mut() {
        if rng.random::<f64>() < keep {
            *v = 1.0 / keep;
        }
    }
    Some(f)
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Mean negative log-likelihood of `labels` under softmax(`logits`).
pub fn softmax_cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    softmax_xent_forward(logits, labels).map(|(loss, _)| loss)
}

/// Fraction of argmax-misclassified examples.
pub fn error_rate(network: &Network, data: &Dataset) -> Result<f64> {
    data.check_nonempty()?;
    let predictions = network.predict(data)?;
    let wrong = predictions
        .iter()
        .zip(data.labels())
        .filter(|(p, l)| p != l)
        .count();
    Ok(wrong as f64 / data.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn init(seed: u64) -> InitSpec {
        InitSpec {
            scheme: InitScheme::ScaledGaussian,
            scale: 1.0,
            seed,
        }
    }

    #[test]
    fn init_is_deterministic() {
        let specs = mlp(&[5, 4, 3]);
        let a = Network::build(&specs, &init(9)).unwrap();
        let b = Network::build(&specs, &init(9)).unwrap();
        assert_eq!(a, b);
        let c = Network::build(&specs, &init(10)).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn scaled_gaussian_std() {
        let net = Network::build(
            &[LayerSpec::dense("fc", 100, 100, Activation::None)],
            &init(3),
        )
        .unwrap();
        let w = net.dense().next().unwrap().weight.data();
        let mean = w.iter().sum::<f64>() / w.len() as f64;
        let var = w.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (w.len() - 1) as f64;
        assert!((var.sqrt() - 0.1).abs() < 0.01, "std {}", var.sqrt());
        assert!(net
            .dense()
            .next()
            .unwrap()
            .bias
            .data()
            .iter()
            .all(|&b| b == 0.0));
    }

    #[test]
    fn zero_std_rejected() {
        let spec = InitSpec {
            scheme: InitScheme::Gaussian,
            scale: 0.0,
            seed: 1,
        };
        assert!(matches!(
            Network::build(&mlp(&[2, 2]), &spec),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn layer_validation() {
        let bad = vec![
            LayerSpec::dense("a", 4, 3, Activation::Relu),
            LayerSpec::dense("b", 2, 2, Activation::None),
        ];
        assert!(Network::new(&bad).is_err());
        let dup = vec![
            LayerSpec::dense("a", 4, 3, Activation::Relu),
            LayerSpec::dense("a", 3, 2, Activation::None),
        ];
        assert!(Network::new(&dup).is_err());
        let with_dropout = vec![
            LayerSpec::dense("a", 4, 3, Activation::Relu),
            LayerSpec::dropout("d", 0.5),
            LayerSpec::dense("b", 3, 2, Activation::None),
        ];
        let net = Network::new(&with_dropout).unwrap();
        assert!(!with_dropout[1].prunable());
        assert_eq!(net.specs(), with_dropout);
        assert!(Network::new(&[LayerSpec::dropout("d", 1.0)]).is_err());
    }

    #[test]
    fn zero_network_gives_zero_logits() {
        let net = Network::new(&mlp(&[3, 4, 2])).unwrap();
        let x = Tensor::from_rows(&[&[1.0, 2.0, 3.0], &[0.5, 0.5, 0.5]]);
        let logits = net.forward(&x, Mode::Eval).unwrap();
        assert!(logits.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_linear_layer() {
        let mut net = Network::new(&[LayerSpec::dense("fc", 1, 1, Activation::None)]).unwrap();
        let d = net.dense_mut().next().unwrap();
        d.weight = Tensor::from_rows(&[&[2.0]]);
        d.bias = Tensor::vector(&[1.0]);
        let out = net
            .forward(&Tensor::from_rows(&[&[3.0]]), Mode::Eval)
            .unwrap();
        assert_eq!(out.data(), &[7.0]);
    }

    #[test]
    fn forward_rejects_wrong_width() {
        let net = Network::new(&mlp(&[3, 2])).unwrap();
        assert!(matches!(
            net.forward(&Tensor::zeros(&[1, 4]), Mode::Eval),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn traced_and_untraced_forward_agree_bitwise() {
        let specs = vec![
            LayerSpec::dense("a", 6, 5, Activation::Tanh),
            LayerSpec::dropout("d", 0.3),
            LayerSpec::dense("b", 5, 4, Activation::Sigmoid),
            LayerSpec::dense("c", 4, 3, Activation::None),
        ];
        let net = Network::build(&specs, &init(4)).unwrap();
        let x = Tensor::new(vec![2, 6], (0..12).map(|i| i as f64 / 7.0 - 0.8).collect()).unwrap();
        for mode in [Mode::Eval, Mode::Train { dropout_seed: 11 }] {
            let plain = net.forward(&x, mode).unwrap();
            let mut tape = GradTape::new();
            let (logits, _) = net.forward_traced(&mut tape, &x, mode).unwrap();
            assert_eq!(tape.value(logits), &plain);
        }
    }

    #[test]
    fn eval_dropout_is_identity_and_train_is_unbiased() {
        let specs = vec![
            LayerSpec::dense("a", 1, 1, Activation::None),
            LayerSpec::dropout("d", 0.4),
        ];
        let mut net = Network::new(&specs).unwrap();
        let d = net.dense_mut().next().unwrap();
        d.weight = Tensor::from_rows(&[&[1.0]]);
        let x = Tensor::new(vec![20_000, 1], vec![2.0; 20_000]).unwrap();
        let eval = net.forward(&x, Mode::Eval).unwrap();
        assert!(eval.data().iter().all(|&v| v == 2.0));
        let a = net.forward(&x, Mode::Train { dropout_seed: 5 }).unwrap();
        let b = net.forward(&x, Mode::Train { dropout_seed: 5 }).unwrap();
        assert_eq!(a, b);
        let mean = a.sum() / a.len() as f64;
        assert!((mean - 2.0).abs() / 2.0 < 0.02, "mean {mean}");
    }

    #[test]
    fn cross_entropy_limits() {
        let c = 7;
        let uniform = Tensor::zeros(&[3, c]);
        let loss = softmax_cross_entropy(&uniform, &[0, 3, 6]).unwrap();
        assert!((loss - (c as f64).ln()).abs() < 1e-15);
        let confident = Tensor::from_rows(&[&[1000.0, 0.0, 0.0]]);
        assert!(softmax_cross_entropy(&confident, &[0]).unwrap() < 1e-300);
        assert!(matches!(
            softmax_cross_entropy(&uniform, &[0, 1, 7]),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn argmax_breaks_ties_low() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
        assert_eq!(argmax(&[0.0, 0.0]), 0);
    }
}
