//! Dense feed-forward networks with hand-written backpropagation.
//!
//! Batches are row-major: one sample per row. Layer weights are stored
//! `out x in`, so a layer computes `Z = X Wᵀ + b` followed by its activation.

use std::io::{Read, Write};
use std::sync::atomic::{AtomicU64, Ordering};

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis, Zip};
use rand::Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::rng_from_seed;

/// Probability clip used by the cross-entropy loss.
pub const BCE_EPSILON: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Activation {
    Relu,
    LeakyRelu(f64),
    Sigmoid,
    Identity,
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::LeakyRelu(slope) => {
                if z > 0.0 {
                    z
                } else {
                    slope * z
                }
            }
            Activation::Sigmoid => sigmoid(z),
            Activation::Identity => z,
        }
    }

    /// Derivative at pre-activation `z` with output `a`.
    fn derivative(self, z: f64, a: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::LeakyRelu(slope) => {
                if z > 0.0 {
                    1.0
                } else {
                    slope
                }
            }
            Activation::Sigmoid => a * (1.0 - a),
            Activation::Identity => 1.0,
        }
    }

    fn tag(self) -> (u8, f64) {
        match self {
            Activation::Identity => (0, 0.0),
            Activation::Relu => (1, 0.0),
            Activation::LeakyRelu(s) => (2, s),
            Activation::Sigmoid => (3, 0.0),
        }
    }

    fn from_tag(tag: u8, param: f64) -> Option<Self> {
        match tag {
            0 => Some(Activation::Identity),
            1 => Some(Activation::Relu),
            2 => Some(Activation::LeakyRelu(param)),
            3 => Some(Activation::Sigmoid),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    pub weights: Array2<f64>,
    pub biases: Array1<f64>,
    pub activation: Activation,
}

impl DenseLayer {
    pub fn new(weights: Array2<f64>, biases: Array1<f64>, activation: Activation) -> Result<Self> {
        if weights.nrows() != biases.len() {
            return Err(Error::Shape(format!(
                "weights are {}x{} but there are {} biases",
                weights.nrows(),
                weights.ncols(),
                biases.len()
            )));
        }
        if weights.iter().chain(biases.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Domain("layer parameters must be finite".into()));
        }
        Ok(DenseLayer {
            weights,
            biases,
            activation,
        })
    }

    pub fn inputs(&self) -> usize {
        self.weights.ncols()
    }

    pub fn outputs(&self) -> usize {
        self.weights.nrows()
    }
}

/// Shape of one layer for [`init_weights`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LayerSpec {
    pub inputs: usize,
    pub outputs: usize,
    pub activation: Activation,
}

impl LayerSpec {
    pub const fn new(inputs: usize, outputs: usize, activation: Activation) -> Self {
        LayerSpec {
            inputs,
            outputs,
            activation,
        }
    }

    /// Glorot-uniform bound `sqrt(6 / (fan_in + fan_out))`.
    pub fn glorot_limit(&self) -> f64 {
        (6.0 / (self.inputs + self.outputs) as f64).sqrt()
    }
}

static NEXT_STAMP: AtomicU64 = AtomicU64::new(1);

fn fresh_stamp() -> u64 {
    NEXT_STAMP.fetch_add(1, Ordering::Relaxed)
}

/// A chain of dense layers.
///
/// Every parameter change gives the network a new stamp, which lets
/// [`Mlp::backward`] reject caches recorded before the change.
#[derive(Debug, Clone)]
pub struct Mlp {
    layers: Vec<DenseLayer>,
    stamp: u64,
}

impl PartialEq for Mlp {
    fn eq(&self, other: &Self) -> bool {
        self.layers == other.layers
    }
}

/// Activations recorded by [`Mlp::forward`].
#[derive(Debug, Clone)]
pub struct ForwardCache {
    stamp: u64,
    /// `activations[k]` is the input of layer `k`; the last entry is the output.
    activations: Vec<Array2<f64>>,
    pre_activations: Vec<Array2<f64>>,
}

impl ForwardCache {
    pub fn output(&self) -> &Array2<f64> {
        self.activations.last().expect("cache holds at least the input")
    }

    pub fn pre_activations(&self) -> &[Array2<f64>] {
        &self.pre_activations
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGradient {
    pub weights: Array2<f64>,
    pub biases: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<LayerGradient>,
    /// Gradient with respect to the network input batch.
    pub input: Array2<f64>,
}

impl Gradients {
    /// Parameter gradients in [`Mlp::parameters`] order.
    pub fn flatten(&self) -> Vec<f64> {
        self.layers
            .iter()
            .flat_map(|g| g.weights.iter().chain(g.biases.iter()).copied())
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ElasticNet {
    pub l1: f64,
    pub l2: f64,
}

impl ElasticNet {
    pub const NONE: ElasticNet = ElasticNet { l1: 0.0, l2: 0.0 };

    pub fn new(l1: f64, l2: f64) -> Result<Self> {
        let e = ElasticNet { l1, l2 };
        e.validate()?;
        Ok(e)
    }

    /// Splits a combined strength evenly between the two penalties.
    pub fn split(r: f64) -> Result<Self> {
        ElasticNet::new(r / 2.0, r / 2.0)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.l1 >= 0.0 && self.l2 >= 0.0 && self.l1.is_finite() && self.l2.is_finite()) {
            return Err(Error::Config(format!(
                "elastic-net penalties must be finite and non-negative, got l1={} l2={}",
                self.l1, self.l2
            )));
        }
        Ok(())
    }

    pub fn is_none(&self) -> bool {
        self.l1 == 0.0 && self.l2 == 0.0
    }

    /// `l1 * sum|w| + l2 * sum w²` over all weights; biases are exempt.
    pub fn penalty(&self, net: &Mlp) -> f64 {
        net.layers
            .iter()
            .flat_map(|l| l.weights.iter())
            .map(|w| self.l1 * w.abs() + self.l2 * w * w)
            .sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Descent,
    Ascent,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub learning_rate: f64,
    pub direction: Direction,
}

impl SgdConfig {
    pub fn descent(learning_rate: f64) -> Self {
        SgdConfig {
            learning_rate,
            direction: Direction::Descent,
        }
    }

    pub fn ascent(learning_rate: f64) -> Self {
        SgdConfig {
            learning_rate,
            direction: Direction::Ascent,
        }
    }
}

fn sign(w: f64) -> f64 {
    if w > 0.0 {
        1.0
    } else if w < 0.0 {
        -1.0
    } else {
        0.0
    }
}

impl Mlp {
    pub fn new(layers: Vec<DenseLayer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Shape("a network needs at least one layer".into()));
        }
        for (k, pair) in layers.windows(2).enumerate() {
            if pair[0].outputs() != pair[1].inputs() {
                return Err(Error::Shape(format!(
                    "layer {k} emits {} values but layer {} expects {}",
                    pair[0].outputs(),
                    k + 1,
                    pair[1].inputs()
                )));
            }
        }
        Ok(Mlp {
            layers,
            stamp: fresh_stamp(),
        })
    }

    /// Glorot-uniform weights drawn from `rng`, zero biases.
    pub fn init<R: Rng + ?Sized>(specs: &[LayerSpec], rng: &mut R) -> Result<Self> {
        let layers = specs
            .iter()
            .map(|s| {
                if s.inputs == 0 || s.outputs == 0 {
                    return Err(Error::Shape("layer sizes must be positive".into()));
                }
                let limit = s.glorot_limit();
                let dist = Uniform::new_inclusive(-limit, limit);
                let weights = Array2::from_shape_simple_fn((s.outputs, s.inputs), || dist.sample(rng));
                DenseLayer::new(weights, Array1::zeros(s.outputs), s.activation)
            })
            .collect::<Result<Vec<_>>>()?;
        Mlp::new(layers)
    }

    pub fn layers(&self) -> &[DenseLayer] {
        &self.layers
    }

    /// Mutable access; invalidates outstanding caches.
    pub fn layers_mut(&mut self) -> &mut [DenseLayer] {
        self.stamp = fresh_stamp();
        &mut self.layers
    }

    pub fn n_inputs(&self) -> usize {
        self.layers[0].inputs()
    }

    pub fn n_outputs(&self) -> usize {
        self.layers[self.layers.len() - 1].outputs()
    }

    pub fn n_parameters(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.len() + l.biases.len())
            .sum()
    }

    /// All weights then biases, layer by layer, weights row-major.
    pub fn parameters(&self) -> Vec<f64> {
        self.layers
            .iter()
            .flat_map(|l| l.weights.iter().chain(l.biases.iter()).copied())
            .collect()
    }

    pub fn set_parameters(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.n_parameters() {
            return Err(Error::Shape(format!(
                "expected {} parameters, got {}",
                self.n_parameters(),
                params.len()
            )));
        }
        let mut it = params.iter();
        for layer in self.layers_mut() {
            for (w, p) in layer.weights.iter_mut().chain(layer.biases.iter_mut()).zip(&mut it) {
                *w = *p;
            }
        }
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weights.iter().chain(l.biases.iter()).all(|v| v.is_finite()))
    }

    fn check_input(&self, batch: &ArrayView2<f64>) -> Result<()> {
        if batch.ncols() != self.n_inputs() {
            return Err(Error::Shape(format!(
                "batch has {} columns, network expects {}",
                batch.ncols(),
                self.n_inputs()
            )));
        }
        Ok(())
    }

    fn affine(layer: &DenseLayer, input: &ArrayView2<f64>) -> Array2<f64> {
        let mut z = input.dot(&layer.weights.t());
        z += &layer.biases;
        z
    }

    /// Outputs only, without recording a cache.
    pub fn predict(&self, batch: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check_input(&batch)?;
        let mut current = batch.to_owned();
        for layer in &self.layers {
            let mut z = Self::affine(layer, &current.view());
            z.mapv_inplace(|v| layer.activation.apply(v));
            current = z;
        }
        Ok(current)
    }

    pub fn forward(&self, batch: ArrayView2<f64>) -> Result<(Array2<f64>, ForwardCache)> {
        self.check_input(&batch)?;
        let mut activations = Vec::with_capacity(self.layers.len() + 1);
        let mut pre_activations = Vec::with_capacity(self.layers.len());
        activations.push(batch.to_owned());
        for layer in &self.layers {
            let z = Self::affine(layer, &activations[activations.len() - 1].view());
            let a = z.mapv(|v| layer.activation.apply(v));
            pre_activations.push(z);
            activations.push(a);
        }
        let cache = ForwardCache {
            stamp: self.stamp,
            activations,
            pre_activations,
        };
        Ok((cache.output().clone(), cache))
    }

    fn check_cache(&self, cache: &ForwardCache, loss_grad: &ArrayView2<f64>) -> Result<()> {
        if cache.stamp != self.stamp {
            return Err(Error::Usage(
                "forward cache does not belong to the current network parameters".into(),
            ));
        }
        if loss_grad.dim() != cache.output().dim() {
            return Err(Error::Shape(format!(
                "loss gradient is {:?}, network output is {:?}",
                loss_grad.dim(),
                cache.output().dim()
            )));
        }
        Ok(())
    }

    /// Runs the reverse pass; `on_layer` receives `(k, delta_k)` when set.
    fn reverse<F>(&self, cache: &ForwardCache, loss_grad: ArrayView2<f64>, mut on_layer: Option<F>) -> Array2<f64>
    where
        F: FnMut(usize, &Array2<f64>),
    {
        let mut grad = loss_grad.to_owned();
        for k in (0..self.layers.len()).rev() {
            let layer = &self.layers[k];
            let act = layer.activation;
            Zip::from(&mut grad)
                .and(&cache.pre_activations[k])
                .and(&cache.activations[k + 1])
                .for_each(|g, &z, &a| *g *= act.derivative(z, a));
            if let Some(f) = on_layer.as_mut() {
                f(k, &grad);
            }
            grad = grad.dot(&layer.weights);
        }
        grad
    }

    /// Gradients of a loss with respect to every parameter and to the input.
    ///
    /// `loss_grad` is the derivative of the loss with respect to the network
    /// outputs. The elastic-net term adds `2 l2 w + l1 sign(w)` to weight
    /// gradients; biases are not regularized.
    pub fn backward(&self, cache: &ForwardCache, loss_grad: ArrayView2<f64>, enet: &ElasticNet) -> Result<Gradients> {
        self.check_cache(cache, &loss_grad)?;
        enet.validate()?;
        let mut layers: Vec<Option<LayerGradient>> = vec![None; self.layers.len()];
        let input = self.reverse(
            cache,
            loss_grad,
            Some(|k: usize, delta: &Array2<f64>| {
                let mut weights = delta.t().dot(&cache.activations[k]);
                if !enet.is_none() {
                    Zip::from(&mut weights)
                        .and(&self.layers[k].weights)
                        .for_each(|g, &w| *g += 2.0 * enet.l2 * w + enet.l1 * sign(w));
                }
                layers[k] = Some(LayerGradient {
                    weights,
                    biases: delta.sum_axis(Axis(0)),
                });
            }),
        );
        Ok(Gradients {
            layers: layers.into_iter().map(|g| g.expect("every layer visited")).collect(),
            input,
        })
    }

    /// Gradient with respect to the input batch only; skips weight gradients.
    pub fn input_gradient(&self, cache: &ForwardCache, loss_grad: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check_cache(cache, &loss_grad)?;
        Ok(self.reverse(cache, loss_grad, None::<fn(usize, &Array2<f64>)>))
    }

    pub fn sgd_step(&mut self, grads: &Gradients, cfg: &SgdConfig) -> Result<()> {
        if !(cfg.learning_rate >= 0.0 && cfg.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate must be finite and non-negative, got {}",
                cfg.learning_rate
            )));
        }
        if grads.layers.len() != self.layers.len()
            || grads.layers.iter().zip(&self.layers).any(|(g, l)| {
                g.weights.dim() != l.weights.dim() || g.biases.len() != l.biases.len()
            })
        {
            return Err(Error::Shape("gradient shapes do not match the network".into()));
        }
        let step = match cfg.direction {
            Direction::Descent => -cfg.learning_rate,
            Direction::Ascent => cfg.learning_rate,
        };
        for (layer, g) in self.layers_mut().iter_mut().zip(&grads.layers) {
            layer.weights.scaled_add(step, &g.weights);
            layer.biases.scaled_add(step, &g.biases);
        }
        Ok(())
    }
}

/// Glorot-uniform initialization from a dedicated seed.
pub fn init_weights(specs: &[LayerSpec], seed: u64) -> Result<Mlp> {
    Mlp::init(specs, &mut rng_from_seed(seed))
}

fn check_same_len(predictions: &ArrayView1<f64>, labels: &ArrayView1<f64>) -> Result<()> {
    if predictions.len() != labels.len() || predictions.is_empty() {
        return Err(Error::Shape(format!(
            "{} predictions vs {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    Ok(())
}

fn clip(p: f64) -> f64 {
    p.clamp(BCE_EPSILON, 1.0 - BCE_EPSILON)
}

/// Mean binary cross-entropy with predictions clipped to `[ε, 1-ε]`.
pub fn bce_loss(predictions: ArrayView1<f64>, labels: ArrayView1<f64>) -> Result<f64> {
    check_same_len(&predictions, &labels)?;
    let total: f64 = predictions
        .iter()
        .zip(labels.iter())
        .map(|(&p, &y)| {
            let p = clip(p);
            -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
        })
        .sum();
    Ok(total / predictions.len() as f64)
}

/// Derivative of [`bce_loss`] with respect to each prediction.
///
/// The clip is treated as the identity here so that saturated predictions
/// still receive a gradient.
pub fn bce_grad(predictions: ArrayView1<f64>, labels: ArrayView1<f64>) -> Result<Array1<f64>> {
    check_same_len(&predictions, &labels)?;
    let n = predictions.len() as f64;
    Ok(Zip::from(&predictions).and(&labels).map_collect(|&p, &y| {
        let p = clip(p);
        (p - y) / (p * (1.0 - p)) / n
    }))
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"AUGBPMNN";
pub const CHECKPOINT_VERSION: u32 = 1;

fn write_u32<W: Write>(w: &mut W, v: u32) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn write_f64<W: Write>(w: &mut W, v: f64) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

/// Binary checkpoint; the byte layout is described in `docs/checkpoint-format.md`.
pub fn write_checkpoint<W: Write>(net: &Mlp, mut out: W) -> std::io::Result<()> {
    out.write_all(CHECKPOINT_MAGIC)?;
    write_u32(&mut out, CHECKPOINT_VERSION)?;
    write_u32(&mut out, net.layers.len() as u32)?;
    for layer in &net.layers {
        let (tag, param) = layer.activation.tag();
        write_u32(&mut out, layer.inputs() as u32)?;
        write_u32(&mut out, layer.outputs() as u32)?;
        out.write_all(&[tag])?;
        write_f64(&mut out, param)?;
        for &w in layer.weights.iter() {
            write_f64(&mut out, w)?;
        }
        for &b in layer.biases.iter() {
            write_f64(&mut out, b)?;
        }
    }
    Ok(())
}

fn ckpt_err(e: std::io::Error) -> Error {
    Error::Checkpoint(format!("truncated or unreadable checkpoint: {e}"))
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(ckpt_err)?;
    Ok(u32::from_le_bytes(b))
}

fn read_f64<R: Read>(r: &mut R) -> Result<f64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b).map_err(ckpt_err)?;
    Ok(f64::from_le_bytes(b))
}

pub fn read_checkpoint<R: Read>(mut input: R) -> Result<Mlp> {
    let mut magic = [0u8; 8];
    input.read_exact(&mut magic).map_err(ckpt_err)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint("bad magic header".into()));
    }
    let version = read_u32(&mut input)?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint version {version}, expected {CHECKPOINT_VERSION}"
        )));
    }
    let n_layers = read_u32(&mut input)? as usize;
    let mut layers = Vec::with_capacity(n_layers.min(64));
    for _ in 0..n_layers {
        let inputs = read_u32(&mut input)? as usize;
        let outputs = read_u32(&mut input)? as usize;
        let mut tag = [0u8; 1];
        input.read_exact(&mut tag).map_err(ckpt_err)?;
        let param = read_f64(&mut input)?;
        let activation = Activation::from_tag(tag[0], param)
            .ok_or_else(|| Error::Checkpoint(format!("unknown activation tag {}", tag[0])))?;
        let mut weights = Vec::with_capacity(inputs * outputs);
        for _ in 0..inputs * outputs {
            weights.push(read_f64(&mut input)?);
        }
        let mut biases = Vec::with_capacity(outputs);
        for _ in 0..outputs {
            biases.push(read_f64(&mut input)?);
        }
        let weights = Array2::from_shape_vec((outputs, inputs), weights)
            .map_err(|e| Error::Checkpoint(e.to_string()))?;
        layers.push(
            DenseLayer::new(weights, Array1::from(biases), activation)
                .map_err(|e| Error::Checkpoint(e.to_string()))?,
        );
    }
    let mut rest = [0u8; 1];
    if input.read(&mut rest).map_err(ckpt_err)? != 0 {
        return Err(Error::Checkpoint("trailing bytes after last layer".into()));
    }
    Mlp::new(layers).map_err(|e| Error::Checkpoint(e.to_string()))
}
