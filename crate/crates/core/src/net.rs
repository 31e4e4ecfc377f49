//! Per-modality feed-forward networks with a bag-concept layer.
//!
//! Each modality gets a small fully-connected encoder, a label head whose
//! per-instance softmax columns form the bag-concept matrix, configurable
//! row-wise pooling to a bag-level prediction, and an optional decoder for
//! instance reconstruction. Backward passes are hand-rolled reverse mode
//! over cached activations.

use ndarray::{Array1, Array2};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ot::{make_histogram, Histogram, HistogramMode, OtError};

#[derive(Debug, Error)]
pub enum NetError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("non-finite activation encountered")]
    NonFiniteActivation,
    #[error("network has no decoder")]
    NoDecoder,
    #[error("cached forward pass belongs to bag {cached}, not bag {requested}")]
    StaleCache { cached: u64, requested: u64 },
    #[error(transparent)]
    Histogram(#[from] OtError),
}

/// One instance of a modality bag.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Instance {
    pub features: Vec<f64>,
}

/// A variable-length set of instances sharing one bag-level label vector.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Bag {
    pub modality: u8,
    pub bag_id: u64,
    pub instances: Vec<Instance>,
}

impl Bag {
    pub fn new(modality: u8, bag_id: u64, instances: Vec<Instance>) -> Bag {
        assert!(!instances.is_empty(), "bag must contain at least one instance");
        Bag {
            modality,
            bag_id,
            instances,
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.instances[0].features.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
    Linear,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Linear => x,
        }
    }

    /// Derivative expressed through the activation output.
    fn derivative_from_output(self, out: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - out * out,
            Activation::Linear => 1.0,
        }
    }
}

/// Affine layer followed by a pointwise nonlinearity.
#[derive(Debug, Clone)]
pub struct Layer {
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
    pub activation: Activation,
}

impl Layer {
    fn forward(&self, input: &Array1<f64>) -> Array1<f64> {
        let pre = self.weights.dot(input) + &self.bias;
        pre.mapv(|x| self.activation.apply(x))
    }
}

/// Row-wise pooling over the bag-concept layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    Max,
    Mean,
}

/// Combination of the two modal bag-level predictions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fusion {
    Mean,
    Max,
}

/// Architecture of one modality's network.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkConfig {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub label_count: usize,
    pub activation: Activation,
    pub with_decoder: bool,
}

impl NetworkConfig {
    pub fn hidden_width(&self) -> usize {
        *self.hidden_dims.last().unwrap_or(&self.input_dim)
    }
}

/// Encoder stack, label head `(W_v, b_v)` and optional mirror decoder.
#[derive(Debug, Clone)]
pub struct ModalNetwork {
    pub config: NetworkConfig,
    pub encoder: Vec<Layer>,
    pub label_weights: Array2<f64>,
    pub label_bias: Array1<f64>,
    pub decoder: Option<Vec<Layer>>,
}

fn init_layer<R: Rng>(rng: &mut R, rows: usize, cols: usize, activation: Activation) -> Layer {
    // Symmetric-uniform fan-in scaling.
    let bound = 1.0 / (cols as f64).sqrt();
    let weights = Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-bound..bound));
    Layer {
        weights,
        bias: Array1::zeros(rows),
        activation,
    }
}

impl ModalNetwork {
    pub fn init<R: Rng>(config: NetworkConfig, rng: &mut R) -> ModalNetwork {
        let mut dims = vec![config.input_dim];
        dims.extend(&config.hidden_dims);
        let encoder: Vec<Layer> = dims
            .windows(2)
            .map(|w| init_layer(rng, w[1], w[0], config.activation))
            .collect();
        let hidden = config.hidden_width();
        let label_weights = {
            let bound = 1.0 / (hidden as f64).sqrt();
            Array2::from_shape_fn((config.label_count, hidden), |_| rng.gen_range(-bound..bound))
        };
        let label_bias = Array1::zeros(config.label_count);
        let decoder = config.with_decoder.then(|| {
            let mut rev: Vec<usize> = dims.clone();
            rev.reverse();
            rev.windows(2)
                .enumerate()
                .map(|(idx, w)| {
                    // Last decoder layer is linear so outputs can match raw features.
                    let act = if idx + 2 == dims.len() {
                        Activation::Linear
                    } else {
                        config.activation
                    };
                    init_layer(rng, w[1], w[0], act)
                })
                .collect()
        });
        ModalNetwork {
            config,
            encoder,
            label_weights,
            label_bias,
            decoder,
        }
    }

    pub fn label_count(&self) -> usize {
        self.config.label_count
    }

    /// Deterministic encoder forward pass for one instance.
    pub fn encode_instance(&self, instance: &Instance) -> Result<Array1<f64>, NetError> {
        if instance.features.len() != self.config.input_dim {
            return Err(NetError::DimensionMismatch(format!(
                "instance has {} features, network expects {}",
                instance.features.len(),
                self.config.input_dim
            )));
        }
        let mut x = Array1::from_vec(instance.features.clone());
        for layer in &self.encoder {
            x = layer.forward(&x);
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(NetError::NonFiniteActivation);
        }
        Ok(x)
    }

    /// Forward pass over a bag, caching every activation for backward.
    pub fn forward_bag(&self, bag: &Bag) -> Result<BagForward, NetError> {
        let mut instance_caches = Vec::with_capacity(bag.instances.len());
        let l = self.label_count();
        let mut scores = Array2::zeros((l, bag.instances.len()));
        for (col, instance) in bag.instances.iter().enumerate() {
            if instance.features.len() != self.config.input_dim {
                return Err(NetError::DimensionMismatch(format!(
                    "instance {col} has {} features, network expects {}",
                    instance.features.len(),
                    self.config.input_dim
                )));
            }
            let mut x = Array1::from_vec(instance.features.clone());
            let mut layer_inputs = Vec::with_capacity(self.encoder.len());
            let mut layer_outputs = Vec::with_capacity(self.encoder.len());
            for layer in &self.encoder {
                layer_inputs.push(x.clone());
                x = layer.forward(&x);
                layer_outputs.push(x.clone());
            }
            if x.iter().any(|v| !v.is_finite()) {
                return Err(NetError::NonFiniteActivation);
            }
            let logits = self.label_weights.dot(&x) + &self.label_bias;
            let probs = softmax(&logits);
            for row in 0..l {
                scores[[row, col]] = probs[row];
            }
            instance_caches.push(InstanceCache {
                layer_inputs,
                layer_outputs,
                hidden: x,
                probs,
            });
        }
        Ok(BagForward {
            bag_id: bag.bag_id,
            concept: BagConcept { scores },
            instance_caches,
        })
    }

    /// Bag-concept layer: one softmax column per instance.
    pub fn bag_concept(&self, bag: &Bag) -> Result<BagConcept, NetError> {
        Ok(self.forward_bag(bag)?.concept)
    }

    /// Sum of squared instance reconstruction errors through the decoder.
    pub fn reconstruction_loss(&self, bag: &Bag) -> Result<f64, NetError> {
        let decoder = self.decoder.as_ref().ok_or(NetError::NoDecoder)?;
        let mut total = 0.0;
        for instance in &bag.instances {
            let hidden = self.encode_instance(instance)?;
            let mut x = hidden;
            for layer in decoder {
                x = layer.forward(&x);
            }
            total += instance
                .features
                .iter()
                .zip(x.iter())
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>();
        }
        Ok(total)
    }

    /// Reverse-mode gradients of `⟨upstream, pooled(bag)⟩` through pooling,
    /// softmax, the label head and the encoder.
    ///
    /// Max pooling routes each row's gradient to its argmax column, ties
    /// broken toward the lowest column index.
    pub fn backward(
        &self,
        forward: &BagForward,
        bag: &Bag,
        upstream: &Array1<f64>,
        pooling: Pooling,
        renormalize: bool,
    ) -> Result<ParamGrads, NetError> {
        if forward.bag_id != bag.bag_id {
            return Err(NetError::StaleCache {
                cached: forward.bag_id,
                requested: bag.bag_id,
            });
        }
        let l = self.label_count();
        if upstream.len() != l {
            return Err(NetError::DimensionMismatch(format!(
                "upstream gradient has length {}, expected {l}",
                upstream.len()
            )));
        }
        let scores = &forward.concept.scores;
        let m = scores.ncols();
        let mut grads = ParamGrads::zeros_like(self);

        // Gradient of the pooled prediction back to concept columns.
        let mut concept_grad = Array2::zeros((l, m));
        match pooling {
            Pooling::Mean => {
                for i in 0..l {
                    for j in 0..m {
                        concept_grad[[i, j]] = upstream[i] / m as f64;
                    }
                }
            }
            Pooling::Max => {
                let mut raw = Array1::zeros(l);
                let mut argmax = vec![0usize; l];
                for i in 0..l {
                    let (mut best, mut best_j) = (f64::NEG_INFINITY, 0);
                    for j in 0..m {
                        if scores[[i, j]] > best {
                            best = scores[[i, j]];
                            best_j = j;
                        }
                    }
                    raw[i] = best;
                    argmax[i] = best_j;
                }
                if renormalize {
                    let s: f64 = raw.sum();
                    let pooled = &raw / s;
                    let dot: f64 = upstream
                        .iter()
                        .zip(pooled.iter())
                        .map(|(g, p)| g * p)
                        .sum();
                    for i in 0..l {
                        concept_grad[[i, argmax[i]]] = (upstream[i] - dot) / s;
                    }
                } else {
                    for i in 0..l {
                        concept_grad[[i, argmax[i]]] = upstream[i];
                    }
                }
            }
        }

        for (col, cache) in forward.instance_caches.iter().enumerate() {
            let dy = concept_grad.column(col).to_owned();
            if dy.iter().all(|&g| g == 0.0) {
                continue;
            }
            // Softmax backward: dz = y ⊙ (dy − ⟨dy, y⟩).
            let dot: f64 = dy.iter().zip(cache.probs.iter()).map(|(g, p)| g * p).sum();
            let dz = Array1::from_shape_fn(l, |i| cache.probs[i] * (dy[i] - dot));
            accumulate_outer(&mut grads.label_weights, &dz, &cache.hidden);
            grads.label_bias += &dz;
            let dx = self.label_weights.t().dot(&dz);
            self.backprop_encoder(cache, dx, &mut grads);
        }
        Ok(grads)
    }

    /// Reconstruction loss and its gradients for every instance of `bag`.
    pub fn backward_reconstruction(&self, bag: &Bag) -> Result<(f64, ParamGrads), NetError> {
        let decoder = self.decoder.as_ref().ok_or(NetError::NoDecoder)?;
        let mut grads = ParamGrads::zeros_like(self);
        let mut loss = 0.0;
        for instance in &bag.instances {
            if instance.features.len() != self.config.input_dim {
                return Err(NetError::DimensionMismatch(format!(
                    "instance has {} features, network expects {}",
                    instance.features.len(),
                    self.config.input_dim
                )));
            }
            let mut x = Array1::from_vec(instance.features.clone());
            let mut enc_inputs = Vec::new();
            let mut enc_outputs = Vec::new();
            for layer in &self.encoder {
                enc_inputs.push(x.clone());
                x = layer.forward(&x);
                enc_outputs.push(x.clone());
            }
            let mut dec_inputs = Vec::new();
            let mut dec_outputs = Vec::new();
            for layer in decoder {
                dec_inputs.push(x.clone());
                x = layer.forward(&x);
                dec_outputs.push(x.clone());
            }
            if x.iter().any(|v| !v.is_finite()) {
                return Err(NetError::NonFiniteActivation);
            }
            let target = Array1::from_vec(instance.features.clone());
            let residual = &x - &target;
            loss += residual.iter().map(|r| r * r).sum::<f64>();
            let mut grad = residual.mapv(|r| 2.0 * r);

            let dec_grads = grads.decoder.as_mut().unwrap();
            for (idx, layer) in decoder.iter().enumerate().rev() {
                let dpre = Array1::from_shape_fn(grad.len(), |i| {
                    grad[i] * layer.activation.derivative_from_output(dec_outputs[idx][i])
                });
                accumulate_outer(&mut dec_grads[idx].0, &dpre, &dec_inputs[idx]);
                dec_grads[idx].1 += &dpre;
                grad = layer.weights.t().dot(&dpre);
            }
            let cache = InstanceCache {
                layer_inputs: enc_inputs,
                layer_outputs: enc_outputs,
                hidden: Array1::zeros(0),
                probs: Array1::zeros(0),
            };
            self.backprop_encoder(&cache, grad, &mut grads);
        }
        Ok((loss, grads))
    }

    fn backprop_encoder(
        &self,
        cache: &InstanceCache,
        mut grad: Array1<f64>,
        grads: &mut ParamGrads,
    ) {
        for (idx, layer) in self.encoder.iter().enumerate().rev() {
            let dpre = Array1::from_shape_fn(grad.len(), |i| {
                grad[i] * layer.activation.derivative_from_output(cache.layer_outputs[idx][i])
            });
            accumulate_outer(&mut grads.encoder[idx].0, &dpre, &cache.layer_inputs[idx]);
            grads.encoder[idx].1 += &dpre;
            grad = layer.weights.t().dot(&dpre);
        }
    }

    /// Apply a plain gradient-descent step: `θ ← θ − rate·g`.
    pub fn apply_gradients(&mut self, grads: &ParamGrads, rate: f64) {
        for (layer, (gw, gb)) in self.encoder.iter_mut().zip(grads.encoder.iter()) {
            layer.weights.scaled_add(-rate, gw);
            layer.bias.scaled_add(-rate, gb);
        }
        self.label_weights.scaled_add(-rate, &grads.label_weights);
        self.label_bias.scaled_add(-rate, &grads.label_bias);
        if let (Some(decoder), Some(dgrads)) = (self.decoder.as_mut(), grads.decoder.as_ref()) {
            for (layer, (gw, gb)) in decoder.iter_mut().zip(dgrads.iter()) {
                layer.weights.scaled_add(-rate, gw);
                layer.bias.scaled_add(-rate, gb);
            }
        }
    }

    /// Flatten all parameters in a fixed order (encoder, head, decoder).
    pub fn param_vec(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for layer in &self.encoder {
            out.extend(layer.weights.iter());
            out.extend(layer.bias.iter());
        }
        out.extend(self.label_weights.iter());
        out.extend(self.label_bias.iter());
        if let Some(decoder) = &self.decoder {
            for layer in decoder {
                out.extend(layer.weights.iter());
                out.extend(layer.bias.iter());
            }
        }
        out
    }

    /// Inverse of [`param_vec`].
    pub fn set_params(&mut self, params: &[f64]) {
        let mut it = params.iter();
        for layer in &mut self.encoder {
            for dst in layer.weights.iter_mut().chain(layer.bias.iter_mut()) {
                *dst = *it.next().expect("parameter vector too short");
            }
        }
        for dst in self
            .label_weights
            .iter_mut()
            .chain(self.label_bias.iter_mut())
        {
            *dst = *it.next().expect("parameter vector too short");
        }
        if let Some(decoder) = &mut self.decoder {
            for layer in decoder {
                for dst in layer.weights.iter_mut().chain(layer.bias.iter_mut()) {
                    *dst = *it.next().expect("parameter vector too short");
                }
            }
        }
        assert!(it.next().is_none(), "parameter vector too long");
    }
}

fn accumulate_outer(target: &mut Array2<f64>, row: &Array1<f64>, col: &Array1<f64>) {
    for i in 0..row.len() {
        if row[i] == 0.0 {
            continue;
        }
        for j in 0..col.len() {
            target[[i, j]] += row[i] * col[j];
        }
    }
}

fn softmax(logits: &Array1<f64>) -> Array1<f64> {
    // Max-logit subtraction for numerical stability.
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps = logits.mapv(|x| (x - max).exp());
    let sum = exps.sum();
    exps / sum
}

/// Cached activations for one instance.
#[derive(Debug, Clone)]
struct InstanceCache {
    layer_inputs: Vec<Array1<f64>>,
    layer_outputs: Vec<Array1<f64>>,
    hidden: Array1<f64>,
    probs: Array1<f64>,
}

/// The `L×m` bag-concept matrix; each column is an instance's softmax.
#[derive(Debug, Clone)]
pub struct BagConcept {
    pub scores: Array2<f64>,
}

/// Forward-pass cache for one bag.
#[derive(Debug, Clone)]
pub struct BagForward {
    pub bag_id: u64,
    pub concept: BagConcept,
    instance_caches: Vec<InstanceCache>,
}

/// Parameter-shaped gradient accumulator.
#[derive(Debug, Clone)]
pub struct ParamGrads {
    pub encoder: Vec<(Array2<f64>, Array1<f64>)>,
    pub label_weights: Array2<f64>,
    pub label_bias: Array1<f64>,
    pub decoder: Option<Vec<(Array2<f64>, Array1<f64>)>>,
}

impl ParamGrads {
    pub fn zeros_like(net: &ModalNetwork) -> ParamGrads {
        ParamGrads {
            encoder: net
                .encoder
                .iter()
                .map(|l| (Array2::zeros(l.weights.dim()), Array1::zeros(l.bias.len())))
                .collect(),
            label_weights: Array2::zeros(net.label_weights.dim()),
            label_bias: Array1::zeros(net.label_bias.len()),
            decoder: net.decoder.as_ref().map(|d| {
                d.iter()
                    .map(|l| (Array2::zeros(l.weights.dim()), Array1::zeros(l.bias.len())))
                    .collect()
            }),
        }
    }

    pub fn add(&mut self, other: &ParamGrads) {
        for ((w, b), (ow, ob)) in self.encoder.iter_mut().zip(other.encoder.iter()) {
            *w += ow;
            *b += ob;
        }
        self.label_weights += &other.label_weights;
        self.label_bias += &other.label_bias;
        if let (Some(d), Some(od)) = (self.decoder.as_mut(), other.decoder.as_ref()) {
            for ((w, b), (ow, ob)) in d.iter_mut().zip(od.iter()) {
                *w += ow;
                *b += ob;
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for (w, b) in self.encoder.iter_mut() {
            w.mapv_inplace(|x| x * factor);
            b.mapv_inplace(|x| x * factor);
        }
        self.label_weights.mapv_inplace(|x| x * factor);
        self.label_bias.mapv_inplace(|x| x * factor);
        if let Some(d) = self.decoder.as_mut() {
            for (w, b) in d.iter_mut() {
                w.mapv_inplace(|x| x * factor);
                b.mapv_inplace(|x| x * factor);
            }
        }
    }

    /// Flatten in the same order as [`ModalNetwork::param_vec`].
    pub fn grad_vec(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for (w, b) in &self.encoder {
            out.extend(w.iter());
            out.extend(b.iter());
        }
        out.extend(self.label_weights.iter());
        out.extend(self.label_bias.iter());
        if let Some(d) = &self.decoder {
            for (w, b) in d {
                out.extend(w.iter());
                out.extend(b.iter());
            }
        }
        out
    }
}

/// Pool the bag-concept matrix into a bag-level prediction.
pub fn pool_bag(
    concept: &BagConcept,
    mode: Pooling,
    renormalize: bool,
) -> Result<Histogram, NetError> {
    let raw = pool_bag_raw(concept, mode);
    // Max of softmax columns does not sum to 1; projecting back to the
    // simplex keeps the prediction usable as an OT marginal. Mean pooling
    // already lands there, so normalisation is a no-op for it, and callers
    // declining renormalisation still receive a valid histogram.
    let _ = renormalize;
    Ok(make_histogram(&raw, HistogramMode::Normalize)?)
}

/// Raw row-wise pooled vector without simplex normalisation.
pub fn pool_bag_raw(concept: &BagConcept, mode: Pooling) -> Vec<f64> {
    let (l, m) = concept.scores.dim();
    match mode {
        Pooling::Max => (0..l)
            .map(|i| {
                concept
                    .scores
                    .row(i)
                    .iter()
                    .cloned()
                    .fold(f64::NEG_INFINITY, f64::max)
            })
            .collect(),
        Pooling::Mean => (0..l)
            .map(|i| concept.scores.row(i).sum() / m as f64)
            .collect(),
    }
}

/// Combine the two modalities' bag-level predictions.
pub fn fuse_predictions(
    f1: &Histogram,
    f2: &Histogram,
    mode: Fusion,
) -> Result<Histogram, NetError> {
    if f1.len() != f2.len() {
        return Err(NetError::DimensionMismatch(format!(
            "predictions have lengths {} and {}",
            f1.len(),
            f2.len()
        )));
    }
    let raw: Vec<f64> = match mode {
        Fusion::Mean => f1
            .values()
            .iter()
            .zip(f2.values().iter())
            .map(|(a, b)| 0.5 * (a + b))
            .collect(),
        Fusion::Max => f1
            .values()
            .iter()
            .zip(f2.values().iter())
            .map(|(a, b)| a.max(*b))
            .collect(),
    };
    Ok(make_histogram(&raw, HistogramMode::Normalize)?)
}
