//! Alternating training loop: batched predictor updates driven by
//! transport subgradients, a per-batch closed-form ground-metric update,
//! the semi-supervised loss assembly (cross-modal pseudo-couplings plus
//! autoencoder reconstruction), and epoch-level convergence monitoring.

use std::io::Write;
use std::path::Path;

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::metric::{
    burg_divergence, cost_from_kernel, update_kernel, init_reference_kernel, MetricError,
    PlanAccumulator, SimilarityKernel,
};
use crate::net::{
    fuse_predictions, pool_bag, Activation, Bag, Fusion, Layer, ModalNetwork, NetError,
    NetworkConfig, ParamGrads, Pooling,
};
use crate::ot::{
    make_histogram, ot_subgradient, sinkhorn_plan, Histogram, HistogramMode, OtError,
    TransportPlan, DEFAULT_MAX_ITER, DEFAULT_TOL,
};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("no labeled examples available")]
    NoLabeledData,
    #[error("objective became non-finite at epoch {epoch}")]
    NonFiniteObjective { epoch: usize },
    #[error("prediction requires at least one bag")]
    NoInput,
    #[error(transparent)]
    Ot(#[from] OtError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
}

fn default_lambda() -> f64 {
    50.0
}
fn default_lambda1() -> f64 {
    1.0
}
fn default_learning_rate() -> f64 {
    0.05
}
fn default_max_epochs() -> usize {
    50
}
fn default_batch_size() -> usize {
    8
}
fn default_epsilon() -> f64 {
    1e-6
}
fn default_ae_weight() -> f64 {
    1.0
}
fn default_pooling() -> Pooling {
    Pooling::Max
}
fn default_fusion() -> Fusion {
    Fusion::Mean
}
fn default_hidden_dims() -> Vec<usize> {
    vec![16, 8]
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainingConfig {
    /// Entropic regularisation coefficient λ.
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    /// Metric-regularisation trade-off λ1.
    #[serde(default = "default_lambda1")]
    pub lambda1: f64,
    /// Base SGD step size α.
    #[serde(default = "default_learning_rate")]
    pub learning_rate: f64,
    /// When set, use the α/√t decay schedule instead of a constant rate.
    #[serde(default)]
    pub decay: bool,
    /// Optional geometric annealing: multiply the step size by this
    /// factor after every epoch. Combines with `decay`.
    #[serde(default)]
    pub epoch_decay: Option<f64>,
    #[serde(default = "default_max_epochs")]
    pub max_epochs: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    /// Convergence threshold on the epoch objective difference.
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    #[serde(default)]
    pub semi_supervised: bool,
    #[serde(default = "default_ae_weight")]
    pub ae_weight: f64,
    #[serde(default = "default_pooling")]
    pub pooling: Pooling,
    #[serde(default = "default_fusion")]
    pub fusion: Fusion,
    /// Freeze the ground metric at its label co-occurrence initialisation.
    #[serde(default)]
    pub fixed_metric: bool,
    /// Encoder hidden widths shared by both modal networks.
    #[serde(default = "default_hidden_dims")]
    pub hidden_dims: Vec<usize>,
    #[serde(default)]
    pub seed: u64,
}

impl Default for TrainingConfig {
    fn default() -> TrainingConfig {
        TrainingConfig {
            lambda: default_lambda(),
            lambda1: default_lambda1(),
            learning_rate: default_learning_rate(),
            decay: false,
            epoch_decay: None,
            max_epochs: default_max_epochs(),
            batch_size: default_batch_size(),
            epsilon: default_epsilon(),
            semi_supervised: false,
            ae_weight: default_ae_weight(),
            pooling: default_pooling(),
            fusion: default_fusion(),
            fixed_metric: false,
            hidden_dims: default_hidden_dims(),
            seed: 0,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let err = |m: String| Err(TrainError::InvalidConfig(m));
        if self.lambda <= 0.0 || !self.lambda.is_finite() {
            return err(format!("lambda {} must be positive", self.lambda));
        }
        if self.lambda1 <= 0.0 || !self.lambda1.is_finite() {
            return err(format!("lambda1 {} must be positive", self.lambda1));
        }
        if self.learning_rate <= 0.0 || !self.learning_rate.is_finite() {
            return err(format!("learning_rate {} must be positive", self.learning_rate));
        }
        if self.batch_size == 0 {
            return err("batch_size must be >= 1".into());
        }
        if self.epsilon < 0.0 {
            return err(format!("epsilon {} must be nonnegative", self.epsilon));
        }
        if self.ae_weight < 0.0 {
            return err(format!("ae_weight {} must be nonnegative", self.ae_weight));
        }
        if self.hidden_dims.is_empty() || self.hidden_dims.contains(&0) {
            return err("hidden_dims must be nonempty with positive widths".into());
        }
        if let Some(g) = self.epoch_decay {
            if !(g > 0.0 && g <= 1.0) {
                return err(format!("epoch_decay {g} must lie in (0, 1]"));
            }
        }
        Ok(())
    }

    fn rate_at(&self, step: usize, epoch: usize) -> f64 {
        let base = if self.decay {
            self.learning_rate / (step as f64).sqrt()
        } else {
            self.learning_rate
        };
        match self.epoch_decay {
            Some(gamma) => base * gamma.powi(epoch as i32),
            None => base,
        }
    }
}

/// A labeled training example: both modality bags plus a binary label
/// vector.
#[derive(Debug, Clone)]
pub struct LabeledExample {
    pub bag1: Bag,
    pub bag2: Bag,
    pub labels: Vec<u8>,
}

/// An unlabeled training example; at least one modality present.
#[derive(Debug, Clone)]
pub struct UnlabeledExample {
    pub bag1: Option<Bag>,
    pub bag2: Option<Bag>,
}

/// The trainer's view of a dataset.
#[derive(Debug, Clone)]
pub struct TrainingData {
    pub labeled: Vec<LabeledExample>,
    pub unlabeled: Vec<UnlabeledExample>,
    pub label_count: usize,
}

impl TrainingData {
    pub fn new(
        labeled: Vec<LabeledExample>,
        unlabeled: Vec<UnlabeledExample>,
        label_count: usize,
    ) -> Result<TrainingData, TrainError> {
        for (i, ex) in labeled.iter().enumerate() {
            if ex.labels.len() != label_count {
                return Err(TrainError::InvalidConfig(format!(
                    "labeled example {i} has {} labels, expected {label_count}",
                    ex.labels.len()
                )));
            }
        }
        for (i, ex) in unlabeled.iter().enumerate() {
            if ex.bag1.is_none() && ex.bag2.is_none() {
                return Err(TrainError::InvalidConfig(format!(
                    "unlabeled example {i} has no bags"
                )));
            }
        }
        Ok(TrainingData {
            labeled,
            unlabeled,
            label_count,
        })
    }

    fn feature_dims(&self) -> Result<(usize, usize), TrainError> {
        let d1 = self
            .labeled
            .first()
            .map(|ex| ex.bag1.feature_dim())
            .or_else(|| {
                self.unlabeled
                    .iter()
                    .find_map(|ex| ex.bag1.as_ref().map(|b| b.feature_dim()))
            });
        let d2 = self
            .labeled
            .first()
            .map(|ex| ex.bag2.feature_dim())
            .or_else(|| {
                self.unlabeled
                    .iter()
                    .find_map(|ex| ex.bag2.as_ref().map(|b| b.feature_dim()))
            });
        match (d1, d2) {
            (Some(d1), Some(d2)) => Ok((d1, d2)),
            _ => Err(TrainError::InvalidConfig(
                "cannot infer feature dimensions: a modality never appears".into(),
            )),
        }
    }
}

/// Everything the alternating loop mutates.
#[derive(Debug, Clone)]
pub struct TrainingState {
    pub net1: ModalNetwork,
    pub net2: ModalNetwork,
    pub kernel: SimilarityKernel,
    pub cost: crate::ot::CostMatrix,
    /// The frozen reference kernel S0 regularising every metric update.
    pub reference: SimilarityKernel,
    pub epoch: usize,
    pub objective_history: Vec<f64>,
    pub skipped_examples: usize,
}

/// Build the initial state: seeded network init (one RNG stream per
/// network so optional decoders never shift the shared draws) and the
/// label co-occurrence reference kernel.
pub fn init_state(data: &TrainingData, cfg: &TrainingConfig) -> Result<TrainingState, TrainError> {
    cfg.validate()?;
    if data.labeled.is_empty() {
        return Err(TrainError::NoLabeledData);
    }
    let (d1, d2) = data.feature_dims()?;
    let make_net = |input_dim: usize, stream: u64| {
        let config = NetworkConfig {
            input_dim,
            hidden_dims: cfg.hidden_dims.clone(),
            label_count: data.label_count,
            activation: Activation::Tanh,
            with_decoder: cfg.semi_supervised,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(stream);
        ModalNetwork::init(config, &mut rng)
    };
    let net1 = make_net(d1, 10);
    let net2 = make_net(d2, 11);

    let label_rows: Vec<Vec<f64>> = data
        .labeled
        .iter()
        .map(|ex| ex.labels.iter().map(|&v| v as f64).collect())
        .collect();
    let reference = init_reference_kernel(&label_rows, 1e-2)?;
    let kernel = reference.clone();
    let cost = cost_from_kernel(&kernel)?;
    let skipped_examples = data
        .labeled
        .iter()
        .filter(|ex| ex.labels.iter().all(|&v| v == 0))
        .count();
    Ok(TrainingState {
        net1,
        net2,
        kernel,
        cost,
        reference,
        epoch: 0,
        objective_history: Vec::new(),
        skipped_examples,
    })
}

/// Output of one supervised batch pass.
pub struct SupervisedBatch {
    pub loss: f64,
    pub plans: Vec<TransportPlan>,
    pub grads1: ParamGrads,
    pub grads2: ParamGrads,
    pub skipped: usize,
    pub used: usize,
}

fn label_histogram(labels: &[u8]) -> Option<Histogram> {
    if labels.iter().all(|&v| v == 0) {
        return None;
    }
    let raw: Vec<f64> = labels.iter().map(|&v| v as f64).collect();
    make_histogram(&raw, HistogramMode::Normalize).ok()
}

/// Per example and modality: pooled prediction, Sinkhorn plan against the
/// normalised label histogram, sharp-cost loss contribution and the
/// subgradient routed through the network. All-zero label vectors are
/// skipped and counted.
pub fn supervised_batch_loss(
    state: &TrainingState,
    batch: &[&LabeledExample],
    cfg: &TrainingConfig,
) -> Result<SupervisedBatch, TrainError> {
    let mut out = SupervisedBatch {
        loss: 0.0,
        plans: Vec::new(),
        grads1: ParamGrads::zeros_like(&state.net1),
        grads2: ParamGrads::zeros_like(&state.net2),
        skipped: 0,
        used: 0,
    };
    for ex in batch {
        let Some(target) = label_histogram(&ex.labels) else {
            out.skipped += 1;
            continue;
        };
        for (net, bag, grads) in [
            (&state.net1, &ex.bag1, &mut out.grads1),
            (&state.net2, &ex.bag2, &mut out.grads2),
        ] {
            let forward = net.forward_bag(bag)?;
            let pooled = pool_bag(&forward.concept, cfg.pooling, true)?;
            let (plan, _) = sinkhorn_plan(
                &pooled,
                &target,
                &state.cost,
                cfg.lambda,
                DEFAULT_MAX_ITER,
                DEFAULT_TOL,
            )?;
            out.loss += plan.cost(&state.cost);
            let g = ot_subgradient(
                &pooled,
                &target,
                &state.cost,
                cfg.lambda,
                DEFAULT_MAX_ITER,
                DEFAULT_TOL,
            )?;
            let example_grads = net.backward(&forward, bag, &g, cfg.pooling, true)?;
            grads.add(&example_grads);
            out.plans.push(plan);
        }
        out.used += 1;
    }
    Ok(out)
}

/// Output of one unlabeled batch pass.
pub struct SemiBatch {
    pub loss: f64,
    pub pseudo_plans: Vec<TransportPlan>,
    pub grads1: ParamGrads,
    pub grads2: ParamGrads,
}

/// Reconstruction terms for every present bag, plus — when both bags are
/// present — the cross-modal pseudo-coupling between the two pooled
/// predictions. `update_first` selects which modality receives the
/// transport gradient this batch; the other prediction acts as a fixed
/// pseudo-label. Reconstruction gradients always flow into both networks.
pub fn semi_batch_loss(
    state: &TrainingState,
    batch: &[&UnlabeledExample],
    cfg: &TrainingConfig,
    update_first: bool,
) -> Result<SemiBatch, TrainError> {
    let mut out = SemiBatch {
        loss: 0.0,
        pseudo_plans: Vec::new(),
        grads1: ParamGrads::zeros_like(&state.net1),
        grads2: ParamGrads::zeros_like(&state.net2),
    };
    for ex in batch {
        if cfg.ae_weight > 0.0 {
            for (net, bag, grads) in [
                (&state.net1, ex.bag1.as_ref(), &mut out.grads1),
                (&state.net2, ex.bag2.as_ref(), &mut out.grads2),
            ] {
                if let Some(bag) = bag {
                    let (recon, mut recon_grads) = net.backward_reconstruction(bag)?;
                    out.loss += cfg.ae_weight * recon;
                    recon_grads.scale(cfg.ae_weight);
                    grads.add(&recon_grads);
                }
            }
        }
        if let (Some(bag1), Some(bag2)) = (ex.bag1.as_ref(), ex.bag2.as_ref()) {
            let forward1 = state.net1.forward_bag(bag1)?;
            let forward2 = state.net2.forward_bag(bag2)?;
            let f1 = pool_bag(&forward1.concept, cfg.pooling, true)?;
            let f2 = pool_bag(&forward2.concept, cfg.pooling, true)?;
            let (plan, _) = sinkhorn_plan(
                &f1,
                &f2,
                &state.cost,
                cfg.lambda,
                DEFAULT_MAX_ITER,
                DEFAULT_TOL,
            )?;
            out.loss += plan.cost(&state.cost);
            if update_first {
                let g = ot_subgradient(
                    &f1,
                    &f2,
                    &state.cost,
                    cfg.lambda,
                    DEFAULT_MAX_ITER,
                    DEFAULT_TOL,
                )?;
                out.grads1
                    .add(&state.net1.backward(&forward1, bag1, &g, cfg.pooling, true)?);
            } else {
                // The cost matrix is symmetric, so the reverse coupling
                // has the same value and yields the gradient w.r.t. f2.
                let g = ot_subgradient(
                    &f2,
                    &f1,
                    &state.cost,
                    cfg.lambda,
                    DEFAULT_MAX_ITER,
                    DEFAULT_TOL,
                )?;
                out.grads2
                    .add(&state.net2.backward(&forward2, bag2, &g, cfg.pooling, true)?);
            }
            out.pseudo_plans.push(plan);
        }
    }
    Ok(out)
}

/// Full-dataset objective at a frozen state: mean supervised transport
/// cost (both modalities), plus — in semi-supervised mode — mean pseudo
/// transport cost and weighted reconstruction, plus the λ1-scaled metric
/// regulariser.
pub fn evaluate_objective(
    state: &TrainingState,
    data: &TrainingData,
    cfg: &TrainingConfig,
) -> Result<f64, TrainError> {
    let mut total = 0.0;
    let mut terms = 0usize;
    for ex in &data.labeled {
        let Some(target) = label_histogram(&ex.labels) else {
            continue;
        };
        for (net, bag) in [(&state.net1, &ex.bag1), (&state.net2, &ex.bag2)] {
            let concept = net.bag_concept(bag)?;
            let pooled = pool_bag(&concept, cfg.pooling, true)?;
            let (plan, _) = sinkhorn_plan(
                &pooled,
                &target,
                &state.cost,
                cfg.lambda,
                DEFAULT_MAX_ITER,
                DEFAULT_TOL,
            )?;
            total += plan.cost(&state.cost);
            terms += 1;
        }
    }
    let mut objective = if terms > 0 { total / terms as f64 } else { 0.0 };

    if cfg.semi_supervised && !data.unlabeled.is_empty() {
        let mut semi_total = 0.0;
        for ex in &data.unlabeled {
            if cfg.ae_weight > 0.0 {
                for (net, bag) in [
                    (&state.net1, ex.bag1.as_ref()),
                    (&state.net2, ex.bag2.as_ref()),
                ] {
                    if let Some(bag) = bag {
                        semi_total += cfg.ae_weight * net.reconstruction_loss(bag)?;
                    }
                }
            }
            if let (Some(bag1), Some(bag2)) = (ex.bag1.as_ref(), ex.bag2.as_ref()) {
                let f1 = pool_bag(&state.net1.bag_concept(bag1)?, cfg.pooling, true)?;
                let f2 = pool_bag(&state.net2.bag_concept(bag2)?, cfg.pooling, true)?;
                let (plan, _) = sinkhorn_plan(
                    &f1,
                    &f2,
                    &state.cost,
                    cfg.lambda,
                    DEFAULT_MAX_ITER,
                    DEFAULT_TOL,
                )?;
                semi_total += plan.cost(&state.cost);
            }
        }
        objective += semi_total / data.unlabeled.len() as f64;
    }

    if !cfg.fixed_metric {
        // The projected kernel can sit on the PSD boundary, where the Burg
        // term is +∞; treat that as "no metric term" rather than aborting.
        if let Ok(reg) = burg_divergence(&state.kernel, &state.reference, state.kernel.dim() as f64)
        {
            objective += cfg.lambda1 * reg;
        }
    }
    Ok(objective)
}

/// Run the alternating optimisation; see [`fit_with_log`] for the
/// epoch-log variant.
pub fn fit(data: &TrainingData, cfg: &TrainingConfig) -> Result<TrainingState, TrainError> {
    fit_with_log(data, cfg, None)
}

/// Per batch: (1) couple the batch under the current metric and refresh
/// the kernel from the accumulated plans (unless `fixed_metric`); (2)
/// recompute gradients under the refreshed metric and take an SGD step.
/// The epoch objective is evaluated on the full training set; training
/// stops when its change falls below ε or after `max_epochs`.
pub fn fit_with_log(
    data: &TrainingData,
    cfg: &TrainingConfig,
    mut epoch_log: Option<&mut dyn Write>,
) -> Result<TrainingState, TrainError> {
    let mut state = init_state(data, cfg)?;
    let mut labeled_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    labeled_rng.set_stream(1);
    let mut unlabeled_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    unlabeled_rng.set_stream(2);

    let mut step = 0usize;
    for epoch in 0..cfg.max_epochs {
        let mut labeled_idx: Vec<usize> = (0..data.labeled.len()).collect();
        labeled_idx.shuffle(&mut labeled_rng);
        let use_unlabeled = cfg.semi_supervised && !data.unlabeled.is_empty();
        let unlabeled_idx: Vec<usize> = if use_unlabeled {
            let mut idx: Vec<usize> = (0..data.unlabeled.len()).collect();
            idx.shuffle(&mut unlabeled_rng);
            idx
        } else {
            Vec::new()
        };
        let unlabeled_batches: Vec<&[usize]> = unlabeled_idx.chunks(cfg.batch_size).collect();

        // Plans accumulate over the whole epoch so the kernel settles on
        // epoch-level statistics instead of chasing the last batch.
        let mut acc = PlanAccumulator::new(data.label_count);
        for (batch_no, chunk) in labeled_idx.chunks(cfg.batch_size).enumerate() {
            step += 1;
            let batch: Vec<&LabeledExample> = chunk.iter().map(|&i| &data.labeled[i]).collect();
            let semi_batch: Option<Vec<&UnlabeledExample>> = unlabeled_batches
                .get(batch_no)
                .map(|c| c.iter().map(|&i| &data.unlabeled[i]).collect());
            let update_first = step % 2 == 0;

            if !cfg.fixed_metric {
                // Phase 1: plans under the current metric feed the kernel
                // update.
                let sup = supervised_batch_loss(&state, &batch, cfg)?;
                for plan in &sup.plans {
                    acc.accumulate(plan)?;
                }
                if let Some(semi) = &semi_batch {
                    let pseudo = semi_batch_loss(&state, semi, cfg, update_first)?;
                    for plan in &pseudo.pseudo_plans {
                        acc.accumulate(plan)?;
                    }
                }
                if acc.sample_count() > 0 {
                    state.kernel = update_kernel(&acc, &state.reference, cfg.lambda1)?;
                    state.cost = cost_from_kernel(&state.kernel)?;
                }
            }

            // Phase 2: gradients under the refreshed metric.
            let sup = supervised_batch_loss(&state, &batch, cfg)?;
            let rate = cfg.rate_at(step, epoch);
            state.net1.apply_gradients(&sup.grads1, rate);
            state.net2.apply_gradients(&sup.grads2, rate);
            if let Some(semi) = &semi_batch {
                let pseudo = semi_batch_loss(&state, semi, cfg, update_first)?;
                state.net1.apply_gradients(&pseudo.grads1, rate);
                state.net2.apply_gradients(&pseudo.grads2, rate);
            }
        }

        let objective = evaluate_objective(&state, data, cfg)?;
        if !objective.is_finite() {
            return Err(TrainError::NonFiniteObjective { epoch });
        }
        state.objective_history.push(objective);
        state.epoch = epoch + 1;
        if let Some(log) = epoch_log.as_deref_mut() {
            writeln!(log, "{{\"epoch\":{},\"objective\":{objective}}}", epoch + 1)?;
        }
        let n = state.objective_history.len();
        if n >= 2 && (state.objective_history[n - 1] - state.objective_history[n - 2]).abs()
            <= cfg.epsilon
        {
            break;
        }
    }
    Ok(state)
}

/// Fused prediction when both bags are present, single-modality fallback
/// otherwise.
pub fn predict(
    state: &TrainingState,
    bag1: Option<&Bag>,
    bag2: Option<&Bag>,
    cfg: &TrainingConfig,
) -> Result<Histogram, TrainError> {
    let pool = |net: &ModalNetwork, bag: &Bag| -> Result<Histogram, TrainError> {
        Ok(pool_bag(&net.bag_concept(bag)?, cfg.pooling, true)?)
    };
    match (bag1, bag2) {
        (Some(b1), Some(b2)) => {
            let f1 = pool(&state.net1, b1)?;
            let f2 = pool(&state.net2, b2)?;
            Ok(fuse_predictions(&f1, &f2, cfg.fusion)?)
        }
        (Some(b1), None) => pool(&state.net1, b1),
        (None, Some(b2)) => pool(&state.net2, b2),
        (None, None) => Err(TrainError::NoInput),
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct LayerCheckpoint {
    rows: usize,
    cols: usize,
    weights: Vec<f64>,
    bias: Vec<f64>,
    activation: Activation,
}

impl LayerCheckpoint {
    fn from_layer(layer: &Layer) -> LayerCheckpoint {
        LayerCheckpoint {
            rows: layer.weights.nrows(),
            cols: layer.weights.ncols(),
            weights: layer.weights.iter().cloned().collect(),
            bias: layer.bias.to_vec(),
            activation: layer.activation,
        }
    }

    fn to_layer(&self) -> Result<Layer, TrainError> {
        let weights = Array2::from_shape_vec((self.rows, self.cols), self.weights.clone())
            .map_err(|e| TrainError::Checkpoint(e.to_string()))?;
        if self.bias.len() != self.rows {
            return Err(TrainError::Checkpoint(format!(
                "layer bias has length {}, expected {}",
                self.bias.len(),
                self.rows
            )));
        }
        Ok(Layer {
            weights,
            bias: Array1::from_vec(self.bias.clone()),
            activation: self.activation,
        })
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct NetCheckpoint {
    config: NetworkConfig,
    encoder: Vec<LayerCheckpoint>,
    label_weights: Vec<f64>,
    label_bias: Vec<f64>,
    decoder: Option<Vec<LayerCheckpoint>>,
}

impl NetCheckpoint {
    fn from_net(net: &ModalNetwork) -> NetCheckpoint {
        NetCheckpoint {
            config: net.config.clone(),
            encoder: net.encoder.iter().map(LayerCheckpoint::from_layer).collect(),
            label_weights: net.label_weights.iter().cloned().collect(),
            label_bias: net.label_bias.to_vec(),
            decoder: net
                .decoder
                .as_ref()
                .map(|d| d.iter().map(LayerCheckpoint::from_layer).collect()),
        }
    }

    fn to_net(&self) -> Result<ModalNetwork, TrainError> {
        let encoder: Result<Vec<Layer>, TrainError> =
            self.encoder.iter().map(LayerCheckpoint::to_layer).collect();
        let decoder = match &self.decoder {
            Some(layers) => Some(
                layers
                    .iter()
                    .map(LayerCheckpoint::to_layer)
                    .collect::<Result<Vec<Layer>, TrainError>>()?,
            ),
            None => None,
        };
        let hidden = self.config.hidden_width();
        let label_weights = Array2::from_shape_vec(
            (self.config.label_count, hidden),
            self.label_weights.clone(),
        )
        .map_err(|e| TrainError::Checkpoint(e.to_string()))?;
        Ok(ModalNetwork {
            config: self.config.clone(),
            encoder: encoder?,
            label_weights,
            label_bias: Array1::from_vec(self.label_bias.clone()),
            decoder,
        })
    }
}

fn matrix_rows(m: &Array2<f64>) -> Vec<Vec<f64>> {
    m.rows().into_iter().map(|r| r.to_vec()).collect()
}

fn rows_to_matrix(rows: &[Vec<f64>]) -> Result<Array2<f64>, TrainError> {
    let n = rows.len();
    let mut m = Array2::zeros((n, n));
    for (i, row) in rows.iter().enumerate() {
        if row.len() != n {
            return Err(TrainError::Checkpoint(format!(
                "kernel row {i} has length {}, expected {n}",
                row.len()
            )));
        }
        for (j, &v) in row.iter().enumerate() {
            m[[i, j]] = v;
        }
    }
    Ok(m)
}

#[derive(Debug, Serialize, Deserialize)]
struct Checkpoint {
    version: u32,
    config: TrainingConfig,
    epoch: usize,
    objective_history: Vec<f64>,
    skipped_examples: usize,
    kernel: Vec<Vec<f64>>,
    reference: Vec<Vec<f64>>,
    net1: NetCheckpoint,
    net2: NetCheckpoint,
}

/// Write the state (and the config that produced it) as a JSON
/// checkpoint.
pub fn save_checkpoint(
    state: &TrainingState,
    cfg: &TrainingConfig,
    path: &Path,
) -> Result<(), TrainError> {
    let checkpoint = Checkpoint {
        version: CHECKPOINT_VERSION,
        config: cfg.clone(),
        epoch: state.epoch,
        objective_history: state.objective_history.clone(),
        skipped_examples: state.skipped_examples,
        kernel: matrix_rows(state.kernel.entries()),
        reference: matrix_rows(state.reference.entries()),
        net1: NetCheckpoint::from_net(&state.net1),
        net2: NetCheckpoint::from_net(&state.net2),
    };
    let json = serde_json::to_string_pretty(&checkpoint)
        .map_err(|e| TrainError::Checkpoint(e.to_string()))?;
    std::fs::write(path, json)?;
    Ok(())
}

/// Restore a state/config pair from [`save_checkpoint`] output.
pub fn load_checkpoint(path: &Path) -> Result<(TrainingState, TrainingConfig), TrainError> {
    let text = std::fs::read_to_string(path)?;
    let checkpoint: Checkpoint =
        serde_json::from_str(&text).map_err(|e| TrainError::Checkpoint(e.to_string()))?;
    if checkpoint.version != CHECKPOINT_VERSION {
        return Err(TrainError::Checkpoint(format!(
            "checkpoint version {} unsupported, expected {CHECKPOINT_VERSION}",
            checkpoint.version
        )));
    }
    let kernel = SimilarityKernel::new(rows_to_matrix(&checkpoint.kernel)?)?;
    let reference = SimilarityKernel::new(rows_to_matrix(&checkpoint.reference)?)?;
    let cost = cost_from_kernel(&kernel)?;
    let state = TrainingState {
        net1: checkpoint.net1.to_net()?,
        net2: checkpoint.net2.to_net()?,
        kernel,
        cost,
        reference,
        epoch: checkpoint.epoch,
        objective_history: checkpoint.objective_history.clone(),
        skipped_examples: checkpoint.skipped_examples,
    };
    Ok((state, checkpoint.config))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate, split, CorrelationSpec, GeneratorConfig};
    use crate::net::Instance;
    use crate::ot::{sinkhorn_distance, CostMatrix};
    use tempfile::TempDir;

    fn tiny_config() -> TrainingConfig {
        TrainingConfig {
            hidden_dims: vec![6, 4],
            batch_size: 4,
            max_epochs: 5,
            ..TrainingConfig::default()
        }
    }

    fn generator_config(bags: usize, labels: usize, seed: u64) -> GeneratorConfig {
        GeneratorConfig {
            label_count: labels,
            bag_count: bags,
            instance_count_range: (1, 3),
            feature_dims: (labels + 2, labels + 1),
            latent_label_correlation: CorrelationSpec::RandomPsd { seed: seed ^ 0xABCD },
            noise_level: 0.05,
            label_marginal: 0.4,
            labeled_fraction: 0.3,
            test_fraction: 0.2,
            missing_modality_fraction: 0.0,
            seed,
        }
    }

    fn training_data(bags: usize, labels: usize, seed: u64) -> TrainingData {
        let cfg = generator_config(bags, labels, seed);
        let (dataset, _) = generate(&cfg).unwrap();
        let splits = split(&dataset, &cfg).unwrap();
        let labeled = splits
            .train_labeled
            .iter()
            .map(|r| LabeledExample {
                bag1: r.bag(1).unwrap(),
                bag2: r.bag(2).unwrap(),
                labels: r.labels.clone().unwrap(),
            })
            .collect();
        let unlabeled = splits
            .train_unlabeled
            .iter()
            .map(|r| UnlabeledExample {
                bag1: r.bag(1),
                bag2: r.bag(2),
            })
            .collect();
        TrainingData::new(labeled, unlabeled, labels).unwrap()
    }

    fn discrete_metric(l: usize) -> CostMatrix {
        let mut m = ndarray::Array2::zeros((l, l));
        for i in 0..l {
            for j in 0..l {
                if i != j {
                    m[[i, j]] = 1.0;
                }
            }
        }
        CostMatrix::new(m).unwrap()
    }

    fn single_instance_example(labels: Vec<u8>, d1: usize, d2: usize, id: u64) -> LabeledExample {
        LabeledExample {
            bag1: Bag::new(1, id, vec![Instance {
                features: vec![0.1; d1],
            }]),
            bag2: Bag::new(2, id, vec![Instance {
                features: vec![-0.2; d2],
            }]),
            labels,
        }
    }

    #[test]
    fn config_validation_rejects_bad_values() {
        let mut cfg = tiny_config();
        cfg.lambda = 0.0;
        assert!(matches!(cfg.validate(), Err(TrainError::InvalidConfig(_))));
        let mut cfg = tiny_config();
        cfg.batch_size = 0;
        assert!(matches!(cfg.validate(), Err(TrainError::InvalidConfig(_))));
    }

    #[test]
    fn matching_prediction_and_label_give_zero_loss_and_tiny_gradients() {
        // Uniform labels and a zeroed label head make both pooled
        // predictions exactly uniform, so transport cost vanishes.
        let data = TrainingData::new(
            vec![single_instance_example(vec![1, 1], 3, 3, 0)],
            vec![],
            2,
        )
        .unwrap();
        let cfg = tiny_config();
        let mut state = init_state(&data, &cfg).unwrap();
        state.net1.label_weights.fill(0.0);
        state.net1.label_bias.fill(0.0);
        state.net2.label_weights.fill(0.0);
        state.net2.label_bias.fill(0.0);
        // Unit-scale metric: with lambda * M = 50 off the diagonal the
        // entropic plan is effectively sharp, so matching marginals really
        // do give a vanishing cost.
        state.cost = discrete_metric(2);
        let batch: Vec<&LabeledExample> = data.labeled.iter().collect();
        let out = supervised_batch_loss(&state, &batch, &cfg).unwrap();
        assert!(out.loss.abs() < 1e-6, "loss {}", out.loss);
        for g in out.grads1.grad_vec().iter().chain(out.grads2.grad_vec().iter()) {
            assert!(g.abs() < 1e-6, "gradient {g}");
        }
    }

    #[test]
    fn duplicated_examples_scale_the_loss_exactly() {
        let data = training_data(40, 3, 5);
        let cfg = tiny_config();
        let state = init_state(&data, &cfg).unwrap();
        let one: Vec<&LabeledExample> = vec![&data.labeled[0]];
        let three: Vec<&LabeledExample> = vec![&data.labeled[0]; 3];
        let a = supervised_batch_loss(&state, &one, &cfg).unwrap();
        let b = supervised_batch_loss(&state, &three, &cfg).unwrap();
        assert!((b.loss - 3.0 * a.loss).abs() < 1e-9);
    }

    #[test]
    fn batch_loss_matches_per_example_sinkhorn_distances() {
        let data = training_data(60, 4, 6);
        let cfg = tiny_config();
        let state = init_state(&data, &cfg).unwrap();
        let batch: Vec<&LabeledExample> = data.labeled.iter().take(6).collect();
        let out = supervised_batch_loss(&state, &batch, &cfg).unwrap();
        let mut expected = 0.0;
        for ex in &batch {
            let Some(target) = label_histogram(&ex.labels) else {
                continue;
            };
            for (net, bag) in [(&state.net1, &ex.bag1), (&state.net2, &ex.bag2)] {
                let pooled = pool_bag(&net.bag_concept(bag).unwrap(), cfg.pooling, true).unwrap();
                expected += sinkhorn_distance(&pooled, &target, &state.cost, cfg.lambda).unwrap();
            }
        }
        assert!(
            (out.loss - expected).abs() < 1e-9,
            "batch {} vs recomputed {expected}",
            out.loss
        );
    }

    #[test]
    fn skipped_examples_are_counted() {
        let mut data = training_data(40, 3, 7);
        data.labeled[0].labels = vec![0, 0, 0];
        data.labeled[2].labels = vec![0, 0, 0];
        let expected = data
            .labeled
            .iter()
            .filter(|ex| ex.labels.iter().all(|&v| v == 0))
            .count();
        assert!(expected >= 2);
        let cfg = tiny_config();
        let state = init_state(&data, &cfg).unwrap();
        assert_eq!(state.skipped_examples, expected);
        let batch: Vec<&LabeledExample> = data.labeled.iter().collect();
        let out = supervised_batch_loss(&state, &batch, &cfg).unwrap();
        assert_eq!(out.skipped, expected);
        assert_eq!(out.used, data.labeled.len() - expected);
    }

    #[test]
    fn identical_modal_predictions_have_zero_pseudo_cost() {
        let data = training_data(40, 3, 8);
        let mut cfg = tiny_config();
        cfg.semi_supervised = true;
        let mut state = init_state(&data, &cfg).unwrap();
        state.net1.label_weights.fill(0.0);
        state.net1.label_bias.fill(0.0);
        state.net2.label_weights.fill(0.0);
        state.net2.label_bias.fill(0.0);
        state.cost = discrete_metric(3);
        cfg.ae_weight = 0.0; // isolate the coupling term
        let both: Vec<&UnlabeledExample> = data
            .unlabeled
            .iter()
            .filter(|ex| ex.bag1.is_some() && ex.bag2.is_some())
            .take(4)
            .collect();
        let out = semi_batch_loss(&state, &both, &cfg, true).unwrap();
        assert!(out.loss.abs() < 1e-6, "pseudo cost {}", out.loss);
        assert_eq!(out.pseudo_plans.len(), both.len());
    }

    #[test]
    fn single_modality_examples_contribute_reconstruction_only() {
        let data = training_data(40, 3, 9);
        let mut cfg = tiny_config();
        cfg.semi_supervised = true;
        cfg.ae_weight = 0.7;
        let state = init_state(&data, &cfg).unwrap();
        let ex = UnlabeledExample {
            bag1: data.unlabeled[0].bag1.clone(),
            bag2: None,
        };
        let batch = vec![&ex];
        let out = semi_batch_loss(&state, &batch, &cfg, true).unwrap();
        let expected =
            cfg.ae_weight * state.net1.reconstruction_loss(ex.bag1.as_ref().unwrap()).unwrap();
        assert!((out.loss - expected).abs() < 1e-12);
        assert!(out.pseudo_plans.is_empty());
        assert!(out.grads2.grad_vec().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn semi_batch_total_matches_per_example_recomputation() {
        let data = training_data(60, 3, 10);
        let mut cfg = tiny_config();
        cfg.semi_supervised = true;
        let state = init_state(&data, &cfg).unwrap();
        let batch: Vec<&UnlabeledExample> = data.unlabeled.iter().take(6).collect();
        let out = semi_batch_loss(&state, &batch, &cfg, false).unwrap();
        let mut expected = 0.0;
        for ex in &batch {
            for (net, bag) in [
                (&state.net1, ex.bag1.as_ref()),
                (&state.net2, ex.bag2.as_ref()),
            ] {
                if let Some(bag) = bag {
                    expected += cfg.ae_weight * net.reconstruction_loss(bag).unwrap();
                }
            }
            if let (Some(b1), Some(b2)) = (ex.bag1.as_ref(), ex.bag2.as_ref()) {
                let f1 = pool_bag(&state.net1.bag_concept(b1).unwrap(), cfg.pooling, true).unwrap();
                let f2 = pool_bag(&state.net2.bag_concept(b2).unwrap(), cfg.pooling, true).unwrap();
                expected += sinkhorn_distance(&f1, &f2, &state.cost, cfg.lambda).unwrap();
            }
        }
        assert!((out.loss - expected).abs() < 1e-9);
    }

    #[test]
    fn zero_epochs_returns_the_initial_state() {
        let data = training_data(40, 3, 11);
        let mut cfg = tiny_config();
        cfg.max_epochs = 0;
        let state = fit(&data, &cfg).unwrap();
        assert!(state.objective_history.is_empty());
        assert_eq!(state.epoch, 0);
        let fresh = init_state(&data, &cfg).unwrap();
        assert_eq!(state.net1.param_vec(), fresh.net1.param_vec());
        assert_eq!(state.kernel.entries(), fresh.kernel.entries());
    }

    #[test]
    fn fixed_metric_keeps_the_reference_kernel() {
        let data = training_data(50, 3, 12);
        let mut cfg = tiny_config();
        cfg.fixed_metric = true;
        cfg.max_epochs = 3;
        let state = fit(&data, &cfg).unwrap();
        assert_eq!(state.kernel.entries(), state.reference.entries());
        assert_eq!(
            state.cost.entries(),
            cost_from_kernel(&state.reference).unwrap().entries()
        );
    }

    #[test]
    fn cost_always_tracks_the_kernel() {
        let data = training_data(50, 3, 13);
        let mut cfg = tiny_config();
        cfg.max_epochs = 2;
        let state = fit(&data, &cfg).unwrap();
        assert_eq!(
            state.cost.entries(),
            cost_from_kernel(&state.kernel).unwrap().entries()
        );
    }

    #[test]
    fn fit_is_deterministic() {
        let data = training_data(50, 3, 14);
        let mut cfg = tiny_config();
        cfg.max_epochs = 3;
        let a = fit(&data, &cfg).unwrap();
        let b = fit(&data, &cfg).unwrap();
        assert_eq!(a.objective_history, b.objective_history);
        assert_eq!(a.net1.param_vec(), b.net1.param_vec());
        assert_eq!(a.net2.param_vec(), b.net2.param_vec());
        assert_eq!(a.kernel.entries(), b.kernel.entries());
    }

    #[test]
    fn semi_supervised_run_without_unlabeled_data_matches_supervised() {
        let mut data = training_data(50, 3, 15);
        data.unlabeled.clear();
        let mut sup_cfg = tiny_config();
        sup_cfg.max_epochs = 3;
        let mut semi_cfg = sup_cfg.clone();
        semi_cfg.semi_supervised = true;
        let sup = fit(&data, &sup_cfg).unwrap();
        let semi = fit(&data, &semi_cfg).unwrap();
        assert_eq!(sup.objective_history.len(), semi.objective_history.len());
        for (a, b) in sup
            .objective_history
            .iter()
            .zip(semi.objective_history.iter())
        {
            assert!((a - b).abs() < 1e-12);
        }
        // Shared parameters (encoder + head) evolve identically; the semi
        // run merely carries an untouched decoder.
        assert_eq!(sup.net1.label_weights, semi.net1.label_weights);
        assert_eq!(sup.net2.label_weights, semi.net2.label_weights);
    }

    #[test]
    fn recorded_objective_matches_a_frozen_reevaluation() {
        let data = training_data(50, 3, 16);
        let mut cfg = tiny_config();
        cfg.max_epochs = 2;
        let state = fit(&data, &cfg).unwrap();
        let frozen = evaluate_objective(&state, &data, &cfg).unwrap();
        let recorded = *state.objective_history.last().unwrap();
        assert!(
            ((frozen - recorded) / recorded.abs().max(1e-12)).abs() < 1e-6,
            "recorded {recorded}, frozen {frozen}"
        );
    }

    #[test]
    fn objective_decreases_and_converges_on_a_separable_dataset() {
        let gen_cfg = GeneratorConfig {
            label_count: 5,
            bag_count: 290,
            instance_count_range: (1, 2),
            feature_dims: (8, 7),
            latent_label_correlation: CorrelationSpec::RandomPsd { seed: 99 },
            noise_level: 0.02,
            label_marginal: 0.4,
            labeled_fraction: 1.0,
            test_fraction: 0.3,
            missing_modality_fraction: 0.0,
            seed: 17,
        };
        let (dataset, _) = generate(&gen_cfg).unwrap();
        let splits = split(&dataset, &gen_cfg).unwrap();
        let labeled: Vec<LabeledExample> = splits
            .train_labeled
            .iter()
            .map(|r| LabeledExample {
                bag1: r.bag(1).unwrap(),
                bag2: r.bag(2).unwrap(),
                labels: r.labels.clone().unwrap(),
            })
            .collect();
        assert!(labeled.len() >= 200);
        let data = TrainingData::new(labeled, vec![], 5).unwrap();
        let cfg = TrainingConfig {
            max_epochs: 10,
            batch_size: 16,
            hidden_dims: vec![12, 8],
            learning_rate: 1.0,
            decay: true,
            seed: 3,
            ..TrainingConfig::default()
        };
        let state = fit(&data, &cfg).unwrap();
        let history = &state.objective_history;
        assert!(!history.is_empty());
        for w in history.windows(2) {
            assert!(
                w[1] <= w[0] + 1e-3,
                "objective increased: {} -> {}",
                w[0],
                w[1]
            );
        }
        assert!(
            history.len() < cfg.max_epochs
                || history
                    .windows(2)
                    .last()
                    .is_some_and(|w| (w[1] - w[0]).abs() <= 1e-3),
            "no convergence within {} epochs: {history:?}",
            cfg.max_epochs
        );
    }

    #[test]
    fn predict_fuses_or_falls_back() {
        let data = training_data(40, 3, 18);
        let cfg = tiny_config();
        let state = init_state(&data, &cfg).unwrap();
        let ex = &data.labeled[0];
        let fused = predict(&state, Some(&ex.bag1), Some(&ex.bag2), &cfg).unwrap();
        let f1 = pool_bag(
            &state.net1.bag_concept(&ex.bag1).unwrap(),
            cfg.pooling,
            true,
        )
        .unwrap();
        let f2 = pool_bag(
            &state.net2.bag_concept(&ex.bag2).unwrap(),
            cfg.pooling,
            true,
        )
        .unwrap();
        let manual = fuse_predictions(&f1, &f2, cfg.fusion).unwrap();
        for (a, b) in fused.values().iter().zip(manual.values().iter()) {
            assert!((a - b).abs() < 1e-12);
        }
        let only2 = predict(&state, None, Some(&ex.bag2), &cfg).unwrap();
        for (a, b) in only2.values().iter().zip(f2.values().iter()) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(matches!(
            predict(&state, None, None, &cfg),
            Err(TrainError::NoInput)
        ));
    }

    #[test]
    fn checkpoint_round_trip_preserves_predictions_and_history() {
        let data = training_data(50, 3, 19);
        let mut cfg = tiny_config();
        cfg.max_epochs = 2;
        let state = fit(&data, &cfg).unwrap();
        let dir = TempDir::new().unwrap();
        let path = dir.path().join("checkpoint.json");
        save_checkpoint(&state, &cfg, &path).unwrap();
        let (restored, restored_cfg) = load_checkpoint(&path).unwrap();
        assert_eq!(restored.objective_history, state.objective_history);
        assert_eq!(restored.net1.param_vec(), state.net1.param_vec());
        assert_eq!(restored.net2.param_vec(), state.net2.param_vec());
        assert_eq!(restored_cfg.batch_size, cfg.batch_size);
        let ex = &data.labeled[0];
        let before = predict(&state, Some(&ex.bag1), Some(&ex.bag2), &cfg).unwrap();
        let after = predict(&restored, Some(&ex.bag1), Some(&ex.bag2), &restored_cfg).unwrap();
        for (a, b) in before.values().iter().zip(after.values().iter()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn epoch_log_is_json_lines() {
        let data = training_data(40, 3, 20);
        let mut cfg = tiny_config();
        cfg.max_epochs = 2;
        let mut buffer: Vec<u8> = Vec::new();
        let state = fit_with_log(&data, &cfg, Some(&mut buffer)).unwrap();
        let text = String::from_utf8(buffer).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), state.objective_history.len());
        for (i, line) in lines.iter().enumerate() {
            let record: serde_json::Value = serde_json::from_str(line).unwrap();
            assert_eq!(record["epoch"], i as u64 + 1);
            let logged = record["objective"].as_f64().unwrap();
            assert!((logged - state.objective_history[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn empty_labeled_set_is_an_error() {
        let data = TrainingData::new(vec![], vec![], 3).unwrap();
        assert!(matches!(
            fit(&data, &tiny_config()),
            Err(TrainError::NoLabeledData)
        ));
    }
}
