//! The joint training loop: forward, pseudo-label assignment, joint loss,
//! feature / center gradients, parameter update, center update.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, ResumeState};
use crate::data::{Batch, BatchSampler, ImageSet};
use crate::error::{Error, Result};
use crate::network::{ArchitectureSpec, Network};
use crate::pseudo_loss::{
    assign_pseudo_labels, center_feature_grad, grad_wrt_centers, joint_loss, reseed_dead_centers, softmax_loss,
    update_centers,
    CenterBank, CenterGradScale, LossBreakdown, PseudoAssignment,
};
use crate::tensor::Tensor;

/// Tradeoff between the softmax and center losses.
pub const DEFAULT_LAMBDA: f64 = 1e-5;
pub const DEFAULT_LEARNING_RATE: f64 = 1e-5;
pub const DEFAULT_ITERATIONS: u64 = 10_000;
pub const DEFAULT_NUM_PSEUDO_CLASSES: usize = 10;
pub const DEFAULT_BATCH_SIZE: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lambda: f64,
    pub learning_rate: f64,
    pub iterations: u64,
    pub batch_size: usize,
    pub num_pseudo_classes: usize,
    pub center_grad_scale: CenterGradScale,
    pub warm_start_centers: bool,
    /// Re-seat centers left without samples in a batch (off by default).
    pub reseed_dead_centers: bool,
    pub seed: u64,
    /// Zero disables periodic checkpoints.
    pub checkpoint_every: u64,
    pub log_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda: DEFAULT_LAMBDA,
            learning_rate: DEFAULT_LEARNING_RATE,
            iterations: DEFAULT_ITERATIONS,
            batch_size: DEFAULT_BATCH_SIZE,
            num_pseudo_classes: DEFAULT_NUM_PSEUDO_CLASSES,
            center_grad_scale: CenterGradScale::Loss,
            warm_start_centers: false,
            reseed_dead_centers: false,
            seed: 0,
            checkpoint_every: 1000,
            log_every: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad(format!("lambda must be finite and >= 0, got {}", self.lambda));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be finite and > 0, got {}", self.learning_rate));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if self.num_pseudo_classes < 2 {
            return bad(format!("num_pseudo_classes must be >= 2, got {}", self.num_pseudo_classes));
        }
        if self.log_every == 0 {
            return bad("log_every must be positive".into());
        }
        Ok(())
    }
}

/// Per-step observability record; losses are measured before the update.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLogRecord {
    /// Number of updates applied once this step completes (1-based).
    pub iteration: u64,
    pub loss: f64,
    pub softmax_loss: f64,
    pub center_loss: f64,
    pub lambda: f64,
    /// Share of the batch whose pseudo-label differs from that sample's
    /// previous appearance. First appearances count as unchanged.
    pub churn: f64,
    pub counts: Vec<usize>,
}

/// Everything that evolves during training.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub network: Network,
    pub centers: CenterBank,
    /// Completed updates.
    pub iteration: u64,
    pub resume: ResumeState,
}

impl TrainState {
    /// Fresh network and an all-zero center bank.
    pub fn init(spec: ArchitectureSpec, num_samples: usize, seed: u64) -> Result<Self> {
        let network = Network::init(spec, sub_seed(seed, NETWORK_STREAM))?;
        Ok(Self::from_network(network, num_samples))
    }

    pub fn from_network(network: Network, num_samples: usize) -> Self {
        let centers = CenterBank::zeros(network.num_pseudo_classes(), network.feature_dim())
            .expect("network guarantees Λ >= 2");
        TrainState {
            network,
            centers,
            iteration: 0,
            resume: ResumeState {
                warm_started: false,
                last_labels: vec![None; num_samples],
            },
        }
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            network: self.network.clone(),
            centers: self.centers.clone(),
            iteration: self.iteration,
            resume: self.resume.clone(),
        }
    }

    pub fn from_checkpoint(ckpt: Checkpoint) -> Self {
        TrainState {
            network: ckpt.network,
            centers: ckpt.centers,
            iteration: ckpt.iteration,
            resume: ckpt.resume,
        }
    }
}

const NETWORK_STREAM: u64 = 1;
const SAMPLER_STREAM: u64 = 2;
const WARM_START_STREAM: u64 = 3;

/// Independent sub-seed per random consumer (splitmix64 finalizer).
pub fn sub_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// The batch schedule used by [`train`] for a given dataset size and config.
pub fn sampler_for(num_samples: usize, config: &TrainConfig) -> Result<BatchSampler> {
    BatchSampler::new(num_samples, config.batch_size, sub_seed(config.seed, SAMPLER_STREAM))
}

/// Intermediate quantities of one step, exposed for inspection in tests.
#[derive(Debug, Clone)]
pub struct StepDetail {
    pub features: Tensor,
    pub logits: Tensor,
    pub centers_used: CenterBank,
    pub assignment: PseudoAssignment,
    pub losses: LossBreakdown,
}

/// One pass of the loop body on one batch; returns the updated state.
pub fn train_step(state: &TrainState, batch: &Batch, config: &TrainConfig) -> Result<(TrainState, TrainLogRecord)> {
    train_step_detailed(state, batch, config).map(|(s, r, _)| (s, r))
}

pub fn train_step_detailed(
    state: &TrainState,
    batch: &Batch,
    config: &TrainConfig,
) -> Result<(TrainState, TrainLogRecord, StepDetail)> {
    let net = &state.network;
    let pass = net.forward(&batch.images)?;
    let features = &pass.features;

    let mut resume = state.resume.clone();
    let bank = if config.warm_start_centers && !resume.warm_started {
        let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(config.seed, WARM_START_STREAM));
        rng.set_stream(state.iteration);
        resume.warm_started = true;
        CenterBank::warm_start(features, net.num_pseudo_classes(), &mut rng)?
    } else {
        state.centers.clone()
    };

    let mut assignment = assign_pseudo_labels(features, &bank)?;
    let bank = if config.reseed_dead_centers {
        let (reseeded, reassigned, _) = reseed_dead_centers(features, &assignment, &bank)?;
        assignment = reassigned;
        reseeded
    } else {
        bank
    };
    let losses = joint_loss(features, &pass.logits, &assignment, &bank, config.lambda)?;
    let next_iteration = state.iteration + 1;
    if !losses.total.is_finite() {
        return Err(Error::Divergence {
            iteration: next_iteration,
            loss: losses.total,
            softmax_loss: losses.softmax_loss,
            center_loss: losses.center_loss,
        });
    }

    let (_, grad_logits) = softmax_loss(&pass.logits, &assignment)?;
    let center_term = center_feature_grad(features, &assignment, &bank, config.lambda)?;
    let grads = net.backward(&pass, &center_term, &grad_logits)?;
    let grad_centers = grad_wrt_centers(
        features,
        &assignment,
        &bank,
        config.center_grad_scale.factor(config.lambda),
    )?;

    let divergence = |e: Error| match e {
        Error::NonFiniteGradient(_) => Error::Divergence {
            iteration: next_iteration,
            loss: losses.total,
            softmax_loss: losses.softmax_loss,
            center_loss: losses.center_loss,
        },
        other => other,
    };
    let network = net.sgd_step(&grads, config.learning_rate).map_err(divergence)?;
    let centers = update_centers(&bank, &grad_centers, config.learning_rate).map_err(divergence)?;

    let mut changed = 0usize;
    for (&idx, &z) in batch.indices.iter().zip(&assignment.labels) {
        let slot = resume
            .last_labels
            .get_mut(idx)
            .ok_or_else(|| Error::Config(format!("sample index {idx} outside the training set")))?;
        if slot.is_some_and(|prev| prev != z) {
            changed += 1;
        }
        *slot = Some(z);
    }

    let record = TrainLogRecord {
        iteration: next_iteration,
        loss: losses.total,
        softmax_loss: losses.softmax_loss,
        center_loss: losses.center_loss,
        lambda: losses.lambda,
        churn: changed as f64 / batch.indices.len() as f64,
        counts: assignment.counts(),
    };
    let detail = StepDetail {
        features: pass.features.clone(),
        logits: pass.logits.clone(),
        centers_used: bank,
        assignment,
        losses,
    };
    Ok((
        TrainState {
            network,
            centers,
            iteration: next_iteration,
            resume,
        },
        record,
        detail,
    ))
}

/// Builds the batch that the schedule assigns to `step`.
pub fn batch_at(images: &ImageSet, sampler: &BatchSampler, step: u64) -> Batch {
    let indices = sampler.batch(step);
    Batch {
        ids: indices.iter().map(|&i| images.ids()[i].clone()).collect(),
        images: images.select(&indices),
        indices,
    }
}

/// Callbacks fired by [`run`].
pub trait TrainObserver {
    fn on_log(&mut self, _record: &TrainLogRecord) -> Result<()> {
        Ok(())
    }

    fn on_checkpoint(&mut self, _state: &TrainState) -> Result<()> {
        Ok(())
    }
}

/// Observer that keeps every emitted record in memory.
#[derive(Debug, Default)]
pub struct CollectLog(pub Vec<TrainLogRecord>);

impl TrainObserver for CollectLog {
    fn on_log(&mut self, record: &TrainLogRecord) -> Result<()> {
        self.0.push(record.clone());
        Ok(())
    }
}

/// Runs steps from `state.iteration` until `stop_at` updates have been
/// applied (capped at `config.iterations`), emitting a log record every
/// `log_every` steps and a checkpoint every `checkpoint_every` steps.
pub fn run(
    mut state: TrainState,
    images: &ImageSet,
    config: &TrainConfig,
    stop_at: Option<u64>,
    observer: &mut dyn TrainObserver,
) -> Result<TrainState> {
    config.validate()?;
    if images.geometry() != state.network.spec().input {
        return Err(Error::ShapeMismatch {
            layer: None,
            expected: state.network.spec().input.as_shape().to_vec(),
            got: images.geometry().as_shape().to_vec(),
        });
    }
    if state.resume.last_labels.len() != images.len() {
        return Err(Error::Config(format!(
            "training state tracks {} samples, dataset has {}",
            state.resume.last_labels.len(),
            images.len()
        )));
    }
    let sampler = sampler_for(images.len(), config)?;
    let end = stop_at.map_or(config.iterations, |s| s.min(config.iterations));
    while state.iteration < end {
        let batch = batch_at(images, &sampler, state.iteration);
        let (next, record) = train_step(&state, &batch, config)?;
        state = next;
        if state.iteration % config.log_every == 0 {
            observer.on_log(&record)?;
        }
        if config.checkpoint_every > 0 && state.iteration % config.checkpoint_every == 0 {
            observer.on_checkpoint(&state)?;
        }
    }
    Ok(state)
}

/// Trains `network` on `images` for `config.iterations` steps from a zero
/// center bank.
pub fn train(network: Network, images: &ImageSet, config: &TrainConfig) -> Result<(Network, CenterBank, Vec<TrainLogRecord>)> {
    let mut log = CollectLog::default();
    let state = run(
        TrainState::from_network(network, images.len()),
        images,
        config,
        None,
        &mut log,
    )?;
    Ok((state.network, state.centers, log.0))
}

/// Rows of features in dataset order; no parameter is touched.
pub fn extract_features(network: &Network, images: &ImageSet) -> Result<(Tensor, Vec<String>)> {
    const CHUNK: usize = 256;
    let n = images.len();
    let mut data = Vec::with_capacity(n * network.feature_dim());
    for start in (0..n).step_by(CHUNK) {
        let idx: Vec<usize> = (start..(start + CHUNK).min(n)).collect();
        let pass = network.forward(&images.select(&idx))?;
        data.extend_from_slice(pass.features.data());
    }
    Ok((
        Tensor::new(vec![n, network.feature_dim()], data)?,
        images.ids().to_vec(),
    ))
}
