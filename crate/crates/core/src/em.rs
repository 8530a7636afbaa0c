//! Variational EM training of the denoiser with a priority queue of
//! pseudo-label samples, and test-time prediction.

use std::collections::VecDeque;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines::{predict_independent, sample_independent, train_vanilla_gnn, GnnRun, GnnTrainConfig};
use crate::denoiser::{BoundDenoiser, DenoiserParams, FusionGnn, ModelConfig};
use crate::error::{Error, Result};
use crate::graph::{ClassId, GraphBundle, NormalizedAdjacency};
use crate::metrics::node_accuracy;
use crate::nn::{Tape, Tensor2, Var};
use crate::rng::{indexed_stream, stream, sub_stream_id, Stream, StreamRng};
use crate::sampler::sample_conditional_labeled_first;
use crate::schedule::{cosine_schedule, forward_mask, loss_weight_and_mask, LabelState, NoiseSchedule};

/// How queue priorities turn into selection weights.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PriorityMode {
    /// `w ∝ exp(priority / τ)`
    #[default]
    Softmax,
    /// `w ∝ priority^(1/τ)`
    Power,
}

/// EM training configuration. The model keys sit at the top level next to
/// the training keys.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(rename = "T")]
    pub horizon: usize,
    #[serde(rename = "S")]
    pub queue_size: usize,
    pub tau: f64,
    pub lr: f64,
    pub weight_decay: f64,
    pub em_rounds: usize,
    pub m_steps_per_round: usize,
    pub warmup_epochs: usize,
    pub eval_samples: usize,
    pub seed: u64,
    pub priority_mode: PriorityMode,
    pub hidden_dim: usize,
    pub layers: usize,
    pub time_dim: usize,
    pub dropout: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let model = ModelConfig::default();
        Self {
            horizon: 80,
            queue_size: 100,
            tau: 0.1,
            lr: 0.01,
            weight_decay: 0.001,
            em_rounds: 500,
            m_steps_per_round: 1,
            warmup_epochs: 500,
            eval_samples: 10,
            seed: 0,
            priority_mode: PriorityMode::Softmax,
            hidden_dim: model.hidden_dim,
            layers: model.layers,
            time_dim: model.time_dim,
            dropout: model.dropout,
        }
    }
}

impl TrainConfig {
    pub fn model(&self) -> ModelConfig {
        ModelConfig {
            hidden_dim: self.hidden_dim,
            layers: self.layers,
            time_dim: self.time_dim,
            dropout: self.dropout,
        }
    }

    pub fn with_model(mut self, model: ModelConfig) -> Self {
        self.hidden_dim = model.hidden_dim;
        self.layers = model.layers;
        self.time_dim = model.time_dim;
        self.dropout = model.dropout;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.into()));
        if self.horizon == 0 {
            return fail("T must be at least 1");
        }
        if self.queue_size == 0 {
            return fail("S must be at least 1");
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return fail("tau must be positive");
        }
        if !(self.lr >= 0.0 && self.weight_decay >= 0.0) {
            return fail("lr and weight_decay must be non-negative");
        }
        if self.eval_samples == 0 {
            return fail("eval_samples must be at least 1");
        }
        Ok(())
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        cosine_schedule(self.horizon)
    }

    fn warmup_config(&self) -> GnnTrainConfig {
        GnnTrainConfig {
            epochs: self.warmup_epochs,
            lr: self.lr,
            weight_decay: self.weight_decay,
        }
    }
}

/// A cached clean pseudo-label sample.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct QueueEntry {
    pub labels: Vec<ClassId>,
    /// Validation accuracy of `labels`.
    pub priority: f64,
    /// Monotone insertion counter.
    pub inserted: u64,
}

/// Bounded FIFO of samples; the oldest entry is evicted when full.
#[derive(Debug, Clone, PartialEq)]
pub struct PriorityQueue {
    capacity: usize,
    entries: VecDeque<QueueEntry>,
    next_index: u64,
}

impl PriorityQueue {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::Config("queue capacity must be at least 1".into()));
        }
        Ok(Self {
            capacity,
            entries: VecDeque::with_capacity(capacity),
            next_index: 0,
        })
    }

    /// Inserts a sample, returning the evicted entry if the queue was full.
    pub fn push(&mut self, labels: Vec<ClassId>, priority: f64) -> Option<QueueEntry> {
        let evicted = if self.entries.len() == self.capacity {
            self.entries.pop_front()
        } else {
            None
        };
        self.entries.push_back(QueueEntry {
            labels,
            priority,
            inserted: self.next_index,
        });
        self.next_index += 1;
        evicted
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> impl Iterator<Item = &QueueEntry> {
        self.entries.iter()
    }

    pub fn priorities(&self) -> Vec<f64> {
        self.entries.iter().map(|e| e.priority).collect()
    }
}

/// Normalized selection probabilities for `priorities`.
pub fn selection_probabilities(priorities: &[f64], tau: f64, mode: PriorityMode) -> Vec<f64> {
    let weights: Vec<f64> = match mode {
        PriorityMode::Softmax => {
            let max = priorities.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            priorities.iter().map(|p| ((p - max) / tau).exp()).collect()
        }
        PriorityMode::Power => priorities.iter().map(|p| p.max(0.0).powf(1.0 / tau)).collect(),
    };
    let total: f64 = weights.iter().sum();
    if total > 0.0 && total.is_finite() {
        weights.iter().map(|w| w / total).collect()
    } else {
        vec![1.0 / priorities.len() as f64; priorities.len()]
    }
}

/// Picks an entry with probability given by [`selection_probabilities`].
pub fn priority_select<'q>(
    queue: &'q PriorityQueue,
    tau: f64,
    mode: PriorityMode,
    rng: &mut StreamRng,
) -> Result<&'q QueueEntry> {
    if queue.is_empty() {
        return Err(Error::InvalidArgument("selection from an empty queue".into()));
    }
    let probs = selection_probabilities(&queue.priorities(), tau, mode);
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (k, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return Ok(&queue.entries[k]);
        }
    }
    Ok(queue.entries.back().expect("non-empty"))
}

/// Validation accuracy used as a queue priority (0 without validation nodes).
pub fn sample_priority(g: &GraphBundle, labels: &[ClassId]) -> Result<f64> {
    if g.splits().val.is_empty() {
        return Ok(0.0);
    }
    node_accuracy(labels, g.labels(), &g.splits().val)
}

fn clamp_observed(labels: &mut [ClassId], observed: &[Option<ClassId>]) {
    for (l, o) in labels.iter_mut().zip(observed) {
        if let Some(c) = *o {
            *l = c;
        }
    }
}

/// Trains the vanilla GNN and fills the queue with `S` independent samples
/// from its predictive distribution, clamped to the observed labels.
pub fn warmup_queue(g: &GraphBundle, adj: &NormalizedAdjacency, cfg: &TrainConfig) -> Result<(PriorityQueue, GnnRun)> {
    cfg.validate()?;
    let gnn = train_vanilla_gnn(g, adj, cfg.model(), &cfg.warmup_config(), cfg.seed)?;
    let (_, probs) = predict_independent(&gnn.model, g, adj, &gnn.inference_input(g))?;
    let observed = g.observed_labels();
    let mut rng = stream(cfg.seed, Stream::Warmup);
    let mut queue = PriorityQueue::new(cfg.queue_size)?;
    for _ in 0..cfg.queue_size {
        let mut labels = sample_independent(&probs, &mut rng);
        clamp_observed(&mut labels, &observed);
        let priority = sample_priority(g, &labels)?;
        queue.push(labels, priority);
    }
    Ok((queue, gnn))
}

/// Records the weighted diffusion loss `Σ_{i masked} λ′·CE(y0_i, p_θ(· | yt))`
/// on `tape` (evaluation mode when `dropout_rng` is `None`).
#[allow(clippy::too_many_arguments)]
pub fn record_diffusion_loss(
    tape: &mut Tape,
    params: &DenoiserParams,
    g: &GraphBundle,
    adj: &NormalizedAdjacency,
    sched: &NoiseSchedule,
    y0: &[ClassId],
    yt: &LabelState,
    dropout_rng: Option<&mut StreamRng>,
) -> Result<Var> {
    if y0.len() != yt.num_nodes() {
        return Err(Error::shape("diffusion loss", "clean and noisy label counts differ"));
    }
    let (weights, active) = loss_weight_and_mask(yt, sched)?;
    let fw = match dropout_rng {
        Some(rng) => params.forward_train(tape, g, adj, &yt.labels, Some(yt.t), rng)?,
        None => params.forward(tape, g, adj, &yt.labels, Some(yt.t))?,
    };
    tape.weighted_softmax_ce(fw.logits, y0, &weights, &active)
}

/// Evaluation-mode diffusion loss value.
pub fn diffusion_loss(
    params: &DenoiserParams,
    g: &GraphBundle,
    adj: &NormalizedAdjacency,
    sched: &NoiseSchedule,
    y0: &[ClassId],
    yt: &LabelState,
) -> Result<f64> {
    let mut tape = Tape::new();
    let loss = record_diffusion_loss(&mut tape, params, g, adj, sched, y0, yt, None)?;
    Ok(tape.value(loss).data()[0])
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MStepOutcome {
    pub t: usize,
    pub masked: usize,
    pub loss: f64,
}

/// One gradient step on the diffusion loss of a clean sample at a uniformly
/// drawn timestep. No update happens when the draw masks no node.
pub fn m_step(
    params: &mut DenoiserParams,
    g: &GraphBundle,
    adj: &NormalizedAdjacency,
    sched: &NoiseSchedule,
    y0: &[ClassId],
    cfg: &TrainConfig,
    rng: &mut StreamRng,
) -> Result<MStepOutcome> {
    let t = rng.random_range(1..=sched.horizon());
    let yt = forward_mask(y0, t, sched, rng)?;
    let masked = yt.masked_count();
    if masked == 0 {
        return Ok(MStepOutcome { t, masked, loss: 0.0 });
    }
    let mut tape = Tape::new();
    let loss = record_diffusion_loss(&mut tape, params, g, adj, sched, y0, &yt, Some(rng))?;
    let value = tape.value(loss).data()[0];
    if !value.is_finite() {
        return Err(Error::NonFinite(format!("diffusion loss at t={t}")));
    }
    let grads = tape.backward(loss, params.store())?;
    params.store_mut().optimizer_step(&grads, cfg.lr, cfg.weight_decay)?;
    Ok(MStepOutcome { t, masked, loss: value })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WarmupSummary {
    pub best_epoch: Option<usize>,
    pub best_val_accuracy: f64,
    pub losses: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RoundRecord {
    pub round: usize,
    /// Validation accuracy of this round's E-step sample.
    pub estep_val_accuracy: f64,
    pub m_steps: Vec<MStepOutcome>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunReport {
    pub warmup: WarmupSummary,
    pub rounds: Vec<RoundRecord>,
    /// 1-based round whose E-step denoiser is returned; `None` for the
    /// initial parameters.
    pub best_round: Option<usize>,
    pub best_val_accuracy: Option<f64>,
    pub final_priorities: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct EmRun {
    /// Denoiser of the best round.
    pub denoiser: DenoiserParams,
    pub queue: PriorityQueue,
    pub warmup: GnnRun,
    pub report: RunReport,
}

/// Warm-up followed by `em_rounds` rounds of {E-step sample, push with its
/// validation priority; `m_steps_per_round` × (select, M-step)}.
pub fn em_train(g: &GraphBundle, adj: &NormalizedAdjacency, cfg: &TrainConfig) -> Result<EmRun> {
    let sched = cfg.schedule()?;
    let (mut queue, warmup) = warmup_queue(g, adj, cfg)?;
    let mut params = FusionGnn::denoiser(
        cfg.model(),
        g.num_features(),
        g.num_classes(),
        &mut indexed_stream(cfg.seed, sub_stream_id(Stream::Init, 1)),
    )?;
    let observed = g.observed_labels();
    let mut e_rng = stream(cfg.seed, Stream::EStep);
    let mut m_rng = stream(cfg.seed, Stream::MStep);
    let mut q_rng = stream(cfg.seed, Stream::Queue);

    let mut best = params.clone();
    let mut best_round = None;
    let mut best_val_accuracy: Option<f64> = None;
    let mut rounds = Vec::with_capacity(cfg.em_rounds);
    for round in 1..=cfg.em_rounds {
        let predictor = BoundDenoiser {
            params: &params,
            graph: g,
            adj,
        };
        let sample = sample_conditional_labeled_first(&predictor, &observed, &sched, &mut e_rng)?.classes();
        let acc = sample_priority(g, &sample)?;
        if best_val_accuracy.is_none_or(|b| acc >= b) {
            best_val_accuracy = Some(acc);
            best_round = Some(round);
            best = params.clone();
        }
        queue.push(sample, acc);

        let mut m_steps = Vec::with_capacity(cfg.m_steps_per_round);
        for _ in 0..cfg.m_steps_per_round {
            let y0 = priority_select(&queue, cfg.tau, cfg.priority_mode, &mut q_rng)?
                .labels
                .clone();
            m_steps.push(m_step(&mut params, g, adj, &sched, &y0, cfg, &mut m_rng)?);
        }
        rounds.push(RoundRecord {
            round,
            estep_val_accuracy: acc,
            m_steps,
        });
    }
    let report = RunReport {
        warmup: WarmupSummary {
            best_epoch: warmup.best_epoch,
            best_val_accuracy: warmup.best_val_accuracy,
            losses: warmup.losses.clone(),
        },
        rounds,
        best_round,
        best_val_accuracy,
        final_priorities: queue.priorities(),
    };
    Ok(EmRun {
        denoiser: best,
        queue,
        warmup,
        report,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub classes: Vec<ClassId>,
    /// Per-node vote frequencies (N×C).
    pub votes: Tensor2,
    pub samples: Vec<Vec<ClassId>>,
}

/// Draws `k` conditional samples on independent streams and takes the
/// per-node majority vote (ties go to the lowest class id).
pub fn predict(
    params: &DenoiserParams,
    g: &GraphBundle,
    adj: &NormalizedAdjacency,
    sched: &NoiseSchedule,
    observed: &[Option<ClassId>],
    k: usize,
    seed: u64,
) -> Result<Prediction> {
    if k == 0 {
        return Err(Error::InvalidArgument("prediction needs at least one sample".into()));
    }
    let predictor = BoundDenoiser { params, graph: g, adj };
    let samples = (0..k)
        .into_par_iter()
        .map(|s| {
            let mut rng = indexed_stream(seed, sub_stream_id(Stream::Predict, s as u64));
            Ok(sample_conditional_labeled_first(&predictor, observed, sched, &mut rng)?.classes())
        })
        .collect::<Result<Vec<_>>>()?;
    let c = g.num_classes();
    let mut votes = Tensor2::zeros(g.num_nodes(), c);
    for s in &samples {
        for (i, &label) in s.iter().enumerate() {
            votes.row_mut(i)[label] += 1.0 / k as f64;
        }
    }
    Ok(Prediction {
        classes: votes.argmax_rows(),
        votes,
        samples,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{generate_sbm, make_paper_split, normalize_adjacency, SbmSpec};

    #[test]
    fn queue_evicts_oldest() {
        let mut q = PriorityQueue::new(2).unwrap();
        assert!(q.push(vec![0], 0.1).is_none());
        assert!(q.push(vec![1], 0.2).is_none());
        let evicted = q.push(vec![2], 0.3).unwrap();
        assert_eq!(evicted.labels, vec![0]);
        assert_eq!(q.priorities(), vec![0.2, 0.3]);
        assert_eq!(q.entries().map(|e| e.inserted).collect::<Vec<_>>(), vec![1, 2]);
    }

    #[test]
    fn single_entry_is_always_selected() {
        let mut q = PriorityQueue::new(3).unwrap();
        q.push(vec![4], 0.0);
        let mut rng = stream(1, Stream::Queue);
        for _ in 0..100 {
            assert_eq!(
                priority_select(&q, 0.1, PriorityMode::Softmax, &mut rng)
                    .unwrap()
                    .labels,
                vec![4]
            );
        }
        assert!(priority_select(&PriorityQueue::new(1).unwrap(), 0.1, PriorityMode::Softmax, &mut rng).is_err());
    }

    #[test]
    fn softmax_ratio_matches_closed_form() {
        let p = selection_probabilities(&[0.9, 0.5], 0.1, PriorityMode::Softmax);
        assert!((p[0] / p[1] - 4f64.exp()).abs() < 1e-9);
        let p = selection_probabilities(&[0.8, 0.4], 0.5, PriorityMode::Power);
        assert!((p[0] / p[1] - 4.0).abs() < 1e-12);
        assert_eq!(
            selection_probabilities(&[0.0, 0.0], 0.5, PriorityMode::Power),
            vec![0.5, 0.5]
        );
    }

    #[test]
    fn config_keys_round_trip() {
        let json = r#"{"T": 12, "S": 3, "tau": 0.5, "hidden_dim": 16, "priority_mode": "power"}"#;
        let cfg: TrainConfig = serde_json::from_str(json).unwrap();
        assert_eq!(cfg.horizon, 12);
        assert_eq!(cfg.queue_size, 3);
        assert_eq!(cfg.model().hidden_dim, 16);
        assert_eq!(cfg.model().layers, 2);
        assert_eq!(cfg.priority_mode, PriorityMode::Power);
        let back: TrainConfig = serde_json::from_str(&serde_json::to_string(&cfg).unwrap()).unwrap();
        assert_eq!(back, cfg);
        assert!(TrainConfig { tau: 0.0, ..cfg }.validate().is_err());
        assert!(serde_json::from_str::<TrainConfig>(r#"{"data": 1}"#).is_err());
    }

    fn fixture() -> (GraphBundle, NormalizedAdjacency) {
        let g = generate_sbm(&SbmSpec {
            n_per_class: 15,
            num_classes: 3,
            p_in: 0.4,
            p_out: 0.02,
            feat_dim: 6,
            feat_noise: 0.5,
            seed: 21,
        })
        .unwrap();
        let g = g.clone().with_splits(make_paper_split(&g, 3, 3, 1).unwrap()).unwrap();
        let adj = normalize_adjacency(&g);
        (g, adj)
    }

    fn tiny_config() -> TrainConfig {
        TrainConfig {
            horizon: 6,
            queue_size: 4,
            em_rounds: 3,
            warmup_epochs: 5,
            eval_samples: 2,
            ..TrainConfig::default()
        }
        .with_model(ModelConfig {
            hidden_dim: 8,
            layers: 2,
            time_dim: 8,
            dropout: 0.5,
        })
    }

    #[test]
    fn warmup_entries_are_clamped() {
        let (g, adj) = fixture();
        let cfg = TrainConfig {
            queue_size: 1,
            ..tiny_config()
        };
        let (q, _) = warmup_queue(&g, &adj, &cfg).unwrap();
        assert_eq!(q.len(), 1);
        let observed = g.observed_labels();
        let (q, _) = warmup_queue(&g, &adj, &tiny_config()).unwrap();
        for e in q.entries() {
            for (i, o) in observed.iter().enumerate() {
                if let Some(c) = o {
                    assert_eq!(e.labels[i], *c);
                }
            }
        }
    }

    #[test]
    fn zero_rounds_returns_initial_denoiser() {
        let (g, adj) = fixture();
        let cfg = TrainConfig {
            em_rounds: 0,
            ..tiny_config()
        };
        let run = em_train(&g, &adj, &cfg).unwrap();
        let init = FusionGnn::denoiser(
            cfg.model(),
            g.num_features(),
            3,
            &mut indexed_stream(cfg.seed, sub_stream_id(Stream::Init, 1)),
        )
        .unwrap();
        assert_eq!(
            run.denoiser.store().to_checkpoint_bytes(),
            init.store().to_checkpoint_bytes()
        );
        assert_eq!(run.queue.len(), cfg.queue_size);
        assert!(run.report.rounds.is_empty());
    }

    #[test]
    fn em_is_deterministic_and_queue_bounded() {
        let (g, adj) = fixture();
        let cfg = tiny_config();
        let a = em_train(&g, &adj, &cfg).unwrap();
        let b = em_train(&g, &adj, &cfg).unwrap();
        assert_eq!(a.report, b.report);
        assert!(a.queue.len() <= cfg.queue_size);
        assert_eq!(a.report.rounds.len(), 3);
    }

    #[test]
    fn single_sample_prediction_is_that_sample() {
        let (g, adj) = fixture();
        let cfg = tiny_config();
        let sched = cfg.schedule().unwrap();
        let params = FusionGnn::denoiser(cfg.model(), g.num_features(), 3, &mut stream(0, Stream::Init)).unwrap();
        let observed = g.observed_labels();
        let p = predict(&params, &g, &adj, &sched, &observed, 1, 9).unwrap();
        assert_eq!(p.classes, p.samples[0]);
        assert!(p.votes.data().iter().all(|&v| v == 0.0 || v == 1.0));
        assert!(predict(&params, &g, &adj, &sched, &observed, 0, 9).is_err());
    }
}
