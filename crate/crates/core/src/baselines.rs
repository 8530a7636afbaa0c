//! Reference predictors: label spreading, the vanilla GNN and the label-trick
//! GNN. Both GNNs use the open-gate fusion network.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::denoiser::{FusionGnn, LabelConditionedModel, ModelConfig};
use crate::error::{Error, Result};
use crate::graph::{Adjacency, ClassId, GraphBundle, NormalizedAdjacency};
use crate::metrics::node_accuracy;
use crate::nn::{Tape, Tensor2};
use crate::rng::{indexed_stream, stream, sub_stream_id, Stream, StreamRng};
use crate::sampler::sample_categorical;
use crate::sparse::SparseMatrix;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LpConfig {
    pub lambda: f64,
    pub iterations: usize,
    pub tolerance: f64,
}

impl Default for LpConfig {
    fn default() -> Self {
        Self {
            lambda: 0.9,
            iterations: 50,
            tolerance: 1e-6,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LpOutcome {
    /// Unnormalized fixed-point scores `F` (N×C).
    pub scores: Tensor2,
    pub iterations: usize,
    /// Max-abs change of `F` per iteration.
    pub residuals: Vec<f64>,
}

impl LpOutcome {
    pub fn predictions(&self) -> Vec<ClassId> {
        self.scores.argmax_rows()
    }
}

/// `S = D^{-1/2} A D^{-1/2}` without self-loops; isolated nodes get empty rows.
pub fn spreading_operator(adj: &Adjacency) -> SparseMatrix {
    let n = adj.num_nodes();
    let inv_sqrt: Vec<f64> = (0..n)
        .map(|i| match adj.degree(i) {
            0 => 0.0,
            d => 1.0 / (d as f64).sqrt(),
        })
        .collect();
    let mut offsets = Vec::with_capacity(n + 1);
    let mut indices = Vec::new();
    let mut values = Vec::new();
    offsets.push(0);
    for i in 0..n {
        for &j in adj.neighbors(i) {
            indices.push(j);
            values.push(inv_sqrt[i] * inv_sqrt[j as usize]);
        }
        offsets.push(indices.len());
    }
    SparseMatrix::from_csr(n, n, offsets, indices, values).expect("adjacency rows are sorted and in range")
}

/// One-hot rows for seeded nodes, zero rows elsewhere.
pub fn seed_matrix(seeds: &[Option<ClassId>], num_classes: usize) -> Result<Tensor2> {
    let mut y = Tensor2::zeros(seeds.len(), num_classes);
    for (i, s) in seeds.iter().enumerate() {
        if let Some(c) = *s {
            if c >= num_classes {
                return Err(Error::InvalidArgument(format!("seed label {c} out of range")));
            }
            y.row_mut(i)[c] = 1.0;
        }
    }
    Ok(y)
}

/// Iterates `F ← λ·S·F + (1−λ)·Y⁰` from `F = Y⁰` until the max-abs change
/// drops below the tolerance or the iteration cap is reached.
pub fn label_spread(
    adj: &Adjacency,
    num_classes: usize,
    seeds: &[Option<ClassId>],
    cfg: &LpConfig,
) -> Result<LpOutcome> {
    if !(cfg.lambda > 0.0 && cfg.lambda < 1.0) {
        return Err(Error::Config(format!("lambda {} outside (0, 1)", cfg.lambda)));
    }
    if seeds.len() != adj.num_nodes() {
        return Err(Error::shape("label_spread", "seed count differs from node count"));
    }
    if seeds.iter().all(Option::is_none) {
        return Err(Error::InvalidArgument(
            "label spreading needs at least one labeled node".into(),
        ));
    }
    let s = spreading_operator(adj);
    let y0 = seed_matrix(seeds, num_classes)?;
    let mut f = y0.clone();
    let mut residuals = Vec::new();
    for _ in 0..cfg.iterations {
        let mut next = s.matmul_dense(f.data(), num_classes);
        let mut change: f64 = 0.0;
        for (k, v) in next.iter_mut().enumerate() {
            *v = cfg.lambda * *v + (1.0 - cfg.lambda) * y0.data()[k];
            change = change.max((*v - f.data()[k]).abs());
        }
        f = Tensor2::from_vec(f.rows(), num_classes, next)?;
        residuals.push(change);
        if change < cfg.tolerance {
            break;
        }
    }
    Ok(LpOutcome {
        scores: f,
        iterations: residuals.len(),
        residuals,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GnnTrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
}

impl Default for GnnTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            lr: 0.01,
            weight_decay: 5e-4,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GnnRun {
    /// The checkpoint with the best validation accuracy (the initial
    /// parameters when no epoch improves on them).
    pub model: FusionGnn,
    /// Label-input probability used in training; 0 for the vanilla GNN.
    pub lambda_in: f64,
    pub losses: Vec<f64>,
    pub val_accuracy: Vec<f64>,
    /// 1-based epoch of the selected checkpoint; `None` for the initial parameters.
    pub best_epoch: Option<usize>,
    pub best_val_accuracy: f64,
}

impl GnnRun {
    /// Label input used at prediction time: every observed label for the
    /// label-trick network, nothing for the vanilla one.
    pub fn inference_input(&self, g: &GraphBundle) -> Vec<Option<ClassId>> {
        if self.lambda_in > 0.0 {
            g.observed_labels()
        } else {
            vec![None; g.num_nodes()]
        }
    }
}

/// Trains the vanilla GNN with mean cross-entropy on the training nodes.
pub fn train_vanilla_gnn(
    g: &GraphBundle,
    adj: &NormalizedAdjacency,
    model: ModelConfig,
    cfg: &GnnTrainConfig,
    seed: u64,
) -> Result<GnnRun> {
    train_label_trick(g, adj, model, cfg, 0.0, seed)
}

/// Label-trick training: every epoch each training node joins the label
/// input with probability `lambda_in`; the loss is the mean cross-entropy on
/// the remaining training nodes.
pub fn train_label_trick(
    g: &GraphBundle,
    adj: &NormalizedAdjacency,
    model: ModelConfig,
    cfg: &GnnTrainConfig,
    lambda_in: f64,
    seed: u64,
) -> Result<GnnRun> {
    if !(0.0..1.0).contains(&lambda_in) {
        return Err(Error::Config(format!("lambda_in {lambda_in} outside [0, 1)")));
    }
    let train = &g.splits().train;
    if train.is_empty() {
        return Err(Error::InvalidArgument("GNN training needs training nodes".into()));
    }
    let mut net = FusionGnn::label_trick(
        model,
        g.num_features(),
        g.num_classes(),
        &mut stream(seed, Stream::Init),
    )?;
    let mut partition_rng = stream(seed, Stream::Partition);
    let mut dropout_rng = indexed_stream(seed, sub_stream_id(Stream::Partition, 1));
    let observed = g.observed_labels();
    let eval_input = if lambda_in > 0.0 {
        observed.clone()
    } else {
        vec![None; g.num_nodes()]
    };
    let val = &g.splits().val;
    let truth = g.labels();

    let evaluate = |net: &FusionGnn| -> Result<f64> {
        if val.is_empty() {
            return Ok(0.0);
        }
        let (pred, _) = predict_independent(net, g, adj, &eval_input)?;
        node_accuracy(&pred, truth, val)
    };

    let mut best = net.clone();
    let mut best_val_accuracy = evaluate(&net)?;
    let mut best_epoch = None;
    let mut losses = Vec::with_capacity(cfg.epochs);
    let mut val_accuracy = Vec::with_capacity(cfg.epochs);
    let n = g.num_nodes();
    for epoch in 1..=cfg.epochs {
        let mut labels_in = vec![None; n];
        let mut out_nodes = Vec::new();
        for &i in train {
            let i = i as usize;
            if partition_rng.random::<f64>() < lambda_in {
                labels_in[i] = observed[i];
            } else {
                out_nodes.push(i);
            }
        }
        let mut loss_value = 0.0;
        if !out_nodes.is_empty() {
            let mut targets = vec![0; n];
            let mut weights = vec![0.0; n];
            let w = 1.0 / out_nodes.len() as f64;
            for &i in &out_nodes {
                targets[i] = observed[i].expect("training nodes are labeled");
                weights[i] = w;
            }
            let mut tape = Tape::new();
            let fw = net.forward_train(&mut tape, g, adj, &labels_in, None, &mut dropout_rng)?;
            let loss = tape.weighted_softmax_ce(fw.logits, &targets, &weights, &out_nodes)?;
            loss_value = tape.value(loss).data()[0];
            if !loss_value.is_finite() {
                return Err(Error::NonFinite(format!("GNN loss at epoch {epoch}")));
            }
            let grads = tape.backward(loss, net.store())?;
            net.store_mut().optimizer_step(&grads, cfg.lr, cfg.weight_decay)?;
        }
        losses.push(loss_value);
        let acc = evaluate(&net)?;
        val_accuracy.push(acc);
        if acc > best_val_accuracy || (val.is_empty() && epoch == cfg.epochs) {
            best_val_accuracy = acc;
            best_epoch = Some(epoch);
            best = net.clone();
        }
    }
    Ok(GnnRun {
        model: best,
        lambda_in,
        losses,
        val_accuracy,
        best_epoch,
        best_val_accuracy,
    })
}

/// One forward pass: per-node argmax and the softmax distribution.
pub fn predict_independent<M: LabelConditionedModel + ?Sized>(
    model: &M,
    g: &GraphBundle,
    adj: &NormalizedAdjacency,
    labels_in: &[Option<ClassId>],
) -> Result<(Vec<ClassId>, Tensor2)> {
    let mut tape = Tape::new();
    let logits = model.conditioned_logits(&mut tape, g, adj, labels_in)?;
    let probs = tape.value(logits).softmax_rows();
    Ok((probs.argmax_rows(), probs))
}

/// Draws every node's label independently from its row of `probs`.
pub fn sample_independent(probs: &Tensor2, rng: &mut StreamRng) -> Vec<ClassId> {
    (0..probs.rows())
        .map(|i| sample_categorical(probs.row(i), rng))
        .collect()
}

/// Summed cross-entropy over `out_nodes` of a label-conditioned model given
/// input labels `labels_in`, computed from the logits with plain scalar code.
pub fn label_trick_loss<M: LabelConditionedModel + ?Sized>(
    model: &M,
    g: &GraphBundle,
    adj: &NormalizedAdjacency,
    labels_in: &[Option<ClassId>],
    targets: &[ClassId],
    out_nodes: &[usize],
) -> Result<f64> {
    let mut tape = Tape::new();
    let logits = model.conditioned_logits(&mut tape, g, adj, labels_in)?;
    let logits = tape.value(logits);
    let mut total = 0.0;
    for &i in out_nodes {
        let row = logits.row(i);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let log_norm = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        total += log_norm - row[targets[i]];
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{generate_sbm, make_paper_split, normalize_adjacency, SbmSpec};

    fn path3() -> Adjacency {
        Adjacency::from_undirected(3, [(0, 1), (1, 2)]).unwrap()
    }

    #[test]
    fn spreading_operator_weights() {
        let s = spreading_operator(&path3());
        let w = 1.0 / 2f64.sqrt();
        assert_eq!(s.get(0, 1), w);
        assert_eq!(s.get(1, 2), w);
        assert_eq!(s.get(0, 0), 0.0);
        assert!(s.is_symmetric());
    }

    #[test]
    fn path_middle_node_is_a_tie() {
        let cfg = LpConfig {
            lambda: 0.5,
            iterations: 200,
            tolerance: 1e-15,
        };
        let out = label_spread(&path3(), 2, &[Some(0), None, Some(1)], &cfg).unwrap();
        assert_eq!(out.scores.get(1, 0), out.scores.get(1, 1));
    }

    #[test]
    fn small_lambda_reproduces_seeds() {
        let adj = Adjacency::from_undirected(4, [(0, 1), (1, 2), (2, 3)]).unwrap();
        let seeds = [Some(1), Some(0), Some(1), Some(0)];
        let out = label_spread(
            &adj,
            2,
            &seeds,
            &LpConfig {
                lambda: 1e-6,
                ..LpConfig::default()
            },
        )
        .unwrap();
        assert_eq!(out.predictions(), vec![1, 0, 1, 0]);
    }

    #[test]
    fn residuals_decrease_and_errors() {
        let adj = Adjacency::from_undirected(5, [(0, 1), (1, 2), (2, 3), (3, 4), (4, 0)]).unwrap();
        let out = label_spread(&adj, 2, &[Some(0), None, None, Some(1), None], &LpConfig::default()).unwrap();
        assert!(out.residuals.windows(2).skip(1).all(|w| w[1] <= w[0]));
        assert!(label_spread(&adj, 2, &[None; 5], &LpConfig::default()).is_err());
        assert!(label_spread(
            &adj,
            2,
            &[Some(0); 5],
            &LpConfig {
                lambda: 1.0,
                ..LpConfig::default()
            }
        )
        .is_err());
    }

    fn sbm() -> (GraphBundle, NormalizedAdjacency) {
        let g = generate_sbm(&SbmSpec {
            n_per_class: 30,
            num_classes: 3,
            p_in: 0.3,
            p_out: 0.01,
            feat_dim: 8,
            feat_noise: 0.5,
            seed: 11,
        })
        .unwrap();
        let split = make_paper_split(&g, 5, 5, 3).unwrap();
        let g = g.with_splits(split).unwrap();
        let adj = normalize_adjacency(&g);
        (g, adj)
    }

    fn small_model() -> ModelConfig {
        ModelConfig {
            hidden_dim: 16,
            layers: 2,
            time_dim: 8,
            dropout: 0.5,
        }
    }

    #[test]
    fn zero_epochs_returns_initial_parameters() {
        let (g, adj) = sbm();
        let run = train_vanilla_gnn(
            &g,
            &adj,
            small_model(),
            &GnnTrainConfig {
                epochs: 0,
                ..Default::default()
            },
            4,
        )
        .unwrap();
        let init = FusionGnn::label_trick(small_model(), g.num_features(), 3, &mut stream(4, Stream::Init)).unwrap();
        assert_eq!(run.best_epoch, None);
        assert_eq!(
            run.model.store().to_checkpoint_bytes(),
            init.store().to_checkpoint_bytes()
        );
    }

    #[test]
    fn first_epoch_loss_is_near_uniform() {
        let (g, adj) = sbm();
        let run = train_vanilla_gnn(
            &g,
            &adj,
            small_model(),
            &GnnTrainConfig {
                epochs: 1,
                ..Default::default()
            },
            5,
        )
        .unwrap();
        assert!(run.losses[0] <= 3f64.ln() + 0.1, "{}", run.losses[0]);
    }

    #[test]
    fn zero_label_input_matches_vanilla_trajectory() {
        let (g, adj) = sbm();
        let cfg = GnnTrainConfig {
            epochs: 15,
            ..Default::default()
        };
        let a = train_vanilla_gnn(&g, &adj, small_model(), &cfg, 6).unwrap();
        let b = train_label_trick(&g, &adj, small_model(), &cfg, 0.0, 6).unwrap();
        assert_eq!(a.losses, b.losses);
        assert_eq!(a.val_accuracy, b.val_accuracy);
    }

    #[test]
    fn softmax_rows_sum_to_one_and_prediction_is_deterministic() {
        let (g, adj) = sbm();
        let run = train_vanilla_gnn(
            &g,
            &adj,
            small_model(),
            &GnnTrainConfig {
                epochs: 5,
                ..Default::default()
            },
            7,
        )
        .unwrap();
        let input = run.inference_input(&g);
        let (p1, probs) = predict_independent(&run.model, &g, &adj, &input).unwrap();
        let (p2, _) = predict_independent(&run.model, &g, &adj, &input).unwrap();
        assert_eq!(p1, p2);
        for r in 0..probs.rows() {
            assert!((probs.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}
