//! Time-aware label/feature fusion GNN.
//!
//! Each of the `K` layers maps the previous node representation to
//! `X̃ = X·W_x + b_x`, fuses the embedded input labels as
//! `H̃ = X̃ + γ ∘ Ỹ`, then propagates `X' = Â·(H̃·W_h + b_h)` (ReLU on all but
//! the last layer). A linear head produces `C` logits.
//!
//! The same network serves two roles:
//! * as the diffusion denoiser, where `γ = σ(τ(t)·W_gt + Ỹ·W_gl + b_g)` depends
//!   on a transformed sinusoidal encoding `τ(t)` and on the node's noisy label;
//! * as the label-trick GNN, where `γ ≡ 1` and there is no time input.
//!
//! Masked labels are encoded as the zero vector, so `Ỹ_i = 0` for them.

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{ClassId, GraphBundle, NormalizedAdjacency};
use crate::nn::{time_encoding, ParamId, ParamStore, Tape, Tensor2, Var};
use crate::rng::StreamRng;
use crate::schedule::LabelState;

/// Standard deviation of the output head at initialization.
pub const HEAD_INIT_STD: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub hidden_dim: usize,
    pub layers: usize,
    pub time_dim: usize,
    /// Dropout rate on hidden representations during training.
    pub dropout: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden_dim: 64,
            layers: 2,
            time_dim: 128,
            dropout: 0.5,
        }
    }
}

#[derive(Debug, Clone)]
struct LayerIds {
    feat_w: ParamId,
    feat_b: ParamId,
    fuse_w: ParamId,
    fuse_b: ParamId,
    gate: Option<GateIds>,
}

#[derive(Debug, Clone)]
struct GateIds {
    time_w: ParamId,
    label_w: ParamId,
    bias: ParamId,
}

#[derive(Debug, Clone)]
struct TimeMlpIds {
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

/// Parameters of a fusion GNN, either time-gated (denoiser) or with an open
/// gate (label-trick / vanilla GNN).
#[derive(Debug, Clone)]
pub struct FusionGnn {
    config: ModelConfig,
    num_features: usize,
    num_classes: usize,
    store: ParamStore,
    layers: Vec<LayerIds>,
    head_w: ParamId,
    head_b: ParamId,
    label_embedding: ParamId,
    time_mlp: Option<TimeMlpIds>,
}

/// The diffusion denoiser.
pub type DenoiserParams = FusionGnn;

/// Values recorded by one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardVars {
    pub logits: Var,
    /// Per-layer gate activations (absent for the open-gate network).
    pub gates: Vec<Var>,
}

impl FusionGnn {
    /// A time-gated denoiser with fresh He-scaled weights.
    pub fn denoiser(config: ModelConfig, num_features: usize, num_classes: usize, rng: &mut StreamRng) -> Result<Self> {
        Self::build(config, num_features, num_classes, true, rng)
    }

    /// The open-gate network used by the label-trick and vanilla GNN baselines.
    pub fn label_trick(
        config: ModelConfig,
        num_features: usize,
        num_classes: usize,
        rng: &mut StreamRng,
    ) -> Result<Self> {
        Self::build(config, num_features, num_classes, false, rng)
    }

    fn build(
        config: ModelConfig,
        num_features: usize,
        num_classes: usize,
        timed: bool,
        rng: &mut StreamRng,
    ) -> Result<Self> {
        if config.layers == 0 || config.hidden_dim == 0 {
            return Err(Error::Config(
                "model needs at least one layer and a positive hidden_dim".into(),
            ));
        }
        if num_classes == 0 {
            return Err(Error::Config("model needs at least one class".into()));
        }
        if !(0.0..1.0).contains(&config.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", config.dropout)));
        }
        if timed && (config.time_dim == 0 || !config.time_dim.is_multiple_of(2)) {
            return Err(Error::Config(format!(
                "time_dim {} must be even and positive",
                config.time_dim
            )));
        }
        let h = config.hidden_dim;
        let mut store = ParamStore::new();
        // Shared part first: open-gate and gated variants initialize it identically.
        let mut layers = Vec::with_capacity(config.layers);
        for k in 0..config.layers {
            let input = if k == 0 { num_features } else { h };
            layers.push(LayerIds {
                feat_w: store.add_he(format!("layer{k}.feat_w"), input, h, rng),
                feat_b: store.add_zeros(format!("layer{k}.feat_b"), 1, h),
                fuse_w: store.add_he(format!("layer{k}.fuse_w"), h, h, rng),
                fuse_b: store.add_zeros(format!("layer{k}.fuse_b"), 1, h),
                gate: None,
            });
        }
        let head_w = store.add_normal("head.w", h, num_classes, HEAD_INIT_STD, rng);
        let head_b = store.add_zeros("head.b", 1, num_classes);
        let label_embedding = store.add_he("label_embedding", num_classes, h, rng);

        let time_mlp = if timed {
            let td = config.time_dim;
            let ids = TimeMlpIds {
                w1: store.add_he("time.w1", td, h, rng),
                b1: store.add_zeros("time.b1", 1, h),
                w2: store.add_he("time.w2", h, h, rng),
                b2: store.add_zeros("time.b2", 1, h),
            };
            for (k, layer) in layers.iter_mut().enumerate() {
                layer.gate = Some(GateIds {
                    time_w: store.add_he(format!("layer{k}.gate_time_w"), h, h, rng),
                    label_w: store.add_he(format!("layer{k}.gate_label_w"), h, h, rng),
                    bias: store.add_zeros(format!("layer{k}.gate_b"), 1, h),
                });
            }
            Some(ids)
        } else {
            None
        };

        Ok(Self {
            config,
            num_features,
            num_classes,
            store,
            layers,
            head_w,
            head_b,
            label_embedding,
            time_mlp,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn num_features(&self) -> usize {
        self.num_features
    }

    pub fn is_time_aware(&self) -> bool {
        self.time_mlp.is_some()
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    fn check_graph(&self, g: &GraphBundle, adj: &NormalizedAdjacency, labels_in: &[Option<ClassId>]) -> Result<()> {
        let n = g.num_nodes();
        if g.num_features() != self.num_features || g.num_classes() != self.num_classes {
            return Err(Error::shape(
                "fusion gnn",
                format!(
                    "model built for d={} C={}, graph has d={} C={}",
                    self.num_features,
                    self.num_classes,
                    g.num_features(),
                    g.num_classes()
                ),
            ));
        }
        if adj.matrix().rows() != n || labels_in.len() != n {
            return Err(Error::shape(
                "fusion gnn",
                "adjacency or label count differs from node count",
            ));
        }
        if let Some(c) = labels_in.iter().flatten().find(|&&c| c >= self.num_classes) {
            return Err(Error::InvalidArgument(format!("input label {c} out of range")));
        }
        Ok(())
    }

    /// Records an evaluation-mode forward pass. `t` must be given for the
    /// time-gated network and is ignored by the open-gate one.
    pub fn forward(
        &self,
        tape: &mut Tape,
        g: &GraphBundle,
        adj: &NormalizedAdjacency,
        labels_in: &[Option<ClassId>],
        t: Option<usize>,
    ) -> Result<ForwardVars> {
        self.forward_with(tape, g, adj, labels_in, t, None)
    }

    /// Training-mode forward pass: hidden representations are dropped out
    /// with masks drawn from `rng`.
    pub fn forward_train(
        &self,
        tape: &mut Tape,
        g: &GraphBundle,
        adj: &NormalizedAdjacency,
        labels_in: &[Option<ClassId>],
        t: Option<usize>,
        rng: &mut StreamRng,
    ) -> Result<ForwardVars> {
        self.forward_with(tape, g, adj, labels_in, t, Some(rng))
    }

    fn forward_with(
        &self,
        tape: &mut Tape,
        g: &GraphBundle,
        adj: &NormalizedAdjacency,
        labels_in: &[Option<ClassId>],
        t: Option<usize>,
        mut dropout_rng: Option<&mut StreamRng>,
    ) -> Result<ForwardVars> {
        self.check_graph(g, adj, labels_in)?;
        let n = g.num_nodes();
        let ids: Arc<[Option<usize>]> = labels_in.into();
        let store = &self.store;

        let emb = tape.param(store, self.label_embedding);
        let label_rows = tape.gather_rows(emb, ids.clone())?;

        let time_repr = match (&self.time_mlp, t) {
            (Some(mlp), Some(t)) => {
                let enc = tape.constant(Tensor2::row_vector(time_encoding(t, self.config.time_dim)?));
                let (w1, b1, w2, b2) = (
                    tape.param(store, mlp.w1),
                    tape.param(store, mlp.b1),
                    tape.param(store, mlp.w2),
                    tape.param(store, mlp.b2),
                );
                let hidden = tape.affine(enc, w1, b1)?;
                let hidden = tape.relu(hidden);
                Some(tape.affine(hidden, w2, b2)?)
            }
            (Some(_), None) => return Err(Error::InvalidArgument("time-aware model needs a timestep".into())),
            (None, _) => None,
        };

        let features = g.feature_matrix();
        let mut x: Option<Var> = None;
        let mut gates = Vec::new();
        for (k, layer) in self.layers.iter().enumerate() {
            let (fw, fb) = (tape.param(store, layer.feat_w), tape.param(store, layer.feat_b));
            let projected = match x {
                None => tape.sparse_matmul(&features, fw)?,
                Some(prev) => {
                    let prev = match dropout_rng.as_deref_mut() {
                        Some(rng) if self.config.dropout > 0.0 => self.dropout(tape, prev, rng)?,
                        _ => prev,
                    };
                    tape.matmul(prev, fw)?
                }
            };
            let x_tilde = tape.add_row(projected, fb)?;

            let fused_labels = match (&layer.gate, time_repr) {
                (Some(gate), Some(tau)) => {
                    let (tw, lw, gb) = (
                        tape.param(store, gate.time_w),
                        tape.param(store, gate.label_w),
                        tape.param(store, gate.bias),
                    );
                    // affine(concat(τ, Ỹ_i)) split into its time and label blocks;
                    // Ỹ_i·W_gl = onehot_i·(E·W_gl).
                    let time_part = tape.matmul(tau, tw)?;
                    let time_part = tape.broadcast_rows(time_part, n)?;
                    let label_table = tape.matmul(emb, lw)?;
                    let label_part = tape.gather_rows(label_table, ids.clone())?;
                    let pre = tape.add(time_part, label_part)?;
                    let pre = tape.add_row(pre, gb)?;
                    let gamma = tape.sigmoid(pre);
                    gates.push(gamma);
                    tape.mul(gamma, label_rows)?
                }
                _ => label_rows,
            };
            let h_tilde = tape.add(x_tilde, fused_labels)?;

            let (hw, hb) = (tape.param(store, layer.fuse_w), tape.param(store, layer.fuse_b));
            let transformed = tape.affine(h_tilde, hw, hb)?;
            let mut out = tape.sparse_propagate(adj, transformed)?;
            if k + 1 < self.layers.len() {
                out = tape.relu(out);
            }
            if !tape.value(out).is_finite() {
                return Err(Error::NonFinite(format!("activation of layer {k}")));
            }
            x = Some(out);
        }
        let (hw, hb) = (tape.param(store, self.head_w), tape.param(store, self.head_b));
        let logits = tape.affine(x.expect("at least one layer"), hw, hb)?;
        if !tape.value(logits).is_finite() {
            return Err(Error::NonFinite("output logits".into()));
        }
        Ok(ForwardVars { logits, gates })
    }

    fn dropout(&self, tape: &mut Tape, x: Var, rng: &mut StreamRng) -> Result<Var> {
        let keep = 1.0 - self.config.dropout;
        let (rows, cols) = tape.value(x).shape();
        let mask = Tensor2::from_fn(
            rows,
            cols,
            |_, _| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 },
        );
        let mask = tape.constant(mask);
        tape.mul(x, mask)
    }

    /// Denoiser logits for state `yt` (before the forced copy).
    pub fn denoise_logits(
        &self,
        tape: &mut Tape,
        g: &GraphBundle,
        adj: &NormalizedAdjacency,
        yt: &LabelState,
    ) -> Result<Var> {
        if !self.is_time_aware() {
            return Err(Error::InvalidArgument("denoising needs a time-aware model".into()));
        }
        Ok(self.forward(tape, g, adj, &yt.labels, Some(yt.t))?.logits)
    }
}

/// Predicted clean-label distribution for every node. Rows of already
/// denoised nodes are the exact one-hot of their current label.
pub fn denoise_predict(
    params: &DenoiserParams,
    g: &GraphBundle,
    adj: &NormalizedAdjacency,
    yt: &LabelState,
) -> Result<Tensor2> {
    if yt.t == 0 {
        return Err(Error::InvalidArgument("denoising needs t >= 1".into()));
    }
    let mut tape = Tape::new();
    let logits = params.denoise_logits(&mut tape, g, adj, yt)?;
    let mut probs = tape.value(logits).softmax_rows();
    apply_forced_copy(&mut probs, &yt.labels);
    Ok(probs)
}

/// Overwrites rows of denoised nodes with their one-hot label.
pub fn apply_forced_copy(probs: &mut Tensor2, labels: &[Option<ClassId>]) {
    for (i, l) in labels.iter().enumerate() {
        if let Some(c) = *l {
            let row = probs.row_mut(i);
            row.fill(0.0);
            row[c] = 1.0;
        }
    }
}

/// Anything that maps a noisy label state to per-node clean-label distributions.
pub trait CleanPredictor {
    fn predict_clean(&self, state: &LabelState) -> Result<Tensor2>;
}

/// A denoiser bound to its graph.
#[derive(Debug, Clone, Copy)]
pub struct BoundDenoiser<'a> {
    pub params: &'a DenoiserParams,
    pub graph: &'a GraphBundle,
    pub adj: &'a NormalizedAdjacency,
}

impl CleanPredictor for BoundDenoiser<'_> {
    fn predict_clean(&self, state: &LabelState) -> Result<Tensor2> {
        denoise_predict(self.params, self.graph, self.adj, state)
    }
}

/// A network that predicts every node's class from features plus a partial
/// label input (zero rows for unknown labels).
pub trait LabelConditionedModel {
    fn store(&self) -> &ParamStore;
    fn conditioned_logits(
        &self,
        tape: &mut Tape,
        g: &GraphBundle,
        adj: &NormalizedAdjacency,
        labels_in: &[Option<ClassId>],
    ) -> Result<Var>;
}

impl LabelConditionedModel for FusionGnn {
    fn store(&self) -> &ParamStore {
        &self.store
    }

    fn conditioned_logits(
        &self,
        tape: &mut Tape,
        g: &GraphBundle,
        adj: &NormalizedAdjacency,
        labels_in: &[Option<ClassId>],
    ) -> Result<Var> {
        if self.is_time_aware() {
            return Err(Error::InvalidArgument(
                "time-aware model needs a timestep; use DenoiserAt".into(),
            ));
        }
        Ok(self.forward(tape, g, adj, labels_in, None)?.logits)
    }
}

/// The denoiser with its timestep fixed, viewed as a label-conditioned GNN.
#[derive(Debug, Clone, Copy)]
pub struct DenoiserAt<'a> {
    pub params: &'a DenoiserParams,
    pub t: usize,
}

impl LabelConditionedModel for DenoiserAt<'_> {
    fn store(&self) -> &ParamStore {
        &self.params.store
    }

    fn conditioned_logits(
        &self,
        tape: &mut Tape,
        g: &GraphBundle,
        adj: &NormalizedAdjacency,
        labels_in: &[Option<ClassId>],
    ) -> Result<Var> {
        Ok(self.params.forward(tape, g, adj, labels_in, Some(self.t))?.logits)
    }
}
