//! Multi-seed experiment orchestration and report files.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines::{
    label_spread, predict_independent, train_label_trick, train_vanilla_gnn, GnnTrainConfig, LpConfig,
};
use crate::em::{em_train, predict, TrainConfig};
use crate::error::{Error, Result};
use crate::graph::{
    generate_label_pairs, generate_sbm, load_bundle, make_paper_split, normalize_adjacency, ClassId, GraphBundle,
    NormalizedAdjacency, SbmSpec,
};
use crate::metrics::{mean_std, node_accuracy, subgraph_accuracy};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Redisc,
    Gnn,
    GnnLp,
    Lp,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Redisc => "redisc",
            Method::Gnn => "gnn",
            Method::GnnLp => "gnn-lp",
            Method::Lp => "lp",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PairSpec {
    pub num_pairs: usize,
    pub train_pairs: usize,
    pub val_pairs: usize,
    pub seed: u64,
}

/// Where the graph comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    /// A bundle directory, relative to the config file when not absolute.
    Bundle(PathBuf),
    Sbm(SbmSpec),
    Pairs(PairSpec),
}

impl DataSource {
    pub fn load(&self, base_dir: &Path) -> Result<GraphBundle> {
        match self {
            DataSource::Bundle(p) => load_bundle(base_dir.join(p)),
            DataSource::Sbm(spec) => generate_sbm(spec),
            DataSource::Pairs(s) => generate_label_pairs(s.num_pairs, s.train_pairs, s.val_pairs, s.seed),
        }
    }
}

/// Per-class split sizes, resampled for every seed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitProtocol {
    pub train_per_class: usize,
    pub val_per_class: usize,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SubgraphScope {
    #[default]
    Test,
    /// Every node with a ground-truth label.
    All,
}

/// Hyperparameters of every method.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MethodSettings {
    pub train: TrainConfig,
    pub gnn: GnnTrainConfig,
    pub lambda_in: f64,
    pub lp: LpConfig,
}

impl Default for MethodSettings {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            gnn: GnnTrainConfig::default(),
            lambda_in: 0.5,
            lp: LpConfig::default(),
        }
    }
}

/// Candidate values searched per seed; the combination with the best
/// validation accuracy is reported. Empty lists keep the configured value.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Grid {
    pub lr: Vec<f64>,
    pub weight_decay: Vec<f64>,
    pub tau: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub data: DataSource,
    #[serde(default)]
    pub split: Option<SplitProtocol>,
    pub seeds: Vec<u64>,
    pub methods: Vec<Method>,
    /// Method hyperparameters: keys `train`, `gnn`, `lambda_in`, `lp`.
    #[serde(default)]
    pub settings: MethodSettings,
    #[serde(default)]
    pub grid: Option<Grid>,
    #[serde(default)]
    pub subgraph_scope: SubgraphScope,
}

impl ExperimentConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Hyperparameters {
    pub lr: f64,
    pub weight_decay: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tau: Option<f64>,
}

/// Predictions of one method on one graph.
#[derive(Debug, Clone, PartialEq)]
pub struct MethodOutput {
    pub predictions: Vec<ClassId>,
    /// Validation accuracy of `predictions` (0 without validation nodes).
    pub val_accuracy: f64,
    pub hyperparameters: Option<Hyperparameters>,
}

fn val_accuracy(g: &GraphBundle, pred: &[ClassId]) -> Result<f64> {
    if g.splits().val.is_empty() {
        Ok(0.0)
    } else {
        node_accuracy(pred, g.labels(), &g.splits().val)
    }
}

/// Trains (where applicable) and predicts with one method.
pub fn run_method(
    method: Method,
    g: &GraphBundle,
    adj: &NormalizedAdjacency,
    settings: &MethodSettings,
    seed: u64,
) -> Result<MethodOutput> {
    let predictions = match method {
        Method::Redisc => {
            let cfg = TrainConfig {
                seed,
                ..settings.train.clone()
            };
            let run = em_train(g, adj, &cfg)?;
            let sched = cfg.schedule()?;
            predict(
                &run.denoiser,
                g,
                adj,
                &sched,
                &g.observed_labels(),
                cfg.eval_samples,
                seed,
            )?
            .classes
        }
        Method::Gnn | Method::GnnLp => {
            let run = if method == Method::Gnn {
                train_vanilla_gnn(g, adj, settings.train.model(), &settings.gnn, seed)?
            } else {
                train_label_trick(g, adj, settings.train.model(), &settings.gnn, settings.lambda_in, seed)?
            };
            predict_independent(&run.model, g, adj, &run.inference_input(g))?.0
        }
        Method::Lp => label_spread(g.adjacency(), g.num_classes(), &g.observed_labels(), &settings.lp)?.predictions(),
    };
    let hyperparameters = match method {
        Method::Redisc => Some(Hyperparameters {
            lr: settings.train.lr,
            weight_decay: settings.train.weight_decay,
            tau: Some(settings.train.tau),
        }),
        Method::Gnn | Method::GnnLp => Some(Hyperparameters {
            lr: settings.gnn.lr,
            weight_decay: settings.gnn.weight_decay,
            tau: None,
        }),
        Method::Lp => None,
    };
    Ok(MethodOutput {
        val_accuracy: val_accuracy(g, &predictions)?,
        predictions,
        hyperparameters,
    })
}

fn candidates(method: Method, settings: &MethodSettings, grid: Option<&Grid>) -> Vec<MethodSettings> {
    let Some(grid) = grid else {
        return vec![settings.clone()];
    };
    let or = |v: &Vec<f64>, d: f64| if v.is_empty() { vec![d] } else { v.clone() };
    let mut out = Vec::new();
    match method {
        Method::Redisc => {
            for &lr in &or(&grid.lr, settings.train.lr) {
                for &wd in &or(&grid.weight_decay, settings.train.weight_decay) {
                    for &tau in &or(&grid.tau, settings.train.tau) {
                        let mut s = settings.clone();
                        s.train.lr = lr;
                        s.train.weight_decay = wd;
                        s.train.tau = tau;
                        out.push(s);
                    }
                }
            }
        }
        Method::Gnn | Method::GnnLp => {
            for &lr in &or(&grid.lr, settings.gnn.lr) {
                for &wd in &or(&grid.weight_decay, settings.gnn.weight_decay) {
                    let mut s = settings.clone();
                    s.gnn.lr = lr;
                    s.gnn.weight_decay = wd;
                    out.push(s);
                }
            }
        }
        Method::Lp => out.push(settings.clone()),
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunResult {
    pub seed: u64,
    pub method: Method,
    pub node_accuracy: f64,
    pub subgraph_accuracy: f64,
    pub val_accuracy: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub hyperparameters: Option<Hyperparameters>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MethodSummary {
    pub method: Method,
    pub seeds: usize,
    pub node_accuracy_mean: f64,
    pub node_accuracy_std: f64,
    pub subgraph_accuracy_mean: f64,
    pub subgraph_accuracy_std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentReport {
    pub runs: Vec<RunResult>,
    pub summary: Vec<MethodSummary>,
}

impl ExperimentReport {
    pub fn summary_for(&self, method: Method) -> Option<&MethodSummary> {
        self.summary.iter().find(|s| s.method == method)
    }
}

/// Graph for one seed: the split protocol (if any) is resampled with `seed`.
pub fn seed_graph(base: &GraphBundle, split: Option<SplitProtocol>, seed: u64) -> Result<GraphBundle> {
    match split {
        Some(p) => {
            let spec = make_paper_split(base, p.train_per_class, p.val_per_class, seed)?;
            base.clone().with_splits(spec)
        }
        None if base.splits().train.is_empty() => Err(Error::Config(
            "graph has no training split and the config gives no split protocol".into(),
        )),
        None => Ok(base.clone()),
    }
}

fn run_seed(cfg: &ExperimentConfig, base: &GraphBundle, seed: u64) -> Result<Vec<RunResult>> {
    let g = seed_graph(base, cfg.split, seed).map_err(|e| e.in_stage(format!("split (seed {seed})")))?;
    if g.splits().test.is_empty() {
        return Err(Error::Config("test split is empty".into()).in_stage(format!("split (seed {seed})")));
    }
    let adj = normalize_adjacency(&g);
    let scope: Vec<u32> = match cfg.subgraph_scope {
        SubgraphScope::Test => g.splits().test.clone(),
        SubgraphScope::All => (0..g.num_nodes() as u32)
            .filter(|&i| g.labels()[i as usize].is_some())
            .collect(),
    };
    let mut out = Vec::with_capacity(cfg.methods.len());
    for &method in &cfg.methods {
        let stage = || format!("{} (seed {seed})", method.name());
        let mut best: Option<MethodOutput> = None;
        for settings in candidates(method, &cfg.settings, cfg.grid.as_ref()) {
            let result = run_method(method, &g, &adj, &settings, seed).map_err(|e| e.in_stage(stage()))?;
            if best.as_ref().is_none_or(|b| result.val_accuracy > b.val_accuracy) {
                best = Some(result);
            }
        }
        let best = best.expect("at least one candidate");
        out.push(RunResult {
            seed,
            method,
            node_accuracy: node_accuracy(&best.predictions, g.labels(), &g.splits().test)
                .map_err(|e| e.in_stage(stage()))?,
            subgraph_accuracy: subgraph_accuracy(&best.predictions, g.labels(), g.adjacency(), &scope)
                .map_err(|e| e.in_stage(stage()))?,
            val_accuracy: best.val_accuracy,
            hyperparameters: best.hyperparameters,
        });
    }
    Ok(out)
}

/// Runs every method on every seed (seeds in parallel) and summarizes.
pub fn run_experiment(cfg: &ExperimentConfig, base_dir: &Path) -> Result<ExperimentReport> {
    if cfg.seeds.is_empty() || cfg.methods.is_empty() {
        return Err(Error::Config("seeds and methods must be non-empty".into()));
    }
    cfg.settings.train.validate()?;
    let base = cfg.data.load(base_dir).map_err(|e| e.in_stage("load data"))?;
    let per_seed = cfg
        .seeds
        .par_iter()
        .map(|&seed| run_seed(cfg, &base, seed))
        .collect::<Result<Vec<_>>>()?;
    let runs: Vec<RunResult> = per_seed.into_iter().flatten().collect();
    let summary = cfg
        .methods
        .iter()
        .map(|&method| {
            let node: Vec<f64> = runs
                .iter()
                .filter(|r| r.method == method)
                .map(|r| r.node_accuracy)
                .collect();
            let sub: Vec<f64> = runs
                .iter()
                .filter(|r| r.method == method)
                .map(|r| r.subgraph_accuracy)
                .collect();
            let (nm, ns) = mean_std(&node);
            let (sm, ss) = mean_std(&sub);
            MethodSummary {
                method,
                seeds: node.len(),
                node_accuracy_mean: nm,
                node_accuracy_std: ns,
                subgraph_accuracy_mean: sm,
                subgraph_accuracy_std: ss,
            }
        })
        .collect();
    Ok(ExperimentReport { runs, summary })
}

/// Loads the config at `path` and runs it with paths relative to its directory.
pub fn run_experiment_file(path: &Path) -> Result<ExperimentReport> {
    let cfg = ExperimentConfig::from_file(path)?;
    run_experiment(&cfg, path.parent().unwrap_or(Path::new(".")))
}

/// CSV of `(seed, method, node_acc, subgraph_acc)`.
pub fn report_csv(report: &ExperimentReport) -> String {
    let mut s = String::from("seed,method,node_acc,subgraph_acc\n");
    for r in &report.runs {
        writeln!(
            s,
            "{},{},{},{}",
            r.seed,
            r.method.name(),
            r.node_accuracy,
            r.subgraph_accuracy
        )
        .expect("write to string");
    }
    s
}

/// Writes `metrics.json` and `results.csv` into `out_dir`.
pub fn write_report(report: &ExperimentReport, out_dir: &Path) -> Result<()> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let json = serde_json::to_string_pretty(report).map_err(|e| Error::Invariant(e.to_string()))? + "\n";
    let metrics = out_dir.join("metrics.json");
    fs::write(&metrics, json).map_err(|e| Error::io(&metrics, e))?;
    let csv = out_dir.join("results.csv");
    fs::write(&csv, report_csv(report)).map_err(|e| Error::io(&csv, e))
}
