//! `redisc` command-line interface.
//!
//! Exit codes: 0 on success, 2 on configuration errors, 3 on runtime failures.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context};
use clap::{Parser, Subcommand, ValueEnum};
use redisc_core::denoiser::{BoundDenoiser, FusionGnn};
use redisc_core::em::{em_train, predict, TrainConfig};
use redisc_core::experiment::{
    report_csv, run_experiment, run_method, seed_graph, write_report, DataSource, ExperimentConfig, Method,
    MethodSettings, SplitProtocol,
};
use redisc_core::graph::{load_bundle, normalize_adjacency, save_bundle, ClassId, GraphBundle};
use redisc_core::metrics::{node_accuracy, subgraph_accuracy};
use redisc_core::nn::ParamStore;
use redisc_core::rng::{stream, Stream};
use redisc_core::sampler::{sample_conditional_labeled_first, sample_unconditional};
use serde::de::DeserializeOwned;
use serde::Deserialize;
use serde_json::json;

#[derive(Parser, Debug)]
#[command(name = "redisc", version, about = "Masked label diffusion for node classification")]
struct Cli {
    /// Graph bundle directory
    #[arg(long, global = true)]
    data: Option<PathBuf>,

    /// JSON configuration file
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Output directory
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Master seed (overrides the config)
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Comma-separated seed list for `report` (overrides the config)
    #[arg(long, global = true, value_delimiter = ',')]
    seeds: Vec<u64>,

    /// Worker threads (default: all cores)
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train the diffusion model with variational EM
    Train,
    /// Draw one sample from a trained denoiser
    Sample {
        /// Denoiser checkpoint written by `train`
        #[arg(long)]
        checkpoint: PathBuf,
        /// Ignore the observed labels
        #[arg(long)]
        unconditional: bool,
    },
    /// Score a predictions CSV against the bundle labels
    Eval {
        /// CSV with header `node_id,class`
        #[arg(long)]
        predictions: PathBuf,
        /// Node set for subgraph accuracy
        #[arg(long, value_enum, default_value = "test")]
        scope: Scope,
    },
    /// Run a reference method
    Baseline {
        #[arg(long, value_enum)]
        method: BaselineMethod,
    },
    /// Write a synthetic graph bundle
    Synth,
    /// Run a multi-seed experiment and write metrics.json and results.csv
    Report,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Scope {
    Test,
    All,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum BaselineMethod {
    Lp,
    Gnn,
    GnnLp,
}

/// Marks an error as a configuration problem (exit code 2).
#[derive(Debug)]
struct ConfigError(String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

fn config_error(msg: impl Into<String>) -> anyhow::Error {
    ConfigError(msg.into()).into()
}

fn is_config_error(err: &anyhow::Error) -> bool {
    err.chain().any(|c| {
        c.is::<ConfigError>()
            || c.downcast_ref::<redisc_core::Error>()
                .is_some_and(redisc_core::Error::is_config)
    })
}

fn required<'a>(value: &'a Option<PathBuf>, flag: &str) -> anyhow::Result<&'a Path> {
    value
        .as_deref()
        .ok_or_else(|| config_error(format!("--{flag} is required")))
}

fn read_json<T: DeserializeOwned + Default>(path: Option<&Path>) -> anyhow::Result<T> {
    let Some(path) = path else {
        return Ok(T::default());
    };
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).map_err(|e| config_error(format!("{}: {e}", path.display())))
}

fn write_file(dir: &Path, name: &str, contents: impl AsRef<[u8]>) -> anyhow::Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let path = dir.join(name);
    fs::write(&path, contents).with_context(|| format!("writing {}", path.display()))
}

fn write_json(dir: &Path, name: &str, value: &serde_json::Value) -> anyhow::Result<()> {
    write_file(dir, name, serde_json::to_string_pretty(value)? + "\n")
}

fn predictions_csv(pred: &[ClassId]) -> String {
    let mut s = String::from("node_id,class\n");
    for (i, c) in pred.iter().enumerate() {
        writeln!(s, "{i},{c}").expect("write to string");
    }
    s
}

fn parse_predictions(path: &Path, num_nodes: usize) -> anyhow::Result<Vec<ClassId>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some("node_id,class") {
        bail!("{}: expected header `node_id,class`", path.display());
    }
    let mut pred = vec![None; num_nodes];
    for (k, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let (node, class) = line
            .split_once(',')
            .ok_or_else(|| anyhow!("{}: line {} is not `node_id,class`", path.display(), k + 2))?;
        let node: usize = node.trim().parse().with_context(|| format!("line {}", k + 2))?;
        let class: ClassId = class.trim().parse().with_context(|| format!("line {}", k + 2))?;
        *pred
            .get_mut(node)
            .ok_or_else(|| anyhow!("{}: node {node} out of range", path.display()))? = Some(class);
    }
    pred.into_iter()
        .enumerate()
        .map(|(i, p)| p.ok_or_else(|| anyhow!("{}: no prediction for node {i}", path.display())))
        .collect()
}

fn metrics(g: &GraphBundle, pred: &[ClassId], scope: Scope) -> anyhow::Result<serde_json::Value> {
    let truth = g.labels();
    let splits = g.splits();
    let scope_idx: Vec<u32> = match scope {
        Scope::Test => splits.test.clone(),
        Scope::All => (0..g.num_nodes() as u32)
            .filter(|&i| truth[i as usize].is_some())
            .collect(),
    };
    let acc = |idx: &[u32]| -> anyhow::Result<Option<f64>> {
        if idx.is_empty() {
            Ok(None)
        } else {
            Ok(Some(node_accuracy(pred, truth, idx)?))
        }
    };
    let subgraph = if scope_idx.is_empty() {
        None
    } else {
        Some(subgraph_accuracy(pred, truth, g.adjacency(), &scope_idx)?)
    };
    Ok(json!({
        "val_node_accuracy": acc(&splits.val)?,
        "test_node_accuracy": acc(&splits.test)?,
        "subgraph_accuracy": subgraph,
    }))
}

fn load_graph(cli: &Cli) -> anyhow::Result<GraphBundle> {
    let dir = required(&cli.data, "data")?;
    load_bundle(dir).with_context(|| format!("loading bundle {}", dir.display()))
}

fn train_config(cli: &Cli) -> anyhow::Result<TrainConfig> {
    let mut cfg: TrainConfig = read_json(cli.config.as_deref())?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn cmd_train(cli: &Cli) -> anyhow::Result<()> {
    let g = load_graph(cli)?;
    let cfg = train_config(cli)?;
    let out = required(&cli.out, "out")?;
    let adj = normalize_adjacency(&g);
    let run = em_train(&g, &adj, &cfg)?;
    let sched = cfg.schedule()?;
    let prediction = predict(
        &run.denoiser,
        &g,
        &adj,
        &sched,
        &g.observed_labels(),
        cfg.eval_samples,
        cfg.seed,
    )?;
    fs::create_dir_all(out)?;
    run.denoiser.store().save(out.join("denoiser.ckpt"))?;
    write_json(
        out,
        "report.json",
        &json!({
            "config": cfg,
            "run": run.report,
            "metrics": metrics(&g, &prediction.classes, Scope::Test)?,
        }),
    )?;
    write_file(out, "predictions.csv", predictions_csv(&prediction.classes))
}

fn cmd_sample(cli: &Cli, checkpoint: &Path, unconditional: bool) -> anyhow::Result<()> {
    let g = load_graph(cli)?;
    let cfg = train_config(cli)?;
    let out = required(&cli.out, "out")?;
    let adj = normalize_adjacency(&g);
    let mut params = FusionGnn::denoiser(
        cfg.model(),
        g.num_features(),
        g.num_classes(),
        &mut stream(cfg.seed, Stream::Init),
    )?;
    let stored = ParamStore::load(checkpoint)?;
    params
        .store_mut()
        .load_values_from(&stored)
        .map_err(|e| config_error(format!("checkpoint does not match the configured model: {e}")))?;
    let sched = cfg.schedule()?;
    let predictor = BoundDenoiser {
        params: &params,
        graph: &g,
        adj: &adj,
    };
    let mut rng = stream(cfg.seed, Stream::Sample);
    let outcome = if unconditional {
        sample_unconditional(&predictor, g.num_nodes(), &sched, &mut rng)?
    } else {
        sample_conditional_labeled_first(&predictor, &g.observed_labels(), &sched, &mut rng)?
    };
    write_file(out, "labels.csv", predictions_csv(&outcome.classes()))?;
    write_json(
        out,
        "trace.json",
        &json!({ "conditional": !unconditional, "steps": outcome.trace }),
    )
}

fn cmd_eval(cli: &Cli, predictions: &Path, scope: Scope) -> anyhow::Result<()> {
    let g = load_graph(cli)?;
    let pred = parse_predictions(predictions, g.num_nodes())?;
    if let Some(c) = pred.iter().find(|&&c| c >= g.num_classes()) {
        bail!("predicted class {c} out of range");
    }
    let m = metrics(&g, &pred, scope)?;
    println!("{}", serde_json::to_string_pretty(&m)?);
    if let Some(out) = &cli.out {
        write_json(out, "metrics.json", &m)?;
    }
    Ok(())
}

fn cmd_baseline(cli: &Cli, method: BaselineMethod) -> anyhow::Result<()> {
    let g = load_graph(cli)?;
    let settings: MethodSettings = read_json(cli.config.as_deref())?;
    let out = required(&cli.out, "out")?;
    let method = match method {
        BaselineMethod::Lp => Method::Lp,
        BaselineMethod::Gnn => Method::Gnn,
        BaselineMethod::GnnLp => Method::GnnLp,
    };
    let seed = cli.seed.unwrap_or(settings.train.seed);
    let adj = normalize_adjacency(&g);
    let output = run_method(method, &g, &adj, &settings, seed)?;
    write_json(
        out,
        "report.json",
        &json!({
            "method": method,
            "seed": seed,
            "hyperparameters": output.hyperparameters,
            "metrics": metrics(&g, &output.predictions, Scope::Test)?,
        }),
    )?;
    write_file(out, "predictions.csv", predictions_csv(&output.predictions))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct SynthConfig {
    data: DataSource,
    #[serde(default)]
    split: Option<SplitProtocol>,
}

fn cmd_synth(cli: &Cli) -> anyhow::Result<()> {
    let path = required(&cli.config, "config")?;
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let cfg: SynthConfig = serde_json::from_str(&text).map_err(|e| config_error(format!("{}: {e}", path.display())))?;
    let out = required(&cli.out, "out")?;
    let base = cfg.data.load(path.parent().unwrap_or(Path::new(".")))?;
    let g = match cfg.split {
        Some(_) => seed_graph(&base, cfg.split, cli.seed.unwrap_or(0))?,
        None => base,
    };
    save_bundle(&g, out)?;
    println!(
        "{}",
        json!({"num_nodes": g.num_nodes(), "num_edges": g.adjacency().num_edges(), "num_features": g.num_features(), "num_classes": g.num_classes()})
    );
    Ok(())
}

fn cmd_report(cli: &Cli) -> anyhow::Result<()> {
    let path = required(&cli.config, "config")?;
    let out = required(&cli.out, "out")?;
    let mut cfg = ExperimentConfig::from_file(path)?;
    if !cli.seeds.is_empty() {
        cfg.seeds = cli.seeds.clone();
    } else if let Some(seed) = cli.seed {
        cfg.seeds = vec![seed];
    }
    if let Some(data) = &cli.data {
        cfg.data = DataSource::Bundle(std::path::absolute(data)?);
    }
    let report = run_experiment(&cfg, path.parent().unwrap_or(Path::new(".")))?;
    write_report(&report, out)?;
    print!("{}", report_csv(&report));
    Ok(())
}

fn run(cli: &Cli) -> anyhow::Result<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(config_error("--threads must be at least 1"));
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    match &cli.command {
        Command::Train => cmd_train(cli),
        Command::Sample {
            checkpoint,
            unconditional,
        } => cmd_sample(cli, checkpoint, *unconditional),
        Command::Eval { predictions, scope } => cmd_eval(cli, predictions, *scope),
        Command::Baseline { method } => cmd_baseline(cli, *method),
        Command::Synth => cmd_synth(cli),
        Command::Report => cmd_report(cli),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            if is_config_error(&err) {
                ExitCode::from(2)
            } else {
                ExitCode::from(3)
            }
        }
    }
}
