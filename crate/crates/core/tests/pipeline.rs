use std::path::Path;

use redisc_core::denoiser::{denoise_predict, ModelConfig};
use redisc_core::em::{em_train, predict, TrainConfig};
use redisc_core::experiment::{run_experiment, write_report, ExperimentConfig, Method};
use redisc_core::graph::{generate_sbm, make_paper_split, normalize_adjacency, GraphBundle, SbmSpec};
use redisc_core::metrics::node_accuracy;
use redisc_core::nn::ParamStore;
use redisc_core::schedule::LabelState;

fn separable_graph() -> GraphBundle {
    let g = generate_sbm(&SbmSpec {
        n_per_class: 30,
        num_classes: 3,
        p_in: 0.15,
        p_out: 0.01,
        feat_dim: 6,
        feat_noise: 0.4,
        seed: 11,
    })
    .unwrap();
    let split = make_paper_split(&g, 5, 5, 11).unwrap();
    g.with_splits(split).unwrap()
}

fn small_config() -> TrainConfig {
    TrainConfig {
        horizon: 10,
        queue_size: 8,
        em_rounds: 30,
        warmup_epochs: 60,
        eval_samples: 3,
        seed: 5,
        ..TrainConfig::default()
    }
    .with_model(ModelConfig {
        hidden_dim: 16,
        layers: 2,
        time_dim: 16,
        dropout: 0.5,
    })
}

#[test]
fn training_is_deterministic_and_accurate_on_separable_blocks() {
    let g = separable_graph();
    let adj = normalize_adjacency(&g);
    let cfg = small_config();
    let a = em_train(&g, &adj, &cfg).unwrap();
    let b = em_train(&g, &adj, &cfg).unwrap();
    assert_eq!(a.report.rounds.len(), 30);
    assert_eq!(a.report.best_round, b.report.best_round);
    assert_eq!(
        a.denoiser.store().to_checkpoint_bytes(),
        b.denoiser.store().to_checkpoint_bytes()
    );

    let sched = cfg.schedule().unwrap();
    let p = predict(
        &a.denoiser,
        &g,
        &adj,
        &sched,
        &g.observed_labels(),
        cfg.eval_samples,
        cfg.seed,
    )
    .unwrap();
    assert_eq!(p.samples.len(), 3);
    let acc = node_accuracy(&p.classes, g.labels(), &g.splits().test).unwrap();
    assert!(acc > 0.8, "test accuracy {acc}");
}

#[test]
fn checkpoint_round_trip_preserves_predictions() {
    let g = separable_graph();
    let adj = normalize_adjacency(&g);
    let cfg = TrainConfig {
        em_rounds: 3,
        ..small_config()
    };
    let run = em_train(&g, &adj, &cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("denoiser.ckpt");
    run.denoiser.store().save(&path).unwrap();

    let mut restored = run.denoiser.clone();
    restored
        .store_mut()
        .load_values_from(&ParamStore::load(&path).unwrap())
        .unwrap();
    let state = LabelState::all_sink(g.num_nodes(), cfg.horizon);
    assert_eq!(
        denoise_predict(&run.denoiser, &g, &adj, &state).unwrap(),
        denoise_predict(&restored, &g, &adj, &state).unwrap()
    );
}

#[test]
fn experiment_runner_writes_reports() {
    let cfg: ExperimentConfig = serde_json::from_value(serde_json::json!({
        "data": { "sbm": { "n_per_class": 20, "num_classes": 2, "p_in": 0.2, "p_out": 0.02,
                           "feat_dim": 4, "feat_noise": 0.5, "seed": 1 } },
        "split": { "train_per_class": 4, "val_per_class": 4 },
        "seeds": [0, 1],
        "methods": ["lp", "gnn", "gnn-lp", "redisc"],
        "settings": {
            "train": { "T": 5, "S": 4, "em_rounds": 5, "warmup_epochs": 20, "eval_samples": 2,
                       "hidden_dim": 8, "time_dim": 8 },
            "gnn": { "epochs": 20 }
        }
    }))
    .unwrap();
    let report = run_experiment(&cfg, Path::new(".")).unwrap();
    assert_eq!(report.runs.len(), 8);
    for m in [Method::Lp, Method::Gnn, Method::GnnLp, Method::Redisc] {
        let s = report.summary_for(m).unwrap();
        assert_eq!(s.seeds, 2);
        assert!(s.subgraph_accuracy_mean <= s.node_accuracy_mean);
    }
    let dir = tempfile::tempdir().unwrap();
    write_report(&report, dir.path()).unwrap();
    let csv = std::fs::read_to_string(dir.path().join("results.csv")).unwrap();
    assert!(csv.starts_with("seed,method,node_acc,subgraph_acc\n"));
    assert_eq!(csv.lines().count(), 9);
    let json: serde_json::Value =
        serde_json::from_slice(&std::fs::read(dir.path().join("metrics.json")).unwrap()).unwrap();
    assert_eq!(json["runs"].as_array().unwrap().len(), 8);
}

#[test]
fn unknown_config_keys_are_rejected() {
    let err = serde_json::from_value::<TrainConfig>(serde_json::json!({ "T": 10, "epochs": 3 })).unwrap_err();
    assert!(err.to_string().contains("epochs"));
    let err = serde_json::from_value::<ExperimentConfig>(serde_json::json!({
        "data": { "bundle": "x" }, "seeds": [0], "methods": ["lp"], "train": {}
    }))
    .unwrap_err();
    assert!(err.to_string().contains("train"));
}
