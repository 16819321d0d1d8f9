use vcl_core::analysis;
use vcl_core::mnist::{build_split_tasks, CoresetStore, CoresetTask, PIXELS};
use vcl_core::objective::{evaluate_elbo, HeadBatch};
use vcl_core::trainer::{
    coreset_finetune, evaluate_all_tasks, reinitialise_variational_params, run_experiment,
    run_single, train_task, ExperimentConfig, MetricsTable, TrainOptions,
};
use vcl_core::{
    AdamConfig, BayesianNetwork, Matrix, PosteriorSnapshot, PredictiveMode, RawDataset, SeededRng,
    SnapshotStage,
};

/// Ten "digits", each a bright 4-row band at its own height plus noise.
fn synthetic_digits(per_digit: usize, seed: u64) -> RawDataset<f64> {
    let mut rng = SeededRng::new(seed);
    let n = 10 * per_digit;
    let mut labels: Vec<u8> = (0..n).map(|i| (i % 10) as u8).collect();
    rng.shuffle(&mut labels);
    let images = Matrix::from_fn(n, PIXELS, |r, c| {
        let band = usize::from(labels[r]) * 2 + 4;
        let row = c / 28;
        let base = if (band..band + 4).contains(&row) {
            0.8
        } else {
            0.0
        };
        (base + 0.2 * rng.uniform()).min(1.0)
    });
    RawDataset::new(images, labels).unwrap()
}

fn tiny_config() -> ExperimentConfig {
    ExperimentConfig {
        n_tasks: 3,
        widths: vec![16],
        epochs: 4,
        batch_size: 32,
        n_train_samples: 2,
        n_eval_samples: 10,
        n_runs: 2,
        seed: 5,
        ..ExperimentConfig::preset("split-desk").unwrap()
    }
}

fn opts(epochs: usize) -> TrainOptions {
    TrainOptions {
        epochs,
        batch_size: 32,
        n_train_samples: 2,
        adam: AdamConfig::default(),
    }
}

#[test]
fn presets_follow_the_protocols() {
    let s = ExperimentConfig::preset("split-paper").unwrap();
    assert_eq!(
        (s.widths.clone(), s.epochs, s.batch_size, s.n_runs),
        (vec![200], 600, 256, 10)
    );
    let p = ExperimentConfig::preset("permuted-paper").unwrap();
    assert_eq!(
        (
            p.widths.clone(),
            p.epochs,
            p.batch_size,
            p.n_runs,
            p.n_tasks
        ),
        (vec![100, 100], 800, 1024, 5, 10)
    );
    let d = ExperimentConfig::preset("split-desk").unwrap();
    assert_eq!((d.epochs, d.n_runs), (120, 3));
    let pd = ExperimentConfig::preset("permuted-desk").unwrap();
    assert_eq!((pd.n_tasks, pd.epochs, pd.n_runs), (5, 100, 2));
    assert_eq!((s.init_mean_std, s.init_variance), (0.1, 1e-3));
    assert!(ExperimentConfig::preset("nope").is_err());
}

#[test]
fn config_text_round_trips() {
    let mut cfg = tiny_config();
    cfg.output_dir = Some("/tmp/x".into());
    cfg.lr = 3.3e-4;
    let mut back = ExperimentConfig::preset("permuted-paper").unwrap();
    for line in cfg.to_text().lines() {
        let (k, v) = line.split_once('=').unwrap();
        back.set(k.trim(), v).unwrap();
    }
    assert_eq!(back, cfg);
    assert!(back.set("epocs", "3").is_err());
    assert!(back.set("epochs", "three").is_err());
}

#[test]
fn reinitialisation_touches_body_and_active_head_only() {
    let mut net = BayesianNetwork::<f64>::new(PIXELS, &[200], 2, 2);
    let prior = PosteriorSnapshot::capture(&net, SnapshotStage::Prior);
    let untouched = net.head(0).unwrap().clone();
    let mut rng = SeededRng::new(1);
    reinitialise_variational_params(&mut net, 1, &mut rng, 0.1, 1e-3).unwrap();
    let rho = 1e-3f64.ln();
    for layer in net.body().iter().chain([net.head(1).unwrap()]) {
        for block in layer.blocks() {
            assert!(block.rho.data().iter().all(|&r| r == rho));
        }
    }
    assert!((rho + 6.9078).abs() < 1e-4);
    let mu = net.body()[0].weight.mu.data();
    let n = mu.len() as f64;
    let mean = mu.iter().sum::<f64>() / n;
    let std = (mu.iter().map(|m| (m - mean).powi(2)).sum::<f64>() / n).sqrt();
    assert!(
        mean.abs() < 2e-3 && (std - 0.1).abs() < 2e-3,
        "{mean} {std}"
    );
    assert_eq!(net.head(0).unwrap(), &untouched);
    assert_ne!(
        PosteriorSnapshot::capture(&net, SnapshotStage::Prior),
        prior
    );
    assert_eq!(prior, PosteriorSnapshot::standard_prior(&net));
}

#[test]
fn objective_after_reinit_is_finite_with_positive_kl() {
    let raw = synthetic_digits(20, 2);
    let tasks = build_split_tasks(&raw, &raw);
    let mut net = BayesianNetwork::<f64>::new(PIXELS, &[16], 2, 1);
    let prior = PosteriorSnapshot::standard_prior(&net);
    reinitialise_variational_params(&mut net, 0, &mut SeededRng::new(3), 0.1, 1e-3).unwrap();
    let x = tasks[0].train.inputs();
    let y = tasks[0].train.targets().to_vec();
    let e = evaluate_elbo(
        &net,
        &prior,
        &[HeadBatch::new(0, &x, &y)],
        x.rows(),
        4,
        &mut SeededRng::new(4),
    )
    .unwrap();
    assert!(e.elbo.is_finite());
    assert!(e.kl_total > 0.0);
}

#[test]
fn training_learns_a_separable_task() {
    let train = synthetic_digits(40, 6);
    let test = synthetic_digits(20, 7);
    let tasks = build_split_tasks(&train, &test);
    let mut net = BayesianNetwork::<f64>::new(PIXELS, &[16], 2, 1);
    let prior = PosteriorSnapshot::standard_prior(&net);
    let mut rng = SeededRng::new(8);
    reinitialise_variational_params(&mut net, 0, &mut rng, 0.1, 1e-3).unwrap();
    let snap = train_task(&mut net, &prior, &tasks[0], &opts(20), &mut rng).unwrap();
    assert_eq!(snap.stage(), SnapshotStage::AfterTask(1));
    assert_eq!(
        snap,
        PosteriorSnapshot::capture(&net, SnapshotStage::AfterTask(1))
    );
    let acc =
        evaluate_all_tasks(&net, &tasks[..1], 20, &mut rng, PredictiveMode::MonteCarlo).unwrap();
    assert!(acc[0] >= 0.95, "{acc:?}");
}

#[test]
fn uniform_predictive_scores_chance() {
    let raw = synthetic_digits(100, 9);
    let tasks = build_split_tasks(&raw, &raw);
    let mut net = BayesianNetwork::<f64>::new(PIXELS, &[8], 2, 5);
    // Zero-mean, zero-variance heads give identical logits for both classes.
    for h in 0..5 {
        let head = net.head_mut(h).unwrap();
        head.weight.rho.map_inplace(|_| -1e4);
        head.bias.rho.map_inplace(|_| -1e4);
    }
    let acc = evaluate_all_tasks(
        &net,
        &tasks,
        5,
        &mut SeededRng::new(1),
        PredictiveMode::MonteCarlo,
    )
    .unwrap();
    for a in acc {
        // Ties resolve to class 0, which is half of each balanced task.
        assert!((a - 0.5).abs() < 0.12, "{a}");
    }
}

#[test]
fn coreset_finetune_works_on_a_copy() {
    let raw = synthetic_digits(30, 10);
    let tasks = build_split_tasks(&raw, &raw);
    let mut net = BayesianNetwork::<f64>::new(PIXELS, &[8], 2, 2);
    let mut rng = SeededRng::new(11);
    reinitialise_variational_params(&mut net, 0, &mut rng, 0.1, 1e-3).unwrap();
    reinitialise_variational_params(&mut net, 1, &mut rng, 0.1, 1e-3).unwrap();
    let posterior = PosteriorSnapshot::capture(&net, SnapshotStage::AfterTask(2));

    let empty = CoresetStore::new(0);
    let same = coreset_finetune(&net, &posterior, &empty, &opts(3), &mut rng).unwrap();
    assert_eq!(same, net);

    assert!(coreset_finetune(&net, &posterior, &CoresetStore::new(5), &opts(3), &mut rng).is_err());

    let mut store = CoresetStore::new(5);
    for (i, t) in tasks[..2].iter().enumerate() {
        store.push(CoresetTask {
            task_index: i + 1,
            head_id: i,
            examples: t.train.subset(&[0, 1, 2, 3, 4]),
        });
    }
    let tuned = coreset_finetune(&net, &posterior, &store, &opts(3), &mut rng).unwrap();
    assert_eq!(
        PosteriorSnapshot::capture(&net, SnapshotStage::AfterTask(2)),
        posterior
    );
    assert_ne!(tuned.head(0).unwrap(), net.head(0).unwrap());
    assert_ne!(tuned.head(1).unwrap(), net.head(1).unwrap());
}

#[test]
fn runs_are_deterministic_and_complete() {
    let train = synthetic_digits(30, 12);
    let test = synthetic_digits(10, 13);
    let cfg = tiny_config();
    let a = run_single(&cfg, 0, &train, &test, None).unwrap();
    let b = run_single(&cfg, 0, &train, &test, None).unwrap();
    assert_eq!(a.accuracies, b.accuracies);
    assert_eq!(a.final_snapshot, b.final_snapshot);
    assert_eq!(a.accuracies.len(), 3);
    for (t, row) in a.accuracies.iter().enumerate() {
        assert_eq!(row.len(), t + 1);
        assert!(row.iter().all(|v| (0.0..=1.0).contains(v)));
    }
    assert_eq!(a.final_snapshot.heads().len(), 3);
    for r in &a.prune_reports {
        assert_eq!(r.accuracy_before.len(), r.accuracy_after.len());
        assert!(r.is_verified());
    }
    let other = run_single(&cfg, 1, &train, &test, None).unwrap();
    assert_ne!(other.final_snapshot, a.final_snapshot);
}

#[test]
fn coreset_runs_hold_examples_out() {
    let train = synthetic_digits(30, 14);
    let test = synthetic_digits(10, 15);
    let cfg = ExperimentConfig {
        coreset_k: 10,
        coreset_finetune_epochs: 2,
        n_tasks: 2,
        ..tiny_config()
    };
    let out = run_single(&cfg, 0, &train, &test, None).unwrap();
    assert_eq!(out.accuracies.len(), 2);
    let too_big = ExperimentConfig {
        coreset_k: 10_000,
        ..cfg
    };
    assert!(run_single(&too_big, 0, &train, &test, None).is_err());
}

#[test]
fn parallel_runs_match_sequential_and_write_artifacts() {
    let train = synthetic_digits(20, 16);
    let test = synthetic_digits(10, 17);
    let dir = tempfile::tempdir().unwrap();
    let seq_cfg = ExperimentConfig {
        output_dir: Some(dir.path().join("seq")),
        ..tiny_config()
    };
    let par_cfg = ExperimentConfig {
        output_dir: Some(dir.path().join("par")),
        parallel_runs: 2,
        ..tiny_config()
    };
    let seq = run_experiment(&seq_cfg, &train, &test).unwrap();
    let par = run_experiment(&par_cfg, &train, &test).unwrap();
    assert_eq!(seq.metrics, par.metrics);
    let read = |d: &str, f: &str| std::fs::read(dir.path().join(d).join(f)).unwrap();
    assert_eq!(read("seq", "metrics.csv"), read("par", "metrics.csv"));
    for f in [
        "prune_report.csv",
        "prune_accuracy.csv",
        "unit_diagnostics.csv",
    ] {
        assert!(!read("seq", f).is_empty());
    }
    let snap_dir = dir.path().join("seq/run-1/snapshots/after-task-3");
    let snap: PosteriorSnapshot<f64> = analysis::read_weight_snapshot(&snap_dir).unwrap();
    assert_eq!(snap.stage(), SnapshotStage::AfterTask(3));
    assert_eq!(snap.heads().len(), 3);
    let exported = analysis::read_weight_export::<f64>(&snap_dir).unwrap().1;
    assert_eq!(
        exported[0].1[0].0,
        *seq.runs[1].final_snapshot.body()[0].weight.mu()
    );
}

#[test]
fn metrics_table_layout() {
    let m = MetricsTable {
        n_tasks: 2,
        runs: vec![
            vec![vec![1.0], vec![0.9, 0.8]],
            vec![vec![0.98], vec![0.7, 1.0]],
        ],
    };
    assert!((m.final_average(0) - 0.85).abs() < 1e-12);
    let (mean, std) = m.aggregate(2, None);
    assert!((mean - 0.85).abs() < 1e-12 && std.abs() < 1e-12);
    let csv = m.to_csv();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "run,stage_after_task,task,accuracy,std");
    assert!(lines.contains(&"0,2,0,0.850000,"));
    assert!(lines.contains(&"-1,2,2,0.900000,0.141421"));
    // 2 runs × (2 + 3) rows, then 2 + 3 aggregate rows.
    assert_eq!(lines.len(), 1 + 10 + 5);
}

#[test]
fn pruning_the_strongest_unit_costs_accuracy() {
    let train = synthetic_digits(40, 6);
    let test = synthetic_digits(20, 7);
    let tasks = build_split_tasks(&train, &test);
    let mut net = BayesianNetwork::<f64>::new(PIXELS, &[4], 2, 1);
    let prior = PosteriorSnapshot::standard_prior(&net);
    let mut rng = SeededRng::new(8);
    reinitialise_variational_params(&mut net, 0, &mut rng, 0.1, 1e-3).unwrap();
    let snap = train_task(&mut net, &prior, &tasks[0], &opts(20), &mut rng).unwrap();
    let diags = analysis::compute_unit_diagnostics(&snap, None);
    let thresholds = analysis::PruneThresholds {
        delta_out: 1e-12,
        delta_kl: 0.1,
    };
    let mut report = analysis::detect_active_units(snap.stage(), &diags, &thresholds);
    assert_eq!(report.total_active(), 4);
    let strongest = diags
        .iter()
        .max_by(|a, b| a.out_signal.total_cmp(&b.out_signal))
        .unwrap()
        .unit;
    report.layers[0].active.retain(|&u| u != strongest);
    report.layers[0].pruned.push(strongest);
    let deltas = analysis::prune_and_verify(
        &snap,
        &mut report,
        &tasks[..1],
        20,
        &mut SeededRng::new(3),
        PredictiveMode::MonteCarlo,
    )
    .unwrap();
    assert!(deltas[0] > 0.01, "{deltas:?}");
}
