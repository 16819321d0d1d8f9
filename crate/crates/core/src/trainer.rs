//! The continual-learning loop.
//!
//! For each task the previous posterior becomes the prior, the live
//! parameters are re-initialised, and the network is trained on `−ELBO`
//! with Adam. With coresets enabled, a random subset of each task's
//! training data is held out and a copy of the network is finetuned on the
//! union of all coresets before every evaluation.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use crate::analysis::{self, PruneReport, PruneThresholds, UnitDiagnostics};
use crate::bnn::{BayesianNetwork, PosteriorSnapshot, PredictiveMode, SnapshotStage};
use crate::error::{Error, Result};
use crate::mnist::{
    build_permuted_tasks, build_split_tasks, draw_random_coreset, Benchmark, CoresetStore,
    ExampleSet, RawDataset, TaskDataset, PIXELS,
};
use crate::objective::{minibatch_elbo, ElboBreakdown, HeadBatch};
use crate::optim::{AdamConfig, AdamState};
use crate::rng::SeededRng;
use crate::scalar::Scalar;

pub const PRESETS: [&str; 4] = [
    "split-paper",
    "split-desk",
    "permuted-paper",
    "permuted-desk",
];

/// Fully resolved experiment settings. Every field round-trips through the
/// `key = value` form produced by [`ExperimentConfig::to_text`].
#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub benchmark: Benchmark,
    pub n_tasks: usize,
    pub widths: Vec<usize>,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub n_train_samples: usize,
    pub n_eval_samples: usize,
    pub coreset_k: usize,
    pub coreset_finetune_epochs: usize,
    pub init_mean_std: f64,
    pub init_variance: f64,
    pub n_runs: usize,
    pub seed: u64,
    pub delta_out: f64,
    /// Per fan-in weight, in nats.
    pub delta_kl: f64,
    pub predictive: PredictiveMode,
    pub identity_first_permutation: bool,
    pub verify_pruning: bool,
    pub parallel_runs: usize,
    pub data_dir: PathBuf,
    pub output_dir: Option<PathBuf>,
}

impl ExperimentConfig {
    pub const KEYS: [&'static str; 22] = [
        "benchmark",
        "tasks",
        "widths",
        "epochs",
        "batch_size",
        "lr",
        "train_samples",
        "eval_samples",
        "coreset_k",
        "coreset_epochs",
        "init_mean_std",
        "init_variance",
        "runs",
        "seed",
        "delta_out",
        "delta_kl",
        "predictive",
        "identity_first_permutation",
        "verify_pruning",
        "parallel_runs",
        "data_dir",
        "output_dir",
    ];

    pub fn preset(name: &str) -> Result<Self> {
        let base = Self {
            benchmark: Benchmark::Split,
            n_tasks: 5,
            widths: vec![200],
            epochs: 600,
            batch_size: 256,
            lr: 1e-3,
            n_train_samples: 10,
            n_eval_samples: 100,
            coreset_k: 0,
            coreset_finetune_epochs: 100,
            init_mean_std: 0.1,
            init_variance: 1e-3,
            n_runs: 10,
            seed: 0,
            delta_out: 0.02,
            delta_kl: 0.1,
            predictive: PredictiveMode::MonteCarlo,
            identity_first_permutation: false,
            verify_pruning: true,
            parallel_runs: 1,
            data_dir: PathBuf::from("data/mnist"),
            output_dir: None,
        };
        let permuted = Self {
            benchmark: Benchmark::Permuted,
            n_tasks: 10,
            widths: vec![100, 100],
            epochs: 800,
            batch_size: 1024,
            n_runs: 5,
            ..base.clone()
        };
        match name {
            "split-paper" => Ok(base),
            "split-desk" => Ok(Self {
                epochs: 120,
                n_runs: 3,
                ..base
            }),
            "permuted-paper" => Ok(permuted),
            "permuted-desk" => Ok(Self {
                n_tasks: 5,
                epochs: 100,
                n_runs: 2,
                ..permuted
            }),
            other => Err(Error::Config(format!(
                "unknown preset {other:?} (expected one of {})",
                PRESETS.join(", ")
            ))),
        }
    }

    /// Sets one field from its textual form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        fn num<V: std::str::FromStr>(key: &str, value: &str) -> Result<V> {
            value
                .parse()
                .map_err(|_| Error::Config(format!("{key}: cannot parse {value:?}")))
        }
        match key {
            "benchmark" => self.benchmark = value.parse()?,
            "tasks" => self.n_tasks = num(key, value)?,
            "widths" => {
                self.widths = value
                    .split(',')
                    .map(|w| num(key, w.trim()))
                    .collect::<Result<_>>()?
            }
            "epochs" => self.epochs = num(key, value)?,
            "batch_size" => self.batch_size = num(key, value)?,
            "lr" => self.lr = num(key, value)?,
            "train_samples" => self.n_train_samples = num(key, value)?,
            "eval_samples" => self.n_eval_samples = num(key, value)?,
            "coreset_k" => self.coreset_k = num(key, value)?,
            "coreset_epochs" => self.coreset_finetune_epochs = num(key, value)?,
            "init_mean_std" => self.init_mean_std = num(key, value)?,
            "init_variance" => self.init_variance = num(key, value)?,
            "runs" => self.n_runs = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "delta_out" => self.delta_out = num(key, value)?,
            "delta_kl" => self.delta_kl = num(key, value)?,
            "predictive" => self.predictive = value.parse()?,
            "identity_first_permutation" => self.identity_first_permutation = num(key, value)?,
            "verify_pruning" => self.verify_pruning = num(key, value)?,
            "parallel_runs" => self.parallel_runs = num(key, value)?,
            "data_dir" => self.data_dir = PathBuf::from(value),
            "output_dir" => {
                self.output_dir = (!value.is_empty()).then(|| PathBuf::from(value));
            }
            other => return Err(Error::Config(format!("unknown key {other:?}"))),
        }
        Ok(())
    }

    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let widths: Vec<String> = self.widths.iter().map(usize::to_string).collect();
        let values = [
            self.benchmark.as_str().to_string(),
            self.n_tasks.to_string(),
            widths.join(","),
            self.epochs.to_string(),
            self.batch_size.to_string(),
            self.lr.to_string(),
            self.n_train_samples.to_string(),
            self.n_eval_samples.to_string(),
            self.coreset_k.to_string(),
            self.coreset_finetune_epochs.to_string(),
            self.init_mean_std.to_string(),
            self.init_variance.to_string(),
            self.n_runs.to_string(),
            self.seed.to_string(),
            self.delta_out.to_string(),
            self.delta_kl.to_string(),
            self.predictive.as_str().to_string(),
            self.identity_first_permutation.to_string(),
            self.verify_pruning.to_string(),
            self.parallel_runs.to_string(),
            self.data_dir.display().to_string(),
            self.output_dir
                .as_ref()
                .map(|p| p.display().to_string())
                .unwrap_or_default(),
        ];
        Self::KEYS.into_iter().zip(values).collect()
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.entries() {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.n_tasks == 0 {
            return fail("tasks must be at least 1".into());
        }
        if self.benchmark == Benchmark::Split && self.n_tasks > 5 {
            return fail(format!("split has 5 tasks, got {}", self.n_tasks));
        }
        if self.widths.is_empty() || self.widths.contains(&0) {
            return fail(format!("widths must be positive, got {:?}", self.widths));
        }
        for (name, v) in [
            ("batch_size", self.batch_size),
            ("train_samples", self.n_train_samples),
            ("eval_samples", self.n_eval_samples),
            ("runs", self.n_runs),
            ("parallel_runs", self.parallel_runs),
        ] {
            if v == 0 {
                return fail(format!("{name} must be at least 1"));
            }
        }
        for (name, v) in [
            ("lr", self.lr),
            ("init_variance", self.init_variance),
            ("delta_out", self.delta_out),
            ("delta_kl", self.delta_kl),
        ] {
            if v.is_nan() || v <= 0.0 {
                return fail(format!("{name} must be positive, got {v}"));
            }
        }
        if !(self.init_mean_std.is_finite() && self.init_mean_std >= 0.0) {
            return fail("init_mean_std must be finite and non-negative".to_string());
        }
        if self.coreset_k > 0 && self.coreset_finetune_epochs == 0 {
            return fail("coreset_epochs must be positive when coreset_k > 0".into());
        }
        Ok(())
    }

    pub fn n_classes(&self) -> usize {
        match self.benchmark {
            Benchmark::Split => 2,
            Benchmark::Permuted => 10,
        }
    }

    pub fn thresholds(&self) -> PruneThresholds {
        PruneThresholds {
            delta_out: self.delta_out,
            delta_kl: self.delta_kl,
        }
    }

    pub fn train_options(&self) -> TrainOptions {
        TrainOptions {
            epochs: self.epochs,
            batch_size: self.batch_size,
            n_train_samples: self.n_train_samples,
            adam: AdamConfig {
                lr: self.lr,
                ..AdamConfig::default()
            },
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainOptions {
    pub epochs: usize,
    pub batch_size: usize,
    pub n_train_samples: usize,
    pub adam: AdamConfig,
}

/// Random streams of one run.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stream {
    Tasks = 0,
    Coreset = 1,
    Train = 2,
    Eval = 3,
    PruneEval = 4,
}

pub fn run_stream(master: u64, run: usize, stream: Stream) -> SeededRng {
    SeededRng::derive(master, run as u64 * 16 + stream as u64)
}

/// Re-draws the body and the active head: means from `N(0, mean_std²)`,
/// variances set to `variance`. Other heads are left alone.
pub fn reinitialise_variational_params<T: Scalar>(
    net: &mut BayesianNetwork<T>,
    head_id: usize,
    rng: &mut SeededRng,
    init_mean_std: f64,
    init_variance: f64,
) -> Result<()> {
    let (std, var) = (T::of(init_mean_std), T::of(init_variance));
    for layer in net.body_mut() {
        layer.reinitialise(rng, std, var);
    }
    net.head_mut(head_id)?.reinitialise(rng, std, var);
    Ok(())
}

fn objective_error(
    step: usize,
    epoch: usize,
    last: Option<&ElboBreakdown<impl Scalar>>,
    cause: &Error,
) -> Error {
    let last = match last {
        Some(b) => format!(
            "last good: elbo={} expected_log_lik={} kl={}",
            b.elbo, b.expected_log_lik, b.kl_total
        ),
        None => "no finite step yet".to_string(),
    };
    Error::NonFiniteObjective {
        step,
        diagnostics: format!("epoch {epoch}: {cause}; {last}"),
    }
}

/// Trains `net` on one task against `prior` and returns the new posterior.
///
/// Runs `epochs · ⌈N/B⌉` Adam steps with fresh optimiser state, reshuffling
/// the training data each epoch.
pub fn train_task<T: Scalar>(
    net: &mut BayesianNetwork<T>,
    prior: &PosteriorSnapshot<T>,
    task: &TaskDataset<T>,
    opts: &TrainOptions,
    rng: &mut SeededRng,
) -> Result<PosteriorSnapshot<T>> {
    let head = task.spec.head_id;
    let n = task.n_train();
    let mut adam = AdamState::new(opts.adam);
    let mut order: Vec<usize> = (0..n).collect();
    let mut last_good: Option<ElboBreakdown<T>> = None;
    let mut step = 0;
    for epoch in 0..opts.epochs {
        rng.shuffle(&mut order);
        for chunk in order.chunks(opts.batch_size) {
            let x = task.train.gather(chunk);
            let y = task.train.gather_targets(chunk);
            let batch = [HeadBatch::new(head, &x, &y)];
            let (elbo, grads) =
                match minibatch_elbo(net, prior, &batch, n, opts.n_train_samples, rng) {
                    Ok(r) => r,
                    Err(e @ Error::NonFiniteObjective { .. })
                    | Err(e @ Error::NonFinite { .. }) => {
                        return Err(objective_error(step, epoch, last_good.as_ref(), &e))
                    }
                    Err(e) => return Err(e),
                };
            if let Err(e) = adam.step(net, &grads) {
                return Err(objective_error(step, epoch, Some(&elbo), &e));
            }
            last_good = Some(elbo);
            step += 1;
        }
        if let Some(b) = &last_good {
            log::debug!(
                "task {} epoch {}: elbo {:.4} kl {:.4}",
                task.spec.task_index,
                epoch + 1,
                b.elbo,
                b.kl_total
            );
        }
    }
    Ok(PosteriorSnapshot::capture(
        net,
        SnapshotStage::AfterTask(task.spec.task_index),
    ))
}

/// Prediction network for evaluation: a copy of `trained` finetuned on all
/// stored coresets with `posterior` as prior. With `k = 0` the copy is
/// returned untouched.
pub fn coreset_finetune<T: Scalar>(
    trained: &BayesianNetwork<T>,
    posterior: &PosteriorSnapshot<T>,
    coresets: &CoresetStore<T>,
    opts: &TrainOptions,
    rng: &mut SeededRng,
) -> Result<BayesianNetwork<T>> {
    let mut net = trained.clone();
    if coresets.k == 0 {
        return Ok(net);
    }
    let total = coresets.total_examples();
    if total == 0 {
        return Err(Error::Config(
            "coreset finetuning requested but the coreset store is empty".into(),
        ));
    }
    // (head, coreset index, position)
    let mut pool: Vec<(usize, usize, usize)> = coresets
        .tasks
        .iter()
        .enumerate()
        .flat_map(|(c, task)| (0..task.examples.len()).map(move |i| (task.head_id, c, i)))
        .collect();
    let mut adam = AdamState::new(opts.adam);
    let mut step = 0;
    for epoch in 0..opts.epochs {
        rng.shuffle(&mut pool);
        for chunk in pool.chunks(opts.batch_size) {
            let mut grouped = chunk.to_vec();
            grouped.sort_unstable();
            let mut parts: Vec<(usize, crate::matrix::Matrix<T>, Vec<usize>)> = Vec::new();
            for group in grouped.chunk_by(|a, b| a.0 == b.0) {
                let head = group[0].0;
                let sets: Vec<&ExampleSet<T>> = group
                    .iter()
                    .map(|&(_, c, _)| &coresets.tasks[c].examples)
                    .collect();
                let (x, y) = gather_mixed(&sets, group);
                parts.push((head, x, y));
            }
            let batches: Vec<HeadBatch<'_, T>> = parts
                .iter()
                .map(|(h, x, y)| HeadBatch::new(*h, x, y))
                .collect();
            let (elbo, grads) =
                minibatch_elbo(&net, posterior, &batches, total, opts.n_train_samples, rng)
                    .map_err(|e| objective_error(step, epoch, None::<&ElboBreakdown<T>>, &e))?;
            adam.step(&mut net, &grads)
                .map_err(|e| objective_error(step, epoch, Some(&elbo), &e))?;
            step += 1;
        }
    }
    Ok(net)
}

fn gather_mixed<T: Scalar>(
    sets: &[&ExampleSet<T>],
    entries: &[(usize, usize, usize)],
) -> (crate::matrix::Matrix<T>, Vec<usize>) {
    let dim = sets.first().map_or(PIXELS, |s| s.dim());
    let mut x = crate::matrix::Matrix::zeros(entries.len(), dim);
    let mut y = Vec::with_capacity(entries.len());
    for (r, (set, &(_, _, i))) in sets.iter().zip(entries).enumerate() {
        let row = set.gather(&[i]);
        x.row_mut(r).copy_from_slice(row.row(0));
        y.push(set.targets()[i]);
    }
    (x, y)
}

/// Test accuracy of `net` on each task, in order.
pub fn evaluate_all_tasks<T: Scalar>(
    net: &BayesianNetwork<T>,
    tasks: &[TaskDataset<T>],
    n_eval_samples: usize,
    rng: &mut SeededRng,
    mode: PredictiveMode,
) -> Result<Vec<f64>> {
    const CHUNK: usize = 2048;
    let mut out = Vec::with_capacity(tasks.len());
    for task in tasks {
        let test = &task.test;
        if test.is_empty() {
            return Err(Error::Config(format!(
                "task {} has no test examples",
                task.spec.task_index
            )));
        }
        let mut correct = 0usize;
        let positions: Vec<usize> = (0..test.len()).collect();
        for chunk in positions.chunks(CHUNK) {
            let x = test.gather(chunk);
            let logp =
                net.predictive_log_probs(&x, task.spec.head_id, rng, n_eval_samples, mode)?;
            for (r, &pos) in chunk.iter().enumerate() {
                correct += usize::from(argmax(logp.row(r)) == test.targets()[pos]);
            }
        }
        out.push(correct as f64 / test.len() as f64);
    }
    Ok(out)
}

fn argmax<T: Scalar>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Accuracy tables of every run: `runs[r][t_after - 1][task - 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsTable {
    pub n_tasks: usize,
    pub runs: Vec<Vec<Vec<f64>>>,
}

/// Mean and sample standard deviation (0 for a single value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

impl MetricsTable {
    /// Average accuracy over tasks `1..=t_after` after training task `t_after`.
    pub fn average(&self, run: usize, t_after: usize) -> f64 {
        let row = &self.runs[run][t_after - 1];
        row.iter().sum::<f64>() / row.len() as f64
    }

    pub fn final_average(&self, run: usize) -> f64 {
        self.average(run, self.n_tasks)
    }

    pub fn final_averages(&self) -> Vec<f64> {
        (0..self.runs.len())
            .map(|r| self.final_average(r))
            .collect()
    }

    /// Mean and std across runs of the accuracy on `task`, or of the
    /// average when `task` is `None`.
    pub fn aggregate(&self, t_after: usize, task: Option<usize>) -> (f64, f64) {
        let values: Vec<f64> = (0..self.runs.len())
            .map(|r| match task {
                Some(k) => self.runs[r][t_after - 1][k - 1],
                None => self.average(r, t_after),
            })
            .collect();
        mean_std(&values)
    }

    /// Long-format CSV. `task = 0` is the running average; `run = -1` rows
    /// hold the across-run mean with its standard deviation.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("run,stage_after_task,task,accuracy,std\n");
        for (r, run) in self.runs.iter().enumerate() {
            for (t, row) in run.iter().enumerate() {
                let _ = writeln!(out, "{r},{},0,{:.6},", t + 1, self.average(r, t + 1));
                for (k, acc) in row.iter().enumerate() {
                    let _ = writeln!(out, "{r},{},{},{acc:.6},", t + 1, k + 1);
                }
            }
        }
        for t in 1..=self.n_tasks {
            let (m, s) = self.aggregate(t, None);
            let _ = writeln!(out, "-1,{t},0,{m:.6},{s:.6}");
            for k in 1..=t {
                let (m, s) = self.aggregate(t, Some(k));
                let _ = writeln!(out, "-1,{t},{k},{m:.6},{s:.6}");
            }
        }
        out
    }
}

/// Everything one run produces besides files.
#[derive(Clone, Debug)]
pub struct RunOutcome<T> {
    pub run: usize,
    pub accuracies: Vec<Vec<f64>>,
    pub tasks: Vec<TaskDataset<T>>,
    pub final_snapshot: PosteriorSnapshot<T>,
    pub prune_reports: Vec<PruneReport>,
    pub diagnostics: Vec<(SnapshotStage, Vec<UnitDiagnostics>)>,
}

#[derive(Clone, Debug)]
pub struct ExperimentOutcome<T> {
    pub metrics: MetricsTable,
    pub runs: Vec<RunOutcome<T>>,
}

/// Task datasets of run `run`; permutations come from the run's task stream.
pub fn build_tasks<T: Scalar>(
    cfg: &ExperimentConfig,
    run: usize,
    train: &RawDataset<T>,
    test: &RawDataset<T>,
) -> Vec<TaskDataset<T>> {
    match cfg.benchmark {
        Benchmark::Split => build_split_tasks(train, test)
            .into_iter()
            .take(cfg.n_tasks)
            .collect(),
        Benchmark::Permuted => {
            let mut rng = run_stream(cfg.seed, run, Stream::Tasks);
            build_permuted_tasks(
                train,
                test,
                cfg.n_tasks,
                &mut rng,
                cfg.identity_first_permutation,
            )
        }
    }
}

fn check_prior_chain<T: Scalar>(
    prior: &PosteriorSnapshot<T>,
    previous: &PosteriorSnapshot<T>,
) -> Result<()> {
    let heads_ok = prior.heads().len() >= previous.heads().len()
        && prior.heads()[..previous.heads().len()] == *previous.heads();
    if prior.body() != previous.body() || !heads_ok {
        return Err(Error::Invariant(format!(
            "prior for the next task differs from the {} posterior",
            previous.stage()
        )));
    }
    Ok(())
}

/// One complete task sequence. Writes snapshots under `run_dir` if given.
pub fn run_single<T: Scalar>(
    cfg: &ExperimentConfig,
    run: usize,
    train: &RawDataset<T>,
    test: &RawDataset<T>,
    run_dir: Option<&Path>,
) -> Result<RunOutcome<T>> {
    cfg.validate()?;
    let tasks = build_tasks(cfg, run, train, test);
    let opts = cfg.train_options();
    let finetune_opts = TrainOptions {
        epochs: cfg.coreset_finetune_epochs,
        ..opts
    };
    let mut coreset_rng = run_stream(cfg.seed, run, Stream::Coreset);
    let mut train_rng = run_stream(cfg.seed, run, Stream::Train);
    let mut eval_rng = run_stream(cfg.seed, run, Stream::Eval);
    let prune_rng = run_stream(cfg.seed, run, Stream::PruneEval);

    let mut net = BayesianNetwork::new(PIXELS, &cfg.widths, cfg.n_classes(), 1);
    let mut posterior = PosteriorSnapshot::standard_prior(&net);
    let mut coresets = CoresetStore::new(cfg.coreset_k);
    let mut accuracies = Vec::with_capacity(tasks.len());
    let mut prune_reports = Vec::new();
    let mut diagnostics = Vec::new();

    for (i, task) in tasks.iter().enumerate() {
        let head = task.spec.head_id;
        net.ensure_head(head);
        let prior = if i == 0 {
            PosteriorSnapshot::standard_prior(&net)
        } else {
            let p = posterior.with_standard_head(head);
            check_prior_chain(&p, &posterior)?;
            p
        };

        let train_set = if cfg.coreset_k > 0 {
            let (coreset, reduced) = draw_random_coreset(task, cfg.coreset_k, &mut coreset_rng)?;
            coresets.push(coreset);
            reduced
        } else {
            task.clone()
        };

        reinitialise_variational_params(
            &mut net,
            head,
            &mut train_rng,
            cfg.init_mean_std,
            cfg.init_variance,
        )?;
        let other_heads: Vec<_> = (0..net.n_heads())
            .filter(|&h| h != head)
            .map(|h| (h, net.heads()[h].clone()))
            .collect();
        posterior = train_task(&mut net, &prior, &train_set, &opts, &mut train_rng)?;
        for (h, before) in &other_heads {
            if net.heads()[*h] != *before {
                return Err(Error::Invariant(format!(
                    "head {h} changed while training task {}",
                    task.spec.task_index
                )));
            }
        }

        let seen = &tasks[..=i];
        let prediction =
            coreset_finetune(&net, &posterior, &coresets, &finetune_opts, &mut train_rng)?;
        if PosteriorSnapshot::capture(&net, posterior.stage()) != posterior {
            return Err(Error::Invariant(
                "coreset finetuning modified the chained network".into(),
            ));
        }
        let row = evaluate_all_tasks(
            &prediction,
            seen,
            cfg.n_eval_samples,
            &mut eval_rng,
            cfg.predictive,
        )?;
        log::info!(
            "run {run} after task {}: accuracies {:?}, average {:.4}",
            task.spec.task_index,
            row,
            row.iter().sum::<f64>() / row.len() as f64
        );
        accuracies.push(row);

        let previous = (i > 0).then_some(&prior);
        let diags = analysis::compute_unit_diagnostics(&posterior, previous);
        let mut report =
            analysis::detect_active_units(posterior.stage(), &diags, &cfg.thresholds());
        if cfg.verify_pruning {
            let mut rng = prune_rng.fork(task.spec.task_index as u64);
            analysis::prune_and_verify(
                &posterior,
                &mut report,
                seen,
                cfg.n_eval_samples,
                &mut rng,
                cfg.predictive,
            )?;
        }
        log::info!("run {run} {}: {}", posterior.stage(), report.summary());
        if let Some(dir) = run_dir {
            analysis::export_weight_snapshot(
                &posterior,
                &dir.join("snapshots").join(posterior.stage().to_string()),
            )?;
        }
        prune_reports.push(report);
        diagnostics.push((posterior.stage(), diags));
    }

    Ok(RunOutcome {
        run,
        accuracies,
        tasks,
        final_snapshot: posterior,
        prune_reports,
        diagnostics,
    })
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

/// Runs every seed, then writes `metrics.csv`, `prune_report.csv`,
/// `prune_accuracy.csv`, `unit_diagnostics.csv` and per-run snapshots when
/// an output directory is configured.
pub fn run_experiment<T: Scalar>(
    cfg: &ExperimentConfig,
    train: &RawDataset<T>,
    test: &RawDataset<T>,
) -> Result<ExperimentOutcome<T>> {
    cfg.validate()?;
    if let Some(dir) = &cfg.output_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let run_dir = |r: usize| cfg.output_dir.as_ref().map(|d| d.join(format!("run-{r}")));

    let workers = cfg.parallel_runs.min(cfg.n_runs);
    let runs: Vec<RunOutcome<T>> = if workers <= 1 {
        (0..cfg.n_runs)
            .map(|r| run_single(cfg, r, train, test, run_dir(r).as_deref()))
            .collect::<Result<_>>()?
    } else {
        let next = AtomicUsize::new(0);
        let slots: Mutex<Vec<Option<Result<RunOutcome<T>>>>> =
            Mutex::new((0..cfg.n_runs).map(|_| None).collect());
        std::thread::scope(|scope| {
            for _ in 0..workers {
                scope.spawn(|| loop {
                    let r = next.fetch_add(1, Ordering::SeqCst);
                    if r >= cfg.n_runs {
                        break;
                    }
                    let outcome = run_single(cfg, r, train, test, run_dir(r).as_deref());
                    slots.lock().expect("result slots")[r] = Some(outcome);
                });
            }
        });
        slots
            .into_inner()
            .expect("result slots")
            .into_iter()
            .map(|s| s.expect("every run executed"))
            .collect::<Result<_>>()?
    };

    let metrics = MetricsTable {
        n_tasks: cfg.n_tasks,
        runs: runs.iter().map(|r| r.accuracies.clone()).collect(),
    };
    if let Some(dir) = &cfg.output_dir {
        write_file(&dir.join("metrics.csv"), &metrics.to_csv())?;
        let mut prune = String::from(analysis::PRUNE_REPORT_HEADER);
        let mut prune_acc = String::from(analysis::PRUNE_ACCURACY_HEADER);
        let mut diag_csv = String::from(analysis::UNIT_DIAGNOSTICS_HEADER);
        for run in &runs {
            for (report, (stage, diags)) in run.prune_reports.iter().zip(&run.diagnostics) {
                prune.push_str(&analysis::prune_report_rows(run.run, report, diags));
                prune_acc.push_str(&analysis::prune_accuracy_rows(run.run, report));
                diag_csv.push_str(&analysis::unit_diagnostics_rows(run.run, *stage, diags));
            }
        }
        write_file(&dir.join("prune_report.csv"), &prune)?;
        write_file(&dir.join("prune_accuracy.csv"), &prune_acc)?;
        write_file(&dir.join("unit_diagnostics.csv"), &diag_csv)?;
    }
    Ok(ExperimentOutcome { metrics, runs })
}
