//! Command-line front end: `vcl run`, `vcl analyze` and `vcl gradcheck`.
//!
//! Exit codes: 0 success, 1 failed check or runtime error, 2 bad
//! configuration, 3 missing data or artifacts.

pub mod config;

use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use vcl_core::analysis::{self, PruneReport, UnitDiagnostics};
use vcl_core::mnist::load_mnist;
use vcl_core::objective::{
    finite_difference_check_with, GradCheckConfig, GradCheckReport, HeadBatch,
};
use vcl_core::trainer::{self, mean_std, run_stream, ExperimentConfig, Stream};
use vcl_core::{
    BayesianNetwork, Error, Matrix, PosteriorSnapshot, RawDataset, SeededRng, SnapshotStage,
};

use config::{manifest_text, resolve, ConfigFile, DATA_DIR_ENV};

pub const EXIT_OK: u8 = 0;
pub const EXIT_CHECK_FAILED: u8 = 1;
pub const EXIT_CONFIG: u8 = 2;
pub const EXIT_MISSING: u8 = 3;

pub const DEFAULT_OUTPUT_DIR: &str = "vcl-output";

#[derive(Debug, Parser)]
#[command(
    name = "vcl",
    version,
    about = "Variational continual learning experiments"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[allow(clippy::large_enum_variant)]
#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train and evaluate a task sequence.
    Run(RunArgs),
    /// Recompute unit diagnostics and pruning reports from saved snapshots.
    Analyze(AnalyzeArgs),
    /// Check analytic gradients against finite differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// split-paper, split-desk, permuted-paper or permuted-desk.
    #[arg(long)]
    pub preset: Option<String>,
    /// `key = value` file; a run manifest works too.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub coreset_k: Option<usize>,
    #[arg(long)]
    pub coreset_epochs: Option<usize>,
    #[arg(long)]
    pub tasks: Option<usize>,
    /// Comma-separated hidden widths, e.g. `100,100`.
    #[arg(long)]
    pub widths: Option<String>,
    #[arg(long)]
    pub runs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub output_dir: Option<PathBuf>,
    #[arg(long)]
    pub data_dir: Option<PathBuf>,
    #[arg(long)]
    pub parallel_runs: Option<usize>,
    #[arg(long)]
    pub eval_samples: Option<usize>,
    #[arg(long)]
    pub train_samples: Option<usize>,
    /// Any other config key, as `key=value`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

impl RunArgs {
    fn overrides(&self) -> Result<Vec<(String, String)>, CliError> {
        fn text<V: ToString>(v: &Option<V>) -> Option<String> {
            v.as_ref().map(V::to_string)
        }
        let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string());
        let mut out: Vec<(String, String)> = [
            ("seed", text(&self.seed)),
            ("epochs", text(&self.epochs)),
            ("batch_size", text(&self.batch_size)),
            ("coreset_k", text(&self.coreset_k)),
            ("coreset_epochs", text(&self.coreset_epochs)),
            ("tasks", text(&self.tasks)),
            ("widths", self.widths.clone()),
            ("runs", text(&self.runs)),
            ("lr", text(&self.lr)),
            ("output_dir", path(&self.output_dir)),
            ("data_dir", path(&self.data_dir)),
            ("parallel_runs", text(&self.parallel_runs)),
            ("eval_samples", text(&self.eval_samples)),
            ("train_samples", text(&self.train_samples)),
        ]
        .into_iter()
        .filter_map(|(k, v)| Some((k.to_string(), v?)))
        .collect();
        for kv in &self.set {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| CliError::config(format!("--set expects KEY=VALUE, got {kv:?}")))?;
            let k = k.trim();
            if !ExperimentConfig::KEYS.contains(&k) {
                return Err(CliError::config(format!("--set: unknown key {k:?}")));
            }
            out.push((k.to_string(), v.trim().to_string()));
        }
        Ok(out)
    }
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    /// Output directory of a previous `vcl run`.
    pub dir: PathBuf,
    #[arg(long)]
    pub delta_out: Option<f64>,
    #[arg(long)]
    pub delta_kl: Option<f64>,
    #[arg(long)]
    pub eval_samples: Option<usize>,
    #[arg(long)]
    pub data_dir: Option<PathBuf>,
    /// Skip prune-and-verify (which needs the MNIST test data).
    #[arg(long)]
    pub no_verify: bool,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    #[arg(long, default_value_t = 256)]
    pub coords: usize,
    /// Corrupt the analytic gradient before comparing (for testing the check).
    #[arg(long, hide = true)]
    pub mutate_gradient: bool,
}

#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl CliError {
    fn config(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_CONFIG,
            message: message.into(),
        }
    }

    fn missing(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_MISSING,
            message: message.into(),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Config(_) => EXIT_CONFIG,
            _ => EXIT_CHECK_FAILED,
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

/// Parses `args` (program name first) and executes the command.
pub fn run<I, A>(args: I) -> u8
where
    I: IntoIterator<Item = A>,
    A: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    let result = match cli.command {
        Command::Run(a) => cmd_run(&a),
        Command::Analyze(a) => cmd_analyze(&a),
        Command::Gradcheck(a) => cmd_gradcheck(&a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {}", e.message);
            e.code
        }
    }
}

fn load_data(dir: &Path) -> Result<(RawDataset<f64>, RawDataset<f64>), CliError> {
    load_mnist(dir).map_err(|e| {
        CliError::missing(format!(
            "cannot load MNIST from {} ({e}); pass --data-dir or set {DATA_DIR_ENV}",
            dir.display()
        ))
    })
}

fn write(path: &Path, text: &str) -> Result<(), CliError> {
    std::fs::write(path, text).map_err(|e| CliError {
        code: EXIT_CHECK_FAILED,
        message: format!("cannot write {}: {e}", path.display()),
    })
}

pub fn cmd_run(args: &RunArgs) -> Result<u8, CliError> {
    let file = match &args.config {
        Some(p) => Some((p.as_path(), ConfigFile::load(p)?)),
        None => None,
    };
    let overrides = args.overrides()?;
    let (mut cfg, res) = resolve(
        args.preset.as_deref(),
        file.as_ref().map(|(p, f)| (*p, f)),
        &overrides,
        std::env::var(DATA_DIR_ENV).ok(),
    )?;
    let out_dir = cfg
        .output_dir
        .get_or_insert_with(|| PathBuf::from(DEFAULT_OUTPUT_DIR))
        .clone();
    let (train, test) = load_data(&cfg.data_dir)?;
    std::fs::create_dir_all(&out_dir).map_err(|e| CliError {
        code: EXIT_CHECK_FAILED,
        message: format!("cannot create {}: {e}", out_dir.display()),
    })?;
    write(&out_dir.join("manifest.txt"), &manifest_text(&cfg, &res))?;

    let outcome = trainer::run_experiment(&cfg, &train, &test)?;
    let metrics = &outcome.metrics;
    for t in 1..=cfg.n_tasks {
        let (m, s) = metrics.aggregate(t, None);
        println!(
            "after task {t}: average accuracy {:.2}% ± {:.2}",
            100.0 * m,
            100.0 * s
        );
    }
    let (m, s) = mean_std(&metrics.final_averages());
    println!(
        "final average accuracy over {} run(s): {:.2}% ± {:.2}",
        cfg.n_runs,
        100.0 * m,
        100.0 * s
    );
    for run in &outcome.runs {
        if let Some(report) = run.prune_reports.last() {
            println!("run {} {}: {}", run.run, report.stage, report.summary());
        }
    }
    println!("outputs written to {}", out_dir.display());
    Ok(EXIT_OK)
}

struct StageAnalysis {
    run: usize,
    stage: SnapshotStage,
    diags: Vec<UnitDiagnostics>,
    report: PruneReport,
}

fn stage_dirs(run_dir: &Path) -> Vec<(usize, PathBuf)> {
    let Ok(entries) = std::fs::read_dir(run_dir.join("snapshots")) else {
        return Vec::new();
    };
    let mut out: Vec<(usize, PathBuf)> = entries
        .filter_map(|e| e.ok())
        .filter_map(|e| {
            let name = e.file_name().to_string_lossy().into_owned();
            match name.parse::<SnapshotStage>() {
                Ok(SnapshotStage::AfterTask(t)) if e.path().join("manifest.txt").exists() => {
                    Some((t, e.path()))
                }
                _ => None,
            }
        })
        .collect();
    out.sort();
    out
}

fn run_dirs(dir: &Path) -> Vec<(usize, PathBuf)> {
    let Ok(entries) = std::fs::read_dir(dir) else {
        return Vec::new();
    };
    let mut out: Vec<(usize, PathBuf)> = entries
        .filter_map(|e| e.ok())
        .filter_map(|e| {
            let name = e.file_name().to_string_lossy().into_owned();
            let r = name.strip_prefix("run-")?.parse().ok()?;
            (!stage_dirs(&e.path()).is_empty()).then(|| (r, e.path()))
        })
        .collect();
    out.sort();
    out
}

pub fn cmd_analyze(args: &AnalyzeArgs) -> Result<u8, CliError> {
    let runs = run_dirs(&args.dir);
    if runs.is_empty() {
        return Err(CliError::missing(format!(
            "no snapshots found under {} (expected run-*/snapshots/after-task-*/)",
            args.dir.display()
        )));
    }
    let manifest = args.dir.join("manifest.txt");
    let mut overrides = Vec::new();
    if let Some(v) = args.delta_out {
        overrides.push(("delta_out".to_string(), v.to_string()));
    }
    if let Some(v) = args.delta_kl {
        overrides.push(("delta_kl".to_string(), v.to_string()));
    }
    if let Some(v) = args.eval_samples {
        overrides.push(("eval_samples".to_string(), v.to_string()));
    }
    if let Some(p) = &args.data_dir {
        overrides.push(("data_dir".to_string(), p.display().to_string()));
    }
    let file = manifest
        .exists()
        .then(|| ConfigFile::load(&manifest))
        .transpose()?;
    let (cfg, _) = resolve(
        None,
        file.as_ref().map(|f| (manifest.as_path(), f)),
        &overrides,
        std::env::var(DATA_DIR_ENV).ok(),
    )?;
    let verify = !args.no_verify && file.is_some();
    if !args.no_verify && file.is_none() {
        eprintln!(
            "note: no manifest.txt in {}, skipping prune-and-verify",
            args.dir.display()
        );
    }
    let data = if verify {
        Some(load_data(&cfg.data_dir)?)
    } else {
        None
    };

    let mut results = Vec::new();
    for (run, run_dir) in &runs {
        let tasks = data
            .as_ref()
            .map(|(train, test)| trainer::build_tasks(&cfg, *run, train, test));
        let mut previous: Option<PosteriorSnapshot<f64>> = None;
        for (t, stage_dir) in stage_dirs(run_dir) {
            let snap: PosteriorSnapshot<f64> = analysis::read_weight_snapshot(&stage_dir)
                .map_err(|e| CliError::missing(format!("{}: {e}", stage_dir.display())))?;
            let diags = analysis::compute_unit_diagnostics(&snap, previous.as_ref());
            let mut report = analysis::detect_active_units(snap.stage(), &diags, &cfg.thresholds());
            if let Some(tasks) = &tasks {
                let seen = tasks.get(..t).ok_or_else(|| {
                    CliError::config(format!(
                        "snapshot for task {t} but config has {} tasks",
                        tasks.len()
                    ))
                })?;
                let mut rng = run_stream(cfg.seed, *run, Stream::PruneEval).fork(t as u64);
                analysis::prune_and_verify(
                    &snap,
                    &mut report,
                    seen,
                    cfg.n_eval_samples,
                    &mut rng,
                    cfg.predictive,
                )?;
            }
            results.push(StageAnalysis {
                run: *run,
                stage: snap.stage(),
                diags,
                report,
            });
            previous = Some(snap);
        }
    }

    let mut diag_csv = String::from(analysis::UNIT_DIAGNOSTICS_HEADER);
    let mut prune_csv = String::from(analysis::PRUNE_REPORT_HEADER);
    let mut acc_csv = String::from(analysis::PRUNE_ACCURACY_HEADER);
    let mut counts = String::from("run,stage,layer,active,width\n");
    for r in &results {
        diag_csv.push_str(&analysis::unit_diagnostics_rows(r.run, r.stage, &r.diags));
        prune_csv.push_str(&analysis::prune_report_rows(r.run, &r.report, &r.diags));
        acc_csv.push_str(&analysis::prune_accuracy_rows(r.run, &r.report));
        for l in &r.report.layers {
            let _ = writeln!(
                counts,
                "{},{},{},{},{}",
                r.run,
                r.stage,
                l.layer,
                l.active.len(),
                l.width
            );
        }
    }
    let out = args.dir.join("analysis");
    std::fs::create_dir_all(&out).map_err(|e| CliError {
        code: EXIT_CHECK_FAILED,
        message: format!("cannot create {}: {e}", out.display()),
    })?;
    write(&out.join("unit_diagnostics.csv"), &diag_csv)?;
    write(&out.join("prune_report.csv"), &prune_csv)?;
    write(&out.join("active_units.csv"), &counts)?;
    if verify {
        write(&out.join("prune_accuracy.csv"), &acc_csv)?;
    }

    println!(
        "active units per hidden layer (delta_out = {}):",
        cfg.delta_out
    );
    for r in &results {
        let layers: Vec<String> = r
            .report
            .layers
            .iter()
            .map(|l| format!("{}/{}", l.active.len(), l.width))
            .collect();
        let mut line = format!(
            "  run {} {:<13} {}",
            r.run,
            r.stage.to_string(),
            layers.join("  ")
        );
        if r.report.is_verified() {
            let _ = write!(line, "  max |Δacc| {:.4}", r.report.max_abs_delta());
        }
        println!("{line}");
    }
    println!("analysis written to {}", out.display());
    Ok(EXIT_OK)
}

/// Builds the fixed gradient-check problem (784→20→2, 8 examples) and runs
/// the finite-difference comparison.
pub fn gradcheck_report(
    seed: u64,
    n_coords: usize,
    mutate: bool,
) -> Result<GradCheckReport, Error> {
    let mut rng = SeededRng::new(seed);
    let mut net = BayesianNetwork::<f64>::new(784, &[20], 2, 1);
    let mut anchor = net.clone();
    for (target, (std, var)) in [(&mut net, (0.1, 1e-2)), (&mut anchor, (0.1, 5e-2))] {
        for layer in target.body_mut() {
            layer.reinitialise(&mut rng, std, var);
        }
        target.head_mut(0)?.reinitialise(&mut rng, std, var);
    }
    let prior = PosteriorSnapshot::capture(&anchor, SnapshotStage::AfterTask(1));
    let x = Matrix::from_fn(8, 784, |_, _| rng.uniform());
    let y: Vec<usize> = (0..8).map(|i| i % 2).collect();
    let batch = [HeadBatch::new(0, &x, &y)];
    let cfg = GradCheckConfig {
        n_coords,
        ..GradCheckConfig::default()
    };
    finite_difference_check_with(&net, &prior, &batch, 8, &cfg, |g| {
        if mutate {
            g.body[0].weight.rho.map_inplace(|v| 2.0 * v);
        }
    })
}

pub fn cmd_gradcheck(args: &GradcheckArgs) -> Result<u8, CliError> {
    let report = gradcheck_report(args.seed, args.coords, args.mutate_gradient)?;
    println!("max_rel_error = {:?}", report.max_rel_error);
    println!("coordinates checked = {}", report.n_checked);
    if report.max_rel_error < 1e-4 {
        println!("gradient check passed");
        Ok(EXIT_OK)
    } else {
        println!(
            "gradient check FAILED at {}: analytic {:e}, numeric {:e}",
            report.worst, report.analytic, report.numeric
        );
        Ok(EXIT_CHECK_FAILED)
    }
}

/// Mean and std of the final average accuracy across runs, from a
/// `metrics.csv` written by `vcl run`.
pub fn final_average_from_csv(text: &str) -> Option<(f64, f64)> {
    let last_stage = text
        .lines()
        .skip(1)
        .filter_map(|l| l.split(',').nth(1)?.parse::<usize>().ok())
        .max()?;
    text.lines().skip(1).find_map(|l| {
        let f: Vec<&str> = l.split(',').collect();
        (f.len() == 5 && f[0] == "-1" && f[1] == last_stage.to_string() && f[2] == "0")
            .then(|| Some((f[3].parse().ok()?, f[4].parse().ok()?)))
            .flatten()
    })
}
