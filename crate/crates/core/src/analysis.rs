//! Unit-level capacity analysis of trained posteriors.
//!
//! A hidden unit is pruned when every outgoing weight has collapsed to a
//! narrow Gaussian near zero, measured by `out_signal = max |μ| + σ` over
//! its outgoing connections. Pruned units typically also have incoming
//! weights back at the standard prior, reported as `input_kl`.

use std::fmt::Write as _;
use std::io::{BufWriter, Write as _};
use std::path::Path;

use crate::bnn::{
    BayesianNetwork, FrozenLayer, GaussianBlock, MeanFieldLayer, PosteriorSnapshot, PredictiveMode,
    SnapshotStage,
};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::mnist::TaskDataset;
use crate::rng::SeededRng;
use crate::scalar::Scalar;
use crate::trainer::evaluate_all_tasks;

/// Log-variance given to removed parameters; `exp` of it is exactly zero.
pub const PRUNED_RHO: f64 = -1e4;

#[derive(Clone, Debug, PartialEq)]
pub struct UnitDiagnostics {
    pub layer: usize,
    pub unit: usize,
    pub fan_in: usize,
    /// KL of the incoming weights to `N(0, 1)`, summed over the fan-in.
    pub input_kl: f64,
    pub out_signal: f64,
    /// Per-head `out_signal`, top hidden layer only.
    pub head_signals: Vec<f64>,
    /// L2 change of the incoming means since the previous snapshot.
    pub input_drift: Option<f64>,
}

impl UnitDiagnostics {
    pub fn input_kl_per_weight(&self) -> f64 {
        self.input_kl / self.fan_in as f64
    }
}

fn row_signal<T: Scalar>(layer: &FrozenLayer<T>, unit: usize) -> f64 {
    let mu = layer.weight.mu().row(unit);
    let rho = layer.weight.rho().row(unit);
    mu.iter()
        .zip(rho)
        .map(|(&m, &r)| m.abs().as_f64() + (0.5 * r.as_f64()).exp())
        .fold(0.0, f64::max)
}

/// One record per hidden unit of `snapshot`, layer by layer.
pub fn compute_unit_diagnostics<T: Scalar>(
    snapshot: &PosteriorSnapshot<T>,
    previous: Option<&PosteriorSnapshot<T>>,
) -> Vec<UnitDiagnostics> {
    let body = snapshot.body();
    let mut out = Vec::new();
    for (l, layer) in body.iter().enumerate() {
        let (fan_in, width) = (layer.in_dim(), layer.out_dim());
        let mu = layer.weight.mu();
        let rho = layer.weight.rho();
        let prev_mu = previous
            .and_then(|p| p.body().get(l))
            .map(|p| p.weight.mu());
        for u in 0..width {
            let mut kl = 0.0;
            let mut drift = 0.0;
            for i in 0..fan_in {
                let (m, r) = (mu.get(i, u).as_f64(), rho.get(i, u).as_f64());
                kl += 0.5 * (r.exp() + m * m - 1.0 - r);
                if let Some(p) = prev_mu {
                    drift += (m - p.get(i, u).as_f64()).powi(2);
                }
            }
            let (out_signal, head_signals) = if l + 1 < body.len() {
                (row_signal(&body[l + 1], u), Vec::new())
            } else {
                let per_head: Vec<f64> =
                    snapshot.heads().iter().map(|h| row_signal(h, u)).collect();
                (per_head.iter().copied().fold(0.0, f64::max), per_head)
            };
            out.push(UnitDiagnostics {
                layer: l,
                unit: u,
                fan_in,
                input_kl: kl,
                out_signal,
                head_signals,
                input_drift: prev_mu.map(|_| drift.sqrt()),
            });
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PruneThresholds {
    pub delta_out: f64,
    /// Per fan-in weight, in nats.
    pub delta_kl: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerActivity {
    pub layer: usize,
    pub width: usize,
    pub active: Vec<usize>,
    pub pruned: Vec<usize>,
    /// Pruned units whose incoming weights are also within `delta_kl` of
    /// the prior.
    pub pruned_near_prior: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PruneReport {
    pub stage: SnapshotStage,
    pub thresholds: PruneThresholds,
    pub layers: Vec<LayerActivity>,
    /// Top-layer units active in more than one head.
    pub forward_transfer_units: usize,
    /// Filled by [`prune_and_verify`].
    pub accuracy_before: Vec<f64>,
    pub accuracy_after: Vec<f64>,
}

impl PruneReport {
    pub fn active_count(&self, layer: usize) -> usize {
        self.layers[layer].active.len()
    }

    pub fn total_active(&self) -> usize {
        self.layers.iter().map(|l| l.active.len()).sum()
    }

    pub fn is_verified(&self) -> bool {
        !self.accuracy_before.is_empty()
    }

    /// Per-task `|after − before|`.
    pub fn accuracy_deltas(&self) -> Vec<f64> {
        self.accuracy_before
            .iter()
            .zip(&self.accuracy_after)
            .map(|(b, a)| (a - b).abs())
            .collect()
    }

    pub fn max_abs_delta(&self) -> f64 {
        self.accuracy_deltas().into_iter().fold(0.0, f64::max)
    }

    pub fn summary(&self) -> String {
        let mut s = String::new();
        for l in &self.layers {
            let _ = write!(
                s,
                "layer {}: {}/{} active; ",
                l.layer,
                l.active.len(),
                l.width
            );
        }
        let _ = write!(s, "forward-transfer units {}", self.forward_transfer_units);
        if self.is_verified() {
            let _ = write!(s, "; max |Δacc| after pruning {:.4}", self.max_abs_delta());
        }
        s
    }
}

/// Classifies every unit: pruned iff `out_signal < delta_out`.
pub fn detect_active_units(
    stage: SnapshotStage,
    diags: &[UnitDiagnostics],
    thresholds: &PruneThresholds,
) -> PruneReport {
    let n_layers = diags.iter().map(|d| d.layer + 1).max().unwrap_or(0);
    let mut layers: Vec<LayerActivity> = (0..n_layers)
        .map(|layer| LayerActivity {
            layer,
            width: 0,
            active: Vec::new(),
            pruned: Vec::new(),
            pruned_near_prior: 0,
        })
        .collect();
    let mut forward_transfer_units = 0;
    for d in diags {
        let entry = &mut layers[d.layer];
        entry.width += 1;
        if d.out_signal < thresholds.delta_out {
            entry.pruned.push(d.unit);
            if d.input_kl_per_weight() < thresholds.delta_kl {
                entry.pruned_near_prior += 1;
            }
        } else {
            entry.active.push(d.unit);
        }
        let heads_used = d
            .head_signals
            .iter()
            .filter(|&&s| s >= thresholds.delta_out)
            .count();
        forward_transfer_units += usize::from(heads_used > 1);
    }
    PruneReport {
        stage,
        thresholds: *thresholds,
        layers,
        forward_transfer_units,
        accuracy_before: Vec::new(),
        accuracy_after: Vec::new(),
    }
}

fn remove_column<T: Scalar>(block: &mut GaussianBlock<T>, col: usize) {
    for r in 0..block.mu.rows() {
        block.mu.set(r, col, T::zero());
        block.rho.set(r, col, T::of(PRUNED_RHO));
    }
}

fn remove_row<T: Scalar>(block: &mut GaussianBlock<T>, row: usize) {
    block.mu.row_mut(row).fill(T::zero());
    block.rho.row_mut(row).fill(T::of(PRUNED_RHO));
}

fn remove_unit<T: Scalar>(layer: &mut MeanFieldLayer<T>, unit: usize) {
    remove_column(&mut layer.weight, unit);
    remove_column(&mut layer.bias, unit);
}

/// Copy of `snapshot` with every pruned unit disconnected: incoming and
/// outgoing weights get zero mean and zero variance.
pub fn pruned_network<T: Scalar>(
    snapshot: &PosteriorSnapshot<T>,
    report: &PruneReport,
) -> Result<BayesianNetwork<T>> {
    let mut net = snapshot.to_network();
    let depth = net.body().len();
    for activity in &report.layers {
        let l = activity.layer;
        for &u in &activity.pruned {
            remove_unit(&mut net.body_mut()[l], u);
            if l + 1 < depth {
                remove_row(&mut net.body_mut()[l + 1].weight, u);
            } else {
                for h in 0..net.n_heads() {
                    remove_row(&mut net.head_mut(h)?.weight, u);
                }
            }
        }
    }
    Ok(net)
}

/// Evaluates `snapshot` with and without its pruned units on the same noise
/// and records both accuracy rows in `report`. Returns the per-task
/// absolute changes.
pub fn prune_and_verify<T: Scalar>(
    snapshot: &PosteriorSnapshot<T>,
    report: &mut PruneReport,
    tasks: &[TaskDataset<T>],
    n_eval_samples: usize,
    rng: &mut SeededRng,
    mode: PredictiveMode,
) -> Result<Vec<f64>> {
    let full = snapshot.to_network();
    let pruned = pruned_network(snapshot, report)?;
    report.accuracy_before =
        evaluate_all_tasks(&full, tasks, n_eval_samples, &mut rng.clone(), mode)?;
    report.accuracy_after = evaluate_all_tasks(&pruned, tasks, n_eval_samples, rng, mode)?;
    Ok(report.accuracy_deltas())
}

fn layer_names<T: Scalar>(snapshot: &PosteriorSnapshot<T>) -> Vec<(String, &FrozenLayer<T>)> {
    let body = snapshot
        .body()
        .iter()
        .enumerate()
        .map(|(i, l)| (format!("body.{i}"), l));
    let heads = snapshot
        .heads()
        .iter()
        .enumerate()
        .map(|(i, l)| (format!("head.{i}"), l));
    body.chain(heads).collect()
}

fn fmt_exact<T: Scalar>(v: T) -> String {
    format!("{:.*e}", T::ROUND_TRIP_DIGITS - 1, v)
}

/// Writes one CSV per layer plus `manifest.txt` into `dir`.
///
/// Layer CSVs have columns `row_index,col_index,mu,sigma2`; weights use
/// `row_index < in_dim`, the bias is stored as the extra row
/// `row_index = in_dim`.
pub fn export_weight_snapshot<T: Scalar>(
    snapshot: &PosteriorSnapshot<T>,
    dir: &Path,
) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut manifest = format!("stage = {}\n", snapshot.stage());
    for (name, layer) in layer_names(snapshot) {
        let file = format!("{name}.csv");
        let _ = writeln!(
            manifest,
            "layer = {name} {} {} {file}",
            layer.in_dim(),
            layer.out_dim()
        );
        let path = dir.join(&file);
        let f = std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        let mut w = BufWriter::new(f);
        let io = |e| Error::io(&path, e);
        writeln!(w, "row_index,col_index,mu,sigma2").map_err(io)?;
        let in_dim = layer.in_dim();
        for (block, row_offset) in [(&layer.weight, 0), (&layer.bias, in_dim)] {
            let (mu, var) = (block.mu(), block.variance());
            for r in 0..mu.rows() {
                for c in 0..mu.cols() {
                    writeln!(
                        w,
                        "{},{c},{},{}",
                        r + row_offset,
                        fmt_exact(mu.get(r, c)),
                        fmt_exact(var.get(r, c))
                    )
                    .map_err(io)?;
                }
            }
        }
        w.flush().map_err(io)?;
    }
    let path = dir.join("manifest.txt");
    std::fs::write(&path, manifest).map_err(|e| Error::io(&path, e))
}

/// Raw `(mu, sigma2)` matrices of one exported layer: weights, then bias.
pub type ExportedLayer<T> = (String, [(Matrix<T>, Matrix<T>); 2]);

fn parse_value<T: Scalar>(field: Option<&str>, path: &Path, line: usize) -> Result<T> {
    field
        .and_then(|f| f.trim().parse::<T>().ok())
        .ok_or_else(|| Error::Config(format!("{}:{line}: malformed snapshot row", path.display())))
}

fn read_layer_csv<T: Scalar>(
    path: &Path,
    in_dim: usize,
    out_dim: usize,
) -> Result<[(Matrix<T>, Matrix<T>); 2]> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut w = (
        Matrix::zeros(in_dim, out_dim),
        Matrix::zeros(in_dim, out_dim),
    );
    let mut b = (Matrix::zeros(1, out_dim), Matrix::zeros(1, out_dim));
    let mut seen = 0usize;
    for (n, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let mut fields = line.split(',');
        let r: usize = parse_value::<f64>(fields.next(), path, n + 1)? as usize;
        let c: usize = parse_value::<f64>(fields.next(), path, n + 1)? as usize;
        let mu: T = parse_value(fields.next(), path, n + 1)?;
        let var: T = parse_value(fields.next(), path, n + 1)?;
        let target = if r < in_dim {
            (&mut w, r)
        } else if r == in_dim {
            (&mut b, 0)
        } else {
            return Err(Error::Config(format!(
                "{}:{}: row {r} out of range",
                path.display(),
                n + 1
            )));
        };
        if c >= out_dim {
            return Err(Error::Config(format!(
                "{}:{}: column {c} out of range",
                path.display(),
                n + 1
            )));
        }
        target.0 .0.set(target.1, c, mu);
        target.0 .1.set(target.1, c, var);
        seen += 1;
    }
    if seen != (in_dim + 1) * out_dim {
        return Err(Error::Config(format!(
            "{}: expected {} rows, found {seen}",
            path.display(),
            (in_dim + 1) * out_dim
        )));
    }
    Ok([w, b])
}

/// Reads the exact `(mu, sigma2)` values written by
/// [`export_weight_snapshot`], layer by layer, with the stage.
pub fn read_weight_export<T: Scalar>(dir: &Path) -> Result<(SnapshotStage, Vec<ExportedLayer<T>>)> {
    let path = dir.join("manifest.txt");
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let mut stage = None;
    let mut layers = Vec::new();
    for line in text.lines() {
        let Some((key, value)) = line.split_once('=') else {
            continue;
        };
        match key.trim() {
            "stage" => stage = Some(value.trim().parse()?),
            "layer" => {
                let parts: Vec<&str> = value.split_whitespace().collect();
                let [name, rows, cols, file] = parts[..] else {
                    return Err(Error::Config(format!(
                        "{}: bad layer line {line:?}",
                        path.display()
                    )));
                };
                let dims = |s: &str| {
                    s.parse::<usize>().map_err(|_| {
                        Error::Config(format!("{}: bad dimension {s:?}", path.display()))
                    })
                };
                let blocks = read_layer_csv(&dir.join(file), dims(rows)?, dims(cols)?)?;
                layers.push((name.to_string(), blocks));
            }
            _ => {}
        }
    }
    let stage = stage.ok_or_else(|| Error::Config(format!("{}: missing stage", path.display())))?;
    Ok((stage, layers))
}

/// Rebuilds a snapshot from an export (`ρ = ln σ²`).
pub fn read_weight_snapshot<T: Scalar>(dir: &Path) -> Result<PosteriorSnapshot<T>> {
    let (stage, layers) = read_weight_export::<T>(dir)?;
    let mut body = Vec::new();
    let mut heads = Vec::new();
    for (name, [(wm, wv), (bm, bv)]) in layers {
        let layer = FrozenLayer::freeze(&MeanFieldLayer {
            weight: GaussianBlock {
                mu: wm,
                rho: wv.map(T::ln),
            },
            bias: GaussianBlock {
                mu: bm,
                rho: bv.map(T::ln),
            },
        });
        if name.starts_with("body.") {
            body.push(layer);
        } else if name.starts_with("head.") {
            heads.push(layer);
        } else {
            return Err(Error::Config(format!("unknown layer name {name:?}")));
        }
    }
    PosteriorSnapshot::from_layers(stage, body, heads)
}

pub const PRUNE_REPORT_HEADER: &str = "run,stage,layer,unit,out_signal,input_kl,active_flag\n";
pub const PRUNE_ACCURACY_HEADER: &str = "run,stage,task,accuracy_before,accuracy_after,abs_delta\n";
pub const UNIT_DIAGNOSTICS_HEADER: &str =
    "run,stage,layer,unit,fan_in,input_kl,input_kl_per_weight,out_signal,input_drift,head_signals\n";

pub fn prune_report_rows(run: usize, report: &PruneReport, diags: &[UnitDiagnostics]) -> String {
    let mut out = String::new();
    for d in diags {
        let active = report.layers[d.layer].active.binary_search(&d.unit).is_ok();
        let _ = writeln!(
            out,
            "{run},{},{},{},{:.6e},{:.6e},{}",
            report.stage,
            d.layer,
            d.unit,
            d.out_signal,
            d.input_kl,
            u8::from(active)
        );
    }
    out
}

pub fn prune_accuracy_rows(run: usize, report: &PruneReport) -> String {
    let mut out = String::new();
    for (k, (b, a)) in report
        .accuracy_before
        .iter()
        .zip(&report.accuracy_after)
        .enumerate()
    {
        let _ = writeln!(
            out,
            "{run},{},{},{b:.6},{a:.6},{:.6}",
            report.stage,
            k + 1,
            (a - b).abs()
        );
    }
    out
}

pub fn unit_diagnostics_rows(
    run: usize,
    stage: SnapshotStage,
    diags: &[UnitDiagnostics],
) -> String {
    let mut out = String::new();
    for d in diags {
        let heads: Vec<String> = d.head_signals.iter().map(|s| format!("{s:.6e}")).collect();
        let _ = writeln!(
            out,
            "{run},{stage},{},{},{},{:.6e},{:.6e},{:.6e},{},{}",
            d.layer,
            d.unit,
            d.fan_in,
            d.input_kl,
            d.input_kl_per_weight(),
            d.out_signal,
            d.input_drift
                .map(|v| format!("{v:.6e}"))
                .unwrap_or_default(),
            heads.join(";")
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mnist::{Benchmark, ExampleSet, TaskSpec};

    fn trained_like(seed: u64) -> PosteriorSnapshot<f64> {
        let mut rng = SeededRng::new(seed);
        let mut net = BayesianNetwork::new(6, &[5, 4], 3, 2);
        for l in net.body_mut() {
            l.reinitialise(&mut rng, 0.5, 0.01);
        }
        for h in 0..2 {
            net.head_mut(h).unwrap().reinitialise(&mut rng, 0.5, 0.01);
        }
        PosteriorSnapshot::capture(&net, SnapshotStage::AfterTask(2))
    }

    fn toy_tasks(seed: u64) -> Vec<TaskDataset<f64>> {
        let mut rng = SeededRng::new(seed);
        (0..2)
            .map(|h| {
                let x = Matrix::from_fn(40, 6, |_, _| rng.uniform());
                let y: Vec<usize> = (0..40).map(|_| rng.below(3)).collect();
                let set = ExampleSet::from_matrix(x, y);
                TaskDataset {
                    spec: TaskSpec {
                        benchmark: Benchmark::Split,
                        task_index: h + 1,
                        digits: None,
                        permutation: None,
                        head_id: h,
                    },
                    n_classes: 3,
                    train: set.clone(),
                    test: set,
                }
            })
            .collect()
    }

    #[test]
    fn prior_unit_has_zero_input_kl() {
        let net = BayesianNetwork::<f64>::new(4, &[3], 2, 1);
        let snap = PosteriorSnapshot::standard_prior(&net);
        let diags = compute_unit_diagnostics(&snap, None);
        assert_eq!(diags.len(), 3);
        assert!(diags
            .iter()
            .all(|d| d.input_kl == 0.0 && d.input_drift.is_none()));
        // Outgoing weights at N(0, 1): |0| + 1.
        assert!(diags.iter().all(|d| d.out_signal == 1.0));
    }

    #[test]
    fn collapsed_outputs_give_tiny_signal() {
        let mut net = BayesianNetwork::<f64>::new(4, &[3], 2, 1);
        let head = net.head_mut(0).unwrap();
        head.weight.rho.row_mut(1).fill(1e-8f64.ln());
        let snap = PosteriorSnapshot::capture(&net, SnapshotStage::AfterTask(1));
        let d = &compute_unit_diagnostics(&snap, None)[1];
        assert!((d.out_signal - 1e-4).abs() < 1e-12, "{}", d.out_signal);
    }

    #[test]
    fn input_kl_matches_closed_form() {
        let snap = trained_like(3);
        let diags = compute_unit_diagnostics(&snap, None);
        let w = &snap.body()[1].weight;
        let d = &diags[5 + 2];
        assert_eq!((d.layer, d.unit, d.fan_in), (1, 2, 5));
        let col = |m: &Matrix<f64>| (0..5).map(|i| m.get(i, 2)).collect::<Vec<_>>();
        let expect = crate::objective::kl_diag_gaussians(
            &col(w.mu()),
            &col(&w.variance()),
            &[0.0; 5],
            &[1.0; 5],
        )
        .unwrap();
        assert!((d.input_kl - expect).abs() < 1e-12);
    }

    #[test]
    fn infinite_threshold_prunes_everything() {
        let snap = trained_like(4);
        let diags = compute_unit_diagnostics(&snap, None);
        let t = PruneThresholds {
            delta_out: f64::INFINITY,
            delta_kl: 0.1,
        };
        let r = detect_active_units(snap.stage(), &diags, &t);
        assert_eq!(r.total_active(), 0);
        assert_eq!(r.layers.iter().map(|l| l.pruned.len()).sum::<usize>(), 9);
    }

    #[test]
    fn active_count_is_monotone_in_threshold() {
        let snap = trained_like(5);
        let diags = compute_unit_diagnostics(&snap, None);
        let mut last = usize::MAX;
        for k in 0..40 {
            let t = PruneThresholds {
                delta_out: 0.05 * k as f64,
                delta_kl: 0.1,
            };
            let r = detect_active_units(snap.stage(), &diags, &t);
            for l in &r.layers {
                let mut all: Vec<usize> = l.active.iter().chain(&l.pruned).copied().collect();
                all.sort_unstable();
                assert_eq!(all, (0..l.width).collect::<Vec<_>>());
            }
            assert!(r.total_active() <= last);
            last = r.total_active();
        }
    }

    #[test]
    fn pruning_nothing_changes_nothing() {
        let snap = trained_like(6);
        let tasks = toy_tasks(7);
        let diags = compute_unit_diagnostics(&snap, None);
        let t = PruneThresholds {
            delta_out: 0.0,
            delta_kl: 0.1,
        };
        let mut r = detect_active_units(snap.stage(), &diags, &t);
        let deltas = prune_and_verify(
            &snap,
            &mut r,
            &tasks,
            20,
            &mut SeededRng::new(1),
            PredictiveMode::MonteCarlo,
        )
        .unwrap();
        assert_eq!(deltas, vec![0.0, 0.0]);
    }

    #[test]
    fn pruned_unit_is_disconnected() {
        let snap = trained_like(8);
        let diags = compute_unit_diagnostics(&snap, None);
        let mut r = detect_active_units(
            snap.stage(),
            &diags,
            &PruneThresholds {
                delta_out: 0.0,
                delta_kl: 0.1,
            },
        );
        r.layers[1].active.retain(|&u| u != 3);
        r.layers[1].pruned.push(3);
        let net = pruned_network(&snap, &r).unwrap();
        let x = Matrix::from_fn(10, 6, |i, j| (i * j) as f64 / 10.0);
        let mut altered = snap.to_network();
        for h in 0..2 {
            let head = altered.head_mut(h).unwrap();
            head.weight.mu.row_mut(3).fill(0.0);
        }
        for h in 0..2 {
            // Deterministic paths agree with simply zeroing the outgoing means.
            assert_eq!(
                net.mean_logits(&x, h).unwrap(),
                altered.mean_logits(&x, h).unwrap()
            );
        }
        assert!(net
            .heads()
            .iter()
            .all(|h| h.weight.rho.row(3).iter().all(|&r| r.exp() == 0.0)));
    }

    #[test]
    fn snapshot_export_round_trips_exactly() {
        let snap = trained_like(9);
        let dir = tempfile::tempdir().unwrap();
        export_weight_snapshot(&snap, dir.path()).unwrap();
        let (stage, layers) = read_weight_export::<f64>(dir.path()).unwrap();
        assert_eq!(stage, snap.stage());
        let names: Vec<&str> = layers.iter().map(|(n, _)| n.as_str()).collect();
        assert_eq!(names, ["body.0", "body.1", "head.0", "head.1"]);
        for ((_, blocks), frozen) in layers.iter().zip(snap.body().iter().chain(snap.heads())) {
            for ((mu, var), fb) in blocks.iter().zip(frozen.blocks()) {
                assert_eq!(mu, fb.mu());
                assert_eq!(var, &fb.variance());
            }
        }
        let back = read_weight_snapshot::<f64>(dir.path()).unwrap();
        assert_eq!(back.hidden_widths(), &[5, 4]);
        assert_eq!(back.heads().len(), 2);
    }

    #[test]
    fn export_row_count_follows_shapes() {
        let net = BayesianNetwork::<f64>::new(784, &[200], 2, 1);
        let snap = PosteriorSnapshot::standard_prior(&net);
        let dir = tempfile::tempdir().unwrap();
        export_weight_snapshot(&snap, dir.path()).unwrap();
        let text = std::fs::read_to_string(dir.path().join("body.0.csv")).unwrap();
        assert_eq!(text.lines().count() - 1, 784 * 200 + 200);
    }

    #[test]
    fn truncated_export_is_rejected() {
        let snap = trained_like(10);
        let dir = tempfile::tempdir().unwrap();
        export_weight_snapshot(&snap, dir.path()).unwrap();
        let p = dir.path().join("head.1.csv");
        let text = std::fs::read_to_string(&p).unwrap();
        let cut: Vec<&str> = text.lines().take(4).collect();
        std::fs::write(&p, cut.join("\n")).unwrap();
        assert!(read_weight_export::<f64>(dir.path()).is_err());
    }
}
