//! The per-task variational objective and its gradients.
//!
//! For task data of size `N_t` and a minibatch of size `B` the objective is
//!
//! ```text
//! ELBO = (N_t / B) · Σ_batch mean_s log p(y | θ_s, x)  −  KL(q ‖ prior)
//! ```
//!
//! where the KL between diagonal Gaussians is evaluated in closed form and
//! applied once per minibatch. Gradients are taken with respect to the
//! means and log-variances of every in-scope layer: the whole body plus the
//! heads that appear in the batch. Other heads contribute neither KL nor
//! gradient.

use std::collections::BTreeSet;
use std::fmt;

use crate::bnn::{
    BayesianNetwork, FrozenBlock, FrozenLayer, GaussianBlock, MeanFieldLayer, PosteriorSnapshot,
};
use crate::error::{Error, Result};
use crate::matrix::{log_softmax_in_place, Matrix};
use crate::rng::SeededRng;
use crate::scalar::Scalar;

/// `Σ ½[q_var/p_var + (q_mu − p_mu)²/p_var − 1 + ln p_var − ln q_var]`.
pub fn kl_diag_gaussians<T: Scalar>(q_mu: &[T], q_var: &[T], p_mu: &[T], p_var: &[T]) -> Result<T> {
    let n = q_mu.len();
    if q_var.len() != n || p_mu.len() != n || p_var.len() != n {
        return Err(Error::Shape {
            op: "kl_diag_gaussians",
            left_rows: n,
            left_cols: q_var.len(),
            right_rows: p_mu.len(),
            right_cols: p_var.len(),
        });
    }
    let half = T::of(0.5);
    let mut total = T::zero();
    for i in 0..n {
        let (qv, pv) = (q_var[i], p_var[i]);
        if qv.is_nan() || pv.is_nan() || qv <= T::zero() || pv <= T::zero() {
            return Err(Error::Config(format!(
                "non-positive variance at index {i} (q={qv}, p={pv})"
            )));
        }
        let d = q_mu[i] - p_mu[i];
        total += half * (qv / pv + d * d / pv - T::one() + pv.ln() - qv.ln());
    }
    Ok(total)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum LayerId {
    Body(usize),
    Head(usize),
}

impl fmt::Display for LayerId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LayerId::Body(i) => write!(f, "body.{i}"),
            LayerId::Head(h) => write!(f, "head.{h}"),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ElboBreakdown<T> {
    /// Likelihood term scaled to a full-task estimate.
    pub expected_log_lik: T,
    pub kl_total: T,
    pub kl_per_layer: Vec<(LayerId, T)>,
    pub elbo: T,
}

/// Partials of `−ELBO` for every in-scope layer, in `.mu` / `.rho`.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientSet<T> {
    pub body: Vec<MeanFieldLayer<T>>,
    pub heads: Vec<(usize, MeanFieldLayer<T>)>,
}

impl<T: Scalar> GradientSet<T> {
    pub fn layers(&self) -> impl Iterator<Item = (LayerId, &MeanFieldLayer<T>)> {
        self.body
            .iter()
            .enumerate()
            .map(|(i, l)| (LayerId::Body(i), l))
            .chain(self.heads.iter().map(|(h, l)| (LayerId::Head(*h), l)))
    }

    pub fn layers_mut(&mut self) -> impl Iterator<Item = (LayerId, &mut MeanFieldLayer<T>)> {
        self.body
            .iter_mut()
            .enumerate()
            .map(|(i, l)| (LayerId::Body(i), l))
            .chain(self.heads.iter_mut().map(|(h, l)| (LayerId::Head(*h), l)))
    }

    pub fn get(&self, id: LayerId) -> Option<&MeanFieldLayer<T>> {
        match id {
            LayerId::Body(i) => self.body.get(i),
            LayerId::Head(h) => self.heads.iter().find(|(k, _)| *k == h).map(|(_, l)| l),
        }
    }

    /// First non-finite partial as `(layer, parameter name, flat index)`.
    pub fn first_non_finite(&self) -> Option<(LayerId, &'static str, usize)> {
        for (id, layer) in self.layers() {
            for (name, m) in named_matrices(layer) {
                if let Some(i) = m.data().iter().position(|v| !v.is_finite()) {
                    return Some((id, name, i));
                }
            }
        }
        None
    }
}

pub(crate) fn named_matrices<T>(layer: &MeanFieldLayer<T>) -> [(&'static str, &Matrix<T>); 4] {
    [
        ("weight.mu", &layer.weight.mu),
        ("weight.rho", &layer.weight.rho),
        ("bias.mu", &layer.bias.mu),
        ("bias.rho", &layer.bias.rho),
    ]
}

/// Examples routed through one output head.
#[derive(Clone, Copy, Debug)]
pub struct HeadBatch<'a, T> {
    pub head_id: usize,
    pub x: &'a Matrix<T>,
    pub y: &'a [usize],
}

impl<'a, T> HeadBatch<'a, T> {
    pub fn new(head_id: usize, x: &'a Matrix<T>, y: &'a [usize]) -> Self {
        Self { head_id, x, y }
    }
}

fn block_kl<T: Scalar>(
    q: &GaussianBlock<T>,
    p: &FrozenBlock<T>,
    grad: Option<&mut GaussianBlock<T>>,
) -> T {
    let half = T::of(0.5);
    let (qm, qr) = (q.mu.data(), q.rho.data());
    let (pm, pr, pinv) = (p.mu().data(), p.rho().data(), p.inv_var().data());
    let mut total = T::zero();
    match grad {
        Some(g) => {
            let (gm, gr) = (g.mu.data_mut(), g.rho.data_mut());
            for i in 0..qm.len() {
                let ratio = qr[i].exp() * pinv[i];
                let d = qm[i] - pm[i];
                total += half * (ratio + d * d * pinv[i] - T::one() + pr[i] - qr[i]);
                gm[i] += d * pinv[i];
                gr[i] += half * (ratio - T::one());
            }
        }
        None => {
            for i in 0..qm.len() {
                let ratio = qr[i].exp() * pinv[i];
                let d = qm[i] - pm[i];
                total += half * (ratio + d * d * pinv[i] - T::one() + pr[i] - qr[i]);
            }
        }
    }
    total
}

fn layer_kl<T: Scalar>(
    q: &MeanFieldLayer<T>,
    p: &FrozenLayer<T>,
    grad: Option<&mut MeanFieldLayer<T>>,
) -> Result<T> {
    if q.weight.mu.shape() != p.weight.mu().shape() || q.bias.mu.shape() != p.bias.mu().shape() {
        return Err(Error::Shape {
            op: "layer KL",
            left_rows: q.in_dim(),
            left_cols: q.out_dim(),
            right_rows: p.in_dim(),
            right_cols: p.out_dim(),
        });
    }
    Ok(match grad {
        Some(g) => {
            block_kl(&q.weight, &p.weight, Some(&mut g.weight))
                + block_kl(&q.bias, &p.bias, Some(&mut g.bias))
        }
        None => block_kl(&q.weight, &p.weight, None) + block_kl(&q.bias, &p.bias, None),
    })
}

fn heads_in_scope<T>(batches: &[HeadBatch<'_, T>]) -> Vec<usize> {
    batches
        .iter()
        .map(|b| b.head_id)
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect()
}

fn validate<T: Scalar>(
    net: &BayesianNetwork<T>,
    prior: &PosteriorSnapshot<T>,
    batches: &[HeadBatch<'_, T>],
) -> Result<usize> {
    let total: usize = batches.iter().map(|b| b.x.rows()).sum();
    if total == 0 {
        return Err(Error::EmptyBatch);
    }
    for b in batches {
        if b.x.rows() != b.y.len() {
            return Err(Error::Shape {
                op: "minibatch targets",
                left_rows: b.x.rows(),
                left_cols: b.x.cols(),
                right_rows: b.y.len(),
                right_cols: 1,
            });
        }
        net.head(b.head_id)?;
        if prior.head(b.head_id).is_none() {
            return Err(Error::Config(format!(
                "prior has no entry for head {}",
                b.head_id
            )));
        }
        if let Some(&y) = b.y.iter().find(|&&y| y >= net.n_classes()) {
            return Err(Error::Config(format!("target {y} out of range")));
        }
    }
    if prior.body().len() != net.body().len() {
        return Err(Error::Config(
            "prior body depth differs from network".into(),
        ));
    }
    Ok(total)
}

/// Minibatch estimate of the objective together with exact gradients of
/// `−ELBO` for the drawn noise.
pub fn minibatch_elbo<T: Scalar>(
    net: &BayesianNetwork<T>,
    prior: &PosteriorSnapshot<T>,
    batches: &[HeadBatch<'_, T>],
    n_total: usize,
    n_samples: usize,
    rng: &mut SeededRng,
) -> Result<(ElboBreakdown<T>, GradientSet<T>)> {
    let batch_size = validate(net, prior, batches)?;
    let scale = T::of(n_total as f64 / batch_size as f64);
    let inv_s = T::one() / T::of(n_samples as f64);
    let heads = heads_in_scope(batches);

    let mut grads = GradientSet {
        body: net.body().iter().map(MeanFieldLayer::zeros_like).collect(),
        heads: heads
            .iter()
            .map(|&h| Ok((h, net.head(h)?.zeros_like())))
            .collect::<Result<_>>()?,
    };

    let mut log_lik = T::zero();
    for b in batches {
        if b.x.rows() == 0 {
            continue;
        }
        let pass = net.forward_samples(b.x, b.head_id, rng, n_samples)?;
        let mut grad_logits = pass.logits.clone();
        let rows = b.x.rows();
        // d(−ELBO)/dlogit = (scale / S)·(softmax − onehot)
        let coef = scale * inv_s;
        for r in 0..grad_logits.rows() {
            let row = grad_logits.row_mut(r);
            log_softmax_in_place(row);
            let y = b.y[r % rows];
            log_lik += row[y];
            for v in row.iter_mut() {
                *v = v.exp() * coef;
            }
            row[y] -= coef;
        }
        let (body_g, head_g) = net.backward(&pass, &grad_logits)?;
        for (acc, g) in grads.body.iter_mut().zip(&body_g) {
            add_layer(acc, g);
        }
        let slot = grads
            .heads
            .iter_mut()
            .find(|(h, _)| *h == b.head_id)
            .expect("head in scope");
        add_layer(&mut slot.1, &head_g);
    }

    let mut kl_per_layer = Vec::with_capacity(net.body().len() + heads.len());
    for (i, (q, p)) in net.body().iter().zip(prior.body()).enumerate() {
        kl_per_layer.push((LayerId::Body(i), layer_kl(q, p, Some(&mut grads.body[i]))?));
    }
    for (h, g) in grads.heads.iter_mut() {
        let q = net.head(*h)?;
        let p = prior.head(*h).expect("validated");
        kl_per_layer.push((LayerId::Head(*h), layer_kl(q, p, Some(g))?));
    }
    let breakdown = assemble(scale * inv_s * log_lik, kl_per_layer);
    if !breakdown.elbo.is_finite() {
        return Err(Error::NonFiniteObjective {
            step: 0,
            diagnostics: format!(
                "expected_log_lik={} kl_total={}",
                breakdown.expected_log_lik, breakdown.kl_total
            ),
        });
    }
    Ok((breakdown, grads))
}

/// The same estimate as [`minibatch_elbo`] without gradients.
pub fn evaluate_elbo<T: Scalar>(
    net: &BayesianNetwork<T>,
    prior: &PosteriorSnapshot<T>,
    batches: &[HeadBatch<'_, T>],
    n_total: usize,
    n_samples: usize,
    rng: &mut SeededRng,
) -> Result<ElboBreakdown<T>> {
    let batch_size = validate(net, prior, batches)?;
    let scale = T::of(n_total as f64 / batch_size as f64);
    let inv_s = T::one() / T::of(n_samples as f64);
    let mut log_lik = T::zero();
    for b in batches {
        if b.x.rows() == 0 {
            continue;
        }
        let pass = net.forward_samples(b.x, b.head_id, rng, n_samples)?;
        let mut logits = pass.logits;
        let rows = b.x.rows();
        for r in 0..logits.rows() {
            let row = logits.row_mut(r);
            log_softmax_in_place(row);
            log_lik += row[b.y[r % rows]];
        }
    }
    let mut kl_per_layer = Vec::new();
    for (i, (q, p)) in net.body().iter().zip(prior.body()).enumerate() {
        kl_per_layer.push((LayerId::Body(i), layer_kl(q, p, None)?));
    }
    for h in heads_in_scope(batches) {
        kl_per_layer.push((
            LayerId::Head(h),
            layer_kl(net.head(h)?, prior.head(h).expect("validated"), None)?,
        ));
    }
    Ok(assemble(scale * inv_s * log_lik, kl_per_layer))
}

fn assemble<T: Scalar>(expected_log_lik: T, kl_per_layer: Vec<(LayerId, T)>) -> ElboBreakdown<T> {
    let kl_total = kl_per_layer.iter().fold(T::zero(), |acc, (_, k)| acc + *k);
    ElboBreakdown {
        expected_log_lik,
        kl_total,
        kl_per_layer,
        elbo: expected_log_lik - kl_total,
    }
}

fn add_layer<T: Scalar>(acc: &mut MeanFieldLayer<T>, g: &MeanFieldLayer<T>) {
    for (a, b) in acc.blocks_mut().into_iter().zip(g.blocks()) {
        for (x, &y) in a.mu.data_mut().iter_mut().zip(b.mu.data()) {
            *x += y;
        }
        for (x, &y) in a.rho.data_mut().iter_mut().zip(b.rho.data()) {
            *x += y;
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    WeightMu,
    WeightRho,
    BiasMu,
    BiasRho,
}

impl ParamKind {
    pub const ALL: [ParamKind; 4] = [
        ParamKind::WeightMu,
        ParamKind::WeightRho,
        ParamKind::BiasMu,
        ParamKind::BiasRho,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ParamKind::WeightMu => "weight.mu",
            ParamKind::WeightRho => "weight.rho",
            ParamKind::BiasMu => "bias.mu",
            ParamKind::BiasRho => "bias.rho",
        }
    }

    pub fn select<T>(self, layer: &MeanFieldLayer<T>) -> &Matrix<T> {
        match self {
            ParamKind::WeightMu => &layer.weight.mu,
            ParamKind::WeightRho => &layer.weight.rho,
            ParamKind::BiasMu => &layer.bias.mu,
            ParamKind::BiasRho => &layer.bias.rho,
        }
    }

    pub fn select_mut<T>(self, layer: &mut MeanFieldLayer<T>) -> &mut Matrix<T> {
        match self {
            ParamKind::WeightMu => &mut layer.weight.mu,
            ParamKind::WeightRho => &mut layer.weight.rho,
            ParamKind::BiasMu => &mut layer.bias.mu,
            ParamKind::BiasRho => &mut layer.bias.rho,
        }
    }
}

/// One scalar variational parameter.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamCoord {
    pub layer: LayerId,
    pub kind: ParamKind,
    pub row: usize,
    pub col: usize,
}

impl fmt::Display for ParamCoord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}.{}[{},{}]",
            self.layer,
            self.kind.as_str(),
            self.row,
            self.col
        )
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    /// Central-difference step.
    pub h: f64,
    /// Seed of the noise stream, re-used for every evaluation.
    pub sample_seed: u64,
    pub n_samples: usize,
    /// Number of coordinates compared (at least two per parameter tensor).
    pub n_coords: usize,
    pub coord_seed: u64,
    /// Denominator floor of the relative error.
    pub floor: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            h: 1e-5,
            sample_seed: 0x5eed,
            n_samples: 2,
            n_coords: 256,
            coord_seed: 0xc00d,
            floor: GRADCHECK_FLOOR,
        }
    }
}

/// Relative errors are `|a − n| / max(|a|, |n|, floor)`. The floor keeps
/// coordinates whose true partial is near zero from amplifying the
/// `O(ulp(f)/h)` rounding noise of the difference quotient.
pub const GRADCHECK_FLOOR: f64 = 1e-2;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst: ParamCoord,
    pub analytic: f64,
    pub numeric: f64,
    pub n_checked: usize,
}

/// Compares analytic gradients against central differences of the same
/// objective with identical noise and batch.
pub fn finite_difference_check<T: Scalar>(
    net: &BayesianNetwork<T>,
    prior: &PosteriorSnapshot<T>,
    batches: &[HeadBatch<'_, T>],
    n_total: usize,
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport> {
    finite_difference_check_with(net, prior, batches, n_total, cfg, |_| {})
}

/// As [`finite_difference_check`], with `tamper` applied to the analytic
/// gradients before comparison.
pub fn finite_difference_check_with<T: Scalar>(
    net: &BayesianNetwork<T>,
    prior: &PosteriorSnapshot<T>,
    batches: &[HeadBatch<'_, T>],
    n_total: usize,
    cfg: &GradCheckConfig,
    tamper: impl FnOnce(&mut GradientSet<T>),
) -> Result<GradCheckReport> {
    let (_, mut grads) = minibatch_elbo(
        net,
        prior,
        batches,
        n_total,
        cfg.n_samples,
        &mut SeededRng::new(cfg.sample_seed),
    )?;
    tamper(&mut grads);

    let coords = sample_coords(&grads, cfg.n_coords, cfg.coord_seed);
    let mut probe = net.clone();
    let h = T::of(cfg.h);
    let objective = |n: &BayesianNetwork<T>| -> Result<f64> {
        let e = evaluate_elbo(
            n,
            prior,
            batches,
            n_total,
            cfg.n_samples,
            &mut SeededRng::new(cfg.sample_seed),
        )?;
        Ok(-e.elbo.as_f64())
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: coords[0],
        analytic: 0.0,
        numeric: 0.0,
        n_checked: coords.len(),
    };
    for c in coords {
        let original = param_mut(&mut probe, c).map(|v| *v)?;
        *param_mut(&mut probe, c)? = original + h;
        let plus = objective(&probe)?;
        *param_mut(&mut probe, c)? = original - h;
        let minus = objective(&probe)?;
        *param_mut(&mut probe, c)? = original;
        let numeric = (plus - minus) / (2.0 * cfg.h);
        let layer = grads.get(c.layer).expect("coordinate from gradient set");
        let analytic = c.kind.select(layer).get(c.row, c.col).as_f64();
        let denom = analytic.abs().max(numeric.abs()).max(cfg.floor);
        let rel = (analytic - numeric).abs() / denom;
        if rel > report.max_rel_error || rel.is_nan() {
            report.max_rel_error = rel;
            report.worst = c;
            report.analytic = analytic;
            report.numeric = numeric;
        }
    }
    Ok(report)
}

fn param_mut<T: Scalar>(net: &mut BayesianNetwork<T>, c: ParamCoord) -> Result<&mut T> {
    let layer = match c.layer {
        LayerId::Body(i) => net
            .body_mut()
            .get_mut(i)
            .ok_or_else(|| Error::Config(format!("no body layer {i}")))?,
        LayerId::Head(h) => net.head_mut(h)?,
    };
    let m = c.kind.select_mut(layer);
    let cols = m.cols();
    Ok(&mut m.data_mut()[c.row * cols + c.col])
}

fn sample_coords<T: Scalar>(grads: &GradientSet<T>, n: usize, seed: u64) -> Vec<ParamCoord> {
    let mut rng = SeededRng::new(seed);
    let mut all = Vec::new();
    let mut picked = Vec::new();
    for (id, layer) in grads.layers() {
        for kind in ParamKind::ALL {
            let m = kind.select(layer);
            let coords: Vec<ParamCoord> = (0..m.rows())
                .flat_map(|r| (0..m.cols()).map(move |c| (r, c)))
                .map(|(row, col)| ParamCoord {
                    layer: id,
                    kind,
                    row,
                    col,
                })
                .collect();
            // Two guaranteed picks per tensor; the rest drawn uniformly.
            let mut order = coords.clone();
            rng.shuffle(&mut order);
            picked.extend(order.iter().take(2).copied());
            all.extend(order.into_iter().skip(2));
        }
    }
    rng.shuffle(&mut all);
    let extra = n.saturating_sub(picked.len());
    picked.extend(all.into_iter().take(extra));
    picked
}
