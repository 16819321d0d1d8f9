//! Mean-field Gaussian MLP with a shared ReLU body and per-task heads.
//!
//! Every weight and bias carries an independent Gaussian posterior with mean
//! `mu` and log-variance `rho` (`σ² = exp(ρ)`). Stochastic forward passes use
//! the local reparameterisation: for inputs `x` a layer's pre-activations are
//! sampled directly as `m + sqrt(v)·ε` with
//!
//! ```text
//! m = x·W_mu + b_mu        v = (x⊙x)·exp(W_rho) + exp(b_rho)
//! ```
//!
//! Monte-Carlo samples are stacked along rows: a pass with `S` samples over a
//! batch of `B` inputs produces `S·B` rows, sample `s` occupying rows
//! `s·B..(s+1)·B`. The first layer sees identical inputs for every sample,
//! so its moments are computed once and only the noise is tiled.

use crate::error::{Error, Result};
use crate::matrix::{gemm, log_softmax_in_place, logsumexp, Matrix, Op};
use crate::rng::SeededRng;
use crate::scalar::Scalar;

/// Mean and log-variance of a block of independent Gaussians.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianBlock<T> {
    pub mu: Matrix<T>,
    pub rho: Matrix<T>,
}

impl<T: Scalar> GaussianBlock<T> {
    /// Standard normal: `mu = 0`, `σ² = 1`.
    pub fn standard(rows: usize, cols: usize) -> Self {
        Self {
            mu: Matrix::zeros(rows, cols),
            rho: Matrix::zeros(rows, cols),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self::standard(self.mu.rows(), self.mu.cols())
    }

    pub fn variance(&self) -> Matrix<T> {
        self.rho.map(T::exp)
    }

    pub fn len(&self) -> usize {
        self.mu.data().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// One affine layer of variational parameters. Gradients reuse this shape,
/// with `.mu` and `.rho` holding the partials for each parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct MeanFieldLayer<T> {
    /// `in_dim × out_dim`.
    pub weight: GaussianBlock<T>,
    /// `1 × out_dim`.
    pub bias: GaussianBlock<T>,
}

impl<T: Scalar> MeanFieldLayer<T> {
    /// Layer at the standard-normal prior.
    pub fn standard(in_dim: usize, out_dim: usize) -> Self {
        Self {
            weight: GaussianBlock::standard(in_dim, out_dim),
            bias: GaussianBlock::standard(1, out_dim),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            weight: self.weight.zeros_like(),
            bias: self.bias.zeros_like(),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.mu.rows()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.mu.cols()
    }

    pub fn param_count(&self) -> usize {
        2 * (self.weight.len() + self.bias.len())
    }

    pub fn blocks(&self) -> [&GaussianBlock<T>; 2] {
        [&self.weight, &self.bias]
    }

    pub fn blocks_mut(&mut self) -> [&mut GaussianBlock<T>; 2] {
        [&mut self.weight, &mut self.bias]
    }

    /// Means drawn from `N(0, mean_std²)`, every variance set to `variance`.
    pub fn reinitialise(&mut self, rng: &mut SeededRng, mean_std: T, variance: T) {
        let rho = variance.ln();
        for block in self.blocks_mut() {
            rng.fill_standard_normal(block.mu.data_mut());
            block.mu.map_inplace(|z| z * mean_std);
            block.rho.map_inplace(|_| rho);
        }
    }

    /// Single local-reparameterised pass with fresh noise.
    pub fn local_reparam_forward(
        &self,
        x: &Matrix<T>,
        rng: &mut SeededRng,
    ) -> Result<(Matrix<T>, LayerTape<T>)> {
        self.check_input(x)?;
        let (a, tape) = self.forward_tiled(x, 1, &mut Noise::Rng(rng), true);
        Ok((a, tape.expect("tape requested")))
    }

    /// Local-reparameterised pass with caller-supplied noise `eps`
    /// (`x.rows() × out_dim`).
    pub fn forward_with_noise(&self, x: &Matrix<T>, eps: &Matrix<T>) -> Result<Matrix<T>> {
        self.check_input(x)?;
        if eps.shape() != (x.rows(), self.out_dim()) {
            return Err(Error::Shape {
                op: "forward_with_noise",
                left_rows: x.rows(),
                left_cols: self.out_dim(),
                right_rows: eps.rows(),
                right_cols: eps.cols(),
            });
        }
        Ok(self.forward_tiled(x, 1, &mut Noise::Fixed(eps), false).0)
    }

    /// Pre-activation mean and variance for inputs `x`.
    pub fn moments(&self, x: &Matrix<T>) -> Result<(Matrix<T>, Matrix<T>)> {
        self.check_input(x)?;
        let x_sq = x.map(|v| v * v);
        let w_var = self.weight.variance();
        let b_var = self.bias.variance();
        Ok(self.moments_with(x, &x_sq, &w_var, &b_var))
    }

    /// `x·W_mu + b_mu` with the mean weights only.
    pub fn mean_forward(&self, x: &Matrix<T>) -> Matrix<T> {
        let mut m = broadcast_rows(&self.bias.mu, x.rows());
        gemm(T::one(), x, Op::N, &self.weight.mu, Op::N, T::one(), &mut m);
        m
    }

    fn check_input(&self, x: &Matrix<T>) -> Result<()> {
        if x.cols() != self.in_dim() {
            return Err(Error::Shape {
                op: "layer forward",
                left_rows: x.rows(),
                left_cols: x.cols(),
                right_rows: self.in_dim(),
                right_cols: self.out_dim(),
            });
        }
        Ok(())
    }

    fn moments_with(
        &self,
        x: &Matrix<T>,
        x_sq: &Matrix<T>,
        w_var: &Matrix<T>,
        b_var: &Matrix<T>,
    ) -> (Matrix<T>, Matrix<T>) {
        let m = self.mean_forward(x);
        let mut v = broadcast_rows(b_var, x.rows());
        gemm(T::one(), x_sq, Op::N, w_var, Op::N, T::one(), &mut v);
        (m, v)
    }

    /// Output has `tile · x.rows()` rows: the moments of `x` repeated `tile`
    /// times, each copy with independent noise.
    fn forward_tiled(
        &self,
        x: &Matrix<T>,
        tile: usize,
        noise: &mut Noise<'_, T>,
        keep_tape: bool,
    ) -> (Matrix<T>, Option<LayerTape<T>>) {
        let x_sq = x.map(|v| v * v);
        let w_var = self.weight.variance();
        let b_var = self.bias.variance();
        let (m, v) = self.moments_with(x, &x_sq, &w_var, &b_var);
        let std = v.map(T::sqrt);
        let rows = x.rows();
        let out_dim = self.out_dim();
        let eps = noise.draw(rows * tile, out_dim);
        let mut a = Matrix::zeros(rows * tile, out_dim);
        {
            let (md, sd) = (m.data(), std.data());
            let block = rows * out_dim;
            for (s, chunk) in a.data_mut().chunks_mut(block).enumerate() {
                let e = &eps.data()[s * block..(s + 1) * block];
                for i in 0..block {
                    chunk[i] = md[i] + sd[i] * e[i];
                }
            }
        }
        let tape = keep_tape.then(|| LayerTape {
            input: x.clone(),
            input_sq: x_sq,
            std,
            eps,
            w_var,
            b_var,
            tile,
        });
        (a, tape)
    }

    /// Reverse pass for one layer given `grad_out` (`tile·rows × out`).
    /// Returns parameter gradients and, if requested, the input gradient.
    pub fn backward(
        &self,
        tape: &LayerTape<T>,
        grad_out: &Matrix<T>,
        want_input_grad: bool,
    ) -> (MeanFieldLayer<T>, Option<Matrix<T>>) {
        let rows = tape.input.rows();
        let out_dim = self.out_dim();
        let block = rows * out_dim;
        assert_eq!(
            grad_out.shape(),
            (rows * tape.tile, out_dim),
            "grad_out shape"
        );

        let mut dm = Matrix::zeros(rows, out_dim);
        let mut dv = Matrix::zeros(rows, out_dim);
        {
            let dmd = dm.data_mut();
            for chunk in grad_out.data().chunks(block) {
                for i in 0..block {
                    dmd[i] += chunk[i];
                }
            }
            let dvd = dv.data_mut();
            for (g, e) in grad_out
                .data()
                .chunks(block)
                .zip(tape.eps.data().chunks(block))
            {
                for i in 0..block {
                    dvd[i] += g[i] * e[i];
                }
            }
            let half = T::of(0.5);
            for (d, &s) in dvd.iter_mut().zip(tape.std.data()) {
                *d = *d * half / s;
            }
        }

        let mut grad = self.zeros_like();
        gemm(
            T::one(),
            &tape.input,
            Op::T,
            &dm,
            Op::N,
            T::zero(),
            &mut grad.weight.mu,
        );
        gemm(
            T::one(),
            &tape.input_sq,
            Op::T,
            &dv,
            Op::N,
            T::zero(),
            &mut grad.weight.rho,
        );
        for (g, &w) in grad.weight.rho.data_mut().iter_mut().zip(tape.w_var.data()) {
            *g *= w;
        }
        grad.bias.mu = dm.column_sums();
        grad.bias.rho = dv.column_sums();
        for (g, &b) in grad.bias.rho.data_mut().iter_mut().zip(tape.b_var.data()) {
            *g *= b;
        }

        let grad_in = want_input_grad.then(|| {
            let mut gx = Matrix::zeros(rows, self.in_dim());
            gemm(
                T::one(),
                &dm,
                Op::N,
                &self.weight.mu,
                Op::T,
                T::zero(),
                &mut gx,
            );
            let mut gv = Matrix::zeros(rows, self.in_dim());
            gemm(T::one(), &dv, Op::N, &tape.w_var, Op::T, T::zero(), &mut gv);
            let two = T::of(2.0);
            for ((g, &v), &x) in gx
                .data_mut()
                .iter_mut()
                .zip(gv.data())
                .zip(tape.input.data())
            {
                *g += two * x * v;
            }
            gx
        });
        (grad, grad_in)
    }
}

fn broadcast_rows<T: Scalar>(row: &Matrix<T>, rows: usize) -> Matrix<T> {
    let mut out = Matrix::zeros(rows, row.cols());
    for r in 0..rows {
        out.row_mut(r).copy_from_slice(row.data());
    }
    out
}

enum Noise<'a, T> {
    Rng(&'a mut SeededRng),
    Fixed(&'a Matrix<T>),
}

impl<T: Scalar> Noise<'_, T> {
    fn draw(&mut self, rows: usize, cols: usize) -> Matrix<T> {
        match self {
            Noise::Rng(rng) => crate::rng::sample_standard_normal(rng, rows, cols),
            Noise::Fixed(m) => (*m).clone(),
        }
    }
}

/// Values saved by a stochastic layer pass for its reverse pass.
#[derive(Clone, Debug)]
pub struct LayerTape<T> {
    input: Matrix<T>,
    input_sq: Matrix<T>,
    std: Matrix<T>,
    eps: Matrix<T>,
    w_var: Matrix<T>,
    b_var: Matrix<T>,
    tile: usize,
}

impl<T: Scalar> LayerTape<T> {
    pub fn noise(&self) -> &Matrix<T> {
        &self.eps
    }

    /// Pre-activation standard deviation `sqrt(v)`.
    pub fn std(&self) -> &Matrix<T> {
        &self.std
    }
}

/// How predictive probabilities are formed at evaluation time.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PredictiveMode {
    /// Average of softmax outputs over stochastic passes.
    MonteCarlo,
    /// Single deterministic pass with the posterior means.
    MeanWeights,
}

impl PredictiveMode {
    pub fn as_str(self) -> &'static str {
        match self {
            PredictiveMode::MonteCarlo => "monte-carlo",
            PredictiveMode::MeanWeights => "mean-weights",
        }
    }
}

impl std::str::FromStr for PredictiveMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "monte-carlo" => Ok(PredictiveMode::MonteCarlo),
            "mean-weights" => Ok(PredictiveMode::MeanWeights),
            other => Err(Error::Config(format!("unknown predictive mode {other:?}"))),
        }
    }
}

/// Shared ReLU body plus one output head per `head_id`.
#[derive(Clone, Debug, PartialEq)]
pub struct BayesianNetwork<T> {
    body: Vec<MeanFieldLayer<T>>,
    heads: Vec<MeanFieldLayer<T>>,
    input_dim: usize,
    hidden: Vec<usize>,
    n_classes: usize,
}

impl<T: Scalar> BayesianNetwork<T> {
    /// All parameters at the standard-normal prior.
    pub fn new(input_dim: usize, hidden: &[usize], n_classes: usize, n_heads: usize) -> Self {
        let mut dims = vec![input_dim];
        dims.extend_from_slice(hidden);
        let body = dims
            .windows(2)
            .map(|w| MeanFieldLayer::standard(w[0], w[1]))
            .collect();
        let top = *dims.last().expect("non-empty dims");
        Self {
            body,
            heads: (0..n_heads)
                .map(|_| MeanFieldLayer::standard(top, n_classes))
                .collect(),
            input_dim,
            hidden: hidden.to_vec(),
            n_classes,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn hidden_widths(&self) -> &[usize] {
        &self.hidden
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn top_width(&self) -> usize {
        self.hidden.last().copied().unwrap_or(self.input_dim)
    }

    pub fn body(&self) -> &[MeanFieldLayer<T>] {
        &self.body
    }

    pub fn body_mut(&mut self) -> &mut [MeanFieldLayer<T>] {
        &mut self.body
    }

    pub fn heads(&self) -> &[MeanFieldLayer<T>] {
        &self.heads
    }

    pub fn n_heads(&self) -> usize {
        self.heads.len()
    }

    pub fn head(&self, head_id: usize) -> Result<&MeanFieldLayer<T>> {
        self.heads.get(head_id).ok_or(Error::UnknownHead(head_id))
    }

    pub fn head_mut(&mut self, head_id: usize) -> Result<&mut MeanFieldLayer<T>> {
        self.heads
            .get_mut(head_id)
            .ok_or(Error::UnknownHead(head_id))
    }

    /// Adds standard-normal heads until `head_id` exists.
    pub fn ensure_head(&mut self, head_id: usize) {
        while self.heads.len() <= head_id {
            self.heads
                .push(MeanFieldLayer::standard(self.top_width(), self.n_classes));
        }
    }

    pub fn param_count(&self) -> usize {
        self.body
            .iter()
            .chain(&self.heads)
            .map(MeanFieldLayer::param_count)
            .sum()
    }

    /// `n_samples` independent stochastic passes through the body and the
    /// selected head, with tapes for the reverse pass.
    pub fn forward_samples(
        &self,
        x: &Matrix<T>,
        head_id: usize,
        rng: &mut SeededRng,
        n_samples: usize,
    ) -> Result<ForwardPass<T>> {
        let (logits, tapes) = self.forward_inner(x, head_id, rng, n_samples, true)?;
        Ok(ForwardPass {
            logits,
            tapes,
            batch: x.rows(),
            samples: n_samples,
            head_id,
        })
    }

    fn forward_inner(
        &self,
        x: &Matrix<T>,
        head_id: usize,
        rng: &mut SeededRng,
        n_samples: usize,
        keep_tape: bool,
    ) -> Result<(Matrix<T>, Vec<LayerTape<T>>)> {
        let head = self.head(head_id)?;
        if n_samples == 0 {
            return Err(Error::Config("n_samples must be at least 1".into()));
        }
        if x.cols() != self.input_dim {
            return Err(Error::Shape {
                op: "network forward",
                left_rows: x.rows(),
                left_cols: x.cols(),
                right_rows: self.input_dim,
                right_cols: self.top_width(),
            });
        }
        let mut tapes = Vec::with_capacity(self.body.len() + 1);
        let mut tile = n_samples;
        let mut h: Option<Matrix<T>> = None;
        for layer in &self.body {
            let input = h.as_ref().unwrap_or(x);
            let (mut a, tape) = layer.forward_tiled(input, tile, &mut Noise::Rng(rng), keep_tape);
            a.map_inplace(|v| if v > T::zero() { v } else { T::zero() });
            tapes.extend(tape);
            h = Some(a);
            tile = 1;
        }
        let input = h.as_ref().unwrap_or(x);
        let (logits, tape) = head.forward_tiled(input, tile, &mut Noise::Rng(rng), keep_tape);
        tapes.extend(tape);
        Ok((logits, tapes))
    }

    /// Reverse pass: gradients of a scalar with respect to every body layer
    /// and the head used in `pass`, given its gradient w.r.t. the logits.
    pub fn backward(
        &self,
        pass: &ForwardPass<T>,
        grad_logits: &Matrix<T>,
    ) -> Result<(Vec<MeanFieldLayer<T>>, MeanFieldLayer<T>)> {
        let head = self.head(pass.head_id)?;
        let n_body = self.body.len();
        let (head_grad, mut upstream) = head.backward(&pass.tapes[n_body], grad_logits, n_body > 0);
        let mut body_grads = Vec::with_capacity(n_body);
        for l in (0..n_body).rev() {
            let mut g = upstream.take().expect("input gradient requested");
            // ReLU: the next layer's saved input is this layer's activation.
            for (gi, &a) in g.data_mut().iter_mut().zip(pass.tapes[l + 1].input.data()) {
                if a <= T::zero() {
                    *gi = T::zero();
                }
            }
            let (grad, g_in) = self.body[l].backward(&pass.tapes[l], &g, l > 0);
            body_grads.push(grad);
            upstream = g_in;
        }
        body_grads.reverse();
        Ok((body_grads, head_grad))
    }

    /// Deterministic pass with the posterior means.
    pub fn mean_logits(&self, x: &Matrix<T>, head_id: usize) -> Result<Matrix<T>> {
        let head = self.head(head_id)?;
        let mut h = x.clone();
        for layer in &self.body {
            layer.check_input(&h)?;
            h = layer.mean_forward(&h);
            h.map_inplace(|v| if v > T::zero() { v } else { T::zero() });
        }
        head.check_input(&h)?;
        Ok(head.mean_forward(&h))
    }

    /// Log predictive class probabilities, one row per input.
    pub fn predictive_log_probs(
        &self,
        x: &Matrix<T>,
        head_id: usize,
        rng: &mut SeededRng,
        n_eval_samples: usize,
        mode: PredictiveMode,
    ) -> Result<Matrix<T>> {
        if mode == PredictiveMode::MeanWeights {
            let mut logits = self.mean_logits(x, head_id)?;
            for r in 0..logits.rows() {
                log_softmax_in_place(logits.row_mut(r));
            }
            return Ok(logits);
        }
        if n_eval_samples == 0 {
            return Err(Error::Config("n_eval_samples must be at least 1".into()));
        }
        let c = self.n_classes;
        let chunk = (16_384 / n_eval_samples).max(1);
        let ln_s = T::of(n_eval_samples as f64).ln();
        let mut out = Matrix::zeros(x.rows(), c);
        let mut start = 0;
        while start < x.rows() {
            let end = (start + chunk).min(x.rows());
            let idx: Vec<usize> = (start..end).collect();
            let xb = x.select_rows(&idx);
            let (mut logits, _) = self.forward_inner(&xb, head_id, rng, n_eval_samples, false)?;
            for r in 0..logits.rows() {
                log_softmax_in_place(logits.row_mut(r));
            }
            let b = end - start;
            let mut per_sample = vec![T::zero(); n_eval_samples];
            for i in 0..b {
                for k in 0..c {
                    for (s, slot) in per_sample.iter_mut().enumerate() {
                        *slot = logits.get(s * b + i, k);
                    }
                    out.set(start + i, k, logsumexp(&per_sample) - ln_s);
                }
            }
            start = end;
        }
        Ok(out)
    }
}

/// Stacked logits of a multi-sample pass plus the tapes to differentiate it.
#[derive(Clone, Debug)]
pub struct ForwardPass<T> {
    /// `samples·batch × classes`.
    pub logits: Matrix<T>,
    tapes: Vec<LayerTape<T>>,
    pub batch: usize,
    pub samples: usize,
    pub head_id: usize,
}

impl<T: Scalar> ForwardPass<T> {
    pub fn sample_logits(&self, s: usize) -> Matrix<T> {
        let idx: Vec<usize> = (s * self.batch..(s + 1) * self.batch).collect();
        self.logits.select_rows(&idx)
    }

    pub fn tapes(&self) -> &[LayerTape<T>] {
        &self.tapes
    }
}

/// Where a snapshot sits in the task chain.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SnapshotStage {
    Prior,
    AfterTask(usize),
}

impl std::fmt::Display for SnapshotStage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            SnapshotStage::Prior => write!(f, "prior"),
            SnapshotStage::AfterTask(t) => write!(f, "after-task-{t}"),
        }
    }
}

impl std::str::FromStr for SnapshotStage {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        if s == "prior" {
            return Ok(SnapshotStage::Prior);
        }
        s.strip_prefix("after-task-")
            .and_then(|t| t.parse().ok())
            .map(SnapshotStage::AfterTask)
            .ok_or_else(|| Error::Config(format!("bad snapshot stage {s:?}")))
    }
}

/// Read-only Gaussian block with its precision cached for KL evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct FrozenBlock<T> {
    mu: Matrix<T>,
    rho: Matrix<T>,
    inv_var: Matrix<T>,
}

impl<T: Scalar> FrozenBlock<T> {
    fn freeze(block: &GaussianBlock<T>) -> Self {
        Self {
            mu: block.mu.clone(),
            rho: block.rho.clone(),
            inv_var: block.rho.map(|r| (-r).exp()),
        }
    }

    pub fn mu(&self) -> &Matrix<T> {
        &self.mu
    }

    /// Log-variance.
    pub fn rho(&self) -> &Matrix<T> {
        &self.rho
    }

    pub fn variance(&self) -> Matrix<T> {
        self.rho.map(T::exp)
    }

    pub fn inv_var(&self) -> &Matrix<T> {
        &self.inv_var
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FrozenLayer<T> {
    pub weight: FrozenBlock<T>,
    pub bias: FrozenBlock<T>,
}

impl<T: Scalar> FrozenLayer<T> {
    pub fn freeze(layer: &MeanFieldLayer<T>) -> Self {
        Self {
            weight: FrozenBlock::freeze(&layer.weight),
            bias: FrozenBlock::freeze(&layer.bias),
        }
    }

    pub fn standard(in_dim: usize, out_dim: usize) -> Self {
        Self::freeze(&MeanFieldLayer::standard(in_dim, out_dim))
    }

    pub fn thaw(&self) -> MeanFieldLayer<T> {
        MeanFieldLayer {
            weight: GaussianBlock {
                mu: self.weight.mu.clone(),
                rho: self.weight.rho.clone(),
            },
            bias: GaussianBlock {
                mu: self.bias.mu.clone(),
                rho: self.bias.rho.clone(),
            },
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.mu.rows()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.mu.cols()
    }

    pub fn blocks(&self) -> [&FrozenBlock<T>; 2] {
        [&self.weight, &self.bias]
    }
}

/// Immutable copy of every variational parameter at a task boundary.
#[derive(Clone, Debug, PartialEq)]
pub struct PosteriorSnapshot<T> {
    stage: SnapshotStage,
    input_dim: usize,
    hidden: Vec<usize>,
    n_classes: usize,
    body: Vec<FrozenLayer<T>>,
    heads: Vec<FrozenLayer<T>>,
}

impl<T: Scalar> PosteriorSnapshot<T> {
    /// `p_0`: zero means and unit variances for every parameter of `net`.
    pub fn standard_prior(net: &BayesianNetwork<T>) -> Self {
        let fresh = BayesianNetwork::new(net.input_dim, &net.hidden, net.n_classes, net.n_heads());
        Self::capture(&fresh, SnapshotStage::Prior)
    }

    pub fn capture(net: &BayesianNetwork<T>, stage: SnapshotStage) -> Self {
        Self {
            stage,
            input_dim: net.input_dim,
            hidden: net.hidden.clone(),
            n_classes: net.n_classes,
            body: net.body.iter().map(FrozenLayer::freeze).collect(),
            heads: net.heads.iter().map(FrozenLayer::freeze).collect(),
        }
    }

    pub fn from_layers(
        stage: SnapshotStage,
        body: Vec<FrozenLayer<T>>,
        heads: Vec<FrozenLayer<T>>,
    ) -> Result<Self> {
        let first = body
            .first()
            .or(heads.first())
            .ok_or_else(|| Error::Config("snapshot needs at least one layer".into()))?;
        let input_dim = first.in_dim();
        let hidden: Vec<usize> = body.iter().map(FrozenLayer::out_dim).collect();
        let n_classes = heads.first().map_or(0, FrozenLayer::out_dim);
        let mut prev = input_dim;
        for l in &body {
            if l.in_dim() != prev {
                return Err(Error::Config("snapshot body layers do not chain".into()));
            }
            prev = l.out_dim();
        }
        if heads
            .iter()
            .any(|h| h.in_dim() != prev || h.out_dim() != n_classes)
        {
            return Err(Error::Config(
                "snapshot heads inconsistent with body".into(),
            ));
        }
        Ok(Self {
            stage,
            input_dim,
            hidden,
            n_classes,
            body,
            heads,
        })
    }

    pub fn stage(&self) -> SnapshotStage {
        self.stage
    }

    pub fn body(&self) -> &[FrozenLayer<T>] {
        &self.body
    }

    pub fn heads(&self) -> &[FrozenLayer<T>] {
        &self.heads
    }

    pub fn head(&self, head_id: usize) -> Option<&FrozenLayer<T>> {
        self.heads.get(head_id)
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn hidden_widths(&self) -> &[usize] {
        &self.hidden
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    /// Copy whose heads extend to `head_id`, new heads at the standard prior.
    pub fn with_standard_head(&self, head_id: usize) -> Self {
        let mut out = self.clone();
        let top = self.hidden.last().copied().unwrap_or(self.input_dim);
        while out.heads.len() <= head_id {
            out.heads.push(FrozenLayer::standard(top, self.n_classes));
        }
        out
    }

    /// Live network holding these parameters.
    pub fn to_network(&self) -> BayesianNetwork<T> {
        BayesianNetwork {
            body: self.body.iter().map(FrozenLayer::thaw).collect(),
            heads: self.heads.iter().map(FrozenLayer::thaw).collect(),
            input_dim: self.input_dim,
            hidden: self.hidden.clone(),
            n_classes: self.n_classes,
        }
    }
}
