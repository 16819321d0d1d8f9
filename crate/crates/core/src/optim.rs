//! Adam over every trainable mean and log-variance.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::bnn::{BayesianNetwork, MeanFieldLayer};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::objective::{GradientSet, LayerId, ParamKind};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Moment accumulators, created per layer on its first update.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub config: AdamConfig,
    step: u64,
    moments: BTreeMap<LayerId, (MeanFieldLayer<T>, MeanFieldLayer<T>)>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn second_moments(&self) -> impl Iterator<Item = &MeanFieldLayer<T>> {
        self.moments.values().map(|(_, v)| v)
    }

    /// One bias-corrected Adam update of `net` along `grads` (gradients of
    /// the loss to minimise). Non-finite gradients abort the step before
    /// any state changes.
    pub fn step(&mut self, net: &mut BayesianNetwork<T>, grads: &GradientSet<T>) -> Result<()> {
        if let Some((layer, what, index)) = grads.first_non_finite() {
            return Err(Error::NonFinite {
                what: format!("gradient {what}"),
                layer: layer.to_string(),
                index,
            });
        }
        for (id, _) in grads.layers() {
            let layer = layer_of(net, id)?;
            self.moments
                .entry(id)
                .or_insert_with(|| (layer.zeros_like(), layer.zeros_like()));
        }
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let (b1, b2) = (T::of(c.beta1), T::of(c.beta2));
        let (one_b1, one_b2) = (T::one() - b1, T::one() - b2);
        let corr1 = T::one() - T::of(c.beta1.powi(t));
        let corr2 = T::one() - T::of(c.beta2.powi(t));
        let lr = T::of(c.lr);
        let eps = T::of(c.eps);
        for (id, g) in grads.layers() {
            let (m, v) = self.moments.get_mut(&id).expect("inserted above");
            let p = layer_of_mut(net, id)?;
            for kind in ParamKind::ALL {
                let theta = kind.select_mut(p).data_mut();
                let gm = kind.select(g).data();
                let mm = kind.select_mut(m).data_mut();
                let vm = kind.select_mut(v).data_mut();
                for i in 0..theta.len() {
                    let gi = gm[i];
                    mm[i] = b1 * mm[i] + one_b1 * gi;
                    vm[i] = b2 * vm[i] + one_b2 * gi * gi;
                    let m_hat = mm[i] / corr1;
                    let v_hat = vm[i] / corr2;
                    theta[i] -= lr * m_hat / (v_hat.sqrt() + eps);
                }
            }
        }
        Ok(())
    }

    /// Lossless text dump (shortest round-trip decimal per value).
    pub fn to_text(&self) -> String {
        let c = &self.config;
        let mut out = format!(
            "adam lr={:e} beta1={:e} beta2={:e} eps={:e} step={}\n",
            c.lr, c.beta1, c.beta2, c.eps, self.step
        );
        for (id, (m, v)) in &self.moments {
            for (tag, layer) in [("m", m), ("v", v)] {
                for kind in ParamKind::ALL {
                    let mat = kind.select(layer);
                    let _ = write!(
                        out,
                        "{id} {tag} {} {} {}",
                        kind.as_str(),
                        mat.rows(),
                        mat.cols()
                    );
                    for x in mat.data() {
                        let _ = write!(out, " {x:e}");
                    }
                    out.push('\n');
                }
            }
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let bad = |msg: &str| Error::Config(format!("adam state: {msg}"));
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| bad("empty"))?;
        let mut fields = BTreeMap::new();
        for kv in header.split_whitespace().skip(1) {
            let (k, v) = kv.split_once('=').ok_or_else(|| bad("header field"))?;
            fields.insert(k, v);
        }
        let num = |k: &str| -> Result<f64> {
            fields
                .get(k)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| bad(k))
        };
        let config = AdamConfig {
            lr: num("lr")?,
            beta1: num("beta1")?,
            beta2: num("beta2")?,
            eps: num("eps")?,
        };
        let step = fields
            .get("step")
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| bad("step"))?;
        let mut moments: BTreeMap<LayerId, (MeanFieldLayer<T>, MeanFieldLayer<T>)> =
            BTreeMap::new();
        for line in lines.filter(|l| !l.trim().is_empty()) {
            let mut it = line.split_whitespace();
            let id = parse_layer_id(it.next().ok_or_else(|| bad("layer"))?)
                .ok_or_else(|| bad("layer id"))?;
            let tag = it.next().ok_or_else(|| bad("tag"))?;
            let kind = it.next().ok_or_else(|| bad("kind"))?;
            let kind = ParamKind::ALL
                .into_iter()
                .find(|k| k.as_str() == kind)
                .ok_or_else(|| bad("kind"))?;
            let rows: usize = it
                .next()
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| bad("rows"))?;
            let cols: usize = it
                .next()
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| bad("cols"))?;
            let data = it
                .map(|v| v.parse::<T>().map_err(|_| bad("value")))
                .collect::<Result<Vec<T>>>()?;
            let mat = Matrix::new(rows, cols, data)?;
            let entry = moments.entry(id).or_insert_with(|| {
                let empty = MeanFieldLayer::standard(0, 0);
                (empty.clone(), empty)
            });
            let layer = if tag == "m" {
                &mut entry.0
            } else {
                &mut entry.1
            };
            *kind.select_mut(layer) = mat;
        }
        Ok(Self {
            config,
            step,
            moments,
        })
    }
}

fn parse_layer_id(s: &str) -> Option<LayerId> {
    let (kind, idx) = s.split_once('.')?;
    let idx = idx.parse().ok()?;
    match kind {
        "body" => Some(LayerId::Body(idx)),
        "head" => Some(LayerId::Head(idx)),
        _ => None,
    }
}

fn layer_of<T: Scalar>(net: &BayesianNetwork<T>, id: LayerId) -> Result<&MeanFieldLayer<T>> {
    match id {
        LayerId::Body(i) => net
            .body()
            .get(i)
            .ok_or_else(|| Error::Config(format!("no body layer {i}"))),
        LayerId::Head(h) => net.head(h),
    }
}

fn layer_of_mut<T: Scalar>(
    net: &mut BayesianNetwork<T>,
    id: LayerId,
) -> Result<&mut MeanFieldLayer<T>> {
    match id {
        LayerId::Body(i) => net
            .body_mut()
            .get_mut(i)
            .ok_or_else(|| Error::Config(format!("no body layer {i}"))),
        LayerId::Head(h) => net.head_mut(h),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeededRng;
    use proptest::prelude::*;

    fn scalar_net(mu: f64) -> BayesianNetwork<f64> {
        let mut net = BayesianNetwork::new(1, &[], 1, 1);
        net.head_mut(0).unwrap().weight.mu.set(0, 0, mu);
        net
    }

    fn grads_like(net: &BayesianNetwork<f64>, value: f64) -> GradientSet<f64> {
        let mut head = net.head(0).unwrap().zeros_like();
        for b in head.blocks_mut() {
            b.mu.map_inplace(|_| value);
            b.rho.map_inplace(|_| value);
        }
        GradientSet {
            body: net.body().iter().map(MeanFieldLayer::zeros_like).collect(),
            heads: vec![(0, head)],
        }
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut net = scalar_net(0.7);
        let before = net.clone();
        let mut adam = AdamState::new(AdamConfig::default());
        let g = grads_like(&net, 0.0);
        adam.step(&mut net, &g).unwrap();
        assert_eq!(net, before);
        assert_eq!(adam.step_count(), 1);
    }

    #[test]
    fn first_unit_gradient_step_is_lr() {
        let mut net = scalar_net(0.0);
        let cfg = AdamConfig::default();
        let mut adam = AdamState::new(cfg);
        let g = grads_like(&net, 1.0);
        adam.step(&mut net, &g).unwrap();
        let delta = net.head(0).unwrap().weight.mu.get(0, 0);
        // m̂ = v̂ = 1 after bias correction.
        let expected = -cfg.lr / (1.0 + cfg.eps);
        assert!((delta - expected).abs() < 1e-15, "{delta} vs {expected}");
    }

    #[test]
    fn non_finite_gradient_aborts() {
        let mut net = scalar_net(0.0);
        let before = net.clone();
        let mut adam = AdamState::new(AdamConfig::default());
        let mut g = grads_like(&net, 0.5);
        g.heads[0].1.bias.rho.set(0, 0, f64::NAN);
        let err = adam.step(&mut net, &g).unwrap_err();
        assert!(err.to_string().contains("head.0"), "{err}");
        assert!(err.to_string().contains("bias.rho"), "{err}");
        assert_eq!(net, before);
        assert_eq!(adam.step_count(), 0);
    }

    #[test]
    fn identical_runs_are_bitwise_identical() {
        let run = || {
            let mut rng = SeededRng::new(3);
            let mut net = BayesianNetwork::<f64>::new(3, &[4], 2, 1);
            let mut adam = AdamState::new(AdamConfig::default());
            for _ in 0..100 {
                let mut g = grads_like(&net, 0.0);
                for (_, l) in g.layers_mut() {
                    for b in l.blocks_mut() {
                        rng.fill_standard_normal(b.mu.data_mut());
                        rng.fill_standard_normal(b.rho.data_mut());
                    }
                }
                g.body = net
                    .body()
                    .iter()
                    .map(|l| {
                        let mut z = l.zeros_like();
                        rng.fill_standard_normal(z.weight.mu.data_mut());
                        z
                    })
                    .collect();
                adam.step(&mut net, &g).unwrap();
            }
            (net, adam)
        };
        let (a, sa) = run();
        let (b, sb) = run();
        assert_eq!(a, b);
        assert_eq!(sa, sb);
    }

    #[test]
    fn text_round_trip_is_lossless() {
        let mut net = BayesianNetwork::<f64>::new(2, &[3], 2, 1);
        let mut adam = AdamState::new(AdamConfig {
            lr: 0.01,
            ..Default::default()
        });
        let mut rng = SeededRng::new(5);
        for _ in 0..3 {
            let mut g = grads_like(&net, 0.0);
            g.body = net.body().iter().map(MeanFieldLayer::zeros_like).collect();
            for (_, l) in g.layers_mut() {
                for b in l.blocks_mut() {
                    rng.fill_standard_normal(b.mu.data_mut());
                    rng.fill_standard_normal(b.rho.data_mut());
                }
            }
            adam.step(&mut net, &g).unwrap();
        }
        let back = AdamState::<f64>::from_text(&adam.to_text()).unwrap();
        assert_eq!(back, adam);
    }

    #[test]
    fn steady_gradients_move_at_most_lr() {
        let mut net = scalar_net(0.0);
        let cfg = AdamConfig::default();
        let mut adam = AdamState::new(cfg);
        for i in 0..50 {
            let before = net.head(0).unwrap().weight.mu.get(0, 0);
            let g = if i % 3 == 0 { -2.5 } else { 2.5 };
            let g = grads_like(&net, g);
            adam.step(&mut net, &g).unwrap();
            let after = net.head(0).unwrap().weight.mu.get(0, 0);
            assert!((after - before).abs() <= cfg.lr * (1.0 + 1e-9));
        }
    }

    proptest! {
        #[test]
        fn update_magnitude_bounded(gs in proptest::collection::vec(-1e3f64..1e3, 1..40)) {
            let mut net = scalar_net(0.0);
            let cfg = AdamConfig::default();
            let mut adam = AdamState::new(cfg);
            let ratio = cfg.beta1 * cfg.beta1 / cfg.beta2;
            for (i, g) in gs.into_iter().enumerate() {
                let t = i as i32 + 1;
                let before = net.head(0).unwrap().weight.mu.get(0, 0);
                let g = grads_like(&net, g); adam.step(&mut net, &g).unwrap();
                let after = net.head(0).unwrap().weight.mu.get(0, 0);
                // Cauchy-Schwarz on the moment sums; equals lr at t = 1.
                let geometric: f64 = (0..t).map(|k| ratio.powi(k)).sum();
                let bound = cfg.lr * (1.0 - cfg.beta1) / (1.0 - cfg.beta2).sqrt()
                    * geometric.sqrt()
                    * (1.0 - cfg.beta2.powi(t)).sqrt()
                    / (1.0 - cfg.beta1.powi(t));
                prop_assert!((after - before).abs() <= bound * (1.0 + 1e-9));
                for v in adam.second_moments() {
                    prop_assert!(v.weight.mu.data().iter().all(|&x| x >= 0.0));
                }
            }
        }
    }
}
