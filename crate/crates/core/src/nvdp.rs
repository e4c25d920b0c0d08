//! Task-conditioned dropout posterior over decoder weights.
//!
//! Each decoder layer holds a shared weight matrix `theta` (`K x D`). A
//! context set is pooled into `r`, and one rate network per layer maps `r`
//! to logits `(a, b, c)` of sizes `K`, `D` and `1`. The dropout rates are the
//! rank-one product
//!
//! ```text
//! P[k, d] = clip(s(a_k) * s(b_d) * s(c), 0.01, 0.99),   s(x) = 1 / (1 + exp(-x / tau))
//! ```
//!
//! and the weights are Gaussian with mean `(1 - P) theta` and variance
//! `P (1 - P) theta^2`. Training samples pre-activations directly from the
//! induced Gaussian (local reparameterization). The same rate networks,
//! conditioned on the whole task, provide the prior in the KL term.

use ndarray::Axis;
use rand::Rng;

use crate::diff::{Graph, Matrix, ParamId, ParamStore, Var};
use crate::error::{Error, Result};
use crate::model::{
    fixed_std, gaussian_log_likelihood, ConditionalModel, ModelConfig, Predictive,
    PredictiveSample, TaskObjective, VarianceMode,
};
use crate::nets::{split_mean_logstd, tempered_sigmoid, Mlp, MlpSpec, OutputActivation, Temperature};
use crate::noise::NoiseSource;
use crate::setenc::SetEncoder;
use crate::tasks::Task;

pub const RATE_MIN: f64 = 0.01;
pub const RATE_MAX: f64 = 0.99;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RateProvenance {
    Context,
    FullSet,
}

/// Per-layer dropout-rate matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct DropoutRates {
    pub layers: Vec<Matrix>,
    pub provenance: RateProvenance,
}

/// Shared weights of one decoder layer; the bias is deterministic.
#[derive(Debug, Clone)]
pub struct PosteriorLayer {
    pub theta: ParamId,
    pub bias: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

/// One rate network per decoder layer plus the shared temperature.
#[derive(Debug, Clone)]
pub struct MetaModel {
    pub nets: Vec<Mlp>,
    pub temperature: Temperature,
    pub shapes: Vec<(usize, usize)>,
}

impl MetaModel {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        d_r: usize,
        hidden: &[usize],
        activation: crate::nets::Activation,
        shapes: &[(usize, usize)],
        rng: &mut R,
    ) -> Result<Self> {
        let nets = shapes
            .iter()
            .enumerate()
            .map(|(l, &(k, d))| {
                let mut widths = vec![d_r];
                widths.extend_from_slice(hidden);
                widths.push(k + d + 1);
                let spec = MlpSpec::new(widths, activation, OutputActivation::None)?;
                Mlp::new(store, &format!("meta.layer{l}"), spec, rng)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            nets,
            temperature: Temperature::new(store, "meta.log_tau")?,
            shapes: shapes.to_vec(),
        })
    }

    /// Logits `[a | b | c]` for every layer, each `1 x (K + D + 1)`.
    pub fn logits<'g>(&self, g: &'g Graph, store: &ParamStore, r: Var<'g>) -> Result<Vec<Var<'g>>> {
        self.nets
            .iter()
            .map(|net| net.forward(g, store, r)?.plain())
            .collect()
    }

    pub fn predict_rates<'g>(
        &self,
        g: &'g Graph,
        store: &ParamStore,
        r: Var<'g>,
    ) -> Result<Vec<Var<'g>>> {
        Ok(self.predict_rates_rows(g, store, r)?.remove(0))
    }

    /// Rates for every row of `reps` (one representation per row), sharing
    /// a single pass through each rate network. Outer index is the row.
    pub fn predict_rates_rows<'g>(
        &self,
        g: &'g Graph,
        store: &ParamStore,
        reps: Var<'g>,
    ) -> Result<Vec<Vec<Var<'g>>>> {
        let tau = self.temperature.var(g, store);
        let logits = self.logits(g, store, reps)?;
        let rows = reps.rows();
        Ok((0..rows)
            .map(|row| {
                logits
                    .iter()
                    .zip(&self.shapes)
                    .map(|(&l, &(k, d))| {
                        let l = if rows == 1 { l } else { l.gather_rows(&[row]) };
                        rates_from_logits(l, k, d, tau)
                    })
                    .collect()
            })
            .collect())
    }
}

/// Unclipped rank-one rates `s(a)^T s(b) s(c)` from `1 x (K + D + 1)` logits.
pub fn rank_one_rates<'g>(logits: Var<'g>, k: usize, d: usize, tau: Var<'g>) -> Var<'g> {
    assert_eq!(logits.shape(), (1, k + d + 1), "rate logits must be 1 x (K + D + 1)");
    let rows = tempered_sigmoid(logits.slice_cols(0, k), tau).transpose();
    let cols = tempered_sigmoid(logits.slice_cols(k, k + d), tau);
    let layer = tempered_sigmoid(logits.slice_cols(k + d, k + d + 1), tau);
    rows * cols * layer
}

/// Rank-one rates projected onto `[RATE_MIN, RATE_MAX]`.
pub fn rates_from_logits<'g>(logits: Var<'g>, k: usize, d: usize, tau: Var<'g>) -> Var<'g> {
    rank_one_rates(logits, k, d, tau).clip(RATE_MIN, RATE_MAX)
}

/// KL between the context-conditioned and full-set-conditioned dropout
/// posteriors for one weight, independent of `theta`.
pub fn kl_dropout_entry(p: f64, p_hat: f64) -> f64 {
    let v = (p * (1.0 - p)).max(crate::diff::EPS);
    let v_hat = (p_hat * (1.0 - p_hat)).max(crate::diff::EPS);
    (v + (p_hat - p).powi(2)) / (2.0 * v_hat) + 0.5 * (v_hat.ln() - v.ln()) - 0.5
}

/// Summed KL over every weight of every layer (graph version).
pub fn kl_conditional<'g>(p: &[Var<'g>], p_hat: &[Var<'g>]) -> Result<Var<'g>> {
    if p.len() != p_hat.len() || p.is_empty() {
        return Err(Error::Config(format!(
            "kl_conditional needs matching non-empty layer lists, got {} and {}",
            p.len(),
            p_hat.len()
        )));
    }
    let mut total: Option<Var<'g>> = None;
    for (&q, &prior) in p.iter().zip(p_hat) {
        if q.shape() != prior.shape() {
            return Err(Error::Shape {
                op: "kl_conditional",
                left: q.shape(),
                right: prior.shape(),
            });
        }
        let v = q * q.one_minus();
        let v_hat = prior * prior.one_minus();
        let quad = (v + (prior - q).square()).div(v_hat.scale(2.0));
        let log_ratio = (v_hat.log() - v.log()).scale(0.5);
        let layer = (quad + log_ratio).add_scalar(-0.5).sum_all();
        total = Some(match total {
            Some(t) => t + layer,
            None => layer,
        });
    }
    Ok(total.expect("non-empty"))
}

/// Summed KL over plain rate matrices.
pub fn kl_conditional_values(p: &DropoutRates, p_hat: &DropoutRates) -> Result<f64> {
    if p.layers.len() != p_hat.layers.len() {
        return Err(Error::Config("rate sets have different layer counts".into()));
    }
    let mut total = 0.0;
    for (q, prior) in p.layers.iter().zip(&p_hat.layers) {
        if q.dim() != prior.dim() {
            return Err(Error::Shape {
                op: "kl_conditional",
                left: q.dim(),
                right: prior.dim(),
            });
        }
        total += q
            .iter()
            .zip(prior.iter())
            .map(|(&a, &b)| kl_dropout_entry(a, b))
            .sum::<f64>();
    }
    Ok(total)
}

/// `phi = (1 - P) theta + sqrt(P (1 - P)) theta eps`
pub fn sample_weights<'g>(theta: Var<'g>, p: Var<'g>, noise: &Matrix) -> Var<'g> {
    let g = theta.graph();
    let eps = g.input(noise.clone());
    p.one_minus() * theta + (p * p.one_minus()).sqrt() * theta * eps
}

/// Pre-activations `B ~ N(A ((1-P) theta) + bias, A^2 (P (1-P) theta^2))`,
/// realized as `mean + sqrt(var) * zeta` with one fresh `zeta` per entry.
pub fn local_reparam_forward<'g>(
    a: Var<'g>,
    theta: Var<'g>,
    bias: Var<'g>,
    p: Var<'g>,
    noise: &mut NoiseSource,
) -> Var<'g> {
    let g = a.graph();
    let keep = p.one_minus();
    let mean = a.matmul(keep * theta) + bias;
    let var = a.square().matmul(p * keep * theta.square());
    let (m, d) = mean.shape();
    let zeta = g.input(noise.standard_normal(m, d));
    mean + var.sqrt() * zeta
}

#[derive(Debug, Clone)]
pub struct NvdpModel {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub encoder: SetEncoder,
    pub meta: MetaModel,
    pub layers: Vec<PosteriorLayer>,
}

impl NvdpModel {
    pub fn new<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let encoder = SetEncoder::new(
            &mut store,
            "encoder",
            config.x_dim,
            config.y_dim,
            config.encoder_layers,
            config.d_r,
            rng,
        )?;
        let mut widths = vec![config.x_dim
            + if config.decoder_sees_representation {
                config.d_r
            } else {
                0
            }];
        widths.extend_from_slice(&config.decoder_hidden);
        widths.push(config.decoder_output_width());
        // Decoder weights use the same Glorot init as every other layer.
        let init = Mlp::new(
            &mut store,
            "decoder",
            MlpSpec::new(widths, crate::nets::Activation::Relu, OutputActivation::None)?,
            rng,
        )?;
        let layers: Vec<PosteriorLayer> = init
            .layers
            .iter()
            .map(|l| PosteriorLayer {
                theta: l.weight,
                bias: l.bias,
                fan_in: l.fan_in,
                fan_out: l.fan_out,
            })
            .collect();
        let shapes: Vec<_> = layers.iter().map(|l| (l.fan_in, l.fan_out)).collect();
        let meta = MetaModel::new(
            &mut store,
            config.d_r,
            &config.meta_hidden,
            config.meta_activation,
            &shapes,
            rng,
        )?;
        Ok(Self {
            config,
            store,
            encoder,
            meta,
            layers,
        })
    }

    pub fn rates<'g>(&self, g: &'g Graph, r: Var<'g>) -> Result<Vec<Var<'g>>> {
        self.meta.predict_rates(g, &self.store, r)
    }

    /// Rates conditioned on a set of pairs, off the graph.
    pub fn rates_for(&self, xs: &Matrix, ys: &Matrix, provenance: RateProvenance) -> Result<DropoutRates> {
        let g = Graph::new();
        let r = self.encoder.encode_set(&g, &self.store, xs, ys)?;
        let layers = self.rates(&g, r)?.iter().map(|p| p.to_matrix()).collect();
        Ok(DropoutRates { layers, provenance })
    }

    /// One stochastic function realization evaluated at `x`.
    pub fn decoder_forward<'g>(
        &self,
        g: &'g Graph,
        x: &Matrix,
        r_context: Var<'g>,
        rates: &[Var<'g>],
        noise: &mut NoiseSource,
    ) -> Result<Predictive<'g>> {
        if x.ncols() != self.config.x_dim {
            return Err(Error::Shape {
                op: "nvdp decoder input",
                left: x.dim(),
                right: (x.nrows(), self.config.x_dim),
            });
        }
        let rows = x.nrows();
        let mut h = g.input(x.clone());
        if self.config.decoder_sees_representation {
            h = Var::concat_cols(&[h, r_context.repeat_rows(rows)]);
        }
        let last = self.layers.len() - 1;
        for (i, (layer, &p)) in self.layers.iter().zip(rates).enumerate() {
            let theta = g.param(&self.store, layer.theta);
            let bias = g.param(&self.store, layer.bias);
            h = local_reparam_forward(h, theta, bias, p, noise);
            if i < last {
                h = h.relu();
            }
        }
        Ok(match self.config.variance {
            VarianceMode::Learned => {
                let (mean, std) = split_mean_logstd(h);
                Predictive { mean, std }
            }
            VarianceMode::Fixed => Predictive {
                mean: h,
                std: fixed_std(g, rows, self.config.y_dim, self.config.fixed_sigma),
            },
        })
    }

    /// Context and full-set representations stacked as a `2 x d_r` node.
    /// Both come from one encoder pass over context-then-target rows; the
    /// two means are taken by a single pooling product.
    fn pooled<'g>(&self, g: &'g Graph, task: &Task) -> Result<Var<'g>> {
        let s = task.context.len();
        if s == 0 {
            return Err(Error::EmptySet);
        }
        let (xs, ys) = task.rows(&task.union_indices());
        let feats = self.encoder.features(g, &self.store, &xs, &ys)?;
        let u = xs.nrows();
        let pool = Matrix::from_shape_fn((2, u), |(row, i)| match row {
            0 if i < s => 1.0 / s as f64,
            0 => 0.0,
            _ => 1.0 / u as f64,
        });
        Ok(g.input(pool).matmul(feats))
    }
}

impl ConditionalModel for NvdpModel {
    fn config(&self) -> &ModelConfig {
        &self.config
    }

    fn params(&self) -> &ParamStore {
        &self.store
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    fn objective<'g>(
        &self,
        g: &'g Graph,
        task: &Task,
        samples: usize,
        noise: &mut NoiseSource,
    ) -> Result<TaskObjective<'g>> {
        let reps = self.pooled(g, task)?;
        let mut rates = self.meta.predict_rates_rows(g, &self.store, reps)?;
        let p_hat = rates.pop().expect("two rows");
        let p = rates.pop().expect("two rows");
        let r_context = reps.gather_rows(&[0]);
        let (xt, yt) = if task.target.is_empty() {
            task.context_points()
        } else {
            task.target_points()
        };
        let samples = samples.max(1);
        let mut ll: Option<Var<'g>> = None;
        for _ in 0..samples {
            let pred = self.decoder_forward(g, &xt, r_context, &p, noise)?;
            let l = gaussian_log_likelihood(pred, &yt);
            ll = Some(match ll {
                Some(acc) => acc + l,
                None => l,
            });
        }
        let nll = ll.expect("samples >= 1").scale(-1.0 / samples as f64);
        let kl = kl_conditional(&p, &p_hat)?;
        Ok(TaskObjective { nll, kl })
    }

    fn sample_predictive(
        &self,
        context_x: &Matrix,
        context_y: &Matrix,
        query: &Matrix,
        n: usize,
        noise: &mut NoiseSource,
    ) -> Result<Vec<PredictiveSample>> {
        let g = Graph::new();
        let r = self.encoder.encode_set(&g, &self.store, context_x, context_y)?;
        let p = self.rates(&g, r)?;
        (0..n)
            .map(|_| {
                let pred = self.decoder_forward(&g, query, r, &p, noise)?;
                Ok(PredictiveSample {
                    mean: pred.mean.to_matrix(),
                    std: pred.std.to_matrix(),
                })
            })
            .collect()
    }
}

/// Mean absolute difference between two rate sets, over all entries.
pub fn mean_rate_gap(a: &DropoutRates, b: &DropoutRates) -> f64 {
    let (sum, count) = a
        .layers
        .iter()
        .zip(&b.layers)
        .fold((0.0, 0usize), |(s, c), (x, y)| {
            (s + (x - y).mapv(f64::abs).sum(), c + x.len())
        });
    sum / count as f64
}

/// Column means of a rate matrix; handy for inspecting per-unit keep rates.
pub fn column_keep_rates(p: &Matrix) -> Vec<f64> {
    p.mapv(|v| 1.0 - v)
        .mean_axis(Axis(0))
        .map(|m| m.to_vec())
        .unwrap_or_default()
}
