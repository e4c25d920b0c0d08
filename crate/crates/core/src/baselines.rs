//! Latent-variable and deterministic neural-process baselines.
//!
//! All variants share one layout: an optional latent path (set encoder plus a
//! linear head producing `(mu, logstd)` of `z`), an optional deterministic
//! path (a second set encoder producing `r`), and an MLP decoder fed with
//! `[x, z, r]`.

use rand::Rng;

use crate::diff::{Graph, Matrix, ParamStore, Var};
use crate::error::{Error, Result};
use crate::model::{
    fixed_std, gaussian_log_likelihood, ConditionalModel, ModelConfig, ModelKind, Predictive,
    PredictiveSample, TaskObjective, VarianceMode,
};
use crate::nets::{split_mean_logstd, Activation, Linear, Mlp, MlpOutput, MlpSpec, OutputActivation};
use crate::noise::NoiseSource;
use crate::setenc::SetEncoder;
use crate::tasks::Task;

/// Diagonal Gaussian over `z` as plain vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentPosterior {
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
}

/// Diagonal Gaussian over `z` on the graph, each `1 x d_z`.
#[derive(Debug, Clone, Copy)]
pub struct LatentVar<'g> {
    pub mu: Var<'g>,
    pub sigma: Var<'g>,
}

impl LatentVar<'_> {
    pub fn to_posterior(self) -> LatentPosterior {
        LatentPosterior {
            mu: self.mu.value().iter().copied().collect(),
            sigma: self.sigma.value().iter().copied().collect(),
        }
    }
}

/// `KL(q || p)` summed over dimensions.
pub fn gaussian_kl(q: &LatentPosterior, p: &LatentPosterior) -> Result<f64> {
    if q.mu.len() != p.mu.len() || q.sigma.len() != p.sigma.len() || q.mu.len() != q.sigma.len() {
        return Err(Error::Shape {
            op: "gaussian_kl",
            left: (1, q.mu.len()),
            right: (1, p.mu.len()),
        });
    }
    Ok(q.mu
        .iter()
        .zip(&q.sigma)
        .zip(p.mu.iter().zip(&p.sigma))
        .map(|((&mq, &sq), (&mp, &sp))| {
            (sp / sq).ln() + (sq * sq + (mq - mp).powi(2)) / (2.0 * sp * sp) - 0.5
        })
        .sum())
}

pub fn gaussian_kl_var<'g>(q: LatentVar<'g>, p: LatentVar<'g>) -> Result<Var<'g>> {
    if q.mu.shape() != p.mu.shape() {
        return Err(Error::Shape {
            op: "gaussian_kl",
            left: q.mu.shape(),
            right: p.mu.shape(),
        });
    }
    let log_ratio = p.sigma.log() - q.sigma.log();
    let quad = (q.sigma.square() + (q.mu - p.mu).square()).div(p.sigma.square().scale(2.0));
    Ok((log_ratio + quad).add_scalar(-0.5).sum_all())
}

/// Latent path: set encoder plus a `d_r -> 2 d_z` head.
#[derive(Debug, Clone)]
pub struct LatentEncoder {
    pub encoder: SetEncoder,
    pub head: Linear,
}

impl LatentEncoder {
    /// Posterior from pooled features.
    pub fn posterior<'g>(&self, g: &'g Graph, store: &ParamStore, r: Var<'g>) -> LatentVar<'g> {
        let (mu, sigma) = split_mean_logstd(self.head.forward(g, store, r));
        LatentVar { mu, sigma }
    }
}

/// `q(z | pairs)` for a latent encoder, off the graph.
pub fn np_posterior(
    latent: &LatentEncoder,
    store: &ParamStore,
    xs: &Matrix,
    ys: &Matrix,
) -> Result<LatentPosterior> {
    let g = Graph::new();
    let r = latent.encoder.encode_set(&g, store, xs, ys)?;
    Ok(latent.posterior(&g, store, r).to_posterior())
}

/// Which conditioning set is available to a forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NpPhase {
    /// Context plus the full task: the regularizer can be formed.
    Train,
    /// Context only.
    Predict,
}

#[derive(Debug, Clone)]
pub struct NpModel {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub latent: Option<LatentEncoder>,
    pub deterministic: Option<SetEncoder>,
    pub decoder: Mlp,
}

/// Result of one baseline forward pass.
#[derive(Debug, Clone, Copy)]
pub struct NpForward<'g> {
    pub predictive: Predictive<'g>,
    pub kl: Var<'g>,
}

impl NpModel {
    pub fn new<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        if config.kind == ModelKind::Nvdp {
            return Err(Error::Config("NpModel does not implement the nvdp kind".into()));
        }
        let mut store = ParamStore::new();
        let latent = if config.kind.has_latent_path() {
            let encoder = SetEncoder::new(
                &mut store,
                "latent.encoder",
                config.x_dim,
                config.y_dim,
                config.encoder_layers,
                config.d_r,
                rng,
            )?;
            let head = Linear::new(&mut store, "latent.head", config.d_r, 2 * config.d_z, rng)?;
            Some(LatentEncoder { encoder, head })
        } else {
            None
        };
        let deterministic = if config.kind.has_deterministic_path() {
            Some(SetEncoder::new(
                &mut store,
                "deterministic.encoder",
                config.x_dim,
                config.y_dim,
                config.encoder_layers,
                config.d_r,
                rng,
            )?)
        } else {
            None
        };
        let mut widths = vec![config.x_dim
            + latent.as_ref().map_or(0, |_| config.d_z)
            + deterministic.as_ref().map_or(0, |_| config.d_r)];
        widths.extend_from_slice(&config.decoder_hidden);
        widths.push(config.decoder_output_width());
        let output = match config.variance {
            VarianceMode::Learned => OutputActivation::SplitMeanLogStd,
            VarianceMode::Fixed => OutputActivation::None,
        };
        let decoder = Mlp::new(
            &mut store,
            "decoder",
            MlpSpec::new(widths, Activation::Relu, output)?,
            rng,
        )?;
        Ok(Self {
            config,
            store,
            latent,
            deterministic,
            decoder,
        })
    }

    /// Posterior over `z` given `pairs`; `None` for the deterministic-only model.
    pub fn posterior(&self, xs: &Matrix, ys: &Matrix) -> Result<Option<LatentPosterior>> {
        self.latent
            .as_ref()
            .map(|l| np_posterior(l, &self.store, xs, ys))
            .transpose()
    }

    fn decode<'g>(
        &self,
        g: &'g Graph,
        x: &Matrix,
        z: Option<Var<'g>>,
        r: Option<Var<'g>>,
    ) -> Result<Predictive<'g>> {
        let rows = x.nrows();
        let mut parts = vec![g.input(x.clone())];
        parts.extend(z.map(|z| z.repeat_rows(rows)));
        parts.extend(r.map(|r| r.repeat_rows(rows)));
        let input = Var::concat_cols(&parts);
        Ok(match self.decoder.forward(g, &self.store, input)? {
            MlpOutput::Gaussian { mean, std } => Predictive { mean, std },
            MlpOutput::Plain(mean) => Predictive {
                mean,
                std: fixed_std(g, rows, self.config.y_dim, self.config.fixed_sigma),
            },
        })
    }

    /// Latent and deterministic summaries for a task whose rows are ordered
    /// context-first; `full` pools every row.
    fn summaries<'g>(
        &self,
        g: &'g Graph,
        xs: &Matrix,
        ys: &Matrix,
        context_len: usize,
        with_full: bool,
    ) -> Result<Summaries<'g>> {
        if context_len == 0 {
            return Err(Error::EmptySet);
        }
        let context_rows: Vec<usize> = (0..context_len).collect();
        let (q_context, q_full) = match &self.latent {
            Some(l) => {
                let feats = l.encoder.features(g, &self.store, xs, ys)?;
                let q_c = l.posterior(g, &self.store, SetEncoder::pool(feats, &context_rows)?);
                let q_f = with_full.then(|| l.posterior(g, &self.store, feats.column_mean()));
                (Some(q_c), q_f)
            }
            None => (None, None),
        };
        let r = match &self.deterministic {
            Some(enc) => {
                let cx = xs.slice(ndarray::s![..context_len, ..]).to_owned();
                let cy = ys.slice(ndarray::s![..context_len, ..]).to_owned();
                Some(enc.encode_set(g, &self.store, &cx, &cy)?)
            }
            None => None,
        };
        Ok(Summaries {
            q_context,
            q_full,
            r,
        })
    }

    /// One stochastic pass at `x`. In [`NpPhase::Train`] the rows of
    /// `(xs, ys)` beyond `context_len` complete the full set and the
    /// mode-specific KL is returned; in [`NpPhase::Predict`] the KL is zero.
    #[allow(clippy::too_many_arguments)]
    pub fn np_forward<'g>(
        &self,
        g: &'g Graph,
        x: &Matrix,
        xs: &Matrix,
        ys: &Matrix,
        context_len: usize,
        phase: NpPhase,
        noise: &mut NoiseSource,
    ) -> Result<NpForward<'g>> {
        let s = self.summaries(g, xs, ys, context_len, phase == NpPhase::Train)?;
        let (z, kl) = self.draw_latent(g, &s, phase, noise)?;
        Ok(NpForward {
            predictive: self.decode(g, x, z, s.r)?,
            kl,
        })
    }

    fn draw_latent<'g>(
        &self,
        g: &'g Graph,
        s: &Summaries<'g>,
        phase: NpPhase,
        noise: &mut NoiseSource,
    ) -> Result<(Option<Var<'g>>, Var<'g>)> {
        let Some(q_context) = s.q_context else {
            return Ok((None, g.scalar(0.0)));
        };
        let sample = |q: LatentVar<'g>, noise: &mut NoiseSource| {
            let eps = g.input(noise.standard_normal(1, self.config.d_z));
            q.mu + q.sigma * eps
        };
        match phase {
            NpPhase::Predict => Ok((Some(sample(q_context, noise)), g.scalar(0.0))),
            NpPhase::Train => {
                let q_full = s.q_full.ok_or_else(|| {
                    Error::MissingFullSet(format!("{} training needs the full set", self.config.kind))
                })?;
                if self.config.kind.uses_variational_prior() {
                    Ok((Some(sample(q_context, noise)), gaussian_kl_var(q_context, q_full)?))
                } else {
                    Ok((Some(sample(q_full, noise)), gaussian_kl_var(q_full, q_context)?))
                }
            }
        }
    }
}

struct Summaries<'g> {
    q_context: Option<LatentVar<'g>>,
    q_full: Option<LatentVar<'g>>,
    r: Option<Var<'g>>,
}

impl ConditionalModel for NpModel {
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
        let (xs, ys) = task.rows(&task.union_indices());
        let s = self.summaries(g, &xs, &ys, task.context.len(), true)?;
        let (xt, yt) = if task.target.is_empty() {
            task.context_points()
        } else {
            task.target_points()
        };
        let samples = samples.max(1);
        let mut ll: Option<Var<'g>> = None;
        let mut kl = g.scalar(0.0);
        for _ in 0..samples {
            let (z, k) = self.draw_latent(g, &s, NpPhase::Train, noise)?;
            kl = k;
            let l = gaussian_log_likelihood(self.decode(g, &xt, z, s.r)?, &yt);
            ll = Some(match ll {
                Some(acc) => acc + l,
                None => l,
            });
        }
        let nll = ll.expect("samples >= 1").scale(-1.0 / samples as f64);
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
        let s = self.summaries(&g, context_x, context_y, context_x.nrows(), false)?;
        (0..n)
            .map(|_| {
                let (z, _) = self.draw_latent(&g, &s, NpPhase::Predict, noise)?;
                let pred = self.decode(&g, query, z, s.r)?;
                Ok(PredictiveSample {
                    mean: pred.mean.to_matrix(),
                    std: pred.std.to_matrix(),
                })
            })
            .collect()
    }
}
