//! Minibatch ELBO training with Adam.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diff::{Gradients, Graph, Matrix, ParamStore, Var};
use crate::error::{Error, Result};
use crate::eval::{compute_metrics, MetricsRecord, DEFAULT_SAMPLES};
use crate::model::{AnyModel, Checkpoint, ConditionalModel, ModelConfig};
use crate::noise::NoiseSource;
use crate::tasks::{Task, TaskSampler};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Precision {
    Double,
    Single,
}

/// How a task's KL term is weighted against its per-point log-likelihood.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KlScale {
    /// Divide the KL by the number of scored points, so the task term is
    /// the bound `sum_i log p(y_i) - KL` over `M` points, divided by `M`.
    #[default]
    PerPoint,
    /// Add the full KL to the mean log-likelihood.
    PerTask,
}

impl KlScale {
    pub fn weight(self, task: &Task) -> f64 {
        match self {
            KlScale::PerTask => 1.0,
            KlScale::PerPoint => {
                let scored = if task.target.is_empty() {
                    task.context.len()
                } else {
                    task.target.len()
                };
                1.0 / scored.max(1) as f64
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub iterations: u64,
    pub seed: u64,
    pub model: ModelConfig,
    pub noise_samples: usize,
    pub precision: Precision,
    /// Write a checkpoint every this many steps (0 disables periodic checkpoints).
    pub checkpoint_every: u64,
    /// Compute validation metrics every this many steps (0 disables them).
    pub validate_every: u64,
    pub validation_tasks: usize,
    /// Rescale gradients whose global norm exceeds this value.
    pub grad_clip: Option<f64>,
    #[serde(default)]
    pub kl_scale: KlScale,
}

impl TrainConfig {
    pub fn new(model: ModelConfig, iterations: u64, seed: u64) -> Self {
        Self {
            batch_size: 16,
            learning_rate: 5e-4,
            iterations,
            seed,
            model,
            noise_samples: 1,
            precision: Precision::Double,
            checkpoint_every: 0,
            validate_every: 0,
            validation_tasks: 100,
            grad_clip: Some(10.0),
            kl_scale: KlScale::PerPoint,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be > 0, got {}", self.learning_rate));
        }
        if self.noise_samples == 0 {
            return bad("noise_samples must be >= 1".into());
        }
        if self.precision != Precision::Double {
            return bad("only double precision is implemented".into());
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return bad(format!("grad_clip must be > 0, got {c}"));
            }
        }
        if self.validate_every > 0 && self.validation_tasks == 0 {
            return bad("validation_tasks must be >= 1 when validation is enabled".into());
        }
        self.model.validate()
    }
}

/// First and second moments per parameter, in store order.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<Matrix>,
    pub v: Vec<Matrix>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(store: &ParamStore) -> Self {
        let zeros: Vec<Matrix> = store
            .iter()
            .map(|(_, p)| Matrix::zeros(p.value.dim()))
            .collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

pub fn adam_update(store: &mut ParamStore, grads: &Gradients, state: &mut AdamState, lr: f64) -> Result<()> {
    if state.m.len() != store.len() {
        return Err(Error::Config(format!(
            "optimizer tracks {} parameters, store has {}",
            state.m.len(),
            store.len()
        )));
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - state.beta1.powi(t);
    let c2 = 1.0 - state.beta2.powi(t);
    let (b1, b2, eps) = (state.beta1, state.beta2, state.eps);
    let ids: Vec<_> = store.ids().collect();
    for (k, id) in ids.into_iter().enumerate() {
        let Some(g) = grads.get(id) else {
            // A missing gradient is a zero gradient: moments still decay.
            state.m[k].mapv_inplace(|m| b1 * m);
            state.v[k].mapv_inplace(|v| b2 * v);
            let (m, v) = (&state.m[k], &state.v[k]);
            ndarray::Zip::from(store.get_mut(id))
                .and(m)
                .and(v)
                .for_each(|p, &m, &v| *p -= lr * (m / c1) / ((v / c2).sqrt() + eps));
            continue;
        };
        if g.dim() != store.get(id).dim() {
            return Err(Error::Shape {
                op: "adam_update",
                left: store.get(id).dim(),
                right: g.dim(),
            });
        }
        let (m, v) = (&mut state.m[k], &mut state.v[k]);
        ndarray::Zip::from(store.get_mut(id))
            .and(m)
            .and(v)
            .and(g)
            .for_each(|p, m, v, &g| {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
            });
    }
    Ok(())
}

/// Loss, its two terms (batch means), and parameter gradients.
#[derive(Debug, Clone)]
pub struct StepOutcome {
    pub loss: f64,
    pub nll: f64,
    pub kl: f64,
    pub grads: Gradients,
}

/// Build the batch loss `mean_t (nll_t + w_t kl_t)` on `g`, checking each
/// term. The reported KL is the unweighted batch mean.
pub fn batch_loss<'g, M: ConditionalModel + ?Sized>(
    g: &'g Graph,
    model: &M,
    batch: &[Task],
    noise_samples: usize,
    kl_scale: KlScale,
    noise: &mut NoiseSource,
) -> Result<(Var<'g>, f64, f64)> {
    if batch.is_empty() {
        return Err(Error::Config("empty task batch".into()));
    }
    let mut total: Option<Var<'g>> = None;
    let (mut nll_sum, mut kl_sum) = (0.0, 0.0);
    for (i, task) in batch.iter().enumerate() {
        let obj = model.objective(g, task, noise_samples, noise)?;
        let (nll, kl) = (obj.nll.item(), obj.kl.item());
        for (term, v) in [("nll", nll), ("kl", kl)] {
            if !v.is_finite() {
                return Err(Error::NonFinite {
                    what: format!("{term} of task {i} in batch"),
                });
            }
        }
        nll_sum += nll;
        kl_sum += kl;
        let t = obj.nll + obj.kl.scale(kl_scale.weight(task));
        total = Some(match total {
            Some(acc) => acc + t,
            None => t,
        });
    }
    let n = batch.len() as f64;
    let loss = total.expect("non-empty batch").scale(1.0 / n);
    Ok((loss, nll_sum / n, kl_sum / n))
}

/// One minibatch estimate of the negative ELBO and its gradients.
pub fn elbo_step<M: ConditionalModel + ?Sized>(
    model: &M,
    batch: &[Task],
    noise_samples: usize,
    kl_scale: KlScale,
    noise: &mut NoiseSource,
) -> Result<StepOutcome> {
    let g = Graph::new();
    let (loss, nll, kl) = batch_loss(&g, model, batch, noise_samples, kl_scale, noise)?;
    g.backward(loss)?;
    let grads = g.param_grads();
    let norm = grads.global_norm();
    if !norm.is_finite() {
        return Err(Error::NonFinite {
            what: "gradient norm".into(),
        });
    }
    Ok(StepOutcome {
        loss: loss.item(),
        nll,
        kl,
        grads,
    })
}

/// One entry of the training stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub loss: f64,
    pub nll: f64,
    pub kl: f64,
    pub wall_time: f64,
}

/// Receives training progress.
pub trait TrainSink {
    fn on_step(&mut self, _record: &StepRecord) -> Result<()> {
        Ok(())
    }

    fn on_validation(&mut self, _step: u64, _record: &MetricsRecord) -> Result<()> {
        Ok(())
    }

    fn on_checkpoint(&mut self, _checkpoint: &Checkpoint) -> Result<()> {
        Ok(())
    }
}

/// Keeps everything in memory.
#[derive(Debug, Default, Clone)]
pub struct MemorySink {
    pub steps: Vec<StepRecord>,
    pub validations: Vec<(u64, MetricsRecord)>,
    pub checkpoints: Vec<Checkpoint>,
}

impl TrainSink for MemorySink {
    fn on_step(&mut self, record: &StepRecord) -> Result<()> {
        self.steps.push(record.clone());
        Ok(())
    }

    fn on_validation(&mut self, step: u64, record: &MetricsRecord) -> Result<()> {
        self.validations.push((step, record.clone()));
        Ok(())
    }

    fn on_checkpoint(&mut self, checkpoint: &Checkpoint) -> Result<()> {
        self.checkpoints.push(checkpoint.clone());
        Ok(())
    }
}

/// Discards everything.
pub struct NullSink;

impl TrainSink for NullSink {}

#[derive(Debug, Clone, PartialEq)]
pub enum RunStatus {
    Completed,
    /// Stopped before `step` because its loss or gradient was not finite.
    Aborted { step: u64, reason: String },
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: AnyModel,
    /// Parameters after the last successful step.
    pub checkpoint: Checkpoint,
    pub status: RunStatus,
}

/// Independent random streams derived from one seed.
pub struct Streams {
    pub init: ChaCha8Rng,
    pub tasks: ChaCha8Rng,
    pub noise_seed: u64,
    pub validation: ChaCha8Rng,
}

impl Streams {
    pub fn new(seed: u64) -> Self {
        let stream = |s: u64| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            r.set_stream(s);
            r
        };
        Self {
            init: stream(0),
            tasks: stream(1),
            noise_seed: seed ^ 0x6a09_e667_f3bc_c909,
            validation: stream(3),
        }
    }
}

/// Train from scratch. Validation tasks are drawn once up front, so every
/// validation record scores the same functions.
pub fn train_run(cfg: &TrainConfig, sampler: &TaskSampler, sink: &mut dyn TrainSink) -> Result<TrainOutcome> {
    cfg.validate()?;
    if sampler.x_dim() != cfg.model.x_dim || sampler.y_dim() != cfg.model.y_dim {
        return Err(Error::Config(format!(
            "task source has x_dim {} / y_dim {}, model expects {} / {}",
            sampler.x_dim(),
            sampler.y_dim(),
            cfg.model.x_dim,
            cfg.model.y_dim
        )));
    }
    let mut streams = Streams::new(cfg.seed);
    let model = AnyModel::new(cfg.model.clone(), &mut streams.init)?;
    let validation = if cfg.validate_every > 0 {
        sampler.eval_tasks(cfg.validation_tasks, &mut streams.validation)?
    } else {
        Vec::new()
    };
    train_from(cfg, model, sampler, &validation, &mut streams, sink)
}

fn train_from(
    cfg: &TrainConfig,
    mut model: AnyModel,
    sampler: &TaskSampler,
    validation: &[Task],
    streams: &mut Streams,
    sink: &mut dyn TrainSink,
) -> Result<TrainOutcome> {
    let mut adam = AdamState::new(model.params());
    let mut noise = NoiseSource::seeded(streams.noise_seed);
    let started = Instant::now();
    let mut status = RunStatus::Completed;
    let mut done = 0u64;
    for step in 1..=cfg.iterations {
        let batch = sampler.train_batch(cfg.batch_size, &mut streams.tasks)?;
        let outcome = match elbo_step(&model, &batch, cfg.noise_samples, cfg.kl_scale, &mut noise) {
            Ok(o) => o,
            Err(Error::NonFinite { what }) => {
                status = RunStatus::Aborted { step, reason: what };
                break;
            }
            Err(e) => return Err(e),
        };
        let mut grads = outcome.grads;
        if let Some(clip) = cfg.grad_clip {
            let norm = grads.global_norm();
            if norm > clip {
                grads.scale(clip / norm);
            }
        }
        adam_update(model.params_mut(), &grads, &mut adam, cfg.learning_rate)?;
        done = step;
        sink.on_step(&StepRecord {
            step,
            loss: outcome.loss,
            nll: outcome.nll,
            kl: outcome.kl,
            wall_time: started.elapsed().as_secs_f64(),
        })?;
        if cfg.validate_every > 0 && (step % cfg.validate_every == 0 || step == cfg.iterations) {
            let report = compute_metrics(&model, validation, DEFAULT_SAMPLES, cfg.seed)?;
            sink.on_validation(step, &report.record)?;
        }
        if cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0 {
            sink.on_checkpoint(&model.checkpoint(step))?;
        }
    }
    let checkpoint = model.checkpoint(done);
    let periodic = cfg.checkpoint_every > 0 && done > 0 && done % cfg.checkpoint_every == 0;
    if !periodic {
        sink.on_checkpoint(&checkpoint)?;
    }
    Ok(TrainOutcome {
        model,
        checkpoint,
        status,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn one_param_store(v: Matrix) -> (ParamStore, crate::diff::ParamId) {
        let mut store = ParamStore::new();
        let id = store.register("w", v).unwrap();
        (store, id)
    }

    fn grads_for(store: &ParamStore, id: crate::diff::ParamId, g: Matrix) -> Gradients {
        let graph = Graph::new();
        let w = graph.param(store, id);
        let loss = (w * graph.constant(g)).sum_all();
        graph.backward(loss).unwrap();
        graph.param_grads()
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let (mut store, id) = one_param_store(array![[1.0, -2.0]]);
        let mut st = AdamState::new(&store);
        let grads = grads_for(&store, id, array![[0.0, 0.0]]);
        adam_update(&mut store, &grads, &mut st, 1e-3).unwrap();
        assert_eq!(store.get(id), &array![[1.0, -2.0]]);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let (mut store, id) = one_param_store(array![[0.0, 0.0]]);
        let mut st = AdamState::new(&store);
        let grads = grads_for(&store, id, array![[3.0, -0.5]]);
        adam_update(&mut store, &grads, &mut st, 1e-3).unwrap();
        let p = store.get(id);
        assert!((p[[0, 0]] + 1e-3).abs() < 1e-9);
        assert!((p[[0, 1]] - 1e-3).abs() < 1e-9);
    }

    #[test]
    fn constant_gradient_drifts_monotonically() {
        let (mut store, id) = one_param_store(array![[0.0]]);
        let mut st = AdamState::new(&store);
        let mut last = 0.0;
        for _ in 0..50 {
            let grads = grads_for(&store, id, array![[2.0]]);
            adam_update(&mut store, &grads, &mut st, 1e-2).unwrap();
            let now = store.get(id)[[0, 0]];
            assert!(now < last);
            last = now;
        }
    }

    #[test]
    fn invalid_configs_rejected() {
        let base = TrainConfig::new(ModelConfig::trig_toy(), 1, 0);
        assert!(base.validate().is_ok());
        for cfg in [
            TrainConfig { batch_size: 0, ..base.clone() },
            TrainConfig { learning_rate: 0.0, ..base.clone() },
            TrainConfig { precision: Precision::Single, ..base.clone() },
            TrainConfig { noise_samples: 0, ..base.clone() },
        ] {
            assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        }
    }
}
