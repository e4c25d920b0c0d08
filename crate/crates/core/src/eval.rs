//! Log-likelihood metrics, the active-learning harness, and result export.

use std::path::Path;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diff::Matrix;
use crate::error::{Error, Result};
use crate::model::{ConditionalModel, PredictiveSample, HALF_LN_2PI};
use crate::noise::NoiseSource;
use crate::tasks::Task;

/// Posterior samples used for metric expectations and acquisition variance.
pub const DEFAULT_SAMPLES: usize = 16;
pub const DEFAULT_ACQUISITIONS: usize = 19;

/// Anything that yields posterior predictive realizations given a context.
pub trait Predictor {
    fn label(&self) -> String;

    fn predict(
        &self,
        context_x: &Matrix,
        context_y: &Matrix,
        query: &Matrix,
        n: usize,
        noise: &mut NoiseSource,
    ) -> Result<Vec<PredictiveSample>>;
}

impl<M: ConditionalModel + ?Sized> Predictor for M {
    fn label(&self) -> String {
        self.kind().to_string()
    }

    fn predict(
        &self,
        context_x: &Matrix,
        context_y: &Matrix,
        query: &Matrix,
        n: usize,
        noise: &mut NoiseSource,
    ) -> Result<Vec<PredictiveSample>> {
        self.sample_predictive(context_x, context_y, query, n, noise)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub ll: f64,
    pub rll: f64,
    pub pll: f64,
    pub n_samples: usize,
    pub task_count: usize,
    pub model: String,
    pub seed: u64,
    /// Seconds since the Unix epoch when the record was produced.
    pub timestamp: u64,
}

/// Metrics of a single task, with the set sizes behind them.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TaskMetrics {
    pub ll: f64,
    pub rll: f64,
    pub pll: f64,
    pub context: usize,
    pub target: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub record: MetricsRecord,
    pub per_task: Vec<TaskMetrics>,
}

/// `log((1/n) sum exp(v_i))`, shifted by the maximum so it never underflows.
pub fn log_mean_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    let sum: f64 = values.iter().map(|v| (v - max).exp()).sum();
    max + (sum / values.len() as f64).ln()
}

/// Per-point log predictive density, averaged over realizations in
/// probability space and summed over output dimensions.
pub fn pointwise_log_density(samples: &[PredictiveSample], ys: &Matrix) -> Result<Vec<f64>> {
    if samples.is_empty() {
        return Err(Error::Config("at least one posterior sample is required".into()));
    }
    for s in samples {
        if s.mean.dim() != ys.dim() || s.std.dim() != ys.dim() {
            return Err(Error::Shape {
                op: "predictive sample",
                left: s.mean.dim(),
                right: ys.dim(),
            });
        }
    }
    let mut per_sample = vec![0.0; samples.len()];
    Ok((0..ys.nrows())
        .map(|i| {
            for (slot, s) in per_sample.iter_mut().zip(samples) {
                *slot = (0..ys.ncols())
                    .map(|j| {
                        let z = (ys[[i, j]] - s.mean[[i, j]]) / s.std[[i, j]];
                        -0.5 * z * z - s.std[[i, j]].ln() - HALF_LN_2PI
                    })
                    .sum();
            }
            log_mean_exp(&per_sample)
        })
        .collect())
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Mix a base seed with a task fingerprint so per-task noise does not depend
/// on where the task sits in a list.
pub fn task_seed(seed: u64, task: &Task) -> u64 {
    let mut z = seed ^ task.fingerprint().rotate_left(17);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// LL / RLL / PLL of one split task under `n_samples` context-conditioned realizations.
pub fn task_metrics<P: Predictor + ?Sized>(
    predictor: &P,
    task: &Task,
    n_samples: usize,
    noise: &mut NoiseSource,
) -> Result<TaskMetrics> {
    if task.context.is_empty() {
        return Err(Error::EmptySet);
    }
    let (cx, cy) = task.context_points();
    let (ux, uy) = task.rows(&task.union_indices());
    let samples = predictor.predict(&cx, &cy, &ux, n_samples.max(1), noise)?;
    let density = pointwise_log_density(&samples, &uy)?;
    let s = task.context.len();
    let (ctx, tgt) = density.split_at(s);
    let metrics = TaskMetrics {
        ll: mean(&density),
        rll: mean(ctx),
        pll: if tgt.is_empty() { f64::NAN } else { mean(tgt) },
        context: s,
        target: tgt.len(),
    };
    let finite = metrics.ll.is_finite()
        && metrics.rll.is_finite()
        && (tgt.is_empty() || metrics.pll.is_finite());
    if !finite {
        return Err(Error::NonFinite {
            what: format!("metrics of task with fingerprint {:016x}", task.fingerprint()),
        });
    }
    Ok(metrics)
}

fn unix_now() -> u64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map_or(0, |d| d.as_secs())
}

/// Average per-task metrics over `tasks`. Each task draws its noise from
/// [`task_seed`], so the result is independent of task order.
pub fn compute_metrics<P: Predictor + ?Sized>(
    predictor: &P,
    tasks: &[Task],
    n_samples: usize,
    seed: u64,
) -> Result<MetricsReport> {
    if tasks.is_empty() {
        return Err(Error::Config("compute_metrics needs at least one task".into()));
    }
    let per_task = tasks
        .iter()
        .map(|t| task_metrics(predictor, t, n_samples, &mut NoiseSource::seeded(task_seed(seed, t))))
        .collect::<Result<Vec<_>>>()?;
    let avg = |f: fn(&TaskMetrics) -> f64| {
        let vals: Vec<f64> = per_task.iter().map(f).filter(|v| !v.is_nan()).collect();
        if vals.is_empty() {
            f64::NAN
        } else {
            mean(&vals)
        }
    };
    Ok(MetricsReport {
        record: MetricsRecord {
            ll: avg(|m| m.ll),
            rll: avg(|m| m.rll),
            pll: avg(|m| m.pll),
            n_samples: n_samples.max(1),
            task_count: tasks.len(),
            model: predictor.label(),
            seed,
            timestamp: unix_now(),
        },
        per_task,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Acquisition {
    /// Largest variance of predictive means across realizations.
    MaxVariance,
    /// Uniformly random among the remaining candidates.
    Random,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ActiveConfig {
    pub acquisitions: usize,
    pub realizations: usize,
    pub strategy: Acquisition,
}

impl Default for ActiveConfig {
    fn default() -> Self {
        Self {
            acquisitions: DEFAULT_ACQUISITIONS,
            realizations: DEFAULT_SAMPLES,
            strategy: Acquisition::MaxVariance,
        }
    }
}

/// One step of an acquisition trajectory: metrics with `context.len()` points observed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ActiveStep {
    pub context_size: usize,
    pub ll: f64,
    pub rll: f64,
    pub pll: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ActiveTrajectory {
    pub acquired: Vec<usize>,
    pub steps: Vec<ActiveStep>,
}

impl ActiveTrajectory {
    pub fn ll(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.ll).collect()
    }
}

/// Index of the largest value; ties go to the earliest position.
pub fn argmax_first(values: &[f64]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, &v) in values.iter().enumerate() {
        if best.is_none_or(|(_, b)| v > b) {
            best = Some((i, v));
        }
    }
    best.map(|(i, _)| i)
}

/// Grow a context from one random point by `acquisitions` greedy picks,
/// recording metrics over the whole task after each size.
///
/// The starting point and every noise draw come from `seed`, so two
/// strategies run with the same seed share their initial point.
pub fn active_learning_run<P: Predictor + ?Sized>(
    predictor: &P,
    task: &Task,
    cfg: ActiveConfig,
    seed: u64,
) -> Result<ActiveTrajectory> {
    let n = task.len();
    if n == 0 {
        return Err(Error::EmptySet);
    }
    if cfg.acquisitions >= n {
        return Err(Error::PoolExhausted {
            acquired: n.saturating_sub(1),
        });
    }
    let mut start_rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pick_rng = ChaCha8Rng::seed_from_u64(seed);
    pick_rng.set_stream(1);
    let mut noise = NoiseSource::seeded(seed.wrapping_add(0x9e37_79b9_7f4a_7c15));

    let mut context = vec![start_rng.random_range(0..n)];
    let mut steps = Vec::with_capacity(cfg.acquisitions + 1);
    let realizations = cfg.realizations.max(1);
    loop {
        let (cx, cy) = task.rows(&context);
        let samples = predictor.predict(&cx, &cy, &task.xs, realizations, &mut noise)?;
        let density = pointwise_log_density(&samples, &task.ys)?;
        let in_context = {
            let mut mask = vec![false; n];
            for &i in &context {
                mask[i] = true;
            }
            mask
        };
        let (ctx, rest): (Vec<(usize, f64)>, Vec<(usize, f64)>) =
            density.iter().copied().enumerate().partition(|(i, _)| in_context[*i]);
        let pick = |v: &[(usize, f64)]| v.iter().map(|p| p.1).collect::<Vec<_>>();
        steps.push(ActiveStep {
            context_size: context.len(),
            ll: mean(&density),
            rll: mean(&pick(&ctx)),
            pll: mean(&pick(&rest)),
        });
        if steps.len() > cfg.acquisitions {
            break;
        }
        let candidates: Vec<usize> = rest.iter().map(|p| p.0).collect();
        let chosen = match cfg.strategy {
            Acquisition::MaxVariance => {
                let spread: Vec<f64> = candidates
                    .iter()
                    .map(|&i| mean_spread(&samples, i))
                    .collect();
                candidates[argmax_first(&spread).ok_or(Error::PoolExhausted {
                    acquired: context.len() - 1,
                })?]
            }
            Acquisition::Random => *candidates.choose(&mut pick_rng).ok_or(Error::PoolExhausted {
                acquired: context.len() - 1,
            })?,
        };
        context.push(chosen);
    }
    Ok(ActiveTrajectory {
        acquired: context,
        steps,
    })
}

/// Population variance of the predictive means at row `i`, summed over outputs.
fn mean_spread(samples: &[PredictiveSample], i: usize) -> f64 {
    let cols = samples[0].mean.ncols();
    let n = samples.len() as f64;
    (0..cols)
        .map(|j| {
            let m = samples.iter().map(|s| s.mean[[i, j]]).sum::<f64>() / n;
            samples
                .iter()
                .map(|s| (s.mean[[i, j]] - m).powi(2))
                .sum::<f64>()
                / n
        })
        .sum()
}

/// One line of a results table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub step: u64,
    pub model: String,
    pub seed: u64,
    pub ll: f64,
    pub rll: f64,
    pub pll: f64,
}

impl ResultRow {
    pub fn from_record(step: u64, rec: &MetricsRecord) -> Self {
        Self {
            step,
            model: rec.model.clone(),
            seed: rec.seed,
            ll: rec.ll,
            rll: rec.rll,
            pll: rec.pll,
        }
    }

    /// One row per trajectory entry, numbered by acquisition step.
    pub fn from_trajectory(model: &str, seed: u64, traj: &ActiveTrajectory) -> Vec<Self> {
        traj.steps
            .iter()
            .enumerate()
            .map(|(step, s)| Self {
                step: step as u64,
                model: model.to_string(),
                seed,
                ll: s.ll,
                rll: s.rll,
                pll: s.pll,
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExportFormat {
    Csv,
    Json,
}

pub const CSV_HEADER: &str = "step,model,seed,ll,rll,pll";

#[derive(Serialize, Deserialize)]
struct JsonResults {
    config: serde_json::Value,
    rows: Vec<ResultRow>,
}

/// Write `rows` as CSV or JSON. The configuration is embedded in JSON output;
/// CSV output gets it in a `<path>.config.json` sidecar so the table keeps its
/// fixed header.
pub fn export_results(
    rows: &[ResultRow],
    path: &Path,
    format: ExportFormat,
    config: &serde_json::Value,
) -> Result<()> {
    if rows.is_empty() {
        return Err(Error::Config("no result rows to export".into()));
    }
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    match format {
        ExportFormat::Csv => {
            let mut w = csv::Writer::from_path(path)?;
            for row in rows {
                w.serialize(row)?;
            }
            w.flush()?;
            let mut sidecar = path.as_os_str().to_owned();
            sidecar.push(".config.json");
            std::fs::write(sidecar, serde_json::to_vec_pretty(config)?)?;
        }
        ExportFormat::Json => {
            let doc = JsonResults {
                config: config.clone(),
                rows: rows.to_vec(),
            };
            std::fs::write(path, serde_json::to_vec_pretty(&doc)?)?;
        }
    }
    Ok(())
}

pub fn read_results_csv(path: &Path) -> Result<Vec<ResultRow>> {
    let mut r = csv::Reader::from_path(path)?;
    let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    if header.join(",") != CSV_HEADER {
        return Err(Error::Config(format!(
            "unexpected results header {:?}, expected {CSV_HEADER}",
            header.join(",")
        )));
    }
    Ok(r.deserialize().collect::<std::result::Result<Vec<ResultRow>, _>>()?)
}

pub fn read_results_json(path: &Path) -> Result<(serde_json::Value, Vec<ResultRow>)> {
    let doc: JsonResults = serde_json::from_slice(&std::fs::read(path)?)?;
    Ok((doc.config, doc.rows))
}
