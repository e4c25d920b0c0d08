//! Regression task generators and context/target splitting.
//!
//! A [`Task`] owns its full point set; the split is stored as two disjoint
//! index lists. Training splits draw a context of `S ~ U{3..97}` points and a
//! disjoint target of `N ~ U{S+1..99}` points, so a training task is
//! generated with exactly `S + N` points. Evaluation tasks carry 400 points
//! (784 for images) and every non-context point is a target.

use std::collections::hash_map::DefaultHasher;
use std::f64::consts::PI;
use std::hash::{Hash, Hasher};
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use ndarray::Axis;
use rand::seq::index::sample;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::diff::Matrix;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrigFamily {
    Sin,
    Cos,
    Tanh,
}

impl TrigFamily {
    pub const ALL: [TrigFamily; 3] = [TrigFamily::Sin, TrigFamily::Cos, TrigFamily::Tanh];

    pub fn apply(self, x: f64) -> f64 {
        match self {
            TrigFamily::Sin => x.sin(),
            TrigFamily::Cos => x.cos(),
            TrigFamily::Tanh => x.tanh(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "generator", rename_all = "kebab-case")]
pub enum TaskMeta {
    None,
    Gp {
        length_scale: f64,
        signal: f64,
    },
    Trig {
        family: TrigFamily,
        amplitude: f64,
        shift: f64,
    },
    Image {
        index: usize,
        label: Option<u8>,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Task {
    pub xs: Matrix,
    pub ys: Matrix,
    pub context: Vec<usize>,
    pub target: Vec<usize>,
    pub meta: TaskMeta,
}

impl Task {
    /// A task with no split yet.
    pub fn new(xs: Matrix, ys: Matrix, meta: TaskMeta) -> Self {
        assert_eq!(xs.nrows(), ys.nrows(), "xs and ys must have one row per point");
        Self {
            xs,
            ys,
            context: Vec::new(),
            target: Vec::new(),
            meta,
        }
    }

    pub fn len(&self) -> usize {
        self.xs.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn x_dim(&self) -> usize {
        self.xs.ncols()
    }

    pub fn y_dim(&self) -> usize {
        self.ys.ncols()
    }

    /// Attach a split after checking bounds and disjointness.
    pub fn with_split(mut self, context: Vec<usize>, target: Vec<usize>) -> Result<Self> {
        let n = self.len();
        let mut seen = vec![false; n];
        for &i in context.iter().chain(&target) {
            if i >= n {
                return Err(Error::Config(format!("split index {i} out of range for {n} points")));
            }
            if seen[i] {
                return Err(Error::Config(format!("split index {i} appears twice")));
            }
            seen[i] = true;
        }
        self.context = context;
        self.target = target;
        Ok(self)
    }

    pub fn is_split(&self) -> bool {
        !self.context.is_empty()
    }

    /// Context indices followed by target indices.
    pub fn union_indices(&self) -> Vec<usize> {
        self.context.iter().chain(&self.target).copied().collect()
    }

    pub fn rows(&self, idx: &[usize]) -> (Matrix, Matrix) {
        (self.xs.select(Axis(0), idx), self.ys.select(Axis(0), idx))
    }

    pub fn context_points(&self) -> (Matrix, Matrix) {
        self.rows(&self.context)
    }

    pub fn target_points(&self) -> (Matrix, Matrix) {
        self.rows(&self.target)
    }

    /// Stable hash of the point values and split, used to seed per-task noise.
    pub fn fingerprint(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for v in self.xs.iter().chain(self.ys.iter()) {
            v.to_bits().hash(&mut h);
        }
        self.context.hash(&mut h);
        self.target.hash(&mut h);
        h.finish()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GpConfig {
    pub x_range: (f64, f64),
    pub length_scale_range: (f64, f64),
    pub signal_range: (f64, f64),
    pub jitter: f64,
}

impl Default for GpConfig {
    fn default() -> Self {
        Self {
            x_range: (-2.0, 2.0),
            length_scale_range: (0.1, 0.6),
            signal_range: (0.1, 1.0),
            jitter: 1e-6,
        }
    }
}

impl GpConfig {
    pub fn validate(&self) -> Result<()> {
        let ordered = |(lo, hi): (f64, f64)| lo.is_finite() && hi.is_finite() && lo <= hi;
        if !(self.jitter > 0.0) {
            return Err(Error::Config(format!("gp jitter must be > 0, got {}", self.jitter)));
        }
        if !ordered(self.x_range) || !ordered(self.length_scale_range) || !ordered(self.signal_range)
        {
            return Err(Error::Config("gp ranges must be finite and ordered".into()));
        }
        if self.length_scale_range.0 <= 0.0 {
            return Err(Error::Config("gp length scale must be positive".into()));
        }
        Ok(())
    }
}

/// `sf^2 * exp(-(x - x')^2 / (2 l^2))`
pub fn se_kernel(x: f64, x_prime: f64, length_scale: f64, signal: f64) -> f64 {
    let d = x - x_prime;
    signal * signal * (-d * d / (2.0 * length_scale * length_scale)).exp()
}

fn uniform<R: Rng + ?Sized>(rng: &mut R, (lo, hi): (f64, f64)) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.random_range(lo..hi)
    }
}

/// Draw `f(xs)` from a zero-mean GP with the squared-exponential kernel.
/// A failed Cholesky is retried once with ten times the jitter.
pub fn gp_draw<R: Rng + ?Sized>(
    xs: &[f64],
    length_scale: f64,
    signal: f64,
    jitter: f64,
    rng: &mut R,
) -> Result<Vec<f64>> {
    let n = xs.len();
    let mut gram = DMatrix::zeros(n, n);
    for j in 0..n {
        for i in j..n {
            let k = se_kernel(xs[i], xs[j], length_scale, signal);
            gram[(i, j)] = k;
            gram[(j, i)] = k;
        }
    }
    let with_jitter = |jit: f64| {
        let mut m = gram.clone();
        for i in 0..n {
            m[(i, i)] += jit;
        }
        m
    };
    let chol = with_jitter(jitter)
        .cholesky()
        .or_else(|| with_jitter(10.0 * jitter).cholesky())
        .ok_or(Error::Cholesky {
            size: n,
            jitter: 10.0 * jitter,
        })?;
    let white = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
    Ok((chol.l() * white).iter().copied().collect())
}

/// GP task with hyperparameters drawn from `cfg`.
pub fn sample_gp_task<R: Rng + ?Sized>(cfg: &GpConfig, n_points: usize, rng: &mut R) -> Result<Task> {
    let length_scale = uniform(rng, cfg.length_scale_range);
    let signal = uniform(rng, cfg.signal_range);
    sample_gp_task_with(cfg, n_points, length_scale, signal, rng)
}

pub fn sample_gp_task_with<R: Rng + ?Sized>(
    cfg: &GpConfig,
    n_points: usize,
    length_scale: f64,
    signal: f64,
    rng: &mut R,
) -> Result<Task> {
    let xs: Vec<f64> = (0..n_points).map(|_| uniform(rng, cfg.x_range)).collect();
    let ys = gp_draw(&xs, length_scale, signal, cfg.jitter, rng)?;
    Ok(Task::new(
        Matrix::from_shape_vec((n_points, 1), xs).expect("column vector"),
        Matrix::from_shape_vec((n_points, 1), ys).expect("column vector"),
        TaskMeta::Gp {
            length_scale,
            signal,
        },
    ))
}

/// `y = a * f(2x - b*pi)` with `f` in {sin, cos, tanh}, `a ~ U(1.5, 2)`,
/// `b ~ U(-0.1, 0.1)` and `x ~ U(-pi, pi)`.
pub fn trig_function(family: TrigFamily, amplitude: f64, shift: f64, x: f64) -> f64 {
    amplitude * family.apply(2.0 * x - shift * PI)
}

pub fn sample_trig_task<R: Rng + ?Sized>(n_points: usize, rng: &mut R) -> Task {
    let family = TrigFamily::ALL[rng.random_range(0..3)];
    let amplitude = rng.random_range(1.5..2.0);
    let shift = rng.random_range(-0.1..0.1);
    let xs = Matrix::from_shape_fn((n_points, 1), |_| rng.random_range(-PI..PI));
    let ys = xs.mapv(|x| trig_function(family, amplitude, shift, x));
    Task::new(
        xs,
        ys,
        TaskMeta::Trig {
            family,
            amplitude,
            shift,
        },
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Phase {
    Train,
    Eval,
}

/// Context/target size ranges (all bounds inclusive).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitProtocol {
    pub context_min: usize,
    pub context_max: usize,
    /// Training targets satisfy `S + 1 <= N <= train_target_max`.
    pub train_target_max: usize,
    /// Points in an evaluation task.
    pub eval_points: usize,
}

impl SplitProtocol {
    pub const GP: SplitProtocol = SplitProtocol {
        context_min: 3,
        context_max: 97,
        train_target_max: 99,
        eval_points: 400,
    };

    /// Few-shot protocol for the trigonometry toy.
    pub const TRIG: SplitProtocol = SplitProtocol {
        context_min: 3,
        context_max: 8,
        train_target_max: 99,
        eval_points: 400,
    };

    pub const IMAGE: SplitProtocol = SplitProtocol {
        context_min: 3,
        context_max: 197,
        train_target_max: 199,
        eval_points: 784,
    };

    pub fn validate(&self) -> Result<()> {
        if self.context_min == 0
            || self.context_min > self.context_max
            || self.context_max >= self.train_target_max
            || self.context_max >= self.eval_points
        {
            return Err(Error::Config(format!("inconsistent split protocol {self:?}")));
        }
        Ok(())
    }

    pub fn draw_context_size<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        rng.random_range(self.context_min..=self.context_max)
    }

    /// `(S, N)` for a training split.
    pub fn draw_train_sizes<R: Rng + ?Sized>(&self, rng: &mut R) -> (usize, usize) {
        let s = self.draw_context_size(rng);
        let n = rng.random_range(s + 1..=self.train_target_max);
        (s, n)
    }
}

/// Disjoint context/target indices of the requested sizes, drawn without replacement.
pub fn split_with_sizes<R: Rng + ?Sized>(
    n_points: usize,
    context_size: usize,
    target_size: usize,
    rng: &mut R,
) -> Result<(Vec<usize>, Vec<usize>)> {
    let required = context_size + target_size;
    if required > n_points || context_size == 0 {
        return Err(Error::InsufficientPoints {
            required: required.max(1),
            available: n_points,
        });
    }
    let mut picked = sample(rng, n_points, required).into_vec();
    let target = picked.split_off(context_size);
    Ok((picked, target))
}

/// Split `n_points` according to `protocol`. Evaluation splits use every
/// non-context point as a target.
pub fn split_task<R: Rng + ?Sized>(
    n_points: usize,
    protocol: &SplitProtocol,
    phase: Phase,
    rng: &mut R,
) -> Result<(Vec<usize>, Vec<usize>)> {
    match phase {
        Phase::Train => {
            let (s, n) = protocol.draw_train_sizes(rng);
            split_with_sizes(n_points, s, n, rng)
        }
        Phase::Eval => {
            let s = protocol.draw_context_size(rng);
            split_context_rest(n_points, s, rng)
        }
    }
}

/// `s` random context points; all remaining points, in index order, are targets.
pub fn split_context_rest<R: Rng + ?Sized>(
    n_points: usize,
    s: usize,
    rng: &mut R,
) -> Result<(Vec<usize>, Vec<usize>)> {
    if s == 0 || s >= n_points {
        return Err(Error::InsufficientPoints {
            required: s + 1,
            available: n_points,
        });
    }
    let context = sample(rng, n_points, s).into_vec();
    let mut is_context = vec![false; n_points];
    for &i in &context {
        is_context[i] = true;
    }
    let target = (0..n_points).filter(|&i| !is_context[i]).collect();
    Ok((context, target))
}

#[derive(Debug, Clone)]
pub enum TaskSource {
    Gp(GpConfig),
    Trig,
    Images(Arc<Vec<Task>>),
}

/// Seeded task stream for one data source and split protocol.
#[derive(Debug, Clone)]
pub struct TaskSampler {
    pub source: TaskSource,
    pub protocol: SplitProtocol,
}

impl TaskSampler {
    pub fn gp(cfg: GpConfig) -> Self {
        Self {
            source: TaskSource::Gp(cfg),
            protocol: SplitProtocol::GP,
        }
    }

    pub fn trig() -> Self {
        Self {
            source: TaskSource::Trig,
            protocol: SplitProtocol::TRIG,
        }
    }

    pub fn images(images: Vec<Task>) -> Result<Self> {
        if images.is_empty() {
            return Err(Error::Config("image task source is empty".into()));
        }
        let pixels = images[0].len();
        let protocol = SplitProtocol {
            eval_points: pixels,
            ..SplitProtocol::IMAGE
        };
        Ok(Self {
            source: TaskSource::Images(Arc::new(images)),
            protocol,
        })
    }

    pub fn with_protocol(mut self, protocol: SplitProtocol) -> Self {
        self.protocol = protocol;
        self
    }

    pub fn x_dim(&self) -> usize {
        match &self.source {
            TaskSource::Gp(_) | TaskSource::Trig => 1,
            TaskSource::Images(images) => images[0].x_dim(),
        }
    }

    pub fn y_dim(&self) -> usize {
        match &self.source {
            TaskSource::Gp(_) | TaskSource::Trig => 1,
            TaskSource::Images(images) => images[0].y_dim(),
        }
    }

    fn points<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<Task> {
        match &self.source {
            TaskSource::Gp(cfg) => sample_gp_task(cfg, n, rng),
            TaskSource::Trig => Ok(sample_trig_task(n, rng)),
            TaskSource::Images(images) => Ok(images[rng.random_range(0..images.len())].clone()),
        }
    }

    pub fn train_task<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<Task> {
        let (s, n) = self.protocol.draw_train_sizes(rng);
        let task = self.points(s + n, rng)?;
        let (context, target) = split_with_sizes(task.len(), s, n, rng)?;
        task.with_split(context, target)
    }

    pub fn train_batch<R: Rng + ?Sized>(&self, size: usize, rng: &mut R) -> Result<Vec<Task>> {
        (0..size).map(|_| self.train_task(rng)).collect()
    }

    pub fn eval_task<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<Task> {
        let s = self.protocol.draw_context_size(rng);
        self.eval_task_with_context(s, rng)
    }

    /// Evaluation task with a fixed context size.
    pub fn eval_task_with_context<R: Rng + ?Sized>(&self, s: usize, rng: &mut R) -> Result<Task> {
        let task = self.points(self.protocol.eval_points, rng)?;
        let (context, target) = split_context_rest(task.len(), s, rng)?;
        task.with_split(context, target)
    }

    pub fn eval_tasks<R: Rng + ?Sized>(&self, count: usize, rng: &mut R) -> Result<Vec<Task>> {
        (0..count).map(|_| self.eval_task(rng)).collect()
    }
}
