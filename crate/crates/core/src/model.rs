//! Model configuration, the common conditional-model interface, and checkpoints.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::baselines::NpModel;
use crate::diff::{Graph, Matrix, ParamStore, Var};
use crate::error::{Error, Result};
use crate::nets::Activation;
use crate::noise::NoiseSource;
use crate::nvdp::NvdpModel;
use crate::tasks::Task;

pub const HALF_LN_2PI: f64 = 0.918_938_533_204_672_7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    Nvdp,
    Np,
    NpVp,
    Cnp,
    NpCnp,
    NpCnpVp,
}

impl ModelKind {
    pub const ALL: [ModelKind; 6] = [
        ModelKind::Nvdp,
        ModelKind::Np,
        ModelKind::NpVp,
        ModelKind::Cnp,
        ModelKind::NpCnp,
        ModelKind::NpCnpVp,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::Nvdp => "nvdp",
            ModelKind::Np => "np",
            ModelKind::NpVp => "np-vp",
            ModelKind::Cnp => "cnp",
            ModelKind::NpCnp => "np-cnp",
            ModelKind::NpCnpVp => "np-cnp-vp",
        }
    }

    pub fn valid_names() -> String {
        Self::ALL.map(|k| k.as_str()).join(", ")
    }

    pub fn has_latent_path(self) -> bool {
        matches!(
            self,
            ModelKind::Np | ModelKind::NpVp | ModelKind::NpCnp | ModelKind::NpCnpVp
        )
    }

    pub fn has_deterministic_path(self) -> bool {
        matches!(self, ModelKind::Cnp | ModelKind::NpCnp | ModelKind::NpCnpVp)
    }

    pub fn uses_variational_prior(self) -> bool {
        matches!(self, ModelKind::Nvdp | ModelKind::NpVp | ModelKind::NpCnpVp)
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown model kind {s:?}; valid kinds: {}",
                    Self::valid_names()
                ))
            })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum VarianceMode {
    Fixed,
    Learned,
}

/// Architecture of a conditional model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub kind: ModelKind,
    pub x_dim: usize,
    pub y_dim: usize,
    /// Width of the set representation and of every encoder layer.
    pub d_r: usize,
    /// Number of `lin+relu` layers in each set encoder.
    pub encoder_layers: usize,
    pub decoder_hidden: Vec<usize>,
    /// Hidden widths of each per-layer rate network (NVDP only).
    pub meta_hidden: Vec<usize>,
    pub meta_activation: Activation,
    pub variance: VarianceMode,
    /// Predictive std in fixed-variance mode.
    pub fixed_sigma: f64,
    /// Feed the context representation to the decoder next to `x` (NVDP only).
    pub decoder_sees_representation: bool,
    /// Latent size (latent-path baselines only).
    pub d_z: usize,
}

impl ModelConfig {
    /// Desk-scale 1-D GP preset: 2x64 decoder, 4x64 rate networks, `d_r = 64`.
    pub fn desk_gp(kind: ModelKind, variance: VarianceMode) -> Self {
        Self {
            kind,
            x_dim: 1,
            y_dim: 1,
            d_r: 64,
            encoder_layers: 3,
            decoder_hidden: vec![64, 64],
            meta_hidden: vec![64; 4],
            meta_activation: Activation::LeakyRelu,
            variance,
            fixed_sigma: 1.0,
            decoder_sees_representation: false,
            d_z: 64,
        }
    }

    /// Full-size 1-D GP architecture: 4x128 decoder and rate networks, 6-layer encoder.
    pub fn paper_gp(kind: ModelKind, variance: VarianceMode) -> Self {
        Self {
            d_r: 128,
            encoder_layers: 6,
            decoder_hidden: vec![128; 4],
            meta_hidden: vec![128; 4],
            d_z: 128,
            ..Self::desk_gp(kind, variance)
        }
    }

    /// The small 13-12-12-2 trigonometry model.
    pub fn trig_toy() -> Self {
        Self {
            kind: ModelKind::Nvdp,
            x_dim: 1,
            y_dim: 1,
            d_r: 12,
            encoder_layers: 6,
            decoder_hidden: vec![12, 12],
            meta_hidden: vec![12; 4],
            meta_activation: Activation::Mish,
            variance: VarianceMode::Learned,
            fixed_sigma: 1.0,
            decoder_sees_representation: true,
            d_z: 12,
        }
    }

    /// Pixel-coordinate regression on grayscale images.
    pub fn image(kind: ModelKind) -> Self {
        Self {
            x_dim: 2,
            ..Self::desk_gp(kind, VarianceMode::Learned)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.x_dim == 0 || self.y_dim == 0 {
            return bad("x_dim and y_dim must be >= 1".into());
        }
        if self.d_r == 0 || self.encoder_layers == 0 {
            return bad("d_r and encoder_layers must be >= 1".into());
        }
        if self.decoder_hidden.is_empty() || self.decoder_hidden.contains(&0) {
            return bad(format!(
                "decoder_hidden needs at least one positive width, got {:?}",
                self.decoder_hidden
            ));
        }
        if self.meta_hidden.contains(&0) {
            return bad("meta_hidden widths must be >= 1".into());
        }
        if self.kind.has_latent_path() && self.d_z == 0 {
            return bad("d_z must be >= 1 for latent models".into());
        }
        if self.variance == VarianceMode::Fixed && !(self.fixed_sigma > 0.0) {
            return bad(format!("fixed_sigma must be > 0, got {}", self.fixed_sigma));
        }
        Ok(())
    }

    /// Width of the decoder's final layer.
    pub fn decoder_output_width(&self) -> usize {
        match self.variance {
            VarianceMode::Fixed => self.y_dim,
            VarianceMode::Learned => 2 * self.y_dim,
        }
    }
}

/// Predictive Gaussian per query row, still on the graph.
#[derive(Debug, Clone, Copy)]
pub struct Predictive<'g> {
    pub mean: Var<'g>,
    pub std: Var<'g>,
}

/// One posterior realization evaluated at the query points.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictiveSample {
    pub mean: Matrix,
    pub std: Matrix,
}

/// Per-task terms of the negative ELBO.
#[derive(Debug, Clone, Copy)]
pub struct TaskObjective<'g> {
    /// Mean negative log-likelihood per target point.
    pub nll: Var<'g>,
    pub kl: Var<'g>,
}

/// Mean Gaussian log-density per row, summed over output dimensions.
pub fn gaussian_log_likelihood<'g>(pred: Predictive<'g>, ys: &Matrix) -> Var<'g> {
    let g = pred.mean.graph();
    let y = g.input(ys.clone());
    let z = (y - pred.mean).div(pred.std);
    let per_entry = z.square().scale(-0.5) - pred.std.log();
    let rows = ys.nrows() as f64;
    per_entry
        .sum_all()
        .scale(1.0 / rows)
        .add_scalar(-HALF_LN_2PI * ys.ncols() as f64)
}

pub(crate) fn fixed_std<'g>(g: &'g Graph, rows: usize, cols: usize, sigma: f64) -> Var<'g> {
    g.input(Matrix::from_elem((rows, cols), sigma))
}

/// A model that conditions a predictive distribution on a context set.
pub trait ConditionalModel {
    fn config(&self) -> &ModelConfig;
    fn params(&self) -> &ParamStore;
    fn params_mut(&mut self) -> &mut ParamStore;

    fn kind(&self) -> ModelKind {
        self.config().kind
    }

    /// Negative-ELBO terms of one split task, averaging the likelihood over
    /// `samples` noise draws. The likelihood covers the target points (the
    /// context points when the task has no separate target).
    fn objective<'g>(
        &self,
        g: &'g Graph,
        task: &Task,
        samples: usize,
        noise: &mut NoiseSource,
    ) -> Result<TaskObjective<'g>>;

    /// `n` posterior realizations conditioned on the context, evaluated at `query`.
    fn sample_predictive(
        &self,
        context_x: &Matrix,
        context_y: &Matrix,
        query: &Matrix,
        n: usize,
        noise: &mut NoiseSource,
    ) -> Result<Vec<PredictiveSample>>;
}

/// Any of the supported model families.
#[derive(Debug, Clone)]
pub enum AnyModel {
    Nvdp(NvdpModel),
    Np(NpModel),
}

impl AnyModel {
    pub fn new<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        Ok(match config.kind {
            ModelKind::Nvdp => AnyModel::Nvdp(NvdpModel::new(config, rng)?),
            _ => AnyModel::Np(NpModel::new(config, rng)?),
        })
    }

    pub fn seeded(config: ModelConfig, seed: u64) -> Result<Self> {
        Self::new(config, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    pub fn as_dyn(&self) -> &dyn ConditionalModel {
        match self {
            AnyModel::Nvdp(m) => m,
            AnyModel::Np(m) => m,
        }
    }

    fn as_dyn_mut(&mut self) -> &mut dyn ConditionalModel {
        match self {
            AnyModel::Nvdp(m) => m,
            AnyModel::Np(m) => m,
        }
    }

    pub fn checkpoint(&self, step: u64) -> Checkpoint {
        Checkpoint::capture(self.config(), self.params(), step)
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let mut model = Self::seeded(ckpt.config.clone(), 0)?;
        ckpt.restore_into(model.params_mut())?;
        Ok(model)
    }
}

impl ConditionalModel for AnyModel {
    fn config(&self) -> &ModelConfig {
        self.as_dyn().config()
    }

    fn params(&self) -> &ParamStore {
        self.as_dyn().params()
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        self.as_dyn_mut().params_mut()
    }

    fn objective<'g>(
        &self,
        g: &'g Graph,
        task: &Task,
        samples: usize,
        noise: &mut NoiseSource,
    ) -> Result<TaskObjective<'g>> {
        self.as_dyn().objective(g, task, samples, noise)
    }

    fn sample_predictive(
        &self,
        context_x: &Matrix,
        context_y: &Matrix,
        query: &Matrix,
        n: usize,
        noise: &mut NoiseSource,
    ) -> Result<Vec<PredictiveSample>> {
        self.as_dyn()
            .sample_predictive(context_x, context_y, query, n, noise)
    }
}

pub const CHECKPOINT_FORMAT: &str = "nvdp-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointParam {
    pub name: String,
    pub shape: [usize; 2],
    /// Row-major values.
    pub values: Vec<f64>,
}

/// Flat `(name, shape, row-major f64 values)` parameter dump plus the model
/// configuration, stored as one JSON document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub step: u64,
    pub config: ModelConfig,
    pub params: Vec<CheckpointParam>,
}

impl Checkpoint {
    pub fn capture(config: &ModelConfig, store: &ParamStore, step: u64) -> Self {
        let params = store
            .iter()
            .map(|(_, p)| CheckpointParam {
                name: p.name.clone(),
                shape: [p.value.nrows(), p.value.ncols()],
                values: p.value.iter().copied().collect(),
            })
            .collect();
        Self {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            step,
            config: config.clone(),
            params,
        }
    }

    /// Overwrite `store` with the saved values; names and shapes must match exactly.
    pub fn restore_into(&self, store: &mut ParamStore) -> Result<()> {
        if self.format != CHECKPOINT_FORMAT || self.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported format {} v{}",
                self.format, self.version
            )));
        }
        if self.params.len() != store.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint has {} parameters, model expects {}",
                self.params.len(),
                store.len()
            )));
        }
        for p in &self.params {
            let id = store
                .find(&p.name)
                .ok_or_else(|| Error::Checkpoint(format!("unknown parameter {:?}", p.name)))?;
            let [rows, cols] = p.shape;
            if store.get(id).dim() != (rows, cols) || p.values.len() != rows * cols {
                return Err(Error::Checkpoint(format!(
                    "shape mismatch for {:?}: saved {:?}, model {:?}",
                    p.name,
                    p.shape,
                    store.get(id).dim()
                )));
            }
            *store.get_mut(id) = Matrix::from_shape_vec((rows, cols), p.values.clone())
                .expect("length checked");
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        std::fs::write(path, serde_json::to_vec(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_slice(&std::fs::read(path)?)?)
    }
}
