//! TOML run configuration with command-line overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use nvdp_core::model::{ModelConfig, ModelKind, VarianceMode};
use nvdp_core::nets::Activation;
use nvdp_core::tasks::{GpConfig, TaskSampler};
use nvdp_core::train::{KlScale, TrainConfig};

use crate::UsageError;

/// Architecture starting point; individual `[model]` keys override it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    DeskGp,
    PaperGp,
    Trig,
    Image,
}

impl Preset {
    fn model(self, kind: ModelKind, variance: VarianceMode) -> ModelConfig {
        match self {
            Preset::DeskGp => ModelConfig::desk_gp(kind, variance),
            Preset::PaperGp => ModelConfig::paper_gp(kind, variance),
            Preset::Trig => ModelConfig { kind, variance, ..ModelConfig::trig_toy() },
            Preset::Image => ModelConfig { variance, ..ModelConfig::image(kind) },
        }
    }

    fn default_variance(self) -> VarianceMode {
        match self {
            Preset::DeskGp | Preset::PaperGp => VarianceMode::Fixed,
            Preset::Trig | Preset::Image => VarianceMode::Learned,
        }
    }

    fn default_source(self) -> &'static str {
        match self {
            Preset::Trig => "trig",
            _ => "gp",
        }
    }
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub tasks: TaskSection,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub iterations: Option<u64>,
    /// Passes over an image list; converted to iterations.
    pub epochs: Option<u64>,
    pub seed: Option<u64>,
    pub learning_rate: Option<f64>,
    pub batch_size: Option<usize>,
    pub noise_samples: Option<usize>,
    pub checkpoint_every: Option<u64>,
    pub validate_every: Option<u64>,
    pub validation_tasks: Option<usize>,
    pub grad_clip: Option<f64>,
    pub kl_scale: Option<KlScale>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    /// Kept as text so an unknown kind can be reported with the valid list.
    pub kind: Option<String>,
    pub preset: Option<Preset>,
    pub variance: Option<VarianceMode>,
    pub d_r: Option<usize>,
    pub encoder_layers: Option<usize>,
    pub decoder_hidden: Option<Vec<usize>>,
    pub meta_hidden: Option<Vec<usize>>,
    pub meta_activation: Option<Activation>,
    pub fixed_sigma: Option<f64>,
    pub decoder_sees_representation: Option<bool>,
    pub d_z: Option<usize>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSection {
    /// `gp`, `trig` or `idx:<path>`.
    pub source: Option<String>,
    /// Cap on the number of images read from an IDX file.
    pub limit: Option<usize>,
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<Self, UsageError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| UsageError(format!("cannot read config {}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| UsageError(format!("config {}: {e}", path.display())))
    }
}

/// Where tasks come from.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(rename_all = "kebab-case", tag = "kind", content = "path")]
pub enum TaskSourceSpec {
    Gp,
    Trig,
    Idx(PathBuf),
}

impl std::str::FromStr for TaskSourceSpec {
    type Err = UsageError;

    fn from_str(s: &str) -> Result<Self, UsageError> {
        match s {
            "gp" => Ok(Self::Gp),
            "trig" => Ok(Self::Trig),
            _ => match s.strip_prefix("idx:") {
                Some(path) if !path.is_empty() => Ok(Self::Idx(PathBuf::from(path))),
                _ => Err(UsageError(format!(
                    "unknown task source {s:?}; expected gp, trig or idx:<path>"
                ))),
            },
        }
    }
}

impl TaskSourceSpec {
    pub fn sampler(&self, limit: Option<usize>) -> nvdp_core::Result<TaskSampler> {
        Ok(match self {
            Self::Gp => TaskSampler::gp(GpConfig::default()),
            Self::Trig => TaskSampler::trig(),
            Self::Idx(path) => {
                TaskSampler::images(nvdp_core::idx::load_idx_images(path, None, limit)?)?
            }
        })
    }

    pub fn image_count(&self, sampler: &TaskSampler) -> Option<usize> {
        match &sampler.source {
            nvdp_core::tasks::TaskSource::Images(images) => Some(images.len()),
            _ => None,
        }
    }
}

pub fn parse_kind(name: &str) -> Result<ModelKind, UsageError> {
    name.parse::<ModelKind>().map_err(|_| {
        UsageError(format!(
            "unknown model kind {name:?}; valid kinds: {}",
            ModelKind::valid_names()
        ))
    })
}

/// Flag values that take precedence over the file.
#[derive(Debug, Clone, Default, clap::Args)]
pub struct TrainOverrides {
    /// Model kind (nvdp, np, np-vp, cnp, np-cnp, np-cnp-vp).
    #[arg(long)]
    pub kind: Option<String>,
    #[arg(long, value_enum)]
    pub preset: Option<Preset>,
    #[arg(long, value_parser = parse_variance)]
    pub variance: Option<VarianceMode>,
    /// Task source: gp, trig or idx:<path>.
    #[arg(long)]
    pub task_source: Option<String>,
    #[arg(long)]
    pub iterations: Option<u64>,
    #[arg(long)]
    pub epochs: Option<u64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub checkpoint_every: Option<u64>,
    #[arg(long)]
    pub validate_every: Option<u64>,
    #[arg(long)]
    pub validation_tasks: Option<usize>,
    #[arg(long)]
    pub image_limit: Option<usize>,
}

pub fn parse_variance(s: &str) -> Result<VarianceMode, String> {
    match s {
        "fixed" => Ok(VarianceMode::Fixed),
        "learned" => Ok(VarianceMode::Learned),
        _ => Err(format!("expected fixed or learned, got {s:?}")),
    }
}

/// Everything a training run needs, after merging defaults, file and flags.
#[derive(Debug, Clone, Serialize)]
pub struct EffectiveTrain {
    pub train: TrainConfig,
    pub task_source: TaskSourceSpec,
    pub image_limit: Option<usize>,
    pub epochs: Option<u64>,
}

pub const DEFAULT_ITERATIONS: u64 = 50_000;

impl EffectiveTrain {
    pub fn resolve(file: &FileConfig, flags: &TrainOverrides) -> Result<Self, UsageError> {
        let m = &file.model;
        let t = &file.train;
        let kind = match flags.kind.as_deref().or(m.kind.as_deref()) {
            Some(name) => parse_kind(name)?,
            None => ModelKind::Nvdp,
        };
        let preset = flags.preset.or(m.preset).unwrap_or(Preset::DeskGp);
        let variance = flags.variance.or(m.variance).unwrap_or(preset.default_variance());

        let mut model = preset.model(kind, variance);
        if let Some(v) = m.d_r {
            model.d_r = v;
        }
        if let Some(v) = m.encoder_layers {
            model.encoder_layers = v;
        }
        if let Some(v) = &m.decoder_hidden {
            model.decoder_hidden = v.clone();
        }
        if let Some(v) = &m.meta_hidden {
            model.meta_hidden = v.clone();
        }
        if let Some(v) = m.meta_activation {
            model.meta_activation = v;
        }
        if let Some(v) = m.fixed_sigma {
            model.fixed_sigma = v;
        }
        if let Some(v) = m.decoder_sees_representation {
            model.decoder_sees_representation = v;
        }
        if let Some(v) = m.d_z {
            model.d_z = v;
        }

        let source_text = flags
            .task_source
            .clone()
            .or_else(|| file.tasks.source.clone())
            .unwrap_or_else(|| preset.default_source().to_string());
        let task_source: TaskSourceSpec = source_text.parse()?;
        if let TaskSourceSpec::Idx(_) = task_source {
            model.x_dim = 2;
        }

        let iterations = flags.iterations.or(t.iterations).unwrap_or(DEFAULT_ITERATIONS);
        let seed = flags.seed.or(t.seed).unwrap_or(0);
        let mut train = TrainConfig::new(model, iterations, seed);
        if let Some(v) = flags.learning_rate.or(t.learning_rate) {
            train.learning_rate = v;
        }
        if let Some(v) = flags.batch_size.or(t.batch_size) {
            train.batch_size = v;
        }
        if let Some(v) = t.noise_samples {
            train.noise_samples = v;
        }
        if let Some(v) = flags.checkpoint_every.or(t.checkpoint_every) {
            train.checkpoint_every = v;
        }
        if let Some(v) = flags.validate_every.or(t.validate_every) {
            train.validate_every = v;
        }
        if let Some(v) = flags.validation_tasks.or(t.validation_tasks) {
            train.validation_tasks = v;
        }
        if t.grad_clip.is_some() {
            train.grad_clip = t.grad_clip;
        }
        if let Some(v) = t.kl_scale {
            train.kl_scale = v;
        }

        let epochs = flags.epochs.or(t.epochs);
        if epochs.is_some() && !matches!(task_source, TaskSourceSpec::Idx(_)) {
            return Err(UsageError("epochs only apply to idx:<path> task sources".into()));
        }
        train
            .validate()
            .and_then(|_| train.model.validate())
            .map_err(|e| UsageError(e.to_string()))?;
        Ok(Self {
            train,
            task_source,
            image_limit: flags.image_limit.or(file.tasks.limit),
            epochs,
        })
    }
}
