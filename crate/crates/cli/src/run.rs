//! Run directories: `<root>/<run-id>/` holding the manifest, checkpoints and metrics.

use std::fs::File;
use std::hash::{Hash, Hasher};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;

use nvdp_core::eval::{MetricsRecord, ResultRow};
use nvdp_core::model::Checkpoint;
use nvdp_core::train::{StepRecord, TrainSink};

pub const RUNS_DIR_ENV: &str = "NVDP_RUNS_DIR";
pub const MANIFEST: &str = "manifest.json";

pub fn runs_root() -> PathBuf {
    std::env::var_os(RUNS_DIR_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("runs"))
}

pub fn version() -> String {
    match option_env!("NVDP_GIT_DESCRIBE") {
        Some(describe) => describe.to_string(),
        None => format!("v{}", env!("CARGO_PKG_VERSION")),
    }
}

/// A stable run id for a command and its effective configuration.
pub fn derived_run_id(command: &str, label: &str, config: &serde_json::Value) -> String {
    let mut h = std::hash::DefaultHasher::new();
    config.to_string().hash(&mut h);
    format!("{command}-{label}-{:08x}", h.finish() as u32)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum RunState {
    Running,
    Completed,
    Aborted,
    Failed,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub run_id: String,
    pub command: String,
    pub version: String,
    pub status: RunState,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub message: Option<String>,
    pub config: serde_json::Value,
    /// Paths relative to the run directory.
    pub checkpoints: Vec<String>,
    pub metrics_files: Vec<String>,
}

pub struct RunDir {
    pub path: PathBuf,
    pub manifest: RunManifest,
}

impl RunDir {
    pub fn create(root: &Path, run_id: &str, command: &str, config: serde_json::Value) -> std::io::Result<Self> {
        let path = root.join(run_id);
        std::fs::create_dir_all(&path)?;
        let dir = Self {
            path,
            manifest: RunManifest {
                run_id: run_id.to_string(),
                command: command.to_string(),
                version: version(),
                status: RunState::Running,
                message: None,
                config,
                checkpoints: Vec::new(),
                metrics_files: Vec::new(),
            },
        };
        dir.write_manifest()?;
        Ok(dir)
    }

    pub fn write_manifest(&self) -> std::io::Result<()> {
        let text = serde_json::to_vec_pretty(&self.manifest)?;
        std::fs::write(self.path.join(MANIFEST), text)
    }

    pub fn finish(&mut self, status: RunState, message: Option<String>) -> std::io::Result<()> {
        self.manifest.status = status;
        self.manifest.message = message;
        self.write_manifest()
    }

    pub fn add_metrics_file(&mut self, name: &str) {
        if !self.manifest.metrics_files.iter().any(|m| m == name) {
            self.manifest.metrics_files.push(name.to_string());
        }
    }
}

/// Writes checkpoints as they arrive, streams step records as JSON lines
/// and collects validation rows for `metrics.csv`.
pub struct FileSink<'a> {
    run: &'a mut RunDir,
    steps: BufWriter<File>,
    pub rows: Vec<ResultRow>,
}

pub const STEPS_FILE: &str = "steps.jsonl";

impl<'a> FileSink<'a> {
    pub fn new(run: &'a mut RunDir) -> std::io::Result<Self> {
        std::fs::create_dir_all(run.path.join("checkpoints"))?;
        let steps = BufWriter::new(File::create(run.path.join(STEPS_FILE))?);
        run.add_metrics_file(STEPS_FILE);
        Ok(Self {
            run,
            steps,
            rows: Vec::new(),
        })
    }

    pub fn finish(mut self) -> std::io::Result<Vec<ResultRow>> {
        self.steps.flush()?;
        Ok(self.rows)
    }
}

impl TrainSink for FileSink<'_> {
    fn on_step(&mut self, record: &StepRecord) -> nvdp_core::Result<()> {
        serde_json::to_writer(&mut self.steps, record)?;
        self.steps.write_all(b"\n")?;
        Ok(())
    }

    fn on_validation(&mut self, step: u64, record: &MetricsRecord) -> nvdp_core::Result<()> {
        self.rows.push(ResultRow::from_record(step, record));
        Ok(())
    }

    fn on_checkpoint(&mut self, checkpoint: &Checkpoint) -> nvdp_core::Result<()> {
        let rel = format!("checkpoints/step-{}.ckpt", checkpoint.step);
        checkpoint.save(&self.run.path.join(&rel))?;
        self.run.manifest.checkpoints.push(rel);
        self.run.write_manifest()?;
        Ok(())
    }
}
