use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context;
use ditmem::config::RunConfig;
use ditmem::pipeline::{load_checkpoint, Model};
use ditmem::retrieval_bank::MemoryBank;

/// A command-line misuse the argument parser cannot catch (exit code 1).
#[derive(Debug)]
pub struct Usage(pub String);

impl fmt::Display for Usage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

pub fn usage(msg: impl Into<String>) -> anyhow::Error {
    Usage(msg.into()).into()
}

/// 1 for usage and config mistakes, 3 for numeric failures, 2 for the rest.
pub fn exit_code_for(e: &anyhow::Error) -> u8 {
    for cause in e.chain() {
        if cause.is::<Usage>() {
            return 1;
        }
        if let Some(err) = cause.downcast_ref::<ditmem::Error>() {
            return match err {
                ditmem::Error::Config(_) => 1,
                e if e.is_numeric() => 3,
                _ => 2,
            };
        }
    }
    2
}

pub fn open_bank(cfg: &RunConfig) -> anyhow::Result<MemoryBank> {
    let dir = cfg.bank_dir();
    MemoryBank::open(&dir).with_context(|| {
        format!("no usable bank at {} (run `ditmem bank build` first)", dir.display())
    })
}

/// Builds the model and, when given, restores encoder weights from a checkpoint.
pub fn model_with_checkpoint(cfg: &RunConfig, checkpoint: Option<&Path>) -> anyhow::Result<Model> {
    let mut model = Model::new(cfg)?;
    if let Some(dir) = checkpoint {
        load_checkpoint(&mut model, dir).with_context(|| format!("loading checkpoint {}", dir.display()))?;
    }
    Ok(model)
}

/// `explicit`, or `<output.dir>/<name>`.
pub fn out_dir(cfg: &RunConfig, explicit: Option<PathBuf>, name: &str) -> anyhow::Result<PathBuf> {
    let dir = explicit.unwrap_or_else(|| PathBuf::from(&cfg.output.dir).join(name));
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir)
}

pub fn write_json(path: &Path, value: &impl serde::Serialize) -> anyhow::Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    ditmem::blob::write_atomic(path, text.as_bytes())?;
    Ok(())
}

pub fn read_lines(path: &Path) -> anyhow::Result<Vec<String>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')).map(String::from).collect())
}
