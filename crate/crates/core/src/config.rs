//! The run configuration: one TOML file plus `section.key=value` overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::blob::Dtype;
use crate::diffusion::DiffusionConfig;
use crate::dit_backbone::BackboneConfig;
use crate::error::{Error, Result};
use crate::freq_filter::{Band, FilterParams};
use crate::hashing::Fingerprinter;
use crate::latent_codec::CodecConfig;
use crate::memory_encoder::EncoderConfig;
use crate::params::AdamConfig;
use crate::synthetic::ClipSpec;

pub const DATA_DIR_ENV: &str = "DITMEM_DATA_DIR";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub dataset_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Steps between freeze-invariance checks.
    pub freeze_check_every: u64,
    pub checkpoint_every: u64,
    /// Items in the fixed-draw evaluation set.
    pub eval_size: usize,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        let adam = AdamConfig::default();
        Self {
            steps: 200,
            batch_size: 4,
            dataset_size: 64,
            lr: adam.lr,
            beta1: adam.beta1,
            beta2: adam.beta2,
            eps: adam.eps,
            freeze_check_every: 50,
            checkpoint_every: 50,
            eval_size: 64,
        }
    }
}

impl TrainingConfig {
    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RetrievalConfig {
    pub top_k: usize,
    pub d_embed: usize,
    /// Bank directory; empty means `$DITMEM_DATA_DIR/bank`, else `data/bank`.
    pub bank_dir: String,
    /// Entries created by `bank build` when no count is given.
    pub synthetic_entries: usize,
    pub subset_fraction: f64,
    pub subset_seed: u64,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        Self {
            top_k: 5,
            d_embed: 256,
            bank_dir: String::new(),
            synthetic_entries: 200,
            subset_fraction: 1.0,
            subset_seed: 42,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SteeringConfig {
    pub alpha: f64,
    pub band: Band,
    /// Layers that receive the vector; empty means all.
    pub layers: Vec<usize>,
}

impl Default for SteeringConfig {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            band: Band::Low,
            layers: Vec::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: String,
    /// Write per-frame PNGs next to generated latents.
    pub frames: bool,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            dir: "runs".into(),
            frames: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Storage precision for blobs: 32 or 64. Compute is always f64.
    pub float_mode: u32,
    pub video: ClipSpec,
    pub codec: CodecConfig,
    pub backbone: BackboneConfig,
    pub encoder: EncoderConfig,
    /// Filter used by the steering path.
    pub filters: FilterParams,
    pub diffusion: DiffusionConfig,
    pub training: TrainingConfig,
    pub retrieval: RetrievalConfig,
    pub steering: SteeringConfig,
    pub output: OutputConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            float_mode: 64,
            video: ClipSpec::default(),
            codec: CodecConfig::default(),
            backbone: BackboneConfig::default(),
            encoder: EncoderConfig::default(),
            filters: FilterParams::default(),
            diffusion: DiffusionConfig::default(),
            training: TrainingConfig::default(),
            retrieval: RetrievalConfig::default(),
            steering: SteeringConfig::default(),
            output: OutputConfig::default(),
        }
    }
}

impl RunConfig {
    /// Defaults, then the file (if any), then `section.key=value` overrides.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut root = toml::Value::try_from(RunConfig::default()).map_err(|e| Error::Config(e.to_string()))?;
        if let Some(p) = path {
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            let file: toml::Value = text
                .parse::<toml::Table>()
                .map(toml::Value::Table)
                .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
            merge(&mut root, file);
        }
        for o in overrides {
            apply_override(&mut root, o)?;
        }
        let cfg: RunConfig = root.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        Dtype::from_bits(self.float_mode)?;
        self.backbone.validate()?;
        self.encoder.validate()?;
        if self.encoder.d_model != self.backbone.d_model {
            return Err(Error::Config(format!(
                "encoder.d_model ({}) must equal backbone.d_model ({})",
                self.encoder.d_model, self.backbone.d_model
            )));
        }
        if self.codec.latent_channels == 0 {
            return Err(Error::Config("codec.latent_channels must be positive".into()));
        }
        if self.retrieval.top_k == 0 {
            return Err(Error::Config("retrieval.top_k must be at least 1".into()));
        }
        if self.training.batch_size == 0 || self.training.dataset_size == 0 {
            return Err(Error::Config("training batch and dataset sizes must be positive".into()));
        }
        if !(self.retrieval.subset_fraction > 0.0 && self.retrieval.subset_fraction <= 1.0) {
            return Err(Error::Config("retrieval.subset_fraction must lie in (0, 1]".into()));
        }
        crate::freq_filter::FrequencyMask::from_params(&[1], Band::Low, self.filters)
            .map_err(|e| Error::Config(format!("filters: {e}")))?;
        Ok(())
    }

    pub fn dtype(&self) -> Dtype {
        Dtype::from_bits(self.float_mode).expect("validated")
    }

    /// Short hash of the canonical serialized config.
    pub fn hash(&self) -> String {
        let mut fp = Fingerprinter::new();
        fp.str(&serde_json::to_string(self).expect("config serializes"));
        fp.hex64()
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn bank_dir(&self) -> PathBuf {
        if !self.retrieval.bank_dir.is_empty() {
            return PathBuf::from(&self.retrieval.bank_dir);
        }
        match std::env::var_os(DATA_DIR_ENV) {
            Some(d) if !d.is_empty() => PathBuf::from(d).join("bank"),
            _ => PathBuf::from("data").join("bank"),
        }
    }
}

fn merge(base: &mut toml::Value, over: toml::Value) {
    match (base, over) {
        (toml::Value::Table(b), toml::Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Applies one `a.b.c=value` override. The value is parsed as a TOML literal
/// and falls back to a bare string.
pub fn apply_override(root: &mut toml::Value, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override '{spec}' is not key=value")))?;
    let path: Vec<&str> = key.trim().split('.').collect();
    if path.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("bad override key '{key}'")));
    }
    let raw = raw.trim();
    let value = format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let mut node = root;
    for part in &path[..path.len() - 1] {
        let table = node
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override '{key}' walks through a non-table")))?;
        node = table
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
    }
    node.as_table_mut()
        .ok_or_else(|| Error::Config(format!("override '{key}' walks through a non-table")))?
        .insert(path[path.len() - 1].to_string(), value);
    Ok(())
}
