//! End-to-end orchestration shared by the command-line tool and the tests:
//! model assembly, synthetic banks and datasets, the training loop with
//! checkpoints, generation, steering extraction and the architecture ablation.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use ndarray::{ArrayD, Axis};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::blob::{self, Dtype};
use crate::config::RunConfig;
use crate::diffusion::{build_schedule, evaluate_loss, sample, training_step, InjectionHook, NoiseSchedule, SamplerPlan, TrainItem};
use crate::dit_backbone::{embed_prompt, parameter_partition, Condition, DitBackbone, Partition};
use crate::error::{Error, Result};
use crate::hashing::{fnv1a64, sha256_hex};
use crate::latent_codec::{LatentCodec, LatentVideo};
use crate::memory_encoder::{AttentionMode, EncoderConfig, MemoryEncoder, MemoryTokens};
use crate::params::AdamState;
use crate::retrieval_bank::{Hit, MemoryBank};
use crate::rng::{seed_rule, stream};
use crate::steering::{capture_runs, compute_steering, SteeringTable};
use crate::synthetic::role_clip;

pub const CODE_VERSION: &str = env!("CARGO_PKG_VERSION");

/// Codec, frozen backbone, trainable encoder and noise schedule for one config.
#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: RunConfig,
    pub codec: LatentCodec,
    pub backbone: DitBackbone,
    pub encoder: MemoryEncoder,
    pub sched: NoiseSchedule,
    pub latent_shape: [usize; 4],
}

impl Model {
    pub fn new(cfg: &RunConfig) -> Result<Self> {
        cfg.validate()?;
        let codec = LatentCodec::new(cfg.codec.clone())?;
        let v = cfg.video;
        let latent_shape = codec.latent_shape(&[3, v.frames, v.height, v.width])?;
        let backbone = DitBackbone::new(cfg.backbone.clone(), latent_shape[0])?;
        backbone.token_count([latent_shape[1], latent_shape[2], latent_shape[3]])?;
        let encoder = MemoryEncoder::new(cfg.encoder.clone(), latent_shape, codec.codec_fingerprint())?;
        let d = &cfg.diffusion;
        let sched = build_schedule(d.timesteps, d.beta_start, d.beta_end)?;
        Ok(Self {
            cfg: cfg.clone(),
            codec,
            backbone,
            encoder,
            sched,
            latent_shape,
        })
    }

    /// SHA-256 over the serialized codec and backbone parameters.
    pub fn frozen_sha256(&self) -> String {
        let mut bytes = self.codec.params().to_bytes();
        bytes.extend(self.backbone.params().to_bytes());
        sha256_hex(&bytes)
    }

    pub fn encoder_sha256(&self) -> String {
        self.encoder.params().sha256()
    }

    pub fn partition(&self) -> Result<Partition> {
        parameter_partition(&[self.codec.params(), self.backbone.params()], &[self.encoder.params()])
    }

    pub fn cond(&self, prompt: &str) -> Condition {
        embed_prompt(prompt, self.cfg.backbone.cond_dim)
    }

    pub fn plan(&self) -> Result<SamplerPlan<'static>> {
        SamplerPlan::new(&self.cfg.diffusion)
    }
}

/// Table 6 style encoder variants.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    /// Conv blocks only, no filters, no attention.
    ConvOnly,
    /// High-pass branch only.
    Hpf,
    /// Both branches, no attention.
    HpfLpf,
    /// Both branches with separate attention per branch.
    Spa,
    /// Both branches with one shared attention block (the full encoder).
    Sa,
    /// Low-pass branch only, with attention.
    NoHpf,
    /// High-pass branch only, with attention.
    NoLpf,
}

/// Row order of the architecture ablation.
pub const ABLATION_ORDER: [Variant; 5] = [Variant::ConvOnly, Variant::Hpf, Variant::HpfLpf, Variant::Spa, Variant::Sa];

impl Variant {
    pub fn label(self) -> &'static str {
        match self {
            Variant::ConvOnly => "3D",
            Variant::Hpf => "+3D+HPF",
            Variant::HpfLpf => "+3D+HPF+LPF",
            Variant::Spa => "+SPA",
            Variant::Sa => "+SA",
            Variant::NoHpf => "w/o HPF (LPF only)",
            Variant::NoLpf => "w/o LPF (HPF only)",
        }
    }

    pub fn apply(self, cfg: &mut EncoderConfig) {
        let (lpf, hpf, attn) = match self {
            Variant::ConvOnly => (false, false, AttentionMode::None),
            Variant::Hpf => (false, true, AttentionMode::None),
            Variant::HpfLpf => (true, true, AttentionMode::None),
            Variant::Spa => (true, true, AttentionMode::Separate),
            Variant::Sa => (true, true, AttentionMode::Shared),
            Variant::NoHpf => (true, false, cfg.attention_mode),
            Variant::NoLpf => (false, true, cfg.attention_mode),
        };
        cfg.enable_lpf = lpf;
        cfg.enable_hpf = hpf;
        cfg.attention_mode = attn;
        if cfg.attention_mode == AttentionMode::None && !(lpf || hpf) {
            cfg.attention_mode = AttentionMode::None;
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s.to_ascii_lowercase().as_str() {
            "3d" | "conv-only" => Variant::ConvOnly,
            "3d+hpf" | "hpf" => Variant::Hpf,
            "3d+hpf+lpf" | "hpf+lpf" | "no-attn" => Variant::HpfLpf,
            "+spa" | "spa" | "separate-attn" => Variant::Spa,
            "+sa" | "sa" | "full" => Variant::Sa,
            "no-hpf" | "lpf-only" => Variant::NoHpf,
            "no-lpf" | "hpf-only" => Variant::NoLpf,
            other => return Err(Error::invalid(format!("unknown variant '{other}'"))),
        })
    }
}

/// Adds `n` synthetic clips (ids `bank-000000`...) to a new bank at `root`.
pub fn build_synthetic_bank(model: &Model, root: &Path, n: usize) -> Result<MemoryBank> {
    let mut bank = MemoryBank::create(
        root,
        model.codec.codec_fingerprint(),
        model.latent_shape,
        model.cfg.retrieval.d_embed,
        model.cfg.dtype(),
    )?;
    for i in 0..n {
        let c = role_clip("bank", model.cfg.seed, i as u64, model.cfg.video)?;
        let z = model.codec.encode(&c.video)?;
        bank.add(&c.id, &c.caption, &z)?;
    }
    bank.save()?;
    Ok(bank)
}

/// One training or evaluation example with its retrieved reference ids.
#[derive(Clone, Debug)]
pub struct Sample {
    pub id: String,
    pub caption: String,
    pub cond: Condition,
    pub latent: LatentVideo,
    pub refs: Vec<String>,
}

fn retrieve_ids(bank: &MemoryBank, caption: &str, k: usize) -> Result<Vec<String>> {
    Ok(bank.query_topk(caption, k.min(bank.len()))?.into_iter().map(|h| h.id).collect())
}

/// `n` synthetic clips from stream `role`, each with its top-K bank references.
pub fn synthetic_dataset(model: &Model, bank: &MemoryBank, role: &str, n: usize) -> Result<Vec<Sample>> {
    (0..n)
        .map(|i| {
            let c = role_clip(role, model.cfg.seed, i as u64, model.cfg.video)?;
            Ok(Sample {
                refs: retrieve_ids(bank, &c.caption, model.cfg.retrieval.top_k)?,
                cond: model.cond(&c.caption),
                latent: model.codec.encode(&c.video)?,
                caption: c.caption,
                id: c.id,
            })
        })
        .collect()
}

/// Left-right mirror of a latent.
pub fn mirror_latent(z: &LatentVideo) -> LatentVideo {
    let mut data = z.data.clone();
    data.invert_axis(Axis(3));
    LatentVideo {
        data: data.as_standard_layout().into_owned(),
        codec_fingerprint: z.codec_fingerprint.clone(),
    }
}

/// A task where every target is the mirror image of its top-1 reference:
/// captions come from stream `role`, the target latent is the mirrored latent
/// of the first retrieved bank entry.
pub fn mirrored_dataset(model: &Model, bank: &MemoryBank, role: &str, n: usize) -> Result<Vec<Sample>> {
    (0..n)
        .map(|i| {
            let c = role_clip(role, model.cfg.seed, i as u64, model.cfg.video)?;
            let refs = retrieve_ids(bank, &c.caption, model.cfg.retrieval.top_k)?;
            let target = mirror_latent(&bank.load_latent(&refs[0])?);
            Ok(Sample {
                id: c.id,
                cond: model.cond(&c.caption),
                caption: c.caption,
                latent: target,
                refs,
            })
        })
        .collect()
}

/// Reference latents by id.
pub type RefStore = BTreeMap<String, LatentVideo>;

pub fn load_refs(bank: &MemoryBank, samples: &[Sample]) -> Result<RefStore> {
    let mut out = RefStore::new();
    for s in samples {
        for id in &s.refs {
            if !out.contains_key(id) {
                out.insert(id.clone(), bank.load_latent(id)?);
            }
        }
    }
    Ok(out)
}

fn items<'a>(samples: &'a [Sample], idx: &[usize], refs: &'a RefStore, use_memory: bool) -> Result<Vec<TrainItem<'a>>> {
    idx.iter()
        .map(|&i| {
            let s = &samples[i];
            let r = if use_memory {
                s.refs
                    .iter()
                    .map(|id| {
                        refs.get_key_value(id)
                            .map(|(k, v)| (k.as_str(), v))
                            .ok_or_else(|| Error::NotFound(format!("reference latent '{id}'")))
                    })
                    .collect::<Result<Vec<_>>>()?
            } else {
                Vec::new()
            };
            Ok(TrainItem {
                x0: &s.latent,
                cond: &s.cond,
                refs: r,
            })
        })
        .collect()
}

/// Sample indices of step `step`: consecutive slices of a seeded per-epoch
/// permutation, so any step can be reproduced without replaying earlier ones.
pub fn batch_indices(seed: u64, n: usize, batch: usize, step: u64) -> Vec<usize> {
    let mut out = Vec::with_capacity(batch);
    let mut cached: Option<(u64, Vec<usize>)> = None;
    for j in 0..batch as u64 {
        let pos = step * batch as u64 + j;
        let epoch = pos / n as u64;
        if cached.as_ref().map(|c| c.0) != Some(epoch) {
            let mut perm: Vec<usize> = (0..n).collect();
            perm.shuffle(&mut stream(seed, "epoch-order", epoch));
            cached = Some((epoch, perm));
        }
        out.push(cached.as_ref().expect("set above").1[(pos % n as u64) as usize]);
    }
    out
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainState {
    pub step: u64,
    pub adam: AdamState,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub step: u64,
    pub loss: f64,
    pub grad_norm: f64,
}

/// Fixed-draw evaluation loss over `samples`.
pub fn evaluate(model: &Model, samples: &[Sample], refs: &RefStore, use_memory: bool) -> Result<f64> {
    let idx: Vec<usize> = (0..samples.len()).collect();
    let it = items(samples, &idx, refs, use_memory)?;
    let enc = use_memory.then_some(&model.encoder);
    let seed = fnv1a64(model.cfg.seed, b"evaluation");
    // Evaluate in chunks so batch-norm-free eval stays memory-light.
    let mut total = 0.0;
    for chunk in it.chunks(16) {
        total += evaluate_loss(&model.backbone, enc, &model.sched, chunk, seed)? * chunk.len() as f64;
    }
    Ok(total / it.len() as f64)
}

/// Runs training steps until `state.step == until`. Checks the freeze
/// contract every `freeze_check_every` steps and after the last one.
pub fn train_loop(
    model: &mut Model,
    samples: &[Sample],
    refs: &RefStore,
    state: &mut TrainState,
    until: u64,
    on_step: &mut dyn FnMut(&LogRow),
) -> Result<Vec<LogRow>> {
    if samples.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    let frozen = model.frozen_sha256();
    let adam_cfg = model.cfg.training.adam();
    let batch = model.cfg.training.batch_size.min(samples.len());
    let check_every = model.cfg.training.freeze_check_every.max(1);
    let mut rows = Vec::new();
    while state.step < until {
        let idx = batch_indices(model.cfg.seed, samples.len(), batch, state.step);
        let it = items(samples, &idx, refs, true)?;
        let report = training_step(
            &model.backbone,
            &mut model.encoder,
            &mut state.adam,
            &adam_cfg,
            &model.sched,
            &it,
            model.cfg.seed,
            state.step,
        )?;
        if report.frozen_grads != 0 {
            return Err(Error::invalid(format!("{} gradients reached frozen parameters", report.frozen_grads)));
        }
        state.step += 1;
        let row = LogRow {
            step: state.step,
            loss: report.loss,
            grad_norm: report.grad_norm,
        };
        on_step(&row);
        rows.push(row);
        if state.step % check_every == 0 || state.step == until {
            if model.frozen_sha256() != frozen {
                return Err(Error::invalid(format!("frozen parameters changed by step {}", state.step)));
            }
        }
    }
    Ok(rows)
}

#[derive(Serialize, Deserialize)]
struct CheckpointManifest {
    kind: String,
    code_version: String,
    config_hash: String,
    seed: u64,
    step: u64,
    adam_step: u64,
    encoder: EncoderConfig,
    latent_shape: [usize; 4],
    codec_fingerprint: String,
    encoder_version: String,
    params: Vec<String>,
    moments: Vec<String>,
    running: Vec<String>,
}

fn blob_key(name: &str) -> String {
    name.replace(['/', '\\'], "_")
}

/// Writes encoder parameters, Adam moments and batch-norm statistics at full
/// precision, then the manifest.
pub fn save_checkpoint(model: &Model, state: &TrainState, dir: &Path) -> Result<()> {
    let blobs = dir.join("blobs");
    for (name, p) in model.encoder.params().iter() {
        blob::save(&blobs.join(format!("param.{}.dmem", blob_key(name))), &p.value, Dtype::F64)?;
    }
    for (name, m) in &state.adam.m {
        blob::save(&blobs.join(format!("adam-m.{}.dmem", blob_key(name))), m, Dtype::F64)?;
        blob::save(&blobs.join(format!("adam-v.{}.dmem", blob_key(name))), &state.adam.v[name], Dtype::F64)?;
    }
    for (key, (mean, var)) in model.encoder.running_stats() {
        let arr = ArrayD::from_shape_vec(vec![2, mean.len()], mean.iter().chain(var).copied().collect())
            .expect("two rows");
        blob::save(&blobs.join(format!("bn.{}.dmem", blob_key(key))), &arr, Dtype::F64)?;
    }
    let manifest = CheckpointManifest {
        kind: "checkpoint".into(),
        code_version: CODE_VERSION.into(),
        config_hash: model.cfg.hash(),
        seed: model.cfg.seed,
        step: state.step,
        adam_step: state.adam.step,
        encoder: model.encoder.config().clone(),
        latent_shape: model.latent_shape,
        codec_fingerprint: model.codec.codec_fingerprint().into(),
        encoder_version: model.encoder.encoder_version().into(),
        params: model.encoder.params().names(),
        moments: state.adam.m.keys().cloned().collect(),
        running: model.encoder.running_stats().keys().cloned().collect(),
    };
    blob::write_atomic(&dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?.as_bytes())
}

/// Restores a checkpoint into `model` and returns the optimizer state.
pub fn load_checkpoint(model: &mut Model, dir: &Path) -> Result<TrainState> {
    let path = dir.join("manifest.json");
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let m: CheckpointManifest = serde_json::from_str(&text)?;
    if &m.encoder != model.encoder.config() || m.latent_shape != model.latent_shape {
        return Err(Error::Config("checkpoint encoder config differs from the active config".into()));
    }
    if m.codec_fingerprint != model.codec.codec_fingerprint() {
        return Err(Error::FingerprintMismatch {
            expected: model.codec.codec_fingerprint().into(),
            found: m.codec_fingerprint,
        });
    }
    let blobs = dir.join("blobs");
    let mut values = BTreeMap::new();
    for name in &m.params {
        values.insert(name.clone(), blob::load(&blobs.join(format!("param.{}.dmem", blob_key(name))))?);
    }
    let mut running = BTreeMap::new();
    for key in &m.running {
        let arr = blob::load(&blobs.join(format!("bn.{}.dmem", blob_key(key))))?;
        let c = arr.shape().get(1).copied().unwrap_or(0);
        let flat: Vec<f64> = arr.iter().copied().collect();
        running.insert(key.clone(), (flat[..c].to_vec(), flat[c..].to_vec()));
    }
    model.encoder.load_state(&values, running)?;
    if model.encoder.encoder_version() != m.encoder_version {
        return Err(Error::Corrupt {
            path,
            reason: "restored encoder does not reproduce the recorded version".into(),
        });
    }
    let mut adam = AdamState {
        step: m.adam_step,
        ..AdamState::default()
    };
    for name in &m.moments {
        adam.m.insert(name.clone(), blob::load(&blobs.join(format!("adam-m.{}.dmem", blob_key(name))))?);
        adam.v.insert(name.clone(), blob::load(&blobs.join(format!("adam-v.{}.dmem", blob_key(name))))?);
    }
    Ok(TrainState { step: m.step, adam })
}

/// Memory tokens for retrieved hits, served from the cache when current.
pub fn memory_for_hits(model: &Model, bank: &MemoryBank, hits: &[Hit]) -> Result<(MemoryTokens, usize)> {
    let version = model.encoder.encoder_version();
    let mut parts = Vec::with_capacity(hits.len());
    let mut cache_hits = 0;
    for h in hits {
        match bank.cached_tokens(&h.id, version)? {
            Some(t) => {
                cache_hits += 1;
                parts.push(t);
            }
            None => parts.push(model.encoder.encode_reference(&h.id, &bank.load_latent(&h.id)?)?),
        }
    }
    Ok((MemoryTokens::concat(&parts)?, cache_hits))
}

#[derive(Clone, Debug)]
pub struct Generation {
    pub z0: LatentVideo,
    pub retrieved: Vec<Hit>,
    pub cache_hits: usize,
    pub memory_tokens: usize,
    pub injected_steps: Vec<usize>,
}

/// Retrieval, cached-token fetch and memory-guided sampling for one prompt.
pub fn generate(
    model: &Model,
    bank: Option<&MemoryBank>,
    prompt: &str,
    seed: u64,
    steering: Option<&dyn InjectionHook>,
) -> Result<Generation> {
    let (retrieved, memory, cache_hits) = match bank {
        Some(b) => {
            let hits = b.query_topk(prompt, model.cfg.retrieval.top_k)?;
            let (mem, cached) = memory_for_hits(model, b, &hits)?;
            (hits, Some(mem), cached)
        }
        None => (Vec::new(), None, 0),
    };
    let mut plan = model.plan()?;
    plan.memory = memory.as_ref();
    plan.steering = steering;
    let out = sample(&model.backbone, &model.sched, &plan, &model.cond(prompt), model.latent_shape, seed, false)?;
    Ok(Generation {
        z0: LatentVideo {
            data: out.z0,
            codec_fingerprint: model.codec.codec_fingerprint().into(),
        },
        retrieved,
        cache_hits,
        memory_tokens: memory.as_ref().map(|m| m.len()).unwrap_or(0),
        injected_steps: out.injected_steps,
    })
}

/// Captures paired runs and returns the raw steering table. Run `i` on either
/// side uses seed `base + 10 i`.
pub fn extract_steering(model: &Model, pos: &[String], neg: &[String]) -> Result<SteeringTable> {
    if pos.is_empty() || neg.is_empty() {
        return Err(Error::invalid("need at least one positive and one negative prompt"));
    }
    if pos.len() != neg.len() {
        return Err(Error::invalid(format!(
            "prompt lists differ in length: {} positive, {} negative",
            pos.len(),
            neg.len()
        )));
    }
    let seeds: Vec<u64> = (0..pos.len() as u64).map(|i| seed_rule(model.cfg.seed, i, 0)).collect();
    let plan = model.plan()?;
    let (p, n) = capture_runs(&model.backbone, &model.sched, &plan, model.latent_shape, pos, &seeds, neg, &seeds)?;
    compute_steering(&p, &n)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: Variant,
    pub label: String,
    pub trainable_params: usize,
    pub tokens_per_video: usize,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub runtime_s: f64,
    pub frozen_unchanged: bool,
}

/// Trains each variant for `steps` on the same data and reports one row per
/// variant, in the given order.
pub fn run_ablation(
    cfg: &RunConfig,
    bank: &MemoryBank,
    variants: &[Variant],
    steps: u64,
    on_row: &mut dyn FnMut(&AblationRow),
) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::new();
    for &v in variants {
        let start = Instant::now();
        let mut c = cfg.clone();
        v.apply(&mut c.encoder);
        let mut model = Model::new(&c)?;
        let train = synthetic_dataset(&model, bank, "train", c.training.dataset_size)?;
        let eval = synthetic_dataset(&model, bank, "eval", c.training.eval_size)?;
        let mut refs = load_refs(bank, &train)?;
        refs.extend(load_refs(bank, &eval)?);
        let frozen = model.frozen_sha256();
        let initial_loss = evaluate(&model, &eval, &refs, true)?;
        let mut state = TrainState::default();
        train_loop(&mut model, &train, &refs, &mut state, steps, &mut |_| {})?;
        let final_loss = evaluate(&model, &eval, &refs, true)?;
        let row = AblationRow {
            variant: v,
            label: v.label().into(),
            trainable_params: model.encoder.params().num_trainable_elements(),
            tokens_per_video: model.encoder.config().tokens_per_video(),
            initial_loss,
            final_loss,
            runtime_s: start.elapsed().as_secs_f64(),
            frozen_unchanged: model.frozen_sha256() == frozen,
        };
        on_row(&row);
        rows.push(row);
    }
    Ok(rows)
}

/// Manifest written into every output directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub kind: String,
    pub code_version: String,
    pub config_hash: String,
    pub seed: u64,
    pub details: serde_json::Value,
}

pub fn write_run_manifest(dir: &Path, cfg: &RunConfig, kind: &str, details: serde_json::Value) -> Result<()> {
    let m = RunManifest {
        kind: kind.into(),
        code_version: CODE_VERSION.into(),
        config_hash: cfg.hash(),
        seed: cfg.seed,
        details,
    };
    blob::write_atomic(&dir.join("manifest.json"), serde_json::to_string_pretty(&m)?.as_bytes())?;
    blob::write_atomic(&dir.join("config.toml"), cfg.to_toml().as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn batches_cover_each_epoch_once() {
        let mut seen = vec![0; 10];
        for s in 0..5 {
            for i in batch_indices(3, 10, 2, s) {
                seen[i] += 1;
            }
        }
        assert!(seen.iter().all(|&c| c == 1));
        assert_eq!(batch_indices(3, 10, 4, 7), batch_indices(3, 10, 4, 7));
    }

    #[test]
    fn variant_names_parse() {
        for v in ABLATION_ORDER {
            let mut c = EncoderConfig::default();
            v.apply(&mut c);
            c.validate().unwrap();
        }
        assert_eq!("no-hpf".parse::<Variant>().unwrap(), Variant::NoHpf);
        assert_eq!("+SPA".parse::<Variant>().unwrap(), Variant::Spa);
        assert!("bogus".parse::<Variant>().is_err());
        let labels: Vec<&str> = ABLATION_ORDER.iter().map(|v| v.label()).collect();
        assert_eq!(labels, ["3D", "+3D+HPF", "+3D+HPF+LPF", "+SPA", "+SA"]);
    }

    #[test]
    fn mirror_latent_is_an_involution() {
        let z = LatentVideo {
            data: crate::rng::gaussian(&mut stream(1, "z", 0), &[2, 2, 2, 3]),
            codec_fingerprint: "f".into(),
        };
        assert_ne!(mirror_latent(&z), z);
        assert_eq!(mirror_latent(&mirror_latent(&z)), z);
    }
}
