use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context;
use clap::Args;
use ditmem::blob;
use ditmem::config::RunConfig;
use ditmem::diffusion::InjectionHook;
use ditmem::latent_codec::frames_rgb8;
use ditmem::pipeline::{generate, write_run_manifest, Generation, Model};
use ditmem::rng::prompt_seed;
use serde_json::json;

use crate::common::{model_with_checkpoint, open_bank, out_dir};

pub const LATENT_FILE: &str = "latent.dmem";

/// Options shared by `generate` and `steer generate`.
#[derive(Args, Debug, Clone)]
pub struct SampleArgs {
    #[arg(long)]
    pub prompt: String,
    /// Sampling seed (default: the seed rule for prompt 0, video 0).
    #[arg(long)]
    pub seed: Option<u64>,
    /// Skip retrieval and sample with the backbone alone.
    #[arg(long)]
    pub no_memory: bool,
    /// Encoder checkpoint directory.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct GenerateArgs {
    #[command(flatten)]
    pub sample: SampleArgs,
}

pub fn run(cfg: &RunConfig, args: GenerateArgs) -> anyhow::Result<()> {
    let model = model_with_checkpoint(cfg, args.sample.checkpoint.as_deref())?;
    let seed = args.sample.seed.unwrap_or_else(|| prompt_seed(0, 0));
    let dir = out_dir(cfg, args.sample.out.clone(), &format!("generate-{seed}"))?;
    sample_and_write(cfg, &model, &args.sample, seed, None, &dir, json!({}))
}

/// Samples, writes the latent blob, optional frames and the run manifest.
pub fn sample_and_write(
    cfg: &RunConfig,
    model: &Model,
    args: &SampleArgs,
    seed: u64,
    steering: Option<&dyn InjectionHook>,
    dir: &Path,
    extra: serde_json::Value,
) -> anyhow::Result<()> {
    let bank = if args.no_memory { None } else { Some(open_bank(cfg)?) };
    let g = generate(model, bank.as_ref(), &args.prompt, seed, steering)?;
    blob::save(&dir.join(LATENT_FILE), &g.z0.data, cfg.dtype())?;
    let frames = if cfg.output.frames { write_frames(model, &g, &dir.join("frames"))? } else { 0 };
    let details = json!({
        "prompt": args.prompt,
        "sample_seed": seed,
        "memory": !args.no_memory,
        "checkpoint": args.checkpoint.as_ref().map(|p| p.display().to_string()),
        "retrieved_ids": g.retrieved.iter().map(|h| h.id.clone()).collect::<Vec<_>>(),
        "retrieval_scores": g.retrieved.iter().map(|h| h.score).collect::<Vec<_>>(),
        "memory_tokens": g.memory_tokens,
        "cache_hits": g.cache_hits,
        "injected_steps": g.injected_steps,
        "encoder_version": model.encoder.encoder_version(),
        "latent_sha256": ditmem::hashing::sha256_hex(&blob::encode(&g.z0.data, cfg.dtype())),
        "frames": frames,
        "steering": extra,
    });
    write_run_manifest(dir, cfg, "generate", details)?;
    println!(
        "sampled {} ({} memory tokens from {} references, {} cached); output in {}",
        args.prompt,
        g.memory_tokens,
        g.retrieved.len(),
        g.cache_hits,
        dir.display()
    );
    Ok(())
}

fn write_frames(model: &Model, g: &Generation, dir: &Path) -> anyhow::Result<usize> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let video = model.codec.decode(&g.z0)?;
    let frames = frames_rgb8(&video);
    for (i, (w, h, rgb)) in frames.iter().enumerate() {
        let path = dir.join(format!("frame_{i:03}.png"));
        let file = fs::File::create(&path).with_context(|| format!("creating {}", path.display()))?;
        let mut enc = png::Encoder::new(std::io::BufWriter::new(file), *w as u32, *h as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        enc.write_header()?.write_image_data(rgb)?;
    }
    Ok(frames.len())
}
