use anyhow::Context;
use clap::Subcommand;
use ditmem::config::RunConfig;
use ditmem::pipeline::{build_synthetic_bank, Model};
use serde_json::json;

use crate::common::{model_with_checkpoint, open_bank, usage, write_json};

#[derive(Subcommand, Debug)]
pub enum BankCommand {
    /// Create a bank from synthetic clips.
    Build {
        /// Number of synthetic entries (default: retrieval.synthetic_entries).
        #[arg(long)]
        synthetic: Option<usize>,
        /// Replace an existing bank.
        #[arg(long)]
        force: bool,
    },
    /// Encode memory tokens for every entry whose cache is stale.
    Precompute {
        /// Encoder checkpoint directory; defaults to the untrained encoder.
        #[arg(long)]
        checkpoint: Option<std::path::PathBuf>,
    },
    /// Write a seeded subset manifest.
    Subset {
        #[arg(long)]
        fraction: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
        /// Output file; defaults to `<bank>/subset-<fraction>-<seed>.json`.
        #[arg(long)]
        out: Option<std::path::PathBuf>,
    },
    /// Print entry and token statistics.
    Stats,
}

pub fn run(cfg: &RunConfig, cmd: BankCommand) -> anyhow::Result<()> {
    match cmd {
        BankCommand::Build { synthetic, force } => {
            let dir = cfg.bank_dir();
            if dir.join(ditmem::retrieval_bank::MANIFEST_FILE).exists() {
                if !force {
                    return Err(usage(format!("a bank already exists at {} (pass --force to replace it)", dir.display())));
                }
                std::fs::remove_dir_all(&dir).with_context(|| format!("removing {}", dir.display()))?;
            }
            let n = synthetic.unwrap_or(cfg.retrieval.synthetic_entries);
            if n == 0 {
                return Err(usage("--synthetic must be at least 1"));
            }
            let model = Model::new(cfg)?;
            let bank = build_synthetic_bank(&model, &dir, n)?;
            println!("built bank at {} with {} entries", dir.display(), bank.len());
        }
        BankCommand::Precompute { checkpoint } => {
            let mut bank = open_bank(cfg)?;
            let model = model_with_checkpoint(cfg, checkpoint.as_deref())?;
            let updated = bank.precompute_tokens(&model.encoder)?;
            bank.save()?;
            println!(
                "precomputed tokens: {updated} entries updated, {} current (encoder {})",
                bank.len() - bank.stale_count(model.encoder.encoder_version()),
                model.encoder.encoder_version()
            );
        }
        BankCommand::Subset { fraction, seed, out } => {
            let bank = open_bank(cfg)?;
            let fraction = fraction.unwrap_or(cfg.retrieval.subset_fraction);
            let seed = seed.unwrap_or(cfg.retrieval.subset_seed);
            if !(fraction > 0.0 && fraction <= 1.0) {
                return Err(usage(format!("--fraction {fraction} must lie in (0, 1]")));
            }
            let view = bank.subset(fraction, seed)?;
            let path = out.unwrap_or_else(|| bank.root().join(format!("subset-{fraction}-{seed}.json")));
            write_json(&path, &view.to_manifest())?;
            println!("subset of {} / {} entries written to {}", view.len(), bank.len(), path.display());
        }
        BankCommand::Stats => {
            let bank = open_bank(cfg)?;
            let with_tokens = bank.entries().iter().filter(|e| e.tokens_ref.is_some()).count();
            let tokens: usize = bank.entries().iter().flat_map(|e| e.token_spans.iter()).map(|s| s.length).sum();
            let stats = json!({
                "entries": bank.len(),
                "entries_with_tokens": with_tokens,
                "cached_tokens": tokens,
                "latent_shape": bank.manifest().latent_shape,
                "d_embed": bank.manifest().d_embed,
                "codec_fingerprint": bank.manifest().codec_fingerprint,
                "checksum": bank.manifest().checksum,
            });
            println!("{}", serde_json::to_string_pretty(&stats)?);
        }
    }
    Ok(())
}
