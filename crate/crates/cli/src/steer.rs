use std::path::PathBuf;

use anyhow::Context;
use clap::{Args, Subcommand};
use ditmem::config::RunConfig;
use ditmem::freq_filter::Band;
use ditmem::pipeline::{extract_steering, write_run_manifest};
use ditmem::rng::prompt_seed;
use ditmem::steering::{filter_and_normalize, load_table, make_injection_hook, save_table};
use serde_json::json;

use crate::common::{model_with_checkpoint, out_dir, read_lines, usage};
use crate::generate::{sample_and_write, SampleArgs};

pub const TABLE_DIR: &str = "table";

#[derive(Subcommand, Debug)]
pub enum SteerCommand {
    /// Build a steering table from paired prompt files (one prompt per line).
    Extract {
        #[arg(long)]
        pos: PathBuf,
        #[arg(long)]
        neg: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Sample with a filtered, normalized steering table.
    Generate(SteerGenerateArgs),
}

#[derive(Args, Debug)]
pub struct SteerGenerateArgs {
    /// Directory written by `steer extract`.
    #[arg(long)]
    table: PathBuf,
    /// Frequency band kept along the timestep axis (default: steering.band).
    #[arg(long)]
    band: Option<Band>,
    /// Injection strength (default: steering.alpha).
    #[arg(long, allow_hyphen_values = true)]
    alpha: Option<f64>,
    #[command(flatten)]
    sample: SampleArgs,
}

pub fn run(cfg: &RunConfig, cmd: SteerCommand) -> anyhow::Result<()> {
    match cmd {
        SteerCommand::Extract { pos, neg, out } => {
            let (p, n) = (read_lines(&pos)?, read_lines(&neg)?);
            if p.is_empty() || n.is_empty() {
                return Err(usage("prompt files must each hold at least one prompt"));
            }
            if p.len() != n.len() {
                return Err(usage(format!("{} positive prompts but {} negative prompts", p.len(), n.len())));
            }
            let model = model_with_checkpoint(cfg, None)?;
            let table = extract_steering(&model, &p, &n)?;
            let dir = out_dir(cfg, out, "steering")?;
            save_table(&table, &dir.join(TABLE_DIR), cfg.dtype())?;
            if table.is_zero() {
                eprintln!("warning: positive and negative runs are identical; the steering table is all zeros");
            }
            let details = json!({
                "runs_per_side": p.len(),
                "timesteps": table.timesteps().len(),
                "layers": table.layers().len(),
                "max_norm": table.max_norm(),
                "zero": table.is_zero(),
            });
            write_run_manifest(&dir, cfg, "steer-extract", details)?;
            println!(
                "steering table with {} timesteps x {} layers written to {}",
                table.timesteps().len(),
                table.layers().len(),
                dir.display()
            );
        }
        SteerCommand::Generate(args) => {
            let band = args.band.unwrap_or(cfg.steering.band);
            let alpha = args.alpha.unwrap_or(cfg.steering.alpha);
            let tdir = args.table.join(TABLE_DIR);
            let raw = load_table(&tdir).with_context(|| format!("loading steering table from {}", tdir.display()))?;
            let f = cfg.filters;
            let (table, zeros) = filter_and_normalize(&raw, band, f.cutoff_rho, f.attenuation_gamma)?;
            let layers = (!cfg.steering.layers.is_empty()).then_some(cfg.steering.layers.as_slice());
            let hook = make_injection_hook(&table, alpha, cfg.backbone.d_model, layers)?;
            let model = model_with_checkpoint(cfg, args.sample.checkpoint.as_deref())?;
            let seed = args.sample.seed.unwrap_or_else(|| prompt_seed(0, 0));
            let dir = out_dir(cfg, args.sample.out.clone(), &format!("steer-{}-{seed}", band.as_str()))?;
            let extra = json!({ "band": band.as_str(), "alpha": alpha, "zero_vectors": zeros, "table": args.table.display().to_string() });
            sample_and_write(cfg, &model, &args.sample, seed, Some(&hook), &dir, extra)?;
        }
    }
    Ok(())
}
