use std::fs;
use std::io::Write;
use std::path::PathBuf;
use std::time::Instant;

use anyhow::Context;
use clap::Args;
use ditmem::config::RunConfig;
use ditmem::pipeline::{
    evaluate, load_checkpoint, load_refs, run_ablation, save_checkpoint, synthetic_dataset, train_loop, write_run_manifest,
    AblationRow, LogRow, Model, TrainState, Variant, ABLATION_ORDER,
};
use serde_json::json;

use crate::common::{open_bank, out_dir, usage};

pub const LOSS_FILE: &str = "loss.csv";
pub const CHECKPOINT_DIR: &str = "checkpoint";
pub const ABLATION_FILE: &str = "ablation.csv";

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Total optimizer steps (default: training.steps).
    #[arg(long)]
    steps: Option<u64>,
    /// Train an encoder variant instead of the full encoder, e.g. `no-hpf`.
    #[arg(long)]
    ablate: Option<Variant>,
    /// Continue from `<out>/checkpoint`.
    #[arg(long)]
    resume: bool,
    /// Run directory (default: `<output.dir>/train`).
    #[arg(long)]
    out: Option<PathBuf>,
}

pub fn train(cfg: &RunConfig, args: TrainArgs) -> anyhow::Result<()> {
    let mut cfg = cfg.clone();
    if let Some(v) = args.ablate {
        v.apply(&mut cfg.encoder);
        cfg.validate()?;
    }
    let steps = args.steps.unwrap_or(cfg.training.steps);
    let name = args.ablate.map(|v| format!("train-{}", variant_slug(v))).unwrap_or_else(|| "train".into());
    let dir = out_dir(&cfg, args.out, &name)?;
    let bank = open_bank(&cfg)?;
    let mut model = Model::new(&cfg)?;
    let train = synthetic_dataset(&model, &bank, "train", cfg.training.dataset_size)?;
    let refs = load_refs(&bank, &train)?;

    let ckpt = dir.join(CHECKPOINT_DIR);
    let loss_path = dir.join(LOSS_FILE);
    let (mut state, mut rows) = if args.resume {
        let state = load_checkpoint(&mut model, &ckpt).with_context(|| format!("resuming from {}", ckpt.display()))?;
        let mut rows = read_log(&loss_path)?;
        rows.retain(|r| r.step <= state.step);
        println!("resuming at step {}", state.step);
        (state, rows)
    } else {
        (TrainState::default(), Vec::new())
    };
    if state.step > steps {
        return Err(usage(format!("checkpoint is at step {}, beyond --steps {steps}", state.step)));
    }

    let initial = evaluate(&model, &train, &refs, true)?;
    let frozen = model.frozen_sha256();
    let started = Instant::now();
    let every = cfg.training.checkpoint_every.max(1);
    while state.step < steps {
        let until = ((state.step / every + 1) * every).min(steps);
        let new = train_loop(&mut model, &train, &refs, &mut state, until, &mut |r: &LogRow| {
            if r.step % 10 == 0 || r.step == steps {
                println!("step {:>5}  loss {:.5}  grad-norm {:.4}", r.step, r.loss, r.grad_norm);
            }
        })?;
        rows.extend(new);
        save_checkpoint(&model, &state, &ckpt)?;
        write_log(&loss_path, &rows)?;
    }
    if rows.is_empty() {
        write_log(&loss_path, &rows)?;
    }
    let last = evaluate(&model, &train, &refs, true)?;
    let details = json!({
        "steps": state.step,
        "variant": args.ablate.map(|v| v.label()),
        "eval_loss_start": initial,
        "eval_loss_final": last,
        "frozen_sha256": frozen,
        "encoder_version": model.encoder.encoder_version(),
        "trainable_parameters": model.encoder.params().num_trainable_elements(),
    });
    write_run_manifest(&dir, &cfg, "train", details)?;
    println!(
        "eval loss {initial:.5} -> {last:.5} in {:.1}s; run written to {}",
        started.elapsed().as_secs_f64(),
        dir.display()
    );
    Ok(())
}

fn variant_slug(v: Variant) -> String {
    serde_json::to_value(v).ok().and_then(|s| s.as_str().map(String::from)).unwrap_or_default()
}

pub fn write_log(path: &std::path::Path, rows: &[LogRow]) -> anyhow::Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    if rows.is_empty() {
        w.write_record(["step", "loss", "grad_norm"])?;
    }
    for r in rows {
        w.serialize(r)?;
    }
    let bytes = w.into_inner().context("flushing loss log")?;
    ditmem::blob::write_atomic(path, &bytes)?;
    Ok(())
}

pub fn read_log(path: &std::path::Path) -> anyhow::Result<Vec<LogRow>> {
    let mut r = csv::Reader::from_path(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(r.deserialize().collect::<Result<Vec<LogRow>, _>>()?)
}

#[derive(Args, Debug)]
pub struct AblateArgs {
    /// Steps per variant (default: training.steps).
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

pub fn ablate(cfg: &RunConfig, args: AblateArgs) -> anyhow::Result<()> {
    let steps = args.steps.unwrap_or(cfg.training.steps);
    let dir = out_dir(cfg, args.out, "ablate")?;
    let bank = open_bank(cfg)?;
    println!("{:<14} {:>12} {:>10} {:>10} {:>10} {:>9}", "variant", "trainable", "tokens/vid", "loss0", "loss", "seconds");
    let rows = run_ablation(cfg, &bank, &ABLATION_ORDER, steps, &mut |r: &AblationRow| {
        println!(
            "{:<14} {:>12} {:>10} {:>10.5} {:>10.5} {:>9.1}",
            r.label, r.trainable_params, r.tokens_per_video, r.initial_loss, r.final_loss, r.runtime_s
        );
    })?;
    if let Some(bad) = rows.iter().find(|r| !r.frozen_unchanged) {
        anyhow::bail!("variant {} changed frozen parameters", bad.label);
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["variant", "trainable_params", "tokens_per_video", "memory_tokens", "initial_loss", "final_loss"])?;
    for r in &rows {
        w.write_record([
            r.label.clone(),
            r.trainable_params.to_string(),
            r.tokens_per_video.to_string(),
            (r.tokens_per_video * cfg.retrieval.top_k).to_string(),
            format!("{:.6}", r.initial_loss),
            format!("{:.6}", r.final_loss),
        ])?;
    }
    ditmem::blob::write_atomic(&dir.join(ABLATION_FILE), &w.into_inner().context("flushing table")?)?;
    // Runtimes vary between machines, so they live beside the table rather than in it.
    let mut timing = fs::File::create(dir.join("runtime.txt"))?;
    for r in &rows {
        writeln!(timing, "{}\t{:.2}", r.label, r.runtime_s)?;
    }
    write_run_manifest(&dir, cfg, "ablate", json!({ "steps": steps, "variants": rows.len() }))?;
    println!("ablation table written to {}", dir.join(ABLATION_FILE).display());
    Ok(())
}
