use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context;
use clap::Args;
use ditmem::config::RunConfig;
use ditmem::steering::{cosine, load_table, SteeringTable};
use plotters::prelude::*;
use serde_json::json;

use crate::common::write_json;
use crate::steer::TABLE_DIR;
use crate::train::{read_log, ABLATION_FILE, LOSS_FILE};

pub const PLOT_DIR: &str = "plots";
const SIZE: (u32, u32) = (720, 420);

#[derive(Args, Debug)]
pub struct ReportArgs {
    /// Run directory produced by `train`, `ablate` or `steer extract`.
    run_dir: PathBuf,
}

fn plot_err<E: std::fmt::Debug>(e: E) -> anyhow::Error {
    anyhow::anyhow!("plotting failed: {e:?}")
}

pub fn run(args: ReportArgs) -> anyhow::Result<()> {
    let dir = &args.run_dir;
    let loss = dir.join(LOSS_FILE);
    let config = dir.join("config.toml");
    let ablation = dir.join(ABLATION_FILE);
    let table = dir.join(TABLE_DIR).join("manifest.json");
    if ![&loss, &config, &ablation, &table].iter().any(|p| p.exists()) {
        return Err(crate::common::usage(format!(
            "nothing to report in {}; expected at least one of: {LOSS_FILE} (from `train`), \
             config.toml (any run), {ABLATION_FILE} (from `ablate`), {TABLE_DIR}/manifest.json (from `steer extract`)",
            dir.display()
        )));
    }
    let out = dir.join(PLOT_DIR);
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    let mut summary = serde_json::Map::new();

    if loss.exists() {
        let rows = read_log(&loss)?;
        let points: Vec<(f64, f64)> = rows.iter().map(|r| (r.step as f64, r.loss)).collect();
        line_chart(&out.join("loss.svg"), "training loss", "step", "loss", &[("loss".into(), points)])?;
        summary.insert("loss_points".into(), json!(rows.len()));
    }
    if ablation.exists() {
        let bars = read_ablation(&ablation)?;
        bar_chart(&out.join("token_budget.svg"), "memory tokens per variant", &bars)?;
        summary.insert("token_budget_bars".into(), json!(bars.len()));
    } else if config.exists() {
        let cfg = RunConfig::load(Some(&config), &[])?;
        let k_max = 2 * cfg.retrieval.top_k.max(1);
        let points: Vec<(f64, f64)> =
            (1..=k_max).map(|k| (k as f64, cfg.encoder.token_count(k) as f64)).collect();
        line_chart(&out.join("token_budget.svg"), "memory token budget", "retrieved videos K", "memory tokens", &[(
            format!("{} tokens per video", cfg.encoder.tokens_per_video()),
            points,
        )])?;
        summary.insert("token_budget_points".into(), json!(k_max));
    }
    if table.exists() {
        let t = load_table(&dir.join(TABLE_DIR))?;
        let series = steering_cosines(&t);
        line_chart(
            &out.join("steering_cosine.svg"),
            "steering direction vs. its time average",
            "sampler step",
            "cosine",
            &series,
        )?;
        summary.insert("steering_series".into(), json!(series.len()));
    }
    write_json(&out.join("report.json"), &serde_json::Value::Object(summary))?;
    println!("plots written to {}", out.display());
    Ok(())
}

/// Per layer, the cosine of each timestep's vector with the layer's mean
/// vector, ordered from the first sampler step (noisiest) to the last.
fn steering_cosines(t: &SteeringTable) -> Vec<(String, Vec<(f64, f64)>)> {
    let mut steps = t.timesteps();
    steps.reverse();
    t.layers()
        .into_iter()
        .map(|layer| {
            let vs: Vec<_> = steps.iter().map(|&s| t.vectors[&(s, layer)].clone()).collect();
            let mean = vs.iter().fold(ndarray::Array1::zeros(t.width()), |a, v| a + v) / vs.len() as f64;
            let pts = vs.iter().enumerate().map(|(i, v)| (i as f64, cosine(v, &mean))).collect();
            (format!("layer {layer}"), pts)
        })
        .collect()
}

fn read_ablation(path: &Path) -> anyhow::Result<Vec<(String, f64)>> {
    let mut r = csv::Reader::from_path(path).with_context(|| format!("reading {}", path.display()))?;
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let tokens: f64 = rec.get(3).context("memory_tokens column")?.parse()?;
        out.push((rec.get(0).unwrap_or_default().to_string(), tokens));
    }
    Ok(out)
}

fn bounds(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let lo = values.clone().fold(f64::INFINITY, f64::min);
    let hi = values.fold(f64::NEG_INFINITY, f64::max);
    if !lo.is_finite() || !hi.is_finite() {
        return (0.0, 1.0);
    }
    let pad = ((hi - lo) * 0.05).max(1e-9);
    (lo - pad, hi + pad)
}

fn line_chart(path: &Path, title: &str, x_label: &str, y_label: &str, series: &[(String, Vec<(f64, f64)>)]) -> anyhow::Result<()> {
    let all = series.iter().flat_map(|(_, p)| p.iter().copied());
    let (x0, x1) = bounds(all.clone().map(|p| p.0));
    let (y0, y1) = bounds(all.map(|p| p.1));
    let root = SVGBackend::new(path, SIZE).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 18))
        .margin(12)
        .x_label_area_size(36)
        .y_label_area_size(56)
        .build_cartesian_2d(x0..x1, y0..y1)
        .map_err(plot_err)?;
    chart.configure_mesh().x_desc(x_label).y_desc(y_label).draw().map_err(plot_err)?;
    for (i, (name, points)) in series.iter().enumerate() {
        let color = Palette99::pick(i).to_rgba();
        chart
            .draw_series(LineSeries::new(points.iter().copied(), color.stroke_width(2)))
            .map_err(plot_err)?
            .label(name.as_str())
            .legend(move |(x, y)| PathElement::new([(x, y), (x + 16, y)], color));
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .draw()
        .map_err(plot_err)?;
    root.present().map_err(plot_err)?;
    Ok(())
}

fn bar_chart(path: &Path, title: &str, bars: &[(String, f64)]) -> anyhow::Result<()> {
    let top = bars.iter().map(|b| b.1).fold(1.0, f64::max) * 1.1;
    let root = SVGBackend::new(path, SIZE).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 18))
        .margin(12)
        .x_label_area_size(36)
        .y_label_area_size(56)
        .build_cartesian_2d(0f64..bars.len() as f64, 0f64..top)
        .map_err(plot_err)?;
    let labels: Vec<String> = bars.iter().map(|b| b.0.clone()).collect();
    chart
        .configure_mesh()
        .disable_x_mesh()
        .x_labels(bars.len() + 1)
        .x_label_formatter(&|x| labels.get(x.floor() as usize).cloned().unwrap_or_default())
        .y_desc("memory tokens")
        .draw()
        .map_err(plot_err)?;
    chart
        .draw_series(bars.iter().enumerate().map(|(i, (_, v))| {
            Rectangle::new([(i as f64 + 0.15, 0.0), (i as f64 + 0.85, *v)], BLUE.mix(0.6).filled())
        }))
        .map_err(plot_err)?;
    root.present().map_err(plot_err)?;
    Ok(())
}
