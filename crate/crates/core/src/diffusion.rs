//! Noise schedule, forward corruption, the encoder training step and a
//! deterministic DDIM sampler with memory and steering hooks.

use std::collections::BTreeMap;

use ndarray::{Array1, ArrayD};
use serde::{Deserialize, Serialize};

use crate::autograd::Tape;
use crate::dit_backbone::{CaptureTap, Condition, DitBackbone, Hooks};
use crate::error::{Error, Result};
use crate::latent_codec::LatentVideo;
use crate::memory_encoder::{MemoryEncoder, MemoryTokens, Mode};
use crate::params::{AdamConfig, AdamState};
use crate::rng::{gaussian, stream, uniform_index};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiffusionConfig {
    pub timesteps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub sample_steps: usize,
    /// Fraction of sampler steps (from the start) that receive steering.
    pub inject_fraction: f64,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        Self {
            timesteps: 1000,
            beta_start: 1e-4,
            beta_end: 2e-2,
            sample_steps: 30,
            inject_fraction: 2.0 / 3.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    pub betas: Vec<f64>,
    pub alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    pub fn len(&self) -> usize {
        self.betas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.betas.is_empty()
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        self.alpha_bars
            .get(t)
            .copied()
            .ok_or_else(|| Error::invalid(format!("timestep {t} outside schedule of length {}", self.len())))
    }
}

/// Linear betas from `beta_start` to `beta_end`; `alpha_bars` are running
/// products of `1 - beta`.
pub fn build_schedule(t: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if t == 0 {
        return Err(Error::invalid("schedule needs at least one timestep"));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::invalid(format!(
            "need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}"
        )));
    }
    let betas: Vec<f64> = (0..t)
        .map(|i| {
            if t == 1 {
                beta_start
            } else {
                beta_start + (beta_end - beta_start) * i as f64 / (t - 1) as f64
            }
        })
        .collect();
    let mut acc = 1.0;
    let alpha_bars = betas
        .iter()
        .map(|b| {
            acc *= 1.0 - b;
            acc
        })
        .collect();
    Ok(NoiseSchedule { betas, alpha_bars })
}

/// `x_t = sqrt(ab_t) * x0 + sqrt(1 - ab_t) * eps`.
pub fn q_sample(x0: &ArrayD<f64>, t: usize, eps: &ArrayD<f64>, sched: &NoiseSchedule) -> Result<ArrayD<f64>> {
    if x0.shape() != eps.shape() {
        return Err(Error::ShapeMismatch {
            expected: x0.shape().to_vec(),
            actual: eps.shape().to_vec(),
        });
    }
    let ab = sched.alpha_bar(t)?;
    Ok(x0 * ab.sqrt() + eps * (1.0 - ab).sqrt())
}

/// Evenly spaced descending timesteps for an `s`-step sampler.
pub fn sampler_steps(total: usize, s: usize) -> Result<Vec<usize>> {
    if s == 0 || s > total {
        return Err(Error::invalid(format!("sample steps {s} must lie in 1..={total}")));
    }
    Ok((0..s).rev().map(|i| i * total / s).collect())
}

/// Number of leading sampler steps that receive steering: `ceil(fraction * s)`.
pub fn inject_cutoff(s: usize, fraction: f64) -> usize {
    // Nudge down before the ceiling so 2/3 * 30 lands on 20, not 21.
    let raw = fraction * s as f64;
    ((raw - 1e-9).ceil().max(0.0) as usize).min(s)
}

/// A per-(timestep, layer) additive vector at the cross-attention output.
pub trait InjectionHook {
    fn vector(&self, timestep: usize, layer: usize) -> Option<Array1<f64>>;
}

pub struct SamplerPlan<'a> {
    pub steps: Vec<usize>,
    pub inject_cutoff: usize,
    pub memory: Option<&'a MemoryTokens>,
    pub steering: Option<&'a dyn InjectionHook>,
}

impl<'a> SamplerPlan<'a> {
    pub fn new(cfg: &DiffusionConfig) -> Result<Self> {
        let steps = sampler_steps(cfg.timesteps, cfg.sample_steps)?;
        Ok(Self {
            inject_cutoff: inject_cutoff(steps.len(), cfg.inject_fraction),
            steps,
            memory: None,
            steering: None,
        })
    }

    pub fn validate(&self, sched: &NoiseSchedule) -> Result<()> {
        if self.steps.is_empty() {
            return Err(Error::invalid("sampler plan has no steps"));
        }
        if self.steps.windows(2).any(|w| w[0] <= w[1]) {
            return Err(Error::invalid("sampler steps must be strictly decreasing"));
        }
        if self.steps[0] >= sched.len() {
            return Err(Error::invalid("sampler step outside the schedule"));
        }
        if self.inject_cutoff > self.steps.len() {
            return Err(Error::invalid("inject_cutoff exceeds the number of steps"));
        }
        Ok(())
    }

    /// Whether steering applies at step index `i`.
    pub fn injects_at(&self, i: usize) -> bool {
        self.steering.is_some() && i < self.inject_cutoff
    }
}

#[derive(Clone, Debug, Default)]
pub struct SampleOutput {
    pub z0: ArrayD<f64>,
    pub taps: Vec<CaptureTap>,
    /// Step indices at which steering vectors were added.
    pub injected_steps: Vec<usize>,
}

/// Seeded Gaussian starting latent for a sampler run.
pub fn initial_noise(seed: u64, shape: &[usize]) -> ArrayD<f64> {
    gaussian(&mut stream(seed, "sample-noise", 0), shape)
}

/// Deterministic DDIM (eta = 0) from seeded noise.
pub fn sample(
    backbone: &DitBackbone,
    sched: &NoiseSchedule,
    plan: &SamplerPlan<'_>,
    cond: &Condition,
    latent_shape: [usize; 4],
    seed: u64,
    capture: bool,
) -> Result<SampleOutput> {
    plan.validate(sched)?;
    let n_layers = backbone.config().n_blocks;
    let mut x = initial_noise(seed, &latent_shape);
    let mut out = SampleOutput::default();
    for (i, &t) in plan.steps.iter().enumerate() {
        let mut hooks = Hooks {
            capture,
            inject: Vec::new(),
        };
        if plan.injects_at(i) {
            let hook = plan.steering.expect("checked by injects_at");
            hooks.inject = (0..n_layers).map(|l| hook.vector(t, l)).collect();
            out.injected_steps.push(i);
        }
        let (eps, trace) = backbone.forward(&x, t, cond, plan.memory, &hooks)?;
        out.taps.extend(trace.taps);
        let ab = sched.alpha_bar(t)?;
        let ab_prev = match plan.steps.get(i + 1) {
            Some(&tp) => sched.alpha_bar(tp)?,
            None => 1.0,
        };
        let x0_hat = (&x - &(&eps * (1.0 - ab).sqrt())) / ab.sqrt();
        x = x0_hat * ab_prev.sqrt() + eps * (1.0 - ab_prev).sqrt();
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("sampler state at step {i} (t={t})")));
        }
    }
    out.z0 = x;
    Ok(out)
}

/// One training example: a clean latent, its prompt and its retrieved references.
pub struct TrainItem<'a> {
    pub x0: &'a LatentVideo,
    pub cond: &'a Condition,
    pub refs: Vec<(&'a str, &'a LatentVideo)>,
}

/// Timestep and noise for item `index` of step `step`, from the run's seeded streams.
pub fn training_draw(seed: u64, step: u64, index: u64, total_t: usize, shape: &[usize]) -> (usize, ArrayD<f64>) {
    let key = step.wrapping_mul(1 << 20).wrapping_add(index);
    let t = uniform_index(&mut stream(seed, "train-t", key), total_t);
    let eps = gaussian(&mut stream(seed, "train-eps", key), shape);
    (t, eps)
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepReport {
    pub loss: f64,
    pub grad_norm: f64,
    /// Gradient entries found for frozen parameters; always zero.
    pub frozen_grads: usize,
    pub updated: usize,
}

/// Mean noise-prediction loss over `items` for the given memory choice. In
/// training mode it also returns encoder gradients and batch statistics.
fn batch_loss(
    backbone: &DitBackbone,
    encoder: Option<&MemoryEncoder>,
    sched: &NoiseSchedule,
    items: &[TrainItem<'_>],
    seed: u64,
    step: u64,
    mode: Mode,
) -> Result<(f64, Tape, Option<crate::autograd::Var>, crate::memory_encoder::BatchStats)> {
    if items.is_empty() {
        return Err(Error::invalid("empty training batch"));
    }
    let tape = Tape::new();
    let mut stats = BTreeMap::new();
    let mut memory_rows = Vec::new();
    if let Some(enc) = encoder {
        let all_refs: Vec<(&str, &LatentVideo)> = items.iter().flat_map(|it| it.refs.iter().copied()).collect();
        if !all_refs.is_empty() {
            let (tokens, _, s) = enc.encode_on_tape(&tape, &all_refs, mode)?;
            stats = s;
            let per_video = enc.config().tokens_per_video();
            let mut offset = 0;
            for it in items {
                let n = it.refs.len() * per_video;
                memory_rows.push((n > 0).then(|| tape.slice(tokens, 0, offset, n)));
                offset += n;
            }
        }
    }
    let mut losses = Vec::with_capacity(items.len());
    for (i, it) in items.iter().enumerate() {
        let shape = it.x0.shape().to_vec();
        let (t, eps) = training_draw(seed, step, i as u64, sched.len(), &shape);
        let xt = q_sample(&it.x0.data, t, &eps, sched)?;
        let mem = memory_rows.get(i).copied().flatten();
        let (pred, _) = backbone.forward_on_tape(&tape, &xt, t, it.cond, mem, &Hooks::default())?;
        losses.push(tape.mse(pred, &eps));
    }
    let total = losses[1..].iter().fold(losses[0], |acc, &l| tape.add(acc, l));
    let loss = tape.scale(total, 1.0 / items.len() as f64);
    let value = tape.value(loss).iter().copied().next().unwrap_or(f64::NAN);
    if !value.is_finite() {
        return Err(Error::NonFinite(format!("training loss at step {step}: {value}")));
    }
    Ok((value, tape, Some(loss), stats))
}

/// One optimizer update of the encoder against the frozen backbone.
#[allow(clippy::too_many_arguments)]
pub fn training_step(
    backbone: &DitBackbone,
    encoder: &mut MemoryEncoder,
    adam: &mut AdamState,
    adam_cfg: &AdamConfig,
    sched: &NoiseSchedule,
    items: &[TrainItem<'_>],
    seed: u64,
    step: u64,
) -> Result<StepReport> {
    let (loss, tape, loss_var, stats) = batch_loss(backbone, Some(encoder), sched, items, seed, step, Mode::Train)?;
    let grads = tape.backward(loss_var.expect("loss variable")).param_grads();
    let frozen_grads = grads
        .keys()
        .filter(|n| encoder.params().get(n).map(|p| !p.trainable).unwrap_or(true))
        .count();
    let grad_norm = grads.values().map(|g| g.iter().map(|v| v * v).sum::<f64>()).sum::<f64>().sqrt();
    if !grad_norm.is_finite() {
        return Err(Error::NonFinite(format!("gradient norm at step {step}")));
    }
    let updated = grads.len();
    if !grads.is_empty() {
        adam.step(adam_cfg, encoder.params_mut(), &grads)?;
    }
    encoder.update_running(&stats);
    Ok(StepReport {
        loss,
        grad_norm,
        frozen_grads,
        updated,
    })
}

/// Evaluation loss with fixed draws keyed by `seed`; the encoder runs on its
/// running statistics. `encoder = None` evaluates the backbone without memory.
pub fn evaluate_loss(
    backbone: &DitBackbone,
    encoder: Option<&MemoryEncoder>,
    sched: &NoiseSchedule,
    items: &[TrainItem<'_>],
    seed: u64,
) -> Result<f64> {
    batch_loss(backbone, encoder, sched, items, seed, u64::MAX, Mode::Eval).map(|r| r.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_step_schedule() {
        let s = build_schedule(1, 0.1, 0.1).unwrap();
        assert_eq!(s.alpha_bars, vec![0.9]);
    }

    #[test]
    fn default_schedule_decreases() {
        let s = build_schedule(1000, 1e-4, 2e-2).unwrap();
        assert!(s.alpha_bars.windows(2).all(|w| w[1] < w[0]));
        assert!(*s.alpha_bars.last().unwrap() < 0.01);
        assert_eq!(s.alpha_bars[0], 1.0 - s.betas[0]);
        let c = build_schedule(5, 0.02, 0.02).unwrap();
        assert!(c.betas.iter().all(|&b| b == 0.02));
    }

    #[test]
    fn schedule_rejects_bad_bounds() {
        assert!(build_schedule(0, 0.1, 0.2).is_err());
        assert!(build_schedule(10, 0.0, 0.2).is_err());
        assert!(build_schedule(10, 0.3, 0.2).is_err());
        assert!(build_schedule(10, 0.1, 1.0).is_err());
    }

    #[test]
    fn q_sample_edges() {
        let s = NoiseSchedule {
            betas: vec![0.0, 0.5],
            alpha_bars: vec![1.0, 0.5],
        };
        let x0 = gaussian(&mut stream(1, "x", 0), &[2, 3]);
        let eps = gaussian(&mut stream(2, "e", 0), &[2, 3]);
        assert_eq!(q_sample(&x0, 0, &eps, &s).unwrap(), x0);
        let zero = ArrayD::zeros(x0.raw_dim());
        assert_eq!(q_sample(&x0, 1, &zero, &s).unwrap(), &x0 * 0.5f64.sqrt());
        assert!(q_sample(&x0, 2, &eps, &s).is_err());
    }

    #[test]
    fn cutoff_arithmetic() {
        assert_eq!(inject_cutoff(30, 2.0 / 3.0), 20);
        assert_eq!(inject_cutoff(3, 2.0 / 3.0), 2);
        assert_eq!(inject_cutoff(4, 2.0 / 3.0), 3);
        assert_eq!(inject_cutoff(1, 2.0 / 3.0), 1);
        let steps = sampler_steps(1000, 30).unwrap();
        assert_eq!(steps.len(), 30);
        assert_eq!(steps[0], 966);
        assert_eq!(*steps.last().unwrap(), 0);
    }

    #[test]
    fn zero_predictor_loss_is_unit() {
        let (_, eps) = training_draw(42, 0, 0, 1000, &[4, 16, 16, 16]);
        let mean_sq = eps.iter().map(|v| v * v).sum::<f64>() / eps.len() as f64;
        assert!((mean_sq - 1.0).abs() < 0.05, "{mean_sq}");
    }
}
