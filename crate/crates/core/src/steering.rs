//! Training-free steering: capture cross-attention features from paired
//! sampler runs, take the mean difference per (timestep, layer), band-filter
//! each layer's vectors along the timestep axis, normalize, and add the result
//! back during sampling.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use ndarray::{Array1, Array2, Array3, Axis, Ix3};
use serde::{Deserialize, Serialize};

use crate::blob::{self, Dtype};
use crate::diffusion::{sample, InjectionHook, NoiseSchedule, SamplerPlan};
use crate::dit_backbone::{embed_prompt, token_mean, CaptureTap, DitBackbone};
use crate::error::{Error, Result};
use crate::freq_filter::{filter_array, Band, FrequencyMask};
use crate::memory_encoder::MemoryTokens;

/// Relative norm below which a filtered steering vector counts as zero.
pub const ZERO_TOLERANCE: f64 = 1e-9;

/// Timestep and layer.
pub type Key = (usize, usize);

/// Per-run spatial means of the cross-attention output, one vector per key.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Trace {
    pub vectors: BTreeMap<Key, Array1<f64>>,
}

impl Trace {
    pub fn from_taps(taps: &[CaptureTap]) -> Self {
        Self {
            vectors: taps
                .iter()
                .map(|t| ((t.timestep, t.layer_index), token_mean(&t.captured)))
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SteeringTable {
    pub vectors: BTreeMap<Key, Array1<f64>>,
    pub filtered: bool,
    pub normalized: bool,
    pub band: Option<Band>,
    pub n_pos: usize,
    pub n_neg: usize,
}

impl SteeringTable {
    pub fn width(&self) -> usize {
        self.vectors.values().next().map(|v| v.len()).unwrap_or(0)
    }

    pub fn timesteps(&self) -> Vec<usize> {
        self.vectors.keys().map(|k| k.0).collect::<BTreeSet<_>>().into_iter().collect()
    }

    pub fn layers(&self) -> Vec<usize> {
        self.vectors.keys().map(|k| k.1).collect::<BTreeSet<_>>().into_iter().collect()
    }

    pub fn max_norm(&self) -> f64 {
        self.vectors.values().map(|v| v.dot(v).sqrt()).fold(0.0, f64::max)
    }

    pub fn is_zero(&self) -> bool {
        self.vectors.values().all(|v| v.iter().all(|&x| x == 0.0))
    }
}

/// Runs both sides through the same sampler and records one trace per run.
#[allow(clippy::too_many_arguments)]
pub fn capture_runs(
    backbone: &DitBackbone,
    sched: &NoiseSchedule,
    plan: &SamplerPlan<'_>,
    latent_shape: [usize; 4],
    prompts_pos: &[String],
    seeds_pos: &[u64],
    prompts_neg: &[String],
    seeds_neg: &[u64],
) -> Result<(Vec<Trace>, Vec<Trace>)> {
    if prompts_pos.len() != seeds_pos.len() || prompts_neg.len() != seeds_neg.len() {
        return Err(Error::invalid("each prompt needs exactly one seed"));
    }
    if seeds_pos.len() != seeds_neg.len() {
        return Err(Error::invalid(format!(
            "seed lists differ in length: {} positive, {} negative",
            seeds_pos.len(),
            seeds_neg.len()
        )));
    }
    if plan.steering.is_some() {
        return Err(Error::invalid("capture runs must not carry a steering hook"));
    }
    let cond_dim = backbone.config().cond_dim;
    let run = |prompts: &[String], seeds: &[u64]| -> Result<Vec<Trace>> {
        prompts
            .iter()
            .zip(seeds)
            .map(|(p, &s)| {
                let out = sample(backbone, sched, plan, &embed_prompt(p, cond_dim), latent_shape, s, true)?;
                Ok(Trace::from_taps(&out.taps))
            })
            .collect()
    };
    Ok((run(prompts_pos, seeds_pos)?, run(prompts_neg, seeds_neg)?))
}

fn mean_trace(traces: &[Trace], keys: &BTreeSet<Key>) -> Result<BTreeMap<Key, Array1<f64>>> {
    let mut out = BTreeMap::new();
    for key in keys {
        let mut acc: Option<Array1<f64>> = None;
        for t in traces {
            let v = &t.vectors[key];
            match &mut acc {
                Some(a) if a.len() != v.len() => {
                    return Err(Error::ShapeMismatch {
                        expected: vec![a.len()],
                        actual: vec![v.len()],
                    })
                }
                Some(a) => *a += v,
                None => acc = Some(v.clone()),
            }
        }
        out.insert(*key, acc.expect("nonempty side") / traces.len() as f64);
    }
    Ok(out)
}

/// Mean over positive runs minus mean over negative runs at every key.
pub fn compute_steering(pos: &[Trace], neg: &[Trace]) -> Result<SteeringTable> {
    if pos.is_empty() || neg.is_empty() {
        return Err(Error::invalid("both sides need at least one trace"));
    }
    let keys: BTreeSet<Key> = pos[0].vectors.keys().copied().collect();
    if keys.is_empty() {
        return Err(Error::invalid("traces are empty"));
    }
    for t in pos.iter().chain(neg) {
        if t.vectors.len() != keys.len() || !t.vectors.keys().all(|k| keys.contains(k)) {
            return Err(Error::invalid("traces cover different (timestep, layer) grids"));
        }
    }
    let mp = mean_trace(pos, &keys)?;
    let mn = mean_trace(neg, &keys)?;
    let vectors = keys.iter().map(|k| (*k, &mp[k] - &mn[k])).collect();
    Ok(SteeringTable {
        vectors,
        filtered: false,
        normalized: false,
        band: None,
        n_pos: pos.len(),
        n_neg: neg.len(),
    })
}

/// Filters each layer's `[T, d]` stack (ascending timestep) along T with no
/// residual, then L2-normalizes every vector. Vectors that are zero up to FFT
/// round-off (norm at most `ZERO_TOLERANCE` times the layer's largest input
/// norm) are set to exactly zero instead of being blown up to unit length;
/// their count is returned.
pub fn filter_and_normalize(
    table: &SteeringTable,
    band: Band,
    cutoff_rho: f64,
    attenuation_gamma: f64,
) -> Result<(SteeringTable, usize)> {
    if table.filtered {
        return Err(Error::invalid("steering table is already filtered"));
    }
    let timesteps = table.timesteps();
    let d = table.width();
    let mask = FrequencyMask::build(&[timesteps.len()], band, cutoff_rho, attenuation_gamma)?;
    let mut vectors = BTreeMap::new();
    let mut zeros = 0;
    for layer in table.layers() {
        let mut stack = Array2::zeros((timesteps.len(), d));
        for (i, &t) in timesteps.iter().enumerate() {
            let v = table
                .vectors
                .get(&(t, layer))
                .ok_or_else(|| Error::invalid(format!("table misses (t={t}, layer={layer})")))?;
            stack.row_mut(i).assign(v);
        }
        let scale = stack.rows().into_iter().map(|r| r.dot(&r).sqrt()).fold(0.0, f64::max);
        let filtered = filter_array(&stack.into_dyn(), &[0], &mask, false)?;
        for (i, &t) in timesteps.iter().enumerate() {
            let v = filtered.index_axis(Axis(0), i).to_owned().into_dimensionality::<ndarray::Ix1>().expect("rank 1");
            let norm = v.dot(&v).sqrt();
            let v = if norm > ZERO_TOLERANCE * scale {
                v / norm
            } else {
                zeros += 1;
                Array1::zeros(d)
            };
            vectors.insert((t, layer), v);
        }
    }
    Ok((
        SteeringTable {
            vectors,
            filtered: true,
            normalized: true,
            band: Some(band),
            n_pos: table.n_pos,
            n_neg: table.n_neg,
        },
        zeros,
    ))
}

/// `alpha * s~` at every stored key on the selected layers.
#[derive(Clone, Debug)]
pub struct SteeringHook {
    table: SteeringTable,
    alpha: f64,
    layers: Option<BTreeSet<usize>>,
}

impl InjectionHook for SteeringHook {
    fn vector(&self, timestep: usize, layer: usize) -> Option<Array1<f64>> {
        if let Some(sel) = &self.layers {
            if !sel.contains(&layer) {
                return None;
            }
        }
        self.table.vectors.get(&(timestep, layer)).map(|v| v * self.alpha)
    }
}

impl SteeringHook {
    pub fn alpha(&self) -> f64 {
        self.alpha
    }
}

/// Builds the injection hook. `layers = None` injects at every layer.
pub fn make_injection_hook(
    table: &SteeringTable,
    alpha: f64,
    d_model: usize,
    layers: Option<&[usize]>,
) -> Result<SteeringHook> {
    if !table.normalized {
        return Err(Error::invalid("steering table must be normalized before injection"));
    }
    if table.width() != d_model {
        return Err(Error::ShapeMismatch {
            expected: vec![d_model],
            actual: vec![table.width()],
        });
    }
    if !alpha.is_finite() {
        return Err(Error::invalid("alpha must be finite"));
    }
    Ok(SteeringHook {
        table: table.clone(),
        alpha,
        layers: layers.map(|l| l.iter().copied().collect()),
    })
}

#[derive(Serialize, Deserialize)]
struct TableManifest {
    timesteps: Vec<usize>,
    layers: Vec<usize>,
    width: usize,
    filtered: bool,
    normalized: bool,
    band: Option<Band>,
    n_pos: usize,
    n_neg: usize,
}

/// Writes `manifest.json` and a `[layers, timesteps, d]` blob into `dir`.
pub fn save_table(table: &SteeringTable, dir: &Path, dtype: Dtype) -> Result<()> {
    let timesteps = table.timesteps();
    let layers = table.layers();
    let d = table.width();
    let mut data = Array3::zeros((layers.len(), timesteps.len(), d));
    for (li, &l) in layers.iter().enumerate() {
        for (ti, &t) in timesteps.iter().enumerate() {
            let v = table
                .vectors
                .get(&(t, l))
                .ok_or_else(|| Error::invalid("steering table is not a full grid"))?;
            data.slice_mut(ndarray::s![li, ti, ..]).assign(v);
        }
    }
    blob::save(&dir.join("vectors.dmem"), &data.into_dyn(), dtype)?;
    let manifest = TableManifest {
        timesteps,
        layers,
        width: d,
        filtered: table.filtered,
        normalized: table.normalized,
        band: table.band,
        n_pos: table.n_pos,
        n_neg: table.n_neg,
    };
    blob::write_atomic(&dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?.as_bytes())
}

pub fn load_table(dir: &Path) -> Result<SteeringTable> {
    let path = dir.join("manifest.json");
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let m: TableManifest = serde_json::from_str(&text)?;
    let data = blob::load(&dir.join("vectors.dmem"))?
        .into_dimensionality::<Ix3>()
        .map_err(|e| Error::Corrupt {
            path: dir.join("vectors.dmem"),
            reason: e.to_string(),
        })?;
    if data.dim() != (m.layers.len(), m.timesteps.len(), m.width) {
        return Err(Error::Corrupt {
            path: dir.join("vectors.dmem"),
            reason: "shape disagrees with manifest".into(),
        });
    }
    let mut vectors = BTreeMap::new();
    for (li, &l) in m.layers.iter().enumerate() {
        for (ti, &t) in m.timesteps.iter().enumerate() {
            vectors.insert((t, l), data.slice(ndarray::s![li, ti, ..]).to_owned());
        }
    }
    Ok(SteeringTable {
        vectors,
        filtered: m.filtered,
        normalized: m.normalized,
        band: m.band,
        n_pos: m.n_pos,
        n_neg: m.n_neg,
    })
}

/// Sampler plan helper that attaches memory and steering.
pub fn plan_with<'a>(
    base: SamplerPlan<'a>,
    memory: Option<&'a MemoryTokens>,
    steering: Option<&'a dyn InjectionHook>,
) -> SamplerPlan<'a> {
    SamplerPlan {
        memory,
        steering,
        ..base
    }
}

/// Synthetic traces over a `(timesteps x layers)` grid: every negative run is
/// zero-mean noise, every positive run is noise plus `u`.
pub fn planted_traces(
    u: &Array1<f64>,
    timesteps: &[usize],
    layers: usize,
    runs_per_side: usize,
    sigma: f64,
    seed: u64,
) -> (Vec<Trace>, Vec<Trace>) {
    let d = u.len();
    let make = |side: &str, run: usize, shift: bool| {
        let mut rng = crate::rng::stream(seed, side, run as u64);
        let mut tr = Trace::default();
        for &t in timesteps {
            for l in 0..layers {
                let noise = crate::rng::gaussian_scaled(&mut rng, &[d], sigma)
                    .into_dimensionality::<ndarray::Ix1>()
                    .expect("rank 1");
                tr.vectors.insert((t, l), if shift { noise + u } else { noise });
            }
        }
        tr
    };
    let pos = (0..runs_per_side).map(|r| make("planted-pos", r, true)).collect();
    let neg = (0..runs_per_side).map(|r| make("planted-neg", r, false)).collect();
    (pos, neg)
}

pub fn cosine(a: &Array1<f64>, b: &Array1<f64>) -> f64 {
    let na = a.dot(a).sqrt();
    let nb = b.dot(b).sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        a.dot(b) / (na * nb)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn const_trace(v: &Array1<f64>, ts: &[usize], layers: usize) -> Trace {
        let mut tr = Trace::default();
        for &t in ts {
            for l in 0..layers {
                tr.vectors.insert((t, l), v.clone());
            }
        }
        tr
    }

    #[test]
    fn equal_sides_give_zero() {
        let v = Array1::from(vec![1.0, -2.0, 3.0]);
        let tr = const_trace(&v, &[0, 10, 20], 2);
        let s = compute_steering(&[tr.clone()], &[tr]).unwrap();
        assert!(s.is_zero());
        assert_eq!(s.vectors.len(), 6);
    }

    #[test]
    fn constant_difference() {
        let u = Array1::from(vec![1.0, 2.0]);
        let v = Array1::from(vec![0.5, -1.0]);
        let s = compute_steering(&[const_trace(&u, &[1, 2], 1)], &[const_trace(&v, &[1, 2], 1)]).unwrap();
        for x in s.vectors.values() {
            assert_eq!(x, &(&u - &v));
        }
    }

    #[test]
    fn grid_mismatch_is_rejected() {
        let u = Array1::from(vec![1.0]);
        assert!(compute_steering(&[const_trace(&u, &[1, 2], 1)], &[const_trace(&u, &[1, 3], 1)]).is_err());
        assert!(compute_steering(&[], &[const_trace(&u, &[1], 1)]).is_err());
    }

    #[test]
    fn all_pass_filter_only_normalizes() {
        let (pos, neg) = planted_traces(&Array1::from(vec![1.0, 0.0, 0.0, 0.0]), &[0, 5, 9, 14], 2, 4, 0.3, 1);
        let s = compute_steering(&pos, &neg).unwrap();
        let (f, zeros) = filter_and_normalize(&s, Band::Low, 0.25, 1.0).unwrap();
        assert_eq!(zeros, 0);
        for (k, v) in &f.vectors {
            let raw = &s.vectors[k];
            let expect = raw / raw.dot(raw).sqrt();
            for (a, b) in v.iter().zip(expect.iter()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
        assert!(filter_and_normalize(&f, Band::Low, 0.25, 1.0).is_err());
    }

    #[test]
    fn constant_table_vanishes_under_high_band() {
        let v = Array1::from(vec![0.3, -0.7, 1.1]);
        let s = compute_steering(&[const_trace(&v, &[0, 3, 6, 9, 12, 15], 2)], &[const_trace(&Array1::zeros(3), &[0, 3, 6, 9, 12, 15], 2)]).unwrap();
        let (f, zeros) = filter_and_normalize(&s, Band::High, 0.25, 0.0).unwrap();
        assert!(f.max_norm() < 1e-8);
        assert_eq!(zeros + f.vectors.values().filter(|v| v.dot(*v) > 0.0).count(), 12);
    }

    #[test]
    fn hook_is_linear_in_alpha() {
        let (pos, neg) = planted_traces(&Array1::from(vec![0.0, 1.0]), &[0, 1, 2], 2, 3, 0.1, 2);
        let (f, _) = filter_and_normalize(&compute_steering(&pos, &neg).unwrap(), Band::Low, 0.25, 0.2).unwrap();
        let h1 = make_injection_hook(&f, 0.7, 2, None).unwrap();
        let h2 = make_injection_hook(&f, 1.4, 2, None).unwrap();
        assert_eq!(h1.vector(1, 0).unwrap() * 2.0, h2.vector(1, 0).unwrap());
        let only0 = make_injection_hook(&f, 1.0, 2, Some(&[0])).unwrap();
        assert!(only0.vector(1, 1).is_none());
        assert!(make_injection_hook(&f, 1.0, 3, None).is_err());
        assert!(make_injection_hook(&compute_steering(&pos, &neg).unwrap(), 1.0, 2, None).is_err());
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let (pos, neg) = planted_traces(&Array1::from(vec![0.0, 1.0, 2.0]), &[0, 4, 8], 2, 2, 0.1, 3);
        let s = compute_steering(&pos, &neg).unwrap();
        save_table(&s, dir.path(), Dtype::F64).unwrap();
        assert_eq!(load_table(dir.path()).unwrap(), s);
    }
}
