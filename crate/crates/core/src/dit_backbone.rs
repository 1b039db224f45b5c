//! A frozen toy diffusion transformer.
//!
//! Noisy latents are cut into spatio-temporal patches, projected to `d_model`
//! and given fixed 3D sinusoidal positions. Each block runs
//! memory-augmented self-attention, text cross-attention and an MLP. Self-attention
//! and the MLP are modulated by the timestep embedding (adaptive shift, scale and
//! gate); cross-attention uses a plain layer norm. The final layer maps tokens
//! back to patches, giving a noise prediction of the input's shape.
//!
//! Memory tokens are appended to the keys and values of every self-attention
//! layer. Only video positions are read back out, so the memory's outputs are
//! never formed, and the same memory enters the next block unchanged.

use ndarray::{Array1, Array2, ArrayD, Ix2, IxDyn};
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::hashing::fnv1a64;
use crate::memory_encoder::MemoryTokens;
use crate::nn;
use crate::params::ParamStore;
use crate::rng::{gaussian, stream};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneConfig {
    pub n_blocks: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub patch: [usize; 3],
    pub cond_dim: usize,
    pub mlp_ratio: usize,
    pub seed: u64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            n_blocks: 4,
            d_model: 128,
            n_heads: 4,
            patch: [2, 4, 4],
            cond_dim: 64,
            mlp_ratio: 2,
            seed: 1,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("backbone: {m}")));
        if self.n_blocks == 0 {
            return bad("n_blocks must be at least 1");
        }
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return bad("d_model must be a positive multiple of n_heads");
        }
        if self.d_model < 6 || self.d_model % 2 != 0 {
            return bad("d_model must be even and at least 6");
        }
        if self.patch.contains(&0) {
            return bad("patch sizes must be positive");
        }
        if self.cond_dim == 0 || self.mlp_ratio == 0 {
            return bad("cond_dim and mlp_ratio must be positive");
        }
        Ok(())
    }
}

/// Text condition: one `cond_dim` vector per word.
#[derive(Clone, Debug, PartialEq)]
pub struct Condition {
    pub tokens: Array2<f64>,
}

const WORD_SEED: u64 = 0x5eed_0f_c0_4d;

/// Deterministic word-hash embedding of a prompt. Each lowercase alphanumeric
/// word maps to a fixed Gaussian vector; an empty prompt maps to a single null
/// token.
pub fn embed_prompt(text: &str, cond_dim: usize) -> Condition {
    let words: Vec<String> = text
        .split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
        .collect();
    let scale = 1.0 / (cond_dim as f64).sqrt();
    let row = |key: u64| gaussian(&mut stream(key, "word", 0), &[cond_dim]).mapv(|v| v * scale);
    let keys: Vec<u64> = if words.is_empty() {
        vec![fnv1a64(WORD_SEED, b"\0null")]
    } else {
        words.iter().map(|w| fnv1a64(WORD_SEED, w.as_bytes())).collect()
    };
    let mut tokens = Array2::zeros((keys.len(), cond_dim));
    for (i, k) in keys.into_iter().enumerate() {
        tokens.row_mut(i).assign(&row(k).into_dimensionality::<ndarray::Ix1>().expect("rank 1"));
    }
    Condition { tokens }
}

/// Rearranges `[C, D, H, W]` into `[N, C*pt*ph*pw]` patch rows, row-major over
/// the patch grid, features ordered (c, dt, dy, dx).
pub fn patchify_array(z: &ArrayD<f64>, patch: [usize; 3]) -> Result<Array2<f64>> {
    let (c, d, h, w) = dims4(z)?;
    let [pt, ph, pw] = patch;
    if d % pt != 0 || h % ph != 0 || w % pw != 0 {
        return Err(Error::invalid(format!(
            "patch {patch:?} does not divide latent dims {:?}",
            [d, h, w]
        )));
    }
    let (gt, gh, gw) = (d / pt, h / ph, w / pw);
    let mut out = Array2::zeros((gt * gh * gw, c * pt * ph * pw));
    for it in 0..gt {
        for ih in 0..gh {
            for iw in 0..gw {
                let n = (it * gh + ih) * gw + iw;
                let mut f = 0;
                for ch in 0..c {
                    for dt in 0..pt {
                        for dy in 0..ph {
                            for dx in 0..pw {
                                out[[n, f]] = z[[ch, it * pt + dt, ih * ph + dy, iw * pw + dx]];
                                f += 1;
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Inverse of [`patchify_array`].
pub fn unpatchify_array(tokens: &Array2<f64>, origin: [usize; 4], patch: [usize; 3]) -> Result<ArrayD<f64>> {
    let [c, d, h, w] = origin;
    let [pt, ph, pw] = patch;
    if d % pt != 0 || h % ph != 0 || w % pw != 0 {
        return Err(Error::invalid(format!("patch {patch:?} does not divide {origin:?}")));
    }
    let (gt, gh, gw) = (d / pt, h / ph, w / pw);
    if tokens.dim() != (gt * gh * gw, c * pt * ph * pw) {
        return Err(Error::ShapeMismatch {
            expected: vec![gt * gh * gw, c * pt * ph * pw],
            actual: tokens.shape().to_vec(),
        });
    }
    let mut z = ArrayD::zeros(IxDyn(&origin));
    for it in 0..gt {
        for ih in 0..gh {
            for iw in 0..gw {
                let n = (it * gh + ih) * gw + iw;
                let mut f = 0;
                for ch in 0..c {
                    for dt in 0..pt {
                        for dy in 0..ph {
                            for dx in 0..pw {
                                z[[ch, it * pt + dt, ih * ph + dy, iw * pw + dx]] = tokens[[n, f]];
                                f += 1;
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(z)
}

fn dims4(z: &ArrayD<f64>) -> Result<(usize, usize, usize, usize)> {
    match z.shape() {
        &[c, d, h, w] => Ok((c, d, h, w)),
        other => Err(Error::ShapeMismatch {
            expected: vec![0, 0, 0, 0],
            actual: other.to_vec(),
        }),
    }
}

/// Per-call hooks at the cross-attention output (before the residual add).
#[derive(Clone, Debug, Default)]
pub struct Hooks {
    /// Copy every layer's cross-attention output.
    pub capture: bool,
    /// Per-layer vector added to every token of the cross-attention output.
    pub inject: Vec<Option<Array1<f64>>>,
}

/// One layer's captured cross-attention output `[N, d_model]`.
#[derive(Clone, Debug, PartialEq)]
pub struct CaptureTap {
    pub layer_index: usize,
    pub timestep: usize,
    pub captured: Array2<f64>,
}

/// Side outputs of one denoiser call.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ForwardTrace {
    pub taps: Vec<CaptureTap>,
    /// Key/value positions seen by each block's self-attention.
    pub attention_positions: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct DitBackbone {
    cfg: BackboneConfig,
    latent_channels: usize,
    params: ParamStore,
}

impl DitBackbone {
    pub fn new(cfg: BackboneConfig, latent_channels: usize) -> Result<Self> {
        cfg.validate()?;
        if latent_channels == 0 {
            return Err(Error::Config("backbone: latent_channels must be positive".into()));
        }
        let d = cfg.d_model;
        let [pt, ph, pw] = cfg.patch;
        let patch_dim = latent_channels * pt * ph * pw;
        let mut rng = stream(cfg.seed, "backbone", 0);
        let mut p = ParamStore::new();
        nn::register_linear(&mut p, &mut rng, "dit.patch_in", patch_dim, d, 1.0, false);
        nn::register_linear(&mut p, &mut rng, "dit.time1", d, d, 1.0, false);
        nn::register_linear(&mut p, &mut rng, "dit.time2", d, d, 1.0, false);
        for b in 0..cfg.n_blocks {
            let pre = format!("dit.b{b}");
            nn::register_linear(&mut p, &mut rng, &format!("{pre}.ada"), d, 6 * d, 0.5, false);
            nn::register_attention(&mut p, &mut rng, &format!("{pre}.sa"), d, d, false);
            nn::register_layer_norm(&mut p, &format!("{pre}.ln_ca"), d, false);
            nn::register_attention(&mut p, &mut rng, &format!("{pre}.ca"), d, cfg.cond_dim, false);
            let hidden = cfg.mlp_ratio * d;
            nn::register_linear(&mut p, &mut rng, &format!("{pre}.mlp1"), d, hidden, 1.0, false);
            nn::register_linear(&mut p, &mut rng, &format!("{pre}.mlp2"), hidden, d, 1.0, false);
        }
        nn::register_linear(&mut p, &mut rng, "dit.final_ada", d, 2 * d, 0.5, false);
        nn::register_linear(&mut p, &mut rng, "dit.out", d, patch_dim, 1.0, false);
        Ok(Self {
            cfg,
            latent_channels,
            params: p,
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut_for_test(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn latent_channels(&self) -> usize {
        self.latent_channels
    }

    /// Number of video tokens for a latent of spatial dims `(D, H, W)`.
    pub fn token_count(&self, dhw: [usize; 3]) -> Result<usize> {
        let [pt, ph, pw] = self.cfg.patch;
        if dhw[0] % pt != 0 || dhw[1] % ph != 0 || dhw[2] % pw != 0 {
            return Err(Error::invalid(format!("patch {:?} does not divide {dhw:?}", self.cfg.patch)));
        }
        Ok(dhw[0] / pt * (dhw[1] / ph) * (dhw[2] / pw))
    }

    /// Patch tokens with input projection and 3D positions, `[N, d_model]`.
    pub fn patchify(&self, tape: &Tape, z: &ArrayD<f64>) -> Result<Var> {
        let (c, d, h, w) = dims4(z)?;
        if c != self.latent_channels {
            return Err(Error::ShapeMismatch {
                expected: vec![self.latent_channels, d, h, w],
                actual: z.shape().to_vec(),
            });
        }
        let rows = patchify_array(z, self.cfg.patch)?;
        let [pt, ph, pw] = self.cfg.patch;
        let pos = nn::positions_3d((d / pt, h / ph, w / pw), self.cfg.d_model);
        let x = nn::linear(tape, &self.params, "dit.patch_in", tape.constant(rows.into_dyn()));
        Ok(tape.add(x, tape.constant(pos.into_dyn())))
    }

    fn time_embedding(&self, tape: &Tape, t: usize) -> Var {
        let e = nn::sinusoidal(t as f64, self.cfg.d_model).insert_axis(ndarray::Axis(0));
        let h = nn::linear(tape, &self.params, "dit.time1", tape.constant(e.into_dyn()));
        let h = tape.silu(h);
        let h = nn::linear(tape, &self.params, "dit.time2", h);
        tape.silu(h)
    }

    /// Splits a `[1, k*d]` modulation row into `k` vectors of length `d`.
    fn chunks(&self, tape: &Tape, row: Var, k: usize) -> Vec<Var> {
        let d = self.cfg.d_model;
        (0..k)
            .map(|i| tape.reshape(tape.slice(row, 1, i * d, d), &[d]))
            .collect()
    }

    fn modulate(&self, tape: &Tape, x: Var, shift: Var, scale: Var) -> Var {
        let n = tape.layer_norm_rows(x, nn::LN_EPS);
        let ones = tape.constant(ArrayD::ones(IxDyn(&[self.cfg.d_model])));
        let gain = tape.add(scale, ones);
        tape.add_row(tape.mul_row(n, gain), shift)
    }

    /// Self-attention of video tokens over `[video ∥ memory]` keys and values.
    /// Returns only the `N` video positions.
    pub fn mem_self_attention(&self, tape: &Tape, h: Var, memory: Option<Var>, block: usize) -> Result<(Var, usize)> {
        let n = tape.shape(h)[0];
        let context = match memory {
            Some(m) => {
                let ms = tape.shape(m);
                if ms.len() != 2 || ms[1] != self.cfg.d_model {
                    return Err(Error::ShapeMismatch {
                        expected: vec![ms.first().copied().unwrap_or(0), self.cfg.d_model],
                        actual: ms,
                    });
                }
                if ms[0] == 0 {
                    h
                } else {
                    tape.concat(&[h, m], 0)
                }
            }
            None => h,
        };
        let positions = tape.shape(context)[0];
        let out = nn::attention(tape, &self.params, &format!("dit.b{block}.sa"), h, context, self.cfg.n_heads);
        debug_assert_eq!(tape.shape(out)[0], n);
        Ok((out, positions))
    }

    /// Cross-attention of video tokens over the text condition, with an
    /// optional capture and an optional additive injection at its output.
    pub fn cross_attention(
        &self,
        tape: &Tape,
        h: Var,
        cond: &Condition,
        block: usize,
        inject: Option<&Array1<f64>>,
    ) -> Result<Var> {
        if cond.tokens.ncols() != self.cfg.cond_dim || cond.tokens.nrows() == 0 {
            return Err(Error::ShapeMismatch {
                expected: vec![cond.tokens.nrows().max(1), self.cfg.cond_dim],
                actual: cond.tokens.shape().to_vec(),
            });
        }
        let ctx = tape.constant(cond.tokens.clone().into_dyn());
        let out = nn::attention(tape, &self.params, &format!("dit.b{block}.ca"), h, ctx, self.cfg.n_heads);
        match inject {
            None => Ok(out),
            Some(v) if v.len() != self.cfg.d_model => Err(Error::ShapeMismatch {
                expected: vec![self.cfg.d_model],
                actual: vec![v.len()],
            }),
            Some(v) => Ok(tape.add_row(out, tape.constant(v.clone().into_dyn()))),
        }
    }

    /// Noise prediction for `z_t` on `tape`. `memory` is a `[N_mem, d_model]`
    /// variable, possibly carrying gradients back to the encoder.
    pub fn forward_on_tape(
        &self,
        tape: &Tape,
        z_t: &ArrayD<f64>,
        t: usize,
        cond: &Condition,
        memory: Option<Var>,
        hooks: &Hooks,
    ) -> Result<(Var, ForwardTrace)> {
        if !hooks.inject.is_empty() && hooks.inject.len() != self.cfg.n_blocks {
            return Err(Error::invalid(format!(
                "injection hooks for {} layers, backbone has {}",
                hooks.inject.len(),
                self.cfg.n_blocks
            )));
        }
        let origin: [usize; 4] = z_t
            .shape()
            .try_into()
            .map_err(|_| Error::invalid("latent must be rank 4"))?;
        let mut x = self.patchify(tape, z_t)?;
        let c = self.time_embedding(tape, t);
        let mut trace = ForwardTrace::default();
        for b in 0..self.cfg.n_blocks {
            let ada = nn::linear(tape, &self.params, &format!("dit.b{b}.ada"), c);
            let m = self.chunks(tape, ada, 6);

            let h = self.modulate(tape, x, m[0], m[1]);
            let (a, positions) = self.mem_self_attention(tape, h, memory, b)?;
            trace.attention_positions.push(positions);
            x = tape.add(x, tape.mul_row(a, m[2]));

            let h = nn::layer_norm(tape, &self.params, &format!("dit.b{b}.ln_ca"), x);
            let inject = hooks.inject.get(b).and_then(|v| v.as_ref());
            let ca = self.cross_attention(tape, h, cond, b, inject)?;
            if hooks.capture {
                let captured = tape.value(ca).as_ref().clone().into_dimensionality::<Ix2>().expect("rank 2");
                trace.taps.push(CaptureTap {
                    layer_index: b,
                    timestep: t,
                    captured,
                });
            }
            x = tape.add(x, ca);

            let h = self.modulate(tape, x, m[3], m[4]);
            let h = nn::linear(tape, &self.params, &format!("dit.b{b}.mlp1"), h);
            let h = tape.silu(h);
            let h = nn::linear(tape, &self.params, &format!("dit.b{b}.mlp2"), h);
            x = tape.add(x, tape.mul_row(h, m[5]));
        }
        let fin = nn::linear(tape, &self.params, "dit.final_ada", c);
        let m = self.chunks(tape, fin, 2);
        let h = self.modulate(tape, x, m[0], m[1]);
        let out = nn::linear(tape, &self.params, "dit.out", h);
        let [pt, ph, pw] = self.cfg.patch;
        let (gt, gh, gw) = (origin[1] / pt, origin[2] / ph, origin[3] / pw);
        let eps = unpatchify_var(tape, out, origin, (gt, gh, gw), self.cfg.patch);
        Ok((eps, trace))
    }

    /// Inference-mode noise prediction.
    pub fn forward(
        &self,
        z_t: &ArrayD<f64>,
        t: usize,
        cond: &Condition,
        memory: Option<&MemoryTokens>,
        hooks: &Hooks,
    ) -> Result<(ArrayD<f64>, ForwardTrace)> {
        let tape = Tape::new();
        let mem = memory.map(|m| tape.constant(m.tokens.clone().into_dyn()));
        let (eps, trace) = self.forward_on_tape(&tape, z_t, t, cond, mem, hooks)?;
        let out = tape.value(eps).as_ref().clone();
        if out.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("denoiser output at t={t}")));
        }
        Ok((out, trace))
    }
}

/// Differentiable unpatchify: `[N, C*pt*ph*pw]` to `[C, D, H, W]` via reshape
/// and permute.
fn unpatchify_var(tape: &Tape, tokens: Var, origin: [usize; 4], grid: (usize, usize, usize), patch: [usize; 3]) -> Var {
    let [c, ..] = origin;
    let (gt, gh, gw) = grid;
    let [pt, ph, pw] = patch;
    let x = tape.reshape(tokens, &[gt, gh, gw, c, pt, ph, pw]);
    let x = tape.permute(x, &[3, 0, 4, 1, 5, 2, 6]);
    tape.reshape(x, &origin)
}

/// Names of frozen and trainable parameters across the given stores.
#[derive(Clone, Debug, PartialEq)]
pub struct Partition {
    pub frozen: Vec<String>,
    pub trainable: Vec<String>,
}

/// Splits parameters by their trainable flag and checks that frozen stores
/// have no trainable entry and trainable stores no frozen one.
pub fn parameter_partition(frozen_stores: &[&ParamStore], trainable_stores: &[&ParamStore]) -> Result<Partition> {
    let mut part = Partition {
        frozen: Vec::new(),
        trainable: Vec::new(),
    };
    let mut seen = std::collections::BTreeSet::new();
    for (stores, want) in [(frozen_stores, false), (trainable_stores, true)] {
        for store in stores {
            for (name, p) in store.iter() {
                if !seen.insert(name.clone()) {
                    return Err(Error::invalid(format!("parameter '{name}' appears twice")));
                }
                if p.trainable != want {
                    return Err(Error::invalid(format!(
                        "parameter '{name}' is {} but belongs to a {} store",
                        if p.trainable { "trainable" } else { "frozen" },
                        if want { "trainable" } else { "frozen" }
                    )));
                }
                if want {
                    part.trainable.push(name.clone());
                } else {
                    part.frozen.push(name.clone());
                }
            }
        }
    }
    Ok(part)
}

/// Mean over token rows.
pub fn token_mean(x: &Array2<f64>) -> Array1<f64> {
    x.mean_axis(ndarray::Axis(0)).unwrap_or_else(|| Array1::zeros(x.ncols()))
}
