//! The trainable memory encoder.
//!
//! Each reference latent `[C, D, H, W]` passes through two conv blocks
//! (conv -> band filter with residual -> batch norm -> ReLU -> max pool). The
//! first block's filter stage splits the stream into a low-band and a high-band
//! branch; each branch keeps filtering with its own band in the second block.
//! Every branch is then flattened over space, adaptively average-pooled to a
//! fixed number of temporal slots, projected to the backbone width, and passed
//! through a transformer-style self-attention block. The branch token blocks
//! are concatenated per video, low band first.
//!
//! With both filters disabled the encoder runs a single unfiltered stream; this
//! is the conv-only ablation.

use std::collections::BTreeMap;
use std::rc::Rc;

use ndarray::{Array2, ArrayD, Ix2};
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::freq_filter::{Band, FilterParams, FrequencyMask};
use crate::hashing::Fingerprinter;
use crate::latent_codec::LatentVideo;
use crate::nn;
use crate::params::ParamStore;
use crate::rng::stream;

pub const BN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttentionMode {
    None,
    Separate,
    Shared,
}

/// One token stream through the encoder.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Branch {
    Low,
    High,
    Unfiltered,
}

impl Branch {
    pub fn as_str(self) -> &'static str {
        match self {
            Branch::Low => "low",
            Branch::High => "high",
            Branch::Unfiltered => "unfiltered",
        }
    }

    pub fn band(self) -> Option<Band> {
        match self {
            Branch::Low => Some(Band::Low),
            Branch::High => Some(Band::High),
            Branch::Unfiltered => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics in batch norm.
    Train,
    /// Running statistics in batch norm.
    Eval,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub block_channels: [usize; 2],
    pub kernel: usize,
    pub pool: [usize; 3],
    pub cutoff_rho: f64,
    pub attenuation_gamma: f64,
    pub tokens_per_branch: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub branch_weight_sharing: bool,
    pub attention_mode: AttentionMode,
    pub enable_lpf: bool,
    pub enable_hpf: bool,
    pub bn_momentum: f64,
    pub seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        let f = FilterParams::default();
        Self {
            block_channels: [16, 32],
            kernel: 3,
            pool: [2, 2, 2],
            cutoff_rho: f.cutoff_rho,
            attenuation_gamma: f.attenuation_gamma,
            tokens_per_branch: 4,
            d_model: 128,
            n_heads: 4,
            branch_weight_sharing: true,
            attention_mode: AttentionMode::Shared,
            enable_lpf: true,
            enable_hpf: true,
            bn_momentum: 0.1,
            seed: 0,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("encoder: {m}")));
        if self.tokens_per_branch == 0 {
            return bad("tokens_per_branch must be at least 1");
        }
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return bad("d_model must be a positive multiple of n_heads");
        }
        if self.block_channels.contains(&0) {
            return bad("block channels must be positive");
        }
        if self.kernel == 0 || self.kernel % 2 == 0 {
            return bad("kernel must be odd");
        }
        if self.pool.contains(&0) {
            return bad("pool factors must be positive");
        }
        if self.attention_mode != AttentionMode::None && !(self.enable_lpf || self.enable_hpf) {
            return bad("attention requires at least one of enable_lpf / enable_hpf");
        }
        if !(0.0..=1.0).contains(&self.bn_momentum) {
            return bad("bn_momentum must lie in [0, 1]");
        }
        FrequencyMask::build(&[1], Band::Low, self.cutoff_rho, self.attenuation_gamma)
            .map_err(|e| Error::Config(format!("encoder filter: {e}")))?;
        Ok(())
    }

    pub fn branches(&self) -> Vec<Branch> {
        let mut out = Vec::new();
        if self.enable_lpf {
            out.push(Branch::Low);
        }
        if self.enable_hpf {
            out.push(Branch::High);
        }
        if out.is_empty() {
            out.push(Branch::Unfiltered);
        }
        out
    }

    /// Memory tokens contributed by each reference video.
    pub fn tokens_per_video(&self) -> usize {
        self.tokens_per_branch * self.branches().len()
    }

    /// Total memory tokens for `k` references.
    pub fn token_count(&self, k: usize) -> usize {
        k * self.tokens_per_video()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Span {
    pub video_id: String,
    pub start: usize,
    pub length: usize,
    pub branch: Branch,
}

/// Memory tokens for one or more reference videos.
#[derive(Clone, Debug, PartialEq)]
pub struct MemoryTokens {
    pub tokens: Array2<f64>,
    pub spans: Vec<Span>,
    pub encoder_version: String,
}

impl MemoryTokens {
    pub fn empty(d_model: usize) -> Self {
        Self {
            tokens: Array2::zeros((0, d_model)),
            spans: Vec::new(),
            encoder_version: String::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.nrows() == 0
    }

    pub fn width(&self) -> usize {
        self.tokens.ncols()
    }

    /// Concatenates per-video token sets in order, re-basing span offsets.
    pub fn concat(parts: &[MemoryTokens]) -> Result<MemoryTokens> {
        let Some(first) = parts.first() else {
            return Err(Error::invalid("no memory token sets to concatenate"));
        };
        let d = first.width();
        let mut rows = Vec::new();
        let mut spans = Vec::new();
        let mut offset = 0;
        for p in parts {
            if p.width() != d {
                return Err(Error::ShapeMismatch {
                    expected: vec![p.len(), d],
                    actual: vec![p.len(), p.width()],
                });
            }
            if p.encoder_version != first.encoder_version {
                return Err(Error::invalid("memory tokens from different encoder versions"));
            }
            rows.push(p.tokens.view());
            for s in &p.spans {
                spans.push(Span {
                    start: s.start + offset,
                    ..s.clone()
                });
            }
            offset += p.len();
        }
        Ok(MemoryTokens {
            tokens: ndarray::concatenate(ndarray::Axis(0), &rows).expect("same width"),
            spans,
            encoder_version: first.encoder_version.clone(),
        })
    }
}

/// Batch statistics used by one training-mode forward pass, keyed like the
/// running statistics (`bn{block}.{branch}`).
pub type BatchStats = BTreeMap<String, (Vec<f64>, Vec<f64>)>;

/// Adaptive average pooling matrix `[t_out, d_in]`: output slot `i` averages
/// input slots `floor(i * d_in / t_out) .. ceil((i + 1) * d_in / t_out)`.
pub fn adaptive_pool_matrix(d_in: usize, t_out: usize) -> Array2<f64> {
    let mut m = Array2::zeros((t_out, d_in));
    for i in 0..t_out {
        let start = i * d_in / t_out;
        let end = ((i + 1) * d_in).div_ceil(t_out);
        let w = 1.0 / (end - start) as f64;
        for j in start..end {
            m[[i, j]] = w;
        }
    }
    m
}

#[derive(Clone, Debug)]
pub struct MemoryEncoder {
    cfg: EncoderConfig,
    latent_shape: [usize; 4],
    codec_fingerprint: String,
    params: ParamStore,
    running: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
    version: String,
}

impl MemoryEncoder {
    pub fn new(cfg: EncoderConfig, latent_shape: [usize; 4], codec_fingerprint: &str) -> Result<Self> {
        cfg.validate()?;
        let [c, d, h, w] = latent_shape;
        let [c1, c2] = cfg.block_channels;
        let [pd, ph, pw] = cfg.pool;
        if d < pd * pd || h < ph * ph || w < pw * pw {
            return Err(Error::invalid(format!(
                "latent {latent_shape:?} too small for two pooling stages of {:?}",
                cfg.pool
            )));
        }
        let (h2, w2) = (h / ph / ph, w / pw / pw);
        let flat = c2 * h2 * w2;
        let k = cfg.kernel;
        let mut rng = stream(cfg.seed, "memory-encoder", 0);
        let mut params = ParamStore::new();
        let mut running = BTreeMap::new();
        for key in param_keys(&cfg) {
            let fan0 = (c * k * k * k) as f64;
            params.init_normal(&mut rng, &format!("enc.{key}.conv0.w"), &[c1, c, k, k, k], (2.0 / fan0).sqrt(), true);
            let fan1 = (c1 * k * k * k) as f64;
            params.init_normal(&mut rng, &format!("enc.{key}.conv1.w"), &[c2, c1, k, k, k], (2.0 / fan1).sqrt(), true);
            for (i, ch) in [c1, c2].into_iter().enumerate() {
                params.init_const(&format!("enc.{key}.bn{i}.gamma"), &[ch], 1.0, true);
                params.init_const(&format!("enc.{key}.bn{i}.beta"), &[ch], 0.0, true);
            }
            nn::register_linear(&mut params, &mut rng, &format!("enc.{key}.proj"), flat, cfg.d_model, 1.0, true);
        }
        for branch in cfg.branches() {
            for (i, ch) in [c1, c2].into_iter().enumerate() {
                running.insert(format!("bn{i}.{}", branch.as_str()), (vec![0.0; ch], vec![1.0; ch]));
            }
        }
        for key in attention_keys(&cfg) {
            let prefix = format!("enc.attn.{key}");
            let d = cfg.d_model;
            nn::register_layer_norm(&mut params, &format!("{prefix}.ln1"), d, true);
            nn::register_attention(&mut params, &mut rng, &format!("{prefix}.mha"), d, d, true);
            nn::register_layer_norm(&mut params, &format!("{prefix}.ln2"), d, true);
            nn::register_linear(&mut params, &mut rng, &format!("{prefix}.mlp1"), d, 2 * d, 1.0, true);
            nn::register_linear(&mut params, &mut rng, &format!("{prefix}.mlp2"), 2 * d, d, 1.0, true);
        }
        let mut enc = Self {
            cfg,
            latent_shape,
            codec_fingerprint: codec_fingerprint.to_string(),
            params,
            running,
            version: String::new(),
        };
        enc.refresh_version();
        Ok(enc)
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.cfg
    }

    pub fn latent_shape(&self) -> [usize; 4] {
        self.latent_shape
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    /// Callers that mutate parameters must call [`Self::refresh_version`].
    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn running_stats(&self) -> &BTreeMap<String, (Vec<f64>, Vec<f64>)> {
        &self.running
    }

    pub fn set_running_stats(&mut self, stats: BTreeMap<String, (Vec<f64>, Vec<f64>)>) -> Result<()> {
        if stats.keys().ne(self.running.keys()) {
            return Err(Error::invalid("running statistics keys do not match the encoder"));
        }
        self.running = stats;
        self.refresh_version();
        Ok(())
    }

    pub fn codec_fingerprint(&self) -> &str {
        &self.codec_fingerprint
    }

    pub fn encoder_version(&self) -> &str {
        &self.version
    }

    pub fn refresh_version(&mut self) {
        let mut fp = Fingerprinter::new();
        fp.str("memory-encoder/1")
            .str(&serde_json::to_string(&self.cfg).expect("config serializes"))
            .shape(&self.latent_shape)
            .str(&self.codec_fingerprint);
        self.params.fingerprint_into(&mut fp);
        for (k, (m, v)) in &self.running {
            fp.str(k).f64s(m).f64s(v);
        }
        self.version = fp.hex64();
    }

    /// Blends batch statistics from a training step into the running statistics.
    pub fn update_running(&mut self, stats: &BatchStats) {
        let mom = self.cfg.bn_momentum;
        for (key, (bm, bv)) in stats {
            if let Some((rm, rv)) = self.running.get_mut(key) {
                for (r, b) in rm.iter_mut().zip(bm) {
                    *r = (1.0 - mom) * *r + mom * b;
                }
                for (r, b) in rv.iter_mut().zip(bv) {
                    *r = (1.0 - mom) * *r + mom * b;
                }
            }
        }
        self.refresh_version();
    }

    fn key_for(&self, branch: Branch) -> &'static str {
        if self.cfg.branch_weight_sharing {
            "shared"
        } else {
            branch.as_str()
        }
    }

    fn mask_for(&self, grid: &[usize], branch: Branch) -> Result<Option<Rc<FrequencyMask>>> {
        match branch.band() {
            None => Ok(None),
            Some(band) => Ok(Some(Rc::new(FrequencyMask::build(
                grid,
                band,
                self.cfg.cutoff_rho,
                self.cfg.attenuation_gamma,
            )?))),
        }
    }

    /// Convolution output of block `block_index` before the filter stage.
    fn conv(&self, tape: &Tape, x: Var, block_index: usize, branch: Branch) -> Result<Var> {
        let key = self.key_for(branch);
        let w = tape.param(&self.params, &format!("enc.{key}.conv{block_index}.w"));
        let expected_in = if block_index == 0 {
            self.latent_shape[0]
        } else {
            self.cfg.block_channels[block_index - 1]
        };
        let got = tape.shape(x);
        if got.len() != 5 || got[1] != expected_in {
            return Err(Error::ShapeMismatch {
                expected: vec![got.first().copied().unwrap_or(0), expected_in, 0, 0, 0],
                actual: got,
            });
        }
        tape.conv3d(x, w, None)
    }

    /// Filter, batch norm, ReLU and pooling applied to a conv output.
    fn block_tail(
        &self,
        tape: &Tape,
        conv_out: Var,
        block_index: usize,
        branch: Branch,
        mode: Mode,
        stats: &mut BatchStats,
    ) -> Result<Var> {
        let shape = tape.shape(conv_out);
        let filtered = match self.mask_for(&shape[2..], branch)? {
            Some(mask) => tape.freq_filter(conv_out, &[2, 3, 4], mask, true)?,
            None => conv_out,
        };
        let key = self.key_for(branch);
        let gamma = tape.param(&self.params, &format!("enc.{key}.bn{block_index}.gamma"));
        let beta = tape.param(&self.params, &format!("enc.{key}.bn{block_index}.beta"));
        let stat_key = format!("bn{block_index}.{}", branch.as_str());
        let (normed, mean, var) = match mode {
            Mode::Train => tape.batch_norm(filtered, gamma, beta, None, BN_EPS),
            Mode::Eval => {
                let (m, v) = &self.running[&stat_key];
                tape.batch_norm(filtered, gamma, beta, Some((m, v)), BN_EPS)
            }
        };
        if mode == Mode::Train {
            stats.insert(stat_key, (mean, var));
        }
        let act = tape.relu(normed);
        tape.max_pool3d(act, self.cfg.pool)
    }

    /// One conv block on `[B, Cin, D, H, W]`: conv, band filter with residual,
    /// batch norm, ReLU, max pool.
    pub fn conv_block_forward(
        &self,
        tape: &Tape,
        x: Var,
        block_index: usize,
        branch: Branch,
        mode: Mode,
        stats: &mut BatchStats,
    ) -> Result<Var> {
        if block_index > 1 {
            return Err(Error::invalid(format!("block index {block_index} out of range")));
        }
        let s = tape.shape(x);
        if s.len() == 5 && (s[2] < self.cfg.pool[0] || s[3] < self.cfg.pool[1] || s[4] < self.cfg.pool[2]) {
            return Err(Error::invalid(format!("input dims {:?} smaller than pool {:?}", &s[2..], self.cfg.pool)));
        }
        let c = self.conv(tape, x, block_index, branch)?;
        self.block_tail(tape, c, block_index, branch, mode, stats)
    }

    /// Flattens `[B, C', D', H', W']` over space, pools each video's temporal
    /// axis to `tokens_per_branch` slots and projects to `d_model`.
    /// Returns `[B * T_mem, d_model]`, video-major.
    pub fn tokenize(&self, tape: &Tape, features: Var, branch: Branch) -> Result<Var> {
        let s = tape.shape(features);
        let (b, c, d, h, w) = (s[0], s[1], s[2], s[3], s[4]);
        let t = self.cfg.tokens_per_branch;
        let per_slot = tape.permute(features, &[0, 2, 1, 3, 4]);
        let rows = tape.reshape(per_slot, &[b * d, c * h * w]);
        let pool = adaptive_pool_matrix(d, t);
        let mut block = Array2::zeros((b * t, b * d));
        for v in 0..b {
            block
                .slice_mut(ndarray::s![v * t..(v + 1) * t, v * d..(v + 1) * d])
                .assign(&pool);
        }
        let pooled = tape.matmul(tape.constant(block.into_dyn()), rows);
        let key = self.key_for(branch);
        Ok(nn::linear(tape, &self.params, &format!("enc.{key}.proj"), pooled))
    }

    fn attention_key(&self, branch: Branch) -> &'static str {
        match self.cfg.attention_mode {
            AttentionMode::Separate => branch.as_str(),
            _ => "shared",
        }
    }

    /// Transformer-style self-attention block over one branch's tokens `[T, d]`.
    pub fn attend(&self, tape: &Tape, tokens: Var, branch: Branch) -> Result<Var> {
        if self.cfg.attention_mode == AttentionMode::None {
            return Err(Error::invalid("attention_mode is none; skip the attention stage"));
        }
        let prefix = format!("enc.attn.{}", self.attention_key(branch));
        let p = &self.params;
        let h = nn::layer_norm(tape, p, &format!("{prefix}.ln1"), tokens);
        let a = nn::attention(tape, p, &format!("{prefix}.mha"), h, h, self.cfg.n_heads);
        let x = tape.add(tokens, a);
        let h = nn::layer_norm(tape, p, &format!("{prefix}.ln2"), x);
        let h = nn::linear(tape, p, &format!("{prefix}.mlp1"), h);
        let h = tape.silu(h);
        let h = nn::linear(tape, p, &format!("{prefix}.mlp2"), h);
        Ok(tape.add(x, h))
    }

    /// Applies the attention block to both branches of one video.
    pub fn shared_attention(&self, tape: &Tape, low: Var, high: Var) -> Result<(Var, Var)> {
        Ok((self.attend(tape, low, Branch::Low)?, self.attend(tape, high, Branch::High)?))
    }

    /// Encodes a batch of reference latents on `tape`. Returns the token matrix
    /// `[K * tokens_per_video, d_model]` with its spans and, in training mode,
    /// the batch statistics used.
    pub fn encode_on_tape(
        &self,
        tape: &Tape,
        refs: &[(&str, &LatentVideo)],
        mode: Mode,
    ) -> Result<(Var, Vec<Span>, BatchStats)> {
        if refs.is_empty() {
            return Err(Error::invalid("no reference videos to encode"));
        }
        for (_, z) in refs {
            if z.codec_fingerprint != self.codec_fingerprint {
                return Err(Error::FingerprintMismatch {
                    expected: self.codec_fingerprint.clone(),
                    found: z.codec_fingerprint.clone(),
                });
            }
            if z.shape() != self.latent_shape {
                return Err(Error::ShapeMismatch {
                    expected: self.latent_shape.to_vec(),
                    actual: z.shape().to_vec(),
                });
            }
        }
        let k = refs.len();
        let views: Vec<_> = refs.iter().map(|(_, z)| z.data.view()).collect();
        let batch = ndarray::stack(ndarray::Axis(0), &views).expect("equal latent shapes");
        let x = tape.constant(batch.into_dyn());

        let mut stats = BatchStats::new();
        let branches = self.cfg.branches();
        let mut shared_conv0 = None;
        let mut per_branch = Vec::with_capacity(branches.len());
        for &branch in &branches {
            let c0 = if self.cfg.branch_weight_sharing {
                match shared_conv0 {
                    Some(c) => c,
                    None => {
                        let c = self.conv(tape, x, 0, branch)?;
                        shared_conv0 = Some(c);
                        c
                    }
                }
            } else {
                self.conv(tape, x, 0, branch)?
            };
            let b0 = self.block_tail(tape, c0, 0, branch, mode, &mut stats)?;
            let b1 = self.conv_block_forward(tape, b0, 1, branch, mode, &mut stats)?;
            per_branch.push(self.tokenize(tape, b1, branch)?);
        }

        let t = self.cfg.tokens_per_branch;
        let mut pieces = Vec::with_capacity(k * branches.len());
        let mut spans = Vec::with_capacity(k * branches.len());
        let mut offset = 0;
        for (v, (id, _)) in refs.iter().enumerate() {
            for (bi, &branch) in branches.iter().enumerate() {
                let tokens = tape.slice(per_branch[bi], 0, v * t, t);
                let tokens = if self.cfg.attention_mode == AttentionMode::None {
                    tokens
                } else {
                    self.attend(tape, tokens, branch)?
                };
                pieces.push(tokens);
                spans.push(Span {
                    video_id: id.to_string(),
                    start: offset,
                    length: t,
                    branch,
                });
                offset += t;
            }
        }
        Ok((tape.concat(&pieces, 0), spans, stats))
    }

    /// Inference-mode encoding of a single reference video.
    pub fn encode_reference(&self, video_id: &str, z: &LatentVideo) -> Result<MemoryTokens> {
        self.encode_many(&[(video_id, z)])
    }

    /// Inference-mode encoding of several references, concatenated in order.
    pub fn encode_many(&self, refs: &[(&str, &LatentVideo)]) -> Result<MemoryTokens> {
        let tape = Tape::new();
        let (tokens, spans, _) = self.encode_on_tape(&tape, refs, Mode::Eval)?;
        let value = tape.value(tokens);
        if value.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("memory tokens".into()));
        }
        Ok(MemoryTokens {
            tokens: (*value).clone().into_dimensionality::<Ix2>().expect("rank 2"),
            spans,
            encoder_version: self.version.clone(),
        })
    }

    pub fn load_state(
        &mut self,
        values: &BTreeMap<String, ArrayD<f64>>,
        running: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
    ) -> Result<()> {
        self.params.load_values(values)?;
        self.set_running_stats(running)
    }
}

fn param_keys(cfg: &EncoderConfig) -> Vec<&'static str> {
    if cfg.branch_weight_sharing {
        vec!["shared"]
    } else {
        cfg.branches().iter().map(|b| b.as_str()).collect()
    }
}

fn attention_keys(cfg: &EncoderConfig) -> Vec<&'static str> {
    match cfg.attention_mode {
        AttentionMode::None => vec![],
        AttentionMode::Shared => vec!["shared"],
        AttentionMode::Separate => cfg.branches().iter().map(|b| b.as_str()).collect(),
    }
}
