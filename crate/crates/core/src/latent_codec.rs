//! Frozen toy video codec: pixel videos `[3, F, H, W]` to latents `[C, F/2, H/8, W/8]`.
//!
//! `conv` mode is a seeded, never-trained patch autoencoder (a strided conv
//! with kernel = stride, a tanh hidden layer, and a linear read-out). `identity`
//! mode is the bare space-to-channel rearrangement, so decoding inverts
//! encoding exactly.

use ndarray::{Array2, ArrayD, Axis, IxDyn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hashing::Fingerprinter;
use crate::params::ParamStore;
use crate::rng::stream;

pub const TEMPORAL_FACTOR: usize = 2;
pub const SPATIAL_FACTOR: usize = 8;
pub const PIXEL_CHANNELS: usize = 3;
const PATCH: usize = PIXEL_CHANNELS * TEMPORAL_FACTOR * SPATIAL_FACTOR * SPATIAL_FACTOR;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum CodecMode {
    #[default]
    Conv,
    Identity,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CodecConfig {
    pub mode: CodecMode,
    pub seed: u64,
    /// Hidden width of the conv codec.
    pub channels: usize,
    pub latent_channels: usize,
    /// Multiplier applied to latents after encoding (divided out before decoding).
    pub latent_scale: f64,
}

impl Default for CodecConfig {
    fn default() -> Self {
        Self {
            mode: CodecMode::Conv,
            seed: 7,
            channels: 64,
            latent_channels: 4,
            latent_scale: 2.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PixelVideo {
    pub data: ArrayD<f64>,
    pub frame_rate: f64,
}

impl PixelVideo {
    pub fn new(data: ArrayD<f64>, frame_rate: f64) -> Result<Self> {
        let s = data.shape();
        if s.len() != 4 || s[0] != PIXEL_CHANNELS {
            return Err(Error::invalid(format!("pixel video must be [3, F, H, W], got {s:?}")));
        }
        if data.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::invalid("pixel values must lie in [0, 1]"));
        }
        Ok(Self { data, frame_rate })
    }

    pub fn frames(&self) -> usize {
        self.data.shape()[1]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LatentVideo {
    pub data: ArrayD<f64>,
    pub codec_fingerprint: String,
}

impl LatentVideo {
    pub fn shape(&self) -> &[usize] {
        self.data.shape()
    }
}

#[derive(Clone, Debug)]
pub struct LatentCodec {
    cfg: CodecConfig,
    params: ParamStore,
    fingerprint: String,
}

impl LatentCodec {
    pub fn new(cfg: CodecConfig) -> Result<Self> {
        if cfg.mode == CodecMode::Conv && (cfg.channels == 0 || cfg.latent_channels == 0) {
            return Err(Error::Config("codec widths must be positive".into()));
        }
        if !(cfg.latent_scale.is_finite() && cfg.latent_scale > 0.0) {
            return Err(Error::Config("codec latent_scale must be positive".into()));
        }
        let mut params = ParamStore::new();
        if cfg.mode == CodecMode::Conv {
            let mut rng = stream(cfg.seed, "codec", 0);
            let h = cfg.channels;
            let c = cfg.latent_channels;
            params.init_normal(&mut rng, "codec.enc1.w", &[PATCH, h], 2.0 / (PATCH as f64).sqrt(), false);
            params.init_const("codec.enc1.b", &[h], 0.0, false);
            params.init_normal(&mut rng, "codec.enc2.w", &[h, c], 1.0 / (h as f64).sqrt(), false);
            params.init_normal(&mut rng, "codec.dec1.w", &[c, h], 1.0 / (c as f64).sqrt(), false);
            params.init_const("codec.dec1.b", &[h], 0.0, false);
            params.init_normal(&mut rng, "codec.dec2.w", &[h, PATCH], 0.5 / (h as f64).sqrt(), false);
        }
        let mut codec = Self {
            cfg,
            params,
            fingerprint: String::new(),
        };
        codec.fingerprint = codec.compute_fingerprint();
        Ok(codec)
    }

    pub fn config(&self) -> &CodecConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    /// Mutable access is for tests that verify fingerprint sensitivity.
    pub fn params_mut_for_test(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn refresh_fingerprint(&mut self) {
        self.fingerprint = self.compute_fingerprint();
    }

    pub fn latent_channels(&self) -> usize {
        match self.cfg.mode {
            CodecMode::Conv => self.cfg.latent_channels,
            CodecMode::Identity => PATCH,
        }
    }

    pub fn codec_fingerprint(&self) -> &str {
        &self.fingerprint
    }

    fn compute_fingerprint(&self) -> String {
        let mut fp = Fingerprinter::new();
        fp.str("latent-codec/1")
            .str(match self.cfg.mode {
                CodecMode::Conv => "conv",
                CodecMode::Identity => "identity",
            })
            .u64(self.cfg.seed)
            .u64(self.cfg.channels as u64)
            .u64(self.cfg.latent_channels as u64)
            .f64s(&[self.cfg.latent_scale])
            .shape(&[TEMPORAL_FACTOR, SPATIAL_FACTOR]);
        self.params.fingerprint_into(&mut fp);
        fp.hex64()
    }

    pub fn latent_shape(&self, pixel_shape: &[usize]) -> Result<[usize; 4]> {
        if pixel_shape.len() != 4 || pixel_shape[0] != PIXEL_CHANNELS {
            return Err(Error::invalid(format!("expected [3, F, H, W], got {pixel_shape:?}")));
        }
        let (f, h, w) = (pixel_shape[1], pixel_shape[2], pixel_shape[3]);
        if f == 0 || h == 0 || w == 0 || f % TEMPORAL_FACTOR != 0 || h % SPATIAL_FACTOR != 0 || w % SPATIAL_FACTOR != 0 {
            return Err(Error::invalid(format!(
                "video dims {:?} not divisible by ({TEMPORAL_FACTOR}, {SPATIAL_FACTOR}, {SPATIAL_FACTOR})",
                &pixel_shape[1..]
            )));
        }
        Ok([
            self.latent_channels(),
            f / TEMPORAL_FACTOR,
            h / SPATIAL_FACTOR,
            w / SPATIAL_FACTOR,
        ])
    }

    pub fn encode(&self, v: &PixelVideo) -> Result<LatentVideo> {
        let [_, d, h, w] = self.latent_shape(v.data.shape())?;
        let patches = space_to_depth(&v.data, d, h, w);
        let data = match self.cfg.mode {
            CodecMode::Identity => patches,
            CodecMode::Conv => {
                // [PATCH, positions] -> [positions, PATCH]
                let p = to_rows(&patches);
                let centered = p.mapv(|x| x - 0.5);
                let mut hid = centered.dot(&self.mat("codec.enc1.w"));
                hid += &self.params.value("codec.enc1.b").view().into_dimensionality::<ndarray::Ix1>().expect("bias");
                hid.mapv_inplace(f64::tanh);
                let z = hid.dot(&self.mat("codec.enc2.w")).mapv(|x| x * self.cfg.latent_scale);
                from_rows(&z, d, h, w)
            }
        };
        Ok(LatentVideo {
            data,
            codec_fingerprint: self.fingerprint.clone(),
        })
    }

    pub fn decode(&self, z: &LatentVideo) -> Result<PixelVideo> {
        if z.codec_fingerprint != self.fingerprint {
            return Err(Error::FingerprintMismatch {
                expected: self.fingerprint.clone(),
                found: z.codec_fingerprint.clone(),
            });
        }
        let s = z.data.shape();
        if s.len() != 4 || s[0] != self.latent_channels() {
            return Err(Error::ShapeMismatch {
                expected: vec![self.latent_channels(), 0, 0, 0],
                actual: s.to_vec(),
            });
        }
        let (d, h, w) = (s[1], s[2], s[3]);
        let patches = match self.cfg.mode {
            CodecMode::Identity => z.data.clone(),
            CodecMode::Conv => {
                let zr = to_rows(&z.data).mapv(|x| x / self.cfg.latent_scale);
                let mut hid = zr.dot(&self.mat("codec.dec1.w"));
                hid += &self.params.value("codec.dec1.b").view().into_dimensionality::<ndarray::Ix1>().expect("bias");
                hid.mapv_inplace(f64::tanh);
                let p = hid.dot(&self.mat("codec.dec2.w")).mapv(|x| x + 0.5);
                from_rows(&p, d, h, w)
            }
        };
        let mut video = depth_to_space(&patches, d, h, w);
        video.mapv_inplace(|x| x.clamp(0.0, 1.0));
        Ok(PixelVideo {
            data: video,
            frame_rate: 8.0,
        })
    }

    fn mat(&self, name: &str) -> ndarray::ArrayView2<'_, f64> {
        self.params
            .value(name)
            .view()
            .into_dimensionality()
            .expect("rank-2 weight")
    }
}

fn to_rows(t: &ArrayD<f64>) -> Array2<f64> {
    let c = t.shape()[0];
    let n = t.len() / c;
    t.as_standard_layout()
        .into_owned()
        .into_shape_with_order((c, n))
        .expect("flatten")
        .reversed_axes()
        .as_standard_layout()
        .into_owned()
}

fn from_rows(rows: &Array2<f64>, d: usize, h: usize, w: usize) -> ArrayD<f64> {
    let c = rows.ncols();
    rows.t()
        .as_standard_layout()
        .into_owned()
        .into_shape_with_order(IxDyn(&[c, d, h, w]))
        .expect("unflatten")
}

/// `[3, F, H, W]` to `[3*2*8*8, F/2, H/8, W/8]` with channel order `(c, dt, dy, dx)`.
pub fn space_to_depth(v: &ArrayD<f64>, d: usize, h: usize, w: usize) -> ArrayD<f64> {
    let (tf, sf) = (TEMPORAL_FACTOR, SPATIAL_FACTOR);
    let r = v
        .as_standard_layout()
        .into_owned()
        .into_shape_with_order(IxDyn(&[PIXEL_CHANNELS, d, tf, h, sf, w, sf]))
        .expect("split axes");
    r.permuted_axes(IxDyn(&[0, 2, 4, 6, 1, 3, 5]))
        .as_standard_layout()
        .into_owned()
        .into_shape_with_order(IxDyn(&[PATCH, d, h, w]))
        .expect("merge axes")
}

pub fn depth_to_space(z: &ArrayD<f64>, d: usize, h: usize, w: usize) -> ArrayD<f64> {
    let (tf, sf) = (TEMPORAL_FACTOR, SPATIAL_FACTOR);
    let r = z
        .as_standard_layout()
        .into_owned()
        .into_shape_with_order(IxDyn(&[PIXEL_CHANNELS, tf, sf, sf, d, h, w]))
        .expect("split axes");
    r.permuted_axes(IxDyn(&[0, 4, 1, 5, 2, 6, 3]))
        .as_standard_layout()
        .into_owned()
        .into_shape_with_order(IxDyn(&[PIXEL_CHANNELS, d * tf, h * sf, w * sf]))
        .expect("merge axes")
}

/// Splits a decoded video into per-frame `[H, W, 3]` 8-bit RGB buffers.
pub fn frames_rgb8(v: &PixelVideo) -> Vec<(usize, usize, Vec<u8>)> {
    let s = v.data.shape();
    let (h, w) = (s[2], s[3]);
    (0..s[1])
        .map(|f| {
            let frame = v.data.index_axis(Axis(1), f);
            let mut buf = Vec::with_capacity(h * w * 3);
            for y in 0..h {
                for x in 0..w {
                    for c in 0..3 {
                        buf.push((frame[[c, y, x]] * 255.0).round().clamp(0.0, 255.0) as u8);
                    }
                }
            }
            (w, h, buf)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{gaussian, stream};

    fn random_video(seed: u64, shape: &[usize]) -> PixelVideo {
        let g = gaussian(&mut stream(seed, "video", 0), shape);
        PixelVideo::new(g.mapv(|x| 1.0 / (1.0 + (-x).exp())), 8.0).unwrap()
    }

    #[test]
    fn encode_shapes() {
        let codec = LatentCodec::new(CodecConfig::default()).unwrap();
        let v = random_video(1, &[3, 16, 64, 64]);
        let z = codec.encode(&v).unwrap();
        assert_eq!(z.shape(), &[4, 8, 8, 8]);
        let back = codec.decode(&z).unwrap();
        assert_eq!(back.data.shape(), &[3, 16, 64, 64]);
        assert!(back.data.iter().all(|x| (0.0..=1.0).contains(x)));
    }

    #[test]
    fn encode_is_deterministic() {
        let codec = LatentCodec::new(CodecConfig::default()).unwrap();
        let v = random_video(2, &[3, 4, 16, 16]);
        let a = codec.encode(&v).unwrap();
        let b = codec.encode(&v).unwrap();
        assert!(a.data.iter().zip(b.data.iter()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn identity_mode_round_trips_exactly() {
        let codec = LatentCodec::new(CodecConfig {
            mode: CodecMode::Identity,
            ..CodecConfig::default()
        })
        .unwrap();
        let v = random_video(3, &[3, 4, 16, 24]);
        let z = codec.encode(&v).unwrap();
        assert_eq!(z.shape(), &[384, 2, 2, 3]);
        assert_eq!(codec.decode(&z).unwrap().data, v.data);
    }

    #[test]
    fn rejects_indivisible_input() {
        let codec = LatentCodec::new(CodecConfig::default()).unwrap();
        let v = random_video(4, &[3, 3, 16, 16]);
        assert!(codec.encode(&v).is_err());
        let v = random_video(4, &[3, 4, 12, 16]);
        assert!(codec.encode(&v).is_err());
    }

    #[test]
    fn fingerprint_mismatch_rejected() {
        let a = LatentCodec::new(CodecConfig::default()).unwrap();
        let b = LatentCodec::new(CodecConfig {
            seed: 8,
            ..CodecConfig::default()
        })
        .unwrap();
        let z = a.encode(&random_video(5, &[3, 2, 8, 8])).unwrap();
        assert!(matches!(b.decode(&z), Err(Error::FingerprintMismatch { .. })));
    }

    #[test]
    fn fingerprints_differ_across_seeds() {
        let prints: std::collections::BTreeSet<String> = (0..100)
            .map(|seed| {
                LatentCodec::new(CodecConfig {
                    seed,
                    ..CodecConfig::default()
                })
                .unwrap()
                .codec_fingerprint()
                .to_string()
            })
            .collect();
        assert_eq!(prints.len(), 100);
    }

    #[test]
    fn fingerprint_tracks_single_parameter() {
        let mut codec = LatentCodec::new(CodecConfig::default()).unwrap();
        let before = codec.codec_fingerprint().to_string();
        assert_eq!(before, LatentCodec::new(CodecConfig::default()).unwrap().codec_fingerprint());
        codec.params_mut_for_test().get_mut("codec.enc2.w").unwrap().value[[3, 1]] += 1e-9;
        codec.refresh_fingerprint();
        assert_ne!(before, codec.codec_fingerprint());
    }

    #[test]
    fn codec_parameters_are_frozen() {
        let codec = LatentCodec::new(CodecConfig::default()).unwrap();
        assert!(codec.params().trainable_names().is_empty());
    }
}
