//! Helpers shared by integration test targets.
#![allow(dead_code)]

use std::collections::BTreeMap;

use ditmem::autograd::{Tape, Tensor};
use ditmem::latent_codec::LatentVideo;
use ditmem::memory_encoder::{AttentionMode, EncoderConfig, MemoryEncoder, Mode};
use ditmem::rng::{gaussian, stream, uniform_index};

pub const MICRO_LATENT: [usize; 4] = [2, 4, 8, 8];
pub const FD_STEP: f64 = 1e-5;

/// Encoder with `d_model = 8` and two tokens per branch over `[2, 4, 8, 8]`
/// latents. Normalization affine parameters are moved off identity so their
/// gradients are not degenerate.
pub fn micro_encoder(mode: AttentionMode, sharing: bool, filters: bool) -> MemoryEncoder {
    let cfg = EncoderConfig {
        block_channels: [3, 4],
        kernel: 3,
        tokens_per_branch: 2,
        d_model: 8,
        n_heads: 2,
        attention_mode: mode,
        branch_weight_sharing: sharing,
        enable_lpf: filters,
        enable_hpf: filters,
        ..EncoderConfig::default()
    };
    let mut enc = MemoryEncoder::new(cfg, MICRO_LATENT, "micro").unwrap();
    for (i, name) in enc.params().names().iter().enumerate() {
        if name.contains(".bn") || name.contains(".ln") {
            let p = enc.params_mut().get_mut(name).unwrap();
            let noise = gaussian(&mut stream(9, "perturb", i as u64), p.value.shape());
            p.value = &p.value + &(noise * 0.3);
        }
    }
    enc.refresh_version();
    enc
}

fn micro_refs() -> Vec<LatentVideo> {
    (1..=3)
        .map(|s| LatentVideo {
            data: gaussian(&mut stream(s, "grad-latent", 0), &MICRO_LATENT),
            codec_fingerprint: "micro".into(),
        })
        .collect()
}

fn weighted_loss(tape: &Tape, enc: &MemoryEncoder, refs: &[LatentVideo], weights: &Tensor) -> ditmem::autograd::Var {
    let pairs: Vec<(&str, &LatentVideo)> = vec![("a", &refs[0]), ("b", &refs[1]), ("c", &refs[2])];
    let (tokens, _, _) = enc.encode_on_tape(tape, &pairs, Mode::Train).unwrap();
    tape.sum_all(tape.mul(tokens, tape.constant(weights.clone())))
}

/// Largest relative error between reverse-mode and central-difference
/// gradients per trainable parameter tensor. `per_tensor = None` checks every
/// element, otherwise that many seeded picks.
pub fn gradient_errors(enc: &MemoryEncoder, per_tensor: Option<usize>) -> BTreeMap<String, f64> {
    let refs = micro_refs();
    let n_tokens = 3 * enc.config().tokens_per_video();
    let weights = gaussian(&mut stream(4, "grad-weights", 0), &[n_tokens, 8]);
    let tape = Tape::new();
    let l = weighted_loss(&tape, enc, &refs, &weights);
    let grads = tape.backward(l).param_grads();

    let mut probe = enc.clone();
    let mut out = BTreeMap::new();
    for name in enc.params().trainable_names() {
        let g = grads.get(&name).unwrap_or_else(|| panic!("no gradient for {name}"));
        let len = g.len();
        let picks: Vec<usize> = match per_tensor {
            Some(n) if n < len => {
                let mut rng = stream(5, &name, 0);
                (0..n).map(|_| uniform_index(&mut rng, len)).collect()
            }
            _ => (0..len).collect(),
        };
        let mut worst = 0.0f64;
        for flat in picks {
            let original = enc.params().value(&name).as_slice().unwrap()[flat];
            let mut eval_at = |v: f64| {
                probe.params_mut().get_mut(&name).unwrap().value.as_slice_mut().unwrap()[flat] = v;
                let t = Tape::new();
                let l = weighted_loss(&t, &probe, &refs, &weights);
                let v = t.value(l);
                v.iter().sum::<f64>()
            };
            let numeric = (eval_at(original + FD_STEP) - eval_at(original - FD_STEP)) / (2.0 * FD_STEP);
            eval_at(original);
            let analytic = g.as_slice().unwrap()[flat];
            let scale = analytic.abs().max(numeric.abs()).max(1e-6);
            worst = worst.max((analytic - numeric).abs() / scale);
        }
        out.insert(name, worst);
    }
    out
}
