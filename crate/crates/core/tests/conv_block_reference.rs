//! A 1x1x1-kernel conv block checked against a hand-unrolled computation.
//!
//! With one channel and a 4x4x4 grid only the DC bin counts as low frequency,
//! so the residual filter reduces to closed forms in the input mean:
//! low branch `(1 + g) x + (1 - g) mean`, high branch `2 x - (1 - g) mean`.

use ditmem::autograd::Tape;
use ditmem::memory_encoder::{AttentionMode, BatchStats, Branch, EncoderConfig, MemoryEncoder, Mode, BN_EPS};
use ditmem::rng::{gaussian, stream};
use ndarray::{ArrayD, IxDyn};

fn encoder() -> MemoryEncoder {
    let cfg = EncoderConfig {
        block_channels: [1, 1],
        kernel: 1,
        pool: [2, 2, 2],
        tokens_per_branch: 1,
        d_model: 4,
        n_heads: 1,
        attention_mode: AttentionMode::None,
        ..EncoderConfig::default()
    };
    let mut enc = MemoryEncoder::new(cfg, [1, 4, 4, 4], "fp").unwrap();
    let p = enc.params_mut();
    p.get_mut("enc.shared.conv0.w").unwrap().value.fill(0.7);
    p.get_mut("enc.shared.bn0.gamma").unwrap().value.fill(1.3);
    p.get_mut("enc.shared.bn0.beta").unwrap().value.fill(-0.2);
    enc.refresh_version();
    enc
}

fn by_hand(x: &ArrayD<f64>, branch: Branch, gamma_att: f64) -> ArrayD<f64> {
    let conv: Vec<f64> = x.iter().map(|v| 0.7 * v).collect();
    let mean = conv.iter().sum::<f64>() / 64.0;
    let filtered: Vec<f64> = conv
        .iter()
        .map(|&v| match branch {
            Branch::Low => (1.0 + gamma_att) * v + (1.0 - gamma_att) * mean,
            Branch::High => 2.0 * v - (1.0 - gamma_att) * mean,
            Branch::Unfiltered => v,
        })
        .collect();
    let mu = filtered.iter().sum::<f64>() / 64.0;
    let var = filtered.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / 64.0;
    let act: Vec<f64> = filtered
        .iter()
        .map(|v| (1.3 * (v - mu) / (var + BN_EPS).sqrt() - 0.2).max(0.0))
        .collect();
    let mut out = ArrayD::zeros(IxDyn(&[1, 1, 2, 2, 2]));
    for d in 0..2 {
        for h in 0..2 {
            for w in 0..2 {
                let mut m = f64::NEG_INFINITY;
                for (a, b, c) in cube_offsets() {
                    m = m.max(act[(2 * d + a) * 16 + (2 * h + b) * 4 + (2 * w + c)]);
                }
                out[[0, 0, d, h, w]] = m;
            }
        }
    }
    out
}

fn cube_offsets() -> impl Iterator<Item = (usize, usize, usize)> {
    (0..8).map(|i| (i >> 2, (i >> 1) & 1, i & 1))
}

#[test]
fn conv_block_matches_hand_unrolled_reference() {
    let enc = encoder();
    let g = enc.config().attenuation_gamma;
    for seed in 0..5 {
        let x = gaussian(&mut stream(seed, "conv-ref", 0), &[1, 1, 4, 4, 4]);
        for branch in [Branch::Low, Branch::High, Branch::Unfiltered] {
            let tape = Tape::new();
            let xv = tape.constant(x.clone());
            let mut stats = BatchStats::new();
            let y = enc.conv_block_forward(&tape, xv, 0, branch, Mode::Train, &mut stats).unwrap();
            let expected = by_hand(&x, branch, g);
            let got = tape.value(y);
            assert_eq!(got.shape(), expected.shape());
            for (a, b) in got.iter().zip(expected.iter()) {
                assert!((a - b).abs() < 1e-12, "{branch:?}: {a} vs {b}");
            }
            assert!(stats.contains_key(&format!("bn0.{}", branch.as_str())));
        }
    }
}
