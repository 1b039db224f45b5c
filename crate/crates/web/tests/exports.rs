//! The exported functions behave on the native target as they will in wasm.

use ditmem_web::*;

#[test]
fn mask_slice_has_dc_pass_band() {
    let m = mask_slice(4, 8, 8, 0, "low", 0.25, 0.2).unwrap();
    assert_eq!(m.len(), 64);
    assert_eq!(m[0], 1.0);
    assert_eq!(m[4 * 8 + 4], 0.2);
    let hi = mask_slice(4, 8, 8, 0, "high", 0.25, 0.2).unwrap();
    assert!(m.iter().zip(&hi).all(|(a, b)| a + b == 1.2));
}

#[test]
fn low_and_high_parts_sum_to_scaled_signal() {
    let x = demo_signal(64);
    let lo = filter_signal(&x, "low", 0.25, 0.0, false).unwrap();
    let hi = filter_signal(&x, "high", 0.25, 0.0, false).unwrap();
    for ((a, b), v) in lo.iter().zip(&hi).zip(&x) {
        assert!((a + b - v).abs() < 1e-12);
    }
}

#[test]
fn schedule_flags_first_two_thirds() {
    let s = steering_schedule(1000, 30, 2.0 / 3.0).unwrap();
    assert_eq!(s.len(), 60);
    let flagged = s.chunks(2).filter(|p| p[1] == 1.0).count();
    assert_eq!(flagged, 20);
    assert_eq!(s[0], 966.0);
}

#[test]
fn retrieval_ranks_exact_caption_first() {
    let q = corpus_caption(3);
    let top = retrieve(&q, 50, 5).unwrap();
    let first: f64 = top.lines().next().unwrap().split(':').nth(1).unwrap().parse().unwrap();
    assert!((first - 1.0).abs() < 1e-4);
    assert_eq!(top.lines().count(), 5);
    assert!(mask_slice(2, 2, 2, 5, "low", 0.25, 0.2).is_err());
}
