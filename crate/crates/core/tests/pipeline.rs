//! End-to-end behavior of the orchestration layer on a tiny configuration.

use ditmem::config::RunConfig;
use ditmem::diffusion::sample;
use ditmem::pipeline::*;
use ditmem::steering::{filter_and_normalize, make_injection_hook};

fn tiny() -> RunConfig {
    RunConfig::load(
        None,
        &[
            "video.frames=8".into(),
            "video.height=32".into(),
            "video.width=32".into(),
            "backbone.d_model=32".into(),
            "backbone.n_heads=2".into(),
            "backbone.n_blocks=2".into(),
            "encoder.d_model=32".into(),
            "encoder.n_heads=2".into(),
            "encoder.block_channels=[4, 8]".into(),
            "encoder.tokens_per_branch=2".into(),
            "diffusion.sample_steps=6".into(),
            "training.dataset_size=6".into(),
            "training.batch_size=2".into(),
            "training.freeze_check_every=2".into(),
            "retrieval.top_k=3".into(),
        ],
    )
    .unwrap()
}

fn setup(dir: &std::path::Path) -> (Model, ditmem::retrieval_bank::MemoryBank) {
    let model = Model::new(&tiny()).unwrap();
    let bank = build_synthetic_bank(&model, &dir.join("bank"), 12).unwrap();
    (model, bank)
}

#[test]
fn resumed_training_matches_uninterrupted_run() {
    let dir = tempfile::tempdir().unwrap();
    let (model, bank) = setup(dir.path());
    let train = synthetic_dataset(&model, &bank, "train", 6).unwrap();
    let refs = load_refs(&bank, &train).unwrap();

    let mut straight = model.clone();
    let mut s1 = TrainState::default();
    let log_a = train_loop(&mut straight, &train, &refs, &mut s1, 6, &mut |_| {}).unwrap();

    let mut first = model.clone();
    let mut s2 = TrainState::default();
    let mut log_b = train_loop(&mut first, &train, &refs, &mut s2, 3, &mut |_| {}).unwrap();
    save_checkpoint(&first, &s2, &dir.path().join("ckpt")).unwrap();

    let mut resumed = Model::new(&tiny()).unwrap();
    let mut s3 = load_checkpoint(&mut resumed, &dir.path().join("ckpt")).unwrap();
    assert_eq!(s3, s2);
    log_b.extend(train_loop(&mut resumed, &train, &refs, &mut s3, 6, &mut |_| {}).unwrap());

    assert_eq!(log_a, log_b);
    assert_eq!(straight.encoder.params(), resumed.encoder.params());
    assert_eq!(straight.encoder.running_stats(), resumed.encoder.running_stats());
    assert_eq!(straight.encoder.encoder_version(), resumed.encoder.encoder_version());
    assert_eq!(s1, s3);
}

#[test]
fn checkpoint_from_other_encoder_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let model = Model::new(&tiny()).unwrap();
    save_checkpoint(&model, &TrainState::default(), dir.path()).unwrap();
    let mut cfg = tiny();
    cfg.encoder.tokens_per_branch = 3;
    let mut other = Model::new(&cfg).unwrap();
    assert!(load_checkpoint(&mut other, dir.path()).is_err());
}

#[test]
fn generation_is_deterministic_and_lists_k_ids() {
    let dir = tempfile::tempdir().unwrap();
    let (model, bank) = setup(dir.path());
    let prompt = "a red ball moves left on a dark background";
    let a = generate(&model, Some(&bank), prompt, 7, None).unwrap();
    let b = generate(&model, Some(&bank), prompt, 7, None).unwrap();
    assert_eq!(a.z0, b.z0);
    assert_eq!(a.retrieved.len(), 3);
    let scores: Vec<f64> = a.retrieved.iter().map(|h| h.score).collect();
    assert!(scores.windows(2).all(|w| w[0] >= w[1]));
    assert_eq!(a.memory_tokens, 3 * model.encoder.config().tokens_per_video());
    assert_eq!(a.cache_hits, 0);
}

#[test]
fn cached_tokens_serve_generation_without_changing_it() {
    let dir = tempfile::tempdir().unwrap();
    let (model, mut bank) = setup(dir.path());
    let prompt = "a blue square bounces on a gray background";
    let live = generate(&model, Some(&bank), prompt, 3, None).unwrap();
    assert_eq!(bank.precompute_tokens(&model.encoder).unwrap(), 12);
    assert_eq!(bank.precompute_tokens(&model.encoder).unwrap(), 0);
    let cached = generate(&model, Some(&bank), prompt, 3, None).unwrap();
    assert_eq!(cached.cache_hits, 3);
    assert_eq!(cached.z0, live.z0);
}

#[test]
fn no_memory_equals_plain_backbone_sampling() {
    let model = Model::new(&tiny()).unwrap();
    let prompt = "a green ring moves up on a dark background";
    let g = generate(&model, None, prompt, 11, None).unwrap();
    let plan = model.plan().unwrap();
    let plain = sample(&model.backbone, &model.sched, &plan, &model.cond(prompt), model.latent_shape, 11, false).unwrap();
    assert_eq!(g.z0.data, plain.z0);
}

#[test]
fn zero_alpha_steering_is_inert() {
    let model = Model::new(&tiny()).unwrap();
    let pos = vec!["a ball falls down under gravity".to_string(), "a ball bounces".to_string()];
    let neg = vec!["a ball".to_string(), "a ball".to_string()];
    let raw = extract_steering(&model, &pos, &neg).unwrap();
    assert!(!raw.is_zero());
    let (table, _) = filter_and_normalize(&raw, ditmem::freq_filter::Band::Low, 0.25, 0.2).unwrap();
    let hook = make_injection_hook(&table, 0.0, 32, None).unwrap();
    let base = generate(&model, None, "a ball", 5, None).unwrap();
    let steered = generate(&model, None, "a ball", 5, Some(&hook)).unwrap();
    assert_eq!(base.z0, steered.z0);
    assert_eq!(steered.injected_steps.len(), 4);
    let hook = make_injection_hook(&table, 1.0, 32, None).unwrap();
    assert_ne!(generate(&model, None, "a ball", 5, Some(&hook)).unwrap().z0, base.z0);
}

#[test]
fn identical_sides_extract_a_zero_table() {
    let model = Model::new(&tiny()).unwrap();
    let p = vec!["a ball".to_string()];
    assert!(extract_steering(&model, &p, &p).unwrap().is_zero());
    assert!(extract_steering(&model, &p, &[]).is_err());
}
