use spoofcl::backbone::{Backbone, BackboneConfig};
use spoofcl::checkpoint::Checkpoint;
use spoofcl::config::RunConfig;
use spoofcl::frontend::FrontendConfig;
use spoofcl::metrics::{compute_eer, export_embeddings, read_scores, write_scores};
use spoofcl::stage1::run_stage1;
use spoofcl::stage2::{run_stage2, Classifier};
use spoofcl::synthetic::{make_synthetic, SyntheticSpec};

fn tiny() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.frontend = FrontendConfig {
        target_samples: 1600,
        n_mels: 8,
        n_frames: 6,
        ..FrontendConfig::default()
    };
    cfg.backbone = BackboneConfig {
        n_mels: 8,
        n_frames: 6,
        embed_dim: 8,
        num_blocks: 1,
        num_heads: 2,
        mlp_hidden: 16,
        projection_dim: 6,
        ..BackboneConfig::default()
    };
    cfg.stage1.epochs = 2;
    cfg.stage1.batch_size = 4;
    cfg.stage2.epochs = 2;
    cfg.stage2.batch_size = 4;
    cfg.stage2.hidden_dim = 4;
    cfg
}

#[test]
fn two_stage_pipeline_through_the_public_api() {
    let dir = tempfile::tempdir().unwrap();
    let spec = SyntheticSpec {
        n_train: 12,
        n_val: 4,
        n_test: 6,
        min_seconds: 0.1,
        max_seconds: 0.15,
        ..SyntheticSpec::default()
    };
    let paths = make_synthetic(&dir.path().join("data"), &spec).unwrap();
    let cfg = tiny();
    let train = cfg.load_dataset(&paths.train).unwrap();
    let val = cfg.load_dataset(&paths.val).unwrap();
    let test = cfg.load_dataset(&paths.test).unwrap();

    let s1 = run_stage1(&cfg, &train, &val, &dir.path().join("s1")).unwrap();
    assert_eq!(s1.checkpoints.len(), 2);
    assert!(s1.val_losses.iter().all(|v| v.is_finite()));

    // save -> load -> save is byte-identical
    let bytes = std::fs::read(&s1.best_checkpoint).unwrap();
    let again = Checkpoint::from_bytes(&bytes).unwrap().to_bytes().unwrap();
    assert_eq!(bytes, again);

    let s2 = run_stage2(&cfg, Some(&s1.best_checkpoint), &train, &val, &dir.path().join("s2")).unwrap();
    assert_eq!(s2.backbone_hash_before, s2.backbone_hash_after);

    let model = Classifier::load(&s2.best_checkpoint).unwrap();
    let features = cfg.feature_pipeline().unwrap();
    let scores = model.score(&test, &features).unwrap();
    let score_path = dir.path().join("scores.tsv");
    write_scores(&scores, &score_path).unwrap();
    assert_eq!(read_scores(&score_path).unwrap(), scores);
    let eer = compute_eer(&scores).unwrap();
    assert!((0.0..=1.0).contains(&eer));

    let store = Checkpoint::load(&s1.best_checkpoint).unwrap().to_store().unwrap();
    let bb = Backbone::bind(&cfg.backbone, &store).unwrap();
    let csv_path = dir.path().join("emb/e.csv");
    export_embeddings(&bb, &store, &test, &features, &csv_path).unwrap();
    let first = std::fs::read(&csv_path).unwrap();
    export_embeddings(&bb, &store, &test, &features, &csv_path).unwrap();
    assert_eq!(first, std::fs::read(&csv_path).unwrap());
    let text = String::from_utf8(first).unwrap();
    assert_eq!(text.lines().count(), test.len() + 1);
    assert!(text.lines().all(|l| l.split(',').count() == 2 + cfg.backbone.embed_dim));
}

#[test]
fn vanilla_mode_trains_the_encoder_from_scratch() {
    let dir = tempfile::tempdir().unwrap();
    let spec = SyntheticSpec {
        n_train: 8,
        n_val: 4,
        n_test: 4,
        min_seconds: 0.1,
        max_seconds: 0.15,
        ..SyntheticSpec::default()
    };
    let paths = make_synthetic(&dir.path().join("data"), &spec).unwrap();
    let mut cfg = tiny();
    cfg.stage2.freeze_backbone = false;
    cfg.stage2.epochs = 1;
    let train = cfg.load_dataset(&paths.train).unwrap();
    let val = cfg.load_dataset(&paths.val).unwrap();
    let out = run_stage2(&cfg, None, &train, &val, &dir.path().join("s2")).unwrap();
    assert_ne!(out.backbone_hash_before, out.backbone_hash_after);
}
