use proptest::prelude::*;
use rand::Rng;

use super::*;
use crate::stage1::tests::{memory_dataset, tiny_config, tiny_spec};
use crate::synthetic::make_synthetic;

fn head_fixture(embed: usize, seed: u64) -> (ClassifierHead, ParamStore<f32>, Stage2Config) {
    let cfg = Stage2Config {
        hidden_dim: 5,
        init_std: 0.5,
        ..Stage2Config::default()
    };
    let mut store = ParamStore::new();
    let head = ClassifierHead::init(embed, &cfg, &mut store, &mut RngStream::new(seed, 0).rng()).unwrap();
    (head, store, cfg)
}

fn random_reps(n: usize, d: usize, seed: u64) -> Vec<Vec<f32>> {
    let mut rng = RngStream::new(seed, 3).rng();
    (0..n).map(|_| (0..d).map(|_| rng.random_range(-2.0f32..2.0)).collect()).collect()
}

#[test]
fn weighted_ce_examples() {
    assert_eq!(weighted_ce([0.0, 1.0], Label::Spoof, [0.9, 0.1]), 0.0);
    assert!((weighted_ce([0.5, 0.5], Label::Bonafide, [1.0, 1.0]) - 2f64.ln()).abs() < 1e-12);
    assert!((weighted_ce([0.25, 0.75], Label::Spoof, [9.0, 1.0]) - 0.2877).abs() < 1e-4);
    assert!(weighted_ce([0.0, 1.0], Label::Bonafide, [1.0, 1.0]).is_finite());
}

#[test]
fn defaults_and_validation() {
    let c = Stage2Config::default();
    assert_eq!(c.class_weights, [0.9, 0.1]);
    assert!(c.freeze_backbone && !c.shuffle);
    assert!((c.lr_at(12) - 9.025e-5).abs() < 1e-15);
    assert!(c.validate().is_ok());
    let bad = Stage2Config {
        class_weights: [0.0, 1.0],
        ..c.clone()
    };
    assert!(bad.validate().is_err());
    let bad = Stage2Config { batch_size: 1, ..c };
    assert!(bad.validate().is_err());
}

#[test]
fn probabilities_are_distributions_and_deterministic() {
    let (head, store, _) = head_fixture(6, 1);
    let reps = random_reps(7, 6, 1);
    let p = head.probabilities(&store, &reps).unwrap();
    for row in &p {
        assert!((row[0] + row[1] - 1.0).abs() < 1e-6);
        assert!(row.iter().all(|v| *v >= 0.0));
    }
    assert_eq!(p, head.probabilities(&store, &reps).unwrap());
    // eval mode treats rows independently
    let single = head.probabilities(&store, &reps[2..3]).unwrap();
    assert_eq!(single[0], p[2]);
}

#[test]
fn zero_head_gives_even_odds() {
    let (head, mut store, _) = head_fixture(6, 2);
    for id in head.params() {
        let t = store.value_mut(id);
        t.data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
    for p in head.probabilities(&store, &random_reps(3, 6, 2)).unwrap() {
        assert_eq!(p, [0.5, 0.5]);
    }
}

#[test]
fn batch_loss_matches_the_mean_weighted_ce() {
    let (head, store, cfg) = head_fixture(4, 3);
    let reps = random_reps(6, 4, 3);
    let labels = [Label::Bonafide, Label::Spoof, Label::Spoof, Label::Bonafide, Label::Spoof, Label::Spoof];
    let mut g = Graph::new(&store);
    let x = g.input(Tensor::new(vec![6, 4], reps.concat()).unwrap()).unwrap();
    let (p, _) = head.forward(&mut g, x, true).unwrap();
    let probs: Vec<[f64; 2]> = g.value(p).chunks(2).map(|r| [r[0] as f64, r[1] as f64]).collect();
    let l = batch_loss(&mut g, p, &labels, cfg.class_weights).unwrap();
    let total: f64 = labels.iter().map(|l| cfg.class_weights[l.index()]).sum();
    let oracle: f64 = probs
        .iter()
        .zip(&labels)
        .map(|(p, l)| weighted_ce(*p, *l, cfg.class_weights))
        .sum::<f64>()
        / total;
    assert!((g.scalar(l) as f64 - oracle).abs() < 1e-5);
}

#[test]
fn batches_never_end_with_a_single_row() {
    assert_eq!(batch_ranges(10, 4), vec![0..4, 4..8, 8..10]);
    assert_eq!(batch_ranges(9, 4), vec![0..4, 4..9]);
    assert_eq!(batch_ranges(3, 64), vec![0..3]);
    for n in 2..50 {
        for b in 2..10 {
            let r = batch_ranges(n, b);
            assert_eq!(r.first().unwrap().start, 0);
            assert_eq!(r.last().unwrap().end, n);
            assert!(r.windows(2).all(|w| w[0].end == w[1].start));
            assert!(r.iter().all(|x| x.len() >= 2));
        }
    }
}

#[test]
fn running_statistics_follow_the_momentum() {
    let (_, mut store, _) = head_fixture(3, 4);
    let stats = crate::autodiff::BatchStats {
        mean: vec![1.0f32; 5],
        var: vec![3.0f32; 5],
    };
    ClassifierHead::update_running(&mut store, &stats, 0.1).unwrap();
    assert!(store.buffer(RUNNING_MEAN).unwrap().data().iter().all(|v| (v - 0.1).abs() < 1e-7));
    assert!(store.buffer(RUNNING_VAR).unwrap().data().iter().all(|v| (v - 1.2).abs() < 1e-6));
}

#[test]
fn unfrozen_step_reaches_the_encoder() {
    let cfg = tiny_config();
    let s2 = Stage2Config {
        freeze_backbone: false,
        hidden_dim: 4,
        ..Stage2Config::default()
    };
    let mut store = ParamStore::new();
    let bb = Backbone::init(&cfg.backbone, &mut store, &mut RngStream::new(0, 0).rng()).unwrap();
    let head = ClassifierHead::init(cfg.backbone.embed_dim, &s2, &mut store, &mut RngStream::new(0, 1).rng()).unwrap();
    let data = memory_dataset(
        &[(Label::Bonafide, None), (Label::Spoof, Some(crate::manifest::Subtype::Tts)), (Label::Bonafide, None)],
        1600,
    );
    let features = cfg.feature_pipeline().unwrap();
    let specs: Vec<_> = data.waves.iter().map(|w| features.plain(w).unwrap()).collect();
    let labels: Vec<Label> = data.entries.iter().map(|e| e.label).collect();
    let (grads, loss, _) = head_step(&bb, &head, &store, &specs, &labels, &s2).unwrap();
    assert!(loss.is_finite());
    let enc = bb.encoder_params();
    assert!(enc.iter().any(|id| grads.param(*id).is_some_and(|g| g.iter().any(|v| *v != 0.0))));

    let frozen = Stage2Config {
        freeze_backbone: true,
        ..s2
    };
    let (grads, _, _) = head_step(&bb, &head, &store, &specs, &labels, &frozen).unwrap();
    assert!(enc.iter().all(|id| grads.param(*id).is_none()));
    assert!(head.params().iter().all(|id| grads.param(*id).is_some()));
}

#[test]
fn frozen_run_keeps_the_backbone_and_reloads() {
    let dir = tempfile::tempdir().unwrap();
    let paths = make_synthetic(&dir.path().join("data"), &tiny_spec()).unwrap();
    let mut cfg = tiny_config();
    cfg.stage2.epochs = 2;
    let train = cfg.load_dataset(&paths.train).unwrap();
    let val = cfg.load_dataset(&paths.val).unwrap();
    let s1 = crate::stage1::run_stage1(&cfg, &train, &val, &dir.path().join("s1")).unwrap();
    let out = run_stage2(&cfg, Some(&s1.best_checkpoint), &train, &val, &dir.path().join("s2")).unwrap();
    assert_eq!(out.backbone_hash_before, out.backbone_hash_after);
    assert_eq!(out.checkpoints.len(), 2);
    assert_eq!(out.best_epoch, select_best(&out.val_eers).unwrap() + 1);
    let stage1_store = Checkpoint::load(&s1.best_checkpoint).unwrap().to_store().unwrap();
    assert_eq!(params_hash(&stage1_store, BACKBONE_PREFIX), out.backbone_hash_after);

    let model = Classifier::load(&out.best_checkpoint).unwrap();
    let test = cfg.load_dataset(&paths.test).unwrap();
    let scores = model.score(&test, &cfg.feature_pipeline().unwrap()).unwrap();
    assert_eq!(scores.len(), test.len());
    assert!(scores.iter().all(|s| (0.0..=1.0).contains(&s.score)));
    assert_eq!(scores, model.score(&test, &cfg.feature_pipeline().unwrap()).unwrap());

    let log = std::fs::read_to_string(&out.log_path).unwrap();
    assert!(log.starts_with("epoch\tlr\ttrain_loss\tval_eer\n"));
    assert_eq!(log.lines().count(), 3);
}

#[test]
fn stage1_checkpoint_is_not_a_classifier() {
    let dir = tempfile::tempdir().unwrap();
    let paths = make_synthetic(&dir.path().join("data"), &tiny_spec()).unwrap();
    let cfg = tiny_config();
    let train = cfg.load_dataset(&paths.train).unwrap();
    let val = cfg.load_dataset(&paths.val).unwrap();
    let s1 = crate::stage1::run_stage1(&cfg, &train, &val, &dir.path().join("s1")).unwrap();
    assert!(matches!(Classifier::load(&s1.best_checkpoint), Err(Error::Checkpoint(_))));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn relabeling_with_swapped_weights_keeps_the_loss(p in 0.0f64..1.0, w0 in 0.01f64..10.0, w1 in 0.01f64..10.0, spoof in any::<bool>()) {
        let label = if spoof { Label::Spoof } else { Label::Bonafide };
        let a = weighted_ce([1.0 - p, p], label, [w0, w1]);
        let b = weighted_ce([p, 1.0 - p], label.other(), [w1, w0]);
        prop_assert_eq!(a, b);
    }

    #[test]
    fn probabilities_sum_to_one(seed in any::<u64>()) {
        let (head, store, _) = head_fixture(4, seed);
        for row in head.probabilities(&store, &random_reps(3, 4, seed)).unwrap() {
            prop_assert!((row[0] + row[1] - 1.0).abs() < 1e-6);
        }
    }
}
