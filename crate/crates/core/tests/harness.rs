use ovsfda_core::adaptation::AdaptConfig;
use ovsfda_core::harness::*;
use ovsfda_core::model::checkpoint::Checkpoint;
use ovsfda_core::model::{BackboneParams, ModelConfig, Vocabulary};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn small_spec() -> SyntheticDatasetSpec {
    SyntheticDatasetSpec {
        height: 32,
        width: 32,
        source_samples: 10,
        source_val_samples: 4,
        target_train_samples: 6,
        target_val_samples: 4,
        ..SyntheticDatasetSpec::default()
    }
}

/// One region per image: Voronoi boundaries cut patches at arbitrary angles
/// and bilinear upsampling of patch logits cannot follow them, which puts a
/// floor under the pixel loss that has nothing to do with fitting capacity.
#[test]
fn overfits_ten_samples() {
    let spec = SyntheticDatasetSpec {
        seeds_min: 1,
        seeds_max: 1,
        ..small_spec()
    };
    let d = generate_synthetic_domains(&spec, 11).unwrap();
    let cfg = PretrainConfig {
        epochs: 80,
        lr: 5e-4,
        batch_size: 10,
        mask_prob: 0.0,
        ..PretrainConfig::default()
    };
    let (ck, losses) = pretrain_source(&d.source, &d.spec.source_names(), &cfg).unwrap();
    assert!(ck.params.is_frozen());
    for w in losses.windows(2) {
        assert!(w[1] <= w[0], "loss rose: {losses:?}");
    }
    assert!(*losses.last().unwrap() < 0.1, "{losses:?}");
}

fn tiny_source(d: &SyntheticDomains) -> Checkpoint {
    let cfg = PretrainConfig {
        model: ModelConfig {
            d_model: 16,
            mlp_hidden: 16,
            agg_dim: 8,
            agg_hidden: 8,
            prompts: 2,
            ..ModelConfig::default()
        },
        epochs: 2,
        ..PretrainConfig::default()
    };
    pretrain_source(&d.source, &d.spec.source_names(), &cfg).unwrap().0
}

fn short() -> AdaptConfig {
    AdaptConfig {
        iterations: 3,
        tau: 0.1,
        topk: Some(4),
        ..AdaptConfig::desk()
    }
}

#[test]
fn full_width_sweep_point_equals_the_unpruned_row() {
    let d = generate_synthetic_domains(&small_spec(), 12).unwrap();
    let ck = tiny_source(&d);
    let vocab = Vocabulary::with_default_templates(d.spec.target_names(), ck.params.config()).unwrap();
    let cm = d.spec.concept_map().unwrap();
    let b = Benchmark {
        source: &ck,
        train: &d.target_train,
        val: &d.target_val,
        vocab: &vocab,
        concepts: &cm,
    };
    let n = vocab.len();
    let points = b.run_topk_sweep(&short(), &[2, n, n + 3], &[]).unwrap();
    assert_eq!(
        points.iter().map(|p| p.class_axis_width).collect::<Vec<_>>(),
        vec![2, n, n]
    );
    let (cfg, concepts) = Method::VocabAlignment.config(&short());
    assert!(concepts);
    let (_, unpruned) = b.run(&cfg, true).unwrap();
    assert!((points[1].miou - unpruned.miou).abs() < 1e-9);
    assert!((points[2].miou - unpruned.miou).abs() < 1e-9);
}

#[test]
fn ladder_rows_and_csv() {
    let d = generate_synthetic_domains(&small_spec(), 13).unwrap();
    let ck = tiny_source(&d);
    let vocab = Vocabulary::with_default_templates(d.spec.target_names(), ck.params.config()).unwrap();
    let cm = d.spec.concept_map().unwrap();
    let b = Benchmark {
        source: &ck,
        train: &d.target_train,
        val: &d.target_val,
        vocab: &vocab,
        concepts: &cm,
    };
    let rows = b.run_ablation_ladder(&short()).unwrap();
    assert_eq!(
        rows.iter().map(|r| r.method).collect::<Vec<_>>(),
        Method::LADDER.to_vec()
    );
    assert_eq!(
        rows[0].summary,
        evaluate_checkpoint(&ck, &vocab, &d.target_val).unwrap()
    );
    assert_eq!(rows[0].checkpoint, ck);
    for r in &rows[1..] {
        assert_eq!(r.checkpoint.params, ck.params);
    }
    let (ts, _) = Method::TeacherStudent.config(&short());
    let (mk, _) = Method::Masking.config(&short());
    assert_eq!(
        AdaptConfig {
            mask_ratio: short().mask_ratio,
            ..ts
        },
        mk
    );

    let mut a = Vec::new();
    write_ladder_csv(&rows, &mut a).unwrap();
    let again = b.run_ablation_ladder(&short()).unwrap();
    let mut c = Vec::new();
    write_ladder_csv(&again, &mut c).unwrap();
    assert_eq!(a, c);
    let text = String::from_utf8(a).unwrap();
    let first = text.lines().nth(1).unwrap();
    assert!(first.starts_with("Zero-Shot,") && first.contains(",+0.0000,"));
}

#[test]
fn parallel_and_sequential_predictions_agree() {
    let d = generate_synthetic_domains(&small_spec(), 14).unwrap();
    let cfg = ModelConfig::default();
    let params = BackboneParams::init(&cfg, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
    let vocab = Vocabulary::with_default_templates(d.spec.target_names(), &cfg).unwrap();
    let imgs = d.target_val.images();
    assert_eq!(
        predict(&params, None, &vocab, &imgs, Exec::Parallel).unwrap(),
        predict(&params, None, &vocab, &imgs, Exec::Sequential).unwrap()
    );
}

#[test]
fn pretraining_beats_the_untrained_model_and_identity_shift_is_neutral() {
    let spec = SyntheticDatasetSpec {
        source_samples: 60,
        source_val_samples: 40,
        target_train_samples: 1,
        target_val_samples: 40,
        ..SyntheticDatasetSpec::default()
    }
    .identity_shift();
    let d = generate_synthetic_domains(&spec, 17).unwrap();
    let pcfg = PretrainConfig::default();
    let names = spec.source_names();
    let vocab = Vocabulary::with_default_templates(names.clone(), &pcfg.model).unwrap();
    let untrained = BackboneParams::init(&pcfg.model, &mut ChaCha8Rng::seed_from_u64(pcfg.seed)).unwrap();
    let before = evaluate(&untrained, None, &vocab, &d.source_val).unwrap().miou;
    let (ck, _) = pretrain_source(&d.source, &names, &pcfg).unwrap();
    let source_val = evaluate_checkpoint(&ck, &vocab, &d.source_val).unwrap().miou;
    assert!(source_val > before, "{before} -> {source_val}");
    let target_vocab = Vocabulary::with_default_templates(spec.target_names(), &pcfg.model).unwrap();
    assert_eq!(target_vocab.classes(), vocab.classes());
    let zero_shot = evaluate_checkpoint(&ck, &target_vocab, &d.target_val).unwrap().miou;
    assert!(
        (zero_shot - source_val).abs() <= 0.03,
        "zero-shot {zero_shot} vs source-val {source_val}"
    );
}
