use ovsfda_core::lora::{LoraConfig, LoraSet};
use ovsfda_core::model::*;
use ovsfda_core::numerics::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small() -> ModelConfig {
    ModelConfig {
        d_model: 16,
        blocks: 2,
        mlp_hidden: 16,
        agg_dim: 8,
        agg_hidden: 8,
        prompts: 3,
        ..ModelConfig::default()
    }
}

fn random_image(h: usize, w: usize, rng: &mut ChaCha8Rng) -> ImageSample {
    let data = (0..h * w * 3).map(|_| rng.gen::<f64>()).collect();
    ImageSample::new(Tensor::new(vec![h, w, 3], data).unwrap()).unwrap()
}

fn vocab(names: &[&str], cfg: &ModelConfig) -> Vocabulary {
    Vocabulary::with_default_templates(names.iter().map(|s| s.to_string()).collect(), cfg).unwrap()
}

#[test]
fn feature_shapes() {
    let cfg = ModelConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let p = BackboneParams::init(&cfg, &mut rng).unwrap();
    let img = random_image(32, 32, &mut rng);
    assert_eq!(encode_image(&img, &p, None).unwrap().embeddings.shape(), &[4, 4, 32]);
    let v = vocab(&["cat", "road", "sky"], &cfg);
    let tf = encode_text(&v, &p, None).unwrap();
    assert_eq!(tf.embeddings.shape(), &[3, 10, 32]);
    let dv = encode_image(&img, &p, None).unwrap();
    let cv = build_cost_volume(&dv, &tf).unwrap();
    assert_eq!(cv.values.shape(), &[4, 4, 10, 3]);
    let logits = aggregate_and_decode(&cv, &p).unwrap();
    assert_eq!(logits.shape(), &[32, 32, 3]);
}

#[test]
fn non_divisible_image_is_rejected() {
    let cfg = small();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let p = BackboneParams::init(&cfg, &mut rng).unwrap();
    let img = random_image(12, 16, &mut rng);
    assert!(encode_image(&img, &p, None).is_err());
}

#[test]
fn encoders_are_deterministic() {
    let cfg = small();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let p = BackboneParams::init(&cfg, &mut rng).unwrap();
    let v = vocab(&["cat", "road"], &cfg);
    assert_eq!(encode_text(&v, &p, None).unwrap(), encode_text(&v, &p, None).unwrap());
    let img = random_image(16, 16, &mut rng);
    assert_eq!(
        forward(&img, &v, &p, None).unwrap(),
        forward(&img, &v, &p, None).unwrap()
    );
}

#[test]
fn patch_bias_separates_constant_images() {
    let cfg = small();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let p = BackboneParams::init(&cfg, &mut rng).unwrap();
    let zero = ImageSample::new(Tensor::zeros(&[16, 16, 3])).unwrap();
    let one = ImageSample::new(Tensor::full(&[16, 16, 3], 1.0)).unwrap();
    let a = encode_image(&zero, &p, None).unwrap().embeddings;
    let b = encode_image(&one, &p, None).unwrap().embeddings;
    assert!(a.max_abs_diff(&b) > 1e-6);
}

#[test]
fn zero_adapters_are_bitwise_neutral() {
    let cfg = small();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let p = BackboneParams::init(&cfg, &mut rng).unwrap();
    let lcfg = LoraConfig {
        blocks: cfg.blocks,
        ..LoraConfig::default()
    };
    let set = LoraSet::init(&lcfg, cfg.d_model, &mut rng).unwrap();
    let v = vocab(&["cat", "road", "sky"], &cfg);
    let img = random_image(16, 16, &mut rng);
    assert_eq!(
        encode_text(&v, &p, Some(&set)).unwrap(),
        encode_text(&v, &p, None).unwrap()
    );
    assert_eq!(
        forward(&img, &v, &p, Some(&set)).unwrap(),
        forward(&img, &v, &p, None).unwrap()
    );
}

#[test]
fn probabilities_sum_to_one() {
    let cfg = small();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let p = BackboneParams::init(&cfg, &mut rng).unwrap();
    let v = vocab(&["cat", "road", "sky", "tree"], &cfg);
    let probs = forward(&random_image(16, 24, &mut rng), &v, &p, None).unwrap();
    assert_eq!(probs.shape(), &[16, 24, 4]);
    for row in probs.rows() {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }
}

#[test]
fn class_permutation_equivariance() {
    let cfg = small();
    let names = ["cat", "road", "sky", "tree", "wall"];
    for seed in 0..3 {
        let mut rng = ChaCha8Rng::seed_from_u64(10 + seed);
        let p = BackboneParams::init(&cfg, &mut rng).unwrap();
        let img = random_image(16, 16, &mut rng);
        let base = forward_logits(&img, &vocab(&names, &cfg), &p, None).unwrap();
        let perm = [3, 0, 4, 1, 2];
        let permuted: Vec<&str> = perm.iter().map(|&i| names[i]).collect();
        let out = forward_logits(&img, &vocab(&permuted, &cfg), &p, None).unwrap();
        let expected = base.index_select(2, &perm).unwrap();
        assert!(out.max_abs_diff(&expected) < 1e-9);
    }
}

#[test]
fn identical_class_slices_give_identical_logits() {
    let cfg = small();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let p = BackboneParams::init(&cfg, &mut rng).unwrap();
    let vals: Vec<f64> = (0..2 * 2 * 3 * 2).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let two = Tensor::new(vec![2, 2, 3, 2], vals).unwrap();
    let cv = CostVolume::new(two.index_select(3, &[0, 1, 0]).unwrap()).unwrap();
    let logits = aggregate_and_decode(&cv, &p).unwrap();
    let a = logits.index_select(2, &[0]).unwrap();
    let c = logits.index_select(2, &[2]).unwrap();
    assert_eq!(a, c);
}

#[test]
fn cost_volume_entries_are_cosines() {
    let cfg = small();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let p = BackboneParams::init(&cfg, &mut rng).unwrap();
    let v = vocab(&["cat", "road", "sky"], &cfg);
    let dv = encode_image(&random_image(16, 16, &mut rng), &p, None).unwrap();
    let tf = encode_text(&v, &p, None).unwrap();
    let cv = build_cost_volume(&dv, &tf).unwrap();
    assert!(cv.values.data().iter().all(|x| (-1.0 - 1e-9..=1.0 + 1e-9).contains(x)));
    // Independent cosine for one cell.
    let d = cfg.d_model;
    let a = Tensor::vector(dv.embeddings.data()[d..2 * d].to_vec());
    let b = Tensor::vector(tf.embeddings.data()[(2 * 3 + 1) * d..(2 * 3 + 2) * d].to_vec());
    let expect = cosine_similarity(&a, &b).unwrap();
    assert!((cv.values.get(&[0, 1, 1, 2]) - expect).abs() < 1e-12);
}

#[test]
fn cost_volume_hand_values() {
    let dv = DenseVisualFeatures {
        embeddings: Tensor::new(vec![1, 1, 2], vec![1.0, 2.0]).unwrap(),
    };
    let dl = TextFeatures {
        embeddings: Tensor::new(vec![2, 1, 2], vec![2.0, 1.0, 1.0, 2.0]).unwrap(),
    };
    let cv = build_cost_volume(&dv, &dl).unwrap();
    assert!((cv.values.get(&[0, 0, 0, 0]) - 0.8).abs() < 1e-12);
    assert!((cv.values.get(&[0, 0, 0, 1]) - 1.0).abs() < 1e-12);
    let zero = TextFeatures {
        embeddings: Tensor::zeros(&[1, 1, 2]),
    };
    assert!(matches!(
        build_cost_volume(&dv, &zero),
        Err(ovsfda_core::Error::Degenerate(_))
    ));
}

#[test]
fn lora_entry_gradient_matches_finite_differences() {
    let cfg = small();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let p = BackboneParams::init(&cfg, &mut rng).unwrap();
    let lcfg = LoraConfig {
        blocks: cfg.blocks,
        ..LoraConfig::default()
    };
    let mut set = LoraSet::init(&lcfg, cfg.d_model, &mut rng).unwrap();
    for t in set.trainable_parameters_mut() {
        *t = Tensor::randn(t.shape(), 0.2, &mut rng);
    }
    let v = vocab(&["cat", "road"], &cfg);
    let img = random_image(16, 16, &mut rng);
    let tokens = PromptTokens::new(&v, &cfg).unwrap();

    let mut m = ModelGraph::new(Graph::new(), Binder::new(&p, Some(&set)).train_adapters());
    let text = m.text(&tokens).unwrap();
    let logits = m.logits(img.pixels(), text).unwrap();
    let loss = m.graph.mean(logits);
    let grads = m.graph.backward(loss).unwrap();
    let &(site, a_var, _) = m.binder.adapter_vars().iter().find(|(s, _, _)| s.block == 1).unwrap();
    let analytic = grads.get(a_var).unwrap().clone();

    let numeric = numerical_gradient(
        |a| {
            let mut probe = set.clone();
            for (s, ad) in probe.iter_mut() {
                if *s == site {
                    *ad.a_mut() = a.clone();
                }
            }
            let out = forward_logits(&img, &v, &p, Some(&probe))?;
            Ok(out.data().iter().sum::<f64>() / out.len() as f64)
        },
        set.get(&site).unwrap().a(),
        1e-5,
    )
    .unwrap();
    assert!(max_relative_error(&analytic, &numeric) < 1e-4);
}
