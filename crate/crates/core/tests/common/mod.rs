#![allow(dead_code)]

use ovsfda_core::adaptation::{
    adaptation_loss, confidence_weight, generate_pseudo_labels, sample_mask, ConfidenceWeight, PseudoLabelMap,
};
use ovsfda_core::lora::{LoraConfig, LoraSet, Site};
use ovsfda_core::model::*;
use ovsfda_core::numerics::*;
use ovsfda_core::topk::{prune_cost_volume, remap_pseudo_labels, select_topk, ClassSelection};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// `d = 16`, `P = 2`, four blocks so every adapter site exists.
pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        d_model: 16,
        blocks: 4,
        mlp_hidden: 16,
        agg_dim: 8,
        agg_hidden: 8,
        prompts: 2,
        ..ModelConfig::default()
    }
}

pub fn random_image(h: usize, w: usize, rng: &mut ChaCha8Rng) -> ImageSample {
    let data = (0..h * w * 3).map(|_| rng.gen::<f64>()).collect();
    ImageSample::new(Tensor::new(vec![h, w, 3], data).unwrap()).unwrap()
}

/// Rank-2 adapters on every site with non-zero A and B.
pub fn random_adapters(cfg: &ModelConfig, std: f64, rng: &mut ChaCha8Rng) -> LoraSet {
    let lcfg = LoraConfig {
        blocks: cfg.blocks,
        rank: 2,
        ..LoraConfig::default()
    };
    let mut set = LoraSet::init(&lcfg, cfg.d_model, rng).unwrap();
    for t in set.trainable_parameters_mut() {
        *t = Tensor::randn(t.shape(), std, rng);
    }
    set
}

/// One supervised student term: fixed teacher labels, their confidence
/// weight, the class selection and the masked student input.
pub struct LossCase {
    pub params: BackboneParams,
    pub adapters: LoraSet,
    pub vocab: Vocabulary,
    pub student_input: ImageSample,
    pub labels: PseudoLabelMap,
    pub q: ConfidenceWeight,
    pub selection: ClassSelection,
}

impl LossCase {
    /// 16×16 image, three classes, top-2 pruning, mask ratio 0.5.
    pub fn new(seed: u64) -> Self {
        let cfg = tiny_config();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = BackboneParams::init(&cfg, &mut rng).unwrap();
        let adapters = random_adapters(&cfg, 0.3, &mut rng);
        let vocab = Vocabulary::with_default_templates(vec!["cat".into(), "road".into(), "sky".into()], &cfg).unwrap();
        let img = random_image(16, 16, &mut rng);
        let teacher = forward(&img, &vocab, &params, Some(&adapters)).unwrap();
        let labels = generate_pseudo_labels(&teacher).unwrap();
        let q = confidence_weight(&teacher, 0.34).unwrap();
        let selection = select_topk(&teacher, 2).unwrap();
        let labels = remap_pseudo_labels(&labels, &selection);
        let mask = sample_mask(16, 16, 4, 0.5, &mut rng).unwrap();
        let student_input = ImageSample::new(mask.apply(img.pixels()).unwrap()).unwrap();
        Self {
            params,
            adapters,
            vocab,
            student_input,
            labels,
            q,
            selection,
        }
    }

    /// Loss through the plain tensor functions, no tape involved.
    pub fn loss_with(&self, adapters: &LoraSet) -> Result<f64, ovsfda_core::Error> {
        let dv = encode_image(&self.student_input, &self.params, Some(adapters))?;
        let dl = encode_text(&self.vocab, &self.params, Some(adapters))?;
        let cv = prune_cost_volume(&build_cost_volume(&dv, &dl)?, &self.selection)?;
        let probs = aggregate_and_decode(&cv, &self.params)?.softmax(2)?;
        adaptation_loss(&probs, &self.labels, self.q)
    }

    /// Gradients of the taped loss for every adapter factor, keyed by site.
    pub fn analytic(&self) -> Vec<(Site, Tensor, Tensor)> {
        let tokens = PromptTokens::new(&self.vocab, self.params.config()).unwrap();
        let mut m = ModelGraph::new(
            Graph::new(),
            Binder::new(&self.params, Some(&self.adapters)).train_adapters(),
        );
        let text = m.text(&tokens).unwrap();
        let dv = m.image(self.student_input.pixels()).unwrap();
        let cv = m.cost_volume(dv, text).unwrap();
        let cv = m.select_classes(cv, self.selection.selected()).unwrap();
        let logits = m.aggregate(cv).unwrap();
        let probs = m.probabilities(logits);
        let root = m.graph.nll(probs, self.labels.labels(), self.q.q).unwrap();
        let grads = m.graph.backward(root).unwrap();
        m.binder
            .adapter_vars()
            .iter()
            .map(|&(s, a, b)| {
                let ad = self.adapters.get(&s).unwrap();
                let pick = |v: Var, like: &Tensor| grads.get(v).cloned().unwrap_or_else(|| Tensor::zeros(like.shape()));
                (s, pick(a, ad.a()), pick(b, ad.b()))
            })
            .collect()
    }

    /// Worst relative error over every adapter tensor, checked against
    /// central differences of [`LossCase::loss_with`].
    pub fn worst_fd_error(&self) -> (f64, usize) {
        let mut worst: f64 = 0.0;
        let mut checked = 0;
        for (site, ga, gb) in self.analytic() {
            for (which, analytic) in [(0, ga), (1, gb)] {
                let ad = self.adapters.get(&site).unwrap();
                let x = if which == 0 { ad.a() } else { ad.b() };
                let numeric = numerical_gradient(
                    |t| {
                        let mut probe = self.adapters.clone();
                        for (s, a) in probe.iter_mut() {
                            if *s == site {
                                if which == 0 {
                                    *a.a_mut() = t.clone();
                                } else {
                                    *a.b_mut() = t.clone();
                                }
                            }
                        }
                        self.loss_with(&probe)
                    },
                    x,
                    1e-5,
                )
                .unwrap();
                worst = worst.max(max_relative_error(&analytic, &numeric));
                checked += 1;
            }
        }
        (worst, checked)
    }
}
