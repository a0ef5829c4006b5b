//! Synthetic benchmark: data, source pretraining, evaluation, the ablation
//! ladder and top-k sweeps.

mod data;
mod metrics;

use std::io::Write;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adaptation::{min_entropy_adapt, run_adaptation, sample_mask, AdamW, AdaptConfig};
use crate::error::{Error, Result};
use crate::lora::LoraSet;
use crate::model::checkpoint::Checkpoint;
use crate::model::encode_text;
use crate::model::{BackboneParams, Binder, ImageSample, ModelConfig, ModelGraph, PromptTokens, Vocabulary};
use crate::numerics::{Graph, Tensor};
use crate::par::*;
use crate::vocab_align::ConceptMap;

pub use data::{
    generate_synthetic_domains, ClassAppearance, DatasetInfo, DomainShift, LabeledSplit, SegmentationSample,
    SyntheticDatasetSpec, SyntheticDomains, UnlabeledSplit, CONCEPTS_FILE, INFO_FILE,
};
pub use metrics::{miou, ConfusionMatrix, IouSummary, MetricsReport};

/// Source pretraining hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub model: ModelConfig,
    pub epochs: usize,
    /// Peak step size; decays linearly to a tenth over training.
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Chance that a training image is patch-masked, so the source model
    /// has seen blanked regions before adaptation masks its inputs.
    pub mask_prob: f64,
    /// Mask ratio is drawn uniformly from `[0, max_mask_ratio]`.
    pub max_mask_ratio: f64,
    pub mask_patch: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            epochs: 8,
            lr: 3e-3,
            batch_size: 2,
            seed: 17,
            mask_prob: 0.5,
            max_mask_ratio: 0.7,
            mask_patch: 8,
        }
    }
}

impl PretrainConfig {
    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let path = path.as_ref();
        serde_json::from_str(&std::fs::read_to_string(path)?)
            .map_err(|e| Error::Validation(format!("{}: {e}", path.display())))
    }
}

/// Mean per-pixel cross-entropy of the model on a labeled split.
pub fn mean_pixel_loss(
    params: &BackboneParams,
    adapters: Option<&LoraSet>,
    vocab: &Vocabulary,
    split: &LabeledSplit,
) -> Result<f64> {
    let text = encode_text(vocab, params, adapters)?.embeddings;
    let per: Vec<(f64, usize)> = split
        .samples
        .par_iter()
        .map(|s| {
            let mut m = ModelGraph::inference(params, adapters);
            let t = m.graph.constant(text.clone());
            let logits = m.logits(s.image.pixels(), t)?;
            let p = m.probabilities(logits);
            let l = m.graph.nll(p, &s.labels, 1.0)?;
            Ok((m.graph.value(l).item(), s.labels.len()))
        })
        .collect::<Result<_>>()?;
    let (sum, n) = per.iter().fold((0.0, 0), |(a, b), (l, k)| (a + l, b + k));
    Ok(sum / n.max(1) as f64)
}

/// Trains every base weight on the labeled source split with pixel-wise
/// cross-entropy, then freezes them. Returns the checkpoint and the mean
/// per-pixel training loss before the first and after every epoch.
pub fn pretrain_source(
    split: &LabeledSplit,
    classes: &[String],
    config: &PretrainConfig,
) -> Result<(Checkpoint, Vec<f64>)> {
    if split.samples.is_empty() {
        return Err(Error::Validation("empty source split".into()));
    }
    if config.batch_size == 0 {
        return Err(Error::Validation("batch_size must be positive".into()));
    }
    if !(0.0..=1.0).contains(&config.mask_prob) || !(0.0..=1.0).contains(&config.max_mask_ratio) {
        return Err(Error::Validation(
            "mask_prob and max_mask_ratio must lie in [0, 1]".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut params = BackboneParams::init(&config.model, &mut rng)?;
    let vocab = Vocabulary::with_default_templates(classes.to_vec(), &config.model)?;
    let tokens = PromptTokens::new(&vocab, &config.model)?;
    let mut opt = {
        let refs: Vec<&Tensor> = params.iter().map(|(_, t)| t).collect();
        AdamW::new(&refs)
    };
    let steps_per_epoch = split.samples.len().div_ceil(config.batch_size);
    let total = (config.epochs * steps_per_epoch).max(1);
    let mut losses = vec![mean_pixel_loss(&params, None, &vocab, split)?];
    let mut order: Vec<usize> = (0..split.samples.len()).collect();
    let mut step = 0;
    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(config.batch_size) {
            let lr = config.lr * (1.0 - 0.9 * step as f64 / total as f64);
            let grads = {
                let mut m = ModelGraph::new(Graph::new(), Binder::new(&params, None).train_base());
                let text = m.text(&tokens)?;
                let mut root = None;
                for &i in chunk {
                    let s = &split.samples[i];
                    let img = s.image.pixels();
                    let masked;
                    let pixels = if config.mask_prob > 0.0 && rng.gen_bool(config.mask_prob) {
                        let r = rng.gen_range(0.0..=config.max_mask_ratio);
                        let mask = sample_mask(img.shape()[0], img.shape()[1], config.mask_patch, r, &mut rng)?;
                        masked = mask.apply(img)?;
                        &masked
                    } else {
                        img
                    };
                    let logits = m.logits(pixels, text)?;
                    let p = m.probabilities(logits);
                    let w = 1.0 / (chunk.len() * s.labels.len()) as f64;
                    let l = m.graph.nll(p, &s.labels, w)?;
                    root = Some(match root {
                        Some(r) => m.graph.add(r, l)?,
                        None => l,
                    });
                }
                let g = m.graph.backward(root.expect("non-empty chunk"))?;
                let leaves: std::collections::HashMap<String, _> =
                    m.binder.base_leaves().map(|(n, v)| (n.to_string(), v)).collect();
                params
                    .iter()
                    .map(|(n, t)| {
                        leaves
                            .get(n)
                            .and_then(|&v| g.get(v).cloned())
                            .unwrap_or_else(|| Tensor::zeros(t.shape()))
                    })
                    .collect::<Vec<_>>()
            };
            let targets: Vec<&mut Tensor> = params.tensors_mut()?.map(|(_, t)| t).collect();
            opt.step(targets, &grads, lr)?;
            step += 1;
        }
        losses.push(mean_pixel_loss(&params, None, &vocab, split)?);
    }
    params.freeze();
    let mut ck = Checkpoint::new(params, None);
    ck.metadata.insert("stage".into(), "source".into());
    ck.metadata.insert("classes".into(), classes.join(","));
    Ok((ck, losses))
}

/// How batches of independent images are evaluated.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Exec {
    /// On the rayon pool when the `parallel` feature is on.
    Parallel,
    Sequential,
}

fn predict_one(
    params: &BackboneParams,
    adapters: Option<&LoraSet>,
    text: &Tensor,
    img: &ImageSample,
) -> Result<Vec<u32>> {
    let mut m = ModelGraph::inference(params, adapters);
    let t = m.graph.constant(text.clone());
    let logits = m.logits(img.pixels(), t)?;
    Ok(m.graph
        .value(logits)
        .rows()
        .map(|r| {
            let mut best = 0;
            for (i, &v) in r.iter().enumerate() {
                if v > r[best] {
                    best = i;
                }
            }
            best as u32
        })
        .collect())
}

/// Argmax class maps of `images`. Both execution modes give identical output.
pub fn predict(
    params: &BackboneParams,
    adapters: Option<&LoraSet>,
    vocab: &Vocabulary,
    images: &[ImageSample],
    exec: Exec,
) -> Result<Vec<Vec<u32>>> {
    let text = encode_text(vocab, params, adapters)?.embeddings;
    match exec {
        Exec::Parallel => images
            .par_iter()
            .map(|i| predict_one(params, adapters, &text, i))
            .collect(),
        Exec::Sequential => images.iter().map(|i| predict_one(params, adapters, &text, i)).collect(),
    }
}

/// mIoU over a labeled split, from one confusion matrix accumulated over
/// every image.
pub fn evaluate(
    params: &BackboneParams,
    adapters: Option<&LoraSet>,
    vocab: &Vocabulary,
    split: &LabeledSplit,
) -> Result<IouSummary> {
    let preds = predict(params, adapters, vocab, &split.images(), Exec::Parallel)?;
    let mut cm = ConfusionMatrix::new(vocab.len());
    for (p, s) in preds.iter().zip(&split.samples) {
        cm.add(p, &s.labels)?;
    }
    Ok(cm.summary())
}

pub fn evaluate_checkpoint(ck: &Checkpoint, vocab: &Vocabulary, split: &LabeledSplit) -> Result<IouSummary> {
    evaluate(&ck.params, ck.adapters.as_ref(), vocab, split)
}

/// Full report for one checkpoint on one split.
pub fn report(
    ck: &Checkpoint,
    vocab: &Vocabulary,
    split: &LabeledSplit,
    config: serde_json::Value,
    seed: u64,
) -> Result<MetricsReport> {
    let start = Instant::now();
    let s = evaluate_checkpoint(ck, vocab, split)?;
    Ok(MetricsReport {
        classes: vocab.classes().to_vec(),
        per_class_iou: s.per_class_iou,
        miou: s.miou,
        config,
        seed,
        wall_clock_secs: start.elapsed().as_secs_f64(),
    })
}

/// Rows of the ablation ladder; each adds one ingredient to the previous.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Method {
    ZeroShot,
    MinEntropy,
    TeacherStudent,
    Masking,
    VocabAlignment,
    TopK,
}

impl Method {
    pub const LADDER: [Method; 6] = [
        Method::ZeroShot,
        Method::MinEntropy,
        Method::TeacherStudent,
        Method::Masking,
        Method::VocabAlignment,
        Method::TopK,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Method::ZeroShot => "Zero-Shot",
            Method::MinEntropy => "Min-Entropy",
            Method::TeacherStudent => "Teacher-Student",
            Method::Masking => "+ Masking",
            Method::VocabAlignment => "+ Vocab Alignment",
            Method::TopK => "+ TopK",
        }
    }

    /// The adaptation config of this row, derived from the full method's,
    /// and whether concepts are used.
    pub fn config(self, full: &AdaptConfig) -> (AdaptConfig, bool) {
        let mut cfg = full.clone();
        let at_least =
            |m: Method| Method::LADDER.iter().position(|&x| x == self) >= Method::LADDER.iter().position(|&x| x == m);
        if !at_least(Method::Masking) {
            cfg.mask_ratio = 0.0;
        }
        if !at_least(Method::TopK) {
            cfg.topk = None;
        }
        (cfg, at_least(Method::VocabAlignment))
    }
}

/// Target-domain inputs shared by every experiment.
pub struct Benchmark<'a> {
    pub source: &'a Checkpoint,
    pub train: &'a UnlabeledSplit,
    pub val: &'a LabeledSplit,
    pub vocab: &'a Vocabulary,
    pub concepts: &'a ConceptMap,
}

#[derive(Clone, Debug)]
pub struct LadderRow {
    pub method: Method,
    pub summary: IouSummary,
    pub checkpoint: Checkpoint,
}

impl Benchmark<'_> {
    /// Adapts with `config` and evaluates the student on the val split.
    pub fn run(&self, config: &AdaptConfig, concepts: bool) -> Result<(Checkpoint, IouSummary)> {
        let empty = ConceptMap::default();
        let cm = if concepts { self.concepts } else { &empty };
        let (ck, _) = run_adaptation(self.source, &self.train.images, self.vocab, cm, config)?;
        let s = evaluate_checkpoint(&ck, self.vocab, self.val)?;
        Ok((ck, s))
    }

    fn method(&self, m: Method, full: &AdaptConfig) -> Result<LadderRow> {
        let (cfg, concepts) = m.config(full);
        let (checkpoint, summary) = match m {
            Method::ZeroShot => (
                self.source.clone(),
                evaluate_checkpoint(self.source, self.vocab, self.val)?,
            ),
            Method::MinEntropy => {
                let (ck, _) = min_entropy_adapt(self.source, &self.train.images, self.vocab, &cfg)?;
                let s = evaluate_checkpoint(&ck, self.vocab, self.val)?;
                (ck, s)
            }
            _ => self.run(&cfg, concepts)?,
        };
        Ok(LadderRow {
            method: m,
            summary,
            checkpoint,
        })
    }

    /// All six rows, cells evaluated independently (in parallel when enabled).
    pub fn run_ablation_ladder(&self, full: &AdaptConfig) -> Result<Vec<LadderRow>> {
        full.validate()?;
        Method::LADDER
            .to_vec()
            .into_par_iter()
            .map(|m| self.method(m, full))
            .collect()
    }

    /// One adaptation per `(k, fraction)` pair.
    pub fn run_topk_sweep(&self, full: &AdaptConfig, ks: &[usize], fractions: &[f64]) -> Result<Vec<SweepPoint>> {
        full.validate()?;
        let fractions = if fractions.is_empty() { &[0.0][..] } else { fractions };
        let n = self.vocab.len();
        let cells: Vec<(usize, f64)> = ks
            .iter()
            .flat_map(|&k| fractions.iter().map(move |&f| (k, f)))
            .collect();
        cells
            .into_par_iter()
            .map(|(k, f)| {
                if k == 0 {
                    return Err(Error::Validation("top-k values must be positive".into()));
                }
                let cfg = AdaptConfig {
                    topk: Some(k),
                    random_fraction: f,
                    ..full.clone()
                };
                let (_, s) = self.run(&cfg, true)?;
                Ok(SweepPoint {
                    k,
                    class_axis_width: k.min(n),
                    random_fraction: f,
                    miou: s.miou,
                })
            })
            .collect()
    }
}

fn fmt_iou(per: &[Option<f64>]) -> String {
    per.iter()
        .map(|v| v.map_or("nan".to_string(), |x| format!("{x:.6}")))
        .collect::<Vec<_>>()
        .join(" ")
}

/// `method,miou,delta_miou,per_class_iou`; mIoU in percent.
pub fn write_ladder_csv<W: Write>(rows: &[LadderRow], out: W) -> Result<()> {
    let zero = rows
        .iter()
        .find(|r| r.method == Method::ZeroShot)
        .map_or(0.0, |r| r.summary.miou);
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["method", "miou", "delta_miou", "per_class_iou"])?;
    for r in rows {
        w.write_record([
            r.method.label().to_string(),
            format!("{:.4}", 100.0 * r.summary.miou),
            format!("{:+.4}", 100.0 * (r.summary.miou - zero)),
            fmt_iou(&r.summary.per_class_iou),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub k: usize,
    /// Peak class-axis width of the student's cost volume.
    pub class_axis_width: usize,
    pub random_fraction: f64,
    pub miou: f64,
}

/// `k,class_axis_width,random_fraction,miou`; mIoU in percent.
pub fn write_sweep_csv<W: Write>(points: &[SweepPoint], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["k", "class_axis_width", "random_fraction", "miou"])?;
    for p in points {
        w.write_record([
            p.k.to_string(),
            p.class_axis_width.to_string(),
            p.random_fraction.to_string(),
            format!("{:.4}", 100.0 * p.miou),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ladder_configs_are_cumulative() {
        let full = AdaptConfig::desk();
        let (ts, c) = Method::TeacherStudent.config(&full);
        assert_eq!((ts.mask_ratio, ts.topk, c), (0.0, None, false));
        let (m, c) = Method::Masking.config(&full);
        assert_eq!((m.mask_ratio, m.topk, c), (full.mask_ratio, None, false));
        assert_eq!(
            AdaptConfig {
                mask_ratio: 0.0,
                ..m.clone()
            },
            ts
        );
        let (v, c) = Method::VocabAlignment.config(&full);
        assert_eq!((v.topk, c), (None, true));
        let (t, c) = Method::TopK.config(&full);
        assert_eq!((t, c), (full, true));
    }
}
