use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::adaptation::{
    confidence_weight, drop_unconfident, ema_in_place, generate_pseudo_labels, sample_mask, AdamW, AdaptConfig,
};
use crate::error::{shape_err, Error, Result};
use crate::lora::LoraSet;
use crate::model::checkpoint::Checkpoint;
use crate::model::{encode_text, BackboneParams, Binder, ImageSample, ModelGraph, PromptTokens, Vocabulary};
use crate::numerics::{Gradients, Graph, Tensor, Var};
use crate::topk::{randomized_selection, remap_pseudo_labels, select_topk, ClassSelection};
use crate::vocab_align::{aggregate_concepts, expand_vocabulary, ConceptMap};

/// Frozen base weights, student and teacher adapters, optimizer moments,
/// step counter and random stream.
#[derive(Clone, Debug)]
pub struct AdaptationState {
    params: BackboneParams,
    student: LoraSet,
    teacher: LoraSet,
    optimizer: AdamW,
    iteration: usize,
    rng: ChaCha8Rng,
}

impl AdaptationState {
    /// Starts from a source checkpoint. Existing adapters are resumed,
    /// otherwise fresh zero-delta adapters are created; the teacher starts as
    /// a copy of the student.
    pub fn new(source: &Checkpoint, config: &AdaptConfig) -> Result<Self> {
        config.validate()?;
        if !source.params.is_frozen() {
            return Err(Error::Contract(
                "source checkpoint must have frozen base weights".into(),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let student = match &source.adapters {
            Some(set) => set.clone(),
            None => LoraSet::init(&config.lora_config(), source.params.config().d_model, &mut rng)?,
        };
        if student.is_empty() {
            return Err(Error::Contract("no adapter sites configured".into()));
        }
        let optimizer = AdamW::new(&student.trainable_parameters());
        Ok(Self {
            params: source.params.clone(),
            teacher: student.clone(),
            student,
            optimizer,
            iteration: 0,
            rng,
        })
    }

    pub fn params(&self) -> &BackboneParams {
        &self.params
    }

    pub fn student(&self) -> &LoraSet {
        &self.student
    }

    pub fn teacher(&self) -> &LoraSet {
        &self.teacher
    }

    pub fn optimizer(&self) -> &AdamW {
        &self.optimizer
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    /// Base weights plus the student adapters.
    pub fn into_checkpoint(self) -> Checkpoint {
        let mut ck = Checkpoint::new(self.params, Some(self.student));
        ck.metadata.insert("stage".into(), "adapted".into());
        ck.metadata.insert("iterations".into(), self.iteration.to_string());
        ck
    }

    fn apply_gradients(
        &mut self,
        graph_grads: &Gradients,
        vars: &[(crate::lora::Site, Var, Var)],
        lr: f64,
    ) -> Result<()> {
        let mut grads = Vec::with_capacity(self.student.len() * 2);
        for (site, ad) in self.student.iter() {
            let bound = vars.iter().find(|(s, _, _)| s == site);
            let pick = |v: Option<Var>, like: &Tensor| {
                v.and_then(|v| graph_grads.get(v).cloned())
                    .unwrap_or_else(|| Tensor::zeros(like.shape()))
            };
            grads.push(pick(bound.map(|b| b.1), ad.a()));
            grads.push(pick(bound.map(|b| b.2), ad.b()));
        }
        self.optimizer.step(self.student.trainable_parameters_mut(), &grads, lr)
    }
}

/// What one iteration did.
#[derive(Clone, Debug, PartialEq)]
pub struct StepMetrics {
    pub iteration: usize,
    pub loss: f64,
    pub q_mean: f64,
    pub ignored_fraction: f64,
    pub lr: f64,
    /// Kept classes of each image in the batch.
    pub selected_classes: Vec<Vec<usize>>,
}

/// Random crop shared by teacher and student, then jitter for the student.
fn augment<R: Rng + ?Sized>(pixels: &Tensor, config: &AdaptConfig, rng: &mut R) -> Result<(Tensor, Tensor)> {
    let (h, w) = (pixels.shape()[0], pixels.shape()[1]);
    let clean = match config.crop_size {
        Some(c) if c < h || c < w => {
            let (ch, cw) = (c.min(h), c.min(w));
            let y = rng.gen_range(0..=h - ch);
            let x = rng.gen_range(0..=w - cw);
            let mut data = Vec::with_capacity(ch * cw * 3);
            for i in y..y + ch {
                data.extend_from_slice(&pixels.data()[(i * w + x) * 3..(i * w + x + cw) * 3]);
            }
            Tensor::new(vec![ch, cw, 3], data)?
        }
        _ => pixels.clone(),
    };
    let mut student = clean.clone();
    if config.jitter > 0.0 {
        let gains: Vec<f64> = (0..3)
            .map(|_| rng.gen_range(1.0 - config.jitter..=1.0 + config.jitter))
            .collect();
        for px in student.data_mut().chunks_mut(3) {
            for (v, g) in px.iter_mut().zip(&gains) {
                *v = (*v * g).clamp(0.0, 1.0);
            }
        }
    }
    Ok((clean, student))
}

/// One teacher-student iteration over `batch`.
///
/// Per image the teacher labels the clean view over the concept-expanded
/// vocabulary, the labels and `q` follow from the aggregated probabilities,
/// and the student sees a masked, jittered view restricted to the top-k
/// classes. The loss is averaged over the batch. When nothing is supervised
/// the optimizer is not stepped at all.
pub fn adapt_step(
    state: &mut AdaptationState,
    batch: &[ImageSample],
    vocab: &Vocabulary,
    cm: &ConceptMap,
    config: &AdaptConfig,
) -> Result<StepMetrics> {
    if batch.is_empty() {
        return shape_err("empty batch");
    }
    let lr = config.lr_at(state.iteration);
    let ev = expand_vocabulary(vocab, cm)?;
    let teacher_text = encode_text(&ev.vocabulary(vocab)?, &state.params, Some(&state.teacher))?.embeddings;
    let tokens = PromptTokens::new(vocab, state.params.config())?;
    let n = vocab.len();

    let mut student = ModelGraph::new(
        Graph::new(),
        Binder::new(&state.params, Some(&state.student)).train_adapters(),
    );
    let text = student.text(&tokens)?;
    let scale = 1.0 / batch.len() as f64;
    let mut total: Option<Var> = None;
    let mut loss = 0.0;
    let mut q_sum = 0.0;
    let mut ignored = 0.0;
    let mut selections = Vec::with_capacity(batch.len());

    for img in batch {
        let (clean, jittered) = augment(img.pixels(), config, &mut state.rng)?;
        let mask = sample_mask(
            clean.shape()[0],
            clean.shape()[1],
            config.mask_patch,
            config.mask_ratio,
            &mut state.rng,
        )?;

        let mut teacher = ModelGraph::inference(&state.params, Some(&state.teacher));
        let tt = teacher.graph.constant(teacher_text.clone());
        let logits = teacher.logits(&clean, tt)?;
        let probs = aggregate_concepts(teacher.graph.value(logits), &ev)?;

        let mut labels = generate_pseudo_labels(&probs)?;
        let mut q = confidence_weight(&probs, config.tau)?;
        q_sum += q.q;
        if config.pixel_confidence {
            labels = drop_unconfident(&labels, &probs, config.tau)?;
            q.q = 1.0;
        }
        let selection = match config.topk {
            Some(k) if k < n => {
                let top = select_topk(&probs, k)?;
                if config.random_fraction > 0.0 {
                    randomized_selection(&top, config.random_fraction, &mut state.rng)?
                } else {
                    top
                }
            }
            _ => ClassSelection::all(n),
        };
        let labels = remap_pseudo_labels(&labels, &selection);
        ignored += labels.ignored_fraction();
        selections.push(selection.selected().to_vec());
        if q.q == 0.0 || labels.all_ignored() {
            continue;
        }

        let masked = mask.apply(&jittered)?;
        let dv = student.image(&masked)?;
        let mut cv = student.cost_volume(dv, text)?;
        if selection.k() < n {
            cv = student.select_classes(cv, selection.selected())?;
        }
        let logits = student.aggregate(cv)?;
        let probs = student.probabilities(logits);
        let l = student.graph.nll(probs, labels.labels(), q.q * scale)?;
        loss += student.graph.value(l).item();
        total = Some(match total {
            Some(t) => student.graph.add(t, l)?,
            None => l,
        });
    }

    if let Some(root) = total {
        let grads = student.graph.backward(root)?;
        let vars = student.binder.adapter_vars().to_vec();
        drop(student);
        state.apply_gradients(&grads, &vars, lr)?;
    }
    ema_in_place(&mut state.teacher, &state.student, config.alpha)?;
    state.iteration += 1;
    Ok(StepMetrics {
        iteration: state.iteration,
        loss,
        q_mean: q_sum * scale,
        ignored_fraction: ignored * scale,
        lr,
        selected_classes: selections,
    })
}

/// Entropy-minimization baseline: one step on the mean per-pixel entropy of
/// the student's predictions. No teacher, masking or pruning.
pub fn min_entropy_step(
    state: &mut AdaptationState,
    batch: &[ImageSample],
    vocab: &Vocabulary,
    config: &AdaptConfig,
) -> Result<StepMetrics> {
    if batch.is_empty() {
        return shape_err("empty batch");
    }
    let lr = config.lr_at(state.iteration);
    let tokens = PromptTokens::new(vocab, state.params.config())?;
    let mut student = ModelGraph::new(
        Graph::new(),
        Binder::new(&state.params, Some(&state.student)).train_adapters(),
    );
    let text = student.text(&tokens)?;
    let scale = 1.0 / batch.len() as f64;
    let mut total: Option<Var> = None;
    for img in batch {
        let (_, jittered) = augment(img.pixels(), config, &mut state.rng)?;
        let pixels = (jittered.shape()[0] * jittered.shape()[1]) as f64;
        let logits = student.logits(&jittered, text)?;
        let g = &mut student.graph;
        let p = g.softmax(logits);
        let lp = g.log(p);
        let plp = g.mul(p, lp)?;
        let s = g.sum(plp);
        let h = g.scale(s, -scale / pixels);
        total = Some(match total {
            Some(t) => g.add(t, h)?,
            None => h,
        });
    }
    let root = total.expect("non-empty batch");
    let loss = student.graph.value(root).item();
    let grads = student.graph.backward(root)?;
    let vars = student.binder.adapter_vars().to_vec();
    drop(student);
    state.apply_gradients(&grads, &vars, lr)?;
    state.teacher = state.student.clone();
    state.iteration += 1;
    Ok(StepMetrics {
        iteration: state.iteration,
        loss,
        q_mean: 0.0,
        ignored_fraction: 0.0,
        lr,
        selected_classes: vec![(0..vocab.len()).collect(); batch.len()],
    })
}

fn run_loop<F>(
    source: &Checkpoint,
    images: &[ImageSample],
    config: &AdaptConfig,
    mut step: F,
) -> Result<(Checkpoint, Vec<StepMetrics>)>
where
    F: FnMut(&mut AdaptationState, &[ImageSample]) -> Result<StepMetrics>,
{
    config.validate()?;
    if config.iterations == 0 {
        return Ok((source.clone(), Vec::new()));
    }
    if images.is_empty() {
        return Err(Error::Validation("no target images to adapt on".into()));
    }
    let mut state = AdaptationState::new(source, config)?;
    let mut log = Vec::new();
    for it in 0..config.iterations {
        let batch: Vec<ImageSample> = (0..config.batch_size)
            .map(|_| images[state.rng.gen_range(0..images.len())].clone())
            .collect();
        let m = step(&mut state, &batch)?;
        if it % config.log_every == 0 || it + 1 == config.iterations {
            log.push(m);
        }
    }
    Ok((state.into_checkpoint(), log))
}

/// Full self-training run. With zero iterations the source checkpoint is
/// returned unchanged.
pub fn run_adaptation(
    source: &Checkpoint,
    images: &[ImageSample],
    vocab: &Vocabulary,
    cm: &ConceptMap,
    config: &AdaptConfig,
) -> Result<(Checkpoint, Vec<StepMetrics>)> {
    run_loop(source, images, config, |s, b| adapt_step(s, b, vocab, cm, config))
}

pub fn min_entropy_adapt(
    source: &Checkpoint,
    images: &[ImageSample],
    vocab: &Vocabulary,
    config: &AdaptConfig,
) -> Result<(Checkpoint, Vec<StepMetrics>)> {
    run_loop(source, images, config, |s, b| min_entropy_step(s, b, vocab, config))
}

/// Metrics as CSV: iteration, loss, q_mean, ignored_fraction, lr,
/// selected_classes. Classes of one image are space separated, images `|`.
pub fn write_metrics_csv<W: Write>(metrics: &[StepMetrics], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "iteration",
        "loss",
        "q_mean",
        "ignored_fraction",
        "lr",
        "selected_classes",
    ])?;
    for m in metrics {
        let sel = m
            .selected_classes
            .iter()
            .map(|s| s.iter().map(usize::to_string).collect::<Vec<_>>().join(" "))
            .collect::<Vec<_>>()
            .join("|");
        w.write_record([
            m.iteration.to_string(),
            m.loss.to_string(),
            m.q_mean.to_string(),
            m.ignored_fraction.to_string(),
            m.lr.to_string(),
            sel,
        ])?;
    }
    w.flush()?;
    Ok(())
}
