use std::collections::HashMap;

use crate::error::{shape_err, Result};
use crate::lora::{LoraSet, Site};
use crate::model::tokenizer::tokenize;
use crate::model::{
    BackboneParams, CostVolume, DenseVisualFeatures, ImageSample, ModelConfig, TextFeatures, Vocabulary,
};
use crate::numerics::{Graph, Tensor, Var};

const LN_EPS: f64 = 1e-5;
/// Amplitude of the fixed sinusoidal position code added to patch tokens.
const POS_AMPLITUDE: f64 = 0.1;

/// Binds parameter tensors into a graph on first use.
pub struct Binder<'a> {
    params: &'a BackboneParams,
    adapters: Option<&'a LoraSet>,
    sites: HashMap<String, Site>,
    base_trainable: bool,
    adapters_trainable: bool,
    leaves: HashMap<String, Var>,
    effective: HashMap<String, Var>,
    adapter_vars: Vec<(Site, Var, Var)>,
}

impl<'a> Binder<'a> {
    /// Everything frozen; suitable for inference.
    pub fn new(params: &'a BackboneParams, adapters: Option<&'a LoraSet>) -> Self {
        let sites = adapters
            .map(|set| set.iter().map(|(s, _)| (s.weight_name(), *s)).collect())
            .unwrap_or_default();
        Self {
            params,
            adapters,
            sites,
            base_trainable: false,
            adapters_trainable: false,
            leaves: HashMap::new(),
            effective: HashMap::new(),
            adapter_vars: Vec::new(),
        }
    }

    pub fn train_base(mut self) -> Self {
        self.base_trainable = true;
        self
    }

    pub fn train_adapters(mut self) -> Self {
        self.adapters_trainable = true;
        self
    }

    pub fn config(&self) -> &'a ModelConfig {
        self.params.config()
    }

    /// The weight `name` as used in the forward pass, adapter delta included.
    pub fn var(&mut self, g: &mut Graph, name: &str) -> Result<Var> {
        if let Some(&v) = self.effective.get(name) {
            return Ok(v);
        }
        let base = g.leaf(self.params.require(name)?.clone(), self.base_trainable);
        self.leaves.insert(name.to_string(), base);
        let mut out = base;
        if let (Some(site), Some(set)) = (self.sites.get(name), self.adapters) {
            let ad = set.get(site).expect("site listed by its own set");
            let a = g.leaf(ad.a().clone(), self.adapters_trainable);
            let b = g.leaf(ad.b().clone(), self.adapters_trainable);
            let ba = g.matmul(b, a, false)?;
            let delta = g.scale(ba, ad.scaling());
            out = g.add(base, delta)?;
            self.adapter_vars.push((*site, a, b));
        }
        self.effective.insert(name.to_string(), out);
        Ok(out)
    }

    /// Adapter factor leaves `(site, A, B)` bound so far.
    pub fn adapter_vars(&self) -> &[(Site, Var, Var)] {
        &self.adapter_vars
    }

    /// Raw base-weight leaves bound so far.
    pub fn base_leaves(&self) -> impl Iterator<Item = (&str, Var)> {
        self.leaves.iter().map(|(n, v)| (n.as_str(), *v))
    }
}

/// Token ids of every (class, template) prompt, grouped by length so each
/// group runs as one batch.
#[derive(Clone, Debug)]
pub struct PromptTokens {
    classes: usize,
    prompts: usize,
    groups: Vec<(usize, Vec<usize>)>,
    /// Row of each prompt (class-major) in the concatenated group output.
    rows: Vec<usize>,
}

impl PromptTokens {
    pub fn new(vocab: &Vocabulary, config: &ModelConfig) -> Result<Self> {
        let seqs: Vec<Vec<usize>> = vocab
            .prompts()
            .map(|p| tokenize(&p, config.token_vocab, config.max_tokens))
            .collect();
        if seqs.iter().any(Vec::is_empty) {
            return Err(crate::Error::Validation("a prompt produced no tokens".into()));
        }
        let mut lengths: Vec<usize> = seqs.iter().map(Vec::len).collect();
        lengths.sort_unstable();
        lengths.dedup();
        let mut groups = Vec::new();
        let mut rows = vec![0; seqs.len()];
        let mut next_row = 0;
        for len in lengths {
            let mut ids = Vec::new();
            for (i, s) in seqs.iter().enumerate().filter(|(_, s)| s.len() == len) {
                ids.extend_from_slice(s);
                rows[i] = next_row;
                next_row += 1;
            }
            groups.push((len, ids));
        }
        Ok(Self {
            classes: vocab.len(),
            prompts: vocab.templates().len(),
            groups,
            rows,
        })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn prompts(&self) -> usize {
        self.prompts
    }
}

/// Fixed 2-d sinusoidal code `[h·w, d]`.
fn sincos_2d(h: usize, w: usize, d: usize) -> Tensor {
    let q = d / 4;
    let mut data = vec![0.0; h * w * d];
    for i in 0..h {
        for j in 0..w {
            let row = &mut data[(i * w + j) * d..(i * w + j + 1) * d];
            for k in 0..q {
                let f = 1.0 / 100f64.powf(k as f64 / q as f64);
                row[k] = POS_AMPLITUDE * (i as f64 * f).sin();
                row[q + k] = POS_AMPLITUDE * (i as f64 * f).cos();
                row[2 * q + k] = POS_AMPLITUDE * (j as f64 * f).sin();
                row[3 * q + k] = POS_AMPLITUDE * (j as f64 * f).cos();
            }
        }
    }
    Tensor::new(vec![h * w, d], data).expect("sincos shape")
}

/// `[H, W, 3]` image to `[H/p · W/p, p·p·3]` patch rows.
fn patchify(img: &Tensor, p: usize) -> Result<(Tensor, usize, usize)> {
    let s = img.shape();
    if s.len() != 3 || s[2] != 3 {
        return shape_err(format!("image must be [H, W, 3], got {s:?}"));
    }
    if s[0] % p != 0 || s[1] % p != 0 || s[0] == 0 || s[1] == 0 {
        return shape_err(format!("image {}x{} is not divisible by patch size {p}", s[0], s[1]));
    }
    let (hf, wf) = (s[0] / p, s[1] / p);
    let t = img.reshape(&[hf, p, wf, p, 3])?.permute(&[0, 2, 1, 3, 4])?;
    Ok((t.reshape(&[hf * wf, p * p * 3])?, hf, wf))
}

/// A graph plus the parameter bindings of one model instance.
pub struct ModelGraph<'a> {
    pub graph: Graph,
    pub binder: Binder<'a>,
}

impl<'a> ModelGraph<'a> {
    pub fn new(graph: Graph, binder: Binder<'a>) -> Self {
        Self { graph, binder }
    }

    /// Inference-only graph over frozen weights.
    pub fn inference(params: &'a BackboneParams, adapters: Option<&'a LoraSet>) -> Self {
        Self::new(Graph::no_grad(), Binder::new(params, adapters))
    }

    fn w(&mut self, name: &str) -> Result<Var> {
        self.binder.var(&mut self.graph, name)
    }

    fn layer_norm(&mut self, prefix: &str, x: Var) -> Result<Var> {
        let gain = self.w(&format!("{prefix}.g"))?;
        let bias = self.w(&format!("{prefix}.b"))?;
        let n = self.graph.layer_norm(x, LN_EPS);
        let scaled = self.graph.mul(n, gain)?;
        self.graph.add(scaled, bias)
    }

    /// Pre-norm residual block: single-head attention over the second-to-last
    /// axis, then a GELU MLP.
    fn block(&mut self, prefix: &str, x: Var) -> Result<Var> {
        let width = *self.graph.shape(x).last().unwrap();
        let h = self.layer_norm(&format!("{prefix}.ln1"), x)?;
        let wq = self.w(&format!("{prefix}.attn.wq"))?;
        let wk = self.w(&format!("{prefix}.attn.wk"))?;
        let wv = self.w(&format!("{prefix}.attn.wv"))?;
        let wo = self.w(&format!("{prefix}.attn.wo"))?;
        let g = &mut self.graph;
        let q = g.linear(h, wq, None)?;
        let k = g.linear(h, wk, None)?;
        let v = g.linear(h, wv, None)?;
        let scores = g.matmul(q, k, true)?;
        let scores = g.scale(scores, 1.0 / (width as f64).sqrt());
        let attn = g.softmax(scores);
        let mixed = g.matmul(attn, v, false)?;
        let out = g.linear(mixed, wo, None)?;
        let x = g.add(x, out)?;

        let h = self.layer_norm(&format!("{prefix}.ln2"), x)?;
        let w1 = self.w(&format!("{prefix}.mlp.w1"))?;
        let b1 = self.w(&format!("{prefix}.mlp.b1"))?;
        let w2 = self.w(&format!("{prefix}.mlp.w2"))?;
        let b2 = self.w(&format!("{prefix}.mlp.b2"))?;
        let g = &mut self.graph;
        let hidden = g.linear(h, w1, Some(b1))?;
        let hidden = g.gelu(hidden);
        let out = g.linear(hidden, w2, Some(b2))?;
        g.add(x, out)
    }

    /// Text embeddings `[N, P, d]`.
    pub fn text(&mut self, tokens: &PromptTokens) -> Result<Var> {
        let cfg = self.binder.config();
        if tokens.prompts != cfg.prompts {
            return shape_err(format!(
                "model expects {} prompt templates, vocabulary has {}",
                cfg.prompts, tokens.prompts
            ));
        }
        let d = cfg.d_model;
        let table = self.w("text.token_emb")?;
        let pos = self.w("text.pos_emb")?;
        let mut parts = Vec::with_capacity(tokens.groups.len());
        for (len, ids) in &tokens.groups {
            let n = ids.len() / len;
            let x = self.graph.embedding(table, ids)?;
            let x = self.graph.reshape(x, &[n, *len, d])?;
            let idx: Vec<usize> = (0..*len).collect();
            let p = self.graph.index_select(pos, 0, &idx)?;
            let mut x = self.graph.add(x, p)?;
            for i in 0..cfg.blocks {
                x = self.block(&format!("text.blocks.{i}"), x)?;
            }
            let x = self.layer_norm("text.ln_f", x)?;
            parts.push(self.graph.mean_axis(x, 1)?);
        }
        let all = self.graph.concat(&parts)?;
        let ordered = self.graph.index_select(all, 0, &tokens.rows)?;
        let proj = self.w("text.proj")?;
        let out = self.graph.linear(ordered, proj, None)?;
        self.graph.reshape(out, &[tokens.classes, tokens.prompts, d])
    }

    /// Dense visual features `[H_f, W_f, d]` of an `[H, W, 3]` image.
    pub fn image(&mut self, pixels: &Tensor) -> Result<Var> {
        let cfg = self.binder.config();
        let (patches, hf, wf) = patchify(pixels, cfg.patch)?;
        let x = self.graph.constant(patches);
        let pw = self.w("visual.patch.w")?;
        let pb = self.w("visual.patch.b")?;
        let x = self.graph.linear(x, pw, Some(pb))?;
        let pos = self.graph.constant(sincos_2d(hf, wf, cfg.d_model));
        let mut x = self.graph.add(x, pos)?;
        for i in 0..cfg.blocks {
            x = self.block(&format!("visual.blocks.{i}"), x)?;
        }
        let x = self.layer_norm("visual.ln_f", x)?;
        let proj = self.w("visual.proj")?;
        let x = self.graph.linear(x, proj, None)?;
        self.graph.reshape(x, &[hf, wf, cfg.d_model])
    }

    /// Cosine volume `[H_f, W_f, P, N]` between `dv [H_f, W_f, d]` and `dl [N, P, d]`.
    pub fn cost_volume(&mut self, dv: Var, dl: Var) -> Result<Var> {
        cosine_volume(&mut self.graph, dv, dl)
    }

    /// Spatial and class aggregation, then upsampling to `[H, W, N]` logits.
    pub fn aggregate(&mut self, cv: Var) -> Result<Var> {
        let cfg = self.binder.config();
        let s = self.graph.shape(cv).to_vec();
        if s.len() != 4 || s[2] != cfg.prompts {
            return shape_err(format!("cost volume {s:?} does not match {} prompts", cfg.prompts));
        }
        let (hf, wf, p, n) = (s[0], s[1], s[2], s[3]);
        let t = hf * wf;
        let ew = self.w("agg.embed.w")?;
        let eb = self.w("agg.embed.b")?;
        let g = &mut self.graph;
        let x = g.reshape(cv, &[t, p, n])?;
        let x = g.permute(x, &[2, 0, 1])?;
        let x = g.linear(x, ew, Some(eb))?;
        let pos = g.constant(sincos_2d(hf, wf, cfg.agg_dim));
        let x = g.add(x, pos)?;
        let x = self.block("agg.spatial", x)?;
        let x = self.graph.permute(x, &[1, 0, 2])?;
        let x = self.block("agg.class", x)?;
        let hw = self.w("agg.head.w")?;
        let hb = self.w("agg.head.b")?;
        let g = &mut self.graph;
        let x = g.linear(x, hw, Some(hb))?;
        let x = g.reshape(x, &[hf, wf, n])?;
        g.upsample_bilinear(x, hf * cfg.patch, wf * cfg.patch)
    }

    /// Restricts the class axis of a cost volume to `classes`, in that order.
    pub fn select_classes(&mut self, cv: Var, classes: &[usize]) -> Result<Var> {
        self.graph.index_select(cv, 3, classes)
    }

    pub fn logits(&mut self, pixels: &Tensor, text: Var) -> Result<Var> {
        let dv = self.image(pixels)?;
        let cv = self.cost_volume(dv, text)?;
        self.aggregate(cv)
    }

    pub fn probabilities(&mut self, logits: Var) -> Var {
        self.graph.softmax(logits)
    }
}

pub fn encode_text(vocab: &Vocabulary, params: &BackboneParams, adapters: Option<&LoraSet>) -> Result<TextFeatures> {
    let tokens = PromptTokens::new(vocab, params.config())?;
    let mut m = ModelGraph::inference(params, adapters);
    let v = m.text(&tokens)?;
    Ok(TextFeatures {
        embeddings: m.graph.take_value(v),
    })
}

pub fn encode_image(
    img: &ImageSample,
    params: &BackboneParams,
    adapters: Option<&LoraSet>,
) -> Result<DenseVisualFeatures> {
    let mut m = ModelGraph::inference(params, adapters);
    let v = m.image(img.pixels())?;
    Ok(DenseVisualFeatures {
        embeddings: m.graph.take_value(v),
    })
}

fn cosine_volume(g: &mut Graph, dv: Var, dl: Var) -> Result<Var> {
    let (sv, sl) = (g.shape(dv).to_vec(), g.shape(dl).to_vec());
    if sv.len() != 3 || sl.len() != 3 || sv[2] != sl[2] {
        return shape_err(format!("cost volume of visual {sv:?} and text {sl:?}"));
    }
    let (hf, wf, d) = (sv[0], sv[1], sv[2]);
    let (n, p) = (sl[0], sl[1]);
    let v = g.reshape(dv, &[hf * wf, d])?;
    let v = g.l2_normalize(v)?;
    let t = g.reshape(dl, &[n * p, d])?;
    let t = g.l2_normalize(t)?;
    let c = g.matmul(v, t, true)?;
    let c = g.reshape(c, &[hf, wf, n, p])?;
    g.permute(c, &[0, 1, 3, 2])
}

pub fn build_cost_volume(dv: &DenseVisualFeatures, dl: &TextFeatures) -> Result<CostVolume> {
    let mut g = Graph::no_grad();
    let v = g.constant(dv.embeddings.clone());
    let t = g.constant(dl.embeddings.clone());
    let c = cosine_volume(&mut g, v, t)?;
    CostVolume::new(g.take_value(c))
}

/// Aggregation head and decoder: `[H_f, W_f, P, N]` to `[H, W, N]` logits.
pub fn aggregate_and_decode(cv: &CostVolume, params: &BackboneParams) -> Result<Tensor> {
    let mut m = ModelGraph::inference(params, None);
    let c = m.graph.constant(cv.values.clone());
    let out = m.aggregate(c)?;
    Ok(m.graph.take_value(out))
}

pub fn forward_logits(
    img: &ImageSample,
    vocab: &Vocabulary,
    params: &BackboneParams,
    adapters: Option<&LoraSet>,
) -> Result<Tensor> {
    let tokens = PromptTokens::new(vocab, params.config())?;
    let mut m = ModelGraph::inference(params, adapters);
    let text = m.text(&tokens)?;
    let logits = m.logits(img.pixels(), text)?;
    Ok(m.graph.take_value(logits))
}

/// Per-pixel class probabilities `[H, W, N]`.
pub fn forward(
    img: &ImageSample,
    vocab: &Vocabulary,
    params: &BackboneParams,
    adapters: Option<&LoraSet>,
) -> Result<Tensor> {
    let tokens = PromptTokens::new(vocab, params.config())?;
    let mut m = ModelGraph::inference(params, adapters);
    let text = m.text(&tokens)?;
    let logits = m.logits(img.pixels(), text)?;
    let probs = m.probabilities(logits);
    Ok(m.graph.take_value(probs))
}
