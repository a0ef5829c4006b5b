use std::collections::HashMap;

use rand::Rng;

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::numerics::Tensor;

/// Every base weight of the backbone, stored by name in a fixed order.
#[derive(Clone, Debug, PartialEq)]
pub struct BackboneParams {
    config: ModelConfig,
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
    frozen: bool,
}

/// Shapes of every base weight, in storage order.
fn layout(cfg: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let d = cfg.d_model;
    let mut out = Vec::new();
    let block = |out: &mut Vec<(String, Vec<usize>)>, prefix: &str, width: usize, hidden: usize| {
        for (n, s) in [
            ("ln1.g", vec![width]),
            ("ln1.b", vec![width]),
            ("attn.wq", vec![width, width]),
            ("attn.wk", vec![width, width]),
            ("attn.wv", vec![width, width]),
            ("attn.wo", vec![width, width]),
            ("ln2.g", vec![width]),
            ("ln2.b", vec![width]),
            ("mlp.w1", vec![hidden, width]),
            ("mlp.b1", vec![hidden]),
            ("mlp.w2", vec![width, hidden]),
            ("mlp.b2", vec![width]),
        ] {
            out.push((format!("{prefix}.{n}"), s));
        }
    };
    out.push(("visual.patch.w".into(), vec![d, 3 * cfg.patch * cfg.patch]));
    out.push(("visual.patch.b".into(), vec![d]));
    for i in 0..cfg.blocks {
        block(&mut out, &format!("visual.blocks.{i}"), d, cfg.mlp_hidden);
    }
    out.push(("visual.ln_f.g".into(), vec![d]));
    out.push(("visual.ln_f.b".into(), vec![d]));
    out.push(("visual.proj".into(), vec![d, d]));

    out.push(("text.token_emb".into(), vec![cfg.token_vocab, d]));
    out.push(("text.pos_emb".into(), vec![cfg.max_tokens, d]));
    for i in 0..cfg.blocks {
        block(&mut out, &format!("text.blocks.{i}"), d, cfg.mlp_hidden);
    }
    out.push(("text.ln_f.g".into(), vec![d]));
    out.push(("text.ln_f.b".into(), vec![d]));
    out.push(("text.proj".into(), vec![d, d]));

    let a = cfg.agg_dim;
    out.push(("agg.embed.w".into(), vec![a, cfg.prompts]));
    out.push(("agg.embed.b".into(), vec![a]));
    block(&mut out, "agg.spatial", a, cfg.agg_hidden);
    block(&mut out, "agg.class", a, cfg.agg_hidden);
    out.push(("agg.head.w".into(), vec![1, a]));
    out.push(("agg.head.b".into(), vec![1]));
    out
}

impl BackboneParams {
    /// Embedding tables from Normal(0, `init_std`), matrices from
    /// Normal(0, 1 / fan_in), unit layer-norm gains, zero biases.
    pub fn init<R: Rng + ?Sized>(config: &ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut names = Vec::new();
        let mut tensors = Vec::new();
        for (name, shape) in layout(config) {
            let t = if name.ends_with(".g") {
                Tensor::full(&shape, 1.0)
            } else if shape.len() == 1 {
                Tensor::zeros(&shape)
            } else if name.ends_with("_emb") {
                Tensor::randn(&shape, config.init_std, rng)
            } else {
                Tensor::randn(&shape, (shape[1] as f64).sqrt().recip(), rng)
            };
            names.push(name);
            tensors.push(t);
        }
        Ok(Self::assemble(config.clone(), names, tensors, false))
    }

    fn assemble(config: ModelConfig, names: Vec<String>, tensors: Vec<Tensor>, frozen: bool) -> Self {
        let index = names.iter().enumerate().map(|(i, n)| (n.clone(), i)).collect();
        Self {
            config,
            names,
            tensors,
            index,
            frozen,
        }
    }

    /// Rebuilds parameters from named tensors, checking names and shapes.
    pub fn from_named(config: ModelConfig, named: Vec<(String, Tensor)>, frozen: bool) -> Result<Self> {
        config.validate()?;
        let expected = layout(&config);
        let mut by_name: HashMap<String, Tensor> = named.into_iter().collect();
        let mut names = Vec::with_capacity(expected.len());
        let mut tensors = Vec::with_capacity(expected.len());
        for (name, shape) in expected {
            let t = by_name
                .remove(&name)
                .ok_or_else(|| Error::Format(format!("missing tensor `{name}`")))?;
            if t.shape() != shape.as_slice() {
                return Err(Error::Format(format!(
                    "tensor `{name}` has shape {:?}, expected {shape:?}",
                    t.shape()
                )));
            }
            names.push(name);
            tensors.push(t);
        }
        if let Some(extra) = by_name.keys().next() {
            return Err(Error::Format(format!("unexpected tensor `{extra}`")));
        }
        Ok(Self::assemble(config, names, tensors, frozen))
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.tensors[i])
    }

    pub(crate) fn require(&self, name: &str) -> Result<&Tensor> {
        self.get(name)
            .ok_or_else(|| Error::Contract(format!("model has no tensor `{name}`")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    /// Mutable access for training; refused once the weights are frozen.
    pub fn tensors_mut(&mut self) -> Result<impl Iterator<Item = (&str, &mut Tensor)>> {
        if self.frozen {
            return Err(Error::Contract("base weights are frozen".into()));
        }
        Ok(self.names.iter().map(String::as_str).zip(self.tensors.iter_mut()))
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }
}
