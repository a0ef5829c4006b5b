//! Toy open-vocabulary segmentation backbone.
//!
//! Two small transformer encoders embed image patches and prompted class
//! names into a shared space. Their cosine similarities form a cost volume
//! `[H_f, W_f, P, N]`, which is refined by a spatial attention block (across
//! patches, per class) and a class attention block (across classes, per
//! patch), projected to one logit per class and bilinearly upsampled.
//!
//! Nothing in the class path depends on a class's position, so the output is
//! equivariant under any reordering of the vocabulary.

pub mod checkpoint;
mod forward;
mod params;
pub mod tokenizer;

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::numerics::Tensor;

pub use forward::{
    aggregate_and_decode, build_cost_volume, encode_image, encode_text, forward, forward_logits, Binder, ModelGraph,
    PromptTokens,
};
pub use params::BackboneParams;

/// Prompt templates shipped with the model. `{}` is replaced by the class name.
pub const DEFAULT_TEMPLATES: [&str; 10] = [
    "a photo of a {}.",
    "a photo of the {}.",
    "a rendering of a {}.",
    "a painting of a {}.",
    "a close-up photo of a {}.",
    "a bright photo of a {}.",
    "a cropped photo of a {}.",
    "a dark photo of a {}.",
    "there is a {} in the scene.",
    "this is a {}.",
];

pub const PLACEHOLDER: &str = "{}";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Shared embedding width `d_L` of both encoders.
    pub d_model: usize,
    pub patch: usize,
    pub blocks: usize,
    pub mlp_hidden: usize,
    /// Channel width inside the aggregation blocks.
    pub agg_dim: usize,
    pub agg_hidden: usize,
    pub token_vocab: usize,
    pub max_tokens: usize,
    /// Number of prompt templates `P`.
    pub prompts: usize,
    pub init_std: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 32,
            patch: 8,
            blocks: 4,
            mlp_hidden: 64,
            agg_dim: 16,
            agg_hidden: 32,
            token_vocab: 4096,
            max_tokens: 16,
            prompts: 10,
            init_std: 1.0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("d_model", self.d_model),
            ("patch", self.patch),
            ("blocks", self.blocks),
            ("mlp_hidden", self.mlp_hidden),
            ("agg_dim", self.agg_dim),
            ("agg_hidden", self.agg_hidden),
            ("token_vocab", self.token_vocab),
            ("max_tokens", self.max_tokens),
            ("prompts", self.prompts),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Validation(format!("model config `{name}` must be positive")));
        }
        if self.prompts > DEFAULT_TEMPLATES.len() {
            return Err(Error::Validation(format!(
                "at most {} prompt templates are available",
                DEFAULT_TEMPLATES.len()
            )));
        }
        if self.d_model % 4 != 0 || self.agg_dim % 4 != 0 {
            return Err(Error::Validation("d_model and agg_dim must be multiples of 4".into()));
        }
        Ok(())
    }

    /// The first `prompts` default templates.
    pub fn templates(&self) -> Vec<String> {
        DEFAULT_TEMPLATES
            .iter()
            .take(self.prompts)
            .map(|t| t.to_string())
            .collect()
    }
}

/// An RGB image `[H, W, 3]` with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageSample {
    pixels: Tensor,
}

impl ImageSample {
    pub fn new(pixels: Tensor) -> Result<Self> {
        if pixels.rank() != 3 || pixels.shape()[2] != 3 {
            return shape_err(format!("image must be [H, W, 3], got {:?}", pixels.shape()));
        }
        if let Some(v) = pixels.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Validation(format!("pixel value {v} outside [0, 1]")));
        }
        Ok(Self { pixels })
    }

    pub fn pixels(&self) -> &Tensor {
        &self.pixels
    }

    pub fn height(&self) -> usize {
        self.pixels.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.pixels.shape()[1]
    }
}

/// Class names and the prompt templates used to embed them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Vocabulary {
    classes: Vec<String>,
    templates: Vec<String>,
}

impl Vocabulary {
    pub fn new(classes: Vec<String>, templates: Vec<String>) -> Result<Self> {
        if classes.is_empty() {
            return Err(Error::Validation("vocabulary has no classes".into()));
        }
        if templates.is_empty() {
            return Err(Error::Validation("vocabulary has no prompt templates".into()));
        }
        let mut seen = std::collections::HashSet::new();
        for c in &classes {
            if c.trim().is_empty() {
                return Err(Error::Validation("empty class name".into()));
            }
            if !seen.insert(c.as_str()) {
                return Err(Error::Validation(format!("duplicate class name `{c}`")));
            }
        }
        for t in &templates {
            if t.matches(PLACEHOLDER).count() != 1 {
                return Err(Error::Validation(format!(
                    "template `{t}` must contain exactly one `{PLACEHOLDER}`"
                )));
            }
        }
        Ok(Self { classes, templates })
    }

    /// Classes with the model's default templates.
    pub fn with_default_templates(classes: Vec<String>, config: &ModelConfig) -> Result<Self> {
        Self::new(classes, config.templates())
    }

    pub fn classes(&self) -> &[String] {
        &self.classes
    }

    pub fn templates(&self) -> &[String] {
        &self.templates
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    /// Same templates, different classes.
    pub fn with_classes(&self, classes: Vec<String>) -> Result<Self> {
        Self::new(classes, self.templates.clone())
    }

    /// Prompt strings in class-major order.
    pub fn prompts(&self) -> impl Iterator<Item = String> + '_ {
        self.classes
            .iter()
            .flat_map(move |c| self.templates.iter().map(move |t| t.replacen(PLACEHOLDER, c, 1)))
    }
}

/// Text embeddings `[N_c, P, d_L]`.
#[derive(Clone, Debug, PartialEq)]
pub struct TextFeatures {
    pub embeddings: Tensor,
}

/// Dense patch embeddings `[H_f, W_f, d_L]`.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseVisualFeatures {
    pub embeddings: Tensor,
}

/// Pixel–prompt cosine similarities `[H_f, W_f, P, N]`.
#[derive(Clone, Debug, PartialEq)]
pub struct CostVolume {
    pub values: Tensor,
}

impl CostVolume {
    pub fn new(values: Tensor) -> Result<Self> {
        if values.rank() != 4 {
            return shape_err(format!("cost volume must be 4-d, got {:?}", values.shape()));
        }
        Ok(Self { values })
    }

    pub fn classes(&self) -> usize {
        self.values.shape()[3]
    }
}
