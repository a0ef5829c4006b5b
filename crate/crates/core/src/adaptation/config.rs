use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lora::{Encoder, LoraConfig, Projection, MAX_ADAPTED_BLOCKS};

/// Which projections receive adapters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LoraSites {
    pub encoders: Vec<Encoder>,
    pub blocks: usize,
    pub projections: Vec<Projection>,
}

impl Default for LoraSites {
    fn default() -> Self {
        Self {
            encoders: vec![Encoder::Visual, Encoder::Text],
            blocks: MAX_ADAPTED_BLOCKS,
            projections: Projection::ALL.to_vec(),
        }
    }
}

/// Adaptation hyperparameters. Missing keys take the defaults below.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdaptConfig {
    /// EMA coefficient of the teacher.
    pub alpha: f64,
    /// Confidence threshold of the pseudo-label weight.
    pub tau: f64,
    pub mask_ratio: f64,
    pub mask_patch: usize,
    /// Classes kept per image; `null` disables pruning.
    pub topk: Option<usize>,
    /// Share of the kept classes swapped for random unselected ones.
    pub random_fraction: f64,
    pub lr: f64,
    pub warmup_lr: f64,
    pub warmup_steps: usize,
    pub iterations: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub lora_rank: usize,
    pub lora_scaling: f64,
    pub lora_sites: LoraSites,
    pub concepts_path: Option<PathBuf>,
    /// Student-side random crop edge; `null` keeps the full image.
    pub crop_size: Option<usize>,
    /// Per-channel multiplicative jitter drawn from `[1 - j, 1 + j]`.
    pub jitter: f64,
    /// Drop pixels below `tau` instead of scaling the whole image by `q`.
    pub pixel_confidence: bool,
    /// Metrics are logged every `log_every` iterations.
    pub log_every: usize,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        Self {
            alpha: 0.99,
            tau: 0.968,
            mask_ratio: 0.7,
            mask_patch: 8,
            topk: Some(15),
            random_fraction: 0.0,
            lr: 5e-5,
            warmup_lr: 5e-6,
            warmup_steps: 500,
            iterations: 600,
            batch_size: 2,
            seed: 0,
            lora_rank: 2,
            lora_scaling: 1.0,
            lora_sites: LoraSites::default(),
            concepts_path: None,
            crop_size: None,
            jitter: 0.2,
            pixel_confidence: false,
            log_every: 1,
        }
    }
}

impl AdaptConfig {
    /// Tuned for the synthetic benchmark: few hundred steps on tiny models
    /// need a far larger step size than the long production schedule.
    pub fn desk() -> Self {
        Self {
            tau: 0.6,
            mask_patch: 8,
            topk: Some(4),
            lr: 1e-3,
            warmup_lr: 1e-4,
            warmup_steps: 50,
            seed: 17,
            ..Self::default()
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Validation(format!("adapt config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text).map_err(|e| Error::Validation(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Validation(m));
        if !(0.0..=1.0).contains(&self.alpha) {
            return bad(format!("alpha {} outside [0, 1]", self.alpha));
        }
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return bad(format!("tau {} outside (0, 1)", self.tau));
        }
        if !(0.0..=1.0).contains(&self.mask_ratio) {
            return bad(format!("mask_ratio {} outside [0, 1]", self.mask_ratio));
        }
        if self.mask_patch == 0 {
            return bad("mask_patch must be positive".into());
        }
        if self.topk == Some(0) {
            return bad("topk must be at least 1".into());
        }
        if !(0.0..=1.0).contains(&self.random_fraction) {
            return bad(format!("random_fraction {} outside [0, 1]", self.random_fraction));
        }
        if !(self.lr >= 0.0 && self.warmup_lr >= 0.0 && self.lr.is_finite() && self.warmup_lr.is_finite()) {
            return bad("learning rates must be finite and non-negative".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if self.lora_rank == 0 || !(self.lora_scaling > 0.0) {
            return bad("lora_rank and lora_scaling must be positive".into());
        }
        if self.lora_sites.blocks > MAX_ADAPTED_BLOCKS {
            return bad(format!("lora_sites.blocks exceeds {MAX_ADAPTED_BLOCKS}"));
        }
        if !(0.0..1.0).contains(&self.jitter) {
            return bad(format!("jitter {} outside [0, 1)", self.jitter));
        }
        if self.crop_size == Some(0) {
            return bad("crop_size must be positive".into());
        }
        if self.log_every == 0 {
            return bad("log_every must be positive".into());
        }
        Ok(())
    }

    pub fn lora_config(&self) -> LoraConfig {
        LoraConfig {
            rank: self.lora_rank,
            scaling: self.lora_scaling,
            projections: self.lora_sites.projections.clone(),
            encoders: self.lora_sites.encoders.clone(),
            blocks: self.lora_sites.blocks,
        }
    }

    /// Linear warmup from `warmup_lr` to `lr`, then constant.
    pub fn lr_at(&self, iteration: usize) -> f64 {
        if iteration < self.warmup_steps {
            self.warmup_lr + (self.lr - self.warmup_lr) * iteration as f64 / self.warmup_steps as f64
        } else {
            self.lr
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_and_partial_files() {
        let cfg = AdaptConfig::from_json(r#"{"topk": 4, "seed": 3}"#).unwrap();
        assert_eq!(cfg.topk, Some(4));
        assert_eq!(cfg.alpha, 0.99);
        assert_eq!(cfg.warmup_steps, 500);
        let off = AdaptConfig::from_json(r#"{"topk": null}"#).unwrap();
        assert_eq!(off.topk, None);
        assert!(AdaptConfig::from_json(r#"{"alhpa": 0.5}"#).is_err());
        assert!(AdaptConfig::from_json(r#"{"tau": 1.0}"#).is_err());
        let sites =
            AdaptConfig::from_json(r#"{"lora_sites": {"encoders": ["text"], "projections": ["query"]}}"#).unwrap();
        assert_eq!(sites.lora_config().sites().unwrap().len(), 4);
    }

    #[test]
    fn warmup_is_linear_then_flat() {
        let cfg = AdaptConfig {
            lr: 1.0,
            warmup_lr: 0.0,
            warmup_steps: 4,
            ..AdaptConfig::default()
        };
        let lrs: Vec<f64> = (0..6).map(|i| cfg.lr_at(i)).collect();
        assert_eq!(lrs, [0.0, 0.25, 0.5, 0.75, 1.0, 1.0]);
        let none = AdaptConfig { warmup_steps: 0, ..cfg };
        assert_eq!(none.lr_at(0), 1.0);
    }
}
