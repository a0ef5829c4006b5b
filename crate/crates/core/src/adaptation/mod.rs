//! Student-teacher self-training on unlabeled target images.
//!
//! The teacher labels each image with its concept-expanded vocabulary, the
//! student learns from a patch-masked copy through its low-rank adapters, and
//! the teacher follows the student by an exponential moving average.

mod config;
mod optim;
mod train;

use rand::Rng;
use rand_distr::Open01;

use crate::error::{shape_err, Error, Result};
use crate::lora::LoraSet;
use crate::model::{forward, BackboneParams, ImageSample, Vocabulary};
use crate::numerics::{Tensor, IGNORE, LOG_EPS};

pub use config::{AdaptConfig, LoraSites};
pub use optim::AdamW;
pub use train::{
    adapt_step, min_entropy_adapt, min_entropy_step, run_adaptation, write_metrics_csv, AdaptationState, StepMetrics,
};

/// Hard labels `[H, W]`, each a class index or [`IGNORE`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PseudoLabelMap {
    height: usize,
    width: usize,
    labels: Vec<u32>,
}

impl PseudoLabelMap {
    /// Checks the size and that every label is below `classes` or ignored.
    pub fn new(height: usize, width: usize, labels: Vec<u32>, classes: usize) -> Result<Self> {
        if labels.len() != height * width {
            return shape_err(format!("{} labels for a {height}x{width} map", labels.len()));
        }
        if let Some(l) = labels.iter().find(|&&l| l != IGNORE && l as usize >= classes) {
            return Err(Error::Validation(format!("label {l} outside {classes} classes")));
        }
        Ok(Self::from_raw(height, width, labels))
    }

    pub(crate) fn from_raw(height: usize, width: usize, labels: Vec<u32>) -> Self {
        debug_assert_eq!(labels.len(), height * width);
        Self { height, width, labels }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn ignored_fraction(&self) -> f64 {
        if self.labels.is_empty() {
            return 0.0;
        }
        self.labels.iter().filter(|&&l| l == IGNORE).count() as f64 / self.labels.len() as f64
    }

    pub fn all_ignored(&self) -> bool {
        self.labels.iter().all(|&l| l == IGNORE)
    }
}

fn hwn(probs: &Tensor) -> Result<(usize, usize, usize)> {
    match probs.shape() {
        &[h, w, n] if n > 0 => Ok((h, w, n)),
        s => shape_err(format!("expected [H, W, N] probabilities, got {s:?}")),
    }
}

/// Per-pixel argmax; the lowest index wins ties.
pub fn generate_pseudo_labels(teacher_probs: &Tensor) -> Result<PseudoLabelMap> {
    let (h, w, _) = hwn(teacher_probs)?;
    let labels = teacher_probs
        .rows()
        .map(|row| {
            let mut best = 0;
            for (i, &p) in row.iter().enumerate() {
                if p > row[best] {
                    best = i;
                }
            }
            best as u32
        })
        .collect();
    Ok(PseudoLabelMap::from_raw(h, w, labels))
}

/// Fraction `q` of pixels whose top probability exceeds `tau`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ConfidenceWeight {
    pub q: f64,
    pub tau: f64,
}

pub fn confidence_weight(teacher_probs: &Tensor, tau: f64) -> Result<ConfidenceWeight> {
    let (h, w, _) = hwn(teacher_probs)?;
    let confident = teacher_probs
        .rows()
        .filter(|row| row.iter().copied().fold(f64::NEG_INFINITY, f64::max) > tau)
        .count();
    Ok(ConfidenceWeight {
        q: confident as f64 / (h * w) as f64,
        tau,
    })
}

/// Replaces labels of pixels whose top probability is at most `tau` with
/// [`IGNORE`]; the per-pixel alternative to scaling by `q`.
pub fn drop_unconfident(labels: &PseudoLabelMap, teacher_probs: &Tensor, tau: f64) -> Result<PseudoLabelMap> {
    let (h, w, _) = hwn(teacher_probs)?;
    if (h, w) != (labels.height, labels.width) {
        return shape_err("label map and probabilities differ in size");
    }
    let out = labels
        .labels
        .iter()
        .zip(teacher_probs.rows())
        .map(|(&l, row)| {
            if row.iter().copied().fold(f64::NEG_INFINITY, f64::max) > tau {
                l
            } else {
                IGNORE
            }
        })
        .collect();
    Ok(PseudoLabelMap::from_raw(h, w, out))
}

/// Binary pixel mask, constant over `patch × patch` blocks.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchMask {
    height: usize,
    width: usize,
    patch: usize,
    ratio: f64,
    visible: Vec<bool>,
}

impl PatchMask {
    /// Every pixel visible.
    pub fn ones(height: usize, width: usize, patch: usize) -> Self {
        Self {
            height,
            width,
            patch,
            ratio: 0.0,
            visible: vec![true; (height / patch.max(1)) * (width / patch.max(1))],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn patch(&self) -> usize {
        self.patch
    }

    pub fn ratio(&self) -> f64 {
        self.ratio
    }

    /// One flag per patch, row-major.
    pub fn patches(&self) -> &[bool] {
        &self.visible
    }

    pub fn visible_fraction(&self) -> f64 {
        self.visible.iter().filter(|&&v| v).count() as f64 / self.visible.len() as f64
    }

    /// Pixel-level mask `[H, W]` of zeros and ones.
    pub fn to_pixels(&self) -> Tensor {
        let cols = self.width / self.patch;
        let mut data = Vec::with_capacity(self.height * self.width);
        for i in 0..self.height {
            for j in 0..self.width {
                let on = self.visible[(i / self.patch) * cols + j / self.patch];
                data.push(if on { 1.0 } else { 0.0 });
            }
        }
        Tensor::new(vec![self.height, self.width], data).expect("mask shape")
    }

    /// `M ⊙ x` for an `[H, W, C]` image.
    pub fn apply(&self, pixels: &Tensor) -> Result<Tensor> {
        let s = pixels.shape();
        if s.len() != 3 || s[0] != self.height || s[1] != self.width {
            return shape_err(format!("mask {}x{} does not fit image {s:?}", self.height, self.width));
        }
        let c = s[2];
        let mask = self.to_pixels();
        let mut out = pixels.clone();
        for (px, &m) in out.data_mut().chunks_mut(c).zip(mask.data()) {
            if m == 0.0 {
                px.iter_mut().for_each(|v| *v = 0.0);
            }
        }
        Ok(out)
    }
}

/// One uniform draw from `(0, 1)` per patch; the patch stays visible iff the
/// draw exceeds `r`.
pub fn sample_mask<R: Rng + ?Sized>(h: usize, w: usize, b: usize, r: f64, rng: &mut R) -> Result<PatchMask> {
    if b == 0 || h % b != 0 || w % b != 0 {
        return shape_err(format!("{h}x{w} is not divisible into {b}x{b} patches"));
    }
    if !(0.0..=1.0).contains(&r) {
        return Err(Error::Validation(format!("mask ratio {r} outside [0, 1]")));
    }
    let visible = (0..(h / b) * (w / b))
        .map(|_| {
            let v: f64 = rng.sample(Open01);
            v > r
        })
        .collect();
    Ok(PatchMask {
        height: h,
        width: w,
        patch: b,
        ratio: r,
        visible,
    })
}

/// Student probabilities on the masked image `M ⊙ x`.
pub fn masked_forward(
    params: &BackboneParams,
    adapters: Option<&LoraSet>,
    img: &ImageSample,
    mask: &PatchMask,
    vocab: &Vocabulary,
) -> Result<Tensor> {
    let masked = ImageSample::new(mask.apply(img.pixels())?)?;
    forward(&masked, vocab, params, adapters)
}

/// `q` times the summed cross-entropy over non-ignored pixels.
pub fn adaptation_loss(student_probs: &Tensor, p: &PseudoLabelMap, q: ConfidenceWeight) -> Result<f64> {
    let (h, w, n) = hwn(student_probs)?;
    if (h, w) != (p.height, p.width) {
        return shape_err(format!(
            "{h}x{w} probabilities for a {}x{} label map",
            p.height, p.width
        ));
    }
    if q.q == 0.0 {
        return Ok(0.0);
    }
    let mut ce = 0.0;
    for (row, &l) in student_probs.rows().zip(&p.labels) {
        if l == IGNORE {
            continue;
        }
        if l as usize >= n {
            return Err(Error::Contract(format!("label {l} outside {n} classes")));
        }
        ce -= row[l as usize].max(LOG_EPS).ln();
    }
    Ok(q.q * ce)
}

/// `φ ← α φ + (1 − α) θ` over every adapter factor.
pub fn ema_update(phi: &LoraSet, theta: &LoraSet, alpha: f64) -> Result<LoraSet> {
    let mut out = phi.clone();
    ema_in_place(&mut out, theta, alpha)?;
    Ok(out)
}

pub(crate) fn ema_in_place(phi: &mut LoraSet, theta: &LoraSet, alpha: f64) -> Result<()> {
    if !phi.same_structure(theta) {
        return Err(Error::Contract(
            "teacher and student adapters differ in structure".into(),
        ));
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Validation(format!("alpha {alpha} outside [0, 1]")));
    }
    // Written as φ + (1 − α)(θ − φ) so that α = 1 and θ = φ leave φ
    // bit-identical; α = 0 copies θ exactly.
    let step = 1.0 - alpha;
    for (dst, src) in phi
        .trainable_parameters_mut()
        .into_iter()
        .zip(theta.trainable_parameters())
    {
        for (d, &s) in dst.data_mut().iter_mut().zip(src.data()) {
            *d = if alpha == 0.0 { s } else { *d + step * (s - *d) };
        }
    }
    Ok(())
}

/// Mean per-pixel entropy `−Σ p ln p` of `[.., N]` probabilities.
pub fn mean_entropy(probs: &Tensor) -> f64 {
    let n = *probs.shape().last().unwrap_or(&1);
    let rows = probs.len() / n.max(1);
    let total: f64 = probs
        .rows()
        .map(|r| -r.iter().map(|&p| p * p.max(LOG_EPS).ln()).sum::<f64>())
        .sum();
    total / rows.max(1) as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lora::LoraConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn probs(h: usize, w: usize, data: Vec<f64>) -> Tensor {
        let n = data.len() / (h * w);
        Tensor::new(vec![h, w, n], data).unwrap()
    }

    #[test]
    fn argmax_and_ties() {
        assert_eq!(
            generate_pseudo_labels(&probs(1, 1, vec![0.7, 0.3])).unwrap().labels(),
            &[0]
        );
        assert_eq!(
            generate_pseudo_labels(&probs(1, 1, vec![0.5, 0.5])).unwrap().labels(),
            &[0]
        );
        assert_eq!(
            generate_pseudo_labels(&probs(1, 1, vec![0.2, 0.4, 0.4]))
                .unwrap()
                .labels(),
            &[1]
        );
    }

    #[test]
    fn confidence_counts() {
        let p = probs(2, 2, vec![0.95, 0.05, 0.91, 0.09, 0.5, 0.5, 0.01, 0.99]);
        assert_eq!(confidence_weight(&p, 0.9).unwrap().q, 0.75);
        assert_eq!(confidence_weight(&probs(1, 1, vec![0.99, 0.01]), 0.9).unwrap().q, 1.0);
        assert_eq!(confidence_weight(&probs(1, 1, vec![0.6, 0.4]), 0.9).unwrap().q, 0.0);
        let labels = generate_pseudo_labels(&p).unwrap();
        let kept = drop_unconfident(&labels, &p, 0.9).unwrap();
        assert_eq!(kept.labels(), &[0, 0, IGNORE, 1]);
    }

    #[test]
    fn mask_extremes() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = sample_mask(16, 24, 8, 0.0, &mut rng).unwrap();
        assert_eq!(m.visible_fraction(), 1.0);
        let m = sample_mask(16, 24, 8, 1.0, &mut rng).unwrap();
        assert_eq!(m.visible_fraction(), 0.0);
        assert!(sample_mask(16, 20, 8, 0.5, &mut rng).is_err());
    }

    #[test]
    fn mask_is_patch_constant() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let m = sample_mask(16, 16, 4, 0.5, &mut rng).unwrap();
        let px = m.to_pixels();
        for i in 0..16 {
            for j in 0..16 {
                assert_eq!(px.get(&[i, j]), px.get(&[i / 4 * 4, j / 4 * 4]));
            }
        }
        let img = Tensor::full(&[16, 16, 3], 0.5);
        let out = m.apply(&img).unwrap();
        assert_eq!(out.get(&[3, 5, 2]), 0.5 * px.get(&[3, 5]));
    }

    #[test]
    fn loss_by_hand() {
        let p = probs(1, 2, vec![0.5, 0.5, 0.2, 0.8]);
        let labels = PseudoLabelMap::new(1, 2, vec![0, 1], 2).unwrap();
        let q = ConfidenceWeight { q: 0.5, tau: 0.9 };
        let expect = 0.5 * (-(0.5f64).ln() - (0.8f64).ln());
        assert!((adaptation_loss(&p, &labels, q).unwrap() - expect).abs() < 1e-12);
        assert!((expect - 0.4581).abs() < 1e-4);
        let zero = ConfidenceWeight { q: 0.0, tau: 0.9 };
        assert_eq!(adaptation_loss(&p, &labels, zero).unwrap(), 0.0);
        let ignored = PseudoLabelMap::new(1, 2, vec![IGNORE, IGNORE], 2).unwrap();
        assert_eq!(adaptation_loss(&p, &ignored, q).unwrap(), 0.0);
        let perfect = probs(1, 2, vec![1.0, 0.0, 0.0, 1.0]);
        assert_eq!(adaptation_loss(&perfect, &labels, q).unwrap(), 0.0);
    }

    #[test]
    fn ema_arithmetic() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cfg = LoraConfig {
            blocks: 1,
            ..LoraConfig::default()
        };
        let mut phi = LoraSet::init(&cfg, 4, &mut rng).unwrap();
        for t in phi.trainable_parameters_mut() {
            *t = Tensor::full(t.shape(), 1.0);
        }
        let mut theta = phi.clone();
        for t in theta.trainable_parameters_mut() {
            *t = Tensor::zeros(t.shape());
        }
        assert_eq!(ema_update(&phi, &theta, 1.0).unwrap(), phi);
        assert_eq!(ema_update(&phi, &theta, 0.0).unwrap(), theta);
        let mixed = ema_update(&phi, &theta, 0.99).unwrap();
        assert!(mixed
            .trainable_parameters()
            .iter()
            .all(|t| t.data().iter().all(|&v| v == 0.99)));
        assert!(ema_update(&phi, &LoraSet::empty(), 0.5).is_err());
    }

    #[test]
    fn entropy_bounds() {
        let uniform = Tensor::full(&[2, 2, 4], 0.25);
        assert!((mean_entropy(&uniform) - 4f64.ln()).abs() < 1e-12);
        assert_eq!(mean_entropy(&probs(1, 1, vec![0.0, 1.0])), 0.0);
    }
}
