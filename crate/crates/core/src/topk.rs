//! Per-image class pruning driven by mean teacher activation.

use rand::seq::index;
use rand::Rng;

use crate::adaptation::PseudoLabelMap;
use crate::error::{shape_err, Error, Result};
use crate::model::CostVolume;
use crate::numerics::{Tensor, IGNORE};

/// Kept classes, best first.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClassSelection {
    selected: Vec<usize>,
    classes: usize,
}

impl ClassSelection {
    pub fn new(selected: Vec<usize>, classes: usize) -> Result<Self> {
        let mut seen = vec![false; classes];
        for &i in &selected {
            if i >= classes {
                return Err(Error::Contract(format!("class {i} outside {classes} classes")));
            }
            if std::mem::replace(&mut seen[i], true) {
                return Err(Error::Contract(format!("class {i} selected twice")));
            }
        }
        if selected.is_empty() {
            return Err(Error::Contract("empty class selection".into()));
        }
        Ok(Self { selected, classes })
    }

    /// Every class in index order.
    pub fn all(classes: usize) -> Self {
        Self {
            selected: (0..classes).collect(),
            classes,
        }
    }

    pub fn selected(&self) -> &[usize] {
        &self.selected
    }

    pub fn k(&self) -> usize {
        self.selected.len()
    }

    /// `N_c` of the vocabulary the selection indexes into.
    pub fn classes(&self) -> usize {
        self.classes
    }

    /// Position of `class` within the selection.
    pub fn position(&self, class: usize) -> Option<usize> {
        self.selected.iter().position(|&c| c == class)
    }
}

/// Mean probability of each class over all pixels of `[.., N]`.
pub fn class_means(probs: &Tensor) -> Result<Vec<f64>> {
    let Some(&n) = probs.shape().last() else {
        return shape_err("class means of a scalar");
    };
    if n == 0 || probs.is_empty() {
        return shape_err(format!("class means of an empty tensor {:?}", probs.shape()));
    }
    let mut sums = vec![0.0; n];
    for row in probs.rows() {
        for (s, v) in sums.iter_mut().zip(row) {
            *s += v;
        }
    }
    let pixels = (probs.len() / n) as f64;
    Ok(sums.into_iter().map(|s| s / pixels).collect())
}

/// The `min(k, N)` classes with the largest mean activation, in descending
/// order. Equal means go to the lower class index.
pub fn select_topk(teacher_probs: &Tensor, k: usize) -> Result<ClassSelection> {
    if k == 0 {
        return Err(Error::Contract("top-k needs k >= 1".into()));
    }
    let means = class_means(teacher_probs)?;
    let mut order: Vec<usize> = (0..means.len()).collect();
    order.sort_by(|&a, &b| means[b].total_cmp(&means[a]).then(a.cmp(&b)));
    order.truncate(k.min(means.len()));
    Ok(ClassSelection {
        selected: order,
        classes: means.len(),
    })
}

/// Restricts the class axis of `cv` to the selection, in selection order.
pub fn prune_cost_volume(cv: &CostVolume, sel: &ClassSelection) -> Result<CostVolume> {
    if cv.classes() != sel.classes {
        return Err(Error::Contract(format!(
            "cost volume has {} classes, selection indexes {}",
            cv.classes(),
            sel.classes
        )));
    }
    CostVolume::new(cv.values.index_select(3, &sel.selected)?)
}

/// Relabels pixels to their class's position in `sel`; pixels of unselected
/// classes become [`IGNORE`].
pub fn remap_pseudo_labels(p: &PseudoLabelMap, sel: &ClassSelection) -> PseudoLabelMap {
    let mut lookup = vec![IGNORE; sel.classes];
    for (pos, &c) in sel.selected.iter().enumerate() {
        lookup[c] = pos as u32;
    }
    let labels = p
        .labels()
        .iter()
        .map(|&l| lookup.get(l as usize).copied().unwrap_or(IGNORE))
        .collect();
    PseudoLabelMap::from_raw(p.height(), p.width(), labels)
}

/// Maps remapped labels back to original class indices.
pub fn unmap_pseudo_labels(p: &PseudoLabelMap, sel: &ClassSelection) -> PseudoLabelMap {
    let labels = p
        .labels()
        .iter()
        .map(|&l| sel.selected.get(l as usize).map_or(IGNORE, |&c| c as u32))
        .collect();
    PseudoLabelMap::from_raw(p.height(), p.width(), labels)
}

/// Replaces the `⌊fraction·K⌋` lowest-ranked entries with distinct classes
/// drawn uniformly from outside the selection. Fewer are replaced when the
/// pool of unselected classes is too small.
pub fn randomized_selection<R: Rng + ?Sized>(
    sel: &ClassSelection,
    fraction: f64,
    rng: &mut R,
) -> Result<ClassSelection> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::Validation(format!(
            "replacement fraction {fraction} outside [0, 1]"
        )));
    }
    let k = sel.k();
    let pool: Vec<usize> = (0..sel.classes).filter(|c| !sel.selected.contains(c)).collect();
    let n = ((fraction * k as f64 + 1e-9).floor() as usize).min(pool.len());
    let mut selected = sel.selected.clone();
    if n == 0 {
        return Ok(sel.clone());
    }
    let draws = index::sample(rng, pool.len(), n);
    for (slot, d) in (k - n..k).zip(draws.iter()) {
        selected[slot] = pool[d];
    }
    Ok(ClassSelection {
        selected,
        classes: sel.classes,
    })
}
