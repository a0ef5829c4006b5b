use std::fmt;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{shape_err, Error, Result};

/// Epsilon used to clamp probabilities inside logarithms.
pub const LOG_EPS: f64 = 1e-12;

/// Dense row-major tensor of `f64`.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.data.len() <= 16 {
            write!(f, "Tensor{:?} {:?}", self.shape, self.data)
        } else {
            write!(f, "Tensor{:?} [{} values]", self.shape, self.data.len())
        }
    }
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return shape_err(format!(
                "shape {shape:?} holds {n} values but {} were given",
                data.len()
            ));
        }
        Ok(Self { shape, data })
    }

    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    /// Samples i.i.d. normal entries.
    pub fn randn<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        let normal = Normal::new(0.0, std).expect("finite std");
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: (0..n).map(|_| normal.sample(rng)).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        Tensor::new(shape.to_vec(), self.data.clone())
    }

    fn offset(&self, index: &[usize]) -> usize {
        assert_eq!(index.len(), self.shape.len(), "index rank mismatch");
        let mut off = 0;
        for (&i, &n) in index.iter().zip(&self.shape) {
            assert!(i < n, "index {index:?} out of bounds for {:?}", self.shape);
            off = off * n + i;
        }
        off
    }

    pub fn get(&self, index: &[usize]) -> f64 {
        self.data[self.offset(index)]
    }

    pub fn set(&mut self, index: &[usize], value: f64) {
        let off = self.offset(index);
        self.data[off] = value;
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, x| m.max(x.abs()))
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }

    /// Permutes axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&self, perm: &[usize]) -> Result<Self> {
        let rank = self.shape.len();
        let mut seen = vec![false; rank];
        if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
            return shape_err(format!("invalid permutation {perm:?} for rank {rank}"));
        }
        Ok(permute_raw(self, perm))
    }

    /// Gathers `indices` along `axis`, in the order given.
    pub fn index_select(&self, axis: usize, indices: &[usize]) -> Result<Self> {
        if axis >= self.rank() {
            return shape_err(format!("axis {axis} out of range for {:?}", self.shape));
        }
        let extent = self.shape[axis];
        if let Some(&bad) = indices.iter().find(|&&i| i >= extent) {
            return Err(Error::Contract(format!(
                "index {bad} out of range for axis {axis} of extent {extent}"
            )));
        }
        let (outer, inner) = split_strides(&self.shape, axis);
        let mut shape = self.shape.clone();
        shape[axis] = indices.len();
        let mut data = Vec::with_capacity(outer * indices.len() * inner);
        for o in 0..outer {
            for &i in indices {
                let start = (o * extent + i) * inner;
                data.extend_from_slice(&self.data[start..start + inner]);
            }
        }
        Ok(Self { shape, data })
    }

    /// Softmax along `axis`, stabilised by subtracting the slice maximum.
    pub fn softmax(&self, axis: usize) -> Result<Self> {
        if axis >= self.rank() {
            return shape_err(format!("softmax axis {axis} invalid for shape {:?}", self.shape));
        }
        let extent = self.shape[axis];
        let (outer, inner) = split_strides(&self.shape, axis);
        let mut out = self.data.clone();
        let mut buf = vec![0.0; extent];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * extent * inner + i;
                for (k, b) in buf.iter_mut().enumerate() {
                    *b = self.data[base + k * inner];
                }
                softmax_in_place(&mut buf);
                for (k, b) in buf.iter().enumerate() {
                    out[base + k * inner] = *b;
                }
            }
        }
        Ok(Self {
            shape: self.shape.clone(),
            data: out,
        })
    }

    /// Splits a tensor into `[rows, last]` views.
    pub fn rows(&self) -> std::slice::Chunks<'_, f64> {
        let last = self.shape.last().copied().unwrap_or(1).max(1);
        self.data.chunks(last)
    }
}

/// Product of extents before and after `axis`.
pub(crate) fn split_strides(shape: &[usize], axis: usize) -> (usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, inner)
}

pub(crate) fn permute_raw(t: &Tensor, perm: &[usize]) -> Tensor {
    let rank = t.shape.len();
    let out_shape: Vec<usize> = perm.iter().map(|&p| t.shape[p]).collect();
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * t.shape[i + 1];
    }
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let n = t.data.len();
    let mut data = Vec::with_capacity(n);
    if n == 0 {
        return Tensor::from_parts(out_shape, data);
    }
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    for _ in 0..n {
        data.push(t.data[off]);
        for d in (0..rank).rev() {
            idx[d] += 1;
            off += strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            off -= strides[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    Tensor::from_parts(out_shape, data)
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in row.iter_mut() {
        *x /= sum;
    }
}

/// Softmax along `axis`.
pub fn softmax(logits: &Tensor, axis: usize) -> Result<Tensor> {
    logits.softmax(axis)
}

/// Cosine similarity of two equal-length vectors; zero vectors are rejected.
pub fn cosine_similarity(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.rank() != 1 || a.shape() != b.shape() {
        return shape_err(format!(
            "cosine similarity needs equal 1-d shapes, got {:?} and {:?}",
            a.shape(),
            b.shape()
        ));
    }
    let dot: f64 = a.data.iter().zip(&b.data).map(|(x, y)| x * y).sum();
    let na = a.data.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.data.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Degenerate("cosine similarity of a zero vector".into()));
    }
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

/// `-Σ y log ŷ` over all pixels and classes.
///
/// `pred` and `target` share a `[.., C]` shape. A target row that is all
/// zeros marks an ignored pixel. Predicted probabilities are clamped to
/// [`LOG_EPS`] inside the logarithm.
pub fn pixelwise_cross_entropy(pred: &Tensor, target: &Tensor) -> Result<f64> {
    if pred.shape() != target.shape() {
        return shape_err(format!(
            "prediction {:?} and target {:?} differ",
            pred.shape(),
            target.shape()
        ));
    }
    Ok(pred
        .data
        .iter()
        .zip(&target.data)
        .filter(|(_, &y)| y != 0.0)
        .map(|(&p, &y)| -y * p.max(LOG_EPS).ln())
        .sum())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_must_match_data() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new(vec![2, 3], vec![0.0; 6]).is_ok());
    }

    #[test]
    fn softmax_examples() {
        let s = softmax(&Tensor::vector(vec![0.0, 0.0]), 0).unwrap();
        assert_eq!(s.data(), &[0.5, 0.5]);

        // e^0 / (e^0 + e^{ln 3}) by direct exponentiation
        let ln3 = 3f64.ln();
        let brute = [1.0 / (1.0 + ln3.exp()), ln3.exp() / (1.0 + ln3.exp())];
        let s = softmax(&Tensor::vector(vec![0.0, ln3]), 0).unwrap();
        assert!((s.data()[0] - 0.25).abs() < 1e-15);
        assert!((s.data()[1] - 0.75).abs() < 1e-15);
        assert!((s.data()[0] - brute[0]).abs() < 1e-15);

        assert!(matches!(softmax(&Tensor::vector(vec![1.0]), 1), Err(Error::Shape(_))));
    }

    #[test]
    fn softmax_inner_axis() {
        let t = Tensor::new(vec![2, 2], vec![0.0, 1.0, 0.0, 1.0]).unwrap();
        let s = t.softmax(0).unwrap();
        assert_eq!(s.data(), &[0.5, 0.5, 0.5, 0.5]);
    }

    #[test]
    fn cosine_examples() {
        let v = |d: &[f64]| Tensor::vector(d.to_vec());
        assert_eq!(cosine_similarity(&v(&[1.0, 0.0]), &v(&[1.0, 0.0])).unwrap(), 1.0);
        assert_eq!(cosine_similarity(&v(&[1.0, 0.0]), &v(&[0.0, 1.0])).unwrap(), 0.0);
        // dot = 4, |a||b| = 5
        let oracle = (1.0 * 2.0 + 2.0 * 1.0) / (5f64.sqrt() * 5f64.sqrt());
        let c = cosine_similarity(&v(&[1.0, 2.0]), &v(&[2.0, 1.0])).unwrap();
        assert!((c - 0.8).abs() < 1e-12 && (c - oracle).abs() < 1e-15);
        assert!(matches!(
            cosine_similarity(&v(&[0.0, 0.0]), &v(&[1.0, 0.0])),
            Err(Error::Degenerate(_))
        ));
    }

    #[test]
    fn cross_entropy_examples() {
        let one_hot = Tensor::new(vec![1, 2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        assert_eq!(pixelwise_cross_entropy(&one_hot, &one_hot).unwrap(), 0.0);

        let uniform = Tensor::full(&[1, 1, 4], 0.25);
        let target = Tensor::new(vec![1, 1, 4], vec![0.0, 0.0, 1.0, 0.0]).unwrap();
        let ce = pixelwise_cross_entropy(&uniform, &target).unwrap();
        assert!((ce - 4f64.ln()).abs() < 1e-12);

        // 2x2 map, two classes, target probabilities 0.5, 0.25, 0.8, 1.0
        let pred = Tensor::new(vec![2, 2, 2], vec![0.5, 0.5, 0.25, 0.75, 0.8, 0.2, 0.0, 1.0]).unwrap();
        let target = Tensor::new(vec![2, 2, 2], vec![1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 0.0, 1.0]).unwrap();
        let oracle: f64 = [0.5f64, 0.25, 0.8, 1.0].iter().map(|p| -p.ln()).sum();
        let ce = pixelwise_cross_entropy(&pred, &target).unwrap();
        assert!((ce - oracle).abs() < 1e-12);
        assert!((ce - 2.3026).abs() < 1e-4);

        assert!(pixelwise_cross_entropy(&pred, &uniform).is_err());
    }

    #[test]
    fn cross_entropy_clamps_zero_probability() {
        let pred = Tensor::new(vec![1, 2], vec![0.0, 1.0]).unwrap();
        let target = Tensor::new(vec![1, 2], vec![1.0, 0.0]).unwrap();
        let ce = pixelwise_cross_entropy(&pred, &target).unwrap();
        assert!((ce + LOG_EPS.ln()).abs() < 1e-9);
    }

    #[test]
    fn ignored_rows_contribute_nothing() {
        let pred = Tensor::new(vec![2, 2], vec![0.5, 0.5, 0.1, 0.9]).unwrap();
        let target = Tensor::new(vec![2, 2], vec![0.0, 0.0, 0.0, 1.0]).unwrap();
        let ce = pixelwise_cross_entropy(&pred, &target).unwrap();
        assert!((ce + 0.9f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn permute_and_select() {
        let t = Tensor::new(vec![2, 3], (0..6).map(f64::from).collect()).unwrap();
        let p = t.permute(&[1, 0]).unwrap();
        assert_eq!(p.shape(), &[3, 2]);
        assert_eq!(p.data(), &[0.0, 3.0, 1.0, 4.0, 2.0, 5.0]);
        let s = t.index_select(1, &[2, 0]).unwrap();
        assert_eq!(s.data(), &[2.0, 0.0, 5.0, 3.0]);
        assert!(matches!(t.index_select(1, &[3]), Err(Error::Contract(_))));
        assert!(t.permute(&[0, 0]).is_err());
    }
}
