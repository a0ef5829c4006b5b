use crate::error::{shape_err, Result};
use crate::numerics::Tensor;

/// Adaptive moments with decoupled weight decay.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: u64,
}

impl AdamW {
    /// Zero moments shaped like `params`.
    pub fn new(params: &[&Tensor]) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            m: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, params: Vec<&mut Tensor>, grads: &[Tensor], lr: f64) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return shape_err(format!(
                "optimizer tracks {} tensors, got {} parameters and {} gradients",
                self.m.len(),
                params.len(),
                grads.len()
            ));
        }
        for ((p, g), m) in params.iter().zip(grads).zip(&self.m) {
            if p.shape() != g.shape() || p.shape() != m.shape() {
                return shape_err(format!("gradient {:?} for parameter {:?}", g.shape(), p.shape()));
            }
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (((p, g), m), v) in params.into_iter().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            let p = p.data_mut();
            for i in 0..p.len() {
                let gi = g.data()[i];
                let mi = &mut m.data_mut()[i];
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                let vi = &mut v.data_mut()[i];
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                let update = (*mi / bc1) / ((*vi / bc2).sqrt() + self.eps);
                p[i] -= lr * (update + self.weight_decay * p[i]);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = Tensor::vector(vec![1.0, -2.0, 0.5]);
        let mut opt = AdamW::new(&[&p]);
        let g = Tensor::vector(vec![0.3, -4.0, 0.0]);
        opt.step(vec![&mut p], &[g], 0.1).unwrap();
        // Bias-corrected first step is lr · sign(g) up to eps.
        assert!((p.data()[0] - 0.9).abs() < 1e-6);
        assert!((p.data()[1] + 1.9).abs() < 1e-6);
        assert_eq!(p.data()[2], 0.5);
    }

    #[test]
    fn zero_lr_is_a_no_op() {
        let mut p = Tensor::vector(vec![1.0, 2.0]);
        let before = p.clone();
        let mut opt = AdamW::new(&[&p]);
        opt.step(vec![&mut p], &[Tensor::vector(vec![5.0, -1.0])], 0.0).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut p = Tensor::vector(vec![3.0, -1.0]);
        let mut opt = AdamW::new(&[&p]);
        for _ in 0..2000 {
            let g = p.map(|x| 2.0 * x);
            opt.step(vec![&mut p], &[g], 0.01).unwrap();
        }
        assert!(p.max_abs() < 1e-2);
    }
}
