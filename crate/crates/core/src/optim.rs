//! Adam with bias-corrected moments and no weight decay.

use crate::backbone::Param;
use crate::error::{Error, Result};
use crate::tensor::Element;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPS: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct Adam<T> {
    pub step: u64,
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
}

impl<T: Element> Adam<T> {
    pub fn new(params: &[Param<T>]) -> Self {
        let zeros: Vec<Vec<T>> = params.iter().map(|p| vec![T::zero(); p.value.numel()]).collect();
        Self {
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// One update of every parameter from its gradient.
    pub fn update(&mut self, params: &mut [Param<T>], grads: &[Vec<T>], lr: f64) -> Result<()> {
        if grads.len() != params.len() || self.m.len() != params.len() {
            return Err(Error::arg(format!(
                "{} gradients and {} moment slots for {} parameters",
                grads.len(),
                self.m.len(),
                params.len()
            )));
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - BETA1.powi(t);
        let c2 = 1.0 - BETA2.powi(t);
        for (i, p) in params.iter_mut().enumerate() {
            let (m, v, g) = (&mut self.m[i], &mut self.v[i], &grads[i]);
            if g.len() != m.len() {
                return Err(Error::shape(format!("gradient for {} has {} entries", p.name, g.len())));
            }
            for (j, w) in p.value.data_mut().iter_mut().enumerate() {
                let gj = g[j].as_f64();
                let mj = BETA1 * m[j].as_f64() + (1.0 - BETA1) * gj;
                let vj = BETA2 * v[j].as_f64() + (1.0 - BETA2) * gj * gj;
                m[j] = T::of(mj);
                v[j] = T::of(vj);
                let step = lr * (mj / c1) / ((vj / c2).sqrt() + EPS);
                *w = T::of(w.as_f64() - step);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn one(value: f64) -> Vec<Param<f64>> {
        vec![Param {
            name: "w".into(),
            value: Tensor::from_f64(&[1], &[value]).unwrap(),
        }]
    }

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        let mut p = one(1.0);
        let mut adam = Adam::new(&p);
        adam.update(&mut p, &[vec![0.3]], 0.01).unwrap();
        let expected = 1.0 - 0.01 * 0.3 / (0.3 + EPS);
        assert!((p[0].value.data()[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn matches_reference_recurrence() {
        let mut p = one(0.5);
        let mut adam = Adam::new(&p);
        let grads = [0.2, -0.1, 0.4, 0.0, -0.3];
        let (mut w, mut m, mut v) = (0.5f64, 0.0f64, 0.0f64);
        for (t, &g) in grads.iter().enumerate() {
            adam.update(&mut p, &[vec![g]], 1e-3).unwrap();
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            let mh = m / (1.0 - 0.9f64.powi(t as i32 + 1));
            let vh = v / (1.0 - 0.999f64.powi(t as i32 + 1));
            w -= 1e-3 * mh / (vh.sqrt() + 1e-8);
        }
        assert!((p[0].value.data()[0] - w).abs() < 1e-14);
        assert_eq!(adam.step, 5);
    }

    #[test]
    fn converges_on_quadratic() {
        let mut p = one(3.0);
        let mut adam = Adam::new(&p);
        for _ in 0..2000 {
            let w = p[0].value.data()[0];
            adam.update(&mut p, &[vec![2.0 * (w - 1.0)]], 0.05).unwrap();
        }
        assert!((p[0].value.data()[0] - 1.0).abs() < 1e-3);
    }

    #[test]
    fn gradient_count_mismatch_is_rejected() {
        let mut p = one(0.0);
        let mut adam = Adam::new(&p);
        assert!(adam.update(&mut p, &[], 0.1).is_err());
    }
}
