//! Adam.

use super::tensor::Tensor;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl Adam {
    pub fn new(lr: f64, params: &[Tensor]) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
        }
    }

    /// One bias-corrected update. A non-finite gradient aborts the step before
    /// anything (parameters, moments, step count) changes.
    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != params.len() {
            return Err(Error::Shape(format!(
                "{} parameters, {} gradients, {} moment slots",
                params.len(),
                grads.len(),
                self.m.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != g.shape() || p.shape() != self.m[i].shape() {
                return Err(Error::Shape(format!(
                    "parameter {i}: {:?} vs gradient {:?}",
                    p.shape(),
                    g.shape()
                )));
            }
            if !g.is_finite() {
                return Err(Error::NonFinite(format!("gradient of parameter {i}")));
            }
        }
        self.step += 1;
        let t = self.step as f64;
        let c1 = 1.0 - self.beta1.powf(t);
        let c2 = 1.0 - self.beta2.powf(t);
        for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            let (pd, md, vd) = (p.data_mut(), m.data_mut(), v.data_mut());
            for (j, &gj) in g.data().iter().enumerate() {
                md[j] = self.beta1 * md[j] + (1.0 - self.beta1) * gj;
                vd[j] = self.beta2 * vd[j] + (1.0 - self.beta2) * gj * gj;
                let mh = md[j] / c1;
                let vh = vd[j] / c2;
                pd[j] -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_keeps_parameters() {
        let mut p = vec![Tensor::scalar(1.5)];
        let mut opt = Adam::new(0.1, &p);
        opt.step(&mut p, &[Tensor::scalar(0.0)]).unwrap();
        assert_eq!(p[0].item(), 1.5);
        assert_eq!(opt.step, 1);
    }

    #[test]
    fn constant_gradient_descends() {
        let mut p = vec![Tensor::scalar(0.0)];
        let mut opt = Adam::new(0.01, &p);
        for _ in 0..50 {
            opt.step(&mut p, &[Tensor::scalar(2.0)]).unwrap();
        }
        assert!(p[0].item() < 0.0);
    }

    #[test]
    fn quadratic_converges() {
        let mut p = vec![Tensor::scalar(0.0)];
        let mut opt = Adam::new(0.1, &p);
        for _ in 0..500 {
            let g = 2.0 * (p[0].item() - 3.0);
            opt.step(&mut p, &[Tensor::scalar(g)]).unwrap();
        }
        assert!((p[0].item() - 3.0).abs() < 1e-3, "{}", p[0].item());
    }

    #[test]
    fn non_finite_gradient_aborts() {
        let mut p = vec![Tensor::scalar(1.0)];
        let mut opt = Adam::new(0.1, &p);
        assert!(opt.step(&mut p, &[Tensor::scalar(f64::NAN)]).is_err());
        assert_eq!(p[0].item(), 1.0);
        assert_eq!(opt.step, 0);
    }
}
