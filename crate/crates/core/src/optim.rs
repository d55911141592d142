use serde::{Deserialize, Serialize};

use crate::autodiff::{Real, Tensor, Var};
use crate::model::ParamSet;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-4,
            beta1: 0.5,
            beta2: 0.9,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction. Moments are kept per parameter, in parameter order.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam<T: Real> {
    pub config: AdamConfig,
    pub steps: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(config: AdamConfig, params: &ParamSet<T>) -> Self {
        let zeros = || params.vars().iter().map(|p| Tensor::zeros(p.shape())).collect();
        Adam {
            config,
            steps: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    /// Applies one update. Parameters without a gradient keep their value but
    /// their moments still decay.
    pub fn step(&mut self, params: &mut ParamSet<T>, grads: &[Option<Var<T>>]) {
        assert_eq!(grads.len(), params.len(), "one gradient slot per parameter");
        self.steps += 1;
        let c = self.config;
        let (b1, b2) = (T::of(c.beta1), T::of(c.beta2));
        let corr1 = T::of(1.0 - c.beta1.powi(self.steps as i32));
        let corr2 = T::of(1.0 - c.beta2.powi(self.steps as i32));
        let (lr, eps) = (T::of(c.lr), T::of(c.eps));
        for (i, g) in grads.iter().enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let zero;
            let g = match g {
                Some(g) => g.value().data(),
                None => {
                    zero = vec![T::zero(); m.numel()];
                    &zero[..]
                }
            };
            let mut p = params.vars()[i].value().clone();
            for (((pv, mv), vv), &gv) in p.data_mut().iter_mut().zip(m.data_mut()).zip(v.data_mut()).zip(g) {
                *mv = b1 * *mv + (T::one() - b1) * gv;
                *vv = b2 * *vv + (T::one() - b2) * gv * gv;
                let step = lr * (*mv / corr1) / ((*vv / corr2).sqrt() + eps);
                *pv = *pv - step;
            }
            params.set(i, p);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_param(v: f64) -> ParamSet<f64> {
        let mut p = ParamSet::default();
        p.push("x", Tensor::full([1, 1, 1, 2], v));
        p
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut p = one_param(1.0);
        let mut opt = Adam::new(AdamConfig { lr: 0.1, ..Default::default() }, &p);
        let g = Var::constant(Tensor::from_vec([1, 1, 1, 2], vec![3.0, -0.5]).unwrap());
        opt.step(&mut p, &[Some(g)]);
        let x = p.vars()[0].value().data();
        assert!((x[0] - 0.9).abs() < 1e-7 && (x[1] - 1.1).abs() < 1e-7);
        assert_eq!(opt.steps, 1);
    }

    #[test]
    fn zero_learning_rate_keeps_parameters() {
        let mut p = one_param(0.25);
        let mut opt = Adam::new(AdamConfig { lr: 0.0, ..Default::default() }, &p);
        let g = Var::constant(Tensor::full([1, 1, 1, 2], 2.0));
        for _ in 0..3 {
            opt.step(&mut p, &[Some(g.clone())]);
        }
        assert_eq!(p.vars()[0].value().data(), &[0.25, 0.25]);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut p = one_param(2.0);
        let mut opt = Adam::new(AdamConfig { lr: 0.05, ..Default::default() }, &p);
        for _ in 0..2000 {
            let g = p.vars()[0].value().map(|x| 2.0 * (x + 1.0));
            opt.step(&mut p, &[Some(Var::constant(g))]);
        }
        assert!(p.vars()[0].value().data().iter().all(|x| (x + 1.0).abs() < 0.1));
    }
}
