//! Training objectives: WGAN-GP critic terms, gradient penalty, spatial
//! attention and domain adaptation losses, pixel loss, and the combined
//! critic and generator objectives.
//!
//! The attention losses average squared differences per pixel. The pixel
//! loss sums them over each image by default, which keeps `lambda_p` strong
//! enough against a unit-gradient critic; a per-pixel mean is selectable.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::ops;
use crate::autodiff::{grad, Real, Tensor, Var};
use crate::error::{Error, Result};

/// How the pixel loss reduces squared differences within one image.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PixelReduction {
    /// Squared 2-norm of the whole image.
    #[default]
    Sum,
    /// Mean over pixels.
    Mean,
}

impl fmt::Display for PixelReduction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PixelReduction::Sum => "sum",
            PixelReduction::Mean => "mean",
        })
    }
}

impl FromStr for PixelReduction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sum" => Ok(PixelReduction::Sum),
            "mean" => Ok(PixelReduction::Mean),
            other => Err(Error::Config(format!("pixel reduction must be `sum` or `mean`, got {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_gp: f64,
    pub lambda_sa: f64,
    pub lambda_da: f64,
    pub lambda_p: f64,
    #[serde(default)]
    pub pixel_reduction: PixelReduction,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_gp: 10.0,
            lambda_sa: 0.1,
            lambda_da: 0.1,
            lambda_p: 100.0,
            pixel_reduction: PixelReduction::Sum,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.lambda_gp, self.lambda_sa, self.lambda_da, self.lambda_p];
        if all.iter().all(|v| v.is_finite() && *v >= 0.0) {
            Ok(())
        } else {
            Err(Error::Config(format!("loss weights must be nonnegative, got {all:?}")))
        }
    }
}

/// Per-step loss terms, one JSON line each in the training log.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub step: u64,
    /// `mean D(real) - mean D(fake)` on the critic batch.
    pub wasserstein_gap: f64,
    pub gradient_penalty: f64,
    /// Mean `||grad D(x_tilde)||` over the interpolated samples.
    pub critic_grad_norm: f64,
    pub spatial_attention: f64,
    pub domain_adaptation: f64,
    pub pixel: f64,
    pub critic_total: f64,
    pub generator_adversarial: f64,
    pub generator_total: f64,
}

impl LossReport {
    pub fn values(&self) -> [f64; 9] {
        [
            self.wasserstein_gap,
            self.gradient_penalty,
            self.critic_grad_norm,
            self.spatial_attention,
            self.domain_adaptation,
            self.pixel,
            self.critic_total,
            self.generator_adversarial,
            self.generator_total,
        ]
    }

    pub fn is_finite(&self) -> bool {
        self.values().iter().all(|v| v.is_finite())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("report serializes")
    }
}

fn check_same<T: Real>(what: &str, a: &Var<T>, b: &Var<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch(format!("{what}: {:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

/// Mean over the batch of the per-pixel mean squared difference.
pub fn mean_squared_error<T: Real>(a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
    check_same("mean squared error", a, b)?;
    Ok(ops::mean_all(&ops::square(&ops::sub(a, b))))
}

/// `E ||A_s(x_hat) - A_s(y)||^2`, paired per crop.
pub fn spatial_attention_loss<T: Real>(a_fake: &Var<T>, a_real: &Var<T>) -> Result<Var<T>> {
    mean_squared_error(a_fake, a_real)
}

/// `E ||A_s(y_tilde) - A_s(y)||^2`.
pub fn domain_adaptation_loss<T: Real>(a_up: &Var<T>, a_real: &Var<T>) -> Result<Var<T>> {
    mean_squared_error(a_up, a_real)
}

/// `E ||G(z, A_s(y_tilde)) - y||^2`, reduced per image as `reduction` says.
pub fn pixel_loss<T: Real>(x_hat: &Var<T>, y: &Var<T>, reduction: PixelReduction) -> Result<Var<T>> {
    let mse = mean_squared_error(x_hat, y)?;
    Ok(match reduction {
        PixelReduction::Mean => mse,
        PixelReduction::Sum => {
            let [_, c, h, w] = y.shape();
            ops::scale(&mse, T::of((c * h * w) as f64))
        }
    })
}

/// `eps * x + (1 - eps) * x_hat` with one `eps` per sample.
pub fn interpolate<T: Real>(x: &Tensor<T>, x_hat: &Tensor<T>, eps: &[T]) -> Result<Tensor<T>> {
    if x.shape() != x_hat.shape() || eps.len() != x.shape()[0] {
        return Err(Error::ShapeMismatch(format!(
            "interpolate {:?} and {:?} with {} weights",
            x.shape(),
            x_hat.shape(),
            eps.len()
        )));
    }
    let mut out = x.clone();
    let per = out.numel() / eps.len().max(1);
    for (i, (o, &h)) in out.data_mut().iter_mut().zip(x_hat.data()).enumerate() {
        let e = eps[i / per];
        *o = e * *o + (T::one() - e) * h;
    }
    Ok(out)
}

pub struct GradientPenalty<T: Real> {
    /// `mean_n (||grad D(x_tilde_n)||_2 - 1)^2`, differentiable w.r.t. critic parameters.
    pub value: Var<T>,
    /// Per-sample gradient norms.
    pub norms: Vec<f64>,
}

/// WGAN-GP penalty on samples interpolated between `x` and `x_hat`.
///
/// `critic` maps a batch `[n, 1, h, w]` to scores `[n, 1, 1, 1]`. The input
/// gradient is taken with `create_graph`, so the penalty can be
/// back-propagated into the critic's parameters.
pub fn gradient_penalty<T: Real>(
    critic: impl Fn(&Var<T>) -> Result<Var<T>>,
    x: &Tensor<T>,
    x_hat: &Tensor<T>,
    eps: &[T],
) -> Result<GradientPenalty<T>> {
    let x_tilde = Var::leaf(interpolate(x, x_hat, eps)?);
    let score = critic(&x_tilde)?;
    let n = x.shape()[0];
    let Some(g) = grad(&ops::sum_all(&score), &[&x_tilde], true).pop().flatten() else {
        // Constant critic: the gradient is identically zero.
        return Ok(GradientPenalty {
            value: Var::scalar(T::one()),
            norms: vec![0.0; n],
        });
    };
    let norms = ops::sqrt(&ops::sum_to(&ops::square(&g), [n, 1, 1, 1]));
    let value = ops::mean_all(&ops::square(&ops::add_scalar(&norms, -T::one())));
    Ok(GradientPenalty {
        norms: norms.value().data().iter().map(|v| v.f64()).collect(),
        value,
    })
}

/// `mean D(fake) - mean D(real) + l_gp * gp + l_sa * L_sa + l_da * L_da`.
pub fn critic_objective<T: Real>(
    d_real: &Var<T>,
    d_fake: &Var<T>,
    gp: &Var<T>,
    l_sa: &Var<T>,
    l_da: &Var<T>,
    w: &LossWeights,
) -> Var<T> {
    let gap = ops::sub(&ops::mean_all(d_fake), &ops::mean_all(d_real));
    let terms = [(gp, w.lambda_gp), (l_sa, w.lambda_sa), (l_da, w.lambda_da)];
    terms
        .iter()
        .fold(gap, |acc, (v, lambda)| ops::add(&acc, &ops::scale(&ops::mean_all(v), T::of(*lambda))))
}

/// `-mean D(fake) + l_p * L_p`.
pub fn generator_objective<T: Real>(d_fake: &Var<T>, l_pixel: &Var<T>, w: &LossWeights) -> Var<T> {
    ops::add(
        &ops::scale(&ops::mean_all(d_fake), -T::one()),
        &ops::scale(&ops::mean_all(l_pixel), T::of(w.lambda_p)),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: [usize; 4], v: Vec<f64>) -> Var<f64> {
        Var::constant(Tensor::from_vec(shape, v).unwrap())
    }

    #[test]
    fn squared_losses_examples() {
        let a = t([2, 1, 2, 2], vec![0.3; 8]);
        assert_eq!(pixel_loss(&a, &a, PixelReduction::Sum).unwrap().item(), 0.0);
        let b = t([2, 1, 2, 2], vec![0.4; 8]);
        assert!((spatial_attention_loss(&a, &b).unwrap().item() - 0.01).abs() < 1e-12);
        assert!((domain_adaptation_loss(&b, &a).unwrap().item() - 0.01).abs() < 1e-12);
        let c = t([2, 1, 2, 1], vec![0.4; 4]);
        assert!(matches!(pixel_loss(&a, &c, PixelReduction::Mean), Err(Error::ShapeMismatch(_))));
        assert!((pixel_loss(&a, &b, PixelReduction::Mean).unwrap().item() - 0.01).abs() < 1e-12);
        assert!((pixel_loss(&a, &b, PixelReduction::Sum).unwrap().item() - 0.04).abs() < 1e-12);
        assert_eq!("sum".parse::<PixelReduction>().unwrap(), PixelReduction::Sum);
        assert!("l1".parse::<PixelReduction>().is_err());
    }

    #[test]
    fn objective_arithmetic() {
        let w = LossWeights {
            lambda_gp: 10.0,
            lambda_sa: 0.0,
            lambda_da: 0.0,
            lambda_p: 100.0,
            pixel_reduction: PixelReduction::Sum,
        };
        let real = t([2, 1, 1, 1], vec![0.4, 0.6]);
        let fake = t([2, 1, 1, 1], vec![0.1, 0.3]);
        let gp = Var::scalar(0.04);
        let zero = Var::scalar(0.0);
        let v = critic_objective(&real, &fake, &gp, &zero, &zero, &w).item();
        assert!((v - 0.1).abs() < 1e-12);
        let g = generator_objective(&t([1, 1, 1, 1], vec![0.3]), &Var::scalar(0.01), &w).item();
        assert!((g - 0.7).abs() < 1e-12);
        let w0 = LossWeights {
            lambda_p: 0.0,
            ..w
        };
        assert_eq!(generator_objective(&zero, &zero, &w0).item(), 0.0);
        assert_eq!(critic_objective(&zero, &zero, &zero, &zero, &zero, &w).item(), 0.0);
    }

    #[test]
    fn unit_linear_critic_has_zero_penalty() {
        // D(x) = <w, x> with ||w|| = 1 has gradient norm exactly 1 everywhere.
        let w: Vec<f64> = (0..16).map(|i| (i % 5) as f64 - 2.0).collect();
        let norm = w.iter().map(|v| v * v).sum::<f64>().sqrt();
        let w = Var::constant(Tensor::from_vec([1, 1, 4, 4], w.iter().map(|v| v / norm).collect()).unwrap());
        let critic = |x: &Var<f64>| {
            let wb = ops::broadcast_to(&w, x.shape());
            Ok(ops::sum_to(&ops::mul(x, &wb), [x.shape()[0], 1, 1, 1]))
        };
        let x = Tensor::from_fn([3, 1, 4, 4], |[n, _, h, w]| (n + h * w) as f64 * 0.1);
        let xh = Tensor::from_fn([3, 1, 4, 4], |[n, _, h, _]| (n * h) as f64 * 0.05);
        let gp = gradient_penalty(critic, &x, &xh, &[0.2, 0.5, 0.9]).unwrap();
        assert!(gp.value.item().abs() < 1e-12);
    }

    #[test]
    fn constant_critic_has_unit_penalty() {
        let critic = |x: &Var<f64>| Ok(Var::constant(Tensor::full([x.shape()[0], 1, 1, 1], 0.7)));
        let x = Tensor::zeros([2, 1, 4, 4]);
        let gp = gradient_penalty(critic, &x, &x, &[0.3, 0.6]).unwrap();
        assert!((gp.value.item() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn interpolation_endpoints() {
        let x = Tensor::full([2, 1, 2, 2], 1.0f64);
        let xh = Tensor::full([2, 1, 2, 2], 3.0f64);
        let mid = interpolate(&x, &xh, &[1.0, 0.0]).unwrap();
        assert_eq!(mid.sample(0), &[1.0; 4]);
        assert_eq!(mid.sample(1), &[3.0; 4]);
        assert!(interpolate(&x, &xh, &[0.5]).is_err());
    }
}
