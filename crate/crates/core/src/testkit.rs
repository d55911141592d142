//! Brute-force references shared by unit tests.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{grad, Tensor, Var};
use crate::model::ParamSet;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut impl Rng, shape: [usize; 4], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

/// Direct seven-loop convolution with zero padding and bias.
pub fn naive_conv(x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>, pad: usize, dil: usize) -> Tensor<f64> {
    let [n, cin, h, wd] = x.shape();
    let [cout, _, kh, kw] = w.shape();
    let oh = h + 2 * pad - dil * (kh - 1);
    let ow = wd + 2 * pad - dil * (kw - 1);
    Tensor::from_fn([n, cout, oh, ow], |[s, o, r, c]| {
        let mut acc = b.data()[o];
        for i in 0..cin {
            for u in 0..kh {
                for v in 0..kw {
                    let rr = (r + u * dil) as isize - pad as isize;
                    let cc = (c + v * dil) as isize - pad as isize;
                    if rr >= 0 && cc >= 0 && (rr as usize) < h && (cc as usize) < wd {
                        acc += w.at([o, i, u, v]) * x.at([s, i, rr as usize, cc as usize]);
                    }
                }
            }
        }
        acc
    })
}

pub fn concat(parts: &[&Tensor<f64>]) -> Tensor<f64> {
    let [n, _, h, w] = parts[0].shape();
    let c: usize = parts.iter().map(|p| p.shape()[1]).sum();
    Tensor::from_fn([n, c, h, w], |[s, ch, r, col]| {
        let mut k = ch;
        for p in parts {
            if k < p.shape()[1] {
                return p.at([s, k, r, col]);
            }
            k -= p.shape()[1];
        }
        unreachable!()
    })
}

pub fn param<'a>(p: &'a ParamSet<f64>, name: &str) -> &'a Tensor<f64> {
    let i = p.names().iter().position(|n| n == name).unwrap_or_else(|| panic!("no parameter {name}"));
    p.vars()[i].value()
}

/// Largest relative error between analytic and central-difference gradients
/// of `f` over up to `per_tensor` sampled entries of each parameter.
pub fn max_param_grad_error(
    params: &mut ParamSet<f64>,
    f: &dyn Fn(&ParamSet<f64>) -> Var<f64>,
    per_tensor: usize,
    h: f64,
    seed: u64,
) -> f64 {
    let out = f(params);
    let vars: Vec<Var<f64>> = params.vars().to_vec();
    let wrt: Vec<&Var<f64>> = vars.iter().collect();
    let grads = grad(&out, &wrt, false);
    let mut r = rng(seed);
    let mut worst = 0.0f64;
    for (k, g) in grads.iter().enumerate() {
        let base = vars[k].value().clone();
        for _ in 0..per_tensor.min(base.numel()) {
            let i = r.random_range(0..base.numel());
            let analytic = g.as_ref().map_or(0.0, |g| g.value().data()[i]);
            let mut probe = |delta: f64| {
                let mut t = base.clone();
                t.data_mut()[i] += delta;
                params.set(k, t);
                f(params).item()
            };
            let numeric = (probe(h) - probe(-h)) / (2.0 * h);
            params.set(k, base.clone());
            worst = worst.max(rel_err(analytic, numeric));
        }
    }
    worst
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / (a.abs().max(b.abs()) + 1e-6)
}
