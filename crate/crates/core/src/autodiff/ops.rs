//! Differentiable operations on [`Var`].

use super::graph::{Backward, Var};
use super::kernels::{self, ConvGeom};
use super::tensor::{Real, Tensor};

fn same_shape<T: Real>(op: &str, a: &Var<T>, b: &Var<T>) {
    assert_eq!(a.shape(), b.shape(), "{op}: shape mismatch {:?} vs {:?}", a.shape(), b.shape());
}

struct AddRule;
impl<T: Real> Backward<T> for AddRule {
    fn name(&self) -> &'static str {
        "add"
    }
    fn backward(&self, _: &[Var<T>], _: &Var<T>, g: &Var<T>) -> Vec<Option<Var<T>>> {
        vec![Some(g.clone()), Some(g.clone())]
    }
}

pub fn add<T: Real>(a: &Var<T>, b: &Var<T>) -> Var<T> {
    same_shape("add", a, b);
    let value = a.value().zip_map(b.value(), |x, y| x + y);
    Var::from_op(value, AddRule, vec![a.clone(), b.clone()])
}

struct SubRule;
impl<T: Real> Backward<T> for SubRule {
    fn name(&self) -> &'static str {
        "sub"
    }
    fn backward(&self, _: &[Var<T>], _: &Var<T>, g: &Var<T>) -> Vec<Option<Var<T>>> {
        vec![Some(g.clone()), Some(scale(g, -T::one()))]
    }
}

pub fn sub<T: Real>(a: &Var<T>, b: &Var<T>) -> Var<T> {
    same_shape("sub", a, b);
    let value = a.value().zip_map(b.value(), |x, y| x - y);
    Var::from_op(value, SubRule, vec![a.clone(), b.clone()])
}

struct MulRule;
impl<T: Real> Backward<T> for MulRule {
    fn name(&self) -> &'static str {
        "mul"
    }
    fn backward(&self, p: &[Var<T>], _: &Var<T>, g: &Var<T>) -> Vec<Option<Var<T>>> {
        let ga = p[0].requires_grad().then(|| mul(g, &p[1]));
        let gb = p[1].requires_grad().then(|| mul(g, &p[0]));
        vec![ga, gb]
    }
}

/// Elementwise product.
pub fn mul<T: Real>(a: &Var<T>, b: &Var<T>) -> Var<T> {
    same_shape("mul", a, b);
    let value = a.value().zip_map(b.value(), |x, y| x * y);
    Var::from_op(value, MulRule, vec![a.clone(), b.clone()])
}

pub fn square<T: Real>(a: &Var<T>) -> Var<T> {
    mul(a, a)
}

struct ScaleRule<T>(T);
impl<T: Real> Backward<T> for ScaleRule<T> {
    fn name(&self) -> &'static str {
        "scale"
    }
    fn backward(&self, _: &[Var<T>], _: &Var<T>, g: &Var<T>) -> Vec<Option<Var<T>>> {
        vec![Some(scale(g, self.0))]
    }
}

pub fn scale<T: Real>(a: &Var<T>, factor: T) -> Var<T> {
    let value = a.value().map(|x| x * factor);
    Var::from_op(value, ScaleRule(factor), vec![a.clone()])
}

struct ShiftRule;
impl<T: Real> Backward<T> for ShiftRule {
    fn name(&self) -> &'static str {
        "add_scalar"
    }
    fn backward(&self, _: &[Var<T>], _: &Var<T>, g: &Var<T>) -> Vec<Option<Var<T>>> {
        vec![Some(g.clone())]
    }
}

pub fn add_scalar<T: Real>(a: &Var<T>, c: T) -> Var<T> {
    let value = a.value().map(|x| x + c);
    Var::from_op(value, ShiftRule, vec![a.clone()])
}

struct BroadcastRule;
impl<T: Real> Backward<T> for BroadcastRule {
    fn name(&self) -> &'static str {
        "broadcast_to"
    }
    fn backward(&self, p: &[Var<T>], _: &Var<T>, g: &Var<T>) -> Vec<Option<Var<T>>> {
        vec![Some(sum_to(g, p[0].shape()))]
    }
}

/// Repeats unit axes of `a` up to `shape`.
pub fn broadcast_to<T: Real>(a: &Var<T>, shape: [usize; 4]) -> Var<T> {
    if a.shape() == shape {
        return a.clone();
    }
    let value = kernels::broadcast_to(a.value(), shape);
    Var::from_op(value, BroadcastRule, vec![a.clone()])
}

struct SumToRule;
impl<T: Real> Backward<T> for SumToRule {
    fn name(&self) -> &'static str {
        "sum_to"
    }
    fn backward(&self, p: &[Var<T>], _: &Var<T>, g: &Var<T>) -> Vec<Option<Var<T>>> {
        vec![Some(broadcast_to(g, p[0].shape()))]
    }
}

/// Sums `a` over the axes where `shape` is 1.
pub fn sum_to<T: Real>(a: &Var<T>, shape: [usize; 4]) -> Var<T> {
    if a.shape() == shape {
        return a.clone();
    }
    let value = kernels::sum_to(a.value(), shape);
    Var::from_op(value, SumToRule, vec![a.clone()])
}

pub fn sum_all<T: Real>(a: &Var<T>) -> Var<T> {
    sum_to(a, [1, 1, 1, 1])
}

pub fn mean_all<T: Real>(a: &Var<T>) -> Var<T> {
    let n = a.value().numel();
    scale(&sum_all(a), T::one() / T::of(n as f64))
}

/// Sum over channels, keeping a single channel.
pub fn sum_channels<T: Real>(a: &Var<T>) -> Var<T> {
    let [n, _, h, w] = a.shape();
    sum_to(a, [n, 1, h, w])
}

/// Per-sample, per-channel spatial mean: `[n, c, h, w] -> [n, c, 1, 1]`.
pub fn global_avg_pool<T: Real>(a: &Var<T>) -> Var<T> {
    let [n, c, h, w] = a.shape();
    scale(&sum_to(a, [n, c, 1, 1]), T::one() / T::of((h * w) as f64))
}

struct ConvRule {
    geom: ConvGeom,
}
impl<T: Real> Backward<T> for ConvRule {
    fn name(&self) -> &'static str {
        "conv2d"
    }
    fn backward(&self, p: &[Var<T>], _: &Var<T>, g: &Var<T>) -> Vec<Option<Var<T>>> {
        let [_, _, h, w] = p[0].shape();
        let [_, _, kh, kw] = p[1].shape();
        let gx = p[0].requires_grad().then(|| conv2d_grad_input(g, &p[1], self.geom, (h, w)));
        let gw = p[1].requires_grad().then(|| conv2d_grad_weight(&p[0], g, self.geom, (kh, kw)));
        vec![gx, gw]
    }
}

/// Stride-1 cross-correlation without bias.
pub fn conv2d<T: Real>(x: &Var<T>, w: &Var<T>, geom: ConvGeom) -> Var<T> {
    let value = kernels::conv2d(x.value(), w.value(), geom);
    Var::from_op(value, ConvRule { geom }, vec![x.clone(), w.clone()])
}

struct ConvGradInputRule {
    geom: ConvGeom,
}
impl<T: Real> Backward<T> for ConvGradInputRule {
    fn name(&self) -> &'static str {
        "conv2d_grad_input"
    }
    fn backward(&self, p: &[Var<T>], _: &Var<T>, u: &Var<T>) -> Vec<Option<Var<T>>> {
        let [_, _, kh, kw] = p[1].shape();
        let gg = p[0].requires_grad().then(|| conv2d(u, &p[1], self.geom));
        let gw = p[1].requires_grad().then(|| conv2d_grad_weight(u, &p[0], self.geom, (kh, kw)));
        vec![gg, gw]
    }
}

pub fn conv2d_grad_input<T: Real>(g: &Var<T>, w: &Var<T>, geom: ConvGeom, in_hw: (usize, usize)) -> Var<T> {
    let value = kernels::conv2d_grad_input(g.value(), w.value(), geom, in_hw);
    Var::from_op(value, ConvGradInputRule { geom }, vec![g.clone(), w.clone()])
}

struct ConvGradWeightRule {
    geom: ConvGeom,
}
impl<T: Real> Backward<T> for ConvGradWeightRule {
    fn name(&self) -> &'static str {
        "conv2d_grad_weight"
    }
    fn backward(&self, p: &[Var<T>], _: &Var<T>, u: &Var<T>) -> Vec<Option<Var<T>>> {
        let [_, _, h, w] = p[0].shape();
        let gx = p[0].requires_grad().then(|| conv2d_grad_input(&p[1], u, self.geom, (h, w)));
        let gg = p[1].requires_grad().then(|| conv2d(&p[0], u, self.geom));
        vec![gx, gg]
    }
}

pub fn conv2d_grad_weight<T: Real>(x: &Var<T>, g: &Var<T>, geom: ConvGeom, kernel: (usize, usize)) -> Var<T> {
    let value = kernels::conv2d_grad_weight(x.value(), g.value(), geom, kernel);
    Var::from_op(value, ConvGradWeightRule { geom }, vec![x.clone(), g.clone()])
}

struct ConcatRule {
    widths: Vec<usize>,
}
impl<T: Real> Backward<T> for ConcatRule {
    fn name(&self) -> &'static str {
        "concat_channels"
    }
    fn backward(&self, p: &[Var<T>], _: &Var<T>, g: &Var<T>) -> Vec<Option<Var<T>>> {
        let mut start = 0;
        self.widths
            .iter()
            .zip(p)
            .map(|(&w, parent)| {
                let out = parent.requires_grad().then(|| slice_channels(g, start, w));
                start += w;
                out
            })
            .collect()
    }
}

pub fn concat_channels<T: Real>(parts: &[Var<T>]) -> Var<T> {
    if parts.len() == 1 {
        return parts[0].clone();
    }
    let values: Vec<&Tensor<T>> = parts.iter().map(Var::value).collect();
    let value = kernels::concat_channels(&values);
    let widths = parts.iter().map(|p| p.shape()[1]).collect();
    Var::from_op(value, ConcatRule { widths }, parts.to_vec())
}

struct SliceRule {
    start: usize,
}
impl<T: Real> Backward<T> for SliceRule {
    fn name(&self) -> &'static str {
        "slice_channels"
    }
    fn backward(&self, p: &[Var<T>], _: &Var<T>, g: &Var<T>) -> Vec<Option<Var<T>>> {
        let [n, c, h, w] = p[0].shape();
        let len = g.shape()[1];
        let mut parts = Vec::with_capacity(3);
        if self.start > 0 {
            parts.push(Var::constant(Tensor::zeros([n, self.start, h, w])));
        }
        parts.push(g.clone());
        let rest = c - self.start - len;
        if rest > 0 {
            parts.push(Var::constant(Tensor::zeros([n, rest, h, w])));
        }
        vec![Some(concat_channels(&parts))]
    }
}

pub fn slice_channels<T: Real>(a: &Var<T>, start: usize, len: usize) -> Var<T> {
    if start == 0 && len == a.shape()[1] {
        return a.clone();
    }
    let value = kernels::slice_channels(a.value(), start, len);
    Var::from_op(value, SliceRule { start }, vec![a.clone()])
}

/// Multiplies by a piecewise-constant local slope; exact to every order almost everywhere.
struct SlopeRule<T>(Tensor<T>);
impl<T: Real> Backward<T> for SlopeRule<T> {
    fn name(&self) -> &'static str {
        "piecewise_linear"
    }
    fn backward(&self, _: &[Var<T>], _: &Var<T>, g: &Var<T>) -> Vec<Option<Var<T>>> {
        vec![Some(mul(g, &Var::constant(self.0.clone())))]
    }
}

pub fn relu<T: Real>(a: &Var<T>) -> Var<T> {
    leaky_relu(a, T::zero())
}

pub fn leaky_relu<T: Real>(a: &Var<T>, slope: T) -> Var<T> {
    let x = a.value();
    let value = x.map(|v| if v > T::zero() { v } else { v * slope });
    let rule = SlopeRule(x.map(|v| if v > T::zero() { T::one() } else { slope }));
    Var::from_op(value, rule, vec![a.clone()])
}

pub fn abs<T: Real>(a: &Var<T>) -> Var<T> {
    let x = a.value();
    let value = x.map(|v| v.abs());
    let rule = SlopeRule(x.map(|v| {
        if v > T::zero() {
            T::one()
        } else if v < T::zero() {
            -T::one()
        } else {
            T::zero()
        }
    }));
    Var::from_op(value, rule, vec![a.clone()])
}

struct SigmoidRule;
impl<T: Real> Backward<T> for SigmoidRule {
    fn name(&self) -> &'static str {
        "sigmoid"
    }
    fn backward(&self, _: &[Var<T>], out: &Var<T>, g: &Var<T>) -> Vec<Option<Var<T>>> {
        // s' = s (1 - s), written with graph ops on the output node.
        let one_minus = add_scalar(&scale(out, -T::one()), T::one());
        vec![Some(mul(g, &mul(out, &one_minus)))]
    }
}

pub fn sigmoid_scalar<T: Real>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

pub fn sigmoid<T: Real>(a: &Var<T>) -> Var<T> {
    let value = a.value().map(sigmoid_scalar);
    Var::from_op(value, SigmoidRule, vec![a.clone()])
}

struct SqrtRule;
impl<T: Real> Backward<T> for SqrtRule {
    fn name(&self) -> &'static str {
        "sqrt"
    }
    fn backward(&self, _: &[Var<T>], out: &Var<T>, g: &Var<T>) -> Vec<Option<Var<T>>> {
        let half = T::of(0.5);
        let d = out.value().map(|s| if s > T::zero() { half / s } else { T::zero() });
        vec![Some(mul(g, &Var::constant(d)))]
    }
    fn first_order_only(&self) -> bool {
        true
    }
}

/// Square root; the derivative at 0 is taken as 0.
pub fn sqrt<T: Real>(a: &Var<T>) -> Var<T> {
    let value = a.value().map(|v| v.max(T::zero()).sqrt());
    Var::from_op(value, SqrtRule, vec![a.clone()])
}

struct NormalizeRule;
impl<T: Real> Backward<T> for NormalizeRule {
    fn name(&self) -> &'static str {
        "normalize_planes"
    }
    fn backward(&self, p: &[Var<T>], out: &Var<T>, g: &Var<T>) -> Vec<Option<Var<T>>> {
        let x = p[0].value();
        let y = out.value();
        let u = g.value();
        let [n, c, _, _] = x.shape();
        let mut dx = Tensor::zeros(x.shape());
        for s in 0..n {
            for ch in 0..c {
                let xs = x.plane(s, ch);
                let Some(ext) = PlaneExtent::of(xs) else { continue };
                let inv = T::one() / (ext.max - ext.min);
                let ys = y.plane(s, ch);
                let us = u.plane(s, ch);
                // d/dmin = sum u (y - 1) / r ; d/dmax = -sum u y / r
                let mut dmin = T::zero();
                let mut dmax = T::zero();
                for (&uv, &yv) in us.iter().zip(ys) {
                    dmin += uv * (yv - T::one());
                    dmax += uv * yv;
                }
                let d = dx.plane_mut(s, ch);
                for (dv, &uv) in d.iter_mut().zip(us) {
                    *dv = uv * inv;
                }
                d[ext.argmin] += dmin * inv;
                d[ext.argmax] = d[ext.argmax] - dmax * inv;
            }
        }
        vec![Some(Var::constant(dx))]
    }
    fn first_order_only(&self) -> bool {
        true
    }
}

pub(crate) struct PlaneExtent<T> {
    pub min: T,
    pub max: T,
    pub argmin: usize,
    pub argmax: usize,
}

impl<T: Real> PlaneExtent<T> {
    /// Extremes of a plane, or `None` when it is constant.
    pub fn of(plane: &[T]) -> Option<Self> {
        let mut e = PlaneExtent {
            min: plane[0],
            max: plane[0],
            argmin: 0,
            argmax: 0,
        };
        for (i, &v) in plane.iter().enumerate() {
            if v < e.min {
                e.min = v;
                e.argmin = i;
            }
            if v > e.max {
                e.max = v;
                e.argmax = i;
            }
        }
        (e.max > e.min).then_some(e)
    }
}

/// Min-max normalization of every `(n, c)` plane to `[0, 1]`; constant planes map to 0.
pub fn normalize_planes<T: Real>(a: &Var<T>) -> Var<T> {
    let x = a.value();
    let [n, c, _, _] = x.shape();
    let mut y = Tensor::zeros(x.shape());
    for s in 0..n {
        for ch in 0..c {
            if let Some(ext) = PlaneExtent::of(x.plane(s, ch)) {
                let range = ext.max - ext.min;
                let src = x.plane(s, ch).to_vec();
                for (dst, v) in y.plane_mut(s, ch).iter_mut().zip(src) {
                    *dst = (v - ext.min) / range;
                }
                // Pin the extremes so rounding cannot leave them off 0 and 1.
                y.plane_mut(s, ch)[ext.argmax] = T::one();
            }
        }
    }
    Var::from_op(y, NormalizeRule, vec![a.clone()])
}
