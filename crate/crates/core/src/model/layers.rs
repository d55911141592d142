//! Convolution, residual dense block and Laplacian channel attention.

use rand::Rng;

use super::config::InitScheme;
use super::params::{init_kernel, ParamId, ParamSet};
use crate::autodiff::ops;
use crate::autodiff::{ConvGeom, Real, Tensor, Var};

pub(crate) struct Builder<'a, T: Real, R: Rng> {
    pub params: &'a mut ParamSet<T>,
    pub rng: &'a mut R,
    pub init: InitScheme,
}

impl<T: Real, R: Rng> Builder<'_, T, R> {
    pub fn conv(&mut self, name: &str, cin: usize, cout: usize, kernel: usize, geom: ConvGeom) -> Conv {
        let w = init_kernel([cout, cin, kernel, kernel], self.init, self.rng);
        Conv {
            weight: self.params.push(format!("{name}.weight"), w),
            bias: self.params.push(format!("{name}.bias"), Tensor::zeros([1, cout, 1, 1])),
            geom,
        }
    }

    pub fn conv3(&mut self, name: &str, cin: usize, cout: usize) -> Conv {
        self.conv(name, cin, cout, 3, ConvGeom::same(3, 1))
    }

    pub fn conv1(&mut self, name: &str, cin: usize, cout: usize) -> Conv {
        self.conv(name, cin, cout, 1, ConvGeom { pad: 0, dilation: 1 })
    }
}

/// Stride-1 convolution with bias. On `[n, f, 1, 1]` inputs a 1x1 `Conv` is a linear layer.
#[derive(Clone, Debug)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: ParamId,
    pub geom: ConvGeom,
}

impl Conv {
    pub fn forward<T: Real>(&self, p: &ParamSet<T>, x: &Var<T>) -> Var<T> {
        let y = ops::conv2d(x, p.var(self.weight), self.geom);
        let b = ops::broadcast_to(p.var(self.bias), y.shape());
        ops::add(&y, &b)
    }
}

/// Residual dense block: densely connected 3x3 ReLU layers, 1x1 local fusion
/// back to the block width, and a local residual.
#[derive(Clone, Debug)]
pub struct Rdb {
    pub layers: Vec<Conv>,
    pub fusion: Conv,
}

impl Rdb {
    pub(crate) fn build<T: Real, R: Rng>(b: &mut Builder<'_, T, R>, name: &str, channels: usize, layers: usize, growth: usize) -> Self {
        let convs = (0..layers)
            .map(|l| b.conv3(&format!("{name}.dense{l}"), channels + l * growth, growth))
            .collect();
        let fusion = b.conv1(&format!("{name}.fusion"), channels + layers * growth, channels);
        Rdb { layers: convs, fusion }
    }

    pub fn forward<T: Real>(&self, p: &ParamSet<T>, x: &Var<T>) -> Var<T> {
        let mut features = vec![x.clone()];
        for layer in &self.layers {
            let input = ops::concat_channels(&features);
            features.push(ops::relu(&layer.forward(p, &input)));
        }
        let fused = self.fusion.forward(p, &ops::concat_channels(&features));
        ops::add(&fused, x)
    }
}

/// Laplacian channel attention: pooled features pass through parallel dilated
/// 3x3 convolutions (reducing channels), are concatenated, and a final 3x3
/// convolution with a sigmoid yields one coefficient per channel.
///
/// The pooled input is 1x1 spatially, so each dilated convolution is padded by
/// its dilation to keep that size.
#[derive(Clone, Debug)]
pub struct ChannelAttention {
    pub branches: Vec<Conv>,
    pub merge: Conv,
}

impl ChannelAttention {
    pub(crate) fn build<T: Real, R: Rng>(
        b: &mut Builder<'_, T, R>,
        name: &str,
        channels: usize,
        reduction: usize,
        dilations: &[usize],
    ) -> Self {
        let reduced = channels / reduction;
        let branches = dilations
            .iter()
            .map(|&d| b.conv(&format!("{name}.pyramid_d{d}"), channels, reduced, 3, ConvGeom { pad: d, dilation: d }))
            .collect();
        let merge = b.conv3(&format!("{name}.merge"), reduced * dilations.len(), channels);
        ChannelAttention { branches, merge }
    }

    /// Coefficients `[n, c, 1, 1]` in `(0, 1)`.
    pub fn coefficients<T: Real>(&self, p: &ParamSet<T>, features: &Var<T>) -> Var<T> {
        let pooled = ops::global_avg_pool(features);
        let levels: Vec<Var<T>> = self.branches.iter().map(|c| ops::relu(&c.forward(p, &pooled))).collect();
        ops::sigmoid(&self.merge.forward(p, &ops::concat_channels(&levels)))
    }

    /// `features * A_c(features)` per channel.
    pub fn forward<T: Real>(&self, p: &ParamSet<T>, features: &Var<T>) -> Var<T> {
        modulate(features, &self.coefficients(p, features))
    }
}

/// Scales each channel of `features` by the matching coefficient in `[n, c, 1, 1]`.
pub fn modulate<T: Real>(features: &Var<T>, coefficients: &Var<T>) -> Var<T> {
    ops::mul(features, &ops::broadcast_to(coefficients, features.shape()))
}
