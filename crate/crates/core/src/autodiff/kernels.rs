//! Convolution kernels on raw tensors (im2col + GEMM), plus the reduction and
//! broadcast helpers the graph ops are built from.
//!
//! All three convolution routines evaluate partial derivatives of the same
//! trilinear form `T(x, w, g) = sum g[n,o,i,j] * w[o,c,a,b] * x[n,c,i+d*a-p,j+d*b-p]`:
//! `conv2d` is dT/dg, `conv2d_grad_input` is dT/dx and `conv2d_grad_weight` is
//! dT/dw. Each one's derivative is therefore expressible with the other two,
//! which is what makes the graph twice differentiable.

use rayon::prelude::*;

use super::tensor::{Real, Tensor};

/// Stride-1 convolution geometry.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub pad: usize,
    pub dilation: usize,
}

impl ConvGeom {
    pub fn same(kernel: usize, dilation: usize) -> Self {
        ConvGeom {
            pad: dilation * (kernel - 1) / 2,
            dilation,
        }
    }

    pub fn out_len(&self, len: usize, kernel: usize) -> usize {
        let span = self.dilation * (kernel - 1);
        (len + 2 * self.pad)
            .checked_sub(span)
            .filter(|&v| v > 0)
            .unwrap_or_else(|| panic!("kernel span {span} exceeds padded length {}", len + 2 * self.pad))
    }

    fn is_pointwise(&self, kh: usize, kw: usize) -> bool {
        kh == 1 && kw == 1 && self.pad == 0
    }
}

struct Dims {
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
    geom: ConvGeom,
}

impl Dims {
    fn k(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn source(&self, out: usize, tap: usize, limit: usize) -> Option<usize> {
        let pos = (out + tap * self.geom.dilation) as isize - self.geom.pad as isize;
        (pos >= 0 && (pos as usize) < limit).then_some(pos as usize)
    }

    /// Output columns `[lo, hi)` whose tap `b` lands inside the input row,
    /// and the input column that `lo` reads.
    fn valid_cols(&self, b: usize) -> (usize, usize, usize) {
        let shift = b * self.geom.dilation;
        let lo = self.geom.pad.saturating_sub(shift).min(self.wo);
        let hi = (self.w + self.geom.pad).saturating_sub(shift).min(self.wo).max(lo);
        (lo, hi, ((lo + shift).saturating_sub(self.geom.pad)).min(self.w))
    }
}

/// Appends the column matrix of one sample to `cols` (which is cleared first).
fn im2col<T: Real>(x: &[T], d: &Dims, cols: &mut Vec<T>) {
    cols.clear();
    cols.reserve(d.k() * d.ho * d.wo);
    let zero = T::zero();
    for c in 0..d.cin {
        for a in 0..d.kh {
            for b in 0..d.kw {
                let (lo, hi, src_lo) = d.valid_cols(b);
                for i in 0..d.ho {
                    match d.source(i, a, d.h) {
                        None => cols.extend(std::iter::repeat_n(zero, d.wo)),
                        Some(si) => {
                            let row = (c * d.h + si) * d.w + src_lo;
                            cols.extend(std::iter::repeat_n(zero, lo));
                            cols.extend_from_slice(&x[row..row + hi - lo]);
                            cols.extend(std::iter::repeat_n(zero, d.wo - hi));
                        }
                    }
                }
            }
        }
    }
}

fn col2im_add<T: Real>(cols: &[T], d: &Dims, x: &mut [T]) {
    let hw = d.ho * d.wo;
    for c in 0..d.cin {
        for a in 0..d.kh {
            for b in 0..d.kw {
                let row = ((c * d.kh + a) * d.kw + b) * hw;
                let src = &cols[row..row + hw];
                let (lo, hi, src_lo) = d.valid_cols(b);
                for i in 0..d.ho {
                    let Some(si) = d.source(i, a, d.h) else { continue };
                    let base = (c * d.h + si) * d.w + src_lo;
                    let dst = &mut x[base..base + hi - lo];
                    for (o, &v) in dst.iter_mut().zip(&src[i * d.wo + lo..i * d.wo + hi]) {
                        *o += v;
                    }
                }
            }
        }
    }
}

/// `y[n, o] = sum_c w[o, c] (*) x[n, c]`, stride 1.
pub fn conv2d<T: Real>(x: &Tensor<T>, w: &Tensor<T>, geom: ConvGeom) -> Tensor<T> {
    let [n, cin, h, wd] = x.shape();
    let [cout, wcin, kh, kw] = w.shape();
    assert_eq!(cin, wcin, "conv2d: input has {cin} channels, kernel expects {wcin}");
    let d = Dims {
        cin,
        h,
        w: wd,
        kh,
        kw,
        ho: geom.out_len(h, kh),
        wo: geom.out_len(wd, kw),
        geom,
    };
    let hw = d.ho * d.wo;
    let k = d.k();
    let mut out = Tensor::zeros([n, cout, d.ho, d.wo]);
    out.data_mut()
        .par_chunks_mut(cout * hw)
        .enumerate()
        .for_each(|(s, y)| {
            let xs = x.sample(s);
            if geom.is_pointwise(kh, kw) {
                T::gemm(cout, k, hw, w.data(), k as isize, 1, xs, hw as isize, 1, T::zero(), y, hw as isize, 1);
            } else {
                let mut cols = Vec::new();
                im2col(xs, &d, &mut cols);
                T::gemm(cout, k, hw, w.data(), k as isize, 1, &cols, hw as isize, 1, T::zero(), y, hw as isize, 1);
            }
        });
    out
}

/// Adjoint of [`conv2d`] with respect to its input; `in_hw` is the input's spatial size.
pub fn conv2d_grad_input<T: Real>(
    g: &Tensor<T>,
    w: &Tensor<T>,
    geom: ConvGeom,
    in_hw: (usize, usize),
) -> Tensor<T> {
    let [n, cout, ho, wo] = g.shape();
    let [wcout, cin, kh, kw] = w.shape();
    assert_eq!(cout, wcout, "conv2d_grad_input: channel mismatch");
    let d = Dims {
        cin,
        h: in_hw.0,
        w: in_hw.1,
        kh,
        kw,
        ho,
        wo,
        geom,
    };
    assert_eq!(geom.out_len(d.h, kh), ho, "conv2d_grad_input: bad output rows");
    assert_eq!(geom.out_len(d.w, kw), wo, "conv2d_grad_input: bad output cols");
    let hw = ho * wo;
    let k = d.k();
    let mut out = Tensor::zeros([n, cin, d.h, d.w]);
    out.data_mut()
        .par_chunks_mut(cin * d.h * d.w)
        .enumerate()
        .for_each(|(s, dx)| {
            let gs = g.sample(s);
            if geom.is_pointwise(kh, kw) {
                // w^T (cin x cout) . g (cout x hw)
                T::gemm(cin, cout, hw, w.data(), 1, k as isize, gs, hw as isize, 1, T::zero(), dx, hw as isize, 1);
            } else {
                let mut cols = vec![T::zero(); k * hw];
                T::gemm(k, cout, hw, w.data(), 1, k as isize, gs, hw as isize, 1, T::zero(), &mut cols, hw as isize, 1);
                col2im_add(&cols, &d, dx);
            }
        });
    out
}

/// Adjoint of [`conv2d`] with respect to its kernel, summed over the batch.
pub fn conv2d_grad_weight<T: Real>(
    x: &Tensor<T>,
    g: &Tensor<T>,
    geom: ConvGeom,
    kernel: (usize, usize),
) -> Tensor<T> {
    let [n, cin, h, wd] = x.shape();
    let [gn, cout, ho, wo] = g.shape();
    assert_eq!(n, gn, "conv2d_grad_weight: batch mismatch");
    let (kh, kw) = kernel;
    let d = Dims {
        cin,
        h,
        w: wd,
        kh,
        kw,
        ho,
        wo,
        geom,
    };
    assert_eq!(geom.out_len(h, kh), ho, "conv2d_grad_weight: bad output rows");
    let hw = ho * wo;
    let k = d.k();
    let partials: Vec<Vec<T>> = (0..n)
        .into_par_iter()
        .map(|s| {
            let mut dw = vec![T::zero(); cout * k];
            let gs = g.sample(s);
            let xs = x.sample(s);
            if geom.is_pointwise(kh, kw) {
                // g (cout x hw) . x^T (hw x cin)
                T::gemm(cout, hw, k, gs, hw as isize, 1, xs, 1, hw as isize, T::zero(), &mut dw, k as isize, 1);
            } else {
                let mut cols = Vec::new();
                im2col(xs, &d, &mut cols);
                T::gemm(cout, hw, k, gs, hw as isize, 1, &cols, 1, hw as isize, T::zero(), &mut dw, k as isize, 1);
            }
            dw
        })
        .collect();
    let mut out = Tensor::zeros([cout, cin, kh, kw]);
    // Fixed summation order keeps results independent of thread scheduling.
    for p in &partials {
        for (o, v) in out.data_mut().iter_mut().zip(p) {
            *o += *v;
        }
    }
    out
}

/// Whether `small` can be broadcast to `big` (each axis equal or 1).
pub fn broadcastable(small: [usize; 4], big: [usize; 4]) -> bool {
    small.iter().zip(&big).all(|(&s, &b)| s == b || s == 1)
}

fn small_strides(small: [usize; 4]) -> [usize; 4] {
    let mut strides = [0; 4];
    let mut acc = 1;
    for axis in (0..4).rev() {
        strides[axis] = if small[axis] == 1 { 0 } else { acc };
        acc *= small[axis];
    }
    strides
}

/// Repeats `x` along its unit axes up to `shape`.
pub fn broadcast_to<T: Real>(x: &Tensor<T>, shape: [usize; 4]) -> Tensor<T> {
    let small = x.shape();
    assert!(broadcastable(small, shape), "cannot broadcast {small:?} to {shape:?}");
    if small == shape {
        return x.clone();
    }
    let st = small_strides(small);
    let src = x.data();
    let mut out = Vec::with_capacity(super::tensor::numel(shape));
    for n in 0..shape[0] {
        for c in 0..shape[1] {
            for h in 0..shape[2] {
                let base = n * st[0] + c * st[1] + h * st[2];
                if st[3] == 0 {
                    let v = src[base];
                    out.extend(std::iter::repeat_n(v, shape[3]));
                } else {
                    out.extend_from_slice(&src[base..base + shape[3]]);
                }
            }
        }
    }
    Tensor::from_vec(shape, out).expect("shape computed above")
}

/// Sums `x` down to `shape`, which must broadcast to `x`'s shape.
pub fn sum_to<T: Real>(x: &Tensor<T>, shape: [usize; 4]) -> Tensor<T> {
    let big = x.shape();
    assert!(broadcastable(shape, big), "cannot sum {big:?} to {shape:?}");
    if shape == big {
        return x.clone();
    }
    let st = small_strides(shape);
    let src = x.data();
    let mut out = Tensor::zeros(shape);
    let dst = out.data_mut();
    let mut k = 0;
    for n in 0..big[0] {
        for c in 0..big[1] {
            for h in 0..big[2] {
                let base = n * st[0] + c * st[1] + h * st[2];
                let row = &src[k..k + big[3]];
                if st[3] == 0 {
                    let mut acc = T::zero();
                    for &v in row {
                        acc += v;
                    }
                    dst[base] += acc;
                } else {
                    for (d, &v) in dst[base..base + big[3]].iter_mut().zip(row) {
                        *d += v;
                    }
                }
                k += big[3];
            }
        }
    }
    out
}

/// Concatenates along the channel axis.
pub fn concat_channels<T: Real>(parts: &[&Tensor<T>]) -> Tensor<T> {
    let [n, _, h, w] = parts[0].shape();
    let c_total: usize = parts.iter().map(|p| p.shape()[1]).sum();
    let mut out = Vec::with_capacity(n * c_total * h * w);
    for s in 0..n {
        for p in parts {
            assert_eq!([p.shape()[0], p.shape()[2], p.shape()[3]], [n, h, w], "concat shape mismatch");
            out.extend_from_slice(p.sample(s));
        }
    }
    Tensor::from_vec([n, c_total, h, w], out).expect("shape computed above")
}

pub fn slice_channels<T: Real>(x: &Tensor<T>, start: usize, len: usize) -> Tensor<T> {
    let [n, c, h, w] = x.shape();
    assert!(start + len <= c, "channel slice {start}+{len} out of {c}");
    let plane = h * w;
    let mut out = Vec::with_capacity(n * len * plane);
    for s in 0..n {
        let sample = x.sample(s);
        out.extend_from_slice(&sample[start * plane..(start + len) * plane]);
    }
    Tensor::from_vec([n, len, h, w], out).expect("shape computed above")
}
