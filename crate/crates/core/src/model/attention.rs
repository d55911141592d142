//! Spatial attention maps from critic activation taps.
//!
//! Every variant first reduces each tap to `S_i = sum_j |A_ij|` over channels.

use super::config::AttentionVariant;
use crate::autodiff::ops;
use crate::autodiff::{Real, Var};
use crate::error::{Error, Result};

fn channel_energy<T: Real>(taps: &[Var<T>]) -> Result<Vec<Var<T>>> {
    let first = taps.first().ok_or(Error::EmptyTaps)?;
    let [n, _, h, w] = first.shape();
    taps.iter()
        .map(|t| {
            let s = t.shape();
            if [s[0], s[2], s[3]] != [n, h, w] {
                return Err(Error::ShapeMismatch(format!("tap {s:?} differs spatially from {:?}", first.shape())));
            }
            Ok(ops::sum_channels(&ops::abs(t)))
        })
        .collect()
}

fn sum_vars<T: Real>(vars: &[Var<T>]) -> Var<T> {
    vars[1..].iter().fold(vars[0].clone(), |acc, v| ops::add(&acc, v))
}

/// `sigmoid(sum_i S_i)`
pub fn spatial_attention_v1<T: Real>(taps: &[Var<T>]) -> Result<Var<T>> {
    Ok(ops::sigmoid(&sum_vars(&channel_energy(taps)?)))
}

/// `sigmoid(sum_i sigmoid(S_i))`
pub fn spatial_attention_v2<T: Real>(taps: &[Var<T>]) -> Result<Var<T>> {
    let inner: Vec<Var<T>> = channel_energy(taps)?.iter().map(ops::sigmoid).collect();
    Ok(ops::sigmoid(&sum_vars(&inner)))
}

/// `N(sum_i N(S_i))`, with `N` min-max normalization per sample.
pub fn spatial_attention_v3<T: Real>(taps: &[Var<T>]) -> Result<Var<T>> {
    let inner: Vec<Var<T>> = channel_energy(taps)?.iter().map(ops::normalize_planes).collect();
    Ok(ops::normalize_planes(&sum_vars(&inner)))
}

/// Attention map `[n, 1, h, w]` for the chosen variant.
pub fn spatial_attention<T: Real>(variant: AttentionVariant, taps: &[Var<T>]) -> Result<Var<T>> {
    match variant {
        AttentionVariant::V1 => spatial_attention_v1(taps),
        AttentionVariant::V2 => spatial_attention_v2(taps),
        AttentionVariant::V3 => spatial_attention_v3(taps),
    }
}
