//! Generator and critic networks and spatial attention extraction.

pub mod attention;
mod config;
pub mod layers;
mod nets;
mod params;

#[cfg(test)]
mod tests;

pub use attention::{spatial_attention, spatial_attention_v1, spatial_attention_v2, spatial_attention_v3};
pub use config::{AttentionVariant, Conditioning, InitScheme, NetConfig};
pub use nets::{Backbone, CriticOutput, Discriminator, Generator};
pub use params::{ParamId, ParamSet};
