use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Weight initialization for convolution and linear kernels. Biases start at zero.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub enum InitScheme {
    /// Normal with the given std, truncated at two standard deviations.
    TruncatedNormal(f64),
    /// Truncated normal with std `sqrt(2 / fan_in)`.
    #[default]
    He,
}

impl fmt::Display for InitScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            InitScheme::TruncatedNormal(std) => write!(f, "normal:{std}"),
            InitScheme::He => write!(f, "he"),
        }
    }
}

impl FromStr for InitScheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "he" {
            return Ok(InitScheme::He);
        }
        s.strip_prefix("normal:")
            .and_then(|v| v.parse::<f64>().ok())
            .filter(|v| *v > 0.0)
            .map(InitScheme::TruncatedNormal)
            .ok_or_else(|| Error::Config(format!("unknown init scheme {s:?}")))
    }
}

/// Architecture hyperparameters shared by generator and critic.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetConfig {
    /// Number of residual dense blocks `K`.
    pub blocks: usize,
    /// Channels carried between blocks `C`.
    pub channels: usize,
    pub rdb_layers: usize,
    pub rdb_growth: usize,
    pub ca_reduction: usize,
    pub dilations: Vec<usize>,
    pub leaky_slope: f64,
    pub encoder_mid: usize,
    pub decoder_mid: usize,
    /// Width of the critic's decoder output, which the MLP head pools.
    pub disc_features: usize,
    pub mlp_hidden: usize,
    /// Generator initialization.
    pub init: InitScheme,
    /// Critic initialization.
    #[serde(default)]
    pub critic_init: InitScheme,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            blocks: 6,
            channels: 128,
            rdb_layers: 4,
            rdb_growth: 32,
            ca_reduction: 16,
            dilations: vec![3, 5, 7],
            leaky_slope: 0.2,
            encoder_mid: 64,
            decoder_mid: 64,
            disc_features: 64,
            mlp_hidden: 64,
            init: InitScheme::He,
            critic_init: InitScheme::He,
        }
    }
}

impl NetConfig {
    /// A miniature network for tests and quick runs.
    pub fn tiny() -> Self {
        NetConfig {
            blocks: 1,
            channels: 8,
            rdb_layers: 2,
            rdb_growth: 4,
            ca_reduction: 4,
            dilations: vec![3, 5, 7],
            leaky_slope: 0.2,
            encoder_mid: 8,
            decoder_mid: 8,
            disc_features: 8,
            mlp_hidden: 8,
            init: InitScheme::He,
            critic_init: InitScheme::He,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.blocks == 0 {
            return bad("net.blocks must be at least 1".into());
        }
        if self.channels == 0 || self.ca_reduction == 0 || self.channels % self.ca_reduction != 0 {
            return bad(format!(
                "net.channels ({}) must be a positive multiple of net.ca_reduction ({})",
                self.channels, self.ca_reduction
            ));
        }
        if self.dilations.is_empty() || self.dilations.windows(2).any(|w| w[0] >= w[1]) || self.dilations[0] == 0 {
            return bad(format!("net.dilations {:?} must be positive and strictly increasing", self.dilations));
        }
        if self.rdb_layers == 0 || self.rdb_growth == 0 {
            return bad("net.rdb_layers and net.rdb_growth must be positive".into());
        }
        if [self.encoder_mid, self.decoder_mid, self.disc_features, self.mlp_hidden].contains(&0) {
            return bad("layer widths must be positive".into());
        }
        if !(self.leaky_slope.is_finite() && self.leaky_slope >= 0.0) {
            return bad("net.leaky_slope must be nonnegative".into());
        }
        Ok(())
    }

    /// Activation taps the critic exposes: encoder, every block, decoder.
    pub fn tap_count(&self) -> usize {
        self.blocks + 2
    }
}

/// How the generator consumes the spatial attention map.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum Conditioning {
    /// Attention map stacked as a fourth input channel.
    #[default]
    Concat,
    /// Every source band scaled by the attention map.
    Multiply,
}

impl Conditioning {
    pub fn input_channels(self) -> usize {
        match self {
            Conditioning::Concat => 4,
            Conditioning::Multiply => 3,
        }
    }
}

impl fmt::Display for Conditioning {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Conditioning::Concat => "concat",
            Conditioning::Multiply => "multiply",
        })
    }
}

impl FromStr for Conditioning {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "concat" => Ok(Conditioning::Concat),
            "multiply" => Ok(Conditioning::Multiply),
            other => Err(Error::UnknownConditioningMode(other.to_string())),
        }
    }
}

/// Spatial attention formula applied to critic activation taps.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum AttentionVariant {
    /// `sigmoid(sum_i sum_j |A_ij|)`
    V1,
    /// `sigmoid(sum_i sigmoid(sum_j |A_ij|))`
    V2,
    /// `N(sum_i N(sum_j |A_ij|))` with min-max normalization `N`.
    #[default]
    V3,
}

impl AttentionVariant {
    pub const ALL: [AttentionVariant; 3] = [AttentionVariant::V1, AttentionVariant::V2, AttentionVariant::V3];
}

impl fmt::Display for AttentionVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AttentionVariant::V1 => "v1",
            AttentionVariant::V2 => "v2",
            AttentionVariant::V3 => "v3",
        })
    }
}

impl FromStr for AttentionVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "v1" => Ok(AttentionVariant::V1),
            "v2" => Ok(AttentionVariant::V2),
            "v3" => Ok(AttentionVariant::V3),
            other => Err(Error::UnknownAttentionVariant(other.to_string())),
        }
    }
}
