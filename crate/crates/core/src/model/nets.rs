use rand::Rng;

use super::config::{Conditioning, NetConfig};
use super::layers::{Builder, ChannelAttention, Conv, Rdb};
use super::params::ParamSet;
use crate::autodiff::ops;
use crate::autodiff::{Real, Var};
use crate::error::{Error, Result};

/// Encoder, `K` x (RDB + channel attention), decoder, and a 1x1 global skip
/// from the network input to the decoder output.
#[derive(Clone, Debug)]
pub struct Backbone {
    pub encoder: [Conv; 2],
    pub blocks: Vec<(Rdb, ChannelAttention)>,
    pub decoder: [Conv; 2],
    pub skip: Conv,
}

impl Backbone {
    pub(crate) fn build<T: Real, R: Rng>(b: &mut Builder<'_, T, R>, cfg: &NetConfig, inputs: usize, outputs: usize) -> Self {
        let c = cfg.channels;
        let encoder = [b.conv3("encoder.0", inputs, cfg.encoder_mid), b.conv3("encoder.1", cfg.encoder_mid, c)];
        let blocks = (0..cfg.blocks)
            .map(|k| {
                (
                    Rdb::build(b, &format!("rdb{k}"), c, cfg.rdb_layers, cfg.rdb_growth),
                    ChannelAttention::build(b, &format!("ca{k}"), c, cfg.ca_reduction, &cfg.dilations),
                )
            })
            .collect();
        let decoder = [b.conv3("decoder.0", c, cfg.decoder_mid), b.conv3("decoder.1", cfg.decoder_mid, outputs)];
        let skip = b.conv1("skip", inputs, outputs);
        Backbone {
            encoder,
            blocks,
            decoder,
            skip,
        }
    }

    /// Output plus activation taps (encoder, each block, decoder).
    pub fn forward<T: Real>(&self, p: &ParamSet<T>, x: &Var<T>) -> (Var<T>, Vec<Var<T>>) {
        let mut taps = Vec::with_capacity(self.blocks.len() + 2);
        let mut f = self.encoder[1].forward(p, &ops::relu(&self.encoder[0].forward(p, x)));
        taps.push(f.clone());
        for (rdb, ca) in &self.blocks {
            f = ca.forward(p, &rdb.forward(p, &f));
            taps.push(f.clone());
        }
        let decoded = self.decoder[1].forward(p, &ops::relu(&self.decoder[0].forward(p, &f)));
        let out = ops::add(&decoded, &self.skip.forward(p, x));
        taps.push(out.clone());
        (out, taps)
    }
}

fn expect_channels(what: &str, shape: [usize; 4], channels: usize) -> Result<()> {
    if shape[1] != channels {
        return Err(Error::ShapeMismatch(format!("{what} needs {channels} channels, got shape {shape:?}")));
    }
    Ok(())
}

/// Generator `G(z, A_s)`: source bands plus spatial attention in, one band out.
#[derive(Clone)]
pub struct Generator<T: Real> {
    pub config: NetConfig,
    pub conditioning: Conditioning,
    pub backbone: Backbone,
    pub params: ParamSet<T>,
}

impl<T: Real> Generator<T> {
    pub fn new(config: &NetConfig, conditioning: Conditioning, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let mut params = ParamSet::default();
        let backbone = Backbone::build(
            &mut Builder {
                params: &mut params,
                rng,
                init: config.init,
            },
            config,
            conditioning.input_channels(),
            1,
        );
        Ok(Generator {
            config: config.clone(),
            conditioning,
            backbone,
            params,
        })
    }

    /// Network input after conditioning on the attention map.
    pub fn condition(&self, z: &Var<T>, attention: &Var<T>) -> Result<Var<T>> {
        expect_channels("generator source", z.shape(), 3)?;
        expect_channels("attention map", attention.shape(), 1)?;
        let [n, _, h, w] = z.shape();
        if attention.shape() != [n, 1, h, w] {
            return Err(Error::ShapeMismatch(format!(
                "attention {:?} does not match source {:?}",
                attention.shape(),
                z.shape()
            )));
        }
        Ok(match self.conditioning {
            Conditioning::Concat => ops::concat_channels(&[z.clone(), attention.clone()]),
            Conditioning::Multiply => ops::mul(z, &ops::broadcast_to(attention, z.shape())),
        })
    }

    /// `x_hat = G(z, A_s)`, shape `[n, 1, h, w]`. No output activation.
    pub fn forward(&self, z: &Var<T>, attention: &Var<T>) -> Result<Var<T>> {
        let input = self.condition(z, attention)?;
        Ok(self.backbone.forward(&self.params, &input).0)
    }

    pub fn cast<U: Real>(&self) -> Generator<U> {
        Generator {
            config: self.config.clone(),
            conditioning: self.conditioning,
            backbone: self.backbone.clone(),
            params: self.params.cast(),
        }
    }
}

/// Critic output: an unbounded score per sample and the activation taps.
pub struct CriticOutput<T: Real> {
    /// `[n, 1, 1, 1]`
    pub score: Var<T>,
    pub taps: Vec<Var<T>>,
}

/// Wasserstein critic: the shared backbone on one band, global average
/// pooling, and a three-layer leaky-ReLU MLP with a linear output.
#[derive(Clone)]
pub struct Discriminator<T: Real> {
    pub config: NetConfig,
    pub backbone: Backbone,
    pub mlp: [Conv; 3],
    pub params: ParamSet<T>,
}

impl<T: Real> Discriminator<T> {
    pub fn new(config: &NetConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let mut params = ParamSet::default();
        let mut b = Builder {
            params: &mut params,
            rng,
            init: config.critic_init,
        };
        let backbone = Backbone::build(&mut b, config, 1, config.disc_features);
        let mlp = [
            b.conv1("mlp.0", config.disc_features, config.mlp_hidden),
            b.conv1("mlp.1", config.mlp_hidden, config.mlp_hidden),
            b.conv1("mlp.2", config.mlp_hidden, 1),
        ];
        Ok(Discriminator {
            config: config.clone(),
            backbone,
            mlp,
            params,
        })
    }

    pub fn forward(&self, x: &Var<T>) -> Result<CriticOutput<T>> {
        expect_channels("critic input", x.shape(), 1)?;
        let p = &self.params;
        let (features, taps) = self.backbone.forward(p, x);
        let slope = T::of(self.config.leaky_slope);
        let pooled = ops::global_avg_pool(&features);
        let h = ops::leaky_relu(&self.mlp[0].forward(p, &pooled), slope);
        let h = ops::leaky_relu(&self.mlp[1].forward(p, &h), slope);
        let score = self.mlp[2].forward(p, &h);
        Ok(CriticOutput { score, taps })
    }

    pub fn score(&self, x: &Var<T>) -> Result<Var<T>> {
        Ok(self.forward(x)?.score)
    }

    pub fn cast<U: Real>(&self) -> Discriminator<U> {
        Discriminator {
            config: self.config.clone(),
            backbone: self.backbone.clone(),
            mlp: self.mlp.clone(),
            params: self.params.cast(),
        }
    }
}
