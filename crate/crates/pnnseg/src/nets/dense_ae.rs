//! Densely connected autoencoder.
//!
//! Each stage is a two-convolution dense block: the second conv consumes
//! the block input concatenated with the first conv's output. Encoder
//! stages pool after their block; decoder stages upsample, concatenate the
//! matching pre-pool features, and run another block. A 1x1 head maps the
//! outermost decoder features to the output channels.

use super::params::{init_conv_weight, init_tconv_weight, ParameterStore, TapedParams};
use super::unet::LEAKY_SLOPE;
use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::volume::Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DenseAEConfig {
    /// Growth (output channels) of each encoder stage, outermost first.
    pub stage_growths: Vec<usize>,
    pub bottleneck_growth: usize,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl DenseAEConfig {
    /// Default coordinator configuration.
    pub fn brain() -> Self {
        DenseAEConfig {
            stage_growths: vec![32, 64],
            bottleneck_growth: 128,
            in_channels: 1,
            out_channels: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.stage_growths.is_empty() {
            return Err(Error::Config("autoencoder needs at least one stage".into()));
        }
        if self.stage_growths.iter().any(|&g| g == 0)
            || self.bottleneck_growth == 0
            || self.in_channels == 0
            || self.out_channels == 0
        {
            return Err(Error::Config(format!("all autoencoder config fields must be positive: {self:?}")));
        }
        Ok(())
    }

    /// Shrink growths for desk-scale runs (floor at 1).
    pub fn scaled(mut self, scale: usize) -> Self {
        let s = scale.max(1);
        for g in &mut self.stage_growths {
            *g = (*g / s).max(1);
        }
        self.bottleneck_growth = (self.bottleneck_growth / s).max(1);
        self
    }
}

fn conv_param_count(cin: usize, cout: usize, k: usize) -> usize {
    cout * (cin * k * k) + cout
}

fn dense_block_count(cin: usize, growth: usize) -> usize {
    conv_param_count(cin, growth, 3) + conv_param_count(cin + growth, growth, 3)
}

/// Analytic parameter count of [`build_dense_autoencoder`]'s layout.
pub fn count_dense_ae_parameters(cfg: &DenseAEConfig) -> usize {
    let mut total = 0;
    let mut ch = cfg.in_channels;
    for &g in &cfg.stage_growths {
        total += dense_block_count(ch, g);
        ch = g;
    }
    total += dense_block_count(ch, cfg.bottleneck_growth);
    ch = cfg.bottleneck_growth;
    for &g in cfg.stage_growths.iter().rev() {
        total += ch * g * 2 * 2 + g; // transposed conv
        total += dense_block_count(2 * g, g);
        ch = g;
    }
    total + conv_param_count(ch, cfg.out_channels, 1)
}

#[derive(Debug, Clone)]
pub struct DenseAutoencoder {
    pub cfg: DenseAEConfig,
    pub params: ParameterStore,
}

/// Allocate and initialize the autoencoder; same init scheme and draw
/// order conventions as the UNet builder.
pub fn build_dense_autoencoder(cfg: DenseAEConfig, rng: &mut Rng) -> Result<DenseAutoencoder> {
    cfg.validate()?;
    let mut params = ParameterStore::new();
    let push_conv = |params: &mut ParameterStore, name: &str, cin: usize, cout: usize, k: usize, rng: &mut Rng| -> Result<()> {
        params.insert(format!("{name}.weight"), init_conv_weight(cout, cin, k, rng))?;
        params.insert(format!("{name}.bias"), Tensor::zeros(vec![cout]))
    };
    let push_block = |params: &mut ParameterStore, name: &str, cin: usize, g: usize, rng: &mut Rng| -> Result<()> {
        params.insert(format!("{name}.conv1.weight"), init_conv_weight(g, cin, 3, rng))?;
        params.insert(format!("{name}.conv1.bias"), Tensor::zeros(vec![g]))?;
        params.insert(format!("{name}.conv2.weight"), init_conv_weight(g, cin + g, 3, rng))?;
        params.insert(format!("{name}.conv2.bias"), Tensor::zeros(vec![g]))
    };

    let mut ch = cfg.in_channels;
    for (i, &g) in cfg.stage_growths.iter().enumerate() {
        push_block(&mut params, &format!("enc{i}"), ch, g, rng)?;
        ch = g;
    }
    push_block(&mut params, "bottleneck", ch, cfg.bottleneck_growth, rng)?;
    ch = cfg.bottleneck_growth;
    for (i, &g) in cfg.stage_growths.iter().enumerate().rev() {
        params.insert(format!("dec{i}.up.weight"), init_tconv_weight(ch, g, 2, rng))?;
        params.insert(format!("dec{i}.up.bias"), Tensor::zeros(vec![g]))?;
        push_block(&mut params, &format!("dec{i}"), 2 * g, g, rng)?;
        ch = g;
    }
    push_conv(&mut params, "head", ch, cfg.out_channels, 1, rng)?;

    debug_assert_eq!(params.total_elements(), count_dense_ae_parameters(&cfg));
    Ok(DenseAutoencoder { cfg, params })
}

impl DenseAutoencoder {
    pub fn register(&self, tape: &mut Tape) -> TapedParams {
        self.params.register_on(tape)
    }

    /// Forward pass. Returns the reconstruction (out_channels) and the
    /// outermost decoder feature map, which optional heads may consume.
    pub fn forward_with(
        &self,
        tape: &mut Tape,
        taped: &TapedParams,
        input: Var,
    ) -> Result<(Var, Var)> {
        let (_, c, h, w) = tape.value(input).dims4()?;
        if c != self.cfg.in_channels {
            return Err(Error::Shape(format!(
                "input has {c} channels, autoencoder expects {}",
                self.cfg.in_channels
            )));
        }
        let div = 1usize << self.cfg.stage_growths.len();
        if h % div != 0 || w % div != 0 {
            return Err(Error::Shape(format!(
                "input extents {h}x{w} are not divisible by 2^stages = {div}"
            )));
        }

        let dense_block = |tape: &mut Tape, name: &str, x: Var| -> Result<Var> {
            let a = tape.conv2d(x, taped.var(&format!("{name}.conv1.weight"))?, taped.var(&format!("{name}.conv1.bias"))?, 1, 1)?;
            let a = tape.leaky_relu(a, LEAKY_SLOPE)?;
            let cat = tape.concat_channels(x, a)?;
            let b = tape.conv2d(cat, taped.var(&format!("{name}.conv2.weight"))?, taped.var(&format!("{name}.conv2.bias"))?, 1, 1)?;
            tape.leaky_relu(b, LEAKY_SLOPE)
        };

        let mut x = input;
        let mut pre_pool = Vec::with_capacity(self.cfg.stage_growths.len());
        for i in 0..self.cfg.stage_growths.len() {
            x = dense_block(tape, &format!("enc{i}"), x)?;
            pre_pool.push(x);
            x = tape.maxpool2d(x, 2)?;
        }
        x = dense_block(tape, "bottleneck", x)?;
        for i in (0..self.cfg.stage_growths.len()).rev() {
            let up = tape.conv_transpose2d(
                x,
                taped.var(&format!("dec{i}.up.weight"))?,
                taped.var(&format!("dec{i}.up.bias"))?,
                2,
            )?;
            x = tape.leaky_relu(up, LEAKY_SLOPE)?;
            x = tape.concat_channels(x, pre_pool[i])?;
            x = dense_block(tape, &format!("dec{i}"), x)?;
        }
        let recon = tape.conv2d(x, taped.var("head.weight")?, taped.var("head.bias")?, 1, 0)?;
        Ok((recon, x))
    }

    pub fn forward(&self, tape: &mut Tape, input: Var) -> Result<(Var, Var, TapedParams)> {
        let taped = self.register(tape);
        let (recon, features) = self.forward_with(tape, &taped, input)?;
        Ok((recon, features, taped))
    }
}
