//! UNet builder: per level two 3x3 convolutions, 2x2 max-pool contractions,
//! 2x2 stride-2 transposed-conv expansions with skip concatenation, and a
//! 1x1 class head. Channels double down the encoder and halve back up.

use super::params::{init_conv_weight, init_tconv_weight, ParameterStore, TapedParams};
use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::volume::Rng;
use serde::{Deserialize, Serialize};

/// Negative slope of the leaky rectifier after every convolution except
/// the final head.
pub const LEAKY_SLOPE: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct UNetConfig {
    /// Number of contractions (= expansions).
    pub depth: usize,
    /// Filter count of the first encoder level.
    pub init_filters: usize,
    pub in_channels: usize,
    pub class_count: usize,
}

impl UNetConfig {
    /// Four contractions/expansions, 64 initial filters.
    pub fn deep() -> Self {
        UNetConfig { depth: 4, init_filters: 64, in_channels: 1, class_count: 3 }
    }

    /// Two contractions/expansions, 256 initial filters.
    pub fn wide() -> Self {
        UNetConfig { depth: 2, init_filters: 256, in_channels: 1, class_count: 3 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 || self.init_filters == 0 || self.in_channels == 0 || self.class_count == 0 {
            return Err(Error::Config(format!("all UNet config fields must be positive: {self:?}")));
        }
        Ok(())
    }

    /// Shrink the filter budget for desk-scale runs (floor at 1).
    pub fn scaled(mut self, scale: usize) -> Self {
        self.init_filters = (self.init_filters / scale.max(1)).max(1);
        self
    }

    fn level_filters(&self, level: usize) -> usize {
        self.init_filters << level
    }
}

fn conv_param_count(cin: usize, cout: usize, k: usize) -> usize {
    cout * (cin * k * k) + cout
}

/// Analytic parameter count of [`build_unet`]'s layer plan, without
/// allocating any weights.
pub fn count_unet_parameters(cfg: &UNetConfig) -> usize {
    let mut total = 0;
    let mut ch = cfg.in_channels;
    for level in 0..cfg.depth {
        let f = cfg.level_filters(level);
        total += conv_param_count(ch, f, 3) + conv_param_count(f, f, 3);
        ch = f;
    }
    let f = cfg.level_filters(cfg.depth);
    total += conv_param_count(ch, f, 3) + conv_param_count(f, f, 3);
    ch = f;
    for level in (0..cfg.depth).rev() {
        let f = cfg.level_filters(level);
        total += ch * f * 2 * 2 + f; // transposed conv
        total += conv_param_count(2 * f, f, 3) + conv_param_count(f, f, 3);
        ch = f;
    }
    total + conv_param_count(ch, cfg.class_count, 1)
}

/// A built UNet: configuration plus its named weights.
#[derive(Debug, Clone)]
pub struct UNet {
    pub cfg: UNetConfig,
    pub params: ParameterStore,
}

/// Allocate and initialize a UNet. Weights are drawn from `rng` in build
/// order (encoder, bottleneck, decoder deepest-first, head); biases start
/// at zero.
pub fn build_unet(cfg: UNetConfig, rng: &mut Rng) -> Result<UNet> {
    cfg.validate()?;
    let mut params = ParameterStore::new();
    let push_conv = |params: &mut ParameterStore, name: &str, cin: usize, cout: usize, k: usize, rng: &mut Rng| -> Result<()> {
        params.insert(format!("{name}.weight"), init_conv_weight(cout, cin, k, rng))?;
        params.insert(format!("{name}.bias"), Tensor::zeros(vec![cout]))
    };

    let mut ch = cfg.in_channels;
    for level in 0..cfg.depth {
        let f = cfg.level_filters(level);
        push_conv(&mut params, &format!("enc{level}.conv1"), ch, f, 3, rng)?;
        push_conv(&mut params, &format!("enc{level}.conv2"), f, f, 3, rng)?;
        ch = f;
    }
    let f = cfg.level_filters(cfg.depth);
    push_conv(&mut params, "bottleneck.conv1", ch, f, 3, rng)?;
    push_conv(&mut params, "bottleneck.conv2", f, f, 3, rng)?;
    ch = f;
    for level in (0..cfg.depth).rev() {
        let f = cfg.level_filters(level);
        params.insert(format!("dec{level}.up.weight"), init_tconv_weight(ch, f, 2, rng))?;
        params.insert(format!("dec{level}.up.bias"), Tensor::zeros(vec![f]))?;
        push_conv(&mut params, &format!("dec{level}.conv1"), 2 * f, f, 3, rng)?;
        push_conv(&mut params, &format!("dec{level}.conv2"), f, f, 3, rng)?;
        ch = f;
    }
    push_conv(&mut params, "head", ch, cfg.class_count, 1, rng)?;

    debug_assert_eq!(params.total_elements(), count_unet_parameters(&cfg));
    Ok(UNet { cfg, params })
}

impl UNet {
    pub fn register(&self, tape: &mut Tape) -> TapedParams {
        self.params.register_on(tape)
    }

    /// Forward through already-registered parameters; returns logits with
    /// the input's spatial extents.
    pub fn forward_with(&self, tape: &mut Tape, taped: &TapedParams, input: Var) -> Result<Var> {
        let (_, c, h, w) = tape.value(input).dims4()?;
        if c != self.cfg.in_channels {
            return Err(Error::Shape(format!(
                "input has {c} channels, network expects {}",
                self.cfg.in_channels
            )));
        }
        let div = 1usize << self.cfg.depth;
        if h % div != 0 || w % div != 0 {
            return Err(Error::Shape(format!(
                "input extents {h}x{w} are not divisible by 2^depth = {div}"
            )));
        }

        let conv_block = |tape: &mut Tape, name: &str, x: Var| -> Result<Var> {
            let y = tape.conv2d(x, taped.var(&format!("{name}.weight"))?, taped.var(&format!("{name}.bias"))?, 1, 1)?;
            tape.leaky_relu(y, LEAKY_SLOPE)
        };

        let mut x = input;
        let mut skips = Vec::with_capacity(self.cfg.depth);
        for level in 0..self.cfg.depth {
            x = conv_block(tape, &format!("enc{level}.conv1"), x)?;
            x = conv_block(tape, &format!("enc{level}.conv2"), x)?;
            skips.push(x);
            x = tape.maxpool2d(x, 2)?;
        }
        x = conv_block(tape, "bottleneck.conv1", x)?;
        x = conv_block(tape, "bottleneck.conv2", x)?;
        for level in (0..self.cfg.depth).rev() {
            let up = tape.conv_transpose2d(
                x,
                taped.var(&format!("dec{level}.up.weight"))?,
                taped.var(&format!("dec{level}.up.bias"))?,
                2,
            )?;
            x = tape.leaky_relu(up, LEAKY_SLOPE)?;
            x = tape.concat_channels(x, skips[level])?;
            x = conv_block(tape, &format!("dec{level}.conv1"), x)?;
            x = conv_block(tape, &format!("dec{level}.conv2"), x)?;
        }
        tape.conv2d(x, taped.var("head.weight")?, taped.var("head.bias")?, 1, 0)
    }

    /// Register parameters and forward in one go.
    pub fn forward(&self, tape: &mut Tape, input: Var) -> Result<(Var, TapedParams)> {
        let taped = self.register(tape);
        let logits = self.forward_with(tape, &taped, input)?;
        Ok((logits, taped))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deep_unet_parameter_count() {
        assert_eq!(count_unet_parameters(&UNetConfig::deep()), 31_030_723);
    }

    #[test]
    fn wide_unet_parameter_count() {
        assert_eq!(count_unet_parameters(&UNetConfig::wide()), 29_762_307);
    }

    #[test]
    fn minimal_unet_parameter_count_by_hand() {
        let cfg = UNetConfig { depth: 1, init_filters: 1, in_channels: 1, class_count: 1 };
        assert_eq!(count_unet_parameters(&cfg), 118);
        let mut rng = Rng::new(1);
        let net = build_unet(cfg, &mut rng).unwrap();
        assert_eq!(net.params.total_elements(), 118);
    }

    #[test]
    fn forward_shape_contract() {
        let cfg = UNetConfig { depth: 2, init_filters: 2, in_channels: 1, class_count: 3 };
        let net = build_unet(cfg, &mut Rng::new(5)).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(vec![2, 1, 16, 16]));
        let (logits, _) = net.forward(&mut tape, x).unwrap();
        assert_eq!(tape.value(logits).shape(), &[2, 3, 16, 16]);
    }

    #[test]
    fn forward_rejects_indivisible_extent() {
        let cfg = UNetConfig { depth: 4, init_filters: 1, in_channels: 1, class_count: 3 };
        let net = build_unet(cfg, &mut Rng::new(5)).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(vec![1, 1, 60, 60]));
        assert!(matches!(net.forward(&mut tape, x), Err(Error::Shape(_))));
    }

    #[test]
    fn build_is_seed_deterministic() {
        let cfg = UNetConfig { depth: 2, init_filters: 3, in_channels: 1, class_count: 3 };
        let a = build_unet(cfg, &mut Rng::new(42)).unwrap();
        let b = build_unet(cfg, &mut Rng::new(42)).unwrap();
        for ((na, ta), (nb, tb)) in a.params.iter().zip(b.params.iter()) {
            assert_eq!(na, nb);
            assert_eq!(ta.data(), tb.data());
        }
        let c = build_unet(cfg, &mut Rng::new(43)).unwrap();
        let first = |n: &UNet| n.params.iter().next().map(|(_, t)| t.data().to_vec()).unwrap();
        assert_ne!(first(&a), first(&c));
    }

    #[test]
    fn forward_is_deterministic() {
        let cfg = UNetConfig { depth: 1, init_filters: 2, in_channels: 1, class_count: 2 };
        let net = build_unet(cfg, &mut Rng::new(9)).unwrap();
        let run = || {
            let mut tape = Tape::new();
            let data: Vec<f64> = (0..64).map(|i| (i as f64 * 0.21).cos()).collect();
            let x = tape.constant(Tensor::new(vec![1, 1, 8, 8], data).unwrap());
            let (y, _) = net.forward(&mut tape, x).unwrap();
            tape.value(y).data().to_vec()
        };
        assert_eq!(run(), run());
    }
}
