//! Soft voting, the dual-net ensemble, and the coordinated composition in
//! which a dense autoencoder feeds both UNets and their softmax outputs
//! are averaged.

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::nets::{
    build_dense_autoencoder, build_unet, init_conv_weight, DenseAEConfig, DenseAutoencoder,
    ParameterStore, TapedParams, UNet, UNetConfig,
};
use crate::volume::Rng;
use serde::{Deserialize, Serialize};

/// How an ensemble of pre-built members is trained.
///
/// `Transfer` stacks separately trained members and forbids any further
/// weight update; `Retrain` initializes fresh members and trains them
/// jointly under the shared vote loss. Their forward functions are
/// identical for identical weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EnsembleStrategy {
    Transfer,
    Retrain,
}

/// Elementwise arithmetic mean of probability maps, validated: at least
/// two members, identical shapes, and per-pixel channel sums of 1.
pub fn soft_vote(members: &[Tensor]) -> Result<Tensor> {
    if members.len() < 2 {
        return Err(Error::Config(format!(
            "soft vote needs at least 2 members, got {}",
            members.len()
        )));
    }
    let shape = members[0].shape().to_vec();
    for m in members {
        if m.shape() != shape {
            return Err(Error::Shape(format!(
                "vote member shapes differ: {:?} vs {:?}",
                shape,
                m.shape()
            )));
        }
        check_probabilities(m)?;
    }
    let mut data = members[0].data().to_vec();
    for m in &members[1..] {
        for (d, v) in data.iter_mut().zip(m.data()) {
            *d += v;
        }
    }
    let k = members.len() as f64;
    for d in &mut data {
        *d /= k;
    }
    Tensor::new(shape, data)
}

fn check_probabilities(t: &Tensor) -> Result<()> {
    let (n, c, h, w) = t.dims4()?;
    let plane = h * w;
    let data = t.data();
    for ni in 0..n {
        for p in 0..plane {
            let mut sum = 0.0;
            for ci in 0..c {
                let v = data[(ni * c + ci) * plane + p];
                if !(-1e-9..=1.0 + 1e-9).contains(&v) {
                    return Err(Error::Domain(format!("probability {v} outside [0, 1]")));
                }
                sum += v;
            }
            if (sum - 1.0).abs() > 1e-6 {
                return Err(Error::Domain(format!(
                    "per-pixel channel sum {sum} is not 1"
                )));
            }
        }
    }
    Ok(())
}

/// Per-pixel argmax over channels. Ties go to the lowest class index.
pub fn argmax_classes(probs: &Tensor) -> Result<Vec<u8>> {
    let (n, c, h, w) = probs.dims4()?;
    if c == 0 || c > u8::MAX as usize {
        return Err(Error::Shape(format!("cannot argmax over {c} channels")));
    }
    let plane = h * w;
    let data = probs.data();
    let mut out = Vec::with_capacity(n * plane);
    for ni in 0..n {
        for p in 0..plane {
            let mut best = 0u8;
            let mut best_v = data[(ni * c) * plane + p];
            for ci in 1..c {
                let v = data[(ni * c + ci) * plane + p];
                if v > best_v {
                    best_v = v;
                    best = ci as u8;
                }
            }
            out.push(best);
        }
    }
    Ok(out)
}

/// Deep-UNet and Wide-UNet stacked by soft voting.
#[derive(Debug, Clone)]
pub struct EnsembleUNet {
    pub deep: UNet,
    pub wide: UNet,
}

/// Vote plus the tape handles of everything that produced it.
pub struct VoteForward {
    pub voted: Var,
    pub taped_deep: TapedParams,
    pub taped_wide: TapedParams,
}

impl EnsembleUNet {
    /// Fresh members (the retrain path); member class counts must agree.
    pub fn build(deep_cfg: UNetConfig, wide_cfg: UNetConfig, rng: &mut Rng) -> Result<Self> {
        if deep_cfg.class_count != wide_cfg.class_count {
            return Err(Error::Config(format!(
                "member class counts differ: {} vs {}",
                deep_cfg.class_count, wide_cfg.class_count
            )));
        }
        Ok(EnsembleUNet {
            deep: build_unet(deep_cfg, rng)?,
            wide: build_unet(wide_cfg, rng)?,
        })
    }

    /// Stack already-trained members (the transfer path).
    pub fn from_members(deep: UNet, wide: UNet) -> Result<Self> {
        if deep.cfg.class_count != wide.cfg.class_count {
            return Err(Error::Config(format!(
                "member class counts differ: {} vs {}",
                deep.cfg.class_count, wide.cfg.class_count
            )));
        }
        Ok(EnsembleUNet { deep, wide })
    }

    /// Softmax each member's logits on `input`, then average.
    pub fn forward_vote(&self, tape: &mut Tape, input: Var) -> Result<VoteForward> {
        let (deep_logits, taped_deep) = self.deep.forward(tape, input)?;
        let (wide_logits, taped_wide) = self.wide.forward(tape, input)?;
        let pd = tape.softmax_channels(deep_logits)?;
        let pw = tape.softmax_channels(wide_logits)?;
        let voted = tape.mean_stack(&[pd, pw])?;
        Ok(VoteForward { voted, taped_deep, taped_wide })
    }
}

/// Configuration of the coordinated composition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PnnConfig {
    pub ae: DenseAEConfig,
    pub deep: UNetConfig,
    pub wide: UNetConfig,
    /// Weight of the reconstruction term in the joint loss.
    pub recon_weight: f64,
    /// When set, a 1x1 segmentation head on the autoencoder's outermost
    /// features contributes a third member to the vote.
    pub ae_in_vote: bool,
}

impl PnnConfig {
    pub fn new(ae: DenseAEConfig, deep: UNetConfig, wide: UNetConfig) -> Self {
        PnnConfig { ae, deep, wide, recon_weight: 0.1, ae_in_vote: false }
    }

    pub fn validate(&self) -> Result<()> {
        self.ae.validate()?;
        self.deep.validate()?;
        self.wide.validate()?;
        if self.deep.class_count != self.wide.class_count {
            return Err(Error::Config(format!(
                "member class counts differ: {} vs {}",
                self.deep.class_count, self.wide.class_count
            )));
        }
        if self.ae.out_channels != self.deep.in_channels || self.ae.out_channels != self.wide.in_channels {
            return Err(Error::Config(format!(
                "coordinator emits {} channels but members expect {} / {}",
                self.ae.out_channels, self.deep.in_channels, self.wide.in_channels
            )));
        }
        if self.recon_weight < 0.0 {
            return Err(Error::Config(format!(
                "reconstruction weight must be nonnegative, got {}",
                self.recon_weight
            )));
        }
        Ok(())
    }
}

/// The composition: a dense autoencoder coordinates the input, both UNets
/// consume the coordinated signal, and their softmax outputs are merged by
/// soft voting.
#[derive(Debug, Clone)]
pub struct PnnUNet {
    pub cfg: PnnConfig,
    pub ae: DenseAutoencoder,
    pub deep: UNet,
    pub wide: UNet,
    /// 1x1 head on the coordinator features, present iff `ae_in_vote`.
    pub seg_head: Option<ParameterStore>,
}

pub struct PnnForward {
    pub voted: Var,
    pub recon: Var,
    pub taped_ae: TapedParams,
    pub taped_deep: TapedParams,
    pub taped_wide: TapedParams,
    pub taped_head: Option<TapedParams>,
}

/// Build order (and so the init draw order): coordinator, deep member,
/// wide member, optional vote head.
pub fn build_pnn(cfg: PnnConfig, rng: &mut Rng) -> Result<PnnUNet> {
    cfg.validate()?;
    let ae = build_dense_autoencoder(cfg.ae.clone(), rng)?;
    let deep = build_unet(cfg.deep, rng)?;
    let wide = build_unet(cfg.wide, rng)?;
    let seg_head = if cfg.ae_in_vote {
        let features = cfg.ae.stage_growths[0];
        let mut store = ParameterStore::new();
        store.insert("seghead.weight", init_conv_weight(cfg.deep.class_count, features, 1, rng))?;
        store.insert("seghead.bias", Tensor::zeros(vec![cfg.deep.class_count]))?;
        Some(store)
    } else {
        None
    };
    Ok(PnnUNet { cfg, ae, deep, wide, seg_head })
}

impl PnnUNet {
    /// Full forward: coordinate, run both members on the coordinated
    /// signal, vote. The reconstruction is the coordinated signal itself.
    pub fn forward(&self, tape: &mut Tape, input: Var) -> Result<PnnForward> {
        let (recon, features, taped_ae) = self.ae.forward(tape, input)?;
        let (voted, taped_deep, taped_wide, taped_head) =
            self.vote_on(tape, recon, Some(features))?;
        Ok(PnnForward { voted, recon, taped_ae, taped_deep, taped_wide, taped_head })
    }

    /// Vote of the member nets on an externally supplied signal. With the
    /// coordinator bypassed (signal = raw batch) this reduces to the plain
    /// ensemble forward.
    pub fn vote_on(
        &self,
        tape: &mut Tape,
        coordinated: Var,
        features: Option<Var>,
    ) -> Result<(Var, TapedParams, TapedParams, Option<TapedParams>)> {
        let (deep_logits, taped_deep) = self.deep.forward(tape, coordinated)?;
        let (wide_logits, taped_wide) = self.wide.forward(tape, coordinated)?;
        let pd = tape.softmax_channels(deep_logits)?;
        let pw = tape.softmax_channels(wide_logits)?;
        let mut members = vec![pd, pw];
        let taped_head = match (&self.seg_head, features) {
            (Some(head), Some(features)) => {
                let taped = head.register_on(tape);
                let logits = tape.conv2d(
                    features,
                    taped.var("seghead.weight")?,
                    taped.var("seghead.bias")?,
                    1,
                    0,
                )?;
                members.push(tape.softmax_channels(logits)?);
                Some(taped)
            }
            (Some(_), None) => {
                return Err(Error::Config(
                    "vote head requires coordinator features".into(),
                ))
            }
            (None, _) => None,
        };
        let voted = tape.mean_stack(&members)?;
        Ok((voted, taped_deep, taped_wide, taped_head))
    }
}

/// Joint loss: cross-entropy on the log of the voted probabilities plus
/// `lambda` times the mean-squared reconstruction error against the input
/// batch.
pub fn pnn_loss(
    tape: &mut Tape,
    voted: Var,
    recon: Var,
    targets: &[u8],
    batch: &Tensor,
    lambda: f64,
) -> Result<Var> {
    if lambda < 0.0 {
        return Err(Error::Config(format!(
            "reconstruction weight must be nonnegative, got {lambda}"
        )));
    }
    let seg = tape.nll_on_probs(voted, targets)?;
    let rec = tape.mse_against(recon, batch)?;
    tape.add_weighted(seg, 1.0, rec, lambda)
}
