//! Training: the five-model protocol over derived seeds, with
//! best-validation checkpointing.
//!
//! Stream discipline per run: the split and epoch shuffles draw from
//! `Rng(seed)`, weight init from `Rng(seed + 1)`, augmentation from
//! `Rng(seed + 2)`. Everything else is sequential and deterministic.

use super::checkpoint::{
    checkpoint_stem, load_model, manifest_path, save_checkpoint, ArchSpec, LoadedModel,
};
use super::config::{ExperimentConfig, ModelKind, Phase};
use super::evaluate::{batch_from_slices, evaluate_volumes, VolumeScores, SLICE_TARGET};
use crate::augment::{apply_policy_volume, AugmentPolicy, ElasticParams};
use crate::autodiff::{AdamState, Tape, Tensor};
use crate::ensemble::{build_pnn, pnn_loss, EnsembleUNet, PnnUNet};
use crate::error::{Error, Result};
use crate::metrics::mean;
use crate::nets::{build_unet, ParameterStore, UNet};
use crate::volume::{
    cache, derive_seed, pad_slice_to_target, reassemble, reassemble_mask, slice_mask,
    slice_volume, split_dataset, MaskVolume, Rng, Slice2D, Volume3D, CLASS_COUNT,
};
use std::path::PathBuf;

/// Flip probability of the augmented phase.
pub const FLIP_PROBABILITY: f64 = 0.25;

/// What a training run produced.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: PathBuf,
    pub best_epoch: usize,
    pub best_val_dice: Option<f64>,
    pub first_epoch_loss: f64,
    pub last_epoch_loss: f64,
    pub steps: u64,
}

/// One padded training sample.
type Sample = (Slice2D<f32>, Slice2D<u8>);

/// Train (or, for the transfer ensemble, assemble) the configured model
/// under the given experiment number.
pub fn train_model(cfg: &ExperimentConfig, experiment: u32) -> Result<TrainOutcome> {
    cfg.validate()?;
    let seed = derive_seed(experiment)?;
    if cfg.model == ModelKind::EnsembleTransfer {
        return assemble_transfer(cfg, experiment, seed);
    }

    let data = cache::load_cache(&cfg.data_dir)?;
    let ids: Vec<String> = data.iter().map(|(v, _)| v.id.clone()).collect();
    let (train_ids, val_ids, _) = split_dataset(&ids, seed as u64, (0.6, 0.2, 0.2))?;
    let by_id = |wanted: &[String]| -> Vec<(Volume3D, MaskVolume)> {
        wanted
            .iter()
            .filter_map(|id| data.iter().find(|(v, _)| &v.id == id).cloned())
            .collect()
    };
    let train_set = by_id(&train_ids);
    let val_set = by_id(&val_ids);

    let mut order_rng = Rng::new(seed as u64);
    let mut init_rng = Rng::new(seed as u64 + 1);
    let mut augment_rng = Rng::new(seed as u64 + 2);

    let train_policy = match cfg.phase {
        Phase::NoAug => AugmentPolicy::test(),
        Phase::Aug => AugmentPolicy::train(
            FLIP_PROBABILITY,
            ElasticParams::default_for_width(SLICE_TARGET),
        )?,
    };
    let val_policy = match cfg.phase {
        Phase::NoAug => AugmentPolicy::test(),
        Phase::Aug => AugmentPolicy::val(FLIP_PROBABILITY)?,
    };

    let mut model = TrainableModel::build(cfg, &mut init_rng)?;
    let mut optimizers = model.fresh_optimizers(cfg.lr)?;

    let mut best: Option<(f64, usize)> = None;
    let mut best_weights: Option<Vec<ParameterStore>> = None;
    let mut first_epoch_loss = f64::NAN;
    let mut last_epoch_loss = f64::NAN;
    let mut steps = 0u64;

    for epoch in 1..=cfg.epochs {
        let mut epoch_ids = train_ids.clone();
        order_rng.shuffle(&mut epoch_ids);

        let mut samples: Vec<Sample> = Vec::new();
        for id in &epoch_ids {
            let (vol, mask) = train_set
                .iter()
                .find(|(v, _)| &v.id == id)
                .ok_or_else(|| Error::Data(format!("volume {id} missing from training set")))?;
            let mut padded = padded_samples(vol, mask)?;
            apply_policy_volume(&mut padded, &train_policy, &mut augment_rng)?;
            if cfg.exclude_empty_slices {
                padded.retain(|(_, m)| m.data.iter().any(|&l| l != 0));
            }
            samples.extend(padded);
        }

        let mut losses = Vec::new();
        for chunk in samples.chunks(cfg.batch_size) {
            let images: Vec<Slice2D<f32>> = chunk.iter().map(|(i, _)| i.clone()).collect();
            let batch = batch_from_slices(&images)?;
            let targets: Vec<u8> = chunk.iter().flat_map(|(_, m)| m.data.iter().copied()).collect();
            let loss = model.train_step(cfg, &batch, &targets, &mut optimizers)?;
            losses.push(loss);
            steps += 1;
        }
        let epoch_loss = mean(&losses);
        if epoch == 1 {
            first_epoch_loss = epoch_loss;
        }
        last_epoch_loss = epoch_loss;

        // Model selection by validation mean Dice over both labels.
        let val_dice = if val_set.is_empty() {
            None
        } else {
            let val_view = augmented_copies(&val_set, &val_policy, &mut augment_rng)?;
            let mut predict = |b: &Tensor| model.predict_probs(b);
            let scores = evaluate_volumes(&mut predict, &val_view, cfg.batch_size, seed)?;
            Some(mean_val_dice(&scores))
        };
        let improved = match (val_dice, best) {
            (Some(d), Some((b, _))) => d > b,
            (Some(_), None) => true,
            // Without a validation split the last epoch wins.
            (None, _) => true,
        };
        if improved {
            best = val_dice.map(|d| (d, epoch)).or(Some((f64::NAN, epoch)));
            best_weights = Some(model.snapshot());
        }
    }

    let (best_dice, best_epoch) = best.unwrap_or((f64::NAN, cfg.epochs));
    let mut weights = best_weights.unwrap_or_else(|| model.snapshot());
    for store in &mut weights {
        store.quantize_f32();
    }
    let stores = model.named_stores(&weights);
    let checkpoint = save_checkpoint(
        &cfg.out_dir,
        cfg.model,
        cfg.phase,
        experiment,
        seed,
        best_epoch,
        if best_dice.is_nan() { None } else { Some(best_dice) },
        model.arch_spec(cfg),
        &stores,
    )?;
    Ok(TrainOutcome {
        checkpoint,
        best_epoch,
        best_val_dice: if best_dice.is_nan() { None } else { Some(best_dice) },
        first_epoch_loss,
        last_epoch_loss,
        steps,
    })
}

/// Stack the already-trained member checkpoints without touching them.
fn assemble_transfer(cfg: &ExperimentConfig, experiment: u32, seed: u32) -> Result<TrainOutcome> {
    let deep_stem = checkpoint_stem(ModelKind::Deep, cfg.phase, experiment);
    let wide_stem = checkpoint_stem(ModelKind::Wide, cfg.phase, experiment);
    for stem in [&deep_stem, &wide_stem] {
        if !manifest_path(&cfg.out_dir, stem).exists() {
            return Err(Error::Dependency(format!(
                "transfer ensemble needs member checkpoint {stem} in {}",
                cfg.out_dir.display()
            )));
        }
    }
    let (dman, deep) = load_model(&cfg.out_dir, &deep_stem)?;
    let (wman, wide) = load_model(&cfg.out_dir, &wide_stem)?;
    let (LoadedModel::Unet(deep), LoadedModel::Unet(wide)) = (deep, wide) else {
        return Err(Error::Format("member checkpoints are not plain UNets".into()));
    };
    if dman.seed != seed || wman.seed != seed {
        return Err(Error::Data(format!(
            "member checkpoints carry seeds {} / {}, expected {seed}",
            dman.seed, wman.seed
        )));
    }
    let val_dice = match (dman.val_dice, wman.val_dice) {
        (Some(a), Some(b)) => Some((a + b) / 2.0),
        _ => None,
    };
    let arch = ArchSpec::Ensemble { deep: deep.cfg, wide: wide.cfg };
    let ens = EnsembleUNet::from_members(deep, wide)?;
    let checkpoint = save_checkpoint(
        &cfg.out_dir,
        ModelKind::EnsembleTransfer,
        cfg.phase,
        experiment,
        seed,
        0,
        val_dice,
        arch,
        &[("deep", &ens.deep.params), ("wide", &ens.wide.params)],
    )?;
    Ok(TrainOutcome {
        checkpoint,
        best_epoch: 0,
        best_val_dice: val_dice,
        first_epoch_loss: f64::NAN,
        last_epoch_loss: f64::NAN,
        steps: 0,
    })
}

/// Pad every axial slice of a volume/mask pair to the network size.
pub fn padded_samples(vol: &Volume3D, mask: &MaskVolume) -> Result<Vec<Sample>> {
    let imgs = slice_volume(vol);
    let msks = slice_mask(mask);
    imgs.into_iter()
        .zip(msks)
        .map(|(i, m)| {
            let (pi, _) = pad_slice_to_target(&i, SLICE_TARGET)?;
            let (pm, _) = pad_slice_to_target(&m, SLICE_TARGET)?;
            Ok((pi, pm))
        })
        .collect()
}

/// Volume copies with the validation policy applied (used for the
/// per-epoch selection pass in the augmented phase).
fn augmented_copies(
    set: &[(Volume3D, MaskVolume)],
    policy: &AugmentPolicy,
    rng: &mut Rng,
) -> Result<Vec<(Volume3D, MaskVolume)>> {
    if policy.is_identity() {
        return Ok(set.to_vec());
    }
    let mut out = Vec::with_capacity(set.len());
    for (vol, mask) in set {
        let imgs = slice_volume(vol);
        let msks = slice_mask(mask);
        let mut pairs: Vec<(Slice2D<f32>, Slice2D<u8>)> = imgs.into_iter().zip(msks).collect();
        apply_policy_volume(&mut pairs, policy, rng)?;
        let (imgs, msks): (Vec<_>, Vec<_>) = pairs.into_iter().unzip();
        out.push((
            reassemble(&imgs, vol.extents, vol.id.clone())?,
            reassemble_mask(&msks, mask.extents)?,
        ));
    }
    Ok(out)
}

pub fn mean_val_dice(scores: &[VolumeScores]) -> f64 {
    let per_volume: Vec<f64> = scores.iter().map(|s| (s.l1.dice + s.l2.dice) / 2.0).collect();
    mean(&per_volume)
}

/// A model under training: the three trainable kinds and their optimizer
/// layout.
pub enum TrainableModel {
    Single(UNet),
    Joint(EnsembleUNet),
    Coordinated(PnnUNet),
}

impl TrainableModel {
    pub fn build(cfg: &ExperimentConfig, init_rng: &mut Rng) -> Result<Self> {
        Ok(match cfg.model {
            ModelKind::Deep => TrainableModel::Single(build_unet(cfg.deep_arch(), init_rng)?),
            ModelKind::Wide => TrainableModel::Single(build_unet(cfg.wide_arch(), init_rng)?),
            ModelKind::EnsembleRetrain => TrainableModel::Joint(EnsembleUNet::build(
                cfg.deep_arch(),
                cfg.wide_arch(),
                init_rng,
            )?),
            ModelKind::Pnn => TrainableModel::Coordinated(build_pnn(cfg.pnn_arch(), init_rng)?),
            ModelKind::EnsembleTransfer => {
                return Err(Error::Config(
                    "the transfer ensemble is assembled from member checkpoints, not trained".into(),
                ))
            }
        })
    }

    fn stores(&self) -> Vec<&ParameterStore> {
        match self {
            TrainableModel::Single(net) => vec![&net.params],
            TrainableModel::Joint(ens) => vec![&ens.deep.params, &ens.wide.params],
            TrainableModel::Coordinated(net) => {
                let mut v = vec![&net.ae.params, &net.deep.params, &net.wide.params];
                if let Some(head) = &net.seg_head {
                    v.push(head);
                }
                v
            }
        }
    }

    fn stores_mut(&mut self) -> Vec<&mut ParameterStore> {
        match self {
            TrainableModel::Single(net) => vec![&mut net.params],
            TrainableModel::Joint(ens) => vec![&mut ens.deep.params, &mut ens.wide.params],
            TrainableModel::Coordinated(net) => {
                let mut v = vec![&mut net.ae.params, &mut net.deep.params, &mut net.wide.params];
                if let Some(head) = &mut net.seg_head {
                    v.push(head);
                }
                v
            }
        }
    }

    pub fn fresh_optimizers(&self, lr: f64) -> Result<Vec<AdamState>> {
        self.stores().iter().map(|_| AdamState::new(lr)).collect()
    }

    pub fn snapshot(&self) -> Vec<ParameterStore> {
        self.stores().into_iter().cloned().collect()
    }

    /// Pair snapshot stores with their checkpoint prefixes.
    pub fn named_stores<'a>(&self, weights: &'a [ParameterStore]) -> Vec<(&'static str, &'a ParameterStore)> {
        match self {
            TrainableModel::Single(_) => vec![("", &weights[0])],
            TrainableModel::Joint(_) => vec![("deep", &weights[0]), ("wide", &weights[1])],
            TrainableModel::Coordinated(_) => {
                let mut v = vec![("ae", &weights[0]), ("deep", &weights[1]), ("wide", &weights[2])];
                if weights.len() > 3 {
                    v.push(("vote", &weights[3]));
                }
                v
            }
        }
    }

    pub fn arch_spec(&self, cfg: &ExperimentConfig) -> ArchSpec {
        match self {
            TrainableModel::Single(net) => ArchSpec::Unet { cfg: net.cfg },
            TrainableModel::Joint(ens) => ArchSpec::Ensemble { deep: ens.deep.cfg, wide: ens.wide.cfg },
            TrainableModel::Coordinated(_) => ArchSpec::Pnn { cfg: cfg.pnn_arch() },
        }
    }

    /// One optimization step on one batch; returns the loss value.
    pub fn train_step(
        &mut self,
        cfg: &ExperimentConfig,
        batch: &Tensor,
        targets: &[u8],
        optimizers: &mut [AdamState],
    ) -> Result<f64> {
        let mut tape = Tape::new();
        let x = tape.constant(batch.clone());
        let (loss, tapeds) = match self {
            TrainableModel::Single(net) => {
                let (logits, taped) = net.forward(&mut tape, x)?;
                let mut loss = tape.softmax_cross_entropy(logits, targets, CLASS_COUNT)?;
                if cfg.dice_loss {
                    let probs = tape.softmax_channels(logits)?;
                    let dice = tape.soft_dice_on_probs(probs, targets, 1.0)?;
                    loss = tape.add_weighted(loss, 1.0, dice, 1.0)?;
                }
                (loss, vec![taped])
            }
            TrainableModel::Joint(ens) => {
                let vote = ens.forward_vote(&mut tape, x)?;
                let mut loss = tape.nll_on_probs(vote.voted, targets)?;
                if cfg.dice_loss {
                    let dice = tape.soft_dice_on_probs(vote.voted, targets, 1.0)?;
                    loss = tape.add_weighted(loss, 1.0, dice, 1.0)?;
                }
                (loss, vec![vote.taped_deep, vote.taped_wide])
            }
            TrainableModel::Coordinated(net) => {
                let out = net.forward(&mut tape, x)?;
                let mut loss =
                    pnn_loss(&mut tape, out.voted, out.recon, targets, batch, cfg.recon_weight)?;
                if cfg.dice_loss {
                    let dice = tape.soft_dice_on_probs(out.voted, targets, 1.0)?;
                    loss = tape.add_weighted(loss, 1.0, dice, 1.0)?;
                }
                let mut tapeds = vec![out.taped_ae, out.taped_deep, out.taped_wide];
                if let Some(h) = out.taped_head {
                    tapeds.push(h);
                }
                (loss, tapeds)
            }
        };
        let loss_value = tape.value(loss).as_scalar()?;
        tape.backward(loss)?;
        let mut stores = self.stores_mut();
        if stores.len() != tapeds.len() || stores.len() != optimizers.len() {
            return Err(Error::Config("optimizer/store layout mismatch".into()));
        }
        for ((store, taped), opt) in stores.iter_mut().zip(&tapeds).zip(optimizers.iter_mut()) {
            store.absorb_grads(&tape, taped);
            opt.step(&mut store.tensors_mut())?;
        }
        Ok(loss_value)
    }

    /// Inference probabilities (soft-voted for the ensembles).
    pub fn predict_probs(&self, batch: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let x = tape.constant(batch.clone());
        let probs = match self {
            TrainableModel::Single(net) => {
                let (logits, _) = net.forward(&mut tape, x)?;
                tape.softmax_channels(logits)?
            }
            TrainableModel::Joint(ens) => ens.forward_vote(&mut tape, x)?.voted,
            TrainableModel::Coordinated(net) => net.forward(&mut tape, x)?.voted,
        };
        Ok(tape.value(probs).clone())
    }
}

/// Desk-scale overfit probe: train the coordinated model on a handful of
/// synthetic slices until its training Dice crosses `target_dice` (or
/// `max_steps` passes). Deterministic in `seed`.
#[derive(Debug, Clone, PartialEq)]
pub struct OverfitReport {
    pub steps: u64,
    pub train_dice: f64,
    pub reached: bool,
    pub first_loss: f64,
    pub last_loss: f64,
}

pub fn overfit_probe(
    scale: usize,
    slice_count: usize,
    batch_size: usize,
    max_steps: u64,
    target_dice: f64,
    seed: u64,
) -> Result<OverfitReport> {
    let slices = super::synth::synthetic_slices(slice_count, SLICE_TARGET, seed);
    let mut init_rng = Rng::new(seed + 1);
    let cfg = probe_config(scale);
    let mut model = TrainableModel::build(&cfg, &mut init_rng)?;
    let mut optimizers = model.fresh_optimizers(cfg.lr)?;

    let images: Vec<Slice2D<f32>> = slices.iter().map(|(i, _)| i.clone()).collect();
    let all_targets: Vec<u8> = slices.iter().flat_map(|(_, m)| m.data.iter().copied()).collect();

    let mut first_loss = f64::NAN;
    let mut last_loss = f64::NAN;
    let mut steps = 0;
    let mut train_dice = 0.0;
    let mut reached = false;
    'outer: while steps < max_steps {
        for chunk_start in (0..slices.len()).step_by(batch_size) {
            let end = (chunk_start + batch_size).min(slices.len());
            let batch = batch_from_slices(&images[chunk_start..end])?;
            let targets: Vec<u8> = slices[chunk_start..end]
                .iter()
                .flat_map(|(_, m)| m.data.iter().copied())
                .collect();
            let loss = model.train_step(&cfg, &batch, &targets, &mut optimizers)?;
            if steps == 0 {
                first_loss = loss;
            }
            last_loss = loss;
            steps += 1;
            if steps % 5 == 0 || steps >= max_steps {
                train_dice = probe_dice(&model, &images, &all_targets, batch_size)?;
                if train_dice > target_dice {
                    reached = true;
                    break 'outer;
                }
            }
            if steps >= max_steps {
                break 'outer;
            }
        }
    }
    if !reached {
        train_dice = probe_dice(&model, &images, &all_targets, batch_size)?;
        reached = train_dice > target_dice;
    }
    Ok(OverfitReport { steps, train_dice, reached, first_loss, last_loss })
}

fn probe_config(scale: usize) -> ExperimentConfig {
    ExperimentConfig {
        model: ModelKind::Pnn,
        phase: Phase::NoAug,
        experiments: vec![1],
        data_dir: PathBuf::new(),
        out_dir: PathBuf::new(),
        epochs: 1,
        batch_size: 1,
        // Overfitting a handful of slices tolerates an aggressive rate,
        // and the soft-Dice term counters the background imbalance.
        lr: 3e-3,
        scale,
        recon_weight: 0.1,
        ae_in_vote: false,
        exclude_empty_slices: false,
        dice_loss: true,
    }
}

/// Mean foreground Dice of the model's argmax prediction over a slice
/// set, treating the stack as one volume.
fn probe_dice(
    model: &TrainableModel,
    images: &[Slice2D<f32>],
    targets: &[u8],
    batch_size: usize,
) -> Result<f64> {
    use crate::ensemble::argmax_classes;
    use crate::metrics::{confusion_counts, metrics_from_counts};
    let mut predicted: Vec<u8> = Vec::with_capacity(targets.len());
    for chunk in images.chunks(batch_size) {
        let batch = batch_from_slices(chunk)?;
        let probs = model.predict_probs(&batch)?;
        predicted.extend(argmax_classes(&probs)?);
    }
    let extents = [images.len(), SLICE_TARGET, SLICE_TARGET];
    let pred = MaskVolume::new(extents, predicted)?;
    let truth = MaskVolume::new(extents, targets.to_vec())?;
    let d1 = metrics_from_counts(&confusion_counts(&pred, &truth, 1)?).dice;
    let d2 = metrics_from_counts(&confusion_counts(&pred, &truth, 2)?).dice;
    Ok((d1 + d2) / 2.0)
}
