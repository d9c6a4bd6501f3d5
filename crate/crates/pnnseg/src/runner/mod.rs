//! Experiment orchestration: configuration, cache preparation, training,
//! evaluation, comparison, report emission, and the built-in selftest.

mod checkpoint;
mod compare;
mod config;
mod evaluate;
mod report;
mod synth;
mod train;

pub use checkpoint::{
    blob_path, checkpoint_stem, file_digest, load_checkpoint, load_model, manifest_path,
    save_checkpoint, ArchSpec, CheckpointManifest, LoadedModel, ParamEntry,
};
pub use compare::{compare_models, ComparisonRow, LABEL_SETS, METRICS};
pub use config::{ConfigPatch, ExperimentConfig, ModelKind, Phase};
pub use evaluate::{
    batch_from_slices, evaluate_model, evaluate_volumes, load_scores, scores_path, write_scores,
    VolumeScores, SLICE_TARGET,
};
pub use report::{
    comparison_csv, comparison_markdown, five_run_csv, five_run_markdown, five_run_rows,
    write_report, ReportFormat, ReportRow,
};
pub use synth::{synthetic_dataset, synthetic_slices};
pub use train::{
    mean_val_dice, overfit_probe, padded_samples, train_model, OverfitReport, TrainOutcome,
    TrainableModel, FLIP_PROBABILITY,
};

use crate::error::{Error, Result};
use crate::volume::{cache, nifti, MaskVolume, Volume3D};
use std::path::Path;

/// Build the volume cache from a directory of NIfTI files. Accepts the
/// decathlon layout (`imagesTr`/`labelsTr`) or plain `images`/`labels`
/// subdirectories; returns the number of cached volumes.
pub fn prepare_cache(data_dir: &Path, out_dir: &Path) -> Result<usize> {
    let (images, labels) = ["imagesTr", "images"]
        .iter()
        .zip(["labelsTr", "labels"])
        .map(|(i, l)| (data_dir.join(i), data_dir.join(l)))
        .find(|(i, l)| i.is_dir() && l.is_dir())
        .ok_or_else(|| {
            Error::Data(format!(
                "no imagesTr/labelsTr or images/labels directories under {}",
                data_dir.display()
            ))
        })?;

    let mut entries: Vec<(String, std::path::PathBuf)> = Vec::new();
    for entry in std::fs::read_dir(&images)? {
        let path = entry?.path();
        let Some(name) = path.file_name().and_then(|n| n.to_str()) else { continue };
        // Archive metadata files start with a dot; skip them.
        if name.starts_with('.') || !(name.ends_with(".nii") || name.ends_with(".nii.gz")) {
            continue;
        }
        let id = name.trim_end_matches(".nii.gz").trim_end_matches(".nii").to_string();
        entries.push((id, path));
    }
    entries.sort();
    if entries.is_empty() {
        return Err(Error::Data(format!("no NIfTI volumes under {}", images.display())));
    }

    let mut items: Vec<(Volume3D, MaskVolume)> = Vec::with_capacity(entries.len());
    for (id, image_path) in entries {
        let file_name = image_path.file_name().and_then(|n| n.to_str()).unwrap_or_default();
        let label_path = labels.join(file_name);
        if !label_path.exists() {
            return Err(Error::Data(format!("no label file for volume {id}")));
        }
        let mut image = nifti::parse_nifti(&std::fs::read(&image_path)?, &id)?;
        let mask = nifti::parse_nifti_mask(&std::fs::read(&label_path)?)?;
        if image.extents != mask.extents {
            return Err(Error::Shape(format!(
                "volume {id}: image extents {:?} differ from mask {:?}",
                image.extents, mask.extents
            )));
        }
        image.normalize_min_max();
        items.push((image, mask));
    }
    cache::write_cache(out_dir, &items)?;
    Ok(items.len())
}

/// Built-in verification: parameter counts, seed derivation, split sizes,
/// a network gradient check, the metric oracle and the t-CDF closed
/// forms, plus a short optimization smoke test. Prints one line per
/// check; fails fast on the first violation.
pub fn selftest() -> Result<()> {
    use crate::metrics::{confusion_counts, metrics_from_counts, student_t_cdf};
    use crate::nets::{count_unet_parameters, UNetConfig};
    use crate::volume::{derive_seed, split_dataset, Rng};

    let check = |name: &str, ok: bool, detail: String| -> Result<()> {
        if ok {
            println!("[ok] {name}: {detail}");
            Ok(())
        } else {
            println!("[FAIL] {name}: {detail}");
            Err(Error::Data(format!("selftest failed at {name}: {detail}")))
        }
    };

    let deep = count_unet_parameters(&UNetConfig::deep());
    check("parameter count (deep)", deep == 31_030_723, format!("{deep}"))?;
    let wide = count_unet_parameters(&UNetConfig::wide());
    check("parameter count (wide)", wide == 29_762_307, format!("{wide}"))?;

    let seeds: Vec<u32> = (1..=5).map(|k| derive_seed(k).unwrap()).collect();
    check(
        "seed derivation",
        seeds == [71_582_788, 143_165_576, 214_748_364, 286_331_153, 357_913_941],
        format!("{seeds:?}"),
    )?;

    let ids: Vec<String> = (0..260).map(|i| format!("v{i:03}")).collect();
    let (tr, va, te) = split_dataset(&ids, seeds[0] as u64, (0.6, 0.2, 0.2))?;
    check(
        "split sizes",
        (tr.len(), va.len(), te.len()) == (156, 52, 52),
        format!("({}, {}, {})", tr.len(), va.len(), te.len()),
    )?;

    let rel_err = network_gradient_check()?;
    check("network gradient check", rel_err < 1e-4, format!("rel err {rel_err:.2e}"))?;

    // Metric oracle on one random mask pair.
    let mut rng = Rng::new(99);
    let random_mask = |rng: &mut Rng| {
        MaskVolume::new([8, 8, 8], (0..512).map(|_| rng.next_below(3) as u8).collect()).unwrap()
    };
    let pred = random_mask(&mut rng);
    let truth = random_mask(&mut rng);
    let mut oracle_ok = true;
    for label in [1u8, 2] {
        let c = confusion_counts(&pred, &truth, label)?;
        let m = metrics_from_counts(&c);
        let identity = (m.dice - 2.0 * m.jaccard / (1.0 + m.jaccard)).abs() < 1e-12;
        oracle_ok &= identity && c.total() == 512;
    }
    check("metric oracle", oracle_ok, "dice/jaccard identity on 8x8x8".into())?;

    let c1 = (student_t_cdf(0.0, 9)? - 0.5).abs();
    let c2 = (student_t_cdf(1.0, 1)? - 0.75).abs();
    check("t-distribution closed forms", c1 < 1e-12 && c2 < 1e-12, format!("errs {c1:.1e}, {c2:.1e}"))?;

    let probe = overfit_probe(16, 2, 2, 120, 0.5, 7)?;
    check(
        "optimization smoke",
        probe.last_loss < probe.first_loss,
        format!("loss {:.4} -> {:.4}, dice {:.3}", probe.first_loss, probe.last_loss, probe.train_dice),
    )?;

    println!("selftest passed");
    Ok(())
}

/// Directional-derivative check of a small UNet against central finite
/// differences, at 64-bit precision.
fn network_gradient_check() -> Result<f64> {
    use crate::autodiff::{Tape, Tensor};
    use crate::nets::{build_unet, UNetConfig};
    use crate::volume::{Rng, CLASS_COUNT};

    let cfg = UNetConfig { depth: 2, init_filters: 2, in_channels: 1, class_count: 3 };
    let net = build_unet(cfg, &mut Rng::new(5))?;
    let data: Vec<f64> = (0..64).map(|i| ((i * 29 % 64) as f64) / 64.0).collect();
    let batch = Tensor::new(vec![1, 1, 8, 8], data)?;
    let targets: Vec<u8> = (0..64).map(|i| (i % CLASS_COUNT) as u8).collect();

    let loss_of = |net: &crate::nets::UNet| -> Result<f64> {
        let mut tape = Tape::new();
        let x = tape.constant(batch.clone());
        let (logits, _) = net.forward(&mut tape, x)?;
        let loss = tape.softmax_cross_entropy(logits, &targets, CLASS_COUNT)?;
        tape.value(loss).as_scalar()
    };

    // Analytic gradient.
    let mut tape = Tape::new();
    let x = tape.constant(batch.clone());
    let (logits, taped) = net.forward(&mut tape, x)?;
    let loss = tape.softmax_cross_entropy(logits, &targets, CLASS_COUNT)?;
    tape.backward(loss)?;
    let mut with_grads = net.clone();
    with_grads.params.absorb_grads(&tape, &taped);

    // Direction: a deterministic unit-scale vector over all parameters.
    let mut dir_rng = Rng::new(17);
    let direction: Vec<Vec<f64>> = with_grads
        .params
        .iter()
        .map(|(_, t)| (0..t.len()).map(|_| dir_rng.uniform_in(-1.0, 1.0)).collect())
        .collect();
    let analytic: f64 = with_grads
        .params
        .iter()
        .zip(&direction)
        .map(|((_, t), d)| {
            t.grad
                .as_deref()
                .map(|g| g.iter().zip(d).map(|(a, b)| a * b).sum::<f64>())
                .unwrap_or(0.0)
        })
        .sum();

    let eps = 1e-6;
    let shifted = |sign: f64| -> Result<f64> {
        let mut probe = net.clone();
        for ((_, t), d) in probe.params.iter_mut().zip(&direction) {
            for (v, dv) in t.data_mut().iter_mut().zip(d) {
                *v += sign * eps * dv;
            }
        }
        loss_of(&probe)
    };
    let numeric = (shifted(1.0)? - shifted(-1.0)?) / (2.0 * eps);
    Ok((analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-9))
}
