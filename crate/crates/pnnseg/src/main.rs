//! Command-line entry point for the segmentation experiment framework.

use clap::{Args, Parser, Subcommand};
use pnnseg::error::{Error, Result};
use pnnseg::runner::{
    self, checkpoint_stem, compare_models, comparison_csv, comparison_markdown, five_run_csv,
    five_run_markdown, five_run_rows, load_scores, scores_path, write_report, ConfigPatch,
    ExperimentConfig, ModelKind, Phase, ReportFormat,
};
use pnnseg::volume::derive_seed;
use std::collections::BTreeMap;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "pnnseg",
    version,
    about = "Deterministic hippocampus-segmentation experiments: UNet variants, soft-voting ensembles and a coordinated dual-net composition"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print the five derived experiment seeds.
    Seeds,
    /// Build the volume cache from a directory of NIfTI files.
    Prepare {
        /// Directory holding imagesTr/labelsTr (or images/labels).
        #[arg(long)]
        data: PathBuf,
        /// Cache output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model (or assemble the transfer ensemble) per experiment.
    Train(RunArgs),
    /// Evaluate checkpoints on their test splits.
    Evaluate(RunArgs),
    /// Paired t-test comparison of two evaluated models.
    Compare {
        /// Model under test (e.g. pnn).
        #[arg(long)]
        model: String,
        /// Baseline model to compare against (e.g. deep).
        #[arg(long)]
        baseline: String,
        #[arg(long)]
        phase: String,
        /// Directory holding the eval-*.json files; reports land here too.
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated experiment numbers (default 1..=5).
        #[arg(long)]
        experiments: Option<String>,
        /// csv or markdown (default both).
        #[arg(long)]
        format: Option<String>,
    },
    /// Emit five-run report tables from evaluation files.
    Report {
        #[arg(long)]
        phase: String,
        /// Directory holding the eval-*.json files; reports land here too.
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated model tags (default: all five).
        #[arg(long)]
        models: Option<String>,
        /// csv or markdown (default both).
        #[arg(long)]
        format: Option<String>,
    },
    /// Run the built-in verification checks.
    Selftest,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    model: Option<String>,
    #[arg(long)]
    phase: Option<String>,
    /// Comma-separated experiment numbers, e.g. "1,2,3".
    #[arg(long)]
    experiments: Option<String>,
    /// JSON config file with flat keys mirroring these flags.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Volume cache directory (from `prepare`).
    #[arg(long)]
    data: Option<PathBuf>,
    /// Output directory for checkpoints, evaluations and reports.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Filter-budget divisor; 1 runs the full-size networks.
    #[arg(long)]
    scale: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// Weight of the reconstruction loss term.
    #[arg(long)]
    recon_weight: Option<f64>,
    /// Let the coordinator contribute a third vote member.
    #[arg(long)]
    ae_in_vote: Option<bool>,
    /// Drop training slices whose mask is empty.
    #[arg(long)]
    exclude_empty_slices: Option<bool>,
    /// Add a soft-Dice term to the training loss.
    #[arg(long)]
    dice_loss: Option<bool>,
}

impl RunArgs {
    fn resolve(self) -> Result<ExperimentConfig> {
        let cli = ConfigPatch {
            model: self.model,
            phase: self.phase,
            experiments: self.experiments.map(|s| parse_experiments(&s)).transpose()?,
            data: self.data,
            out: self.out,
            epochs: self.epochs,
            batch: self.batch,
            lr: self.lr,
            scale: self.scale,
            recon_weight: self.recon_weight,
            ae_in_vote: self.ae_in_vote,
            exclude_empty_slices: self.exclude_empty_slices,
            dice_loss: self.dice_loss,
        };
        let base = match self.config {
            Some(path) => ConfigPatch::from_file(&path)?,
            None => ConfigPatch::default(),
        };
        cli.over(base).resolve()
    }
}

fn parse_experiments(s: &str) -> Result<Vec<u32>> {
    s.split(',')
        .map(|part| {
            part.trim()
                .parse::<u32>()
                .map_err(|_| Error::Config(format!("bad experiment number {part:?}")))
        })
        .collect()
}

fn parse_formats(s: Option<&str>) -> Result<Vec<ReportFormat>> {
    match s {
        None => Ok(vec![ReportFormat::Csv, ReportFormat::Markdown]),
        Some(s) => Ok(vec![ReportFormat::parse(s)?]),
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Seeds => {
            let seeds: Vec<String> = (1..=5)
                .map(|k| derive_seed(k).map(|s| s.to_string()))
                .collect::<Result<_>>()?;
            println!("{}", seeds.join(" "));
        }
        Command::Prepare { data, out } => {
            let n = runner::prepare_cache(&data, &out)?;
            println!("cached {n} volumes into {}", out.display());
        }
        Command::Train(args) => {
            let cfg = args.resolve()?;
            for &k in &cfg.experiments.clone() {
                let outcome = runner::train_model(&cfg, k)?;
                match outcome.best_val_dice {
                    Some(d) => println!(
                        "{}: epoch {} val dice {:.6} -> {}",
                        checkpoint_stem(cfg.model, cfg.phase, k),
                        outcome.best_epoch,
                        d,
                        outcome.checkpoint.display()
                    ),
                    None => println!(
                        "{}: -> {}",
                        checkpoint_stem(cfg.model, cfg.phase, k),
                        outcome.checkpoint.display()
                    ),
                }
            }
        }
        Command::Evaluate(args) => {
            let cfg = args.resolve()?;
            for &k in &cfg.experiments.clone() {
                let scores = runner::evaluate_model(&cfg, k)?;
                let dice = runner::mean_val_dice(&scores);
                println!(
                    "{}: {} test volumes, mean dice {:.6} -> {}",
                    checkpoint_stem(cfg.model, cfg.phase, k),
                    scores.len(),
                    dice,
                    scores_path(&cfg.out_dir, &cfg, k).display()
                );
            }
        }
        Command::Compare { model, baseline, phase, out, experiments, format } => {
            let model = ModelKind::parse(&model)?;
            let baseline = ModelKind::parse(&baseline)?;
            let phase = Phase::parse(&phase)?;
            let experiments = match experiments {
                Some(s) => parse_experiments(&s)?,
                None => (1..=5).collect(),
            };
            let gather = |m: ModelKind| -> Result<Vec<runner::VolumeScores>> {
                let mut all = Vec::new();
                for &k in &experiments {
                    let path = out.join(format!("eval-{}-{}-s{}.json", m.tag(), phase.tag(), k));
                    all.extend(load_scores(&path)?);
                }
                Ok(all)
            };
            let rows = compare_models(&gather(model)?, &gather(baseline)?)?;
            let pair = format!("{} vs {}", model.tag(), baseline.tag());
            for r in &rows {
                println!(
                    "{pair} [{} {}]: t = {:+.4}, p = {:.4} {}",
                    r.metric, r.label_set, r.t, r.p, r.marker
                );
            }
            let basename = format!("compare-{}-vs-{}-{}", model.tag(), baseline.tag(), phase.tag());
            for f in parse_formats(format.as_deref())? {
                let content = match f {
                    ReportFormat::Csv => comparison_csv(&pair, &rows),
                    ReportFormat::Markdown => comparison_markdown(&[(pair.clone(), rows.clone())]),
                };
                let path = write_report(&out, &basename, f, &content)?;
                println!("wrote {}", path.display());
            }
        }
        Command::Report { phase, out, models, format } => {
            let phase = Phase::parse(&phase)?;
            let models: Vec<ModelKind> = match models {
                Some(s) => s
                    .split(',')
                    .map(|m| ModelKind::parse(m.trim()))
                    .collect::<Result<_>>()?,
                None => ModelKind::ALL.to_vec(),
            };
            let mut rows = Vec::new();
            for model in models {
                let mut by_seed = BTreeMap::new();
                for k in 1..=5u32 {
                    let path = out.join(format!("eval-{}-{}-s{}.json", model.tag(), phase.tag(), k));
                    by_seed.insert(k, load_scores(&path)?);
                }
                rows.extend(five_run_rows(model.tag(), &by_seed)?);
            }
            let basename = format!("report-{}", phase.tag());
            for f in parse_formats(format.as_deref())? {
                let content = match f {
                    ReportFormat::Csv => five_run_csv(&rows),
                    ReportFormat::Markdown => five_run_markdown(&rows),
                };
                let path = write_report(&out, &basename, f, &content)?;
                println!("wrote {}", path.display());
            }
        }
        Command::Selftest => runner::selftest()?,
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
