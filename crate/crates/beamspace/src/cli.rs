use std::path::PathBuf;

use beamspace_core::dictionary::Regime;
use clap::{Args, Parser, Subcommand};

use crate::commands::{self, PatternSource};
use crate::config::{AtfKind, RunConfig};
use crate::error::Result;

#[derive(Debug, Parser)]
#[command(name = "beamspace", version, about = "Beam-space beamforming: scene synthesis, beampatterns, oracle beamformers and Taylor-series beam mixing")]
pub struct Cli {
    /// JSON run configuration. Flags override its values; unset keys keep their defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render a dataset of far-field scenes (WAV + JSON sidecars + manifest).
    Simulate(SimulateArgs),
    /// Export beampatterns of a dictionary, a weights file or a trained model as CSV.
    Beampattern(BeampatternArgs),
    /// Score oracle TI-MVDR and TI-MWF beamformers on a dataset.
    OracleEval(OracleEvalArgs),
    /// Train a model on a dataset and write a checkpoint directory.
    Train(TrainArgs),
    /// Report per-bucket SI-SNR of a trained model.
    Evaluate(EvaluateArgs),
    /// Run the gradient-check suite; exits nonzero if any check fails.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// DOA-difference bucket such as `45-90`, or `set-b`.
    #[arg(long)]
    pub bucket: Option<String>,
    /// Number of scenes.
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Noise-count range for set-b, e.g. `1-3`.
    #[arg(long)]
    pub noises: Option<String>,
    #[arg(long, allow_hyphen_values = true)]
    pub snr_min: Option<f64>,
    #[arg(long, allow_hyphen_values = true)]
    pub snr_max: Option<f64>,
    /// Scene length in seconds.
    #[arg(long)]
    pub duration: Option<f64>,
    /// Add the optional decaying tail to the target.
    #[arg(long)]
    pub reverb: bool,
}

#[derive(Debug, Args)]
pub struct BeampatternArgs {
    /// Output CSV.
    #[arg(long)]
    pub out: PathBuf,
    /// Dictionary or weights file; without it the configured regime is built.
    #[arg(long, conflicts_with = "checkpoint")]
    pub input: Option<PathBuf>,
    /// Plot the dictionary of a trained model.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Regime of the built dictionary (ds, sd, semi, f1, f2).
    #[arg(long)]
    pub regime: Option<String>,
    /// Size of the built dictionary.
    #[arg(long)]
    pub num_beams: Option<usize>,
    /// Comma-separated beam indices to export.
    #[arg(long, value_delimiter = ',')]
    pub beams: Option<Vec<usize>>,
    /// Comma-separated frequencies in Hz, snapped to the nearest bin; every bin by default.
    #[arg(long, value_delimiter = ',')]
    pub freqs: Option<Vec<f64>>,
    /// Azimuth grid step in degrees.
    #[arg(long)]
    pub grid_step: Option<f64>,
    /// Also save the plotted dictionary.
    #[arg(long)]
    pub save_dictionary: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct OracleEvalArgs {
    /// Dataset directory.
    #[arg(long)]
    pub data: PathBuf,
    /// Output CSV.
    #[arg(long)]
    pub out: PathBuf,
    /// Directory for per-scene oracle weight files.
    #[arg(long)]
    pub weights_out: Option<PathBuf>,
    /// Diagonal loading relative to the mean covariance diagonal.
    #[arg(long)]
    pub loading: Option<f64>,
    /// MVDR look direction.
    #[arg(long, value_enum)]
    pub atf: Option<AtfKind>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Dataset directory.
    #[arg(long)]
    pub data: PathBuf,
    /// Checkpoint directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Number of order terms after the 0th.
    #[arg(long, visible_alias = "Q")]
    pub order: Option<usize>,
    /// Dictionary regime (ds, sd, semi, f1, f2).
    #[arg(long)]
    pub regime: Option<String>,
    /// Dictionary size.
    #[arg(long)]
    pub beams: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Train on random windows of this many frames.
    #[arg(long)]
    pub crop_frames: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Share of scenes held out for validation.
    #[arg(long)]
    pub val_fraction: Option<f64>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Checkpoint directory.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Dataset directory.
    #[arg(long)]
    pub data: PathBuf,
    /// Output CSV.
    #[arg(long)]
    pub out: PathBuf,
    /// Truncate the series after this many terms.
    #[arg(long, visible_alias = "Q")]
    pub order: Option<usize>,
    /// Export mean |G| per frame and beam on the first scene.
    #[arg(long)]
    pub activations: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// Random draws per operation.
    #[arg(long, default_value_t = 3)]
    pub seeds: u64,
    /// Also write the results as CSV.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn set<T>(slot: &mut T, flag: Option<T>) {
    if let Some(v) = flag {
        *slot = v;
    }
}

impl Cli {
    /// Defaults, then the config file, then this command's flags.
    pub fn run_config(&self) -> Result<RunConfig> {
        let mut c = RunConfig::load(self.config.as_deref())?;
        match &self.command {
            Command::Simulate(a) => {
                let d = &mut c.dataset;
                set(&mut d.bucket, a.bucket.clone());
                set(&mut d.n_scenes, a.n);
                set(&mut d.seed, a.seed);
                if a.noises.is_some() {
                    d.noises = a.noises.clone();
                }
                set(&mut d.snr_min_db, a.snr_min);
                set(&mut d.snr_max_db, a.snr_max);
                set(&mut d.duration_s, a.duration);
                d.reverb_tail |= a.reverb;
            }
            Command::Beampattern(a) => {
                let b = &mut c.beampattern;
                set(&mut b.regime, a.regime.as_deref().map(Regime::parse).transpose()?);
                set(&mut b.num_beams, a.num_beams);
                set(&mut b.grid_step_deg, a.grid_step);
                if a.beams.is_some() {
                    b.beams = a.beams.clone();
                }
                if a.freqs.is_some() {
                    b.freqs_hz = a.freqs.clone();
                }
            }
            Command::OracleEval(a) => {
                set(&mut c.oracle.loading, a.loading);
                set(&mut c.oracle.atf, a.atf);
            }
            Command::Train(a) => {
                let m = &mut c.model;
                set(&mut m.order, a.order);
                set(&mut m.regime, a.regime.as_deref().map(Regime::parse).transpose()?);
                set(&mut m.beams, a.beams);
                set(&mut m.epochs, a.epochs);
                set(&mut m.learning_rate, a.lr);
                set(&mut m.batch_size, a.batch_size);
                set(&mut m.seed, a.seed);
                if a.crop_frames.is_some() {
                    m.crop_frames = a.crop_frames;
                }
                set(&mut c.training.val_fraction, a.val_fraction);
            }
            Command::Evaluate(_) | Command::Gradcheck(_) => {}
        }
        c.validate()?;
        Ok(c)
    }
}

/// Runs one parsed command, printing a short summary to stdout.
pub fn run(cli: &Cli) -> Result<()> {
    let cfg = cli.run_config()?;
    match &cli.command {
        Command::Simulate(a) => {
            let manifest = commands::simulate(&cfg, &a.out)?;
            println!("wrote {} scenes to {}", manifest.len(), a.out.display());
        }
        Command::Beampattern(a) => {
            let source = match (&a.input, &a.checkpoint) {
                (Some(p), _) => PatternSource::File(p.clone()),
                (None, Some(d)) => PatternSource::Checkpoint(d.clone()),
                (None, None) => PatternSource::Built,
            };
            let rows = commands::beampattern(&cfg, &source, &a.out, a.save_dictionary.as_deref())?;
            println!("wrote {} beampattern rows to {}", rows.len(), a.out.display());
        }
        Command::OracleEval(a) => {
            let rows = commands::oracle_eval(&cfg, &a.data, &a.out, a.weights_out.as_deref())?;
            let mean = rows.last().expect("mean row");
            println!(
                "{} scenes: noisy {:.2} dB, TI-MVDR {:.2} dB ({:+.2}), TI-MWF {:.2} dB ({:+.2})",
                rows.len() - 1,
                mean.noisy_db,
                mean.mvdr_db,
                mean.mvdr_improvement_db,
                mean.mwf_db,
                mean.mwf_improvement_db
            );
        }
        Command::Train(a) => {
            let summary = commands::train(&cfg, &a.data, &a.out, |e| {
                println!("epoch {:>3}  train {:.5}  val {:.5}  lr {:.2e}", e.epoch, e.train_loss, e.val_loss, e.lr)
            })?;
            println!(
                "trained on {} scenes ({} held out); checkpoint in {}",
                summary.train_scenes,
                summary.val_scenes,
                a.out.display()
            );
        }
        Command::Evaluate(a) => {
            let rows = commands::evaluate(&cfg, &a.checkpoint, &a.data, &a.out, a.order, a.activations.as_deref())?;
            for r in &rows {
                println!(
                    "{:<14} {:>4} scenes  Q={}  noisy {:.2} dB  enhanced {:.2} dB  ({:+.2})",
                    r.bucket, r.scenes, r.order, r.noisy_db, r.enhanced_db, r.improvement_db
                );
            }
        }
        Command::Gradcheck(a) => {
            let result = commands::gradcheck(a.seeds, a.out.as_deref());
            if let Ok(rows) = &result {
                for r in rows {
                    println!("{:<36} {:.3e} < {:.0e}", r.check, r.max_relative_error, r.tolerance);
                }
                println!("all {} gradient checks passed", rows.len());
            }
            result?;
        }
    }
    Ok(())
}
