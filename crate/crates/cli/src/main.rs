use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use log::info;

use descent_core::latent::ModelKind;
use descent_core::pipeline::{self, PipelineError, RunConfig};

/// Probabilistic aircraft descent generation.
#[derive(Debug, Parser)]
#[command(name = "descent", version)]
struct Cli {
    /// Run configuration (TOML). Defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    model: Option<ModelKind>,
    /// Number of descents to generate.
    #[arg(long, global = true)]
    count: Option<usize>,
    #[arg(long, global = true)]
    explained_variance: Option<f64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Draw a synthetic fleet into the dataset path.
    Synth,
    /// Read and clean the dataset; write the cleaned blips and a report.
    Ingest,
    /// Clean, split, build the grid, run gappy fPCA and fit the latent model.
    Fit,
    /// Generate descents from the fitted artifacts.
    Sample,
    /// Compare generated descents with the held-out split.
    Evaluate,
    /// K-fold explained-variance sweep.
    Sweep {
        /// Comma-separated explained-variance values.
        #[arg(long, value_delimiter = ',')]
        variances: Option<Vec<f64>>,
        #[arg(long)]
        folds: Option<usize>,
        /// Descents generated per fold and variance.
        #[arg(long)]
        samples: Option<usize>,
    },
}

fn config(cli: &Cli) -> Result<RunConfig, PipelineError> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(m) = cli.model {
        cfg.model = m;
    }
    if let Some(c) = cli.count {
        cfg.count = c;
    }
    if let Some(v) = cli.explained_variance {
        cfg.explained_variance = v;
    }
    if let Some(o) = &cli.out {
        cfg.out_dir = o.clone();
    }
    if let Command::Sweep {
        variances,
        folds,
        samples,
    } = &cli.command
    {
        if let Some(v) = variances {
            cfg.sweep.variances = v.clone();
        }
        if let Some(f) = folds {
            cfg.sweep.folds = *f;
        }
        if let Some(s) = samples {
            cfg.sweep.samples = *s;
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<(), PipelineError> {
    let cfg = config(cli)?;
    match cli.command {
        Command::Synth => {
            let spec = pipeline::cmd_synth(&cfg)?;
            println!(
                "wrote {} synthetic {} descents to {}",
                spec.n_trajectories,
                spec.aircraft.type_code,
                cfg.dataset.display()
            );
        }
        Command::Ingest => {
            let r = pipeline::cmd_ingest(&cfg)?;
            println!(
                "kept {}/{} trajectories, {}/{} blips; {} quarantined",
                r.trajectories_kept,
                r.trajectories_read,
                r.blips_kept,
                r.blips_read,
                r.quarantined.len()
            );
        }
        Command::Fit => {
            let fit = pipeline::cmd_fit(&cfg)?;
            println!(
                "grid FL{}..FL{}, {} drag + {} cas modes, {} model with {} parameters on {} rows",
                fit.grid.fl_bottom(),
                fit.grid.fl_top(),
                fit.basis_drag.n_modes(),
                fit.basis_cas.n_modes(),
                fit.model.kind(),
                fit.model.report.n_p,
                fit.summary.n_rows
            );
        }
        Command::Sample => {
            let r = pipeline::cmd_sample(&cfg)?;
            println!(
                "generated {} descents, resample rate {:.4} (drag {}, cas {}, non-descending {})",
                r.accepted,
                r.resample_rate,
                r.rejected_drag_bounds,
                r.rejected_cas_bounds,
                r.rejected_non_descending
            );
        }
        Command::Evaluate => {
            let r = pipeline::cmd_evaluate(&cfg)?;
            println!(
                "time to bottom: ks {:.4}, wasserstein {:.2} s, mae {:.2} s (baseline mae {:.2} s)",
                r.time_to_bottom.ks,
                r.time_to_bottom.wasserstein,
                r.time_to_bottom.mae,
                r.time_to_bottom_bada_mae
            );
        }
        Command::Sweep { .. } => {
            let rows = pipeline::cmd_sweep(&cfg)?;
            println!("wrote {} sweep rows", rows.len());
        }
    }
    info!("outputs in {}", cfg.out_dir.display());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let code = e.stage.exit_code();
            ExitCode::from(code as u8)
        }
    }
}
