use std::io::{self, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use alens_cli::config::ExperimentConfig;
use alens_cli::fetch::FetchOutcome;
use alens_cli::{cmd_fetch, cmd_report, cmd_run, cmd_score, CliError};
use alens_core::acquisition::{select_batch, write_scores_csv};
use alens_core::AcquisitionKind;
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "alens", version, about = "Pool-based active learning with stochastic ensembles")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML experiment config; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory (overrides ALENS_OUTPUT_DIR and the config).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Run only this acquisition function.
    #[arg(long)]
    acquisition: Option<AcquisitionKind>,
    /// 25 MC passes, 300 labels, a 10,000-sample pool, 3 repetitions.
    #[arg(long)]
    desk_scale: bool,
}

impl Common {
    fn load(&self) -> Result<ExperimentConfig, CliError> {
        let mut cfg = match &self.config {
            Some(path) => ExperimentConfig::load(path)?,
            None => ExperimentConfig::default(),
        };
        if self.desk_scale {
            cfg.apply_desk_scale();
        }
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(kind) = self.acquisition {
            cfg.acquisitions = vec![kind];
        }
        cfg.resolve_output_dir(self.out.clone());
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Download missing data files and verify checksums.
    Fetch(Common),
    /// Run every (acquisition, repetition) pair of the experiment.
    Run(Common),
    /// Summarise a finished run directory.
    Report {
        #[command(flatten)]
        common: Common,
    },
    /// Score an IDX image file with saved ensemble members.
    Score {
        #[command(flatten)]
        common: Common,
        /// members.json written by `run`.
        #[arg(long)]
        members: PathBuf,
        #[arg(long)]
        images: PathBuf,
        /// Also print the indices of the top-n batch to stderr.
        #[arg(long)]
        select: Option<usize>,
    },
}

fn execute(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Fetch(common) => {
            let cfg = common.load()?;
            for r in cmd_fetch(&cfg)? {
                let what = match r.outcome {
                    FetchOutcome::Present => "present",
                    FetchOutcome::Downloaded => "downloaded",
                };
                println!("{what} {} sha256={}", r.path.display(), r.sha256);
            }
        }
        Command::Run(common) => {
            let cfg = common.load()?;
            let manifest = cmd_run(&cfg)?;
            println!("{} runs written to {}", manifest.runs.len(), cfg.output_dir.display());
        }
        Command::Report { common } => {
            let cfg = common.load()?;
            let summary = cmd_report(&cfg.output_dir)?;
            for c in summary.curves.iter().filter(|c| {
                summary
                    .curves
                    .iter()
                    .filter(|o| o.acquisition == c.acquisition)
                    .all(|o| o.labeled_size <= c.labeled_size)
            }) {
                println!(
                    "{:<12} labels={:<5} accuracy={:.4}±{:.4} brier={:.4}",
                    c.acquisition.as_str(),
                    c.labeled_size,
                    c.mean_accuracy,
                    c.std_accuracy,
                    c.mean_brier
                );
            }
        }
        Command::Score {
            common,
            members,
            images,
            select,
        } => {
            let cfg = common.load()?;
            let kind = common.acquisition.unwrap_or(AcquisitionKind::Bald);
            let scores = cmd_score(&cfg, &members, &images, kind, cfg.seed)?;
            let out = |e: io::Error| CliError::Run(e.to_string());
            match &common.out {
                Some(path) => {
                    let file = std::fs::File::create(path).map_err(|e| CliError::Run(format!("{}: {e}", path.display())))?;
                    write_scores_csv(io::BufWriter::new(file), &scores).map_err(out)?;
                }
                None => write_scores_csv(io::stdout().lock(), &scores).map_err(out)?,
            }
            if let Some(n) = select {
                let batch = select_batch(&scores, n).map_err(|e| CliError::Config(e.to_string()))?;
                let line: Vec<String> = batch.iter().map(usize::to_string).collect();
                writeln!(io::stderr(), "{}", line.join(",")).map_err(out)?;
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("alens: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
