//! `marketscope` command line: run the experiment pipeline end to end or
//! one stage at a time against a run directory named by the config hash.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use marketscope::pipeline::{run_experiment, run_stage, CutoffSelection, ExperimentConfig, PipelineError, RunContext, Stage};

#[derive(Parser)]
#[command(name = "marketscope", version, about = "Simulate a listing marketplace, crawl it and estimate its sales")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the ground-truth market trace
    Simulate(Common),
    /// Crawl the simulated market, or import the configured crawl dataset
    Crawl(Common),
    /// Enrich listings and diagonalize the first-day labels
    Prep(Common),
    /// Fit the multiple factor analysis
    Mfa(Common),
    /// Select and fit the mixed model and calibrate the cutoffs
    Fit(Common),
    /// Reconstruct the missing days by simulation
    Reconstruct(Common),
    /// Write the report bundle
    Report(Common),
    /// Run every stage in order
    Run(Common),
}

#[derive(Clone, Copy, ValueEnum)]
enum Cutoff {
    Conservative,
    Generous,
    Both,
}

#[derive(Args)]
struct Common {
    /// Experiment config (TOML); built-in defaults when absent
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override the config's seed
    #[arg(long)]
    seed: Option<u64>,
    /// Output root; the run directory is created beneath it
    #[arg(long, env = "MARKETSCOPE_OUT", default_value = "out")]
    out: PathBuf,
    /// Cutoffs to reconstruct with
    #[arg(long, value_enum)]
    cutoff: Option<Cutoff>,
    /// Stats-only replications per batch
    #[arg(long)]
    replications: Option<usize>,
    /// Skip the detailed batch
    #[arg(long)]
    stats_only: bool,
}

impl Common {
    fn context(&self) -> Result<RunContext, PipelineError> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(c) = self.cutoff {
            cfg.reconstruct.cutoffs = match c {
                Cutoff::Conservative => CutoffSelection::Conservative,
                Cutoff::Generous => CutoffSelection::Generous,
                Cutoff::Both => CutoffSelection::Both,
            };
        }
        if let Some(r) = self.replications {
            cfg.reconstruct.stats_replications = r;
        }
        cfg.reconstruct.stats_only |= self.stats_only;
        cfg.validate()?;
        Ok(RunContext::new(cfg, &self.out))
    }
}

fn execute(cli: Cli) -> Result<PathBuf, PipelineError> {
    let (common, stage) = match &cli.command {
        Command::Simulate(c) => (c, Some(Stage::Simulate)),
        Command::Crawl(c) => (c, Some(Stage::Crawl)),
        Command::Prep(c) => (c, Some(Stage::Prep)),
        Command::Mfa(c) => (c, Some(Stage::Mfa)),
        Command::Fit(c) => (c, Some(Stage::Fit)),
        Command::Reconstruct(c) => (c, Some(Stage::Reconstruct)),
        Command::Report(c) => (c, Some(Stage::Report)),
        Command::Run(c) => (c, None),
    };
    let ctx = common.context()?;
    match stage {
        Some(s) => run_stage(&ctx, s).map(|()| ctx.dir.clone()),
        None => run_experiment(&ctx),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = execute(cli);
    match result {
        Ok(dir) => {
            println!("{}", dir.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            let code = e.exit_code();
            let e = anyhow::Error::new(e).context("marketscope failed");
            eprintln!("error: {e:#}");
            ExitCode::from(u8::try_from(code).unwrap_or(1))
        }
    }
}
