use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use dpinn_cli::config::{preset, RunConfig};
use dpinn_cli::{commands, parse_list, plot, CliError};

#[derive(Parser)]
#[command(name = "dpinn", version, about = "Distributed physics-informed flow reconstruction")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the reference dataset of the configured manufactured solution.
    Generate(Common),
    /// Train every seed and write checkpoints and loss histories.
    Train(Common),
    /// Stitch, align and score trained checkpoints.
    Evaluate(Common),
    /// Strong-scaling table over a list of rank counts (`--procs 1,2,4`).
    Scaling(Common),
    /// Draw loss and error curves from the CSV outputs.
    Plot(Common),
    /// Print the fully resolved configuration.
    Config(Common),
}

#[derive(Args)]
struct Common {
    /// TOML config; fields it omits come from its preset.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Preset used when no config file is given.
    #[arg(long, default_value = "cavity2d")]
    preset: String,
    /// Seeds, e.g. `0,1,2` or `0-4`.
    #[arg(long)]
    seeds: Option<String>,
    /// Rank count (1, 2, 4 or 8); a list for `scaling`.
    #[arg(long)]
    procs: Option<String>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Override the number of epochs.
    #[arg(long)]
    epochs: Option<usize>,
    /// Overwrite existing outputs.
    #[arg(long)]
    force: bool,
}

impl Common {
    fn resolve(&self, procs_is_list: bool) -> Result<RunConfig, CliError> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => preset(&self.preset)?,
        };
        if let Some(s) = &self.seeds {
            cfg.seeds = parse_list(s)?;
        }
        if let Some(out) = &self.out {
            cfg.output = out.clone();
        }
        if let Some(e) = self.epochs {
            cfg.train.epochs = e;
        }
        if let (Some(p), false) = (&self.procs, procs_is_list) {
            let p: usize = p
                .trim()
                .parse()
                .map_err(|_| CliError::Validation(format!("--procs expects one rank count, got `{p}`")))?;
            cfg = cfg.with_procs(p)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn procs_list(&self) -> Result<Vec<usize>, CliError> {
        match &self.procs {
            Some(p) => Ok(parse_list(p)?.into_iter().map(|v| v as usize).collect()),
            None => Ok(vec![1, 2, 4]),
        }
    }
}

fn fmt_std(std: Option<f64>) -> String {
    std.map(|s| format!(" ± {s:.3e}")).unwrap_or_default()
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Generate(c) => {
            let cfg = c.resolve(false)?;
            let path = commands::generate(&cfg, c.force)?;
            println!("wrote {}", path.display());
        }
        Command::Train(c) => {
            let cfg = c.resolve(false)?;
            for run in commands::train(&cfg, c.force)? {
                println!(
                    "seed {}: {:.2} s total, median epoch {:.4} s",
                    run.seed, run.total_wall_s, run.median_epoch_s
                );
            }
        }
        Command::Evaluate(c) => {
            let cfg = c.resolve(false)?;
            let summary = commands::evaluate(&cfg)?;
            println!("P = {} ({}), {} seed(s)", summary.procs, summary.decomposition, summary.seeds.len());
            for (name, (mean, std)) in &summary.aggregate {
                println!("{name:>4}: {mean:.3e}{}", fmt_std(*std));
            }
        }
        Command::Scaling(c) => {
            let cfg = c.resolve(true)?;
            let (rows, _) = commands::scaling(&cfg, &c.procs_list()?, c.force)?;
            println!("P,decomposition,wall_time_s,speedup_vs_prev,vel_l2,pres_l2");
            for r in rows {
                println!(
                    "{},{},{:.4},{},{:.3e},{:.3e}",
                    r.procs,
                    r.decomposition,
                    r.wall_time_s,
                    r.speedup_vs_prev.map(|s| format!("{s:.2}")).unwrap_or_default(),
                    r.vel_l2,
                    r.pres_l2
                );
            }
        }
        Command::Plot(c) => {
            let cfg = c.resolve(false)?;
            for p in plot::plot(&cfg)? {
                println!("wrote {}", p.display());
            }
        }
        Command::Config(c) => {
            let cfg = c.resolve(false)?;
            print!("{}", cfg.to_toml());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
