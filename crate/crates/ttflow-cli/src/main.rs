use std::fs::File;
use std::io::{self, BufWriter};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use ttflow::runner::{self, Problem, RunConfig};

#[derive(Parser)]
#[command(name = "ttflow", version, about = "Tensor-train time integration experiments")]
struct Cli {
    /// Output directory (overrides the config's `output`).
    #[arg(long, global = true)]
    output: Option<PathBuf>,
    /// Worker threads for dense linear algebra (1 = sequential).
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
    /// Allow paper-size configurations.
    #[arg(long, global = true)]
    full_scale: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Integrate a configuration and write results.csv and meta.json.
    Run { config: PathBuf },
    /// Compute and store the dense reference snapshots of a preset.
    Reference { preset: String },
    /// Summarize one or more results.csv files.
    Compare {
        #[arg(required = true)]
        csv: Vec<PathBuf>,
    },
}

fn gate(cfg: &RunConfig, full_scale: bool) -> ttflow::Result<()> {
    if cfg.full_scale && !full_scale {
        return Err(ttflow::Error::Config("paper-size configuration; pass --full-scale to run it".into()));
    }
    Ok(())
}

fn out_dir(cli: &Option<PathBuf>, cfg: &RunConfig, fallback: &str) -> PathBuf {
    cli.clone().or_else(|| cfg.output.clone()).unwrap_or_else(|| PathBuf::from(fallback))
}

fn execute(cli: Cli) -> ttflow::Result<bool> {
    ttflow::linalg::set_threads(cli.threads);
    match cli.command {
        Command::Run { config } => {
            let cfg = RunConfig::load(&config)?;
            gate(&cfg, cli.full_scale)?;
            let out = out_dir(&cli.output, &cfg, "out");
            let res = runner::run(&cfg, &out)?;
            eprintln!("wrote {} ({} rows)", res.csv_path.display(), res.record.rows.len());
            if let Some(e) = &res.record.error {
                eprintln!("run aborted: {e}");
                return Ok(false);
            }
            Ok(true)
        }
        Command::Reference { preset } => {
            let cfg = RunConfig::preset(&preset)?;
            gate(&cfg, cli.full_scale)?;
            let out = out_dir(&cli.output, &cfg, "out");
            std::fs::create_dir_all(&out)?;
            let problem = Problem::build(&cfg)?;
            let snaps = runner::compute_reference(&cfg, &problem)?;
            let path = out.join(format!("{preset}.ttrf"));
            runner::save_reference(&snaps, BufWriter::new(File::create(&path)?))?;
            eprintln!("wrote {} ({} snapshots)", path.display(), snaps.len());
            Ok(true)
        }
        Command::Compare { csv } => {
            let rows = runner::compare(&csv)?;
            print!("{}", runner::format_table(&rows));
            if let Some(out) = &cli.output {
                std::fs::create_dir_all(out)?;
                runner::write_summary_csv(&rows, BufWriter::new(File::create(out.join("summary.csv"))?))?;
            } else {
                println!();
                runner::write_summary_csv(&rows, io::stdout())?;
            }
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
