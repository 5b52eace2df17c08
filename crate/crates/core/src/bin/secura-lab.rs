use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use secura::experiment::{compare, load_config, run_experiment, LabError, RunOptions};

#[derive(Parser)]
#[command(
    name = "secura-lab",
    version,
    about = "Run and compare adapter continual-learning experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the method × seed grid described by a TOML config.
    Run {
        config: PathBuf,
        /// Output root; the run is written to <out>/<run-name>/.
        #[arg(long, env = "SECURA_LAB_OUT", default_value = "out")]
        out: PathBuf,
        /// Overwrite an existing run directory.
        #[arg(long)]
        force: bool,
        /// Worker threads for grid cells.
        #[arg(long, default_value_t = 1)]
        parallel: usize,
        /// Comma-separated seeds replacing the config's list.
        #[arg(long, value_delimiter = ',')]
        seed_override: Option<Vec<u64>>,
    },
    /// Summarize runs that share a schedule.
    Compare {
        #[arg(required = true, num_args = 2..)]
        dirs: Vec<PathBuf>,
    },
    /// Run the fast built-in checks.
    Selftest,
}

fn fail(e: LabError) -> ExitCode {
    eprintln!("error: {e}");
    ExitCode::from(e.exit_code() as u8)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli.command {
        Command::Run {
            config,
            out,
            force,
            parallel,
            seed_override,
        } => {
            let cfg = match load_config(&config) {
                Ok(c) => c,
                Err(e) => return fail(e),
            };
            let stem = config
                .file_stem()
                .map_or("run".into(), |s| s.to_string_lossy().into_owned());
            let opts = RunOptions {
                out,
                force,
                threads: parallel,
                seed_override,
            };
            match run_experiment(&cfg, &stem, &opts) {
                Ok(s) => {
                    println!("{} cells, {} rows -> {}", s.cells, s.rows, s.dir.display());
                    ExitCode::SUCCESS
                }
                Err(e) => fail(e),
            }
        }
        Command::Compare { dirs } => match compare(&dirs) {
            Ok(c) => {
                print!("{c}");
                ExitCode::SUCCESS
            }
            Err(e) => fail(e),
        },
        Command::Selftest => {
            let outcomes = secura::selftest::run();
            let mut failed = 0;
            for o in &outcomes {
                match &o.result {
                    Ok(()) => println!("ok    {}", o.name),
                    Err(msg) => {
                        failed += 1;
                        println!("FAIL  {}: {msg}", o.name);
                    }
                }
            }
            println!("{} of {} checks passed", outcomes.len() - failed, outcomes.len());
            if failed == 0 {
                ExitCode::SUCCESS
            } else {
                ExitCode::FAILURE
            }
        }
    }
}
