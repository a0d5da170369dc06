use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use persist_lab_cli::{run, sweep::sweep, CliError, ExperimentConfig, RunOptions};

#[derive(Parser)]
#[command(name = "persist-lab", version, about = "Persistence experiments from JSON configs")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run one experiment config.
    Run {
        config: PathBuf,
        #[command(flatten)]
        opts: Opts,
    },
    /// Run every `*.json` config in a directory and check the requested relations.
    Sweep {
        dir: PathBuf,
        #[command(flatten)]
        opts: Opts,
    },
}

#[derive(clap::Args)]
struct Opts {
    /// Worker threads (overrides the config and PERSISTLAB_WORKERS).
    #[arg(long)]
    workers: Option<usize>,
    /// Output root; results land in `<out>/<id>`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Treat accuracy warnings as errors.
    #[arg(long)]
    strict: bool,
}

impl From<Opts> for RunOptions {
    fn from(o: Opts) -> Self {
        RunOptions { workers: o.workers, out: o.out, strict: o.strict }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let code = match Cli::parse().command {
        Cmd::Run { config, opts } => match ExperimentConfig::load(&config).and_then(|c| run(&c, &opts.into())) {
            Ok(out) => {
                println!("{}", out.dir.display());
                0
            }
            Err(e) => report(&e),
        },
        Cmd::Sweep { dir, opts } => match sweep(&dir, &opts.into()) {
            Ok(rep) => {
                for r in &rep.relations {
                    println!("{} {:?} {}", r.id, r.status, r.detail);
                }
                for m in rep.members.iter().filter(|m| m.code != 0) {
                    eprintln!("member {} exited {}: {}", m.id, m.code, m.message);
                }
                println!("{}", rep.dir.display());
                rep.exit_code
            }
            Err(e) => report(&e),
        },
    };
    ExitCode::from(code as u8)
}

fn report(e: &CliError) -> i32 {
    eprintln!("error: {e}");
    e.exit_code()
}
