use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;

use fibrekahler_cli::commands::Suite;
use fibrekahler_cli::config::RunConfig;
use fibrekahler_cli::output::exit;
use fibrekahler_cli::{combined_exit, run_all, Command};

#[derive(Parser, Debug)]
#[command(version, about = "Spectral Kähler geometry on torus fibrations")]
struct Args {
    /// verify, expand, wp, solve or certify
    #[arg(value_enum)]
    command: Command,
    /// Configuration files; several are run concurrently.
    #[arg(short, long)]
    config: Vec<PathBuf>,
    /// Output directory (overrides `output.dir`).
    #[arg(short, long)]
    out: Option<PathBuf>,
    #[arg(short, long, env = "FIBREKAHLER_THREADS", default_value_t = 1)]
    threads: usize,
    /// Invariant suite for `verify`.
    #[arg(short, long, value_enum, default_value_t = Suite::All)]
    suite: Suite,
}

fn main() -> ExitCode {
    let args = Args::parse();
    let mut configs = Vec::new();
    if args.config.is_empty() {
        configs.push(RunConfig::default());
    }
    for path in &args.config {
        match RunConfig::from_file(path) {
            Ok(c) => configs.push(c),
            Err(e) => {
                let rec = fibrekahler_cli::output::RunError::Config(e).record(&path.display().to_string());
                eprintln!("{}", serde_json::to_string(&rec).expect("plain record"));
                return ExitCode::from(exit::CONFIG as u8);
            }
        }
    }
    let multi = configs.len() > 1;
    let runs: Vec<(RunConfig, PathBuf)> = configs
        .into_iter()
        .map(|c| {
            let root = args
                .out
                .clone()
                .or_else(|| c.output_dir.clone())
                .unwrap_or_else(|| PathBuf::from("fibrekahler-out"));
            let dir = if multi { root.join(&c.name) } else { root };
            (c, dir)
        })
        .collect();
    let outcomes = run_all(args.command, &runs, args.suite, args.threads);
    for o in &outcomes {
        match &o.error {
            None => println!("{}: ok ({})", o.name, o.out_dir.display()),
            Some(rec) => eprintln!("{}", serde_json::to_string(rec).expect("plain record")),
        }
    }
    ExitCode::from(combined_exit(&outcomes) as u8)
}
