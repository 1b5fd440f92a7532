//! Batch front-end for `fibrekahler`.

pub mod commands;
pub mod config;
pub mod output;

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use serde::Serialize;

use commands::Suite;
use config::RunConfig;
use output::{ensure_dir, exit, write_json, ErrorRecord, RunError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Command {
    Verify,
    Expand,
    Wp,
    Solve,
    Certify,
}

#[derive(Debug, Serialize)]
struct Metadata<'a> {
    command: Command,
    run: &'a str,
    version: &'a str,
    started_unix: f64,
    wall_seconds: f64,
    exit_code: i32,
}

/// Result of one configured run.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub name: String,
    pub out_dir: PathBuf,
    pub exit_code: i32,
    pub error: Option<ErrorRecord>,
}

fn dispatch(cmd: Command, cfg: &RunConfig, suite: Suite, out: &Path) -> Result<(), RunError> {
    match cmd {
        Command::Verify => commands::verify(cfg, suite, out).map(|_| ()),
        Command::Expand => commands::expand(cfg, out),
        Command::Wp => commands::wp(cfg, out).map(|_| ()),
        Command::Solve => commands::solve(cfg, out).map(|_| ()),
        Command::Certify => commands::certify(cfg, out).map(|_| ()),
    }
}

/// Runs one command for one configuration, writing artifacts, a metadata
/// file and, on failure, `error.json` into `out`.
pub fn run_one(cmd: Command, cfg: &RunConfig, suite: Suite, out: &Path) -> RunOutcome {
    let started = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0.0, |d| d.as_secs_f64());
    let t = Instant::now();
    let res = ensure_dir(out).and_then(|_| {
        let stale = out.join("error.json");
        if stale.exists() {
            std::fs::remove_file(&stale).map_err(|e| RunError::Io {
                path: stale,
                message: e.to_string(),
            })?;
        }
        dispatch(cmd, cfg, suite, out)
    });
    let (exit_code, error) = match &res {
        Ok(()) => (exit::OK, None),
        Err(e) => (e.exit_code(), Some(e.record(&cfg.name))),
    };
    if let Some(rec) = &error {
        let _ = write_json(&out.join("error.json"), rec);
    }
    let meta = Metadata {
        command: cmd,
        run: &cfg.name,
        version: env!("CARGO_PKG_VERSION"),
        started_unix: started,
        wall_seconds: t.elapsed().as_secs_f64(),
        exit_code,
    };
    let _ = write_json(&out.join("metadata.json"), &meta);
    RunOutcome {
        name: cfg.name.clone(),
        out_dir: out.to_path_buf(),
        exit_code,
        error,
    }
}

/// Runs every configuration with at most `threads` running at once.
/// Outcomes come back in input order.
pub fn run_all(cmd: Command, runs: &[(RunConfig, PathBuf)], suite: Suite, threads: usize) -> Vec<RunOutcome> {
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<RunOutcome>>> = Mutex::new(vec![None; runs.len()]);
    std::thread::scope(|s| {
        for _ in 0..threads.clamp(1, runs.len().max(1)) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some((cfg, out)) = runs.get(i) else { break };
                let o = run_one(cmd, cfg, suite, out);
                results.lock().expect("no panics while holding the lock")[i] = Some(o);
            });
        }
    });
    results
        .into_inner()
        .expect("workers finished")
        .into_iter()
        .map(|o| o.expect("every run visited"))
        .collect()
}

/// Combined exit status: the first nonzero code in input order.
pub fn combined_exit(outcomes: &[RunOutcome]) -> i32 {
    outcomes.iter().map(|o| o.exit_code).find(|&c| c != exit::OK).unwrap_or(exit::OK)
}
