mod commands;
mod config;

use std::ffi::OsString;
use std::process::ExitCode;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use clap::Parser;
use serde_json::{json, Value};

use crate::commands::{Failure, Outcome, Outputs};
use crate::config::Cli;

const EXIT_OK: u8 = 0;
const EXIT_VALIDATION: u8 = 1;
const EXIT_RUNTIME: u8 = 2;
const EXIT_CHECK: u8 = 3;

fn main() -> ExitCode {
    ExitCode::from(run(std::env::args_os()))
}

fn run(args: impl IntoIterator<Item = OsString>) -> u8 {
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_VALIDATION } else { EXIT_OK };
        }
    };
    let cmd = cli.command;
    let opts = match config::resolve(&cmd) {
        Ok(o) => o,
        Err(msg) => {
            eprintln!("error: {msg}");
            return EXIT_VALIDATION;
        }
    };
    let threads = opts.threads.unwrap_or_else(rayon::current_num_threads);
    let pool = match rayon::ThreadPoolBuilder::new().num_threads(threads).build() {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: thread pool: {e}");
            return EXIT_RUNTIME;
        }
    };
    let out_dir = opts.out.clone().expect("defaulted");
    if let Err(e) = std::fs::create_dir_all(&out_dir) {
        eprintln!("error: {}: {e}", out_dir.display());
        return EXIT_RUNTIME;
    }
    let mut outputs = Outputs::new(out_dir);
    let started = Instant::now();
    let result = pool.install(|| commands::execute(&cmd, &opts, &mut outputs));
    let (code, status) = match &result {
        Ok(Outcome::Pass) => (EXIT_OK, "ok".to_string()),
        Ok(Outcome::CheckFailed(why)) => {
            eprintln!("check failed: {why}");
            (EXIT_CHECK, format!("check failed: {why}"))
        }
        Err(Failure::Validation(msg)) => {
            eprintln!("error: {msg}");
            (EXIT_VALIDATION, format!("validation error: {msg}"))
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            (EXIT_RUNTIME, format!("runtime error: {msg}"))
        }
    };
    let manifest = json!({
        "tool": "crystal-drift",
        "version": env!("CARGO_PKG_VERSION"),
        "subcommand": cmd.name(),
        "config": Value::Object(config::echo(&opts)),
        "threads": threads,
        "artifacts": outputs.names(),
        "status": status,
        "exit_code": code,
        "wall_time_seconds": started.elapsed().as_secs_f64(),
        "timestamp": SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0),
    });
    if let Err(e) = outputs.write_manifest(&manifest) {
        eprintln!("error: manifest: {e}");
        return EXIT_RUNTIME;
    }
    code
}
