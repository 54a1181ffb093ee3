use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

#[derive(Debug, Parser)]
#[command(name = "crystal-drift", version, about = "Crystal-growth simulation and Foster-Lyapunov drift checks")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate one process and write its sampled trajectory.
    Simulate(Opts),
    /// Check path-wise coupling identities over many replicas.
    Couple(Opts),
    /// Check the auxiliary-process ordering and gap invariants.
    Aux(Opts),
    /// Estimate tails of |Delta_i| at a fixed time.
    Tails(Opts),
    /// Estimate the growth speed X_j(t)/t.
    Speed(Opts),
    /// Solve for the stationary law on a truncated window.
    Stationary(Opts),
    /// Check kernel conditions and multi-step drift.
    DriftCheck(Opts),
    /// Check unit means of the auxiliary-process exponential martingales.
    Martingale(Opts),
    /// Compare the law of Delta_i across column counts at the midpoint.
    MidpointCheck(Opts),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Simulate(_) => "simulate",
            Command::Couple(_) => "couple",
            Command::Aux(_) => "aux",
            Command::Tails(_) => "tails",
            Command::Speed(_) => "speed",
            Command::Stationary(_) => "stationary",
            Command::DriftCheck(_) => "drift-check",
            Command::Martingale(_) => "martingale",
            Command::MidpointCheck(_) => "midpoint-check",
        }
    }

    pub fn opts(&self) -> &Opts {
        match self {
            Command::Simulate(o)
            | Command::Couple(o)
            | Command::Aux(o)
            | Command::Tails(o)
            | Command::Speed(o)
            | Command::Stationary(o)
            | Command::DriftCheck(o)
            | Command::Martingale(o)
            | Command::MidpointCheck(o) => o,
        }
    }

    /// Whether the command draws random numbers and so needs a seed.
    pub fn stochastic(&self) -> bool {
        !matches!(self, Command::Stationary(_) | Command::DriftCheck(_))
    }
}

/// Options shared by all subcommands. Every field may also be set in the
/// TOML file given by `--config`; flags win over the file.
#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Opts {
    /// TOML configuration file.
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    /// Worker threads; falls back to CRYSTAL_DRIFT_THREADS.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub threads: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    /// Number of columns.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n: Option<usize>,
    /// Boundary condition: zero or periodic.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bc: Option<String>,
    /// Rates beta0,beta1,beta2.
    #[arg(long, value_delimiter = ',', num_args = 1..)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub betas: Option<Vec<f64>>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub horizon: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub replicas: Option<u64>,
    /// Number of evenly spaced sample times (simulate, aux).
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub samples: Option<usize>,
    /// Sampled quantity for simulate: heights or deltas.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mode: Option<String>,
    /// Truncation window K.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub window: Option<i64>,
    /// Delta coordinates for tails.
    #[arg(long, value_delimiter = ',', num_args = 1..)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub coords: Option<Vec<usize>>,
    /// Single coordinate (speed column, midpoint Delta index).
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub coord: Option<usize>,
    /// Minimum count for a tail point to enter the fit.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub floor: Option<u64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    /// Sample times (speed, martingale).
    #[arg(long, value_delimiter = ',', num_args = 1..)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub times: Option<Vec<f64>>,
    /// Auxiliary-process size.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub r: Option<usize>,
    #[arg(long, value_delimiter = ',', num_args = 1..)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n_list: Option<Vec<usize>>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub permutations: Option<u64>,
    /// Significance level of the midpoint test.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub level: Option<f64>,
    /// Skip the midpoint guard (power checks only).
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub unchecked: Option<bool>,
    /// Also compare the laws at t and 2t.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub stationarity: Option<bool>,
    /// Height shift of the coupled copy.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub shift: Option<i64>,
    /// Column count of the restricted coupled copy.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub restrict: Option<usize>,
    /// Kernel family: 1 (jump chain, zero BC), 2 (jump chain, periodic), 3 (lazy).
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub example: Option<u8>,
    /// Graph: path:N, cycle:N, complete:N or N:1-2,2-3,...
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub graph: Option<String>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub delta: Option<f64>,
    /// Margin M.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub margin: Option<f64>,
    /// Hand-picked C_1,...,C_p (reported as non-certified).
    #[arg(long, value_delimiter = ',', num_args = 1..)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub constants: Option<Vec<u64>>,
    /// Sampled states per partition class.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub per_class: Option<usize>,
    /// Expansion budget for exact drift.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub budget: Option<u64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mc_replicas: Option<u64>,
}

fn defaults(cmd: &Command) -> Value {
    let mut d = json!({ "out": "out", "n": 2, "bc": "zero", "betas": [1.0, 2.0, 3.0] });
    let extra = match cmd {
        Command::Simulate(_) => json!({ "horizon": 100.0, "samples": 101, "mode": "heights" }),
        Command::Couple(_) => json!({ "n": 3, "horizon": 100.0, "replicas": 1000, "shift": 5 }),
        Command::Aux(_) => json!({ "r": 2, "horizon": 100.0, "replicas": 1000, "samples": 11 }),
        Command::Tails(_) => json!({ "horizon": 200.0, "replicas": 10000, "floor": 30 }),
        Command::Speed(_) => json!({ "horizon": 1000.0, "replicas": 100 }),
        Command::Stationary(_) => json!({ "window": 40 }),
        Command::DriftCheck(_) => json!({
            "example": 3, "betas": [0.2, 0.4, 0.8], "per_class": 50,
            "budget": 10_000_000u64, "mc_replicas": 4000, "seed": 0
        }),
        Command::Martingale(_) => json!({
            "r": 2, "alpha": 0.05, "times": [1.0, 5.0, 10.0], "replicas": 10000
        }),
        Command::MidpointCheck(_) => json!({
            "n_list": [2, 4], "coord": 1, "horizon": 500.0, "replicas": 50000,
            "permutations": 1000, "level": 0.01, "unchecked": false, "stationarity": false
        }),
    };
    overlay(&mut d, extra);
    d
}

fn overlay(base: &mut Value, top: Value) {
    if let (Some(b), Value::Object(t)) = (base.as_object_mut(), top) {
        for (k, v) in t {
            if !v.is_null() {
                b.insert(k, v);
            }
        }
    }
}

pub fn read_config_file(path: &Path) -> Result<Value, String> {
    let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    let parsed: toml::Table = toml::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))?;
    serde_json::to_value(parsed).map_err(|e| e.to_string())
}

/// Defaults, then the config file, then flags.
pub fn resolve(cmd: &Command) -> Result<Opts, String> {
    let cli = cmd.opts();
    let mut merged = defaults(cmd);
    if let Some(path) = &cli.config {
        let file = read_config_file(path)?;
        if !file.is_object() {
            return Err("config file must be a table".into());
        }
        // validate field names and types before merging
        serde_json::from_value::<Opts>(file.clone()).map_err(|e| format!("config: {e}"))?;
        overlay(&mut merged, file);
    }
    overlay(&mut merged, serde_json::to_value(cli).map_err(|e| e.to_string())?);
    let mut opts: Opts = serde_json::from_value(merged).map_err(|e| format!("config: {e}"))?;
    opts.config = cli.config.clone();
    if opts.threads.is_none() {
        if let Ok(v) = std::env::var("CRYSTAL_DRIFT_THREADS") {
            let t = v
                .trim()
                .parse::<usize>()
                .map_err(|_| format!("CRYSTAL_DRIFT_THREADS must be a positive integer, got {v:?}"))?;
            opts.threads = Some(t);
        }
    }
    if opts.threads == Some(0) {
        return Err("threads must be >= 1".into());
    }
    if cmd.stochastic() && opts.seed.is_none() {
        return Err(format!("{} needs --seed", cmd.name()));
    }
    Ok(opts)
}

/// Resolved configuration for the manifest; the thread count is left out
/// because results do not depend on it.
pub fn echo(opts: &Opts) -> Map<String, Value> {
    let mut v = serde_json::to_value(opts).expect("plain data");
    let map = v.as_object_mut().expect("struct");
    map.remove("threads");
    if let Some(p) = &opts.config {
        map.insert("config".into(), Value::String(p.display().to_string()));
    }
    map.clone()
}
