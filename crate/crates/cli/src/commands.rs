use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::PathBuf;

use crystal_core::clocks::ClockSource;
use crystal_core::drift::{
    check_conditions, constants_schedule_for, edge_square_drift, sample_states, verify_foster,
    DriftConstants, MarginVariant, Verdict, VerifyOptions,
};
use crystal_core::kernels::{
    embedded_jump_kernel_with, enumerate_patterns, example3_kernel, write_kernel_csv, Kernel,
};
use crystal_core::model::{BetaParams, BoundaryCondition, GraphSpec};
use crystal_core::sim::{
    check_coupling, check_sandwich, simulate_aux, simulate_with_mode, uniform_grid, ProcessSpec,
    SampleMode,
};
use crystal_core::stats::{
    birth_death_stationary, deltas_at, estimate_speed_curve, estimate_tails, final_heights,
    martingale_mean, midpoint_invariance, midpoint_invariance_unchecked, total_variation,
    truncated_stationary, MidpointOptions,
};
use crystal_core::Error;
use serde::Serialize;
use serde_json::{json, Value};

use crate::config::{Command, Opts};

pub enum Outcome {
    Pass,
    CheckFailed(String),
}

pub enum Failure {
    Validation(String),
    Runtime(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::BudgetExceeded { .. }
            | Error::DegenerateFit(_)
            | Error::KernelSupport { .. }
            | Error::EmptyProcess
            | Error::UnsampledTime(_) => Failure::Runtime(e.to_string()),
            _ => Failure::Validation(e.to_string()),
        }
    }
}

impl From<io::Error> for Failure {
    fn from(e: io::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

type Run = Result<Outcome, Failure>;

/// Artifacts written into the output directory.
pub struct Outputs {
    dir: PathBuf,
    names: Vec<String>,
}

impl Outputs {
    pub fn new(dir: PathBuf) -> Self {
        Self { dir, names: Vec::new() }
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    fn create(&mut self, name: &str) -> io::Result<BufWriter<File>> {
        self.names.push(name.to_string());
        Ok(BufWriter::new(File::create(self.dir.join(name))?))
    }

    fn csv(&mut self, name: &str, f: impl FnOnce(&mut BufWriter<File>) -> io::Result<()>) -> io::Result<()> {
        let mut w = self.create(name)?;
        f(&mut w)?;
        w.flush()
    }

    fn json<T: Serialize>(&mut self, name: &str, value: &T) -> io::Result<()> {
        let mut w = self.create(name)?;
        serde_json::to_writer_pretty(&mut w, value)?;
        writeln!(w)?;
        w.flush()
    }

    pub fn write_manifest(&self, manifest: &Value) -> io::Result<()> {
        let mut w = BufWriter::new(File::create(self.dir.join("manifest.json"))?);
        serde_json::to_writer_pretty(&mut w, manifest)?;
        writeln!(w)?;
        w.flush()
    }
}

fn invalid(msg: impl Into<String>) -> Failure {
    Failure::Validation(msg.into())
}

fn betas(o: &Opts) -> Result<BetaParams, Failure> {
    match o.betas.as_deref() {
        Some(&[b0, b1, b2]) => Ok(BetaParams::new(b0, b1, b2)?),
        _ => Err(invalid("betas must have three entries")),
    }
}

fn bc(o: &Opts) -> Result<BoundaryCondition, Failure> {
    o.bc.as_deref()
        .unwrap_or("zero")
        .parse()
        .map_err(|e: Error| invalid(e.to_string()))
}

fn spec(o: &Opts) -> Result<ProcessSpec, Failure> {
    Ok(ProcessSpec::new(req(o.n, "n")?, bc(o)?, betas(o)?)?)
}

fn req<T>(v: Option<T>, name: &str) -> Result<T, Failure> {
    v.ok_or_else(|| invalid(format!("missing option {name}")))
}

fn seed(o: &Opts) -> Result<u64, Failure> {
    req(o.seed, "seed")
}

pub fn execute(cmd: &Command, o: &Opts, out: &mut Outputs) -> Run {
    match cmd {
        Command::Simulate(_) => simulate(o, out),
        Command::Couple(_) => couple(o, out),
        Command::Aux(_) => aux(o, out),
        Command::Tails(_) => tails(o, out),
        Command::Speed(_) => speed(o, out),
        Command::Stationary(_) => stationary(o, out),
        Command::DriftCheck(_) => drift_check(o, out),
        Command::Martingale(_) => martingale(o, out),
        Command::MidpointCheck(_) => midpoint(o, out),
    }
}

fn simulate(o: &Opts, out: &mut Outputs) -> Run {
    let spec = spec(o)?;
    let horizon = req(o.horizon, "horizon")?;
    let mode = match o.mode.as_deref() {
        Some("heights") | None => SampleMode::Heights,
        Some("deltas") => SampleMode::Deltas,
        Some(m) => return Err(invalid(format!("mode must be heights or deltas, got {m}"))),
    };
    let times = uniform_grid(horizon, req(o.samples, "samples")?);
    let tr = simulate_with_mode(&spec, horizon, &ClockSource::new(seed(o)?), &times, mode)?;
    out.csv("trajectory.csv", |w| tr.write_csv(w))?;
    out.json(
        "simulate.json",
        &json!({
            "final_state": tr.final_state(),
            "final_jumps": tr.jumps.last(),
            "tally": tr.tally,
            "rule_violations": tr.tally.rule_violations(),
        }),
    )?;
    if tr.tally.rule_violations() > 0 {
        return Ok(Outcome::CheckFailed("firing rule violated".into()));
    }
    Ok(Outcome::Pass)
}

fn couple(o: &Opts, out: &mut Outputs) -> Run {
    let spec = spec(o)?;
    let rep = check_coupling(
        &spec,
        req(o.horizon, "horizon")?,
        req(o.replicas, "replicas")?,
        seed(o)?,
        req(o.shift, "shift")?,
        o.restrict,
    )?;
    out.json("couple.json", &rep)?;
    if rep.violations() > 0 {
        return Ok(Outcome::CheckFailed(format!("{} coupling violations", rep.violations())));
    }
    Ok(Outcome::Pass)
}

fn aux(o: &Opts, out: &mut Outputs) -> Run {
    let b = betas(o)?;
    let r = req(o.r, "r")?;
    let horizon = req(o.horizon, "horizon")?;
    let seed = seed(o)?;
    let rep = check_sandwich(r, b, horizon, req(o.replicas, "replicas")?, seed)?;
    let times = uniform_grid(horizon, req(o.samples, "samples")?);
    let tr = simulate_aux(r, b, horizon, &ClockSource::new(seed), &times)?;
    out.csv("aux_trajectory.csv", |w| {
        let cols = |p: &str, k: usize| (1..=k).map(|i| format!("{p}_{i}")).collect::<Vec<_>>().join(",");
        writeln!(w, "time,{},{},{},int_u,int_v", cols("x", r), cols("z", r), cols("y", r + 1))?;
        for s in &tr.samples {
            let join = |v: &[i64]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
            writeln!(
                w,
                "{},{},{},{},{},{}",
                s.time,
                join(&s.state.xr),
                join(&s.state.zr),
                join(&s.state.xr1),
                s.integral_u,
                s.integral_v
            )?;
        }
        Ok(())
    })?;
    out.json("aux.json", &rep)?;
    let bad = rep.ordering_violations + rep.gap_violations + rep.u_positive_v_not_low;
    if bad > 0 {
        return Ok(Outcome::CheckFailed(format!("{bad} auxiliary-process violations")));
    }
    Ok(Outcome::Pass)
}

fn tails(o: &Opts, out: &mut Outputs) -> Run {
    let spec = spec(o)?;
    let n_deltas = match spec.bc() {
        BoundaryCondition::Zero => spec.n() - 1,
        BoundaryCondition::Periodic => spec.n(),
    };
    if n_deltas == 0 {
        return Err(invalid("tails need at least two columns"));
    }
    let coords = o.coords.clone().unwrap_or_else(|| (1..=n_deltas).collect());
    let horizon = req(o.horizon, "horizon")?;
    let replicas = req(o.replicas, "replicas")?;
    let floor = req(o.floor, "floor")?;
    let seed = seed(o)?;
    let ests = estimate_tails(&spec, horizon, replicas, seed, &coords, floor)?;
    for est in &ests {
        out.csv(&format!("tails_{}.csv", est.coordinate), |w| est.write_csv(w))?;
    }
    let mut summary = json!({ "estimates": ests });
    if spec.n() == 2 && spec.bc() == BoundaryCondition::Zero && spec.betas().beta0() < spec.betas().beta1() {
        // same replicas as above: clocks are keyed by (seed, replica)
        let heights = final_heights(&spec, horizon, replicas, seed)?;
        let abs: Vec<i64> = deltas_at(&heights, spec.bc(), 1).iter().map(|d| d.abs()).collect();
        let empirical = crystal_core::stats::empirical_law(&abs);
        let max = abs.iter().copied().max().unwrap_or(0).max(1) as usize;
        let law = birth_death_stationary(spec.betas(), max + 60)?;
        let exact = law.pmf.iter().enumerate().map(|(m, p)| (m as i64, *p)).collect();
        summary["birth_death_tv"] = json!(total_variation(&empirical, &exact));
        summary["birth_death_slope"] = json!(law.rho.ln());
    }
    out.json("tails.json", &summary)?;
    Ok(Outcome::Pass)
}

fn speed(o: &Opts, out: &mut Outputs) -> Run {
    let spec = spec(o)?;
    let j = o.coord.unwrap_or(spec.n());
    let times = o.times.clone().unwrap_or(vec![req(o.horizon, "horizon")?]);
    let ests = estimate_speed_curve(&spec, j, &times, req(o.replicas, "replicas")?, seed(o)?)?;
    out.csv("speed.csv", |w| {
        writeln!(w, "time,mean,se,ci_low,ci_high")?;
        for e in &ests {
            writeln!(w, "{},{},{},{},{}", e.horizon, e.mean, e.std_error, e.ci_low, e.ci_high)?;
        }
        Ok(())
    })?;
    let beta1 = spec.betas().beta1();
    let bounded = spec.n() < 2 || ests.iter().all(|e| e.ci_high < beta1);
    out.json("speed.json", &json!({ "estimates": ests, "beta1": beta1, "below_beta1": bounded }))?;
    if !bounded {
        return Ok(Outcome::CheckFailed(format!("upper 99% bound reaches beta1 = {beta1}")));
    }
    Ok(Outcome::Pass)
}

fn stationary(o: &Opts, out: &mut Outputs) -> Run {
    let spec = spec(o)?;
    let law = truncated_stationary(&spec, req(o.window, "window")?)?;
    let dims = law.states.first().map_or(0, |s| s.len());
    out.csv("stationary.csv", |w| {
        let header: Vec<String> = (1..=dims).map(|i| format!("delta_{i}")).collect();
        writeln!(w, "{},prob", header.join(","))?;
        for (s, p) in law.states.iter().zip(&law.probs) {
            let row: Vec<String> = s.iter().map(|v| v.to_string()).collect();
            writeln!(w, "{},{p}", row.join(","))?;
        }
        Ok(())
    })?;
    let mut summary = json!({
        "n": law.n,
        "bc": law.bc,
        "window": law.window,
        "states": law.states.len(),
        "residual": law.residual,
        "method": law.method,
        "marginals": (1..=dims).map(|i| law.marginal(i)).collect::<Vec<_>>(),
    });
    if spec.n() == 2 && spec.bc() == BoundaryCondition::Zero {
        let bd = birth_death_stationary(spec.betas(), law.window as usize)?;
        out.csv("birth_death.csv", |w| {
            writeln!(w, "k,prob")?;
            for (k, p) in bd.pmf.iter().enumerate() {
                writeln!(w, "{k},{p}")?;
            }
            Ok(())
        })?;
        let exact = bd.pmf.iter().enumerate().map(|(m, p)| (m as i64, *p)).collect();
        summary["birth_death_tv"] = json!(total_variation(&law.abs_marginal(1), &exact));
    }
    out.json("stationary.json", &summary)?;
    if !(law.residual < 1e-8) {
        return Ok(Outcome::CheckFailed(format!("residual {} >= 1e-8", law.residual)));
    }
    Ok(Outcome::Pass)
}

fn drift_kernel(o: &Opts) -> Result<(Kernel, GraphSpec, f64, f64), Failure> {
    let b = betas(o)?;
    let example = req(o.example, "example")?;
    let (kernel, delta, margin) = match example {
        1 | 2 => {
            let bc = if example == 1 { BoundaryCondition::Zero } else { BoundaryCondition::Periodic };
            let n = match &o.graph {
                Some(g) => g.parse::<GraphSpec>()?.n(),
                None => req(o.n, "n")?,
            };
            let k = embedded_jump_kernel_with(n, bc, b)?;
            let total = n as f64 * b.beta2();
            (k, b.beta0() / total, (b.beta1() - b.beta0()) / total)
        }
        3 => {
            let g: GraphSpec = match &o.graph {
                Some(g) => g.parse()?,
                None => GraphSpec::path(req(o.n, "n")?)?,
            };
            let n = g.n() as f64;
            let k = example3_kernel(&g, b)?;
            (k, b.beta0() / n, (b.beta1() - b.beta0()) / n)
        }
        e => return Err(invalid(format!("example must be 1, 2 or 3, got {e}"))),
    };
    let graph = match (&o.graph, example) {
        (Some(g), 1 | 2) => {
            let g: GraphSpec = g.parse()?;
            if g.n() != kernel.n() {
                return Err(invalid("graph size differs from kernel size"));
            }
            g
        }
        _ => kernel.graph().clone(),
    };
    Ok((kernel, graph, o.delta.unwrap_or(delta), o.margin.unwrap_or(margin)))
}

fn drift_check(o: &Opts, out: &mut Outputs) -> Run {
    let (kernel, graph, delta, margin) = drift_kernel(o)?;
    let seed = seed(o)?;
    let consts = match &o.constants {
        Some(c) => Some(DriftConstants::user(c.clone(), delta, margin, MarginVariant::Top)?),
        None => {
            let cond = check_conditions(&kernel, &graph, delta, margin)?;
            match cond.margin_variant() {
                Some(v) if cond.passed => Some(constants_schedule_for(v, graph.p(), delta, margin)?),
                _ => None,
            }
        }
    };
    let per_class = req(o.per_class, "per_class")?;
    let samples = consts
        .as_ref()
        .map(|c| sample_states(&graph, c, per_class, seed))
        .unwrap_or_default();
    let opts = VerifyOptions {
        budget: req(o.budget, "budget")?,
        mc_replicas: req(o.mc_replicas, "mc_replicas")?,
        seed,
        ..VerifyOptions::default()
    };
    let report = verify_foster(&kernel, &graph, delta, margin, consts, &samples, &opts)?;
    let increases: Vec<f64> = samples
        .iter()
        .flat_map(|y| edge_square_drift(&kernel, &graph, y))
        .collect();
    let edge_violations = increases.iter().filter(|v| **v > 1.0 + 1e-12).count();
    if kernel.is_sign_constant() {
        let patterns = enumerate_patterns(kernel.graph())?;
        out.csv("kernel.csv", |w| write_kernel_csv(&kernel, &patterns, w))?;
    }
    out.json(
        "drift_report.json",
        &json!({
            "report": report,
            "delta": delta,
            "margin": margin,
            "edge_square_check": {
                "states": samples.len(),
                "max_increase": increases.iter().copied().fold(f64::NEG_INFINITY, f64::max),
                "violations": edge_violations,
            },
        }),
    )?;
    match report.verdict {
        Verdict::Fail => Ok(Outcome::CheckFailed("drift verification failed".into())),
        _ if report.conditions.passed && edge_violations > 0 => {
            Ok(Outcome::CheckFailed(format!("{edge_violations} per-edge increases above 1")))
        }
        _ => Ok(Outcome::Pass),
    }
}

fn martingale(o: &Opts, out: &mut Outputs) -> Run {
    let (gap, top) = martingale_mean(
        req(o.r, "r")?,
        req(o.alpha, "alpha")?,
        betas(o)?,
        &req(o.times.clone(), "times")?,
        req(o.replicas, "replicas")?,
        seed(o)?,
    )?;
    out.csv("martingale_gap.csv", |w| gap.write_csv(w))?;
    out.csv("martingale_top.csv", |w| top.write_csv(w))?;
    let worst = gap.max_z().max(top.max_z());
    out.json("martingale.json", &json!({ "gap": gap, "top": top, "max_z": worst }))?;
    if worst > 4.0 {
        return Ok(Outcome::CheckFailed(format!("mean departs from 1 by {worst:.2} standard errors")));
    }
    Ok(Outcome::Pass)
}

fn midpoint(o: &Opts, out: &mut Outputs) -> Run {
    let b = betas(o)?;
    let n_list = req(o.n_list.clone(), "n_list")?;
    let opts = MidpointOptions {
        coordinate: req(o.coord, "coord")?,
        horizon: req(o.horizon, "horizon")?,
        replicas: req(o.replicas, "replicas")?,
        seed: seed(o)?,
        permutations: req(o.permutations, "permutations")?,
        level: req(o.level, "level")?,
        stationarity_check: o.stationarity.unwrap_or(false),
    };
    let report = if o.unchecked == Some(true) {
        midpoint_invariance_unchecked(b, &n_list, &opts)?
    } else {
        midpoint_invariance(b, &n_list, &opts)?
    };
    out.csv("midpoint_laws.csv", |w| {
        let header: Vec<String> = n_list.iter().map(|n| format!("n_{n}")).collect();
        writeln!(w, "value,{}", header.join(","))?;
        let values: std::collections::BTreeSet<i64> = report.laws.iter().flat_map(|l| l.keys().copied()).collect();
        for v in values {
            let row: Vec<String> = report.laws.iter().map(|l| l.get(&v).copied().unwrap_or(0.0).to_string()).collect();
            writeln!(w, "{v},{}", row.join(","))?;
        }
        Ok(())
    })?;
    out.json("midpoint.json", &report)?;
    if report.test.rejected {
        return Ok(Outcome::CheckFailed(format!(
            "KS distance {} exceeds critical value {}",
            report.test.statistic, report.test.critical_value
        )));
    }
    Ok(Outcome::Pass)
}
