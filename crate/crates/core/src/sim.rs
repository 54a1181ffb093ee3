//! Exact event-driven simulation on shared clocks.
//!
//! A column reacts to the events of its own site clock: it grows on every
//! `S0` event, on `S1` events when its rate is at least `beta1`, and on `S2`
//! events when its rate is `beta2`. Any set of processes fed by the same
//! [`ClockSource`] is therefore coupled path-wise.

use std::io::{self, Write};

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::clocks::{ClockEvent, ClockSource, Stream};
use crate::error::{Error, Result};
use crate::model::{rate_level, rate_r, BetaParams, BoundaryCondition, HeightState, RateLevel};

/// One growth process: column count, boundary condition, rates and
/// initial heights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProcessSpec {
    bc: BoundaryCondition,
    betas: BetaParams,
    initial: HeightState,
}

impl ProcessSpec {
    /// Process started from the all-zero configuration.
    pub fn new(n: usize, bc: BoundaryCondition, betas: BetaParams) -> Result<Self> {
        Self::with_initial(HeightState::zeros(n)?, bc, betas)
    }

    pub fn with_initial(
        initial: HeightState,
        bc: BoundaryCondition,
        betas: BetaParams,
    ) -> Result<Self> {
        if !betas.is_ordered() {
            return Err(Error::InvalidBetas(betas.beta0(), betas.beta1(), betas.beta2()));
        }
        Ok(Self { bc, betas, initial })
    }

    pub fn n(&self) -> usize {
        self.initial.n()
    }

    pub fn bc(&self) -> BoundaryCondition {
        self.bc
    }

    pub fn betas(&self) -> &BetaParams {
        &self.betas
    }

    pub fn initial(&self) -> &HeightState {
        &self.initial
    }
}

/// What a [`Trajectory`] records at each sample time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SampleMode {
    Heights,
    /// Height differences only; per-site jump counters are kept either way.
    Deltas,
}

/// Event classification counts indexed by `[stream][level][jumped]`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EventTally {
    counts: [[[u64; 2]; 3]; 3],
}

impl EventTally {
    fn record(&mut self, stream: Stream, level: RateLevel, jumped: bool) {
        self.counts[stream.index()][level.index()][jumped as usize] += 1;
    }

    pub fn count(&self, stream: Stream, level: RateLevel, jumped: bool) -> u64 {
        self.counts[stream.index()][level.index()][jumped as usize]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().flatten().sum()
    }

    /// Events whose outcome disagrees with the firing rule.
    pub fn rule_violations(&self) -> u64 {
        let mut bad = 0;
        for s in Stream::ALL {
            for l in RateLevel::ALL {
                bad += self.count(s, l, !s.fires_at(l));
            }
        }
        bad
    }

    pub fn merge(&mut self, other: &EventTally) {
        for s in 0..3 {
            for l in 0..3 {
                for j in 0..2 {
                    self.counts[s][l][j] += other.counts[s][l][j];
                }
            }
        }
    }
}

/// Mutable state of a process being simulated.
#[derive(Debug, Clone, PartialEq)]
pub struct GrowthProcess {
    bc: BoundaryCondition,
    betas: BetaParams,
    heights: Vec<i64>,
    jumps: Vec<u64>,
    tally: EventTally,
}

impl GrowthProcess {
    pub fn new(spec: &ProcessSpec) -> Self {
        Self {
            bc: spec.bc,
            betas: spec.betas,
            heights: spec.initial.heights().to_vec(),
            jumps: vec![0; spec.n()],
            tally: EventTally::default(),
        }
    }

    pub fn n(&self) -> usize {
        self.heights.len()
    }

    pub fn heights(&self) -> &[i64] {
        &self.heights
    }

    pub fn jumps(&self) -> &[u64] {
        &self.jumps
    }

    pub fn tally(&self) -> &EventTally {
        &self.tally
    }

    pub fn state(&self) -> HeightState {
        HeightState::new(self.heights.clone()).expect("heights stay nonnegative")
    }

    /// Rate branch of column `site` (1-based).
    #[inline]
    pub fn level(&self, site: usize) -> RateLevel {
        let h = &self.heights;
        let n = h.len();
        let (left, right) = match self.bc {
            BoundaryCondition::Zero => (
                if site == 1 { 0 } else { h[site - 2] },
                if site == n { 0 } else { h[site] },
            ),
            BoundaryCondition::Periodic => (
                if site == 1 { h[n - 1] } else { h[site - 2] },
                if site == n { h[0] } else { h[site] },
            ),
        };
        rate_level(left, h[site - 1], right)
    }

    pub fn rate(&self, site: usize) -> f64 {
        self.betas.rate_of(self.level(site))
    }

    /// Feeds one clock event; returns whether the column grew. Events at
    /// sites beyond this process's columns are ignored.
    #[inline]
    pub fn apply(&mut self, ev: &ClockEvent) -> bool {
        if ev.site > self.heights.len() {
            return false;
        }
        let level = self.level(ev.site);
        let jumped = ev.stream.fires_at(level);
        self.tally.record(ev.stream, level, jumped);
        if jumped {
            self.heights[ev.site - 1] += 1;
            self.jumps[ev.site - 1] += 1;
        }
        jumped
    }

    fn snapshot(&self, mode: SampleMode) -> Vec<i64> {
        match mode {
            SampleMode::Heights => self.heights.clone(),
            SampleMode::Deltas => {
                let mut d: Vec<i64> = self.heights.windows(2).map(|w| w[0] - w[1]).collect();
                if self.bc == BoundaryCondition::Periodic {
                    d.push(self.heights[self.n() - 1] - self.heights[0]);
                }
                d
            }
        }
    }
}

/// Sampled path of one process.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub spec: ProcessSpec,
    pub mode: SampleMode,
    pub times: Vec<f64>,
    /// Heights or deltas at each sample time, per `mode`.
    pub states: Vec<Vec<i64>>,
    /// Cumulative jumps per site at each sample time.
    pub jumps: Vec<Vec<u64>>,
    /// Cumulative clock events per site and stream at each sample time.
    pub stream_counts: Vec<Vec<[u64; 3]>>,
    pub tally: EventTally,
}

impl Trajectory {
    fn sample_index(&self, t: f64) -> Result<usize> {
        self.times
            .iter()
            .position(|s| *s == t)
            .ok_or(Error::UnsampledTime(t))
    }

    /// Growth of column `j` over `[s, t]`; both times must have been sampled.
    pub fn increment(&self, j: usize, s: f64, t: f64) -> Result<i64> {
        let n = self.spec.n();
        if j == 0 || j > n {
            return Err(Error::IndexOutOfRange { index: j, len: n });
        }
        if s > t {
            return Err(Error::InvalidArgument(format!("increment needs s <= t, got {s} > {t}")));
        }
        let (a, b) = (self.sample_index(s)?, self.sample_index(t)?);
        Ok(self.jumps[b][j - 1] as i64 - self.jumps[a][j - 1] as i64)
    }

    /// Events of `stream` at site `j` in `(s, t]`.
    pub fn stream_events(&self, j: usize, stream: Stream, s: f64, t: f64) -> Result<u64> {
        let n = self.spec.n();
        if j == 0 || j > n {
            return Err(Error::IndexOutOfRange { index: j, len: n });
        }
        let (a, b) = (self.sample_index(s)?, self.sample_index(t)?);
        Ok(self.stream_counts[b][j - 1][stream.index()] - self.stream_counts[a][j - 1][stream.index()])
    }

    pub fn final_state(&self) -> Option<&[i64]> {
        self.states.last().map(|s| s.as_slice())
    }

    /// CSV with header `time,site_1,...` or `time,delta_1,...`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        let width = self.states.first().map_or(0, |s| s.len());
        let prefix = match self.mode {
            SampleMode::Heights => "site",
            SampleMode::Deltas => "delta",
        };
        write!(w, "time")?;
        for i in 1..=width {
            write!(w, ",{prefix}_{i}")?;
        }
        writeln!(w)?;
        for (t, row) in self.times.iter().zip(&self.states) {
            write!(w, "{t}")?;
            for v in row {
                write!(w, ",{v}")?;
            }
            writeln!(w)?;
        }
        Ok(())
    }
}

fn check_horizon(horizon: f64) -> Result<()> {
    if !(horizon.is_finite() && horizon >= 0.0) {
        return Err(Error::NegativeHorizon(horizon));
    }
    Ok(())
}

fn check_samples(sample_times: &[f64], horizon: f64) -> Result<()> {
    for w in sample_times.windows(2) {
        if w[1] < w[0] {
            return Err(Error::InvalidArgument("sample times must be non-decreasing".into()));
        }
    }
    if let Some(bad) = sample_times
        .iter()
        .find(|t| !t.is_finite() || **t < 0.0 || **t > horizon)
    {
        return Err(Error::InvalidArgument(format!(
            "sample time {bad} outside [0, {horizon}]"
        )));
    }
    Ok(())
}

/// `count` sample times evenly spread over `[0, horizon]`, both ends included.
pub fn uniform_grid(horizon: f64, count: usize) -> Vec<f64> {
    match count {
        0 => Vec::new(),
        1 => vec![horizon],
        _ => (0..count)
            .map(|k| horizon * k as f64 / (count - 1) as f64)
            .collect(),
    }
}

pub fn simulate(
    spec: &ProcessSpec,
    horizon: f64,
    clocks: &ClockSource,
    sample_times: &[f64],
) -> Result<Trajectory> {
    simulate_with_mode(spec, horizon, clocks, sample_times, SampleMode::Heights)
}

pub fn simulate_with_mode(
    spec: &ProcessSpec,
    horizon: f64,
    clocks: &ClockSource,
    sample_times: &[f64],
    mode: SampleMode,
) -> Result<Trajectory> {
    let mut out = run_coupled(
        std::slice::from_ref(spec),
        horizon,
        clocks,
        sample_times,
        mode,
        |_, _| {},
    )?;
    Ok(out.pop().expect("one trajectory per spec"))
}

/// State of a single process at `horizon`, without sampling overhead.
pub fn simulate_final(spec: &ProcessSpec, horizon: f64, clocks: &ClockSource) -> Result<GrowthProcess> {
    check_horizon(horizon)?;
    let mut process = GrowthProcess::new(spec);
    let mut events = clocks.events(spec.n(), &spec.betas);
    while let Some(ev) = events.next_until(horizon) {
        process.apply(&ev);
    }
    Ok(process)
}

/// Drives every process with the same clock events.
pub fn simulate_coupled(
    specs: &[ProcessSpec],
    horizon: f64,
    clocks: &ClockSource,
    sample_times: &[f64],
) -> Result<Vec<Trajectory>> {
    run_coupled(specs, horizon, clocks, sample_times, SampleMode::Heights, |_, _| {})
}

/// [`simulate_coupled`] with a callback invoked after every clock event.
pub fn simulate_coupled_observed<F>(
    specs: &[ProcessSpec],
    horizon: f64,
    clocks: &ClockSource,
    sample_times: &[f64],
    observer: F,
) -> Result<Vec<Trajectory>>
where
    F: FnMut(&ClockEvent, &[GrowthProcess]),
{
    run_coupled(specs, horizon, clocks, sample_times, SampleMode::Heights, observer)
}

fn run_coupled<F>(
    specs: &[ProcessSpec],
    horizon: f64,
    clocks: &ClockSource,
    sample_times: &[f64],
    mode: SampleMode,
    mut observer: F,
) -> Result<Vec<Trajectory>>
where
    F: FnMut(&ClockEvent, &[GrowthProcess]),
{
    check_horizon(horizon)?;
    check_samples(sample_times, horizon)?;
    let first = specs.first().ok_or(Error::EmptyProcess)?;
    if specs.iter().any(|s| s.betas != first.betas) {
        return Err(Error::MismatchedBetas);
    }
    let sites = specs.iter().map(ProcessSpec::n).max().unwrap_or(0);
    let mut procs: Vec<GrowthProcess> = specs.iter().map(GrowthProcess::new).collect();
    let mut trajs: Vec<Trajectory> = specs
        .iter()
        .map(|spec| Trajectory {
            spec: spec.clone(),
            mode,
            times: Vec::with_capacity(sample_times.len()),
            states: Vec::with_capacity(sample_times.len()),
            jumps: Vec::with_capacity(sample_times.len()),
            stream_counts: Vec::with_capacity(sample_times.len()),
            tally: EventTally::default(),
        })
        .collect();
    let mut stream_counts = vec![[0u64; 3]; sites];

    let record = |t: f64, procs: &[GrowthProcess], counts: &[[u64; 3]], trajs: &mut [Trajectory]| {
        for (p, tr) in procs.iter().zip(trajs.iter_mut()) {
            tr.times.push(t);
            tr.states.push(p.snapshot(mode));
            tr.jumps.push(p.jumps.clone());
            tr.stream_counts.push(counts[..p.n()].to_vec());
        }
    };

    let mut events = clocks.events(sites, &first.betas);
    let mut pending = sample_times.iter().copied().peekable();
    loop {
        let next_time = events.peek_time().unwrap_or(f64::INFINITY);
        while let Some(&s) = pending.peek() {
            if s < next_time {
                record(s, &procs, &stream_counts, &mut trajs);
                pending.next();
            } else {
                break;
            }
        }
        if next_time > horizon {
            break;
        }
        let ev = events.next().expect("peeked");
        stream_counts[ev.site - 1][ev.stream.index()] += 1;
        for p in procs.iter_mut() {
            p.apply(&ev);
        }
        observer(&ev, &procs);
    }
    for s in pending {
        record(s, &procs, &stream_counts, &mut trajs);
    }
    for (p, tr) in procs.iter().zip(trajs.iter_mut()) {
        tr.tally = p.tally;
    }
    Ok(trajs)
}

/// Configuration of the auxiliary process `(X^r, Z^r, X^{r+1})`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuxState {
    pub xr: Vec<i64>,
    pub zr: Vec<i64>,
    pub xr1: Vec<i64>,
}

impl AuxState {
    /// `X_i^r <= X_i^{r+1} <= Z_i^r` for every `i <= r`.
    pub fn sandwich_holds(&self) -> bool {
        self.xr
            .iter()
            .zip(&self.zr)
            .zip(&self.xr1)
            .all(|((x, z), x1)| x <= x1 && x1 <= z)
    }

    /// `Z_i^r - X_i^r` is the same for every `i`.
    pub fn gap_constant(&self) -> bool {
        let g0 = self.zr[0] - self.xr[0];
        self.zr.iter().zip(&self.xr).all(|(z, x)| z - x == g0)
    }

    /// `Z_r^r - X_r^r`.
    pub fn gap(&self) -> i64 {
        let r = self.xr.len();
        self.zr[r - 1] - self.xr[r - 1]
    }
}

/// Counters collected while running the auxiliary process.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuxTally {
    pub events: u64,
    /// Extra all-coordinate jumps of `Z^r`.
    pub extra_jumps: u64,
    /// Extra jumps coinciding with a jump of `X_r^r`.
    pub double_jumps: u64,
    /// Event instants with `u > 0` but `v != beta0`; zero under the exact dynamics.
    pub u_positive_v_not_low: u64,
}

/// Running auxiliary process together with the exact path integrals of
/// `u_s` and `v_s`.
#[derive(Debug, Clone)]
pub struct AuxProcess {
    r: usize,
    betas: BetaParams,
    xr: GrowthProcess,
    zr: Vec<i64>,
    xr1: GrowthProcess,
    time: f64,
    int_u: f64,
    int_v: f64,
    tally: AuxTally,
}

impl AuxProcess {
    pub fn new(r: usize, betas: BetaParams) -> Result<Self> {
        if r < 2 {
            return Err(Error::InvalidArgument(format!("auxiliary process needs r >= 2, got {r}")));
        }
        let xr = GrowthProcess::new(&ProcessSpec::new(r, BoundaryCondition::Zero, betas)?);
        let xr1 = GrowthProcess::new(&ProcessSpec::new(r + 1, BoundaryCondition::Zero, betas)?);
        Ok(Self {
            r,
            betas,
            xr,
            zr: vec![0; r],
            xr1,
            time: 0.0,
            int_u: 0.0,
            int_v: 0.0,
            tally: AuxTally::default(),
        })
    }

    pub fn r(&self) -> usize {
        self.r
    }

    /// `u = r(X_{r-1}, X_r, X_{r+1}) - r(X_{r-1}, X_r, 0)` on `X^{r+1}`.
    pub fn u(&self) -> f64 {
        let h = self.xr1.heights();
        let (a, b, c) = (h[self.r - 2], h[self.r - 1], h[self.r]);
        rate_r(a, b, c, &self.betas) - rate_r(a, b, 0, &self.betas)
    }

    /// `v = r(X_r, X_{r+1}, 0)` on `X^{r+1}`.
    pub fn v(&self) -> f64 {
        let h = self.xr1.heights();
        rate_r(h[self.r - 1], h[self.r], 0, &self.betas)
    }

    pub fn integral_u(&self) -> f64 {
        self.int_u
    }

    pub fn integral_v(&self) -> f64 {
        self.int_v
    }

    pub fn tally(&self) -> &AuxTally {
        &self.tally
    }

    pub fn state(&self) -> AuxState {
        AuxState {
            xr: self.xr.heights().to_vec(),
            zr: self.zr.clone(),
            xr1: self.xr1.heights().to_vec(),
        }
    }

    /// Integrates `u`, `v` up to `t` (no event in between).
    fn advance_to(&mut self, t: f64) {
        let dt = t - self.time;
        if dt > 0.0 {
            self.int_u += self.u() * dt;
            self.int_v += self.v() * dt;
            self.time = t;
        }
    }

    fn check_u_v(&mut self) {
        if self.u() > 0.0 && self.v() != self.betas.beta0() {
            self.tally.u_positive_v_not_low += 1;
        }
    }

    pub fn apply(&mut self, ev: &ClockEvent) {
        self.advance_to(ev.time);
        self.tally.events += 1;
        let extra = if ev.site == self.r {
            let h = self.xr1.heights();
            let (left, mid, right) = (h[self.r - 2], h[self.r - 1], h[self.r]);
            right > mid
                && ((left <= mid && ev.stream == Stream::S1)
                    || (left > mid && ev.stream == Stream::S2))
        } else {
            false
        };
        let xr_jumped = self.xr.apply(ev);
        self.xr1.apply(ev);
        if xr_jumped {
            self.zr[ev.site - 1] += 1;
        }
        if extra {
            self.tally.extra_jumps += 1;
            if xr_jumped {
                self.tally.double_jumps += 1;
            }
            self.zr.iter_mut().for_each(|z| *z += 1);
        }
        self.check_u_v();
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuxSample {
    pub time: f64,
    pub state: AuxState,
    pub integral_u: f64,
    pub integral_v: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuxTrajectory {
    pub r: usize,
    pub samples: Vec<AuxSample>,
    pub tally: AuxTally,
}

pub fn simulate_aux(
    r: usize,
    betas: BetaParams,
    horizon: f64,
    clocks: &ClockSource,
    sample_times: &[f64],
) -> Result<AuxTrajectory> {
    simulate_aux_observed(r, betas, horizon, clocks, sample_times, |_, _| {})
}

/// [`simulate_aux`] with a callback after every clock event.
pub fn simulate_aux_observed<F>(
    r: usize,
    betas: BetaParams,
    horizon: f64,
    clocks: &ClockSource,
    sample_times: &[f64],
    mut observer: F,
) -> Result<AuxTrajectory>
where
    F: FnMut(&ClockEvent, &AuxProcess),
{
    check_horizon(horizon)?;
    check_samples(sample_times, horizon)?;
    let mut aux = AuxProcess::new(r, betas)?;
    aux.check_u_v();
    let mut samples = Vec::with_capacity(sample_times.len());
    let mut events = clocks.events(r + 1, &betas);
    let mut pending = sample_times.iter().copied().peekable();
    let sample = |aux: &mut AuxProcess, t: f64| {
        aux.advance_to(t);
        AuxSample {
            time: t,
            state: aux.state(),
            integral_u: aux.int_u,
            integral_v: aux.int_v,
        }
    };
    loop {
        let next_time = events.peek_time().unwrap_or(f64::INFINITY);
        while let Some(&s) = pending.peek() {
            if s < next_time {
                samples.push(sample(&mut aux, s));
                pending.next();
            } else {
                break;
            }
        }
        if next_time > horizon {
            break;
        }
        let ev = events.next().expect("peeked");
        aux.apply(&ev);
        observer(&ev, &aux);
    }
    for s in pending {
        samples.push(sample(&mut aux, s));
    }
    Ok(AuxTrajectory {
        r,
        samples,
        tally: aux.tally,
    })
}

/// Path-wise coupling counts accumulated over replicas.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CouplingReport {
    pub replicas: u64,
    pub events: u64,
    /// Events after which the dominating copy fell below the base copy.
    pub domination_violations: u64,
    /// Events after which the shifted copy differed from base + shift.
    pub shift_violations: u64,
    /// Replicas on which `Delta_j >= 0` held after every event.
    pub restriction_replicas: u64,
    /// Events on those replicas where the first `j` columns disagreed.
    pub restriction_violations: u64,
}

impl CouplingReport {
    pub fn merge(&mut self, o: &CouplingReport) {
        self.replicas += o.replicas;
        self.events += o.events;
        self.domination_violations += o.domination_violations;
        self.shift_violations += o.shift_violations;
        self.restriction_replicas += o.restriction_replicas;
        self.restriction_violations += o.restriction_violations;
    }

    pub fn violations(&self) -> u64 {
        self.domination_violations + self.shift_violations + self.restriction_violations
    }
}

/// Couples four processes on each replica: a base copy from zero, a copy
/// shifted up by `shift`, a copy started from heights drawn uniformly in
/// `0..=shift` (which dominates the base), and, for zero BC with
/// `restrict = Some(j)`, the `j`-column process. All are compared after
/// every clock event.
pub fn check_coupling(
    spec: &ProcessSpec,
    horizon: f64,
    replicas: u64,
    seed: u64,
    shift: i64,
    restrict: Option<usize>,
) -> Result<CouplingReport> {
    if shift < 0 {
        return Err(Error::InvalidArgument(format!("shift must be >= 0, got {shift}")));
    }
    let n = spec.n();
    if let Some(j) = restrict {
        if j == 0 || j >= n || spec.bc() != BoundaryCondition::Zero {
            return Err(Error::InvalidArgument(format!(
                "restriction needs zero BC and 1 <= j < n, got j = {j}"
            )));
        }
    }
    let source = ClockSource::new(seed);
    let reports = par_replicas(replicas, |r| -> Result<CouplingReport> {
        let clocks = source.replica(r);
        let mut init_rng = clocks.keyed_rng(u64::MAX);
        let random_init: Vec<i64> = (0..n).map(|_| init_rng.random_range(0..=shift)).collect();
        let base = spec.initial().heights().to_vec();
        let shifted: Vec<i64> = base.iter().map(|h| h + shift).collect();
        let dominating: Vec<i64> = base.iter().zip(&random_init).map(|(h, d)| h + d).collect();
        let mut specs = vec![
            spec.clone(),
            ProcessSpec::with_initial(HeightState::new(shifted)?, spec.bc(), spec.betas)?,
            ProcessSpec::with_initial(HeightState::new(dominating)?, spec.bc(), spec.betas)?,
        ];
        if let Some(j) = restrict {
            specs.push(ProcessSpec::with_initial(
                HeightState::new(base[..j].to_vec())?,
                spec.bc(),
                spec.betas,
            )?);
        }
        let mut rep = CouplingReport { replicas: 1, ..Default::default() };
        let mut restriction_ok = true;
        let mut restriction_bad = 0;
        simulate_coupled_observed(&specs, horizon, &clocks, &[], |_, procs| {
            rep.events += 1;
            let (b, s, d) = (procs[0].heights(), procs[1].heights(), procs[2].heights());
            if d.iter().zip(b).any(|(x, y)| x < y) {
                rep.domination_violations += 1;
            }
            if s.iter().zip(b).any(|(x, y)| x - y != shift) {
                rep.shift_violations += 1;
            }
            if let Some(j) = restrict {
                restriction_ok &= b[j - 1] >= b[j];
                if procs[3].heights() != &b[..j] {
                    restriction_bad += 1;
                }
            }
        })?;
        if restrict.is_some() && restriction_ok {
            rep.restriction_replicas = 1;
            rep.restriction_violations = restriction_bad;
        }
        Ok(rep)
    });
    let mut total = CouplingReport::default();
    for r in reports {
        total.merge(&r?);
    }
    Ok(total)
}

/// Auxiliary-process invariant counts accumulated over replicas.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SandwichReport {
    pub r: usize,
    pub replicas: u64,
    pub events: u64,
    pub ordering_violations: u64,
    pub gap_violations: u64,
    pub extra_jumps: u64,
    pub double_jumps: u64,
    pub u_positive_v_not_low: u64,
}

/// Runs the auxiliary process on each replica and checks the ordering
/// `X^r <= X^{r+1} <= Z^r` and the constant gap `Z^r - X^r` after every event.
pub fn check_sandwich(r: usize, betas: BetaParams, horizon: f64, replicas: u64, seed: u64) -> Result<SandwichReport> {
    let source = ClockSource::new(seed);
    let reports = par_replicas(replicas, |rep| -> Result<SandwichReport> {
        let mut out = SandwichReport { r, replicas: 1, ..Default::default() };
        let tr = simulate_aux_observed(r, betas, horizon, &source.replica(rep), &[], |_, aux| {
            let st = aux.state();
            out.events += 1;
            out.ordering_violations += u64::from(!st.sandwich_holds());
            out.gap_violations += u64::from(!st.gap_constant());
        })?;
        out.extra_jumps = tr.tally.extra_jumps;
        out.double_jumps = tr.tally.double_jumps;
        out.u_positive_v_not_low = tr.tally.u_positive_v_not_low;
        Ok(out)
    });
    let mut total = SandwichReport { r, ..Default::default() };
    for rep in reports {
        let rep = rep?;
        total.replicas += rep.replicas;
        total.events += rep.events;
        total.ordering_violations += rep.ordering_violations;
        total.gap_violations += rep.gap_violations;
        total.extra_jumps += rep.extra_jumps;
        total.double_jumps += rep.double_jumps;
        total.u_positive_v_not_low += rep.u_positive_v_not_low;
    }
    Ok(total)
}

/// Runs `f` on replicas `0..replicas` in parallel; results come back in
/// replica order regardless of scheduling.
pub fn par_replicas<T, F>(replicas: u64, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(u64) -> T + Sync + Send,
{
    (0..replicas).into_par_iter().map(f).collect()
}
