//! Stationary laws and Monte Carlo estimators.

use std::collections::{BTreeMap, HashMap};
use std::io::{self, Write};

use nalgebra::{DMatrix, DVector};
use rand_distr::{Distribution, Hypergeometric};
use serde::{Deserialize, Serialize};

use crate::clocks::ClockSource;
use crate::error::{Error, Result};
use crate::model::{rate_tilde, BetaParams, BoundaryCondition};
use crate::sim::{par_replicas, simulate, simulate_aux, simulate_final, ProcessSpec};

/// Two-sided 99% normal quantile.
pub const Z99: f64 = 2.575_829_303_549_109;

/// Largest truncated state space accepted by [`truncated_stationary`].
pub const MAX_TRUNCATED_STATES: usize = 200_000;

/// Largest state space solved by dense LU under [`SolveMethod::Auto`].
pub const DENSE_LIMIT: usize = 2_000;

/// Stationary law of `|Delta_1|` for two columns with zero boundary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BirthDeathLaw {
    pub rho: f64,
    /// `pmf[m] = P(|Delta| = m)` for `m = 0..=K`.
    pub pmf: Vec<f64>,
    /// `P(|Delta| > K)`.
    pub tail_mass: f64,
}

impl BirthDeathLaw {
    pub fn pmf(&self, m: usize) -> f64 {
        self.pmf.get(m).copied().unwrap_or(0.0)
    }

    /// `P(|Delta| >= k)`, closed form.
    pub fn tail(&self, k: usize) -> f64 {
        if k == 0 {
            1.0
        } else {
            2.0 * self.pmf[0] * self.rho.powi(k as i32) / (1.0 - self.rho)
        }
    }
}

/// Law of the chain `0 -> 1` at `2 beta0`, `m -> m+1` at `beta0`,
/// `m -> m-1` at `beta1`, listed up to `truncation`.
pub fn birth_death_stationary(betas: &BetaParams, truncation: usize) -> Result<BirthDeathLaw> {
    if truncation < 1 {
        return Err(Error::InvalidArgument("truncation must be >= 1".into()));
    }
    if betas.beta0() >= betas.beta1() {
        return Err(Error::InvalidBetas(betas.beta0(), betas.beta1(), betas.beta2()));
    }
    let rho = betas.beta0() / betas.beta1();
    let p0 = (1.0 - rho) / (1.0 + rho);
    let pmf: Vec<f64> = (0..=truncation)
        .map(|m| if m == 0 { p0 } else { 2.0 * rho.powi(m as i32) * p0 })
        .collect();
    let tail_mass = 2.0 * p0 * rho.powi(truncation as i32 + 1) / (1.0 - rho);
    Ok(BirthDeathLaw { rho, pmf, tail_mass })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolveMethod {
    Auto,
    Lu,
    GaussSeidel,
}

/// Stationary vector of the difference process restricted to a window.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruncatedLaw {
    pub n: usize,
    pub bc: BoundaryCondition,
    pub window: i64,
    /// Full difference vectors: `n - 1` entries for zero BC, `n` for periodic.
    pub states: Vec<Vec<i64>>,
    pub probs: Vec<f64>,
    /// `max_j |(pi G)_j|`.
    pub residual: f64,
    pub method: SolveMethod,
}

impl TruncatedLaw {
    /// Law of `Delta_i` (1-based).
    pub fn marginal(&self, i: usize) -> BTreeMap<i64, f64> {
        let mut out = BTreeMap::new();
        for (s, p) in self.states.iter().zip(&self.probs) {
            *out.entry(s[i - 1]).or_insert(0.0) += p;
        }
        out
    }

    /// Law of `|Delta_i|`.
    pub fn abs_marginal(&self, i: usize) -> BTreeMap<i64, f64> {
        let mut out = BTreeMap::new();
        for (v, p) in self.marginal(i) {
            *out.entry(v.abs()).or_insert(0.0) += p;
        }
        out
    }
}

struct Generator {
    states: Vec<Vec<i64>>,
    /// `(target, rate)` per source state, self-loops excluded.
    out: Vec<Vec<(usize, f64)>>,
}

fn build_generator(spec: &ProcessSpec, k: i64) -> Result<Generator> {
    let n = spec.n();
    let bc = spec.bc();
    let dim = n - 1;
    let side = (2 * k + 1) as usize;
    let raw = side.checked_pow(dim as u32).unwrap_or(usize::MAX);
    if raw > MAX_TRUNCATED_STATES.saturating_mul(side) {
        return Err(Error::StateBudget {
            states: raw,
            limit: MAX_TRUNCATED_STATES,
        });
    }
    let full = |d: &[i64]| -> Option<Vec<i64>> {
        let mut v = d.to_vec();
        if bc == BoundaryCondition::Periodic {
            let last = -d.iter().sum::<i64>();
            if last.abs() > k {
                return None;
            }
            v.push(last);
        }
        Some(v)
    };
    let mut states = Vec::new();
    let mut index = HashMap::new();
    let mut d = vec![-k; dim];
    'outer: loop {
        if let Some(v) = full(&d) {
            index.insert(d.clone(), states.len());
            states.push(v);
            if states.len() > MAX_TRUNCATED_STATES {
                return Err(Error::StateBudget {
                    states: states.len(),
                    limit: MAX_TRUNCATED_STATES,
                });
            }
        }
        for c in d.iter_mut() {
            if *c < k {
                *c += 1;
                continue 'outer;
            }
            *c = -k;
        }
        break;
    }
    let betas = spec.betas();
    let out = states
        .iter()
        .map(|s| {
            let mut moves = Vec::new();
            for i in 1..=n {
                let left = if i == 1 {
                    if bc == BoundaryCondition::Periodic { s[n - 1] } else { 0 }
                } else {
                    s[i - 2]
                };
                let right = if i == n {
                    if bc == BoundaryCondition::Periodic { s[n - 1] } else { 0 }
                } else {
                    s[i - 1]
                };
                let rate = rate_tilde(left, -right, betas);
                let mut t = s[..dim].to_vec();
                if i >= 2 {
                    t[i - 2] -= 1;
                }
                if i <= dim {
                    t[i - 1] += 1;
                }
                if t.iter().all(|v| v.abs() <= k) {
                    if let Some(&j) = index.get(&t) {
                        if rate > 0.0 {
                            moves.push((j, rate));
                        }
                    }
                }
            }
            moves
        })
        .collect();
    Ok(Generator { states, out })
}

fn residual(g: &Generator, pi: &[f64]) -> f64 {
    let mut flow = vec![0.0; pi.len()];
    for (i, moves) in g.out.iter().enumerate() {
        for &(j, r) in moves {
            flow[j] += pi[i] * r;
            flow[i] -= pi[i] * r;
        }
    }
    flow.iter().fold(0.0, |m, v| m.max(v.abs()))
}

fn solve_lu(g: &Generator) -> Result<Vec<f64>> {
    let m = g.states.len();
    // rows of G^T; the last equation is replaced by sum(pi) = 1
    let mut a = DMatrix::<f64>::zeros(m, m);
    for (i, moves) in g.out.iter().enumerate() {
        for &(j, r) in moves {
            a[(j, i)] += r;
            a[(i, i)] -= r;
        }
    }
    for c in 0..m {
        a[(m - 1, c)] = 1.0;
    }
    let mut b = DVector::<f64>::zeros(m);
    b[m - 1] = 1.0;
    let x = a
        .lu()
        .solve(&b)
        .ok_or_else(|| Error::InvalidArgument("singular truncated generator".into()))?;
    Ok(x.iter().map(|v| v.max(0.0)).collect())
}

fn solve_gauss_seidel(g: &Generator) -> Vec<f64> {
    let m = g.states.len();
    let mut incoming: Vec<Vec<(usize, f64)>> = vec![Vec::new(); m];
    let mut exit = vec![0.0; m];
    for (i, moves) in g.out.iter().enumerate() {
        for &(j, r) in moves {
            incoming[j].push((i, r));
            exit[i] += r;
        }
    }
    let mut pi = vec![1.0 / m as f64; m];
    for sweep in 0..200_000 {
        for j in 0..m {
            if exit[j] > 0.0 {
                pi[j] = incoming[j].iter().map(|&(i, r)| pi[i] * r).sum::<f64>() / exit[j];
            }
        }
        let total: f64 = pi.iter().sum();
        pi.iter_mut().for_each(|p| *p /= total);
        if sweep % 16 == 15 && residual(g, &pi) < 1e-14 {
            break;
        }
    }
    pi
}

pub fn truncated_stationary(spec: &ProcessSpec, window: i64) -> Result<TruncatedLaw> {
    truncated_stationary_with(spec, window, SolveMethod::Auto)
}

/// Stationary law of the difference process on `[-K, K]^{n-1}` (for
/// periodic BC every `Delta_i`, including `Delta_n`, lies in the window).
/// Moves that leave the window are suppressed.
pub fn truncated_stationary_with(
    spec: &ProcessSpec,
    window: i64,
    method: SolveMethod,
) -> Result<TruncatedLaw> {
    if spec.n() < 2 {
        return Err(Error::InvalidArgument("need at least two columns".into()));
    }
    if window < 1 {
        return Err(Error::InvalidArgument("window must be >= 1".into()));
    }
    let g = build_generator(spec, window)?;
    let method = match method {
        SolveMethod::Auto if g.states.len() <= DENSE_LIMIT => SolveMethod::Lu,
        SolveMethod::Auto => SolveMethod::GaussSeidel,
        m => m,
    };
    let probs = match method {
        SolveMethod::Lu => solve_lu(&g)?,
        _ => solve_gauss_seidel(&g),
    };
    let total: f64 = probs.iter().sum();
    let probs: Vec<f64> = probs.iter().map(|p| p / total).collect();
    let residual = residual(&g, &probs);
    Ok(TruncatedLaw {
        n: spec.n(),
        bc: spec.bc(),
        window,
        states: g.states,
        probs,
        residual,
        method,
    })
}

/// Sum of absolute differences over the union of supports, halved.
pub fn total_variation(a: &BTreeMap<i64, f64>, b: &BTreeMap<i64, f64>) -> f64 {
    let keys: std::collections::BTreeSet<_> = a.keys().chain(b.keys()).collect();
    0.5 * keys
        .into_iter()
        .map(|k| (a.get(k).unwrap_or(&0.0) - b.get(k).unwrap_or(&0.0)).abs())
        .sum::<f64>()
}

/// Empirical law of integer samples.
pub fn empirical_law(values: &[i64]) -> BTreeMap<i64, f64> {
    let mut out = BTreeMap::new();
    for v in values {
        *out.entry(*v).or_insert(0.0) += 1.0;
    }
    let m = values.len() as f64;
    out.values_mut().for_each(|p| *p /= m);
    out
}

/// Heights at time `t` of replicas `0..replicas`, from the zero state.
pub fn final_heights(spec: &ProcessSpec, t: f64, replicas: u64, seed: u64) -> Result<Vec<Vec<i64>>> {
    let source = ClockSource::new(seed);
    par_replicas(replicas, |r| {
        simulate_final(spec, t, &source.replica(r)).map(|p| p.heights().to_vec())
    })
    .into_iter()
    .collect()
}

/// `Delta_i` (1-based) of each height vector.
pub fn deltas_at(heights: &[Vec<i64>], bc: BoundaryCondition, i: usize) -> Vec<i64> {
    heights
        .iter()
        .map(|h| {
            let next = if i == h.len() && bc == BoundaryCondition::Periodic { h[0] } else { h[i] };
            h[i - 1] - next
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TailEstimate {
    pub coordinate: usize,
    pub samples: u64,
    pub ks: Vec<u64>,
    /// Number of samples with `|Delta_i| >= k`.
    pub counts: Vec<u64>,
    pub probs: Vec<f64>,
    /// Fitted `ln P(|Delta_i| >= k) ~ intercept + slope k`.
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
    pub fit_ks: Vec<u64>,
}

impl TailEstimate {
    pub fn write_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "k,count,prob")?;
        for ((k, c), p) in self.ks.iter().zip(&self.counts).zip(&self.probs) {
            writeln!(w, "{k},{c},{p}")?;
        }
        Ok(())
    }
}

/// Ordinary least squares `y ~ a + b x`, returning `(b, a, R^2)`.
pub fn ols(x: &[f64], y: &[f64]) -> (f64, f64, f64) {
    let m = x.len() as f64;
    let mx = x.iter().sum::<f64>() / m;
    let my = y.iter().sum::<f64>() / m;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let syy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
    let slope = sxy / sxx;
    let r2 = if syy == 0.0 { 1.0 } else { sxy * sxy / (sxx * syy) };
    (slope, my - slope * mx, r2)
}

/// Empirical tail of `|values|` with a log-linear fit over `k >= 1`
/// where at least `floor` samples reach `k`.
pub fn tail_from_samples(coordinate: usize, values: &[i64], floor: u64) -> Result<TailEstimate> {
    if values.is_empty() {
        return Err(Error::EmptyProcess);
    }
    let max = values.iter().map(|v| v.unsigned_abs()).max().unwrap_or(0);
    let mut hist = vec![0u64; max as usize + 2];
    for v in values {
        hist[v.unsigned_abs() as usize] += 1;
    }
    let mut counts = vec![0u64; max as usize + 1];
    let mut acc = 0;
    for k in (0..=max as usize).rev() {
        acc += hist[k];
        counts[k] = acc;
    }
    let total = values.len() as f64;
    let ks: Vec<u64> = (0..=max).collect();
    let probs: Vec<f64> = counts.iter().map(|c| *c as f64 / total).collect();
    let fit_ks: Vec<u64> = ks.iter().copied().filter(|&k| k >= 1 && counts[k as usize] >= floor).collect();
    if fit_ks.len() < 3 {
        return Err(Error::DegenerateFit(fit_ks.len()));
    }
    let x: Vec<f64> = fit_ks.iter().map(|&k| k as f64).collect();
    let y: Vec<f64> = fit_ks.iter().map(|&k| probs[k as usize].ln()).collect();
    let (slope, intercept, r_squared) = ols(&x, &y);
    Ok(TailEstimate {
        coordinate,
        samples: values.len() as u64,
        ks,
        counts,
        probs,
        slope,
        intercept,
        r_squared,
        fit_ks,
    })
}

/// Minimum replicas for [`estimate_tails`].
pub const MIN_TAIL_REPLICAS: u64 = 1000;

/// Tails of `|Delta_i|` at time `t` for each requested coordinate.
pub fn estimate_tails(
    spec: &ProcessSpec,
    t: f64,
    replicas: u64,
    seed: u64,
    coordinates: &[usize],
    floor: u64,
) -> Result<Vec<TailEstimate>> {
    if replicas < MIN_TAIL_REPLICAS {
        return Err(Error::InvalidArgument(format!(
            "tail estimation needs >= {MIN_TAIL_REPLICAS} replicas, got {replicas}"
        )));
    }
    let n_deltas = match spec.bc() {
        BoundaryCondition::Zero => spec.n() - 1,
        BoundaryCondition::Periodic => spec.n(),
    };
    if let Some(&i) = coordinates.iter().find(|&&i| i == 0 || i > n_deltas) {
        return Err(Error::IndexOutOfRange { index: i, len: n_deltas });
    }
    let heights = final_heights(spec, t, replicas, seed)?;
    coordinates
        .iter()
        .map(|&i| tail_from_samples(i, &deltas_at(&heights, spec.bc(), i), floor))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpeedEstimate {
    pub coordinate: usize,
    pub horizon: f64,
    pub replicas: u64,
    pub mean: f64,
    pub std_error: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

/// `X_j(t) / t` with a 99% normal interval.
pub fn estimate_speed(spec: &ProcessSpec, j: usize, t: f64, replicas: u64, seed: u64) -> Result<SpeedEstimate> {
    Ok(estimate_speed_curve(spec, j, &[t], replicas, seed)?.remove(0))
}

/// [`estimate_speed`] at several times along the same paths.
pub fn estimate_speed_curve(
    spec: &ProcessSpec,
    j: usize,
    times: &[f64],
    replicas: u64,
    seed: u64,
) -> Result<Vec<SpeedEstimate>> {
    if times.is_empty() || times.iter().any(|t| !(*t > 0.0)) {
        return Err(Error::InvalidArgument("speed times must be > 0".into()));
    }
    if j == 0 || j > spec.n() {
        return Err(Error::IndexOutOfRange { index: j, len: spec.n() });
    }
    if replicas < 2 {
        return Err(Error::InvalidArgument("speed needs >= 2 replicas".into()));
    }
    let horizon = times.iter().cloned().fold(0.0, f64::max);
    let source = ClockSource::new(seed);
    let paths: Vec<Vec<f64>> = par_replicas(replicas, |r| {
        simulate(spec, horizon, &source.replica(r), times).map(|tr| {
            tr.states
                .iter()
                .zip(&tr.times)
                .map(|(h, t)| h[j - 1] as f64 / t)
                .collect()
        })
    })
    .into_iter()
    .collect::<Result<_>>()?;
    let m = replicas as f64;
    Ok(times
        .iter()
        .enumerate()
        .map(|(idx, &t)| {
            let (mean, se) = mean_se(paths.iter().map(|p| p[idx]), m);
            SpeedEstimate {
                coordinate: j,
                horizon: t,
                replicas,
                mean,
                std_error: se,
                ci_low: (mean - Z99 * se).max(0.0),
                ci_high: mean + Z99 * se,
            }
        })
        .collect())
}

fn mean_se(values: impl Iterator<Item = f64> + Clone, m: f64) -> (f64, f64) {
    let mean = values.clone().sum::<f64>() / m;
    let var = values.map(|v| (v - mean).powi(2)).sum::<f64>() / (m - 1.0).max(1.0);
    (mean, (var / m).sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MartingaleCheck {
    pub statistic: String,
    pub alpha: f64,
    pub replicas: u64,
    pub times: Vec<f64>,
    pub means: Vec<f64>,
    pub std_errors: Vec<f64>,
}

impl MartingaleCheck {
    pub fn write_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "time,mean,se")?;
        for ((t, m), s) in self.times.iter().zip(&self.means).zip(&self.std_errors) {
            writeln!(w, "{t},{m},{s}")?;
        }
        Ok(())
    }

    /// Largest `|mean - 1|` in units of the standard error.
    pub fn max_z(&self) -> f64 {
        self.means
            .iter()
            .zip(&self.std_errors)
            .map(|(m, s)| {
                let d = (m - 1.0).abs();
                if d == 0.0 { 0.0 } else { d / s }
            })
            .fold(0.0, f64::max)
    }
}

/// Sample means of `(1+a)^{Z_r - X_r} e^{-a int u}` and
/// `(1+a)^{X_{r+1}} e^{-a int v}` for the auxiliary process.
pub fn martingale_mean(
    r: usize,
    alpha: f64,
    betas: BetaParams,
    sample_times: &[f64],
    replicas: u64,
    seed: u64,
) -> Result<(MartingaleCheck, MartingaleCheck)> {
    if !(alpha >= 0.0) || !alpha.is_finite() {
        return Err(Error::InvalidArgument(format!("alpha must be >= 0, got {alpha}")));
    }
    if replicas < 2 {
        return Err(Error::InvalidArgument("martingale check needs >= 2 replicas".into()));
    }
    if sample_times.windows(2).any(|w| w[1] < w[0]) || sample_times.is_empty() {
        return Err(Error::InvalidArgument("sample times must be nonempty and sorted".into()));
    }
    let horizon = *sample_times.last().expect("nonempty");
    let source = ClockSource::new(seed);
    let base = 1.0 + alpha;
    let rows: Vec<Vec<(f64, f64)>> = par_replicas(replicas, |rep| {
        simulate_aux(r, betas, horizon, &source.replica(rep), sample_times).map(|tr| {
            tr.samples
                .iter()
                .map(|s| {
                    let gap = (s.state.zr[r - 1] - s.state.xr[r - 1]) as f64;
                    let top = s.state.xr1[r] as f64;
                    (
                        base.powf(gap) * (-alpha * s.integral_u).exp(),
                        base.powf(top) * (-alpha * s.integral_v).exp(),
                    )
                })
                .collect()
        })
    })
    .into_iter()
    .collect::<Result<_>>()?;
    let m = replicas as f64;
    let build = |name: &str, pick: fn(&(f64, f64)) -> f64| {
        let (means, ses) = (0..sample_times.len())
            .map(|k| mean_se(rows.iter().map(|row| pick(&row[k])), m))
            .unzip();
        MartingaleCheck {
            statistic: name.to_string(),
            alpha,
            replicas,
            times: sample_times.to_vec(),
            means,
            std_errors: ses,
        }
    };
    Ok((build("gap", |p| p.0), build("top", |p| p.1)))
}

/// Kolmogorov-Smirnov distance between two count vectors on a shared,
/// sorted support.
pub fn ks_counts(a: &[u64], b: &[u64]) -> f64 {
    let (na, nb) = (a.iter().sum::<u64>() as f64, b.iter().sum::<u64>() as f64);
    let (mut ca, mut cb, mut d) = (0.0, 0.0, 0.0f64);
    for (x, y) in a.iter().zip(b) {
        ca += *x as f64;
        cb += *y as f64;
        d = d.max((ca / na - cb / nb).abs());
    }
    d
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KsComparison {
    pub statistic: f64,
    pub critical_value: f64,
    pub p_value: f64,
    pub permutations: u64,
    pub rejected: bool,
}

/// KS statistic (largest over pairs of groups) with a pooled-permutation
/// null distribution. Group sizes are preserved; each permutation splits
/// the pooled counts by sequential hypergeometric draws.
pub fn ks_permutation_test(groups: &[Vec<i64>], permutations: u64, level: f64, seed: u64) -> Result<KsComparison> {
    if groups.len() < 2 || groups.iter().any(|g| g.is_empty()) {
        return Err(Error::InvalidArgument("need at least two nonempty groups".into()));
    }
    if permutations == 0 {
        return Err(Error::InvalidArgument("need >= 1 permutation".into()));
    }
    let support: Vec<i64> = {
        let mut s: Vec<i64> = groups.iter().flatten().copied().collect();
        s.sort_unstable();
        s.dedup();
        s
    };
    let pos: HashMap<i64, usize> = support.iter().enumerate().map(|(i, v)| (*v, i)).collect();
    let counts: Vec<Vec<u64>> = groups
        .iter()
        .map(|g| {
            let mut c = vec![0u64; support.len()];
            g.iter().for_each(|v| c[pos[v]] += 1);
            c
        })
        .collect();
    let max_ks = |cs: &[Vec<u64>]| -> f64 {
        let mut d = 0.0f64;
        for a in 0..cs.len() {
            for b in a + 1..cs.len() {
                d = d.max(ks_counts(&cs[a], &cs[b]));
            }
        }
        d
    };
    let statistic = max_ks(&counts);
    let pooled: Vec<u64> = (0..support.len()).map(|v| counts.iter().map(|c| c[v]).sum()).collect();
    let sizes: Vec<u64> = groups.iter().map(|g| g.len() as u64).collect();
    let mut rng = ClockSource::new(seed).keyed_rng(u64::MAX - 1);
    let mut null = Vec::with_capacity(permutations as usize);
    for _ in 0..permutations {
        let mut remaining = pooled.clone();
        let mut split = Vec::with_capacity(sizes.len());
        for (g, &size) in sizes.iter().enumerate() {
            if g + 1 == sizes.len() {
                split.push(remaining.clone());
                break;
            }
            let mut left: u64 = remaining.iter().sum();
            let mut draws = size;
            let mut c = vec![0u64; support.len()];
            for v in 0..support.len() {
                if draws == 0 {
                    break;
                }
                let x = if remaining[v] == left {
                    draws
                } else {
                    Hypergeometric::new(left, remaining[v], draws)
                        .map_err(|e| Error::InvalidArgument(e.to_string()))?
                        .sample(&mut rng)
                };
                c[v] = x;
                left -= remaining[v];
                remaining[v] -= x;
                draws -= x;
            }
            split.push(c);
        }
        null.push(max_ks(&split));
    }
    let exceed = null.iter().filter(|d| **d >= statistic - 1e-12).count();
    let p_value = (1 + exceed) as f64 / (1 + permutations) as f64;
    let mut sorted = null.clone();
    sorted.sort_by(f64::total_cmp);
    let idx = ((1.0 - level) * permutations as f64).ceil() as usize;
    let critical_value = sorted[idx.clamp(1, sorted.len()) - 1];
    Ok(KsComparison {
        statistic,
        critical_value,
        p_value,
        permutations,
        rejected: statistic > critical_value,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MidpointReport {
    pub betas: BetaParams,
    pub n_list: Vec<usize>,
    pub coordinate: usize,
    pub horizon: f64,
    pub replicas: u64,
    /// Law of `Delta_i` for each entry of `n_list`.
    pub laws: Vec<BTreeMap<i64, f64>>,
    pub test: KsComparison,
    /// KS distance between the laws at `t` and `2t`, per `n`, if requested.
    pub stationarity_ks: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MidpointOptions {
    pub coordinate: usize,
    pub horizon: f64,
    pub replicas: u64,
    pub seed: u64,
    pub permutations: u64,
    /// Significance level of the test.
    pub level: f64,
    pub stationarity_check: bool,
}

impl Default for MidpointOptions {
    fn default() -> Self {
        Self {
            coordinate: 1,
            horizon: 500.0,
            replicas: 50_000,
            seed: 0,
            permutations: 1000,
            level: 0.01,
            stationarity_check: false,
        }
    }
}

/// Compares the law of `Delta_i` across column counts under zero BC.
/// Requires `beta1 = (beta0 + beta2) / 2`.
pub fn midpoint_invariance(betas: BetaParams, n_list: &[usize], opts: &MidpointOptions) -> Result<MidpointReport> {
    if betas.midpoint_offset().abs() >= 1e-12 {
        return Err(Error::NotMidpoint(betas.midpoint_offset()));
    }
    midpoint_invariance_unchecked(betas, n_list, opts)
}

/// [`midpoint_invariance`] without the midpoint guard, for power checks.
pub fn midpoint_invariance_unchecked(
    betas: BetaParams,
    n_list: &[usize],
    opts: &MidpointOptions,
) -> Result<MidpointReport> {
    let i = opts.coordinate;
    if n_list.len() < 2 {
        return Err(Error::InvalidArgument("n_list needs at least two entries".into()));
    }
    if let Some(&n) = n_list.iter().find(|&&n| i == 0 || n <= i) {
        return Err(Error::IndexOutOfRange { index: i, len: n.saturating_sub(1) });
    }
    if opts.replicas < 2 {
        return Err(Error::InvalidArgument("need >= 2 replicas".into()));
    }
    let t = opts.horizon;
    let times: Vec<f64> = if opts.stationarity_check { vec![t, 2.0 * t] } else { vec![t] };
    let source = ClockSource::new(opts.seed);
    let mut groups = Vec::new();
    let mut late = Vec::new();
    for (g, &n) in n_list.iter().enumerate() {
        let spec = ProcessSpec::new(n, BoundaryCondition::Zero, betas)?;
        let offset = g as u64 * opts.replicas;
        let rows: Vec<Vec<i64>> = par_replicas(opts.replicas, |r| {
            simulate(&spec, *times.last().expect("nonempty"), &source.replica(offset + r), &times)
                .map(|tr| tr.states.iter().map(|h| h[i - 1] - h[i]).collect())
        })
        .into_iter()
        .collect::<Result<_>>()?;
        groups.push(rows.iter().map(|v| v[0]).collect::<Vec<i64>>());
        if opts.stationarity_check {
            late.push(rows.iter().map(|v| v[1]).collect::<Vec<i64>>());
        }
    }
    let test = ks_permutation_test(&groups, opts.permutations, opts.level, opts.seed)?;
    let stationarity_ks = opts.stationarity_check.then(|| {
        groups
            .iter()
            .zip(&late)
            .map(|(a, b)| {
                let law_a = empirical_law(a);
                let law_b = empirical_law(b);
                let keys: std::collections::BTreeSet<_> = law_a.keys().chain(law_b.keys()).collect();
                let (mut fa, mut fb, mut d) = (0.0, 0.0, 0.0f64);
                for k in keys {
                    fa += law_a.get(k).unwrap_or(&0.0);
                    fb += law_b.get(k).unwrap_or(&0.0);
                    d = d.max((fa - fb).abs());
                }
                d
            })
            .collect()
    });
    Ok(MidpointReport {
        betas,
        n_list: n_list.to_vec(),
        coordinate: i,
        horizon: t,
        replicas: opts.replicas,
        laws: groups.iter().map(|g| empirical_law(g)).collect(),
        test,
        stationarity_ks,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn b123() -> BetaParams {
        BetaParams::new(1.0, 2.0, 3.0).unwrap()
    }

    #[test]
    fn birth_death_values() {
        let law = birth_death_stationary(&b123(), 60).unwrap();
        assert!((law.pmf(0) - 1.0 / 3.0).abs() < 1e-15);
        assert!((law.pmf(1) - 1.0 / 3.0).abs() < 1e-15);
        assert!((law.pmf(2) - 1.0 / 6.0).abs() < 1e-15);
        assert!((law.tail(3) - (4.0 / 3.0) * 0.125).abs() < 1e-15);
        assert!((law.pmf.iter().sum::<f64>() + law.tail_mass - 1.0).abs() < 1e-12);
    }

    #[test]
    fn birth_death_guards() {
        assert!(birth_death_stationary(&b123(), 0).is_err());
        let flat = BetaParams::new_unchecked(1.0, 1.0, 2.0);
        assert!(birth_death_stationary(&flat, 10).is_err());
    }

    #[test]
    fn pmf_sums_to_one_for_rho_up_to_point_nine() {
        for rho in [0.1, 0.5, 0.9] {
            let b = BetaParams::new(rho, 1.0, 2.0).unwrap();
            let law = birth_death_stationary(&b, 400).unwrap();
            assert!((law.pmf.iter().sum::<f64>() - 1.0).abs() < 1e-12, "{rho}");
        }
    }

    #[test]
    fn truncated_two_columns_matches_birth_death() {
        let spec = ProcessSpec::new(2, BoundaryCondition::Zero, b123()).unwrap();
        let law = truncated_stationary(&spec, 40).unwrap();
        assert!(law.residual < 1e-8);
        let exact = birth_death_stationary(&b123(), 40).unwrap();
        let bd: BTreeMap<i64, f64> = exact.pmf.iter().enumerate().map(|(m, p)| (m as i64, *p)).collect();
        assert!(total_variation(&law.abs_marginal(1), &bd) < 1e-10);
    }

    #[test]
    fn lu_and_gauss_seidel_agree() {
        let spec = ProcessSpec::new(3, BoundaryCondition::Periodic, b123()).unwrap();
        let a = truncated_stationary_with(&spec, 6, SolveMethod::Lu).unwrap();
        let b = truncated_stationary_with(&spec, 6, SolveMethod::GaussSeidel).unwrap();
        assert!(a.residual < 1e-10 && b.residual < 1e-10);
        let d: f64 = a.probs.iter().zip(&b.probs).map(|(x, y)| (x - y).abs()).sum();
        assert!(d < 1e-9, "{d}");
        assert!(a.states.iter().all(|s| s.iter().sum::<i64>() == 0));
    }

    #[test]
    fn truncated_reversal_symmetry() {
        let spec = ProcessSpec::new(3, BoundaryCondition::Zero, b123()).unwrap();
        let law = truncated_stationary(&spec, 8).unwrap();
        let map: HashMap<&Vec<i64>, f64> = law.states.iter().zip(law.probs.iter().copied()).collect();
        for (s, p) in law.states.iter().zip(&law.probs) {
            let rev: Vec<i64> = s.iter().rev().map(|v| -v).collect();
            assert!((map[&rev] - p).abs() < 1e-12);
        }
    }

    #[test]
    fn state_budget_guard() {
        let spec = ProcessSpec::new(5, BoundaryCondition::Zero, b123()).unwrap();
        assert!(matches!(truncated_stationary(&spec, 20), Err(Error::StateBudget { .. })));
    }

    #[test]
    fn tail_fit_on_exact_geometric() {
        let mut values = Vec::new();
        for k in 0..12i64 {
            values.extend(std::iter::repeat_n(k, 1usize << (12 - k)));
        }
        let est = tail_from_samples(1, &values, 30).unwrap();
        assert!(est.counts.windows(2).all(|w| w[0] >= w[1]));
        assert!(est.r_squared > 0.99);
        assert!(est.slope < 0.0);
        assert!(matches!(tail_from_samples(1, &[0, 1, 0], 30), Err(Error::DegenerateFit(_))));
    }

    #[test]
    fn ols_exact_line() {
        let (b, a, r2) = ols(&[1.0, 2.0, 3.0], &[5.0, 3.0, 1.0]);
        assert!((b + 2.0).abs() < 1e-12 && (a - 7.0).abs() < 1e-12 && (r2 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn tails_reject_few_replicas() {
        let spec = ProcessSpec::new(2, BoundaryCondition::Zero, b123()).unwrap();
        assert!(estimate_tails(&spec, 10.0, 0, 1, &[1], 30).is_err());
    }

    #[test]
    fn single_column_speed() {
        let spec = ProcessSpec::new(1, BoundaryCondition::Zero, b123()).unwrap();
        let est = estimate_speed(&spec, 1, 200.0, 200, 3).unwrap();
        assert!(est.ci_low <= 1.0 && 1.0 <= est.ci_high, "{est:?}");
        assert!(estimate_speed(&spec, 1, 0.0, 10, 3).is_err());
    }

    #[test]
    fn martingale_alpha_zero() {
        let (a, b) = martingale_mean(2, 0.0, b123(), &[1.0, 2.0], 50, 4).unwrap();
        assert!(a.means.iter().chain(&b.means).all(|m| *m == 1.0));
        assert!(a.std_errors.iter().chain(&b.std_errors).all(|s| *s == 0.0));
        assert!(martingale_mean(2, -0.1, b123(), &[1.0], 50, 4).is_err());
    }

    #[test]
    fn ks_identical_groups() {
        let g: Vec<i64> = (0..500).map(|i| i % 7).collect();
        let cmp = ks_permutation_test(&[g.clone(), g], 200, 0.01, 1).unwrap();
        assert_eq!(cmp.statistic, 0.0);
        assert!(!cmp.rejected);
        assert_eq!(cmp.p_value, 1.0);
    }

    #[test]
    fn ks_detects_shift() {
        let a: Vec<i64> = (0..2000).map(|i| i % 10).collect();
        let b: Vec<i64> = (0..2000).map(|i| i % 10 + 2).collect();
        let cmp = ks_permutation_test(&[a, b], 200, 0.01, 1).unwrap();
        assert!(cmp.rejected && cmp.p_value < 0.01);
    }

    #[test]
    fn midpoint_guard() {
        let off = BetaParams::new(1.0, 2.5, 3.0).unwrap();
        assert!(matches!(
            midpoint_invariance(off, &[2, 4], &MidpointOptions::default()),
            Err(Error::NotMidpoint(_))
        ));
    }
}
