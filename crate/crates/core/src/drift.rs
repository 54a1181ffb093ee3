//! Foster-Lyapunov verification for kernels on `Y = Z^{n-1}`.
//!
//! The Lyapunov function is `f(y) = sum over edges of f_ij(y)^2`. This
//! module checks the four structural conditions on a kernel (support,
//! uniform lower bound `delta`, monotonicity along edges, and the margin
//! `M` at local maxima or, alternatively, local minima), builds the
//! constant schedule `C_1 < ... < C_p`, `k_1..k_p`, classifies states into
//! the cover `D_0..D_p`, and evaluates the multi-step drift either exactly
//! or by Monte Carlo.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::clocks::ClockSource;
use crate::error::{Error, Result};
use crate::kernels::{enumerate_patterns, window_states, Kernel, Move, Sign};
use crate::model::{edge_diff, grow_in_place, lyapunov_f, GraphSpec, YPoint};
use crate::sim::par_replicas;

/// Comparison slack for probabilities produced in floating point.
const PROB_TOL: f64 = 1e-12;

/// Largest `C_m` for which states of `D_m` are sampled; beyond this the
/// squared differences leave the exact integer range of the evaluator.
pub const MAX_SAMPLED_CONSTANT: u64 = 100_000_000;

/// Default cap on state expansions in [`exact_drift`].
pub const DEFAULT_EXPANSION_BUDGET: u64 = 10_000_000;

/// Which margin condition the schedule is built for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MarginVariant {
    /// Local maxima grow slower than their neighbors by at least `M`.
    Top,
    /// Local minima grow faster than their neighbors by at least `M`.
    Bottom,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConstantsSource {
    Schedule,
    User,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriftConstants {
    pub delta: f64,
    pub margin: f64,
    pub p: usize,
    /// `C_1 < C_2 < ... < C_p`; saturates at `u64::MAX`.
    pub c: Vec<u64>,
    /// Step counts `k_1 = 1, k_m = 1 + p C_{m-1}` (or `1 + p^2 C_{m-1}`
    /// for the bottom-margin variant); saturating.
    pub k: Vec<u64>,
    pub variant: MarginVariant,
    pub source: ConstantsSource,
    /// Some value overflowed `u64` and was clamped.
    pub saturated: bool,
}

impl DriftConstants {
    pub fn c_max(&self) -> u64 {
        *self.c.last().expect("p >= 1")
    }

    /// Constants chosen by hand for exploration. They are not certified.
    pub fn user(
        c: Vec<u64>,
        delta: f64,
        margin: f64,
        variant: MarginVariant,
    ) -> Result<Self> {
        check_unit(delta, "delta")?;
        check_unit(margin, "M")?;
        if c.is_empty() || c[0] == 0 || c.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidArgument(format!(
                "constants must be positive and strictly increasing, got {c:?}"
            )));
        }
        let p = c.len();
        let k = step_counts(&c, p, variant);
        Ok(Self {
            delta,
            margin,
            p,
            c,
            k,
            variant,
            source: ConstantsSource::User,
            saturated: false,
        })
    }
}

fn check_unit(v: f64, name: &str) -> Result<()> {
    if v > 0.0 && v < 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("{name} must lie in (0, 1), got {v}")))
    }
}

/// Ceiling that ignores floating noise just above an integer.
fn ceil_tol(x: f64) -> f64 {
    let r = x.round();
    if (x - r).abs() <= 1e-9 * r.abs().max(1.0) {
        r
    } else {
        x.ceil()
    }
}

fn to_u64_saturating(x: f64) -> (u64, bool) {
    if x >= u64::MAX as f64 || !x.is_finite() {
        (u64::MAX, true)
    } else {
        (x as u64, false)
    }
}

fn step_counts(c: &[u64], p: usize, variant: MarginVariant) -> Vec<u64> {
    let factor = match variant {
        MarginVariant::Top => p as u64,
        MarginVariant::Bottom => (p as u64).saturating_mul(p as u64),
    };
    std::iter::once(1)
        .chain(c.windows(2).map(|w| factor.saturating_mul(w[0]).saturating_add(1)))
        .collect()
}

/// Smallest integer schedule for the top-margin variant.
pub fn constants_schedule(p: usize, delta: f64, margin: f64) -> Result<DriftConstants> {
    constants_schedule_for(MarginVariant::Top, p, delta, margin)
}

/// Smallest integers with `C_1 >= (1+p)/(2M)` and, for `m >= 2`,
/// `C_m >= max(p C_{m-1}, (1 + p + p^2 C_{m-1}) / (M delta^{p C_{m-1}}))`.
/// The bottom-margin variant uses `p^3 C_{m-1}` in the numerator and the
/// exponent `p^2 C_{m-1}`.
pub fn constants_schedule_for(
    variant: MarginVariant,
    p: usize,
    delta: f64,
    margin: f64,
) -> Result<DriftConstants> {
    check_unit(delta, "delta")?;
    check_unit(margin, "M")?;
    if p == 0 {
        return Err(Error::InvalidArgument("edge count p must be >= 1".into()));
    }
    let pf = p as f64;
    let (numer_pow, exp_factor) = match variant {
        MarginVariant::Top => (2, pf),
        MarginVariant::Bottom => (3, pf * pf),
    };
    let mut saturated = false;
    let (c1, sat) = to_u64_saturating(ceil_tol((1.0 + pf) / (2.0 * margin)));
    saturated |= sat;
    let mut c = vec![c1.max(1)];
    for _ in 2..=p {
        let prev = *c.last().expect("nonempty");
        if prev == u64::MAX {
            c.push(u64::MAX);
            saturated = true;
            continue;
        }
        let prev_f = prev as f64;
        let numer = 1.0 + pf + pf.powi(numer_pow) * prev_f;
        // log-space keeps delta^{p C} from underflowing before the division
        let log_bound = numer.ln() - margin.ln() - exp_factor * prev_f * delta.ln();
        let (bound, sat) = if log_bound > (u64::MAX as f64).ln() {
            (u64::MAX, true)
        } else {
            to_u64_saturating(ceil_tol(log_bound.exp()))
        };
        saturated |= sat;
        let next = (p as u64)
            .saturating_mul(prev)
            .max(bound)
            .max(prev.saturating_add(1));
        c.push(next);
    }
    let k = step_counts(&c, p, variant);
    saturated |= k.contains(&u64::MAX);
    Ok(DriftConstants {
        delta,
        margin,
        p,
        c,
        k,
        variant,
        source: ConstantsSource::Schedule,
        saturated,
    })
}

/// Member `D_m` of the cover of `Y`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct PartitionClass(pub usize);

impl fmt::Display for PartitionClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "D{}", self.0)
    }
}

/// Every class containing `y`. `D_0`: all `|f_ij| < C_p`; `D_1`: all
/// `|f_ij| >= C_1`; `D_m`: some `|f_ij| >= C_m` and no `|f_ij|` in
/// `[C_{m-1}, C_m)`.
pub fn classify(y: &[i64], graph: &GraphSpec, consts: &DriftConstants) -> BTreeSet<PartitionClass> {
    let abs: Vec<u64> = graph
        .edges()
        .iter()
        .map(|&(i, j)| edge_diff(y, i, j).unsigned_abs())
        .collect();
    let c = &consts.c;
    let mut out = BTreeSet::new();
    if abs.iter().all(|a| *a < consts.c_max()) {
        out.insert(PartitionClass(0));
    }
    if abs.iter().all(|a| *a >= c[0]) {
        out.insert(PartitionClass(1));
    }
    for m in 2..=consts.p {
        let (lo, hi) = (c[m - 2], c[m - 1]);
        if abs.iter().any(|a| *a >= hi) && abs.iter().all(|a| *a < lo || *a >= hi) {
            out.insert(PartitionClass(m));
        }
    }
    out
}

/// Class that decides the step count `k(y)`: the first `D_m` with
/// `m >= 1` containing `y`, or `D_0` when there is none.
pub fn canonical_class(y: &[i64], graph: &GraphSpec, consts: &DriftConstants) -> Option<PartitionClass> {
    let classes = classify(y, graph, consts);
    classes
        .iter()
        .find(|c| c.0 >= 1)
        .or_else(|| classes.iter().next())
        .copied()
}

/// Steps used for states of class `m`: 1 on `D_0` and `D_1`, `k_m` otherwise.
pub fn steps_for(class: PartitionClass, consts: &DriftConstants) -> u64 {
    match class.0 {
        0 | 1 => 1,
        m => consts.k[m - 1],
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionVerdict {
    pub condition: String,
    pub passed: bool,
    pub witness: Option<YPoint>,
    pub detail: String,
}

impl ConditionVerdict {
    fn new(condition: &str) -> Self {
        Self {
            condition: condition.to_string(),
            passed: true,
            witness: None,
            detail: String::new(),
        }
    }

    fn fail(&mut self, y: &[i64], detail: String) {
        if self.passed {
            self.passed = false;
            self.witness = Some(y.to_vec());
            self.detail = detail;
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionsReport {
    /// All realizable sign patterns were covered (as opposed to a window).
    pub exact: bool,
    pub states_checked: usize,
    pub support: ConditionVerdict,
    pub lower_bound: ConditionVerdict,
    pub monotone: ConditionVerdict,
    pub top_margin: ConditionVerdict,
    pub bottom_margin: ConditionVerdict,
    pub passed: bool,
}

impl ConditionsReport {
    /// Margin variant that holds, preferring the top-margin form.
    pub fn margin_variant(&self) -> Option<MarginVariant> {
        if self.top_margin.passed {
            Some(MarginVariant::Top)
        } else if self.bottom_margin.passed {
            Some(MarginVariant::Bottom)
        } else {
            None
        }
    }

    fn verdicts(&self) -> [&ConditionVerdict; 5] {
        [
            &self.support,
            &self.lower_bound,
            &self.monotone,
            &self.top_margin,
            &self.bottom_margin,
        ]
    }
}

/// Box radius used when a kernel is not sign-pattern constant.
pub const DEFAULT_WINDOW_RADIUS: i64 = 6;

/// Checks the structural conditions. Sign-constant kernels are checked on
/// one witness per realizable sign pattern of the union of the kernel's
/// graph and `graph`, which is exhaustive; other kernels are scanned on
/// the box of radius [`DEFAULT_WINDOW_RADIUS`] and reported as partial.
pub fn check_conditions(
    kernel: &Kernel,
    graph: &GraphSpec,
    delta: f64,
    margin: f64,
) -> Result<ConditionsReport> {
    if kernel.is_sign_constant() {
        let union = kernel.graph().union(graph)?;
        let states: Vec<YPoint> = enumerate_patterns(&union)?
            .into_iter()
            .map(|p| p.witness)
            .collect();
        check_conditions_on(kernel, graph, delta, margin, states, true)
    } else {
        check_conditions_on(
            kernel,
            graph,
            delta,
            margin,
            window_states(kernel.n(), DEFAULT_WINDOW_RADIUS),
            false,
        )
    }
}

/// Checks the conditions on the given states.
pub fn check_conditions_on(
    kernel: &Kernel,
    graph: &GraphSpec,
    delta: f64,
    margin: f64,
    states: impl IntoIterator<Item = YPoint>,
    exact: bool,
) -> Result<ConditionsReport> {
    let n = kernel.n();
    if graph.n() != n {
        return Err(Error::InvalidArgument(format!(
            "graph has {} vertices, kernel has {n} columns",
            graph.n()
        )));
    }
    let mut support = ConditionVerdict::new("i");
    let mut lower = ConditionVerdict::new("ii");
    let mut mono = ConditionVerdict::new("iii");
    let mut top = ConditionVerdict::new("iv");
    let mut bottom = ConditionVerdict::new("iv'");
    let mut min_grow = f64::INFINITY;
    let mut checked = 0;
    for y in states {
        checked += 1;
        let moves = kernel.transition(&y);
        let mut row = vec![0.0; n + 1];
        for (mv, p) in &moves {
            match *mv {
                Move::Grow(i) if (1..=n).contains(&i) => row[i - 1] += p,
                Move::Stay => row[n] += p,
                Move::Grow(i) => {
                    return Err(Error::KernelSupport {
                        state: y.clone(),
                        detail: format!("move to column {i} outside 1..={n}"),
                    })
                }
            }
            if *p < 0.0 {
                support.fail(&y, format!("negative probability {p} for {mv}"));
            }
        }
        let total: f64 = row.iter().sum();
        if (total - 1.0).abs() > PROB_TOL {
            support.fail(&y, format!("row sums to {total}"));
        }
        for i in 1..=n {
            let q = row[i - 1];
            min_grow = min_grow.min(q);
            if q < delta - PROB_TOL {
                lower.fail(&y, format!("Q(y, y+e_{i}) = {q} < delta = {delta}"));
            }
        }
        for &(a, b) in graph.edges() {
            let d = edge_diff(&y, a, b);
            let (hi, lo) = match d.signum() {
                1 => (a, b),
                -1 => (b, a),
                _ => continue,
            };
            if row[hi - 1] > row[lo - 1] + PROB_TOL {
                mono.fail(
                    &y,
                    format!(
                        "f_{hi}{lo} > 0 but Q(y, y+e_{hi}) = {} > Q(y, y+e_{lo}) = {}",
                        row[hi - 1],
                        row[lo - 1]
                    ),
                );
            }
        }
        for i in 1..=n {
            let nbrs = graph.neighbors(i);
            if nbrs.iter().all(|&l| edge_diff(&y, i, l) > 0) {
                for &l in &nbrs {
                    if row[i - 1] > row[l - 1] - margin + PROB_TOL {
                        top.fail(
                            &y,
                            format!(
                                "column {i} above all neighbors but Q_{i} = {} > Q_{l} - M = {}",
                                row[i - 1],
                                row[l - 1] - margin
                            ),
                        );
                    }
                }
            }
            if nbrs.iter().all(|&l| edge_diff(&y, i, l) < 0) {
                for &l in &nbrs {
                    if row[i - 1] < row[l - 1] + margin - PROB_TOL {
                        bottom.fail(
                            &y,
                            format!(
                                "column {i} below all neighbors but Q_{i} = {} < Q_{l} + M = {}",
                                row[i - 1],
                                row[l - 1] + margin
                            ),
                        );
                    }
                }
            }
        }
    }
    if lower.passed && min_grow.is_finite() {
        lower.detail = format!("min growth probability {min_grow} >= delta = {delta}");
    }
    let passed = support.passed && lower.passed && mono.passed && (top.passed || bottom.passed);
    Ok(ConditionsReport {
        exact,
        states_checked: checked,
        support,
        lower_bound: lower,
        monotone: mono,
        top_margin: top,
        bottom_margin: bottom,
        passed,
    })
}

/// Exact one-step change `E[f_ij^2(next)] - f_ij^2(y)` for every edge.
pub fn edge_square_drift(kernel: &Kernel, graph: &GraphSpec, y: &[i64]) -> Vec<f64> {
    let moves = kernel.transition(y);
    graph
        .edges()
        .iter()
        .map(|&(i, j)| {
            let before = edge_diff(y, i, j);
            moves
                .iter()
                .map(|&(mv, p)| {
                    let after = match mv {
                        Move::Grow(c) if c == i => before + 1,
                        Move::Grow(c) if c == j => before - 1,
                        _ => before,
                    };
                    p * (after * after - before * before) as f64
                })
                .sum()
        })
        .collect()
}

/// Per edge, probabilities that `|f_ij|` grows and shrinks in one step.
pub fn edge_growth_balance(kernel: &Kernel, graph: &GraphSpec, y: &[i64]) -> Vec<(f64, f64)> {
    let row = kernel.row(y);
    graph
        .edges()
        .iter()
        .map(|&(i, j)| match Sign::of(edge_diff(y, i, j)) {
            Sign::Pos => (row[i - 1], row[j - 1]),
            Sign::Neg => (row[j - 1], row[i - 1]),
            Sign::Zero => (row[i - 1] + row[j - 1], 0.0),
        })
        .collect()
}

/// Exact drift with a bound on accumulated rounding error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExactDrift {
    pub value: f64,
    pub error_bound: f64,
    /// Distinct states reached after the last step.
    pub support: usize,
    pub expansions: u64,
}

/// Neumaier-compensated running sum.
#[derive(Debug, Default, Clone, Copy)]
struct CompensatedSum {
    sum: f64,
    comp: f64,
}

impl CompensatedSum {
    fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.comp += (self.sum - t) + x;
        } else {
            self.comp += (x - t) + self.sum;
        }
        self.sum = t;
    }

    fn value(&self) -> f64 {
        self.sum + self.comp
    }
}

/// `E[f(zeta_k) - f(y)]` by propagating the exact distribution of the
/// chain for `k` steps. Paths that end in the same state are merged, so
/// the cost is the number of reachable states rather than `(n+1)^k`;
/// `budget` caps the total number of (state, move) expansions.
pub fn exact_drift(
    kernel: &Kernel,
    y: &[i64],
    k: u64,
    graph: &GraphSpec,
    budget: u64,
) -> Result<ExactDrift> {
    if k == 0 {
        return Err(Error::InvalidArgument("drift needs k >= 1 steps".into()));
    }
    let mut frontier: BTreeMap<YPoint, f64> = BTreeMap::from([(y.to_vec(), 1.0)]);
    let mut expansions = 0u64;
    for _ in 0..k {
        let mut next: BTreeMap<YPoint, CompensatedSum> = BTreeMap::new();
        for (state, p) in &frontier {
            let moves = kernel.transition(state);
            expansions += moves.len() as u64;
            if expansions > budget {
                return Err(Error::BudgetExceeded { budget });
            }
            for (mv, q) in moves {
                if q == 0.0 {
                    continue;
                }
                let mut z = state.clone();
                if let Move::Grow(i) = mv {
                    grow_in_place(&mut z, i);
                }
                next.entry(z).or_default().add(p * q);
            }
        }
        frontier = next.into_iter().map(|(s, c)| (s, c.value())).collect();
    }
    let f0 = lyapunov_f(y, graph);
    let mut acc = CompensatedSum::default();
    let mut magnitude = 0.0;
    for (state, p) in &frontier {
        let term = p * (lyapunov_f(state, graph) - f0) as f64;
        magnitude += term.abs();
        acc.add(term);
    }
    let value = acc.value();
    let error_bound = (3 * k + 4) as f64 * f64::EPSILON * magnitude + f64::EPSILON * value.abs();
    Ok(ExactDrift {
        value,
        error_bound,
        support: frontier.len(),
        expansions,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MonteCarloDrift {
    pub estimate: f64,
    pub std_error: f64,
    pub replicas: u64,
}

/// Sample mean of `f(zeta_k) - f(y)` over independent paths. Path `r`
/// draws its moves from the generator keyed by `(seed, r)`.
pub fn monte_carlo_drift(
    kernel: &Kernel,
    y: &[i64],
    k: u64,
    replicas: u64,
    seed: u64,
    graph: &GraphSpec,
) -> Result<MonteCarloDrift> {
    if replicas < 2 {
        return Err(Error::InvalidArgument("Monte Carlo drift needs >= 2 replicas".into()));
    }
    let f0 = lyapunov_f(y, graph);
    let source = ClockSource::new(seed);
    let samples = par_replicas(replicas, |r| {
        let mut rng = source.replica(r).keyed_rng(0);
        let mut z = y.to_vec();
        for _ in 0..k {
            if let Move::Grow(i) = kernel.sample_move(&z, rng.random::<f64>()) {
                grow_in_place(&mut z, i);
            }
        }
        (lyapunov_f(&z, graph) - f0) as f64
    });
    let m = replicas as f64;
    let mean = samples.iter().sum::<f64>() / m;
    let var = samples.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (m - 1.0);
    Ok(MonteCarloDrift {
        estimate: mean,
        std_error: (var / m).sqrt(),
        replicas,
    })
}

/// Bound on `D_1` drift valid for every state, not just samples.
///
/// On a sign pattern the kernel row `q` is fixed and the one-step drift is
/// `sum over edges (a, b) of 2 f_ab (q_a - q_b) + q_a + q_b`, affine in the
/// edge values. On `D_1` each `|f_ab| >= C_1`, so the drift is at most
/// `-1` as soon as every coefficient of `|f_ab|` is nonpositive and the
/// value at `|f_ab| = C_1` is at most `-1`. For trees every corner is
/// realizable and the test is also necessary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AffineCertificate {
    pub passed: bool,
    pub tight: bool,
    pub patterns: usize,
    /// Largest corner value over all patterns.
    pub worst_corner: f64,
    pub witness: Option<YPoint>,
}

pub fn certify_d1(kernel: &Kernel, graph: &GraphSpec, c1: u64) -> Result<Option<AffineCertificate>> {
    if !kernel.is_sign_constant() || kernel.graph() != graph {
        return Ok(None);
    }
    let c1 = c1 as f64;
    let mut cert = AffineCertificate {
        passed: true,
        tight: graph.is_tree(),
        patterns: 0,
        worst_corner: f64::NEG_INFINITY,
        witness: None,
    };
    for pw in enumerate_patterns(graph)? {
        if pw.pattern.signs().contains(&Sign::Zero) {
            continue;
        }
        cert.patterns += 1;
        let q = kernel.row(&pw.witness);
        let mut corner = 0.0;
        let mut ok = true;
        for (&(a, b), s) in graph.edges().iter().zip(pw.pattern.signs()) {
            let sigma = if *s == Sign::Pos { 1.0 } else { -1.0 };
            let coeff = 2.0 * sigma * (q[a - 1] - q[b - 1]);
            ok &= coeff <= PROB_TOL;
            corner += coeff * c1 + q[a - 1] + q[b - 1];
        }
        ok &= corner <= -1.0 + PROB_TOL;
        if corner > cert.worst_corner {
            cert.worst_corner = corner;
        }
        if !ok && cert.passed {
            cert.passed = false;
            cert.witness = Some(pw.witness.clone());
        }
    }
    Ok(Some(cert))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DriftMethod {
    Exact,
    MonteCarlo,
    Mixed,
    NotEvaluated,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassSummary {
    pub label: String,
    pub k: u64,
    pub n_states: usize,
    pub min_drift: Option<f64>,
    pub max_drift: Option<f64>,
    pub certified: bool,
    pub method: DriftMethod,
    /// `D_0` is the finite exceptional set and carries no requirement.
    pub required: bool,
    pub note: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Witness {
    pub kind: String,
    pub state: YPoint,
    pub value: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Certified,
    NonCertified,
    Fail,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriftReport {
    pub kernel: String,
    pub conditions: ConditionsReport,
    pub constants: Option<DriftConstants>,
    pub d1_certificate: Option<AffineCertificate>,
    pub classes: Vec<ClassSummary>,
    pub witnesses: Vec<Witness>,
    pub verdict: Verdict,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VerifyOptions {
    pub budget: u64,
    pub mc_replicas: u64,
    pub seed: u64,
    /// Largest step count attempted by Monte Carlo.
    pub max_mc_steps: u64,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        Self {
            budget: DEFAULT_EXPANSION_BUDGET,
            mc_replicas: 4000,
            seed: 0,
            max_mc_steps: 100_000,
        }
    }
}

/// Checks the conditions, then evaluates the `k(y)`-step drift on the
/// sampled states class by class.
///
/// With `consts = None` the schedule is computed from `delta` and `M` and
/// a class is certified when every sampled state has exact drift at most
/// `-1` (for `D_1`, when the affine certificate holds for all states).
/// User constants always yield [`Verdict::NonCertified`].
pub fn verify_foster(
    kernel: &Kernel,
    graph: &GraphSpec,
    delta: f64,
    margin: f64,
    consts: Option<DriftConstants>,
    samples: &[YPoint],
    opts: &VerifyOptions,
) -> Result<DriftReport> {
    let conditions = check_conditions(kernel, graph, delta, margin)?;
    if !conditions.passed {
        let margin_failed = conditions.margin_variant().is_none();
        let witnesses = conditions
            .verdicts()
            .into_iter()
            .filter(|v| !v.passed)
            .filter(|v| margin_failed || !v.condition.starts_with("iv"))
            .filter_map(|v| {
                v.witness.clone().map(|state| Witness {
                    kind: format!("condition ({})", v.condition),
                    state,
                    value: None,
                })
            })
            .collect();
        return Ok(DriftReport {
            kernel: kernel.name().to_string(),
            conditions,
            constants: consts,
            d1_certificate: None,
            classes: Vec::new(),
            witnesses,
            verdict: Verdict::Fail,
        });
    }
    let variant = conditions.margin_variant().expect("conditions passed");
    let consts = match consts {
        Some(c) => {
            if c.p != graph.p() {
                return Err(Error::InvalidArgument(format!(
                    "expected {} constants, got {}",
                    graph.p(),
                    c.p
                )));
            }
            c
        }
        None => constants_schedule_for(variant, graph.p(), delta, margin)?,
    };
    let from_schedule = consts.source == ConstantsSource::Schedule;
    let certified_constants = from_schedule && !consts.saturated;

    let d1_certificate = if variant == MarginVariant::Top {
        certify_d1(kernel, graph, consts.c[0])?
    } else {
        None
    };

    let mut per_class: Vec<Vec<(f64, f64, bool)>> = vec![Vec::new(); consts.p + 1];
    let mut witnesses = Vec::new();
    for y in samples {
        let Some(class) = canonical_class(y, graph, &consts) else {
            continue;
        };
        if class.0 >= 2 && consts.c[class.0 - 1] > MAX_SAMPLED_CONSTANT {
            continue;
        }
        let k = steps_for(class, &consts);
        let (value, upper, exact) = match exact_drift(kernel, y, k, graph, opts.budget) {
            Ok(d) => (d.value, d.value + d.error_bound, true),
            Err(Error::BudgetExceeded { .. }) if k <= opts.max_mc_steps => {
                let mc = monte_carlo_drift(kernel, y, k, opts.mc_replicas, opts.seed, graph)?;
                (mc.estimate, mc.estimate + 3.0 * mc.std_error, false)
            }
            Err(Error::BudgetExceeded { .. }) => continue,
            Err(e) => return Err(e),
        };
        if class.0 >= 1 && upper > -1.0 {
            witnesses.push(Witness {
                kind: format!("drift above -1 in {class}"),
                state: y.clone(),
                value: Some(value),
            });
        }
        per_class[class.0].push((value, upper, exact));
    }

    let mut classes = Vec::with_capacity(consts.p + 1);
    let mut all_certified = certified_constants;
    for (m, rows) in per_class.iter().enumerate() {
        let k = steps_for(PartitionClass(m), &consts);
        let min = rows.iter().map(|r| r.0).reduce(f64::min);
        let max = rows.iter().map(|r| r.0).reduce(f64::max);
        let exact_all = rows.iter().all(|r| r.2);
        let method = if rows.is_empty() {
            DriftMethod::NotEvaluated
        } else if exact_all {
            DriftMethod::Exact
        } else if rows.iter().any(|r| r.2) {
            DriftMethod::Mixed
        } else {
            DriftMethod::MonteCarlo
        };
        let samples_ok = rows.iter().all(|r| r.1 <= -1.0);
        let mut note = String::new();
        let certified = match m {
            0 => false,
            1 => match &d1_certificate {
                Some(cert) => {
                    note = format!("affine bound over {} sign patterns", cert.patterns);
                    from_schedule && cert.passed && samples_ok
                }
                None => from_schedule && !rows.is_empty() && exact_all && samples_ok,
            },
            _ => {
                if consts.c[m - 1] > MAX_SAMPLED_CONSTANT {
                    note = format!("C_{m} = {} is beyond the sampled range", consts.c[m - 1]);
                }
                from_schedule && consts.c[m - 1] != u64::MAX && !rows.is_empty() && exact_all && samples_ok
            }
        };
        if m >= 1 {
            all_certified &= certified;
        }
        classes.push(ClassSummary {
            label: PartitionClass(m).to_string(),
            k,
            n_states: rows.len(),
            min_drift: min,
            max_drift: max,
            certified,
            method,
            required: m >= 1,
            note,
        });
    }

    let verdict = if all_certified {
        Verdict::Certified
    } else if from_schedule && !witnesses.is_empty() {
        Verdict::Fail
    } else {
        Verdict::NonCertified
    };
    Ok(DriftReport {
        kernel: kernel.name().to_string(),
        conditions,
        constants: Some(consts),
        d1_certificate,
        classes,
        witnesses,
        verdict,
    })
}

/// Random states spread over the classes of `consts`.
///
/// On trees the edge differences are drawn directly (every assignment is
/// realizable); on other graphs column heights are drawn at the scale of
/// each class. States are kept only for classes whose constants are
/// within [`MAX_SAMPLED_CONSTANT`].
pub fn sample_states(
    graph: &GraphSpec,
    consts: &DriftConstants,
    per_class: usize,
    seed: u64,
) -> Vec<YPoint> {
    let mut rng = ClockSource::new(seed).keyed_rng(u64::MAX);
    let n = graph.n();
    let c = &consts.c;
    let limit = MAX_SAMPLED_CONSTANT;
    let span = c[0].clamp(4, limit);
    let mut out = Vec::new();
    for m in 0..=consts.p {
        if m >= 2 && c[m - 1] > limit {
            continue;
        }
        for _ in 0..per_class {
            // magnitude drawn for one edge (tree) or one column (general)
            let magnitude = |rng: &mut rand_chacha::ChaCha8Rng| -> u64 {
                match m {
                    0 => rng.random_range(0..c[consts.p - 1].min(limit)),
                    1 => c[0] + rng.random_range(0..span),
                    _ => {
                        if rng.random_bool(0.5) {
                            rng.random_range(0..c[m - 2])
                        } else {
                            c[m - 1] + rng.random_range(0..span)
                        }
                    }
                }
            };
            let heights = if graph.is_tree() {
                let mut h = vec![None; n + 1];
                h[n] = Some(0i64);
                let mut forced = m >= 2;
                let mut stack = vec![n];
                while let Some(v) = stack.pop() {
                    for w in graph.neighbors(v) {
                        if h[w].is_none() {
                            let mut mag = magnitude(&mut rng) as i64;
                            if forced {
                                mag = (c[m - 1] + rng.random_range(0..span)) as i64;
                                forced = false;
                            }
                            let sign = if rng.random_bool(0.5) { 1 } else { -1 };
                            h[w] = Some(h[v].expect("visited") + sign * mag);
                            stack.push(w);
                        }
                    }
                }
                h[1..].iter().map(|v| v.expect("connected")).collect::<Vec<i64>>()
            } else {
                (0..n).map(|_| magnitude(&mut rng) as i64).collect()
            };
            let base = heights[n - 1];
            out.push(heights[..n - 1].iter().map(|v| v - base).collect());
        }
    }
    out
}
