//! Growth-model primitives: the three-level rate function, boundary
//! handling, height differences, and the coordinate algebra on
//! `Y = Z^{n-1}` used by the drift criterion.
//!
//! Columns and graph vertices are 1-based throughout, matching the way
//! sites are addressed on the command line and in exported files.

use std::collections::VecDeque;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Growth rate of one column, in events per unit time.
pub type Rate = f64;

/// A point of `Y = Z^{n-1}`: coordinate `i` is the height of column `i`
/// minus the height of column `n`.
pub type YPoint = Vec<i64>;

/// The rate triple `beta0 < beta1 < beta2`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BetaParams {
    beta0: Rate,
    beta1: Rate,
    beta2: Rate,
}

impl BetaParams {
    pub fn new(beta0: Rate, beta1: Rate, beta2: Rate) -> Result<Self> {
        let ok = beta0.is_finite()
            && beta1.is_finite()
            && beta2.is_finite()
            && 0.0 < beta0
            && beta0 < beta1
            && beta1 < beta2;
        if !ok {
            return Err(Error::InvalidBetas(beta0, beta1, beta2));
        }
        Ok(Self {
            beta0,
            beta1,
            beta2,
        })
    }

    /// Builds a triple without the ordering check. Only positivity is
    /// required so that event streams stay well defined; used to construct
    /// deliberately broken kernels and controls.
    pub fn new_unchecked(beta0: Rate, beta1: Rate, beta2: Rate) -> Self {
        Self {
            beta0,
            beta1,
            beta2,
        }
    }

    pub fn beta0(&self) -> Rate {
        self.beta0
    }

    pub fn beta1(&self) -> Rate {
        self.beta1
    }

    pub fn beta2(&self) -> Rate {
        self.beta2
    }

    /// Whether the triple satisfies `0 < beta0 < beta1 < beta2`.
    pub fn is_ordered(&self) -> bool {
        Self::new(self.beta0, self.beta1, self.beta2).is_ok()
    }

    /// Largest rate of the three. Event streams are generated at this
    /// intensity and thinned.
    pub fn max_rate(&self) -> Rate {
        self.beta0.max(self.beta1).max(self.beta2)
    }

    pub fn rate_of(&self, level: RateLevel) -> Rate {
        match level {
            RateLevel::Low => self.beta0,
            RateLevel::Mid => self.beta1,
            RateLevel::High => self.beta2,
        }
    }

    /// Signed distance `beta1 - (beta0 + beta2) / 2` from the midpoint case.
    pub fn midpoint_offset(&self) -> f64 {
        self.beta1 - 0.5 * (self.beta0 + self.beta2)
    }
}

impl FromStr for BetaParams {
    type Err = Error;

    /// Parses `"b0,b1,b2"`.
    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<f64> = s
            .split(',')
            .map(|p| p.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::InvalidArgument(format!("betas `{s}`: {e}")))?;
        match parts.as_slice() {
            [a, b, c] => Self::new(*a, *b, *c),
            _ => Err(Error::InvalidArgument(format!(
                "betas `{s}`: expected three comma-separated values"
            ))),
        }
    }
}

/// Which branch of the rate function applies to a column.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum RateLevel {
    /// Column at least as high as both neighbors: `beta0`.
    Low,
    /// Column between its neighbors: `beta1`.
    Mid,
    /// Column strictly below both neighbors: `beta2`.
    High,
}

impl RateLevel {
    pub const ALL: [RateLevel; 3] = [RateLevel::Low, RateLevel::Mid, RateLevel::High];

    pub fn index(self) -> usize {
        self as usize
    }
}

/// Branch of `r(a, b, c)` for a column of height `b` between `a` and `c`.
pub fn rate_level(a: i64, b: i64, c: i64) -> RateLevel {
    if b < a.min(c) {
        RateLevel::High
    } else if b < a.max(c) {
        RateLevel::Mid
    } else {
        RateLevel::Low
    }
}

/// Branch of `r~(u, v)` for neighbor differences `u = a - b`, `v = c - b`.
pub fn rate_level_tilde(u: i64, v: i64) -> RateLevel {
    if u.min(v) > 0 {
        RateLevel::High
    } else if u.max(v) > 0 {
        RateLevel::Mid
    } else {
        RateLevel::Low
    }
}

pub fn rate_r(a: i64, b: i64, c: i64, betas: &BetaParams) -> Rate {
    betas.rate_of(rate_level(a, b, c))
}

pub fn rate_tilde(u: i64, v: i64, betas: &BetaParams) -> Rate {
    betas.rate_of(rate_level_tilde(u, v))
}

/// How the virtual neighbors of the first and last columns are resolved.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BoundaryCondition {
    /// `X_0 = X_{n+1} = 0`.
    Zero,
    /// `X_0 = X_n`, `X_{n+1} = X_1`.
    Periodic,
}

impl fmt::Display for BoundaryCondition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BoundaryCondition::Zero => f.write_str("zero"),
            BoundaryCondition::Periodic => f.write_str("periodic"),
        }
    }
}

impl FromStr for BoundaryCondition {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "zero" => Ok(Self::Zero),
            "periodic" => Ok(Self::Periodic),
            other => Err(Error::InvalidArgument(format!(
                "unknown boundary condition `{other}`"
            ))),
        }
    }
}

/// Column heights `X_1..X_n`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct HeightState {
    heights: Vec<i64>,
}

impl HeightState {
    pub fn new(heights: Vec<i64>) -> Result<Self> {
        if heights.is_empty() {
            return Err(Error::EmptyProcess);
        }
        if let Some(h) = heights.iter().find(|h| **h < 0) {
            return Err(Error::InvalidArgument(format!(
                "heights must be nonnegative, got {h}"
            )));
        }
        Ok(Self { heights })
    }

    pub fn zeros(n: usize) -> Result<Self> {
        Self::new(vec![0; n])
    }

    pub fn n(&self) -> usize {
        self.heights.len()
    }

    pub fn heights(&self) -> &[i64] {
        &self.heights
    }

    /// Height of column `j` (1-based).
    pub fn get(&self, j: usize) -> Result<i64> {
        check_index(j, self.n())?;
        Ok(self.heights[j - 1])
    }

    /// Heights of the virtual neighbors `(X_{j-1}, X_{j+1})` of column `j`.
    pub fn neighbors(&self, j: usize, bc: BoundaryCondition) -> Result<(i64, i64)> {
        check_index(j, self.n())?;
        let n = self.n();
        let h = &self.heights;
        Ok(match bc {
            BoundaryCondition::Zero => {
                let left = if j == 1 { 0 } else { h[j - 2] };
                let right = if j == n { 0 } else { h[j] };
                (left, right)
            }
            BoundaryCondition::Periodic => {
                let left = if j == 1 { h[n - 1] } else { h[j - 2] };
                let right = if j == n { h[0] } else { h[j] };
                (left, right)
            }
        })
    }

    /// `Delta_i = X_i - X_{i+1}`; `n - 1` entries for zero BC and `n` for
    /// periodic BC (with `X_{n+1} = X_1`).
    pub fn deltas(&self, bc: BoundaryCondition) -> DeltaState {
        let h = &self.heights;
        let mut deltas: Vec<i64> = h.windows(2).map(|w| w[0] - w[1]).collect();
        if bc == BoundaryCondition::Periodic {
            deltas.push(h[h.len() - 1] - h[0]);
        }
        DeltaState { deltas }
    }

    /// The `Y`-coordinates `(X_1 - X_n, ..., X_{n-1} - X_n)`.
    pub fn to_y(&self) -> YPoint {
        let last = self.heights[self.n() - 1];
        self.heights[..self.n() - 1].iter().map(|h| h - last).collect()
    }
}

/// Height differences `Delta_i = X_i - X_{i+1}`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct DeltaState {
    deltas: Vec<i64>,
}

impl DeltaState {
    pub fn new(deltas: Vec<i64>) -> Self {
        Self { deltas }
    }

    pub fn deltas(&self) -> &[i64] {
        &self.deltas
    }

    pub fn len(&self) -> usize {
        self.deltas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.deltas.is_empty()
    }

    /// `D_j = max(Delta_1, ..., Delta_j)`.
    pub fn running_max(&self, j: usize) -> Result<i64> {
        check_index(j, self.len())?;
        Ok(*self.deltas[..j].iter().max().expect("j >= 1"))
    }

    pub fn sum(&self) -> i64 {
        self.deltas.iter().sum()
    }
}

/// Rate of column `j` (1-based) under the given boundary condition.
pub fn site_rate(
    state: &HeightState,
    j: usize,
    bc: BoundaryCondition,
    betas: &BetaParams,
) -> Result<Rate> {
    let (left, right) = state.neighbors(j, bc)?;
    Ok(rate_r(left, state.heights[j - 1], right, betas))
}

fn check_index(j: usize, len: usize) -> Result<()> {
    if j == 0 || j > len {
        Err(Error::IndexOutOfRange { index: j, len })
    } else {
        Ok(())
    }
}

/// A connected simple graph on vertices `1..=n`. Edges are stored as
/// `(i, j)` with `i < j`, sorted, which fixes the iteration order used by
/// every report.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GraphSpec {
    n: usize,
    edges: Vec<(usize, usize)>,
}

impl GraphSpec {
    pub fn new(n: usize, edges: impl IntoIterator<Item = (usize, usize)>) -> Result<Self> {
        if n == 0 {
            return Err(Error::InvalidGraph("graph needs at least one vertex".into()));
        }
        let mut canon = Vec::new();
        for (a, b) in edges {
            if a == b {
                return Err(Error::InvalidGraph(format!("self-loop at vertex {a}")));
            }
            if a == 0 || b == 0 || a > n || b > n {
                return Err(Error::InvalidGraph(format!(
                    "edge {{{a},{b}}} outside 1..={n}"
                )));
            }
            canon.push((a.min(b), a.max(b)));
        }
        canon.sort_unstable();
        canon.dedup();
        let graph = Self { n, edges: canon };
        if !graph.is_connected() {
            return Err(Error::InvalidGraph("graph is not connected".into()));
        }
        Ok(graph)
    }

    /// Path `1 - 2 - ... - n`.
    pub fn path(n: usize) -> Result<Self> {
        Self::new(n, (1..n).map(|i| (i, i + 1)))
    }

    /// Path plus the edge `{1, n}`.
    pub fn cycle(n: usize) -> Result<Self> {
        Self::new(n, (1..n).map(|i| (i, i + 1)).chain(std::iter::once((1, n))))
    }

    pub fn complete(n: usize) -> Result<Self> {
        Self::new(
            n,
            (1..=n).flat_map(|i| ((i + 1)..=n).map(move |j| (i, j))),
        )
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    /// Number of edges `p`.
    pub fn p(&self) -> usize {
        self.edges.len()
    }

    /// Neighbors of vertex `i`, ascending.
    pub fn neighbors(&self, i: usize) -> Vec<usize> {
        let mut out: Vec<usize> = self
            .edges
            .iter()
            .filter_map(|&(a, b)| {
                if a == i {
                    Some(b)
                } else if b == i {
                    Some(a)
                } else {
                    None
                }
            })
            .collect();
        out.sort_unstable();
        out
    }

    pub fn has_edge(&self, i: usize, j: usize) -> bool {
        self.edges.binary_search(&(i.min(j), i.max(j))).is_ok()
    }

    /// A graph with `n - 1` edges, i.e. a spanning tree of itself.
    pub fn is_tree(&self) -> bool {
        self.edges.len() + 1 == self.n
    }

    /// Union of the edge sets of two graphs on the same vertex set.
    pub fn union(&self, other: &GraphSpec) -> Result<GraphSpec> {
        if self.n != other.n {
            return Err(Error::InvalidGraph(format!(
                "cannot merge graphs on {} and {} vertices",
                self.n, other.n
            )));
        }
        Self::new(
            self.n,
            self.edges.iter().chain(other.edges.iter()).copied(),
        )
    }

    fn is_connected(&self) -> bool {
        let mut seen = vec![false; self.n + 1];
        let mut queue = VecDeque::from([1usize]);
        seen[1] = true;
        while let Some(v) = queue.pop_front() {
            for w in self.neighbors(v) {
                if !seen[w] {
                    seen[w] = true;
                    queue.push_back(w);
                }
            }
        }
        seen[1..].iter().all(|s| *s)
    }
}

impl FromStr for GraphSpec {
    type Err = Error;

    /// Accepts `path:N`, `cycle:N`, `complete:N` or `N:1-2,2-3,...`.
    fn from_str(s: &str) -> Result<Self> {
        let bad = |why: &str| Error::InvalidArgument(format!("graph `{s}`: {why}"));
        let (head, tail) = s.split_once(':').ok_or_else(|| bad("missing `:`"))?;
        let parse_n = |t: &str| t.trim().parse::<usize>().map_err(|_| bad("bad vertex count"));
        match head.trim() {
            "path" => Self::path(parse_n(tail)?),
            "cycle" => Self::cycle(parse_n(tail)?),
            "complete" => Self::complete(parse_n(tail)?),
            count => {
                let n = parse_n(count)?;
                let mut edges = Vec::new();
                for pair in tail.split(',').filter(|p| !p.trim().is_empty()) {
                    let (a, b) = pair.split_once('-').ok_or_else(|| bad("edge needs `-`"))?;
                    edges.push((parse_n(a)?, parse_n(b)?));
                }
                Self::new(n, edges)
            }
        }
    }
}

/// Signed height difference between columns `i` and `j` encoded by `y`.
/// Column `n` has implicit coordinate 0.
pub fn f_ij(y: &[i64], i: usize, j: usize) -> Result<i64> {
    let n = y.len() + 1;
    check_index(i, n)?;
    check_index(j, n)?;
    if i == j {
        return Err(Error::SameVertex(i));
    }
    Ok(column(y, i) - column(y, j))
}

/// Unchecked `f_ij` for internal loops over validated edges.
#[inline]
pub(crate) fn edge_diff(y: &[i64], i: usize, j: usize) -> i64 {
    column(y, i) - column(y, j)
}

#[inline]
fn column(y: &[i64], i: usize) -> i64 {
    if i <= y.len() {
        y[i - 1]
    } else {
        0
    }
}

/// The change `e_i` of `y` when column `i` grows by one.
pub fn growth_vector(i: usize, n: usize) -> Result<YPoint> {
    check_index(i, n)?;
    if i == n {
        Ok(vec![-1; n - 1])
    } else {
        let mut e = vec![0; n - 1];
        e[i - 1] = 1;
        Ok(e)
    }
}

/// `y + e_i` computed in place.
#[inline]
pub(crate) fn grow_in_place(y: &mut [i64], i: usize) {
    if i <= y.len() {
        y[i - 1] += 1;
    } else {
        y.iter_mut().for_each(|c| *c -= 1);
    }
}

/// Lyapunov function `sum over edges of f_ij(y)^2`.
pub fn lyapunov_f(y: &[i64], g: &GraphSpec) -> i64 {
    g.edges()
        .iter()
        .map(|&(i, j)| {
            let d = edge_diff(y, i, j);
            d * d
        })
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn b123() -> BetaParams {
        BetaParams::new(1.0, 2.0, 3.0).unwrap()
    }

    #[test]
    fn rate_r_branches() {
        let b = b123();
        assert_eq!(rate_r(5, 2, 4, &b), 3.0);
        assert_eq!(rate_r(0, 0, 0, &b), 1.0);
        assert_eq!(rate_r(5, 4, 2, &b), 2.0);
        assert_eq!(rate_r(2, 5, 4, &b), 1.0);
    }

    #[test]
    fn rate_tilde_branches() {
        let b = b123();
        assert_eq!(rate_tilde(3, 2, &b), 3.0);
        assert_eq!(rate_tilde(0, 0, &b), 1.0);
        assert_eq!(rate_tilde(-1, 4, &b), 2.0);
    }

    #[test]
    fn rate_r_symmetric_and_three_valued_exhaustive() {
        let b = b123();
        for a in 0..=10 {
            for m in 0..=10 {
                for c in 0..=10 {
                    let r = rate_r(a, m, c, &b);
                    assert_eq!(r, rate_r(c, m, a, &b));
                    assert!([1.0, 2.0, 3.0].contains(&r));
                    assert_eq!(r, rate_tilde(a - m, c - m, &b));
                }
            }
        }
    }

    #[test]
    fn betas_validation() {
        assert!(BetaParams::new(1.0, 1.0, 2.0).is_err());
        assert!(BetaParams::new(0.0, 1.0, 2.0).is_err());
        assert!(BetaParams::new(2.0, 1.0, 3.0).is_err());
        assert!("1,2,3".parse::<BetaParams>().is_ok());
        assert!("1,2".parse::<BetaParams>().is_err());
        assert!(BetaParams::new_unchecked(2.0, 1.0, 3.0).beta0() > 1.0);
    }

    #[test]
    fn site_rate_examples() {
        let b = b123();
        let one = HeightState::new(vec![7]).unwrap();
        assert_eq!(site_rate(&one, 1, BoundaryCondition::Zero, &b).unwrap(), 1.0);

        let flat2 = HeightState::new(vec![4, 4]).unwrap();
        let total: f64 = (1..=2)
            .map(|j| site_rate(&flat2, j, BoundaryCondition::Zero, &b).unwrap())
            .sum();
        assert_eq!(total, 2.0);

        let flat3 = HeightState::new(vec![4, 4, 4]).unwrap();
        for j in 1..=3 {
            assert_eq!(
                site_rate(&flat3, j, BoundaryCondition::Periodic, &b).unwrap(),
                1.0
            );
        }
        assert!(matches!(
            site_rate(&flat3, 4, BoundaryCondition::Zero, &b),
            Err(Error::IndexOutOfRange { .. })
        ));
        assert!(site_rate(&flat3, 0, BoundaryCondition::Zero, &b).is_err());
    }

    #[test]
    fn periodic_neighbors_wrap() {
        let s = HeightState::new(vec![1, 5, 9]).unwrap();
        assert_eq!(s.neighbors(1, BoundaryCondition::Periodic).unwrap(), (9, 5));
        assert_eq!(s.neighbors(3, BoundaryCondition::Periodic).unwrap(), (5, 1));
        assert_eq!(s.neighbors(1, BoundaryCondition::Zero).unwrap(), (0, 5));
    }

    #[test]
    fn deltas_shape() {
        let s = HeightState::new(vec![3, 1, 4, 1]).unwrap();
        let z = s.deltas(BoundaryCondition::Zero);
        assert_eq!(z.deltas(), &[2, -3, 3]);
        let p = s.deltas(BoundaryCondition::Periodic);
        assert_eq!(p.len(), 4);
        assert_eq!(p.sum(), 0);
        assert_eq!(z.running_max(2).unwrap(), 2);
        assert_eq!(z.running_max(3).unwrap(), 3);
    }

    #[test]
    fn f_ij_examples() {
        let y = vec![2, -1];
        assert_eq!(f_ij(&y, 1, 2).unwrap(), 3);
        assert_eq!(f_ij(&y, 1, 3).unwrap(), 2);
        assert_eq!(f_ij(&y, 3, 1).unwrap(), -2);
        assert_eq!(f_ij(&y, 2, 2), Err(Error::SameVertex(2)));
        let zero = vec![0; 4];
        for i in 1..=5 {
            for j in 1..=5 {
                if i != j {
                    assert_eq!(f_ij(&zero, i, j).unwrap(), 0);
                }
            }
        }
    }

    #[test]
    fn growth_vectors() {
        assert_eq!(growth_vector(1, 3).unwrap(), vec![1, 0]);
        assert_eq!(growth_vector(3, 3).unwrap(), vec![-1, -1]);
        assert!(growth_vector(4, 3).is_err());
    }

    #[test]
    fn growth_vector_shifts_f_exhaustively() {
        // every y in [-2, 2]^{n-1} for n <= 5
        for n in 2..=5usize {
            let dim = n - 1;
            let count = 5usize.pow(dim as u32);
            for code in 0..count {
                let y: Vec<i64> = (0..dim)
                    .map(|d| ((code / 5usize.pow(d as u32)) % 5) as i64 - 2)
                    .collect();
                for i in 1..=n {
                    let e = growth_vector(i, n).unwrap();
                    let grown: Vec<i64> = y.iter().zip(&e).map(|(a, b)| a + b).collect();
                    for j in (1..=n).filter(|&j| j != i) {
                        assert_eq!(f_ij(&grown, i, j).unwrap(), f_ij(&y, i, j).unwrap() + 1);
                    }
                }
            }
        }
    }

    #[test]
    fn lyapunov_examples() {
        let g = GraphSpec::path(3).unwrap();
        assert_eq!(lyapunov_f(&[2, -1], &g), 10);
        assert_eq!(lyapunov_f(&[0, 0], &g), 0);
    }

    #[test]
    fn graph_validation_and_parsing() {
        assert!(GraphSpec::new(3, [(1, 1)]).is_err());
        assert!(GraphSpec::new(3, [(1, 2)]).is_err());
        let tri: GraphSpec = "cycle:3".parse().unwrap();
        assert_eq!(tri.edges(), &[(1, 2), (1, 3), (2, 3)]);
        let custom: GraphSpec = "4:1-2,2-3,3-4,4-1".parse().unwrap();
        assert_eq!(custom.p(), 4);
        assert_eq!("path:3".parse::<GraphSpec>().unwrap().p(), 2);
        assert!(GraphSpec::path(4).unwrap().is_tree());
        assert_eq!(GraphSpec::complete(4).unwrap().p(), 6);
        assert_eq!(tri.neighbors(1), vec![2, 3]);
    }

    proptest! {
        #[test]
        fn rate_identity_random(a in 0i64..1000, b in 0i64..1000, c in 0i64..1000) {
            let betas = b123();
            prop_assert_eq!(rate_r(a, b, c, &betas), rate_tilde(a - b, c - b, &betas));
            prop_assert_eq!(rate_r(a, b, c, &betas), rate_r(c, b, a, &betas));
        }

        #[test]
        fn lyapunov_even(y in proptest::collection::vec(-50i64..50, 1..6)) {
            let g = GraphSpec::complete(y.len() + 1).unwrap();
            let neg: Vec<i64> = y.iter().map(|v| -v).collect();
            prop_assert_eq!(lyapunov_f(&y, &g), lyapunov_f(&neg, &g));
        }

        #[test]
        fn lyapunov_increment_identity(y in proptest::collection::vec(-30i64..30, 1..5), pick in 0usize..16) {
            let n = y.len() + 1;
            let g = GraphSpec::cycle(n).unwrap();
            let i = pick % n + 1;
            let mut grown = y.clone();
            grow_in_place(&mut grown, i);
            let predicted: i64 = g
                .neighbors(i)
                .into_iter()
                .map(|j| 2 * f_ij(&y, i, j).unwrap() + 1)
                .sum();
            prop_assert_eq!(lyapunov_f(&grown, &g) - lyapunov_f(&y, &g), predicted);
        }

        #[test]
        fn periodic_deltas_sum_to_zero(h in proptest::collection::vec(0i64..100, 1..8)) {
            let s = HeightState::new(h.clone()).unwrap();
            prop_assert_eq!(s.deltas(BoundaryCondition::Periodic).sum(), 0);
            prop_assert_eq!(s.deltas(BoundaryCondition::Zero).len(), h.len() - 1);
        }
    }
}
