//! Discrete-time transition kernels on `Y = Z^{n-1}`.
//!
//! Two families are built in: the jump chain of the continuous-time growth
//! process (probabilities proportional to column rates, no holding mass),
//! and the lazy neighbor-sign kernel whose growth probabilities are
//! `beta/n`. Both depend on `y` only through the signs of `f_ij(y)` over
//! the graph edges, which lets the condition checker work on the finite
//! set of realizable sign patterns.

use std::fmt;
use std::io::{self, Write};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{
    edge_diff, rate_level_tilde, BetaParams, BoundaryCondition, GraphSpec, RateLevel, YPoint,
};
use crate::sim::ProcessSpec;

/// One transition out of `y`: stay put, or grow column `i` (1-based).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Move {
    Stay,
    Grow(usize),
}

impl fmt::Display for Move {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Move::Stay => f.write_str("stay"),
            Move::Grow(i) => write!(f, "grow_{i}"),
        }
    }
}

/// User-supplied transition rule.
pub type TransitionFn = dyn Fn(&[i64]) -> Vec<(Move, f64)> + Send + Sync;

#[derive(Clone)]
enum Rule {
    Jump { bc: BoundaryCondition, betas: BetaParams },
    Lazy { betas: BetaParams },
    Custom(Arc<TransitionFn>),
}

/// A transition kernel `Q` on `Y`, tied to the graph whose edges define
/// its sign patterns.
#[derive(Clone)]
pub struct Kernel {
    name: String,
    graph: GraphSpec,
    rule: Rule,
    sign_constant: bool,
}

impl fmt::Debug for Kernel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Kernel")
            .field("name", &self.name)
            .field("graph", &self.graph)
            .field("sign_constant", &self.sign_constant)
            .finish()
    }
}

impl Kernel {
    /// Wraps an arbitrary rule. Set `sign_constant` only if the rule
    /// reads nothing but the signs of `f_ij(y)` over `graph`'s edges.
    pub fn custom<F>(name: impl Into<String>, graph: GraphSpec, sign_constant: bool, rule: F) -> Self
    where
        F: Fn(&[i64]) -> Vec<(Move, f64)> + Send + Sync + 'static,
    {
        Self {
            name: name.into(),
            graph,
            rule: Rule::Custom(Arc::new(rule)),
            sign_constant,
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn n(&self) -> usize {
        self.graph.n()
    }

    pub fn graph(&self) -> &GraphSpec {
        &self.graph
    }

    pub fn is_sign_constant(&self) -> bool {
        self.sign_constant
    }

    /// Outgoing transitions of `y`, including zero-probability moves for
    /// the built-in rules.
    pub fn transition(&self, y: &[i64]) -> Vec<(Move, f64)> {
        debug_assert_eq!(y.len() + 1, self.n());
        match &self.rule {
            Rule::Jump { bc, betas } => {
                let rates = jump_rates(y, *bc, betas);
                let total: f64 = rates.iter().sum();
                rates
                    .into_iter()
                    .enumerate()
                    .map(|(k, r)| (Move::Grow(k + 1), r / total))
                    .collect()
            }
            Rule::Lazy { betas } => {
                let n = self.n();
                let mut out: Vec<(Move, f64)> = (1..=n)
                    .map(|i| {
                        let level = neighbor_sign_level(y, &self.graph, i);
                        (Move::Grow(i), betas.rate_of(level) / n as f64)
                    })
                    .collect();
                let grow: f64 = out.iter().map(|(_, p)| p).sum();
                out.push((Move::Stay, 1.0 - grow));
                out
            }
            Rule::Custom(f) => f(y),
        }
    }

    /// Probabilities of `Grow(1..=n)` followed by `Stay`, summed per move.
    pub fn row(&self, y: &[i64]) -> Vec<f64> {
        let n = self.n();
        let mut row = vec![0.0; n + 1];
        for (mv, p) in self.transition(y) {
            match mv {
                Move::Grow(i) if (1..=n).contains(&i) => row[i - 1] += p,
                Move::Stay => row[n] += p,
                Move::Grow(_) => {}
            }
        }
        row
    }

    /// Move selected by a uniform draw `u` in `[0, 1)`.
    pub fn sample_move(&self, y: &[i64], u: f64) -> Move {
        let moves = self.transition(y);
        let mut acc = 0.0;
        for &(mv, p) in &moves {
            acc += p;
            if u < acc {
                return mv;
            }
        }
        // rounding: fall back to the last move with positive mass
        moves
            .iter()
            .rev()
            .find(|(_, p)| *p > 0.0)
            .map_or(Move::Stay, |(mv, _)| *mv)
    }
}

/// Column rates of the growth process at `y` (columns relative to column
/// `n`). Under zero boundary conditions the virtual neighbors only enter
/// through the sign of their difference, which is never positive, so they
/// are read as a zero difference.
fn jump_rates(y: &[i64], bc: BoundaryCondition, betas: &BetaParams) -> Vec<f64> {
    let n = y.len() + 1;
    let h = |i: usize| if i < n { y[i - 1] } else { 0 };
    (1..=n)
        .map(|i| {
            let (u, v) = match bc {
                BoundaryCondition::Zero => (
                    if i == 1 { 0 } else { h(i - 1) - h(i) },
                    if i == n { 0 } else { h(i + 1) - h(i) },
                ),
                BoundaryCondition::Periodic => (
                    h(if i == 1 { n } else { i - 1 }) - h(i),
                    h(if i == n { 1 } else { i + 1 }) - h(i),
                ),
            };
            betas.rate_of(rate_level_tilde(u, v))
        })
        .collect()
}

fn neighbor_sign_level(y: &[i64], graph: &GraphSpec, i: usize) -> RateLevel {
    let nbrs = graph.neighbors(i);
    if nbrs.iter().all(|&l| edge_diff(y, i, l) > 0) {
        RateLevel::Low
    } else if nbrs.iter().all(|&l| edge_diff(y, i, l) <= 0) {
        RateLevel::High
    } else {
        RateLevel::Mid
    }
}

/// Jump chain of the growth process on `Y`: the next column to grow is
/// chosen with probability proportional to its rate. Zero boundary
/// conditions use the path graph and periodic ones the cycle.
pub fn embedded_jump_kernel(spec: &ProcessSpec) -> Result<Kernel> {
    embedded_jump_kernel_with(spec.n(), spec.bc(), *spec.betas())
}

/// As [`embedded_jump_kernel`], accepting unordered rates for building
/// deliberately broken kernels.
pub fn embedded_jump_kernel_with(
    n: usize,
    bc: BoundaryCondition,
    betas: BetaParams,
) -> Result<Kernel> {
    if n < 2 {
        return Err(Error::InvalidArgument(format!("jump kernel needs n >= 2, got {n}")));
    }
    if !(betas.beta0() > 0.0 && betas.beta1() > 0.0 && betas.beta2() > 0.0) {
        return Err(Error::InvalidBetas(betas.beta0(), betas.beta1(), betas.beta2()));
    }
    let graph = match bc {
        BoundaryCondition::Zero => GraphSpec::path(n)?,
        BoundaryCondition::Periodic => GraphSpec::cycle(n)?,
    };
    Ok(Kernel {
        name: format!("jump-chain({bc}, n={n})"),
        graph,
        rule: Rule::Jump { bc, betas },
        sign_constant: true,
    })
}

/// Lazy kernel on an arbitrary graph: column `i` grows with probability
/// `beta0/n` if it is above all its neighbors, `beta2/n` if it is at or
/// below all of them, `beta1/n` otherwise; the rest of the mass stays.
pub fn example3_kernel(graph: &GraphSpec, betas: BetaParams) -> Result<Kernel> {
    if graph.n() < 2 {
        return Err(Error::InvalidArgument("lazy kernel needs n >= 2".into()));
    }
    if betas.max_rate() > 1.0 {
        return Err(Error::InvalidArgument(format!(
            "lazy kernel needs beta2 <= 1, got {}",
            betas.beta2()
        )));
    }
    if betas.beta0() <= 0.0 {
        return Err(Error::InvalidBetas(betas.beta0(), betas.beta1(), betas.beta2()));
    }
    Ok(Kernel {
        name: format!("lazy-neighbor-sign(n={}, p={})", graph.n(), graph.p()),
        graph: graph.clone(),
        rule: Rule::Lazy { betas },
        sign_constant: true,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Sign {
    Neg,
    Zero,
    Pos,
}

impl Sign {
    pub fn of(v: i64) -> Self {
        match v.signum() {
            -1 => Sign::Neg,
            0 => Sign::Zero,
            _ => Sign::Pos,
        }
    }

    pub fn flip(self) -> Self {
        match self {
            Sign::Neg => Sign::Pos,
            Sign::Zero => Sign::Zero,
            Sign::Pos => Sign::Neg,
        }
    }

    fn symbol(self) -> char {
        match self {
            Sign::Neg => '-',
            Sign::Zero => '0',
            Sign::Pos => '+',
        }
    }
}

/// Signs of `f_ij(y)` over the edges `(i, j)`, `i < j`, in the graph's
/// canonical edge order.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SignPattern {
    signs: Vec<Sign>,
}

impl SignPattern {
    pub fn signs(&self) -> &[Sign] {
        &self.signs
    }

    /// Sign of `f_il` for the edge `{i, l}`; `None` if it is not an edge.
    pub fn sign(&self, graph: &GraphSpec, i: usize, l: usize) -> Option<Sign> {
        let key = (i.min(l), i.max(l));
        let k = graph.edges().binary_search(&key).ok()?;
        let s = self.signs[k];
        Some(if i < l { s } else { s.flip() })
    }
}

impl fmt::Display for SignPattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.signs.iter().try_for_each(|s| write!(f, "{}", s.symbol()))
    }
}

pub fn sign_pattern_of(y: &[i64], graph: &GraphSpec) -> SignPattern {
    SignPattern {
        signs: graph
            .edges()
            .iter()
            .map(|&(i, j)| Sign::of(edge_diff(y, i, j)))
            .collect(),
    }
}

/// A realizable sign pattern with the smallest nonnegative height witness.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatternWitness {
    pub pattern: SignPattern,
    pub witness: YPoint,
}

/// Largest edge count accepted by [`enumerate_patterns`] (`3^12` candidates).
pub const MAX_PATTERN_EDGES: usize = 12;

/// All realizable edge-sign patterns of `graph`, each with a witness `y`.
pub fn enumerate_patterns(graph: &GraphSpec) -> Result<Vec<PatternWitness>> {
    let p = graph.p();
    if p > MAX_PATTERN_EDGES {
        return Err(Error::TooManyEdges {
            edges: p,
            limit: MAX_PATTERN_EDGES,
        });
    }
    let total = 3usize.pow(p as u32);
    let mut out = Vec::new();
    let mut signs = vec![Sign::Neg; p];
    for code in 0..total {
        let mut c = code;
        for k in (0..p).rev() {
            signs[k] = [Sign::Neg, Sign::Zero, Sign::Pos][c % 3];
            c /= 3;
        }
        if let Some(heights) = realize(graph, &signs) {
            let base = heights[graph.n() - 1];
            let witness = heights[..graph.n() - 1].iter().map(|h| h - base).collect();
            out.push(PatternWitness {
                pattern: SignPattern {
                    signs: signs.clone(),
                },
                witness,
            });
        }
    }
    Ok(out)
}

/// Smallest nonnegative heights (vertex-indexed from 0) with the given
/// edge signs, or `None` when the signs are inconsistent around a cycle.
fn realize(graph: &GraphSpec, signs: &[Sign]) -> Option<Vec<i64>> {
    let n = graph.n();
    // merge vertices joined by zero edges
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(parent: &mut [usize], mut v: usize) -> usize {
        while parent[v] != v {
            parent[v] = parent[parent[v]];
            v = parent[v];
        }
        v
    }
    for (&(i, j), s) in graph.edges().iter().zip(signs) {
        if *s == Sign::Zero {
            let (a, b) = (find(&mut parent, i - 1), find(&mut parent, j - 1));
            parent[a] = b;
        }
    }
    let comp: Vec<usize> = (0..n).map(|v| find(&mut parent, v)).collect();
    // lower -> higher arcs between classes, each demanding a gap of 1
    let mut succ: Vec<Vec<usize>> = vec![Vec::new(); n];
    let mut indeg = vec![0usize; n];
    for (&(i, j), s) in graph.edges().iter().zip(signs) {
        let (ci, cj) = (comp[i - 1], comp[j - 1]);
        let (lo, hi) = match s {
            Sign::Zero => continue,
            Sign::Pos => (cj, ci),
            Sign::Neg => (ci, cj),
        };
        if lo == hi {
            return None;
        }
        succ[lo].push(hi);
        indeg[hi] += 1;
    }
    let mut level = vec![0i64; n];
    let mut queue: Vec<usize> = (0..n).filter(|&v| comp[v] == v && indeg[v] == 0).collect();
    let mut done = 0;
    let classes = (0..n).filter(|&v| comp[v] == v).count();
    while let Some(v) = queue.pop() {
        done += 1;
        for &w in &succ[v] {
            level[w] = level[w].max(level[v] + 1);
            indeg[w] -= 1;
            if indeg[w] == 0 {
                queue.push(w);
            }
        }
    }
    if done < classes {
        return None;
    }
    Some((0..n).map(|v| level[comp[v]]).collect())
}

/// Writes `pattern_id,move,probability` rows of `kernel` at each witness.
pub fn write_kernel_csv<W: Write>(
    kernel: &Kernel,
    patterns: &[PatternWitness],
    mut w: W,
) -> io::Result<()> {
    writeln!(w, "pattern_id,move,probability")?;
    for (id, pw) in patterns.iter().enumerate() {
        for (mv, p) in kernel.transition(&pw.witness) {
            writeln!(w, "{id},{mv},{p}")?;
        }
    }
    Ok(())
}

/// Every `y` in the box `[-radius, radius]^{n-1}`.
pub fn window_states(n: usize, radius: i64) -> impl Iterator<Item = YPoint> {
    let dim = n.saturating_sub(1) as u32;
    let side = (2 * radius + 1) as u64;
    (0..side.pow(dim)).map(move |mut code| {
        (0..dim)
            .map(|_| {
                let v = (code % side) as i64 - radius;
                code /= side;
                v
            })
            .collect()
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn b123() -> BetaParams {
        BetaParams::new(1.0, 2.0, 3.0).unwrap()
    }

    fn lazy_betas() -> BetaParams {
        BetaParams::new(0.2, 0.4, 0.8).unwrap()
    }

    fn close(a: f64, b: f64) -> bool {
        (a - b).abs() < 1e-12
    }

    #[test]
    fn jump_kernel_two_columns() {
        let spec = ProcessSpec::new(2, BoundaryCondition::Zero, b123()).unwrap();
        let k = embedded_jump_kernel(&spec).unwrap();
        let flat = k.row(&[0]);
        assert!(close(flat[0], 0.5) && close(flat[1], 0.5) && flat[2] == 0.0);
        // column 1 above column 2 by d: column 1 at beta0, column 2 at beta1
        for d in 1..5 {
            let r = k.row(&[d]);
            assert!(close(r[0], 1.0 / 3.0) && close(r[1], 2.0 / 3.0));
            let r = k.row(&[-d]);
            assert!(close(r[0], 2.0 / 3.0) && close(r[1], 1.0 / 3.0));
        }
    }

    #[test]
    fn jump_kernel_rows_normalized() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..10_000 {
            let n = rng.random_range(2..=6usize);
            let bc = if rng.random_bool(0.5) {
                BoundaryCondition::Zero
            } else {
                BoundaryCondition::Periodic
            };
            let k = embedded_jump_kernel_with(n, bc, b123()).unwrap();
            let y: Vec<i64> = (0..n - 1).map(|_| rng.random_range(-5..=5)).collect();
            let row = k.row(&y);
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            let floor = 1.0 / (n as f64 * 3.0);
            assert!(row[..n].iter().all(|p| *p >= floor - 1e-15));
        }
    }

    #[test]
    fn jump_kernel_matches_process_rates() {
        use crate::model::{site_rate, HeightState};
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..2000 {
            let n = rng.random_range(2..=5usize);
            let heights: Vec<i64> = (0..n).map(|_| rng.random_range(0..6)).collect();
            let state = HeightState::new(heights).unwrap();
            for bc in [BoundaryCondition::Zero, BoundaryCondition::Periodic] {
                let rates: Vec<f64> = (1..=n).map(|j| site_rate(&state, j, bc, &b123()).unwrap()).collect();
                let total: f64 = rates.iter().sum();
                let k = embedded_jump_kernel_with(n, bc, b123()).unwrap();
                let row = k.row(&state.to_y());
                for (p, r) in row.iter().zip(&rates) {
                    assert!(close(*p, r / total));
                }
            }
        }
    }

    #[test]
    fn lazy_kernel_single_edge() {
        let g = GraphSpec::path(2).unwrap();
        let k = example3_kernel(&g, lazy_betas()).unwrap();
        let r = k.row(&[3]);
        assert!(close(r[0], 0.1) && close(r[1], 0.4) && close(r[2], 0.5));
        let r = k.row(&[0]);
        assert!(close(r[0], 0.4) && close(r[1], 0.4) && close(r[2], 0.2));
    }

    #[test]
    fn lazy_kernel_rejects_large_rates() {
        let g = GraphSpec::path(2).unwrap();
        assert!(example3_kernel(&g, b123()).is_err());
    }

    #[test]
    fn lazy_kernel_constant_on_patterns() {
        let g = GraphSpec::cycle(4).unwrap();
        let k = example3_kernel(&g, lazy_betas()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut checked = 0;
        while checked < 100 {
            let a: Vec<i64> = (0..3).map(|_| rng.random_range(-3..=3)).collect();
            let b: Vec<i64> = (0..3).map(|_| rng.random_range(-3..=3)).collect();
            if sign_pattern_of(&a, &g) == sign_pattern_of(&b, &g) {
                assert_eq!(k.row(&a), k.row(&b));
                checked += 1;
            }
        }
    }

    #[test]
    fn sign_patterns() {
        let g = GraphSpec::path(3).unwrap();
        let zero = sign_pattern_of(&[0, 0], &g);
        assert!(zero.signs().iter().all(|s| *s == Sign::Zero));
        let p = sign_pattern_of(&[2, -1], &g);
        assert_eq!(p.sign(&g, 1, 2), Some(Sign::Pos));
        assert_eq!(p.sign(&g, 2, 3), Some(Sign::Neg));
        assert_eq!(p.sign(&g, 2, 1), Some(Sign::Neg));
        assert_eq!(p.sign(&g, 1, 3), None);
        assert_eq!(p.to_string(), "+-");
    }

    #[test]
    fn enumerate_single_edge() {
        let g = GraphSpec::path(2).unwrap();
        let pats = enumerate_patterns(&g).unwrap();
        let w: Vec<_> = pats.iter().map(|p| p.witness.clone()).collect();
        assert_eq!(w, vec![vec![-1], vec![0], vec![1]]);
    }

    #[test]
    fn enumerate_tree_and_triangle() {
        let path = GraphSpec::path(3).unwrap();
        assert_eq!(enumerate_patterns(&path).unwrap().len(), 9);

        let tri = GraphSpec::cycle(3).unwrap();
        let pats = enumerate_patterns(&tri).unwrap();
        // witnesses realize their patterns
        for pw in &pats {
            assert_eq!(sign_pattern_of(&pw.witness, &tri), pw.pattern);
        }
        // f_12 > 0, f_23 > 0, f_31 > 0 is a cyclic order and cannot occur
        let cyclic = pats.iter().any(|pw| {
            pw.pattern.sign(&tri, 1, 2) == Some(Sign::Pos)
                && pw.pattern.sign(&tri, 2, 3) == Some(Sign::Pos)
                && pw.pattern.sign(&tri, 3, 1) == Some(Sign::Pos)
        });
        assert!(!cyclic);
        // 13 weak orders of three labelled columns
        assert_eq!(pats.len(), 13);
    }

    #[test]
    fn enumerate_matches_brute_force() {
        // patterns seen on a box of heights must equal the enumerated set
        for g in [GraphSpec::cycle(4).unwrap(), GraphSpec::complete(4).unwrap()] {
            let enumerated: std::collections::BTreeSet<_> =
                enumerate_patterns(&g).unwrap().into_iter().map(|p| p.pattern).collect();
            let seen: std::collections::BTreeSet<_> =
                window_states(4, 3).map(|y| sign_pattern_of(&y, &g)).collect();
            assert_eq!(enumerated, seen);
        }
    }

    #[test]
    fn enumerate_guard() {
        let big = GraphSpec::complete(6).unwrap();
        assert!(matches!(enumerate_patterns(&big), Err(Error::TooManyEdges { .. })));
    }

    #[test]
    fn kernel_csv() {
        let g = GraphSpec::path(2).unwrap();
        let k = example3_kernel(&g, lazy_betas()).unwrap();
        let pats = enumerate_patterns(&g).unwrap();
        let mut out = Vec::new();
        write_kernel_csv(&k, &pats, &mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        assert!(text.starts_with("pattern_id,move,probability\n0,grow_1,"));
        assert_eq!(text.lines().count(), 1 + 3 * 3);
    }

    #[test]
    fn sample_move_covers_support() {
        let g = GraphSpec::path(2).unwrap();
        let k = example3_kernel(&g, lazy_betas()).unwrap();
        assert_eq!(k.sample_move(&[3], 0.05), Move::Grow(1));
        assert_eq!(k.sample_move(&[3], 0.3), Move::Grow(2));
        assert_eq!(k.sample_move(&[3], 0.9), Move::Stay);
    }
}
