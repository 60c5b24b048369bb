//! Price oracles and value functions.
//!
//! Each agent prices its transaction row over a polytope of admissible price
//! vectors: the standard simplex cut by technology rows, one inequality
//! `sum_s a_sj v_s >= v_j` per output commodity `j`. Two oracle families
//! live here:
//!
//! * set-valued LP pricing: any maximizer of `<v, x_row>` is admissible; the
//!   support function `mu` is convex and the chosen maximizer (deterministic
//!   lexicographic-min vertex) is a subgradient;
//! * regularized pricing: the unique maximizer of
//!   `<p, x_row> - beta/2 |p - reference|^2`, computed through the
//!   completed-square identity as a Euclidean projection onto the polytope;
//!   its value function `eta` is differentiable with gradient `p(x)`.

mod simplex;

use crate::exec::{self, ExecPolicy};
use crate::linalg;
use crate::model::{AgentSpec, MarketState, PricingMode, Scenario, TechnologySpec};
use ndarray::Array2;
use simplex::TieMode;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PricingError {
    #[error(
        "price polytope is empty: technology outputs cover every commodity \
         (including {commodity})"
    )]
    EmptyPolytope { commodity: usize },
    #[error("wrong pricing mode: {0}")]
    WrongPricingMode(String),
    #[error("numerical failure in price oracle: {0}")]
    NumericalFailure(String),
}

/// Admissible price vectors of one agent: the standard simplex intersected
/// with the technology rows `<g, v> >= 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct PricePolytope {
    n: usize,
    rows: Vec<Vec<f64>>,
}

impl PricePolytope {
    /// The full simplex (no technology constraints).
    pub fn full_simplex(n: usize) -> Self {
        assert!(n >= 1, "need at least one commodity");
        PricePolytope { n, rows: Vec::new() }
    }

    /// Builds the polytope of a technology: one row per output commodity.
    /// Rejected when the outputs cover every commodity, which forces all
    /// price mass onto constrained coordinates and empties the set.
    pub fn from_technology(n: usize, tech: &TechnologySpec) -> Result<Self, PricingError> {
        assert!(n >= 1, "need at least one commodity");
        if tech.supply.len() >= n {
            return Err(PricingError::EmptyPolytope {
                commodity: tech.supply.first().copied().unwrap_or(0),
            });
        }
        let mut rows = Vec::with_capacity(tech.supply.len());
        for &j in &tech.supply {
            let mut g = vec![0.0; n];
            g[j] = -1.0;
            rows.push(g);
        }
        for &(s, j, a) in &tech.coeff {
            let r = tech
                .supply
                .iter()
                .position(|&jj| jj == j)
                .expect("coefficient output not in supply set");
            rows[r][s] = a;
        }
        Ok(PricePolytope { n, rows })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    /// Membership up to `tol` (absolute on the simplex part, scaled by row
    /// magnitude on technology rows).
    pub fn contains(&self, v: &[f64], tol: f64) -> bool {
        if v.len() != self.n {
            return false;
        }
        if (v.iter().sum::<f64>() - 1.0).abs() > tol {
            return false;
        }
        if v.iter().any(|&x| x < -tol) {
            return false;
        }
        self.rows.iter().all(|g| {
            let scale = g.iter().map(|x| x.abs()).sum::<f64>().max(1.0);
            dot(g, v) >= -tol * scale
        })
    }
}

/// One agent's price polytopes for every agent of a scenario, in agent order.
pub fn build_polytopes(scenario: &Scenario) -> Result<Vec<PricePolytope>, PricingError> {
    scenario
        .agents
        .iter()
        .map(|a| PricePolytope::from_technology(scenario.n, &a.technology))
        .collect()
}

/// Result of an LP maximization over a price polytope.
#[derive(Debug, Clone, PartialEq)]
pub struct LpSolution {
    pub vertex: Vec<f64>,
    pub value: f64,
    /// True when the maximizer is unique.
    pub tight: bool,
}

/// A value-function evaluation: the value, the price vector acting as its
/// (sub)gradient, and whether the underlying argmax was unique.
#[derive(Debug, Clone, PartialEq)]
pub struct ValueReport {
    pub value: f64,
    pub gradient: Vec<f64>,
    pub tight: bool,
}

/// Maximizes `<c, v>` over the polytope; ties resolve to the
/// lexicographically smallest optimal vertex and `tight` reports exact
/// uniqueness of the maximizer.
pub fn lp_max(poly: &PricePolytope, c: &[f64]) -> Result<LpSolution, PricingError> {
    let out = simplex::maximize(poly, c, TieMode::LexMinWithUnique)?;
    debug_cross_check(poly, c, out.value);
    Ok(LpSolution {
        vertex: out.vertex,
        value: out.value,
        tight: out.tight,
    })
}

/// Cheap variant for inner loops: any optimal vertex (still deterministic),
/// no uniqueness verdict beyond the free one.
pub(crate) fn lp_max_fast(poly: &PricePolytope, c: &[f64]) -> Result<(Vec<f64>, f64), PricingError> {
    let out = simplex::maximize(poly, c, TieMode::Any)?;
    debug_cross_check(poly, c, out.value);
    Ok((out.vertex, out.value))
}

/// Crate-internal hook for the brute-force oracles: minimize `<cost, x>`
/// over `{x >= 0 : A x = b}` with the same simplex machinery the pricing
/// LPs use.
pub(crate) fn lp_minimize_standard(
    a: Vec<Vec<f64>>,
    b: Vec<f64>,
    cost: &[f64],
) -> Result<(Vec<f64>, f64), PricingError> {
    simplex::minimize_standard(a, b, cost)
}

#[cfg(debug_assertions)]
fn debug_cross_check(poly: &PricePolytope, c: &[f64], value: f64) {
    use std::sync::atomic::{AtomicU64, Ordering};
    static CALLS: AtomicU64 = AtomicU64::new(0);
    if poly.n() <= 4 && CALLS.fetch_add(1, Ordering::Relaxed) % 257 == 0 {
        let best = enumerate_vertices(poly)
            .iter()
            .map(|v| dot(c, v))
            .fold(f64::NEG_INFINITY, f64::max);
        debug_assert!(
            (best - value).abs() <= 1e-8 * (1.0 + best.abs()),
            "simplex value {value} disagrees with enumerated optimum {best}"
        );
    }
}

#[cfg(not(debug_assertions))]
fn debug_cross_check(_poly: &PricePolytope, _c: &[f64], _value: f64) {}

/// All vertices of the polytope, found by activating every subset of n-1
/// inequalities against the simplex equality. Exponential in the constraint
/// count; meant for tiny polytopes (cross-checks and brute-force oracles).
pub fn enumerate_vertices(poly: &PricePolytope) -> Vec<Vec<f64>> {
    let n = poly.n;
    let k = poly.rows.len();
    let total = n + k;
    let mut vertices: Vec<Vec<f64>> = Vec::new();

    let mut consider = |active: &[usize]| {
        let mut a = vec![vec![0.0; n]; n];
        let mut b = vec![0.0; n];
        a[0] = vec![1.0; n];
        b[0] = 1.0;
        for (t, &c) in active.iter().enumerate() {
            if c < n {
                a[t + 1][c] = 1.0;
            } else {
                a[t + 1] = poly.rows[c - n].clone();
            }
        }
        let Some(v) = linalg::solve(a, b) else {
            return;
        };
        if !poly.contains(&v, 1e-9) {
            return;
        }
        if !vertices
            .iter()
            .any(|w| w.iter().zip(&v).all(|(a, b)| (a - b).abs() <= 1e-8))
        {
            vertices.push(v);
        }
    };

    for_each_combination(total, n - 1, &mut consider);
    vertices
}

fn for_each_combination(total: usize, choose: usize, f: &mut dyn FnMut(&[usize])) {
    fn rec(
        start: usize,
        total: usize,
        remaining: usize,
        acc: &mut Vec<usize>,
        f: &mut dyn FnMut(&[usize]),
    ) {
        if remaining == 0 {
            f(acc);
            return;
        }
        for i in start..=(total - remaining) {
            acc.push(i);
            rec(i + 1, total, remaining - 1, acc, f);
            acc.pop();
        }
    }
    if choose > total {
        return;
    }
    let mut acc = Vec::with_capacity(choose);
    rec(0, total, choose, &mut acc, f);
}

// ---------------------------------------------------------------------------
// Set-valued LP pricing and the support function mu

fn require_lp(agent: &AgentSpec) -> Result<(), PricingError> {
    match agent.pricing {
        PricingMode::LpSetValued => Ok(()),
        PricingMode::Regularized { .. } => Err(PricingError::WrongPricingMode(
            "agent uses regularized pricing, expected the set-valued LP price map".into(),
        )),
    }
}

fn agent_polytope(agent: &AgentSpec) -> Result<PricePolytope, PricingError> {
    PricePolytope::from_technology(agent.lower.len(), &agent.technology)
}

/// An admissible price for an LP-priced agent at `x_row`: the deterministic
/// (lexicographic-min) maximizing vertex of `<v, x_row>`.
pub fn price_set_vertex(agent: &AgentSpec, x_row: &[f64]) -> Result<Vec<f64>, PricingError> {
    require_lp(agent)?;
    let poly = agent_polytope(agent)?;
    Ok(simplex::maximize(&poly, x_row, TieMode::LexMin)?.vertex)
}

/// Support-function evaluation over a prebuilt polytope: value, the chosen
/// subgradient vertex, and uniqueness of the maximizer.
pub fn mu_with(poly: &PricePolytope, x_row: &[f64]) -> Result<ValueReport, PricingError> {
    let sol = lp_max(poly, x_row)?;
    Ok(ValueReport {
        value: sol.value,
        gradient: sol.vertex,
        tight: sol.tight,
    })
}

/// The agent's support function `mu_i(x_row) = max_{v in V_i} <v, x_row>`.
pub fn mu_value(agent: &AgentSpec, x_row: &[f64]) -> Result<f64, PricingError> {
    require_lp(agent)?;
    let poly = agent_polytope(agent)?;
    Ok(lp_max_fast(&poly, x_row)?.1)
}

/// Full support-function report for one agent.
pub fn mu_report(agent: &AgentSpec, x_row: &[f64]) -> Result<ValueReport, PricingError> {
    require_lp(agent)?;
    let poly = agent_polytope(agent)?;
    mu_with(&poly, x_row)
}

/// Market-wide support function: total value and the stacked subgradient
/// matrix (one chosen price vertex per agent row). All agents must use LP
/// pricing; `polys` are the prebuilt agent polytopes.
pub fn market_mu(
    x: &MarketState,
    scenario: &Scenario,
    polys: &[PricePolytope],
    policy: ExecPolicy,
) -> Result<(f64, MarketState), PricingError> {
    let (m, n) = x.dim();
    assert_eq!((m, n), (scenario.m, scenario.n), "state shape mismatch");
    assert_eq!(polys.len(), m, "need one polytope per agent");
    for agent in &scenario.agents {
        require_lp(agent)?;
    }
    let rows = exec::try_map_collect(policy, m, |i| {
        let x_row: Vec<f64> = x.row(i).to_vec();
        let out = simplex::maximize(&polys[i], &x_row, TieMode::LexMin)?;
        Ok((out.value, out.vertex))
    })?;
    let value = rows.iter().map(|r| r.0).sum();
    let grad = Array2::from_shape_fn((m, n), |(i, j)| rows[i].1[j]);
    Ok((value, grad))
}

/// Stacked subgradient of the market support function.
pub fn mu_subgradient(
    x: &MarketState,
    scenario: &Scenario,
    policy: ExecPolicy,
) -> Result<MarketState, PricingError> {
    let polys = build_polytopes(scenario)?;
    Ok(market_mu(x, scenario, &polys, policy)?.1)
}

// ---------------------------------------------------------------------------
// Regularized pricing and the smoothed value function eta

fn require_regularized(agent: &AgentSpec) -> Result<(&Vec<f64>, f64), PricingError> {
    match &agent.pricing {
        PricingMode::Regularized { reference, beta } => Ok((reference, *beta)),
        PricingMode::LpSetValued => Err(PricingError::WrongPricingMode(
            "agent uses LP pricing, expected the regularized price map".into(),
        )),
    }
}

/// Euclidean projection of `z` onto the polytope.
pub fn project_polytope(poly: &PricePolytope, z: &[f64]) -> Result<Vec<f64>, PricingError> {
    quad_min(poly, 1.0, z)
}

/// Regularized price over a prebuilt polytope: the unique maximizer of
/// `<p, x_row> - beta/2 |p - reference|^2`, computed as the projection of
/// `reference + x_row / beta`. The report carries `eta_i` as the value and
/// the price as the gradient.
pub fn regularized_with(
    poly: &PricePolytope,
    reference: &[f64],
    beta: f64,
    x_row: &[f64],
) -> Result<ValueReport, PricingError> {
    assert!(beta > 0.0, "regularization weight must be positive");
    let shifted: Vec<f64> = reference
        .iter()
        .zip(x_row)
        .map(|(v, x)| v + x / beta)
        .collect();
    let p = quad_min(poly, 1.0, &shifted)?;
    let value = dot(&p, x_row)
        - 0.5 * beta * p.iter().zip(reference).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
    Ok(ValueReport {
        value,
        gradient: p,
        tight: true,
    })
}

/// The unique regularized price of an agent at `x_row`.
pub fn regularized_price(agent: &AgentSpec, x_row: &[f64]) -> Result<Vec<f64>, PricingError> {
    let (reference, beta) = require_regularized(agent)?;
    let poly = agent_polytope(agent)?;
    Ok(regularized_with(&poly, reference, beta, x_row)?.gradient)
}

/// Same price computed without the projection identity, by minimizing the
/// quadratic `beta/2 |p|^2 - <x_row + beta reference, p>` directly. Kept as
/// an independent route for cross-checking the identity.
pub fn regularized_price_direct(
    agent: &AgentSpec,
    x_row: &[f64],
) -> Result<Vec<f64>, PricingError> {
    let (reference, beta) = require_regularized(agent)?;
    let poly = agent_polytope(agent)?;
    let r: Vec<f64> = x_row
        .iter()
        .zip(reference)
        .map(|(x, v)| x + beta * v)
        .collect();
    quad_min(&poly, beta, &r)
}

/// The smoothed value function `eta_i(x_row)`.
pub fn eta_value(agent: &AgentSpec, x_row: &[f64]) -> Result<f64, PricingError> {
    Ok(eta_report(agent, x_row)?.value)
}

/// Value, gradient (the regularized price), and trivial tightness for one
/// agent.
pub fn eta_report(agent: &AgentSpec, x_row: &[f64]) -> Result<ValueReport, PricingError> {
    let (reference, beta) = require_regularized(agent)?;
    let poly = agent_polytope(agent)?;
    regularized_with(&poly, reference, beta, x_row)
}

/// Market-wide smoothed value function: total value and the stacked gradient
/// (one regularized price per agent row). All agents must use regularized
/// pricing.
pub fn market_eta(
    x: &MarketState,
    scenario: &Scenario,
    polys: &[PricePolytope],
    policy: ExecPolicy,
) -> Result<(f64, MarketState), PricingError> {
    let (m, n) = x.dim();
    assert_eq!((m, n), (scenario.m, scenario.n), "state shape mismatch");
    assert_eq!(polys.len(), m, "need one polytope per agent");
    let params: Vec<(&Vec<f64>, f64)> = scenario
        .agents
        .iter()
        .map(require_regularized)
        .collect::<Result<_, _>>()?;
    let rows = exec::try_map_collect(policy, m, |i| {
        let x_row: Vec<f64> = x.row(i).to_vec();
        let (reference, beta) = params[i];
        let rep = regularized_with(&polys[i], reference, beta, &x_row)?;
        Ok((rep.value, rep.gradient))
    })?;
    let value = rows.iter().map(|r| r.0).sum();
    let grad = Array2::from_shape_fn((m, n), |(i, j)| rows[i].1[j]);
    Ok((value, grad))
}

/// Stacked gradient of the market smoothed value function.
pub fn eta_gradient(
    x: &MarketState,
    scenario: &Scenario,
    policy: ExecPolicy,
) -> Result<MarketState, PricingError> {
    let polys = build_polytopes(scenario)?;
    Ok(market_eta(x, scenario, &polys, policy)?.1)
}

/// One admissible price row per agent under that agent's own pricing mode:
/// the deterministic LP vertex for set-valued agents, the unique regularized
/// price otherwise. This is the market price map mixed scenarios evaluate.
pub fn price_matrix(
    x: &MarketState,
    scenario: &Scenario,
    polys: &[PricePolytope],
    policy: ExecPolicy,
) -> Result<MarketState, PricingError> {
    let (m, n) = x.dim();
    assert_eq!((m, n), (scenario.m, scenario.n), "state shape mismatch");
    assert_eq!(polys.len(), m, "need one polytope per agent");
    let rows = exec::try_map_collect(policy, m, |i| {
        let x_row: Vec<f64> = x.row(i).to_vec();
        match &scenario.agents[i].pricing {
            PricingMode::LpSetValued => {
                Ok(simplex::maximize(&polys[i], &x_row, TieMode::LexMin)?.vertex)
            }
            PricingMode::Regularized { reference, beta } => {
                Ok(regularized_with(&polys[i], reference, *beta, &x_row)?.gradient)
            }
        }
    })?;
    Ok(Array2::from_shape_fn((m, n), |(i, j)| rows[i][j]))
}

// ---------------------------------------------------------------------------
// Quadratic minimization over the polytope

/// Minimizes `q/2 |p|^2 - <r, p>` over the polytope to machine precision.
///
/// Away-step conditional gradient with exact quadratic line search drives
/// the duality gap down; once it is small the candidate active face is
/// solved exactly as an equality-constrained quadratic program and the
/// result is certified by a fresh oracle call. The polish makes the output
/// accurate far beyond the gap bound, which downstream identities (the
/// completed-square cross-check, finite-difference gradient tests) rely on.
fn quad_min(poly: &PricePolytope, q: f64, r: &[f64]) -> Result<Vec<f64>, PricingError> {
    assert!(q > 0.0, "quadratic coefficient must be positive");
    assert_eq!(r.len(), poly.n(), "linear term length mismatch");
    let scale = 1.0 + q + dot(r, r).sqrt();

    let warm = simplex::maximize(poly, r, TieMode::Any)?;
    let mut p = warm.vertex;
    let mut active: Vec<(Vec<f64>, f64)> = vec![(p.clone(), 1.0)];
    let mut best: (Vec<f64>, f64) = (p.clone(), f64::INFINITY);
    let mut last_polish_gap = f64::INFINITY;

    for iter in 0..200_000usize {
        let g: Vec<f64> = p.iter().zip(r).map(|(pi, ri)| q * pi - ri).collect();
        let neg_g: Vec<f64> = g.iter().map(|v| -v).collect();
        let (s, _) = lp_max_fast(poly, &neg_g)?;
        let gp = dot(&g, &p);
        let fw_gap = gp - dot(&g, &s);

        if fw_gap < best.1 {
            best = (p.clone(), fw_gap);
        }
        if fw_gap <= 1e-13 * scale {
            return Ok(p);
        }
        if fw_gap <= 1e-9 * scale && fw_gap < 0.25 * last_polish_gap {
            last_polish_gap = fw_gap;
            if let Some(exact) = polish_face(poly, q, r, &p, fw_gap) {
                return Ok(exact);
            }
        }

        // Away direction: the worst active vertex under the current gradient.
        let (ai, away_score) = active
            .iter()
            .enumerate()
            .map(|(i, (v, _))| (i, dot(&g, v)))
            .max_by(|a, b| a.1.total_cmp(&b.1))
            .expect("active set never empty");
        let away_gain = away_score - gp;

        if fw_gap >= away_gain {
            let d: Vec<f64> = s.iter().zip(&p).map(|(si, pi)| si - pi).collect();
            let denom = q * dot(&d, &d);
            if denom <= 0.0 {
                return Ok(p);
            }
            let t = (fw_gap / denom).clamp(0.0, 1.0);
            if t >= 1.0 {
                p = s.clone();
                active = vec![(s, 1.0)];
            } else {
                for (v, w) in &mut active {
                    let _ = v;
                    *w *= 1.0 - t;
                }
                merge_vertex(&mut active, s, t);
                for (pi, di) in p.iter_mut().zip(&d) {
                    *pi += t * di;
                }
            }
        } else {
            let a = active[ai].0.clone();
            let wa = active[ai].1;
            let d: Vec<f64> = p.iter().zip(&a).map(|(pi, ai)| pi - ai).collect();
            let denom = q * dot(&d, &d);
            if denom <= 0.0 || wa >= 1.0 {
                // Away from the only vertex is no direction at all.
                continue;
            }
            let t_max = wa / (1.0 - wa);
            let t = (away_gain / denom).clamp(0.0, t_max);
            for (v, w) in &mut active {
                let _ = v;
                *w *= 1.0 + t;
            }
            active[ai].1 -= t;
            if active[ai].1 <= 1e-14 {
                active.swap_remove(ai);
            }
            for (pi, di) in p.iter_mut().zip(&d) {
                *pi += t * di;
            }
        }

        // Periodic re-synthesis keeps incremental drift out of long runs.
        if iter % 512 == 511 {
            let total: f64 = active.iter().map(|(_, w)| w).sum();
            for (_, w) in &mut active {
                *w /= total;
            }
            for j in 0..p.len() {
                p[j] = active.iter().map(|(v, w)| w * v[j]).sum();
            }
        }
    }

    if best.1 <= 1e-10 * scale {
        Ok(best.0)
    } else {
        Err(PricingError::NumericalFailure(format!(
            "quadratic subproblem stalled at duality gap {:.3e}",
            best.1
        )))
    }
}

fn merge_vertex(active: &mut Vec<(Vec<f64>, f64)>, vertex: Vec<f64>, weight: f64) {
    for (v, w) in active.iter_mut() {
        if v.iter().zip(&vertex).all(|(a, b)| (a - b).abs() <= 1e-12) {
            *w += weight;
            return;
        }
    }
    active.push((vertex, weight));
}

/// Guesses the active face from a near-converged iterate, solves the
/// equality-constrained quadratic exactly, and accepts the candidate only
/// when it is feasible and a fresh oracle call certifies its gap.
fn polish_face(
    poly: &PricePolytope,
    q: f64,
    r: &[f64],
    p: &[f64],
    gap: f64,
) -> Option<Vec<f64>> {
    let n = poly.n();
    // Distance-to-optimum bound from strong convexity dictates how far a
    // vanishing coordinate can currently sit from zero.
    let thresh = (3.0 * (2.0 * gap / q).sqrt()).max(1e-9);

    let mut cons: Vec<(Vec<f64>, f64)> = vec![(vec![1.0; n], 1.0)];
    for (j, &pj) in p.iter().enumerate() {
        if pj <= thresh {
            let mut e = vec![0.0; n];
            e[j] = 1.0;
            cons.push((e, 0.0));
        }
    }
    for g in poly.rows() {
        let sc = g.iter().map(|x| x.abs()).sum::<f64>().max(1.0);
        if dot(g, p).abs() <= thresh * sc {
            cons.push((g.clone(), 0.0));
        }
    }

    let k = cons.len();
    let dim = n + k;
    let mut a = vec![vec![0.0; dim]; dim];
    let mut rhs = vec![0.0; dim];
    for i in 0..n {
        a[i][i] = q;
        rhs[i] = r[i];
    }
    for (t, (row, d)) in cons.iter().enumerate() {
        for i in 0..n {
            a[i][n + t] = row[i];
            a[n + t][i] = row[i];
        }
        rhs[n + t] = *d;
    }
    let sol = linalg::solve(a, rhs)?;
    let cand = &sol[..n];

    if !poly.contains(cand, 1e-9) {
        return None;
    }
    let g: Vec<f64> = cand.iter().zip(r).map(|(pi, ri)| q * pi - ri).collect();
    let neg_g: Vec<f64> = g.iter().map(|v| -v).collect();
    let (s, _) = lp_max_fast(poly, &neg_g).ok()?;
    let fresh_gap = dot(&g, cand) - dot(&g, &s);
    let scale = 1.0 + q + dot(r, r).sqrt();
    if fresh_gap <= 1e-12 * scale {
        Some(cand.to_vec())
    } else {
        None
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
