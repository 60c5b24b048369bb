//! Independent certification of solver output: KKT-style residuals for a
//! proposed equilibrium, brute-force optima from first principles, and
//! finite-difference / convexity spot checks on the value functions.

use crate::balance::{self, BalanceError, ClearingPrices};
use crate::exec::ExecPolicy;
use crate::model::{MarketState, ModelError, PricingMode, Scenario, FEASIBILITY_TOL};
use crate::pricing::{self, PricingError};
use crate::solvers::frob_dot;
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum VerifyError {
    /// The brute-force oracle refuses instances past its size guard.
    #[error("instance too large for the brute-force oracle: {0}")]
    TooLargeForOracle(String),
    /// The oracle's own iteration hit its cap before its tolerance.
    #[error("oracle failed to converge: {0}")]
    OracleNotConverged(String),
    /// The operation needs a different pricing mode than the scenario has.
    #[error("wrong pricing mode: {0}")]
    WrongMode(String),
    #[error(transparent)]
    Pricing(#[from] PricingError),
    #[error(transparent)]
    Balance(#[from] BalanceError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Residual certificate for a proposed solution.
#[derive(Debug, Clone, PartialEq)]
pub struct CertificateReport {
    /// Worst window / balance violation of the state itself, measured from
    /// the raw window formula (finite even for far-out states).
    pub feasibility_violation: f64,
    /// Stationary gap `<p(x), x - y>` over the moving balance set at `x`;
    /// infinite when the state is too far outside the global box to price.
    pub qvi_gap: f64,
    /// Clearing prices extracted from the balance multipliers of the
    /// gap-certifying linear minimization.
    pub lambda: ClearingPrices,
    /// Per-commodity flags: true when the multiplier was only determined up
    /// to an interval.
    pub lambda_degenerate: Vec<bool>,
    /// Coordinatewise complementarity residuals: interior coordinates must
    /// price at the clearing level, coordinates at their window bounds may
    /// deviate in the bound's direction.
    pub per_agent_partial_violations: Array2<f64>,
    /// True when every residual is within the requested tolerance.
    pub passed: bool,
}

/// Certifies a proposed equilibrium state against its scenario. Feasibility
/// is always measured; the pricing residuals are computed whenever the state
/// is close enough to the global box for the price maps to be defined.
pub fn check_qvi_solution(
    x: &MarketState,
    scenario: &Scenario,
    epsilon: f64,
    policy: ExecPolicy,
) -> Result<CertificateReport, VerifyError> {
    assert_eq!(x.dim(), scenario.dims(), "state shape mismatch");
    assert!(epsilon > 0.0, "tolerance must be positive");
    let (m, n) = scenario.dims();

    let finite = x.iter().all(|v| v.is_finite());
    let mut feasibility = if finite { 0.0 } else { f64::INFINITY };
    let mut box_violation = if finite { 0.0 } else { f64::INFINITY };
    if finite {
        for (i, agent) in scenario.agents.iter().enumerate() {
            for j in 0..n {
                let v = x[(i, j)];
                let alpha = agent.lower[j].max(v - agent.radius[j]);
                let beta = agent.upper[j].min(v + agent.radius[j]);
                feasibility = feasibility.max(alpha - v).max(v - beta);
                box_violation = box_violation
                    .max(agent.lower[j] - v)
                    .max(v - agent.upper[j]);
            }
        }
        for j in 0..n {
            feasibility = feasibility.max(x.column(j).sum().abs());
        }
    }

    if !finite || box_violation > FEASIBILITY_TOL {
        return Ok(CertificateReport {
            feasibility_violation: feasibility,
            qvi_gap: f64::INFINITY,
            lambda: ClearingPrices {
                lambda: vec![f64::NAN; n],
            },
            lambda_degenerate: vec![true; n],
            per_agent_partial_violations: Array2::from_elem((m, n), f64::INFINITY),
            passed: false,
        });
    }

    let polys = pricing::build_polytopes(scenario)?;
    let p = pricing::price_matrix(x, scenario, &polys, policy)?;
    let boxes = scenario.moving_boxes(x)?;
    let lmo = balance::lmo_market(&p, &boxes, policy)?;
    let qvi_gap = frob_dot(&p, x) - lmo.value;

    // Complementarity per coordinate: a window-interior coordinate must
    // price exactly at the clearing level; a coordinate pinned at its lower
    // window bound may price above it, one at its upper bound below it.
    let mut partials = Array2::zeros((m, n));
    for j in 0..n {
        let lambda = lmo.clearing.lambda[j];
        for i in 0..m {
            let price = p[(i, j)];
            let mut best = (price - lambda).abs();
            if x[(i, j)] <= boxes[j].lower[i] + epsilon {
                best = best.min((lambda - price).max(0.0));
            }
            if x[(i, j)] >= boxes[j].upper[i] - epsilon {
                best = best.min((price - lambda).max(0.0));
            }
            partials[(i, j)] = best;
        }
    }

    let worst_partial = partials.iter().fold(0.0f64, |acc, &v| acc.max(v));
    let passed = feasibility <= epsilon && qvi_gap <= epsilon && worst_partial <= epsilon;
    Ok(CertificateReport {
        feasibility_violation: feasibility,
        qvi_gap,
        lambda: lmo.clearing,
        lambda_degenerate: lmo.degenerate,
        per_agent_partial_violations: partials,
        passed,
    })
}

const ORACLE_DIM_CAP: usize = 4;

/// Exact minimum of the total support-function objective over the stationary
/// balance set, computed from first principles: every agent's price polytope
/// is enumerated vertex by vertex and the epigraph linear program is solved
/// outright. Guarded to small commodity counts; requires LP pricing
/// throughout.
pub fn brute_force_mu_optimum(scenario: &Scenario) -> Result<f64, VerifyError> {
    let (m, n) = scenario.dims();
    if n > ORACLE_DIM_CAP {
        return Err(VerifyError::TooLargeForOracle(format!(
            "vertex enumeration is capped at {ORACLE_DIM_CAP} commodities, scenario has {n}"
        )));
    }
    for (i, agent) in scenario.agents.iter().enumerate() {
        if !matches!(agent.pricing, PricingMode::LpSetValued) {
            return Err(VerifyError::WrongMode(format!(
                "agent {i} uses regularized pricing; the support-function oracle needs LP pricing"
            )));
        }
    }
    let polys = pricing::build_polytopes(scenario)?;
    let vertex_sets: Vec<Vec<Vec<f64>>> = polys.iter().map(pricing::enumerate_vertices).collect();

    let bounds = scenario.bounds();
    // Columns: xi (shifted state, m*n), box slack (m*n), t+ (m), t- (m),
    // epigraph slack (one per agent vertex).
    let mn = m * n;
    let vertex_total: usize = vertex_sets.iter().map(Vec::len).sum();
    let ncols = 2 * mn + 2 * m + vertex_total;
    let xi = |i: usize, j: usize| i * n + j;
    let slack = |i: usize, j: usize| mn + i * n + j;
    let t_pos = |i: usize| 2 * mn + i;
    let t_neg = |i: usize| 2 * mn + m + i;

    let mut a: Vec<Vec<f64>> = Vec::new();
    let mut b: Vec<f64> = Vec::new();

    // Box rows: xi + slack = upper - lower.
    for i in 0..m {
        for j in 0..n {
            let mut row = vec![0.0; ncols];
            row[xi(i, j)] = 1.0;
            row[slack(i, j)] = 1.0;
            a.push(row);
            b.push(bounds.upper[(i, j)] - bounds.lower[(i, j)]);
        }
    }
    // Balance rows: sum_i xi_ij = -sum_i lower_ij.
    for j in 0..n {
        let mut row = vec![0.0; ncols];
        for i in 0..m {
            row[xi(i, j)] = 1.0;
        }
        a.push(row);
        b.push(-(0..m).map(|i| bounds.lower[(i, j)]).sum::<f64>());
    }
    // Epigraph rows per agent vertex: t_i - <v, x_i> - w = 0 with
    // x = lower + xi.
    let mut w_col = 2 * mn + 2 * m;
    for i in 0..m {
        for v in &vertex_sets[i] {
            let mut row = vec![0.0; ncols];
            row[t_pos(i)] = 1.0;
            row[t_neg(i)] = -1.0;
            for j in 0..n {
                row[xi(i, j)] = -v[j];
            }
            row[w_col] = -1.0;
            a.push(row);
            b.push((0..n).map(|j| v[j] * bounds.lower[(i, j)]).sum::<f64>());
            w_col += 1;
        }
    }

    let mut cost = vec![0.0; ncols];
    for i in 0..m {
        cost[t_pos(i)] = 1.0;
        cost[t_neg(i)] = -1.0;
    }

    let (_, value) = pricing::lp_minimize_standard(a, b, &cost)?;
    Ok(value)
}

/// Minimum of the total smoothed objective over the stationary balance set,
/// found by projected gradient descent run to a tight gradient-mapping
/// tolerance. Requires regularized pricing throughout.
pub fn brute_force_eta_optimum(
    scenario: &Scenario,
    policy: ExecPolicy,
) -> Result<f64, VerifyError> {
    let mut min_beta = f64::INFINITY;
    for (i, agent) in scenario.agents.iter().enumerate() {
        match agent.pricing {
            PricingMode::Regularized { beta, .. } => min_beta = min_beta.min(beta),
            PricingMode::LpSetValued => {
                return Err(VerifyError::WrongMode(format!(
                    "agent {i} uses LP pricing; the smoothed oracle needs regularized pricing"
                )));
            }
        }
    }
    let polys = pricing::build_polytopes(scenario)?;
    let boxes = scenario.stationary_boxes();
    let (mut x, _) = balance::project_market(&scenario.zero_state(), &boxes, policy)?;
    // The smoothed objective has a 1/beta-Lipschitz gradient, so half the
    // smallest beta is a safe constant step.
    let step = 0.5 * min_beta;
    let tol = 1e-10;
    let cap = 1_000_000usize;

    for _ in 0..cap {
        let (_, grad) = pricing::market_eta(&x, scenario, &polys, policy)?;
        let z = &x - &grad.mapv(|v| v * step);
        let (next, _) = balance::project_market(&z, &boxes, policy)?;
        let moved = (&next - &x).iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
        x = next;
        if moved <= tol * step {
            return Ok(pricing::market_eta(&x, scenario, &polys, policy)?.0);
        }
    }
    Err(VerifyError::OracleNotConverged(format!(
        "projected gradient ran {cap} iterations without reaching its mapping tolerance {tol:.0e}"
    )))
}

/// Samples a state inside the global box, substituting a unit window around
/// zero on unbounded sides.
fn sample_state(scenario: &Scenario, rng: &mut ChaCha8Rng) -> MarketState {
    let (m, n) = scenario.dims();
    Array2::from_shape_fn((m, n), |(i, j)| {
        let l = scenario.agents[i].lower[j];
        let u = scenario.agents[i].upper[j];
        let lo = if l.is_finite() { l } else { u.min(1.0) - 2.0 };
        let hi = if u.is_finite() { u } else { l.max(-1.0) + 2.0 };
        rng.gen_range(lo..=hi)
    })
}

/// Compares the regularized price map against central finite differences of
/// the smoothed objective at randomly sampled balanced states. Returns the
/// largest relative error over all coordinates.
pub fn gradient_check(
    scenario: &Scenario,
    points: usize,
    h: f64,
    policy: ExecPolicy,
) -> Result<f64, VerifyError> {
    assert!(h > 0.0 && h.is_finite(), "step must be positive");
    let params: Vec<(&Vec<f64>, f64)> = scenario
        .agents
        .iter()
        .enumerate()
        .map(|(i, agent)| match &agent.pricing {
            PricingMode::Regularized { reference, beta } => Ok((reference, *beta)),
            PricingMode::LpSetValued => Err(VerifyError::WrongMode(format!(
                "agent {i} uses LP pricing; gradients exist only for regularized pricing"
            ))),
        })
        .collect::<Result<_, _>>()?;
    let polys = pricing::build_polytopes(scenario)?;
    let boxes = scenario.stationary_boxes();
    let mut rng = ChaCha8Rng::seed_from_u64(scenario.seed ^ 0x9e37_79b9_7f4a_7c15);
    let (m, n) = scenario.dims();

    let mut worst = 0.0f64;
    for _ in 0..points {
        let (x, _) = balance::project_market(&sample_state(scenario, &mut rng), &boxes, policy)?;
        let (_, grad) = pricing::market_eta(&x, scenario, &polys, policy)?;
        for i in 0..m {
            let (reference, beta) = params[i];
            let row: Vec<f64> = x.row(i).to_vec();
            for j in 0..n {
                let mut plus = row.clone();
                plus[j] += h;
                let mut minus = row.clone();
                minus[j] -= h;
                let f_plus = pricing::regularized_with(&polys[i], reference, beta, &plus)?.value;
                let f_minus = pricing::regularized_with(&polys[i], reference, beta, &minus)?.value;
                let fd = (f_plus - f_minus) / (2.0 * h);
                let g = grad[(i, j)];
                worst = worst.max((fd - g).abs() / (1.0 + g.abs()));
            }
        }
    }
    Ok(worst)
}

/// Which market objective a spot check targets.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ObjectiveKind {
    /// Total support function (LP pricing).
    Mu,
    /// Total smoothed objective (regularized pricing).
    Eta,
}

/// Midpoint convexity probe: samples state pairs and measures how much the
/// objective at the midpoint exceeds the chord average. Nonpositive values
/// up to rounding certify convexity on the sample.
pub fn convexity_check(
    kind: ObjectiveKind,
    scenario: &Scenario,
    pairs: usize,
    policy: ExecPolicy,
) -> Result<f64, VerifyError> {
    let polys = pricing::build_polytopes(scenario)?;
    let eval = |x: &MarketState| -> Result<f64, VerifyError> {
        let value = match kind {
            ObjectiveKind::Mu => pricing::market_mu(x, scenario, &polys, policy)?.0,
            ObjectiveKind::Eta => pricing::market_eta(x, scenario, &polys, policy)?.0,
        };
        Ok(value)
    };
    let expected_lp = matches!(kind, ObjectiveKind::Mu);
    for (i, agent) in scenario.agents.iter().enumerate() {
        let is_lp = matches!(agent.pricing, PricingMode::LpSetValued);
        if is_lp != expected_lp {
            return Err(VerifyError::WrongMode(format!(
                "agent {i} pricing does not match the {} objective",
                if expected_lp { "support" } else { "smoothed" }
            )));
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(scenario.seed ^ 0xd1b5_4a32_d192_ed03);
    let mut worst = f64::NEG_INFINITY;
    for _ in 0..pairs {
        let x = sample_state(scenario, &mut rng);
        let y = sample_state(scenario, &mut rng);
        let mid = (&x + &y).mapv(|v| 0.5 * v);
        let gap = eval(&mid)? - 0.5 * (eval(&x)? + eval(&y)?);
        worst = worst.max(gap);
    }
    Ok(worst)
}
